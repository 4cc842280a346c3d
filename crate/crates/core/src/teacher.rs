//! Tabular Q-learning teacher and a value-iteration oracle.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{rng_from_seed, EnumerableMdp, Mdp, StepKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_episodes: usize,
    pub training_episodes: usize,
    /// Start each training episode from a uniformly drawn reachable state.
    #[serde(default = "default_true")]
    pub exploring_starts: bool,
    /// Per-pair step size is `learning_rate / visits^lr_decay`.
    #[serde(default)]
    pub lr_decay: f64,
    /// Actions with identical transition distributions in a state share one
    /// Q-value, so the greedy choice among them is always the lowest index.
    #[serde(default = "default_true")]
    pub share_equivalent: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            gamma: 0.95,
            learning_rate: 0.5,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_episodes: 16_000,
            training_episodes: 20_000,
            exploring_starts: true,
            lr_decay: 0.6,
            share_equivalent: true,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("teacher.{m}")));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1] (got {})", self.gamma));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0 (got {})", self.learning_rate));
        }
        if !(self.epsilon_start >= self.epsilon_end && self.epsilon_end >= 0.0 && self.epsilon_start <= 1.0) {
            return bad(format!(
                "epsilon schedule must satisfy 1 >= start >= end >= 0 (got {} -> {})",
                self.epsilon_start, self.epsilon_end
            ));
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in [0, 1] (got {})", self.lr_decay));
        }
        if self.training_episodes == 0 {
            return bad("training_episodes must be >= 1".into());
        }
        Ok(())
    }

    fn epsilon(&self, episode: usize) -> f64 {
        if self.epsilon_decay_episodes == 0 || episode >= self.epsilon_decay_episodes {
            return self.epsilon_end;
        }
        let frac = episode as f64 / self.epsilon_decay_episodes as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// How the teacher's action distribution is read off its Q-values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DistMode {
    #[default]
    GreedyOnehot,
    Softmax { temperature: f64 },
}

impl DistMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DistMode::Softmax { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::Config(format!(
                    "softmax temperature must be > 0 (got {temperature})"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Lowest-index argmax.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A trained, immutable Q-table policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherPolicy {
    gamma: f64,
    action_count: usize,
    q_table: BTreeMap<u64, Vec<f64>>,
}

impl TeacherPolicy {
    pub fn from_table(gamma: f64, action_count: usize, q_table: BTreeMap<u64, Vec<f64>>) -> Result<Self> {
        if action_count == 0 {
            return Err(Error::Config("teacher action_count must be >= 1".into()));
        }
        for (k, q) in &q_table {
            if q.len() != action_count || q.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "teacher q-vector for state {k} must have {action_count} finite entries"
                )));
            }
        }
        Ok(TeacherPolicy {
            gamma,
            action_count,
            q_table,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn len(&self) -> usize {
        self.q_table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_table.is_empty()
    }

    pub fn q_table(&self) -> &BTreeMap<u64, Vec<f64>> {
        &self.q_table
    }

    /// Always refused: the teacher is fixed once training has finished.
    pub fn set_q(&mut self, _key: u64, _q: Vec<f64>) -> Result<()> {
        Err(Error::Frozen)
    }

    /// Q-vector for a state key; unseen states read as all zeros.
    pub fn q(&self, key: u64) -> Vec<f64> {
        match self.q_table.get(&key) {
            Some(q) => q.clone(),
            None => {
                log::debug!("teacher has no entry for state {key}; using zeros");
                vec![0.0; self.action_count]
            }
        }
    }

    pub fn action(&self, key: u64) -> usize {
        self.q_table.get(&key).map_or(0, |q| argmax(q))
    }

    pub fn value(&self, key: u64) -> f64 {
        self.q(key).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn dist(&self, key: u64, mode: DistMode) -> Result<Vec<f64>> {
        mode.validate()?;
        Ok(action_dist(&self.q(key), mode))
    }

    pub fn rescaled(&self, factor: f64) -> Self {
        let q_table = self
            .q_table
            .iter()
            .map(|(k, q)| (*k, q.iter().map(|v| v * factor).collect()))
            .collect();
        TeacherPolicy {
            gamma: self.gamma,
            action_count: self.action_count,
            q_table,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: TeacherPolicy = serde_json::from_str(&text)?;
        TeacherPolicy::from_table(raw.gamma, raw.action_count, raw.q_table)
    }
}

pub fn action_dist(q: &[f64], mode: DistMode) -> Vec<f64> {
    match mode {
        DistMode::GreedyOnehot => {
            let mut p = vec![0.0; q.len()];
            p[argmax(q)] = 1.0;
            p
        }
        DistMode::Softmax { temperature } => {
            let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = q.iter().map(|v| ((v - max) / temperature).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        }
    }
}

/// Epsilon-greedy tabular Q-learning. Truncated steps bootstrap; terminal
/// steps do not.
pub fn q_learning<M: Mdp>(mdp: &M, cfg: &TeacherConfig) -> Result<TeacherPolicy> {
    q_learning_from(mdp, cfg, None)
}

/// For each state key, the representative (lowest equivalent index) of every
/// action. Two actions are equivalent when their branch lists agree up to
/// order and probability rounding at 1e-12.
pub fn equivalent_actions<M: EnumerableMdp>(mdp: &M, states: &[M::State]) -> HashMap<u64, Vec<usize>> {
    let n = mdp.action_count();
    let signature = |s: &M::State, a: usize| {
        let mut sig: Vec<(i64, u64, Option<u64>)> = mdp
            .branches(s, a)
            .iter()
            .map(|b| {
                (
                    (b.prob * 1e12).round() as i64,
                    b.reward.to_bits(),
                    b.next.as_ref().map(|x| mdp.state_key(x)),
                )
            })
            .collect();
        sig.sort_unstable();
        sig
    };
    states
        .iter()
        .map(|s| {
            let sigs: Vec<_> = (0..n).map(|a| signature(s, a)).collect();
            let reps = (0..n)
                .map(|a| (0..=a).find(|&b| sigs[b] == sigs[a]).unwrap_or(a))
                .collect();
            (mdp.state_key(s), reps)
        })
        .collect()
}

/// Trains on an enumerable task, using exploring starts when configured and
/// the state space fits in memory.
pub fn train_teacher<M: EnumerableMdp>(mdp: &M, cfg: &TeacherConfig) -> Result<TeacherPolicy> {
    if !cfg.exploring_starts && !cfg.share_equivalent {
        return q_learning_from(mdp, cfg, None);
    }
    match mdp.states() {
        Ok(states) => {
            let classes = cfg.share_equivalent.then(|| equivalent_actions(mdp, &states));
            let starts = cfg.exploring_starts.then_some(states.as_slice());
            q_learning_impl(mdp, cfg, starts, classes.as_ref())
        }
        Err(Error::Capacity { .. }) => {
            log::warn!("state space too large to enumerate; training without exploring starts or action sharing");
            q_learning_from(mdp, cfg, None)
        }
        Err(e) => Err(e),
    }
}

/// Q-learning where each episode starts from a uniform draw of `starts` when
/// given, or from the task's initial-state distribution otherwise.
pub fn q_learning_from<M: Mdp>(
    mdp: &M,
    cfg: &TeacherConfig,
    starts: Option<&[M::State]>,
) -> Result<TeacherPolicy> {
    q_learning_impl(mdp, cfg, starts, None)
}

fn q_learning_impl<M: Mdp>(
    mdp: &M,
    cfg: &TeacherConfig,
    starts: Option<&[M::State]>,
    classes: Option<&HashMap<u64, Vec<usize>>>,
) -> Result<TeacherPolicy> {
    cfg.validate()?;
    let n = mdp.action_count();
    let mut rng = rng_from_seed(cfg.seed);
    let mut table: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut visits: HashMap<u64, Vec<u32>> = HashMap::new();
    for episode in 0..cfg.training_episodes {
        let eps = cfg.epsilon(episode);
        let mut state = match starts {
            Some(list) if !list.is_empty() => list[rng.gen_range(0..list.len())].clone(),
            _ => mdp.initial_state(&mut rng),
        };
        loop {
            let key = mdp.state_key(&state);
            let explore = rng.gen::<f64>() < eps;
            let random_action = rng.gen_range(0..n);
            let action = if explore {
                random_action
            } else {
                table.get(&key).map_or(0, |q| argmax(q))
            };
            let step = mdp.sample(&state, action, &mut rng)?;
            let bootstrap = match step.kind {
                StepKind::Terminal => 0.0,
                _ => table
                    .get(&mdp.state_key(&step.next))
                    .map_or(0.0, |q| q.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            };
            let reps = classes.and_then(|c| c.get(&key));
            let action = reps.map_or(action, |r| r[action]);
            let q = table.entry(key).or_insert_with(|| vec![0.0; n]);
            let target = step.reward + cfg.gamma * bootstrap;
            let alpha = if cfg.lr_decay > 0.0 {
                let count = &mut visits.entry(key).or_insert_with(|| vec![0; n])[action];
                *count += 1;
                cfg.learning_rate / (*count as f64).powf(cfg.lr_decay)
            } else {
                cfg.learning_rate
            };
            q[action] += alpha * (target - q[action]);
            if !q[action].is_finite() {
                return Err(Error::Numeric {
                    episode,
                    detail: format!("non-finite Q value for state {key}, action {action}"),
                });
            }
            if let Some(reps) = reps {
                let v = q[action];
                for (b, &r) in reps.iter().enumerate() {
                    if r == action {
                        q[b] = v;
                    }
                }
            }
            if step.kind != StepKind::Continue {
                break;
            }
            state = step.next;
        }
    }
    TeacherPolicy::from_table(cfg.gamma, n, table.into_iter().collect())
}

#[derive(Clone, Debug)]
pub struct ValueSolution {
    pub values: BTreeMap<u64, f64>,
    pub q: BTreeMap<u64, Vec<f64>>,
    pub policy: BTreeMap<u64, usize>,
    pub sweeps: usize,
}

impl ValueSolution {
    /// Actions within `tol` of the best Q-value at `key`.
    pub fn optimal_actions(&self, key: u64, tol: f64) -> Vec<usize> {
        let q = &self.q[&key];
        let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..q.len()).filter(|&a| q[a] >= best - tol).collect()
    }
}

const MAX_SWEEPS: usize = 100_000;

/// Fraction of reachable states where the teacher's greedy action is one of
/// the value-iteration optimal actions (Q within `tol` of the best).
pub fn oracle_agreement<M: EnumerableMdp>(
    mdp: &M,
    teacher: &TeacherPolicy,
    tol: f64,
) -> Result<f64> {
    let sol = value_iteration(mdp, teacher.gamma(), 1e-10)?;
    let states = mdp.states()?;
    if states.is_empty() {
        return Err(Error::Usage("no reachable states".into()));
    }
    let hits = states
        .iter()
        .filter(|s| {
            let key = mdp.state_key(s);
            sol.optimal_actions(key, tol).contains(&teacher.action(key))
        })
        .count();
    Ok(hits as f64 / states.len() as f64)
}

/// Synchronous value iteration until successive iterates differ by less
/// than `tol` in max-norm.
pub fn value_iteration<M: EnumerableMdp>(mdp: &M, gamma: f64, tol: f64) -> Result<ValueSolution> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must be in [0, 1] (got {gamma})")));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be > 0 (got {tol})")));
    }
    let states = mdp.states()?;
    let n = mdp.action_count();
    let index: HashMap<u64, usize> = states
        .iter()
        .enumerate()
        .map(|(i, s)| (mdp.state_key(s), i))
        .collect();
    // (prob, reward, successor index)
    let model: Vec<Vec<Vec<(f64, f64, Option<usize>)>>> = states
        .iter()
        .map(|s| {
            (0..n)
                .map(|a| {
                    mdp.branches(s, a)
                        .into_iter()
                        .map(|b| (b.prob, b.reward, b.next.map(|t| index[&mdp.state_key(&t)])))
                        .collect()
                })
                .collect()
        })
        .collect();
    let backup = |v: &[f64], i: usize| -> Vec<f64> {
        model[i]
            .iter()
            .map(|branches| {
                branches
                    .iter()
                    .map(|&(p, r, next)| p * (r + gamma * next.map_or(0.0, |j| v[j])))
                    .sum()
            })
            .collect()
    };
    let mut v = vec![0.0; states.len()];
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let next: Vec<f64> = (0..states.len())
            .map(|i| backup(&v, i).into_iter().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if delta < tol {
            break;
        }
        if sweeps >= MAX_SWEEPS {
            return Err(Error::Numeric {
                episode: sweeps,
                detail: format!("value iteration did not converge (delta {delta})"),
            });
        }
    }
    let mut sol = ValueSolution {
        values: BTreeMap::new(),
        q: BTreeMap::new(),
        policy: BTreeMap::new(),
        sweeps,
    };
    for (i, s) in states.iter().enumerate() {
        let key = mdp.state_key(s);
        let q = backup(&v, i);
        sol.policy.insert(key, argmax(&q));
        sol.values.insert(key, v[i]);
        sol.q.insert(key, q);
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, EnvSpec};
    use crate::error::Result;
    use crate::mdp::{Branch, Sampled, SimRng};

    /// Self-loop with reward 1 that is truncated after `horizon` steps.
    struct Loop {
        horizon: usize,
    }

    impl Mdp for Loop {
        type State = usize;
        fn action_count(&self) -> usize {
            1
        }
        fn state_key(&self, _: &usize) -> u64 {
            0
        }
        fn initial_state(&self, _: &mut SimRng) -> usize {
            0
        }
        fn sample(&self, t: &usize, _: usize, _: &mut SimRng) -> Result<Sampled<usize>> {
            let kind = if t + 1 >= self.horizon {
                StepKind::Truncated
            } else {
                StepKind::Continue
            };
            Ok(Sampled { next: t + 1, reward: 1.0, kind })
        }
    }

    /// Corridor 3 -> 2 -> 1 -> goal; reward 1 on reaching the goal.
    /// Action 0 steps toward the goal, action 1 stays.
    struct Corridor;

    impl Mdp for Corridor {
        type State = u64;
        fn action_count(&self) -> usize {
            2
        }
        fn state_key(&self, s: &u64) -> u64 {
            *s
        }
        fn initial_state(&self, _: &mut SimRng) -> u64 {
            3
        }
        fn sample(&self, _: &u64, _: usize, _: &mut SimRng) -> Result<Sampled<u64>> {
            unimplemented!("oracle-only mdp")
        }
    }

    impl EnumerableMdp for Corridor {
        fn states(&self) -> Result<Vec<u64>> {
            Ok(vec![1, 2, 3])
        }
        fn branches(&self, s: &u64, a: usize) -> Vec<Branch<u64>> {
            match (a, *s) {
                (0, 1) => vec![Branch { prob: 1.0, reward: 1.0, next: None }],
                (0, d) => vec![Branch { prob: 1.0, reward: 0.0, next: Some(d - 1) }],
                (_, d) => vec![Branch { prob: 1.0, reward: 0.0, next: Some(d) }],
            }
        }
    }

    #[test]
    fn single_state_q_converges_to_geometric_sum() {
        let cfg = TeacherConfig {
            gamma: 0.9,
            learning_rate: 0.05,
            epsilon_start: 0.0,
            epsilon_end: 0.0,
            epsilon_decay_episodes: 0,
            training_episodes: 200,
            exploring_starts: false,
            lr_decay: 0.0,
            share_equivalent: false,
            seed: 1,
        };
        let t = q_learning(&Loop { horizon: 100 }, &cfg).unwrap();
        assert!((t.q(0)[0] - 10.0).abs() < 1e-3, "{}", t.q(0)[0]);
    }

    #[test]
    fn corridor_values_are_discounted_chain() {
        let sol = value_iteration(&Corridor, 0.9, 1e-12).unwrap();
        for d in 1..=3u64 {
            let expected = 0.9f64.powi(d as i32 - 1);
            assert!((sol.values[&d] - expected).abs() < 1e-9);
            assert_eq!(sol.policy[&d], 0);
        }
    }

    #[test]
    fn myopic_values_are_immediate_rewards() {
        let sol = value_iteration(&Corridor, 0.0, 1e-12).unwrap();
        assert_eq!(sol.values[&1], 1.0);
        assert_eq!(sol.values[&2], 0.0);
        assert_eq!(sol.values[&3], 0.0);

        let env = Env::new(EnvSpec::gridnav(3, 3)).unwrap();
        let sol = value_iteration(&env, 0.0, 1e-12).unwrap();
        for s in env.enumerate_states().unwrap() {
            let key = env.state_key(&s);
            let best = (0..4)
                .map(|a| env.branches(&s, a).iter().map(|b| b.prob * b.reward).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((sol.values[&key] - best).abs() < 1e-12);
        }
    }

    #[test]
    fn gridnav_value_iteration_is_a_fixed_point() {
        let env = Env::new(EnvSpec::gridnav(3, 3)).unwrap();
        let tol = 1e-10;
        let sol = value_iteration(&env, 0.95, tol).unwrap();
        // one more Bellman backup, computed independently from the branches
        for s in env.enumerate_states().unwrap() {
            let key = env.state_key(&s);
            let backed_up = (0..4)
                .map(|a| {
                    env.branches(&s, a)
                        .iter()
                        .map(|b| {
                            let cont = b.next.as_ref().map_or(0.0, |n| sol.values[&env.state_key(n)]);
                            b.prob * (b.reward + 0.95 * cont)
                        })
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((backed_up - sol.values[&key]).abs() < tol * 20.0);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let env = Env::new(EnvSpec::gridnav(3, 3)).unwrap();
        let cfg = TeacherConfig {
            training_episodes: 500,
            epsilon_decay_episodes: 400,
            ..TeacherConfig::default()
        };
        assert_eq!(q_learning(&env, &cfg).unwrap(), q_learning(&env, &cfg).unwrap());
    }

    #[test]
    fn gridnav_teacher_matches_oracle() {
        let env = Env::new(EnvSpec::gridnav(5, 5)).unwrap();
        let teacher = train_teacher(&env, &TeacherConfig::default()).unwrap();
        let frac = oracle_agreement(&env, &teacher, 1e-9).unwrap();
        assert!(frac >= 0.95, "agreement with value iteration {frac}");
    }

    #[test]
    fn tie_break_and_defaults() {
        let mut table = BTreeMap::new();
        table.insert(1, vec![1.0, 3.0, 3.0]);
        table.insert(2, vec![5.0, 0.0, 0.0]);
        let t = TeacherPolicy::from_table(0.9, 3, table).unwrap();
        assert_eq!(t.action(1), 1);
        assert_eq!(t.action(2), 0);
        assert_eq!(t.q(99), vec![0.0; 3]);
        assert_eq!(argmax(&t.q(1)), t.action(1));
        assert_eq!(t.value(1), 3.0);
    }

    #[test]
    fn q_vectors_must_be_finite() {
        let mut table = BTreeMap::new();
        table.insert(1, vec![f64::NAN, 0.0]);
        assert!(TeacherPolicy::from_table(0.9, 2, table).is_err());
    }

    #[test]
    fn frozen_teacher_refuses_mutation() {
        let mut t = TeacherPolicy::from_table(0.9, 2, BTreeMap::new()).unwrap();
        assert!(matches!(t.set_q(0, vec![1.0, 2.0]), Err(Error::Frozen)));
    }

    #[test]
    fn distributions() {
        let q = [5.0, 0.0];
        assert_eq!(action_dist(&q, DistMode::GreedyOnehot), vec![1.0, 0.0]);
        let p = action_dist(&[2.0, 2.0, 2.0], DistMode::Softmax { temperature: 0.7 });
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = action_dist(&q, DistMode::Softmax { temperature: 1e-3 });
        assert!(p[0] >= 0.999);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(DistMode::Softmax { temperature: 0.0 }.validate().is_err());
        let t = TeacherPolicy::from_table(0.9, 2, BTreeMap::new()).unwrap();
        assert!(t.dist(0, DistMode::Softmax { temperature: -1.0 }).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let env = Env::new(EnvSpec::gridnav(3, 3)).unwrap();
        let cfg = TeacherConfig {
            training_episodes: 300,
            ..TeacherConfig::default()
        };
        let t = q_learning(&env, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.json");
        t.save(&path).unwrap();
        let back = TeacherPolicy::load(&path).unwrap();
        for (k, q) in t.q_table() {
            let b = &back.q_table()[k];
            assert!(q.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back, t);
    }
}
