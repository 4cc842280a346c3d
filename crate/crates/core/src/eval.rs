//! Rollouts, metrics and exhaustive agreement oracles.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Env, Outcome, State};
use crate::error::{Error, Result};
use crate::mdp::{episode_rng, SimRng};
use crate::student::StudentPolicy;
use crate::teacher::TeacherPolicy;

/// What a policy sees: the teacher's table key and the student's features.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub key: u64,
    pub features: &'a [f64],
}

pub trait Policy: Sync {
    fn act(&self, obs: &Observation<'_>, rng: &mut SimRng) -> Result<usize>;
}

/// A policy that ignores the RNG.
pub trait Deterministic: Sync {
    fn decide(&self, obs: &Observation<'_>) -> Result<usize>;
}

impl<T: Deterministic> Policy for T {
    fn act(&self, obs: &Observation<'_>, _rng: &mut SimRng) -> Result<usize> {
        self.decide(obs)
    }
}

impl<D: Deterministic + ?Sized> Deterministic for &D {
    fn decide(&self, obs: &Observation<'_>) -> Result<usize> {
        (**self).decide(obs)
    }
}

impl Deterministic for TeacherPolicy {
    fn decide(&self, obs: &Observation<'_>) -> Result<usize> {
        Ok(self.action(obs.key))
    }
}

impl Deterministic for StudentPolicy {
    fn decide(&self, obs: &Observation<'_>) -> Result<usize> {
        self.predict(obs.features)
    }
}

/// Per-step Bernoulli blend of teacher and student. Without a student, the
/// teacher acts, but the coin is still drawn so RNG streams stay aligned.
pub struct MixedPolicy<'a> {
    pub teacher: &'a TeacherPolicy,
    pub student: Option<&'a StudentPolicy>,
    pub beta: f64,
}

impl Policy for MixedPolicy<'_> {
    fn act(&self, obs: &Observation<'_>, rng: &mut SimRng) -> Result<usize> {
        let u: f64 = rng.gen();
        match self.student {
            Some(s) if u >= self.beta => s.predict(obs.features),
            _ => Ok(self.teacher.action(obs.key)),
        }
    }
}

pub struct RandomPolicy {
    pub action_count: usize,
}

impl Policy for RandomPolicy {
    fn act(&self, _obs: &Observation<'_>, rng: &mut SimRng) -> Result<usize> {
        Ok(rng.gen_range(0..self.action_count))
    }
}

pub struct FixedAction(pub usize);

impl Deterministic for FixedAction {
    fn decide(&self, _obs: &Observation<'_>) -> Result<usize> {
        Ok(self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub key: u64,
    pub features: Vec<f64>,
    pub teacher_action: usize,
    pub q_vector: Vec<f64>,
    /// Action chosen by the rolled-out policy (before slip).
    pub action: usize,
    pub reward: f64,
}

impl Step {
    pub fn observation(&self) -> Observation<'_> {
        Observation {
            key: self.key,
            features: &self.features,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub outcome: Outcome,
    pub episode_return: f64,
}

impl Trajectory {
    /// Fraction of steps where the executed action matches the teacher.
    pub fn agreement(&self) -> f64 {
        if self.steps.is_empty() {
            return 1.0;
        }
        let hits = self.steps.iter().filter(|s| s.action == s.teacher_action).count();
        hits as f64 / self.steps.len() as f64
    }
}

fn run_episode(
    env: &Env,
    teacher: &TeacherPolicy,
    policy: &dyn Policy,
    mut rng: SimRng,
) -> Result<Trajectory> {
    let mut state = env.reset(rng.gen());
    let mut steps = Vec::new();
    let mut total = 0.0;
    loop {
        let key = env.state_key(&state);
        let features = env.featurize(&state);
        let action = policy.act(&Observation { key, features: &features }, &mut rng)?;
        let q_vector = teacher.q(key);
        let teacher_action = teacher.action(key);
        let res = env.step(&state, action, &mut rng)?;
        total += res.reward;
        steps.push(Step {
            key,
            features,
            teacher_action,
            q_vector,
            action,
            reward: res.reward,
        });
        if res.terminal {
            return Ok(Trajectory {
                steps,
                outcome: res.outcome,
                episode_return: total,
            });
        }
        state = res.next_state;
    }
}

/// Rolls out `episodes` episodes; episode `i` uses its own stream of `seed`,
/// so the batch is identical however rayon schedules it.
pub fn rollout(
    env: &Env,
    teacher: &TeacherPolicy,
    policy: &dyn Policy,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..episodes)
        .into_par_iter()
        .map(|i| run_episode(env, teacher, policy, episode_rng(seed, i as u64)))
        .collect()
}

fn require_episodes(trajs: &[Trajectory]) -> Result<()> {
    if trajs.is_empty() {
        Err(Error::Usage("metrics need at least one episode".into()))
    } else {
        Ok(())
    }
}

pub fn win_rate(trajs: &[Trajectory]) -> Result<f64> {
    require_episodes(trajs)?;
    let wins = trajs.iter().filter(|t| t.outcome == Outcome::Win).count();
    Ok(wins as f64 / trajs.len() as f64)
}

pub fn mean_return(trajs: &[Trajectory]) -> Result<f64> {
    require_episodes(trajs)?;
    Ok(trajs.iter().map(|t| t.episode_return).sum::<f64>() / trajs.len() as f64)
}

pub fn consistency<'a>(
    teacher: &TeacherPolicy,
    student: &dyn Deterministic,
    states: impl IntoIterator<Item = Observation<'a>>,
) -> Result<f64> {
    let mut n = 0usize;
    let mut hits = 0usize;
    for obs in states {
        n += 1;
        if student.decide(&obs)? == teacher.action(obs.key) {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(Error::Usage("consistency needs at least one state".into()));
    }
    Ok(hits as f64 / n as f64)
}

pub fn normalize_return(r: f64, bounds: (f64, f64)) -> f64 {
    ((r - bounds.0) / (bounds.1 - bounds.0)).clamp(0.0, 1.0)
}

/// Mean over episodes of the normalized return and the consistency, halved.
pub fn composite_phi(returns: &[f64], consistencies: &[f64], bounds: (f64, f64)) -> Result<f64> {
    if returns.len() != consistencies.len() {
        return Err(Error::Usage(format!(
            "{} returns but {} consistencies",
            returns.len(),
            consistencies.len()
        )));
    }
    if returns.is_empty() {
        return Err(Error::Usage("composite metric needs at least one episode".into()));
    }
    if !(bounds.1 > bounds.0) {
        return Err(Error::Usage(format!("reward bounds {bounds:?} are empty")));
    }
    let sum: f64 = returns
        .iter()
        .zip(consistencies)
        .map(|(&r, &a)| normalize_return(r, bounds) + a)
        .sum();
    Ok((sum / (2.0 * returns.len() as f64)).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateSource {
    /// States visited by the evaluated student.
    #[default]
    Student,
    /// States visited by the teacher.
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub win_rate: f64,
    pub mean_return: f64,
    pub return_std: f64,
    pub consistency: f64,
    pub phi: f64,
    pub episodes: usize,
    pub samples: usize,
    pub seed: u64,
}

/// Metrics of a batch rolled out by the evaluated policy itself, so each
/// step's executed action is that policy's choice.
pub fn summarize(env: &Env, trajs: &[Trajectory], seed: u64) -> Result<MetricsRecord> {
    require_episodes(trajs)?;
    let per: Vec<f64> = trajs.iter().map(Trajectory::agreement).collect();
    let steps: usize = trajs.iter().map(|t| t.steps.len()).sum();
    let hits: usize = trajs
        .iter()
        .flat_map(|t| &t.steps)
        .filter(|s| s.action == s.teacher_action)
        .count();
    summary(env, trajs, &per, hits as f64 / steps as f64, steps, seed)
}

fn summary(
    env: &Env,
    trajs: &[Trajectory],
    per_episode: &[f64],
    pooled: f64,
    samples: usize,
    seed: u64,
) -> Result<MetricsRecord> {
    let returns: Vec<f64> = trajs.iter().map(|t| t.episode_return).collect();
    let mean = mean_return(trajs)?;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / returns.len() as f64;
    Ok(MetricsRecord {
        win_rate: win_rate(trajs)?,
        mean_return: mean,
        return_std: var.sqrt(),
        consistency: pooled,
        phi: composite_phi(&returns, per_episode, env.spec().reward_bounds)?,
        episodes: trajs.len(),
        samples,
        seed,
    })
}

pub fn evaluate(
    env: &Env,
    teacher: &TeacherPolicy,
    student: &dyn Deterministic,
    episodes: usize,
    seed: u64,
    source: StateSource,
) -> Result<MetricsRecord> {
    let trajs = rollout(env, teacher, &student, episodes, seed)?;
    match source {
        StateSource::Student => summarize(env, &trajs, seed),
        StateSource::Teacher => {
            require_episodes(&trajs)?;
            let guide = rollout(env, teacher, teacher, episodes, seed)?;
            let per = guide
                .iter()
                .map(|t| consistency(teacher, student, t.steps.iter().map(Step::observation)))
                .collect::<Result<Vec<_>>>()?;
            let steps: Vec<&Step> = guide.iter().flat_map(|t| &t.steps).collect();
            let pooled = consistency(teacher, student, steps.iter().map(|s| s.observation()))?;
            summary(env, &trajs, &per, pooled, steps.len(), seed)
        }
    }
}

/// Exact agreement over every enumerated non-terminal state.
pub fn brute_force_agreement(
    env: &Env,
    teacher: &TeacherPolicy,
    student: &dyn Deterministic,
) -> Result<f64> {
    let states = env.enumerate_states()?;
    let feats: Vec<(u64, Vec<f64>)> = states
        .iter()
        .map(|s| (env.state_key(s), env.featurize(s)))
        .collect();
    consistency(
        teacher,
        student,
        feats.iter().map(|(k, f)| Observation { key: *k, features: f }),
    )
}

/// Expected per-step agreement under the state distribution induced by
/// `behavior`, computed by propagating exact state probabilities through
/// time. This is the quantity pooled sampled consistency estimates.
pub fn visitation_agreement(
    env: &Env,
    teacher: &TeacherPolicy,
    behavior: &dyn Deterministic,
    student: &dyn Deterministic,
) -> Result<f64> {
    let starts = env.initial_states();
    let p0 = 1.0 / starts.len() as f64;
    let mut layer: HashMap<State, f64> = HashMap::new();
    for s in starts {
        *layer.entry(s).or_default() += p0;
    }
    let (mut mass, mut agree) = (0.0, 0.0);
    while !layer.is_empty() {
        let mut next: HashMap<State, f64> = HashMap::new();
        for (state, p) in &layer {
            let key = env.state_key(state);
            let features = env.featurize(state);
            let obs = Observation { key, features: &features };
            mass += p;
            if student.decide(&obs)? == teacher.action(key) {
                agree += p;
            }
            for (q, res) in env.transitions(state, behavior.decide(&obs)?) {
                if !res.terminal {
                    *next.entry(res.next_state).or_default() += p * q;
                }
            }
        }
        layer = next;
    }
    Ok(agree / mass)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub env: String,
    pub seed: u64,
    pub iteration: usize,
    pub win_rate: f64,
    pub mean_return: f64,
    pub consistency: f64,
    pub phi: f64,
    pub samples: usize,
}

/// Writes rows as CSV, preceded by `# <comment>` lines.
pub fn write_metrics_csv(path: &Path, comments: &[String], rows: &[MetricsRow]) -> Result<()> {
    let mut buf = Vec::new();
    for c in comments {
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        if rows.is_empty() {
            w.write_record([
                "method", "env", "seed", "iteration", "win_rate", "mean_return", "consistency",
                "phi", "samples",
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    rdr.deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
