//! DAGGER, VIPER and FIPE extraction loops.
//!
//! All three share one sampling loop: roll out a per-step blend of teacher
//! and current student, relabel every visited state with the teacher, and
//! refit on the aggregate. VIPER weights each row by the teacher's Q-spread.
//! FIPE keeps a round's data only if the refitted student beats the current
//! one on fidelity-penalized return, and ranks accepted students in a small
//! library.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::env::Env;
use crate::error::{Error, Result};
use crate::eval::{
    self, rollout, Deterministic, MetricsRecord, MixedPolicy, Observation, Policy, Trajectory,
};
use crate::mdp::{derive_seed, SimRng};
use crate::student::{Dataset, Sample, StudentConfig, StudentKind, StudentPolicy};
use crate::teacher::{DistMode, TeacherPolicy};

const TAG_SAMPLE: u64 = 1;
const TAG_ACCEPT: u64 = 2;
const TAG_COMPETE: u64 = 3;
const TAG_EVAL: u64 = 4;

fn tag(kind: u64, iteration: usize) -> u64 {
    (kind << 32) | iteration as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dagger,
    Viper,
    Fipe,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dagger, Method::Viper, Method::Fipe];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dagger => "dagger",
            Method::Viper => "viper",
            Method::Fipe => "fipe",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dagger" => Ok(Method::Dagger),
            "viper" => Ok(Method::Viper),
            "fipe" => Ok(Method::Fipe),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected dagger, viper or fipe)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub method: Method,
    pub iterations: usize,
    pub episodes_per_iter: usize,
    pub beta0: f64,
    pub beta_decay: f64,
    pub eta: f64,
    pub library_max: usize,
    pub competition_episodes: usize,
    pub accept_window: usize,
    /// Episodes used for the per-iteration metrics.
    pub eval_episodes: usize,
    /// When false, FIPE commits every round and skips competition.
    pub acceptance: bool,
    /// Teacher action distribution used by the fidelity term.
    pub fidelity_mode: DistMode,
    /// Sum the squared probability gap over all actions instead of only the
    /// executed one.
    pub fidelity_all_actions: bool,
    /// Stop early once the aggregate dataset holds this many rows;
    /// `iterations` stays a hard cap.
    pub sample_budget: Option<usize>,
    pub seed: u64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            method: Method::Fipe,
            iterations: 10,
            episodes_per_iter: 10,
            beta0: 1.0,
            beta_decay: 0.7,
            eta: 0.5,
            library_max: 10,
            competition_episodes: 5,
            accept_window: 10,
            eval_episodes: 10,
            acceptance: true,
            fidelity_mode: DistMode::GreedyOnehot,
            fidelity_all_actions: false,
            sample_budget: None,
            seed: 0,
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("extract.{m}")));
        let positive = [
            ("iterations", self.iterations),
            ("episodes_per_iter", self.episodes_per_iter),
            ("library_max", self.library_max),
            ("competition_episodes", self.competition_episodes),
            ("accept_window", self.accept_window),
            ("eval_episodes", self.eval_episodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.beta0) {
            return bad(format!("beta0 must be in [0, 1] (got {})", self.beta0));
        }
        if !(0.0..=1.0).contains(&self.beta_decay) {
            return bad(format!("beta_decay must be in [0, 1] (got {})", self.beta_decay));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be finite and >= 0 (got {})", self.eta));
        }
        self.fidelity_mode
            .validate()
            .map_err(|e| Error::Config(format!("extract.fidelity_mode: {e}")))
    }

    /// Teacher probability for round `i` (1-based).
    pub fn beta(&self, i: usize) -> f64 {
        self.beta0 * self.beta_decay.powi(i as i32 - 1)
    }
}

pub fn mixed_action(
    teacher: &TeacherPolicy,
    student: &StudentPolicy,
    beta: f64,
    obs: &Observation<'_>,
    rng: &mut SimRng,
) -> Result<usize> {
    MixedPolicy {
        teacher,
        student: Some(student),
        beta,
    }
    .act(obs, rng)
}

/// Spread of the teacher's action values, `max q - min q`.
pub fn viper_weight(q: &[f64]) -> f64 {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = q.iter().copied().fold(f64::INFINITY, f64::min);
    if q.is_empty() {
        0.0
    } else {
        (max - min).max(0.0)
    }
}

pub fn fidelity_reward(u_t: f64, teacher_prob: f64, student_prob: f64, eta: f64) -> f64 {
    if eta == 0.0 {
        return u_t;
    }
    let d = teacher_prob - student_prob;
    u_t - eta * d * d
}

/// The fidelity part of one step, `eta * (pi(a|s) - pi~(a|s))^2`, or its
/// sum over actions.
fn step_penalty(
    teacher_dist: &[f64],
    student_action: usize,
    executed: usize,
    eta: f64,
    all_actions: bool,
) -> f64 {
    let onehot = |a: usize| if a == student_action { 1.0 } else { 0.0 };
    if all_actions {
        let sq: f64 = teacher_dist
            .iter()
            .enumerate()
            .map(|(a, p)| (p - onehot(a)).powi(2))
            .sum();
        eta * sq
    } else {
        let d = teacher_dist[executed] - onehot(executed);
        eta * d * d
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Fidelity {
    pub eta: f64,
    pub mode: DistMode,
    pub all_actions: bool,
}

impl Fidelity {
    pub fn from_config(cfg: &ExtractConfig) -> Self {
        Fidelity {
            eta: cfg.eta,
            mode: cfg.fidelity_mode,
            all_actions: cfg.fidelity_all_actions,
        }
    }

    fn penalties(
        &self,
        traj: &Trajectory,
        teacher: &TeacherPolicy,
        student: &dyn Deterministic,
    ) -> Result<Vec<f64>> {
        traj.steps
            .iter()
            .map(|s| {
                let pi = teacher.dist(s.key, self.mode)?;
                let sa = student.decide(&s.observation())?;
                Ok(step_penalty(&pi, sa, s.action, self.eta, self.all_actions))
            })
            .collect()
    }
}

/// Sum over steps of the fidelity-induced reward, using each step's own
/// reward and probabilities at the executed action.
pub fn episode_value(
    traj: &Trajectory,
    teacher: &TeacherPolicy,
    student: &dyn Deterministic,
    fidelity: &Fidelity,
) -> Result<f64> {
    if fidelity.eta == 0.0 {
        return Ok(traj.steps.iter().map(|s| s.reward).sum());
    }
    let pen = fidelity.penalties(traj, teacher, student)?;
    Ok(traj.steps.iter().zip(pen).map(|(s, p)| s.reward - p).sum())
}

/// Strict improvement; ties keep the incumbent.
pub fn accept_candidate(u_new: f64, u_old: f64) -> bool {
    u_new > u_old
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub policy: StudentPolicy,
    /// Latest competition score; `None` when competition was skipped.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyLibrary {
    max_size: usize,
    entries: Vec<LibraryEntry>,
}

impl PolicyLibrary {
    pub fn new(max_size: usize) -> Self {
        PolicyLibrary {
            max_size: max_size.max(1),
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn head(&self) -> Option<&StudentPolicy> {
        self.entries.first().map(|e| &e.policy)
    }

    pub fn scores(&self) -> Vec<Option<f64>> {
        self.entries.iter().map(|e| e.score).collect()
    }

    /// Appends `candidate`, rescores every entry, runs one adjacent-swap pass
    /// from the tail to the head, then evicts the tail if over capacity.
    pub fn update(
        &mut self,
        candidate: StudentPolicy,
        mut evaluate: impl FnMut(&StudentPolicy) -> Result<f64>,
    ) -> Result<()> {
        self.entries.push(LibraryEntry {
            policy: candidate,
            score: None,
        });
        for e in &mut self.entries {
            e.score = Some(evaluate(&e.policy)?);
        }
        for j in (1..self.entries.len()).rev() {
            if self.entries[j].score > self.entries[j - 1].score {
                self.entries.swap(j, j - 1);
            }
        }
        if self.entries.len() > self.max_size {
            self.entries.pop();
        }
        Ok(())
    }

    /// Puts `policy` at the head without competing.
    pub fn promote(&mut self, policy: StudentPolicy) {
        self.entries.insert(0, LibraryEntry { policy, score: None });
        self.entries.truncate(self.max_size);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub beta: f64,
    pub dataset_size: usize,
    pub accepted: bool,
    pub win_rate: f64,
    pub mean_return: f64,
    pub consistency: f64,
    pub phi: f64,
    pub mean_fidelity_penalty: f64,
    pub library_scores: Vec<Option<f64>>,
    pub candidate_value: Option<f64>,
    pub incumbent_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub method: Method,
    pub student_kind: StudentKind,
    pub policy: StudentPolicy,
    pub iterations: Vec<IterationRecord>,
    pub library_scores: Vec<Option<f64>>,
    /// Episodes sampled in each round, kept or not.
    #[serde(skip)]
    pub trajectories: Vec<Vec<Trajectory>>,
    #[serde(skip)]
    pub library: PolicyLibrary,
    #[serde(skip)]
    pub dataset: Dataset,
}

impl ExtractionResult {
    pub fn final_record(&self) -> &IterationRecord {
        self.iterations.last().expect("at least one iteration")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Weighting {
    Unit,
    QSpread,
}

fn relabel(trajs: &[Trajectory], weighting: Weighting, data: &mut Dataset) -> Result<()> {
    for s in trajs.iter().flat_map(|t| &t.steps) {
        let weight = match weighting {
            Weighting::Unit => 1.0,
            Weighting::QSpread => viper_weight(&s.q_vector),
        };
        data.push(Sample {
            features: s.features.clone(),
            teacher_action: s.teacher_action,
            q_vector: s.q_vector.clone(),
            weight,
        })?;
    }
    Ok(())
}

fn fit(scfg: &StudentConfig, data: &Dataset) -> Result<StudentPolicy> {
    if data.rows().iter().all(|r| r.weight == 0.0) {
        log::warn!(
            "all {} sample weights are zero; fitting with uniform weights",
            data.len()
        );
        let mut uniform = data.clone();
        uniform.rows_mut().iter_mut().for_each(|r| r.weight = 1.0);
        return scfg.fit(&uniform);
    }
    scfg.fit(data)
}

struct Ctx<'a> {
    env: &'a Env,
    teacher: &'a TeacherPolicy,
    cfg: &'a ExtractConfig,
    fidelity: Fidelity,
}

impl Ctx<'_> {
    /// Mean fidelity-induced return of `policy` over `episodes` rollouts.
    fn score(&self, policy: &StudentPolicy, episodes: usize, seed: u64) -> Result<f64> {
        let trajs = rollout(self.env, self.teacher, policy, episodes, seed)?;
        let mut total = 0.0;
        for t in &trajs {
            total += episode_value(t, self.teacher, policy, &self.fidelity)?;
        }
        Ok(total / trajs.len() as f64)
    }

    fn metrics(&self, policy: &StudentPolicy) -> Result<(MetricsRecord, f64)> {
        let seed = derive_seed(self.cfg.seed, tag(TAG_EVAL, 0));
        let trajs = rollout(self.env, self.teacher, policy, self.cfg.eval_episodes, seed)?;
        let record = eval::summarize(self.env, &trajs, seed)?;
        let mut pen = 0.0;
        let mut n = 0usize;
        for t in &trajs {
            for p in self.fidelity.penalties(t, self.teacher, policy)? {
                pen += p;
                n += 1;
            }
        }
        Ok((record, pen / n.max(1) as f64))
    }
}

fn run(
    env: &Env,
    teacher: &TeacherPolicy,
    scfg: &StudentConfig,
    cfg: &ExtractConfig,
    method: Method,
    weighting: Weighting,
) -> Result<ExtractionResult> {
    cfg.validate()?;
    scfg.validate()?;
    if teacher.action_count() != env.action_count() {
        return Err(Error::Usage(format!(
            "teacher has {} actions, environment has {}",
            teacher.action_count(),
            env.action_count()
        )));
    }
    let ctx = Ctx {
        env,
        teacher,
        cfg,
        fidelity: Fidelity::from_config(cfg),
    };
    let mut data = Dataset::new(env.action_count());
    let mut current: Option<StudentPolicy> = None;
    let mut library = PolicyLibrary::new(cfg.library_max);
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut sampled = Vec::with_capacity(cfg.iterations);

    for i in 1..=cfg.iterations {
        let beta = cfg.beta(i);
        let mixed = MixedPolicy {
            teacher,
            student: current.as_ref(),
            beta,
        };
        let trajs = rollout(
            env,
            teacher,
            &mixed,
            cfg.episodes_per_iter,
            derive_seed(cfg.seed, tag(TAG_SAMPLE, i)),
        )?;
        let mut cand_data = data.clone();
        relabel(&trajs, weighting, &mut cand_data)?;
        sampled.push(trajs);
        let candidate = fit(scfg, &cand_data)?;

        let mut accepted = true;
        let (mut cand_value, mut inc_value) = (None, None);
        if method == Method::Fipe {
            if !cfg.acceptance {
                library.promote(candidate.clone());
            } else {
                if let Some(old) = &current {
                    let seed = derive_seed(cfg.seed, tag(TAG_ACCEPT, i));
                    let u_new = ctx.score(&candidate, cfg.accept_window, seed)?;
                    let u_old = ctx.score(old, cfg.accept_window, seed)?;
                    accepted = accept_candidate(u_new, u_old);
                    cand_value = Some(u_new);
                    inc_value = Some(u_old);
                }
                if accepted {
                    let seed = derive_seed(cfg.seed, tag(TAG_COMPETE, i));
                    library.update(candidate.clone(), |p| {
                        ctx.score(p, cfg.competition_episodes, seed)
                    })?;
                }
            }
        }
        if accepted {
            data = cand_data;
            current = Some(candidate);
        }
        log::debug!(
            "{method} iteration {i}: beta {beta:.3}, {} rows, accepted {accepted}",
            data.len()
        );

        let output = match method {
            Method::Fipe => library.head().or(current.as_ref()),
            _ => current.as_ref(),
        }
        .expect("first round always commits");
        let (m, penalty) = ctx.metrics(output)?;
        records.push(IterationRecord {
            iteration: i,
            beta,
            dataset_size: data.len(),
            accepted,
            win_rate: m.win_rate,
            mean_return: m.mean_return,
            consistency: m.consistency,
            phi: m.phi,
            mean_fidelity_penalty: penalty,
            library_scores: library.scores(),
            candidate_value: cand_value,
            incumbent_value: inc_value,
        });
        if cfg.sample_budget.is_some_and(|b| data.len() >= b) {
            break;
        }
    }

    let policy = match method {
        Method::Fipe => library.head().cloned().or(current),
        _ => current,
    }
    .expect("first round always commits");
    Ok(ExtractionResult {
        method,
        student_kind: scfg.kind,
        policy,
        iterations: records,
        library_scores: library.scores(),
        trajectories: sampled,
        library,
        dataset: data,
    })
}

pub fn run_dagger(
    env: &Env,
    teacher: &TeacherPolicy,
    scfg: &StudentConfig,
    cfg: &ExtractConfig,
) -> Result<ExtractionResult> {
    run(env, teacher, scfg, cfg, Method::Dagger, Weighting::Unit)
}

pub fn run_viper(
    env: &Env,
    teacher: &TeacherPolicy,
    scfg: &StudentConfig,
    cfg: &ExtractConfig,
) -> Result<ExtractionResult> {
    run(env, teacher, scfg, cfg, Method::Viper, Weighting::QSpread)
}

pub fn run_fipe(
    env: &Env,
    teacher: &TeacherPolicy,
    scfg: &StudentConfig,
    cfg: &ExtractConfig,
) -> Result<ExtractionResult> {
    run(env, teacher, scfg, cfg, Method::Fipe, Weighting::Unit)
}

/// Runs the method named by `cfg.method`.
pub fn run_method(
    env: &Env,
    teacher: &TeacherPolicy,
    scfg: &StudentConfig,
    cfg: &ExtractConfig,
) -> Result<ExtractionResult> {
    match cfg.method {
        Method::Dagger => run_dagger(env, teacher, scfg, cfg),
        Method::Viper => run_viper(env, teacher, scfg, cfg),
        Method::Fipe => run_fipe(env, teacher, scfg, cfg),
    }
}
