//! Experiment runs, comparison reports and parameter sweeps.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |---|---|
//! | `config_echo.json` | resolved config plus `config_hash` |
//! | `teacher.json` | teacher Q-table |
//! | `student.json` | student of the first session |
//! | `rules.txt` | rule list of that student (tree students) |
//! | `metrics.csv` | per-iteration metrics of every session |
//! | `metrics.json` | held-out test metrics of every session |
//! | `extraction.json` | per-session extraction logs and students |
//!
//! Every file carries the config hash and seed. `INCOMPLETE` exists while a
//! run is in progress and keeps the error message if it fails.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{parse_config, ExperimentConfig};
use crate::env::{Env, EnvName};
use crate::error::{Error, Result};
use crate::eval::{self, rollout, MetricsRecord, MetricsRow};
use crate::extract::{run_method, ExtractionResult, Method};
use crate::mdp::derive_seed;
use crate::student::{StudentKind, StudentPolicy};
use crate::teacher::{oracle_agreement, train_teacher, TeacherPolicy};

/// Seed stream for held-out evaluation, disjoint from the extraction streams.
const TEST_STREAM: u64 = 99;
const TEACHER_CHECK_EPISODES: usize = 100;
const INCOMPLETE: &str = "INCOMPLETE";

pub struct SessionOutcome {
    pub seed: u64,
    pub result: ExtractionResult,
    pub test: MetricsRecord,
}

pub struct RunReport {
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub teacher: TeacherPolicy,
    pub sessions: Vec<SessionOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub seed: u64,
    pub iterations: usize,
    pub dataset_size: usize,
    pub accepted: usize,
    pub test: MetricsRecord,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config_hash: String,
    pub seed: u64,
    pub env: EnvName,
    pub method: Method,
    pub student_kind: StudentKind,
    pub eta: f64,
    pub library_max: usize,
    pub sessions: Vec<SessionMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub config_hash: String,
    pub seed: u64,
    pub win_rate: f64,
    pub episodes: usize,
    /// Share of reachable states where the greedy action is optimal.
    pub oracle_agreement: Option<f64>,
}

struct Stamp {
    hash: String,
    seed: u64,
}

impl Stamp {
    fn of(cfg: &ExperimentConfig) -> Self {
        Stamp {
            hash: cfg.config_hash(),
            seed: cfg.seed,
        }
    }

    fn header(&self) -> String {
        format!("config_hash={} seed={}", self.hash, self.seed)
    }

    fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        if let Value::Object(m) = &mut v {
            m.insert("config_hash".into(), Value::String(self.hash.clone()));
            m.insert("seed".into(), Value::from(self.seed));
        }
        write_text(path, &(serde_json::to_string_pretty(&v)? + "\n"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join(INCOMPLETE), "run in progress\n")
}

/// Runs `body` with an `INCOMPLETE` marker in `dir` that is removed on
/// success and keeps the error text on failure.
fn guarded<T>(dir: &Path, body: impl FnOnce() -> Result<T>) -> Result<T> {
    prepare_dir(dir)?;
    match body() {
        Ok(v) => {
            let marker = dir.join(INCOMPLETE);
            std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
            Ok(v)
        }
        Err(e) => {
            let _ = write_text(&dir.join(INCOMPLETE), &format!("run failed: {e}\n"));
            Err(e)
        }
    }
}

/// Loads the configured checkpoint or trains a fresh teacher.
pub fn obtain_teacher(cfg: &ExperimentConfig, env: &Env) -> Result<TeacherPolicy> {
    let teacher = match &cfg.teacher_checkpoint {
        Some(path) => TeacherPolicy::load(path)?,
        None => train_teacher(env, &cfg.teacher)?,
    };
    if teacher.action_count() != env.action_count() {
        return Err(Error::Config(format!(
            "teacher has {} actions, {} needs {}",
            teacher.action_count(),
            cfg.env.name,
            env.action_count()
        )));
    }
    Ok(teacher)
}

/// Trains (or loads) the teacher and reports its quality.
pub fn run_teacher(cfg: &ExperimentConfig) -> Result<TeacherReport> {
    let dir = cfg.output_dir.clone();
    guarded(&dir, || {
        let stamp = Stamp::of(cfg);
        let env = Env::new(cfg.env.clone())?;
        let teacher = obtain_teacher(cfg, &env)?;
        let trajs = rollout(
            &env,
            &teacher,
            &teacher,
            TEACHER_CHECK_EPISODES,
            derive_seed(cfg.seed, TEST_STREAM),
        )?;
        let agreement = match oracle_agreement(&env, &teacher, 1e-9) {
            Ok(a) => Some(a),
            Err(Error::Capacity { .. }) => None,
            Err(e) => return Err(e),
        };
        let report = TeacherReport {
            config_hash: stamp.hash.clone(),
            seed: cfg.seed,
            win_rate: eval::win_rate(&trajs)?,
            episodes: trajs.len(),
            oracle_agreement: agreement,
        };
        write_text(
            &dir.join("config_echo.json"),
            &(serde_json::to_string_pretty(&cfg.echo())? + "\n"),
        )?;
        stamp.write_json(&dir.join("teacher.json"), &teacher)?;
        stamp.write_json(&dir.join("teacher_report.json"), &report)?;
        Ok(report)
    })
}

/// Runs every session of `cfg` and writes the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    run_experiment_with(cfg, None)
}

/// As [`run_experiment`], reusing an already trained teacher when given.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    teacher: Option<&TeacherPolicy>,
) -> Result<RunReport> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    guarded(&dir, || {
        let env = Env::new(cfg.env.clone())?;
        let teacher = match teacher {
            Some(t) => t.clone(),
            None => obtain_teacher(cfg, &env)?,
        };
        let sessions: Vec<SessionOutcome> = (0..cfg.eval.sessions)
            .into_par_iter()
            .map(|s| run_session(cfg, &env, &teacher, s))
            .collect::<Result<_>>()?;
        let report = RunReport {
            config_hash: cfg.config_hash(),
            output_dir: dir.clone(),
            teacher,
            sessions,
        };
        write_run(cfg, &env, &report)?;
        Ok(report)
    })
}

fn run_session(
    cfg: &ExperimentConfig,
    env: &Env,
    teacher: &TeacherPolicy,
    index: usize,
) -> Result<SessionOutcome> {
    let (ecfg, scfg) = cfg.session(index);
    let result = run_method(env, teacher, &scfg, &ecfg)?;
    let test = eval::evaluate(
        env,
        teacher,
        &result.policy,
        cfg.eval.test_episodes,
        derive_seed(ecfg.seed, TEST_STREAM),
        cfg.eval.state_source,
    )?;
    log::info!(
        "{} {} session {index}: {} iterations, {} rows, consistency {:.3}, win rate {:.3}",
        cfg.env.name,
        ecfg.method,
        result.iterations.len(),
        result.dataset.len(),
        test.consistency,
        test.win_rate
    );
    Ok(SessionOutcome {
        seed: ecfg.seed,
        result,
        test,
    })
}

fn write_run(cfg: &ExperimentConfig, env: &Env, report: &RunReport) -> Result<()> {
    let dir = &report.output_dir;
    let stamp = Stamp::of(cfg);
    write_text(
        &dir.join("config_echo.json"),
        &(serde_json::to_string_pretty(&cfg.echo())? + "\n"),
    )?;
    stamp.write_json(&dir.join("teacher.json"), &report.teacher)?;

    let first = &report.sessions[0].result;
    stamp.write_json(&dir.join("student.json"), &first.policy)?;
    let mut rules = format!("# {} session_seed={}\n", stamp.header(), report.sessions[0].seed);
    match first.policy.as_tree() {
        Some(tree) => rules.push_str(&tree.export_rules(&env.feature_names())),
        None => {
            let _ = writeln!(rules, "# {} students have no rule form", first.policy.kind());
        }
    }
    write_text(&dir.join("rules.txt"), &rules)?;

    let method = cfg.extract.method.to_string();
    let env_name = cfg.env.name.to_string();
    let rows: Vec<MetricsRow> = report
        .sessions
        .iter()
        .flat_map(|s| {
            s.result.iterations.iter().map(|it| MetricsRow {
                method: method.clone(),
                env: env_name.clone(),
                seed: s.seed,
                iteration: it.iteration,
                win_rate: it.win_rate,
                mean_return: it.mean_return,
                consistency: it.consistency,
                phi: it.phi,
                samples: it.dataset_size,
            })
        })
        .collect();
    eval::write_metrics_csv(&dir.join("metrics.csv"), &[stamp.header()], &rows)?;

    let metrics = RunMetrics {
        config_hash: stamp.hash.clone(),
        seed: cfg.seed,
        env: cfg.env.name,
        method: cfg.extract.method,
        student_kind: cfg.student.kind,
        eta: cfg.extract.eta,
        library_max: cfg.extract.library_max,
        sessions: report
            .sessions
            .iter()
            .map(|s| SessionMetrics {
                seed: s.seed,
                iterations: s.result.iterations.len(),
                dataset_size: s.result.dataset.len(),
                accepted: s.result.iterations.iter().filter(|r| r.accepted).count(),
                test: s.test.clone(),
            })
            .collect(),
    };
    write_text(
        &dir.join("metrics.json"),
        &(serde_json::to_string_pretty(&metrics)? + "\n"),
    )?;

    let results: Vec<&ExtractionResult> = report.sessions.iter().map(|s| &s.result).collect();
    stamp.write_json(
        &dir.join("extraction.json"),
        &serde_json::json!({ "sessions": results }),
    )
}

/// Evaluates the saved teacher and student in `dir` on fresh test episodes
/// and writes `evaluation.json` there.
pub fn evaluate_run(cfg: &ExperimentConfig, dir: &Path) -> Result<MetricsRecord> {
    let env = Env::new(cfg.env.clone())?;
    let teacher = TeacherPolicy::load(&dir.join("teacher.json"))?;
    let student = StudentPolicy::load(&dir.join("student.json"))?;
    let record = eval::evaluate(
        &env,
        &teacher,
        &student,
        cfg.eval.test_episodes,
        derive_seed(cfg.seed, TEST_STREAM),
        cfg.eval.state_source,
    )?;
    Stamp::of(cfg).write_json(&dir.join("evaluation.json"), &record)?;
    Ok(record)
}

/// One row of `comparison.csv`. Run rows leave the `*_std`, `rank` and `n`
/// columns empty; summary rows leave `seed` empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub row_type: String,
    pub label: String,
    pub method: Method,
    pub student: StudentKind,
    pub env: EnvName,
    pub seed: Option<u64>,
    pub win_rate: f64,
    pub mean_return: f64,
    pub consistency: f64,
    pub phi: f64,
    pub win_rate_std: Option<f64>,
    pub mean_return_std: Option<f64>,
    pub consistency_std: Option<f64>,
    pub phi_std: Option<f64>,
    pub phi_rank: Option<usize>,
    pub n: Option<usize>,
}

#[derive(Debug)]
pub struct Comparison {
    pub runs: Vec<ComparisonRow>,
    /// Summary rows ordered by Φ rank.
    pub summary: Vec<ComparisonRow>,
}

struct Loaded {
    dir: PathBuf,
    cfg: ExperimentConfig,
    metrics: RunMetrics,
}

/// Aggregates finished run directories into `comparison.csv` and
/// `summary.md` under `out`. Run directories are only read.
pub fn compare(run_dirs: &[PathBuf], out: &Path) -> Result<Comparison> {
    if run_dirs.is_empty() {
        return Err(Error::Usage("compare needs at least one run directory".into()));
    }
    let mut runs = Vec::new();
    for dir in run_dirs {
        if dir.join(INCOMPLETE).exists() {
            return Err(Error::Usage(format!("{} is incomplete", dir.display())));
        }
        let cfg = parse_config(&dir.join("config_echo.json"))?;
        let metrics: RunMetrics = read_json(&dir.join("metrics.json"))?;
        if metrics.config_hash != cfg.config_hash() {
            return Err(Error::Usage(format!(
                "{}: metrics.json does not belong to config_echo.json",
                dir.display()
            )));
        }
        runs.push(Loaded {
            dir: dir.clone(),
            cfg,
            metrics,
        });
    }
    let base = &runs[0].cfg;
    for r in &runs[1..] {
        if r.cfg.env.name != base.env.name {
            return Err(Error::Usage(format!(
                "mixed environments: {} and {}",
                base.env.name, r.cfg.env.name
            )));
        }
        if r.cfg.env != base.env {
            return Err(Error::Usage(format!(
                "{} uses different {} settings than {}",
                r.dir.display(),
                base.env.name,
                runs[0].dir.display()
            )));
        }
        if r.cfg.eval.test_episodes != base.eval.test_episodes
            || r.cfg.eval.state_source != base.eval.state_source
        {
            return Err(Error::Usage(format!(
                "{} uses a different evaluation protocol than {}",
                r.dir.display(),
                runs[0].dir.display()
            )));
        }
    }

    let labeler = Labeler::new(&runs);
    let mut rows = Vec::new();
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for r in &runs {
        let label = labeler.label(&r.metrics);
        for s in &r.metrics.sessions {
            let idx = rows.len();
            rows.push(ComparisonRow {
                row_type: "run".into(),
                label: label.clone(),
                method: r.metrics.method,
                student: r.metrics.student_kind,
                env: r.metrics.env,
                seed: Some(s.seed),
                win_rate: s.test.win_rate,
                mean_return: s.test.mean_return,
                consistency: s.test.consistency,
                phi: s.test.phi,
                win_rate_std: None,
                mean_return_std: None,
                consistency_std: None,
                phi_std: None,
                phi_rank: None,
                n: None,
            });
            match groups.iter_mut().find(|(l, _)| *l == label) {
                Some((_, members)) => members.push(idx),
                None => groups.push((label.clone(), vec![idx])),
            }
        }
    }

    let mut summary: Vec<ComparisonRow> = groups
        .iter()
        .map(|(label, members)| {
            let pick = |f: fn(&ComparisonRow) -> f64| -> (f64, f64) {
                mean_std(&members.iter().map(|&i| f(&rows[i])).collect::<Vec<_>>())
            };
            let first = &rows[members[0]];
            let (win, win_sd) = pick(|r| r.win_rate);
            let (ret, ret_sd) = pick(|r| r.mean_return);
            let (cons, cons_sd) = pick(|r| r.consistency);
            let (phi, phi_sd) = pick(|r| r.phi);
            ComparisonRow {
                row_type: "summary".into(),
                label: label.clone(),
                method: first.method,
                student: first.student,
                env: first.env,
                seed: None,
                win_rate: win,
                mean_return: ret,
                consistency: cons,
                phi,
                win_rate_std: Some(win_sd),
                mean_return_std: Some(ret_sd),
                consistency_std: Some(cons_sd),
                phi_std: Some(phi_sd),
                phi_rank: None,
                n: Some(members.len()),
            }
        })
        .collect();
    summary.sort_by(|a, b| b.phi.total_cmp(&a.phi).then_with(|| a.label.cmp(&b.label)));
    for (i, row) in summary.iter_mut().enumerate() {
        row.phi_rank = Some(i + 1);
    }

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut buf = Vec::new();
    for r in &runs {
        buf.extend_from_slice(
            format!(
                "# run={} config_hash={} seed={}\n",
                r.dir.display(),
                r.metrics.config_hash,
                r.metrics.seed
            )
            .as_bytes(),
        );
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for row in rows.iter().chain(&summary) {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(out, e))?;
    }
    let csv_path = out.join("comparison.csv");
    std::fs::write(&csv_path, buf).map_err(|e| Error::io(&csv_path, e))?;
    write_text(&out.join("summary.md"), &summary_markdown(&runs, &summary, &labeler))?;
    Ok(Comparison {
        runs: rows,
        summary,
    })
}

/// Sample mean and standard deviation (zero for a single value).
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Builds group labels from the axes that vary across the compared runs.
struct Labeler {
    kinds: bool,
    eta: bool,
    library: bool,
}

impl Labeler {
    fn new(runs: &[Loaded]) -> Self {
        let distinct = |f: &dyn Fn(&RunMetrics) -> String| {
            runs.iter().map(|r| f(&r.metrics)).collect::<BTreeSet<_>>().len() > 1
        };
        Labeler {
            kinds: distinct(&|m| m.student_kind.to_string()),
            eta: distinct(&|m| m.eta.to_string()),
            library: distinct(&|m| m.library_max.to_string()),
        }
    }

    fn label(&self, m: &RunMetrics) -> String {
        let mut s = self.row_key(m);
        if self.kinds {
            let _ = write!(s, " {}", m.student_kind);
        }
        s
    }

    /// Label without the student kind, used for ablation table rows.
    fn row_key(&self, m: &RunMetrics) -> String {
        let mut s = m.method.to_string();
        if self.eta {
            let _ = write!(s, " eta={}", m.eta);
        }
        if self.library {
            let _ = write!(s, " M={}", m.library_max);
        }
        s
    }
}

fn summary_markdown(runs: &[Loaded], summary: &[ComparisonRow], labeler: &Labeler) -> String {
    let pm = |m: f64, s: Option<f64>| format!("{m:.3} ± {:.3}", s.unwrap_or(0.0));
    let mut md = String::new();
    let _ = writeln!(md, "# Comparison on {}\n", runs[0].cfg.env.name);
    for r in runs {
        let _ = writeln!(
            md,
            "- `{}`: config_hash `{}`, seed {}",
            r.dir.display(),
            r.metrics.config_hash,
            r.metrics.seed
        );
    }
    md.push_str("\n| rank | policy | n | win rate | reward | consistency | Φ |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    for row in summary {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} |",
            row.phi_rank.unwrap_or(0),
            row.label,
            row.n.unwrap_or(0),
            pm(row.win_rate, row.win_rate_std),
            pm(row.mean_return, row.mean_return_std),
            pm(row.consistency, row.consistency_std),
            pm(row.phi, row.phi_std)
        );
    }

    if labeler.kinds {
        let kinds: BTreeSet<StudentKind> = runs.iter().map(|r| r.metrics.student_kind).collect();
        let mut keys: Vec<String> = Vec::new();
        for r in runs {
            let k = labeler.row_key(&r.metrics);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        md.push_str("\n## Student structures\n\n| method |");
        for k in &kinds {
            let _ = write!(md, " {k} win rate | {k} reward | {k} consistency |");
        }
        md.push_str("\n|---|");
        for _ in &kinds {
            md.push_str("---|---|---|");
        }
        md.push('\n');
        for key in &keys {
            let _ = write!(md, "| {key} |");
            for k in &kinds {
                let label = format!("{key} {k}");
                match summary.iter().find(|r| r.label == label) {
                    Some(r) => {
                        let _ = write!(
                            md,
                            " {:.3} | {:.3} | {:.3} |",
                            r.win_rate, r.mean_return, r.consistency
                        );
                    }
                    None => md.push_str(" - | - | - |"),
                }
            }
            md.push('\n');
        }
    }
    md
}

/// Directory name of one sweep variant.
fn variant_name(cfg: &ExperimentConfig) -> String {
    format!(
        "{}-{}-eta{}-m{}",
        cfg.extract.method, cfg.student.kind, cfg.extract.eta, cfg.extract.library_max
    )
}

/// Every combination of the configured sweep axes, each with its own
/// output directory under `cfg.output_dir`.
pub fn sweep_variants(cfg: &ExperimentConfig) -> Vec<ExperimentConfig> {
    fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
        if values.is_empty() {
            vec![base]
        } else {
            values.to_vec()
        }
    }
    let s = &cfg.sweep;
    let mut out = Vec::new();
    for method in axis(&s.method, cfg.extract.method) {
        for kind in axis(&s.student_kind, cfg.student.kind) {
            for eta in axis(&s.eta, cfg.extract.eta) {
                for m in axis(&s.library_max, cfg.extract.library_max) {
                    let mut v = cfg.clone();
                    v.extract.method = method;
                    v.student.kind = kind;
                    v.extract.eta = eta;
                    v.extract.library_max = m;
                    v.sweep = Default::default();
                    v.output_dir = cfg.output_dir.join(variant_name(&v));
                    out.push(v);
                }
            }
        }
    }
    out
}

/// Runs every sweep variant with one shared teacher, then compares them
/// into `cfg.output_dir`.
pub fn sweep(cfg: &ExperimentConfig) -> Result<(Vec<RunReport>, Comparison)> {
    cfg.validate()?;
    let env = Env::new(cfg.env.clone())?;
    let teacher = obtain_teacher(cfg, &env)?;
    let variants = sweep_variants(cfg);
    let mut reports = Vec::with_capacity(variants.len());
    for v in &variants {
        log::info!("sweep variant {}", v.output_dir.display());
        reports.push(run_experiment_with(v, Some(&teacher))?);
    }
    let dirs: Vec<PathBuf> = variants.iter().map(|v| v.output_dir.clone()).collect();
    let cmp = compare(&dirs, &cfg.output_dir)?;
    Ok((reports, cmp))
}
