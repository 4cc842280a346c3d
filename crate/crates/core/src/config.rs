//! Experiment configuration: strict JSON with per-environment defaults.
//!
//! A config file needs only `env.name`; everything else is filled from the
//! preset for that environment. User values are merged over the preset key
//! by key, so a misspelled key is reported with its full path and the
//! closest valid name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::env::{EnvName, EnvSpec};
use crate::error::{Error, Result};
use crate::eval::StateSource;
use crate::extract::{ExtractConfig, Method};
use crate::student::{StudentConfig, StudentKind};
use crate::teacher::TeacherConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Independent learning sessions; session `s` uses seed `seed + s`.
    pub sessions: usize,
    /// Held-out episodes for the final metrics of each session.
    pub test_episodes: usize,
    pub state_source: StateSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sessions: 10,
            test_episodes: 20,
            state_source: StateSource::Student,
        }
    }
}

/// Grid axes for the `sweep` subcommand. An empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub method: Vec<Method>,
    pub eta: Vec<f64>,
    pub library_max: Vec<usize>,
    pub student_kind: Vec<StudentKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub teacher: TeacherConfig,
    /// Load the teacher from this file instead of training it.
    pub teacher_checkpoint: Option<PathBuf>,
    pub extract: ExtractConfig,
    pub student: StudentConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

/// Subtrees replaced as a whole rather than merged key by key.
const ATOMIC: &[&str] = &["extract.fidelity_mode"];

/// Derived from the top-level seed for every session.
const PER_SESSION: &[(&str, &str)] = &[("extract", "seed"), ("student", "seed")];

impl ExperimentConfig {
    /// Defaults for `name`, with grid dimensions taken from the caller.
    pub fn preset(name: EnvName, width: Option<usize>, height: Option<usize>) -> Self {
        let mut extract = ExtractConfig::default();
        let mut teacher = TeacherConfig::default();
        let env = match name {
            EnvName::Gridnav => EnvSpec::gridnav(width.unwrap_or(5), height.unwrap_or(5)),
            EnvName::Pursuit2v1 => {
                teacher.training_episodes = 300_000;
                extract.iterations = 150;
                extract.sample_budget = Some(2000);
                extract.accept_window = 100;
                extract.competition_episodes = 20;
                EnvSpec::pursuit(width.unwrap_or(4), height.unwrap_or(3))
            }
            EnvName::Widegrid => {
                teacher.training_episodes = 200_000;
                EnvSpec::widegrid(width.unwrap_or(8), height.unwrap_or(8), 32)
            }
        };
        ExperimentConfig {
            env,
            teacher,
            teacher_checkpoint: None,
            extract,
            student: StudentConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.teacher.validate()?;
        self.extract.validate()?;
        self.student.validate()?;
        if self.eval.sessions == 0 {
            return Err(Error::Config("eval.sessions must be >= 1".into()));
        }
        if self.eval.test_episodes == 0 {
            return Err(Error::Config("eval.test_episodes must be >= 1".into()));
        }
        for &eta in &self.sweep.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::Config(format!(
                    "sweep.eta values must be finite and >= 0 (got {eta})"
                )));
            }
        }
        if self.sweep.library_max.contains(&0) {
            return Err(Error::Config("sweep.library_max values must be >= 1".into()));
        }
        Ok(())
    }

    /// Extraction and student settings for one session.
    pub fn session(&self, index: usize) -> (ExtractConfig, StudentConfig) {
        let seed = self.seed.wrapping_add(index as u64);
        let mut extract = self.extract.clone();
        extract.seed = seed;
        let mut student = self.student.clone();
        student.seed = seed;
        (extract, student)
    }

    /// The resolved config as written to `config_echo.json`, including its
    /// hash. Parsing the echo reproduces this config exactly.
    pub fn echo(&self) -> Value {
        let mut v = self.bare_value();
        let hash = self.config_hash();
        if let Value::Object(m) = &mut v {
            m.insert("config_hash".into(), Value::String(hash));
        }
        v
    }

    /// SHA-256 over the canonical JSON of everything except `seed` and
    /// `output_dir`, so (hash, seed) identifies a run.
    pub fn config_hash(&self) -> String {
        let mut v = self.bare_value();
        if let Value::Object(m) = &mut v {
            m.remove("seed");
            m.remove("output_dir");
        }
        let text = serde_json::to_string(&v).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn bare_value(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for (section, key) in PER_SESSION {
            if let Some(Value::Object(m)) = v.get_mut(*section) {
                m.remove(*key);
            }
        }
        v
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let user: Value =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
    resolve(user)
}

fn resolve(mut user: Value) -> Result<ExperimentConfig> {
    let Value::Object(top) = &mut user else {
        return Err(Error::Config("top level must be a JSON object".into()));
    };
    let claimed = match top.remove("config_hash") {
        None => None,
        Some(Value::String(h)) => Some(h),
        Some(_) => return Err(Error::Config("config_hash must be a string".into())),
    };
    let env = top
        .get("env")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::Config("missing `env` section".into()))?;
    let name: EnvName = env
        .get("name")
        .cloned()
        .ok_or_else(|| Error::Config("missing `env.name`".into()))
        .and_then(|v| {
            serde_json::from_value(v).map_err(|e| Error::Config(format!("env.name: {e}")))
        })?;
    let dim = |k: &str| env.get(k).and_then(Value::as_u64).map(|v| v as usize);
    let preset = ExperimentConfig::preset(name, dim("width"), dim("height"));
    let own_bounds = env.contains_key("reward_bounds");

    let mut merged = preset.bare_value();
    merge(&mut merged, &user, "")?;
    // Placeholders; `session` sets the real values.
    for (section, key) in PER_SESSION {
        if let Some(Value::Object(m)) = merged.get_mut(*section) {
            m.insert((*key).into(), Value::from(0));
        }
    }
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(merged)
        .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
    if !own_bounds {
        cfg.env.reward_bounds = cfg.env.natural_reward_bounds();
    }
    cfg.validate()?;
    if let Some(h) = claimed {
        let actual = cfg.config_hash();
        if h != actual {
            return Err(Error::Config(format!(
                "config_hash {h} does not match the config contents ({actual})"
            )));
        }
    }
    Ok(cfg)
}

fn merge(base: &mut Value, user: &Value, path: &str) -> Result<()> {
    let (Value::Object(b), Value::Object(u)) = (&mut *base, user) else {
        *base = user.clone();
        return Ok(());
    };
    for (k, v) in u {
        let here = if path.is_empty() {
            k.clone()
        } else {
            format!("{path}.{k}")
        };
        if PER_SESSION.iter().any(|(s, key)| *s == path && key == k) {
            return Err(Error::Config(format!(
                "`{here}` is set per session from the top-level `seed`"
            )));
        }
        match b.get_mut(k) {
            Some(slot) if slot.is_object() && v.is_object() && !ATOMIC.contains(&here.as_str()) => {
                merge(slot, v, &here)?
            }
            Some(slot) => *slot = v.clone(),
            None => return Err(unknown_key(&here, k, b)),
        }
    }
    Ok(())
}

fn unknown_key(path: &str, key: &str, valid: &Map<String, Value>) -> Error {
    let best = valid
        .keys()
        .map(|c| (strsim::jaro_winkler(key, c), c))
        .max_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((score, c)) if score >= 0.8 => {
            Error::Config(format!("unknown key `{path}` (did you mean `{c}`?)"))
        }
        _ => {
            let names: Vec<&str> = valid.keys().map(String::as_str).collect();
            Error::Config(format!(
                "unknown key `{path}` (expected one of: {})",
                names.join(", ")
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config_str(r#"{"env": {"name": "gridnav"}, "extract": {"method": "dagger"}}"#)
            .unwrap();
        assert_eq!(cfg.extract.method, Method::Dagger);
        assert_eq!(cfg.extract.library_max, 10);
        assert_eq!(cfg.extract.eta, 0.5);
        assert_eq!(cfg.extract.beta0, 1.0);
        assert_eq!(cfg.extract.beta_decay, 0.7);
        assert_eq!(cfg.env, EnvSpec::gridnav(5, 5));
        assert_eq!(cfg.eval.sessions, 10);
    }

    #[test]
    fn negative_eta_is_rejected() {
        let err = parse_config_str(r#"{"env": {"name": "gridnav"}, "extract": {"eta": -1}}"#)
            .unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("eta"), "{err}");
    }

    #[test]
    fn unknown_key_gets_a_suggestion() {
        let err = parse_config_str(r#"{"env": {"name": "gridnav"}, "extract": {"etaa": 1}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("extract.etaa"), "{err}");
        assert!(err.contains("did you mean `eta`"), "{err}");
    }

    #[test]
    fn type_errors_carry_key_paths() {
        let err = parse_config_str(r#"{"env": {"name": "gridnav"}, "teacher": {"gamma": "x"}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("teacher.gamma"), "{err}");
        let err = parse_config_str(r#"{"env": {"name": "maze"}}"#).unwrap_err();
        assert!(err.is_config());
        assert!(parse_config_str(r#"{"extract": {}}"#).unwrap_err().is_config());
        assert!(parse_config_str("[1, 2]").unwrap_err().is_config());
    }

    #[test]
    fn per_session_seeds_are_not_user_keys() {
        let err = parse_config_str(r#"{"env": {"name": "gridnav"}, "extract": {"seed": 4}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("top-level `seed`"), "{err}");
        let cfg = parse_config_str(r#"{"env": {"name": "gridnav"}, "seed": 7}"#).unwrap();
        let (e, s) = cfg.session(2);
        assert_eq!((e.seed, s.seed), (9, 9));
    }

    #[test]
    fn echo_round_trips_and_hash_is_checked() {
        let cfg = parse_config_str(
            r#"{"env": {"name": "pursuit2v1", "slip": 0.2},
                "extract": {"fidelity_mode": {"mode": "softmax", "temperature": 0.5}},
                "student": {"kind": "knn", "k": 3}, "seed": 5}"#,
        )
        .unwrap();
        let echo = cfg.echo();
        let back = parse_config_str(&echo.to_string()).unwrap();
        assert_eq!(back, cfg);

        let mut tampered = echo.clone();
        tampered["extract"]["eta"] = serde_json::json!(0.9);
        let err = parse_config_str(&tampered.to_string()).unwrap_err().to_string();
        assert!(err.contains("does not match"), "{err}");
    }

    #[test]
    fn hash_ignores_seed_and_output_dir_only() {
        let a = ExperimentConfig::preset(EnvName::Gridnav, None, None);
        let mut b = a.clone();
        b.seed = 99;
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.config_hash(), b.config_hash());
        b.extract.eta = 0.25;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn reward_bounds_follow_overridden_rewards() {
        let cfg = parse_config_str(r#"{"env": {"name": "gridnav", "step_cost": 0.1}}"#).unwrap();
        assert_eq!(cfg.env.reward_bounds, cfg.env.natural_reward_bounds());
        let cfg = parse_config_str(
            r#"{"env": {"name": "gridnav", "reward_bounds": [-10.0, 2.0]}}"#,
        )
        .unwrap();
        assert_eq!(cfg.env.reward_bounds, (-10.0, 2.0));
    }

    #[test]
    fn dimensions_shape_the_preset() {
        let cfg = parse_config_str(r#"{"env": {"name": "gridnav", "width": 3, "height": 4}}"#)
            .unwrap();
        assert_eq!(cfg.env, EnvSpec::gridnav(3, 4));
    }
}
