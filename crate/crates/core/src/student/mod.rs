//! Interpretable students: CART decision trees, k-nearest neighbours and
//! one-vs-rest linear max-margin classifiers.

mod knn;
mod linear;
mod rules;
mod tree;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use knn::KnnPolicy;
pub use linear::LinearPolicy;
pub use rules::{parse_rules, RuleList};
pub use tree::{Node, TreePolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub teacher_action: usize,
    pub q_vector: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    action_count: usize,
    rows: Vec<Sample>,
}

impl Dataset {
    pub fn new(action_count: usize) -> Self {
        Dataset {
            action_count,
            rows: Vec::new(),
        }
    }

    pub fn from_rows(action_count: usize, rows: Vec<Sample>) -> Result<Self> {
        let mut d = Dataset::new(action_count);
        for r in rows {
            d.push(r)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if let Some(first) = self.rows.first() {
            if first.features.len() != sample.features.len() {
                return Err(Error::Usage(format!(
                    "feature length {} does not match dataset length {}",
                    sample.features.len(),
                    first.features.len()
                )));
            }
        }
        if sample.teacher_action >= self.action_count {
            return Err(Error::Usage(format!(
                "teacher action {} out of range for {} actions",
                sample.teacher_action, self.action_count
            )));
        }
        if !(sample.weight.is_finite() && sample.weight >= 0.0) {
            return Err(Error::Usage(format!(
                "sample weight must be finite and >= 0 (got {})",
                sample.weight
            )));
        }
        self.rows.push(sample);
        Ok(())
    }

    pub fn extend(&mut self, other: Dataset) -> Result<()> {
        for r in other.rows {
            self.push(r)?;
        }
        Ok(())
    }

    pub fn rows(&self) -> &[Sample] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut [Sample] {
        &mut self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn feature_len(&self) -> usize {
        self.rows.first().map_or(0, |r| r.features.len())
    }

    fn require_non_empty(&self) -> Result<()> {
        if self.rows.is_empty() {
            Err(Error::Usage("cannot fit a student on an empty dataset".into()))
        } else {
            Ok(())
        }
    }
}

/// Index of the largest tally; ties go to the lowest index.
fn vote(tally: &[f64]) -> usize {
    crate::teacher::argmax(tally)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentKind {
    Tree,
    Knn,
    Linear,
}

impl fmt::Display for StudentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StudentKind::Tree => "tree",
            StudentKind::Knn => "knn",
            StudentKind::Linear => "linear",
        })
    }
}

impl std::str::FromStr for StudentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tree" => Ok(StudentKind::Tree),
            "knn" => Ok(StudentKind::Knn),
            "linear" => Ok(StudentKind::Linear),
            other => Err(Error::Config(format!(
                "unknown student kind `{other}` (expected tree, knn or linear)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub kind: StudentKind,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub k: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub regularization: f64,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            kind: StudentKind::Tree,
            max_depth: 8,
            min_leaf: 1,
            k: 5,
            epochs: 30,
            step_size: 0.5,
            regularization: 1e-4,
            seed: 0,
        }
    }
}

impl StudentConfig {
    pub fn with_kind(kind: StudentKind) -> Self {
        StudentConfig {
            kind,
            ..StudentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("student.{m}")));
        if self.max_depth == 0 {
            return bad("max_depth must be >= 1".into());
        }
        if self.min_leaf == 0 {
            return bad("min_leaf must be >= 1".into());
        }
        if self.k == 0 || self.k.is_multiple_of(2) {
            return bad(format!("k must be a positive odd integer (got {})", self.k));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size must be > 0 (got {})", self.step_size));
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return bad(format!("regularization must be >= 0 (got {})", self.regularization));
        }
        Ok(())
    }

    pub fn fit(&self, data: &Dataset) -> Result<StudentPolicy> {
        self.validate()?;
        Ok(match self.kind {
            StudentKind::Tree => StudentPolicy::Tree(TreePolicy::fit(data, self.max_depth, self.min_leaf)?),
            StudentKind::Knn => {
                // Early extraction rounds can hold fewer rows than k.
                let k = if data.len() < self.k {
                    let k = data.len().max(1);
                    if k.is_multiple_of(2) { k - 1 } else { k }
                } else {
                    self.k
                };
                StudentPolicy::Knn(KnnPolicy::fit(data, k)?)
            }
            StudentKind::Linear => StudentPolicy::Linear(LinearPolicy::fit(
                data,
                self.epochs,
                self.step_size,
                self.regularization,
                self.seed,
            )?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StudentPolicy {
    Tree(TreePolicy),
    Knn(KnnPolicy),
    Linear(LinearPolicy),
}

impl StudentPolicy {
    pub fn kind(&self) -> StudentKind {
        match self {
            StudentPolicy::Tree(_) => StudentKind::Tree,
            StudentPolicy::Knn(_) => StudentKind::Knn,
            StudentPolicy::Linear(_) => StudentKind::Linear,
        }
    }

    pub fn feature_len(&self) -> usize {
        match self {
            StudentPolicy::Tree(t) => t.feature_len(),
            StudentPolicy::Knn(k) => k.feature_len(),
            StudentPolicy::Linear(l) => l.feature_len(),
        }
    }

    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        if features.len() != self.feature_len() {
            return Err(Error::Usage(format!(
                "student expects {} features, got {}",
                self.feature_len(),
                features.len()
            )));
        }
        Ok(self.predict_unchecked(features))
    }

    pub(crate) fn predict_unchecked(&self, features: &[f64]) -> usize {
        match self {
            StudentPolicy::Tree(t) => t.predict(features),
            StudentPolicy::Knn(k) => k.predict(features),
            StudentPolicy::Linear(l) => l.predict(features),
        }
    }

    pub fn as_tree(&self) -> Option<&TreePolicy> {
        match self {
            StudentPolicy::Tree(t) => Some(t),
            _ => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    pub fn dataset(points: &[(&[f64], usize)], action_count: usize) -> Dataset {
        points_weighted(
            &points.iter().map(|(f, a)| (*f, *a, 1.0)).collect::<Vec<_>>(),
            action_count,
        )
    }

    pub fn points_weighted(points: &[(&[f64], usize, f64)], action_count: usize) -> Dataset {
        let rows = points
            .iter()
            .map(|(f, a, w)| Sample {
                features: f.to_vec(),
                teacher_action: *a,
                q_vector: vec![0.0; action_count],
                weight: *w,
            })
            .collect();
        Dataset::from_rows(action_count, rows).unwrap()
    }
}
