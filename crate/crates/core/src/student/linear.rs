use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{vote, Dataset};
use crate::error::{Error, Result};
use crate::mdp::rng_from_seed;

/// One-vs-rest linear classifier trained on the L2-regularized hinge loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    feature_len: usize,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearPolicy {
    pub fn fit(
        data: &Dataset,
        epochs: usize,
        step_size: f64,
        regularization: f64,
        seed: u64,
    ) -> Result<Self> {
        data.require_non_empty()?;
        if epochs == 0 || !(step_size > 0.0) || !(regularization >= 0.0) {
            return Err(Error::Usage(
                "linear student needs epochs >= 1, step_size > 0 and regularization >= 0".into(),
            ));
        }
        let rows = data.rows();
        let d = data.feature_len();
        let classes = data.action_count();
        let mean_w = rows.iter().map(|r| r.weight).sum::<f64>() / rows.len() as f64;
        let scale = |w: f64| if mean_w > 0.0 { w / mean_w } else { 1.0 };

        let mut weights = vec![vec![0.0; d]; classes];
        let mut bias = vec![0.0; classes];
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut rng = rng_from_seed(seed);
        let mut t = 0u64;
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let row = &rows[i];
                let lr = step_size / (1.0 + step_size * regularization * t as f64);
                t += 1;
                let w = scale(row.weight);
                for c in 0..classes {
                    let y = if row.teacher_action == c { 1.0 } else { -1.0 };
                    let wc = &mut weights[c];
                    let margin = y * (dot(wc, &row.features) + bias[c]);
                    let shrink = 1.0 - lr * regularization;
                    if shrink != 1.0 {
                        wc.iter_mut().for_each(|v| *v *= shrink);
                    }
                    if margin < 1.0 && w > 0.0 {
                        let g = lr * w * y;
                        for (v, x) in wc.iter_mut().zip(&row.features) {
                            *v += g * x;
                        }
                        bias[c] += g;
                    }
                }
            }
        }
        if weights.iter().flatten().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Usage(
                "linear student diverged; lower step_size".into(),
            ));
        }
        Ok(LinearPolicy {
            feature_len: d,
            weights,
            bias,
        })
    }

    pub fn scores(&self, features: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, features) + b)
            .collect()
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        vote(&self.scores(features))
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
