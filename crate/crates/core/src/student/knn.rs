use serde::{Deserialize, Serialize};

use super::{vote, Dataset};
use crate::error::{Error, Result};

/// Stores the training rows; prediction is a weighted majority vote over the
/// `k` nearest rows in Euclidean distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnPolicy {
    k: usize,
    feature_len: usize,
    action_count: usize,
    points: Vec<Vec<f64>>,
    actions: Vec<usize>,
    weights: Vec<f64>,
}

impl KnnPolicy {
    pub fn fit(data: &Dataset, k: usize) -> Result<Self> {
        data.require_non_empty()?;
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::Usage(format!("k must be a positive odd integer (got {k})")));
        }
        if k > data.len() {
            return Err(Error::Usage(format!(
                "k = {k} exceeds the {} stored rows",
                data.len()
            )));
        }
        let rows = data.rows();
        Ok(KnnPolicy {
            k,
            feature_len: data.feature_len(),
            action_count: data.action_count(),
            points: rows.iter().map(|r| r.features.clone()).collect(),
            actions: rows.iter().map(|r| r.teacher_action).collect(),
            weights: rows.iter().map(|r| r.weight).collect(),
        })
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let mut dist: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d: f64 = p.iter().zip(features).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, i)
            })
            .collect();
        // Equidistant rows are ordered by storage index.
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < dist.len() {
            dist.select_nth_unstable_by(self.k - 1, cmp);
            dist.truncate(self.k);
        }
        let mut tally = vec![0.0; self.action_count];
        let mut total = 0.0;
        for &(_, i) in &dist {
            tally[self.actions[i]] += self.weights[i];
            total += self.weights[i];
        }
        if total == 0.0 {
            tally.iter_mut().for_each(|t| *t = 0.0);
            for &(_, i) in &dist {
                tally[self.actions[i]] += 1.0;
            }
        }
        vote(&tally)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student::testing::{dataset, points_weighted};

    #[test]
    fn k1_returns_own_label() {
        let d = dataset(&[(&[0.0, 0.0], 0), (&[1.0, 0.0], 1), (&[0.0, 1.0], 2)], 3);
        let p = KnnPolicy::fit(&d, 1).unwrap();
        for r in d.rows() {
            assert_eq!(p.predict(&r.features), r.teacher_action);
        }
    }

    #[test]
    fn majority_of_three() {
        // Query at the origin is equidistant from all three rows.
        let d = dataset(&[(&[1.0, 0.0], 0), (&[-1.0, 0.0], 0), (&[0.0, 1.0], 1)], 2);
        let p = KnnPolicy::fit(&d, 3).unwrap();
        assert_eq!(p.predict(&[0.0, 0.0]), 0);
    }

    #[test]
    fn multiclass_tie_goes_to_lowest_action() {
        let d = dataset(&[(&[1.0], 2), (&[-1.0], 1), (&[0.0], 0)], 3);
        let p = KnnPolicy::fit(&d, 3).unwrap();
        assert_eq!(p.predict(&[0.0]), 0);
        let d = dataset(&[(&[1.0], 2), (&[-1.0], 1), (&[5.0], 0)], 3);
        let p = KnnPolicy::fit(&d, 3).unwrap();
        assert_eq!(p.predict(&[0.0]), 0);
    }

    #[test]
    fn weights_act_as_replication() {
        let pts: [(&[f64], usize, f64); 3] = [(&[0.0], 0, 1.0), (&[1.0], 1, 1.0), (&[2.0], 1, 1.0)];
        let p = KnnPolicy::fit(&points_weighted(&pts, 2), 3).unwrap();
        assert_eq!(p.predict(&[0.0]), 1);
        let mut heavy = pts;
        heavy[0].2 = 3.0;
        let p = KnnPolicy::fit(&points_weighted(&heavy, 2), 3).unwrap();
        assert_eq!(p.predict(&[0.0]), 0);
    }

    #[test]
    fn k_checks() {
        let d = dataset(&[(&[0.0], 0), (&[1.0], 1)], 2);
        assert!(matches!(KnnPolicy::fit(&d, 3), Err(Error::Usage(_))));
        assert!(matches!(KnnPolicy::fit(&d, 2), Err(Error::Usage(_))));
    }
}
