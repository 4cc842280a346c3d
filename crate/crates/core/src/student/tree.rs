use serde::{Deserialize, Serialize};

use super::{vote, Dataset, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Node {
    Leaf {
        action: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn leaves(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { left, right, .. } => left.leaves() + right.leaves(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreePolicy {
    pub(crate) root: Node,
    pub(crate) max_depth: usize,
    pub(crate) feature_len: usize,
    pub(crate) action_count: usize,
}

struct Builder<'a> {
    rows: &'a [Sample],
    action_count: usize,
    feature_len: usize,
    max_depth: usize,
    min_leaf: usize,
}

struct Split {
    feature: usize,
    threshold: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

/// Sum over classes of `w - sum(w_c^2) / w`, i.e. node weight times Gini.
fn weighted_gini(tally: &[f64], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    let sq: f64 = tally.iter().map(|w| w * w).sum();
    total - sq / total
}

impl Builder<'_> {
    fn weight(&self, i: usize, unit: bool) -> f64 {
        if unit {
            1.0
        } else {
            self.rows[i].weight
        }
    }

    fn leaf(&self, idx: &[usize], unit: bool) -> Node {
        let mut tally = vec![0.0; self.action_count];
        for &i in idx {
            tally[self.rows[i].teacher_action] += self.weight(i, unit);
        }
        Node::Leaf {
            action: vote(&tally),
        }
    }

    fn build(&self, idx: Vec<usize>, depth: usize) -> Node {
        // A subtree whose rows all carry zero weight falls back to counts.
        let unit = idx.iter().all(|&i| self.rows[i].weight == 0.0);
        let first = self.rows[idx[0]].teacher_action;
        let pure = idx.iter().all(|&i| self.rows[i].teacher_action == first);
        if pure || depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return self.leaf(&idx, unit);
        }
        match self.best_split(&idx, unit) {
            None => self.leaf(&idx, unit),
            Some(s) => Node::Split {
                feature: s.feature,
                threshold: s.threshold,
                left: Box::new(self.build(s.left, depth + 1)),
                right: Box::new(self.build(s.right, depth + 1)),
            },
        }
    }

    // Splits are taken even at zero gain while the node is impure, so
    // parity-style targets such as XOR remain learnable.
    fn best_split(&self, idx: &[usize], unit: bool) -> Option<Split> {
        let mut totals = vec![0.0; self.action_count];
        for &i in idx {
            totals[self.rows[i].teacher_action] += self.weight(i, unit);
        }
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for f in 0..self.feature_len {
            order.sort_by(|&a, &b| {
                self.rows[a].features[f]
                    .total_cmp(&self.rows[b].features[f])
                    .then(a.cmp(&b))
            });
            let mut left = vec![0.0; self.action_count];
            for pos in 0..order.len() - 1 {
                let i = order[pos];
                left[self.rows[i].teacher_action] += self.weight(i, unit);
                let lo = self.rows[i].features[f];
                let hi = self.rows[order[pos + 1]].features[f];
                if lo == hi {
                    continue;
                }
                let n_left = pos + 1;
                if n_left < self.min_leaf || order.len() - n_left < self.min_leaf {
                    continue;
                }
                let right: Vec<f64> = totals.iter().zip(&left).map(|(t, l)| t - l).collect();
                let wl: f64 = left.iter().sum();
                let wr: f64 = right.iter().sum();
                let score = weighted_gini(&left, wl) + weighted_gini(&right, wr);
                if best.is_none_or(|(b, _, _)| score < b) {
                    let mut thr = lo * 0.5 + hi * 0.5;
                    if !(thr >= lo && thr < hi) {
                        thr = lo;
                    }
                    best = Some((score, f, thr));
                }
            }
        }
        let (_, feature, threshold) = best?;
        let (left, right) = idx
            .iter()
            .partition(|&&i| self.rows[i].features[feature] <= threshold);
        Some(Split {
            feature,
            threshold,
            left,
            right,
        })
    }
}

impl TreePolicy {
    pub fn fit(data: &Dataset, max_depth: usize, min_leaf: usize) -> Result<Self> {
        data.require_non_empty()?;
        if max_depth == 0 || min_leaf == 0 {
            return Err(Error::Usage("max_depth and min_leaf must be >= 1".into()));
        }
        let builder = Builder {
            rows: data.rows(),
            action_count: data.action_count(),
            feature_len: data.feature_len(),
            max_depth,
            min_leaf,
        };
        let root = builder.build((0..data.len()).collect(), 0);
        Ok(TreePolicy {
            root,
            max_depth,
            feature_len: data.feature_len(),
            action_count: data.action_count(),
        })
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { action } => return *action,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if features[*feature] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn leaf_count(&self) -> usize {
        self.root.leaves()
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }
}
