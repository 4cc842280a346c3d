//! Plain-text rule lists exported from trees.
//!
//! Each root-to-leaf path becomes one line:
//!
//! ```text
//! IF cell_3 <= 0.5 AND x > 0.25 THEN action = 2
//! ```
//!
//! `a > t` is read back as "not `a <= t`", so a parsed rule list routes
//! every input, NaN included, exactly like the tree it came from.

use std::collections::HashMap;

use super::tree::{Node, TreePolicy};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub feature: usize,
    pub threshold: f64,
    /// `true` for `<=`, `false` for `>`.
    pub at_most: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub conditions: Vec<Condition>,
    pub action: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuleList {
    pub rules: Vec<Rule>,
}

impl RuleList {
    /// Action of the first matching rule, or `None` when nothing matches.
    pub fn predict(&self, features: &[f64]) -> Option<usize> {
        self.rules
            .iter()
            .find(|r| {
                r.conditions
                    .iter()
                    .all(|c| (features[c.feature] <= c.threshold) == c.at_most)
            })
            .map(|r| r.action)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

fn name_of(names: &[String], i: usize) -> String {
    names.get(i).cloned().unwrap_or_else(|| format!("f{i}"))
}

impl TreePolicy {
    /// Missing names fall back to `f<index>`.
    pub fn export_rules(&self, names: &[String]) -> String {
        let mut out = String::new();
        let mut path: Vec<String> = Vec::new();
        walk(&self.root, names, &mut path, &mut out);
        out
    }
}

fn walk(node: &Node, names: &[String], path: &mut Vec<String>, out: &mut String) {
    match node {
        Node::Leaf { action } => {
            let cond = if path.is_empty() {
                "TRUE".to_string()
            } else {
                path.join(" AND ")
            };
            out.push_str(&format!("IF {cond} THEN action = {action}\n"));
        }
        Node::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            let name = name_of(names, *feature);
            path.push(format!("{name} <= {threshold}"));
            walk(left, names, path, out);
            path.pop();
            path.push(format!("{name} > {threshold}"));
            walk(right, names, path, out);
            path.pop();
        }
    }
}

/// Parses rule text produced by [`TreePolicy::export_rules`]. Blank lines and
/// lines starting with `#` are skipped. Names of the form `f<index>` are
/// accepted when not present in `names`.
pub fn parse_rules(text: &str, names: &[String]) -> Result<RuleList> {
    let index: HashMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let lookup = |name: &str, line: usize| -> Result<usize> {
        if let Some(&i) = index.get(name) {
            return Ok(i);
        }
        name.strip_prefix('f')
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Usage(format!("line {line}: unknown feature `{name}`")))
    };
    let mut rules = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = n + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::Usage(format!("line {lineno}: {m}: `{line}`"));
        let body = line.strip_prefix("IF ").ok_or_else(|| bad("expected `IF`"))?;
        let (cond, then) = body
            .rsplit_once(" THEN ")
            .ok_or_else(|| bad("expected `THEN`"))?;
        let action = then
            .trim()
            .strip_prefix("action")
            .map(str::trim_start)
            .and_then(|s| s.strip_prefix('='))
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or_else(|| bad("expected `action = <index>`"))?;
        let mut conditions = Vec::new();
        if cond.trim() != "TRUE" {
            for part in cond.split(" AND ") {
                let (name, at_most, thr) = if let Some((a, b)) = part.split_once(" <= ") {
                    (a, true, b)
                } else if let Some((a, b)) = part.split_once(" > ") {
                    (a, false, b)
                } else {
                    return Err(bad("expected `<=` or `>`"));
                };
                let threshold: f64 = thr
                    .trim()
                    .parse()
                    .map_err(|_| bad("threshold is not a number"))?;
                conditions.push(Condition {
                    feature: lookup(name.trim(), lineno)?,
                    threshold,
                    at_most,
                });
            }
        }
        rules.push(Rule { conditions, action });
    }
    Ok(RuleList { rules })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::mdp::rng_from_seed;
    use crate::student::testing::dataset;

    fn leaf(a: usize) -> Box<Node> {
        Box::new(Node::Leaf { action: a })
    }

    fn tree(root: Node, features: usize) -> TreePolicy {
        TreePolicy {
            root,
            max_depth: 8,
            feature_len: features,
            action_count: 4,
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i}")).collect()
    }

    #[test]
    fn single_split_gives_two_lines() {
        let t = tree(
            Node::Split {
                feature: 1,
                threshold: 0.5,
                left: leaf(0),
                right: leaf(3),
            },
            2,
        );
        let text = t.export_rules(&names(2));
        assert_eq!(
            text,
            "IF v1 <= 0.5 THEN action = 0\nIF v1 > 0.5 THEN action = 3\n"
        );
    }

    #[test]
    fn complete_depth_two_gives_four_lines() {
        let t = tree(
            Node::Split {
                feature: 0,
                threshold: 0.5,
                left: Box::new(Node::Split {
                    feature: 1,
                    threshold: 0.25,
                    left: leaf(0),
                    right: leaf(1),
                }),
                right: Box::new(Node::Split {
                    feature: 1,
                    threshold: 0.75,
                    left: leaf(2),
                    right: leaf(3),
                }),
            },
            2,
        );
        assert_eq!(t.export_rules(&names(2)).lines().count(), 4);
    }

    #[test]
    fn single_leaf_exports_true() {
        let t = tree(Node::Leaf { action: 2 }, 1);
        let text = t.export_rules(&[]);
        assert_eq!(text, "IF TRUE THEN action = 2\n");
        let parsed = parse_rules(&text, &[]).unwrap();
        assert_eq!(parsed.predict(&[123.0]), Some(2));
    }

    #[test]
    fn round_trip_agrees_on_random_inputs() {
        let mut rng = rng_from_seed(11);
        let pts: Vec<(Vec<f64>, usize)> = (0..200)
            .map(|_| {
                let f: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
                let a = usize::from(f[0] * f[1] > 0.2) + 2 * usize::from(f[2] > f[3]);
                (f, a)
            })
            .collect();
        let refs: Vec<(&[f64], usize)> = pts.iter().map(|(f, a)| (f.as_slice(), *a)).collect();
        let t = TreePolicy::fit(&dataset(&refs, 4), 6, 1).unwrap();
        let n = names(4);
        let parsed = parse_rules(&t.export_rules(&n), &n).unwrap();
        assert_eq!(parsed.len(), t.leaf_count());
        for _ in 0..1000 {
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.2..1.2)).collect();
            assert_eq!(parsed.predict(&q), Some(t.predict(&q)));
        }
        // Thresholds themselves land on the boundary of both rule sides.
        match t.root() {
            Node::Split { feature, threshold, .. } => {
                let mut q = vec![0.5; 4];
                q[*feature] = *threshold;
                assert_eq!(parsed.predict(&q), Some(t.predict(&q)));
            }
            Node::Leaf { .. } => unreachable!(),
        }
    }

    #[test]
    fn parser_skips_comments_and_reports_errors() {
        let n = names(1);
        let ok = parse_rules("# header\n\nIF v0 <= 1 THEN action = 1\n", &n).unwrap();
        assert_eq!(ok.len(), 1);
        assert!(parse_rules("IF v9 <= 1 THEN action = 1", &n).is_err());
        assert!(parse_rules("v0 <= 1 THEN action = 1", &n).is_err());
        assert!(parse_rules("IF v0 <= x THEN action = 1", &n).is_err());
        assert!(parse_rules("IF v0 == 1 THEN action = 1", &n).is_err());
        assert!(parse_rules("IF v0 <= 1 THEN act 1", &n).is_err());
    }
}
