//! Isolation forest over the feature matrix.
//!
//! Each tree is grown on a uniform subsample (without replacement) of `psi`
//! rows, choosing a random non-constant feature and a uniform split strictly
//! inside its range until a point is isolated or the height limit
//! `ceil(log2 psi)` is reached. A point's score is `2^(-E[h(x)] / c(psi))`,
//! where `h` adds `c(leaf size)` for the unresolved remainder of a leaf.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{substream_seed, SeededRng};
use crate::stats::ceil_count;

pub const EULER_GAMMA: f64 = 0.577_215_664_9;
pub const MODEL_FORMAT: &str = "trade-forensics/iforest";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IforestError {
    #[error("feature matrix is empty")]
    EmptyCorpus,
    #[error("need at least 2 rows to build a forest, got {0}")]
    TooFewRows(usize),
    #[error("non-finite value in row {row}, column {column}")]
    NonFinite { row: usize, column: usize },
    #[error("row {row} has {got} columns, expected {expected}")]
    Arity { row: usize, got: usize, expected: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("model file: {0}")]
    Format(String),
}

/// Average unsuccessful-search path length in a binary search tree of `n`
/// points: `2 H(n-1) - 2 (n-1) / n`, with `H(i) ~ ln i + gamma` and `c(2) = 1`.
pub fn avg_path_norm(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

/// `2^(-mean_path / norm)`.
pub fn anomaly_score(mean_path: f64, norm: f64) -> f64 {
    2f64.powf(-mean_path / norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Internal {
        feature: usize,
        split: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    /// Pre-order; the root is node 0.
    pub nodes: Vec<Node>,
    pub height_limit: usize,
}

impl IsolationTree {
    fn grow(x: &[Vec<f64>], rows: Vec<usize>, height_limit: usize, rng: &mut SeededRng) -> Self {
        let mut tree = IsolationTree {
            nodes: Vec::new(),
            height_limit,
        };
        tree.grow_node(x, rows, 0, rng);
        tree
    }

    fn grow_node(&mut self, x: &[Vec<f64>], rows: Vec<usize>, depth: usize, rng: &mut SeededRng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { size: rows.len() });
        if depth >= self.height_limit || rows.len() <= 1 {
            return id;
        }
        let width = x[rows[0]].len();
        let ranges: Vec<(usize, f64, f64)> = (0..width)
            .filter_map(|f| {
                let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                    (lo.min(x[r][f]), hi.max(x[r][f]))
                });
                (lo < hi).then_some((f, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return id;
        }
        let (feature, lo, hi) = ranges[rng.below(ranges.len())];
        let mut split = lo + rng.uniform() * (hi - lo);
        if !(split > lo && split < hi) {
            split = lo + 0.5 * (hi - lo);
            if !(split > lo && split < hi) {
                // Adjacent floats: no representable value lies strictly between.
                split = hi;
            }
        }
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| x[r][feature] < split);
        let left = self.grow_node(x, left_rows, depth + 1, rng);
        let right = self.grow_node(x, right_rows, depth + 1, rng);
        self.nodes[id] = Node::Internal {
            feature,
            split,
            left,
            right,
        };
        id
    }

    /// Edges from the root to the leaf holding `x`, plus `c(leaf size)`.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0usize;
        loop {
            match &self.nodes[node] {
                Node::Leaf { size } => return depth as f64 + avg_path_norm(*size),
                Node::Internal {
                    feature,
                    split,
                    left,
                    right,
                } => {
                    node = if x[*feature] < *split { *left } else { *right };
                    depth += 1;
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Internal { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub trees: usize,
    pub psi: usize,
    pub contamination: f64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 100,
            psi: 256,
            contamination: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    /// Effective subsample size after clamping to the row count.
    pub psi: usize,
    pub feature_order: Vec<String>,
    pub trees: Vec<IsolationTree>,
}

pub(crate) fn check_matrix(x: &[Vec<f64>]) -> Result<usize, IforestError> {
    let width = x.first().ok_or(IforestError::EmptyCorpus)?.len();
    for (row, r) in x.iter().enumerate() {
        if r.len() != width {
            return Err(IforestError::Arity {
                row,
                got: r.len(),
                expected: width,
            });
        }
        if let Some(column) = r.iter().position(|v| !v.is_finite()) {
            return Err(IforestError::NonFinite { row, column });
        }
    }
    Ok(width)
}

/// Grow a forest. Returns the model and any warnings (psi clamping).
///
/// Tree `t` draws from the sub-stream `substream_seed(seed, t)`, so trees grow
/// in parallel while the result stays a pure function of `(x, params, seed)`.
pub fn build_forest(
    x: &[Vec<f64>],
    params: &ForestParams,
    seed: u64,
    feature_order: &[&str],
) -> Result<(ForestModel, Vec<String>), IforestError> {
    if params.trees < 1 {
        return Err(IforestError::Parameter("trees must be >= 1".into()));
    }
    if params.psi < 2 {
        return Err(IforestError::Parameter("psi must be >= 2".into()));
    }
    let width = check_matrix(x)?;
    if width != feature_order.len() {
        return Err(IforestError::Arity {
            row: 0,
            got: width,
            expected: feature_order.len(),
        });
    }
    if x.len() < 2 {
        return Err(IforestError::TooFewRows(x.len()));
    }
    let mut warnings = Vec::new();
    let psi = if params.psi > x.len() {
        let msg = format!("psi {} exceeds {} rows; clamped", params.psi, x.len());
        log::warn!("{msg}");
        warnings.push(msg);
        x.len()
    } else {
        params.psi
    };
    let height_limit = (psi as f64).log2().ceil() as usize;
    let trees = (0..params.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = SeededRng::new(substream_seed(seed, t as u64));
            let rows = rng.sample_indices(x.len(), psi);
            IsolationTree::grow(x, rows, height_limit, &mut rng)
        })
        .collect();
    Ok((
        ForestModel {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            seed,
            psi,
            feature_order: feature_order.iter().map(|s| s.to_string()).collect(),
            trees,
        },
        warnings,
    ))
}

impl ForestModel {
    pub fn mean_path_length(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn score(&self, x: &[f64]) -> Result<f64, IforestError> {
        if x.len() != self.feature_order.len() {
            return Err(IforestError::Arity {
                row: 0,
                got: x.len(),
                expected: self.feature_order.len(),
            });
        }
        Ok(anomaly_score(self.mean_path_length(x), avg_path_norm(self.psi)))
    }

    pub fn score_all(&self, x: &[Vec<f64>]) -> Result<Vec<f64>, IforestError> {
        x.par_iter().map(|row| self.score(row)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, IforestError> {
        let m: ForestModel = serde_json::from_str(text).map_err(|e| IforestError::Format(e.to_string()))?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(IforestError::Format(format!(
                "unsupported model {} v{}",
                m.format, m.version
            )));
        }
        if m.trees.is_empty() || m.psi < 2 {
            return Err(IforestError::Format("model needs >= 1 tree and psi >= 2".into()));
        }
        Ok(m)
    }
}

/// Flag the top `ceil(contamination * n)` scores, ties to the lower row index.
pub fn flag_scores(scores: &[f64], contamination: f64) -> Result<Vec<bool>, IforestError> {
    if !(contamination > 0.0 && contamination <= 0.5) {
        return Err(IforestError::Parameter(format!(
            "contamination must lie in (0, 0.5], got {contamination}"
        )));
    }
    let mut flags = vec![false; scores.len()];
    for i in crate::stats::top_indices(scores, ceil_count(contamination, scores.len())) {
        flags[i] = true;
    }
    Ok(flags)
}

pub fn flag(model: &ForestModel, x: &[Vec<f64>], contamination: f64) -> Result<Vec<bool>, IforestError> {
    flag_scores(&model.score_all(x)?, contamination)
}

pub fn write_scores<W: Write>(ids: &[String], scores: &[f64], flags: &[bool], sink: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["record_id", "score", "flag"])?;
    for ((id, s), f) in ids.iter().zip(scores).zip(flags) {
        w.write_record([id.as_str(), &s.to_string(), &f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const NAMES2: [&str; 2] = ["a", "b"];

    fn normal_cloud(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SeededRng::new(seed);
        (0..n).map(|_| vec![rng.normal(), rng.normal()]).collect()
    }

    #[test]
    fn path_norm_values() {
        assert_eq!(avg_path_norm(1), 0.0);
        assert_eq!(avg_path_norm(2), 1.0);
        let oracle = 2.0 * (255f64.ln() + 0.5772156649) - 2.0 * 255.0 / 256.0;
        assert!((avg_path_norm(256) - oracle).abs() < 1e-12);
        assert!((avg_path_norm(256) - 10.24).abs() < 0.01);
        assert!(avg_path_norm(512) > avg_path_norm(256));
        for n in 2..2000 {
            assert!(avg_path_norm(n + 1) > avg_path_norm(n));
        }
    }

    #[test]
    fn score_formula_fixed_points() {
        let c = avg_path_norm(256);
        assert_eq!(anomaly_score(c, c), 0.5);
        assert_eq!(anomaly_score(2.0 * c, c), 0.25);
    }

    #[test]
    fn builds_are_deterministic() {
        let x = normal_cloud(500, 1);
        let p = ForestParams::default();
        let (a, _) = build_forest(&x, &p, 7, &NAMES2).unwrap();
        let (b, _) = build_forest(&x, &p, 7, &NAMES2).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn repeated_row_gives_single_leaf_trees() {
        let x = vec![vec![1.0, 2.0]; 50];
        let (m, _) = build_forest(&x, &ForestParams::default(), 3, &NAMES2).unwrap();
        assert!(m.trees.iter().all(|t| t.nodes.len() == 1));
    }

    #[test]
    fn psi_is_clamped_with_warning() {
        let x = normal_cloud(40, 2);
        let (m, warnings) = build_forest(&x, &ForestParams::default(), 3, &NAMES2).unwrap();
        assert_eq!(m.psi, 40);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(
            build_forest(&[], &ForestParams::default(), 1, &NAMES2),
            Err(IforestError::EmptyCorpus)
        ));
        let bad = vec![vec![1.0, 2.0], vec![f64::NAN, 0.0]];
        assert!(matches!(
            build_forest(&bad, &ForestParams::default(), 1, &NAMES2),
            Err(IforestError::NonFinite { row: 1, column: 0 })
        ));
        let x = normal_cloud(10, 1);
        let (m, _) = build_forest(&x, &ForestParams::default(), 1, &NAMES2).unwrap();
        assert!(matches!(m.score(&[1.0]), Err(IforestError::Arity { .. })));
    }

    #[test]
    fn tree_invariants_hold() {
        let x = normal_cloud(300, 4);
        let (m, _) = build_forest(&x, &ForestParams::default(), 9, &NAMES2).unwrap();
        for t in &m.trees {
            assert!(t.depth() <= t.height_limit);
            assert_eq!(t.height_limit, 8);
        }
    }

    #[test]
    fn splits_lie_strictly_inside_node_range() {
        // Re-route the training subsample through each tree and check every split.
        let x = normal_cloud(256, 8);
        let (m, _) = build_forest(
            &x,
            &ForestParams {
                trees: 10,
                ..Default::default()
            },
            5,
            &NAMES2,
        )
        .unwrap();
        for t in &m.trees {
            fn check(t: &IsolationTree, x: &[Vec<f64>], node: usize, rows: Vec<usize>) {
                if let Node::Internal {
                    feature,
                    split,
                    left,
                    right,
                } = &t.nodes[node]
                {
                    let lo = rows.iter().map(|&r| x[r][*feature]).fold(f64::INFINITY, f64::min);
                    let hi = rows.iter().map(|&r| x[r][*feature]).fold(f64::NEG_INFINITY, f64::max);
                    assert!(*split > lo && *split <= hi);
                    let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i][*feature] < *split);
                    assert!(!l.is_empty() && !r.is_empty());
                    check(t, x, *left, l);
                    check(t, x, *right, r);
                }
            }
            // psi = n, so every row is in the subsample.
            check(t, &x, 0, (0..x.len()).collect());
        }
    }

    #[test]
    fn planted_outlier_ranks_top() {
        let mut x = normal_cloud(1000, 21);
        x.push(vec![10.0, 10.0]);
        let (m, _) = build_forest(&x, &ForestParams::default(), 42, &NAMES2).unwrap();
        let scores = m.score_all(&x).unwrap();
        let planted = scores[1000];
        let above = scores.iter().filter(|&&s| s > planted).count();
        assert!(above < 10, "{above} points outrank the planted outlier");
        let flags = flag_scores(&scores, 0.05).unwrap();
        assert!(flags[1000]);
    }

    #[test]
    fn flag_counts_and_ties() {
        let flags = flag_scores(&vec![0.3; 200], 0.05).unwrap();
        assert_eq!(flags.iter().filter(|&&f| f).count(), 10);
        assert!(flags[..10].iter().all(|&f| f));
        assert!(flag_scores(&[0.1], 0.0).is_err());
        assert!(flag_scores(&[0.1], 0.6).is_err());
    }

    #[test]
    fn scores_in_open_unit_interval_and_uniform_smoke_band() {
        let mut rng = SeededRng::new(17);
        let x: Vec<Vec<f64>> = (0..2000).map(|_| vec![rng.uniform(), rng.uniform()]).collect();
        let (m, _) = build_forest(&x, &ForestParams::default(), 17, &NAMES2).unwrap();
        let scores = m.score_all(&x).unwrap();
        assert!(scores.iter().all(|&s| s > 0.0 && s < 1.0));
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!((0.4..=0.6).contains(&mean), "mean {mean}");
    }

    #[test]
    fn duplicating_rows_keeps_scores() {
        let x = normal_cloud(1000, 33);
        let doubled: Vec<_> = x.iter().chain(x.iter()).cloned().collect();
        let probes = [vec![0.0, 0.0], vec![2.0, -1.0], vec![4.0, 4.0]];
        let mean_score = |data: &[Vec<f64>], p: &[f64]| {
            let seeds = [1u64, 2, 3, 4, 5];
            seeds
                .iter()
                .map(|&s| {
                    build_forest(data, &ForestParams::default(), s, &NAMES2)
                        .unwrap()
                        .0
                        .score(p)
                        .unwrap()
                })
                .sum::<f64>()
                / seeds.len() as f64
        };
        for p in &probes {
            let a = mean_score(&x, p);
            let b = mean_score(&doubled, p);
            assert!((a - b).abs() <= 0.02, "probe {p:?}: {a} vs {b}");
        }
    }

    #[test]
    fn serialization_round_trip_is_bit_exact() {
        let x = normal_cloud(400, 12);
        let (m, _) = build_forest(&x, &ForestParams::default(), 12, &NAMES2).unwrap();
        let back = ForestModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        for row in x.iter().take(50) {
            assert_eq!(back.score(row).unwrap().to_bits(), m.score(row).unwrap().to_bits());
        }
        assert!(ForestModel::from_json("{}").is_err());
    }
}
