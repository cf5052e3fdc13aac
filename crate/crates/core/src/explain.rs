//! Explanations over upstream scores: exact Shapley attributions,
//! permutation importance, a Gini rule tree, k-means actor profiles,
//! radar fingerprints and HS-heading risk.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureVector;
use crate::ingest::{CountryCode, FlowDirection, TradeRecord};
use crate::rng::{substream_seed, SeededRng};
use crate::stats::{mean_sd, median, spearman};

/// Largest feature count for exact subset enumeration.
pub const MAX_EXACT_FEATURES: usize = 12;

pub const RADAR_AXES: [&str; 5] = [
    "price_disparity",
    "log_gap_ratio",
    "abs_price_deviation",
    "unit_value",
    "log_volume",
];

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("{0} features exceed the exact Shapley bound of 12; use permutation importance instead")]
    TooManyFeatures(usize),
    #[error("background matrix is empty")]
    EmptyBackground,
    #[error("labels are constant; importance is undefined")]
    ConstantLabels,
    #[error("only one class present; no rule can separate it")]
    SingleClass,
    #[error("k = {k} exceeds the {distinct} distinct points")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("row has {got} columns, expected {expected}")]
    Arity { got: usize, expected: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub record_id: String,
    pub phi: Vec<f64>,
    pub base_value: f64,
    pub output: f64,
}

fn column_means(background: &[Vec<f64>]) -> Vec<f64> {
    let d = background[0].len();
    (0..d)
        .map(|k| background.iter().map(|r| r[k]).sum::<f64>() / background.len() as f64)
        .collect()
}

/// Exact Shapley values with the mean-imputation value function: features
/// outside the coalition take their background mean.
pub fn shapley_exact<F>(scorer: F, x: &[f64], background: &[Vec<f64>]) -> Result<Attribution, ExplainError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let d = x.len();
    if d > MAX_EXACT_FEATURES {
        return Err(ExplainError::TooManyFeatures(d));
    }
    if background.is_empty() {
        return Err(ExplainError::EmptyBackground);
    }
    if let Some(r) = background.iter().find(|r| r.len() != d) {
        return Err(ExplainError::Arity {
            got: r.len(),
            expected: d,
        });
    }
    let means = column_means(background);
    let value: Vec<f64> = (0..1usize << d)
        .into_par_iter()
        .map(|mask| {
            let probe: Vec<f64> = (0..d)
                .map(|k| if mask >> k & 1 == 1 { x[k] } else { means[k] })
                .collect();
            scorer(&probe)
        })
        .collect();
    let mut fact = vec![1.0f64; d + 1];
    for i in 1..=d {
        fact[i] = fact[i - 1] * i as f64;
    }
    let phi = (0..d)
        .map(|i| {
            let mut acc = 0.0;
            for mask in 0..1usize << d {
                if mask >> i & 1 == 1 {
                    continue;
                }
                let s = mask.count_ones() as usize;
                let weight = fact[s] * fact[d - s - 1] / fact[d];
                acc += weight * (value[mask | 1 << i] - value[mask]);
            }
            acc
        })
        .collect();
    Ok(Attribution {
        record_id: String::new(),
        phi,
        base_value: value[0],
        output: value[(1 << d) - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: usize,
    pub importance: f64,
}

/// Mean drop in Spearman correlation between scores and labels when one
/// column is shuffled. Sorted by importance, descending. Redundant copies
/// of an informative column each score near zero, since the other copy
/// carries the signal.
pub fn permutation_importance<F>(
    scorer: F,
    x: &[Vec<f64>],
    labels: &[bool],
    repeats: usize,
    seed: u64,
) -> Result<Vec<FeatureImportance>, ExplainError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if repeats < 1 {
        return Err(ExplainError::Parameter("repeats must be >= 1".into()));
    }
    if x.len() != labels.len() {
        return Err(ExplainError::Arity {
            got: labels.len(),
            expected: x.len(),
        });
    }
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    let score_all = |m: &[Vec<f64>]| -> Vec<f64> { m.iter().map(|r| scorer(r)).collect() };
    let base = spearman(&score_all(x), &y).ok_or(ExplainError::ConstantLabels)?;
    let d = x.first().map_or(0, Vec::len);
    let mut out: Vec<FeatureImportance> = (0..d)
        .into_par_iter()
        .map(|k| {
            let mut total = 0.0;
            for r in 0..repeats {
                let mut rng = SeededRng::new(substream_seed(seed, (k * repeats + r) as u64));
                let mut column: Vec<f64> = x.iter().map(|row| row[k]).collect();
                rng.shuffle(&mut column);
                let shuffled: Vec<Vec<f64>> = x
                    .iter()
                    .zip(&column)
                    .map(|(row, &v)| {
                        let mut row = row.clone();
                        row[k] = v;
                        row
                    })
                    .collect();
                total += base - spearman(&score_all(&shuffled), &y).unwrap_or(0.0);
            }
            FeatureImportance {
                feature: k,
                importance: total / repeats as f64,
            }
        })
        .collect();
    out.sort_by(|a, b| b.importance.total_cmp(&a.importance).then(a.feature.cmp(&b.feature)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RuleNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<RuleNode>,
        right: Box<RuleNode>,
    },
    Leaf {
        anomaly_fraction: f64,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleTree {
    pub root: RuleNode,
    pub feature_names: Vec<String>,
    pub max_depth: usize,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

fn leaf(rows: &[usize], flags: &[bool]) -> RuleNode {
    let pos = rows.iter().filter(|&&i| flags[i]).count();
    RuleNode::Leaf {
        anomaly_fraction: pos as f64 / rows.len().max(1) as f64,
        count: rows.len(),
    }
}

/// Best `(feature, threshold)` by weighted Gini over midpoints of sorted
/// unique values. Ties keep the first feature and lowest threshold.
fn best_split(x: &[Vec<f64>], flags: &[bool], rows: &[usize]) -> Option<(usize, f64)> {
    let n = rows.len();
    let pos_total = rows.iter().filter(|&&i| flags[i]).count();
    let parent = gini(pos_total, n);
    let d = x[rows[0]].len();
    let mut best: Option<(f64, usize, f64)> = None;
    for k in 0..d {
        let mut sorted = rows.to_vec();
        sorted.sort_by(|&a, &b| x[a][k].total_cmp(&x[b][k]));
        let mut pos_left = 0;
        for i in 0..n - 1 {
            if flags[sorted[i]] {
                pos_left += 1;
            }
            let (lo, hi) = (x[sorted[i]][k], x[sorted[i + 1]][k]);
            if lo == hi {
                continue;
            }
            let nl = i + 1;
            let impurity =
                (nl as f64 * gini(pos_left, nl) + (n - nl) as f64 * gini(pos_total - pos_left, n - nl)) / n as f64;
            if impurity < parent - 1e-12 && best.is_none_or(|(b, _, _)| impurity < b - 1e-12) {
                let mut t = lo + (hi - lo) / 2.0;
                if t >= hi {
                    t = lo;
                }
                best = Some((impurity, k, t));
            }
        }
    }
    best.map(|(_, k, t)| (k, t))
}

fn grow(x: &[Vec<f64>], flags: &[bool], rows: Vec<usize>, depth: usize, max_depth: usize) -> RuleNode {
    let pos = rows.iter().filter(|&&i| flags[i]).count();
    if depth >= max_depth || pos == 0 || pos == rows.len() || rows.len() < 2 {
        return leaf(&rows, flags);
    }
    match best_split(x, flags, &rows) {
        None => leaf(&rows, flags),
        Some((feature, threshold)) => {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i][feature] <= threshold);
            RuleNode::Split {
                feature,
                threshold,
                left: Box::new(grow(x, flags, l, depth + 1, max_depth)),
                right: Box::new(grow(x, flags, r, depth + 1, max_depth)),
            }
        }
    }
}

/// Greedy Gini decision tree over `x` against boolean flags.
pub fn fit_rule_tree(
    x: &[Vec<f64>],
    flags: &[bool],
    feature_names: &[&str],
    max_depth: usize,
) -> Result<RuleTree, ExplainError> {
    if x.len() != flags.len() {
        return Err(ExplainError::Arity {
            got: flags.len(),
            expected: x.len(),
        });
    }
    let pos = flags.iter().filter(|&&f| f).count();
    if pos == 0 || pos == flags.len() {
        return Err(ExplainError::SingleClass);
    }
    if let Some(r) = x.iter().find(|r| r.len() != feature_names.len()) {
        return Err(ExplainError::Arity {
            got: r.len(),
            expected: feature_names.len(),
        });
    }
    Ok(RuleTree {
        root: grow(x, flags, (0..x.len()).collect(), 0, max_depth),
        feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
        max_depth,
    })
}

impl RuleTree {
    pub fn predict(&self, x: &[f64]) -> bool {
        let mut node = &self.root;
        loop {
            match node {
                RuleNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
                RuleNode::Leaf { anomaly_fraction, .. } => return *anomaly_fraction > 0.5,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(n: &RuleNode) -> usize {
            match n {
                RuleNode::Split { left, right, .. } => 1 + walk(left).max(walk(right)),
                RuleNode::Leaf { .. } => 0,
            }
        }
        walk(&self.root)
    }

    /// One line per leaf: `IF a > t AND b <= u THEN anomaly (p = .., n = ..)`.
    pub fn rules(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut path = Vec::new();
        self.collect(&self.root, &mut path, &mut out);
        out
    }

    fn collect(&self, node: &RuleNode, path: &mut Vec<String>, out: &mut Vec<String>) {
        match node {
            RuleNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let name = &self.feature_names[*feature];
                path.push(format!("{name} <= {threshold}"));
                self.collect(left, path, out);
                path.pop();
                path.push(format!("{name} > {threshold}"));
                self.collect(right, path, out);
                path.pop();
            }
            RuleNode::Leaf {
                anomaly_fraction,
                count,
            } => {
                let cond = if path.is_empty() {
                    "TRUE".to_string()
                } else {
                    path.join(" AND ")
                };
                let class = if *anomaly_fraction > 0.5 { "anomaly" } else { "normal" };
                out.push(format!(
                    "IF {cond} THEN {class} (p = {anomaly_fraction:.4}, n = {count})"
                ));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn distinct_points(points: &[Vec<f64>]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
        .collect::<BTreeSet<_>>()
        .len()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment
/// stops changing or `max_iter` is reached. An empty cluster keeps its
/// previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult, ExplainError> {
    if k < 1 {
        return Err(ExplainError::Parameter("k must be >= 1".into()));
    }
    let distinct = distinct_points(points);
    if k > distinct {
        return Err(ExplainError::TooFewDistinct { k, distinct });
    }
    let mut rng = SeededRng::new(seed);
    let mut centroids = vec![points[rng.below(points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.uniform() * total;
        let mut acc = 0.0;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if acc > target && d > 0.0 {
                pick = i;
                break;
            }
        }
        centroids.push(points[pick].clone());
        for (di, p) in d2.iter_mut().zip(points) {
            *di = di.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    let mut wcss: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut total = 0.0;
        for (label, p) in labels.iter_mut().zip(points) {
            let (c, d) = nearest(p, &centroids);
            total += d;
            if *label != c {
                *label = c;
                changed = true;
            }
        }
        if let Some(&prev) = wcss.last() {
            assert!(
                total <= prev + 1e-9 * prev.max(1.0),
                "k-means objective increased: {prev} -> {total}"
            );
        }
        wcss.push(total);
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&c, p) in labels.iter().zip(points) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(KMeansResult {
        labels,
        centroids,
        wcss,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorProfile {
    pub country: CountryCode,
    pub risk_centrality: f64,
    /// `log10(1 + export kg)`.
    pub log_volume: f64,
    pub median_price_deviation: f64,
    pub mean_composite: f64,
    pub records: usize,
    pub cluster: usize,
    pub shadow_hub: bool,
}

/// One profile per reporter, clustered on standardized
/// (centrality, log volume, median price deviation).
pub fn actor_profiles(
    records: &[TradeRecord],
    features: &[FeatureVector],
    composite: &[f64],
    centrality: &BTreeMap<CountryCode, f64>,
    k: usize,
    seed: u64,
) -> Result<(Vec<ActorProfile>, Vec<String>), ExplainError> {
    struct Acc {
        export_kg: f64,
        deviations: Vec<f64>,
        score_sum: f64,
        n: usize,
    }
    let mut by: BTreeMap<CountryCode, Acc> = BTreeMap::new();
    for ((r, f), s) in records.iter().zip(features).zip(composite) {
        let a = by.entry(r.reporter).or_insert(Acc {
            export_kg: 0.0,
            deviations: Vec::new(),
            score_sum: 0.0,
            n: 0,
        });
        if r.flow == FlowDirection::Export {
            a.export_kg += r.net_weight;
        }
        if !f.price_imputed {
            a.deviations.push(f.price_deviation);
        }
        a.score_sum += s;
        a.n += 1;
    }
    let mut warnings = Vec::new();
    let mut profiles: Vec<ActorProfile> = by
        .into_iter()
        .map(|(country, a)| {
            let risk_centrality = centrality.get(&country).copied().unwrap_or_else(|| {
                let msg = format!("reporter {country} missing from centrality map; using 0");
                log::warn!("{msg}");
                warnings.push(msg);
                0.0
            });
            ActorProfile {
                country,
                risk_centrality,
                log_volume: a.export_kg.log10_1p(),
                median_price_deviation: median(&a.deviations).unwrap_or(0.0),
                mean_composite: a.score_sum / a.n as f64,
                records: a.n,
                cluster: 0,
                shadow_hub: false,
            }
        })
        .collect();
    if profiles.is_empty() {
        return Ok((profiles, warnings));
    }
    let cents: Vec<f64> = profiles.iter().map(|p| p.risk_centrality).collect();
    let vols: Vec<f64> = profiles.iter().map(|p| p.log_volume).collect();
    let (mc, mv) = (median(&cents).unwrap_or(0.0), median(&vols).unwrap_or(0.0));
    for p in &mut profiles {
        p.shadow_hub = p.risk_centrality > mc && p.log_volume < mv;
    }
    let raw: Vec<[f64; 3]> = profiles
        .iter()
        .map(|p| [p.risk_centrality, p.log_volume, p.median_price_deviation])
        .collect();
    let stats: Vec<(f64, f64)> = (0..3)
        .map(|j| mean_sd(&raw.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect();
    let points: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| {
            r.iter()
                .zip(&stats)
                .map(|(v, &(m, s))| if s > 0.0 { (v - m) / s } else { 0.0 })
                .collect()
        })
        .collect();
    let distinct = distinct_points(&points);
    let k_eff = k.clamp(1, distinct);
    if k_eff != k {
        let msg = format!("actor clustering: k = {k} reduced to {k_eff} distinct profiles");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let km = kmeans(&points, k_eff, seed, 100)?;
    for (p, c) in profiles.iter_mut().zip(km.labels) {
        p.cluster = c;
    }
    Ok((profiles, warnings))
}

trait Log10OnePlus {
    fn log10_1p(self) -> f64;
}

impl Log10OnePlus for f64 {
    fn log10_1p(self) -> f64 {
        self.ln_1p() / std::f64::consts::LN_10
    }
}

/// Raw radar axes in [`RADAR_AXES`] order.
pub fn radar_axes(fv: &FeatureVector) -> [f64; 5] {
    [
        fv.price_disparity,
        fv.log_gap_ratio,
        fv.price_deviation.abs(),
        fv.unit_value,
        fv.log_volume,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarStats {
    pub min: [f64; 5],
    pub max: [f64; 5],
}

impl RadarStats {
    pub fn from_features(features: &[FeatureVector]) -> Self {
        let mut min = [f64::INFINITY; 5];
        let mut max = [f64::NEG_INFINITY; 5];
        for f in features {
            for (j, v) in radar_axes(f).into_iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Self { min, max }
    }
}

/// Min-max scaled radar vector; constant axes sit at 0.5.
pub fn fingerprint(fv: &FeatureVector, stats: &RadarStats) -> [f64; 5] {
    let raw = radar_axes(fv);
    std::array::from_fn(|j| {
        let span = stats.max[j] - stats.min[j];
        if span > 0.0 {
            ((raw[j] - stats.min[j]) / span).clamp(0.0, 1.0)
        } else {
            0.5
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsRisk {
    pub mean_score: f64,
    pub count: usize,
}

/// Mean composite score per HS-4 heading.
pub fn hs_risk_scores(records: &[TradeRecord], scores: &[f64]) -> BTreeMap<String, HsRisk> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (r, s) in records.iter().zip(scores) {
        let e = acc.entry(r.hs_code.heading().to_string()).or_default();
        e.0 += s;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(h, (sum, n))| {
            (
                h,
                HsRisk {
                    mean_score: sum / n as f64,
                    count: n,
                },
            )
        })
        .collect()
}

/// Headings by descending mean score, ties by heading.
pub fn rank_hs_risk(risk: &BTreeMap<String, HsRisk>) -> Vec<(String, HsRisk)> {
    let mut v: Vec<(String, HsRisk)> = risk.iter().map(|(h, r)| (h.clone(), *r)).collect();
    v.sort_by(|a, b| b.1.mean_score.total_cmp(&a.1.mean_score).then(a.0.cmp(&b.0)));
    v
}

pub fn write_attributions<W: Write>(attributions: &[Attribution], names: &[&str], sink: W) -> Result<(), ExplainError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["record_id", "feature", "phi", "base_value", "output"])?;
    for a in attributions {
        for (name, phi) in names.iter().zip(&a.phi) {
            w.write_record([
                a.record_id.as_str(),
                name,
                &phi.to_string(),
                &a.base_value.to_string(),
                &a.output.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_importance<W: Write>(
    importance: &[FeatureImportance],
    names: &[&str],
    sink: W,
) -> Result<(), ExplainError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["rank", "feature", "importance"])?;
    for (i, f) in importance.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            names[f.feature].to_string(),
            f.importance.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_profiles<W: Write>(profiles: &[ActorProfile], sink: W) -> Result<(), ExplainError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "country",
        "risk_centrality",
        "log_volume",
        "median_price_deviation",
        "mean_composite",
        "records",
        "cluster",
        "shadow_hub",
    ])?;
    for p in profiles {
        w.write_record([
            p.country.to_string(),
            p.risk_centrality.to_string(),
            p.log_volume.to_string(),
            p.median_price_deviation.to_string(),
            p.mean_composite.to_string(),
            p.records.to_string(),
            p.cluster.to_string(),
            p.shadow_hub.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_hs_risk<W: Write>(risk: &BTreeMap<String, HsRisk>, sink: W) -> Result<(), ExplainError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["rank", "heading", "mean_score", "count"])?;
    for (i, (h, r)) in rank_hs_risk(risk).into_iter().enumerate() {
        w.write_record([(i + 1).to_string(), h, r.mean_score.to_string(), r.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::HsCode;
    use proptest::prelude::*;

    #[test]
    fn additive_scorer_attributes_inputs() {
        let x = [1.5, -2.0, 4.0];
        let a = shapley_exact(|v| v.iter().sum(), &x, &[vec![0.0; 3]]).unwrap();
        for (p, xi) in a.phi.iter().zip(x) {
            assert!((p - xi).abs() < 1e-12);
        }
    }

    #[test]
    fn product_splits_evenly() {
        // Subsets: {} -> 0, {1} -> 0, {2} -> 0, {1,2} -> 6; each feature gets 6/2.
        let a = shapley_exact(|v| v[0] * v[1], &[2.0, 3.0], &[vec![0.0, 0.0]]).unwrap();
        assert!((a.phi[0] - 3.0).abs() < 1e-12);
        assert!((a.phi[1] - 3.0).abs() < 1e-12);
        assert_eq!(a.output, 6.0);
        assert_eq!(a.base_value, 0.0);
    }

    #[test]
    fn symmetric_features_share_equally() {
        let a = shapley_exact(
            |v| (v[0] + v[1]).powi(2) + v[2],
            &[1.0, 1.0, 5.0],
            &[vec![0.0; 3], vec![2.0; 3]],
        )
        .unwrap();
        assert!((a.phi[0] - a.phi[1]).abs() < 1e-12);
    }

    #[test]
    fn ignored_feature_gets_nothing() {
        let a = shapley_exact(|v| v[0] * 3.0 + v[1].sin(), &[1.0, 2.0, 9.0], &[vec![0.5, 0.1, 0.0]]).unwrap();
        assert!(a.phi[2].abs() < 1e-12);
    }

    #[test]
    fn too_many_features_are_refused() {
        let x = vec![0.0; 13];
        assert!(matches!(
            shapley_exact(|v| v[0], &x, &[x.clone()]),
            Err(ExplainError::TooManyFeatures(13))
        ));
        assert!(matches!(
            shapley_exact(|v| v[0], &[1.0], &[]),
            Err(ExplainError::EmptyBackground)
        ));
    }

    proptest! {
        #[test]
        fn efficiency_holds(x in prop::collection::vec(-5.0f64..5.0, 1..7), bg in prop::collection::vec(-5.0f64..5.0, 6)) {
            let d = x.len();
            let background = vec![bg[..d].to_vec()];
            let f = |v: &[f64]| v.iter().enumerate().map(|(i, a)| a * (i as f64 + 1.0)).product::<f64>().tanh() + v[0] * v[d - 1];
            let a = shapley_exact(f, &x, &background).unwrap();
            let sum: f64 = a.phi.iter().sum();
            prop_assert!((sum - (a.output - a.base_value)).abs() < 1e-9);
        }
    }

    fn random_matrix(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SeededRng::new(seed);
        (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
    }

    #[test]
    fn importance_finds_the_used_feature() {
        let x = random_matrix(1000, 4, 1);
        let labels: Vec<bool> = x.iter().map(|r| r[1] > 1.0).collect();
        let imp = permutation_importance(|v| v[1], &x, &labels, 10, 3).unwrap();
        assert_eq!(imp[0].feature, 1);
        assert!(imp[0].importance > 0.1);
        for f in &imp[1..] {
            assert!(f.importance.abs() < 0.01);
        }
    }

    #[test]
    fn duplicate_columns_hide_each_other() {
        let mut x = random_matrix(1000, 3, 2);
        for r in &mut x {
            r[2] = r[0];
        }
        let labels: Vec<bool> = x.iter().map(|r| r[0] > 1.0).collect();
        // The scorer takes the larger copy, so either column alone still carries the signal.
        let imp = permutation_importance(|v| v[0].max(v[2]), &x, &labels, 10, 3).unwrap();
        let by: BTreeMap<usize, f64> = imp.iter().map(|f| (f.feature, f.importance)).collect();
        assert!(by[&0] < 0.1 && by[&2] < 0.1, "{by:?}");
    }

    #[test]
    fn importance_guards() {
        let x = random_matrix(10, 2, 1);
        assert!(matches!(
            permutation_importance(|v| v[0], &x, &[true; 10], 1, 0),
            Err(ExplainError::ConstantLabels)
        ));
        let labels: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        assert!(matches!(
            permutation_importance(|v| v[0], &x, &labels, 0, 0),
            Err(ExplainError::Parameter(_))
        ));
    }

    #[test]
    fn separable_data_splits_at_midpoint() {
        let x: Vec<Vec<f64>> = (1..=10).map(|i| vec![i as f64]).collect();
        let flags: Vec<bool> = x.iter().map(|r| r[0] > 5.0).collect();
        let t = fit_rule_tree(&x, &flags, &["price_disparity"], 3).unwrap();
        match &t.root {
            RuleNode::Split {
                threshold, left, right, ..
            } => {
                assert_eq!(*threshold, 5.5);
                assert_eq!(
                    **left,
                    RuleNode::Leaf {
                        anomaly_fraction: 0.0,
                        count: 5
                    }
                );
                assert_eq!(
                    **right,
                    RuleNode::Leaf {
                        anomaly_fraction: 1.0,
                        count: 5
                    }
                );
            }
            other => panic!("expected split, got {other:?}"),
        }
        assert_eq!(
            t.rules(),
            vec![
                "IF price_disparity <= 5.5 THEN normal (p = 0.0000, n = 5)",
                "IF price_disparity > 5.5 THEN anomaly (p = 1.0000, n = 5)"
            ]
        );
    }

    #[test]
    fn identical_rows_make_one_leaf() {
        let x = vec![vec![1.0, 2.0]; 5];
        let flags = [true, true, true, false, false];
        let t = fit_rule_tree(&x, &flags, &["a", "b"], 3).unwrap();
        assert_eq!(
            t.root,
            RuleNode::Leaf {
                anomaly_fraction: 0.6,
                count: 5
            }
        );
    }

    #[test]
    fn zero_depth_is_the_base_rate() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let flags: Vec<bool> = (0..8).map(|i| i < 2).collect();
        let t = fit_rule_tree(&x, &flags, &["a"], 0).unwrap();
        assert_eq!(
            t.root,
            RuleNode::Leaf {
                anomaly_fraction: 0.25,
                count: 8
            }
        );
        assert!(matches!(
            fit_rule_tree(&x, &[false; 8], &["a"], 2),
            Err(ExplainError::SingleClass)
        ));
    }

    proptest! {
        #[test]
        fn tree_beats_majority(rows in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0, any::<bool>()), 2..60), depth in 0usize..4) {
            let x: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0, r.1]).collect();
            let flags: Vec<bool> = rows.iter().map(|r| r.2).collect();
            let pos = flags.iter().filter(|&&f| f).count();
            prop_assume!(pos > 0 && pos < flags.len());
            let t = fit_rule_tree(&x, &flags, &["a", "b"], depth).unwrap();
            prop_assert!(t.depth() <= depth);
            let correct = x.iter().zip(&flags).filter(|(r, f)| t.predict(r) == **f).count();
            let majority = pos.max(flags.len() - pos);
            prop_assert!(correct >= majority);
        }
    }

    #[test]
    fn two_points_two_clusters() {
        let pts = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        let r = kmeans(&pts, 2, 1, 100).unwrap();
        assert_ne!(r.labels[0], r.labels[1]);
        assert_eq!(*r.wcss.last().unwrap(), 0.0);
    }

    #[test]
    fn one_cluster_centroid_is_the_mean() {
        let pts = vec![vec![1.0], vec![2.0], vec![6.0]];
        let r = kmeans(&pts, 1, 1, 100).unwrap();
        assert_eq!(r.centroids[0], vec![3.0]);
        assert!(matches!(
            kmeans(&pts, 4, 1, 100),
            Err(ExplainError::TooFewDistinct { k: 4, distinct: 3 })
        ));
    }

    fn adjusted_rand(a: &[usize], b: &[usize]) -> f64 {
        let choose2 = |n: f64| n * (n - 1.0) / 2.0;
        let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut ra: BTreeMap<usize, f64> = BTreeMap::new();
        let mut rb: BTreeMap<usize, f64> = BTreeMap::new();
        for (&x, &y) in a.iter().zip(b) {
            *table.entry((x, y)).or_default() += 1.0;
            *ra.entry(x).or_default() += 1.0;
            *rb.entry(y).or_default() += 1.0;
        }
        let index: f64 = table.values().map(|&n| choose2(n)).sum();
        let sa: f64 = ra.values().map(|&n| choose2(n)).sum();
        let sb: f64 = rb.values().map(|&n| choose2(n)).sum();
        let expected = sa * sb / choose2(a.len() as f64);
        (index - expected) / ((sa + sb) / 2.0 - expected)
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let mut rng = SeededRng::new(12);
        let centers = [[0.0, 0.0], [10.0, 0.0], [5.0, 8.66]];
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for i in 0..300 {
            let c = i % 3;
            pts.push(vec![
                centers[c][0] + 0.1 * rng.normal(),
                centers[c][1] + 0.1 * rng.normal(),
            ]);
            truth.push(c);
        }
        let r = kmeans(&pts, 3, 5, 100).unwrap();
        assert!(r.converged);
        assert!(adjusted_rand(&truth, &r.labels) >= 0.95);
        assert!(r.wcss.windows(2).all(|w| w[1] <= w[0]));
    }

    proptest! {
        #[test]
        fn kmeans_objective_never_rises(pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4..40), k in 1usize..4, seed in 0u64..50) {
            let pts: Vec<Vec<f64>> = pts.into_iter().map(|(a, b)| vec![a, b]).collect();
            prop_assume!(distinct_points(&pts) >= k);
            let r = kmeans(&pts, k, seed, 100).unwrap();
            prop_assert!(r.wcss.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        }
    }

    fn trade(reporter: u32, partner: u32, kg: f64) -> TradeRecord {
        TradeRecord {
            record_id: format!("{reporter}-{partner}"),
            period: 2022,
            reporter: CountryCode(reporter),
            partner: CountryCode(partner),
            flow: FlowDirection::Export,
            hs_code: HsCode::new("760110").unwrap(),
            net_weight: kg,
            trade_value: kg * 2.5,
        }
    }

    fn fv(reporter: u32, dev: f64) -> FeatureVector {
        FeatureVector {
            price_deviation: dev,
            unit_value: 0.4,
            price_disparity: 0.0,
            log_gap_ratio: 0.0,
            log_volume: 1.0,
            reporter_code: CountryCode(reporter),
            has_mirror: true,
            price_imputed: false,
        }
    }

    #[test]
    fn bridge_is_a_shadow_hub() {
        // Two clusters {1,2,3} and {5,6,7} joined through low-volume 4; 1 is the big exporter.
        let records = vec![
            trade(1, 2, 1e6),
            trade(2, 3, 1e4),
            trade(3, 1, 1e4),
            trade(4, 5, 10.0),
            trade(5, 6, 1e4),
            trade(6, 7, 1e4),
            trade(7, 5, 1e4),
        ];
        let features: Vec<FeatureVector> = records.iter().map(|r| fv(r.reporter.0, 0.1)).collect();
        let centrality: BTreeMap<CountryCode, f64> =
            [(1, 0.2), (2, 0.0), (3, 0.3), (4, 0.6), (5, 0.5), (6, 0.0), (7, 0.0)]
                .into_iter()
                .map(|(c, b)| (CountryCode(c), b))
                .collect();
        let (profiles, warnings) = actor_profiles(&records, &features, &[0.5; 7], &centrality, 2, 1).unwrap();
        assert!(warnings.is_empty());
        let get = |c: u32| profiles.iter().find(|p| p.country == CountryCode(c)).unwrap();
        assert!(get(4).shadow_hub);
        assert!(!get(1).shadow_hub);
        for p in &profiles {
            if p.shadow_hub {
                assert!(p.risk_centrality > 0.2 && p.log_volume < 4.0);
            }
        }
    }

    #[test]
    fn single_reporter_is_never_a_hub() {
        let records = vec![trade(1, 2, 5.0), trade(1, 3, 7.0)];
        let features = vec![fv(1, 0.0), fv(1, 0.2)];
        let centrality = BTreeMap::new();
        let (profiles, warnings) = actor_profiles(&records, &features, &[0.1, 0.3], &centrality, 1, 0).unwrap();
        assert_eq!(profiles.len(), 1);
        assert!(!profiles[0].shadow_hub);
        assert_eq!(profiles[0].risk_centrality, 0.0);
        assert_eq!(warnings.len(), 1);
        assert!((profiles[0].mean_composite - 0.2).abs() < 1e-15);
    }

    #[test]
    fn single_cluster_labels_everyone_alike() {
        let records: Vec<TradeRecord> = (1..=5).map(|c| trade(c, 9, c as f64 * 100.0)).collect();
        let features: Vec<FeatureVector> = (1..=5).map(|c| fv(c, c as f64)).collect();
        let centrality = (1..=5).map(|c| (CountryCode(c), c as f64 / 10.0)).collect();
        let (profiles, _) = actor_profiles(&records, &features, &[0.0; 5], &centrality, 1, 0).unwrap();
        assert!(profiles.iter().all(|p| p.cluster == 0));
    }

    #[test]
    fn fingerprint_bounds() {
        let lo = FeatureVector {
            price_deviation: 0.0,
            unit_value: -1.0,
            price_disparity: 0.0,
            log_gap_ratio: -2.0,
            log_volume: 1.0,
            reporter_code: CountryCode(1),
            has_mirror: true,
            price_imputed: false,
        };
        let hi = FeatureVector {
            price_deviation: -3.0,
            unit_value: 2.0,
            price_disparity: 1.5,
            log_gap_ratio: 2.0,
            log_volume: 1.0,
            ..lo.clone()
        };
        let stats = RadarStats::from_features(&[lo.clone(), hi.clone()]);
        assert_eq!(fingerprint(&lo, &stats), [0.0, 0.0, 0.0, 0.0, 0.5]);
        assert_eq!(fingerprint(&hi, &stats), [1.0, 1.0, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn hs_risk_means_per_heading() {
        let mut a = trade(1, 2, 1.0);
        a.hs_code = HsCode::new("761699").unwrap();
        let b = trade(1, 2, 1.0);
        let c = trade(3, 2, 1.0);
        let risk = hs_risk_scores(&[a, b, c], &[0.9, 0.2, 0.4]);
        assert_eq!(risk.len(), 2);
        assert_eq!(
            risk["7616"],
            HsRisk {
                mean_score: 0.9,
                count: 1
            }
        );
        assert!((risk["7601"].mean_score - 0.3).abs() < 1e-15);
        assert_eq!(rank_hs_risk(&risk)[0].0, "7616");
        let flat = hs_risk_scores(&[trade(1, 2, 1.0), trade(5, 6, 2.0)], &[0.5, 0.5]);
        assert!(flat.values().all(|r| r.mean_score == 0.5));
    }
}
