//! Composite risk, policy checks (price bands, destination validation),
//! detection recall, plot-data views and the output manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::benford::{benford_by_segment, write_digit_table, SegmentResult, ValueField};
use crate::explain::{fingerprint, hs_risk_scores, rank_hs_risk, HsRisk, RadarStats, RADAR_AXES};
use crate::features::{unit_price, FeatureVector};
use crate::ingest::{CountryCode, CountryTable, TradeRecord};
use crate::mirror::{missing_metal_series, MirrorPair, PairKey};
use crate::stats::{average_ranks, median, robust_scale};
use crate::synth::{GroundTruth, Label};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no layer scores available")]
    NoLayers,
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("record {0} is unpriced")]
    Unpriced(String),
    #[error("layer `{layer}` has {got} scores for {expected} records")]
    Misaligned { layer: String, got: usize, expected: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const LAYERS: [&str; 4] = ["benford", "iforest", "network", "autoenc"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerWeights {
    pub benford: f64,
    pub iforest: f64,
    pub network: f64,
    pub autoenc: f64,
}

impl Default for LayerWeights {
    fn default() -> Self {
        Self {
            benford: 0.25,
            iforest: 0.25,
            network: 0.25,
            autoenc: 0.25,
        }
    }
}

impl LayerWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.benford, self.iforest, self.network, self.autoenc]
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        let w = self.as_array();
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(ReportError::Weights("weights must be finite and >= 0".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ReportError::Weights(format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// `(rank - 1) / (n - 1)` with average ranks for ties; a single value maps to 0.
pub fn rank_normalize(raw: &[f64]) -> Vec<f64> {
    if raw.len() < 2 {
        return vec![0.0; raw.len()];
    }
    let denom = (raw.len() - 1) as f64;
    average_ranks(raw).into_iter().map(|r| (r - 1.0) / denom).collect()
}

/// Weighted mean of normalized layer scores; missing layers drop out and the
/// remaining weights are rescaled to sum to one.
pub fn composite_score(scores: &[Option<f64>], weights: &[f64]) -> Result<f64, ReportError> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut any = false;
    for (s, w) in scores.iter().zip(weights) {
        if let Some(s) = s {
            any = true;
            num += w * s;
            den += w;
        }
    }
    if !any {
        return Err(ReportError::NoLayers);
    }
    if den <= 0.0 {
        return Err(ReportError::Weights("available layers carry zero weight".into()));
    }
    Ok((num / den).clamp(0.0, 1.0))
}

/// Raw per-record layer scores in [`LAYERS`] order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerScores {
    pub layers: [Option<Vec<f64>>; 4],
}

impl LayerScores {
    pub fn available(&self) -> Vec<&'static str> {
        LAYERS
            .iter()
            .zip(&self.layers)
            .filter(|(_, l)| l.is_some())
            .map(|(n, _)| *n)
            .collect()
    }
}

/// Rank-normalize each layer over the corpus, then fuse.
pub fn composite_all(scores: &LayerScores, n: usize, weights: &LayerWeights) -> Result<Vec<f64>, ReportError> {
    weights.validate()?;
    let mut normalized: Vec<Option<Vec<f64>>> = Vec::with_capacity(4);
    for (name, layer) in LAYERS.iter().zip(&scores.layers) {
        match layer {
            Some(raw) if raw.len() != n => {
                return Err(ReportError::Misaligned {
                    layer: name.to_string(),
                    got: raw.len(),
                    expected: n,
                })
            }
            Some(raw) => normalized.push(Some(rank_normalize(raw))),
            None => normalized.push(None),
        }
    }
    if normalized.iter().all(Option::is_none) {
        return Err(ReportError::NoLayers);
    }
    let w = weights.as_array();
    (0..n)
        .map(|i| {
            let row: Vec<Option<f64>> = normalized.iter().map(|l| l.as_ref().map(|v| v[i])).collect();
            composite_score(&row, &w)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceBand {
    pub group: String,
    /// Median USD/kg.
    pub center: f64,
    pub half_width: f64,
    pub window: (i32, i32),
}

impl PriceBand {
    pub fn new(group: &str, center: f64, robust_scale: f64, k: f64, window: (i32, i32)) -> Self {
        Self {
            group: group.to_string(),
            center,
            half_width: (k * robust_scale).max(0.0),
            window,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandOutcome {
    Pass,
    /// Absolute distance from the band center.
    AuditHold(f64),
}

pub fn price_band_check(record: &TradeRecord, band: &PriceBand) -> Result<BandOutcome, ReportError> {
    let p = unit_price(record)
        .ok()
        .filter(|p| *p > 0.0)
        .ok_or_else(|| ReportError::Unpriced(record.record_id.clone()))?;
    let dev = (p - band.center).abs();
    Ok(if dev > band.half_width {
        BandOutcome::AuditHold(dev)
    } else {
        BandOutcome::Pass
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandConfig {
    pub k: f64,
    /// Trailing periods per band, including the current one.
    pub window: usize,
    pub min_group: usize,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self {
            k: 3.0,
            window: 3,
            min_group: crate::features::DEFAULT_MIN_GROUP,
        }
    }
}

/// Dynamic bands keyed by `(period, heading)`: each period's band uses the
/// priced records of the trailing window in that heading, or of every
/// heading when the group is smaller than `min_group`.
pub fn price_bands(records: &[TradeRecord], cfg: &BandConfig) -> BTreeMap<(i32, String), PriceBand> {
    let mut by_period: BTreeMap<i32, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in records {
        if let Ok(p) = unit_price(r) {
            if p > 0.0 {
                by_period
                    .entry(r.period)
                    .or_default()
                    .entry(r.hs_code.heading().to_string())
                    .or_default()
                    .push(p);
            }
        }
    }
    let span = cfg.window.max(1) as i32;
    let mut out = BTreeMap::new();
    for &period in by_period.keys() {
        let lo = period - span + 1;
        let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut all = Vec::new();
        for (_, headings) in by_period.range(lo..=period) {
            for (h, prices) in headings {
                groups.entry(h.as_str()).or_default().extend(prices);
                all.extend(prices);
            }
        }
        let global_center = median(&all).unwrap_or(0.0);
        let global_scale = robust_scale(&all, global_center);
        for (h, prices) in groups {
            let band = if prices.len() >= cfg.min_group {
                let c = median(&prices).unwrap_or(0.0);
                PriceBand::new(h, c, robust_scale(&prices, c), cfg.k, (lo, period))
            } else {
                PriceBand::new(
                    crate::features::GLOBAL_GROUP,
                    global_center,
                    global_scale,
                    cfg.k,
                    (lo, period),
                )
            };
            out.insert((period, h.to_string()), band);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DestinationFailure {
    Unspecified,
    UnknownCode,
}

pub fn destination_check(record: &TradeRecord, valid: &CountryTable) -> Result<(), DestinationFailure> {
    if record.partner.is_unspecified() {
        Err(DestinationFailure::Unspecified)
    } else if !valid.contains(record.partner) {
        Err(DestinationFailure::UnknownCode)
    } else {
        Ok(())
    }
}

/// Per-record fused outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskRow {
    pub composite: f64,
    pub composite_flag: bool,
    pub audit_hold: bool,
    pub band: Option<PriceBand>,
    pub destination: Result<(), DestinationFailure>,
    pub top5_mirror_outlier: bool,
}

impl RiskRow {
    pub fn any_flag(&self) -> bool {
        self.composite_flag || self.audit_hold || self.destination.is_err() || self.top5_mirror_outlier
    }

    /// Summary section, by precedence; `None` when unflagged.
    pub fn section(&self) -> Option<&'static str> {
        if self.destination.is_err() {
            Some("destination_fail")
        } else if self.audit_hold {
            Some("audit_hold")
        } else if self.top5_mirror_outlier {
            Some("top5_mirror_outlier")
        } else if self.composite_flag {
            Some("model_only")
        } else {
            None
        }
    }
}

pub const SECTIONS: [&str; 4] = ["destination_fail", "audit_hold", "top5_mirror_outlier", "model_only"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub trades: usize,
    pub detected: usize,
    pub recall: f64,
}

/// Trade-level recall: a fraudulent trade counts as detected when any of
/// its records is flagged.
pub fn recall_by_typology(records: &[TradeRecord], flags: &[bool], truth: &GroundTruth) -> BTreeMap<String, RecallRow> {
    let mut trades: BTreeMap<&str, (Label, bool)> = BTreeMap::new();
    for (r, &f) in records.iter().zip(flags) {
        if let Some((trade, label)) = truth.labels.get(&r.record_id) {
            let e = trades.entry(trade.as_str()).or_insert((*label, false));
            e.1 |= f;
        }
    }
    let mut acc: BTreeMap<Label, (usize, usize)> = BTreeMap::new();
    for (label, hit) in trades.values() {
        let e = acc.entry(*label).or_default();
        e.0 += 1;
        e.1 += usize::from(*hit);
    }
    let row = |(n, d): (usize, usize)| RecallRow {
        trades: n,
        detected: d,
        recall: if n > 0 { d as f64 / n as f64 } else { 0.0 },
    };
    let mut out = BTreeMap::new();
    let mut fraud = (0, 0);
    for label in Label::FRAUD {
        if let Some(&(n, d)) = acc.get(&label) {
            fraud.0 += n;
            fraud.1 += d;
            out.insert(label.to_string(), row((n, d)));
        }
    }
    out.insert("overall".to_string(), row(fraud));
    if let Some(&(n, d)) = acc.get(&Label::Normal) {
        out.insert("normal_false_positive".to_string(), row((n, d)));
    }
    out
}

/// Log10 histogram of unit prices per heading plus the global `*` group,
/// with each group's median.
pub fn write_price_histogram<W: Write>(records: &[TradeRecord], bins: usize, sink: W) -> Result<usize, ReportError> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        if let Ok(p) = unit_price(r) {
            if p > 0.0 {
                groups.entry(r.hs_code.heading().to_string()).or_default().push(p);
                groups
                    .entry(crate::features::GLOBAL_GROUP.to_string())
                    .or_default()
                    .push(p);
            }
        }
    }
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["group", "bin_lo_usd_kg", "bin_hi_usd_kg", "count", "median_usd_kg"])?;
    let mut rows = 0;
    for (g, prices) in &groups {
        let logs: Vec<f64> = prices.iter().map(|p| p.log10()).collect();
        let lo = logs.iter().copied().fold(f64::INFINITY, f64::min).floor();
        let hi = logs
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
            .ceil()
            .max(lo + 1.0);
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for l in &logs {
            let b = (((l - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let m = median(prices).unwrap_or(0.0).to_string();
        for (b, c) in counts.iter().enumerate() {
            let a = 10f64.powf(lo + width * b as f64);
            let z = 10f64.powf(lo + width * (b + 1) as f64);
            w.write_record([g.clone(), a.to_string(), z.to_string(), c.to_string(), m.clone()])?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

/// Value declared to partner 0 per exporter, largest first.
pub fn ghost_routes(records: &[TradeRecord]) -> Vec<(CountryCode, f64, f64)> {
    let share = crate::mirror::ghost_share(records);
    let mut ghost: BTreeMap<CountryCode, f64> = BTreeMap::new();
    for r in records {
        if r.flow == crate::ingest::FlowDirection::Export && r.partner.is_unspecified() {
            *ghost.entry(r.reporter).or_default() += r.trade_value;
        }
    }
    let mut out: Vec<(CountryCode, f64, f64)> = ghost
        .into_iter()
        .map(|(c, v)| (c, v, share.get(&c).copied().unwrap_or(0.0)))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// Everything the report stage fuses. Per-record slices are aligned with
/// `records`; empty slices are allowed only for an empty corpus.
pub struct ReportInputs<'a> {
    pub records: &'a [TradeRecord],
    pub features: &'a [FeatureVector],
    pub layers: &'a LayerScores,
    pub composite: &'a [f64],
    pub composite_flags: &'a [bool],
    pub pairs: &'a [MirrorPair],
    pub pair_flags: &'a [bool],
    pub countries: &'a CountryTable,
    /// Record id to the feature with the largest absolute attribution.
    pub top_attribution: &'a BTreeMap<String, String>,
    pub autoenc_threshold: Option<f64>,
    pub truth: Option<&'a GroundTruth>,
    pub weights: LayerWeights,
    pub bands: BandConfig,
    pub top_flags: usize,
}

pub const RISK_TABLE: &str = "risk_table.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TXT: &str = "summary.txt";

fn check_len(layer: &str, got: usize, expected: usize) -> Result<(), ReportError> {
    if got != expected {
        return Err(ReportError::Misaligned {
            layer: layer.to_string(),
            got,
            expected,
        });
    }
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-record band outcomes and fused flags.
pub fn risk_rows(inputs: &ReportInputs) -> Result<(Vec<RiskRow>, Vec<String>), ReportError> {
    let n = inputs.records.len();
    check_len("composite", inputs.composite.len(), n)?;
    check_len("composite_flags", inputs.composite_flags.len(), n)?;
    check_len("pair_flags", inputs.pair_flags.len(), inputs.pairs.len())?;
    let bands = price_bands(inputs.records, &inputs.bands);
    let flagged_pairs: std::collections::BTreeSet<&PairKey> = inputs
        .pairs
        .iter()
        .zip(inputs.pair_flags)
        .filter(|(_, &f)| f)
        .map(|(p, _)| &p.key)
        .collect();
    let mut warnings = Vec::new();
    let mut unpriced = 0usize;
    let rows = inputs
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let band = bands.get(&(r.period, r.hs_code.heading().to_string())).cloned();
            let audit_hold = match &band {
                Some(b) => match price_band_check(r, b) {
                    Ok(outcome) => matches!(outcome, BandOutcome::AuditHold(_)),
                    Err(_) => {
                        unpriced += 1;
                        false
                    }
                },
                None => {
                    unpriced += 1;
                    false
                }
            };
            RiskRow {
                composite: inputs.composite[i],
                composite_flag: inputs.composite_flags[i],
                audit_hold,
                band,
                destination: destination_check(r, inputs.countries),
                top5_mirror_outlier: flagged_pairs.contains(&PairKey::of(r)),
            }
        })
        .collect();
    if unpriced > 0 {
        warnings.push(format!("{unpriced} unpriced records skipped by the price-band check"));
    }
    Ok((rows, warnings))
}

fn write_risk_table<W: Write>(inputs: &ReportInputs, rows: &[RiskRow], sink: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header: Vec<String> = [
        "record_id",
        "period",
        "reporter",
        "partner",
        "flow",
        "hs_code",
        "unit_price",
        "benford_excess_mad",
        "iforest_score",
        "network_violation",
        "autoenc_error",
        "composite",
        "composite_flag",
        "audit_hold",
        "band_center",
        "band_half_width",
        "destination_fail",
        "top5_mirror_outlier",
        "section",
        "top_attribution",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(RADAR_AXES.iter().map(|a| format!("fp_{a}")));
    header.push("label".into());
    w.write_record(&header)?;
    let radar = RadarStats::from_features(inputs.features);
    for (i, (r, row)) in inputs.records.iter().zip(rows).enumerate() {
        let layer = |k: usize| cell(inputs.layers.layers[k].as_ref().map(|v| v[i]));
        let mut out = vec![
            r.record_id.clone(),
            r.period.to_string(),
            r.reporter.to_string(),
            r.partner.to_string(),
            r.flow.code().to_string(),
            r.hs_code.to_string(),
            cell(unit_price(r).ok()),
            layer(0),
            layer(1),
            layer(2),
            layer(3),
            row.composite.to_string(),
            row.composite_flag.to_string(),
            row.audit_hold.to_string(),
            cell(row.band.as_ref().map(|b| b.center)),
            cell(row.band.as_ref().map(|b| b.half_width)),
            match row.destination {
                Ok(()) => String::new(),
                Err(reason) => format!("{reason:?}"),
            },
            row.top5_mirror_outlier.to_string(),
            row.section().unwrap_or("").to_string(),
            inputs.top_attribution.get(&r.record_id).cloned().unwrap_or_default(),
        ];
        match inputs.features.get(i) {
            Some(fv) => out.extend(fingerprint(fv, &radar).iter().map(f64::to_string)),
            None => out.extend(std::iter::repeat_n(String::new(), RADAR_AXES.len())),
        }
        out.push(
            inputs
                .truth
                .and_then(|t| t.label(&r.record_id))
                .map(|l| l.to_string())
                .unwrap_or_default(),
        );
        w.write_record(&out)?;
    }
    w.flush()?;
    Ok(())
}

fn write_mirror_scatter<W: Write>(pairs: &[MirrorPair], flags: &[bool], sink: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "period",
        "exporter",
        "importer",
        "hs_code",
        "export_kg",
        "import_kg",
        "status",
        "top5_mirror_outlier",
    ])?;
    for (p, f) in pairs.iter().zip(flags) {
        w.write_record([
            p.key.period.to_string(),
            p.key.exporter.to_string(),
            p.key.importer.to_string(),
            p.key.hs_code.to_string(),
            p.export_kg.to_string(),
            p.import_kg.to_string(),
            format!("{:?}", p.status),
            f.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_missing_metal<W: Write>(pairs: &[MirrorPair], sink: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["period", "total_export_kg", "total_import_kg", "missing_kg", "gap_pct"])?;
    for p in missing_metal_series(pairs) {
        w.write_record([
            p.period.to_string(),
            p.total_export_kg.to_string(),
            p.total_import_kg.to_string(),
            p.missing_kg.to_string(),
            cell(p.gap_pct),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_error_scatter<W: Write>(inputs: &ReportInputs, sink: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["index", "record_id", "error", "threshold", "flag", "label"])?;
    if let Some(errors) = &inputs.layers.layers[3] {
        for (i, (r, e)) in inputs.records.iter().zip(errors).enumerate() {
            w.write_record([
                i.to_string(),
                r.record_id.clone(),
                e.to_string(),
                cell(inputs.autoenc_threshold),
                inputs.autoenc_threshold.map(|t| *e > t).unwrap_or(false).to_string(),
                inputs
                    .truth
                    .and_then(|t| t.label(&r.record_id))
                    .map(|l| l.to_string())
                    .unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean fingerprint per group: ground-truth label when known, otherwise
/// flagged versus unflagged.
fn write_radar<W: Write>(inputs: &ReportInputs, rows: &[RiskRow], sink: W) -> Result<(), ReportError> {
    let radar = RadarStats::from_features(inputs.features);
    let mut groups: BTreeMap<String, ([f64; 5], usize)> = BTreeMap::new();
    for ((r, fv), row) in inputs.records.iter().zip(inputs.features).zip(rows) {
        let key = match inputs.truth {
            Some(t) => t
                .label(&r.record_id)
                .map(|l| l.to_string())
                .unwrap_or_else(|| "unlabeled".into()),
            None if row.any_flag() => "flagged".into(),
            None => "unflagged".into(),
        };
        let e = groups.entry(key).or_insert(([0.0; 5], 0));
        for (acc, v) in e.0.iter_mut().zip(fingerprint(fv, &radar)) {
            *acc += v;
        }
        e.1 += 1;
    }
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["group", "axis", "value", "count"])?;
    for (g, (sum, count)) in &groups {
        for (axis, s) in RADAR_AXES.iter().zip(sum) {
            w.write_record([g.as_str(), axis, &(s / *count as f64).to_string(), &count.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_ranked_hs<W: Write>(ranked: &[(String, HsRisk)], sink: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["rank", "heading", "mean_score", "count"])?;
    for (i, (h, r)) in ranked.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            h.clone(),
            r.mean_score.to_string(),
            r.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_ghost_routes<W: Write>(routes: &[(CountryCode, f64, f64)], sink: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["reporter", "ghost_value", "ghost_share"])?;
    for (c, v, s) in routes {
        w.write_record([c.to_string(), v.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn summary_document(
    inputs: &ReportInputs,
    rows: &[RiskRow],
    ranked_hs: &[(String, HsRisk)],
    routes: &[(CountryCode, f64, f64)],
    warnings: &[String],
) -> serde_json::Value {
    use serde_json::json;
    let mut sections: serde_json::Map<String, serde_json::Value> =
        SECTIONS.iter().map(|s| (s.to_string(), json!(0))).collect();
    for s in rows.iter().filter_map(RiskRow::section) {
        let e = sections.get_mut(s).expect("known section");
        *e = json!(e.as_u64().unwrap_or(0) + 1);
    }
    let flagged = rows.iter().filter(|r| r.any_flag()).count();
    let order = crate::stats::top_indices(inputs.composite, inputs.top_flags);
    let top: Vec<serde_json::Value> = order
        .iter()
        .map(|&i| {
            let r = &inputs.records[i];
            json!({
                "record_id": r.record_id,
                "reporter": r.reporter.0,
                "partner": r.partner.0,
                "hs_code": r.hs_code.as_str(),
                "composite": inputs.composite[i],
                "section": rows[i].section(),
                "top_attribution": inputs.top_attribution.get(&r.record_id),
            })
        })
        .collect();
    let hs: Vec<serde_json::Value> = ranked_hs
        .iter()
        .map(|(h, r)| json!({"heading": h, "mean_score": r.mean_score, "count": r.count}))
        .collect();
    let ghost: Vec<serde_json::Value> = routes
        .iter()
        .map(|(c, v, s)| json!({"reporter": c.0, "ghost_value": v, "ghost_share": s}))
        .collect();
    let mut doc = json!({
        "counts": {
            "records": inputs.records.len(),
            "mirror_pairs": inputs.pairs.len(),
            "composite_flagged": inputs.composite_flags.iter().filter(|&&f| f).count(),
            "audit_hold": rows.iter().filter(|r| r.audit_hold).count(),
            "destination_fail": rows.iter().filter(|r| r.destination.is_err()).count(),
            "top5_mirror_outlier": rows.iter().filter(|r| r.top5_mirror_outlier).count(),
            "flagged": flagged,
            "sections": sections,
        },
        "layers": inputs.layers.available(),
        "weights": inputs.weights,
        "price_band_k": inputs.bands.k,
        "top_flags": top,
        "hs_risk_ranking": hs,
        "ghost_share_ranking": ghost,
        "warnings": warnings,
    });
    if let Some(truth) = inputs.truth {
        doc["recall"] = json!(recall_by_typology(inputs.records, inputs.composite_flags, truth));
    }
    doc
}

fn summary_text(doc: &serde_json::Value) -> String {
    let mut s = String::new();
    let c = &doc["counts"];
    s.push_str(&format!(
        "records: {}\nmirror pairs: {}\n",
        c["records"], c["mirror_pairs"]
    ));
    s.push_str(&format!("layers: {}\n", doc["layers"]));
    s.push_str(&format!("flagged records: {}\n", c["flagged"]));
    for sec in SECTIONS {
        s.push_str(&format!("  {sec}: {}\n", c["sections"][sec]));
    }
    s.push_str("\ntop flags\n");
    for t in doc["top_flags"].as_array().into_iter().flatten() {
        s.push_str(&format!(
            "  {} composite={} section={} driver={}\n",
            t["record_id"].as_str().unwrap_or(""),
            t["composite"],
            t["section"].as_str().unwrap_or("-"),
            t["top_attribution"].as_str().unwrap_or("-"),
        ));
    }
    s.push_str("\nHS-4 risk ranking\n");
    for (i, h) in doc["hs_risk_ranking"]
        .as_array()
        .into_iter()
        .flatten()
        .take(10)
        .enumerate()
    {
        s.push_str(&format!(
            "  {}. {} mean={} n={}\n",
            i + 1,
            h["heading"].as_str().unwrap_or(""),
            h["mean_score"],
            h["count"]
        ));
    }
    s.push_str("\nghost-share ranking\n");
    for g in doc["ghost_share_ranking"].as_array().into_iter().flatten().take(10) {
        s.push_str(&format!(
            "  {} value={} share={}\n",
            g["reporter"], g["ghost_value"], g["ghost_share"]
        ));
    }
    if let Some(recall) = doc.get("recall").and_then(|r| r.as_object()) {
        s.push_str("\nrecall by typology (composite top flags)\n");
        for (label, r) in recall {
            s.push_str(&format!(
                "  {label}: {}/{} = {}\n",
                r["detected"], r["trades"], r["recall"]
            ));
        }
    }
    for w in doc["warnings"].as_array().into_iter().flatten() {
        s.push_str(&format!("warning: {}\n", w.as_str().unwrap_or("")));
    }
    s
}

fn create(dir: &Path, name: &str) -> Result<std::io::BufWriter<fs::File>, ReportError> {
    Ok(std::io::BufWriter::new(fs::File::create(dir.join(name))?))
}

/// Write the risk table, summary and plot-data files into `dir`, then the
/// manifest over every file there.
pub fn emit_reports(inputs: &ReportInputs, dir: &Path) -> Result<Vec<ManifestEntry>, ReportError> {
    let n = inputs.records.len();
    for (name, layer) in LAYERS.iter().zip(&inputs.layers.layers) {
        if let Some(v) = layer {
            check_len(name, v.len(), n)?;
        }
    }
    if !inputs.features.is_empty() {
        check_len("features", inputs.features.len(), n)?;
    }
    fs::create_dir_all(dir)?;
    let (rows, warnings) = risk_rows(inputs)?;
    write_risk_table(inputs, &rows, create(dir, RISK_TABLE)?)?;

    let ranked_hs = rank_hs_risk(&hs_risk_scores(inputs.records, inputs.composite));
    let routes = ghost_routes(inputs.records);
    let doc = summary_document(inputs, &rows, &ranked_hs, &routes, &warnings);
    fs::write(dir.join(SUMMARY_JSON), serde_json::to_string_pretty(&doc)? + "\n")?;
    fs::write(dir.join(SUMMARY_TXT), summary_text(&doc))?;

    write_price_histogram(inputs.records, 20, create(dir, "plot_price_histogram.csv")?)?;
    write_mirror_scatter(inputs.pairs, inputs.pair_flags, create(dir, "plot_mirror_scatter.csv")?)?;
    write_missing_metal(inputs.pairs, create(dir, "plot_missing_metal.csv")?)?;
    let mut segments: BTreeMap<String, SegmentResult> =
        benford_by_segment(inputs.records, |r| r.reporter.to_string(), ValueField::TradeValue);
    segments.extend(benford_by_segment(
        inputs.records,
        |_| "*".to_string(),
        ValueField::TradeValue,
    ));
    write_digit_table(&segments, create(dir, "plot_benford.csv")?)?;
    write_error_scatter(inputs, create(dir, "plot_error_scatter.csv")?)?;
    write_radar(inputs, &rows, create(dir, "plot_radar.csv")?)?;
    write_ranked_hs(&ranked_hs, create(dir, "plot_hs_risk.csv")?)?;
    write_ghost_routes(&routes, create(dir, "plot_ghost_routes.csv")?)?;
    write_manifest(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub rows: usize,
    pub sha256: String,
}

fn row_count(name: &str, bytes: &[u8]) -> usize {
    let lines = bytes.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count();
    if name.ends_with(".csv") {
        lines.saturating_sub(1)
    } else {
        lines
    }
}

/// Every regular file in `dir` except the manifest itself, sorted by name.
pub fn build_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, ReportError> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(Result::ok)
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST_FILE)
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|file| {
            let bytes = fs::read(dir.join(&file))?;
            let digest = Sha256::digest(&bytes);
            Ok(ManifestEntry {
                rows: row_count(&file, &bytes),
                sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
                file,
            })
        })
        .collect()
}

pub fn write_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, ReportError> {
    let entries = build_manifest(dir)?;
    let doc = serde_json::json!({ "files": entries });
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(entries)
}
