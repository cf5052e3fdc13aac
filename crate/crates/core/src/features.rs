//! Per-transaction features shared by every detection layer.
//!
//! Definitions (fixed for reproducibility):
//!
//! | feature           | definition                                                   |
//! |-------------------|--------------------------------------------------------------|
//! | `price_deviation` | `(unit_price - group_median) / group_median`                 |
//! | `unit_value`      | `log10(unit_price)`                                          |
//! | `price_disparity` | `|ln(export_price / import_price)|` over the mirror pair     |
//! | `log_gap_ratio`   | `ln((export_kg + 1) / (import_kg + 1))` over the mirror pair |
//! | `log_volume`      | `ln(1 + net_weight)`                                         |
//! | `reporter_code`   | categorical; target-encoded before entering a model          |
//!
//! Pair features are 0 when the record has no matched counterpart and
//! `has_mirror` is false. Unpriced records are imputed at their group median
//! (`price_deviation = 0`) and carry `price_imputed`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CountryCode, HsCode, TradeRecord};
use crate::mirror::{MirrorPair, PairKey, PairStatus};
use crate::stats::{median, robust_scale};

/// Default minimum group size before a heading falls back to global stats.
pub const DEFAULT_MIN_GROUP: usize = 30;

/// Column order of the numeric model matrix.
pub const MODEL_FEATURES: [&str; 7] = [
    "price_deviation",
    "unit_value",
    "price_disparity",
    "log_gap_ratio",
    "log_volume",
    "reporter_code",
    "has_mirror",
];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("record {0} has no positive weight; unit price undefined")]
    UndefinedPrice(String),
    #[error("no priced records to benchmark against")]
    EmptyCorpus,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed feature table: {0}")]
    Malformed(String),
}

/// USD per kilogram.
pub fn unit_price(record: &TradeRecord) -> Result<f64, FeatureError> {
    if record.net_weight > 0.0 {
        Ok(record.trade_value / record.net_weight)
    } else {
        Err(FeatureError::UndefinedPrice(record.record_id.clone()))
    }
}

fn positive_price(record: &TradeRecord) -> Option<f64> {
    unit_price(record).ok().filter(|p| *p > 0.0 && p.is_finite())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    /// HS-4 heading, or `*` for the global entry.
    pub group: String,
    pub median_unit_price: f64,
    pub robust_scale: f64,
    pub sample_count: usize,
}

impl GroupStats {
    fn from_prices(group: String, prices: &[f64]) -> Self {
        let m = median(prices).unwrap_or(0.0);
        Self {
            group,
            median_unit_price: m,
            robust_scale: robust_scale(prices, m),
            sample_count: prices.len(),
        }
    }
}

pub const GLOBAL_GROUP: &str = "*";

/// Price benchmarks per HS-4 heading plus a global fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceBenchmarks {
    pub groups: BTreeMap<String, GroupStats>,
    pub global: GroupStats,
    pub min_group: usize,
}

impl PriceBenchmarks {
    /// Stats for a heading, or the global entry when the heading is thin or unseen.
    pub fn for_heading(&self, heading: &str) -> &GroupStats {
        match self.groups.get(heading) {
            Some(g) if g.sample_count >= self.min_group => g,
            _ => &self.global,
        }
    }

    pub fn for_code(&self, code: &HsCode) -> &GroupStats {
        self.for_heading(code.heading())
    }
}

/// Median and robust scale of unit prices per HS-4 heading.
pub fn group_stats(records: &[TradeRecord], min_group: usize) -> Result<PriceBenchmarks, FeatureError> {
    let refs: Vec<&TradeRecord> = records.iter().collect();
    group_stats_of(&refs, min_group)
}

pub(crate) fn group_stats_of(records: &[&TradeRecord], min_group: usize) -> Result<PriceBenchmarks, FeatureError> {
    let mut by_group: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for r in records {
        if let Some(p) = positive_price(r) {
            by_group.entry(r.hs_code.heading().to_string()).or_default().push(p);
            all.push(p);
        }
    }
    if all.is_empty() {
        return Err(FeatureError::EmptyCorpus);
    }
    Ok(PriceBenchmarks {
        groups: by_group
            .into_iter()
            .map(|(g, prices)| (g.clone(), GroupStats::from_prices(g, &prices)))
            .collect(),
        global: GroupStats::from_prices(GLOBAL_GROUP.to_string(), &all),
        min_group,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub price_deviation: f64,
    pub unit_value: f64,
    pub price_disparity: f64,
    pub log_gap_ratio: f64,
    pub log_volume: f64,
    pub reporter_code: CountryCode,
    pub has_mirror: bool,
    pub price_imputed: bool,
}

impl FeatureVector {
    /// Numeric row in [`MODEL_FEATURES`] order, with the reporter replaced by its encoding.
    pub fn model_row(&self, reporter_encoding: f64) -> Vec<f64> {
        vec![
            self.price_deviation,
            self.unit_value,
            self.price_disparity,
            self.log_gap_ratio,
            self.log_volume,
            reporter_encoding,
            if self.has_mirror { 1.0 } else { 0.0 },
        ]
    }
}

/// `|ln(a / b)|`.
pub fn price_disparity(export_price: f64, import_price: f64) -> f64 {
    (export_price / import_price).ln().abs()
}

/// `ln((export_kg + 1) / (import_kg + 1))`.
pub fn log_gap_ratio(export_kg: f64, import_kg: f64) -> f64 {
    ((export_kg + 1.0) / (import_kg + 1.0)).ln()
}

pub fn compute_features(record: &TradeRecord, mirror: Option<&MirrorPair>, stats: &GroupStats) -> FeatureVector {
    let center = stats.median_unit_price;
    let (price_deviation, unit_value, price_imputed) = match positive_price(record) {
        Some(p) if center > 0.0 => ((p - center) / center, p.log10(), false),
        Some(p) => (0.0, p.log10(), true),
        None if center > 0.0 => (0.0, center.log10(), true),
        None => (0.0, 0.0, true),
    };
    let matched = mirror.filter(|m| m.status == PairStatus::Matched);
    let (price_disparity, log_gap_ratio) = match matched {
        Some(m) => (
            m.side_prices().map(|(e, i)| price_disparity(e, i)).unwrap_or(0.0),
            log_gap_ratio(m.export_kg, m.import_kg),
        ),
        None => (0.0, 0.0),
    };
    FeatureVector {
        price_deviation,
        unit_value,
        price_disparity,
        log_gap_ratio,
        log_volume: record.net_weight.ln_1p(),
        reporter_code: record.reporter,
        has_mirror: matched.is_some(),
        price_imputed,
    }
}

/// Features for every record, looking each one up in its mirror pair and price group.
pub fn compute_all(records: &[TradeRecord], pairs: &[MirrorPair], benchmarks: &PriceBenchmarks) -> Vec<FeatureVector> {
    let by_key: HashMap<&PairKey, &MirrorPair> = pairs.iter().map(|p| (&p.key, p)).collect();
    records
        .par_iter()
        .map(|r| {
            let key = PairKey::of(r);
            compute_features(r, by_key.get(&key).copied(), benchmarks.for_code(&r.hs_code))
        })
        .collect()
}

/// Median `price_deviation` per reporter over rows not flagged anomalous.
/// Imputed prices are ignored. Reporters with no usable rows encode to 0.
pub fn encode_reporters(features: &[FeatureVector], flags: Option<&[bool]>) -> BTreeMap<CountryCode, f64> {
    let mut by_reporter: BTreeMap<CountryCode, Vec<f64>> = BTreeMap::new();
    for (i, f) in features.iter().enumerate() {
        let entry = by_reporter.entry(f.reporter_code).or_default();
        let flagged = flags.map(|fl| fl[i]).unwrap_or(false);
        if !flagged && !f.price_imputed {
            entry.push(f.price_deviation);
        }
    }
    by_reporter
        .into_iter()
        .map(|(k, v)| (k, median(&v).unwrap_or(0.0)))
        .collect()
}

/// Model matrix in [`MODEL_FEATURES`] order. Unknown reporters encode to 0.
pub fn model_matrix(features: &[FeatureVector], encoding: &BTreeMap<CountryCode, f64>) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|f| f.model_row(encoding.get(&f.reporter_code).copied().unwrap_or(0.0)))
        .collect()
}

const TABLE_HEADER: [&str; 9] = [
    "record_id",
    "price_deviation",
    "unit_value",
    "price_disparity",
    "log_gap_ratio",
    "log_volume",
    "reporter_code",
    "has_mirror",
    "price_imputed",
];

/// Feature table: one row per record, columns in the fixed order.
pub fn write_features<W: Write>(ids: &[String], features: &[FeatureVector], sink: W) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(TABLE_HEADER)?;
    for (id, f) in ids.iter().zip(features) {
        w.write_record([
            id.clone(),
            f.price_deviation.to_string(),
            f.unit_value.to_string(),
            f.price_disparity.to_string(),
            f.log_gap_ratio.to_string(),
            f.log_volume.to_string(),
            f.reporter_code.to_string(),
            f.has_mirror.to_string(),
            f.price_imputed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features<R: Read>(source: R) -> Result<(Vec<String>, Vec<FeatureVector>), FeatureError> {
    let mut r = csv::Reader::from_reader(source);
    let mut ids = Vec::new();
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64, FeatureError> {
            row.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| FeatureError::Malformed(format!("column {} of {:?}", TABLE_HEADER[i], row.get(0))))
        };
        ids.push(row.get(0).unwrap_or("").to_string());
        out.push(FeatureVector {
            price_deviation: num(1)?,
            unit_value: num(2)?,
            price_disparity: num(3)?,
            log_gap_ratio: num(4)?,
            log_volume: num(5)?,
            reporter_code: CountryCode(
                row.get(6)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| FeatureError::Malformed("reporter_code".into()))?,
            ),
            has_mirror: row.get(7) == Some("true"),
            price_imputed: row.get(8) == Some("true"),
        });
    }
    Ok((ids, out))
}

pub fn write_group_stats<W: Write>(b: &PriceBenchmarks, sink: W) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "group",
        "median_unit_price",
        "robust_scale",
        "sample_count",
        "uses_global",
    ])?;
    for g in b.groups.values().chain(std::iter::once(&b.global)) {
        let uses_global = g.group != GLOBAL_GROUP && g.sample_count < b.min_group;
        w.write_record([
            g.group.clone(),
            g.median_unit_price.to_string(),
            g.robust_scale.to_string(),
            g.sample_count.to_string(),
            uses_global.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
