//! Mirror statistics: pairing export declarations with the partner's import
//! declarations and measuring the asymmetries between them.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CountryCode, FlowDirection, HsCode, TradeRecord};
use crate::stats::ceil_count;

#[derive(Debug, Error)]
pub enum MirrorError {
    #[error("quantile must lie in (0, 1], got {0}")]
    BadQuantile(f64),
    #[error("no mirror pairs to rank")]
    NoPairs,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed mirror table: {0}")]
    Malformed(String),
}

/// Identity of a bilateral flow: who shipped what to whom, when.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairKey {
    pub period: i32,
    pub exporter: CountryCode,
    pub importer: CountryCode,
    pub hs_code: HsCode,
}

impl PairKey {
    pub fn of(record: &TradeRecord) -> Self {
        let (exporter, importer) = record.exporter_importer();
        Self {
            period: record.period,
            exporter,
            importer,
            hs_code: record.hs_code.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairStatus {
    Matched,
    PhantomExport,
    SmugglingInflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MirrorPair {
    pub key: PairKey,
    pub export_kg: f64,
    pub import_kg: f64,
    pub export_value: f64,
    pub import_value: f64,
    pub status: PairStatus,
}

impl MirrorPair {
    pub fn gap_kg(&self) -> f64 {
        self.export_kg - self.import_kg
    }

    /// Gap as a percentage of the export side; `None` when nothing was exported.
    pub fn gap_pct(&self) -> Option<f64> {
        (self.export_kg > 0.0).then(|| 100.0 * self.gap_kg() / self.export_kg)
    }

    /// `ln((export_kg + 1) / (import_kg + 1))`, the symmetric quantity log-gap.
    pub fn log_quantity_ratio(&self) -> f64 {
        ((self.export_kg + 1.0) / (self.import_kg + 1.0)).ln()
    }

    pub fn log_value_ratio(&self) -> f64 {
        ((self.export_value + 1.0) / (self.import_value + 1.0)).ln()
    }

    /// Unit prices on each side, when both sides carry weight and value.
    pub fn side_prices(&self) -> Option<(f64, f64)> {
        let priced = |v: f64, kg: f64| (kg > 0.0 && v > 0.0).then(|| v / kg);
        Some((
            priced(self.export_value, self.export_kg)?,
            priced(self.import_value, self.import_kg)?,
        ))
    }
}

#[derive(Default)]
struct Sides {
    export: Option<(f64, f64)>,
    import: Option<(f64, f64)>,
}

/// Build mirror pairs keyed by `(period, exporter, importer, hs_code)`.
///
/// Each side is pre-aggregated over all records sharing the key. Records with
/// an unspecified partner can never match, because no declaration names code
/// 0 as its reporter. Pairs come back in key order.
pub fn pair_mirror(records: &[TradeRecord]) -> Vec<MirrorPair> {
    let mut grouped: BTreeMap<PairKey, Sides> = BTreeMap::new();
    for r in records {
        let side = grouped.entry(PairKey::of(r)).or_default();
        let slot = match r.flow {
            FlowDirection::Export => &mut side.export,
            FlowDirection::Import => &mut side.import,
        };
        let acc = slot.get_or_insert((0.0, 0.0));
        acc.0 += r.net_weight;
        acc.1 += r.trade_value;
    }
    grouped
        .into_iter()
        .map(|(key, s)| {
            let status = match (s.export.is_some(), s.import.is_some()) {
                (true, true) => PairStatus::Matched,
                (true, false) => PairStatus::PhantomExport,
                _ => PairStatus::SmugglingInflow,
            };
            let (export_kg, export_value) = s.export.unwrap_or((0.0, 0.0));
            let (import_kg, import_value) = s.import.unwrap_or((0.0, 0.0));
            MirrorPair {
                key,
                export_kg,
                import_kg,
                export_value,
                import_value,
                status,
            }
        })
        .collect()
}

/// Which gap the outlier ranking uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMetric {
    #[default]
    Quantity,
    Value,
}

/// Flag the `ceil(quantile * n)` pairs with the largest absolute log gap.
/// Ties go to the pair that comes first in key order. The result is aligned
/// with `pairs`, which are expected in key order as returned by [`pair_mirror`].
pub fn flag_top_outliers(pairs: &[MirrorPair], quantile: f64, metric: GapMetric) -> Result<Vec<bool>, MirrorError> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(MirrorError::BadQuantile(quantile));
    }
    if pairs.is_empty() {
        return Err(MirrorError::NoPairs);
    }
    let gap = |p: &MirrorPair| match metric {
        GapMetric::Quantity => p.log_quantity_ratio().abs(),
        GapMetric::Value => p.log_value_ratio().abs(),
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        gap(&pairs[b])
            .total_cmp(&gap(&pairs[a]))
            .then_with(|| pairs[a].key.cmp(&pairs[b].key))
    });
    let mut flags = vec![false; pairs.len()];
    for &i in &order[..ceil_count(quantile, pairs.len())] {
        flags[i] = true;
    }
    Ok(flags)
}

/// Value-weighted share of each reporter's exports declared to partner 0.
/// Reporters without any export value are omitted.
pub fn ghost_share(records: &[TradeRecord]) -> BTreeMap<CountryCode, f64> {
    let mut totals: BTreeMap<CountryCode, (f64, f64)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.flow == FlowDirection::Export) {
        let t = totals.entry(r.reporter).or_default();
        t.1 += r.trade_value;
        if r.partner.is_unspecified() {
            t.0 += r.trade_value;
        }
    }
    totals
        .into_iter()
        .filter(|(_, (_, total))| *total > 0.0)
        .map(|(k, (ghost, total))| (k, ghost / total))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingMetalPoint {
    pub period: i32,
    pub total_export_kg: f64,
    pub total_import_kg: f64,
    pub missing_kg: f64,
    pub gap_pct: Option<f64>,
}

/// Per-period export and import totals with the unreconciled remainder.
pub fn missing_metal_series(pairs: &[MirrorPair]) -> Vec<MissingMetalPoint> {
    let mut by_period: BTreeMap<i32, (f64, f64, f64)> = BTreeMap::new();
    for p in pairs {
        let e = by_period.entry(p.key.period).or_default();
        e.0 += p.export_kg;
        e.1 += p.import_kg;
        e.2 += p.gap_kg();
    }
    by_period
        .into_iter()
        .map(|(period, (exp, imp, missing))| MissingMetalPoint {
            period,
            total_export_kg: exp,
            total_import_kg: imp,
            missing_kg: missing,
            gap_pct: (exp > 0.0).then(|| 100.0 * (exp - imp) / exp),
        })
        .collect()
}

fn opt_to_string(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Mirror-pair table with gap columns and the top-outlier flag.
pub fn write_pairs<W: Write>(pairs: &[MirrorPair], flags: &[bool], sink: W) -> Result<(), MirrorError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "period",
        "exporter",
        "importer",
        "hs_code",
        "export_kg",
        "import_kg",
        "export_value",
        "import_value",
        "gap_kg",
        "gap_pct",
        "log_ratio",
        "status",
        "top_outlier",
    ])?;
    for (p, flag) in pairs.iter().zip(flags) {
        w.write_record([
            p.key.period.to_string(),
            p.key.exporter.to_string(),
            p.key.importer.to_string(),
            p.key.hs_code.to_string(),
            p.export_kg.to_string(),
            p.import_kg.to_string(),
            p.export_value.to_string(),
            p.import_value.to_string(),
            p.gap_kg().to_string(),
            opt_to_string(p.gap_pct()),
            p.log_quantity_ratio().to_string(),
            format!("{:?}", p.status),
            flag.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read back a table written by [`write_pairs`].
pub fn read_pairs<R: Read>(source: R) -> Result<(Vec<MirrorPair>, Vec<bool>), MirrorError> {
    let mut r = csv::Reader::from_reader(source);
    let mut pairs = Vec::new();
    let mut flags = Vec::new();
    for row in r.records() {
        let row = row?;
        let f = |i: usize| -> Result<f64, MirrorError> {
            row.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| MirrorError::Malformed(format!("column {i} in {row:?}")))
        };
        let code = |i: usize| -> Result<CountryCode, MirrorError> {
            row.get(i)
                .unwrap_or("")
                .parse()
                .map(CountryCode)
                .map_err(|_| MirrorError::Malformed(format!("column {i} in {row:?}")))
        };
        let status = match row.get(11).unwrap_or("") {
            "Matched" => PairStatus::Matched,
            "PhantomExport" => PairStatus::PhantomExport,
            "SmugglingInflow" => PairStatus::SmugglingInflow,
            s => return Err(MirrorError::Malformed(format!("status `{s}`"))),
        };
        pairs.push(MirrorPair {
            key: PairKey {
                period: row
                    .get(0)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| MirrorError::Malformed("period".into()))?,
                exporter: code(1)?,
                importer: code(2)?,
                hs_code: HsCode::new(row.get(3).unwrap_or("")).map_err(|e| MirrorError::Malformed(e.to_string()))?,
            },
            export_kg: f(4)?,
            import_kg: f(5)?,
            export_value: f(6)?,
            import_value: f(7)?,
            status,
        });
        flags.push(row.get(12) == Some("true"));
    }
    Ok((pairs, flags))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, reporter: u32, partner: u32, flow: FlowDirection, kg: f64, value: f64) -> TradeRecord {
        TradeRecord {
            record_id: id.into(),
            period: 2021,
            reporter: CountryCode(reporter),
            partner: CountryCode(partner),
            flow,
            hs_code: HsCode::new("760200").unwrap(),
            net_weight: kg,
            trade_value: value,
        }
    }

    use FlowDirection::{Export as X, Import as M};

    #[test]
    fn perfect_symmetry_matches() {
        let pairs = pair_mirror(&[rec("a", 1, 2, X, 100.0, 10.0), rec("b", 2, 1, M, 100.0, 10.0)]);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].status, PairStatus::Matched);
        assert_eq!(pairs[0].gap_kg(), 0.0);
        assert_eq!(pairs[0].gap_pct(), Some(0.0));
    }

    #[test]
    fn unmatched_sides() {
        let p = pair_mirror(&[rec("a", 1, 2, X, 100.0, 10.0)]);
        assert_eq!(p[0].status, PairStatus::PhantomExport);
        assert_eq!(p[0].gap_kg(), 100.0);
        let p = pair_mirror(&[rec("b", 2, 1, M, 50.0, 10.0)]);
        assert_eq!(p[0].status, PairStatus::SmugglingInflow);
        assert_eq!(p[0].gap_kg(), -50.0);
        assert_eq!(p[0].gap_pct(), None);
    }

    #[test]
    fn code_zero_never_matches() {
        let p = pair_mirror(&[rec("a", 1, 0, X, 100.0, 10.0), rec("b", 2, 0, M, 100.0, 10.0)]);
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|p| p.status != PairStatus::Matched));
    }

    #[test]
    fn sides_are_aggregated_by_key() {
        let p = pair_mirror(&[
            rec("a", 1, 2, X, 60.0, 6.0),
            rec("b", 1, 2, X, 40.0, 4.0),
            rec("c", 2, 1, M, 90.0, 9.0),
        ]);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].export_kg, 100.0);
        assert_eq!(p[0].gap_kg(), 10.0);
    }

    #[test]
    fn phantom_extreme_is_flagged() {
        let mut records = Vec::new();
        for i in 0..100u32 {
            records.push(rec(&format!("x{i}"), 10 + i, 500, X, 100.0, 10.0));
            records.push(rec(&format!("m{i}"), 500, 10 + i, M, 100.0, 10.0));
        }
        records.push(rec("ghost", 7, 8, X, 1e6, 10.0));
        let pairs = pair_mirror(&records);
        let flags = flag_top_outliers(&pairs, 0.05, GapMetric::Quantity).unwrap();
        assert_eq!(flags.iter().filter(|&&f| f).count(), 6);
        let idx = pairs.iter().position(|p| p.key.exporter == CountryCode(7)).unwrap();
        assert!(flags[idx]);
    }

    #[test]
    fn ties_follow_key_order_and_bounds() {
        let records: Vec<_> = (0..40u32)
            .map(|i| rec(&format!("x{i}"), 100 + i, 900, X, 5.0, 1.0))
            .collect();
        let pairs = pair_mirror(&records);
        let flags = flag_top_outliers(&pairs, 0.05, GapMetric::Quantity).unwrap();
        assert_eq!(flags.iter().filter(|&&f| f).count(), 2);
        assert!(flags[0] && flags[1]);
        let all = flag_top_outliers(&pairs, 1.0, GapMetric::Quantity).unwrap();
        assert!(all.iter().all(|&f| f));
        assert!(flag_top_outliers(&pairs, 0.0, GapMetric::Quantity).is_err());
        assert!(flag_top_outliers(&pairs, 1.5, GapMetric::Quantity).is_err());
    }

    #[test]
    fn ghost_share_cases() {
        let all_ghost = ghost_share(&[rec("a", 1, 0, X, 1.0, 50.0)]);
        assert_eq!(all_ghost[&CountryCode(1)], 1.0);
        let none = ghost_share(&[rec("a", 1, 2, X, 1.0, 50.0)]);
        assert_eq!(none[&CountryCode(1)], 0.0);
        let mixed = ghost_share(&[rec("a", 1, 0, X, 1.0, 100.0), rec("b", 1, 392, X, 1.0, 300.0)]);
        assert_eq!(mixed[&CountryCode(1)], 0.25);
        let imports_only = ghost_share(&[rec("a", 1, 0, M, 1.0, 100.0)]);
        assert!(imports_only.is_empty());
    }

    #[test]
    fn missing_metal_arithmetic() {
        let pairs = pair_mirror(&[rec("a", 1, 2, X, 200.0, 1.0), rec("b", 2, 1, M, 150.0, 1.0)]);
        let s = missing_metal_series(&pairs);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].missing_kg, 50.0);
        assert_eq!(s[0].gap_pct, Some(25.0));

        let inflow_only = missing_metal_series(&pair_mirror(&[rec("b", 2, 1, M, 150.0, 1.0)]));
        assert_eq!(inflow_only[0].gap_pct, None);
    }

    #[test]
    fn pair_table_round_trips() {
        let pairs = pair_mirror(&[
            rec("a", 1, 2, X, 200.5, 1.25),
            rec("b", 2, 1, M, 150.0, 1.0),
            rec("c", 3, 0, X, 7.0, 2.0),
        ]);
        let flags = vec![true, false];
        let mut buf = Vec::new();
        write_pairs(&pairs, &flags, &mut buf).unwrap();
        let (back, back_flags) = read_pairs(buf.as_slice()).unwrap();
        assert_eq!(back, pairs);
        assert_eq!(back_flags, flags);
    }
}
