//! First-significant-digit conformity testing.
//!
//! Conformity bands on the mean absolute deviation of digit proportions:
//! `<= 0.006` Close, `<= 0.012` Acceptable, `<= 0.015` Marginal, otherwise
//! Nonconforming.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TradeRecord;

/// Samples smaller than this get a low-power warning.
pub const LOW_POWER_N: usize = 300;

pub const CLOSE_MAD: f64 = 0.006;
pub const ACCEPTABLE_MAD: f64 = 0.012;
pub const MARGINAL_MAD: f64 = 0.015;

#[derive(Debug, Error, PartialEq)]
pub enum BenfordError {
    #[error("first digit undefined for {0}")]
    Domain(f64),
    #[error("empty sample")]
    EmptySample,
}

/// Expected Benford proportion `log10(1 + 1/d)` for `d` in 1..=9.
pub fn expected_proportion(d: u8) -> f64 {
    (1.0 + 1.0 / f64::from(d)).log10()
}

/// First significant decimal digit of a positive finite value.
pub fn first_digit(x: f64) -> Result<u8, BenfordError> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(BenfordError::Domain(x));
    }
    // Scientific formatting is exact (shortest round-trip digits), so no log10 rounding.
    let s = format!("{x:e}");
    Ok(s.as_bytes()[0] - b'0')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitDistribution {
    /// Index 0 holds digit 1.
    pub counts: [u64; 9],
    pub n: u64,
}

impl DigitDistribution {
    pub fn proportions(&self) -> [f64; 9] {
        let mut p = [0.0; 9];
        if self.n > 0 {
            for (pi, c) in p.iter_mut().zip(self.counts) {
                *pi = c as f64 / self.n as f64;
            }
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Conformity {
    Close,
    Acceptable,
    Marginal,
    Nonconforming,
}

impl Conformity {
    pub fn from_mad(mad: f64) -> Self {
        if mad <= CLOSE_MAD {
            Conformity::Close
        } else if mad <= ACCEPTABLE_MAD {
            Conformity::Acceptable
        } else if mad <= MARGINAL_MAD {
            Conformity::Marginal
        } else {
            Conformity::Nonconforming
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenfordResult {
    pub distribution: DigitDistribution,
    pub chi_square: f64,
    pub mad: f64,
    pub conformity: Conformity,
    pub n: u64,
    pub low_power: bool,
}

/// Chi-square and MAD statistics for a digit histogram.
pub fn test_distribution(distribution: DigitDistribution) -> Result<BenfordResult, BenfordError> {
    if distribution.n == 0 {
        return Err(BenfordError::EmptySample);
    }
    let observed = distribution.proportions();
    let (chi_square, mad) = deviation_statistics(&observed, distribution.n);
    Ok(BenfordResult {
        n: distribution.n,
        low_power: distribution.n < LOW_POWER_N as u64,
        chi_square,
        mad,
        conformity: Conformity::from_mad(mad),
        distribution,
    })
}

/// `(chi_square, mad)` of observed digit proportions at sample size `n`:
/// `n * sum (p_hat - p)^2 / p` and `sum |p_hat - p| / 9`.
pub fn deviation_statistics(observed: &[f64; 9], n: u64) -> (f64, f64) {
    let mut chi_square = 0.0;
    let mut abs_dev = 0.0;
    for (i, p_hat) in observed.iter().enumerate() {
        let p = expected_proportion(i as u8 + 1);
        chi_square += (p_hat - p).powi(2) / p;
        abs_dev += (p_hat - p).abs();
    }
    (n as f64 * chi_square, abs_dev / 9.0)
}

/// Test a sample of positive values against the Benford first-digit law.
pub fn benford_test(values: &[f64]) -> Result<BenfordResult, BenfordError> {
    let mut counts = [0u64; 9];
    for &v in values {
        counts[usize::from(first_digit(v)? - 1)] += 1;
    }
    test_distribution(DigitDistribution {
        counts,
        n: values.len() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueField {
    #[default]
    TradeValue,
    NetWeight,
}

impl ValueField {
    pub fn of(self, r: &TradeRecord) -> f64 {
        match self {
            ValueField::TradeValue => r.trade_value,
            ValueField::NetWeight => r.net_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResult {
    /// `None` when every value in the segment was zero.
    pub result: Option<BenfordResult>,
    pub zero_skipped: usize,
}

/// One Benford result per segment key. Zero values are skipped and counted.
pub fn benford_by_segment<K, F>(records: &[TradeRecord], segmenter: F, field: ValueField) -> BTreeMap<K, SegmentResult>
where
    K: Ord,
    F: Fn(&TradeRecord) -> K,
{
    let mut buckets: BTreeMap<K, (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let v = field.of(r);
        let b = buckets.entry(segmenter(r)).or_default();
        if v > 0.0 {
            b.0.push(v);
        } else {
            b.1 += 1;
        }
    }
    buckets
        .into_iter()
        .map(|(k, (values, zero_skipped))| {
            let result = benford_test(&values).ok();
            (k, SegmentResult { result, zero_skipped })
        })
        .collect()
}

/// Plot data: expected vs observed proportion for each digit of each segment.
pub fn write_digit_table<W: Write>(segments: &BTreeMap<String, SegmentResult>, sink: W) -> Result<usize, csv::Error> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["segment", "digit", "expected", "observed", "n", "mad", "conformity"])?;
    let mut rows = 0;
    for (seg, s) in segments {
        let Some(res) = &s.result else { continue };
        let observed = res.distribution.proportions();
        for d in 1..=9u8 {
            w.write_record([
                seg.clone(),
                d.to_string(),
                expected_proportion(d).to_string(),
                observed[usize::from(d - 1)].to_string(),
                res.n.to_string(),
                res.mad.to_string(),
                format!("{:?}", res.conformity),
            ])?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}
