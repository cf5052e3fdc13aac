//! Labelled synthetic corpora: mirror-consistent baseline trades plus
//! injected fraud typologies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CountryCode, FlowDirection, HsCode, HsStage, HsTaxonomy, TradeRecord};
use crate::mirror::PairKey;
use crate::rng::{stage_seed, substream_seed, SeededRng};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("{typology}: need {needed} eligible trades, found {found}")]
    NotEnoughTrades {
        typology: Label,
        needed: usize,
        found: usize,
    },
    #[error("ground truth: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    OverInvoice,
    MirrorFracture,
    VoidShoring,
    Misclassification,
    Rerouting,
}

impl Label {
    pub const FRAUD: [Label; 5] = [
        Label::OverInvoice,
        Label::MirrorFracture,
        Label::VoidShoring,
        Label::Misclassification,
        Label::Rerouting,
    ];
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Label {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        std::iter::once(Label::Normal)
            .chain(Label::FRAUD)
            .find(|l| l.to_string() == s)
            .ok_or_else(|| SynthError::Malformed(format!("unknown label `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceModel {
    /// USD/kg.
    pub median: f64,
    pub log_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagePrices {
    pub upstream: PriceModel,
    pub midstream: PriceModel,
    pub circular: PriceModel,
    pub semi_finished: PriceModel,
    pub finished: PriceModel,
}

impl Default for StagePrices {
    fn default() -> Self {
        let m = |median| PriceModel { median, log_sd: 0.25 };
        Self {
            upstream: m(0.35),
            midstream: m(2.5),
            circular: m(2.0),
            semi_finished: m(4.0),
            finished: m(8.0),
        }
    }
}

impl StagePrices {
    pub fn of(&self, stage: HsStage) -> PriceModel {
        match stage {
            HsStage::Upstream => self.upstream,
            HsStage::Midstream => self.midstream,
            HsStage::Circular => self.circular,
            HsStage::SemiFinished => self.semi_finished,
            HsStage::Finished => self.finished,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionRates {
    pub over_invoice: f64,
    pub mirror_fracture: f64,
    pub void_shoring: f64,
    pub misclassification: f64,
    pub rerouting: f64,
}

impl InjectionRates {
    pub fn uniform(rate: f64) -> Self {
        Self {
            over_invoice: rate,
            mirror_fracture: rate,
            void_shoring: rate,
            misclassification: rate,
            rerouting: rate,
        }
    }

    pub fn of(&self, label: Label) -> f64 {
        match label {
            Label::Normal => 0.0,
            Label::OverInvoice => self.over_invoice,
            Label::MirrorFracture => self.mirror_fracture,
            Label::VoidShoring => self.void_shoring,
            Label::Misclassification => self.misclassification,
            Label::Rerouting => self.rerouting,
        }
    }

    pub fn total(&self) -> f64 {
        Label::FRAUD.iter().map(|&l| self.of(l)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// ISO numeric codes, split into `regions` contiguous blocks.
    pub countries: Vec<u32>,
    pub regions: usize,
    /// Probability that an importer is drawn from the exporter's own region.
    pub intra_region_prob: f64,
    pub first_period: i32,
    pub periods: usize,
    pub trades_per_period: usize,
    pub prices: StagePrices,
    /// Shipment weight, kg.
    pub weight: PriceModel,
    /// Relative sd of the import quantity around the export quantity.
    pub mirror_noise: f64,
    /// Log-sd of the import unit price around the export unit price
    /// (valuation basis differences between the two declarations).
    pub mirror_price_noise: f64,
    pub rates: InjectionRates,
    pub over_invoice_factor: f64,
    pub hub: u32,
    /// HS-4 heading receiving misclassified scrap.
    pub misclassification_heading: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            countries: vec![
                276, 250, 380, 528, 826, 724, 56, 40, 616, 752, 578, 756, 203, 348, 620, // Europe
                156, 392, 410, 158, 704, 702, 458, 764, 360, 608, 356, 36, 554, 50, 144, // Asia-Pacific
                784, 792, 682, 48, 634, 512, 414, 376, 818, 710, 504, 566, 324, 288,
                404, // Middle East and Africa
                840, 124, 484, 76, 32, 152, 170, 604, 218, 858, 600, 68, 862, 188, 591, // Americas
            ],
            regions: 4,
            intra_region_prob: 0.8,
            first_period: 2020,
            periods: 5,
            trades_per_period: 5000,
            prices: StagePrices::default(),
            weight: PriceModel {
                median: 5000.0,
                log_sd: 1.6,
            },
            mirror_noise: 0.02,
            mirror_price_noise: 0.05,
            rates: InjectionRates::uniform(0.01),
            over_invoice_factor: 20.0,
            hub: 702,
            misclassification_heading: "7616".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        let distinct: BTreeSet<u32> = self.countries.iter().copied().collect();
        if distinct.len() != self.countries.len() || distinct.len() < 2 || distinct.contains(&0) {
            return bad("countries must be >= 2 distinct nonzero codes".into());
        }
        if self.regions < 1 || self.regions > self.countries.len() {
            return bad(format!("regions must lie in 1..={}", self.countries.len()));
        }
        if !(0.0..=1.0).contains(&self.intra_region_prob) {
            return bad("intra_region_prob must lie in [0, 1]".into());
        }
        if self.periods < 1 || self.trades_per_period < 1 {
            return bad("periods and trades_per_period must be >= 1".into());
        }
        for l in Label::FRAUD {
            if !(0.0..=1.0).contains(&self.rates.of(l)) {
                return bad(format!("rate for {l} must lie in [0, 1]"));
            }
        }
        if self.rates.total() > 0.5 + 1e-12 {
            return bad(format!("injection rates sum to {}, above 0.5", self.rates.total()));
        }
        if !(self.over_invoice_factor > 1.0) {
            return bad("over_invoice_factor must exceed 1".into());
        }
        if !(self.mirror_noise >= 0.0 && self.mirror_price_noise >= 0.0) {
            return bad("mirror_noise and mirror_price_noise must be >= 0".into());
        }
        let models = HsStage::ALL.map(|s| self.prices.of(s));
        if models
            .iter()
            .chain([&self.weight])
            .any(|m| !(m.median > 0.0 && m.log_sd >= 0.0))
        {
            return bad("price and weight medians must be > 0 with log_sd >= 0".into());
        }
        if self.rates.rerouting > 0.0 && !distinct.contains(&self.hub) {
            return bad(format!("rerouting hub {} is not among the countries", self.hub));
        }
        Ok(())
    }

    fn region_of(&self, country_index: usize) -> usize {
        country_index * self.regions / self.countries.len()
    }

    pub fn total_trades(&self) -> usize {
        self.periods * self.trades_per_period
    }
}

/// One underlying shipment and the declarations it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrade {
    pub trade_id: String,
    pub label: Label,
    pub records: Vec<TradeRecord>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub trades: Vec<SynthTrade>,
}

impl Corpus {
    pub fn records(&self) -> Vec<TradeRecord> {
        self.trades.iter().flat_map(|t| t.records.iter().cloned()).collect()
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let mut labels = BTreeMap::new();
        for t in &self.trades {
            for r in &t.records {
                labels.insert(r.record_id.clone(), (t.trade_id.clone(), t.label));
            }
        }
        GroundTruth { labels }
    }

    pub fn label_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for t in &self.trades {
            *counts.entry(t.label).or_default() += 1;
        }
        counts
    }
}

fn cents(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn lognormal(rng: &mut SeededRng, m: PriceModel) -> f64 {
    m.median * (m.log_sd * rng.normal()).exp()
}

/// Import-side quantity and value for an export of `kg` worth `value`.
fn mirror_side(rng: &mut SeededRng, cfg: &SynthConfig, kg: f64, value: f64) -> (f64, f64) {
    let import_kg = if cfg.mirror_noise > 0.0 {
        (kg * (1.0 + cfg.mirror_noise * rng.normal())).round().max(1.0)
    } else {
        kg
    };
    let markup = if cfg.mirror_price_noise > 0.0 {
        (cfg.mirror_price_noise * rng.normal()).exp()
    } else {
        1.0
    };
    (import_kg, cents(value * markup * import_kg / kg))
}

fn declaration(
    id: String,
    period: i32,
    reporter: CountryCode,
    partner: CountryCode,
    flow: FlowDirection,
    hs: &HsCode,
    kg: f64,
    value: f64,
) -> TradeRecord {
    TradeRecord {
        record_id: id,
        period,
        reporter,
        partner,
        flow,
        hs_code: hs.clone(),
        net_weight: kg,
        trade_value: value,
    }
}

/// Baseline corpus: every trade is an export declaration and its mirrored
/// import with quantity noise. Keys `(period, exporter, importer, hs)` are
/// unique so every trade forms its own mirror pair. Each period draws from
/// its own sub-stream of `seed`.
pub fn generate_corpus(cfg: &SynthConfig, taxonomy: &HsTaxonomy, seed: u64) -> Result<Corpus, SynthError> {
    cfg.validate()?;
    let stages: Vec<(HsStage, Vec<HsCode>)> = HsStage::ALL
        .iter()
        .map(|&s| (s, taxonomy.codes_in(s)))
        .filter(|(_, codes)| !codes.is_empty())
        .collect();
    if stages.is_empty() {
        return Err(SynthError::Config("taxonomy has no codes".into()));
    }
    let n = cfg.countries.len();
    let capacity = n * (n - 1) * taxonomy.len();
    if cfg.trades_per_period * 2 > capacity {
        return Err(SynthError::Config(format!(
            "{} trades per period cannot get distinct flows among {capacity} combinations",
            cfg.trades_per_period
        )));
    }
    let mut trades = Vec::with_capacity(cfg.total_trades());
    for p in 0..cfg.periods {
        let period = cfg.first_period + p as i32;
        let mut rng = SeededRng::new(substream_seed(seed, p as u64));
        let mut used: BTreeSet<(usize, usize, HsCode)> = BTreeSet::new();
        for t in 0..cfg.trades_per_period {
            let (e, i, stage, hs) = loop {
                let e = rng.below(n);
                let i = loop {
                    let cand = if rng.uniform() < cfg.intra_region_prob {
                        let r = cfg.region_of(e);
                        let members: Vec<usize> = (0..n).filter(|&c| cfg.region_of(c) == r).collect();
                        members[rng.below(members.len())]
                    } else {
                        rng.below(n)
                    };
                    if cand != e {
                        break cand;
                    }
                };
                let (stage, codes) = &stages[rng.below(stages.len())];
                let hs = codes[rng.below(codes.len())].clone();
                if used.insert((e, i, hs.clone())) {
                    break (e, i, *stage, hs);
                }
            };
            let price = lognormal(&mut rng, cfg.prices.of(stage));
            let kg = lognormal(&mut rng, cfg.weight).round().max(1.0);
            let value = cents(price * kg);
            let (import_kg, import_value) = mirror_side(&mut rng, cfg, kg, value);
            let (ex, im) = (CountryCode(cfg.countries[e]), CountryCode(cfg.countries[i]));
            let trade_id = format!("T{period}-{t:05}");
            trades.push(SynthTrade {
                records: vec![
                    declaration(
                        format!("{trade_id}-X"),
                        period,
                        ex,
                        im,
                        FlowDirection::Export,
                        &hs,
                        kg,
                        value,
                    ),
                    declaration(
                        format!("{trade_id}-M"),
                        period,
                        im,
                        ex,
                        FlowDirection::Import,
                        &hs,
                        import_kg,
                        import_value,
                    ),
                ],
                trade_id,
                label: Label::Normal,
            });
        }
    }
    Ok(Corpus { trades })
}

/// Inject `floor(rate * trades)` of each typology into disjoint trades.
/// Restrictive typologies (misclassification, rerouting) are placed first.
pub fn inject(corpus: &Corpus, cfg: &SynthConfig, taxonomy: &HsTaxonomy, seed: u64) -> Result<Corpus, SynthError> {
    cfg.validate()?;
    let mut out = corpus.clone();
    let n = out.trades.len();
    let mut rng = SeededRng::new(stage_seed(seed, "inject"));
    let mut used_keys: BTreeSet<PairKey> = out
        .trades
        .iter()
        .flat_map(|t| t.records.iter().map(PairKey::of))
        .collect();
    let scrap = HsCode::new("760200").expect("valid code");
    let targets: Vec<HsCode> = taxonomy
        .iter()
        .map(|(c, _)| c.clone())
        .filter(|c| c.heading() == cfg.misclassification_heading)
        .collect();
    let hub = CountryCode(cfg.hub);
    let order = [
        Label::Misclassification,
        Label::Rerouting,
        Label::OverInvoice,
        Label::MirrorFracture,
        Label::VoidShoring,
    ];
    for label in order {
        let needed = (cfg.rates.of(label) * n as f64 + 1e-9).floor() as usize;
        if needed == 0 {
            continue;
        }
        let mut candidates: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut candidates);
        let mut done = 0;
        for idx in candidates {
            if done == needed {
                break;
            }
            let trade = &mut out.trades[idx];
            if trade.label != Label::Normal || trade.records.len() != 2 {
                continue;
            }
            let applied = match label {
                Label::OverInvoice => {
                    for r in &mut trade.records {
                        r.trade_value = cents(r.trade_value * cfg.over_invoice_factor);
                    }
                    true
                }
                Label::MirrorFracture => {
                    trade.records.truncate(1);
                    true
                }
                Label::VoidShoring => {
                    trade.records.truncate(1);
                    trade.records[0].partner = CountryCode::UNSPECIFIED;
                    true
                }
                Label::Misclassification => {
                    let x = &trade.records[0];
                    if x.hs_code != scrap {
                        false
                    } else {
                        let free = targets.iter().find(|c| {
                            !used_keys.contains(&PairKey {
                                hs_code: (*c).clone(),
                                ..PairKey::of(x)
                            })
                        });
                        match free {
                            Some(code) => {
                                trade.records[0].hs_code = code.clone();
                                used_keys.insert(PairKey::of(&trade.records[0]));
                                true
                            }
                            None => false,
                        }
                    }
                }
                Label::Rerouting => reroute(trade, hub, &mut used_keys, &mut rng, cfg),
                Label::Normal => unreachable!(),
            };
            if applied {
                trade.label = label;
                done += 1;
            }
        }
        if done < needed {
            return Err(SynthError::NotEnoughTrades {
                typology: label,
                needed,
                found: done,
            });
        }
    }
    Ok(out)
}

/// Replace A -> B with A -> hub and hub -> B. The hub passes the export
/// quantity and value through; each leg gets fresh mirror noise.
fn reroute(
    trade: &mut SynthTrade,
    hub: CountryCode,
    used: &mut BTreeSet<PairKey>,
    rng: &mut SeededRng,
    cfg: &SynthConfig,
) -> bool {
    let x = &trade.records[0];
    let (a, b) = (x.reporter, x.partner);
    if a == hub || b == hub {
        return false;
    }
    let leg1 = PairKey {
        exporter: a,
        importer: hub,
        ..PairKey::of(x)
    };
    let leg2 = PairKey {
        exporter: hub,
        importer: b,
        ..PairKey::of(x)
    };
    if used.contains(&leg1) || used.contains(&leg2) {
        return false;
    }
    let id = &trade.trade_id;
    let (p, hs, kg, value) = (x.period, x.hs_code.clone(), x.net_weight, x.trade_value);
    let (kg1, v1) = mirror_side(rng, cfg, kg, value);
    let (kg2, v2) = mirror_side(rng, cfg, kg, value);
    let records = vec![
        declaration(format!("{id}-X1"), p, a, hub, FlowDirection::Export, &hs, kg, value),
        declaration(format!("{id}-M1"), p, hub, a, FlowDirection::Import, &hs, kg1, v1),
        declaration(format!("{id}-X2"), p, hub, b, FlowDirection::Export, &hs, kg, value),
        declaration(format!("{id}-M2"), p, b, hub, FlowDirection::Import, &hs, kg2, v2),
    ];
    used.insert(leg1);
    used.insert(leg2);
    trade.records = records;
    true
}

/// Record-level labels with the trade each record came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub labels: BTreeMap<String, (String, Label)>,
}

impl GroundTruth {
    pub fn label(&self, record_id: &str) -> Option<Label> {
        self.labels.get(record_id).map(|(_, l)| *l)
    }

    /// Trades per label.
    pub fn trade_counts(&self) -> BTreeMap<Label, usize> {
        let trades: BTreeMap<&str, Label> = self.labels.values().map(|(t, l)| (t.as_str(), *l)).collect();
        let mut counts = BTreeMap::new();
        for l in trades.values() {
            *counts.entry(*l).or_default() += 1;
        }
        counts
    }
}

pub fn write_ground_truth<W: Write>(truth: &GroundTruth, sink: W) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["record_id", "trade_id", "label"])?;
    for (id, (trade, label)) in &truth.labels {
        w.write_record([id.as_str(), trade.as_str(), &label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth<R: Read>(source: R) -> Result<GroundTruth, SynthError> {
    let mut r = csv::Reader::from_reader(source);
    let mut labels = BTreeMap::new();
    for row in r.records() {
        let row = row?;
        if row.len() != 3 {
            return Err(SynthError::Malformed(format!("expected 3 columns, got {}", row.len())));
        }
        labels.insert(row[0].to_string(), (row[1].to_string(), row[2].parse()?));
    }
    Ok(GroundTruth { labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::unit_price;
    use crate::mirror::{ghost_share, pair_mirror, PairStatus};
    use crate::stats::median;

    fn small(rates: InjectionRates) -> SynthConfig {
        SynthConfig {
            periods: 2,
            trades_per_period: 1000,
            rates,
            ..SynthConfig::default()
        }
    }

    fn taxonomy() -> HsTaxonomy {
        HsTaxonomy::bundled()
    }

    #[test]
    fn noiseless_mirror_is_perfectly_symmetric() {
        let cfg = SynthConfig {
            mirror_noise: 0.0,
            ..small(InjectionRates::default())
        };
        let corpus = generate_corpus(&cfg, &taxonomy(), 1).unwrap();
        let pairs = pair_mirror(&corpus.records());
        assert_eq!(pairs.len(), 2000);
        assert!(pairs
            .iter()
            .all(|p| p.gap_kg() == 0.0 && p.status == PairStatus::Matched));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small(InjectionRates::uniform(0.02));
        let a = inject(&generate_corpus(&cfg, &taxonomy(), 9).unwrap(), &cfg, &taxonomy(), 9).unwrap();
        let b = inject(&generate_corpus(&cfg, &taxonomy(), 9).unwrap(), &cfg, &taxonomy(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&cfg, &taxonomy(), 10).unwrap();
        assert_ne!(a.records()[0], c.records()[0]);
    }

    #[test]
    fn stage_medians_are_reproduced() {
        // Scrap has a single code, so unique flows cap it near 380 per period.
        let cfg = SynthConfig {
            periods: 6,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&cfg, &taxonomy(), 4).unwrap();
        let tax = taxonomy();
        for (stage, target) in [(HsStage::Midstream, 2.5), (HsStage::Circular, 2.0)] {
            let prices: Vec<f64> = corpus
                .records()
                .iter()
                .filter(|r| r.flow == FlowDirection::Export && tax.classify(&r.hs_code).unwrap() == stage)
                .map(|r| unit_price(r).unwrap())
                .collect();
            assert!(prices.len() >= 2000, "{}", prices.len());
            let m = median(&prices).unwrap();
            assert!((m / target - 1.0).abs() < 0.05, "{stage:?}: {m}");
        }
    }

    #[test]
    fn zero_rates_change_nothing() {
        let cfg = small(InjectionRates::default());
        let base = generate_corpus(&cfg, &taxonomy(), 2).unwrap();
        let injected = inject(&base, &cfg, &taxonomy(), 2).unwrap();
        assert_eq!(base, injected);
        assert!(injected.trades.iter().all(|t| t.label == Label::Normal));
    }

    #[test]
    fn label_counts_follow_rates() {
        let rates = InjectionRates {
            over_invoice: 0.013,
            mirror_fracture: 0.02,
            void_shoring: 0.005,
            misclassification: 0.01,
            rerouting: 0.0075,
        };
        let cfg = small(rates);
        let corpus = inject(&generate_corpus(&cfg, &taxonomy(), 3).unwrap(), &cfg, &taxonomy(), 3).unwrap();
        let counts = corpus.label_counts();
        assert_eq!(counts[&Label::OverInvoice], 26);
        assert_eq!(counts[&Label::MirrorFracture], 40);
        assert_eq!(counts[&Label::VoidShoring], 10);
        assert_eq!(counts[&Label::Misclassification], 20);
        assert_eq!(counts[&Label::Rerouting], 15);
        let truth = corpus.ground_truth();
        assert_eq!(truth.labels.len(), corpus.records().len());
        assert_eq!(truth.trade_counts(), counts);
    }

    #[test]
    fn fractures_and_voids_become_phantom_exports() {
        let rates = InjectionRates {
            mirror_fracture: 0.03,
            void_shoring: 0.03,
            ..InjectionRates::default()
        };
        let cfg = small(rates);
        let corpus = inject(&generate_corpus(&cfg, &taxonomy(), 5).unwrap(), &cfg, &taxonomy(), 5).unwrap();
        let records = corpus.records();
        let truth = corpus.ground_truth();
        let pairs = pair_mirror(&records);
        let status: BTreeMap<PairKey, PairStatus> = pairs.iter().map(|p| (p.key.clone(), p.status)).collect();
        let mut seen = 0;
        for r in &records {
            if matches!(
                truth.label(&r.record_id),
                Some(Label::MirrorFracture | Label::VoidShoring)
            ) {
                assert_eq!(status[&PairKey::of(r)], PairStatus::PhantomExport);
                seen += 1;
            }
        }
        assert_eq!(seen, 120);
    }

    #[test]
    fn misclassification_splits_the_pair() {
        let cfg = small(InjectionRates {
            misclassification: 0.02,
            ..InjectionRates::default()
        });
        let corpus = inject(&generate_corpus(&cfg, &taxonomy(), 6).unwrap(), &cfg, &taxonomy(), 6).unwrap();
        for t in corpus.trades.iter().filter(|t| t.label == Label::Misclassification) {
            assert_eq!(t.records[0].hs_code.heading(), "7616");
            assert_eq!(t.records[1].hs_code.as_str(), "760200");
        }
        let pairs = pair_mirror(&corpus.records());
        let unmatched = pairs.iter().filter(|p| p.status != PairStatus::Matched).count();
        assert_eq!(unmatched, 80);
    }

    #[test]
    fn over_invoice_hits_the_reference_markup() {
        let cfg = small(InjectionRates::default());
        let mut base = generate_corpus(&cfg, &taxonomy(), 7).unwrap();
        for r in &mut base.trades[0].records {
            r.net_weight = 1000.0;
            r.trade_value = 8230.0;
        }
        let injected = inject(
            &base,
            &SynthConfig {
                rates: InjectionRates {
                    over_invoice: 1.0 / 2000.0,
                    ..InjectionRates::default()
                },
                ..cfg
            },
            &taxonomy(),
            7,
        )
        .unwrap();
        let hit = injected.trades.iter().find(|t| t.label == Label::OverInvoice).unwrap();
        let original = base.trades.iter().find(|t| t.trade_id == hit.trade_id).unwrap();
        let before = unit_price(&original.records[0]).unwrap();
        let after = unit_price(&hit.records[0]).unwrap();
        assert!((after / before - 20.0).abs() < 1e-3);
        // Reference median of 8.23 USD/kg times 20.
        let fixture = cents(8230.0 * 20.0) / 1000.0;
        assert!((fixture - 164.6).abs() < 1e-9);
        assert!(((fixture - 8.23) / 8.23 - 19.0).abs() < 1e-9);
    }

    #[test]
    fn void_shoring_raises_ghost_share() {
        let cfg = small(InjectionRates {
            void_shoring: 0.01,
            ..InjectionRates::default()
        });
        let base = generate_corpus(&cfg, &taxonomy(), 8).unwrap();
        let injected = inject(&base, &cfg, &taxonomy(), 8).unwrap();
        let before = ghost_share(&base.records());
        let after = ghost_share(&injected.records());
        for t in injected.trades.iter().filter(|t| t.label == Label::VoidShoring) {
            let exporter = t.records[0].reporter;
            assert!(after[&exporter] > before[&exporter]);
        }
    }

    #[test]
    fn rerouting_passes_through_the_hub() {
        let cfg = small(InjectionRates {
            rerouting: 0.01,
            ..InjectionRates::default()
        });
        let corpus = inject(&generate_corpus(&cfg, &taxonomy(), 11).unwrap(), &cfg, &taxonomy(), 11).unwrap();
        let hub = CountryCode(cfg.hub);
        for t in corpus.trades.iter().filter(|t| t.label == Label::Rerouting) {
            assert_eq!(t.records.len(), 4);
            assert_eq!(t.records[0].partner, hub);
            assert_eq!(t.records[2].reporter, hub);
        }
        assert!(pair_mirror(&corpus.records())
            .iter()
            .all(|p| p.status == PairStatus::Matched));
    }

    #[test]
    fn config_guards() {
        let mut cfg = SynthConfig::default();
        cfg.rates = InjectionRates::uniform(0.2);
        assert!(matches!(cfg.validate(), Err(SynthError::Config(_))));
        cfg.rates = InjectionRates::default();
        cfg.over_invoice_factor = 1.0;
        assert!(cfg.validate().is_err());
        let tiny = SynthConfig {
            trades_per_period: 50,
            periods: 1,
            rates: InjectionRates {
                misclassification: 0.5,
                ..InjectionRates::default()
            },
            ..SynthConfig::default()
        };
        let base = generate_corpus(&tiny, &taxonomy(), 1).unwrap();
        assert!(matches!(
            inject(&base, &tiny, &taxonomy(), 1),
            Err(SynthError::NotEnoughTrades { .. })
        ));
    }

    #[test]
    fn ground_truth_round_trips() {
        let cfg = small(InjectionRates::uniform(0.01));
        let truth = inject(&generate_corpus(&cfg, &taxonomy(), 12).unwrap(), &cfg, &taxonomy(), 12)
            .unwrap()
            .ground_truth();
        let mut buf = Vec::new();
        write_ground_truth(&truth, &mut buf).unwrap();
        assert_eq!(read_ground_truth(buf.as_slice()).unwrap(), truth);
    }
}
