//! Stage orchestration over flat files in one output directory.
//!
//! Every stage reads its inputs from files written by earlier stages and
//! writes a fixed set of files, so any stage can be re-run on its own.
//! Stage seeds are `stage_seed(master, stage_name)`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoenc::{self, TrainConfig};
use crate::benford::{self, ValueField};
use crate::explain::{self, RadarStats, RADAR_AXES};
use crate::features::{self, FeatureVector, MODEL_FEATURES};
use crate::iforest::{self, ForestModel, ForestParams};
use crate::ingest::{self, ColumnSchema, CountryCode, CountryTable, HsTaxonomy, TradeRecord};
use crate::mirror::{self, GapMetric, MirrorPair};
use crate::network::{self, EdgeSource, GraphFilter};
use crate::report::{self, BandConfig, LayerScores, LayerWeights, ManifestEntry};
use crate::rng::{stage_seed, SeededRng};
use crate::stats::{ceil_count, top_indices};
use crate::synth::{self, SynthConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{stage}: {msg}")]
    Data { stage: Stage, msg: String },
}

impl PipelineError {
    /// 2 for configuration problems, 1 for data and runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Ingest,
    Mirror,
    Features,
    Benford,
    Iforest,
    Network,
    Autoenc,
    Explain,
    Report,
}

impl Stage {
    /// Dependency order used by `all`.
    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Mirror,
        Stage::Features,
        Stage::Benford,
        Stage::Iforest,
        Stage::Network,
        Stage::Autoenc,
        Stage::Explain,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Mirror => "mirror",
            Stage::Features => "features",
            Stage::Benford => "benford",
            Stage::Iforest => "iforest",
            Stage::Network => "network",
            Stage::Autoenc => "autoenc",
            Stage::Explain => "explain",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

pub mod files {
    pub const CORPUS: &str = "corpus.csv";
    pub const GROUND_TRUTH: &str = "ground_truth.csv";
    pub const RECORDS: &str = "records.csv";
    pub const ISSUES: &str = "issues.csv";
    pub const MIRROR_PAIRS: &str = "mirror_pairs.csv";
    pub const GHOST_SHARE: &str = "ghost_share.csv";
    pub const MISSING_METAL: &str = "missing_metal.csv";
    pub const FEATURES: &str = "features.csv";
    pub const GROUP_STATS: &str = "group_stats.csv";
    pub const BENFORD_SEGMENTS: &str = "benford_segments.csv";
    pub const BENFORD_DIGITS: &str = "benford_digits.csv";
    pub const BENFORD_SCORES: &str = "benford_scores.csv";
    pub const REPORTER_ENCODING: &str = "reporter_encoding.csv";
    pub const IFOREST_MODEL: &str = "iforest_model.json";
    pub const IFOREST_SCORES: &str = "iforest_scores.csv";
    pub const NETWORK_EDGES: &str = "network_edges.csv";
    pub const NETWORK_NODES: &str = "network_nodes.csv";
    pub const ORIGIN_ATTRIBUTION: &str = "origin_attribution.csv";
    pub const NETWORK_SCORES: &str = "network_scores.csv";
    pub const AUTOENC_MODEL: &str = "autoenc_model.txt";
    pub const AUTOENC_ERRORS: &str = "autoenc_errors.csv";
    pub const AUTOENC_LOSS: &str = "autoenc_loss.csv";
    pub const LATENT: &str = "latent.csv";
    pub const COMPOSITE: &str = "composite_scores.csv";
    pub const ATTRIBUTIONS: &str = "attributions.csv";
    pub const IMPORTANCE: &str = "feature_importance.csv";
    pub const RULES: &str = "rules.txt";
    pub const PROFILES: &str = "actor_profiles.csv";
    pub const RADAR: &str = "radar.csv";
    pub const HS_RISK: &str = "hs_risk.csv";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {
    pub min_group: usize,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        Self {
            min_group: features::DEFAULT_MIN_GROUP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MirrorSection {
    pub quantile: f64,
    pub metric: GapMetric,
}

impl Default for MirrorSection {
    fn default() -> Self {
        Self {
            quantile: 0.05,
            metric: GapMetric::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenfordSection {
    pub field: ValueField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub weighted: bool,
    pub include_ghost: bool,
    pub source: EdgeSource,
    pub hub_fraction: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            weighted: true,
            include_ghost: false,
            source: EdgeSource::default(),
            hub_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    /// Records (by composite score) that get exact Shapley attributions.
    pub shapley_top: usize,
    pub importance_repeats: usize,
    /// Row subsample for permutation importance.
    pub importance_rows: usize,
    pub tree_depth: usize,
    pub clusters: usize,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self {
            shapley_top: 25,
            importance_repeats: 5,
            importance_rows: 5000,
            tree_depth: 3,
            clusters: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub weights: LayerWeights,
    pub band: BandConfig,
    /// Fraction of records flagged by composite score.
    pub top_fraction: f64,
    pub top_flags: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            weights: LayerWeights::default(),
            band: BandConfig::default(),
            top_fraction: 0.05,
            top_flags: 20,
        }
    }
}

/// One TOML file configures every stage. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Delimited trade file; when absent, ingest reads the synthetic corpus.
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    #[serde(default)]
    pub countries: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub schema: ColumnSchema,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub features: FeaturesSection,
    #[serde(default)]
    pub mirror: MirrorSection,
    #[serde(default)]
    pub benford: BenfordSection,
    #[serde(default)]
    pub iforest: ForestParams,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub autoenc: TrainConfig,
    #[serde(default)]
    pub explain: ExplainSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: Some(42),
            out_dir: default_out_dir(),
            input: None,
            taxonomy: None,
            countries: None,
            threads: None,
            schema: ColumnSchema::default(),
            synth: SynthConfig::default(),
            features: FeaturesSection::default(),
            mirror: MirrorSection::default(),
            benford: BenfordSection::default(),
            iforest: ForestParams::default(),
            network: NetworkSection::default(),
            autoenc: TrainConfig::default(),
            explain: ExplainSection::default(),
            report: ReportSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.out_dir);
        for p in [&mut cfg.input, &mut cfg.taxonomy, &mut cfg.countries]
            .into_iter()
            .flatten()
        {
            rebase(p);
        }
        Ok(cfg)
    }

    pub fn master_seed(&self) -> Result<u64, PipelineError> {
        self.seed
            .ok_or_else(|| PipelineError::Config("`seed` is required".into()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.master_seed()?;
        let cfg = |e: String| Err(PipelineError::Config(e));
        if !(self.mirror.quantile > 0.0 && self.mirror.quantile <= 1.0) {
            return cfg(format!("mirror.quantile {} outside (0, 1]", self.mirror.quantile));
        }
        if !(self.report.top_fraction > 0.0 && self.report.top_fraction <= 1.0) {
            return cfg(format!(
                "report.top_fraction {} outside (0, 1]",
                self.report.top_fraction
            ));
        }
        if !(self.report.band.k >= 0.0) {
            return cfg("report.band.k must be >= 0".into());
        }
        if !(self.network.hub_fraction > 0.0 && self.network.hub_fraction <= 1.0) {
            return cfg("network.hub_fraction outside (0, 1]".into());
        }
        self.report
            .weights
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.synth
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Rows written per file by one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: Stage,
    pub rows_in: usize,
    pub outputs: Vec<(&'static str, usize)>,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub taxonomy: HsTaxonomy,
    pub countries: CountryTable,
    seed: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn data<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Data {
        stage,
        msg: e.to_string(),
    }
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let taxonomy = match &config.taxonomy {
            Some(p) => {
                let f = fs::File::open(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
                HsTaxonomy::from_reader(f).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
            }
            None => HsTaxonomy::bundled(),
        };
        let countries = match &config.countries {
            Some(p) => {
                let f = fs::File::open(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
                let (table, warnings) = ingest::load_country_table(f)
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
                for w in warnings {
                    warn!("country table: {w}");
                }
                table
            }
            None => CountryTable::bundled(),
        };
        let seed = config.master_seed()?;
        Ok(Self {
            config,
            taxonomy,
            countries,
            seed,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.config.out_dir.join(file)
    }

    pub fn seed_for(&self, stage: Stage) -> u64 {
        stage_seed(self.seed, stage.name())
    }

    fn open(&self, file: &str) -> Result<BufReader<fs::File>, PipelineError> {
        let p = self.path(file);
        fs::File::open(&p).map(BufReader::new).map_err(io_err(&p))
    }

    fn create(&self, file: &str) -> Result<BufWriter<fs::File>, PipelineError> {
        let p = self.path(file);
        fs::File::create(&p).map(BufWriter::new).map_err(io_err(&p))
    }

    fn write_text(&self, file: &str, text: &str) -> Result<(), PipelineError> {
        let p = self.path(file);
        fs::write(&p, text).map_err(io_err(&p))
    }

    /// Stages run by `all`: synth is skipped when an input file is configured.
    pub fn plan(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| *s != Stage::Synth || self.config.input.is_none())
            .collect()
    }

    pub fn run_all(&self) -> Result<Vec<StageSummary>, PipelineError> {
        self.plan().into_iter().map(|s| self.run(s)).collect()
    }

    pub fn run(&self, stage: Stage) -> Result<StageSummary, PipelineError> {
        let out = self.out_dir();
        fs::create_dir_all(out).map_err(io_err(out))?;
        let start = Instant::now();
        let summary = match stage {
            Stage::Synth => self.synth(),
            Stage::Ingest => self.ingest(),
            Stage::Mirror => self.mirror(),
            Stage::Features => self.features(),
            Stage::Benford => self.benford(),
            Stage::Iforest => self.iforest(),
            Stage::Network => self.network(),
            Stage::Autoenc => self.autoenc(),
            Stage::Explain => self.explain(),
            Stage::Report => self.report(),
        }?;
        let outputs: Vec<String> = summary.outputs.iter().map(|(f, n)| format!("{f}={n}")).collect();
        info!(
            "stage={} wall_ms={} rows_in={} {}",
            stage,
            start.elapsed().as_millis(),
            summary.rows_in,
            outputs.join(" ")
        );
        Ok(summary)
    }

    pub fn read_records(&self) -> Result<Vec<TradeRecord>, PipelineError> {
        let outcome = ingest::parse_records(self.open(files::RECORDS)?, &ColumnSchema::default(), None)
            .map_err(data(Stage::Ingest))?;
        if outcome.fatal_count() > 0 {
            return Err(PipelineError::Data {
                stage: Stage::Ingest,
                msg: format!("{} has {} unreadable rows", files::RECORDS, outcome.fatal_count()),
            });
        }
        Ok(outcome.records)
    }

    fn read_pairs(&self) -> Result<(Vec<MirrorPair>, Vec<bool>), PipelineError> {
        mirror::read_pairs(self.open(files::MIRROR_PAIRS)?).map_err(data(Stage::Mirror))
    }

    fn read_features(&self, records: &[TradeRecord]) -> Result<Vec<FeatureVector>, PipelineError> {
        let (ids, fv) = features::read_features(self.open(files::FEATURES)?).map_err(data(Stage::Features))?;
        check_ids(Stage::Features, files::FEATURES, records, &ids)?;
        Ok(fv)
    }

    /// One numeric column of a per-record table, checked against record order.
    fn read_score_column(
        &self,
        stage: Stage,
        file: &str,
        column: &str,
        records: &[TradeRecord],
    ) -> Result<Vec<f64>, PipelineError> {
        let (ids, values) = read_column(self.open(file)?, column).map_err(|msg| PipelineError::Data {
            stage,
            msg: format!("{file}: {msg}"),
        })?;
        check_ids(stage, file, records, &ids)?;
        Ok(values)
    }

    fn read_encoding(&self) -> Result<BTreeMap<CountryCode, f64>, PipelineError> {
        let mut r = csv::Reader::from_reader(self.open(files::REPORTER_ENCODING)?);
        let mut out = BTreeMap::new();
        for row in r.records() {
            let row = row.map_err(data(Stage::Iforest))?;
            let code: u32 = row.get(0).unwrap_or("").parse().map_err(data(Stage::Iforest))?;
            let v: f64 = row.get(1).unwrap_or("").parse().map_err(data(Stage::Iforest))?;
            out.insert(CountryCode(code), v);
        }
        Ok(out)
    }

    fn read_centrality(&self) -> Result<BTreeMap<CountryCode, f64>, PipelineError> {
        let mut r = csv::Reader::from_reader(self.open(files::NETWORK_NODES)?);
        let mut out = BTreeMap::new();
        for row in r.records() {
            let row = row.map_err(data(Stage::Network))?;
            let code: u32 = row.get(0).unwrap_or("").parse().map_err(data(Stage::Network))?;
            if let Ok(b) = row.get(1).unwrap_or("").parse::<f64>() {
                out.insert(CountryCode(code), b);
            }
        }
        Ok(out)
    }

    fn read_truth(&self) -> Result<Option<synth::GroundTruth>, PipelineError> {
        if self.config.input.is_some() || !self.path(files::GROUND_TRUTH).exists() {
            return Ok(None);
        }
        synth::read_ground_truth(self.open(files::GROUND_TRUTH)?)
            .map(Some)
            .map_err(data(Stage::Synth))
    }

    fn synth(&self) -> Result<StageSummary, PipelineError> {
        let seed = self.seed_for(Stage::Synth);
        let cfg = &self.config.synth;
        let base = synth::generate_corpus(cfg, &self.taxonomy, seed).map_err(data(Stage::Synth))?;
        let corpus = synth::inject(&base, cfg, &self.taxonomy, seed).map_err(data(Stage::Synth))?;
        let records = corpus.records();
        let truth = corpus.ground_truth();
        ingest::write_records(&records, self.create(files::CORPUS)?).map_err(data(Stage::Synth))?;
        synth::write_ground_truth(&truth, self.create(files::GROUND_TRUTH)?).map_err(data(Stage::Synth))?;
        for (label, n) in corpus.label_counts() {
            info!("stage=synth label={label} trades={n}");
        }
        Ok(StageSummary {
            stage: Stage::Synth,
            rows_in: 0,
            outputs: vec![
                (files::CORPUS, records.len()),
                (files::GROUND_TRUTH, truth.labels.len()),
            ],
        })
    }

    fn ingest(&self) -> Result<StageSummary, PipelineError> {
        let (source, schema) = match &self.config.input {
            Some(p) => (p.clone(), self.config.schema.clone()),
            None => (self.path(files::CORPUS), ColumnSchema::default()),
        };
        let f = fs::File::open(&source).map_err(io_err(&source))?;
        let outcome =
            ingest::parse_records(BufReader::new(f), &schema, Some(&self.countries)).map_err(data(Stage::Ingest))?;
        if outcome.fatal_count() > 0 {
            warn!("stage=ingest rejected={} rows", outcome.fatal_count());
        }
        ingest::write_records(&outcome.records, self.create(files::RECORDS)?).map_err(data(Stage::Ingest))?;
        ingest::write_issues(&outcome.issues, self.create(files::ISSUES)?).map_err(data(Stage::Ingest))?;
        Ok(StageSummary {
            stage: Stage::Ingest,
            rows_in: outcome.rows_read,
            outputs: vec![
                (files::RECORDS, outcome.records.len()),
                (files::ISSUES, outcome.issues.len()),
            ],
        })
    }

    fn mirror(&self) -> Result<StageSummary, PipelineError> {
        let records = self.read_records()?;
        let pairs = mirror::pair_mirror(&records);
        let flags = if pairs.is_empty() {
            Vec::new()
        } else {
            mirror::flag_top_outliers(&pairs, self.config.mirror.quantile, self.config.mirror.metric)
                .map_err(data(Stage::Mirror))?
        };
        mirror::write_pairs(&pairs, &flags, self.create(files::MIRROR_PAIRS)?).map_err(data(Stage::Mirror))?;

        let shares = mirror::ghost_share(&records);
        let mut w = csv::Writer::from_writer(self.create(files::GHOST_SHARE)?);
        w.write_record(["reporter", "ghost_share"])
            .map_err(data(Stage::Mirror))?;
        for (c, s) in &shares {
            w.write_record([c.to_string(), s.to_string()])
                .map_err(data(Stage::Mirror))?;
        }
        w.flush().map_err(data(Stage::Mirror))?;

        let series = mirror::missing_metal_series(&pairs);
        let mut w = csv::Writer::from_writer(self.create(files::MISSING_METAL)?);
        w.write_record(["period", "total_export_kg", "total_import_kg", "missing_kg", "gap_pct"])
            .map_err(data(Stage::Mirror))?;
        for p in &series {
            w.write_record([
                p.period.to_string(),
                p.total_export_kg.to_string(),
                p.total_import_kg.to_string(),
                p.missing_kg.to_string(),
                p.gap_pct.map(|g| g.to_string()).unwrap_or_default(),
            ])
            .map_err(data(Stage::Mirror))?;
        }
        w.flush().map_err(data(Stage::Mirror))?;
        Ok(StageSummary {
            stage: Stage::Mirror,
            rows_in: records.len(),
            outputs: vec![
                (files::MIRROR_PAIRS, pairs.len()),
                (files::GHOST_SHARE, shares.len()),
                (files::MISSING_METAL, series.len()),
            ],
        })
    }

    fn features(&self) -> Result<StageSummary, PipelineError> {
        let records = self.read_records()?;
        let (pairs, _) = self.read_pairs()?;
        let benchmarks =
            features::group_stats(&records, self.config.features.min_group).map_err(data(Stage::Features))?;
        let fv = features::compute_all(&records, &pairs, &benchmarks);
        let ids: Vec<String> = records.iter().map(|r| r.record_id.clone()).collect();
        features::write_features(&ids, &fv, self.create(files::FEATURES)?).map_err(data(Stage::Features))?;
        features::write_group_stats(&benchmarks, self.create(files::GROUP_STATS)?).map_err(data(Stage::Features))?;
        let imputed = fv.iter().filter(|f| f.price_imputed).count();
        if imputed > 0 {
            info!("stage=features imputed_prices={imputed}");
        }
        Ok(StageSummary {
            stage: Stage::Features,
            rows_in: records.len(),
            outputs: vec![
                (files::FEATURES, fv.len()),
                (files::GROUP_STATS, benchmarks.groups.len() + 1),
            ],
        })
    }

    /// Segments are reporters. A record's layer score is its segment's MAD
    /// excess over the acceptable-conformity bound, so conforming segments
    /// all score 0.
    fn benford(&self) -> Result<StageSummary, PipelineError> {
        let records = self.read_records()?;
        let field = self.config.benford.field;
        let segments = benford::benford_by_segment(&records, |r| r.reporter.to_string(), field);
        let mut w = csv::Writer::from_writer(self.create(files::BENFORD_SEGMENTS)?);
        w.write_record([
            "segment",
            "n",
            "zero_skipped",
            "chi_square",
            "mad",
            "conformity",
            "low_power",
        ])
        .map_err(data(Stage::Benford))?;
        for (seg, s) in &segments {
            let (n, chi, mad, conf, low) = match &s.result {
                Some(r) => (
                    r.n.to_string(),
                    r.chi_square.to_string(),
                    r.mad.to_string(),
                    format!("{:?}", r.conformity),
                    r.low_power.to_string(),
                ),
                None => ("0".into(), String::new(), String::new(), String::new(), String::new()),
            };
            w.write_record([seg.clone(), n, s.zero_skipped.to_string(), chi, mad, conf, low])
                .map_err(data(Stage::Benford))?;
        }
        w.flush().map_err(data(Stage::Benford))?;
        let digit_rows =
            benford::write_digit_table(&segments, self.create(files::BENFORD_DIGITS)?).map_err(data(Stage::Benford))?;

        let mut w = csv::Writer::from_writer(self.create(files::BENFORD_SCORES)?);
        w.write_record(["record_id", "segment_mad", "excess_mad", "nonconforming"])
            .map_err(data(Stage::Benford))?;
        for r in &records {
            let res = segments.get(&r.reporter.to_string()).and_then(|s| s.result.as_ref());
            let mad = res.map(|x| x.mad).unwrap_or(0.0);
            let excess = (mad - benford::ACCEPTABLE_MAD).max(0.0);
            let bad = res
                .map(|x| x.conformity == benford::Conformity::Nonconforming)
                .unwrap_or(false);
            w.write_record([
                r.record_id.as_str(),
                &mad.to_string(),
                &excess.to_string(),
                &bad.to_string(),
            ])
            .map_err(data(Stage::Benford))?;
        }
        w.flush().map_err(data(Stage::Benford))?;
        Ok(StageSummary {
            stage: Stage::Benford,
            rows_in: records.len(),
            outputs: vec![
                (files::BENFORD_SEGMENTS, segments.len()),
                (files::BENFORD_DIGITS, digit_rows),
                (files::BENFORD_SCORES, records.len()),
            ],
        })
    }

    /// Two passes: the reporter encoding from all rows seeds a first forest,
    /// then is recomputed over the rows that forest leaves unflagged.
    fn iforest(&self) -> Result<StageSummary, PipelineError> {
        let records = self.read_records()?;
        let fv = self.read_features(&records)?;
        let seed = self.seed_for(Stage::Iforest);
        let params = &self.config.iforest;
        let first = features::encode_reporters(&fv, None);
        let (model, _) = iforest::build_forest(&features::model_matrix(&fv, &first), params, seed, &MODEL_FEATURES)
            .map_err(data(Stage::Iforest))?;
        let pre_flags = iforest::flag(&model, &features::model_matrix(&fv, &first), params.contamination)
            .map_err(data(Stage::Iforest))?;
        let encoding = features::encode_reporters(&fv, Some(&pre_flags));
        let x = features::model_matrix(&fv, &encoding);
        let (model, warnings) =
            iforest::build_forest(&x, params, seed, &MODEL_FEATURES).map_err(data(Stage::Iforest))?;
        for w in warnings {
            warn!("stage=iforest {w}");
        }
        let scores = model.score_all(&x).map_err(data(Stage::Iforest))?;
        let flags = iforest::flag_scores(&scores, params.contamination).map_err(data(Stage::Iforest))?;

        let mut w = csv::Writer::from_writer(self.create(files::REPORTER_ENCODING)?);
        w.write_record(["reporter", "encoding"]).map_err(data(Stage::Iforest))?;
        for (c, v) in &encoding {
            w.write_record([c.to_string(), v.to_string()])
                .map_err(data(Stage::Iforest))?;
        }
        w.flush().map_err(data(Stage::Iforest))?;
        self.write_text(files::IFOREST_MODEL, &(model.to_json() + "\n"))?;
        let ids: Vec<String> = records.iter().map(|r| r.record_id.clone()).collect();
        iforest::write_scores(&ids, &scores, &flags, self.create(files::IFOREST_SCORES)?)
            .map_err(data(Stage::Iforest))?;
        Ok(StageSummary {
            stage: Stage::Iforest,
            rows_in: records.len(),
            outputs: vec![
                (files::REPORTER_ENCODING, encoding.len()),
                (files::IFOREST_MODEL, model.trees.len()),
                (files::IFOREST_SCORES, scores.len()),
            ],
        })
    }

    fn network(&self) -> Result<StageSummary, PipelineError> {
        let records = self.read_records()?;
        let cfg = &self.config.network;
        let filter = GraphFilter {
            source: cfg.source,
            ..GraphFilter::default()
        };
        let graph = network::build_graph(&records, &filter).map_err(data(Stage::Network))?;
        let centrality = network::betweenness(&graph, cfg.weighted, cfg.include_ghost);
        let partition = network::detect_communities(&graph, self.seed_for(Stage::Network), cfg.include_ghost);
        let violations = network::violation_scores(&graph, &partition);
        let per_record = network::record_violations(&graph, &violations, &records);
        info!(
            "stage=network nodes={} edges={} communities={} modularity={}",
            graph.nodes().len(),
            graph.edges().len(),
            partition.community_count(),
            partition.modularity_q
        );

        let window = match (
            records.iter().map(|r| r.period).min(),
            records.iter().map(|r| r.period).max(),
        ) {
            (Some(a), Some(b)) => a..=b,
            _ => 0..=0,
        };
        let mut attributions = BTreeMap::new();
        for hub in network::top_hubs(&centrality, cfg.hub_fraction) {
            match network::attribute_origins(&records, hub, window.clone()) {
                Ok(a) => {
                    attributions.insert(hub, a);
                }
                Err(e) => warn!("stage=network hub {hub}: {e}"),
            }
        }
        network::write_edges(&graph, &partition, &violations, self.create(files::NETWORK_EDGES)?)
            .map_err(data(Stage::Network))?;
        network::write_nodes(&graph, &centrality, &partition, self.create(files::NETWORK_NODES)?)
            .map_err(data(Stage::Network))?;
        network::write_origins(&attributions, self.create(files::ORIGIN_ATTRIBUTION)?).map_err(data(Stage::Network))?;
        let origin_rows: usize = attributions
            .values()
            .flat_map(|h| h.values())
            .map(|a| a.origins.len())
            .sum();
        let mut w = csv::Writer::from_writer(self.create(files::NETWORK_SCORES)?);
        w.write_record(["record_id", "violation"])
            .map_err(data(Stage::Network))?;
        for (r, v) in records.iter().zip(&per_record) {
            w.write_record([r.record_id.as_str(), &v.to_string()])
                .map_err(data(Stage::Network))?;
        }
        w.flush().map_err(data(Stage::Network))?;
        Ok(StageSummary {
            stage: Stage::Network,
            rows_in: records.len(),
            outputs: vec![
                (files::NETWORK_EDGES, graph.edges().len()),
                (files::NETWORK_NODES, graph.nodes().len()),
                (files::ORIGIN_ATTRIBUTION, origin_rows),
                (files::NETWORK_SCORES, per_record.len()),
            ],
        })
    }

    fn autoenc(&self) -> Result<StageSummary, PipelineError> {
        let records = self.read_records()?;
        let fv = self.read_features(&records)?;
        let encoding = self.read_encoding()?;
        let x = features::model_matrix(&fv, &encoding);
        let outcome = autoenc::train(&x, &MODEL_FEATURES, &self.config.autoenc, self.seed_for(Stage::Autoenc))
            .map_err(data(Stage::Autoenc))?;
        for d in &outcome.dropped {
            warn!("stage=autoenc dropped zero-variance feature {d}");
        }
        let model = &outcome.model;
        let errors = model.errors(&x).map_err(data(Stage::Autoenc))?;
        let latent = model.latent(&x).map_err(data(Stage::Autoenc))?;
        let pca = autoenc::pca_project(&x, 2).map_err(data(Stage::Autoenc))?;
        for w in &pca.warnings {
            warn!("stage=autoenc {w}");
        }
        let ids: Vec<String> = records.iter().map(|r| r.record_id.clone()).collect();
        self.write_text(files::AUTOENC_MODEL, &model.to_text())?;
        autoenc::write_errors(&ids, &errors, model.threshold, self.create(files::AUTOENC_ERRORS)?)
            .map_err(data(Stage::Autoenc))?;
        autoenc::write_coords(&ids, &latent, &pca, self.create(files::LATENT)?).map_err(data(Stage::Autoenc))?;
        let mut w = csv::Writer::from_writer(self.create(files::AUTOENC_LOSS)?);
        w.write_record(["epoch", "loss"]).map_err(data(Stage::Autoenc))?;
        for (i, l) in outcome.loss_curve.iter().enumerate() {
            w.write_record([(i + 1).to_string(), l.to_string()])
                .map_err(data(Stage::Autoenc))?;
        }
        w.flush().map_err(data(Stage::Autoenc))?;
        info!(
            "stage=autoenc threshold={} final_loss={}",
            model.threshold,
            outcome.loss_curve.last().copied().unwrap_or(f64::NAN)
        );
        Ok(StageSummary {
            stage: Stage::Autoenc,
            rows_in: records.len(),
            outputs: vec![
                (files::AUTOENC_MODEL, 1),
                (files::AUTOENC_ERRORS, errors.len()),
                (files::LATENT, latent.len()),
                (files::AUTOENC_LOSS, outcome.loss_curve.len()),
            ],
        })
    }

    /// Layer scores present in the output directory, aligned with `records`.
    pub fn read_layers(&self, records: &[TradeRecord]) -> Result<LayerScores, PipelineError> {
        let sources = [
            (Stage::Benford, files::BENFORD_SCORES, "excess_mad"),
            (Stage::Iforest, files::IFOREST_SCORES, "score"),
            (Stage::Network, files::NETWORK_SCORES, "violation"),
            (Stage::Autoenc, files::AUTOENC_ERRORS, "error"),
        ];
        let mut scores = LayerScores::default();
        for (slot, (stage, file, column)) in scores.layers.iter_mut().zip(sources) {
            if self.path(file).exists() {
                *slot = Some(self.read_score_column(stage, file, column, records)?);
            } else {
                warn!("layer {stage} missing ({file}); composite weights renormalize");
            }
        }
        Ok(scores)
    }

    fn composite_flags(&self, composite: &[f64]) -> Vec<bool> {
        let mut flags = vec![false; composite.len()];
        for i in top_indices(composite, ceil_count(self.config.report.top_fraction, composite.len())) {
            flags[i] = true;
        }
        flags
    }

    fn explain(&self) -> Result<StageSummary, PipelineError> {
        let records = self.read_records()?;
        let fv = self.read_features(&records)?;
        let layers = self.read_layers(&records)?;
        let cfg = &self.config.explain;
        let seed = self.seed_for(Stage::Explain);
        let composite =
            report::composite_all(&layers, records.len(), &self.config.report.weights).map_err(data(Stage::Explain))?;
        let flags = self.composite_flags(&composite);
        let mut w = csv::Writer::from_writer(self.create(files::COMPOSITE)?);
        w.write_record(["record_id", "composite", "flag"])
            .map_err(data(Stage::Explain))?;
        for ((r, c), f) in records.iter().zip(&composite).zip(&flags) {
            w.write_record([r.record_id.as_str(), &c.to_string(), &f.to_string()])
                .map_err(data(Stage::Explain))?;
        }
        w.flush().map_err(data(Stage::Explain))?;

        let model = ForestModel::from_json(
            &fs::read_to_string(self.path(files::IFOREST_MODEL)).map_err(io_err(&self.path(files::IFOREST_MODEL)))?,
        )
        .map_err(data(Stage::Explain))?;
        let encoding = self.read_encoding()?;
        let x = features::model_matrix(&fv, &encoding);
        let scorer = |row: &[f64]| model.score(row).unwrap_or(0.0);

        let targets = top_indices(&composite, cfg.shapley_top.min(records.len()));
        let attributions = targets
            .iter()
            .map(|&i| {
                explain::shapley_exact(scorer, &x[i], &x).map(|mut a| {
                    a.record_id = records[i].record_id.clone();
                    a
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(data(Stage::Explain))?;
        explain::write_attributions(&attributions, &MODEL_FEATURES, self.create(files::ATTRIBUTIONS)?)
            .map_err(data(Stage::Explain))?;

        let mut rng = SeededRng::new(seed);
        let sample = {
            let mut idx = rng.sample_indices(records.len(), cfg.importance_rows.min(records.len()));
            idx.sort_unstable();
            idx
        };
        let xs: Vec<Vec<f64>> = sample.iter().map(|&i| x[i].clone()).collect();
        let ls: Vec<bool> = sample.iter().map(|&i| flags[i]).collect();
        let importance = match explain::permutation_importance(scorer, &xs, &ls, cfg.importance_repeats, rng.next_u64())
        {
            Ok(v) => v,
            Err(e) => {
                warn!("stage=explain permutation importance skipped: {e}");
                Vec::new()
            }
        };
        explain::write_importance(&importance, &MODEL_FEATURES, self.create(files::IMPORTANCE)?)
            .map_err(data(Stage::Explain))?;

        let rules = match explain::fit_rule_tree(&x, &flags, &MODEL_FEATURES, cfg.tree_depth) {
            Ok(tree) => tree.rules(),
            Err(e) => {
                warn!("stage=explain rule tree skipped: {e}");
                Vec::new()
            }
        };
        let mut text = rules.join("\n");
        text.push('\n');
        self.write_text(files::RULES, &text)?;

        let centrality = self.read_centrality()?;
        let (profiles, warnings) =
            explain::actor_profiles(&records, &fv, &composite, &centrality, cfg.clusters, rng.next_u64())
                .map_err(data(Stage::Explain))?;
        for w in warnings {
            warn!("stage=explain {w}");
        }
        explain::write_profiles(&profiles, self.create(files::PROFILES)?).map_err(data(Stage::Explain))?;

        let stats = RadarStats::from_features(&fv);
        let mut w = csv::Writer::from_writer(self.create(files::RADAR)?);
        let mut header = vec!["record_id".to_string()];
        header.extend(RADAR_AXES.iter().map(|a| a.to_string()));
        w.write_record(&header).map_err(data(Stage::Explain))?;
        for &i in &targets {
            let mut row = vec![records[i].record_id.clone()];
            row.extend(explain::fingerprint(&fv[i], &stats).iter().map(f64::to_string));
            w.write_record(&row).map_err(data(Stage::Explain))?;
        }
        w.flush().map_err(data(Stage::Explain))?;

        let hs = explain::hs_risk_scores(&records, &composite);
        explain::write_hs_risk(&hs, self.create(files::HS_RISK)?).map_err(data(Stage::Explain))?;
        Ok(StageSummary {
            stage: Stage::Explain,
            rows_in: records.len(),
            outputs: vec![
                (files::COMPOSITE, composite.len()),
                (files::ATTRIBUTIONS, attributions.len() * MODEL_FEATURES.len()),
                (files::IMPORTANCE, importance.len()),
                (files::RULES, rules.len()),
                (files::PROFILES, profiles.len()),
                (files::RADAR, targets.len()),
                (files::HS_RISK, hs.len()),
            ],
        })
    }

    fn read_top_attribution(&self) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut best: BTreeMap<String, (String, f64)> = BTreeMap::new();
        let mut r = csv::Reader::from_reader(self.open(files::ATTRIBUTIONS)?);
        for row in r.records() {
            let row = row.map_err(data(Stage::Explain))?;
            let phi: f64 = row.get(2).unwrap_or("").parse().map_err(data(Stage::Explain))?;
            let id = row.get(0).unwrap_or("").to_string();
            let feature = row.get(1).unwrap_or("").to_string();
            let e = best.entry(id).or_insert((feature.clone(), phi));
            if phi.abs() > e.1.abs() {
                *e = (feature, phi);
            }
        }
        Ok(best.into_iter().map(|(k, (f, _))| (k, f)).collect())
    }

    fn report(&self) -> Result<StageSummary, PipelineError> {
        let records = self.read_records()?;
        let fv = self.read_features(&records)?;
        let layers = self.read_layers(&records)?;
        let composite = self.read_score_column(Stage::Explain, files::COMPOSITE, "composite", &records)?;
        let flags = self.composite_flags(&composite);
        let (pairs, pair_flags) = self.read_pairs()?;
        let top_attribution = self.read_top_attribution()?;
        let truth = self.read_truth()?;
        let threshold = match fs::read_to_string(self.path(files::AUTOENC_MODEL)) {
            Ok(text) => Some(
                autoenc::AutoencoderModel::from_text(&text)
                    .map_err(data(Stage::Report))?
                    .threshold,
            ),
            Err(_) => None,
        };
        for (src, dst) in [
            (files::NETWORK_EDGES, "plot_network_edges.csv"),
            (files::ORIGIN_ATTRIBUTION, "plot_origin_attribution.csv"),
            (files::LATENT, "plot_latent.csv"),
        ] {
            let from = self.path(src);
            if from.exists() {
                fs::copy(&from, self.path(dst)).map_err(io_err(&from))?;
            }
        }
        let inputs = report::ReportInputs {
            records: &records,
            features: &fv,
            layers: &layers,
            composite: &composite,
            composite_flags: &flags,
            pairs: &pairs,
            pair_flags: &pair_flags,
            countries: &self.countries,
            top_attribution: &top_attribution,
            autoenc_threshold: threshold,
            truth: truth.as_ref(),
            weights: self.config.report.weights,
            bands: self.config.report.band,
            top_flags: self.config.report.top_flags,
        };
        let manifest: Vec<ManifestEntry> =
            report::emit_reports(&inputs, self.out_dir()).map_err(data(Stage::Report))?;
        Ok(StageSummary {
            stage: Stage::Report,
            rows_in: records.len(),
            outputs: vec![
                (report::RISK_TABLE, records.len()),
                (report::MANIFEST_FILE, manifest.len()),
            ],
        })
    }
}

fn check_ids(stage: Stage, file: &str, records: &[TradeRecord], ids: &[String]) -> Result<(), PipelineError> {
    let aligned = ids.len() == records.len() && records.iter().zip(ids).all(|(r, id)| &r.record_id == id);
    if aligned {
        Ok(())
    } else {
        Err(PipelineError::Data {
            stage,
            msg: format!("{file} is not aligned with {}; re-run upstream stages", files::RECORDS),
        })
    }
}

/// `record_id` plus one named numeric column.
pub fn read_column<R: std::io::Read>(source: R, column: &str) -> Result<(Vec<String>, Vec<f64>), String> {
    let mut r = csv::Reader::from_reader(source);
    let headers = r.headers().map_err(|e| e.to_string())?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == "record_id")
        .ok_or("no record_id column")?;
    let val_col = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| format!("no `{column}` column"))?;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| e.to_string())?;
        ids.push(row.get(id_col).unwrap_or("").to_string());
        let v = row.get(val_col).unwrap_or("");
        values.push(v.parse().map_err(|_| format!("`{v}` in `{column}` is not a number"))?);
    }
    Ok((ids, values))
}
