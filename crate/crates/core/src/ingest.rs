//! Record ingestion: delimited-text parsing, validation, the HS taxonomy and
//! the country-code table.
//!
//! Rows that fail validation are never dropped silently. Every rejected row
//! yields exactly one fatal [`ValidationIssue`]; accepted rows may carry any
//! number of warnings (unspecified partner, unknown country, zero weight).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUNDLED_TAXONOMY: &str = include_str!("../data/hs_taxonomy.csv");
const BUNDLED_COUNTRIES: &str = include_str!("../data/countries.csv");

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("required column `{0}` missing from header")]
    MissingColumn(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("HS code {0} is not in the taxonomy")]
    UnknownCode(String),
    #[error("invalid HS code `{0}`: expected six digits")]
    BadHsCode(String),
    #[error("taxonomy error: {0}")]
    Taxonomy(String),
    #[error("country table error: {0}")]
    CountryTable(String),
}

/// Numeric country code. Code 0 is the "Unspecified" partner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CountryCode(pub u32);

impl CountryCode {
    pub const UNSPECIFIED: CountryCode = CountryCode(0);

    pub fn is_unspecified(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for CountryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Six-digit Harmonized System subheading.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct HsCode(String);

impl HsCode {
    pub fn new(code: &str) -> Result<Self, IngestError> {
        if code.len() == 6 && code.bytes().all(|b| b.is_ascii_digit()) {
            Ok(Self(code.to_string()))
        } else {
            Err(IngestError::BadHsCode(code.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Four-digit heading (e.g. `7616` for `761699`).
    pub fn heading(&self) -> &str {
        &self.0[..4]
    }
}

impl TryFrom<String> for HsCode {
    type Error = IngestError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        HsCode::new(&s)
    }
}

impl From<HsCode> for String {
    fn from(c: HsCode) -> String {
        c.0
    }
}

impl fmt::Display for HsCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FlowDirection {
    Export,
    Import,
}

impl FlowDirection {
    /// Comtrade-style single-letter code.
    pub fn code(self) -> &'static str {
        match self {
            FlowDirection::Export => "X",
            FlowDirection::Import => "M",
        }
    }
}

impl FromStr for FlowDirection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x" | "export" | "exports" => Ok(FlowDirection::Export),
            "m" | "import" | "imports" => Ok(FlowDirection::Import),
            other => Err(format!("unrecognised flow code `{other}`")),
        }
    }
}

/// One reported flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub record_id: String,
    pub period: i32,
    pub reporter: CountryCode,
    pub partner: CountryCode,
    pub flow: FlowDirection,
    pub hs_code: HsCode,
    /// Kilograms.
    pub net_weight: f64,
    /// USD.
    pub trade_value: f64,
}

impl TradeRecord {
    /// Exporter and importer of the underlying shipment as seen by this declaration.
    pub fn exporter_importer(&self) -> (CountryCode, CountryCode) {
        match self.flow {
            FlowDirection::Export => (self.reporter, self.partner),
            FlowDirection::Import => (self.partner, self.reporter),
        }
    }

    pub fn is_priced(&self) -> bool {
        self.net_weight > 0.0 && self.trade_value > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IssueKind {
    BadHsCode,
    NegativeQuantity,
    UnknownCountry,
    ZeroWeightNonzeroValue,
    UnspecifiedPartner,
    /// Unparseable or missing field, or a duplicate record id.
    MalformedRow,
    /// Reporter equal to a specified partner.
    SelfTrade,
}

impl IssueKind {
    /// Fatal issues reject the row; the rest are warnings on a retained record.
    pub fn is_fatal(self) -> bool {
        matches!(
            self,
            IssueKind::BadHsCode | IssueKind::NegativeQuantity | IssueKind::MalformedRow | IssueKind::SelfTrade
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub record_id: String,
    pub kind: IssueKind,
    pub detail: String,
}

/// Column names for the delimited input. Defaults follow the Comtrade bulk export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnSchema {
    pub period: String,
    pub reporter: String,
    pub partner: String,
    pub flow: String,
    pub hs_code: String,
    pub net_weight: String,
    pub trade_value: String,
    /// Optional; rows get `row-<n>` ids when the column is absent or blank.
    pub record_id: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            period: "period".into(),
            reporter: "reporterCode".into(),
            partner: "partnerCode".into(),
            flow: "flowCode".into(),
            hs_code: "cmdCode".into(),
            net_weight: "netWgt".into(),
            trade_value: "primaryValue".into(),
            record_id: "recordId".into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub records: Vec<TradeRecord>,
    pub issues: Vec<ValidationIssue>,
    /// Data rows read, accepted or not.
    pub rows_read: usize,
}

impl ParseOutcome {
    pub fn fatal_count(&self) -> usize {
        self.issues.iter().filter(|i| i.kind.is_fatal()).count()
    }
}

struct ColumnIndex {
    period: usize,
    reporter: usize,
    partner: usize,
    flow: usize,
    hs_code: usize,
    net_weight: usize,
    trade_value: usize,
    record_id: Option<usize>,
}

impl ColumnIndex {
    fn resolve(headers: &csv::StringRecord, schema: &ColumnSchema) -> Result<Self, IngestError> {
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
        };
        Ok(Self {
            period: find(&schema.period)?,
            reporter: find(&schema.reporter)?,
            partner: find(&schema.partner)?,
            flow: find(&schema.flow)?,
            hs_code: find(&schema.hs_code)?,
            net_weight: find(&schema.net_weight)?,
            trade_value: find(&schema.trade_value)?,
            record_id: headers.iter().position(|h| h.trim() == schema.record_id),
        })
    }
}

fn parse_quantity(raw: &str, field: &str, empty_is_zero: bool) -> Result<f64, (IssueKind, String)> {
    let raw = raw.trim();
    if raw.is_empty() {
        return if empty_is_zero {
            Ok(0.0)
        } else {
            Err((IssueKind::MalformedRow, format!("{field} is empty")))
        };
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| (IssueKind::MalformedRow, format!("{field} `{raw}` is not a number")))?;
    if !v.is_finite() {
        return Err((IssueKind::MalformedRow, format!("{field} `{raw}` is not finite")));
    }
    if v < 0.0 {
        return Err((IssueKind::NegativeQuantity, format!("{field} {v} is negative")));
    }
    Ok(v)
}

fn parse_code(raw: &str, field: &str) -> Result<CountryCode, (IssueKind, String)> {
    raw.trim().parse::<u32>().map(CountryCode).map_err(|_| {
        (
            IssueKind::MalformedRow,
            format!("{field} `{}` is not a numeric code", raw.trim()),
        )
    })
}

/// Parse delimited trade rows. Row order is preserved; every data row ends up
/// either as a record or as exactly one fatal issue.
///
/// When `countries` is given, reporters or partners outside the table are
/// reported as `UnknownCountry` warnings. A reporter of 0 is always rejected.
pub fn parse_records<R: Read>(
    source: R,
    schema: &ColumnSchema,
    countries: Option<&CountryTable>,
) -> Result<ParseOutcome, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let cols = ColumnIndex::resolve(&headers, schema)?;

    let mut out = ParseOutcome::default();
    let mut seen_ids: HashSet<String> = HashSet::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row?;
        out.rows_read += 1;
        let cell = |i: usize| row.get(i).unwrap_or("");
        let record_id = cols
            .record_id
            .map(|i| cell(i).trim().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| format!("row-{}", row_idx + 1));

        let mut warnings = Vec::new();
        let parsed = (|| -> Result<TradeRecord, (IssueKind, String)> {
            if !seen_ids.insert(record_id.clone()) {
                return Err((IssueKind::MalformedRow, format!("duplicate record id {record_id}")));
            }
            let period = cell(cols.period).trim().parse::<i32>().map_err(|_| {
                (
                    IssueKind::MalformedRow,
                    format!("period `{}` is not a year", cell(cols.period)),
                )
            })?;
            let reporter = parse_code(cell(cols.reporter), "reporter")?;
            let partner = parse_code(cell(cols.partner), "partner")?;
            let flow = cell(cols.flow)
                .parse::<FlowDirection>()
                .map_err(|e| (IssueKind::MalformedRow, e))?;
            let hs_code = HsCode::new(cell(cols.hs_code).trim()).map_err(|e| (IssueKind::BadHsCode, e.to_string()))?;
            let net_weight = parse_quantity(cell(cols.net_weight), "net weight", true)?;
            let trade_value = parse_quantity(cell(cols.trade_value), "trade value", false)?;
            if reporter.is_unspecified() {
                return Err((
                    IssueKind::UnknownCountry,
                    "reporter code 0 is not a jurisdiction".into(),
                ));
            }
            if reporter == partner {
                return Err((
                    IssueKind::SelfTrade,
                    format!("reporter and partner are both {reporter}"),
                ));
            }
            if partner.is_unspecified() {
                warnings.push((
                    IssueKind::UnspecifiedPartner,
                    "partner is Unspecified (code 0)".to_string(),
                ));
            }
            if let Some(table) = countries {
                for (role, code) in [("reporter", reporter), ("partner", partner)] {
                    if !code.is_unspecified() && !table.contains(code) {
                        warnings.push((
                            IssueKind::UnknownCountry,
                            format!("{role} code {code} not in country table"),
                        ));
                    }
                }
            }
            if net_weight == 0.0 && trade_value > 0.0 {
                warnings.push((
                    IssueKind::ZeroWeightNonzeroValue,
                    "zero net weight with positive value; excluded from unit prices".to_string(),
                ));
            }
            Ok(TradeRecord {
                record_id: record_id.clone(),
                period,
                reporter,
                partner,
                flow,
                hs_code,
                net_weight,
                trade_value,
            })
        })();

        match parsed {
            Ok(rec) => {
                out.issues
                    .extend(warnings.into_iter().map(|(kind, detail)| ValidationIssue {
                        record_id: record_id.clone(),
                        kind,
                        detail,
                    }));
                out.records.push(rec);
            }
            Err((kind, detail)) => out.issues.push(ValidationIssue {
                record_id,
                kind,
                detail,
            }),
        }
    }
    Ok(out)
}

/// Write records in the default ingest schema (including `recordId`).
pub fn write_records<W: Write>(records: &[TradeRecord], sink: W) -> Result<(), IngestError> {
    let schema = ColumnSchema::default();
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        &schema.period,
        &schema.reporter,
        &schema.partner,
        &schema.flow,
        &schema.hs_code,
        &schema.net_weight,
        &schema.trade_value,
        &schema.record_id,
    ])?;
    for r in records {
        w.write_record([
            r.period.to_string(),
            r.reporter.to_string(),
            r.partner.to_string(),
            r.flow.code().to_string(),
            r.hs_code.to_string(),
            r.net_weight.to_string(),
            r.trade_value.to_string(),
            r.record_id.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_issues<W: Write>(issues: &[ValidationIssue], sink: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["record_id", "kind", "fatal", "detail"])?;
    for i in issues {
        w.write_record([
            i.record_id.as_str(),
            &format!("{:?}", i.kind),
            if i.kind.is_fatal() { "true" } else { "false" },
            i.detail.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Production stage of an HS subheading along the aluminium value chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HsStage {
    Upstream,
    Midstream,
    Circular,
    SemiFinished,
    Finished,
}

impl HsStage {
    pub const ALL: [HsStage; 5] = [
        HsStage::Upstream,
        HsStage::Midstream,
        HsStage::Circular,
        HsStage::SemiFinished,
        HsStage::Finished,
    ];
}

impl FromStr for HsStage {
    type Err = IngestError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "Upstream" => Ok(HsStage::Upstream),
            "Midstream" => Ok(HsStage::Midstream),
            "Circular" => Ok(HsStage::Circular),
            "SemiFinished" => Ok(HsStage::SemiFinished),
            "Finished" => Ok(HsStage::Finished),
            other => Err(IngestError::Taxonomy(format!("unknown stage `{other}`"))),
        }
    }
}

/// HS code to stage lookup.
///
/// The bundled file names the five anchor codes (bauxite, alumina, the two
/// unwrought headings and scrap) plus 26 semi-finished and finished
/// subheadings from headings 7604 to 7616. Replace it with
/// [`HsTaxonomy::from_reader`] when a different product scope is needed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsTaxonomy {
    entries: BTreeMap<HsCode, HsStage>,
}

impl HsTaxonomy {
    pub fn bundled() -> Self {
        Self::from_reader(BUNDLED_TAXONOMY.as_bytes()).expect("bundled taxonomy is valid")
    }

    /// Two-column file `hs_code,stage` with a header row.
    pub fn from_reader<R: Read>(source: R) -> Result<Self, IngestError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
        let mut entries = BTreeMap::new();
        for row in reader.records() {
            let row = row?;
            let code = HsCode::new(row.get(0).unwrap_or("").trim())?;
            let stage: HsStage = row.get(1).unwrap_or("").parse()?;
            if entries.insert(code.clone(), stage).is_some() {
                return Err(IngestError::Taxonomy(format!("duplicate code {code}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn classify(&self, code: &HsCode) -> Result<HsStage, IngestError> {
        self.entries
            .get(code)
            .copied()
            .ok_or_else(|| IngestError::UnknownCode(code.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HsCode, HsStage)> {
        self.entries.iter().map(|(c, s)| (c, *s))
    }

    pub fn codes_in(&self, stage: HsStage) -> Vec<HsCode> {
        self.iter()
            .filter(|(_, s)| *s == stage)
            .map(|(c, _)| c.clone())
            .collect()
    }
}

/// Set of valid numeric country codes. Never contains code 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CountryTable {
    names: BTreeMap<CountryCode, String>,
}

impl CountryTable {
    pub fn bundled() -> Self {
        load_country_table(BUNDLED_COUNTRIES.as_bytes())
            .expect("bundled country table is valid")
            .0
    }

    pub fn contains(&self, code: CountryCode) -> bool {
        self.names.contains_key(&code)
    }

    pub fn name(&self, code: CountryCode) -> Option<&str> {
        self.names.get(&code).map(String::as_str)
    }

    pub fn codes(&self) -> BTreeSet<CountryCode> {
        self.names.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Load a `code,name` table. Returns the table plus any warnings
/// (empty table, code-0 rows skipped). Duplicate codes are fatal.
pub fn load_country_table<R: Read>(source: R) -> Result<(CountryTable, Vec<String>), IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let mut names = BTreeMap::new();
    let mut warnings = Vec::new();
    for row in reader.records() {
        let row = row?;
        let raw = row.get(0).unwrap_or("").trim();
        let code = raw
            .parse::<u32>()
            .map(CountryCode)
            .map_err(|_| IngestError::CountryTable(format!("`{raw}` is not a numeric code")))?;
        if code.is_unspecified() {
            warnings.push("code 0 is reserved for Unspecified and was skipped".to_string());
            continue;
        }
        let name = row.get(1).unwrap_or("").trim().to_string();
        if names.insert(code, name).is_some() {
            return Err(IngestError::CountryTable(format!("duplicate code {code}")));
        }
    }
    if names.is_empty() {
        warnings.push("country table is empty; every destination will fail validation".to_string());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((CountryTable { names }, warnings))
}
