//! Provider tables: loading, validation, serialization and descriptive
//! statistics.
//!
//! A table is delimiter-separated text with a header row. Every provider row
//! carries the four structural variables and an abuse count; enrichment
//! variables are optional and encoded as empty cells when missing. Columns
//! that do not map onto a known field are kept verbatim as extra columns so
//! that derived labels (twin ids, alternative abuse feeds) survive a
//! round-trip.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column holding the twin label emitted by matched sampling.
pub const TWIN_ID: &str = "twin_id";

pub const PROVIDER_ID: &str = "provider_id";
pub const ASSIGNED_IPS: &str = "assigned_ips_log10";
pub const HOSTING_IPS: &str = "hosting_ips_log10";
pub const HOSTED_DOMAINS: &str = "hosted_domains_log10";
pub const PCT_SHARED: &str = "pct_shared";
pub const ABUSE_COUNT: &str = "abuse_count";
pub const COUNTRY: &str = "country";
pub const PRICE_PER_YEAR: &str = "price_per_year";
pub const POPULARITY_INDEX: &str = "popularity_index";
pub const TIME_IN_BUSINESS: &str = "time_in_business";
pub const ICT_DEV_INDEX: &str = "ict_dev_index";
pub const WORDPRESS_USE: &str = "wordpress_use";

/// The four structural variables available for every provider.
pub const STRUCTURAL_COLUMNS: [&str; 4] = [ASSIGNED_IPS, HOSTING_IPS, HOSTED_DOMAINS, PCT_SHARED];

/// Fields that must be present in every input table.
pub const REQUIRED_FIELDS: [&str; 6] = [
    PROVIDER_ID,
    ASSIGNED_IPS,
    HOSTING_IPS,
    HOSTED_DOMAINS,
    PCT_SHARED,
    ABUSE_COUNT,
];

/// Enrichment fields; absent columns load as missing values.
pub const OPTIONAL_FIELDS: [&str; 6] = [
    COUNTRY,
    PRICE_PER_YEAR,
    POPULARITY_INDEX,
    TIME_IN_BUSINESS,
    ICT_DEV_INDEX,
    WORDPRESS_USE,
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed table: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{column}` (mapped from field `{field}`)")]
    MissingColumn { field: String, column: String },
    #[error("row {row}, column `{column}`: {message}")]
    InvalidCell {
        row: usize,
        column: String,
        message: String,
    },
    #[error("row {row}: duplicate provider key `{key}`")]
    DuplicateKey { row: usize, key: String },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{0}` has no non-missing values")]
    EmptyColumn(String),
    #[error("invalid schema entry `{0}`: expected field=column")]
    InvalidSchema(String),
    #[error("log10 transform of negative or non-finite count {0}")]
    NegativeCount(f64),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Base-10 log of a raw count, floored at zero: `log10(max(x, 1))`.
pub fn log10_transform(x: f64) -> Result<f64, IngestError> {
    if !x.is_finite() || x < 0.0 {
        return Err(IngestError::NegativeCount(x));
    }
    Ok(x.max(1.0).log10())
}

/// A cell in an extra column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Field {
    Num(f64),
    Text(String),
}

impl Field {
    fn parse(raw: &str) -> Self {
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Field::Num(v),
            _ => Field::Text(raw.to_string()),
        }
    }
}

/// Borrowed view of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value<'a> {
    Num(f64),
    Text(&'a str),
    Missing,
}

impl Value<'_> {
    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }
}

/// One hosting provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRecord {
    pub provider_id: String,
    pub assigned_ips_log10: f64,
    pub hosting_ips_log10: f64,
    pub hosted_domains_log10: f64,
    pub pct_shared: f64,
    pub abuse_count: u64,
    pub country: Option<String>,
    pub price_per_year: Option<f64>,
    pub popularity_index: Option<f64>,
    pub time_in_business: Option<f64>,
    pub ict_dev_index: Option<f64>,
    pub wordpress_use: Option<f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, Field>,
}

impl ProviderRecord {
    /// A record with the required fields set and every optional field missing.
    pub fn new(provider_id: impl Into<String>, structural: [f64; 4], abuse_count: u64) -> Self {
        Self {
            provider_id: provider_id.into(),
            assigned_ips_log10: structural[0],
            hosting_ips_log10: structural[1],
            hosted_domains_log10: structural[2],
            pct_shared: structural[3],
            abuse_count,
            country: None,
            price_per_year: None,
            popularity_index: None,
            time_in_business: None,
            ict_dev_index: None,
            wordpress_use: None,
            extra: BTreeMap::new(),
        }
    }

    /// Cell lookup by column name. `None` means the column is not known at
    /// all; extra columns absent from this record read as `Missing`.
    pub fn get(&self, column: &str) -> Option<Value<'_>> {
        let num = |v: Option<f64>| Some(v.map_or(Value::Missing, Value::Num));
        match column {
            PROVIDER_ID => Some(Value::Text(&self.provider_id)),
            ASSIGNED_IPS => Some(Value::Num(self.assigned_ips_log10)),
            HOSTING_IPS => Some(Value::Num(self.hosting_ips_log10)),
            HOSTED_DOMAINS => Some(Value::Num(self.hosted_domains_log10)),
            PCT_SHARED => Some(Value::Num(self.pct_shared)),
            ABUSE_COUNT => Some(Value::Num(self.abuse_count as f64)),
            COUNTRY => Some(self.country.as_deref().map_or(Value::Missing, Value::Text)),
            PRICE_PER_YEAR => num(self.price_per_year),
            POPULARITY_INDEX => num(self.popularity_index),
            TIME_IN_BUSINESS => num(self.time_in_business),
            ICT_DEV_INDEX => num(self.ict_dev_index),
            WORDPRESS_USE => num(self.wordpress_use),
            other => match self.extra.get(other) {
                Some(Field::Num(v)) => Some(Value::Num(*v)),
                Some(Field::Text(s)) => Some(Value::Text(s)),
                None => Some(Value::Missing),
            },
        }
    }

    pub fn twin_id(&self) -> Option<&str> {
        match self.extra.get(TWIN_ID) {
            Some(Field::Text(s)) => Some(s),
            _ => None,
        }
    }

    /// Unique key within a dataset: the provider id, qualified by the twin
    /// label when present (a provider may belong to two twins).
    pub fn key(&self) -> String {
        match self.twin_id() {
            Some(t) => format!("{t}:{}", self.provider_id),
            None => self.provider_id.clone(),
        }
    }

    fn check_range(&self) -> Result<(), (&'static str, String)> {
        for (col, v) in [
            (ASSIGNED_IPS, self.assigned_ips_log10),
            (HOSTING_IPS, self.hosting_ips_log10),
            (HOSTED_DOMAINS, self.hosted_domains_log10),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err((col, format!("expected a finite value >= 0, got {v}")));
            }
        }
        if !(0.0..=100.0).contains(&self.pct_shared) {
            return Err((
                PCT_SHARED,
                format!("expected a value in [0, 100], got {}", self.pct_shared),
            ));
        }
        for (col, v) in [
            (PRICE_PER_YEAR, self.price_per_year),
            (POPULARITY_INDEX, self.popularity_index),
            (TIME_IN_BUSINESS, self.time_in_business),
            (ICT_DEV_INDEX, self.ict_dev_index),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err((col, format!("expected a finite value >= 0, got {v}")));
                }
            }
        }
        if let Some(w) = self.wordpress_use {
            if !(0.0..=1.0).contains(&w) {
                return Err((
                    WORDPRESS_USE,
                    format!("expected a value in [0, 1], got {w}"),
                ));
            }
        }
        Ok(())
    }
}

/// An ordered collection of providers plus a label for the abuse source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<ProviderRecord>,
    extra_columns: Vec<String>,
    pub source_label: String,
}

impl Dataset {
    /// Builds a dataset, checking key uniqueness. Extra columns are ordered
    /// by first appearance.
    pub fn new(
        records: Vec<ProviderRecord>,
        source_label: impl Into<String>,
    ) -> Result<Self, IngestError> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut extra_columns = Vec::new();
        let mut known = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            let key = r.key();
            if !seen.insert(key.clone()) {
                return Err(IngestError::DuplicateKey { row: i + 1, key });
            }
            for name in r.extra.keys() {
                if known.insert(name.clone()) {
                    extra_columns.push(name.clone());
                }
            }
        }
        Ok(Self {
            records,
            extra_columns,
            source_label: source_label.into(),
        })
    }

    pub fn records(&self) -> &[ProviderRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extra_columns(&self) -> &[String] {
        &self.extra_columns
    }

    pub fn has_column(&self, name: &str) -> bool {
        REQUIRED_FIELDS.contains(&name)
            || OPTIONAL_FIELDS.contains(&name)
            || self.extra_columns.iter().any(|c| c == name)
    }

    /// All column names in serialization order.
    pub fn columns(&self) -> Vec<String> {
        REQUIRED_FIELDS
            .iter()
            .chain(OPTIONAL_FIELDS.iter())
            .map(|s| s.to_string())
            .chain(self.extra_columns.iter().cloned())
            .collect()
    }

    /// A new dataset holding the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, IngestError> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Dataset::new(records, self.source_label.clone())
    }

    pub fn value(&self, row: usize, column: &str) -> Result<Value<'_>, IngestError> {
        if !self.has_column(column) {
            return Err(IngestError::UnknownColumn(column.to_string()));
        }
        Ok(self.records[row].get(column).unwrap_or(Value::Missing))
    }

    /// A numeric column; text cells are an error.
    pub fn numeric_column(&self, column: &str) -> Result<Vec<Option<f64>>, IngestError> {
        if !self.has_column(column) {
            return Err(IngestError::UnknownColumn(column.to_string()));
        }
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| match r.get(column).unwrap_or(Value::Missing) {
                Value::Num(v) => Ok(Some(v)),
                Value::Missing => Ok(None),
                Value::Text(s) => Err(IngestError::InvalidCell {
                    row: i + 1,
                    column: column.to_string(),
                    message: format!("non-numeric value `{s}`"),
                }),
            })
            .collect()
    }

    /// A column read as factor labels; numbers are rendered as text.
    pub fn text_column(&self, column: &str) -> Result<Vec<Option<String>>, IngestError> {
        if !self.has_column(column) {
            return Err(IngestError::UnknownColumn(column.to_string()));
        }
        Ok(self
            .records
            .iter()
            .map(|r| match r.get(column).unwrap_or(Value::Missing) {
                Value::Num(v) => Some(format_num(v)),
                Value::Text(s) => Some(s.to_string()),
                Value::Missing => None,
            })
            .collect())
    }
}

/// Maps canonical field names onto header names in a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    mapping: BTreeMap<String, String>,
    pub delimiter: u8,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            mapping: BTreeMap::new(),
            delimiter: b',',
        }
    }
}

impl Schema {
    /// Parses `field=column` pairs separated by commas.
    pub fn parse(spec: &str) -> Result<Self, IngestError> {
        let mut schema = Schema::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (field, column) = part
                .split_once('=')
                .ok_or_else(|| IngestError::InvalidSchema(part.to_string()))?;
            let (field, column) = (field.trim(), column.trim());
            if field.is_empty() || column.is_empty() {
                return Err(IngestError::InvalidSchema(part.to_string()));
            }
            schema.mapping.insert(field.to_string(), column.to_string());
        }
        Ok(schema)
    }

    pub fn with_delimiter(mut self, delimiter: u8) -> Self {
        self.delimiter = delimiter;
        self
    }

    pub fn map(mut self, field: impl Into<String>, column: impl Into<String>) -> Self {
        self.mapping.insert(field.into(), column.into());
        self
    }

    /// Header name used for `field`; identity when unmapped.
    pub fn column_for<'a>(&'a self, field: &'a str) -> &'a str {
        self.mapping.get(field).map_or(field, String::as_str)
    }
}

pub fn load_table(path: &Path, schema: &Schema) -> Result<Dataset, IngestError> {
    let file = std::fs::File::open(path)?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_table(file, schema, label)
}

pub fn read_table<R: Read>(
    reader: R,
    schema: &Schema,
    source_label: impl Into<String>,
) -> Result<Dataset, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let position = |name: &str| headers.iter().position(|h| h == name);

    let mut required = [0usize; 6];
    for (slot, field) in required.iter_mut().zip(REQUIRED_FIELDS) {
        let column = schema.column_for(field);
        *slot = position(column).ok_or_else(|| IngestError::MissingColumn {
            field: field.to_string(),
            column: column.to_string(),
        })?;
    }
    let optional: Vec<Option<usize>> = OPTIONAL_FIELDS
        .iter()
        .map(|f| position(schema.column_for(f)))
        .collect();
    let mapped: BTreeSet<usize> = required
        .iter()
        .copied()
        .chain(optional.iter().flatten().copied())
        .collect();
    let extras: Vec<(usize, &String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !mapped.contains(i))
        .collect();

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, row) in rdr.records().enumerate() {
        let row_no = idx + 1;
        let row = row?;
        let cell = |i: usize| row.get(i).unwrap_or("").trim();
        let invalid = |i: usize, message: String| IngestError::InvalidCell {
            row: row_no,
            column: headers[i].clone(),
            message,
        };
        let real = |i: usize| -> Result<Option<f64>, IngestError> {
            let raw = cell(i);
            if raw.is_empty() {
                return Ok(None);
            }
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(invalid(i, format!("non-numeric value `{raw}`"))),
            }
        };
        let required_real = |i: usize| -> Result<f64, IngestError> {
            real(i)?.ok_or_else(|| invalid(i, "missing value in required column".to_string()))
        };

        let provider_id = cell(required[0]).to_string();
        if provider_id.is_empty() {
            return Err(invalid(required[0], "empty provider id".to_string()));
        }
        let abuse_raw = cell(required[5]);
        let abuse_count = abuse_raw.parse::<u64>().map_err(|_| {
            invalid(
                required[5],
                format!("expected a non-negative integer count, got `{abuse_raw}`"),
            )
        })?;

        let opt_real =
            |k: usize| -> Result<Option<f64>, IngestError> { optional[k].map_or(Ok(None), real) };
        let mut record = ProviderRecord {
            provider_id,
            assigned_ips_log10: required_real(required[1])?,
            hosting_ips_log10: required_real(required[2])?,
            hosted_domains_log10: required_real(required[3])?,
            pct_shared: required_real(required[4])?,
            abuse_count,
            country: optional[0]
                .map(cell)
                .filter(|s| !s.is_empty())
                .map(str::to_string),
            price_per_year: opt_real(1)?,
            popularity_index: opt_real(2)?,
            time_in_business: opt_real(3)?,
            ict_dev_index: opt_real(4)?,
            wordpress_use: opt_real(5)?,
            extra: BTreeMap::new(),
        };
        for &(i, name) in &extras {
            let raw = cell(i);
            if !raw.is_empty() {
                record.extra.insert(name.clone(), Field::parse(raw));
            }
        }
        if let Err((column, message)) = record.check_range() {
            return Err(IngestError::InvalidCell {
                row: row_no,
                column: schema.column_for(column).to_string(),
                message,
            });
        }
        let key = record.key();
        if !seen.insert(key.clone()) {
            return Err(IngestError::DuplicateKey { row: row_no, key });
        }
        records.push(record);
    }

    let mut d = Dataset::new(records, source_label)?;
    // keep header order for extras, including all-empty columns
    d.extra_columns = extras.iter().map(|(_, n)| (*n).clone()).collect();
    Ok(d)
}

/// Writes canonical columns then extras; missing values as empty cells.
pub fn write_table<W: Write>(d: &Dataset, writer: W, delimiter: u8) -> Result<(), IngestError> {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(writer);
    let columns = d.columns();
    wtr.write_record(&columns)?;
    for r in d.records() {
        let row: Vec<String> = columns
            .iter()
            .map(|c| match c.as_str() {
                ABUSE_COUNT => r.abuse_count.to_string(),
                other => match r.get(other) {
                    Some(Value::Num(v)) => format_num(v),
                    Some(Value::Text(s)) => s.to_string(),
                    _ => String::new(),
                },
            })
            .collect();
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_table(d: &Dataset, path: &Path, delimiter: u8) -> Result<(), IngestError> {
    let file = std::fs::File::create(path)?;
    write_table(d, std::io::BufWriter::new(file), delimiter)
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_num(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub column: String,
    pub n: usize,
    pub min: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// Sample standard deviation (n - 1 denominator); 0 when `n == 1`.
    pub sd: f64,
    pub single_value: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub n_rows: usize,
    pub columns: Vec<ColumnSummary>,
}

/// Summary of a slice of values. Statistics are accumulated over the sorted
/// values so the result does not depend on row order.
pub fn summarize_values(column: &str, values: &[f64]) -> Result<ColumnSummary, IngestError> {
    if values.is_empty() {
        return Err(IngestError::EmptyColumn(column.to_string()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let sd = if n > 1 {
        (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(ColumnSummary {
        column: column.to_string(),
        n,
        min: sorted[0],
        // guards against the mean drifting a ulp outside [min, max]
        mean: mean.clamp(sorted[0], sorted[n - 1]),
        median,
        max: sorted[n - 1],
        sd,
        single_value: n == 1,
    })
}

pub fn describe(d: &Dataset, columns: &[&str]) -> Result<SummaryTable, IngestError> {
    let columns = columns
        .iter()
        .map(|c| {
            let values: Vec<f64> = d.numeric_column(c)?.into_iter().flatten().collect();
            summarize_values(c, &values)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SummaryTable {
        n_rows: d.len(),
        columns,
    })
}

impl SummaryTable {
    pub fn to_markdown(&self) -> String {
        let mut out = format!("n = {}\n\n", self.n_rows);
        out.push_str("| variable | n | min | mean | median | max | sd |\n");
        out.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
        for c in &self.columns {
            let sd = if c.single_value {
                format!("{:.3} (single value)", c.sd)
            } else {
                format!("{:.3}", c.sd)
            };
            let _ = writeln!(
                out,
                "| {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {} |",
                c.column, c.n, c.min, c.mean, c.median, c.max, sd
            );
        }
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W, delimiter: u8) -> Result<(), IngestError> {
        let mut wtr = csv::WriterBuilder::new()
            .delimiter(delimiter)
            .from_writer(writer);
        wtr.write_record([
            "variable",
            "n",
            "min",
            "mean",
            "median",
            "max",
            "sd",
            "single_value",
        ])?;
        for c in &self.columns {
            wtr.write_record([
                c.column.clone(),
                c.n.to_string(),
                format_num(c.min),
                format_num(c.mean),
                format_num(c.median),
                format_num(c.max),
                format_num(c.sd),
                c.single_value.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
