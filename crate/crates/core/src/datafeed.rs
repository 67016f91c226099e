//! Dataset ingestion and the column → physical-variable mapping engine.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Address, Frame};
use crate::core_node::{CoreError, CoreNode};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("malformed CSV at line {line}, column {column:?}: {detail}")]
    MalformedCsv {
        line: u64,
        column: String,
        detail: String,
    },
    #[error("dataset has no data rows")]
    EmptyDataset,
    #[error("no column named {0:?}")]
    UnknownColumn(String),
    #[error("degenerate domain [{min}, {max}] for column {column:?}")]
    DegenerateDomain { column: String, min: f64, max: f64 },
    #[error("invalid mapping file: {0}")]
    BadMapping(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum MapError {
    #[error("{x} lies outside the domain [{min}, {max}]")]
    OutOfDomain { x: f64, min: f64, max: f64 },
    #[error("domain [{min}, {max}] is empty")]
    DegenerateDomain { min: f64, max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub min: f64,
    pub max: f64,
}

impl Domain {
    pub fn new(min: f64, max: f64) -> Self {
        Domain { min, max }
    }

    pub fn is_degenerate(&self) -> bool {
        self.min.partial_cmp(&self.max) != Some(std::cmp::Ordering::Less) || !self.min.is_finite() || !self.max.is_finite()
    }
}

/// Linear map of `x` from `domain` onto the byte range `[vmin, vmax]`,
/// rounding half-up. With `clamp`, values outside the domain saturate.
pub fn normalize(x: f64, domain: Domain, range: (u8, u8), clamp: bool) -> Result<u8, MapError> {
    let Domain { min, max } = domain;
    if domain.is_degenerate() {
        return Err(MapError::DegenerateDomain { min, max });
    }
    let (vmin, vmax) = range;
    let inside = x >= min && x <= max;
    if !inside && (!clamp || x.is_nan()) {
        return Err(MapError::OutOfDomain { x, min, max });
    }
    let x = x.clamp(min, max);
    let span = f64::from(vmax.saturating_sub(vmin));
    // multiply before dividing so exact halves stay exact
    let offset = ((x - min) * span / (max - min) + 0.5).floor();
    Ok(vmin + offset.clamp(0.0, span) as u8)
}

#[derive(Debug, Clone)]
enum ColumnKind {
    Numeric { values: Vec<f64>, observed: Domain },
    Label,
}

#[derive(Debug, Clone)]
struct Column {
    name: String,
    kind: ColumnKind,
}

/// A parsed CSV table. Columns whose every cell is a finite number are
/// numeric; the rest are kept as labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    columns: Vec<Column>,
    cells: Vec<Vec<String>>,
}

pub fn read_csv<R: Read>(source: R) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let malformed = |e: csv::Error| {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        DataError::MalformedCsv {
            line,
            column: String::new(),
            detail: e.to_string(),
        }
    };
    let headers: Vec<String> = reader
        .headers()
        .map_err(malformed)?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(DataError::MalformedCsv {
            line: 1,
            column: String::new(),
            detail: "missing header row".into(),
        });
    }
    let mut cells = Vec::new();
    for record in reader.records() {
        let record = record.map_err(malformed)?;
        cells.push(record.iter().map(str::to_string).collect::<Vec<_>>());
    }
    if cells.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let columns = headers
        .into_iter()
        .enumerate()
        .map(|(c, name)| {
            let parsed: Option<Vec<f64>> = cells
                .iter()
                .map(|row| parse_cell(&row[c]))
                .collect();
            let kind = match parsed {
                Some(values) => {
                    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    ColumnKind::Numeric {
                        values,
                        observed: Domain::new(min, max),
                    }
                }
                None => ColumnKind::Label,
            };
            Column { name, kind }
        })
        .collect();
    Ok(Dataset { columns, cells })
}

fn parse_cell(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|x| x.is_finite())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn is_numeric(&self, column: &str) -> bool {
        self.find(column)
            .is_some_and(|(_, c)| matches!(c.kind, ColumnKind::Numeric { .. }))
    }

    fn find(&self, column: &str) -> Option<(usize, &Column)> {
        self.columns.iter().enumerate().find(|(_, c)| c.name == column)
    }

    /// The numeric series of a column. For a label column, reports the first
    /// cell that failed to parse (line numbers count the header as line 1).
    pub fn numeric(&self, column: &str) -> Result<&[f64], DataError> {
        let (pos, col) = self
            .find(column)
            .ok_or_else(|| DataError::UnknownColumn(column.to_string()))?;
        match &col.kind {
            ColumnKind::Numeric { values, .. } => Ok(values),
            ColumnKind::Label => {
                let (row, cell) = self
                    .cells
                    .iter()
                    .enumerate()
                    .map(|(r, cells)| (r, &cells[pos]))
                    .find(|(_, cell)| parse_cell(cell).is_none())
                    .expect("label column has a non-numeric cell");
                Err(DataError::MalformedCsv {
                    line: row as u64 + 2,
                    column: column.to_string(),
                    detail: format!("{cell:?} is not a finite number"),
                })
            }
        }
    }

    pub fn observed_domain(&self, column: &str) -> Result<Domain, DataError> {
        self.numeric(column)?;
        match &self.find(column).expect("checked").1.kind {
            ColumnKind::Numeric { observed, .. } => Ok(*observed),
            ColumnKind::Label => unreachable!(),
        }
    }

    pub fn cell(&self, row: usize, column: &str) -> Option<&str> {
        let (pos, _) = self.find(column)?;
        self.cells.get(row).map(|r| r[pos].as_str())
    }
}

/// One binding of a dataset column to a module variable, as written in a
/// mapping file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingRule {
    pub column: String,
    pub address: Address,
    pub var_index: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_max: Option<f64>,
    #[serde(default = "default_clamp")]
    pub clamp: bool,
}

fn default_clamp() -> bool {
    true
}

impl MappingRule {
    pub fn new(column: impl Into<String>, address: Address, var_index: u8) -> Self {
        MappingRule {
            column: column.into(),
            address,
            var_index,
            domain_min: None,
            domain_max: None,
            clamp: true,
        }
    }

    pub fn with_domain(mut self, min: f64, max: f64) -> Self {
        self.domain_min = Some(min);
        self.domain_max = Some(max);
        self
    }
}

pub fn parse_mapping(text: &str) -> Result<Vec<MappingRule>, DataError> {
    serde_json::from_str(text).map_err(|e| DataError::BadMapping(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainSource {
    Declared,
    Observed,
    /// One bound declared, the other taken from the data.
    Mixed,
}

/// A rule checked against a dataset, with its domain fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRule {
    pub rule: MappingRule,
    pub domain: Domain,
    pub source: DomainSource,
}

pub fn resolve_rules(dataset: &Dataset, rules: &[MappingRule]) -> Result<Vec<ResolvedRule>, DataError> {
    rules
        .iter()
        .map(|rule| {
            let observed = dataset.observed_domain(&rule.column)?;
            let source = match (rule.domain_min, rule.domain_max) {
                (Some(_), Some(_)) => DomainSource::Declared,
                (None, None) => DomainSource::Observed,
                _ => DomainSource::Mixed,
            };
            let domain = Domain::new(
                rule.domain_min.unwrap_or(observed.min),
                rule.domain_max.unwrap_or(observed.max),
            );
            if domain.is_degenerate() {
                return Err(DataError::DegenerateDomain {
                    column: rule.column.clone(),
                    min: domain.min,
                    max: domain.max,
                });
            }
            Ok(ResolvedRule {
                rule: rule.clone(),
                domain,
                source,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum SkipReason {
    Core(CoreError),
    Map(MapError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleDiagnostic {
    pub rule: usize,
    pub address: Address,
    pub var_index: u8,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowOutcome {
    pub frames: Vec<Frame>,
    pub diagnostics: Vec<RuleDiagnostic>,
}

/// Builds one set-value frame per rule for row `row`, in rule order. Rules
/// whose target has vanished are skipped with a diagnostic.
pub fn apply_row(dataset: &Dataset, row: usize, rules: &[ResolvedRule], core: &CoreNode) -> RowOutcome {
    let mut out = RowOutcome::default();
    for (i, r) in rules.iter().enumerate() {
        let Ok(series) = dataset.numeric(&r.rule.column) else {
            continue;
        };
        let Some(&x) = series.get(row) else {
            continue;
        };
        let skip = |reason| RuleDiagnostic {
            rule: i,
            address: r.rule.address,
            var_index: r.rule.var_index,
            reason,
        };
        let var = match core.entry(r.rule.address) {
            None => {
                out.diagnostics
                    .push(skip(SkipReason::Core(CoreError::UnknownModule(r.rule.address))));
                continue;
            }
            Some(entry) => match entry.variable(r.rule.var_index) {
                Some(v) => *v,
                None => {
                    out.diagnostics.push(skip(SkipReason::Core(CoreError::UnknownVariable {
                        address: r.rule.address,
                        var_index: r.rule.var_index,
                    })));
                    continue;
                }
            },
        };
        let value = match normalize(x, r.domain, (var.min, var.max), r.rule.clamp) {
            Ok(v) => v,
            Err(e) => {
                out.diagnostics.push(skip(SkipReason::Map(e)));
                continue;
            }
        };
        match core.set_variable(r.rule.address, r.rule.var_index, value) {
            Ok(frame) => out.frames.push(frame),
            Err(e) => out.diagnostics.push(skip(SkipReason::Core(e))),
        }
    }
    out
}
