//! Longitudinal trial data with monotone missingness, plus wide-CSV
//! ingestion and validation.
//!
//! Monotone missingness is encoded structurally: a subject's outcomes are
//! stored as the observed prefix `y[0..k]`, so "once missing, always
//! missing" cannot be violated after validation. Ingestion is where the
//! monotone shape is enforced; a row observed-missing-observed is rejected
//! with its row index rather than coerced.
//!
//! Wide CSV layout: header `x1..xp,group,y1..yT`, one row per subject,
//! groups labelled `1` (control) and `2` (treatment), missing outcomes as
//! empty cells or the literal `NA` (case-sensitive). Covariates must be
//! complete. A long-to-wide converter is provided for `subject,group,
//! x1..xp,visit,y` layouts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("row {row}: cannot parse {column} value '{value}'")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: unknown group label '{value}' (expected 1 or 2)")]
    UnknownGroupLabel { row: usize, value: String },
    #[error("row {row}: baseline outcome y1 is missing")]
    MissingBaseline { row: usize },
    #[error("row {row}: non-monotone missingness, visit {visit} observed after a missing visit")]
    MonotonicityViolation { row: usize, visit: usize },
    #[error("row {row}: covariate {column} is missing (covariates must be complete)")]
    MissingCovariate { row: usize, column: String },
    #[error("group {0} has no subjects")]
    EmptyGroup(Group),
    #[error("subject {subject}: {reason}")]
    InvalidSubject { subject: usize, reason: String },
    #[error("long format: {0}")]
    LongFormat(String),
}

/// Treatment arm. Serialized as 1 (control) / 2 (treatment) in CSV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Control,
    Treatment,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::Control, Group::Treatment];

    /// 0 for control, 1 for treatment; indexes per-group arrays.
    pub fn index(self) -> usize {
        match self {
            Group::Control => 0,
            Group::Treatment => 1,
        }
    }

    /// The 1/2 label used in data files.
    pub fn label(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn from_label(s: &str) -> Option<Group> {
        match s.trim() {
            "1" => Some(Group::Control),
            "2" => Some(Group::Treatment),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Control => write!(f, "control"),
            Group::Treatment => write!(f, "treatment"),
        }
    }
}

/// One subject: complete baseline covariates, arm, and the observed prefix
/// of the outcome trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub covariates: DVector<f64>,
    pub group: Group,
    /// Observed outcomes `y[0..k]`; visits `k..T` are missing.
    pub outcomes: Vec<f64>,
}

impl Subject {
    /// Number of observed visits (the dropout pattern index `k`).
    pub fn n_observed(&self) -> usize {
        self.outcomes.len()
    }

    /// Covariate vector extended with a leading intercept, `(1, x')'`.
    pub fn design_row(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.covariates.len() + 1);
        v[0] = 1.0;
        v.rows_mut(1, self.covariates.len())
            .copy_from(&self.covariates);
        v
    }
}

/// Dropout pattern of one subject: the last observed visit (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutPattern {
    pub last_observed: usize,
    pub is_complete: bool,
}

/// A validated longitudinal trial dataset. Immutable after construction and
/// safe to share read-only across parallel workers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    n_visits: usize,
    n_covariates: usize,
    subjects: Vec<Subject>,
}

impl TrialDataset {
    pub fn new(
        n_visits: usize,
        n_covariates: usize,
        subjects: Vec<Subject>,
    ) -> Result<Self, DataError> {
        for (i, s) in subjects.iter().enumerate() {
            if s.covariates.len() != n_covariates {
                return Err(DataError::InvalidSubject {
                    subject: i,
                    reason: format!(
                        "expected {n_covariates} covariates, got {}",
                        s.covariates.len()
                    ),
                });
            }
            if s.outcomes.is_empty() {
                return Err(DataError::InvalidSubject {
                    subject: i,
                    reason: "baseline outcome missing".into(),
                });
            }
            if s.outcomes.len() > n_visits {
                return Err(DataError::InvalidSubject {
                    subject: i,
                    reason: format!(
                        "{} observed outcomes exceed {n_visits} visits",
                        s.outcomes.len()
                    ),
                });
            }
            if s.covariates.iter().chain(s.outcomes.iter()).any(|x| !x.is_finite()) {
                return Err(DataError::InvalidSubject {
                    subject: i,
                    reason: "non-finite value".into(),
                });
            }
        }
        for g in Group::ALL {
            if !subjects.iter().any(|s| s.group == g) {
                return Err(DataError::EmptyGroup(g));
            }
        }
        Ok(Self {
            n_visits,
            n_covariates,
            subjects,
        })
    }

    pub fn n_visits(&self) -> usize {
        self.n_visits
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn subject(&self, i: usize) -> &Subject {
        &self.subjects[i]
    }

    pub fn pattern_of(&self, i: usize) -> DropoutPattern {
        let k = self.subjects[i].n_observed();
        DropoutPattern {
            last_observed: k,
            is_complete: k == self.n_visits,
        }
    }

    /// Subject counts per (group, last-observed-visit); the counts partition
    /// the dataset.
    pub fn pattern_counts(&self) -> BTreeMap<(Group, usize), usize> {
        let mut counts = BTreeMap::new();
        for (i, s) in self.subjects.iter().enumerate() {
            *counts
                .entry((s.group, self.pattern_of(i).last_observed))
                .or_insert(0) += 1;
        }
        counts
    }

    pub fn group_sizes(&self) -> [usize; 2] {
        let mut n = [0usize; 2];
        for s in &self.subjects {
            n[s.group.index()] += 1;
        }
        n
    }

    /// Loads a wide-format CSV (see module docs for the layout).
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(false)
            .comment(Some(b'#'))
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let schema = Schema::from_header(header.iter())?;
        let mut subjects = Vec::new();
        for (row_idx, record) in rdr.records().enumerate() {
            let record = record?;
            let row = row_idx + 1;
            subjects.push(schema.parse_row(&record, row)?);
        }
        Self::new(schema.n_visits, schema.n_covariates, subjects)
    }

    /// Loads a long-format CSV (`subject,group,x1..xp,visit,y`) by pivoting
    /// to wide. Visits absent from the file are treated as missing.
    pub fn load_csv_long(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        Self::from_long_csv_reader(file)
    }

    pub fn from_long_csv_reader<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        let find = |name: &str| {
            cols.iter()
                .position(|c| *c == name)
                .ok_or_else(|| DataError::MalformedHeader(format!("missing column '{name}'")))
        };
        let c_subject = find("subject")?;
        let c_group = find("group")?;
        let c_visit = find("visit")?;
        let c_y = find("y")?;
        let mut x_cols = Vec::new();
        for (i, c) in cols.iter().enumerate() {
            if let Some(j) = parse_indexed(c, 'x') {
                x_cols.push((j, i));
            }
        }
        x_cols.sort_unstable();
        for (expect, (j, _)) in x_cols.iter().enumerate() {
            if *j != expect + 1 {
                return Err(DataError::MalformedHeader(
                    "covariate columns must be contiguous x1..xp".into(),
                ));
            }
        }

        struct Acc {
            group: Group,
            covariates: Vec<f64>,
            visits: BTreeMap<usize, f64>,
            first_row: usize,
        }
        let mut order: Vec<String> = Vec::new();
        let mut acc: BTreeMap<String, Acc> = BTreeMap::new();
        let mut max_visit = 0usize;
        for (row_idx, record) in rdr.records().enumerate() {
            let record = record?;
            let row = row_idx + 1;
            let id = record.get(c_subject).unwrap_or("").to_string();
            let group = Group::from_label(record.get(c_group).unwrap_or("")).ok_or_else(|| {
                DataError::UnknownGroupLabel {
                    row,
                    value: record.get(c_group).unwrap_or("").to_string(),
                }
            })?;
            let visit: usize = record
                .get(c_visit)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| DataError::BadCell {
                    row,
                    column: "visit".into(),
                    value: record.get(c_visit).unwrap_or("").to_string(),
                })?;
            if visit == 0 {
                return Err(DataError::BadCell {
                    row,
                    column: "visit".into(),
                    value: "0".into(),
                });
            }
            max_visit = max_visit.max(visit);
            let mut covariates = Vec::with_capacity(x_cols.len());
            for (j, col) in &x_cols {
                let cell = record.get(*col).unwrap_or("").trim();
                if cell.is_empty() || cell == "NA" {
                    return Err(DataError::MissingCovariate {
                        row,
                        column: format!("x{j}"),
                    });
                }
                covariates.push(cell.parse().map_err(|_| DataError::BadCell {
                    row,
                    column: format!("x{j}"),
                    value: cell.to_string(),
                })?);
            }
            let entry = acc.entry(id.clone()).or_insert_with(|| {
                order.push(id.clone());
                Acc {
                    group,
                    covariates: covariates.clone(),
                    visits: BTreeMap::new(),
                    first_row: row,
                }
            });
            if entry.group != group {
                return Err(DataError::LongFormat(format!(
                    "subject '{id}' has inconsistent group labels"
                )));
            }
            let cell = record.get(c_y).unwrap_or("").trim();
            if cell.is_empty() || cell == "NA" {
                continue; // explicit missing row
            }
            let y: f64 = cell.parse().map_err(|_| DataError::BadCell {
                row,
                column: "y".into(),
                value: cell.to_string(),
            })?;
            if entry.visits.insert(visit, y).is_some() {
                return Err(DataError::LongFormat(format!(
                    "subject '{id}' has duplicate visit {visit}"
                )));
            }
        }
        let mut subjects = Vec::with_capacity(order.len());
        for id in &order {
            let a = &acc[id];
            let mut outcomes = Vec::new();
            for visit in 1..=max_visit {
                if let Some(&y) = a.visits.get(&visit) {
                    if outcomes.len() + 1 != visit {
                        return Err(DataError::MonotonicityViolation {
                            row: a.first_row,
                            visit,
                        });
                    }
                    outcomes.push(y);
                }
            }
            if outcomes.is_empty() {
                return Err(DataError::MissingBaseline { row: a.first_row });
            }
            subjects.push(Subject {
                covariates: DVector::from_vec(a.covariates.clone()),
                group: a.group,
                outcomes,
            });
        }
        Self::new(max_visit, x_cols.len(), subjects)
    }

    /// Writes the wide CSV layout; numeric text uses the shortest
    /// round-trippable representation, so `write` then `load` is identity.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let file = std::fs::File::create(path)?;
        self.to_csv_writer(file)
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = Vec::new();
        for j in 1..=self.n_covariates {
            header.push(format!("x{j}"));
        }
        header.push("group".into());
        for k in 1..=self.n_visits {
            header.push(format!("y{k}"));
        }
        wtr.write_record(&header)?;
        for s in &self.subjects {
            let mut rec: Vec<String> = s.covariates.iter().map(|x| format!("{x}")).collect();
            rec.push(s.group.label().to_string());
            for k in 0..self.n_visits {
                rec.push(match s.outcomes.get(k) {
                    Some(y) => format!("{y}"),
                    None => "NA".into(),
                });
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

struct Schema {
    n_covariates: usize,
    n_visits: usize,
    x_cols: Vec<usize>,
    group_col: usize,
    y_cols: Vec<usize>,
}

fn parse_indexed(name: &str, prefix: char) -> Option<usize> {
    let rest = name.strip_prefix(prefix)?;
    let idx: usize = rest.parse().ok()?;
    (idx > 0).then_some(idx)
}

impl Schema {
    fn from_header<'a>(names: impl Iterator<Item = &'a str>) -> Result<Self, DataError> {
        let mut xs = BTreeMap::new();
        let mut ys = BTreeMap::new();
        let mut group_col = None;
        for (col, name) in names.enumerate() {
            if name == "group" {
                group_col = Some(col);
            } else if let Some(j) = parse_indexed(name, 'x') {
                xs.insert(j, col);
            } else if let Some(k) = parse_indexed(name, 'y') {
                ys.insert(k, col);
            } else {
                return Err(DataError::MalformedHeader(format!(
                    "unexpected column '{name}'"
                )));
            }
        }
        let group_col =
            group_col.ok_or_else(|| DataError::MalformedHeader("missing 'group' column".into()))?;
        if ys.is_empty() {
            return Err(DataError::MalformedHeader("no outcome columns y1..yT".into()));
        }
        let contiguous = |m: &BTreeMap<usize, usize>, what: &str| -> Result<Vec<usize>, DataError> {
            let mut cols = Vec::with_capacity(m.len());
            for (expect, (&idx, &col)) in m.iter().enumerate() {
                if idx != expect + 1 {
                    return Err(DataError::MalformedHeader(format!(
                        "{what} columns must be contiguous from 1, missing {what}{}",
                        expect + 1
                    )));
                }
                cols.push(col);
            }
            Ok(cols)
        };
        let x_cols = contiguous(&xs, "x")?;
        let y_cols = contiguous(&ys, "y")?;
        Ok(Schema {
            n_covariates: x_cols.len(),
            n_visits: y_cols.len(),
            x_cols,
            group_col,
            y_cols,
        })
    }

    fn parse_row(&self, record: &csv::StringRecord, row: usize) -> Result<Subject, DataError> {
        let mut covariates = Vec::with_capacity(self.n_covariates);
        for (j, &col) in self.x_cols.iter().enumerate() {
            let cell = record.get(col).unwrap_or("").trim();
            if cell.is_empty() || cell == "NA" {
                return Err(DataError::MissingCovariate {
                    row,
                    column: format!("x{}", j + 1),
                });
            }
            covariates.push(cell.parse().map_err(|_| DataError::BadCell {
                row,
                column: format!("x{}", j + 1),
                value: cell.to_string(),
            })?);
        }
        let group_cell = record.get(self.group_col).unwrap_or("");
        let group = Group::from_label(group_cell).ok_or_else(|| DataError::UnknownGroupLabel {
            row,
            value: group_cell.to_string(),
        })?;
        let mut outcomes = Vec::with_capacity(self.n_visits);
        let mut dropped = false;
        for (k, &col) in self.y_cols.iter().enumerate() {
            let cell = record.get(col).unwrap_or("").trim();
            if cell.is_empty() || cell == "NA" {
                if k == 0 {
                    return Err(DataError::MissingBaseline { row });
                }
                dropped = true;
                continue;
            }
            if dropped {
                return Err(DataError::MonotonicityViolation { row, visit: k + 1 });
            }
            outcomes.push(cell.parse().map_err(|_| DataError::BadCell {
                row,
                column: format!("y{}", k + 1),
                value: cell.to_string(),
            })?);
        }
        Ok(Subject {
            covariates: DVector::from_vec(covariates),
            group,
            outcomes,
        })
    }
}
