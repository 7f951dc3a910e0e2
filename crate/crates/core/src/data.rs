//! Panel dataset, indicator schema and fraud labels.
//!
//! A panel is keyed by `(company_id, year)`. Each row carries one value per
//! schema feature plus a missingness mask; missing cells hold `NaN` in
//! `values` and `true` in `missing`. Columns are always stored in schema
//! entry order, and [`PanelDataset::canonicalize`] puts that order into the
//! Financial, ESG, InternalControl layout the image transform relies on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level1 {
    Financial,
    #[serde(rename = "ESG")]
    Esg,
    InternalControl,
}

impl Level1 {
    pub fn rank(self) -> usize {
        match self {
            Level1::Financial => 0,
            Level1::Esg => 1,
            Level1::InternalControl => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level1::Financial => "Financial",
            Level1::Esg => "ESG",
            Level1::InternalControl => "InternalControl",
        }
    }
}

impl fmt::Display for Level1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level1 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "Financial" => Ok(Level1::Financial),
            "ESG" | "Esg" => Ok(Level1::Esg),
            "InternalControl" => Ok(Level1::InternalControl),
            other => Err(Error::Schema(format!("unknown level1 group `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    Continuous,
    Categorical,
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "Continuous" => Ok(FeatureKind::Continuous),
            "Categorical" => Ok(FeatureKind::Categorical),
            other => Err(Error::Schema(format!("unknown feature kind `{other}`"))),
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Continuous => "Continuous",
            FeatureKind::Categorical => "Categorical",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub id: String,
    pub level1: Level1,
    pub level2: String,
    pub kind: FeatureKind,
    /// Canonical left-to-right position.
    pub order: usize,
}

/// The three-level indicator hierarchy. Entries are listed in the column
/// order of the dataset that owns the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSchema {
    entries: Vec<FeatureSpec>,
}

impl IndicatorSchema {
    /// Builds a schema from a listing, assigning `order` from
    /// [`ordered_columns`].
    pub fn from_listing(listing: Vec<(String, Level1, String, FeatureKind)>) -> Result<Self> {
        if listing.is_empty() {
            return Err(Error::Schema("schema has no features".into()));
        }
        let mut seen = BTreeSet::new();
        for (id, ..) in &listing {
            if !seen.insert(id.clone()) {
                return Err(Error::Schema(format!("duplicate feature `{id}`")));
            }
        }
        let mut entries: Vec<FeatureSpec> = listing
            .into_iter()
            .map(|(id, level1, level2, kind)| FeatureSpec {
                id,
                level1,
                level2,
                kind,
                order: 0,
            })
            .collect();
        let perm = order_entries(&entries)?;
        for (pos, &idx) in perm.iter().enumerate() {
            entries[idx].order = pos;
        }
        Ok(IndicatorSchema { entries })
    }

    pub fn entries(&self) -> &[FeatureSpec] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    /// True when entry `i` has `order == i`, i.e. columns are already laid
    /// out canonically.
    pub fn is_canonical(&self) -> bool {
        self.entries.iter().enumerate().all(|(i, e)| e.order == i)
    }

    /// Checks the type invariants: `order` is a permutation, level1 groups
    /// appear Financial, ESG, InternalControl along the order, and each level2
    /// name is contiguous within its level1 group.
    pub fn validate(&self) -> Result<()> {
        let n = self.entries.len();
        let mut by_order = vec![usize::MAX; n];
        for (i, e) in self.entries.iter().enumerate() {
            if e.order >= n || by_order[e.order] != usize::MAX {
                return Err(Error::Schema("order is not a permutation".into()));
            }
            by_order[e.order] = i;
        }
        let ordered: Vec<&FeatureSpec> = by_order.iter().map(|&i| &self.entries[i]).collect();
        check_grouping(&ordered)
    }

    /// Returns the schema restricted to `keep` (indices into entries), with
    /// orders recompacted.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let mut entries: Vec<FeatureSpec> = keep.iter().map(|&i| self.entries[i].clone()).collect();
        let mut idx: Vec<usize> = (0..entries.len()).collect();
        idx.sort_by_key(|&i| entries[i].order);
        for (pos, &i) in idx.iter().enumerate() {
            entries[i].order = pos;
        }
        if entries.is_empty() {
            return Err(Error::Schema("no features left".into()));
        }
        Ok(IndicatorSchema { entries })
    }

    /// Column boundaries between adjacent canonical columns: `(j, level)`
    /// means a boundary sits between columns `j-1` and `j`. Only meaningful
    /// on a canonical schema.
    pub fn group_boundaries(&self) -> Vec<(usize, BoundaryLevel)> {
        let mut out = Vec::new();
        for j in 1..self.entries.len() {
            let (a, b) = (&self.entries[j - 1], &self.entries[j]);
            if a.level1 != b.level1 {
                out.push((j, BoundaryLevel::Level1));
            } else if a.level2 != b.level2 {
                out.push((j, BoundaryLevel::Level2));
            }
        }
        out
    }

    /// Contiguous level2 groups as `(level1, level2, start, end)` column
    /// ranges, end exclusive.
    pub fn level2_groups(&self) -> Vec<(Level1, String, usize, usize)> {
        let mut out: Vec<(Level1, String, usize, usize)> = Vec::new();
        for (j, e) in self.entries.iter().enumerate() {
            match out.last_mut() {
                Some(last) if last.0 == e.level1 && last.1 == e.level2 => last.3 = j + 1,
                _ => out.push((e.level1, e.level2.clone(), j, j + 1)),
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        idx.sort_by_key(|&i| self.entries[i].order);
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_path_err(path, e))?;
        w.write_record(["feature_id", "level1", "level2", "kind"])?;
        for i in idx {
            let e = &self.entries[i];
            w.write_record([e.id.as_str(), e.level1.as_str(), e.level2.as_str(), &e.kind.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_path_err(path, e))?;
        let headers = r.headers()?.clone();
        let expect = ["feature_id", "level1", "level2", "kind"];
        if headers.len() != 4 || headers.iter().zip(expect).any(|(h, e)| h.trim() != e) {
            return Err(Error::Schema(format!(
                "{}: expected header feature_id,level1,level2,kind",
                path.display()
            )));
        }
        let mut listing = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            listing.push((
                rec[0].trim().to_string(),
                rec[1].parse()?,
                rec[2].trim().to_string(),
                rec[3].parse()?,
            ));
        }
        Self::from_listing(listing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryLevel {
    Level1,
    Level2,
}

fn check_grouping(ordered: &[&FeatureSpec]) -> Result<()> {
    for w in ordered.windows(2) {
        if w[0].level1.rank() > w[1].level1.rank() {
            return Err(Error::Schema(format!(
                "`{}` ({}) is ordered after `{}` ({})",
                w[1].id, w[1].level1, w[0].id, w[0].level1
            )));
        }
    }
    let mut closed: BTreeSet<(Level1, &str)> = BTreeSet::new();
    let mut current: Option<(Level1, &str)> = None;
    for e in ordered {
        let key = (e.level1, e.level2.as_str());
        if current != Some(key) {
            if closed.contains(&key) {
                return Err(Error::Schema(format!(
                    "level2 group `{}` of {} is not contiguous",
                    e.level2, e.level1
                )));
            }
            if let Some(prev) = current {
                closed.insert(prev);
            }
            current = Some(key);
        }
    }
    Ok(())
}

fn order_entries(entries: &[FeatureSpec]) -> Result<Vec<usize>> {
    let mut perm: Vec<usize> = (0..entries.len()).collect();
    perm.sort_by_key(|&i| (entries[i].level1.rank(), i));
    let ordered: Vec<&FeatureSpec> = perm.iter().map(|&i| &entries[i]).collect();
    check_grouping(&ordered)?;
    Ok(perm)
}

/// Canonical column order: positions of the schema entries sorted
/// Financial, ESG, InternalControl, stable within each group.
pub fn ordered_columns(schema: &IndicatorSchema) -> Result<Vec<usize>> {
    order_entries(&schema.entries)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub company: String,
    pub year: i32,
}

impl RowKey {
    pub fn new(company: impl Into<String>, year: i32) -> Self {
        RowKey {
            company: company.into(),
            year,
        }
    }
}

impl fmt::Display for RowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.company, self.year)
    }
}

/// The four violation types that count as financial fraud.
pub const FRAUD_CODES: [&str; 4] = ["P2501", "P2502", "P2503", "P2506"];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FraudLabel {
    pub codes: BTreeSet<String>,
}

impl FraudLabel {
    pub fn is_fraud(&self) -> bool {
        !self.codes.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LabelReport {
    pub records: usize,
    pub fraud_records: usize,
    pub ignored_codes: BTreeMap<String, usize>,
}

/// Turns violation records into labels. Codes outside [`FRAUD_CODES`] are
/// counted in the report and otherwise ignored; the key still receives a
/// (non-fraud) label.
pub fn derive_labels(violations: &[(String, i32, String)]) -> (BTreeMap<RowKey, FraudLabel>, LabelReport) {
    let mut labels: BTreeMap<RowKey, FraudLabel> = BTreeMap::new();
    let mut report = LabelReport::default();
    for (company, year, code) in violations {
        report.records += 1;
        let label = labels.entry(RowKey::new(company.clone(), *year)).or_default();
        let code = code.trim();
        if FRAUD_CODES.contains(&code) {
            report.fraud_records += 1;
            label.codes.insert(code.to_string());
        } else {
            *report.ignored_codes.entry(code.to_string()).or_default() += 1;
        }
    }
    (labels, report)
}

pub fn load_violations_csv(path: &Path) -> Result<Vec<(String, i32, String)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_path_err(path, e))?;
    let headers = r.headers()?.clone();
    let expect = ["company_id", "year", "code"];
    if headers.len() != 3 || headers.iter().zip(expect).any(|(h, e)| h.trim() != e) {
        return Err(Error::invalid(format!(
            "{}: expected header company_id,year,code",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let year = parse_year(&rec[1])?;
        out.push((rec[0].trim().to_string(), year, rec[2].trim().to_string()));
    }
    Ok(out)
}

pub fn write_violations_csv(path: &Path, records: &[(String, i32, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_path_err(path, e))?;
    w.write_record(["company_id", "year", "code"])?;
    for (c, y, code) in records {
        w.write_record([c.as_str(), &y.to_string(), code.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl Row {
    pub fn observed(values: Vec<f64>) -> Self {
        let missing = vec![false; values.len()];
        Row { values, missing }
    }

    pub fn all_missing(&self) -> bool {
        self.missing.iter().all(|&m| m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    schema: IndicatorSchema,
    rows: BTreeMap<RowKey, Row>,
    labels: BTreeMap<RowKey, FraudLabel>,
}

impl PanelDataset {
    pub fn new(schema: IndicatorSchema, rows: BTreeMap<RowKey, Row>) -> Result<Self> {
        schema.validate()?;
        let f = schema.len();
        for (k, r) in &rows {
            if r.values.len() != f || r.missing.len() != f {
                return Err(Error::Shape(format!(
                    "row {k} has {} values / {} mask entries, schema has {f}",
                    r.values.len(),
                    r.missing.len()
                )));
            }
        }
        Ok(PanelDataset {
            schema,
            rows,
            labels: BTreeMap::new(),
        })
    }

    pub fn schema(&self) -> &IndicatorSchema {
        &self.schema
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn rows(&self) -> &BTreeMap<RowKey, Row> {
        &self.rows
    }

    pub fn row(&self, key: &RowKey) -> Option<&Row> {
        self.rows.get(key)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn companies(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for k in self.rows.keys() {
            if out.last() != Some(&k.company) {
                out.push(k.company.clone());
            }
        }
        out
    }

    pub fn years(&self) -> Vec<i32> {
        let set: BTreeSet<i32> = self.rows.keys().map(|k| k.year).collect();
        set.into_iter().collect()
    }

    /// Rows of one company in year order.
    pub fn company_rows<'a>(&'a self, company: &'a str) -> impl Iterator<Item = (&'a RowKey, &'a Row)> + 'a {
        let start = RowKey::new(company, i32::MIN);
        self.rows.range(start..).take_while(move |(k, _)| k.company == company)
    }

    pub fn labels(&self) -> &BTreeMap<RowKey, FraudLabel> {
        &self.labels
    }

    /// Fraud status of a row; rows without a violation record are non-fraud.
    pub fn is_fraud(&self, key: &RowKey) -> bool {
        self.labels.get(key).is_some_and(FraudLabel::is_fraud)
    }

    /// Attaches labels, dropping those whose key has no row. Returns the
    /// number dropped.
    pub fn attach_labels(&mut self, labels: BTreeMap<RowKey, FraudLabel>) -> usize {
        let before = labels.len();
        self.labels = labels.into_iter().filter(|(k, _)| self.rows.contains_key(k)).collect();
        before - self.labels.len()
    }

    pub fn missing_count(&self) -> usize {
        self.rows
            .values()
            .map(|r| r.missing.iter().filter(|&&m| m).count())
            .sum()
    }

    /// Keeps only the listed feature columns (indices into the schema).
    pub fn select_features(&self, keep: &[usize]) -> Result<Self> {
        let schema = self.schema.subset(keep)?;
        let rows = self
            .rows
            .iter()
            .map(|(k, r)| {
                (
                    k.clone(),
                    Row {
                        values: keep.iter().map(|&j| r.values[j]).collect(),
                        missing: keep.iter().map(|&j| r.missing[j]).collect(),
                    },
                )
            })
            .collect();
        Ok(PanelDataset {
            schema,
            rows,
            labels: self.labels.clone(),
        })
    }

    /// Reorders columns so that entry `i` has canonical order `i`.
    pub fn canonicalize(&self) -> Result<Self> {
        let mut perm: Vec<usize> = (0..self.n_features()).collect();
        perm.sort_by_key(|&i| self.schema.entries[i].order);
        self.select_features(&perm)
    }

    pub fn retain_rows(&mut self, mut keep: impl FnMut(&RowKey, &Row) -> bool) {
        self.rows.retain(|k, r| keep(k, r));
        let rows = &self.rows;
        self.labels.retain(|k, _| rows.contains_key(k));
    }

    pub fn map_rows(&self, mut f: impl FnMut(&RowKey, &Row) -> Row) -> Self {
        PanelDataset {
            schema: self.schema.clone(),
            rows: self.rows.iter().map(|(k, r)| (k.clone(), f(k, r))).collect(),
            labels: self.labels.clone(),
        }
    }

    pub(crate) fn replace_rows(&self, rows: BTreeMap<RowKey, Row>) -> Self {
        let labels = self
            .labels
            .iter()
            .filter(|(k, _)| rows.contains_key(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        PanelDataset {
            schema: self.schema.clone(),
            rows,
            labels,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_path_err(path, e))?;
        let mut header = vec!["company_id".to_string(), "year".to_string()];
        header.extend(self.schema.entries.iter().map(|e| e.id.clone()));
        w.write_record(&header)?;
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        for (k, r) in &self.rows {
            record.clear();
            record.push(k.company.clone());
            record.push(k.year.to_string());
            for (v, m) in r.values.iter().zip(&r.missing) {
                record.push(if *m { String::new() } else { format!("{v}") });
            }
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn csv_path_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    }
}

fn parse_year(s: &str) -> Result<i32> {
    s.trim()
        .parse()
        .map_err(|_| Error::invalid(format!("year `{s}` is not an integer")))
}

/// Loads a panel CSV (`company_id,year,<feature>...`, empty cell = missing)
/// against a schema CSV. Columns may appear in any order but must all be
/// schema features; schema features absent from the file are an error too.
pub fn load_panel_csv(path: &Path, schema_path: &Path) -> Result<PanelDataset> {
    read_panel_csv(path, schema_path, true)
}

/// Like [`load_panel_csv`] but for a standardized panel, where categorical
/// columns no longer hold integer codes.
pub fn load_standardized_panel_csv(path: &Path, schema_path: &Path) -> Result<PanelDataset> {
    read_panel_csv(path, schema_path, false)
}

fn read_panel_csv(path: &Path, schema_path: &Path, check_codes: bool) -> Result<PanelDataset> {
    let schema = IndicatorSchema::load_csv(schema_path)?;
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_path_err(path, e))?;
    let headers = r.headers()?.clone();
    if headers.len() < 2 || headers[0].trim() != "company_id" || headers[1].trim() != "year" {
        return Err(Error::invalid(format!(
            "{}: header must start with company_id,year",
            path.display()
        )));
    }
    let mut col_to_feature = Vec::with_capacity(headers.len() - 2);
    let mut covered = vec![false; schema.len()];
    for h in headers.iter().skip(2) {
        let j = schema
            .index_of(h.trim())
            .ok_or_else(|| Error::Schema(format!("unknown feature column `{}`", h.trim())))?;
        if covered[j] {
            return Err(Error::Schema(format!("feature column `{}` repeated", h.trim())));
        }
        covered[j] = true;
        col_to_feature.push(j);
    }
    if let Some(j) = covered.iter().position(|c| !c) {
        return Err(Error::Schema(format!(
            "schema feature `{}` missing from {}",
            schema.entries[j].id,
            path.display()
        )));
    }

    let f = schema.len();
    let mut rows = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let key = RowKey::new(rec[0].trim(), parse_year(&rec[1])?);
        let mut values = vec![f64::NAN; f];
        let mut missing = vec![true; f];
        for (c, &j) in col_to_feature.iter().enumerate() {
            let cell = rec.get(c + 2).unwrap_or("").trim();
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::invalid(format!(
                    "row {} {key}: `{cell}` in column `{}` is not numeric",
                    line + 2,
                    schema.entries[j].id
                ))
            })?;
            if check_codes && schema.entries[j].kind == FeatureKind::Categorical && (v < 0.0 || v.fract() != 0.0) {
                return Err(Error::invalid(format!(
                    "row {} {key}: categorical `{}` must be a non-negative integer code, got `{cell}`",
                    line + 2,
                    schema.entries[j].id
                )));
            }
            if !v.is_finite() {
                return Err(Error::invalid(format!("row {} {key}: non-finite value", line + 2)));
            }
            values[j] = v;
            missing[j] = false;
        }
        if rows.insert(key.clone(), Row { values, missing }).is_some() {
            return Err(Error::invalid(format!("duplicate key {key}")));
        }
    }
    PanelDataset::new(schema, rows)
}
