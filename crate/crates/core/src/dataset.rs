//! Survey-style tabular data: ingestion, derived variables, imputation and
//! covariate balance.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::EstimateReport;
use crate::linear_models::{ols_fit, CovarianceType};
use crate::matrix::{dot, Matrix};
use crate::rng::stream;
use crate::scalar::Real;
use crate::stats::{weighted_mean, weighted_variance};

/// How a covariate column was encoded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Binary,
    Ordinal,
    /// One indicator of an expanded categorical column.
    OneHot { source: String, level: String },
}

/// Names of the non-covariate columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub treatment: String,
    pub outcome: String,
    pub weight: Option<String>,
}

impl Default for Roles {
    fn default() -> Self {
        Self {
            treatment: "w".into(),
            outcome: "y".into(),
            weight: None,
        }
    }
}

/// Covariates, binary treatment, outcome and sampling weights for `n` units.
///
/// Missing covariate cells hold NaN and are flagged in the mask.
#[derive(Clone, Debug)]
pub struct Dataset<F> {
    covariates: Matrix<F>,
    missing: Vec<bool>,
    treatment: Vec<bool>,
    outcome: Vec<F>,
    weights: Vec<F>,
    column_names: Vec<String>,
    column_kinds: Vec<ColumnKind>,
    roles: Roles,
}

/// Missing cells compare equal to each other regardless of payload.
impl<F: Real> PartialEq for Dataset<F> {
    fn eq(&self, other: &Self) -> bool {
        self.missing == other.missing
            && self.covariates.nrows() == other.covariates.nrows()
            && self.covariates.ncols() == other.covariates.ncols()
            && self
                .covariates
                .as_slice()
                .iter()
                .zip(other.covariates.as_slice())
                .zip(&self.missing)
                .all(|((a, b), &m)| m || a == b)
            && self.treatment == other.treatment
            && self.outcome == other.outcome
            && self.weights == other.weights
            && self.column_names == other.column_names
            && self.column_kinds == other.column_kinds
            && self.roles == other.roles
    }
}

impl<F: Real> Dataset<F> {
    /// Validating constructor. Non-finite covariate cells count as missing.
    /// Weights default to one.
    pub fn new(
        covariates: Matrix<F>,
        treatment: Vec<bool>,
        outcome: Vec<F>,
        weights: Option<Vec<F>>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let kinds = vec![ColumnKind::Continuous; covariates.ncols()];
        Self::with_kinds(covariates, treatment, outcome, weights, column_names, kinds)
    }

    pub fn with_kinds(
        covariates: Matrix<F>,
        treatment: Vec<bool>,
        outcome: Vec<F>,
        weights: Option<Vec<F>>,
        column_names: Vec<String>,
        column_kinds: Vec<ColumnKind>,
    ) -> Result<Self> {
        let n = covariates.nrows();
        let p = covariates.ncols();
        if n == 0 {
            return Err(Error::Invalid("dataset has no rows".into()));
        }
        if treatment.len() != n || outcome.len() != n {
            return Err(Error::Dimension(format!(
                "{n} covariate rows, {} treatments, {} outcomes",
                treatment.len(),
                outcome.len()
            )));
        }
        if column_names.len() != p || column_kinds.len() != p {
            return Err(Error::Dimension(format!(
                "{p} covariate columns but {} names and {} kinds",
                column_names.len(),
                column_kinds.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for name in &column_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Invalid(format!("duplicate column name `{name}`")));
            }
        }
        if let Some(i) = outcome.iter().position(|y| !y.is_finite()) {
            return Err(Error::InvalidRow {
                row: i + 1,
                msg: "outcome is not finite".into(),
            });
        }
        let weights = weights.unwrap_or_else(|| vec![F::one(); n]);
        if weights.len() != n {
            return Err(Error::Dimension(format!("{} weights for {n} rows", weights.len())));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > F::zero())) {
            return Err(Error::InvalidRow {
                row: i + 1,
                msg: format!("weight {} is not strictly positive", weights[i]),
            });
        }
        let mut covariates = covariates;
        let mut missing = vec![false; n * p];
        for i in 0..n {
            for j in 0..p {
                if !covariates[(i, j)].is_finite() {
                    covariates[(i, j)] = F::nan();
                    missing[i * p + j] = true;
                }
            }
        }
        Ok(Self {
            covariates,
            missing,
            treatment,
            outcome,
            weights,
            column_names,
            column_kinds,
            roles: Roles::default(),
        })
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &Matrix<F> {
        &self.covariates
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    /// Treatment as 0/1 reals.
    pub fn treatment_f(&self) -> Vec<F> {
        self.treatment
            .iter()
            .map(|&t| if t { F::one() } else { F::zero() })
            .collect()
    }

    pub fn outcome(&self) -> &[F] {
        &self.outcome
    }

    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn column_kinds(&self) -> &[ColumnKind] {
        &self.column_kinds
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn set_roles(&mut self, roles: Roles) {
        self.roles = roles;
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.missing[i * self.p() + j]
    }

    /// Row-major `n x p` mask.
    pub fn missing_mask(&self) -> &[bool] {
        &self.missing
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// Errors unless every covariate cell is observed.
    pub fn require_complete(&self) -> Result<()> {
        match self.missing_count() {
            0 => Ok(()),
            k => Err(Error::MissingValues(k)),
        }
    }

    /// Number of treated and control units.
    pub fn arm_sizes(&self) -> (usize, usize) {
        let t = self.treatment.iter().filter(|&&w| w).count();
        (t, self.n() - t)
    }

    pub fn require_both_arms(&self) -> Result<()> {
        match self.arm_sizes() {
            (0, _) => Err(Error::EmptyArm("treated")),
            (_, 0) => Err(Error::EmptyArm("control")),
            _ => Ok(()),
        }
    }

    /// Same units with a different outcome vector.
    pub fn with_outcome(&self, outcome: Vec<F>) -> Result<Self> {
        let mut out = Self::with_kinds(
            self.covariates.clone(),
            self.treatment.clone(),
            outcome,
            Some(self.weights.clone()),
            self.column_names.clone(),
            self.column_kinds.clone(),
        )?;
        out.roles = self.roles.clone();
        Ok(out)
    }

    pub fn with_weights(&self, weights: Vec<F>) -> Result<Self> {
        let mut out = Self::with_kinds(
            self.covariates.clone(),
            self.treatment.clone(),
            self.outcome.clone(),
            Some(weights),
            self.column_names.clone(),
            self.column_kinds.clone(),
        )?;
        out.roles = self.roles.clone();
        Ok(out)
    }

    /// Same units with the treatment labels flipped.
    pub fn with_treatment(&self, treatment: Vec<bool>) -> Result<Self> {
        let mut out = Self::with_kinds(
            self.covariates.clone(),
            treatment,
            self.outcome.clone(),
            Some(self.weights.clone()),
            self.column_names.clone(),
            self.column_kinds.clone(),
        )?;
        out.roles = self.roles.clone();
        Ok(out)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let pick = |v: &[F]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let mut out = Self::with_kinds(
            self.covariates.select_rows(rows),
            rows.iter().map(|&i| self.treatment[i]).collect(),
            pick(&self.outcome),
            Some(pick(&self.weights)),
            self.column_names.clone(),
            self.column_kinds.clone(),
        )?;
        out.roles = self.roles.clone();
        Ok(out)
    }

    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let mut out = Self::with_kinds(
            self.covariates.select_columns(cols),
            self.treatment.clone(),
            self.outcome.clone(),
            Some(self.weights.clone()),
            cols.iter().map(|&j| self.column_names[j].clone()).collect(),
            cols.iter().map(|&j| self.column_kinds[j].clone()).collect(),
        )?;
        out.roles = self.roles.clone();
        Ok(out)
    }

    /// Design for linear nuisance models: intercept plus covariates, dropping
    /// the first level of every one-hot group and any constant column.
    pub fn linear_design(&self) -> Result<(Matrix<F>, Vec<String>)> {
        self.require_complete()?;
        let mut seen_groups = BTreeSet::new();
        let mut keep = Vec::new();
        for (j, kind) in self.column_kinds.iter().enumerate() {
            if let ColumnKind::OneHot { source, .. } = kind {
                if seen_groups.insert(source.clone()) {
                    continue;
                }
            }
            let col = self.covariates.column(j);
            if col.iter().all(|&v| v == col[0]) {
                continue;
            }
            keep.push(j);
        }
        let x = self.covariates.select_columns(&keep).with_intercept();
        let mut names = vec!["(Intercept)".to_string()];
        names.extend(keep.iter().map(|&j| self.column_names[j].clone()));
        Ok((x, names))
    }

    /// Schema that reproduces this dataset through [`write_csv`] and
    /// [`load_csv`].
    pub fn schema(&self) -> Schema {
        let mut categorical = Vec::new();
        let mut ordinal = Vec::new();
        for (name, kind) in self.column_names.iter().zip(&self.column_kinds) {
            match kind {
                ColumnKind::OneHot { source, .. } => {
                    if !categorical.contains(source) {
                        categorical.push(source.clone());
                    }
                }
                ColumnKind::Ordinal => ordinal.push(name.clone()),
                _ => {}
            }
        }
        Schema {
            treatment: self.roles.treatment.clone(),
            outcome: self.roles.outcome.clone(),
            weight: self.roles.weight.clone(),
            categorical,
            ordinal,
            na_values: default_na_values(),
        }
    }
}

/// Column roles for CSV ingestion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub treatment: String,
    pub outcome: String,
    #[serde(default)]
    pub weight: Option<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub ordinal: Vec<String>,
    /// Cell values read as missing in addition to the empty string.
    #[serde(default = "default_na_values")]
    pub na_values: Vec<String>,
}

fn default_na_values() -> Vec<String> {
    vec!["NA".into()]
}

impl Schema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Accumulates covariate columns, expanding categoricals into one-hot groups.
#[derive(Debug)]
pub struct DatasetBuilder<F> {
    columns: Vec<Vec<F>>,
    names: Vec<String>,
    kinds: Vec<ColumnKind>,
    roles: Roles,
}

impl<F: Real> Default for DatasetBuilder<F> {
    fn default() -> Self {
        Self {
            columns: Vec::new(),
            names: Vec::new(),
            kinds: Vec::new(),
            roles: Roles::default(),
        }
    }
}

impl<F: Real> DatasetBuilder<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn roles(mut self, roles: Roles) -> Self {
        self.roles = roles;
        self
    }

    /// Adds a numeric column (NaN = missing).
    pub fn numeric(mut self, name: &str, kind: ColumnKind, values: Vec<F>) -> Self {
        self.columns.push(values);
        self.names.push(name.to_string());
        self.kinds.push(kind);
        self
    }

    pub fn continuous(self, name: &str, values: Vec<F>) -> Self {
        self.numeric(name, ColumnKind::Continuous, values)
    }

    pub fn binary(self, name: &str, values: Vec<F>) -> Self {
        self.numeric(name, ColumnKind::Binary, values)
    }

    pub fn ordinal(self, name: &str, values: Vec<F>) -> Self {
        self.numeric(name, ColumnKind::Ordinal, values)
    }

    /// Full one-hot expansion named `name=level`, one column per observed
    /// level. Levels sort numerically when they all parse as numbers.
    pub fn categorical(mut self, name: &str, values: &[Option<String>]) -> Self {
        for level in sorted_levels(values) {
            let col = values
                .iter()
                .map(|v| match v {
                    None => F::nan(),
                    Some(s) if *s == level => F::one(),
                    Some(_) => F::zero(),
                })
                .collect();
            self.columns.push(col);
            self.names.push(format!("{name}={level}"));
            self.kinds.push(ColumnKind::OneHot {
                source: name.to_string(),
                level,
            });
        }
        self
    }

    pub fn build(self, treatment: Vec<bool>, outcome: Vec<F>, weights: Option<Vec<F>>) -> Result<Dataset<F>> {
        let x = if self.columns.is_empty() {
            Matrix::zeros(outcome.len(), 0)
        } else {
            Matrix::from_columns(&self.columns)?
        };
        let mut ds = Dataset::with_kinds(x, treatment, outcome, weights, self.names, self.kinds)?;
        ds.roles = self.roles;
        Ok(ds)
    }
}

fn sorted_levels(values: &[Option<String>]) -> Vec<String> {
    let set: BTreeSet<&str> = values.iter().flatten().map(String::as_str).collect();
    let mut levels: Vec<String> = set.into_iter().map(str::to_string).collect();
    let numeric: Option<Vec<f64>> = levels.iter().map(|s| s.parse::<f64>().ok()).collect();
    if let Some(keys) = numeric {
        let mut paired: Vec<(f64, String)> = keys.into_iter().zip(levels).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0));
        levels = paired.into_iter().map(|(_, s)| s).collect();
    }
    levels
}

/// Reads a headed CSV according to `schema`.
pub fn load_csv<F: Real>(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset<F>> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<F: Real, R: Read>(reader: R, schema: &Schema) -> Result<Dataset<F>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Invalid(format!("schema column `{name}` not in CSV header")))
    };
    let t_col = find(&schema.treatment)?;
    let y_col = find(&schema.outcome)?;
    let w_col = schema.weight.as_deref().map(find).transpose()?;
    for name in schema.categorical.iter().chain(&schema.ordinal) {
        find(name)?;
    }

    let mut cells: Vec<Vec<Option<String>>> = vec![Vec::new(); headers.len()];
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        for (j, raw) in rec.iter().enumerate() {
            let v = raw.trim();
            let missing = v.is_empty() || schema.na_values.iter().any(|na| na == v);
            cells[j].push((!missing).then(|| v.to_string()));
        }
    }
    let n = cells.first().map_or(0, Vec::len);

    let parse_num = |j: usize, i: usize, s: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::InvalidRow {
            row: i + 1,
            msg: format!("column `{}`: `{s}` is not a number", headers[j]),
        })
    };

    let mut treatment = Vec::with_capacity(n);
    for (i, c) in cells[t_col].iter().enumerate() {
        let v = match c {
            Some(s) => parse_num(t_col, i, s)?,
            None => f64::NAN,
        };
        treatment.push(if v == 0.0 {
            false
        } else if v == 1.0 {
            true
        } else {
            return Err(Error::InvalidRow {
                row: i + 1,
                msg: format!("treatment `{}` must be 0 or 1", c.as_deref().unwrap_or("")),
            });
        });
    }
    let required = |col: usize, what: &str| -> Result<Vec<F>> {
        cells[col]
            .iter()
            .enumerate()
            .map(|(i, c)| match c {
                Some(s) => parse_num(col, i, s).map(F::lit),
                None => Err(Error::InvalidRow {
                    row: i + 1,
                    msg: format!("{what} is missing"),
                }),
            })
            .collect()
    };
    let outcome = required(y_col, "outcome")?;
    let weights = w_col.map(|c| required(c, "weight")).transpose()?;

    let mut b = DatasetBuilder::new().roles(Roles {
        treatment: schema.treatment.clone(),
        outcome: schema.outcome.clone(),
        weight: schema.weight.clone(),
    });
    for (j, name) in headers.iter().enumerate() {
        if j == t_col || j == y_col || Some(j) == w_col {
            continue;
        }
        if schema.categorical.contains(name) {
            b = b.categorical(name, &cells[j]);
            continue;
        }
        let mut values = Vec::with_capacity(n);
        for (i, c) in cells[j].iter().enumerate() {
            values.push(match c {
                Some(s) => parse_num(j, i, s)?,
                None => f64::NAN,
            });
        }
        let kind = if schema.ordinal.contains(name) {
            ColumnKind::Ordinal
        } else if values.iter().all(|v| v.is_nan() || *v == 0.0 || *v == 1.0) {
            ColumnKind::Binary
        } else {
            ColumnKind::Continuous
        };
        b = b.numeric(name, kind, values.into_iter().map(F::lit).collect());
    }
    b.build(treatment, outcome, weights)
}

/// Writes the dataset as CSV, collapsing one-hot groups back to a single
/// categorical column. Missing cells are written empty.
pub fn write_csv<F: Real>(ds: &Dataset<F>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_to(ds, file)
}

enum OutColumn {
    Plain(usize),
    Group(String, Vec<usize>),
}

pub fn write_csv_to<F: Real, W: Write>(ds: &Dataset<F>, writer: W) -> Result<()> {
    let mut out: Vec<OutColumn> = Vec::new();
    for (j, kind) in ds.column_kinds.iter().enumerate() {
        match kind {
            ColumnKind::OneHot { source, .. } => match out.last_mut() {
                Some(OutColumn::Group(s, members)) if s == source => members.push(j),
                _ => out.push(OutColumn::Group(source.clone(), vec![j])),
            },
            _ => out.push(OutColumn::Plain(j)),
        }
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = out
        .iter()
        .map(|c| match c {
            OutColumn::Plain(j) => ds.column_names[*j].clone(),
            OutColumn::Group(s, _) => s.clone(),
        })
        .collect();
    header.push(ds.roles.treatment.clone());
    header.push(ds.roles.outcome.clone());
    if let Some(w) = &ds.roles.weight {
        header.push(w.clone());
    }
    wtr.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        row.clear();
        for c in &out {
            row.push(match c {
                OutColumn::Plain(j) if ds.is_missing(i, *j) => String::new(),
                OutColumn::Plain(j) => format!("{}", ds.covariates[(i, *j)]),
                OutColumn::Group(_, members) => members
                    .iter()
                    .find(|&&j| !ds.is_missing(i, j) && ds.covariates[(i, j)] == F::one())
                    .map(|&j| match &ds.column_kinds[j] {
                        ColumnKind::OneHot { level, .. } => level.clone(),
                        _ => unreachable!(),
                    })
                    .unwrap_or_default(),
            });
        }
        row.push(if ds.treatment[i] { "1" } else { "0" }.into());
        row.push(format!("{}", ds.outcome[i]));
        if ds.roles.weight.is_some() {
            row.push(format!("{}", ds.weights[i]));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Weighted z-score with the population (1/n) variance.
pub fn standardize<F: Real>(values: &[F], weights: &[F]) -> Result<Vec<F>> {
    if values.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} values, {} weights",
            values.len(),
            weights.len()
        )));
    }
    if values.is_empty() {
        return Err(Error::Invalid("cannot standardize an empty vector".into()));
    }
    let m = weighted_mean(values, weights);
    let var = weighted_variance(values, weights);
    let scale = values.iter().fold(F::zero(), |a, v| a.max(v.abs()));
    if !(var > F::epsilon() * F::epsilon() * scale * scale) {
        return Err(Error::DegenerateVariance(format!("weighted variance {var}")));
    }
    let sd = var.sqrt();
    Ok(values.iter().map(|&v| (v - m) / sd).collect())
}

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITER: usize = 10_000;

/// First principal component of the column-standardized indicators,
/// re-standardized, signed to correlate positively with the row sums.
pub fn asset_index_pca<F: Real>(indicators: &Matrix<F>, names: &[String]) -> Result<Vec<F>> {
    let (n, k) = (indicators.nrows(), indicators.ncols());
    if k < 2 {
        return Err(Error::Invalid(format!("need at least 2 indicators, got {k}")));
    }
    let ones = vec![F::one(); n];
    let mut z = Matrix::zeros(n, k);
    for j in 0..k {
        let col = indicators.column(j);
        let s = standardize(&col, &ones).map_err(|_| {
            Error::DegenerateColumn(names.get(j).cloned().unwrap_or_else(|| format!("x{j}")))
        })?;
        for (i, v) in s.into_iter().enumerate() {
            z[(i, j)] = v;
        }
    }
    let nf = F::from_count(n);
    let corr = z.transpose().matmul(&z)?.map(|v| v / nf);

    // Start away from any exact symmetry.
    let mut v: Vec<F> = (0..k).map(|j| F::one() + F::lit(1e-3 * j as f64)).collect();
    normalize(&mut v);
    for _ in 0..PCA_MAX_ITER {
        let mut next = corr.matvec(&v)?;
        normalize(&mut next);
        let delta = next
            .iter()
            .zip(&v)
            .fold(F::zero(), |a, (&x, &y)| a + (x - y) * (x - y))
            .sqrt();
        v = next;
        if delta < F::lit(PCA_TOL) {
            break;
        }
    }
    let scores = z.matvec(&v)?;
    let mut out = standardize(&scores, &ones)?;
    let row_sum: Vec<F> = indicators.rows_iter().map(|r| r.iter().copied().sum()).collect();
    if crate::stats::pearson(&out, &row_sum) < F::zero() {
        out.iter_mut().for_each(|s| *s = -*s);
    }
    Ok(out)
}

fn normalize<F: Real>(v: &mut [F]) {
    let norm = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x = *x / norm);
}

/// Child score minus parent score, elementwise.
pub fn intergenerational_outcome<F: Real>(child: &[F], parent: &[F]) -> Result<Vec<F>> {
    if child.len() != parent.len() {
        return Err(Error::Dimension(format!(
            "{} child scores, {} parent scores",
            child.len(),
            parent.len()
        )));
    }
    Ok(child.iter().zip(parent).map(|(&c, &p)| c - p).collect())
}

/// Birth-year cohorts, inclusive ranges listed youngest first.
pub const DEFAULT_COHORTS: [(i32, i32); 5] =
    [(1983, 1995), (1971, 1982), (1959, 1970), (1947, 1958), (1935, 1946)];

pub const SURVEY_YEAR: i32 = 2015;

/// 1-based cohort code of a birth year, or `None` outside every bin.
pub fn age_cohort(birth_year: i32, cohorts: &[(i32, i32)]) -> Option<usize> {
    cohorts
        .iter()
        .position(|&(lo, hi)| (lo..=hi).contains(&birth_year))
        .map(|k| k + 1)
}

/// `m` completed copies of `ds` by stochastic regression imputation.
///
/// Each incomplete column is regressed on the fully observed columns plus
/// treatment and outcome within a bootstrap resample of its observed rows;
/// missing cells get the prediction plus a normal residual draw. Binary
/// columns are thresholded at 0.5, ordinal columns rounded to the nearest
/// observed level and one-hot groups draw a level with probability
/// proportional to the clamped per-level predictions.
pub fn impute<F: Real>(ds: &Dataset<F>, m: usize, seed: u64) -> Result<Vec<Dataset<F>>> {
    if m == 0 {
        return Err(Error::Invalid("number of imputations must be positive".into()));
    }
    let (n, p) = (ds.n(), ds.p());
    let observed_in = |j: usize| (0..n).filter(|&i| !ds.is_missing(i, j)).count();
    for j in 0..p {
        if observed_in(j) == 0 {
            return Err(Error::FullyMissing(ds.column_names[j].clone()));
        }
    }
    if ds.missing_count() == 0 {
        return Ok(vec![ds.clone(); m]);
    }

    // Predictors: intercept, complete columns (minus one level per one-hot
    // group), treatment, outcome.
    let mut pred_cols = Vec::new();
    let mut seen_groups = BTreeSet::new();
    for j in 0..p {
        if observed_in(j) != n {
            continue;
        }
        if let ColumnKind::OneHot { source, .. } = &ds.column_kinds[j] {
            if seen_groups.insert(source.clone()) {
                continue;
            }
        }
        pred_cols.push(j);
    }
    let w = ds.treatment_f();
    let mut design = Matrix::zeros(n, pred_cols.len() + 3);
    for i in 0..n {
        let row = design.row_mut(i);
        row[0] = F::one();
        for (k, &j) in pred_cols.iter().enumerate() {
            row[k + 1] = ds.covariates[(i, j)];
        }
        row[pred_cols.len() + 1] = w[i];
        row[pred_cols.len() + 2] = ds.outcome[i];
    }

    // Targets: incomplete numeric columns and incomplete one-hot groups.
    let mut targets: Vec<Vec<usize>> = Vec::new();
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for j in 0..p {
        if observed_in(j) == n {
            continue;
        }
        match &ds.column_kinds[j] {
            ColumnKind::OneHot { source, .. } => match groups.get(source) {
                Some(&t) => targets[t].push(j),
                None => {
                    groups.insert(source.clone(), targets.len());
                    targets.push(vec![j]);
                }
            },
            _ => targets.push(vec![j]),
        }
    }

    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let mut rng = stream(seed, "impute", k as u64);
        let mut x = ds.covariates.clone();
        for cols in &targets {
            let lead = cols[0];
            let obs: Vec<usize> = (0..n).filter(|&i| !ds.is_missing(i, lead)).collect();
            let miss: Vec<usize> = (0..n).filter(|&i| ds.is_missing(i, lead)).collect();
            let boot: Vec<usize> = (0..obs.len()).map(|_| obs[rng.random_range(0..obs.len())]).collect();
            let xb = design.select_rows(&boot);
            let models: Vec<(Vec<F>, F)> = cols
                .iter()
                .map(|&j| {
                    let yb: Vec<F> = boot.iter().map(|&i| ds.covariates[(i, j)]).collect();
                    regression_draw_model(&xb, &yb)
                })
                .collect();
            match &ds.column_kinds[lead] {
                ColumnKind::OneHot { .. } => {
                    for &i in &miss {
                        let probs: Vec<F> = models
                            .iter()
                            .map(|(b, _)| dot(design.row(i), b).max(F::zero()).min(F::one()))
                            .collect();
                        let total: F = probs.iter().copied().sum();
                        let u = F::lit(rng.random::<f64>());
                        let pick = if total > F::zero() {
                            let mut acc = F::zero();
                            probs
                                .iter()
                                .position(|&q| {
                                    acc = acc + q / total;
                                    u < acc
                                })
                                .unwrap_or(cols.len() - 1)
                        } else {
                            (u.as_f64() * cols.len() as f64) as usize % cols.len()
                        };
                        for (c, &j) in cols.iter().enumerate() {
                            x[(i, j)] = if c == pick { F::one() } else { F::zero() };
                        }
                    }
                }
                kind => {
                    let (beta, sigma) = &models[0];
                    let levels: Vec<F> = if *kind == ColumnKind::Ordinal {
                        let mut l: Vec<F> = obs.iter().map(|&i| ds.covariates[(i, lead)]).collect();
                        l.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                        l.dedup();
                        l
                    } else {
                        Vec::new()
                    };
                    for &i in &miss {
                        let z: f64 = rng.sample(StandardNormal);
                        let v = dot(design.row(i), beta) + *sigma * F::lit(z);
                        x[(i, lead)] = match kind {
                            ColumnKind::Binary => {
                                if v >= F::lit(0.5) {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            ColumnKind::Ordinal => nearest(&levels, v),
                            _ => v,
                        };
                    }
                }
            }
        }
        let mut filled = Dataset::with_kinds(
            x,
            ds.treatment.clone(),
            ds.outcome.clone(),
            Some(ds.weights.clone()),
            ds.column_names.clone(),
            ds.column_kinds.clone(),
        )?;
        filled.roles = ds.roles.clone();
        out.push(filled);
    }
    Ok(out)
}

fn nearest<F: Real>(levels: &[F], v: F) -> F {
    levels
        .iter()
        .copied()
        .min_by(|a, b| {
            (*a - v)
                .abs()
                .partial_cmp(&(*b - v).abs())
                .expect("finite")
        })
        .unwrap_or(v)
}

/// OLS coefficients and residual sd for an imputation model. Dependent
/// predictors are dropped one at a time; an intercept-only model is the
/// last resort.
fn regression_draw_model<F: Real>(x: &Matrix<F>, y: &[F]) -> (Vec<F>, F) {
    let n = x.nrows();
    let mut active: Vec<usize> = (0..x.ncols()).collect();
    while active.len() > 1 && n > active.len() {
        let xs = x.select_columns(&active);
        match ols_fit(&xs, y, &vec![F::one(); n], CovarianceType::Classical) {
            Ok(fit) => {
                let rss: F = fit.residuals.iter().map(|&r| r * r).sum();
                let sigma = (rss / F::from_count(n - active.len())).sqrt();
                let mut beta = vec![F::zero(); x.ncols()];
                for (b, &j) in fit.coefficients.iter().zip(&active) {
                    beta[j] = *b;
                }
                return (beta, sigma);
            }
            Err(Error::SingularDesign { index, .. }) if index > 0 => {
                active.remove(index);
            }
            Err(_) => break,
        }
    }
    let mean = y.iter().copied().sum::<F>() / F::from_count(n);
    let ss: F = y.iter().map(|&v| (v - mean) * (v - mean)).sum();
    let sigma = (ss / F::from_count(n.saturating_sub(1).max(1))).sqrt();
    let mut beta = vec![F::zero(); x.ncols()];
    beta[0] = mean;
    (beta, sigma)
}

/// Rubin's rules for `(estimate, se)` pairs: pooled estimate and total SE.
pub fn rubin_pool<F: Real>(per_imputation: &[(F, F)]) -> Result<(F, F)> {
    let m = per_imputation.len();
    if m < 2 {
        return Err(Error::TooFewImputations { needed: 2, got: m });
    }
    let mf = F::from_count(m);
    let qbar = per_imputation.iter().map(|e| e.0).sum::<F>() / mf;
    let within = per_imputation.iter().map(|e| e.1 * e.1).sum::<F>() / mf;
    let between = per_imputation
        .iter()
        .map(|e| (e.0 - qbar) * (e.0 - qbar))
        .sum::<F>()
        / (mf - F::one());
    let total = within + (F::one() + F::one() / mf) * between;
    Ok((qbar, total.sqrt()))
}

/// Pools per-imputation reports of the same estimand and estimator.
pub fn pool_estimates<F: Real>(per_imputation: &[EstimateReport<F>]) -> Result<EstimateReport<F>> {
    let pairs: Vec<(F, F)> = per_imputation.iter().map(|r| (r.estimate, r.se)).collect();
    let (est, se) = rubin_pool(&pairs)?;
    let first = &per_imputation[0];
    Ok(EstimateReport::new(
        first.estimand.clone(),
        &format!("{}+rubin", first.estimator),
        est,
        se,
        first.n,
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BalanceRow<F> {
    pub covariate: String,
    pub mean_treated: F,
    pub mean_control: F,
    pub var_treated: F,
    pub var_control: F,
    pub smd_unweighted: F,
    pub smd_weighted: F,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BalanceTable<F> {
    pub rows: Vec<BalanceRow<F>>,
}

/// Standardized difference above which a covariate is flagged.
pub const SMD_THRESHOLD: f64 = 0.1;

impl<F: Real> BalanceRow<F> {
    pub fn flagged(&self) -> bool {
        self.smd_weighted > F::lit(SMD_THRESHOLD)
    }
}

impl<F: Real> BalanceTable<F> {
    pub fn max_smd_unweighted(&self) -> F {
        self.rows.iter().fold(F::zero(), |a, r| a.max(r.smd_unweighted))
    }

    pub fn max_smd_weighted(&self) -> F {
        self.rows.iter().fold(F::zero(), |a, r| a.max(r.smd_weighted))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["covariate", "smd_unweighted", "smd_weighted", "flag"])?;
        for r in &self.rows {
            wtr.write_record([
                r.covariate.clone(),
                format!("{}", r.smd_unweighted),
                format!("{}", r.smd_weighted),
                u8::from(r.flagged()).to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn arm_moments<F: Real>(x: &[F], w: &[F]) -> (F, F) {
    (weighted_mean(x, w), weighted_variance(x, w))
}

fn smd<F: Real>(m1: F, m0: F, v1: F, v0: F) -> F {
    let diff = (m1 - m0).abs();
    let pooled = ((v1 + v0) / F::lit(2.0)).sqrt();
    if diff == F::zero() {
        F::zero()
    } else {
        diff / pooled
    }
}

/// Standardized mean differences per covariate, unweighted and under
/// `unit_weights`. Missing cells are skipped column by column.
pub fn balance<F: Real>(ds: &Dataset<F>, unit_weights: &[F]) -> Result<BalanceTable<F>> {
    let n = ds.n();
    if unit_weights.len() != n {
        return Err(Error::Dimension(format!("{} weights for {n} rows", unit_weights.len())));
    }
    ds.require_both_arms()?;
    let mut rows = Vec::with_capacity(ds.p());
    for j in 0..ds.p() {
        let mut split = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
        for i in 0..n {
            if ds.is_missing(i, j) {
                continue;
            }
            let arm = &mut split[usize::from(ds.treatment[i])];
            arm.0.push(ds.covariates[(i, j)]);
            arm.1.push(unit_weights[i]);
        }
        let [(x0, w0), (x1, w1)] = &split;
        if x0.is_empty() {
            return Err(Error::EmptyArm("control"));
        }
        if x1.is_empty() {
            return Err(Error::EmptyArm("treated"));
        }
        let (m1, v1) = arm_moments(x1, w1);
        let (m0, v0) = arm_moments(x0, w0);
        let (u1, s1) = arm_moments(x1, &vec![F::one(); x1.len()]);
        let (u0, s0) = arm_moments(x0, &vec![F::one(); x0.len()]);
        rows.push(BalanceRow {
            covariate: ds.column_names[j].clone(),
            mean_treated: m1,
            mean_control: m0,
            var_treated: v1,
            var_control: v0,
            smd_unweighted: smd(u1, u0, s1, s0),
            smd_weighted: smd(m1, m0, v1, v0),
        });
    }
    Ok(BalanceTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema {
            treatment: "w".into(),
            outcome: "y".into(),
            weight: None,
            categorical: vec![],
            ordinal: vec![],
            na_values: default_na_values(),
        }
    }

    #[test]
    fn reads_three_rows() {
        let csv = "y,w,x1\n1.5,1,0.2\n2.0,0,0.3\n-1,1,7\n";
        let ds: Dataset<f64> = read_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!((ds.n(), ds.p()), (3, 1));
        assert_eq!(ds.outcome(), &[1.5, 2.0, -1.0]);
        assert_eq!(ds.treatment(), &[true, false, true]);
        assert_eq!(ds.covariates().column(0), vec![0.2, 0.3, 7.0]);
        assert_eq!(ds.weights(), &[1.0; 3]);
    }

    #[test]
    fn bad_treatment_names_the_row() {
        let csv = "y,w,x1\n1,0,1\n1,1,2\n1,0,3\n1,1,4\n1,2,5\n";
        match read_csv::<f64, _>(csv.as_bytes(), &schema()) {
            Err(Error::InvalidRow { row, .. }) => assert_eq!(row, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_row_reports_line() {
        let csv = "y,w,x1\n1,0,1\n1,1\n";
        match read_csv::<f64, _>(csv.as_bytes(), &schema()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_cell_is_masked() {
        let csv = "y,w,x1,x2\n1,0,1,NA\n1,1,,2\n1,0,3,4\n";
        let ds: Dataset<f64> = read_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.missing_count(), 2);
        assert!(ds.is_missing(1, 0));
        assert!(ds.is_missing(0, 1));
        assert!(ds.require_complete().is_err());
    }

    #[test]
    fn categorical_expands_and_round_trips() {
        let mut s = schema();
        s.categorical = vec!["pref".into()];
        s.ordinal = vec!["edu".into()];
        s.weight = Some("wt".into());
        let csv = "pref,edu,w,y,wt\n10,1,0,0.5,1\n2,3,1,1.5,2\n10,2,1,2.5,0.5\n,1,0,1,1\n";
        let ds: Dataset<f64> = read_csv(csv.as_bytes(), &s).unwrap();
        assert_eq!(ds.column_names(), &["pref=2", "pref=10", "edu"]);
        assert_eq!(ds.covariates().row(0)[..2], [0.0, 1.0]);
        assert!(ds.is_missing(3, 0) && ds.is_missing(3, 1));
        assert_eq!(ds.column_kinds()[2], ColumnKind::Ordinal);
        assert_eq!(ds.weights(), &[1.0, 2.0, 0.5, 1.0]);

        let mut buf = Vec::new();
        write_csv_to(&ds, &mut buf).unwrap();
        let back: Dataset<f64> = read_csv(buf.as_slice(), &ds.schema()).unwrap();
        assert_eq!(back.column_names(), ds.column_names());
        assert_eq!(back.missing_mask(), ds.missing_mask());
        assert_eq!(back.outcome(), ds.outcome());
        assert_eq!(back.weights(), ds.weights());
    }

    #[test]
    fn standardize_closed_form() {
        let z = standardize(&[1.0, 2.0, 3.0], &[1.0; 3]).unwrap();
        let want = 1.5f64.sqrt();
        assert!((z[0] + want).abs() < 1e-12 && z[1].abs() < 1e-15 && (z[2] - want).abs() < 1e-12);
        let again = standardize(&z, &[1.0; 3]).unwrap();
        for (a, b) in z.iter().zip(&again) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(matches!(
            standardize(&[5.0, 5.0, 5.0], &[1.0; 3]),
            Err(Error::DegenerateVariance(_))
        ));
    }

    #[test]
    fn intergenerational_difference() {
        assert_eq!(intergenerational_outcome(&[1.0], &[0.4]).unwrap()[0], 0.6);
        assert!(intergenerational_outcome(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn cohorts_follow_birth_years() {
        assert_eq!(age_cohort(SURVEY_YEAR - 20, &DEFAULT_COHORTS), Some(1));
        assert_eq!(age_cohort(1971, &DEFAULT_COHORTS), Some(2));
        assert_eq!(age_cohort(SURVEY_YEAR - 80, &DEFAULT_COHORTS), Some(5));
        assert_eq!(age_cohort(1900, &DEFAULT_COHORTS), None);
    }

    #[test]
    fn pca_rank_one_and_constant_column() {
        let col = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let x = Matrix::from_columns(&[col.clone(), col.clone()]).unwrap();
        let s = asset_index_pca(&x, &[]).unwrap();
        let row_sum: Vec<f64> = col.iter().map(|v| 2.0 * v).collect();
        assert!((crate::stats::pearson(&s, &row_sum) - 1.0).abs() < 1e-12);
        let v = crate::stats::weighted_variance(&s, &[1.0; 6]);
        assert!((v - 1.0).abs() < 1e-8);

        let bad = Matrix::from_columns(&[col, vec![1.0; 6]]).unwrap();
        let names = vec!["tv".to_string(), "car".to_string()];
        match asset_index_pca(&bad, &names) {
            Err(Error::DegenerateColumn(c)) => assert_eq!(c, "car"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rubin_hand_computation() {
        let (q, se) = rubin_pool(&[(0.9, 0.1), (1.1, 0.1)]).unwrap();
        assert!((q - 1.0f64).abs() < 1e-15);
        assert!((se - 0.2).abs() < 1e-12);
        let (q, se) = rubin_pool(&[(1.0, 0.1); 3]).unwrap();
        assert!((q - 1.0f64).abs() < 1e-15 && (se - 0.1).abs() < 1e-15);
        assert!(matches!(
            rubin_pool(&[(1.0f64, 0.1)]),
            Err(Error::TooFewImputations { .. })
        ));
    }

    #[test]
    fn balance_identical_arms_is_zero() {
        let x = Matrix::from_columns(&[vec![1.0, 2.0, 1.0, 2.0]]).unwrap();
        let ds = Dataset::new(x, vec![true, true, false, false], vec![0.0; 4], None, vec!["x".into()])
            .unwrap();
        let t = balance(&ds, &[1.0; 4]).unwrap();
        assert_eq!(t.rows[0].smd_unweighted, 0.0);
        assert!(!t.rows[0].flagged());
    }

    #[test]
    fn impute_without_missing_is_identity() {
        let x = Matrix::from_columns(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let ds = Dataset::new(x, vec![true, false, true], vec![0.0; 3], None, vec!["x".into()]).unwrap();
        let out = impute(&ds, 5, 1).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|d| *d == ds));
    }

    #[test]
    fn fully_missing_column_errors() {
        let x = Matrix::from_columns(&[vec![f64::NAN; 3]]).unwrap();
        let ds = Dataset::new(x, vec![true, false, true], vec![0.0; 3], None, vec!["x".into()]).unwrap();
        assert!(matches!(impute(&ds, 2, 1), Err(Error::FullyMissing(_))));
    }
}
