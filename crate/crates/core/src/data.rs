//! Observed data, cause lists, model formulas and prior configuration.
//!
//! Datasets are exchanged as UTF-8 CSV with a prefixed header:
//!
//! | column        | meaning                                              |
//! |---------------|------------------------------------------------------|
//! | `y`           | 1 for a case, 0 for a control                        |
//! | `brs_<name>`  | bronze-standard measurement on pathogen `<name>`     |
//! | `ss_<name>`   | silver-standard measurement (cases only, may be empty)|
//! | `x_<name>`    | etiology covariate (forced to 0 on control rows)     |
//! | `w_<name>`    | subclass-weight covariate                            |
//!
//! Every `ss_<name>` must refer to an existing `brs_<name>` pathogen.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::BetaParams;

pub const SCHEMA_VERSION: u32 = 1;

/// Case-control measurements and covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pathogens: Vec<String>,
    brs: Array2<u8>,
    ss_pathogens: Vec<usize>,
    ss: Array2<Option<u8>>,
    y: Vec<bool>,
    x_names: Vec<String>,
    x_design: Array2<f64>,
    w_names: Vec<String>,
    w_design: Array2<f64>,
}

impl Dataset {
    /// Validates and assembles a dataset. Control rows of `x_design` are zeroed.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pathogens: Vec<String>,
        brs: Array2<u8>,
        ss_pathogens: Vec<usize>,
        ss: Array2<Option<u8>>,
        y: Vec<bool>,
        x_names: Vec<String>,
        mut x_design: Array2<f64>,
        w_names: Vec<String>,
        w_design: Array2<f64>,
    ) -> Result<Self> {
        let n = y.len();
        let j = pathogens.len();
        if j == 0 {
            return Err(Error::Data("at least one pathogen measurement required".into()));
        }
        if brs.dim() != (n, j) {
            return Err(Error::Dimension(format!("BrS matrix is {:?}, expected ({n}, {j})", brs.dim())));
        }
        if ss.dim() != (n, ss_pathogens.len()) {
            return Err(Error::Dimension(format!(
                "SS matrix is {:?}, expected ({n}, {})",
                ss.dim(),
                ss_pathogens.len()
            )));
        }
        if x_design.nrows() != n || x_names.len() != x_design.ncols() {
            return Err(Error::Dimension("etiology covariate design does not match subjects/names".into()));
        }
        if w_design.nrows() != n || w_names.len() != w_design.ncols() {
            return Err(Error::Dimension("subclass covariate design does not match subjects/names".into()));
        }
        if let Some(v) = brs.iter().find(|v| **v > 1) {
            return Err(Error::Data(format!("non-binary BrS value {v}")));
        }
        if let Some(&s) = ss_pathogens.iter().find(|&&s| s >= j) {
            return Err(Error::Data(format!("SS pathogen index {s} out of range")));
        }
        if ss.iter().flatten().any(|v| *v > 1) {
            return Err(Error::Data("non-binary SS value".into()));
        }
        let n_cases = y.iter().filter(|c| **c).count();
        if n_cases == 0 {
            return Err(Error::Data("at least one case required".into()));
        }
        if n_cases == n {
            return Err(Error::Data("at least one control required".into()));
        }
        for (i, &case) in y.iter().enumerate() {
            if !case {
                if ss.row(i).iter().any(Option::is_some) {
                    return Err(Error::Data(format!("silver-standard on control (row {})", i + 1)));
                }
                x_design.row_mut(i).fill(0.0);
            }
        }
        if x_design.iter().chain(w_design.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite covariate value".into()));
        }
        Ok(Self { pathogens, brs, ss_pathogens, ss, y, x_names, x_design, w_names, w_design })
    }

    pub fn n_subjects(&self) -> usize {
        self.y.len()
    }

    pub fn n_pathogens(&self) -> usize {
        self.pathogens.len()
    }

    pub fn pathogens(&self) -> &[String] {
        &self.pathogens
    }

    pub fn brs(&self) -> &Array2<u8> {
        &self.brs
    }

    pub fn ss_pathogens(&self) -> &[usize] {
        &self.ss_pathogens
    }

    pub fn ss(&self) -> &Array2<Option<u8>> {
        &self.ss
    }

    pub fn y(&self) -> &[bool] {
        &self.y
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn x_design(&self) -> &Array2<f64> {
        &self.x_design
    }

    pub fn w_names(&self) -> &[String] {
        &self.w_names
    }

    pub fn w_design(&self) -> &Array2<f64> {
        &self.w_design
    }

    pub fn n_cases(&self) -> usize {
        self.y.iter().filter(|c| **c).count()
    }

    pub fn n_controls(&self) -> usize {
        self.n_subjects() - self.n_cases()
    }

    pub fn case_indices(&self) -> Vec<usize> {
        self.y.iter().enumerate().filter(|(_, c)| **c).map(|(i, _)| i).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        self.y.iter().enumerate().filter(|(_, c)| !**c).map(|(i, _)| i).collect()
    }

    pub fn load_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        load_dataset(file)
    }

    pub fn store_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        store_dataset(self, file)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ColumnKind {
    Y,
    Brs(usize),
    Ss(usize),
    X(usize),
    W(usize),
}

fn parse_binary(field: &str, what: &str, row: usize) -> Result<u8> {
    match field.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        "" => Err(Error::Data(format!("missing {what} value on row {row}; missing BrS measurements are not supported"))),
        other => Err(Error::Data(format!("non-binary {what} value '{other}' on row {row}"))),
    }
}

/// Parses a dataset from CSV, validating every entry.
pub fn load_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut pathogens = Vec::new();
    let mut ss_names = Vec::new();
    let mut x_names = Vec::new();
    let mut w_names = Vec::new();
    let mut kinds = Vec::with_capacity(headers.len());
    let mut seen = HashSet::new();
    for h in headers.iter() {
        let h = h.trim();
        if !seen.insert(h.to_string()) {
            return Err(Error::Data(format!("duplicate column '{h}'")));
        }
        let kind = if h == "y" {
            ColumnKind::Y
        } else if let Some(name) = h.strip_prefix("brs_") {
            pathogens.push(name.to_string());
            ColumnKind::Brs(pathogens.len() - 1)
        } else if let Some(name) = h.strip_prefix("ss_") {
            ss_names.push(name.to_string());
            ColumnKind::Ss(ss_names.len() - 1)
        } else if let Some(name) = h.strip_prefix("x_") {
            x_names.push(name.to_string());
            ColumnKind::X(x_names.len() - 1)
        } else if let Some(name) = h.strip_prefix("w_") {
            w_names.push(name.to_string());
            ColumnKind::W(w_names.len() - 1)
        } else {
            return Err(Error::Data(format!("unrecognized column '{h}'")));
        };
        kinds.push(kind);
    }
    if !kinds.contains(&ColumnKind::Y) {
        return Err(Error::Data("missing 'y' column".into()));
    }
    let ss_pathogens = ss_names
        .iter()
        .map(|s| {
            pathogens
                .iter()
                .position(|p| p == s)
                .ok_or_else(|| Error::Data(format!("SS column 'ss_{s}' has no matching BrS pathogen")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut y = Vec::new();
    let mut brs = Vec::new();
    let mut ss = Vec::new();
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != kinds.len() {
            return Err(Error::Data(format!("row {row} has {} fields, expected {}", record.len(), kinds.len())));
        }
        let mut brs_row = vec![0u8; pathogens.len()];
        let mut ss_row = vec![None; ss_names.len()];
        let mut x_row = vec![0.0; x_names.len()];
        let mut w_row = vec![0.0; w_names.len()];
        let mut case = false;
        for (field, kind) in record.iter().zip(&kinds) {
            match *kind {
                ColumnKind::Y => case = parse_binary(field, "y", row)? == 1,
                ColumnKind::Brs(j) => brs_row[j] = parse_binary(field, "BrS", row)?,
                ColumnKind::Ss(j) => {
                    ss_row[j] = if field.trim().is_empty() { None } else { Some(parse_binary(field, "SS", row)?) }
                }
                ColumnKind::X(j) => x_row[j] = parse_float(field, row)?,
                ColumnKind::W(j) => w_row[j] = parse_float(field, row)?,
            }
        }
        y.push(case);
        brs.extend(brs_row);
        ss.extend(ss_row);
        xs.extend(x_row);
        ws.extend(w_row);
    }
    let n = y.len();
    let to_matrix = |v, cols| Array2::from_shape_vec((n, cols), v).map_err(|e| Error::Dimension(e.to_string()));
    let dataset = Dataset::new(
        pathogens.clone(),
        Array2::from_shape_vec((n, pathogens.len()), brs).map_err(|e| Error::Dimension(e.to_string()))?,
        ss_pathogens,
        Array2::from_shape_vec((n, ss_names.len()), ss).map_err(|e| Error::Dimension(e.to_string()))?,
        y,
        x_names.clone(),
        to_matrix(xs, x_names.len())?,
        w_names.clone(),
        to_matrix(ws, w_names.len())?,
    )?;
    log::info!("loaded {} cases and {} controls on {} pathogens", dataset.n_cases(), dataset.n_controls(), dataset.n_pathogens());
    Ok(dataset)
}

fn parse_float(field: &str, row: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Data(format!("non-numeric covariate '{field}' on row {row}")))
}

/// Writes a dataset in canonical column order: `y`, `brs_*`, `ss_*`, `x_*`, `w_*`.
pub fn store_dataset<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["y".to_string()];
    header.extend(dataset.pathogens.iter().map(|p| format!("brs_{p}")));
    header.extend(dataset.ss_pathogens.iter().map(|&j| format!("ss_{}", dataset.pathogens[j])));
    header.extend(dataset.x_names.iter().map(|p| format!("x_{p}")));
    header.extend(dataset.w_names.iter().map(|p| format!("w_{p}")));
    wtr.write_record(&header)?;
    for i in 0..dataset.n_subjects() {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(if dataset.y[i] { "1".to_string() } else { "0".to_string() });
        rec.extend(dataset.brs.row(i).iter().map(|v| v.to_string()));
        rec.extend(dataset.ss.row(i).iter().map(|v| v.map(|b| b.to_string()).unwrap_or_default()));
        rec.extend(dataset.x_design.row(i).iter().map(|v| v.to_string()));
        rec.extend(dataset.w_design.row(i).iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Affine transform applied to a continuous covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub scale: f64,
}

impl Standardization {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.scale
    }
}

/// Centers to sample mean 0 and scales to sample standard deviation 1.
pub fn standardize_continuous(column: &[f64]) -> Result<(Vec<f64>, Standardization)> {
    if column.len() < 2 {
        return Err(Error::Degenerate("degenerate continuous covariate: fewer than two values".into()));
    }
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let scale = var.sqrt();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Degenerate("degenerate continuous covariate".into()));
    }
    let t = Standardization { mean, scale };
    Ok((column.iter().map(|v| t.apply(*v)).collect(), t))
}

/// One disease class: the set of pathogens it implicates. Empty means not specified (NoS).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cause(pub Vec<usize>);

impl Cause {
    pub fn contains(&self, pathogen: usize) -> bool {
        self.0.contains(&pathogen)
    }

    pub fn is_nos(&self) -> bool {
        self.0.is_empty()
    }

    pub fn singleton(&self) -> Option<usize> {
        match self.0.as_slice() {
            [j] => Some(*j),
            _ => None,
        }
    }

    pub fn label(&self, pathogens: &[String]) -> String {
        if self.is_nos() {
            "NoS".to_string()
        } else {
            self.0.iter().map(|&j| pathogens.get(j).cloned().unwrap_or_else(|| j.to_string())).collect::<Vec<_>>().join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CauseSpec {
    causes: Vec<Cause>,
}

impl CauseSpec {
    pub fn new(causes: Vec<Vec<usize>>) -> Result<Self> {
        let causes: Vec<Cause> = causes
            .into_iter()
            .map(|mut c| {
                c.sort_unstable();
                c.dedup();
                Cause(c)
            })
            .collect();
        if causes.len() < 2 {
            return Err(Error::Spec(format!("need at least 2 causes, got {}", causes.len())));
        }
        for (a, ca) in causes.iter().enumerate() {
            if causes[..a].contains(ca) {
                return Err(Error::Spec(format!("duplicate cause {:?}", ca.0)));
            }
        }
        Ok(Self { causes })
    }

    /// One single-pathogen cause per pathogen.
    pub fn singletons(n_pathogens: usize) -> Result<Self> {
        Self::new((0..n_pathogens).map(|j| vec![j]).collect())
    }

    pub fn validate(&self, n_pathogens: usize) -> Result<()> {
        if self.causes.len() < 2 {
            return Err(Error::Spec("need at least 2 causes".into()));
        }
        for c in &self.causes {
            if let Some(&j) = c.0.iter().find(|&&j| j >= n_pathogens) {
                return Err(Error::Spec(format!("cause refers to pathogen {j} but only {n_pathogens} measured")));
            }
        }
        for (a, ca) in self.causes.iter().enumerate() {
            if self.causes[..a].contains(ca) {
                return Err(Error::Spec(format!("duplicate cause {:?}", ca.0)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.causes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.causes.is_empty()
    }

    pub fn causes(&self) -> &[Cause] {
        &self.causes
    }

    pub fn get(&self, l: usize) -> &Cause {
        &self.causes[l]
    }

    /// `mask[l][j]` is true iff pathogen `j` is causative in class `l`.
    pub fn causal_mask(&self, n_pathogens: usize) -> Vec<Vec<bool>> {
        self.causes.iter().map(|c| (0..n_pathogens).map(|j| c.contains(j)).collect()).collect()
    }
}

/// One additive term in a regression formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Term {
    Linear { column: usize },
    Spline { column: usize, df: usize },
}

impl Term {
    pub fn column(&self) -> usize {
        match *self {
            Term::Linear { column } | Term::Spline { column, .. } => column,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub causes: CauseSpec,
    pub k_subclasses: usize,
    pub etiology_formula: Vec<Term>,
    pub subclass_formula: Vec<Term>,
    #[serde(default)]
    pub ss_enabled: bool,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

impl ModelSpec {
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion { expected: SCHEMA_VERSION, found: self.schema_version });
        }
        if self.k_subclasses < 1 {
            return Err(Error::Spec("k_subclasses must be >= 1".into()));
        }
        self.causes.validate(dataset.n_pathogens())?;
        check_formula(&self.etiology_formula, dataset.x_design().ncols(), "etiology")?;
        check_formula(&self.subclass_formula, dataset.w_design().ncols(), "subclass")?;
        if self.ss_enabled && dataset.ss_pathogens().is_empty() {
            return Err(Error::Spec("ss_enabled but the dataset has no silver-standard columns".into()));
        }
        Ok(())
    }

    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }
}

fn check_formula(formula: &[Term], width: usize, which: &str) -> Result<()> {
    for term in formula {
        if term.column() >= width {
            return Err(Error::Spec(format!(
                "{which} formula refers to column {} but the design has {width} columns",
                term.column()
            )));
        }
        if let Term::Spline { df, .. } = term {
            if *df < crate::splines::MIN_DF {
                return Err(Error::Spec(format!("{which} spline d.f. must be >= {}, got {df}", crate::splines::MIN_DF)));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingHyper {
    pub a_tau: f64,
    pub b_tau: f64,
    pub a_tau_inv_pareto: f64,
    pub b_tau_inv_pareto: f64,
}

impl Default for SmoothingHyper {
    fn default() -> Self {
        Self { a_tau: 3.0, b_tau: 2.0, a_tau_inv_pareto: 1.5, b_tau_inv_pareto: 400.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub schema_version: u32,
    /// Either one pair shared by every pathogen or one pair per pathogen.
    pub tpr_brs: Vec<BetaParams>,
    /// Either one pair shared by every SS pathogen or one per SS column.
    pub tpr_ss: Vec<BetaParams>,
    pub fpr: BetaParams,
    /// Degrees of freedom of the half-t intercept prior.
    pub intercept_df: f64,
    /// Scale of the half-t intercept prior.
    pub intercept_scale: f64,
    pub k_beta: f64,
    pub smoothing: SmoothingHyper,
    pub rho_etiology: BetaParams,
    pub rho_subclass: BetaParams,
    /// Standard deviation of the normal prior on linear coefficients.
    pub linear_sd: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tpr_brs: vec![BetaParams::new(7.13, 1.32)],
            tpr_ss: vec![BetaParams::new(7.59, 58.97)],
            fpr: BetaParams::new(1.0, 1.0),
            intercept_df: 1.0,
            intercept_scale: 10.0,
            k_beta: 4.0,
            smoothing: SmoothingHyper::default(),
            rho_etiology: BetaParams::new(1.0, 0.5),
            rho_subclass: BetaParams::new(0.5, 1.0),
            linear_sd: 3.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self, n_pathogens: usize, n_ss: usize) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion { expected: SCHEMA_VERSION, found: self.schema_version });
        }
        let check_len = |v: &[BetaParams], n: usize, what: &str| {
            if v.len() == 1 || v.len() == n {
                Ok(())
            } else {
                Err(Error::Prior(format!("{what} needs 1 or {n} Beta pairs, got {}", v.len())))
            }
        };
        check_len(&self.tpr_brs, n_pathogens, "tpr_brs")?;
        if n_ss > 0 {
            check_len(&self.tpr_ss, n_ss, "tpr_ss")?;
        }
        let betas = self
            .tpr_brs
            .iter()
            .chain(&self.tpr_ss)
            .chain([&self.fpr, &self.rho_etiology, &self.rho_subclass]);
        for b in betas {
            if !(b.a > 0.0 && b.b > 0.0) {
                return Err(Error::Prior(format!("Beta parameters must be positive, got ({}, {})", b.a, b.b)));
            }
        }
        let positives = [
            ("intercept_df", self.intercept_df),
            ("intercept_scale", self.intercept_scale),
            ("k_beta", self.k_beta),
            ("a_tau", self.smoothing.a_tau),
            ("b_tau", self.smoothing.b_tau),
            ("a_tau_inv_pareto", self.smoothing.a_tau_inv_pareto),
            ("b_tau_inv_pareto", self.smoothing.b_tau_inv_pareto),
            ("linear_sd", self.linear_sd),
        ];
        for (name, v) in positives {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Prior(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn tpr_brs_for(&self, j: usize) -> BetaParams {
        if self.tpr_brs.len() == 1 {
            self.tpr_brs[0]
        } else {
            self.tpr_brs[j]
        }
    }

    pub fn tpr_ss_for(&self, s: usize) -> BetaParams {
        if self.tpr_ss.len() == 1 {
            self.tpr_ss[0]
        } else {
            self.tpr_ss[s]
        }
    }

    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
