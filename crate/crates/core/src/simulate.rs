//! Ground-truth generators for case-control etiology simulations.
//!
//! A [`TruthConfig`] describes subjects in discrete strata (optionally with a
//! uniformly drawn enrollment date), true etiology and subclass-weight
//! functions of `(stratum, t)`, and true measurement rates. The named
//! scenarios build specific configurations.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CauseSpec, Dataset, ModelSpec, PriorConfig, Term, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::mcmc::chain_rng;
use crate::model::{softmax, stick_break};
use crate::priors::BetaParams;
use crate::special::logistic;

/// Smooth function of standardized date `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Curve {
    /// `amplitude * sin(frequency * pi * (t - shift))`.
    Sine { amplitude: f64, frequency: f64, shift: f64 },
    /// `scale * e^(rate t) / (1 + e^(rate t)) + offset`.
    Logistic { scale: f64, rate: f64, offset: f64 },
}

impl Curve {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Curve::Sine { amplitude, frequency, shift } => amplitude * (frequency * std::f64::consts::PI * (t - shift)).sin(),
            Curve::Logistic { scale, rate, offset } => scale * logistic(rate * t) + offset,
        }
    }
}

/// Linear predictor `stratum[s] + curve(t)`, with `t` negated when `reflect` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub stratum: Vec<f64>,
    #[serde(default)]
    pub curve: Option<Curve>,
    #[serde(default)]
    pub reflect: bool,
}

impl Predictor {
    pub fn constant(values: Vec<f64>) -> Self {
        Self { stratum: values, curve: None, reflect: false }
    }

    pub fn eval(&self, s: usize, t: f64) -> f64 {
        let t = if self.reflect { -t } else { t };
        self.stratum[s] + self.curve.map_or(0.0, |c| c.eval(t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum EtiologyTruth {
    /// `pi = softmax(phi_1, ..., phi_L)`.
    Softmax { predictors: Vec<Predictor> },
    /// `L - 1` logit break fractions; the last class takes the remainder.
    StickBreaking { predictors: Vec<Predictor> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub n_cases: usize,
    pub n_controls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthConfig {
    pub schema_version: u32,
    pub name: String,
    pub pathogens: Vec<String>,
    pub causes: CauseSpec,
    pub strata: Vec<Stratum>,
    /// Enrollment window in days; dates are uniform integers over it.
    #[serde(default)]
    pub date_window: Option<u32>,
    pub etiology: EtiologyTruth,
    /// `K - 1` stick-breaking logits for controls.
    pub control_subclass: Vec<Predictor>,
    pub case_subclass: Vec<Predictor>,
    /// `tpr[j][k]`.
    pub tpr: Vec<Vec<f64>>,
    pub fpr: Vec<Vec<f64>>,
    #[serde(default)]
    pub ss_pathogens: Vec<usize>,
    #[serde(default)]
    pub tpr_ss: Vec<f64>,
    pub seed: u64,
    /// Free-form scenario parameters recorded for provenance.
    #[serde(default)]
    pub notes: serde_json::Map<String, serde_json::Value>,
}

impl TruthConfig {
    pub fn n_pathogens(&self) -> usize {
        self.pathogens.len()
    }

    pub fn n_subclasses(&self) -> usize {
        self.tpr.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.n_pathogens();
        let k = self.n_subclasses();
        let bad = |m: &str| Err(Error::Spec(format!("truth config '{}': {m}", self.name)));
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion { expected: SCHEMA_VERSION, found: self.schema_version });
        }
        self.causes.validate(j)?;
        if self.strata.is_empty() || self.strata.iter().any(|s| s.n_cases == 0 && s.n_controls == 0) {
            return bad("every stratum needs at least one subject");
        }
        if k == 0 || self.tpr.len() != j || self.fpr.len() != j || self.tpr.iter().chain(&self.fpr).any(|r| r.len() != k) {
            return bad("tpr/fpr must be J x K with K >= 1");
        }
        let probs = self.tpr.iter().chain(&self.fpr).flatten().chain(&self.tpr_ss);
        if probs.clone().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("rates must lie in [0, 1]");
        }
        if self.ss_pathogens.len() != self.tpr_ss.len() || self.ss_pathogens.iter().any(|&p| p >= j) {
            return bad("ss_pathogens and tpr_ss disagree");
        }
        let l = self.causes.len();
        let (preds, need) = match &self.etiology {
            EtiologyTruth::Softmax { predictors } => (predictors, l),
            EtiologyTruth::StickBreaking { predictors } => (predictors, l - 1),
        };
        if preds.len() != need {
            return bad("wrong number of etiology predictors");
        }
        if self.control_subclass.len() != k - 1 || self.case_subclass.len() != k - 1 {
            return bad("subclass predictors must number K - 1 per side");
        }
        let all = preds.iter().chain(&self.control_subclass).chain(&self.case_subclass);
        for p in all {
            if p.stratum.len() != self.strata.len() || p.stratum.iter().any(|v| !v.is_finite()) {
                return bad("predictor needs one finite value per stratum");
            }
            if p.curve.is_some() && self.date_window.is_none() {
                return bad("date curves need a date window");
            }
        }
        Ok(())
    }

    /// True `pi(s, t)`.
    pub fn etiology_probs(&self, s: usize, t: f64) -> Vec<f64> {
        match &self.etiology {
            EtiologyTruth::Softmax { predictors } => softmax(&predictors.iter().map(|p| p.eval(s, t)).collect::<Vec<_>>()),
            EtiologyTruth::StickBreaking { predictors } => {
                let g: Vec<f64> = predictors.iter().map(|p| logistic(p.eval(s, t))).collect();
                stick_break(&g).expect("fractions in [0, 1]")
            }
        }
    }

    /// True subclass weights for cases (`case = true`) or controls.
    pub fn subclass_weights(&self, case: bool, s: usize, t: f64) -> Vec<f64> {
        let preds = if case { &self.case_subclass } else { &self.control_subclass };
        let g: Vec<f64> = preds.iter().map(|p| logistic(p.eval(s, t))).collect();
        stick_break(&g).expect("fractions in [0, 1]")
    }

    /// Standardized date for a raw day index.
    pub fn standardize_date(&self, day: u32) -> f64 {
        let d = self.date_window.unwrap_or(1) as f64;
        (day as f64 - (d - 1.0) / 2.0) / ((d * d - 1.0) / 12.0).sqrt().max(f64::MIN_POSITIVE)
    }
}

/// Latent truth of one simulated subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub subject: usize,
    pub case: bool,
    pub stratum: usize,
    pub day: Option<u32>,
    pub t: f64,
    pub class: Option<usize>,
    pub subclass: usize,
    /// True etiology at this subject's covariates (cases only).
    pub pi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub dataset: Dataset,
    pub truth: Vec<TruthRecord>,
}

impl Simulated {
    /// `N_1^{-1} sum_{cases} pi0(X_i)`.
    pub fn overall_pef(&self) -> Vec<f64> {
        let cases: Vec<&TruthRecord> = self.truth.iter().filter(|r| r.case).collect();
        let l = cases.first().map_or(0, |r| r.pi.len());
        (0..l).map(|c| cases.iter().map(|r| r.pi[c]).sum::<f64>() / cases.len() as f64).collect()
    }

    pub fn write_truth<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let l = self.truth.iter().find(|r| r.case).map_or(0, |r| r.pi.len());
        let mut header: Vec<String> = ["subject", "y", "stratum", "day", "t", "class", "subclass"].map(String::from).to_vec();
        header.extend((0..l).map(|c| format!("pi_{c}")));
        w.write_record(&header)?;
        for r in &self.truth {
            let mut rec = vec![
                r.subject.to_string(),
                u8::from(r.case).to_string(),
                r.stratum.to_string(),
                r.day.map(|d| d.to_string()).unwrap_or_default(),
                r.t.to_string(),
                r.class.map(|c| c.to_string()).unwrap_or_default(),
                r.subclass.to_string(),
            ];
            rec.extend((0..l).map(|c| r.pi.get(c).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
        Ok(())
    }
}

fn draw_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Column names of the generated designs: an intercept, stratum dummies for levels `2..`, then `t`.
pub fn design_names(truth: &TruthConfig) -> Vec<String> {
    let mut names = vec!["one".to_string()];
    names.extend((1..truth.strata.len()).map(|s| format!("s{}", s + 1)));
    if truth.date_window.is_some() {
        names.push("t".into());
    }
    names
}

/// Simulates one dataset. Deterministic in `truth.seed`.
pub fn generate(truth: &TruthConfig) -> Result<Simulated> {
    truth.validate()?;
    let mut rng = chain_rng(truth.seed, 0);
    let j = truth.n_pathogens();
    let causal = truth.causes.causal_mask(j);
    let names = design_names(truth);
    let n: usize = truth.strata.iter().map(|s| s.n_cases + s.n_controls).sum();
    let width = names.len();
    let mut brs = Array2::zeros((n, j));
    let mut ss = Array2::from_elem((n, truth.ss_pathogens.len()), None);
    let mut design = Array2::zeros((n, width));
    let mut y = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let mut i = 0;
    for (s, stratum) in truth.strata.iter().enumerate() {
        for case in std::iter::repeat_n(true, stratum.n_cases).chain(std::iter::repeat_n(false, stratum.n_controls)) {
            let day = truth.date_window.map(|d| rng.random_range(0..d));
            let t = day.map_or(0.0, |d| truth.standardize_date(d));
            let weights = truth.subclass_weights(case, s, t);
            let (class, pi) = if case {
                let pi = truth.etiology_probs(s, t);
                (Some(draw_index(&mut rng, &pi)), pi)
            } else {
                (None, vec![])
            };
            let z = draw_index(&mut rng, &weights);
            for jj in 0..j {
                let p = match class {
                    Some(c) if causal[c][jj] => truth.tpr[jj][z],
                    _ => truth.fpr[jj][z],
                };
                brs[[i, jj]] = u8::from(rng.random::<f64>() < p);
            }
            if let Some(c) = class {
                for (col, (&p, &rate)) in truth.ss_pathogens.iter().zip(&truth.tpr_ss).enumerate() {
                    ss[[i, col]] = Some(u8::from(causal[c][p] && rng.random::<f64>() < rate));
                }
            }
            design[[i, 0]] = 1.0;
            if s >= 1 {
                design[[i, s]] = 1.0;
            }
            if truth.date_window.is_some() {
                design[[i, width - 1]] = t;
            }
            y.push(case);
            records.push(TruthRecord { subject: i, case, stratum: s, day, t, class, subclass: z, pi });
            i += 1;
        }
    }
    let dataset = Dataset::new(
        truth.pathogens.clone(),
        brs,
        truth.ss_pathogens.clone(),
        ss,
        y,
        names.clone(),
        design.clone(),
        names,
        design,
    )?;
    Ok(Simulated { dataset, truth: records })
}

fn pathogen_names(j: usize) -> Vec<String> {
    (0..j).map(|i| ((b'A' + i as u8) as char).to_string()).collect()
}

fn filled(j: usize, row: &[f64]) -> Vec<Vec<f64>> {
    vec![row.to_vec(); j]
}

/// Simulation I: nine singleton causes with stick-breaking etiology over a
/// two-level stratum `S` and standardized date `t`, `K = 2` true subclasses.
pub fn scenario_simulation_i(gamma_nu1: f64, seed: u64) -> TruthConfig {
    let beta = 0.1;
    let j = 9;
    let date_curve = Curve::Logistic { scale: 4.0, rate: 3.0, offset: -0.5 };
    let mut predictors = vec![
        Predictor { stratum: vec![beta, 0.0], curve: Some(Curve::Sine { amplitude: 1.0, frequency: 8.0 / 7.0, shift: 0.5 }), reflect: false },
        Predictor { stratum: vec![beta, 0.0], curve: Some(date_curve), reflect: false },
    ];
    predictors.extend((2..8).map(|_| Predictor::constant(vec![beta, 0.0])));
    let nu = Predictor { stratum: vec![gamma_nu1, 0.0], curve: Some(date_curve), reflect: false };
    let eta = Predictor { reflect: true, ..nu.clone() };
    let mut notes = serde_json::Map::new();
    notes.insert("gamma_nu1".into(), gamma_nu1.into());
    notes.insert("beta".into(), beta.into());
    TruthConfig {
        schema_version: SCHEMA_VERSION,
        name: "sim1".into(),
        pathogens: pathogen_names(j),
        causes: CauseSpec::singletons(j).expect("j >= 2"),
        strata: vec![Stratum { n_cases: 500, n_controls: 500 }; 2],
        date_window: Some(300),
        etiology: EtiologyTruth::StickBreaking { predictors },
        control_subclass: vec![nu],
        case_subclass: vec![eta],
        tpr: filled(j, &[0.95, 0.95]),
        fpr: filled(j, &[0.5, 0.05]),
        ss_pathogens: vec![],
        tpr_ss: vec![],
        seed,
        notes,
    }
}

pub const SIM2_GRID_SIZE: usize = 48;

/// One point of the Simulation II grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n_causes: usize,
    /// Cases and controls per covariate level.
    pub n_per_level: usize,
    /// `false` for coefficient set i, `true` for set ii.
    pub coef_set_ii: bool,
    pub tpr: f64,
    pub fpr: (f64, f64),
}

impl GridPoint {
    /// Grid order: causes, sample size, coefficient set, TPR, FPR pair (last varies fastest).
    pub fn from_index(index: usize) -> Result<Self> {
        if index >= SIM2_GRID_SIZE {
            return Err(Error::Spec(format!("grid index {index} outside 0..{SIM2_GRID_SIZE}")));
        }
        let f = index % 2;
        let t = (index / 2) % 2;
        let c = (index / 4) % 2;
        let n = (index / 8) % 2;
        let l = index / 16;
        Ok(Self {
            n_causes: [3, 6, 9][l],
            n_per_level: [250, 500][n],
            coef_set_ii: c == 1,
            tpr: [0.95, 0.8][t],
            fpr: [(0.5, 0.05), (0.5, 0.15)][f],
        })
    }

    pub fn index(&self) -> Option<usize> {
        (0..SIM2_GRID_SIZE).find(|&i| GridPoint::from_index(i).ok().as_ref() == Some(self))
    }
}

pub const SIM2_BETA_I: ([f64; 6], [f64; 6]) = ([0.0; 6], [-1.5, 0.0, -1.5, -1.5, 0.0, -1.5]);
pub const SIM2_BETA_II: ([f64; 6], [f64; 6]) = ([1.0, 0.0, 1.0, 1.0, 0.0, 1.0], [-1.5, 1.0, -1.5, -1.5, 1.0, -1.5]);
pub const SIM2_GAMMA_CONTROL: (f64, f64) = (-0.5, 1.5);
pub const SIM2_GAMMA_CASE: (f64, f64) = (1.0, -1.5);

fn simulation_ii_with(point: GridPoint, gamma_case: (f64, f64), name: &str, seed: u64) -> TruthConfig {
    let l = point.n_causes;
    let (b0, b1) = if point.coef_set_ii { SIM2_BETA_II } else { SIM2_BETA_I };
    // coefficient vectors have six entries; other cause counts cycle through them
    let predictors = (0..l).map(|c| Predictor::constant(vec![b0[c % 6], b0[c % 6] + b1[c % 6]])).collect();
    let gc = SIM2_GAMMA_CONTROL;
    let mut notes = serde_json::Map::new();
    notes.insert("grid_point".into(), serde_json::to_value(point).expect("serializable"));
    notes.insert("grid_index".into(), point.index().into());
    TruthConfig {
        schema_version: SCHEMA_VERSION,
        name: name.into(),
        pathogens: pathogen_names(l),
        causes: CauseSpec::singletons(l).expect("l >= 2"),
        strata: vec![Stratum { n_cases: point.n_per_level, n_controls: point.n_per_level }; 2],
        date_window: None,
        etiology: EtiologyTruth::Softmax { predictors },
        control_subclass: vec![Predictor::constant(vec![gc.0, gc.0 + gc.1])],
        case_subclass: vec![Predictor::constant(vec![gamma_case.0, gamma_case.0 + gamma_case.1])],
        tpr: filled(l, &[point.tpr, point.tpr]),
        fpr: filled(l, &[point.fpr.0, point.fpr.1]),
        ss_pathogens: vec![],
        tpr_ss: vec![],
        seed,
        notes,
    }
}

/// Simulation II grid point `index` (0-based, `0..48`).
pub fn scenario_simulation_ii(index: usize, seed: u64) -> Result<TruthConfig> {
    Ok(simulation_ii_with(GridPoint::from_index(index)?, SIM2_GAMMA_CASE, "sim2", seed))
}

/// Simulation II with constant case subclass weights.
pub fn scenario_no_covariate_validity(index: usize, seed: u64) -> Result<TruthConfig> {
    Ok(simulation_ii_with(GridPoint::from_index(index)?, (0.0, 0.0), "sim2_nocov_valid", seed))
}

pub const SEVEN_SITE_PEF: [[f64; 6]; 7] = [
    [0.5, 0.2, 0.15, 0.05, 0.05, 0.05],
    [0.2, 0.5, 0.15, 0.05, 0.05, 0.05],
    [0.2, 0.15, 0.5, 0.05, 0.05, 0.05],
    [0.2, 0.15, 0.05, 0.5, 0.05, 0.05],
    [0.2, 0.15, 0.05, 0.05, 0.5, 0.05],
    [0.2, 0.15, 0.05, 0.05, 0.05, 0.5],
    [0.05, 0.2, 0.15, 0.5, 0.05, 0.05],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Strong,
    Weak,
}

/// Seven sites of 500 cases and 500 controls, six singleton causes, `K = 1`.
pub fn scenario_seven_sites(signal: Signal, seed: u64) -> TruthConfig {
    let (tpr, fpr) = match signal {
        Signal::Strong => (0.99, 0.01),
        Signal::Weak => (0.55, 0.45),
    };
    let predictors = (0..6).map(|c| Predictor::constant(SEVEN_SITE_PEF.iter().map(|row| row[c].ln()).collect())).collect();
    let mut notes = serde_json::Map::new();
    notes.insert("signal".into(), serde_json::to_value(signal).expect("serializable"));
    TruthConfig {
        schema_version: SCHEMA_VERSION,
        name: match signal {
            Signal::Strong => "seven_sites_strong".into(),
            Signal::Weak => "seven_sites_weak".into(),
        },
        pathogens: pathogen_names(6),
        causes: CauseSpec::singletons(6).expect("six causes"),
        strata: vec![Stratum { n_cases: 500, n_controls: 500 }; 7],
        date_window: None,
        etiology: EtiologyTruth::Softmax { predictors },
        control_subclass: vec![],
        case_subclass: vec![],
        tpr: filled(6, &[tpr]),
        fpr: filled(6, &[fpr]),
        ss_pathogens: vec![],
        tpr_ss: vec![],
        seed,
        notes,
    }
}

/// Looks up a named scenario. `grid` selects the Simulation II point.
pub fn scenario(name: &str, grid: Option<usize>, seed: u64) -> Result<TruthConfig> {
    match name {
        "sim1" => Ok(scenario_simulation_i(0.1, seed)),
        "sim2" => scenario_simulation_ii(grid.unwrap_or(0), seed),
        "sim2_nocov_valid" => scenario_no_covariate_validity(grid.unwrap_or(0), seed),
        "seven_sites_strong" => Ok(scenario_seven_sites(Signal::Strong, seed)),
        "seven_sites_weak" => Ok(scenario_seven_sites(Signal::Weak, seed)),
        other => Err(Error::Spec(format!("unknown scenario '{other}'"))),
    }
}

pub const SCENARIOS: [&str; 5] = ["sim1", "sim2", "sim2_nocov_valid", "seven_sites_strong", "seven_sites_weak"];

/// Analysis flavour for a simulated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    /// Every generated covariate enters both formulas.
    Regression,
    /// Intercepts only.
    NoCovariate,
}

/// Model and prior settings used for the named scenarios.
pub fn analysis_setup(truth: &TruthConfig, analysis: Analysis) -> (ModelSpec, PriorConfig) {
    let names = design_names(truth);
    let full = |df: usize| -> Vec<Term> {
        names
            .iter()
            .enumerate()
            .map(|(c, n)| if n == "t" { Term::Spline { column: c, df } } else { Term::Linear { column: c } })
            .collect()
    };
    let (etiology_formula, subclass_formula) = match analysis {
        Analysis::Regression => (full(7), full(5)),
        Analysis::NoCovariate => (vec![Term::Linear { column: 0 }], vec![Term::Linear { column: 0 }]),
    };
    let mut priors = PriorConfig::default();
    let k_subclasses = if truth.name.starts_with("seven_sites") {
        priors.tpr_brs = vec![BetaParams::new(6.0, 2.0)];
        1
    } else if truth.name == "sim1" {
        7
    } else {
        3
    };
    let spec = ModelSpec {
        schema_version: SCHEMA_VERSION,
        causes: truth.causes.clone(),
        k_subclasses,
        etiology_formula,
        subclass_formula,
        ss_enabled: !truth.ss_pathogens.is_empty(),
    };
    (spec, priors)
}
