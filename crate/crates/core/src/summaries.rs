//! Posterior functionals: PEF curves, overall PEFs, fitted positive rates,
//! individual etiologic fractions and replication metrics.
//!
//! Quantiles use type-7 linear interpolation; credible intervals are
//! equal-tailed 95%.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::CauseSpec;
use crate::design::{PreparedData, SideDesign};
use crate::error::{Error, Result};
use crate::mcmc::DrawsStore;
use crate::model::{control_positive_rate, individual_etiology, positive_rate_curve, Params};

pub const LOWER: f64 = 0.025;
pub const UPPER: f64 = 0.975;

/// Type-7 quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Posterior mean, standard deviation and equal-tailed 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn from_draws(draws: &[f64]) -> Self {
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sd = if draws.len() > 1 { (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        let mut sorted = draws.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self { mean, sd, lo: quantile_sorted(&sorted, LOWER), hi: quantile_sorted(&sorted, UPPER) }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.lo <= truth && truth <= self.hi
    }
}

/// Decoded model parameters of every kept draw, chains concatenated.
pub fn posterior_params(draws: &DrawsStore) -> Result<Vec<Params<f64>>> {
    Ok(draws.states()?.into_iter().map(|s| s.params).collect())
}

fn check_draws(draws: &[Params<f64>]) -> Result<()> {
    if draws.is_empty() {
        return Err(Error::Data("no posterior draws".into()));
    }
    Ok(())
}

/// One summary row of a tidy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub grid: usize,
    pub label: String,
    pub band: Band,
}

pub fn write_tidy<W: Write>(rows: &[TidyRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["grid", "label", "mean", "sd", "lo", "hi"])?;
    for r in rows {
        w.write_record([
            r.grid.to_string(),
            r.label.clone(),
            r.band.mean.to_string(),
            r.band.sd.to_string(),
            r.band.lo.to_string(),
            r.band.hi.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

/// Maps raw covariate rows to feature rows of a fitted design.
pub fn featurize(design: &SideDesign, raw: &Array2<f64>) -> Result<Vec<Vec<f64>>> {
    Ok(design.feature_matrix(raw)?.rows().into_iter().map(|r| r.to_vec()).collect())
}

/// `result[g][l]`: posterior band of `pi_l` at etiology feature row `g`.
pub fn pef_curve(draws: &[Params<f64>], x_grid: &[Vec<f64>]) -> Result<Vec<Vec<Band>>> {
    check_draws(draws)?;
    let n_x = draws[0].regression.etiology.first().map_or(0, Vec::len);
    x_grid
        .iter()
        .map(|x| {
            if x.len() != n_x {
                return Err(Error::Dimension(format!("grid row has {} features, formula has {n_x}", x.len())));
            }
            let per_draw: Vec<Vec<f64>> = draws.iter().map(|p| p.regression.etiology_probs(x)).collect::<Result<_>>()?;
            let l = per_draw[0].len();
            Ok((0..l).map(|c| Band::from_draws(&per_draw.iter().map(|d| d[c]).collect::<Vec<_>>())).collect())
        })
        .collect()
}

/// Per-draw overall PEF `N_1^{-1} sum_{cases} pi(X_i)`; `result[b][l]`.
pub fn overall_pef_draws(draws: &[Params<f64>], data: &PreparedData<f64>) -> Result<Vec<Vec<f64>>> {
    check_draws(draws)?;
    if data.cases.is_empty() {
        return Err(Error::Data("no case rows".into()));
    }
    // weight each unique feature row by its number of cases
    let mut weight = vec![0.0; data.x_features.nrows()];
    for &i in &data.cases {
        weight[data.x_row[i]] += 1.0;
    }
    let n1 = data.cases.len() as f64;
    draws
        .iter()
        .map(|p| {
            let mut acc = vec![0.0; data.n_causes()];
            for (r, &w) in weight.iter().enumerate() {
                if w > 0.0 {
                    let pi = p.regression.etiology_probs(data.x_features.row(r).as_slice().expect("standard layout"))?;
                    for (a, v) in acc.iter_mut().zip(pi) {
                        *a += w * v;
                    }
                }
            }
            Ok(acc.into_iter().map(|a| a / n1).collect())
        })
        .collect()
}

pub fn overall_pef(draws: &[Params<f64>], data: &PreparedData<f64>) -> Result<Vec<Band>> {
    let per = overall_pef_draws(draws, data)?;
    let l = data.n_causes();
    Ok((0..l).map(|c| Band::from_draws(&per.iter().map(|d| d[c]).collect::<Vec<_>>())).collect())
}

/// Case and control positive-rate bands for every pathogen at each `(x, w)` feature row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCurves {
    /// `case[g][j]`.
    pub case: Vec<Vec<Band>>,
    pub control: Vec<Vec<Band>>,
}

pub fn fitted_positive_rate_curves(
    draws: &[Params<f64>],
    x_grid: &[Vec<f64>],
    w_grid: &[Vec<f64>],
    causes: &CauseSpec,
) -> Result<RateCurves> {
    check_draws(draws)?;
    if x_grid.len() != w_grid.len() {
        return Err(Error::Dimension("x and w grids differ in length".into()));
    }
    let j = draws[0].rates.n_pathogens();
    let l_of: Vec<usize> = (0..j)
        .map(|p| {
            (0..causes.len())
                .find(|&l| causes.get(l).0 == [p])
                .ok_or_else(|| Error::Spec(format!("pathogen {p} is not a singleton cause")))
        })
        .collect::<Result<_>>()?;
    let mut case = Vec::with_capacity(x_grid.len());
    let mut control = Vec::with_capacity(x_grid.len());
    for (x, w) in x_grid.iter().zip(w_grid) {
        let mut crow = Vec::with_capacity(j);
        let mut urow = Vec::with_capacity(j);
        for p in 0..j {
            let cd: Vec<f64> = draws.iter().map(|d| positive_rate_curve(x, w, l_of[p], d, causes)).collect::<Result<_>>()?;
            let ud: Vec<f64> = draws.iter().map(|d| control_positive_rate(w, p, d)).collect::<Result<_>>()?;
            crow.push(Band::from_draws(&cd));
            urow.push(Band::from_draws(&ud));
        }
        case.push(crow);
        control.push(urow);
    }
    Ok(RateCurves { case, control })
}

/// Posterior mean cause probabilities for the given subjects (all cases when `None`).
pub fn ief_summary(draws: &[Params<f64>], data: &PreparedData<f64>, subjects: Option<&[usize]>) -> Result<Vec<Vec<f64>>> {
    check_draws(draws)?;
    let subjects = subjects.unwrap_or(&data.cases);
    subjects
        .iter()
        .map(|&i| {
            if i >= data.n_subjects() || !data.is_case[i] {
                return Err(Error::Data(format!("subject {i} is not a case")));
            }
            let mut acc = vec![0.0; data.n_causes()];
            for p in draws {
                for (a, v) in acc.iter_mut().zip(individual_etiology(data, i, p)?) {
                    *a += v;
                }
            }
            Ok(acc.into_iter().map(|a| a / draws.len() as f64).collect())
        })
        .collect()
}

/// Posterior band of `log(pi_a / pi_b)` at profile `x1` minus the same at `x0`.
pub fn log_odds_contrast(draws: &[Params<f64>], a: usize, b: usize, x1: &[f64], x0: &[f64]) -> Result<Band> {
    check_draws(draws)?;
    let v: Vec<f64> = draws
        .iter()
        .map(|p| {
            let f1 = p.regression.etiology_predictors(x1);
            let f0 = p.regression.etiology_predictors(x0);
            (f1[a] - f1[b]) - (f0[a] - f0[b])
        })
        .collect();
    Ok(Band::from_draws(&v))
}

/// Per-draw PMSE contribution: mean over draws and cases of squared PEF error.
pub fn pmse(draws: &[Params<f64>], data: &PreparedData<f64>, truth_pi: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_draws(draws)?;
    if truth_pi.len() != data.cases.len() {
        return Err(Error::Dimension("one truth row per case required".into()));
    }
    let l = data.n_causes();
    let mut acc = vec![0.0; l];
    for p in draws {
        for (c, &i) in data.cases.iter().enumerate() {
            let pi = p.regression.etiology_probs(data.x_of(i))?;
            for ll in 0..l {
                acc[ll] += (pi[ll] - truth_pi[c][ll]).powi(2);
            }
        }
    }
    let count = (draws.len() * data.cases.len()) as f64;
    Ok(acc.into_iter().map(|a| a / count).collect())
}

/// Posterior summary of one estimand in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub estimate: Vec<Band>,
    pub truth: Vec<f64>,
    #[serde(default)]
    pub pmse: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauseMetrics {
    pub cause: usize,
    /// Percent relative bias of the posterior mean in each replication.
    pub relative_bias: Vec<f64>,
    pub median_relative_bias: f64,
    pub mean_relative_bias: f64,
    pub mean_posterior: f64,
    pub mean_sd: f64,
    pub covered: usize,
    pub replications: usize,
    pub coverage: f64,
    /// Wilson 95% interval for the coverage probability.
    pub coverage_ci: (f64, f64),
    pub mean_pmse: Option<f64>,
}

/// Wilson score interval at 95%.
pub fn binomial_ci(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let center = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

pub fn replication_metrics(reps: &[Replicate]) -> Result<Vec<CauseMetrics>> {
    let l = reps.first().ok_or_else(|| Error::Data("no replications".into()))?.truth.len();
    if reps.iter().any(|r| r.truth.len() != l || r.estimate.len() != l || r.pmse.as_ref().is_some_and(|p| p.len() != l)) {
        return Err(Error::Dimension("replications disagree on the number of causes".into()));
    }
    let n = reps.len();
    Ok((0..l)
        .map(|c| {
            let relative_bias: Vec<f64> = reps.iter().map(|r| 100.0 * (r.estimate[c].mean - r.truth[c]) / r.truth[c]).collect();
            let mut sorted = relative_bias.clone();
            sorted.sort_by(f64::total_cmp);
            let covered = reps.iter().filter(|r| r.estimate[c].covers(r.truth[c])).count();
            let pmses: Vec<f64> = reps.iter().filter_map(|r| r.pmse.as_ref().map(|p| p[c])).collect();
            CauseMetrics {
                cause: c,
                median_relative_bias: quantile_sorted(&sorted, 0.5),
                mean_relative_bias: relative_bias.iter().sum::<f64>() / n as f64,
                relative_bias,
                mean_posterior: reps.iter().map(|r| r.estimate[c].mean).sum::<f64>() / n as f64,
                mean_sd: reps.iter().map(|r| r.estimate[c].sd).sum::<f64>() / n as f64,
                covered,
                replications: n,
                coverage: covered as f64 / n as f64,
                coverage_ci: binomial_ci(covered, n),
                mean_pmse: (!pmses.is_empty()).then(|| pmses.iter().sum::<f64>() / pmses.len() as f64),
            }
        })
        .collect())
}
