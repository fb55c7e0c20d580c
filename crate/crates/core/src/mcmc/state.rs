//! Sampler state and the flat parameter address book.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Params, RateParams, RegressionParams};

/// Smoothing precision and its component indicator for one spline block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub tau: f64,
    /// Drawn from the flexible (Gamma) component rather than the near-constant one.
    pub flexible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingState {
    /// `[cause][spline term]`.
    pub etiology: Vec<Vec<Smoothing>>,
    /// `[subclass][spline term]`, `K - 1` rows.
    pub control: Vec<Vec<Smoothing>>,
    pub case: Vec<Vec<Smoothing>>,
    pub rho_etiology: f64,
    pub rho_subclass: f64,
}

/// Every quantity the sampler tracks apart from latent allocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    pub params: Params<f64>,
    pub smoothing: SmoothingState,
}

/// Dimensions that fix the flat parameter ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_pathogens: usize,
    pub n_subclasses: usize,
    pub n_ss: usize,
    pub n_causes: usize,
    pub n_x: usize,
    pub n_w: usize,
    pub n_x_splines: usize,
    pub n_w_splines: usize,
}

impl Layout {
    pub fn n_params(&self) -> usize {
        let (j, k, l) = (self.n_pathogens, self.n_subclasses, self.n_causes);
        let k1 = k - 1;
        2 * j * k
            + self.n_ss
            + l * self.n_x
            + 2 * k1 * self.n_w
            + 2 * k1
            + 2 * l * self.n_x_splines
            + 4 * k1 * self.n_w_splines
            + 2
    }

    /// Column names in flat order. Indices are 0-based.
    pub fn names(&self) -> Vec<String> {
        let (j, k, l) = (self.n_pathogens, self.n_subclasses, self.n_causes);
        let k1 = k - 1;
        let mut out = Vec::with_capacity(self.n_params());
        let grid = |out: &mut Vec<String>, name: &str, rows: usize, cols: usize| {
            for r in 0..rows {
                for c in 0..cols {
                    out.push(format!("{name}[{r},{c}]"));
                }
            }
        };
        grid(&mut out, "tpr", j, k);
        grid(&mut out, "fpr", j, k);
        out.extend((0..self.n_ss).map(|s| format!("tpr_ss[{s}]")));
        grid(&mut out, "etiology", l, self.n_x);
        grid(&mut out, "control_subclass", k1, self.n_w);
        grid(&mut out, "case_subclass", k1, self.n_w);
        out.extend((0..k1).map(|s| format!("mu_star[{s}]")));
        out.extend((0..k1).map(|s| format!("tau0[{s}]")));
        grid(&mut out, "tau_etiology", l, self.n_x_splines);
        grid(&mut out, "xi_etiology", l, self.n_x_splines);
        grid(&mut out, "tau_control", k1, self.n_w_splines);
        grid(&mut out, "xi_control", k1, self.n_w_splines);
        grid(&mut out, "tau_case", k1, self.n_w_splines);
        grid(&mut out, "xi_case", k1, self.n_w_splines);
        out.push("rho_etiology".into());
        out.push("rho_subclass".into());
        out
    }

    pub fn flatten(&self, state: &ParamState) -> Vec<f64> {
        let p = &state.params;
        let s = &state.smoothing;
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(p.rates.tpr.iter());
        out.extend(p.rates.fpr.iter());
        out.extend(&p.rates.tpr_ss);
        let blocks = |out: &mut Vec<f64>, b: &[Vec<f64>]| b.iter().for_each(|r| out.extend(r));
        blocks(&mut out, &p.regression.etiology);
        blocks(&mut out, &p.regression.control_subclass);
        blocks(&mut out, &p.regression.case_subclass);
        out.extend(&p.regression.mu_star);
        out.extend(&p.regression.tau0);
        let smooth = |out: &mut Vec<f64>, b: &[Vec<Smoothing>]| {
            b.iter().for_each(|r| out.extend(r.iter().map(|v| v.tau)));
            b.iter().for_each(|r| out.extend(r.iter().map(|v| if v.flexible { 1.0 } else { 0.0 })));
        };
        smooth(&mut out, &s.etiology);
        smooth(&mut out, &s.control);
        smooth(&mut out, &s.case);
        out.push(s.rho_etiology);
        out.push(s.rho_subclass);
        debug_assert_eq!(out.len(), self.n_params());
        out
    }

    pub fn unflatten(&self, row: &[f64]) -> Result<ParamState> {
        if row.len() != self.n_params() {
            return Err(Error::Dimension(format!("draw has {} values, layout expects {}", row.len(), self.n_params())));
        }
        let (j, k, l) = (self.n_pathogens, self.n_subclasses, self.n_causes);
        let k1 = k - 1;
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = &row[pos..pos + n];
            pos += n;
            s.to_vec()
        };
        let tpr = Array2::from_shape_vec((j, k), take(j * k)).expect("shape");
        let fpr = Array2::from_shape_vec((j, k), take(j * k)).expect("shape");
        let tpr_ss = take(self.n_ss);
        let mut blocks = |rows: usize, cols: usize| (0..rows).map(|_| take(cols)).collect::<Vec<_>>();
        let etiology = blocks(l, self.n_x);
        let control_subclass = blocks(k1, self.n_w);
        let case_subclass = blocks(k1, self.n_w);
        let mu_star = blocks(1, k1).remove(0);
        let tau0 = blocks(1, k1).remove(0);
        let mut smooth = |rows: usize, cols: usize| {
            let taus = blocks(rows, cols);
            let flags = blocks(rows, cols);
            taus.iter()
                .zip(&flags)
                .map(|(t, f)| t.iter().zip(f).map(|(&tau, &x)| Smoothing { tau, flexible: x > 0.5 }).collect())
                .collect::<Vec<Vec<Smoothing>>>()
        };
        let s_eti = smooth(l, self.n_x_splines);
        let s_ctrl = smooth(k1, self.n_w_splines);
        let s_case = smooth(k1, self.n_w_splines);
        let rho = blocks(1, 2).remove(0);
        Ok(ParamState {
            params: Params {
                rates: RateParams { tpr, fpr, tpr_ss },
                regression: RegressionParams { etiology, control_subclass, case_subclass, mu_star, tau0 },
            },
            smoothing: SmoothingState {
                etiology: s_eti,
                control: s_ctrl,
                case: s_case,
                rho_etiology: rho[0],
                rho_subclass: rho[1],
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Layout {
        Layout { n_pathogens: 2, n_subclasses: 3, n_ss: 1, n_causes: 3, n_x: 5, n_w: 2, n_x_splines: 1, n_w_splines: 1 }
    }

    #[test]
    fn flatten_round_trip() {
        let lay = layout();
        let names = lay.names();
        assert_eq!(names.len(), lay.n_params());
        let row: Vec<f64> = (0..lay.n_params()).map(|i| if names[i].starts_with("xi_") { 1.0 } else { i as f64 * 0.5 }).collect();
        let state = lay.unflatten(&row).unwrap();
        assert_eq!(lay.flatten(&state), row);
        assert_eq!(state.params.rates.tpr[[1, 2]], row[names.iter().position(|n| n == "tpr[1,2]").unwrap()]);
        assert_eq!(state.params.regression.mu_star[1], row[names.iter().position(|n| n == "mu_star[1]").unwrap()]);
        assert!(lay.unflatten(&row[1..]).is_err());
    }

    #[test]
    fn names_are_unique() {
        let names = layout().names();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }
}
