//! Adaptive Gaussian random-walk proposals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::priors::sample_normal;

const INITIAL_SD: f64 = 0.1;
const REFRESH_EVERY: u64 = 50;

/// Random-walk proposal whose scale (Robbins-Monro on the log scale) and shape
/// (running covariance) adapt while `adapt` is called, i.e. during burn-in only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveProposal {
    dim: usize,
    pub log_scale: f64,
    target: f64,
    n_adapt: u64,
    mean: Vec<f64>,
    /// Running sum of centered outer products, row-major.
    scatter: Vec<f64>,
    /// Lower Cholesky factor of the proposal shape, row-major.
    chol: Vec<f64>,
    pub proposed: u64,
    pub accepted: u64,
}

impl AdaptiveProposal {
    pub fn new(dim: usize) -> Self {
        let mut chol = vec![0.0; dim * dim];
        for i in 0..dim {
            chol[i * dim + i] = INITIAL_SD;
        }
        let target = if dim <= 1 { 0.44 } else { 0.234f64.max(0.44 - 0.05 * (dim as f64 - 1.0)) };
        Self {
            dim,
            log_scale: 0.0,
            target,
            n_adapt: 0,
            mean: vec![0.0; dim],
            scatter: vec![0.0; dim * dim],
            chol,
            proposed: 0,
            accepted: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// Proposed point `x + exp(log_scale) L z`.
    pub fn propose<R: Rng + ?Sized>(&self, rng: &mut R, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let z: Vec<f64> = (0..d).map(|_| sample_normal(rng)).collect();
        let s = self.log_scale.exp();
        (0..d)
            .map(|i| {
                let step: f64 = (0..=i).map(|c| self.chol[i * d + c] * z[c]).sum();
                x[i] + s * step
            })
            .collect()
    }

    pub fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        if accepted {
            self.accepted += 1;
        }
    }

    /// Burn-in adaptation after one step with acceptance probability `alpha` at state `x`.
    pub fn adapt(&mut self, alpha: f64, x: &[f64]) {
        self.n_adapt += 1;
        let n = self.n_adapt as f64;
        let gain = (n + 1.0).powf(-0.6);
        self.log_scale = (self.log_scale + gain * (alpha - self.target)).clamp(-30.0, 10.0);
        let d = self.dim;
        let delta: Vec<f64> = (0..d).map(|i| x[i] - self.mean[i]).collect();
        for i in 0..d {
            self.mean[i] += delta[i] / n;
        }
        for i in 0..d {
            for j in 0..d {
                self.scatter[i * d + j] += delta[i] * (x[j] - self.mean[j]);
            }
        }
        if self.n_adapt.is_multiple_of(REFRESH_EVERY) && self.n_adapt >= (10 * d as u64).max(100) {
            self.refresh_shape();
        }
    }

    fn refresh_shape(&mut self) {
        let d = self.dim;
        let n = self.n_adapt as f64;
        let scale = 2.38 * 2.38 / d as f64;
        let mut cov: Vec<f64> = self.scatter.iter().map(|v| scale * v / (n - 1.0)).collect();
        let avg_diag = (0..d).map(|i| cov[i * d + i]).sum::<f64>() / d as f64;
        let jitter = 1e-6 * avg_diag.max(1e-12) + 1e-12;
        for i in 0..d {
            cov[i * d + i] += jitter;
        }
        if let Some(chol) = cholesky(&cov, d) {
            // rescale so the adapted log-scale carries over continuously
            let old_size: f64 = (0..d).map(|i| self.chol[i * d + i].ln()).sum();
            let new_size: f64 = (0..d).map(|i| chol[i * d + i].ln()).sum();
            self.log_scale += (old_size - new_size) / d as f64;
            self.chol = chol;
        }
    }
}

/// Row-major lower Cholesky factor; `None` when not positive definite.
pub fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}
