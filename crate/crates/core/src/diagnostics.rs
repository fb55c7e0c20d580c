//! Convergence diagnostics: Gelman-Rubin, Geweke and effective sample size.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::DrawsStore;
use crate::num::Real;

pub const RC_THRESHOLD: f64 = 1.1;
pub const GEWEKE_THRESHOLD: f64 = 2.0;

fn mean<T: Real>(x: &[T]) -> T {
    x.iter().copied().sum::<T>() / T::count(x.len())
}

fn is_constant<T: Real>(x: &[T]) -> bool {
    x.iter().all(|&v| v == x[0])
}

fn variance<T: Real>(x: &[T], m: T) -> T {
    x.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::count(x.len() - 1)
}

/// Potential scale reduction `sqrt(1 + B / (n W))`, where `B / n` is the
/// variance of the chain means and `W` the mean within-chain variance.
///
/// Identical chains give exactly 1. A trace with zero pooled variance also
/// reports 1 and logs a warning.
pub fn gelman_rubin<T: Real>(chains: &[Vec<T>]) -> Result<T> {
    if chains.len() < 2 {
        return Err(Error::Domain("Gelman-Rubin needs at least two chains".into()));
    }
    let n = chains[0].len();
    if n < 10 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::Domain("Gelman-Rubin needs equal-length chains of at least 10 draws".into()));
    }
    if chains.iter().all(|c| is_constant(c) && c[0] == chains[0][0]) {
        log::warn!("degenerate trace: zero pooled variance, reporting Rc = 1");
        return Ok(T::one());
    }
    let means: Vec<T> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().zip(&means).map(|(c, &m)| variance(c, m)).sum::<T>() / T::count(chains.len());
    let grand = mean(&means);
    let b_over_n = variance(&means, grand);
    if w == T::zero() {
        return Ok(T::infinity());
    }
    Ok((T::one() + b_over_n / w).sqrt())
}

/// Spectral density at frequency zero with a Bartlett window of width `floor(sqrt(n))`.
pub fn spectral_density_zero<T: Real>(x: &[T]) -> T {
    let n = x.len();
    let m = mean(x);
    let bw = (n as f64).sqrt().floor() as usize;
    let acov = |h: usize| (0..n - h).map(|t| (x[t] - m) * (x[t + h] - m)).sum::<T>() / T::count(n);
    let mut s = acov(0);
    for h in 1..=bw.min(n - 1) {
        let weight = T::one() - T::count(h) / T::count(bw + 1);
        s = s + T::lit(2.0) * weight * acov(h);
    }
    s.max(T::zero())
}

/// Geweke Z comparing the first `frac_a` and the last `frac_b` of a trace.
pub fn geweke<T: Real>(trace: &[T], frac_a: f64, frac_b: f64) -> Result<T> {
    if trace.len() < 100 {
        return Err(Error::Domain("Geweke needs at least 100 draws".into()));
    }
    if !(frac_a > 0.0 && frac_b > 0.0 && frac_a + frac_b <= 1.0) {
        return Err(Error::Domain(format!("invalid Geweke fractions ({frac_a}, {frac_b})")));
    }
    let n = trace.len();
    let na = ((n as f64) * frac_a).floor() as usize;
    let nb = ((n as f64) * frac_b).floor() as usize;
    let a = &trace[..na];
    let b = &trace[n - nb..];
    if is_constant(a) || is_constant(b) {
        return Err(Error::Degenerate("zero variance in a Geweke segment".into()));
    }
    let va = spectral_density_zero(a) / T::count(na);
    let vb = spectral_density_zero(b) / T::count(nb);
    if va == T::zero() || vb == T::zero() {
        return Err(Error::Degenerate("zero variance in a Geweke segment".into()));
    }
    Ok((mean(a) - mean(b)) / (va + vb).sqrt())
}

/// Geyer initial-positive-sequence effective sample size of one chain.
pub fn effective_sample_size<T: Real>(x: &[T]) -> T {
    let n = x.len();
    if n < 4 {
        return T::count(n);
    }
    let m = mean(x);
    let acov = |h: usize| (0..n - h).map(|t| (x[t] - m) * (x[t + h] - m)).sum::<T>() / T::count(n);
    let g0 = acov(0);
    if g0 == T::zero() {
        return T::count(n);
    }
    let mut sum = T::zero();
    let mut h = 0;
    while h + 1 < n {
        let pair = (acov(h) + acov(h + 1)) / g0;
        if pair <= T::zero() {
            break;
        }
        sum = sum + pair;
        h += 2;
    }
    let tau = (T::lit(2.0) * sum - T::one()).max(T::lit(1.0 / n as f64));
    T::count(n) / tau
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticEntry {
    pub param: String,
    /// `None` with fewer than two chains or a degenerate input.
    pub rc: Option<f64>,
    /// Per chain; `None` when the trace is too short or constant.
    pub geweke_z: Vec<Option<f64>>,
    /// Summed across chains.
    pub ess: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub entries: Vec<DiagnosticEntry>,
}

impl DiagnosticsReport {
    pub fn flagged(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| e.flagged).map(|e| e.param.as_str()).collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self.entries.iter().map(|e| e.param.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>10}  {:>24}  flag", "param", "Rc", "ESS", "Geweke Z");
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        for e in &self.entries {
            let z: Vec<String> = e.geweke_z.iter().map(|&v| fmt(v)).collect();
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>10.1}  {:>24}  {}",
                e.param,
                fmt(e.rc),
                e.ess,
                z.join(" "),
                if e.flagged { "*" } else { "" }
            );
        }
        out
    }
}

/// Per-parameter diagnostics for every name containing `filter` (all when `None`).
pub fn diagnostics_report(draws: &DrawsStore, filter: Option<&str>) -> DiagnosticsReport {
    if draws.n_chains() < 2 {
        log::warn!("fewer than two chains: Gelman-Rubin is not reported");
    }
    let entries = draws
        .address_book
        .names
        .iter()
        .enumerate()
        .filter(|(_, name)| filter.is_none_or(|f| name.contains(f)))
        .map(|(col, name)| {
            let traces: Vec<Vec<f64>> = draws.chains.iter().map(|c| c.trace(col)).collect();
            let rc = if traces.len() >= 2 { gelman_rubin(&traces).ok() } else { None };
            let geweke_z: Vec<Option<f64>> = traces.iter().map(|t| geweke(t, 0.1, 0.5).ok()).collect();
            let ess = traces.iter().map(|t| effective_sample_size(t)).sum();
            let flagged = rc.is_some_and(|r| r > RC_THRESHOLD)
                || geweke_z.iter().flatten().any(|z| z.abs() > GEWEKE_THRESHOLD);
            DiagnosticEntry { param: name.clone(), rc, geweke_z, ess, flagged }
        })
        .collect();
    DiagnosticsReport { entries }
}
