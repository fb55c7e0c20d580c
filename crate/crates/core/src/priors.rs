//! Prior densities, samplers and elicitation helpers.

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::SmoothingHyper;
use crate::error::{Error, Result};
use crate::special::{beta_inc_reg, beta_ln_pdf, gamma_inc_lower_reg, gamma_ln_pdf, ln_gamma};
use crate::splines::penalty_quadratic;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

impl BetaParams {
    pub const fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        beta_ln_pdf(self.a, self.b, x)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        beta_inc_reg(self.a, self.b, x)
    }

    /// Beta-Bernoulli conjugate update.
    pub fn posterior(&self, successes: usize, failures: usize) -> Self {
        Self { a: self.a + successes as f64, b: self.b + failures as f64 }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        sample_beta(rng, self.a, self.b)
    }
}

pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    let x: f64 = Beta::new(a, b).expect("valid beta parameters").sample(rng);
    // keep rates strictly inside (0, 1)
    x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    let x: f64 = Gamma::new(shape, 1.0 / rate).expect("valid gamma parameters").sample(rng);
    x.max(f64::MIN_POSITIVE)
}

pub fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Gamma(shape, rate) restricted to `(0, upper)`.
pub fn sample_truncated_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64, upper: f64) -> f64 {
    let scaled_upper = rate * upper;
    let mass = if scaled_upper > 0.0 { gamma_inc_lower_reg(shape, scaled_upper) } else { 0.0 };
    if !(mass > 1e-300) || scaled_upper < 1e-10 {
        // rate*tau is negligible on the support: density ~ tau^(shape-1)
        let u: f64 = rng.random();
        return (upper * u.powf(1.0 / shape)).max(f64::MIN_POSITIVE);
    }
    if mass > 0.25 {
        loop {
            let x = sample_gamma(rng, shape, rate);
            if x < upper {
                return x;
            }
        }
    }
    let target = rng.random::<f64>() * mass;
    let (mut lo, mut hi) = (0.0, upper);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma_inc_lower_reg(shape, rate * mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    (0.5 * (lo + hi)).max(f64::MIN_POSITIVE)
}

fn quantile_residuals(a: f64, b: f64, q: (f64, f64), p: (f64, f64)) -> (f64, f64) {
    (beta_inc_reg(a, b, q.0) - p.0, beta_inc_reg(a, b, q.1) - p.1)
}

/// Beta(a, b) whose `p_lo` and `p_hi` quantiles equal `q_lo` and `q_hi`.
///
/// Damped Newton iterations on `(ln a, ln b)` with a finite-difference Jacobian;
/// falls back to nested bisection over the mean and concentration when Newton stalls.
pub fn beta_from_quantiles(q_lo: f64, q_hi: f64, p_lo: f64, p_hi: f64) -> Result<BetaParams> {
    if !(0.0 < q_lo && q_lo < q_hi && q_hi < 1.0) {
        return Err(Error::Domain(format!("need 0 < q_lo < q_hi < 1, got ({q_lo}, {q_hi})")));
    }
    if !(0.0 < p_lo && p_lo < p_hi && p_hi < 1.0) {
        return Err(Error::Domain(format!("need 0 < p_lo < p_hi < 1, got ({p_lo}, {p_hi})")));
    }
    newton_quantiles(q_lo, q_hi, p_lo, p_hi)
        .or_else(|| bisect_quantiles(q_lo, q_hi, p_lo, p_hi))
        .ok_or_else(|| Error::NoConvergence(format!("beta_from_quantiles({q_lo}, {q_hi})")))
}

const QUANTILE_TOL: f64 = 1e-10;

fn newton_quantiles(q_lo: f64, q_hi: f64, p_lo: f64, p_hi: f64) -> Option<BetaParams> {
    let q = (q_lo, q_hi);
    let p = (p_lo, p_hi);
    // moment-matching start: quantile span ~ 2 z sd
    let z = 1.959_963_984_540_054 * (p_hi - p_lo) / 0.95;
    let mean = 0.5 * (q_lo + q_hi);
    let sd = (q_hi - q_lo) / (2.0 * z.max(0.5));
    let conc = (mean * (1.0 - mean) / (sd * sd) - 1.0).max(0.5);
    let mut x = [(mean * conc).ln(), ((1.0 - mean) * conc).ln()];
    let norm = |r: (f64, f64)| r.0.hypot(r.1);
    let mut r = quantile_residuals(x[0].exp(), x[1].exp(), q, p);
    for _ in 0..200 {
        if norm(r) < QUANTILE_TOL {
            return Some(BetaParams::new(x[0].exp(), x[1].exp()));
        }
        let h = 1e-6;
        let mut jac = [[0.0; 2]; 2];
        for k in 0..2 {
            let mut up = x;
            let mut dn = x;
            up[k] += h;
            dn[k] -= h;
            let ru = quantile_residuals(up[0].exp(), up[1].exp(), q, p);
            let rd = quantile_residuals(dn[0].exp(), dn[1].exp(), q, p);
            jac[0][k] = (ru.0 - rd.0) / (2.0 * h);
            jac[1][k] = (ru.1 - rd.1) / (2.0 * h);
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if !det.is_finite() || det.abs() < 1e-300 {
            return None;
        }
        let step = [
            (jac[1][1] * r.0 - jac[0][1] * r.1) / det,
            (-jac[1][0] * r.0 + jac[0][0] * r.1) / det,
        ];
        let mut damp = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let trial = [x[0] - damp * step[0].clamp(-2.0, 2.0), x[1] - damp * step[1].clamp(-2.0, 2.0)];
            let rt = quantile_residuals(trial[0].exp(), trial[1].exp(), q, p);
            if rt.0.is_finite() && rt.1.is_finite() && norm(rt) < norm(r) {
                x = trial;
                r = rt;
                improved = true;
                break;
            }
            damp *= 0.5;
        }
        if !improved {
            return None;
        }
    }
    None
}

/// For fixed concentration `k`, the mean matching the lower quantile; then bisection on `ln k`.
fn bisect_quantiles(q_lo: f64, q_hi: f64, p_lo: f64, p_hi: f64) -> Option<BetaParams> {
    let mean_for = |k: f64| -> f64 {
        // F(q_lo) decreases in the mean for fixed concentration
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if beta_inc_reg(m * k, (1.0 - m) * k, q_lo) > p_lo {
                lo = m;
            } else {
                hi = m;
            }
        }
        0.5 * (lo + hi)
    };
    let resid = |ln_k: f64| -> f64 {
        let k = ln_k.exp();
        let m = mean_for(k);
        beta_inc_reg(m * k, (1.0 - m) * k, q_hi) - p_hi
    };
    // scan for a sign change; very small concentrations cannot place the lower quantile
    let grid: Vec<f64> = (0..=80).map(|i| -2.0 + 0.25 * i as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&g| resid(g)).collect();
    let bracket = (1..grid.len()).find(|&i| {
        values[i - 1].is_finite() && values[i].is_finite() && values[i - 1].signum() != values[i].signum()
    })?;
    let (mut lo, mut hi) = (grid[bracket - 1], grid[bracket]);
    let r_lo = values[bracket - 1];
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if resid(mid).signum() == r_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let k = (0.5 * (lo + hi)).exp();
    let m = mean_for(k);
    let out = BetaParams::new(m * k, (1.0 - m) * k);
    let r = quantile_residuals(out.a, out.b, (q_lo, q_hi), (p_lo, p_hi));
    (r.0.abs() < 1e-8 && r.1.abs() < 1e-8).then_some(out)
}

/// Shape and rate of the Gamma hyperprior on the intercept precision.
pub fn intercept_hyper_params(df: f64, scale: f64) -> (f64, f64) {
    (df / 2.0, df * scale * scale / 2.0)
}

/// Half-normal `N+(0, 1/tau0)` log-density of a nonnegative raw intercept.
pub fn intercept_prior_logpdf(mu_star: f64, tau0: f64) -> Result<f64> {
    if mu_star < 0.0 {
        return Err(Error::Domain(format!("raw intercept must be nonnegative, got {mu_star}")));
    }
    if !(tau0 > 0.0) {
        return Err(Error::Domain(format!("intercept precision must be positive, got {tau0}")));
    }
    Ok(std::f64::consts::LN_2 + 0.5 * tau0.ln() - 0.5 * LN_2PI - 0.5 * tau0 * mu_star * mu_star)
}

/// Gamma(df/2, df*scale^2/2) log-density of the intercept precision.
pub fn intercept_hyper_logpdf(tau0: f64, df: f64, scale: f64) -> f64 {
    let (shape, rate) = intercept_hyper_params(df, scale);
    gamma_ln_pdf(shape, rate, tau0)
}

/// First-order random-walk prior on spline coefficients with an `N(0, 1/k_beta)`
/// prior on the first coefficient; normalized.
pub fn spline_prior_logpdf(beta: &[f64], tau: f64, k_beta: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("smoothing precision must be positive, got {tau}")));
    }
    if beta.is_empty() {
        return Err(Error::Dimension("empty spline coefficient vector".into()));
    }
    let c = beta.len() as f64;
    let quad = penalty_quadratic(beta);
    Ok(0.5 * (k_beta.ln() - LN_2PI) - 0.5 * k_beta * beta[0] * beta[0] + 0.5 * (c - 1.0) * (tau.ln() - LN_2PI)
        - 0.5 * tau * quad)
}

/// Draws spline coefficients from the random-walk prior.
pub fn sample_spline_prior<R: Rng + ?Sized>(rng: &mut R, n_basis: usize, tau: f64, k_beta: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_basis);
    let mut cur = sample_normal(rng) / k_beta.sqrt();
    out.push(cur);
    for _ in 1..n_basis {
        cur += sample_normal(rng) / tau.sqrt();
        out.push(cur);
    }
    out
}

/// Two-component smoothing-precision prior: Gamma (flexible fits) and
/// inverse-Pareto on `(0, b)` (near-constant fits).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingMixture {
    pub gamma_shape: f64,
    pub gamma_rate: f64,
    pub ip_shape: f64,
    pub ip_upper: f64,
}

impl From<SmoothingHyper> for SmoothingMixture {
    fn from(h: SmoothingHyper) -> Self {
        Self { gamma_shape: h.a_tau, gamma_rate: h.b_tau, ip_shape: h.a_tau_inv_pareto, ip_upper: h.b_tau_inv_pareto }
    }
}

impl Default for SmoothingMixture {
    fn default() -> Self {
        SmoothingHyper::default().into()
    }
}

impl SmoothingMixture {
    pub fn gamma_ln_pdf(&self, tau: f64) -> f64 {
        gamma_ln_pdf(self.gamma_shape, self.gamma_rate, tau)
    }

    pub fn inv_pareto_ln_pdf(&self, tau: f64) -> f64 {
        if !(tau > 0.0) || tau > self.ip_upper {
            return f64::NEG_INFINITY;
        }
        (self.ip_shape / self.ip_upper).ln() + (self.ip_shape - 1.0) * (tau / self.ip_upper).ln()
    }

    pub fn inv_pareto_cdf(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            0.0
        } else if tau >= self.ip_upper {
            1.0
        } else {
            (tau / self.ip_upper).powf(self.ip_shape)
        }
    }

    pub fn gamma_mean(&self) -> f64 {
        self.gamma_shape / self.gamma_rate
    }

    pub fn inv_pareto_mean(&self) -> f64 {
        self.ip_shape * self.ip_upper / (self.ip_shape + 1.0)
    }

    /// `log[w Gamma(tau) + (1 - w) InvPareto(tau)]`; `w` is the flexible-component weight.
    pub fn ln_pdf(&self, tau: f64, w: f64) -> Result<f64> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Domain(format!("smoothing precision must be in (0, inf), got {tau}")));
        }
        let g = if w > 0.0 { w.ln() + self.gamma_ln_pdf(tau) } else { f64::NEG_INFINITY };
        let ip = if w < 1.0 { (1.0 - w).ln() + self.inv_pareto_ln_pdf(tau) } else { f64::NEG_INFINITY };
        Ok(crate::special::log_sum_exp(&[g, ip]))
    }

    /// Draws `(tau, flexible)` with the flexible component chosen with probability `w`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, w: f64) -> (f64, bool) {
        if rng.random::<f64>() < w {
            (self.sample_gamma(rng), true)
        } else {
            (self.sample_inv_pareto(rng), false)
        }
    }

    pub fn sample_gamma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        sample_gamma(rng, self.gamma_shape, self.gamma_rate)
    }

    pub fn sample_inv_pareto<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        (self.ip_upper * u.powf(1.0 / self.ip_shape)).max(f64::MIN_POSITIVE)
    }

    /// Full conditional of the smoothing precision given the penalty `beta^T K beta`
    /// over `rank` differences and the component indicator.
    pub fn sample_conditional<R: Rng + ?Sized>(&self, rng: &mut R, flexible: bool, rank: usize, quad: f64) -> f64 {
        let shape_add = 0.5 * rank as f64;
        if flexible {
            sample_gamma(rng, self.gamma_shape + shape_add, self.gamma_rate + 0.5 * quad)
        } else {
            sample_truncated_gamma(rng, self.ip_shape + shape_add, 0.5 * quad, self.ip_upper)
        }
    }

    /// Probability that the indicator is flexible given only the penalty, with the
    /// precision integrated out of both components.
    pub fn collapsed_flexible_probability(&self, rank: usize, quad: f64, rho: f64) -> f64 {
        let r = 0.5 * rank as f64;
        let q = 0.5 * quad.max(0.0);
        let (a, b) = (self.gamma_shape, self.gamma_rate);
        let log_m1 = a * b.ln() - ln_gamma(a) + ln_gamma(a + r) - (a + r) * (b + q).ln();
        let s = self.ip_shape + r;
        let x = self.ip_upper * q;
        // ln of int_0^1 u^(s-1) exp(-x u) du
        let ln_unit = if x < 1e-8 { -s.ln() } else { ln_gamma(s) + gamma_inc_lower_reg(s, x).ln() - s * x.ln() };
        let log_m0 = self.ip_shape.ln() - self.ip_shape * self.ip_upper.ln() + s * self.ip_upper.ln() + ln_unit;
        crate::special::logistic(rho.ln() - (1.0 - rho).ln() + log_m1 - log_m0)
    }

    /// Posterior probability that the indicator is flexible given `tau` and `rho`.
    pub fn flexible_probability(&self, tau: f64, rho: f64) -> f64 {
        let g = rho.ln() + self.gamma_ln_pdf(tau);
        let ip = (1.0 - rho).ln() + self.inv_pareto_ln_pdf(tau);
        if ip == f64::NEG_INFINITY {
            return 1.0;
        }
        crate::special::logistic(g - ip)
    }
}

/// Default smoothness-indicator hyperprior for subclass-weight curves.
pub const RHO_SUBCLASS: BetaParams = BetaParams::new(0.5, 1.0);
/// Default smoothness-indicator hyperprior for etiology curves.
pub const RHO_ETIOLOGY: BetaParams = BetaParams::new(1.0, 0.5);

pub fn smoothness_hyper_logpdf(rho: f64, hyper: BetaParams) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Domain(format!("inclusion probability must be in (0, 1), got {rho}")));
    }
    Ok(hyper.ln_pdf(rho))
}

/// `N(0, sd^2)` log-density summed over `coefs`.
pub fn normal_logpdf(coefs: &[f64], sd: f64) -> f64 {
    let prec = 1.0 / (sd * sd);
    coefs.iter().map(|c| -0.5 * (LN_2PI + 2.0 * sd.ln()) - 0.5 * prec * c * c).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapsed_indicator_matches_quadrature() {
        let mix = SmoothingMixture::default();
        for &(rank, quad, rho) in &[(4usize, 0.0, 0.3), (6, 0.02, 0.5), (3, 1.7, 0.8), (9, 25.0, 0.6)] {
            // integrate tau^(rank/2) exp(-tau quad/2) against each component
            let integrand = |tau: f64, ln_comp: f64| (0.5 * rank as f64 * tau.ln() - 0.5 * tau * quad + ln_comp).exp();
            let n = 400_000;
            let (mut m1, mut m0) = (0.0, 0.0);
            let upper_g = 200.0;
            for i in 0..n {
                let t = (i as f64 + 0.5) / n as f64;
                let tg = t * upper_g;
                m1 += integrand(tg, mix.gamma_ln_pdf(tg)) * upper_g / n as f64;
                let ti = t * mix.ip_upper;
                m0 += integrand(ti, mix.inv_pareto_ln_pdf(ti)) * mix.ip_upper / n as f64;
            }
            let oracle = rho * m1 / (rho * m1 + (1.0 - rho) * m0);
            let ours = mix.collapsed_flexible_probability(rank, quad, rho);
            assert!((ours - oracle).abs() < 1e-4, "rank {rank} quad {quad}: {ours} vs {oracle}");
        }
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reproduces_reference_beta_pairs_to_last_digit() {
        // within one unit of the last printed digit
        let cases = [
            ((0.55, 0.99), (7.13, 1.32), 0.01),
            ((0.05, 0.20), (7.59, 58.97), 0.01),
            ((0.525, 0.575), (835.95, 683.79), 0.01),
        ];
        for ((lo, hi), (a, b), unit) in cases {
            let got = beta_from_quantiles(lo, hi, 0.025, 0.975).unwrap();
            assert!((got.a - a).abs() <= unit, "({lo},{hi}) a = {}", got.a);
            assert!((got.b - b).abs() <= unit, "({lo},{hi}) b = {}", got.b);
        }
    }

    #[test]
    fn matches_independent_quantile_solutions() {
        // solutions of the two quantile equations from an independent root finder
        let cases = [
            ((0.55, 0.99), (7.124_981_36, 1.329_325_29)),
            ((0.5, 0.9), (12.677_369_16, 4.829_393_68)),
            ((0.05, 0.20), (7.593_622_29, 58.967_293_95)),
            ((0.525, 0.575), (835.957_601_79, 683.792_879_59)),
        ];
        for ((lo, hi), (a, b)) in cases {
            let got = beta_from_quantiles(lo, hi, 0.025, 0.975).unwrap();
            assert!((got.a - a).abs() / a < 1e-7, "({lo},{hi}) a = {}", got.a);
            assert!((got.b - b).abs() / b < 1e-7, "({lo},{hi}) b = {}", got.b);
            assert!((got.cdf(lo) - 0.025).abs() < 1e-8);
            assert!((got.cdf(hi) - 0.975).abs() < 1e-8);
        }
    }

    #[test]
    fn bisection_fallback_agrees_with_solver() {
        for (lo, hi) in [(0.55, 0.99), (0.05, 0.2), (0.3, 0.4)] {
            let n = beta_from_quantiles(lo, hi, 0.025, 0.975).unwrap();
            let b = bisect_quantiles(lo, hi, 0.025, 0.975).unwrap();
            assert!((n.a - b.a).abs() / n.a < 1e-5, "{n:?} vs {b:?}");
            assert!((n.b - b.b).abs() / n.b < 1e-5);
        }
    }

    #[test]
    fn quantile_input_validation() {
        assert!(beta_from_quantiles(0.9, 0.5, 0.025, 0.975).is_err());
        assert!(beta_from_quantiles(0.0, 0.5, 0.025, 0.975).is_err());
    }

    #[test]
    fn half_normal_density_at_mode() {
        let v = intercept_prior_logpdf(0.0, 1.0).unwrap();
        assert!((v - (2.0 / (2.0 * std::f64::consts::PI).sqrt()).ln()).abs() < 1e-14);
        assert!(intercept_prior_logpdf(-0.1, 1.0).is_err());
    }

    /// Integrates the half-normal over the Gamma hyperprior on a log grid.
    fn marginal_intercept_density(mu: f64, df: f64, scale: f64) -> f64 {
        let (lo, hi, n) = (-30.0f64, 10.0f64, 200_000);
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let s = lo + h * i as f64;
            let tau = s.exp();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let f = (intercept_prior_logpdf(mu, tau).unwrap() + intercept_hyper_logpdf(tau, df, scale)).exp() * tau;
            acc += w * f;
        }
        acc * h
    }

    #[test]
    fn intercept_marginal_is_half_cauchy() {
        let got = marginal_intercept_density(0.0, 1.0, 10.0);
        let expected = 2.0 / (std::f64::consts::PI * 10.0);
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
        let got = marginal_intercept_density(7.0, 1.0, 10.0);
        let expected = 2.0 / (std::f64::consts::PI * 10.0 * (1.0 + 0.49));
        assert!((got - expected).abs() < 1e-6);
    }

    #[test]
    fn spline_prior_values() {
        let (c, tau, kb) = (2usize, 2.0, 4.0);
        let base = spline_prior_logpdf(&[0.0, 0.0], tau, kb).unwrap();
        let v = spline_prior_logpdf(&[0.0, 1.0], tau, kb).unwrap();
        assert!((v - base + 1.0).abs() < 1e-14);
        let flat = spline_prior_logpdf(&[3.0, 3.0, 3.0], 7.0, kb).unwrap()
            - spline_prior_logpdf(&[3.0, 3.0, 3.0], 1.0, kb).unwrap();
        assert!((flat - (c as f64) / 2.0 * 7f64.ln()).abs() < 1e-12);
        assert!(spline_prior_logpdf(&[0.0], 0.0, kb).is_err());
    }

    #[test]
    fn spline_prior_integrates_to_one() {
        let (tau, kb) = (2.0, 4.0);
        let (lim, n) = (6.0f64, 1200usize);
        let h = 2.0 * lim / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let b1 = -lim + h * i as f64;
            let wi = if i == 0 || i == n { 0.5 } else { 1.0 };
            for k in 0..=n {
                let b2 = -lim + h * k as f64;
                let wk = if k == 0 || k == n { 0.5 } else { 1.0 };
                total += wi * wk * spline_prior_logpdf(&[b1, b2], tau, kb).unwrap().exp();
            }
        }
        total *= h * h;
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn inverse_pareto_endpoints() {
        let m = SmoothingMixture::default();
        assert!((m.inv_pareto_ln_pdf(400.0).exp() - 0.00375).abs() < 1e-15);
        assert_eq!(m.inv_pareto_cdf(400.0), 1.0);
        assert_eq!(m.inv_pareto_ln_pdf(400.5), f64::NEG_INFINITY);
        assert!(m.ln_pdf(0.0, 0.5).is_err());
        // above the inverse-Pareto support only the gamma component contributes
        let v = m.ln_pdf(500.0, 0.3).unwrap();
        assert!((v - (0.3f64.ln() + m.gamma_ln_pdf(500.0))).abs() < 1e-12);
    }

    #[test]
    fn smoothing_component_means() {
        let m = SmoothingMixture::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let draws_g: Vec<f64> = (0..n).map(|_| m.sample(&mut rng, 1.0).0).collect();
        let draws_ip: Vec<f64> = (0..n).map(|_| m.sample(&mut rng, 0.0).0).collect();
        let check = |d: &[f64], mean: f64| {
            let mu = d.iter().sum::<f64>() / n as f64;
            let var = d.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let se = (var / n as f64).sqrt();
            assert!((mu - mean).abs() < 3.0 * se, "{mu} vs {mean} (se {se})");
        };
        check(&draws_g, 1.5);
        check(&draws_ip, 240.0);
        assert!((m.gamma_mean() - 1.5).abs() < 1e-15);
        assert!((m.inv_pareto_mean() - 240.0).abs() < 1e-12);
        assert!(draws_ip.iter().all(|t| *t > 0.0 && *t <= 400.0));
    }

    #[test]
    fn smoothness_hyperpriors() {
        assert!((RHO_SUBCLASS.mean() - 1.0 / 3.0).abs() < 1e-15);
        assert!((RHO_ETIOLOGY.mean() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(BetaParams::new(1.0, 1.0).posterior(3, 1), BetaParams::new(4.0, 2.0));
        assert!(smoothness_hyper_logpdf(1.0, RHO_SUBCLASS).is_err());
        assert!(smoothness_hyper_logpdf(0.3, RHO_SUBCLASS).unwrap().is_finite());
    }

    #[test]
    fn flexible_probability_is_prior_odds_times_density_ratio() {
        let m = SmoothingMixture::default();
        for &(tau, rho) in &[(0.7, 0.4), (3.0, 0.5), (150.0, 0.9)] {
            let p = m.flexible_probability(tau, rho);
            let odds = p / (1.0 - p);
            let expected = rho / (1.0 - rho) * (m.gamma_ln_pdf(tau) - m.inv_pareto_ln_pdf(tau)).exp();
            assert!((odds - expected).abs() / expected < 1e-10);
        }
        assert_eq!(m.flexible_probability(401.0, 0.2), 1.0);
    }

    fn ks_statistic(mut draws: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn samplers_pass_kolmogorov_smirnov() {
        let n = 10_000;
        let crit = 1.628 / (n as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let beta = BetaParams::new(7.13, 1.32);
        let d = ks_statistic((0..n).map(|_| beta.sample(&mut rng)).collect(), |x| beta.cdf(x));
        assert!(d < crit, "beta KS {d}");

        let m = SmoothingMixture::default();
        let d = ks_statistic((0..n).map(|_| m.sample_gamma(&mut rng)).collect(), |x| {
            gamma_inc_lower_reg(m.gamma_shape, m.gamma_rate * x)
        });
        assert!(d < crit, "gamma KS {d}");
        let d = ks_statistic((0..n).map(|_| m.sample_inv_pareto(&mut rng)).collect(), |x| m.inv_pareto_cdf(x));
        assert!(d < crit, "inverse Pareto KS {d}");

        // half-t(1, 10) marginal of the intercept via its two-level construction
        let (shape, rate) = intercept_hyper_params(1.0, 10.0);
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let tau0 = sample_gamma(&mut rng, shape, rate);
                sample_normal(&mut rng).abs() / tau0.sqrt()
            })
            .collect();
        let d = ks_statistic(draws, |x| 2.0 / std::f64::consts::PI * (x / 10.0).atan());
        assert!(d < crit, "half-Cauchy KS {d}");

        for &(shape, rate, upper) in &[(4.5, 0.01, 400.0), (4.5, 2.0, 400.0), (2.0, 1e-14, 400.0), (1.5, 0.3, 5.0)] {
            let mass = gamma_inc_lower_reg(shape, rate * upper);
            let draws: Vec<f64> = (0..n).map(|_| sample_truncated_gamma(&mut rng, shape, rate, upper)).collect();
            assert!(draws.iter().all(|t| *t > 0.0 && *t <= upper));
            let cdf = |x: f64| {
                if rate * upper < 1e-10 {
                    (x / upper).powf(shape)
                } else {
                    gamma_inc_lower_reg(shape, rate * x) / mass
                }
            };
            let d = ks_statistic(draws, cdf);
            assert!(d < crit, "truncated gamma ({shape},{rate},{upper}) KS {d}");
        }
    }

    #[test]
    fn log_densities_finite_at_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = SmoothingMixture::default();
        for _ in 0..1000 {
            let (tau, _) = m.sample(&mut rng, 0.5);
            assert!(m.ln_pdf(tau, 0.5).unwrap().is_finite());
            let beta = sample_spline_prior(&mut rng, 5, tau, 4.0);
            assert!(spline_prior_logpdf(&beta, tau, 4.0).unwrap().is_finite());
        }
    }

    #[test]
    fn cumulative_intercepts_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (shape, rate) = intercept_hyper_params(1.0, 10.0);
        for _ in 0..500 {
            let raw: Vec<f64> = (0..6)
                .map(|_| sample_normal(&mut rng).abs() / sample_gamma(&mut rng, shape, rate).sqrt())
                .collect();
            let cum: Vec<f64> = raw.iter().scan(0.0, |s, v| { *s += v; Some(*s) }).collect();
            assert!(cum.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
