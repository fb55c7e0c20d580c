//! Likelihood and probability computations for nested partially-latent class models.
//!
//! Pathogen, cause and subclass indices are 0-based. A case in class `l` and
//! subclass `k` has positive rate `tpr[j,k]` on causative pathogens and
//! `fpr[j,k]` on the rest; controls always use the `fpr` column.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Cause, CauseSpec};
use crate::design::PreparedData;
use crate::error::{Error, Result};
use crate::num::Real;
use crate::special::{log1m_logistic, log_logistic, log_sum_exp, logistic, CompensatedSum};

/// Probabilities are clamped to `[eps, 1 - eps]` before taking logs inside likelihood kernels.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateParams<T> {
    /// `J x K` true positive rates.
    pub tpr: Array2<T>,
    /// `J x K` false positive rates.
    pub fpr: Array2<T>,
    /// One sensitivity per silver-standard column.
    pub tpr_ss: Vec<T>,
}

impl<T: Real> RateParams<T> {
    /// Rates constant across subclasses.
    pub fn uniform(j: usize, k: usize, tpr: T, fpr: T, n_ss: usize, tpr_ss: T) -> Self {
        Self {
            tpr: Array2::from_elem((j, k), tpr),
            fpr: Array2::from_elem((j, k), fpr),
            tpr_ss: vec![tpr_ss; n_ss],
        }
    }

    pub fn n_pathogens(&self) -> usize {
        self.tpr.nrows()
    }

    pub fn n_subclasses(&self) -> usize {
        self.tpr.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tpr.dim() != self.fpr.dim() {
            return Err(Error::Dimension("TPR and FPR matrices differ in shape".into()));
        }
        let inside = |v: &T| *v > T::zero() && *v < T::one();
        if !self.tpr.iter().chain(self.fpr.iter()).chain(self.tpr_ss.iter()).all(inside) {
            return Err(Error::Domain("rates must lie strictly inside (0, 1)".into()));
        }
        Ok(())
    }
}

/// Which side of the study a subclass weight refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Case,
    Control,
}

/// Regression coefficients for etiology and subclass weights.
///
/// Subclass intercepts are shared by both sides: `mu[k] = mu_star[0] + ... + mu_star[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionParams<T> {
    /// One coefficient vector per cause, conformable with the etiology features.
    pub etiology: Vec<Vec<T>>,
    /// `K - 1` coefficient vectors for control subclass weights.
    pub control_subclass: Vec<Vec<T>>,
    /// `K - 1` coefficient vectors for case subclass weights.
    pub case_subclass: Vec<Vec<T>>,
    /// Nonnegative raw intercepts, length `K - 1`.
    pub mu_star: Vec<T>,
    /// Precisions of the raw intercepts.
    pub tau0: Vec<T>,
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

impl<T: Real> RegressionParams<T> {
    pub fn zeros(n_causes: usize, n_x: usize, k: usize, n_w: usize) -> Self {
        let k1 = k.saturating_sub(1);
        Self {
            etiology: vec![vec![T::zero(); n_x]; n_causes],
            control_subclass: vec![vec![T::zero(); n_w]; k1],
            case_subclass: vec![vec![T::zero(); n_w]; k1],
            mu_star: vec![T::zero(); k1],
            tau0: vec![T::one(); k1],
        }
    }

    pub fn n_causes(&self) -> usize {
        self.etiology.len()
    }

    pub fn n_subclasses(&self) -> usize {
        self.mu_star.len() + 1
    }

    /// Cumulative intercepts `mu_k0`.
    pub fn intercepts(&self) -> Vec<T> {
        let mut acc = T::zero();
        self.mu_star
            .iter()
            .map(|&m| {
                acc = acc + m;
                acc
            })
            .collect()
    }

    pub fn etiology_predictors(&self, x: &[T]) -> Vec<T> {
        self.etiology.iter().map(|c| dot(c, x)).collect()
    }

    pub fn etiology_probs(&self, x: &[T]) -> Result<Vec<T>> {
        let phi = self.etiology_predictors(x);
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite etiology linear predictor".into()));
        }
        Ok(softmax(&phi))
    }

    pub fn subclass_coefs(&self, side: Side) -> &[Vec<T>] {
        match side {
            Side::Case => &self.case_subclass,
            Side::Control => &self.control_subclass,
        }
    }

    /// Stick-breaking logits `alpha_k`, `k < K`.
    pub fn subclass_logits(&self, w: &[T], side: Side) -> Vec<T> {
        self.intercepts().into_iter().zip(self.subclass_coefs(side)).map(|(mu, c)| mu + dot(c, w)).collect()
    }

    pub fn subclass_weights(&self, w: &[T], side: Side) -> Result<Vec<T>> {
        let alpha = self.subclass_logits(w, side);
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite subclass linear predictor".into()));
        }
        let g: Vec<T> = alpha.into_iter().map(logistic).collect();
        stick_break(&g)
    }

    pub fn log_subclass_weights(&self, w: &[T], side: Side) -> Vec<T> {
        log_stick_break(&self.subclass_logits(w, side))
    }
}

/// Full parameter state entering the likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub rates: RateParams<T>,
    pub regression: RegressionParams<T>,
}

/// Per-subject latent allocations. `class[i]` is `None` for controls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentState {
    pub class: Vec<Option<usize>>,
    pub subclass: Vec<usize>,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("measurement length {a} vs probability length {b}")));
    }
    Ok(())
}

/// `prod_j s_j^m_j (1 - s_j)^(1 - m_j)`.
pub fn bernoulli_product<T: Real>(m: &[u8], s: &[T]) -> Result<T> {
    check_lengths(m.len(), s.len())?;
    Ok(m.iter().zip(s).fold(T::one(), |acc, (&mj, &sj)| acc * if mj == 1 { sj } else { T::one() - sj }))
}

pub fn log_bernoulli_product<T: Real>(m: &[u8], s: &[T]) -> Result<T> {
    check_lengths(m.len(), s.len())?;
    Ok(m.iter().zip(s).fold(T::zero(), |acc, (&mj, &sj)| acc + if mj == 1 { sj.ln() } else { (-sj).ln_1p() }))
}

/// Stick-breaking weights from `K - 1` break fractions; the last weight is the remainder.
pub fn stick_break<T: Real>(g: &[T]) -> Result<Vec<T>> {
    if g.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::Domain("break fractions must lie in [0, 1]".into()));
    }
    let mut out = Vec::with_capacity(g.len() + 1);
    let mut rest = T::one();
    for &gk in g {
        out.push(gk * rest);
        rest = rest * (T::one() - gk);
    }
    let used = CompensatedSum::from_iter(out.iter().copied()).value();
    out.push((T::one() - used).max(T::zero()));
    Ok(out)
}

/// Log stick-breaking weights from logits, computed without forming the fractions.
pub fn log_stick_break<T: Real>(alpha: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(alpha.len() + 1);
    let mut rest = T::zero();
    for &a in alpha {
        out.push(rest + log_logistic(a));
        rest = rest + log1m_logistic(a);
    }
    out.push(rest);
    out
}

/// Max-shifted softmax.
pub fn softmax<T: Real>(phi: &[T]) -> Vec<T> {
    let m = phi.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = phi.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax<T: Real>(phi: &[T]) -> Vec<T> {
    let lse = log_sum_exp(phi);
    phi.iter().map(|&v| v - lse).collect()
}

/// Positive rates of subclass `k` under cause `cause`.
pub fn class_positive_rates<T: Real>(cause: &Cause, k: usize, rates: &RateParams<T>) -> Vec<T> {
    (0..rates.n_pathogens())
        .map(|j| if cause.contains(j) { rates.tpr[[j, k]] } else { rates.fpr[[j, k]] })
        .collect()
}

/// Clamped log rates reused across subjects.
#[derive(Debug, Clone)]
pub struct RateLogs<T> {
    pub log_tpr: Array2<T>,
    pub log1m_tpr: Array2<T>,
    pub log_fpr: Array2<T>,
    pub log1m_fpr: Array2<T>,
    pub log_tpr_ss: Vec<T>,
    pub log1m_tpr_ss: Vec<T>,
}

fn clamp_prob<T: Real>(p: T) -> T {
    let eps = T::lit(PROB_CLAMP).max(T::epsilon());
    p.max(eps).min(T::one() - eps)
}

impl<T: Real> RateLogs<T> {
    pub fn new(rates: &RateParams<T>) -> Self {
        let lg = |a: &Array2<T>| a.mapv(|p| clamp_prob(p).ln());
        let lg1m = |a: &Array2<T>| a.mapv(|p| (-clamp_prob(p)).ln_1p());
        Self {
            log_tpr: lg(&rates.tpr),
            log1m_tpr: lg1m(&rates.tpr),
            log_fpr: lg(&rates.fpr),
            log1m_fpr: lg1m(&rates.fpr),
            log_tpr_ss: rates.tpr_ss.iter().map(|&p| clamp_prob(p).ln()).collect(),
            log1m_tpr_ss: rates.tpr_ss.iter().map(|&p| (-clamp_prob(p)).ln_1p()).collect(),
        }
    }

    pub fn n_subclasses(&self) -> usize {
        self.log_tpr.ncols()
    }

    /// `log prod_j psi_jk^m_j (1 - psi_jk)^(1 - m_j)`.
    pub fn fpr_loglik(&self, m: &[u8], k: usize) -> T {
        m.iter().enumerate().fold(T::zero(), |acc, (j, &mj)| {
            acc + if mj == 1 { self.log_fpr[[j, k]] } else { self.log1m_fpr[[j, k]] }
        })
    }

    /// Change in log-likelihood when pathogen `j` switches from FPR to TPR.
    #[inline]
    pub fn causal_delta(&self, mj: u8, j: usize, k: usize) -> T {
        if mj == 1 {
            self.log_tpr[[j, k]] - self.log_fpr[[j, k]]
        } else {
            self.log1m_tpr[[j, k]] - self.log1m_fpr[[j, k]]
        }
    }

    /// Silver-standard log-likelihood given the class's causal mask over SS columns.
    pub fn ss_loglik(&self, ss: &[Option<u8>], ss_causal: &[bool]) -> T {
        let mut acc = T::zero();
        for (s, v) in ss.iter().enumerate() {
            match (*v, ss_causal[s]) {
                (None, _) => {}
                (Some(1), true) => acc = acc + self.log_tpr_ss[s],
                (Some(_), true) => acc = acc + self.log1m_tpr_ss[s],
                (Some(1), false) => return T::neg_infinity(),
                (Some(_), false) => {}
            }
        }
        acc
    }
}

/// `out[l * K + k] = log eta_k + log Pi(m; p_kl)`: BrS joint log-terms by class and subclass.
pub fn case_joint_logliks<T: Real>(m: &[u8], log_eta: &[T], causal: &[Vec<bool>], logs: &RateLogs<T>, out: &mut [T]) {
    let k_n = log_eta.len();
    for k in 0..k_n {
        let base = log_eta[k] + logs.fpr_loglik(m, k);
        for (l, mask) in causal.iter().enumerate() {
            let mut v = base;
            for (j, &c) in mask.iter().enumerate() {
                if c {
                    v = v + logs.causal_delta(m[j], j, k);
                }
            }
            out[l * k_n + k] = v;
        }
    }
}

/// Class-conditional log-likelihoods of one case, `out[l] = log P(M, SS | I = l)`.
#[allow(clippy::too_many_arguments)]
pub fn case_cell_logliks_raw<T: Real>(
    m: &[u8],
    ss: &[Option<u8>],
    log_eta: &[T],
    causal: &[Vec<bool>],
    ss_causal: &[Vec<bool>],
    logs: &RateLogs<T>,
    scratch: &mut Vec<T>,
    out: &mut [T],
) {
    let k_n = log_eta.len();
    scratch.resize(causal.len() * k_n, T::zero());
    case_joint_logliks(m, log_eta, causal, logs, scratch);
    for l in 0..causal.len() {
        let ss_term = logs.ss_loglik(ss, &ss_causal[l]);
        out[l] = if ss_term == T::neg_infinity() {
            ss_term
        } else {
            log_sum_exp(&scratch[l * k_n..(l + 1) * k_n]) + ss_term
        };
    }
}

/// `log sum_k nu_k Pi(m; psi_k)`.
pub fn control_cell_loglik_raw<T: Real>(m: &[u8], log_nu: &[T], logs: &RateLogs<T>) -> T {
    let terms: Vec<T> = log_nu.iter().enumerate().map(|(k, &lw)| lw + logs.fpr_loglik(m, k)).collect();
    log_sum_exp(&terms)
}

fn ss_row<T>(data: &PreparedData<T>, i: usize) -> Vec<Option<u8>> {
    data.ss.row(i).to_vec()
}

fn check_shapes<T: Real>(data: &PreparedData<T>, params: &Params<T>) -> Result<()> {
    let reg = &params.regression;
    let rates = &params.rates;
    if rates.tpr.dim() != (data.n_pathogens(), data.k) || rates.fpr.dim() != (data.n_pathogens(), data.k) {
        return Err(Error::Dimension("rate matrices do not match J x K".into()));
    }
    if rates.tpr_ss.len() != data.ss_pathogens.len() {
        return Err(Error::Dimension("SS sensitivities do not match the SS columns".into()));
    }
    if reg.etiology.len() != data.n_causes() || reg.etiology.iter().any(|c| c.len() != data.n_x_coef()) {
        return Err(Error::Dimension("etiology coefficients do not match L x features".into()));
    }
    let k1 = data.k - 1;
    let w_ok = |b: &[Vec<T>]| b.len() == k1 && b.iter().all(|c| c.len() == data.n_w_coef());
    if reg.mu_star.len() != k1 || !w_ok(&reg.control_subclass) || !w_ok(&reg.case_subclass) {
        return Err(Error::Dimension("subclass coefficients do not match K - 1 blocks".into()));
    }
    Ok(())
}

/// `log sum_k nu_k(W_i) Pi(M_i; psi_k)` for control `i`.
pub fn control_cell_loglik<T: Real>(data: &PreparedData<T>, i: usize, params: &Params<T>) -> Result<T> {
    check_shapes(data, params)?;
    let logs = RateLogs::new(&params.rates);
    let log_nu = params.regression.log_subclass_weights(data.w_of(i), Side::Control);
    Ok(control_cell_loglik_raw(data.brs_of(i), &log_nu, &logs))
}

/// Control log-likelihood, summed with compensation.
pub fn control_loglik<T: Real>(data: &PreparedData<T>, params: &Params<T>) -> Result<T> {
    check_shapes(data, params)?;
    if data.controls.is_empty() {
        return Err(Error::Data("control likelihood needs at least one control".into()));
    }
    let logs = RateLogs::new(&params.rates);
    let log_nu: Vec<Vec<T>> = data
        .w_features
        .rows()
        .into_iter()
        .map(|w| params.regression.log_subclass_weights(w.as_slice().expect("standard layout"), Side::Control))
        .collect();
    let mut acc = CompensatedSum::new();
    for &i in &data.controls {
        acc.add(control_cell_loglik_raw(data.brs_of(i), &log_nu[data.w_row[i]], &logs));
    }
    Ok(acc.value())
}

/// `log P(M_i, SS_i | I_i = l)` for every class `l`.
pub fn case_cell_logliks<T: Real>(data: &PreparedData<T>, i: usize, params: &Params<T>) -> Result<Vec<T>> {
    check_shapes(data, params)?;
    if !data.is_case[i] {
        return Err(Error::Data(format!("subject {i} is not a case")));
    }
    let logs = RateLogs::new(&params.rates);
    let log_eta = params.regression.log_subclass_weights(data.w_of(i), Side::Case);
    let mut out = vec![T::zero(); data.n_causes()];
    let mut scratch = Vec::new();
    case_cell_logliks_raw(data.brs_of(i), &ss_row(data, i), &log_eta, &data.causal, &data.ss_causal, &logs, &mut scratch, &mut out);
    Ok(out)
}

pub fn case_cell_loglik<T: Real>(data: &PreparedData<T>, i: usize, l: usize, params: &Params<T>) -> Result<T> {
    if l >= data.n_causes() {
        return Err(Error::Dimension(format!("class {l} out of range")));
    }
    Ok(case_cell_logliks(data, i, params)?[l])
}

/// Case log-likelihood `sum_i log sum_l pi_l(X_i) P(M_i, SS_i | l)`.
pub fn case_loglik<T: Real>(data: &PreparedData<T>, params: &Params<T>) -> Result<T> {
    check_shapes(data, params)?;
    if data.cases.is_empty() {
        return Err(Error::Data("case likelihood needs at least one case".into()));
    }
    let logs = RateLogs::new(&params.rates);
    let reg = &params.regression;
    let log_pi: Vec<Vec<T>> = data
        .x_features
        .rows()
        .into_iter()
        .map(|x| log_softmax(&reg.etiology_predictors(x.as_slice().expect("standard layout"))))
        .collect();
    let log_eta: Vec<Vec<T>> = data
        .w_features
        .rows()
        .into_iter()
        .map(|w| reg.log_subclass_weights(w.as_slice().expect("standard layout"), Side::Case))
        .collect();
    let mut cells = vec![T::zero(); data.n_causes()];
    let mut scratch = Vec::new();
    let mut acc = CompensatedSum::new();
    for &i in &data.cases {
        case_cell_logliks_raw(
            data.brs_of(i),
            &ss_row(data, i),
            &log_eta[data.w_row[i]],
            &data.causal,
            &data.ss_causal,
            &logs,
            &mut scratch,
            &mut cells,
        );
        for (c, lp) in cells.iter_mut().zip(&log_pi[data.x_row[i]]) {
            *c = *c + *lp;
        }
        let v = log_sum_exp(&cells);
        if v == T::neg_infinity() {
            return Ok(v);
        }
        acc.add(v);
    }
    Ok(acc.value())
}

pub fn total_loglik<T: Real>(data: &PreparedData<T>, params: &Params<T>) -> Result<T> {
    Ok(case_loglik(data, params)? + control_loglik(data, params)?)
}

/// Posterior class probabilities of case `i` given parameters.
pub fn individual_etiology<T: Real>(data: &PreparedData<T>, i: usize, params: &Params<T>) -> Result<Vec<T>> {
    let cells = case_cell_logliks(data, i, params)?;
    let log_pi = log_softmax(&params.regression.etiology_predictors(data.x_of(i)));
    let joint: Vec<T> = cells.iter().zip(&log_pi).map(|(&c, &p)| c + p).collect();
    normalize_log(&joint).ok_or_else(|| Error::Inconsistent(format!("case {i} has zero probability under every class")))
}

/// Normalizes log-weights; `None` when every weight is `-inf`.
pub fn normalize_log<T: Real>(logw: &[T]) -> Option<Vec<T>> {
    let lse = log_sum_exp(logw);
    if lse == T::neg_infinity() || !lse.is_finite() {
        return None;
    }
    Some(logw.iter().map(|&v| (v - lse).exp()).collect())
}

/// Case positive rate for the singleton cause `l`:
/// `pi_l sum_k eta_k tpr_jk + (1 - pi_l) sum_k eta_k fpr_jk`.
pub fn positive_rate_curve<T: Real>(x: &[T], w: &[T], l: usize, params: &Params<T>, causes: &CauseSpec) -> Result<T> {
    if l >= causes.len() {
        return Err(Error::Dimension(format!("cause {l} out of range")));
    }
    let j = causes.get(l).singleton().ok_or_else(|| {
        Error::Spec(format!("cause {l} is not a single-pathogen cause; use marginal_positive_rate"))
    })?;
    if causes.causes().iter().enumerate().any(|(o, c)| o != l && c.contains(j)) {
        return Err(Error::Spec(format!(
            "pathogen {j} also belongs to another cause; use marginal_positive_rate"
        )));
    }
    let pi = params.regression.etiology_probs(x)?;
    let eta = params.regression.subclass_weights(w, Side::Case)?;
    let (mut t, mut f) = (T::zero(), T::zero());
    for (k, &e) in eta.iter().enumerate() {
        t = t + e * params.rates.tpr[[j, k]];
        f = f + e * params.rates.fpr[[j, k]];
    }
    Ok(pi[l] * t + (T::one() - pi[l]) * f)
}

/// Case positive rate of pathogen `j` under any cause spec, by summing over classes.
pub fn marginal_positive_rate<T: Real>(x: &[T], w: &[T], j: usize, params: &Params<T>, causes: &CauseSpec) -> Result<T> {
    let pi = params.regression.etiology_probs(x)?;
    let eta = params.regression.subclass_weights(w, Side::Case)?;
    let mut acc = T::zero();
    for (l, cause) in causes.causes().iter().enumerate() {
        let rates = if cause.contains(j) { &params.rates.tpr } else { &params.rates.fpr };
        for (k, &e) in eta.iter().enumerate() {
            acc = acc + pi[l] * e * rates[[j, k]];
        }
    }
    Ok(acc)
}

/// Control positive rate `sum_k nu_k(w) fpr_jk`.
pub fn control_positive_rate<T: Real>(w: &[T], j: usize, params: &Params<T>) -> Result<T> {
    let nu = params.regression.subclass_weights(w, Side::Control)?;
    Ok(nu.iter().enumerate().fold(T::zero(), |acc, (k, &v)| acc + v * params.rates.fpr[[j, k]]))
}

/// npLCM without covariates, evaluated by direct products in probability space.
#[derive(Debug, Clone, PartialEq)]
pub struct NoCovariateParams<T> {
    pub pi: Vec<T>,
    pub nu: Vec<T>,
    pub eta: Vec<T>,
    pub rates: RateParams<T>,
}

impl<T: Real> NoCovariateParams<T> {
    fn ss_prob(&self, ss: &[Option<u8>], ss_pathogens: &[usize], cause: &Cause) -> T {
        let mut p = T::one();
        for (s, v) in ss.iter().enumerate() {
            if let Some(v) = v {
                let q = if cause.contains(ss_pathogens[s]) { self.rates.tpr_ss[s] } else { T::zero() };
                p = p * if *v == 1 { q } else { T::one() - q };
            }
        }
        p
    }

    /// `P(M, SS | case)` as an explicit double sum.
    pub fn case_prob(&self, m: &[u8], ss: &[Option<u8>], ss_pathogens: &[usize], causes: &CauseSpec) -> Result<T> {
        let mut total = T::zero();
        for (l, cause) in causes.causes().iter().enumerate() {
            let mut inner = T::zero();
            for (k, &e) in self.eta.iter().enumerate() {
                inner = inner + e * bernoulli_product(m, &class_positive_rates(cause, k, &self.rates))?;
            }
            total = total + self.pi[l] * inner * self.ss_prob(ss, ss_pathogens, cause);
        }
        Ok(total)
    }

    pub fn control_prob(&self, m: &[u8]) -> Result<T> {
        let mut total = T::zero();
        for (k, &v) in self.nu.iter().enumerate() {
            let col: Vec<T> = self.rates.fpr.column(k).to_vec();
            total = total + v * bernoulli_product(m, &col)?;
        }
        Ok(total)
    }

    pub fn loglik(&self, data: &PreparedData<T>) -> Result<T> {
        let mut acc = CompensatedSum::new();
        for i in 0..data.n_subjects() {
            let p = if data.is_case[i] {
                self.case_prob(data.brs_of(i), &ss_row(data, i), &data.ss_pathogens, &data.causes)?
            } else {
                self.control_prob(data.brs_of(i))?
            };
            acc.add(p.ln());
        }
        Ok(acc.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::close;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol
        }
    }

    fn patterns(j: usize) -> Vec<Vec<u8>> {
        (0..1usize << j).map(|b| (0..j).map(|s| ((b >> s) & 1) as u8).collect()).collect()
    }

    /// One case and one control per pattern, constant features.
    fn enumeration_data(j: usize, causes: CauseSpec, k: usize, x: &[f64], w: &[f64]) -> PreparedData<f64> {
        let pats = patterns(j);
        let n = 2 * pats.len();
        let mut brs = Array2::zeros((n, j));
        let mut is_case = Vec::new();
        for (r, p) in pats.iter().chain(pats.iter()).enumerate() {
            for (c, &v) in p.iter().enumerate() {
                brs[[r, c]] = v;
            }
            is_case.push(r < pats.len());
        }
        let xf = Array2::from_shape_fn((n, x.len()), |(_, c)| x[c]);
        let wf = Array2::from_shape_fn((n, w.len()), |(_, c)| w[c]);
        PreparedData::from_parts(brs, Array2::from_elem((n, 0), None), vec![], is_case, &xf, &wf, causes, k).unwrap()
    }

    fn toy_params(j: usize, l: usize, k: usize, nx: usize, nw: usize) -> Params<f64> {
        let tpr = Array2::from_shape_fn((j, k), |(a, b)| 0.6 + 0.1 * a as f64 + 0.05 * b as f64);
        let fpr = Array2::from_shape_fn((j, k), |(a, b)| 0.1 + 0.15 * a as f64 + 0.3 * b as f64);
        let mut reg = RegressionParams::zeros(l, nx, k, nw);
        for (c, block) in reg.etiology.iter_mut().enumerate() {
            for (d, v) in block.iter_mut().enumerate() {
                *v = 0.3 * c as f64 - 0.2 * d as f64 + 0.1;
            }
        }
        for kk in 0..k - 1 {
            reg.mu_star[kk] = 0.4 + 0.3 * kk as f64;
            for d in 0..nw {
                reg.control_subclass[kk][d] = -0.5 + 0.2 * d as f64;
                reg.case_subclass[kk][d] = 0.7 - 0.1 * d as f64;
            }
        }
        Params { rates: RateParams { tpr, fpr, tpr_ss: vec![] }, regression: reg }
    }

    /// Brute-force `P(m | case)` as a triple loop written from the model definition.
    fn oracle_case_prob(m: &[u8], pi: &[f64], eta: &[f64], causes: &CauseSpec, p: &Params<f64>) -> f64 {
        let mut total = 0.0;
        for (l, cause) in causes.causes().iter().enumerate() {
            for (k, &e) in eta.iter().enumerate() {
                let mut prod = 1.0;
                for (j, &mj) in m.iter().enumerate() {
                    let rate = if cause.0.contains(&j) { p.rates.tpr[[j, k]] } else { p.rates.fpr[[j, k]] };
                    prod *= if mj == 1 { rate } else { 1.0 - rate };
                }
                total += pi[l] * e * prod;
            }
        }
        total
    }

    fn oracle_control_prob(m: &[u8], nu: &[f64], p: &Params<f64>) -> f64 {
        let mut total = 0.0;
        for (k, &v) in nu.iter().enumerate() {
            let mut prod = 1.0;
            for (j, &mj) in m.iter().enumerate() {
                let rate = p.rates.fpr[[j, k]];
                prod *= if mj == 1 { rate } else { 1.0 - rate };
            }
            total += v * prod;
        }
        total
    }

    #[test]
    fn bernoulli_product_examples() {
        assert!(close(bernoulli_product(&[1, 0], &[0.9, 0.2]).unwrap(), 0.72, 1e-15));
        assert!(close(bernoulli_product(&[0, 0, 0], &[0.5, 0.5, 0.5]).unwrap(), 0.125, 1e-15));
        let s = [0.3, 0.6, 0.9];
        let total: f64 = patterns(3).iter().map(|m| bernoulli_product(m, &s).unwrap()).sum();
        assert!(close(total, 1.0, 1e-12));
        let lp = log_bernoulli_product(&[1, 0], &[0.9, 0.2]).unwrap();
        assert!(close(lp, 0.72f64.ln(), 1e-14));
        assert!(bernoulli_product(&[1], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn stick_break_examples() {
        assert_eq!(stick_break(&[0.5, 0.5]).unwrap(), vec![0.5, 0.25, 0.25]);
        assert_eq!(stick_break(&[1.0, 0.3]).unwrap(), vec![1.0, 0.0, 0.0]);
        let g: Vec<f64> = [0.0, 0.0, 0.0].iter().map(|&a| logistic(a)).collect();
        assert_eq!(stick_break(&g).unwrap(), vec![0.5, 0.25, 0.125, 0.125]);
        assert_eq!(stick_break::<f64>(&[]).unwrap(), vec![1.0]);
        assert!(stick_break(&[1.5]).is_err());
        let lw = log_stick_break(&[0.3f64, -1.2, 2.0]);
        let w = stick_break(&[logistic(0.3), logistic(-1.2), logistic(2.0)]).unwrap();
        for (a, b) in lw.iter().zip(&w) {
            assert!(close(a.exp(), *b, 1e-15));
        }
    }

    #[test]
    fn subclass_weight_examples() {
        let reg = RegressionParams::<f64>::zeros(2, 1, 1, 1);
        assert_eq!(reg.subclass_weights(&[3.0], Side::Case).unwrap(), vec![1.0]);
        let reg = RegressionParams::<f64>::zeros(2, 1, 2, 1);
        assert_eq!(reg.subclass_weights(&[3.0], Side::Control).unwrap(), vec![0.5, 0.5]);
        let mut reg = RegressionParams::<f64>::zeros(2, 1, 3, 1);
        reg.mu_star[0] = 10.0;
        let w = reg.subclass_weights(&[0.0], Side::Case).unwrap();
        assert!(close(w[0], 0.999_954_602_131_297_6, 1e-15));
        // the second intercept is cumulative, so the second break is also g(10)
        assert!(w[1] < 5e-5 && w[2] < 5e-5);
        assert!(close(w.iter().sum::<f64>(), 1.0, 1e-15));
    }

    #[test]
    fn intercepts_are_cumulative() {
        let mut reg = RegressionParams::<f64>::zeros(2, 0, 4, 0);
        reg.mu_star = vec![0.5, 0.0, 2.0];
        assert_eq!(reg.intercepts(), vec![0.5, 0.5, 2.5]);
    }

    #[test]
    fn class_positive_rate_examples() {
        let mut rates = RateParams::uniform(3, 1, 0.0, 0.0, 0, 0.0);
        rates.tpr.column_mut(0).assign(&ndarray::arr1(&[0.9, 0.8, 0.7]));
        rates.fpr.column_mut(0).assign(&ndarray::arr1(&[0.5, 0.05, 0.5]));
        assert_eq!(class_positive_rates(&Cause(vec![1]), 0, &rates), vec![0.5, 0.8, 0.5]);
        assert_eq!(class_positive_rates(&Cause(vec![]), 0, &rates), vec![0.5, 0.05, 0.5]);
        assert_eq!(class_positive_rates(&Cause(vec![0, 1]), 0, &rates), vec![0.9, 0.8, 0.5]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0, 0.0, 0.0]), vec![0.25; 4]);
        let a = softmax(&[0.2, -1.0, 3.0]);
        let b = softmax(&[100.2, 99.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!(close(*x, *y, 1e-15));
        }
        let p = softmax(&[2f64.ln(), 0.0, 0.0]);
        assert!(close(p[0], 0.5, 1e-15) && close(p[1], 0.25, 1e-15));
        assert!(softmax(&[800.0f64, 0.0]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn control_cell_example() {
        let mut reg = RegressionParams::<f64>::zeros(2, 0, 2, 0);
        reg.mu_star[0] = (0.6f64 / 0.4).ln();
        let rates = RateParams {
            tpr: Array2::from_elem((2, 2), 0.9),
            fpr: ndarray::arr2(&[[0.5, 0.1], [0.5, 0.1]]),
            tpr_ss: vec![],
        };
        let logs = RateLogs::new(&rates);
        let v = control_cell_loglik_raw(&[0, 0], &reg.log_subclass_weights(&[], Side::Control), &logs);
        assert!(close(v.exp(), 0.474, 1e-12));
    }

    #[test]
    fn enumeration_oracle_matches_cellwise() {
        let settings: Vec<(usize, Vec<Vec<usize>>, usize)> = vec![
            (2, vec![vec![0], vec![1]], 2),
            (2, vec![vec![0], vec![1]], 1),
            (3, vec![vec![0], vec![1], vec![2]], 2),
            (3, vec![vec![0], vec![1, 2], vec![]], 2),
            (1, vec![vec![0], vec![]], 2),
        ];
        for (j, causes, k) in settings {
            let cs = CauseSpec::new(causes).unwrap();
            let x = [1.0, -0.4];
            let w = [1.0, 0.8];
            let data = enumeration_data(j, cs.clone(), k, &x, &w);
            let p = toy_params(j, cs.len(), k, 2, 2);
            let pi = p.regression.etiology_probs(&x).unwrap();
            let eta = p.regression.subclass_weights(&w, Side::Case).unwrap();
            let nu = p.regression.subclass_weights(&w, Side::Control).unwrap();
            let (mut case_total, mut ctrl_total) = (0.0, 0.0);
            for i in 0..data.n_subjects() {
                let m = data.brs_of(i).to_vec();
                if data.is_case[i] {
                    let cells = case_cell_logliks(&data, i, &p).unwrap();
                    let lp: Vec<f64> = cells.iter().zip(&pi).map(|(c, q)| c + q.ln()).collect();
                    let ours = log_sum_exp(&lp).exp();
                    let oracle = oracle_case_prob(&m, &pi, &eta, &cs, &p);
                    assert!(close(ours, oracle, 1e-12), "case {m:?}: {ours} vs {oracle}");
                    case_total += ours;
                } else {
                    let ours = control_cell_loglik(&data, i, &p).unwrap().exp();
                    let oracle = oracle_control_prob(&m, &nu, &p);
                    assert!(close(ours, oracle, 1e-12));
                    ctrl_total += ours;
                }
            }
            assert!(close(case_total, 1.0, 1e-10) && close(ctrl_total, 1.0, 1e-10));
        }
    }

    #[test]
    fn total_loglik_matches_oracle_sum() {
        let cs = CauseSpec::singletons(2).unwrap();
        let x = [1.0, 0.5];
        let w = [1.0, -0.5];
        let data = enumeration_data(2, cs.clone(), 2, &x, &w);
        let p = toy_params(2, 2, 2, 2, 2);
        let pi = p.regression.etiology_probs(&x).unwrap();
        let eta = p.regression.subclass_weights(&w, Side::Case).unwrap();
        let nu = p.regression.subclass_weights(&w, Side::Control).unwrap();
        let oracle: f64 = patterns(2)
            .iter()
            .map(|m| oracle_case_prob(m, &pi, &eta, &cs, &p).ln() + oracle_control_prob(m, &nu, &p).ln())
            .sum();
        assert!(close(total_loglik(&data, &p).unwrap(), oracle, 1e-10));
    }

    #[test]
    fn k1_reduces_to_plcm() {
        let cs = CauseSpec::singletons(3).unwrap();
        let data = enumeration_data(3, cs.clone(), 1, &[1.0], &[1.0]);
        let p = toy_params(3, 3, 1, 1, 1);
        for i in 0..data.n_subjects() {
            let m = data.brs_of(i);
            if data.is_case[i] {
                let cells = case_cell_logliks(&data, i, &p).unwrap();
                for (l, cause) in cs.causes().iter().enumerate() {
                    let plcm = log_bernoulli_product(m, &class_positive_rates(cause, 0, &p.rates)).unwrap();
                    assert!(close(cells[l], plcm, 1e-14));
                }
            } else {
                let col: Vec<f64> = p.rates.fpr.column(0).to_vec();
                let plcm = log_bernoulli_product(m, &col).unwrap();
                assert!(close(control_cell_loglik(&data, i, &p).unwrap(), plcm, 1e-14));
            }
        }
    }

    #[test]
    fn intercept_only_equals_no_covariate_path() {
        let cs = CauseSpec::new(vec![vec![0], vec![1], vec![0, 2], vec![]]).unwrap();
        let data = enumeration_data(3, cs.clone(), 2, &[1.0], &[1.0]);
        let p = toy_params(3, 4, 2, 1, 1);
        let nc = NoCovariateParams {
            pi: p.regression.etiology_probs(&[1.0]).unwrap(),
            nu: p.regression.subclass_weights(&[1.0], Side::Control).unwrap(),
            eta: p.regression.subclass_weights(&[1.0], Side::Case).unwrap(),
            rates: p.rates.clone(),
        };
        let a = total_loglik(&data, &p).unwrap();
        let b = nc.loglik(&data).unwrap();
        assert!(close(a, b, 1e-10), "{a} vs {b}");
    }

    fn ss_data() -> (PreparedData<f64>, Params<f64>) {
        // J=2 with SS on pathogen 1; case 0 SS+, case 1 SS-, case 2 SS missing, subject 3 control
        let brs = ndarray::arr2(&[[1u8, 1], [0, 1], [1, 0], [0, 0]]);
        let ss = ndarray::arr2(&[[Some(1u8)], [Some(0)], [None], [None]]);
        let ones = Array2::from_elem((4, 1), 1.0);
        let cs = CauseSpec::new(vec![vec![0], vec![1], vec![]]).unwrap();
        let data =
            PreparedData::from_parts(brs, ss, vec![1], vec![true, true, true, false], &ones, &ones, cs, 1).unwrap();
        let mut p = toy_params(2, 3, 1, 1, 1);
        p.rates.tpr_ss = vec![0.15];
        (data, p)
    }

    #[test]
    fn silver_standard_perfect_specificity() {
        let (data, p) = ss_data();
        let cells = case_cell_logliks(&data, 0, &p).unwrap();
        assert_eq!(cells[0], f64::NEG_INFINITY);
        assert_eq!(cells[2], f64::NEG_INFINITY);
        assert!(cells[1].is_finite());
        let ief = individual_etiology(&data, 0, &p).unwrap();
        assert_eq!(ief[0], 0.0);
        assert_eq!(ief[2], 0.0);
        assert!(close(ief[1], 1.0, 1e-15));
        // SS negative: causal class gets log(1 - 0.15), others unaffected
        let neg = case_cell_logliks(&data, 1, &p).unwrap();
        let brs_only = |l: usize| {
            log_bernoulli_product(data.brs_of(1), &class_positive_rates(data.causes.get(l), 0, &p.rates)).unwrap()
        };
        assert!(close(neg[1], brs_only(1) + 0.85f64.ln(), 1e-14));
        assert!(close(neg[0], brs_only(0), 1e-14));
        // missing SS contributes nothing
        let miss = case_cell_logliks(&data, 2, &p).unwrap();
        let brs_only2 =
            log_bernoulli_product(data.brs_of(2), &class_positive_rates(data.causes.get(1), 0, &p.rates)).unwrap();
        assert!(close(miss[1], brs_only2, 1e-14));
    }

    #[test]
    fn ss_loglik_agrees_with_no_covariate_path() {
        let (data, p) = ss_data();
        let nc = NoCovariateParams {
            pi: p.regression.etiology_probs(&[1.0]).unwrap(),
            nu: vec![1.0],
            eta: vec![1.0],
            rates: p.rates.clone(),
        };
        assert!(close(total_loglik(&data, &p).unwrap(), nc.loglik(&data).unwrap(), 1e-12));
    }

    #[test]
    fn inconsistent_case_errors() {
        let brs = ndarray::arr2(&[[1u8, 1], [0, 0]]);
        let ss = ndarray::arr2(&[[Some(1u8)], [None]]);
        let ones = Array2::from_elem((2, 1), 1.0);
        let cs = CauseSpec::new(vec![vec![0], vec![]]).unwrap();
        let data = PreparedData::from_parts(brs, ss, vec![1], vec![true, false], &ones, &ones, cs, 1).unwrap();
        let mut p = toy_params(2, 2, 1, 1, 1);
        p.rates.tpr_ss = vec![0.2];
        let err = individual_etiology(&data, 0, &p).unwrap_err();
        assert!(err.to_string().contains("data inconsistent with cause spec"));
    }

    #[test]
    fn individual_etiology_bayes_rule() {
        // J=2, L=2, K=1; hand computation
        let brs = ndarray::arr2(&[[1u8, 0], [0, 0]]);
        let none = Array2::from_elem((2, 0), None);
        let ones = Array2::from_elem((2, 1), 1.0);
        let cs = CauseSpec::singletons(2).unwrap();
        let data = PreparedData::from_parts(brs, none, vec![], vec![true, false], &ones, &ones, cs, 1).unwrap();
        let mut reg = RegressionParams::zeros(2, 1, 1, 1);
        reg.etiology[0][0] = 0.3f64.ln();
        reg.etiology[1][0] = 0.7f64.ln();
        let rates = RateParams { tpr: ndarray::arr2(&[[0.9], [0.8]]), fpr: ndarray::arr2(&[[0.1], [0.2]]), tpr_ss: vec![] };
        let p = Params { rates, regression: reg };
        let a = 0.3 * 0.9 * 0.8; // cause 0: m0=1 with tpr, m1=0 with fpr
        let b = 0.7 * 0.1 * 0.2; // cause 1: m0=1 with fpr, m1=0 with tpr
        let ief = individual_etiology(&data, 0, &p).unwrap();
        assert!(close(ief[0], a / (a + b), 1e-12));
        assert!(close(ief[1], b / (a + b), 1e-12));
    }

    #[test]
    fn uniform_ief_when_cells_equal() {
        let brs = ndarray::arr2(&[[1u8, 1], [0, 0]]);
        let none = Array2::from_elem((2, 0), None);
        let ones = Array2::from_elem((2, 1), 1.0);
        let cs = CauseSpec::singletons(2).unwrap();
        let data = PreparedData::from_parts(brs, none, vec![], vec![true, false], &ones, &ones, cs, 1).unwrap();
        let p = Params {
            rates: RateParams::uniform(2, 1, 0.7, 0.3, 0, 0.5),
            regression: RegressionParams::zeros(2, 1, 1, 1),
        };
        let ief = individual_etiology(&data, 0, &p).unwrap();
        assert!(close(ief[0], 0.5, 1e-15));
    }

    #[test]
    fn positive_rate_curve_limits() {
        let cs = CauseSpec::singletons(2).unwrap();
        let mut reg = RegressionParams::<f64>::zeros(2, 1, 1, 1);
        let rates = RateParams { tpr: ndarray::arr2(&[[0.9], [0.8]]), fpr: ndarray::arr2(&[[0.1], [0.2]]), tpr_ss: vec![] };
        reg.etiology[0][0] = 1000.0;
        let p = Params { rates, regression: reg };
        assert!(close(positive_rate_curve(&[1.0], &[1.0], 0, &p, &cs).unwrap(), 0.9, 1e-12));
        assert!(close(positive_rate_curve(&[1.0], &[1.0], 1, &p, &cs).unwrap(), 0.2, 1e-12));
        for l in 0..2 {
            let a = positive_rate_curve(&[0.3], &[1.0], l, &p, &cs).unwrap();
            let b = marginal_positive_rate(&[0.3], &[1.0], l, &p, &cs).unwrap();
            assert!(close(a, b, 1e-14));
        }
        let multi = CauseSpec::new(vec![vec![0], vec![0, 1]]).unwrap();
        assert!(positive_rate_curve(&[1.0], &[1.0], 1, &p, &multi).is_err());
        assert!(positive_rate_curve(&[1.0], &[1.0], 0, &p, &multi).is_err());
    }

    #[test]
    fn control_positive_rate_bounded_by_fpr_range() {
        let mut reg = RegressionParams::<f64>::zeros(2, 1, 3, 2);
        reg.mu_star = vec![0.5, 1.0];
        reg.control_subclass = vec![vec![1.0, -2.0], vec![0.5, 3.0]];
        let rates = RateParams {
            tpr: Array2::from_elem((1, 3), 0.9),
            fpr: ndarray::arr2(&[[0.05, 0.4, 0.2]]),
            tpr_ss: vec![],
        };
        let p = Params { rates, regression: reg };
        for t in -20..=20 {
            let v = control_positive_rate(&[1.0, t as f64 * 0.5], 0, &p).unwrap();
            assert!((0.05..=0.4).contains(&v));
        }
    }

    #[test]
    fn f32_kernels_agree_with_f64() {
        let reg64 = {
            let mut r = RegressionParams::<f64>::zeros(3, 2, 3, 1);
            r.etiology = vec![vec![0.2, -0.3], vec![0.0, 0.5], vec![1.0, 0.1]];
            r.mu_star = vec![0.3, 0.8];
            r.case_subclass = vec![vec![0.1], vec![-0.4]];
            r
        };
        let reg32 = RegressionParams::<f32> {
            etiology: reg64.etiology.iter().map(|b| b.iter().map(|&v| v as f32).collect()).collect(),
            control_subclass: vec![vec![0.0], vec![0.0]],
            case_subclass: vec![vec![0.1], vec![-0.4]],
            mu_star: vec![0.3, 0.8],
            tau0: vec![1.0, 1.0],
        };
        let a = reg64.etiology_probs(&[1.0, 0.7]).unwrap();
        let b = reg32.etiology_probs(&[1.0, 0.7]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - *y as f64).abs() < 1e-6);
        }
        let a = reg64.subclass_weights(&[0.4], Side::Case).unwrap();
        let b = reg32.subclass_weights(&[0.4], Side::Case).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - *y as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn finite_differences_are_stable() {
        let cs = CauseSpec::singletons(2).unwrap();
        let data = enumeration_data(2, cs, 2, &[1.0, 0.3], &[1.0, -0.6]);
        let base = toy_params(2, 2, 2, 2, 2);
        let f = |p: &Params<f64>| total_loglik(&data, p).unwrap();
        type Setter = fn(&mut Params<f64>, f64);
        let setters: [Setter; 4] = [
            |p, h| p.regression.etiology[1][1] += h,
            |p, h| p.regression.case_subclass[0][0] += h,
            |p, h| p.regression.mu_star[0] += h,
            |p, h| p.rates.tpr[[1, 0]] += h,
        ];
        for set in setters {
            let grad = |h: f64| {
                let mut up = base.clone();
                let mut dn = base.clone();
                set(&mut up, h);
                set(&mut dn, -h);
                (f(&up) - f(&dn)) / (2.0 * h)
            };
            let (g4, g5) = (grad(1e-4), grad(1e-5));
            assert!((g4 - g5).abs() <= 1e-3 * g4.abs().max(1.0), "{g4} vs {g5}");
        }
    }
}
