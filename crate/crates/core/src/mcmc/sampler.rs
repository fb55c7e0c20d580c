//! One Metropolis-within-Gibbs sweep: latents, rates, regression blocks, smoothing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PriorConfig;
use crate::design::{PreparedData, Segment};
use crate::error::{Error, Result};
use crate::mcmc::proposal::AdaptiveProposal;
use crate::mcmc::state::{Layout, ParamState, Smoothing, SmoothingState};
use crate::model::{case_joint_logliks, log_softmax, LatentState, Params, RateLogs, RateParams, RegressionParams};
use crate::priors::{intercept_hyper_params, sample_gamma, sample_normal, BetaParams, SmoothingMixture};
use crate::special::{log1m_logistic, log_logistic, log_sum_exp};
use crate::splines::penalty_quadratic;

/// Standard deviation of the initial regression coefficients.
const INIT_COEF_SD: f64 = 0.1;

/// Proposal states for every Metropolis block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposals {
    /// `[cause][segment]`.
    pub etiology: Vec<Vec<AdaptiveProposal>>,
    /// `[subclass][segment]`.
    pub control: Vec<Vec<AdaptiveProposal>>,
    pub case: Vec<Vec<AdaptiveProposal>>,
    pub mu_star: Vec<AdaptiveProposal>,
}

/// Complete, serializable state of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub state: ParamState,
    pub latents: LatentState,
    pub proposals: Proposals,
    pub rng: ChaCha8Rng,
    /// Completed sweeps.
    pub iteration: usize,
}

/// Acceptance summary for one Metropolis block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub block: String,
    pub proposed: u64,
    pub accepted: u64,
}

impl BlockAcceptance {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Static problem description shared by every chain.
#[derive(Debug)]
pub struct Sampler<'a> {
    data: &'a PreparedData<f64>,
    priors: PriorConfig,
    x_segments: Vec<Segment>,
    w_segments: Vec<Segment>,
    mixture: SmoothingMixture,
    tpr_prior: Vec<BetaParams>,
    tpr_ss_prior: Vec<BetaParams>,
}

/// Per-sweep caches of linear predictors and allocation counts over unique covariate rows.
struct Caches {
    /// `phi[r * L + l]`.
    phi: Vec<f64>,
    /// `alpha[side][r * (K-1) + k]`, side 0 = control, 1 = case.
    alpha: [Vec<f64>; 2],
}

fn segment_spline_index(segments: &[Segment]) -> Vec<Option<usize>> {
    let mut t = 0;
    segments
        .iter()
        .map(|s| {
            if s.is_spline() {
                t += 1;
                Some(t - 1)
            } else {
                None
            }
        })
        .collect()
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, logw: &[f64]) -> Option<usize> {
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    let w: Vec<f64> = logw.iter().map(|&v| (v - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &v) in w.iter().enumerate() {
        acc += v;
        if u < acc {
            return Some(i);
        }
    }
    w.iter().rposition(|&v| v > 0.0)
}

fn mh_accept<R: Rng + ?Sized>(rng: &mut R, log_ratio: f64) -> (bool, f64) {
    let alpha = if log_ratio.is_nan() { 0.0 } else { log_ratio.min(0.0).exp() };
    let accept = log_ratio >= 0.0 || rng.random::<f64>() < alpha;
    (accept, alpha)
}

fn bernoulli_logit_terms(alpha: f64, stop: u32, pass: u32) -> f64 {
    let mut v = 0.0;
    if stop > 0 {
        v += stop as f64 * log_logistic(alpha);
    }
    if pass > 0 {
        v += pass as f64 * log1m_logistic(alpha);
    }
    v
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a PreparedData<f64>, x_segments: Vec<Segment>, w_segments: Vec<Segment>, priors: &PriorConfig) -> Result<Self> {
        priors.validate(data.n_pathogens(), data.ss_pathogens.len())?;
        let cover = |segs: &[Segment], width: usize| {
            let mut next = 0;
            for s in segs {
                let r = s.range();
                if r.start != next || r.end <= r.start {
                    return false;
                }
                next = r.end;
            }
            next == width
        };
        if !cover(&x_segments, data.n_x_coef()) || !cover(&w_segments, data.n_w_coef()) {
            return Err(Error::Dimension("coefficient segments do not tile the feature columns".into()));
        }
        let tpr_prior = (0..data.n_pathogens()).map(|j| priors.tpr_brs_for(j)).collect();
        let tpr_ss_prior = (0..data.ss_pathogens.len()).map(|s| priors.tpr_ss_for(s)).collect();
        Ok(Self {
            data,
            priors: priors.clone(),
            x_segments,
            w_segments,
            mixture: priors.smoothing.into(),
            tpr_prior,
            tpr_ss_prior,
        })
    }

    pub fn data(&self) -> &PreparedData<f64> {
        self.data
    }

    pub fn priors(&self) -> &PriorConfig {
        &self.priors
    }

    pub fn layout(&self) -> Layout {
        let d = self.data;
        Layout {
            n_pathogens: d.n_pathogens(),
            n_subclasses: d.k,
            n_ss: d.ss_pathogens.len(),
            n_causes: d.n_causes(),
            n_x: d.n_x_coef(),
            n_w: d.n_w_coef(),
            n_x_splines: self.x_segments.iter().filter(|s| s.is_spline()).count(),
            n_w_splines: self.w_segments.iter().filter(|s| s.is_spline()).count(),
        }
    }

    fn n_x_splines(&self) -> usize {
        self.x_segments.iter().filter(|s| s.is_spline()).count()
    }

    fn n_w_splines(&self) -> usize {
        self.w_segments.iter().filter(|s| s.is_spline()).count()
    }

    fn sample_smoothing<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, rho: f64) -> Vec<Smoothing> {
        (0..n)
            .map(|_| {
                let (tau, flexible) = self.mixture.sample(rng, rho);
                Smoothing { tau, flexible }
            })
            .collect()
    }

    fn sample_intercepts<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let (a0, b0) = intercept_hyper_params(self.priors.intercept_df, self.priors.intercept_scale);
        let k1 = self.data.k - 1;
        let tau0: Vec<f64> = (0..k1).map(|_| sample_gamma(rng, a0, b0)).collect();
        let mu = tau0.iter().map(|&t| (sample_normal(rng) / t.sqrt()).abs().max(f64::MIN_POSITIVE)).collect();
        (mu, tau0)
    }

    fn sample_rates<R: Rng + ?Sized>(&self, rng: &mut R) -> RateParams<f64> {
        let (j, k) = (self.data.n_pathogens(), self.data.k);
        let mut rates = RateParams::uniform(j, k, 0.5, 0.5, self.tpr_ss_prior.len(), 0.5);
        for jj in 0..j {
            for kk in 0..k {
                rates.tpr[[jj, kk]] = self.tpr_prior[jj].sample(rng);
                rates.fpr[[jj, kk]] = self.priors.fpr.sample(rng);
            }
        }
        for (s, p) in self.tpr_ss_prior.iter().enumerate() {
            rates.tpr_ss[s] = p.sample(rng);
        }
        rates
    }

    fn new_proposals(&self) -> Proposals {
        let k1 = self.data.k - 1;
        let side = |segs: &[Segment], rows: usize| {
            (0..rows).map(|_| segs.iter().map(|s| AdaptiveProposal::new(s.range().len())).collect()).collect()
        };
        Proposals {
            etiology: side(&self.x_segments, self.data.n_causes()),
            control: side(&self.w_segments, k1),
            case: side(&self.w_segments, k1),
            mu_star: (0..k1).map(|_| AdaptiveProposal::new(1)).collect(),
        }
    }

    /// Initial chain state: rates and intercepts from their priors, regression
    /// coefficients from `N(0, 0.1^2)`, latent allocations uniform.
    pub fn init_state(&self, mut rng: ChaCha8Rng) -> ChainState {
        let d = self.data;
        let (l, k) = (d.n_causes(), d.k);
        let rates = self.sample_rates(&mut rng);
        let mut coefs = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..cols).map(|_| INIT_COEF_SD * sample_normal(&mut rng)).collect()).collect()
        };
        let etiology = coefs(l, d.n_x_coef());
        let control_subclass = coefs(k - 1, d.n_w_coef());
        let case_subclass = coefs(k - 1, d.n_w_coef());
        let (mu_star, tau0) = self.sample_intercepts(&mut rng);
        let rho_etiology = self.priors.rho_etiology.sample(&mut rng);
        let rho_subclass = self.priors.rho_subclass.sample(&mut rng);
        let smoothing = SmoothingState {
            etiology: (0..l).map(|_| self.sample_smoothing(&mut rng, self.n_x_splines(), rho_etiology)).collect(),
            control: (0..k - 1).map(|_| self.sample_smoothing(&mut rng, self.n_w_splines(), rho_subclass)).collect(),
            case: (0..k - 1).map(|_| self.sample_smoothing(&mut rng, self.n_w_splines(), rho_subclass)).collect(),
            rho_etiology,
            rho_subclass,
        };
        let class = (0..d.n_subjects()).map(|i| d.is_case[i].then(|| rng.random_range(0..l))).collect();
        let subclass = (0..d.n_subjects()).map(|_| rng.random_range(0..k)).collect();
        ChainState {
            state: ParamState {
                params: Params {
                    rates,
                    regression: RegressionParams { etiology, control_subclass, case_subclass, mu_star, tau0 },
                },
                smoothing,
            },
            latents: LatentState { class, subclass },
            proposals: self.new_proposals(),
            rng,
            iteration: 0,
        }
    }

    /// Draws every parameter from its prior distribution.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamState {
        let d = self.data;
        let (l, k) = (d.n_causes(), d.k);
        let rates = self.sample_rates(rng);
        let (mu_star, tau0) = self.sample_intercepts(rng);
        let rho_etiology = self.priors.rho_etiology.sample(rng);
        let rho_subclass = self.priors.rho_subclass.sample(rng);
        let draw_side = |rows: usize, segs: &[Segment], rho: f64, rng: &mut R| {
            let mut coefs = Vec::with_capacity(rows);
            let mut smooth = Vec::with_capacity(rows);
            for _ in 0..rows {
                let mut c = Vec::new();
                let mut s = Vec::new();
                for seg in segs {
                    if seg.is_spline() {
                        let (tau, flexible) = self.mixture.sample(rng, rho);
                        c.extend(crate::priors::sample_spline_prior(rng, seg.range().len(), tau, self.priors.k_beta));
                        s.push(Smoothing { tau, flexible });
                    } else {
                        c.extend((0..seg.range().len()).map(|_| self.priors.linear_sd * sample_normal(rng)));
                    }
                }
                coefs.push(c);
                smooth.push(s);
            }
            (coefs, smooth)
        };
        let (etiology, s_eti) = draw_side(l, &self.x_segments, rho_etiology, rng);
        let (control_subclass, s_ctrl) = draw_side(k - 1, &self.w_segments, rho_subclass, rng);
        let (case_subclass, s_case) = draw_side(k - 1, &self.w_segments, rho_subclass, rng);
        ParamState {
            params: Params {
                rates,
                regression: RegressionParams { etiology, control_subclass, case_subclass, mu_star, tau0 },
            },
            smoothing: SmoothingState { etiology: s_eti, control: s_ctrl, case: s_case, rho_etiology, rho_subclass },
        }
    }

    fn caches(&self, reg: &RegressionParams<f64>) -> Caches {
        let d = self.data;
        let l = d.n_causes();
        let k1 = d.k - 1;
        let mut phi = Vec::with_capacity(d.x_features.nrows() * l);
        for x in d.x_features.rows() {
            phi.extend(reg.etiology_predictors(x.as_slice().expect("standard layout")));
        }
        let mut alpha = [Vec::with_capacity(d.w_features.nrows() * k1), Vec::with_capacity(d.w_features.nrows() * k1)];
        for w in d.w_features.rows() {
            let w = w.as_slice().expect("standard layout");
            alpha[0].extend(reg.subclass_logits(w, crate::model::Side::Control));
            alpha[1].extend(reg.subclass_logits(w, crate::model::Side::Case));
        }
        Caches { phi, alpha }
    }

    /// Exact joint draw of `(I_i, Z_i)` for cases and `Z_i` for controls.
    pub fn update_latents<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        params: &Params<f64>,
        latents: &mut LatentState,
        iteration: usize,
    ) -> Result<()> {
        let caches = self.caches(&params.regression);
        self.update_latents_cached(rng, params, &caches, latents, iteration)
    }

    fn update_latents_cached<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        params: &Params<f64>,
        caches: &Caches,
        latents: &mut LatentState,
        iteration: usize,
    ) -> Result<()> {
        let d = self.data;
        let (l, k) = (d.n_causes(), d.k);
        let k1 = k - 1;
        let logs = RateLogs::new(&params.rates);
        let log_pi: Vec<Vec<f64>> = caches.phi.chunks(l).map(log_softmax).collect();
        let log_w = |side: usize| -> Vec<Vec<f64>> {
            (0..d.w_features.nrows())
                .map(|r| crate::model::log_stick_break(&caches.alpha[side][r * k1..(r + 1) * k1]))
                .collect()
        };
        let log_nu = log_w(0);
        let log_eta = log_w(1);
        let mut joint = vec![0.0; l * k];
        let mut ctrl = vec![0.0; k];
        for i in 0..d.n_subjects() {
            let m = d.brs_of(i);
            if d.is_case[i] {
                case_joint_logliks(m, &log_eta[d.w_row[i]], &d.causal, &logs, &mut joint);
                let ss: Vec<Option<u8>> = d.ss.row(i).to_vec();
                let lp = &log_pi[d.x_row[i]];
                for c in 0..l {
                    let extra = lp[c] + logs.ss_loglik(&ss, &d.ss_causal[c]);
                    for kk in 0..k {
                        joint[c * k + kk] += extra;
                    }
                }
                let pick = categorical(rng, &joint).ok_or_else(|| Error::Sampler {
                    iteration,
                    message: format!("data inconsistent with cause spec: case {i} has zero probability under every class"),
                })?;
                latents.class[i] = Some(pick / k);
                latents.subclass[i] = pick % k;
            } else {
                let lw = &log_nu[d.w_row[i]];
                for kk in 0..k {
                    ctrl[kk] = lw[kk] + logs.fpr_loglik(m, kk);
                }
                latents.subclass[i] = categorical(rng, &ctrl).ok_or_else(|| Error::Sampler {
                    iteration,
                    message: format!("control {i} has zero probability under every subclass"),
                })?;
                latents.class[i] = None;
            }
        }
        Ok(())
    }

    /// Conjugate Beta updates of TPRs, FPRs and SS sensitivities.
    pub fn update_rates<R: Rng + ?Sized>(&self, rng: &mut R, rates: &mut RateParams<f64>, latents: &LatentState) {
        let d = self.data;
        let (j, k) = (d.n_pathogens(), d.k);
        let mut tp = vec![[0usize; 2]; j * k];
        let mut fp = vec![[0usize; 2]; j * k];
        let mut ss = vec![[0usize; 2]; d.ss_pathogens.len()];
        for i in 0..d.n_subjects() {
            let kk = latents.subclass[i];
            let m = d.brs_of(i);
            match latents.class[i] {
                Some(c) => {
                    let mask = &d.causal[c];
                    for jj in 0..j {
                        let slot = if mask[jj] { &mut tp[jj * k + kk] } else { &mut fp[jj * k + kk] };
                        slot[(m[jj] == 0) as usize] += 1;
                    }
                    for (s, v) in d.ss.row(i).iter().enumerate() {
                        if let (Some(v), true) = (v, d.ss_causal[c][s]) {
                            ss[s][(*v == 0) as usize] += 1;
                        }
                    }
                }
                None => {
                    for jj in 0..j {
                        fp[jj * k + kk][(m[jj] == 0) as usize] += 1;
                    }
                }
            }
        }
        for jj in 0..j {
            for kk in 0..k {
                let [p, n] = tp[jj * k + kk];
                rates.tpr[[jj, kk]] = self.tpr_prior[jj].posterior(p, n).sample(rng);
                let [p, n] = fp[jj * k + kk];
                rates.fpr[[jj, kk]] = self.priors.fpr.posterior(p, n).sample(rng);
            }
        }
        for (s, [p, n]) in ss.into_iter().enumerate() {
            rates.tpr_ss[s] = self.tpr_ss_prior[s].posterior(p, n).sample(rng);
        }
    }

    fn coef_log_prior(&self, seg: &Segment, beta: &[f64], smoothing: Option<&Smoothing>) -> f64 {
        match (seg, smoothing) {
            (Segment::Spline { .. }, Some(s)) => {
                -0.5 * s.tau * penalty_quadratic(beta) - 0.5 * self.priors.k_beta * beta[0] * beta[0]
            }
            _ => {
                let prec = 1.0 / (self.priors.linear_sd * self.priors.linear_sd);
                -0.5 * prec * beta.iter().map(|b| b * b).sum::<f64>()
            }
        }
    }

    fn update_etiology<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        chain: &mut ChainState,
        caches: &mut Caches,
        adapt: bool,
    ) {
        let d = self.data;
        let l_n = d.n_causes();
        let rows = d.x_features.nrows();
        let mut counts = vec![0u32; rows * l_n];
        for &i in &d.cases {
            let c = chain.latents.class[i].expect("case has a class");
            counts[d.x_row[i] * l_n + c] += 1;
        }
        let totals: Vec<u32> = counts.chunks(l_n).map(|c| c.iter().sum()).collect();
        let active: Vec<usize> = (0..rows).filter(|&r| totals[r] > 0).collect();
        let spline_idx = segment_spline_index(&self.x_segments);
        let row_lik = |phi: &[f64], r: usize, l: usize, value: f64| -> f64 {
            let base = &phi[r * l_n..(r + 1) * l_n];
            let mut tmp: [f64; 64] = [0.0; 64];
            let lse = if l_n <= 64 {
                tmp[..l_n].copy_from_slice(base);
                tmp[l] = value;
                log_sum_exp(&tmp[..l_n])
            } else {
                let mut v = base.to_vec();
                v[l] = value;
                log_sum_exp(&v)
            };
            counts[r * l_n + l] as f64 * value - totals[r] as f64 * lse
        };
        for l in 0..l_n {
            for (si, seg) in self.x_segments.iter().enumerate() {
                let range = seg.range();
                let smoothing = spline_idx[si].map(|t| chain.state.smoothing.etiology[l][t]);
                let current: Vec<f64> = chain.state.params.regression.etiology[l][range.clone()].to_vec();
                let proposal = &mut chain.proposals.etiology[l][si];
                let cand = proposal.propose(rng, &current);
                let delta: Vec<f64> = cand.iter().zip(&current).map(|(a, b)| a - b).collect();
                let mut new_phi = Vec::with_capacity(active.len());
                let mut log_ratio = self.coef_log_prior(seg, &cand, smoothing.as_ref())
                    - self.coef_log_prior(seg, &current, smoothing.as_ref());
                for &r in &active {
                    let x = &d.x_features.row(r).to_slice().expect("standard layout")[range.clone()];
                    let shift: f64 = x.iter().zip(&delta).map(|(a, b)| a * b).sum();
                    let old = caches.phi[r * l_n + l];
                    let new = old + shift;
                    log_ratio += row_lik(&caches.phi, r, l, new) - row_lik(&caches.phi, r, l, old);
                    new_phi.push(new);
                }
                let (accept, alpha) = mh_accept(rng, log_ratio);
                if accept {
                    chain.state.params.regression.etiology[l][range.clone()].copy_from_slice(&cand);
                    // inactive rows still need their predictor refreshed
                    for r in 0..rows {
                        if totals[r] == 0 {
                            let x = &d.x_features.row(r).to_slice().expect("standard layout")[range.clone()];
                            caches.phi[r * l_n + l] += x.iter().zip(&delta).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    for (&r, v) in active.iter().zip(new_phi) {
                        caches.phi[r * l_n + l] = v;
                    }
                }
                let proposal = &mut chain.proposals.etiology[l][si];
                if adapt {
                    proposal.adapt(alpha, &chain.state.params.regression.etiology[l][range]);
                } else {
                    proposal.record(accept);
                }
            }
        }
    }

    /// Stick-breaking sufficient statistics per side: `(stop, pass)` per unique `w` row and break.
    fn subclass_counts(&self, latents: &LatentState) -> [Vec<[u32; 2]>; 2] {
        let d = self.data;
        let k1 = d.k - 1;
        let rows = d.w_features.nrows();
        let mut out = [vec![[0u32; 2]; rows * k1], vec![[0u32; 2]; rows * k1]];
        for i in 0..d.n_subjects() {
            let side = d.is_case[i] as usize;
            let z = latents.subclass[i];
            let r = d.w_row[i];
            for kk in 0..k1.min(z + 1) {
                if kk == z {
                    out[side][r * k1 + kk][0] += 1;
                } else {
                    out[side][r * k1 + kk][1] += 1;
                }
            }
        }
        out
    }

    fn update_subclass<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        chain: &mut ChainState,
        caches: &mut Caches,
        counts: &[Vec<[u32; 2]>; 2],
        adapt: bool,
    ) {
        let d = self.data;
        let k1 = d.k - 1;
        let rows = d.w_features.nrows();
        let spline_idx = segment_spline_index(&self.w_segments);
        for side in 0..2 {
            for kk in 0..k1 {
                for (si, seg) in self.w_segments.iter().enumerate() {
                    let range = seg.range();
                    let (coefs, smooth, props) = if side == 0 {
                        (
                            &mut chain.state.params.regression.control_subclass[kk],
                            &chain.state.smoothing.control,
                            &mut chain.proposals.control[kk][si],
                        )
                    } else {
                        (
                            &mut chain.state.params.regression.case_subclass[kk],
                            &chain.state.smoothing.case,
                            &mut chain.proposals.case[kk][si],
                        )
                    };
                    let smoothing = spline_idx[si].map(|t| smooth[kk][t]);
                    let current: Vec<f64> = coefs[range.clone()].to_vec();
                    let cand = props.propose(rng, &current);
                    let delta: Vec<f64> = cand.iter().zip(&current).map(|(a, b)| a - b).collect();
                    let mut log_ratio = self.coef_log_prior(seg, &cand, smoothing.as_ref())
                        - self.coef_log_prior(seg, &current, smoothing.as_ref());
                    let mut new_alpha = vec![0.0; rows];
                    for r in 0..rows {
                        let w = &d.w_features.row(r).to_slice().expect("standard layout")[range.clone()];
                        let shift: f64 = w.iter().zip(&delta).map(|(a, b)| a * b).sum();
                        let old = caches.alpha[side][r * k1 + kk];
                        new_alpha[r] = old + shift;
                        let [stop, pass] = counts[side][r * k1 + kk];
                        if stop + pass > 0 {
                            log_ratio += bernoulli_logit_terms(new_alpha[r], stop, pass)
                                - bernoulli_logit_terms(old, stop, pass);
                        }
                    }
                    let (accept, alpha) = mh_accept(rng, log_ratio);
                    if accept {
                        coefs[range.clone()].copy_from_slice(&cand);
                        for r in 0..rows {
                            caches.alpha[side][r * k1 + kk] = new_alpha[r];
                        }
                    }
                    if adapt {
                        props.adapt(alpha, &coefs[range]);
                    } else {
                        props.record(accept);
                    }
                }
            }
        }
    }

    fn update_mu_star<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        chain: &mut ChainState,
        caches: &mut Caches,
        counts: &[Vec<[u32; 2]>; 2],
        adapt: bool,
    ) {
        let d = self.data;
        let k1 = d.k - 1;
        let rows = d.w_features.nrows();
        for kk in 0..k1 {
            let mu = chain.state.params.regression.mu_star[kk];
            let tau0 = chain.state.params.regression.tau0[kk];
            let y = mu.ln();
            let y_new = chain.proposals.mu_star[kk].propose(rng, &[y])[0];
            let mu_new = y_new.exp();
            let shift = mu_new - mu;
            let mut log_ratio = -0.5 * tau0 * (mu_new * mu_new - mu * mu) + (y_new - y);
            for side in 0..2 {
                for r in 0..rows {
                    for k2 in kk..k1 {
                        let [stop, pass] = counts[side][r * k1 + k2];
                        if stop + pass > 0 {
                            let old = caches.alpha[side][r * k1 + k2];
                            log_ratio += bernoulli_logit_terms(old + shift, stop, pass)
                                - bernoulli_logit_terms(old, stop, pass);
                        }
                    }
                }
            }
            let (accept, alpha) = if mu_new.is_finite() && mu_new > 0.0 { mh_accept(rng, log_ratio) } else { (false, 0.0) };
            if accept {
                chain.state.params.regression.mu_star[kk] = mu_new;
                for side in 0..2 {
                    for r in 0..rows {
                        for k2 in kk..k1 {
                            caches.alpha[side][r * k1 + k2] += shift;
                        }
                    }
                }
            }
            let cur = chain.state.params.regression.mu_star[kk].ln();
            if adapt {
                chain.proposals.mu_star[kk].adapt(alpha, &[cur]);
            } else {
                chain.proposals.mu_star[kk].record(accept);
            }
        }
    }

    /// Smoothing indicators and precisions (indicator drawn with the precision
    /// integrated out), their inclusion probabilities, and intercept precisions.
    fn update_smoothing<R: Rng + ?Sized>(&self, rng: &mut R, state: &mut ParamState) {
        let reg = &state.params.regression;
        let sm = &mut state.smoothing;
        let mut family = |blocks: &[Vec<f64>], smooth: &mut [Vec<Smoothing>], segments: &[Segment], rho: f64, counts: &mut [usize; 2]| {
            for (coefs, states) in blocks.iter().zip(smooth.iter_mut()) {
                let mut t = 0;
                for seg in segments.iter().filter(|s| s.is_spline()) {
                    let beta = &coefs[seg.range()];
                    let rank = beta.len() - 1;
                    let quad = penalty_quadratic(beta);
                    let p = self.mixture.collapsed_flexible_probability(rank, quad, rho);
                    let flexible = rng.random::<f64>() < p;
                    let tau = self.mixture.sample_conditional(rng, flexible, rank, quad);
                    states[t] = Smoothing { tau, flexible };
                    counts[flexible as usize] += 1;
                    t += 1;
                }
            }
        };
        let mut eti_counts = [0usize; 2];
        family(&reg.etiology, &mut sm.etiology, &self.x_segments, sm.rho_etiology, &mut eti_counts);
        let mut sub_counts = [0usize; 2];
        family(&reg.control_subclass, &mut sm.control, &self.w_segments, sm.rho_subclass, &mut sub_counts);
        family(&reg.case_subclass, &mut sm.case, &self.w_segments, sm.rho_subclass, &mut sub_counts);
        sm.rho_etiology = self.priors.rho_etiology.posterior(eti_counts[1], eti_counts[0]).sample(rng);
        sm.rho_subclass = self.priors.rho_subclass.posterior(sub_counts[1], sub_counts[0]).sample(rng);
        let (a0, b0) = intercept_hyper_params(self.priors.intercept_df, self.priors.intercept_scale);
        let reg = &mut state.params.regression;
        for kk in 0..reg.mu_star.len() {
            let m = reg.mu_star[kk];
            reg.tau0[kk] = sample_gamma(rng, a0 + 0.5, b0 + 0.5 * m * m);
        }
    }

    /// One full sweep. Proposals adapt when `adapt` is set.
    pub fn sweep(&self, chain: &mut ChainState, adapt: bool) -> Result<()> {
        let iteration = chain.iteration;
        let mut rng = chain.rng.clone();
        let mut caches = self.caches(&chain.state.params.regression);
        self.update_latents_cached(&mut rng, &chain.state.params, &caches, &mut chain.latents, iteration)?;
        self.update_rates(&mut rng, &mut chain.state.params.rates, &chain.latents);
        self.update_etiology(&mut rng, chain, &mut caches, adapt);
        if self.data.k > 1 {
            let counts = self.subclass_counts(&chain.latents);
            self.update_subclass(&mut rng, chain, &mut caches, &counts, adapt);
            self.update_mu_star(&mut rng, chain, &mut caches, &counts, adapt);
        }
        self.update_smoothing(&mut rng, &mut chain.state);
        chain.rng = rng;
        chain.iteration += 1;
        debug_assert!(self.check_invariants(&chain.state).is_ok());
        Ok(())
    }

    /// Type invariants that every sweep must preserve.
    pub fn check_invariants(&self, state: &ParamState) -> Result<()> {
        state.params.rates.validate()?;
        if state.params.regression.mu_star.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::Domain("raw intercepts must be finite and nonnegative".into()));
        }
        let sm = &state.smoothing;
        let all = sm.etiology.iter().chain(&sm.control).chain(&sm.case).flatten();
        for s in all {
            if !(s.tau > 0.0) || (!s.flexible && s.tau > self.mixture.ip_upper) {
                return Err(Error::Domain(format!("invalid smoothing precision {}", s.tau)));
            }
        }
        for rho in [sm.rho_etiology, sm.rho_subclass] {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(Error::Domain(format!("inclusion probability {rho} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// Acceptance ledger over all Metropolis blocks.
    pub fn acceptance(&self, proposals: &Proposals) -> Vec<BlockAcceptance> {
        let mut out = Vec::new();
        let seg_name = |s: &Segment| match s {
            Segment::Spline { column, .. } => format!("spline(col {column})"),
            Segment::Linear { .. } => "linear".to_string(),
        };
        for (l, row) in proposals.etiology.iter().enumerate() {
            for (p, seg) in row.iter().zip(&self.x_segments) {
                out.push(BlockAcceptance { block: format!("etiology[{l}].{}", seg_name(seg)), proposed: p.proposed, accepted: p.accepted });
            }
        }
        for (name, side) in [("control_subclass", &proposals.control), ("case_subclass", &proposals.case)] {
            for (k, row) in side.iter().enumerate() {
                for (p, seg) in row.iter().zip(&self.w_segments) {
                    out.push(BlockAcceptance { block: format!("{name}[{k}].{}", seg_name(seg)), proposed: p.proposed, accepted: p.accepted });
                }
            }
        }
        for (k, p) in proposals.mu_star.iter().enumerate() {
            out.push(BlockAcceptance { block: format!("mu_star[{k}]"), proposed: p.proposed, accepted: p.accepted });
        }
        out
    }
}
