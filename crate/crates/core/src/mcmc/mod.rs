//! Data-augmented Metropolis-within-Gibbs sampler, multi-chain driver and checkpoints.

pub mod draws;
pub mod proposal;
pub mod sampler;
pub mod state;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json, Dataset, ModelSpec, PriorConfig, SCHEMA_VERSION};
use crate::design::{Design, PreparedData};
use crate::error::{Error, Result};
use crate::model::total_loglik;

pub use draws::{AddressBook, ChainDraws, DrawsStore};
pub use proposal::AdaptiveProposal;
pub use sampler::{BlockAcceptance, ChainState, Proposals, Sampler};
pub use state::{Layout, ParamState, Smoothing, SmoothingState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub n_chains: usize,
    pub n_burnin: usize,
    pub n_keep: usize,
    pub thin: usize,
    pub seed: u64,
    /// Adapt proposals during the first `adapt_window` burn-in sweeps; `None` means all of burn-in.
    pub adapt_window: Option<usize>,
    /// Initial random-walk standard deviation of every proposal.
    pub proposal_sd: f64,
    /// Write a checkpoint every this many sweeps.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_chains: 3,
            n_burnin: 10_000,
            n_keep: 10_000,
            thin: 1,
            seed: 1,
            adapt_window: None,
            proposal_sd: 0.1,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.n_keep == 0 || self.thin == 0 {
            return Err(Error::Spec("n_chains, n_keep and thin must all be >= 1".into()));
        }
        if !(self.proposal_sd > 0.0 && self.proposal_sd.is_finite()) {
            return Err(Error::Spec("proposal_sd must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Spec("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.n_burnin + self.n_keep
    }

    /// Kept draws per chain.
    pub fn n_draws(&self) -> usize {
        self.n_keep / self.thin
    }

    fn adapt_until(&self) -> usize {
        self.adapt_window.map_or(self.n_burnin, |w| w.min(self.n_burnin))
    }
}

/// RNG stream of chain `c`: depends only on `(seed, c)`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Full resumable snapshot of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: ChainConfig,
    pub state: ChainState,
    pub draws: ChainDraws,
}

impl Checkpoint {
    pub fn path(dir: &Path, chain: usize) -> PathBuf {
        dir.join(format!("chain_{chain}.json"))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let cp: Checkpoint = read_json(path)?;
        if cp.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion { expected: SCHEMA_VERSION, found: cp.schema_version });
        }
        Ok(cp)
    }
}

/// Called with `(chain, completed sweeps)`; may be invoked concurrently.
pub type Progress<'p> = &'p (dyn Fn(usize, usize) + Sync);

fn fresh_chain(sampler: &Sampler, config: &ChainConfig, chain: usize) -> (ChainState, ChainDraws) {
    let d = sampler.data();
    let mut state = sampler.init_state(chain_rng(config.seed, chain));
    let log_scale = (config.proposal_sd / 0.1).ln();
    let p = &mut state.proposals;
    for prop in p.etiology.iter_mut().chain(p.control.iter_mut()).chain(p.case.iter_mut()).flatten().chain(p.mu_star.iter_mut()) {
        prop.log_scale = log_scale;
    }
    let draws = ChainDraws::new(chain, config.seed, d.cases.len(), d.n_causes());
    (state, draws)
}

/// Continues a chain from `(state, draws)` until `config.total_iterations()` sweeps are done.
pub fn continue_chain(
    sampler: &Sampler,
    config: &ChainConfig,
    mut state: ChainState,
    mut draws: ChainDraws,
    progress: Option<Progress>,
) -> Result<ChainDraws> {
    config.validate()?;
    let layout = sampler.layout();
    let data = sampler.data();
    let adapt_until = config.adapt_until();
    let total = config.total_iterations();
    while state.iteration < total {
        let adapt = state.iteration < adapt_until;
        sampler.sweep(&mut state, adapt)?;
        let it = state.iteration;
        if it == config.n_burnin {
            // acceptance ledger covers kept sweeps only
            let p = &mut state.proposals;
            for prop in p.etiology.iter_mut().chain(p.control.iter_mut()).chain(p.case.iter_mut()).flatten().chain(p.mu_star.iter_mut()) {
                prop.proposed = 0;
                prop.accepted = 0;
            }
        }
        if it > config.n_burnin && (it - config.n_burnin).is_multiple_of(config.thin) {
            let ll = total_loglik(data, &state.state.params)?;
            if !ll.is_finite() {
                let dump = serde_json::to_string(&state.state).unwrap_or_default();
                return Err(Error::Sampler { iteration: it, message: format!("non-finite log-likelihood {ll}; state: {dump}") });
            }
            draws.iterations.push(it);
            draws.loglik.push(ll);
            draws.values.push(layout.flatten(&state.state));
            for (c, &i) in data.cases.iter().enumerate() {
                let l = state.latents.class[i].expect("case has a class");
                draws.class_counts[c][l] += 1;
            }
        }
        if let (Some(every), Some(dir)) = (config.checkpoint_every, &config.checkpoint_dir) {
            if it.is_multiple_of(every) || it == total {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                draws.acceptance = sampler.acceptance(&state.proposals);
                Checkpoint { schema_version: SCHEMA_VERSION, config: config.clone(), state: state.clone(), draws: draws.clone() }
                    .write(Checkpoint::path(dir, draws.chain))?;
            }
        }
        if let Some(f) = progress {
            f(draws.chain, it);
        }
    }
    draws.acceptance = sampler.acceptance(&state.proposals);
    Ok(draws)
}

pub fn run_chain(sampler: &Sampler, config: &ChainConfig, chain: usize, progress: Option<Progress>) -> Result<ChainDraws> {
    let (state, draws) = fresh_chain(sampler, config, chain);
    continue_chain(sampler, config, state, draws, progress)
}

/// Resumes a chain from its checkpoint file.
pub fn resume_chain(sampler: &Sampler, path: impl AsRef<Path>, progress: Option<Progress>) -> Result<ChainDraws> {
    let cp = Checkpoint::read(path)?;
    continue_chain(sampler, &cp.config, cp.state, cp.draws, progress)
}

/// Runs `n_chains` independent chains concurrently. When a checkpoint
/// directory is configured and holds a chain's checkpoint, that chain resumes.
pub fn run_chains(sampler: &Sampler, config: &ChainConfig, progress: Option<Progress>) -> Result<DrawsStore> {
    config.validate()?;
    let chains: Vec<ChainDraws> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| {
            if let Some(dir) = &config.checkpoint_dir {
                let path = Checkpoint::path(dir, c);
                if path.exists() {
                    let cp = Checkpoint::read(&path)?;
                    if cp.config.seed == config.seed && cp.config.n_burnin == config.n_burnin {
                        return continue_chain(sampler, config, cp.state, cp.draws, progress);
                    }
                    log::warn!("ignoring checkpoint {} from a different configuration", path.display());
                }
            }
            run_chain(sampler, config, c, progress)
        })
        .collect::<Result<_>>()?;
    let data = sampler.data();
    Ok(DrawsStore { address_book: AddressBook::new(sampler.layout(), data.cases.clone()), chains })
}

/// A fitted model: the design used, the prepared data and the posterior draws.
#[derive(Debug, Clone)]
pub struct Fit {
    pub design: Design,
    pub data: PreparedData<f64>,
    pub draws: DrawsStore,
}

/// Fits `spec` to `dataset`: builds the design, prepares the data and runs all chains.
pub fn fit(dataset: &Dataset, spec: &ModelSpec, priors: &PriorConfig, config: &ChainConfig, progress: Option<Progress>) -> Result<Fit> {
    let design = Design::fit(dataset, spec)?;
    let data = PreparedData::new(dataset, spec, &design)?;
    let sampler = Sampler::new(&data, design.etiology.segments(), design.subclass.segments(), priors)?;
    let draws = run_chains(&sampler, config, progress)?;
    Ok(Fit { design, data, draws })
}

/// Everything needed to reproduce a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitManifest {
    pub schema_version: u32,
    pub spec: ModelSpec,
    pub priors: PriorConfig,
    pub design: Design,
    pub chains: ChainConfig,
    /// Hex digest of the input dataset.
    pub data_digest: String,
    pub version: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CauseSpec, PriorConfig};
    use crate::design::{PreparedData, Segment};
    use crate::model::individual_etiology;
    use ndarray::Array2;
    use rand::Rng;

    /// Intercept-only etiology with two singleton causes; `k` subclasses on a binary `w`.
    fn toy(n_cases: usize, n_controls: usize, pi0: f64, k: usize, seed: u64) -> PreparedData<f64> {
        let mut rng = chain_rng(seed, 99);
        let n = n_cases + n_controls;
        let mut brs = Array2::zeros((n, 2));
        let mut w = Array2::zeros((n, 2));
        let mut is_case = vec![false; n];
        for i in 0..n {
            let case = i < n_cases;
            is_case[i] = case;
            let cause = usize::from(rng.random::<f64>() >= pi0);
            for j in 0..2 {
                let p = if case && j == cause { 0.95 } else { 0.05 };
                brs[[i, j]] = u8::from(rng.random::<f64>() < p);
            }
            w[[i, 0]] = 1.0;
            w[[i, 1]] = (i % 2) as f64;
        }
        let x = Array2::from_elem((n, 1), 1.0);
        PreparedData::from_parts(
            brs,
            Array2::from_elem((n, 0), None),
            vec![],
            is_case,
            &x,
            &w,
            CauseSpec::singletons(2).unwrap(),
            k,
        )
        .unwrap()
    }

    fn sampler(data: &PreparedData<f64>) -> Sampler<'_> {
        let w_segments = vec![Segment::Linear { range: 0..2 }];
        Sampler::new(data, vec![Segment::Linear { range: 0..1 }], w_segments, &PriorConfig::default()).unwrap()
    }

    fn config(n_chains: usize, n_burnin: usize, n_keep: usize) -> ChainConfig {
        ChainConfig { n_chains, n_burnin, n_keep, seed: 7, ..ChainConfig::default() }
    }

    #[test]
    fn same_seed_gives_identical_store() {
        let data = toy(40, 40, 0.7, 2, 1);
        let s = sampler(&data);
        let a = run_chains(&s, &config(2, 30, 20), None).unwrap();
        let b = run_chains(&s, &config(2, 30, 20), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.chains[0].len(), 20);
        assert_ne!(a.chains[0].values, a.chains[1].values);
        assert!(a.chains.iter().flat_map(|c| &c.loglik).all(|v| v.is_finite()));
    }

    #[test]
    fn chain_stream_does_not_depend_on_chain_count() {
        let data = toy(30, 30, 0.6, 2, 2);
        let s = sampler(&data);
        let two = run_chains(&s, &config(2, 10, 10), None).unwrap();
        let three = run_chains(&s, &config(3, 10, 10), None).unwrap();
        assert_eq!(two.chains[1], three.chains[1]);
    }

    #[test]
    fn thinning_sets_draw_count() {
        let data = toy(20, 20, 0.6, 2, 3);
        let s = sampler(&data);
        let cfg = ChainConfig { thin: 3, ..config(1, 5, 30) };
        let store = run_chains(&s, &cfg, None).unwrap();
        assert_eq!(store.chains[0].len(), cfg.n_draws());
        assert_eq!(store.chains[0].iterations[0], 8);
    }

    #[test]
    fn resume_from_checkpoint_is_bit_exact() {
        let data = toy(30, 30, 0.6, 2, 4);
        let s = sampler(&data);
        let full = config(1, 40, 60);
        let reference = run_chain(&s, &full, 0, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let short = ChainConfig { n_keep: 25, checkpoint_every: Some(13), checkpoint_dir: Some(dir.path().into()), ..full.clone() };
        run_chain(&s, &short, 0, None).unwrap();
        let cp = Checkpoint::read(Checkpoint::path(dir.path(), 0)).unwrap();
        assert_eq!(cp.state.iteration, 65);
        let resumed = continue_chain(&s, &full, cp.state, cp.draws, None).unwrap();
        assert_eq!(resumed, reference);
    }

    #[test]
    fn single_subclass_keeps_allocations_at_zero() {
        let data = toy(20, 20, 0.5, 1, 5);
        let s = Sampler::new(&data, vec![Segment::Linear { range: 0..1 }], vec![Segment::Linear { range: 0..2 }], &PriorConfig::default()).unwrap();
        let mut st = s.init_state(chain_rng(1, 0));
        for _ in 0..20 {
            s.sweep(&mut st, true).unwrap();
            assert!(st.latents.subclass.iter().all(|&z| z == 0));
            s.check_invariants(&st.state).unwrap();
        }
    }

    #[test]
    fn sweeps_preserve_invariants() {
        let data = toy(40, 40, 0.7, 3, 6);
        let s = sampler(&data);
        let mut st = s.init_state(chain_rng(3, 0));
        s.check_invariants(&st.state).unwrap();
        let ints = st.state.params.regression.intercepts();
        assert!(ints.windows(2).all(|w| w[0] <= w[1]));
        for i in 0..200 {
            s.sweep(&mut st, i < 100).unwrap();
            s.check_invariants(&st.state).unwrap();
            assert!(st.state.params.regression.mu_star.iter().all(|&m| m >= 0.0));
        }
    }

    #[test]
    fn class_draws_match_individual_etiology() {
        let data = toy(6, 6, 0.5, 1, 7);
        let s = Sampler::new(&data, vec![Segment::Linear { range: 0..1 }], vec![Segment::Linear { range: 0..2 }], &PriorConfig::default()).unwrap();
        let st = s.init_state(chain_rng(5, 0));
        let mut latents = st.latents.clone();
        let mut rng = chain_rng(11, 0);
        let n = 40_000;
        let mut hits = [0usize; 6];
        for _ in 0..n {
            s.update_latents(&mut rng, &st.state.params, &mut latents, 0).unwrap();
            for (c, &i) in data.cases.iter().enumerate() {
                hits[c] += usize::from(latents.class[i] == Some(1));
            }
        }
        for (c, &i) in data.cases.iter().enumerate() {
            let p = individual_etiology(&data, i, &st.state.params).unwrap()[1];
            let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-9);
            let freq = hits[c] as f64 / n as f64;
            assert!((freq - p).abs() < 4.0 * se, "case {c}: {freq} vs {p}");
        }
    }

    #[test]
    fn recovers_population_etiology_on_strong_signal() {
        let data = toy(400, 400, 0.7, 1, 8);
        let s = Sampler::new(&data, vec![Segment::Linear { range: 0..1 }], vec![Segment::Linear { range: 0..2 }], &PriorConfig::default()).unwrap();
        let store = run_chains(&s, &config(1, 1000, 2000), None).unwrap();
        let mut mean = 0.0;
        for st in store.states().unwrap() {
            mean += st.params.regression.etiology_probs(&[1.0]).unwrap()[0];
        }
        mean /= store.chains[0].len() as f64;
        assert!((mean - 0.7).abs() < 0.05, "posterior mean {mean}");
    }

    #[test]
    fn draws_round_trip_through_disk() {
        let data = toy(20, 20, 0.6, 2, 9);
        let s = sampler(&data);
        let store = run_chains(&s, &config(2, 10, 15), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store.write(dir.path()).unwrap();
        let back = DrawsStore::read(dir.path()).unwrap();
        assert_eq!(back, store);
        std::fs::remove_file(dir.path().join("chain_1.csv")).unwrap();
        assert!(matches!(DrawsStore::read(dir.path()), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn config_validation() {
        assert!(config(0, 1, 1).validate().is_err());
        assert!(config(1, 1, 0).validate().is_err());
        assert!(ChainConfig { thin: 0, ..ChainConfig::default() }.validate().is_err());
        assert_eq!(ChainConfig::default().n_chains, 3);
    }
}
