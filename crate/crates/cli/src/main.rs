//! `nplcm` command-line driver.
//!
//! Every command writes into an output directory together with a JSON manifest
//! holding the flags, seeds and input digests needed to re-run it.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use nplcm::data::SCHEMA_VERSION;
use nplcm::design::PreparedData;
use nplcm::diagnostics::diagnostics_report;
use nplcm::simulate::{analysis_setup, generate, scenario, Analysis, TruthConfig, SCENARIOS};
use nplcm::summaries::{
    fitted_positive_rate_curves, featurize, ief_summary, overall_pef, pef_curve, pmse, posterior_params, replication_metrics,
    write_tidy, Band, Replicate, TidyRow,
};
use nplcm::{fit, ChainConfig, Dataset, DrawsStore, FitManifest, ModelSpec, PriorConfig};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Offset between a replication's data seed and its chain seed.
const CHAIN_SEED_OFFSET: u64 = 1 << 32;

#[derive(Parser, Debug)]
#[command(name = "nplcm", version, about = "Nested partially-latent class regression for case-control etiology studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset from a named scenario or a truth file.
    Simulate {
        #[arg(long, conflicts_with = "truth", required_unless_present = "truth")]
        scenario: Option<String>,
        /// Truth configuration JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Simulation II grid point, 0-based.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model and write draws, checkpoints and a manifest.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Model specification JSON.
        #[arg(long)]
        model: PathBuf,
        /// Prior configuration JSON; defaults when omitted.
        #[arg(long)]
        priors: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        chains: usize,
        #[arg(long, default_value_t = 10_000)]
        burnin: usize,
        #[arg(long, default_value_t = 10_000)]
        keep: usize,
        #[arg(long, default_value_t = 1)]
        thin: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Sweeps between checkpoints.
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convergence diagnostics for a fit directory.
    Diagnose {
        #[arg(long)]
        draws: PathBuf,
        /// Only parameters whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Tidy CSV summaries of a fit directory.
    Summarize {
        #[arg(long)]
        draws: PathBuf,
        /// CSV of raw covariate rows with `x_<name>` (and for rates `w_<name>`) columns.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, value_enum)]
        what: What,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded replications of a scenario, aggregated into bias and coverage metrics.
    Replicate {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, default_value_t = 30)]
        reps: usize,
        /// Concurrent replications.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long, value_enum, default_value_t = AnalysisArg::Regression)]
        analysis: AnalysisArg,
        #[arg(long, default_value_t = 3)]
        chains: usize,
        #[arg(long, default_value_t = 2000)]
        burnin: usize,
        #[arg(long, default_value_t = 2000)]
        keep: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum What {
    Pef,
    Overall,
    Rates,
    Ief,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum AnalysisArg {
    Regression,
    NoCovariate,
}

impl From<AnalysisArg> for Analysis {
    fn from(a: AnalysisArg) -> Self {
        match a {
            AnalysisArg::Regression => Analysis::Regression,
            AnalysisArg::NoCovariate => Analysis::NoCovariate,
        }
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = fs::File::open(path).with_context(|| format!("missing artifact {}", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Serialize)]
struct SimulateManifest<'a> {
    schema_version: u32,
    command: &'static str,
    scenario: &'a str,
    grid: Option<usize>,
    seed: u64,
    truth_file: Option<&'a Path>,
    dataset_sha256: String,
    version: &'static str,
}

fn cmd_simulate(name: Option<&str>, truth_file: Option<&Path>, grid: Option<usize>, seed: u64, out: &Path) -> Result<()> {
    let truth: TruthConfig = match (name, truth_file) {
        (Some(name), _) => scenario(name, grid, seed).with_context(|| format!("known scenarios: {}", SCENARIOS.join(", ")))?,
        (None, Some(path)) => {
            let mut t: TruthConfig = read_json(path)?;
            if t.schema_version != SCHEMA_VERSION {
                bail!("truth file schema version {} (expected {SCHEMA_VERSION})", t.schema_version);
            }
            t.seed = seed;
            t
        }
        (None, None) => bail!("either --scenario or --truth is required"),
    };
    let sim = generate(&truth)?;
    create_dir(out)?;
    let data_path = out.join("dataset.csv");
    sim.dataset.store_path(&data_path)?;
    let file = fs::File::create(out.join("truth.csv"))?;
    sim.write_truth(BufWriter::new(file))?;
    write_json(&out.join("truth_config.json"), &truth)?;
    let (spec, priors) = analysis_setup(&truth, Analysis::Regression);
    write_json(&out.join("model.json"), &spec)?;
    write_json(&out.join("priors.json"), &priors)?;
    let (spec, _) = analysis_setup(&truth, Analysis::NoCovariate);
    write_json(&out.join("model_nocov.json"), &spec)?;
    write_json(
        &out.join("provenance.json"),
        &SimulateManifest {
            schema_version: SCHEMA_VERSION,
            command: "simulate",
            scenario: &truth.name,
            grid,
            seed,
            truth_file,
            dataset_sha256: sha256_file(&data_path)?,
            version: VERSION,
        },
    )?;
    println!("wrote {} subjects to {}", sim.dataset.n_subjects(), out.display());
    Ok(())
}

fn progress_logger(total: usize) -> impl Fn(usize, usize) + Sync {
    move |chain, it| {
        if it % 1000 == 0 || it == total {
            log::info!("chain {chain}: {it}/{total} sweeps");
        }
    }
}

fn cmd_fit(data: &Path, model: &Path, priors: Option<&Path>, config: ChainConfig, out: &Path) -> Result<()> {
    let dataset = Dataset::load_path(data)?;
    let spec = ModelSpec::from_json_path(model)?;
    let priors = match priors {
        Some(p) => PriorConfig::from_json_path(p)?,
        None => PriorConfig::default(),
    };
    create_dir(out)?;
    let copy = out.join("dataset.csv");
    if fs::canonicalize(data).ok() != fs::canonicalize(&copy).ok() {
        fs::copy(data, &copy).with_context(|| format!("copying dataset into {}", out.display()))?;
    }
    let progress = progress_logger(config.total_iterations());
    let fitted = fit(&dataset, &spec, &priors, &config, Some(&progress))?;
    fitted.draws.write(out)?;
    let manifest = FitManifest {
        schema_version: SCHEMA_VERSION,
        spec,
        priors,
        design: fitted.design,
        chains: config,
        data_digest: sha256_file(data)?,
        version: VERSION.into(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    for chain in &fitted.draws.chains {
        let low = chain.acceptance.iter().filter(|b| b.proposed > 0 && b.rate() < 0.1).count();
        if low > 0 {
            log::warn!("chain {}: {low} Metropolis blocks accepted under 10% of proposals", chain.chain);
        }
    }
    println!("wrote {} chains x {} draws to {}", fitted.draws.n_chains(), manifest.chains.n_draws(), out.display());
    Ok(())
}

/// A fit directory: manifest, dataset copy and draws.
struct FitDir {
    manifest: FitManifest,
    dataset: Dataset,
    draws: DrawsStore,
}

impl FitDir {
    fn open(dir: &Path) -> Result<Self> {
        let manifest: FitManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.schema_version != SCHEMA_VERSION {
            bail!("manifest schema version {} (expected {SCHEMA_VERSION})", manifest.schema_version);
        }
        let dataset = Dataset::load_path(dir.join("dataset.csv"))?;
        let draws = DrawsStore::read(dir)?;
        Ok(Self { manifest, dataset, draws })
    }

    fn prepared(&self) -> Result<PreparedData<f64>> {
        Ok(PreparedData::new(&self.dataset, &self.manifest.spec, &self.manifest.design)?)
    }
}

fn cmd_diagnose(dir: &Path, filter: Option<&str>) -> Result<()> {
    let draws = DrawsStore::read(dir)?;
    let report = diagnostics_report(&draws, filter);
    write_json(&dir.join("diagnostics.json"), &report)?;
    print!("{}", report.to_table());
    let flagged = report.flagged();
    if flagged.is_empty() {
        println!("no parameter flagged");
    } else {
        println!("{} of {} parameters flagged", flagged.len(), report.entries.len());
    }
    Ok(())
}

/// Reads `prefix<name>` columns for every name, in order.
fn grid_columns(path: &Path, prefix: &str, names: &[String]) -> Result<Array2<f64>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading grid {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<usize> = names
        .iter()
        .map(|n| {
            let want = format!("{prefix}{n}");
            headers.iter().position(|h| h.trim() == want).with_context(|| format!("grid has no column '{want}'"))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        for &c in &cols {
            let v: f64 = rec[c].trim().parse().with_context(|| format!("non-numeric grid value '{}'", &rec[c]))?;
            rows.push(v);
        }
    }
    Ok(Array2::from_shape_vec((rows.len() / names.len().max(1), names.len()), rows)?)
}

fn cmd_summarize(dir: &Path, grid: Option<&Path>, what: What, out: Option<&Path>) -> Result<()> {
    let fd = FitDir::open(dir)?;
    let draws = posterior_params(&fd.draws)?;
    let labels: Vec<String> = fd.manifest.spec.causes.causes().iter().map(|c| c.label(fd.dataset.pathogens())).collect();
    let need_grid = || grid.with_context(|| format!("--grid is required for --what {what:?}"));
    let mut rows = Vec::new();
    let mut push = |g: usize, label: String, band: Band| rows.push(TidyRow { grid: g, label, band });
    match what {
        What::Pef => {
            let raw = grid_columns(need_grid()?, "x_", fd.dataset.x_names())?;
            let x = featurize(&fd.manifest.design.etiology, &raw)?;
            for (g, bands) in pef_curve(&draws, &x)?.into_iter().enumerate() {
                for (l, b) in bands.into_iter().enumerate() {
                    push(g, labels[l].clone(), b);
                }
            }
        }
        What::Overall => {
            for (l, b) in overall_pef(&draws, &fd.prepared()?)?.into_iter().enumerate() {
                push(0, labels[l].clone(), b);
            }
        }
        What::Rates => {
            let path = need_grid()?;
            let x = featurize(&fd.manifest.design.etiology, &grid_columns(path, "x_", fd.dataset.x_names())?)?;
            let w = featurize(&fd.manifest.design.subclass, &grid_columns(path, "w_", fd.dataset.w_names())?)?;
            let curves = fitted_positive_rate_curves(&draws, &x, &w, &fd.manifest.spec.causes)?;
            for (g, (case, control)) in curves.case.into_iter().zip(curves.control).enumerate() {
                for (j, (c, u)) in case.into_iter().zip(control).enumerate() {
                    let name = &fd.dataset.pathogens()[j];
                    push(g, format!("case:{name}"), c);
                    push(g, format!("control:{name}"), u);
                }
            }
        }
        What::Ief => {
            let data = fd.prepared()?;
            for (c, probs) in ief_summary(&draws, &data, None)?.into_iter().enumerate() {
                for (l, p) in probs.into_iter().enumerate() {
                    // per-case posterior probabilities carry no band
                    push(data.cases[c], labels[l].clone(), Band { mean: p, sd: 0.0, lo: p, hi: p });
                }
            }
        }
    }
    match out {
        Some(path) => write_tidy(&rows, BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))?,
        None => write_tidy(&rows, std::io::stdout().lock())?,
    }
    Ok(())
}

#[derive(Serialize)]
struct ReplicateManifest<'a> {
    schema_version: u32,
    command: &'static str,
    scenario: &'a str,
    grid: Option<usize>,
    reps: usize,
    analysis: AnalysisArg,
    chains: &'a ChainConfig,
    seed: u64,
    version: &'static str,
}

#[allow(clippy::too_many_arguments)]
fn cmd_replicate(
    name: &str,
    grid: Option<usize>,
    reps: usize,
    parallel: usize,
    analysis: AnalysisArg,
    config: ChainConfig,
    seed: u64,
    out: &Path,
) -> Result<()> {
    use rayon::prelude::*;
    if reps == 0 {
        bail!("--reps must be positive");
    }
    // fail fast on unknown scenarios
    scenario(name, grid, seed).with_context(|| format!("known scenarios: {}", SCENARIOS.join(", ")))?;
    create_dir(out)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(parallel.max(1)).build()?;
    let results: Vec<Replicate> = pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|r| -> Result<Replicate> {
                // data and chains must not share a stream
                let truth = scenario(name, grid, seed.wrapping_add(r as u64))?;
                let sim = generate(&truth)?;
                let (spec, priors) = analysis_setup(&truth, analysis.into());
                let cfg = ChainConfig { seed: seed.wrapping_add(r as u64).wrapping_add(CHAIN_SEED_OFFSET), ..config.clone() };
                let fitted = fit(&sim.dataset, &spec, &priors, &cfg, None)?;
                let draws = posterior_params(&fitted.draws)?;
                let truth_pi: Vec<Vec<f64>> = sim.truth.iter().filter(|t| t.case).map(|t| t.pi.clone()).collect();
                log::info!("replication {r} done");
                Ok(Replicate {
                    estimate: overall_pef(&draws, &fitted.data)?,
                    truth: sim.overall_pef(),
                    pmse: Some(pmse(&draws, &fitted.data, &truth_pi)?),
                })
            })
            .collect::<Result<_>>()
    })?;
    let metrics = replication_metrics(&results)?;
    write_json(&out.join("replicates.json"), &results)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    write_json(
        &out.join("manifest.json"),
        &ReplicateManifest {
            schema_version: SCHEMA_VERSION,
            command: "replicate",
            scenario: name,
            grid,
            reps,
            analysis,
            chains: &config,
            seed,
            version: VERSION,
        },
    )?;
    println!("{:>5}  {:>10}  {:>10}  {:>9}  {:>15}  {:>9}", "cause", "med.bias%", "mean.post", "coverage", "coverage 95%CI", "PMSE");
    for m in &metrics {
        println!(
            "{:>5}  {:>10.2}  {:>10.4}  {:>9.3}  {:>7.3}-{:<7.3}  {:>9.2e}",
            m.cause,
            m.median_relative_bias,
            m.mean_posterior,
            m.coverage,
            m.coverage_ci.0,
            m.coverage_ci.1,
            m.mean_pmse.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { scenario, truth, grid, seed, out } => cmd_simulate(scenario.as_deref(), truth.as_deref(), grid, seed, &out),
        Command::Fit { data, model, priors, chains, burnin, keep, thin, seed, checkpoint_every, out } => {
            let config = ChainConfig {
                n_chains: chains,
                n_burnin: burnin,
                n_keep: keep,
                thin,
                seed,
                checkpoint_every: Some(checkpoint_every),
                checkpoint_dir: Some(out.join("checkpoints")),
                ..ChainConfig::default()
            };
            config.validate()?;
            cmd_fit(&data, &model, priors.as_deref(), config, &out)
        }
        Command::Diagnose { draws, filter } => cmd_diagnose(&draws, filter.as_deref()),
        Command::Summarize { draws, grid, what, out } => cmd_summarize(&draws, grid.as_deref(), what, out.as_deref()),
        Command::Replicate { scenario, grid, reps, parallel, analysis, chains, burnin, keep, seed, out } => {
            let config = ChainConfig { n_chains: chains, n_burnin: burnin, n_keep: keep, ..ChainConfig::default() };
            config.validate()?;
            cmd_replicate(&scenario, grid, reps, parallel, analysis, config, seed, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
