//! `edvae` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Artifacts and summaries go to stdout, diagnostics to stderr.

mod config;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use edvae::data::{self, DatasetKind, GenConfig, SyntheticDataset};
use edvae::nets::MlpParams;
use edvae::priors::{fit_gmm, EmConfig, GmmPrior, Prior};
use edvae::reproduce::{self, ReproduceConfig, Scale, SeedSet};
use edvae::trainer::{self, ModelKind, PriorKind, TrainConfig};

const OUT_ENV: &str = "EDVAE_OUT";

#[derive(Parser)]
#[command(
    name = "edvae",
    version,
    about = "Entropy-decomposed VAE experiments on synthetic data"
)]
struct Cli {
    /// More log output on stderr (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Fit a diagonal GMM prior to generator latents or a dataset's latents.
    FitPrior(FitPriorArgs),
    /// Train one model over one or more seeds.
    Train(TrainArgs),
    /// Re-evaluate the checkpoints of a finished training run.
    Eval(EvalArgs),
    /// Run the 2-model × 2-dataset comparison and print the table.
    ReproduceTable(ReproduceArgs),
    /// Run the gradient and oracle self-checks.
    Check(CheckArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory. Defaults to $EDVAE_OUT/<command>, or runs/<command>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON or TOML file whose keys override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenFlags {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    data_dim: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Standard deviation of the positive-pair jitter.
    #[arg(long)]
    radius: Option<f64>,
    /// Standard deviation of the observation noise.
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl GenFlags {
    fn apply(&self, g: &mut GenConfig) {
        if let Some(v) = self.n {
            g.n = v;
        }
        if let Some(v) = self.data_dim {
            g.data_dim = v;
        }
        if let Some(v) = self.latent_dim {
            g.latent_dim = v;
        }
        if let Some(v) = self.radius {
            g.radius = v;
        }
        if let Some(v) = self.noise_scale {
            g.noise_scale = v;
        }
        if let Some(v) = self.seed {
            g.seed = v;
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, required_unless_present = "config")]
    kind: Option<DatasetKind>,
    #[command(flatten)]
    gen: GenFlags,
    /// Also write dataset.csv.
    #[arg(long)]
    csv: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    kind: Option<DatasetKind>,
    data: GenConfig,
    csv: bool,
}

#[derive(Args)]
struct FitPriorArgs {
    /// Fit to the latents stored in this dataset file instead of fresh generator draws.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Generator to draw latents from.
    #[arg(long, default_value = "complex")]
    kind: DatasetKind,
    #[arg(long, default_value_t = 50_000)]
    samples: usize,
    #[arg(long, default_value_t = edvae::nets::LATENT_DIM)]
    latent_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of mixture components.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Fraction of samples held out for the reported log-likelihood.
    #[arg(long, default_value_t = 0.2)]
    heldout_frac: f64,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitPriorConfig {
    dataset: Option<PathBuf>,
    kind: DatasetKind,
    samples: usize,
    latent_dim: usize,
    seed: u64,
    k: usize,
    heldout_frac: f64,
    em: EmConfig,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    prior: Option<PriorKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    min_delta: Option<f64>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, allow_negative_numbers = true)]
    lambda_mi: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    gmm_k: Option<usize>,
    #[arg(long)]
    no_early_stop: bool,
    #[arg(long)]
    hidden: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f.clone() { t.$f = v; })*};
        }
        set!(
            model,
            prior,
            epochs,
            batch_size,
            lr,
            patience,
            min_delta,
            seeds,
            lambda_mi,
            lambda_reg,
            temperature,
            gmm_k,
            hidden
        );
        if self.no_early_stop {
            t.early_stop = false;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file from gen-data. Without it the dataset is generated from --kind and the generator flags.
    #[arg(long, conflicts_with = "kind")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    kind: Option<DatasetKind>,
    #[command(flatten)]
    gen: GenFlags,
    #[arg(long)]
    split_seed: Option<u64>,
    /// GMM JSON for --prior gmm. Without it a prior is fitted to complex-generator latents.
    #[arg(long)]
    prior_file: Option<PathBuf>,
    #[arg(long)]
    gmm_samples: Option<usize>,
    #[arg(long)]
    gmm_seed: Option<u64>,
    /// Seeds trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCmdConfig {
    dataset: Option<PathBuf>,
    kind: Option<DatasetKind>,
    data: GenConfig,
    split_seed: u64,
    prior_file: Option<PathBuf>,
    gmm_samples: usize,
    gmm_seed: u64,
    train: TrainConfig,
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Only these seeds (comma-separated); default all in the run's config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(long, default_value = "desk")]
    scale: Scale,
    #[arg(long, default_value = "fixed")]
    seed_set: SeedSet,
    /// Conditions trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override the scale's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the dataset size.
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// An error that should exit with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>()
            || matches!(
                cause.downcast_ref::<edvae::Error>(),
                Some(edvae::Error::Config(_))
            )
        {
            return 2;
        }
    }
    1
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command)
    })
}

fn resolve<T: Serialize + serde::de::DeserializeOwned>(base: T, common: &Common) -> Result<T> {
    match &common.config {
        Some(path) => config::overlay(&base, path).map_err(|e| usage(format!("{e:#}"))),
        None => Ok(base),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut data = GenConfig::default();
    args.gen.apply(&mut data);
    let cfg = resolve(
        GenDataConfig {
            kind: args.kind,
            data,
            csv: args.csv,
        },
        &args.common,
    )?;
    let kind = cfg.kind.ok_or_else(|| usage("--kind is required"))?;
    let out = out_dir(&args.common, "gen-data");
    let ds = data::generate(kind, &cfg.data)?;
    config::write_resolved(&out, &cfg)?;
    let path = out.join("dataset.edv");
    data::save(&ds, &path)?;
    if cfg.csv {
        data::export_csv(&ds, &out.join("dataset.csv"))?;
    }
    log::info!("wrote {}", path.display());
    print_json(&data::summarize(&ds))
}

fn heldout_split(
    z: &ndarray::Array2<f64>,
    frac: f64,
    seed: u64,
) -> (ndarray::Array2<f64>, ndarray::Array2<f64>) {
    use rand::seq::SliceRandom;
    let n = z.nrows();
    let n_hold = ((frac * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    (
        z.select(Axis(0), &idx[n_hold..]),
        z.select(Axis(0), &idx[..n_hold]),
    )
}

#[derive(Serialize)]
struct FitReport {
    k: usize,
    dim: usize,
    train_samples: usize,
    heldout_samples: usize,
    train_mean_log_likelihood: f64,
    heldout_mean_log_likelihood: Option<f64>,
    em_iterations: usize,
    monotone: bool,
    reseeds: usize,
    path: PathBuf,
}

fn fit_prior(args: FitPriorArgs) -> Result<()> {
    let cfg = resolve(
        FitPriorConfig {
            dataset: args.dataset.clone(),
            kind: args.kind,
            samples: args.samples,
            latent_dim: args.latent_dim,
            seed: args.seed,
            k: args.k,
            heldout_frac: args.heldout_frac,
            em: EmConfig {
                n_init: args.restarts,
                ..EmConfig::default()
            },
        },
        &args.common,
    )?;
    if !(0.0..1.0).contains(&cfg.heldout_frac) {
        return Err(usage(format!(
            "--heldout-frac must be in [0, 1), got {}",
            cfg.heldout_frac
        )));
    }
    let z = match &cfg.dataset {
        Some(p) => data::load(p)?.z_true,
        None => match cfg.kind {
            DatasetKind::Complex => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                data::gen_latent_complex(
                    cfg.samples,
                    cfg.latent_dim,
                    &data::ComplexLatentConfig::default(),
                    &mut rng,
                )?
            }
            DatasetKind::Gaussian => {
                let gen = GenConfig {
                    n: cfg.samples,
                    latent_dim: cfg.latent_dim,
                    seed: cfg.seed,
                    ..GenConfig::default()
                };
                data::generate(DatasetKind::Gaussian, &gen)?.z_true
            }
        },
    };
    let (train, held) = heldout_split(&z, cfg.heldout_frac, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fit = fit_gmm(&train, cfg.k, &cfg.em, &mut rng)?;
    let prior = Prior::Gmm(fit.prior.clone());
    let mean_ll = |x: &ndarray::Array2<f64>| -> Result<Option<f64>> {
        if x.nrows() == 0 {
            return Ok(None);
        }
        Ok(prior.log_density_values(x)?.mean())
    };
    let out = out_dir(&args.common, "fit-prior");
    config::write_resolved(&out, &cfg)?;
    let path = out.join("gmm.json");
    fit.prior.save(&path)?;
    print_json(&FitReport {
        k: fit.prior.k(),
        dim: fit.prior.dim(),
        train_samples: train.nrows(),
        heldout_samples: held.nrows(),
        train_mean_log_likelihood: mean_ll(&train)?.expect("non-empty"),
        heldout_mean_log_likelihood: mean_ll(&held)?,
        em_iterations: fit.trace.len(),
        monotone: fit.monotone,
        reseeds: fit.reseeds,
        path,
    })
}

fn load_train_data(cfg: &TrainCmdConfig) -> Result<SyntheticDataset> {
    match (&cfg.dataset, cfg.kind) {
        (Some(p), _) => Ok(data::load(p)?),
        (None, Some(kind)) => Ok(data::generate(kind, &cfg.data)?),
        (None, None) => Err(usage("one of --dataset or --kind is required")),
    }
}

fn train_prior(cfg: &TrainCmdConfig, run_dir: &Path) -> Result<Prior> {
    let prior_path = run_dir.join("prior.json");
    Ok(match cfg.train.prior {
        PriorKind::AnalyticNormal => Prior::standard_normal(cfg.train.latent_dim),
        PriorKind::Gmm => {
            let g = match &cfg.prior_file {
                Some(p) => {
                    GmmPrior::load(p).with_context(|| format!("loading prior {}", p.display()))?
                }
                None => reproduce::fit_prior_from_generator(
                    cfg.gmm_samples,
                    cfg.train.latent_dim,
                    cfg.train.gmm_k,
                    cfg.gmm_seed,
                )?,
            };
            g.save(&prior_path)?;
            Prior::Gmm(g)
        }
    })
}

#[derive(Serialize)]
struct TrainReport<'a> {
    run_dir: &'a Path,
    seeds: Vec<SeedLine>,
    aggregate: Option<trainer::Aggregate>,
    failures: &'a [trainer::SeedFailure],
}

#[derive(Serialize)]
struct SeedLine {
    seed: u64,
    mse: f64,
    kld: f64,
    kld_raw: f64,
    elbo: f64,
    best_epoch: usize,
    epochs_run: usize,
}

fn train(args: TrainArgs) -> Result<()> {
    let mut t = TrainConfig::default();
    args.train.apply(&mut t);
    let mut data_cfg = GenConfig::default();
    args.gen.apply(&mut data_cfg);
    let cfg = resolve(
        TrainCmdConfig {
            dataset: args.dataset.clone(),
            kind: args.kind,
            data: data_cfg,
            split_seed: args.split_seed.unwrap_or(0),
            prior_file: args.prior_file.clone(),
            gmm_samples: args.gmm_samples.unwrap_or(50_000),
            gmm_seed: args.gmm_seed.unwrap_or(0),
            train: t,
            jobs: args.jobs.unwrap_or(1),
        },
        &args.common,
    )?;
    cfg.train.validate()?;
    let out = out_dir(&args.common, "train");
    let ds = load_train_data(&cfg)?;
    config::write_resolved(&out, &cfg)?;
    let prior = train_prior(&cfg, &out)?;
    let prepared = trainer::prepare(&ds, cfg.split_seed)?;
    let (result, _) = trainer::run_experiment(&cfg.train, &prepared, &prior, Some(&out), cfg.jobs)?;
    print_json(&TrainReport {
        run_dir: &out,
        seeds: result
            .seeds
            .iter()
            .map(|s| SeedLine {
                seed: s.seed,
                mse: s.mse,
                kld: s.kld,
                kld_raw: s.kld_raw,
                elbo: s.elbo,
                best_epoch: s.best_epoch,
                epochs_run: s.epochs_run,
            })
            .collect(),
        aggregate: result.aggregate,
        failures: &result.failures,
    })?;
    if result.failed() {
        bail!(
            "{} of {} seeds failed",
            result.failures.len(),
            cfg.train.seeds.len()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    run_dir: PathBuf,
    seeds: Vec<(u64, trainer::EvalMetrics)>,
    aggregate: Option<trainer::Aggregate>,
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg_path = args.run.join("config.json");
    let text = std::fs::read_to_string(&cfg_path)
        .with_context(|| format!("reading {}", cfg_path.display()))?;
    let cfg: TrainCmdConfig = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a train config", cfg_path.display()))?;
    let ds = load_train_data(&cfg)?;
    let prepared = trainer::prepare(&ds, cfg.split_seed)?;
    let prior = match cfg.train.prior {
        PriorKind::AnalyticNormal => Prior::standard_normal(cfg.train.latent_dim),
        PriorKind::Gmm => Prior::Gmm(GmmPrior::load(&args.run.join("prior.json"))?),
    };
    let seeds = args.seeds.unwrap_or_else(|| cfg.train.seeds.clone());
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for seed in seeds {
        let ckpt = args.run.join(format!("checkpoint_seed{seed}.json"));
        let params = MlpParams::load(&ckpt, cfg.train.mlp(prepared.data_dim()))
            .with_context(|| format!("loading {}", ckpt.display()))?;
        let (m, losses) = trainer::evaluate(&cfg.train, &params, &prior, &prepared.test, seed)?;
        rows.push((seed, m));
        results.push(trainer::SeedResult {
            seed,
            mse: m.mse,
            kld: m.kld,
            kld_raw: m.kld_raw,
            elbo: m.elbo,
            test_losses: losses,
            epochs_run: 0,
            best_epoch: 0,
            steps: 0,
            checkpoint: Some(ckpt),
        });
    }
    print_json(&EvalReport {
        run_dir: args.run.clone(),
        aggregate: trainer::aggregate(&results),
        seeds: rows,
    })
}

fn reproduce_table(args: ReproduceArgs) -> Result<()> {
    let mut base = ReproduceConfig::new(args.scale, args.seed_set);
    base.jobs = args.jobs;
    if let Some(e) = args.epochs {
        base.train.epochs = e;
    }
    if let Some(n) = args.n {
        base.data.n = n;
    }
    let cfg = resolve(base, &args.common)?;
    let out = out_dir(&args.common, "reproduce-table");
    let report = reproduce::reproduce_table(&cfg, &out)?;
    println!("{}", report.markdown());
    for c in &report.criteria {
        println!("{c}");
    }
    if report.any_failed() {
        for cell in report.cells.iter().filter(|c| c.failed()) {
            log::error!(
                "{}/{}: {}",
                cell.dataset,
                cell.model,
                cell.error.as_deref().unwrap_or("failed")
            );
        }
        bail!("training failed in at least one cell");
    }
    Ok(())
}

fn check(args: CheckArgs) -> Result<()> {
    let outcomes = edvae::check::run_all(args.seed)?;
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        bail!("{failed} check(s) failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::FitPrior(a) => fit_prior(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ReproduceTable(a) => reproduce_table(a),
        Command::Check(a) => check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
