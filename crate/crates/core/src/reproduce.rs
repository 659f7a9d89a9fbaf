//! The four-condition comparison (2 models × 2 datasets) with a
//! Metric / Model / Dataset table in markdown and CSV.
//!
//! Output layout under the chosen root:
//!
//! ```text
//! config.json            resolved ReproduceConfig
//! data/*.edv             generated datasets (reused when present)
//! data/gmm_*.json        fitted mixture prior (reused when present)
//! <dataset>-<model>/     config.json, metrics.csv, timings.csv, result.json, checkpoints
//! metrics.csv            every condition's epoch rows, prefixed by dataset and model
//! table.md, table.csv    aggregated test metrics
//! criteria.txt           PASS/FAIL lines
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::check::CheckOutcome;
use crate::data::{self, DatasetKind, GenConfig, SyntheticDataset};
use crate::error::{Error, Result};
use crate::priors::{fit_gmm, EmConfig, GmmPrior, Prior};
use crate::trainer::{
    best_flags, prepare, record_fields, run_experiment, ModelKind, PriorKind, RunResult,
    SeedHistory, TrainConfig, METRIC_COLUMNS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn epochs(self) -> usize {
        match self {
            Scale::Desk => 200,
            Scale::Paper => 1000,
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        })
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::Config(format!(
                "unknown scale `{other}` (expected desk or paper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedSet {
    /// Seeds 1 through 5.
    Fixed,
    /// Five seeds drawn from OS entropy; recorded in config.json.
    Random,
}

impl SeedSet {
    pub fn resolve(self) -> Vec<u64> {
        match self {
            SeedSet::Fixed => (1..=5).collect(),
            SeedSet::Random => {
                use rand::Rng;
                let mut rng = rand::rng();
                (0..5).map(|_| rng.random_range(0..1u64 << 32)).collect()
            }
        }
    }
}

impl std::str::FromStr for SeedSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(SeedSet::Fixed),
            "random" => Ok(SeedSet::Random),
            other => Err(Error::Config(format!(
                "unknown seed set `{other}` (expected fixed or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproduceConfig {
    pub scale: Scale,
    pub seed_set: SeedSet,
    /// Generator settings shared by both datasets.
    pub data: GenConfig,
    pub split_seed: u64,
    /// Latent draws from the complex generator used to fit the mixture prior.
    pub gmm_samples: usize,
    pub gmm_seed: u64,
    /// Template for every condition; `model` and `prior` are set per condition.
    pub train: TrainConfig,
    /// Conditions trained concurrently.
    pub jobs: usize,
}

impl ReproduceConfig {
    pub fn new(scale: Scale, seed_set: SeedSet) -> Self {
        ReproduceConfig {
            scale,
            seed_set,
            data: GenConfig::default(),
            split_seed: 0,
            gmm_samples: 50_000,
            gmm_seed: 0,
            train: TrainConfig {
                epochs: scale.epochs(),
                seeds: seed_set.resolve(),
                ..TrainConfig::default()
            },
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be ≥ 1".into()));
        }
        if self.data.latent_dim != self.train.latent_dim {
            return Err(Error::Config(format!(
                "data latent_dim {} differs from model latent_dim {}",
                self.data.latent_dim, self.train.latent_dim
            )));
        }
        Ok(())
    }

    /// Training config for one condition. The mixture prior is used only by
    /// the entropy-decomposed model on the complex dataset.
    pub fn condition(&self, dataset: DatasetKind, model: ModelKind) -> TrainConfig {
        let prior = match (dataset, model) {
            (DatasetKind::Complex, ModelKind::Edvae) => PriorKind::Gmm,
            _ => PriorKind::AnalyticNormal,
        };
        TrainConfig {
            model,
            prior,
            ..self.train.clone()
        }
    }
}

pub const DATASETS: [DatasetKind; 2] = [DatasetKind::Gaussian, DatasetKind::Complex];
pub const MODELS: [ModelKind; 2] = [ModelKind::Vae, ModelKind::Edvae];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: DatasetKind,
    pub model: ModelKind,
    pub prior: PriorKind,
    pub result: Option<RunResult>,
    pub error: Option<String>,
}

impl Cell {
    pub fn failed(&self) -> bool {
        self.error.is_some() || self.result.as_ref().is_none_or(RunResult::failed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableReport {
    pub cells: Vec<Cell>,
    pub criteria: Vec<CheckOutcome>,
    pub metrics_sha256: String,
    pub out: PathBuf,
}

impl TableReport {
    pub fn cell(&self, dataset: DatasetKind, model: ModelKind) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.dataset == dataset && c.model == model)
    }

    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(Cell::failed)
    }

    pub fn markdown(&self) -> String {
        render_markdown(&self.cells)
    }
}

fn dataset_label(kind: DatasetKind) -> &'static str {
    match kind {
        DatasetKind::Gaussian => "Dataset 1",
        DatasetKind::Complex => "Dataset 2",
    }
}

fn model_label(model: ModelKind) -> &'static str {
    match model {
        ModelKind::Vae => "VAE",
        ModelKind::Edvae => "ED-VAE",
    }
}

type MetricPick = fn(&crate::trainer::MetricTriple) -> f64;
const METRICS: [(&str, MetricPick); 3] =
    [("MSE", |m| m.mse), ("KLD", |m| m.kld), ("ELBO", |m| m.elbo)];

fn cell_text(cell: Option<&Cell>, pick: MetricPick) -> String {
    match cell.and_then(|c| {
        if c.failed() {
            None
        } else {
            c.result.as_ref()?.aggregate
        }
    }) {
        Some(a) => format!("{:.4} ± {:.4}", pick(&a.mean), pick(&a.std)),
        None => "FAILED".into(),
    }
}

pub fn render_markdown(cells: &[Cell]) -> String {
    let find = |d, m| {
        cells
            .iter()
            .find(|c: &&Cell| c.dataset == d && c.model == m)
    };
    let mut s = String::from("| Metric | Model | Dataset 1 | Dataset 2 |\n|---|---|---|---|\n");
    for (name, pick) in METRICS {
        for model in MODELS {
            s += &format!(
                "| {name} | {} | {} | {} |\n",
                model_label(model),
                cell_text(find(DatasetKind::Gaussian, model), pick),
                cell_text(find(DatasetKind::Complex, model), pick),
            );
        }
    }
    s
}

fn write_table_csv(path: &Path, cells: &[Cell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "metric", "model", "dataset", "prior", "mean", "std", "n_seeds", "status",
    ])?;
    for (name, pick) in METRICS {
        for model in MODELS {
            for dataset in DATASETS {
                let cell = cells
                    .iter()
                    .find(|c| c.dataset == dataset && c.model == model);
                let agg = cell.and_then(|c| {
                    if c.failed() {
                        None
                    } else {
                        c.result.as_ref()?.aggregate
                    }
                });
                let prior = cell.map(|c| c.prior.to_string()).unwrap_or_default();
                let row = match agg {
                    Some(a) => vec![
                        name.to_string(),
                        model.to_string(),
                        dataset.to_string(),
                        prior,
                        format!("{}", pick(&a.mean)),
                        format!("{}", pick(&a.std)),
                        a.n.to_string(),
                        "ok".into(),
                    ],
                    None => vec![
                        name.to_string(),
                        model.to_string(),
                        dataset.to_string(),
                        prior,
                        String::new(),
                        String::new(),
                        "0".into(),
                        "FAILED".into(),
                    ],
                };
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Load `path` if it holds exactly the dataset `kind`/`gen` would produce,
/// otherwise generate and write it.
fn cached_dataset(dir: &Path, kind: DatasetKind, gen: &GenConfig) -> Result<SyntheticDataset> {
    let path = dir.join(format!(
        "{kind}_n{}_d{}_l{}_seed{}.edv",
        gen.n, gen.data_dim, gen.latent_dim, gen.seed
    ));
    let fresh = data::generate(kind, gen)?;
    if path.exists() {
        match data::load(&path) {
            Ok(ds) if ds.meta == fresh.meta => return Ok(ds),
            _ => log::warn!("{} is stale; regenerating", path.display()),
        }
    }
    data::save(&fresh, &path)?;
    Ok(fresh)
}

fn cached_gmm(dir: &Path, cfg: &ReproduceConfig) -> Result<GmmPrior> {
    let k = cfg.train.gmm_k;
    let path = dir.join(format!(
        "gmm_k{k}_l{}_n{}_seed{}.json",
        cfg.train.latent_dim, cfg.gmm_samples, cfg.gmm_seed
    ));
    if path.exists() {
        match GmmPrior::load(&path) {
            Ok(g) if g.k() == k && g.dim() == cfg.train.latent_dim => return Ok(g),
            _ => log::warn!("{} is unreadable; refitting", path.display()),
        }
    }
    let prior = fit_prior_from_generator(cfg.gmm_samples, cfg.train.latent_dim, k, cfg.gmm_seed)?;
    prior.save(&path)?;
    Ok(prior)
}

/// Fit a `k`-component GMM to `samples` draws of the complex latent generator.
pub fn fit_prior_from_generator(
    samples: usize,
    latent_dim: usize,
    k: usize,
    seed: u64,
) -> Result<GmmPrior> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = data::gen_latent_complex(
        samples,
        latent_dim,
        &data::ComplexLatentConfig::default(),
        &mut rng,
    )?;
    let fit = fit_gmm(&z, k, &EmConfig::default(), &mut rng)?;
    if !fit.monotone {
        log::warn!("EM log-likelihood decreased during the prior fit");
    }
    Ok(fit.prior)
}

#[derive(Serialize)]
struct CellConfig<'a> {
    dataset: DatasetKind,
    data: &'a GenConfig,
    split_seed: u64,
    prior_file: Option<PathBuf>,
    train: &'a TrainConfig,
}

fn run_cell(
    cfg: &ReproduceConfig,
    dataset: DatasetKind,
    model: ModelKind,
    ds: &SyntheticDataset,
    gmm: &(GmmPrior, PathBuf),
    out: &Path,
) -> (Cell, Vec<SeedHistory>) {
    let train = cfg.condition(dataset, model);
    let dir = out.join(format!("{dataset}-{model}"));
    let (prior, prior_file) = match train.prior {
        PriorKind::AnalyticNormal => (Prior::standard_normal(train.latent_dim), None),
        PriorKind::Gmm => (Prior::Gmm(gmm.0.clone()), Some(gmm.1.clone())),
    };
    let attempt = || -> Result<(RunResult, Vec<SeedHistory>)> {
        fs::create_dir_all(&dir)?;
        let echo = CellConfig {
            dataset,
            data: &cfg.data,
            split_seed: cfg.split_seed,
            prior_file,
            train: &train,
        };
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&echo)?)?;
        let prepared = prepare(ds, cfg.split_seed)?;
        run_experiment(&train, &prepared, &prior, Some(&dir), 1)
    };
    match attempt() {
        Ok((result, histories)) => {
            let error = if result.failed() {
                Some(
                    result
                        .failures
                        .iter()
                        .map(|f| format!("seed {}: {}", f.seed, f.error))
                        .collect::<Vec<_>>()
                        .join("; "),
                )
            } else {
                None
            };
            (
                Cell {
                    dataset,
                    model,
                    prior: train.prior,
                    result: Some(result),
                    error,
                },
                histories,
            )
        }
        Err(e) => {
            log::error!("{dataset}/{model} failed: {e}");
            (
                Cell {
                    dataset,
                    model,
                    prior: train.prior,
                    result: None,
                    error: Some(e.to_string()),
                },
                Vec::new(),
            )
        }
    }
}

fn write_combined_metrics(
    path: &Path,
    runs: &[(DatasetKind, ModelKind, Vec<SeedHistory>)],
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dataset", "model", "seed"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header)?;
    for (dataset, model, histories) in runs {
        for (seed, history) in histories {
            for (rec, flag) in history.iter().zip(best_flags(history)) {
                let mut row = vec![dataset.to_string(), model.to_string(), seed.to_string()];
                row.extend(record_fields(rec, flag));
                w.write_record(&row)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    fs::write(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Directional checks on the finished table.
pub fn table_criteria(cells: &[Cell]) -> Vec<CheckOutcome> {
    let agg = |d, m| {
        cells
            .iter()
            .find(|c: &&Cell| c.dataset == d && c.model == m)
            .filter(|c| !c.failed())
            .and_then(|c| c.result.as_ref()?.aggregate)
    };
    let mut out = Vec::new();

    let (ed1, vae1) = (
        agg(DatasetKind::Gaussian, ModelKind::Edvae),
        agg(DatasetKind::Gaussian, ModelKind::Vae),
    );
    out.push(match (ed1, vae1) {
        (Some(e), Some(v)) => CheckOutcome::new(
            "KLD collapse on Dataset 1",
            e.mean.kld <= 0.1 && v.mean.kld >= 1.0,
            format!(
                "ED-VAE KLD {:.4} (≤ 0.1), VAE KLD {:.4} (≥ 1.0)",
                e.mean.kld, v.mean.kld
            ),
        ),
        _ => CheckOutcome::new(
            "KLD collapse on Dataset 1",
            false,
            "a Dataset 1 cell failed",
        ),
    });

    let mut ok = true;
    let mut parts = Vec::new();
    for d in DATASETS {
        match (agg(d, ModelKind::Edvae), agg(d, ModelKind::Vae)) {
            (Some(e), Some(v)) => {
                ok &= e.mean.elbo > v.mean.elbo;
                parts.push(format!(
                    "{}: ED-VAE {:.4} vs VAE {:.4}",
                    dataset_label(d),
                    e.mean.elbo,
                    v.mean.elbo
                ));
            }
            _ => {
                ok = false;
                parts.push(format!("{}: cell failed", dataset_label(d)));
            }
        }
    }
    out.push(CheckOutcome::new(
        "ED-VAE ELBO above VAE ELBO",
        ok,
        parts.join("; "),
    ));

    let mut exact = true;
    let mut count = 0;
    for c in cells {
        if let Some(r) = &c.result {
            for s in &r.seeds {
                exact &= s.elbo == -s.mse - s.kld;
                count += 1;
            }
            if let Some(a) = r.aggregate {
                exact &= a.mean.elbo == -a.mean.mse - a.mean.kld;
                count += 1;
            }
        }
        exact &= !c.failed();
    }
    out.push(CheckOutcome::new(
        "ELBO = −MSE − KLD",
        exact,
        format!("{count} per-seed and aggregate values checked exactly"),
    ));
    out
}

/// Run all four conditions and write the table under `out`.
///
/// When `out/metrics.csv` already exists its checksum is compared with the
/// new file and reported as a determinism line.
pub fn reproduce_table(cfg: &ReproduceConfig, out: &Path) -> Result<TableReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let data_dir = out.join("data");
    fs::create_dir_all(&data_dir)?;
    fs::write(out.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;

    let metrics_path = out.join("metrics.csv");
    let previous = fs::read(&metrics_path)
        .ok()
        .map(|b| hex::encode(Sha256::digest(&b)));

    let datasets = DATASETS
        .iter()
        .map(|&k| cached_dataset(&data_dir, k, &cfg.data))
        .collect::<Result<Vec<_>>>()?;
    let gmm_path = data_dir.join(format!(
        "gmm_k{}_l{}_n{}_seed{}.json",
        cfg.train.gmm_k, cfg.train.latent_dim, cfg.gmm_samples, cfg.gmm_seed
    ));
    let gmm = (cached_gmm(&data_dir, cfg)?, gmm_path);

    let jobs: Vec<(usize, DatasetKind, ModelKind)> = DATASETS
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| MODELS.iter().map(move |&m| (i, d, m)))
        .collect();
    let run = |&(i, d, m): &(usize, DatasetKind, ModelKind)| {
        log::info!("training {d}/{m}");
        run_cell(cfg, d, m, &datasets[i], &gmm, out)
    };
    let results: Vec<(Cell, Vec<SeedHistory>)> = if cfg.jobs <= 1 {
        jobs.iter().map(run).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.jobs)))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    };

    let mut cells = Vec::new();
    let mut runs = Vec::new();
    for (cell, hist) in results {
        runs.push((cell.dataset, cell.model, hist));
        cells.push(cell);
    }
    let sha = write_combined_metrics(&metrics_path, &runs)?;
    fs::write(out.join("table.md"), render_markdown(&cells))?;
    write_table_csv(&out.join("table.csv"), &cells)?;

    let mut criteria = table_criteria(&cells);
    if let Some(prev) = previous {
        criteria.push(CheckOutcome::new(
            "determinism",
            prev == sha,
            format!("metrics.csv sha256 {sha} vs previous run {prev}"),
        ));
    }
    let lines: String = criteria.iter().map(|c| format!("{c}\n")).collect();
    fs::write(out.join("criteria.txt"), lines)?;

    Ok(TableReport {
        cells,
        criteria,
        metrics_sha256: sha,
        out: out.to_path_buf(),
    })
}
