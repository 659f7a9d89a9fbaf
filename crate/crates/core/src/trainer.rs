//! Training loop, held-out evaluation and the multi-seed runner.
//!
//! Every seed owns five independent ChaCha8 streams (init, shuffle,
//! training noise, validation noise, evaluation noise), so a seed's result
//! does not depend on which other seeds run or in what order.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{self, Normalizer, SyntheticDataset};
use crate::error::{Error, Result};
use crate::losses::{
    analytic_kl, cross_entropy_term, edvae_objective, entropy_term, infonce_loss, recon_loss,
    vae_objective, EdVaeTerms, LossBreakdown, TermWeights,
};
use crate::nets::{
    decode, encode, reparameterize, AdamConfig, AdamState, BoundMlp, MlpConfig, MlpParams,
};
use crate::priors::Prior;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const VAL_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vae,
    Edvae,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Vae => "vae",
            ModelKind::Edvae => "edvae",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vae" => Ok(ModelKind::Vae),
            "edvae" | "ed-vae" => Ok(ModelKind::Edvae),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected vae or edvae)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    AnalyticNormal,
    Gmm,
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorKind::AnalyticNormal => "analytic-normal",
            PriorKind::Gmm => "gmm",
        })
    }
}

impl std::str::FromStr for PriorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "analytic-normal" | "normal" => Ok(PriorKind::AnalyticNormal),
            "gmm" => Ok(PriorKind::Gmm),
            other => Err(Error::Config(format!(
                "unknown prior `{other}` (expected analytic-normal or gmm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub prior: PriorKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without a `min_delta` improvement in validation loss before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub seeds: Vec<u64>,
    pub lambda_mi: f64,
    pub lambda_reg: f64,
    pub temperature: f64,
    pub gmm_k: usize,
    pub early_stop: bool,
    pub hidden: usize,
    pub latent_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Edvae,
            prior: PriorKind::AnalyticNormal,
            epochs: 1000,
            batch_size: 512,
            lr: 1e-3,
            patience: 20,
            min_delta: 1e-4,
            seeds: vec![1, 2, 3, 4, 5],
            lambda_mi: 1.0,
            lambda_reg: 1.0,
            temperature: 1.0,
            gmm_k: 8,
            early_stop: true,
            hidden: crate::nets::HIDDEN_DIM,
            latent_dim: crate::nets::LATENT_DIM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.min_delta.is_finite() && self.min_delta >= 0.0) {
            return bad(format!("min_delta must be ≥ 0, got {}", self.min_delta));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !(self.lambda_mi.is_finite() && self.lambda_reg.is_finite()) {
            return bad("term weights must be finite".into());
        }
        if self.gmm_k == 0 {
            return bad("gmm_k must be ≥ 1".into());
        }
        if self.hidden == 0 || self.latent_dim == 0 {
            return bad("hidden and latent_dim must be ≥ 1".into());
        }
        if self.model == ModelKind::Vae && self.prior != PriorKind::AnalyticNormal {
            return bad("the baseline VAE needs the analytic-normal prior".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> TermWeights {
        TermWeights {
            lambda_mi: self.lambda_mi,
            lambda_reg: self.lambda_reg,
        }
    }

    pub fn mlp(&self, data_dim: usize) -> MlpConfig {
        MlpConfig {
            data_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden,
        }
    }

    fn check_prior(&self, prior: &Prior) -> Result<()> {
        let matches = match self.prior {
            PriorKind::AnalyticNormal => prior.is_standard_normal(),
            PriorKind::Gmm => !prior.is_standard_normal(),
        };
        if !matches {
            return Err(Error::Config(format!(
                "prior does not match prior kind `{}`",
                self.prior
            )));
        }
        if prior.dim() != self.latent_dim {
            return Err(Error::Config(format!(
                "prior has dim {}, model latent_dim is {}",
                prior.dim(),
                self.latent_dim
            )));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Train/val/test splits normalized with train-only statistics.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: SyntheticDataset,
    pub val: SyntheticDataset,
    pub test: SyntheticDataset,
    pub normalizer: Normalizer,
}

impl PreparedData {
    pub fn data_dim(&self) -> usize {
        self.train.x.ncols()
    }
}

pub fn prepare(ds: &SyntheticDataset, split_seed: u64) -> Result<PreparedData> {
    let s = data::split(ds, data::DEFAULT_SPLIT, split_seed)?;
    let normalizer = Normalizer::fit(&s.train.x)?;
    Ok(PreparedData {
        train: normalizer.apply(&s.train),
        val: normalizer.apply(&s.val),
        test: normalizer.apply(&s.test),
        normalizer,
    })
}

struct StepTerms {
    total: Tensor,
    recon: Tensor,
    infonce: Option<Tensor>,
    ent: Tensor,
    xent: Tensor,
    kl: Option<Tensor>,
}

impl StepTerms {
    fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            recon: tape.item(self.recon),
            infonce: self.infonce.map(|t| tape.item(t)),
            ent: tape.item(self.ent),
            xent: tape.item(self.xent),
            kl_analytic: self.kl.map(|t| tape.item(t)),
            total: tape.item(self.total),
        }
    }
}

/// One batch through encoder, sampler, decoder and the configured objective.
fn forward(
    tape: &mut Tape,
    net: &BoundMlp,
    prior: &Prior,
    cfg: &TrainConfig,
    x: Array2<f64>,
    x_pos: Array2<f64>,
    noise: Array2<f64>,
) -> Result<StepTerms> {
    let xt = tape.constant(x)?;
    let out = encode(tape, net, xt)?;
    let eps = tape.constant(noise)?;
    let z = reparameterize(tape, &out, eps)?;
    let x_hat = decode(tape, net, z)?;
    let recon = recon_loss(tape, xt, x_hat)?;
    let ent = entropy_term(tape, &out)?;
    let xent = cross_entropy_term(tape, prior, z)?;
    let kl = if prior.is_standard_normal() {
        Some(analytic_kl(tape, &out)?)
    } else {
        None
    };
    match cfg.model {
        ModelKind::Vae => {
            let kl_t = kl.ok_or_else(|| {
                Error::Config("the baseline VAE needs a standard-normal prior".into())
            })?;
            let total = vae_objective(tape, recon, kl_t)?;
            Ok(StepTerms {
                total,
                recon,
                infonce: None,
                ent,
                xent,
                kl,
            })
        }
        ModelKind::Edvae => {
            let xp = tape.constant(x_pos)?;
            let pos = encode(tape, net, xp)?;
            let nce = infonce_loss(tape, out.mu, pos.mu, cfg.temperature)?;
            let terms = EdVaeTerms {
                recon,
                infonce: nce,
                ent,
                xent,
            };
            let total = edvae_objective(tape, &terms, cfg.weights())?;
            Ok(StepTerms {
                total,
                recon,
                infonce: Some(nce),
                ent,
                xent,
                kl,
            })
        }
    }
}

fn rows_of(a: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    a.select(Axis(0), rows)
}

/// Row-weighted mean of per-chunk breakdowns.
fn weighted_mean(parts: &[(LossBreakdown, usize)]) -> LossBreakdown {
    let n: usize = parts.iter().map(|(_, r)| r).sum();
    let w = |f: &dyn Fn(&LossBreakdown) -> f64| {
        parts.iter().map(|(b, r)| f(b) * *r as f64).sum::<f64>() / n as f64
    };
    let opt = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| {
        parts
            .iter()
            .map(|(b, r)| f(b).map(|v| v * *r as f64))
            .sum::<Option<f64>>()
            .map(|s| s / n as f64)
    };
    LossBreakdown {
        recon: w(&|b| b.recon),
        infonce: opt(&|b| b.infonce),
        ent: w(&|b| b.ent),
        xent: w(&|b| b.xent),
        kl_analytic: opt(&|b| b.kl_analytic),
        total: w(&|b| b.total),
    }
}

/// Contiguous chunks of at most `size` rows; a trailing single row is merged
/// into the previous chunk so every chunk has in-batch negatives.
fn chunks(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> =
        (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < 2) {
        let last = out.pop().expect("len > 1");
        out.last_mut().expect("len > 0").end = last.end;
    }
    out
}

/// Forward-only losses over `ds` in batch-sized chunks with fixed `noise`.
fn dataset_losses(
    cfg: &TrainConfig,
    params: &MlpParams,
    prior: &Prior,
    ds: &SyntheticDataset,
    noise: &Array2<f64>,
) -> Result<LossBreakdown> {
    if ds.len() < 2 {
        return Err(Error::Config(format!(
            "evaluation split needs ≥ 2 rows, got {}",
            ds.len()
        )));
    }
    let mut parts = Vec::new();
    for r in chunks(ds.len(), cfg.batch_size) {
        let mut tape = Tape::new();
        let net = params.bind(&mut tape)?;
        let terms = forward(
            &mut tape,
            &net,
            prior,
            cfg,
            ds.x.slice(ndarray::s![r.clone(), ..]).to_owned(),
            ds.x_pos.slice(ndarray::s![r.clone(), ..]).to_owned(),
            noise.slice(ndarray::s![r.clone(), ..]).to_owned(),
        )?;
        parts.push((terms.values(&tape), r.len()));
    }
    Ok(weighted_mean(&parts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub seed: u64,
    /// Parameters from the epoch with the lowest validation loss.
    pub params: MlpParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub steps: u64,
    pub stopped_early: bool,
}

/// Train one model from `seed`.
pub fn train(
    cfg: &TrainConfig,
    data: &PreparedData,
    prior: &Prior,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_prior(prior)?;
    let mlp = cfg.mlp(data.data_dim());
    let mut params = MlpParams::init(mlp, &mut stream(seed, INIT_STREAM))?;
    let mut adam = AdamState::new(
        params.arrays(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut shuffle_rng = stream(seed, SHUFFLE_STREAM);
    let mut noise_rng = stream(seed, NOISE_STREAM);
    let val_noise = gaussian(
        data.val.len(),
        cfg.latent_dim,
        &mut stream(seed, VAL_STREAM),
    );

    let n = data.train.len();
    let (n_batches, batch) = if n >= cfg.batch_size {
        (n / cfg.batch_size, cfg.batch_size)
    } else {
        (1, n)
    };
    if batch < 2 {
        log::warn!("train split has {n} rows; skipping every batch");
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, MlpParams, usize)> = None;
    let mut reference = f64::INFINITY;
    let mut since_improvement = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut parts = Vec::with_capacity(n_batches);
        let mut last: Option<LossBreakdown> = None;
        for b in 0..n_batches {
            if batch < 2 {
                continue;
            }
            let rows = &order[b * batch..(b + 1) * batch];
            let noise = gaussian(batch, cfg.latent_dim, &mut noise_rng);
            let abort = |e: Error, last: &Option<LossBreakdown>| Error::TrainingAborted {
                epoch,
                reason: match last {
                    Some(l) => format!("{e}; last batch losses {l:?}"),
                    None => e.to_string(),
                },
            };
            let mut tape = Tape::new();
            let net = params.bind(&mut tape).map_err(|e| abort(e, &last))?;
            let terms = forward(
                &mut tape,
                &net,
                prior,
                cfg,
                rows_of(&data.train.x, rows),
                rows_of(&data.train.x_pos, rows),
                noise,
            )
            .map_err(|e| abort(e, &last))?;
            let values = terms.values(&tape);
            tape.backward(terms.total)
                .map_err(|e| abort(e, &Some(values)))?;
            let mut grads = net.grads(&tape);
            adam.step(params.arrays_mut(), &mut grads)
                .map_err(|e| abort(e, &Some(values)))?;
            last = Some(values);
            parts.push((values, batch));
        }
        let train_losses = if parts.is_empty() {
            dataset_losses(
                cfg,
                &params,
                prior,
                &data.train,
                &gaussian(n, cfg.latent_dim, &mut noise_rng),
            )?
        } else {
            weighted_mean(&parts)
        };
        let val = dataset_losses(cfg, &params, prior, &data.val, &val_noise).map_err(|e| {
            Error::TrainingAborted {
                epoch,
                reason: format!("validation failed: {e}"),
            }
        })?;
        history.push(EpochRecord {
            epoch,
            train: train_losses,
            val,
            wall_time_s: start.elapsed().as_secs_f64(),
        });

        if best.as_ref().is_none_or(|(b, _, _)| val.total < *b) {
            best = Some((val.total, params.clone(), epoch));
        }
        if val.total < reference - cfg.min_delta {
            reference = val.total;
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        if cfg.early_stop && since_improvement >= cfg.patience {
            log::info!("seed {seed}: early stop at epoch {epoch}");
            stopped_early = true;
            break;
        }
    }

    let (best_val, best_params, best_epoch) = best.expect("epochs ≥ 1");
    Ok(TrainOutcome {
        seed,
        params: best_params,
        history,
        best_epoch,
        best_val,
        steps: adam.step_count(),
        stopped_early,
    })
}

/// Held-out metrics. `kld` is floored at 0 for reporting; `kld_raw` keeps the sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub kld: f64,
    pub kld_raw: f64,
    pub elbo: f64,
}

impl EvalMetrics {
    pub fn from_parts(mse: f64, kld_raw: f64) -> Self {
        let kld = kld_raw.max(0.0);
        EvalMetrics {
            mse,
            kld,
            kld_raw,
            elbo: -mse - kld,
        }
    }
}

/// MSE is the reconstruction loss with one sampled `z` per row. KLD is the
/// analytic KL for the baseline and the constant-corrected
/// `xent − (ent + ½·dim·log 2π)` estimate for the entropy-decomposed model.
pub fn evaluate(
    cfg: &TrainConfig,
    params: &MlpParams,
    prior: &Prior,
    test: &SyntheticDataset,
    seed: u64,
) -> Result<(EvalMetrics, LossBreakdown)> {
    cfg.check_prior(prior)?;
    let noise = gaussian(test.len(), cfg.latent_dim, &mut stream(seed, EVAL_STREAM));
    let losses = dataset_losses(cfg, params, prior, test, &noise)?;
    let kld_raw = match cfg.model {
        ModelKind::Vae => losses.kl_analytic.ok_or_else(|| {
            Error::Config("the baseline VAE needs a standard-normal prior".into())
        })?,
        ModelKind::Edvae => losses.kl_estimate(cfg.latent_dim),
    };
    Ok((EvalMetrics::from_parts(losses.recon, kld_raw), losses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mse: f64,
    pub kld: f64,
    pub kld_raw: f64,
    pub elbo: f64,
    pub test_losses: LossBreakdown,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub steps: u64,
    pub checkpoint: Option<PathBuf>,
}

impl SeedResult {
    pub fn metrics(&self) -> EvalMetrics {
        EvalMetrics {
            mse: self.mse,
            kld: self.kld,
            kld_raw: self.kld_raw,
            elbo: self.elbo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub mse: f64,
    pub kld: f64,
    pub elbo: f64,
}

/// Mean and sample standard deviation across seeds. The mean ELBO is
/// `−mean MSE − mean KLD`, which equals the mean of per-seed ELBOs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: MetricTriple,
    pub std: MetricTriple,
}

pub fn aggregate(results: &[SeedResult]) -> Option<Aggregate> {
    if results.is_empty() {
        return None;
    }
    let n = results.len();
    let mean = |f: fn(&SeedResult) -> f64| results.iter().map(f).sum::<f64>() / n as f64;
    let std = |f: fn(&SeedResult) -> f64| {
        if n < 2 {
            return 0.0;
        }
        let m = mean(f);
        (results.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    let mse = mean(|r| r.mse);
    let kld = mean(|r| r.kld);
    Some(Aggregate {
        n,
        mean: MetricTriple {
            mse,
            kld,
            elbo: -mse - kld,
        },
        std: MetricTriple {
            mse: std(|r| r.mse),
            kld: std(|r| r.kld),
            elbo: std(|r| r.elbo),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: TrainConfig,
    pub seeds: Vec<SeedResult>,
    pub failures: Vec<SeedFailure>,
    pub aggregate: Option<Aggregate>,
}

impl RunResult {
    pub fn failed(&self) -> bool {
        !self.failures.is_empty() || self.seeds.is_empty()
    }
}

/// Per-seed history as returned by [`run_experiment`].
pub type SeedHistory = (u64, Vec<EpochRecord>);

pub const METRIC_COLUMNS: [&str; 14] = [
    "epoch",
    "train_recon",
    "train_infonce",
    "train_ent",
    "train_xent",
    "train_kl_analytic",
    "train_total",
    "val_recon",
    "val_infonce",
    "val_ent",
    "val_xent",
    "val_kl_analytic",
    "val_total",
    "best_so_far",
];

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// One metrics row (without the seed) for `METRIC_COLUMNS`. Wall time is
/// left out so the file is byte-identical across reruns.
pub fn record_fields(rec: &EpochRecord, best_so_far: bool) -> Vec<String> {
    let mut out = vec![rec.epoch.to_string()];
    for b in [&rec.train, &rec.val] {
        out.extend([
            num(b.recon),
            opt(b.infonce),
            num(b.ent),
            num(b.xent),
            opt(b.kl_analytic),
            num(b.total),
        ]);
    }
    out.push(u8::from(best_so_far).to_string());
    out
}

/// Marks the epochs whose validation loss was a new minimum.
pub fn best_flags(history: &[EpochRecord]) -> Vec<bool> {
    let mut best = f64::INFINITY;
    history
        .iter()
        .map(|r| {
            let b = r.val.total < best;
            if b {
                best = r.val.total;
            }
            b
        })
        .collect()
}

pub fn write_metrics(path: &Path, histories: &[SeedHistory]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["seed"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header)?;
    for (seed, history) in histories {
        for (rec, flag) in history.iter().zip(best_flags(history)) {
            let mut row = vec![seed.to_string()];
            row.extend(record_fields(rec, flag));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_timings(path: &Path, histories: &[SeedHistory]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "seed,epoch,wall_time_s")?;
    for (seed, history) in histories {
        for rec in history {
            writeln!(w, "{seed},{},{}", rec.epoch, rec.wall_time_s)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run_seed(
    cfg: &TrainConfig,
    data: &PreparedData,
    prior: &Prior,
    seed: u64,
    out: Option<&Path>,
) -> Result<(SeedResult, Vec<EpochRecord>)> {
    let outcome = train(cfg, data, prior, seed)?;
    let (metrics, losses) = evaluate(cfg, &outcome.params, prior, &data.test, seed)?;
    let checkpoint = match out {
        Some(dir) => {
            let path = dir.join(format!("checkpoint_seed{seed}.json"));
            outcome.params.save(&path)?;
            Some(path)
        }
        None => None,
    };
    log::info!(
        "seed {seed}: mse {:.4} kld {:.4} elbo {:.4} (best epoch {}/{})",
        metrics.mse,
        metrics.kld,
        metrics.elbo,
        outcome.best_epoch,
        outcome.history.len()
    );
    Ok((
        SeedResult {
            seed,
            mse: metrics.mse,
            kld: metrics.kld,
            kld_raw: metrics.kld_raw,
            elbo: metrics.elbo,
            test_losses: losses,
            epochs_run: outcome.history.len(),
            best_epoch: outcome.best_epoch,
            steps: outcome.steps,
            checkpoint,
        },
        outcome.history,
    ))
}

/// Train and evaluate every seed in `cfg.seeds`, up to `jobs` at a time.
/// A failing seed is recorded in `failures` and the others still run.
/// With `out` set, writes metrics.csv, timings.csv, result.json and one
/// checkpoint per seed there.
pub fn run_experiment(
    cfg: &TrainConfig,
    data: &PreparedData,
    prior: &Prior,
    out: Option<&Path>,
    jobs: usize,
) -> Result<(RunResult, Vec<SeedHistory>)> {
    cfg.validate()?;
    cfg.check_prior(prior)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let one = |seed: u64| run_seed(cfg, data, prior, seed, out);
    let outcomes: Vec<Result<(SeedResult, Vec<EpochRecord>)>> = if jobs <= 1 || cfg.seeds.len() == 1
    {
        cfg.seeds.iter().map(|&s| one(s)).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
        pool.install(|| cfg.seeds.par_iter().map(|&s| one(s)).collect())
    };

    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    let mut histories = Vec::new();
    for (&seed, outcome) in cfg.seeds.iter().zip(outcomes) {
        match outcome {
            Ok((res, hist)) => {
                seeds.push(res);
                histories.push((seed, hist));
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    let result = RunResult {
        config: cfg.clone(),
        aggregate: aggregate(&seeds),
        seeds,
        failures,
    };
    if let Some(dir) = out {
        write_metrics(&dir.join("metrics.csv"), &histories)?;
        write_timings(&dir.join("timings.csv"), &histories)?;
        std::fs::write(dir.join("result.json"), serde_json::to_vec_pretty(&result)?)?;
    }
    Ok((result, histories))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetKind, GenConfig};

    fn small_data(n: usize) -> PreparedData {
        let ds = generate(
            DatasetKind::Gaussian,
            &GenConfig {
                n,
                ..GenConfig::default()
            },
        )
        .unwrap();
        prepare(&ds, 0).unwrap()
    }

    fn small_cfg(model: ModelKind) -> TrainConfig {
        TrainConfig {
            model,
            epochs: 2,
            batch_size: 64,
            hidden: 32,
            seeds: vec![1],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 1,
                ..TrainConfig::default()
            },
            TrainConfig {
                seeds: vec![],
                ..TrainConfig::default()
            },
            TrainConfig {
                model: ModelKind::Vae,
                prior: PriorKind::Gmm,
                ..TrainConfig::default()
            },
            TrainConfig {
                temperature: 0.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let mut v = serde_json::to_value(TrainConfig::default()).unwrap();
        assert_eq!(v["prior"], "analytic-normal");
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<TrainConfig>(v).is_err());
    }

    #[test]
    fn chunking_keeps_negatives() {
        assert_eq!(chunks(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(chunks(9, 4), vec![0..4, 4..9]);
        assert_eq!(chunks(3, 8), vec![0..3]);
    }

    #[test]
    fn zero_epochs_rejected() {
        let data = small_data(200);
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg(ModelKind::Vae)
        };
        assert!(train(&cfg, &data, &Prior::standard_normal(5), 1).is_err());
    }

    #[test]
    fn one_epoch_takes_floor_of_n_over_batch_steps() {
        // 7/10 of 1463 is 1024 training rows: two full batches of 512.
        let data = small_data(1463);
        assert_eq!(data.train.len(), 1024);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 512,
            ..small_cfg(ModelKind::Edvae)
        };
        let out = train(&cfg, &data, &Prior::standard_normal(5), 3).unwrap();
        assert_eq!(out.steps, 2);
        assert_eq!(out.history.len(), 1);

        let data = small_data(1000);
        let out = train(&cfg, &data, &Prior::standard_normal(5), 3).unwrap();
        assert_eq!(out.steps, 1, "700 rows: the trailing 188 are dropped");
    }

    #[test]
    fn train_smaller_than_batch_uses_one_batch() {
        let data = small_data(100);
        let cfg = TrainConfig {
            batch_size: 128,
            ..small_cfg(ModelKind::Edvae)
        };
        let out = train(&cfg, &data, &Prior::standard_normal(5), 1).unwrap();
        assert_eq!(out.steps, 2);
    }

    #[test]
    fn same_seed_same_history() {
        let data = small_data(400);
        let cfg = small_cfg(ModelKind::Edvae);
        let strip = |o: TrainOutcome| {
            o.history
                .into_iter()
                .map(|r| (r.epoch, r.train, r.val))
                .collect::<Vec<_>>()
        };
        let a = strip(train(&cfg, &data, &Prior::standard_normal(5), 9).unwrap());
        let b = strip(train(&cfg, &data, &Prior::standard_normal(5), 9).unwrap());
        let c = strip(train(&cfg, &data, &Prior::standard_normal(5), 10).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn losses_are_consistent_with_objective() {
        let data = small_data(400);
        for model in [ModelKind::Vae, ModelKind::Edvae] {
            let cfg = small_cfg(model);
            let out = train(&cfg, &data, &Prior::standard_normal(5), 2).unwrap();
            for rec in &out.history {
                for b in [rec.train, rec.val] {
                    let expect = match model {
                        ModelKind::Vae => b.recon + b.kl_analytic.unwrap(),
                        ModelKind::Edvae => crate::losses::edvae_total(
                            b.recon,
                            b.infonce.unwrap(),
                            b.ent,
                            b.xent,
                            cfg.weights(),
                        ),
                    };
                    assert!((b.total - expect).abs() < 1e-10, "{b:?}");
                }
            }
        }
    }

    #[test]
    fn early_stopping_restores_best_validation_params() {
        let data = small_data(400);
        let cfg = TrainConfig {
            epochs: 40,
            patience: 3,
            min_delta: 10.0,
            ..small_cfg(ModelKind::Vae)
        };
        let prior = Prior::standard_normal(5);
        let out = train(&cfg, &data, &prior, 4).unwrap();
        assert!(out.stopped_early);
        assert_eq!(
            out.history.len(),
            4,
            "first epoch sets the reference, three more without a 10-nat gain"
        );
        let best = out
            .history
            .iter()
            .map(|r| r.val.total)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val, best);
        assert_eq!(out.history[out.best_epoch - 1].val.total, best);
        let val_noise = gaussian(data.val.len(), 5, &mut stream(4, VAL_STREAM));
        let again = dataset_losses(&cfg, &out.params, &prior, &data.val, &val_noise).unwrap();
        assert_eq!(again.total, best);
    }

    #[test]
    fn prior_mismatch_rejected() {
        let data = small_data(200);
        let cfg = TrainConfig {
            prior: PriorKind::Gmm,
            ..small_cfg(ModelKind::Edvae)
        };
        assert!(train(&cfg, &data, &Prior::standard_normal(5), 1).is_err());
        assert!(train(
            &small_cfg(ModelKind::Edvae),
            &data,
            &Prior::standard_normal(4),
            1
        )
        .is_err());
    }

    #[test]
    fn ideal_model_scores_zero() {
        let m = EvalMetrics::from_parts(0.0, 0.0);
        assert_eq!((m.mse, m.kld, m.elbo), (0.0, 0.0, 0.0));
        let m = EvalMetrics::from_parts(1.5, -0.25);
        assert_eq!(m.kld, 0.0);
        assert_eq!(m.kld_raw, -0.25);
        assert_eq!(m.elbo, -1.5);
    }

    #[test]
    fn evaluate_elbo_identity() {
        let data = small_data(400);
        let prior = Prior::standard_normal(5);
        for model in [ModelKind::Vae, ModelKind::Edvae] {
            let cfg = small_cfg(model);
            let out = train(&cfg, &data, &prior, 5).unwrap();
            let (m, losses) = evaluate(&cfg, &out.params, &prior, &data.test, 5).unwrap();
            assert_eq!(m.elbo, -m.mse - m.kld);
            assert_eq!(m.mse, losses.recon);
            assert!(m.kld >= 0.0);
        }
    }

    fn seed_result(seed: u64, mse: f64, kld: f64) -> SeedResult {
        let m = EvalMetrics::from_parts(mse, kld);
        SeedResult {
            seed,
            mse: m.mse,
            kld: m.kld,
            kld_raw: m.kld_raw,
            elbo: m.elbo,
            test_losses: LossBreakdown {
                recon: mse,
                infonce: None,
                ent: 0.0,
                xent: 0.0,
                kl_analytic: None,
                total: 0.0,
            },
            epochs_run: 1,
            best_epoch: 1,
            steps: 1,
            checkpoint: None,
        }
    }

    #[test]
    fn aggregate_single_seed_has_zero_std() {
        let a = aggregate(&[seed_result(1, 2.0, 3.0)]).unwrap();
        assert_eq!(
            a.std,
            MetricTriple {
                mse: 0.0,
                kld: 0.0,
                elbo: 0.0
            }
        );
        assert_eq!(a.mean.elbo, -5.0);
        assert!(aggregate(&[]).is_none());
    }

    #[test]
    fn aggregate_matches_hand_average() {
        let rs: Vec<_> = (1..=5)
            .map(|s| seed_result(s, s as f64, 0.5 * s as f64))
            .collect();
        let a = aggregate(&rs).unwrap();
        assert_eq!(a.n, 5);
        assert!((a.mean.mse - 3.0).abs() < 1e-12);
        assert!((a.mean.kld - 1.5).abs() < 1e-12);
        let hand_elbo = rs.iter().map(|r| r.elbo).sum::<f64>() / 5.0;
        assert!((a.mean.elbo - hand_elbo).abs() < 1e-9);
        assert_eq!(a.mean.elbo, -a.mean.mse - a.mean.kld);
        // sample std of 1..5 is sqrt(2.5)
        assert!((a.std.mse - 2.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn run_experiment_writes_run_directory() {
        let data = small_data(300);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            seeds: vec![1, 2],
            ..small_cfg(ModelKind::Edvae)
        };
        let (res, hist) =
            run_experiment(&cfg, &data, &Prior::standard_normal(5), Some(dir.path()), 2).unwrap();
        assert!(!res.failed());
        assert_eq!(res.seeds.len(), 2);
        assert_eq!(hist.len(), 2);
        for f in [
            "metrics.csv",
            "timings.csv",
            "result.json",
            "checkpoint_seed1.json",
            "checkpoint_seed2.json",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 2);
        assert!(text.starts_with("seed,epoch,train_recon"));
        let back: RunResult =
            serde_json::from_slice(&std::fs::read(dir.path().join("result.json")).unwrap())
                .unwrap();
        assert_eq!(back, res);
        let ckpt = MlpParams::load(&dir.path().join("checkpoint_seed1.json"), cfg.mlp(10)).unwrap();
        let (m, _) = evaluate(&cfg, &ckpt, &Prior::standard_normal(5), &data.test, 1).unwrap();
        assert_eq!(m, res.seeds[0].metrics());

        // Parallel and sequential execution agree.
        let (seq, _) = run_experiment(&cfg, &data, &Prior::standard_normal(5), None, 1).unwrap();
        let strip = |r: &RunResult| r.seeds.iter().map(SeedResult::metrics).collect::<Vec<_>>();
        assert_eq!(strip(&seq), strip(&res));
    }
}
