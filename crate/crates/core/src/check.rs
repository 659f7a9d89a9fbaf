//! Self-checks shared by the `check` command and the acceptance suite:
//! finite-difference gradient checks and closed-form or quadrature oracles.

use std::f64::consts::PI;
use std::fmt;
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{Tape, Tensor};
use crate::data::{self, DatasetKind, GenConfig};
use crate::error::Result;
use crate::losses::{
    analytic_kl, cross_entropy_term, edvae_objective, entropy_constant, entropy_term, infonce_loss,
    recon_loss, vae_objective, EdVaeTerms, TermWeights,
};
use crate::nets::{decode, encode, reparameterize, BoundMlp, EncoderOutput, MlpConfig, MlpParams};
use crate::priors::{fit_gmm, EmConfig, GmmPrior, Prior};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_TIME_LIMIT: Duration = Duration::from_secs(60);
const FD_STEP: f64 = 1e-6;

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over every entry of every input,
/// with the numeric gradient from central differences.
pub fn gradient_error(
    inputs: &[Array2<f64>],
    f: &dyn Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let leaves = inputs
        .iter()
        .map(|a| tape.param(a.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &leaves)?;
    tape.backward(out)?;
    let analytic: Vec<Array2<f64>> = leaves.iter().map(|&t| tape.grad(t)).collect();

    let eval = |vals: &[Array2<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let ts = vals
            .iter()
            .map(|a| t.constant(a.clone()))
            .collect::<Result<Vec<_>>>()?;
        let o = f(&mut t, &ts)?;
        Ok(t.item(o))
    };
    let mut work = inputs.to_vec();
    let (mut diff2, mut ana2, mut num2) = (0.0, 0.0, 0.0);
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let orig = work[i].as_slice().expect("standard layout")[j];
            work[i].as_slice_mut().expect("standard layout")[j] = orig + FD_STEP;
            let fp = eval(&work)?;
            work[i].as_slice_mut().expect("standard layout")[j] = orig - FD_STEP;
            let fm = eval(&work)?;
            work[i].as_slice_mut().expect("standard layout")[j] = orig;
            let num = (fp - fm) / (2.0 * FD_STEP);
            let ana = analytic[i].as_slice().expect("standard layout")[j];
            diff2 += (ana - num).powi(2);
            ana2 += ana * ana;
            num2 += num * num;
        }
    }
    let scale = ana2.sqrt().max(num2.sqrt());
    Ok(if scale == 0.0 {
        0.0
    } else {
        diff2.sqrt() / scale
    })
}

fn normal(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let e: f64 = StandardNormal.sample(rng);
        scale * e
    })
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

fn random_gmm(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<GmmPrior> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let means = (0..k)
        .map(|_| {
            (0..dim)
                .map(|_| 1.5 * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>()
        })
        .collect();
    let variances = (0..k)
        .map(|_| {
            (0..dim)
                .map(|_| rng.random_range(0.5..2.0))
                .collect::<Vec<f64>>()
        })
        .collect();
    GmmPrior::new(weights, means, variances)
}

/// Every loss term and both objectives against central differences on
/// `instances` random problems (batch 4, data dim 6, latent dim 5, hidden 16).
pub fn gradient_checks(instances: usize, seed: u64) -> Result<CheckOutcome> {
    const BATCH: usize = 4;
    const DATA: usize = 6;
    const LATENT: usize = 5;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mlp = MlpConfig {
        data_dim: DATA,
        latent_dim: LATENT,
        hidden: 16,
    };
    let normal_prior = Prior::standard_normal(LATENT);
    let names = [
        "recon_loss",
        "infonce_loss",
        "entropy_term",
        "cross_entropy_term[normal]",
        "cross_entropy_term[gmm]",
        "analytic_kl",
        "vae_objective",
        "edvae_objective[normal]",
        "edvae_objective[gmm]",
    ];
    let mut worst = [0.0f64; 9];

    for _ in 0..instances {
        let gmm_prior = Prior::Gmm(random_gmm(3, LATENT, &mut rng)?);
        let x = normal(BATCH, DATA, 1.0, &mut rng);
        let x_pos = &x + &normal(BATCH, DATA, 0.1, &mut rng);
        let noise = normal(BATCH, LATENT, 1.0, &mut rng);
        let mu = normal(BATCH, LATENT, 1.0, &mut rng);
        let logvar = uniform(BATCH, LATENT, -2.0, 2.0, &mut rng);
        let params = MlpParams::init(mlp, &mut rng)?;
        let weights: Vec<Array2<f64>> = params.arrays().iter().map(|a| a.value.clone()).collect();

        let errs = [
            gradient_error(&[x.clone(), normal(BATCH, DATA, 1.0, &mut rng)], &|t, v| {
                recon_loss(t, v[0], v[1])
            })?,
            gradient_error(
                &[
                    normal(BATCH, LATENT, 1.0, &mut rng),
                    normal(BATCH, LATENT, 1.0, &mut rng),
                ],
                &|t, v| infonce_loss(t, v[0], v[1], 1.0),
            )?,
            gradient_error(&[mu.clone(), logvar.clone()], &|t, v| {
                entropy_term(
                    t,
                    &EncoderOutput {
                        mu: v[0],
                        logvar: v[1],
                    },
                )
            })?,
            gradient_error(&[normal(BATCH, LATENT, 1.0, &mut rng)], &|t, v| {
                cross_entropy_term(t, &normal_prior, v[0])
            })?,
            gradient_error(&[normal(BATCH, LATENT, 1.0, &mut rng)], &|t, v| {
                cross_entropy_term(t, &gmm_prior, v[0])
            })?,
            gradient_error(&[mu.clone(), logvar.clone()], &|t, v| {
                analytic_kl(
                    t,
                    &EncoderOutput {
                        mu: v[0],
                        logvar: v[1],
                    },
                )
            })?,
            gradient_error(&weights, &|t, v| {
                let net = BoundMlp::from_tensors(mlp, v.to_vec())?;
                let xt = t.constant(x.clone())?;
                let out = encode(t, &net, xt)?;
                let eps = t.constant(noise.clone())?;
                let z = reparameterize(t, &out, eps)?;
                let x_hat = decode(t, &net, z)?;
                let recon = recon_loss(t, xt, x_hat)?;
                let kl = analytic_kl(t, &out)?;
                vae_objective(t, recon, kl)
            })?,
            gradient_error(&weights, &|t, v| {
                edvae_graph(t, v, mlp, &x, &x_pos, &noise, &normal_prior)
            })?,
            gradient_error(&weights, &|t, v| {
                edvae_graph(t, v, mlp, &x, &x_pos, &noise, &gmm_prior)
            })?,
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    let elapsed = start.elapsed();
    let passed = worst.iter().all(|&e| e < GRAD_REL_TOL) && elapsed < GRAD_TIME_LIMIT;
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(CheckOutcome::new(
        "gradient correctness",
        passed,
        format!(
            "max rel. err over {instances} instances (< {GRAD_REL_TOL:e}): {detail}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn edvae_graph(
    t: &mut Tape,
    v: &[Tensor],
    mlp: MlpConfig,
    x: &Array2<f64>,
    x_pos: &Array2<f64>,
    noise: &Array2<f64>,
    prior: &Prior,
) -> Result<Tensor> {
    let net = BoundMlp::from_tensors(mlp, v.to_vec())?;
    let xt = t.constant(x.clone())?;
    let out = encode(t, &net, xt)?;
    let eps = t.constant(noise.clone())?;
    let z = reparameterize(t, &out, eps)?;
    let x_hat = decode(t, &net, z)?;
    let xp = t.constant(x_pos.clone())?;
    let pos = encode(t, &net, xp)?;
    let terms = EdVaeTerms {
        recon: recon_loss(t, xt, x_hat)?,
        infonce: infonce_loss(t, out.mu, pos.mu, 1.0)?,
        ent: entropy_term(t, &out)?,
        xent: cross_entropy_term(t, prior, z)?,
    };
    edvae_objective(t, &terms, TermWeights::default())
}

/// Standard-normal cross-entropy of `N(0, I)` samples against
/// `dim·(½ log 2π + ½)`.
pub fn cross_entropy_oracle(n: usize, seed: u64) -> Result<CheckOutcome> {
    const DIM: usize = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = normal(n, DIM, 1.0, &mut rng);
    let mut tape = Tape::new();
    let zt = tape.constant(z)?;
    let h = cross_entropy_term(&mut tape, &Prior::standard_normal(DIM), zt)?;
    let mc = tape.item(h);
    let closed = DIM as f64 * (0.5 * (2.0 * PI).ln() + 0.5);
    let rel = (mc - closed).abs() / closed;
    Ok(CheckOutcome::new(
        "cross-entropy oracle",
        rel < 0.01,
        format!("MC {mc:.4} vs closed form {closed:.4} (rel. err {rel:.2e}, limit 1%)"),
    ))
}

/// Closed-form KL equals closed-form cross-entropy minus the
/// constant-corrected entropy, on random diagonal Gaussians.
pub fn decomposition_identity(cases: usize, seed: u64) -> Result<CheckOutcome> {
    const DIM: usize = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mu = normal(1, DIM, 2.0, &mut rng);
        let logvar = uniform(1, DIM, -3.0, 3.0, &mut rng);
        let mut tape = Tape::new();
        let out = EncoderOutput {
            mu: tape.constant(mu.clone())?,
            logvar: tape.constant(logvar.clone())?,
        };
        let kl = analytic_kl(&mut tape, &out)?;
        let ent = entropy_term(&mut tape, &out)?;
        let kl = tape.item(kl);
        let entropy = tape.item(ent) + entropy_constant(DIM);
        let xent: f64 = mu
            .iter()
            .zip(logvar.iter())
            .map(|(m, lv)| 0.5 * ((2.0 * PI).ln() + lv.exp() + m * m))
            .sum();
        worst = worst.max((kl - (xent - entropy)).abs());
    }
    Ok(CheckOutcome::new(
        "KL decomposition identity",
        worst <= 1e-10,
        format!("max |KL − (xent − ent)| = {worst:.1e} over {cases} Gaussians (limit 1e-10)"),
    ))
}

/// InfoNCE is non-negative on random batches and equals log K when every
/// row is identical.
pub fn infonce_bound(batches: usize, seed: u64) -> Result<CheckOutcome> {
    const DIM: usize = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_loss = f64::INFINITY;
    for _ in 0..batches {
        let k = rng.random_range(2..=64);
        let scale = rng.random_range(0.1..3.0);
        let z = normal(k, DIM, scale, &mut rng);
        let z_pos = &z + &normal(k, DIM, rng.random_range(0.0..1.0), &mut rng);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(z)?, tape.constant(z_pos)?);
        let l = infonce_loss(&mut tape, a, b, 1.0)?;
        min_loss = min_loss.min(tape.item(l));
    }
    let mut worst_deg = 0.0f64;
    for k in [2usize, 3, 16, 512] {
        let row = normal(1, DIM, 1.0, &mut rng);
        let z = row
            .broadcast((k, DIM))
            .expect("1×dim broadcasts")
            .to_owned();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(z.clone())?, tape.constant(z)?);
        let l = infonce_loss(&mut tape, a, b, 1.0)?;
        worst_deg = worst_deg.max((tape.item(l) - (k as f64).ln()).abs());
    }
    Ok(CheckOutcome::new(
        "InfoNCE bound shape",
        min_loss >= 0.0 && worst_deg <= 1e-9,
        format!(
            "min loss over {batches} batches {min_loss:.3e} (≥ 0); identical rows |loss − log K| ≤ {worst_deg:.1e} (limit 1e-9)"
        ),
    ))
}

/// EM monotonicity, recovery of a known 1-d mixture and the one-component
/// closed form.
pub fn gmm_em(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let em = EmConfig::default();
    let mut monotone = true;

    let n = 10_000;
    let x = Array2::from_shape_simple_fn((n, 1), || {
        let m = if rng.random_bool(0.5) { -3.0 } else { 3.0 };
        Normal::new(m, 0.5).expect("valid").sample(&mut rng)
    });
    let fit = fit_gmm(&x, 2, &em, &mut rng)?;
    monotone &= fit.monotone;
    let g = &fit.prior;
    let mut comps: Vec<(f64, f64, f64)> = (0..2)
        .map(|c| (g.means()[c][0], g.variances()[c][0].sqrt(), g.weights()[c]))
        .collect();
    comps.sort_by(|a, b| a.0.total_cmp(&b.0));
    let recovery_err = comps
        .iter()
        .zip([-3.0, 3.0])
        .map(|(&(m, s, w), target)| (m - target).abs().max((s - 0.5).abs()).max((w - 0.5).abs()))
        .fold(0.0, f64::max);

    let y = normal(2_000, 3, 1.7, &mut rng) + 0.4;
    let one = fit_gmm(&y, 1, &em, &mut rng)?;
    monotone &= one.monotone;
    let mean = y.mean_axis(Axis(0)).expect("non-empty");
    let var = y.var_axis(Axis(0), 0.0);
    let moment_err = (0..3)
        .map(|d| {
            (one.prior.means()[0][d] - mean[d])
                .abs()
                .max((one.prior.variances()[0][d] - var[d]).abs())
        })
        .fold(0.0, f64::max);

    for k in 2..=4 {
        let z =
            data::gen_latent_complex(2_000, 2, &data::ComplexLatentConfig::default(), &mut rng)?;
        monotone &= fit_gmm(&z, k, &em, &mut rng)?.monotone;
    }

    Ok(CheckOutcome::new(
        "GMM/EM",
        monotone && recovery_err <= 0.1 && moment_err <= 1e-6,
        format!(
            "monotone log-likelihood: {monotone}; 2-component recovery max err {recovery_err:.3} (≤ 0.1); \
             1-component moment err {moment_err:.1e} (≤ 1e-6)"
        ),
    ))
}

/// `E[z + sin(πz/2)]` for `z ~ N(mean, sd²)` by composite Simpson quadrature.
pub fn modulated_mean_quadrature(mean: f64, sd: f64) -> f64 {
    let steps = 20_000;
    let (lo, hi) = (mean - 12.0 * sd, mean + 12.0 * sd);
    let h = (hi - lo) / steps as f64;
    let f = |z: f64| {
        let u = (z - mean) / sd;
        data::modulate(z) * (-0.5 * u * u).exp() / (sd * (2.0 * PI).sqrt())
    };
    let inner: f64 = (1..steps)
        .map(|i| f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    h / 3.0 * (f(lo) + f(hi) + inner)
}

/// Latent moments of both generators at `n` samples.
pub fn data_generators(n: usize, seed: u64) -> Result<CheckOutcome> {
    let cfg = GenConfig {
        n,
        seed,
        ..GenConfig::default()
    };
    let g = data::generate(DatasetKind::Gaussian, &cfg)?;
    let z = &g.z_true;
    let mean = z.mean_axis(Axis(0)).expect("non-empty");
    let max_mean = mean.iter().fold(0.0f64, |a, m| a.max(m.abs()));
    let centered = z - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let mut max_off = 0.0f64;
    for i in 0..cov.nrows() {
        for j in 0..cov.ncols() {
            if i != j {
                max_off = max_off.max(cov[[i, j]].abs());
            }
        }
    }

    let c = data::generate(DatasetKind::Complex, &cfg)?;
    let laws = data::ComplexLatentConfig::default();
    let col = c.z_true.column(0);
    let mc = col.mean().expect("non-empty");
    let se = col.std(1.0) / (n as f64).sqrt();
    let oracle = modulated_mean_quadrature(laws.means[0], laws.scales[0]);
    let z_score = (mc - oracle).abs() / se;

    Ok(CheckOutcome::new(
        "data generators",
        max_mean < 0.02 && max_off < 0.02 && z_score <= 3.0,
        format!(
            "gaussian latent max |mean| {max_mean:.4}, max |off-diag cov| {max_off:.4} (< 0.02); \
             complex dim-0 mean {mc:.4} vs quadrature {oracle:.4} ({z_score:.2} SE, ≤ 3)"
        ),
    ))
}

/// The oracle suites at their pinned sizes.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        gradient_checks(10, seed)?,
        cross_entropy_oracle(100_000, seed)?,
        decomposition_identity(50, seed)?,
        infonce_bound(100, seed)?,
        gmm_em(seed)?,
        data_generators(100_000, seed)?,
    ])
}
