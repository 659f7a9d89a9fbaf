//! Latent priors p(z): the analytic standard normal and a diagonal Gaussian
//! mixture fitted by EM.

use std::f64::consts::PI;
use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, Tape, Tensor};
use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
const WEIGHT_SUM_TOL: f64 = 1e-9;
const DEGENERATE_WEIGHT: f64 = 1e-8;

fn log_2pi() -> f64 {
    (2.0 * PI).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandardNormalPrior {
    pub dim: usize,
}

/// Mixture of axis-aligned Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPrior {
    #[serde(rename = "K")]
    k: usize,
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    StandardNormal(StandardNormalPrior),
    Gmm(GmmPrior),
}

impl Prior {
    pub fn standard_normal(dim: usize) -> Self {
        Prior::StandardNormal(StandardNormalPrior { dim })
    }

    pub fn dim(&self) -> usize {
        match self {
            Prior::StandardNormal(p) => p.dim,
            Prior::Gmm(g) => g.dim,
        }
    }

    pub fn is_standard_normal(&self) -> bool {
        matches!(self, Prior::StandardNormal(_))
    }

    fn check_dim(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(Error::dim(
                "log_density",
                format!("z has {cols} columns, prior has dimension {}", self.dim()),
            ));
        }
        Ok(())
    }

    /// Per-row log p(z) recorded on `tape`, shape `batch×1`.
    pub fn log_density(&self, tape: &mut Tape, z: Tensor) -> Result<Tensor> {
        self.check_dim(z.shape().1)?;
        match self {
            Prior::StandardNormal(p) => {
                let sq = tape.square(z)?;
                let rs = tape.row_sum(sq)?;
                let half = tape.scale(rs, -0.5)?;
                tape.add_const(half, -0.5 * p.dim as f64 * log_2pi())
            }
            Prior::Gmm(g) => {
                let tables = g.quadratic_tables();
                let batch = z.shape().0;
                let quad = tape.constant(tables.quad)?;
                let lin = tape.constant(tables.lin)?;
                let offset = tape.constant(tables.offset)?;
                let sq = tape.square(z)?;
                let a = tape.matmul(sq, quad)?;
                let b = tape.matmul(z, lin)?;
                let ab = tape.add(a, b)?;
                let off = tape.repeat_rows(offset, batch)?;
                let per_component = tape.add(ab, off)?;
                tape.row_logsumexp(per_component)
            }
        }
    }

    /// Per-row log p(z) on plain arrays.
    pub fn log_density_values(&self, z: &Array2<f64>) -> Result<Array1<f64>> {
        self.check_dim(z.ncols())?;
        Ok(match self {
            Prior::StandardNormal(p) => {
                let c = -0.5 * p.dim as f64 * log_2pi();
                z.map_axis(Axis(1), |row| c - 0.5 * row.dot(&row))
            }
            Prior::Gmm(g) => {
                let lc = g.component_log_densities(z);
                lc.map_axis(Axis(1), |row| logsumexp(row.iter().copied()))
            }
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::Contract("sample count must be ≥ 1".into()));
        }
        match self {
            Prior::StandardNormal(p) => Ok(Array2::from_shape_simple_fn((n, p.dim), || {
                StandardNormal.sample(rng)
            })),
            Prior::Gmm(g) => g.sample(n, rng),
        }
    }
}

/// Coefficients so that component log-densities are `z²·quad + z·lin + offset`.
struct QuadraticTables {
    quad: Array2<f64>,
    lin: Array2<f64>,
    offset: Array2<f64>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        let dim = means.first().map_or(0, Vec::len);
        let g = GmmPrior {
            k,
            dim,
            weights,
            means,
            variances,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("invalid GMM: {m}")));
        if self.k == 0 || self.dim == 0 {
            return bad("K and dim must be ≥ 1".into());
        }
        if self.weights.len() != self.k
            || self.means.len() != self.k
            || self.variances.len() != self.k
        {
            return bad(format!("expected {} weights, means and variances", self.k));
        }
        if self
            .means
            .iter()
            .chain(&self.variances)
            .any(|r| r.len() != self.dim)
        {
            return bad(format!(
                "every mean/variance row must have {} entries",
                self.dim
            ));
        }
        if self.weights.iter().any(|&w| !(w.is_finite() && w >= 0.0)) {
            return bad("weights must be finite and non-negative".into());
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return bad(format!("weights sum to {total}"));
        }
        if self.means.iter().flatten().any(|m| !m.is_finite()) {
            return bad("means must be finite".into());
        }
        if self
            .variances
            .iter()
            .flatten()
            .any(|&v| !(v.is_finite() && v >= VARIANCE_FLOOR))
        {
            return bad(format!("variances must be finite and ≥ {VARIANCE_FLOOR}"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    fn quadratic_tables(&self) -> QuadraticTables {
        let (k, d) = (self.k, self.dim);
        let quad = Array2::from_shape_fn((d, k), |(j, c)| -0.5 / self.variances[c][j]);
        let lin = Array2::from_shape_fn((d, k), |(j, c)| self.means[c][j] / self.variances[c][j]);
        let offset = Array2::from_shape_fn((1, k), |(_, c)| {
            let tail: f64 = (0..d)
                .map(|j| {
                    let (m, v) = (self.means[c][j], self.variances[c][j]);
                    (log_2pi() + v.ln()) + m * m / v
                })
                .sum();
            self.weights[c].ln() - 0.5 * tail
        });
        QuadraticTables { quad, lin, offset }
    }

    /// `n×K` matrix of `log w_k + log N(z_i; μ_k, diag σ²_k)`.
    fn component_log_densities(&self, z: &Array2<f64>) -> Array2<f64> {
        let t = self.quadratic_tables();
        let sq = z.mapv(|v| v * v);
        let mut out = sq.dot(&t.quad) + z.dot(&t.lin);
        out += &t.offset;
        out
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        let pick = WeightedIndex::new(&self.weights)
            .map_err(|e| Error::Config(format!("invalid GMM weights: {e}")))?;
        let mut out = Array2::zeros((n, self.dim));
        for mut row in out.rows_mut() {
            let c = pick.sample(rng);
            for (j, v) in row.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(rng);
                *v = self.means[c][j] + self.variances[c][j].sqrt() * e;
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: GmmPrior = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub n_init: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tol: 1e-6,
            max_iter: 500,
            n_init: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub prior: GmmPrior,
    /// Mean per-sample log-likelihood at every E-step of the winning restart.
    pub trace: Vec<f64>,
    /// Final mean log-likelihood of each restart.
    pub restart_scores: Vec<f64>,
    /// Iterations where a component was re-seeded, across all restarts.
    pub reseeds: usize,
    /// True when every restart's trace was non-decreasing (within 1e-9)
    /// outside iterations that followed a re-seed.
    pub monotone: bool,
}

/// Fit a diagonal GMM by EM with `n_init` restarts, keeping the best final
/// mean log-likelihood.
pub fn fit_gmm<R: Rng + ?Sized>(
    samples: &Array2<f64>,
    k: usize,
    config: &EmConfig,
    rng: &mut R,
) -> Result<GmmFit> {
    let (n, d) = samples.dim();
    if k == 0 {
        return Err(Error::Config("K must be ≥ 1".into()));
    }
    if k > n {
        return Err(Error::Config(format!(
            "K = {k} exceeds the {n} available samples"
        )));
    }
    if n < 10 * k {
        return Err(Error::Config(format!(
            "need at least 10·K = {} samples, got {n}",
            10 * k
        )));
    }
    if d == 0 || !samples.iter().all(|v| v.is_finite()) {
        return Err(Error::Config(
            "samples must be finite with ≥ 1 column".into(),
        ));
    }
    if config.n_init == 0 || config.max_iter == 0 {
        return Err(Error::Config("n_init and max_iter must be ≥ 1".into()));
    }

    let global_var = column_variance(samples);
    let mut best: Option<(GmmPrior, Vec<f64>)> = None;
    let mut restart_scores = Vec::with_capacity(config.n_init);
    let mut reseeds = 0;
    let mut monotone = true;
    for _ in 0..config.n_init {
        let run = em_run(samples, k, config, &global_var, rng)?;
        reseeds += run.reseeds;
        monotone &= run.monotone;
        let score = *run.trace.last().expect("at least one E-step");
        restart_scores.push(score);
        let better = best
            .as_ref()
            .is_none_or(|(_, t)| score > *t.last().expect("non-empty"));
        if better {
            best = Some((run.prior, run.trace));
        }
    }
    let (prior, trace) = best.expect("n_init ≥ 1");
    Ok(GmmFit {
        prior,
        trace,
        restart_scores,
        reseeds,
        monotone,
    })
}

struct EmRun {
    prior: GmmPrior,
    trace: Vec<f64>,
    reseeds: usize,
    monotone: bool,
}

fn em_run<R: Rng + ?Sized>(
    x: &Array2<f64>,
    k: usize,
    config: &EmConfig,
    global_var: &[f64],
    rng: &mut R,
) -> Result<EmRun> {
    let (n, d) = x.dim();
    let mut g = GmmPrior {
        k,
        dim: d,
        weights: vec![1.0 / k as f64; k],
        means: seed_means(x, k, rng),
        variances: vec![global_var.to_vec(); k],
    };
    let sq = x.mapv(|v| v * v);
    let mut trace: Vec<f64> = Vec::new();
    let mut reseeds = 0;
    let mut monotone = true;
    let mut reseeded_last = false;

    for _ in 0..config.max_iter {
        // E-step
        let mut log_resp = g.component_log_densities(x);
        let mut total = 0.0;
        for mut row in log_resp.rows_mut() {
            let lse = logsumexp(row.iter().copied());
            total += lse;
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let resp = log_resp;
        let ll = total / n as f64;
        if !ll.is_finite() {
            return Err(Error::Contract(
                "EM produced a non-finite log-likelihood".into(),
            ));
        }
        if let Some(&prev) = trace.last() {
            if !reseeded_last && ll < prev - 1e-9 {
                monotone = false;
            }
            trace.push(ll);
            if !reseeded_last && ll - prev < config.tol {
                break;
            }
        } else {
            trace.push(ll);
        }

        // M-step
        let nk = resp.sum_axis(Axis(0));
        let sum_x = resp.t().dot(x);
        let sum_sq = resp.t().dot(&sq);
        reseeded_last = false;
        for c in 0..k {
            if nk[c] / (n as f64) < DEGENERATE_WEIGHT {
                let i = rng.random_range(0..n);
                warn!(
                    "EM: component {c} collapsed (weight {:.3e}); re-seeding from sample {i}",
                    nk[c] / n as f64
                );
                g.means[c] = x.row(i).to_vec();
                g.variances[c] = global_var.to_vec();
                g.weights[c] = 1.0 / k as f64;
                reseeds += 1;
                reseeded_last = true;
                continue;
            }
            g.weights[c] = nk[c] / n as f64;
            for j in 0..d {
                let m = sum_x[[c, j]] / nk[c];
                let v = sum_sq[[c, j]] / nk[c] - m * m;
                g.means[c][j] = m;
                g.variances[c][j] = v.max(VARIANCE_FLOOR);
            }
        }
        let total_w: f64 = g.weights.iter().sum();
        g.weights.iter_mut().for_each(|w| *w /= total_w);
    }
    Ok(EmRun {
        prior: g,
        trace,
        reseeds,
        monotone,
    })
}

/// D²-weighted (k-means++) choice of initial means.
fn seed_means<R: Rng + ?Sized>(x: &Array2<f64>, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = x.nrows();
    let mut means = vec![x.row(rng.random_range(0..n)).to_vec()];
    let dist2 =
        |i: usize, m: &[f64]| -> f64 { x.row(i).iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum() };
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(i, &means[0])).collect();
    while means.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let m = x.row(next).to_vec();
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(dist2(i, &m));
        }
        means.push(m);
    }
    means
}

fn column_variance(x: &Array2<f64>) -> Vec<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let n = x.nrows() as f64;
    (0..x.ncols())
        .map(|j| {
            let v = x
                .column(j)
                .iter()
                .map(|v| (v - mean[j]).powi(2))
                .sum::<f64>()
                / n;
            v.max(VARIANCE_FLOOR)
        })
        .collect()
}
