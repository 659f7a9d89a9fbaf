//! Synthetic benchmark data.
//!
//! * Gaussian: `z ~ N(0, I)`, `x = zW + N(0, noise²)`, `x⁺ = x + N(0, radius²)`.
//! * Complex: latent dim `i < C` drawn from `N(μᵢ, σᵢ²)` with `μ = linspace(−3, 3, C)`,
//!   `σ = linspace(0.5, 1, C)`, then modulated as `z + sin(πz/2)`; dims past `C`
//!   are `N(0, 1)` fill. Observations and positives as above.
//!
//! `W ~ N(0, 1)` has shape `latent_dim × data_dim`. Noise and radius are
//! standard deviations.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "edv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Gaussian,
    Complex,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Gaussian => "gaussian",
            DatasetKind::Complex => "complex",
        })
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "dataset1" => Ok(DatasetKind::Gaussian),
            "complex" | "dataset2" => Ok(DatasetKind::Complex),
            other => Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n: usize,
    pub data_dim: usize,
    pub latent_dim: usize,
    pub radius: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n: 10_000,
            data_dim: 10,
            latent_dim: 5,
            radius: 0.1,
            noise_scale: 0.5,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.data_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config(format!(
                "n, data_dim and latent_dim must be ≥ 1 (got {}, {}, {})",
                self.n, self.data_dim, self.latent_dim
            )));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::Config(format!(
                "radius must be > 0, got {}",
                self.radius
            )));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::Config(format!(
                "noise_scale must be ≥ 0, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Per-dimension laws of the complex latent generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexLatentConfig {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub modulate: bool,
}

impl Default for ComplexLatentConfig {
    fn default() -> Self {
        ComplexLatentConfig {
            means: linspace(-3.0, 3.0, 3),
            scales: linspace(0.5, 1.0, 3),
            modulate: true,
        }
    }
}

pub fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![start],
        _ => {
            let step = (stop - start) / (n - 1) as f64;
            (0..n)
                .map(|i| {
                    if i == n - 1 {
                        stop
                    } else {
                        start + step * i as f64
                    }
                })
                .collect()
        }
    }
}

pub fn modulate(z: f64) -> f64 {
    z + (0.5 * std::f64::consts::PI * z).sin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: DatasetKind,
    pub seed: u64,
    pub n: usize,
    pub data_dim: usize,
    pub latent_dim: usize,
    pub radius: f64,
    pub noise_scale: f64,
    /// SHA-256 of `W` as little-endian row-major f64 bytes.
    pub w_checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub x: Array2<f64>,
    pub x_pos: Array2<f64>,
    pub z_true: Array2<f64>,
    pub w: Array2<f64>,
    pub meta: DatasetMeta,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn select_rows(&self, rows: &[usize]) -> SyntheticDataset {
        let mut meta = self.meta.clone();
        meta.n = rows.len();
        SyntheticDataset {
            x: self.x.select(Axis(0), rows),
            x_pos: self.x_pos.select(Axis(0), rows),
            z_true: self.z_true.select(Axis(0), rows),
            w: self.w.clone(),
            meta,
        }
    }
}

fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

pub fn checksum(a: &Array2<f64>) -> String {
    let mut h = Sha256::new();
    for v in a.iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn observe<R: Rng + ?Sized>(
    kind: DatasetKind,
    cfg: &GenConfig,
    w: Array2<f64>,
    z: Array2<f64>,
    rng: &mut R,
) -> SyntheticDataset {
    let noise = standard_normal(cfg.n, cfg.data_dim, rng);
    let x = z.dot(&w) + noise * cfg.noise_scale;
    let jitter = standard_normal(cfg.n, cfg.data_dim, rng);
    let x_pos = &x + &(jitter * cfg.radius);
    let meta = DatasetMeta {
        kind,
        seed: cfg.seed,
        n: cfg.n,
        data_dim: cfg.data_dim,
        latent_dim: cfg.latent_dim,
        radius: cfg.radius,
        noise_scale: cfg.noise_scale,
        w_checksum: checksum(&w),
    };
    SyntheticDataset {
        x,
        x_pos,
        z_true: z,
        w,
        meta,
    }
}

/// Gaussian-prior dataset. Draw order: `W`, then `z`, then noise, then jitter.
pub fn gen_dataset1<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let w = standard_normal(cfg.latent_dim, cfg.data_dim, rng);
    let z = standard_normal(cfg.n, cfg.latent_dim, rng);
    Ok(observe(DatasetKind::Gaussian, cfg, w, z, rng))
}

/// `n × latent_dim` draws from the modulated per-dimension mixture.
pub fn gen_latent_complex<R: Rng + ?Sized>(
    n: usize,
    latent_dim: usize,
    laws: &ComplexLatentConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if laws.means.len() != laws.scales.len() {
        return Err(Error::Config(
            "latent means and scales differ in length".into(),
        ));
    }
    if laws.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Config("latent scales must be positive".into()));
    }
    let comps = laws.means.len();
    Ok(Array2::from_shape_simple_fn((n, latent_dim), {
        let mut col = 0;
        move || {
            let j = col;
            col = (col + 1) % latent_dim;
            let e: f64 = StandardNormal.sample(rng);
            if j < comps {
                let z = laws.means[j] + laws.scales[j] * e;
                if laws.modulate {
                    modulate(z)
                } else {
                    z
                }
            } else {
                e
            }
        }
    }))
}

pub fn gen_dataset2<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> Result<SyntheticDataset> {
    gen_dataset2_with(cfg, &ComplexLatentConfig::default(), rng)
}

pub fn gen_dataset2_with<R: Rng + ?Sized>(
    cfg: &GenConfig,
    laws: &ComplexLatentConfig,
    rng: &mut R,
) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let w = standard_normal(cfg.latent_dim, cfg.data_dim, rng);
    let z = gen_latent_complex(cfg.n, cfg.latent_dim, laws, rng)?;
    Ok(observe(DatasetKind::Complex, cfg, w, z, rng))
}

/// Generate from `cfg.seed` alone.
pub fn generate(kind: DatasetKind, cfg: &GenConfig) -> Result<SyntheticDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match kind {
        DatasetKind::Gaussian => gen_dataset1(cfg, &mut rng),
        DatasetKind::Complex => gen_dataset2(cfg, &mut rng),
    }
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation of each column of `x`.
    pub fn fit(x: &Array2<f64>) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(Error::Config("normalization needs at least 2 rows".into()));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x.std_axis(Axis(0), 0.0);
        if let Some(j) = std.iter().position(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Config(format!("feature {j} has zero variance")));
        }
        Ok(Normalizer {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        let m = Array1::from(self.mean.clone());
        let s = Array1::from(self.std.clone());
        (x - &m) / &s
    }

    pub fn inverse(&self, x: &Array2<f64>) -> Array2<f64> {
        let m = Array1::from(self.mean.clone());
        let s = Array1::from(self.std.clone());
        x * &s + &m
    }

    /// Normalize observations and positives with the same affine map.
    pub fn apply(&self, ds: &SyntheticDataset) -> SyntheticDataset {
        SyntheticDataset {
            x: self.transform(&ds.x),
            x_pos: self.transform(&ds.x_pos),
            ..ds.clone()
        }
    }
}

/// Fit statistics on `ds` and return the normalized copy.
pub fn normalize(ds: &SyntheticDataset) -> Result<(SyntheticDataset, Normalizer)> {
    let norm = Normalizer::fit(&ds.x)?;
    Ok((norm.apply(ds), norm))
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: SyntheticDataset,
    pub val: SyntheticDataset,
    pub test: SyntheticDataset,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.15, 0.15];

/// Seeded shuffle, then contiguous train/val/test slices.
pub fn split(ds: &SyntheticDataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::Config(format!(
            "split fractions must be ≥ 0, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions sum to {total}, not 1"
        )));
    }
    let n = ds.len();
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    for (name, f, count) in [
        ("train", fractions[0], n_train),
        ("val", fractions[1], n_val),
        ("test", fractions[2], n_test),
    ] {
        if f > 0.0 && count == 0 {
            return Err(Error::Config(format!(
                "{name} split would be empty for n = {n}"
            )));
        }
    }
    if n_train == 0 {
        return Err(Error::Config("train split is empty".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Splits {
        train: ds.select_rows(&idx[..n_train]),
        val: ds.select_rows(&idx[n_train..n_train + n_val]),
        test: ds.select_rows(&idx[n_train + n_val..]),
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: DatasetMeta,
    arrays: Vec<ArrayHeader>,
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    rows: usize,
    cols: usize,
}

/// `dataset.edv`: one JSON header line, then each array as row-major
/// little-endian f64 in header order.
pub fn save(ds: &SyntheticDataset, path: &Path) -> Result<()> {
    let arrays = [
        ("x", &ds.x),
        ("x_pos", &ds.x_pos),
        ("z_true", &ds.z_true),
        ("w", &ds.w),
    ];
    let header = Header {
        format: MAGIC.into(),
        version: FORMAT_VERSION,
        meta: ds.meta.clone(),
        arrays: arrays
            .iter()
            .map(|(name, a)| ArrayHeader {
                name: (*name).into(),
                rows: a.nrows(),
                cols: a.ncols(),
            })
            .collect(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (_, a) in arrays {
        for v in a.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SyntheticDataset> {
    let fmt = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: Header =
        serde_json::from_str(line.trim_end()).map_err(|e| fmt(format!("bad header: {e}")))?;
    if header.format != MAGIC || header.version != FORMAT_VERSION {
        return Err(fmt(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let expected = ["x", "x_pos", "z_true", "w"];
    if header.arrays.len() != expected.len()
        || header.arrays.iter().zip(expected).any(|(a, e)| a.name != e)
    {
        return Err(fmt("array table must list x, x_pos, z_true, w".into()));
    }
    let mut arrays = Vec::with_capacity(4);
    for a in &header.arrays {
        let mut buf = vec![0u8; a.rows * a.cols * 8];
        reader
            .read_exact(&mut buf)
            .map_err(|e| fmt(format!("array `{}` truncated: {e}", a.name)))?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        arrays.push(
            Array2::from_shape_vec((a.rows, a.cols), values).map_err(|e| fmt(e.to_string()))?,
        );
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(fmt(format!("{} trailing bytes", rest.len())));
    }
    let w = arrays.pop().expect("w");
    let z_true = arrays.pop().expect("z_true");
    let x_pos = arrays.pop().expect("x_pos");
    let x = arrays.pop().expect("x");
    let m = &header.meta;
    let n = m.n;
    if x.dim() != (n, m.data_dim)
        || x_pos.dim() != x.dim()
        || z_true.dim() != (n, m.latent_dim)
        || w.dim() != (m.latent_dim, m.data_dim)
    {
        return Err(fmt("array shapes disagree with metadata".into()));
    }
    if checksum(&w) != m.w_checksum {
        return Err(fmt("W checksum mismatch".into()));
    }
    Ok(SyntheticDataset {
        x,
        x_pos,
        z_true,
        w,
        meta: header.meta,
    })
}

/// Flat CSV with columns `x0.., xpos0.., z0..` for inspection.
pub fn export_csv(ds: &SyntheticDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..ds.x.ncols())
        .map(|j| format!("x{j}"))
        .chain((0..ds.x_pos.ncols()).map(|j| format!("xpos{j}")))
        .chain((0..ds.z_true.ncols()).map(|j| format!("z{j}")))
        .collect();
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let row: Vec<String> =
            ds.x.row(i)
                .iter()
                .chain(ds.x_pos.row(i).iter())
                .chain(ds.z_true.row(i).iter())
                .map(|v| v.to_string())
                .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Summary statistics printed by `gen-data`.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub kind: DatasetKind,
    pub n: usize,
    pub data_dim: usize,
    pub latent_dim: usize,
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub positive_offset_std: f64,
    pub w_checksum: String,
}

pub fn summarize(ds: &SyntheticDataset) -> DatasetSummary {
    let col = |a: &Array2<f64>| {
        (
            a.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default(),
            a.std_axis(Axis(0), 0.0).to_vec(),
        )
    };
    let (latent_mean, latent_std) = col(&ds.z_true);
    let (x_mean, x_std) = col(&ds.x);
    let diff = &ds.x_pos - &ds.x;
    DatasetSummary {
        kind: ds.meta.kind,
        n: ds.len(),
        data_dim: ds.meta.data_dim,
        latent_dim: ds.meta.latent_dim,
        latent_mean,
        latent_std,
        x_mean,
        x_std,
        positive_offset_std: diff.std(0.0),
        w_checksum: ds.meta.w_checksum.clone(),
    }
}
