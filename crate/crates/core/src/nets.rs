//! MLP encoder/decoder, Gaussian reparameterization and Adam.
//!
//! Encoder: `x → linear(hidden) → relu → {linear(latent) for μ, linear(latent) for log σ²}`.
//! Decoder: `z → linear(hidden) → relu → linear(data_dim)`, no output activation.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 5;
pub const HIDDEN_DIM: usize = 400;

/// log σ² is clamped to this band before anything exponentiates it.
pub const LOGVAR_CLAMP: (f64, f64) = (-10.0, 10.0);

const CHECKPOINT_VERSION: u32 = 1;

const PARAM_NAMES: [&str; 10] = [
    "encoder.hidden.weight",
    "encoder.hidden.bias",
    "encoder.mu.weight",
    "encoder.mu.bias",
    "encoder.logvar.weight",
    "encoder.logvar.bias",
    "decoder.hidden.weight",
    "decoder.hidden.bias",
    "decoder.out.weight",
    "decoder.out.bias",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
}

impl MlpConfig {
    pub fn new(data_dim: usize) -> Self {
        MlpConfig {
            data_dim,
            latent_dim: LATENT_DIM,
            hidden: HIDDEN_DIM,
        }
    }

    fn shapes(&self) -> [(usize, usize); 10] {
        let (d, h, l) = (self.data_dim, self.hidden, self.latent_dim);
        [
            (d, h),
            (1, h),
            (h, l),
            (1, l),
            (h, l),
            (1, l),
            (l, h),
            (1, h),
            (h, d),
            (1, d),
        ]
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (d, h, l) = (self.data_dim, self.hidden, self.latent_dim);
        (d * h + h) + 2 * (h * l + l) + (l * h + h) + (h * d + d)
    }

    fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "all layer sizes must be ≥ 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub value: Array2<f64>,
}

/// Encoder and decoder weights. Biases are stored as `1×n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    config: MlpConfig,
    arrays: Vec<NamedArray>,
}

impl MlpParams {
    /// Uniform ±sqrt(6 / (fan_in + fan_out)) weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let arrays = PARAM_NAMES
            .iter()
            .zip(config.shapes())
            .map(|(name, (r, c))| {
                let value = if r == 1 {
                    Array2::zeros((r, c))
                } else {
                    let bound = (6.0 / (r + c) as f64).sqrt();
                    Array2::from_shape_simple_fn((r, c), || rng.random_range(-bound..bound))
                };
                NamedArray {
                    name: (*name).to_string(),
                    value,
                }
            })
            .collect();
        Ok(MlpParams { config, arrays })
    }

    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let arrays = PARAM_NAMES
            .iter()
            .zip(config.shapes())
            .map(|(name, shape)| NamedArray {
                name: (*name).to_string(),
                value: Array2::zeros(shape),
            })
            .collect();
        Ok(MlpParams { config, arrays })
    }

    pub fn config(&self) -> MlpConfig {
        self.config
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [NamedArray] {
        &mut self.arrays
    }

    pub fn param_count(&self) -> usize {
        self.arrays.iter().map(|a| a.value.len()).sum()
    }

    /// Register every array on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundMlp> {
        let tensors = self
            .arrays
            .iter()
            .map(|a| tape.param(a.value.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundMlp {
            config: self.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config,
            params: self
                .arrays
                .iter()
                .map(|a| StoredArray {
                    name: a.name.clone(),
                    rows: a.value.nrows(),
                    cols: a.value.ncols(),
                    values: a.value.iter().copied().collect(),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    /// Load a checkpoint and validate every array against `expected`.
    pub fn load(path: &Path, expected: MlpConfig) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(fmt(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        if ckpt.config != expected {
            return Err(fmt(format!(
                "checkpoint config {:?} does not match {:?}",
                ckpt.config, expected
            )));
        }
        if ckpt.params.len() != PARAM_NAMES.len() {
            return Err(fmt(format!("expected {} arrays", PARAM_NAMES.len())));
        }
        let mut arrays = Vec::with_capacity(PARAM_NAMES.len());
        for ((stored, name), shape) in ckpt
            .params
            .into_iter()
            .zip(PARAM_NAMES)
            .zip(expected.shapes())
        {
            if stored.name != name || (stored.rows, stored.cols) != shape {
                return Err(fmt(format!(
                    "array `{}` {}×{} where `{name}` {}×{} was expected",
                    stored.name, stored.rows, stored.cols, shape.0, shape.1
                )));
            }
            let value = Array2::from_shape_vec(shape, stored.values)
                .map_err(|e| fmt(format!("array `{name}`: {e}")))?;
            if !value.iter().all(|v| v.is_finite()) {
                return Err(fmt(format!("array `{name}` holds non-finite values")));
            }
            arrays.push(NamedArray {
                name: name.to_string(),
                value,
            });
        }
        Ok(MlpParams {
            config: expected,
            arrays,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: MlpConfig,
    params: Vec<StoredArray>,
}

#[derive(Serialize, Deserialize)]
struct StoredArray {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// Parameters registered on a tape, in the same order as [`MlpParams::arrays`].
pub struct BoundMlp {
    config: MlpConfig,
    tensors: Vec<Tensor>,
}

impl BoundMlp {
    /// Wrap tensors already on a tape, e.g. leaves created from perturbed copies
    /// of the parameter arrays. Order and shapes must match [`MlpParams::arrays`].
    pub fn from_tensors(config: MlpConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                PARAM_NAMES.len(),
                tensors.len()
            )));
        }
        for ((t, shape), name) in tensors.iter().zip(config.shapes()).zip(PARAM_NAMES) {
            if t.shape() != shape {
                return Err(Error::dim(
                    "bind",
                    format!("`{name}` is {:?}, expected {shape:?}", t.shape()),
                ));
            }
        }
        Ok(BoundMlp { config, tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Gradients after a completed backward pass, aligned with the parameter arrays.
    pub fn grads(&self, tape: &Tape) -> Vec<Array2<f64>> {
        self.tensors.iter().map(|&t| tape.grad(t)).collect()
    }
}

/// Mean and clamped log-variance of q(z|x).
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub mu: Tensor,
    pub logvar: Tensor,
}

fn linear(tape: &mut Tape, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
    let xw = tape.matmul(x, w)?;
    let bias = tape.repeat_rows(b, x.shape().0)?;
    tape.add(xw, bias)
}

pub fn encode(tape: &mut Tape, net: &BoundMlp, x: Tensor) -> Result<EncoderOutput> {
    if x.shape().1 != net.config.data_dim {
        return Err(Error::dim(
            "encode",
            format!(
                "input has {} columns, model expects {}",
                x.shape().1,
                net.config.data_dim
            ),
        ));
    }
    let p = &net.tensors;
    let pre = linear(tape, x, p[0], p[1])?;
    let h = tape.relu(pre)?;
    let mu = linear(tape, h, p[2], p[3])?;
    let raw = linear(tape, h, p[4], p[5])?;
    let logvar = tape.clamp(raw, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1)?;
    Ok(EncoderOutput { mu, logvar })
}

/// `z = μ + exp(½ log σ²) ⊙ noise`; `noise` is a constant so no gradient reaches it.
pub fn reparameterize(tape: &mut Tape, out: &EncoderOutput, noise: Tensor) -> Result<Tensor> {
    if noise.shape() != out.mu.shape() || out.logvar.shape() != out.mu.shape() {
        return Err(Error::dim(
            "reparameterize",
            format!(
                "mu {:?}, logvar {:?}, noise {:?}",
                out.mu.shape(),
                out.logvar.shape(),
                noise.shape()
            ),
        ));
    }
    let half = tape.scale(out.logvar, 0.5)?;
    let std = tape.exp(half)?;
    let scaled = tape.mul(std, noise)?;
    tape.add(out.mu, scaled)
}

pub fn decode(tape: &mut Tape, net: &BoundMlp, z: Tensor) -> Result<Tensor> {
    if z.shape().1 != net.config.latent_dim {
        return Err(Error::dim(
            "decode",
            format!(
                "latent has {} columns, model expects {}",
                z.shape().1,
                net.config.latent_dim
            ),
        ));
    }
    let p = &net.tensors;
    let pre = linear(tape, z, p[6], p[7])?;
    let h = tape.relu(pre)?;
    linear(tape, h, p[8], p[9])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(params: &[NamedArray], config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Array2::zeros(p.value.dim()))
                .collect()
        };
        AdamState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Gradients are zeroed afterwards.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [NamedArray], grads: &mut [Array2<f64>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam tracks {} parameters, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads.iter()) {
            if g.dim() != p.value.dim() {
                return Err(Error::dim(
                    "adam_step",
                    format!("gradient for `{}` has shape {:?}", p.name, g.dim()),
                ));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Optimizer {
                    param: p.name.clone(),
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads.iter_mut())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            ndarray::Zip::from(&mut p.value)
                .and(&*g)
                .and(m)
                .and(v)
                .for_each(|w, &gi, mi, vi| {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                });
            g.fill(0.0);
        }
        Ok(())
    }
}
