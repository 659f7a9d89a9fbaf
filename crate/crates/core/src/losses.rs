//! ELBO terms and the two training objectives.
//!
//! Baseline: `recon + KL(q(z|x) ‖ N(0, I))`.
//! Entropy-decomposed: `recon − λ_MI·L_InfoNCE + λ_reg·(−L_Ent + L_XEnt)`;
//! with both coefficients at 1 this is exactly
//! `L_recon − L_InfoNCE − L_Ent + L_XEnt`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nets::EncoderOutput;
use crate::priors::Prior;

/// Per-batch loss terms in nats (recon is squared error summed over features).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub infonce: Option<f64>,
    pub ent: f64,
    pub xent: f64,
    pub kl_analytic: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// `xent − ent − ½·dim·log 2π`: the entropy term with the Gaussian
    /// normalising constant restored, so the difference estimates a KL.
    pub fn kl_estimate(&self, latent_dim: usize) -> f64 {
        self.xent - (self.ent + entropy_constant(latent_dim))
    }
}

/// `½·dim·log 2π`, the part of the Gaussian entropy the training entropy term omits.
pub fn entropy_constant(latent_dim: usize) -> f64 {
    0.5 * latent_dim as f64 * (2.0 * PI).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub lambda_mi: f64,
    pub lambda_reg: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights {
            lambda_mi: 1.0,
            lambda_reg: 1.0,
        }
    }
}

/// Mean over rows of `‖x − x̂‖²`.
pub fn recon_loss(tape: &mut Tape, x: Tensor, x_hat: Tensor) -> Result<Tensor> {
    if x.shape() != x_hat.shape() {
        return Err(Error::dim(
            "recon_loss",
            format!("x {:?} vs x̂ {:?}", x.shape(), x_hat.shape()),
        ));
    }
    let diff = tape.sub(x, x_hat)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / x.shape().0 as f64)
}

/// Mean over rows of `−log softmax_k(zᵢ·z⁺ₖ / τ)` evaluated at `k = i`.
pub fn infonce_loss(tape: &mut Tape, z: Tensor, z_pos: Tensor, temperature: f64) -> Result<Tensor> {
    if z.shape() != z_pos.shape() {
        return Err(Error::dim(
            "infonce_loss",
            format!("anchors {:?} vs positives {:?}", z.shape(), z_pos.shape()),
        ));
    }
    let k = z.shape().0;
    if k < 2 {
        return Err(Error::Contract(format!(
            "InfoNCE needs K ≥ 2 rows, got {k}"
        )));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let pos_t = tape.transpose(z_pos)?;
    let sim = tape.matmul(z, pos_t)?;
    let sim = tape.scale(sim, 1.0 / temperature)?;
    let lse = tape.row_logsumexp(sim)?;
    let prod = tape.mul(z, z_pos)?;
    let diag = tape.row_sum(prod)?;
    let diag = tape.scale(diag, 1.0 / temperature)?;
    let per_row = tape.sub(lse, diag)?;
    tape.mean(per_row)
}

/// Batch mean of `½ Σ_d (1 + log σ²_d)`.
pub fn entropy_term(tape: &mut Tape, out: &EncoderOutput) -> Result<Tensor> {
    let (batch, dim) = out.logvar.shape();
    let s = tape.sum(out.logvar)?;
    let s = tape.scale(s, 0.5 / batch as f64)?;
    tape.add_const(s, 0.5 * dim as f64)
}

/// Batch mean of `−log p(z)`: a Monte-Carlo cross-entropy estimate.
pub fn cross_entropy_term(tape: &mut Tape, prior: &Prior, z: Tensor) -> Result<Tensor> {
    let lp = prior.log_density(tape, z)?;
    let m = tape.mean(lp)?;
    tape.neg(m)
}

/// Batch mean of `½ Σ_d (σ² + μ² − 1 − log σ²)`.
pub fn analytic_kl(tape: &mut Tape, out: &EncoderOutput) -> Result<Tensor> {
    let (batch, dim) = out.mu.shape();
    let var = tape.exp(out.logvar)?;
    let mu2 = tape.square(out.mu)?;
    let a = tape.add(var, mu2)?;
    let b = tape.sub(a, out.logvar)?;
    let s = tape.sum(b)?;
    let s = tape.add_const(s, -((batch * dim) as f64))?;
    tape.scale(s, 0.5 / batch as f64)
}

/// Handles to the already-recorded terms of one batch.
#[derive(Debug, Clone, Copy)]
pub struct EdVaeTerms {
    pub recon: Tensor,
    pub infonce: Tensor,
    pub ent: Tensor,
    pub xent: Tensor,
}

pub fn edvae_objective(
    tape: &mut Tape,
    terms: &EdVaeTerms,
    weights: TermWeights,
) -> Result<Tensor> {
    let mi = tape.scale(terms.infonce, -weights.lambda_mi)?;
    let reg = tape.sub(terms.xent, terms.ent)?;
    let reg = tape.scale(reg, weights.lambda_reg)?;
    let t = tape.add(terms.recon, mi)?;
    tape.add(t, reg)
}

/// Plain-number version of [`edvae_objective`], used to check that a
/// breakdown's total is consistent with its parts.
pub fn edvae_total(recon: f64, infonce: f64, ent: f64, xent: f64, weights: TermWeights) -> f64 {
    recon + (-weights.lambda_mi * infonce) + weights.lambda_reg * (xent - ent)
}

pub fn vae_objective(tape: &mut Tape, recon: Tensor, kl: Tensor) -> Result<Tensor> {
    tape.add(recon, kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn recon_loss_hand_values() {
        let mut tape = Tape::new();
        let x = tape
            .constant(array![[1.0, 2.0, 3.0], [0.0, -1.0, 4.0]])
            .unwrap();
        let zero = recon_loss(&mut tape, x, x).unwrap();
        assert_eq!(tape.item(zero), 0.0);
        let shifted = tape.add_const(x, -1.0).unwrap();
        let l = recon_loss(&mut tape, x, shifted).unwrap();
        assert_eq!(tape.item(l), 3.0);
        let bad = tape.constant(Array2::zeros((2, 2))).unwrap();
        assert!(recon_loss(&mut tape, x, bad).is_err());
    }

    #[test]
    fn recon_loss_gradient_is_two_residual_over_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));
        let xh0 = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone()).unwrap();
        let xh = tape.param(xh0.clone()).unwrap();
        let l = recon_loss(&mut tape, x, xh).unwrap();
        tape.backward(l).unwrap();
        let expect = (&xh0 - &x0) * 2.0 / 4.0;
        let g = tape.grad(xh);
        assert!(g
            .iter()
            .zip(expect.iter())
            .all(|(a, b)| close(*a, *b, 1e-14)));
        let h = 1e-6;
        let f = |v: &Array2<f64>| (&x0 - v).mapv(|d| d * d).sum() / 4.0;
        for idx in 0..12 {
            let mut p = xh0.clone();
            let mut m = xh0.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let num = (f(&p) - f(&m)) / (2.0 * h);
            assert!(close(num, g.as_slice().unwrap()[idx], 1e-8));
        }
    }

    #[test]
    fn infonce_degenerate_rows_give_log_k() {
        for k in [2usize, 5, 64] {
            let mut tape = Tape::new();
            let z = tape.constant(Array2::from_elem((k, 5), 0.3)).unwrap();
            let l = infonce_loss(&mut tape, z, z, 1.0).unwrap();
            assert!(close(tape.item(l), (k as f64).ln(), 1e-12));
        }
    }

    #[test]
    fn infonce_two_by_two_direct_softmax() {
        // z·z⁺ᵀ = [[10, 0], [0, 10]]
        let s10 = 10f64.sqrt();
        let mut tape = Tape::new();
        let z = tape.constant(array![[s10, 0.0], [0.0, s10]]).unwrap();
        let l = infonce_loss(&mut tape, z, z, 1.0).unwrap();
        let expect = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
        assert!(close(tape.item(l), expect, 1e-15));
        assert!(close(tape.item(l), 4.54e-5, 1e-7));
    }

    #[test]
    fn infonce_rejects_single_row_and_bad_temperature() {
        let mut tape = Tape::new();
        let z = tape.constant(Array2::ones((1, 5))).unwrap();
        assert!(matches!(
            infonce_loss(&mut tape, z, z, 1.0),
            Err(Error::Contract(_))
        ));
        let z2 = tape.constant(Array2::ones((3, 5))).unwrap();
        assert!(infonce_loss(&mut tape, z2, z2, 0.0).is_err());
    }

    #[test]
    fn entropy_term_hand_values() {
        let mut tape = Tape::new();
        let mu = tape.constant(Array2::zeros((3, 5))).unwrap();
        let lv = tape.param(Array2::zeros((3, 5))).unwrap();
        let out = EncoderOutput { mu, logvar: lv };
        let e = entropy_term(&mut tape, &out).unwrap();
        assert!(close(tape.item(e), 2.5, 1e-15));
        tape.backward(e).unwrap();
        assert!(tape.grad(lv).iter().all(|&g| close(g, 0.5 / 3.0, 1e-15)));

        let mut tape = Tape::new();
        let mu = tape.constant(Array2::zeros((2, 5))).unwrap();
        let lv = tape
            .constant(Array2::from_elem((2, 5), (2f64).exp().ln()))
            .unwrap();
        let e = entropy_term(&mut tape, &EncoderOutput { mu, logvar: lv }).unwrap();
        assert!(close(tape.item(e), 7.5, 1e-12));
    }

    #[test]
    fn cross_entropy_standard_normal_values() {
        let p = Prior::standard_normal(5);
        let mut tape = Tape::new();
        let z = tape.constant(Array2::zeros((1, 5))).unwrap();
        let x = cross_entropy_term(&mut tape, &p, z).unwrap();
        assert!(close(tape.item(x), 2.5 * (2.0 * PI).ln(), 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zs = Array2::from_shape_simple_fn((100_000, 5), || StandardNormal.sample(&mut rng));
        let mut tape = Tape::new();
        let z = tape.constant(zs.clone()).unwrap();
        let x = cross_entropy_term(&mut tape, &p, z).unwrap();
        let target = 5.0 * (0.5 * (2.0 * PI).ln() + 0.5);
        assert!(((tape.item(x) - target) / target).abs() < 0.01);

        let unit = Prior::Gmm(
            crate::priors::GmmPrior::new(vec![1.0], vec![vec![0.0; 5]], vec![vec![1.0; 5]])
                .unwrap(),
        );
        let z = zs.slice(ndarray::s![..50, ..]).to_owned();
        let a = {
            let mut t = Tape::new();
            let zt = t.constant(z.clone()).unwrap();
            let v = cross_entropy_term(&mut t, &p, zt).unwrap();
            t.item(v)
        };
        let b = {
            let mut t = Tape::new();
            let zt = t.constant(z).unwrap();
            let v = cross_entropy_term(&mut t, &unit, zt).unwrap();
            t.item(v)
        };
        assert!(close(a, b, 1e-9));
    }

    #[test]
    fn analytic_kl_hand_values_and_non_negativity() {
        let mut tape = Tape::new();
        let mu = tape.constant(Array2::zeros((2, 5))).unwrap();
        let lv = tape.constant(Array2::zeros((2, 5))).unwrap();
        let k = analytic_kl(&mut tape, &EncoderOutput { mu, logvar: lv }).unwrap();
        assert_eq!(tape.item(k), 0.0);

        let mu = tape.constant(array![[1.0]]).unwrap();
        let lv = tape.constant(array![[0.0]]).unwrap();
        let k = analytic_kl(&mut tape, &EncoderOutput { mu, logvar: lv }).unwrap();
        assert!(close(tape.item(k), 0.5, 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mu = tape
                .constant(Array2::from_shape_simple_fn((3, 5), || {
                    rng.random_range(-3.0..3.0)
                }))
                .unwrap();
            let lv = tape
                .constant(Array2::from_shape_simple_fn((3, 5), || {
                    rng.random_range(-5.0..5.0)
                }))
                .unwrap();
            let k = analytic_kl(&mut tape, &EncoderOutput { mu, logvar: lv }).unwrap();
            assert!(tape.item(k) >= 0.0);
        }
    }

    #[test]
    fn edvae_objective_substitution_and_lambda_mi_zero() {
        let mut tape = Tape::new();
        let recon = tape.param(array![[2.0]]).unwrap();
        let infonce = tape.param(array![[0.5]]).unwrap();
        let ent = tape.param(array![[1.0]]).unwrap();
        let xent = tape.param(array![[3.0]]).unwrap();
        let terms = EdVaeTerms {
            recon,
            infonce,
            ent,
            xent,
        };
        let t = edvae_objective(&mut tape, &terms, TermWeights::default()).unwrap();
        assert_eq!(tape.item(t), 3.5);
        assert_eq!(edvae_total(2.0, 0.5, 1.0, 3.0, TermWeights::default()), 3.5);
        tape.backward(t).unwrap();
        assert_eq!(tape.grad(recon)[[0, 0]], 1.0);
        assert_eq!(tape.grad(infonce)[[0, 0]], -1.0);
        assert_eq!(tape.grad(ent)[[0, 0]], -1.0);
        assert_eq!(tape.grad(xent)[[0, 0]], 1.0);

        let mut tape = Tape::new();
        let recon = tape.param(array![[2.0]]).unwrap();
        let infonce = tape.param(array![[0.5]]).unwrap();
        let ent = tape.param(array![[1.0]]).unwrap();
        let xent = tape.param(array![[3.0]]).unwrap();
        let w = TermWeights {
            lambda_mi: 0.0,
            lambda_reg: 1.0,
        };
        let t = edvae_objective(
            &mut tape,
            &EdVaeTerms {
                recon,
                infonce,
                ent,
                xent,
            },
            w,
        )
        .unwrap();
        tape.backward(t).unwrap();
        assert_eq!(tape.grad(infonce)[[0, 0]], 0.0);
    }

    #[test]
    fn vae_objective_adds_terms() {
        let mut tape = Tape::new();
        let r = tape.param(array![[2.78]]).unwrap();
        let k = tape.param(array![[10.2]]).unwrap();
        let t = vae_objective(&mut tape, r, k).unwrap();
        assert!(close(tape.item(t), 12.98, 1e-12));
        tape.backward(t).unwrap();
        assert_eq!(tape.grad(r)[[0, 0]], 1.0);
        assert_eq!(tape.grad(k)[[0, 0]], 1.0);

        let mut tape = Tape::new();
        let r = tape.constant(array![[0.0]]).unwrap();
        let t = vae_objective(&mut tape, r, r).unwrap();
        assert_eq!(tape.item(t), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn batch() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
            (2usize..12).prop_flat_map(|k| {
                (
                    prop::collection::vec(-4.0f64..4.0, k * 5),
                    prop::collection::vec(-4.0f64..4.0, k * 5),
                )
                    .prop_map(move |(a, b)| {
                        (
                            Array2::from_shape_vec((k, 5), a).unwrap(),
                            Array2::from_shape_vec((k, 5), b).unwrap(),
                        )
                    })
            })
        }

        proptest! {
            #[test]
            fn infonce_is_non_negative((z, zp) in batch()) {
                let mut tape = Tape::new();
                let a = tape.constant(z).unwrap();
                let b = tape.constant(zp).unwrap();
                let l = infonce_loss(&mut tape, a, b, 1.0).unwrap();
                prop_assert!(tape.item(l) >= 0.0);
            }

            #[test]
            fn infonce_is_invariant_to_joint_row_order((z, zp) in batch(), shift in 1usize..11) {
                let k = z.nrows();
                let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
                let zr = z.select(ndarray::Axis(0), &perm);
                let zpr = zp.select(ndarray::Axis(0), &perm);
                let eval = |a: Array2<f64>, b: Array2<f64>| {
                    let mut t = Tape::new();
                    let a = t.constant(a).unwrap();
                    let b = t.constant(b).unwrap();
                    let l = infonce_loss(&mut t, a, b, 1.0).unwrap();
                    t.item(l)
                };
                prop_assert!((eval(z, zp) - eval(zr, zpr)).abs() < 1e-9);
            }
        }
    }
}
