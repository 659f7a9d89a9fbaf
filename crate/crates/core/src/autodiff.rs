//! Define-by-run reverse-mode differentiation over dense 2-D `f64` arrays.
//!
//! A [`Tape`] owns every value produced during one forward pass. [`Tensor`]
//! is a copyable handle (node id plus shape) into that tape. Operations are
//! recorded in creation order, so parents always precede their children and
//! the backward sweep is a plain reverse iteration.
//!
//! Broadcasting is limited to a `1×1` operand in binary ops. Anything else
//! (bias rows, per-row scalars) goes through [`Tape::repeat_rows`] and
//! [`Tape::repeat_cols`].

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Binary(BinaryKind, usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Relu(usize),
    Scale(usize, f64),
    AddConst(usize),
    Clamp(usize, f64, f64),
    RepeatRows(usize),
    RepeatCols(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    RowLogSumExp(usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
    /// Row softmax kept by `row_logsumexp` for its backward pass.
    softmax: Option<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

/// Recorded computation graph for a single forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
    state: TapeState,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            state: TapeState::Recording,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf. Its gradient is available after [`Tape::backward`].
    pub fn param(&mut self, value: Array2<f64>) -> Result<Tensor> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient (data, noise, fixed tables).
    pub fn constant(&mut self, value: Array2<f64>) -> Result<Tensor> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Tensor> {
        self.constant(Array2::from_elem((1, 1), v))
    }

    fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Result<Tensor> {
        self.ensure_recording()?;
        if value.is_empty() {
            return Err(Error::dim("leaf", "empty tensor"));
        }
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn value(&self, t: Tensor) -> &Array2<f64> {
        &self.nodes[t.id].value
    }

    /// Value of a `1×1` tensor.
    pub fn item(&self, t: Tensor) -> f64 {
        self.nodes[t.id].value[[0, 0]]
    }

    /// Gradient of the last backward pass with respect to `t`; zeros if `t`
    /// did not influence the loss.
    pub fn grad(&self, t: Tensor) -> Array2<f64> {
        match self.grads.get(t.id) {
            Some(Some(g)) => g.clone(),
            _ => Array2::zeros((t.rows, t.cols)),
        }
    }

    fn ensure_recording(&self) -> Result<()> {
        match self.state {
            TapeState::Recording => Ok(()),
            TapeState::Consumed => Err(Error::TapeState(
                "tape already consumed by backward; start a fresh forward pass",
            )),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Tensor {
        let (rows, cols) = value.dim();
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            softmax: None,
        });
        Tensor { id, rows, cols }
    }

    fn record(&mut self, op_name: &'static str, value: Array2<f64>, op: Op) -> Result<Tensor> {
        if !all_finite(&value) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = parents(op)
            .into_iter()
            .flatten()
            .any(|p| self.nodes[p].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn unary<F>(&mut self, name: &'static str, t: Tensor, op: Op, f: F) -> Result<Tensor>
    where
        F: Fn(f64) -> f64,
    {
        self.ensure_recording()?;
        let out = self.nodes[t.id].value.mapv(f);
        self.record(name, out, op)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        if a.cols != b.rows {
            return Err(Error::dim(
                "matmul",
                format!("{:?} · {:?}: inner dimensions differ", a.shape(), b.shape()),
            ));
        }
        let out = self.nodes[a.id].value.dot(&self.nodes[b.id].value);
        self.record("matmul", out, Op::MatMul(a.id, b.id))
    }

    pub fn transpose(&mut self, t: Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        let out = self.nodes[t.id].value.t().to_owned();
        self.record("transpose", out, Op::Transpose(t.id))
    }

    fn binary(&mut self, kind: BinaryKind, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let out = if a.shape() == b.shape() {
            Zip::from(av).and(bv).map_collect(|&x, &y| f(x, y))
        } else if b.is_scalar() {
            let y = bv[[0, 0]];
            av.mapv(|x| f(x, y))
        } else if a.is_scalar() {
            let x = av[[0, 0]];
            bv.mapv(|y| f(x, y))
        } else {
            return Err(Error::dim(
                name,
                format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
            ));
        };
        self.record(name, out, Op::Binary(kind, a.id, b.id))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn neg(&mut self, t: Tensor) -> Result<Tensor> {
        self.unary("neg", t, Op::Neg(t.id), |x| -x)
    }

    pub fn exp(&mut self, t: Tensor) -> Result<Tensor> {
        self.unary("exp", t, Op::Exp(t.id), f64::exp)
    }

    pub fn log(&mut self, t: Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        if let Some(bad) = self.nodes[t.id].value.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary("log", t, Op::Log(t.id), f64::ln)
    }

    pub fn square(&mut self, t: Tensor) -> Result<Tensor> {
        self.unary("square", t, Op::Square(t.id), |x| x * x)
    }

    pub fn relu(&mut self, t: Tensor) -> Result<Tensor> {
        self.unary("relu", t, Op::Relu(t.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn scale(&mut self, t: Tensor, c: f64) -> Result<Tensor> {
        self.unary("scale", t, Op::Scale(t.id, c), |x| x * c)
    }

    pub fn add_const(&mut self, t: Tensor, c: f64) -> Result<Tensor> {
        self.unary("add_const", t, Op::AddConst(t.id), |x| x + c)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero outside the band.
    pub fn clamp(&mut self, t: Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        if lo > hi {
            return Err(Error::Contract(format!(
                "clamp bounds [{lo}, {hi}] are inverted"
            )));
        }
        self.unary("clamp", t, Op::Clamp(t.id, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Replicate a `1×n` row `rows` times.
    pub fn repeat_rows(&mut self, t: Tensor, rows: usize) -> Result<Tensor> {
        self.ensure_recording()?;
        if t.rows != 1 || rows == 0 {
            return Err(Error::dim(
                "repeat_rows",
                format!(
                    "expected a 1×n row and rows ≥ 1, got {:?} × {rows}",
                    t.shape()
                ),
            ));
        }
        let row = self.nodes[t.id].value.row(0);
        let out = row
            .broadcast((rows, t.cols))
            .expect("row broadcast")
            .to_owned();
        self.record("repeat_rows", out, Op::RepeatRows(t.id))
    }

    /// Replicate an `m×1` column `cols` times.
    pub fn repeat_cols(&mut self, t: Tensor, cols: usize) -> Result<Tensor> {
        self.ensure_recording()?;
        if t.cols != 1 || cols == 0 {
            return Err(Error::dim(
                "repeat_cols",
                format!(
                    "expected an m×1 column and cols ≥ 1, got {:?} × {cols}",
                    t.shape()
                ),
            ));
        }
        let v = &self.nodes[t.id].value;
        let out = v
            .broadcast((t.rows, cols))
            .expect("column broadcast")
            .to_owned();
        self.record("repeat_cols", out, Op::RepeatCols(t.id))
    }

    pub fn sum(&mut self, t: Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        let s = self.nodes[t.id].value.sum();
        self.record("sum", Array2::from_elem((1, 1), s), Op::Sum(t.id))
    }

    pub fn mean(&mut self, t: Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        let v = &self.nodes[t.id].value;
        let m = v.sum() / v.len() as f64;
        self.record("mean", Array2::from_elem((1, 1), m), Op::Mean(t.id))
    }

    /// `m×n → m×1`.
    pub fn row_sum(&mut self, t: Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        let out = self.nodes[t.id]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.record("row_sum", out, Op::RowSum(t.id))
    }

    /// `m×n → m×1`, max-shifted so large inputs do not overflow.
    pub fn row_logsumexp(&mut self, t: Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        let v = &self.nodes[t.id].value;
        let mut soft = v.to_owned();
        let mut out = Array2::zeros((t.rows, 1));
        for (mut row, o) in soft.rows_mut().into_iter().zip(out.iter_mut()) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row /= total;
            *o = max + total.ln();
        }
        let t = self.record("row_logsumexp", out, Op::RowLogSumExp(t.id))?;
        self.nodes[t.id].softmax = Some(soft);
        Ok(t)
    }

    /// Propagate `∂loss/∂node` to every node that requires a gradient.
    /// Consumes the tape: further recording or a second backward is an error.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        self.ensure_recording()?;
        if !loss.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a 1×1 loss, got {:?}",
                loss.shape()
            )));
        }
        self.state = TapeState::Consumed;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(Array2::ones((1, 1)));

        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let nodes = &self.nodes;
        let val = |i: usize| &nodes[i].value;
        let needs = |i: usize| nodes[i].requires_grad;

        match nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    accumulate(grads, a, g.dot(&val(b).t()));
                }
                if needs(b) {
                    accumulate(grads, b, val(a).t().dot(g));
                }
            }
            Op::Transpose(a) => accumulate(grads, a, g.t().to_owned()),
            Op::Binary(kind, a, b) => {
                let (ga, gb) = match kind {
                    BinaryKind::Add => (g.clone(), g.clone()),
                    BinaryKind::Sub => (g.clone(), -g),
                    BinaryKind::Mul => {
                        let ga = if nodes[b].value.len() == 1 {
                            g * val(b)[[0, 0]]
                        } else {
                            g * val(b)
                        };
                        let gb = if nodes[a].value.len() == 1 {
                            g * val(a)[[0, 0]]
                        } else {
                            g * val(a)
                        };
                        (ga, gb)
                    }
                };
                if needs(a) {
                    accumulate(grads, a, reduce_to(ga, val(a).dim()));
                }
                if needs(b) {
                    accumulate(grads, b, reduce_to(gb, val(b).dim()));
                }
            }
            Op::Neg(a) => accumulate(grads, a, -g),
            Op::Exp(a) => accumulate(grads, a, g * val(id)),
            Op::Log(a) => accumulate(grads, a, g / val(a)),
            Op::Square(a) => accumulate(grads, a, g * val(a) * 2.0),
            Op::Relu(a) => {
                let mut out = g.clone();
                Zip::from(&mut out).and(val(a)).for_each(|o, &x| {
                    if x <= 0.0 {
                        *o = 0.0;
                    }
                });
                accumulate(grads, a, out);
            }
            Op::Scale(a, c) => accumulate(grads, a, g * c),
            Op::AddConst(a) => accumulate(grads, a, g.clone()),
            Op::Clamp(a, lo, hi) => {
                let mut out = g.clone();
                Zip::from(&mut out).and(val(a)).for_each(|o, &x| {
                    if x < lo || x > hi {
                        *o = 0.0;
                    }
                });
                accumulate(grads, a, out);
            }
            Op::RepeatRows(a) => accumulate(grads, a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::RepeatCols(a) => accumulate(grads, a, g.sum_axis(Axis(1)).insert_axis(Axis(1))),
            Op::Sum(a) => accumulate(grads, a, Array2::from_elem(val(a).dim(), g[[0, 0]])),
            Op::Mean(a) => {
                let n = val(a).len() as f64;
                accumulate(grads, a, Array2::from_elem(val(a).dim(), g[[0, 0]] / n));
            }
            Op::RowSum(a) => {
                let out = g
                    .broadcast(val(a).dim())
                    .expect("column broadcast")
                    .to_owned();
                accumulate(grads, a, out);
            }
            Op::RowLogSumExp(a) => {
                // softmax of each row, scaled by the upstream row gradient
                let soft = nodes[id].softmax.as_ref().expect("kept by row_logsumexp");
                accumulate(grads, a, soft * g);
            }
        }
    }
}

fn parents(op: Op) -> [Option<usize>; 2] {
    match op {
        Op::Leaf => [None, None],
        Op::MatMul(a, b) | Op::Binary(_, a, b) => [Some(a), Some(b)],
        Op::Transpose(a)
        | Op::Neg(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Square(a)
        | Op::Relu(a)
        | Op::Scale(a, _)
        | Op::AddConst(a)
        | Op::Clamp(a, _, _)
        | Op::RepeatRows(a)
        | Op::RepeatCols(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::RowSum(a)
        | Op::RowLogSumExp(a) => [Some(a), None],
    }
}

fn all_finite(a: &Array2<f64>) -> bool {
    match a.as_slice_memory_order() {
        // x·0 is NaN exactly when x is not finite
        Some(s) => s.iter().fold(0.0, |acc, &x| acc + x * 0.0) == 0.0,
        None => a.iter().all(|x| x.is_finite()),
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: usize, g: Array2<f64>) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Sum a broadcast gradient back down to a `1×1` operand when needed.
fn reduce_to(g: Array2<f64>, dim: (usize, usize)) -> Array2<f64> {
    if g.dim() == dim {
        g
    } else {
        Array2::from_elem(dim, g.sum())
    }
}

/// Max-shifted log-sum-exp of a non-empty finite sequence.
pub fn logsumexp<I>(xs: I) -> f64
where
    I: IntoIterator<Item = f64> + Clone,
{
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = xs.into_iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.5..1.5))
    }

    /// Central finite differences of a scalar function of one matrix.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_and_inner_product() {
        let mut tape = Tape::new();
        let i = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = tape.constant(array![[3.0, 4.0], [5.0, 6.0]]).unwrap();
        let p = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(p), &array![[3.0, 4.0], [5.0, 6.0]]);

        let r = tape.constant(array![[1.0, 2.0]]).unwrap();
        let c = tape.constant(array![[3.0], [4.0]]).unwrap();
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.item(p), 11.0);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(Array2::ones((2, 3))).unwrap();
        let b = tape.constant(Array2::ones((2, 3))).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a0 = random(&mut rng, 3, 4);
            let b0 = random(&mut rng, 4, 2);
            let mut tape = Tape::new();
            let a = tape.param(a0.clone()).unwrap();
            let b = tape.param(b0.clone()).unwrap();
            let p = tape.matmul(a, b).unwrap();
            let s = tape.sum(p).unwrap();
            tape.backward(s).unwrap();
            let num = numeric_grad(&a0, |a| a.dot(&b0).sum());
            assert!(max_rel_err(&tape.grad(a), &num) < 1e-6);
            let num_b = numeric_grad(&b0, |b| a0.dot(b).sum());
            assert!(max_rel_err(&tape.grad(b), &num_b) < 1e-6);
        }
    }

    #[test]
    fn elementwise_forward_values() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[0.0, 1.0]]).unwrap();
        let e = tape.exp(x).unwrap();
        assert_eq!(tape.value(e)[[0, 0]], 1.0);
        assert!((tape.value(e)[[0, 1]] - std::f64::consts::E).abs() < 1e-15);

        let y = tape.constant(array![[-2.0, 0.0, 3.0]]).unwrap();
        let r = tape.relu(y).unwrap();
        assert_eq!(tape.value(r), &array![[0.0, 0.0, 3.0]]);
    }

    #[test]
    fn log_of_square_has_derivative_one_at_two() {
        let mut tape = Tape::new();
        let x = tape.param(array![[2.0]]).unwrap();
        let sq = tape.square(x).unwrap();
        let l = tape.log(sq).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(x)[[0, 0]];
        assert!((g - 1.0).abs() < 1e-12);
        let h = 1e-6;
        let num = (((2.0f64 + h).powi(2)).ln() - ((2.0f64 - h).powi(2)).ln()) / (2.0 * h);
        assert!((g - num).abs() < 1e-8);
    }

    #[test]
    fn log_rejects_non_positive_input() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 0.0]]).unwrap();
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn binary_ops_shape_check_and_scalar_broadcast() {
        let mut tape = Tape::new();
        let a = tape.param(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = tape.constant(Array2::ones((2, 3))).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
        let row = tape.constant(array![[1.0, 1.0]]).unwrap();
        assert!(tape.mul(a, row).is_err());

        let s = tape.param(array![[3.0]]).unwrap();
        let p = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(p), &array![[3.0, 6.0], [9.0, 12.0]]);
        let total = tape.sum(p).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(s)[[0, 0]], 10.0);
        assert_eq!(tape.grad(a), Array2::from_elem((2, 2), 3.0));
    }

    #[test]
    fn relu_derivative_is_zero_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(array![[-1.0, 0.0, 2.0]]).unwrap();
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), array![[0.0, 0.0, 1.0]]);
    }

    #[test]
    fn logsumexp_values_and_overflow_safety() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[0.0, 0.0], [1000.0, 1000.0]]).unwrap();
        let l = tape.row_logsumexp(x).unwrap();
        assert!((tape.value(l)[[0, 0]] - 2f64.ln()).abs() < 1e-15);
        assert!((tape.value(l)[[1, 0]] - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let mut tape = Tape::new();
        let x = tape.param(array![[1.0, 2.0, 3.0]]).unwrap();
        let l = tape.row_logsumexp(x).unwrap();
        let s = tape.sum(l).unwrap();
        tape.backward(s).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let softmax = array![[1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z]];
        let g = tape.grad(x);
        assert!(max_rel_err(&g, &softmax) < 1e-12);
        let x0 = array![[1.0, 2.0, 3.0]];
        let num = numeric_grad(&x0, |v| logsumexp(v.iter().copied()));
        assert!(max_rel_err(&g, &num) < 1e-6);
    }

    #[test]
    fn reductions_reject_nothing_but_empty_leaves() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.constant(Array2::zeros((0, 3))),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn backward_gradients_of_simple_losses() {
        let mut tape = Tape::new();
        let w = tape.param(Array2::from_elem((2, 3), 0.7)).unwrap();
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w), Array2::<f64>::ones((2, 3)));

        let mut tape = Tape::new();
        let w = tape.param(array![[1.0, 2.0]]).unwrap();
        let sq = tape.square(w).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w), array![[2.0, 4.0]]);
    }

    #[test]
    fn backward_contract_and_state_errors() {
        let mut tape = Tape::new();
        let w = tape.param(array![[1.0, 2.0]]).unwrap();
        let sq = tape.square(w).unwrap();
        assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeState(_))));
        assert!(matches!(tape.square(w), Err(Error::TapeState(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[800.0]]).unwrap();
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn every_differentiable_op_matches_finite_differences() {
        // each closure builds a scalar from one input on a fresh tape
        type Build = fn(&mut Tape, Tensor) -> Result<Tensor>;
        let cases: Vec<(&str, Build)> = vec![
            ("transpose", |t, x| {
                let y = t.transpose(x)?;
                let c = t.constant(Array2::from_shape_fn((4, 2), |(i, j)| {
                    (i * 3 + j) as f64 * 0.1
                }))?;
                let p = t.matmul(y, c)?;
                t.sum(p)
            }),
            ("add/sub/mul", |t, x| {
                let c = t.constant(Array2::from_shape_fn((4, 3), |(i, j)| {
                    0.3 + (i + j) as f64 * 0.2
                }))?;
                let a = t.add(x, c)?;
                let s = t.sub(a, x)?;
                let m = t.mul(s, x)?;
                let m = t.mul(m, x)?;
                t.sum(m)
            }),
            ("neg/exp/scale/add_const", |t, x| {
                let n = t.neg(x)?;
                let e = t.exp(n)?;
                let s = t.scale(e, 1.7)?;
                let s = t.add_const(s, 2.0)?;
                let l = t.log(s)?;
                t.mean(l)
            }),
            ("relu", |t, x| {
                let r = t.relu(x)?;
                let q = t.square(r)?;
                t.sum(q)
            }),
            ("clamp", |t, x| {
                let c = t.clamp(x, -0.9, 0.9)?;
                let q = t.square(c)?;
                t.sum(q)
            }),
            ("repeat/row ops", |t, x| {
                let rs = t.row_sum(x)?;
                let rc = t.repeat_cols(rs, 2)?;
                let lse = t.row_logsumexp(x)?;
                let lse2 = t.repeat_cols(lse, 2)?;
                let m = t.mul(rc, lse2)?;
                let tr = t.transpose(m)?;
                let top = t.row_sum(tr)?;
                let tt = t.transpose(top)?;
                let rr = t.repeat_rows(tt, 3)?;
                let q = t.square(rr)?;
                t.mean(q)
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (name, build) in cases {
            for _ in 0..10 {
                let x0 = random(&mut rng, 4, 3);
                let mut tape = Tape::new();
                let x = tape.param(x0.clone()).unwrap();
                let loss = build(&mut tape, x).unwrap();
                tape.backward(loss).unwrap();
                let analytic = tape.grad(x);
                let num = numeric_grad(&x0, |v| {
                    let mut t = Tape::new();
                    let x = t.param(v.clone()).unwrap();
                    let l = build(&mut t, x).unwrap();
                    t.item(l)
                });
                let err = max_rel_err(&analytic, &num);
                assert!(err < 1e-5, "{name}: rel err {err}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn logsumexp_is_bracketed_by_max(xs in prop::collection::vec(-500.0f64..500.0, 1..20)) {
                let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let l = logsumexp(xs.iter().copied());
                prop_assert!(l >= max);
                prop_assert!(l <= max + (xs.len() as f64).ln() + 1e-12);
            }

            #[test]
            fn forward_is_deterministic(vals in prop::collection::vec(-3.0f64..3.0, 6)) {
                let run = || {
                    let mut t = Tape::new();
                    let x = t.param(Array2::from_shape_vec((2, 3), vals.clone()).unwrap()).unwrap();
                    let y = t.transpose(x).unwrap();
                    let p = t.matmul(x, y).unwrap();
                    let l = t.row_logsumexp(p).unwrap();
                    let s = t.sum(l).unwrap();
                    t.item(s)
                };
                prop_assert_eq!(run().to_bits(), run().to_bits());
            }
        }
    }
}
