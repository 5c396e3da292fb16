//! Define-by-run reverse-mode differentiation over a fixed operation set.
//!
//! Every call on [`Tape`] evaluates its operation eagerly and appends a node
//! that remembers its inputs, so node inputs always precede the node itself
//! and the graph is acyclic by construction. [`Tape::backward`] walks the
//! nodes in reverse and returns one gradient buffer per node that the loss
//! depends on.
//!
//! Losses with closed-form adjoints (Dice, cross-entropy, the contrastive
//! objective) plug in through [`CustomOp`] instead of being spelled out in
//! primitives.

pub mod kernels;

pub use kernels::ConvGeom;

use crate::error::{ensure_arg, Error, Result};

/// Dense tensor: a shape and a row-major buffer. Image-like tensors use
/// `[C, H, W, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure_arg!(
            n == data.len(),
            "shape {shape:?} needs {n} values, got {}",
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Operation with a hand-written adjoint. The forward value is computed by
/// the caller and handed to [`Tape::custom`].
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient with respect to every input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Constant,
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Log(Var),
    Exp(Var),
    Softmax(Var),
    Upsample2(Var),
    AvgPool2(Var),
    /// Multiplication by a fixed keep/scale pattern.
    Dropout(Var, Vec<f64>),
    /// Per-location cosine similarity between two `[F, N…]` maps.
    Cosine(Var, Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Conv3d { .. } => "conv3d",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Softmax(_) => "softmax",
            Op::Upsample2(_) => "upsample2",
            Op::AvgPool2(_) => "avgpool2",
            Op::Dropout(..) => "dropout",
            Op::Cosine(..) => "cosine",
            Op::Custom(_, op) => op.name(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of `len` when the loss does not reach it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Cosine uses `max(|v|, COSINE_EPS)` for norms so a zero vector yields a
/// zero similarity instead of a NaN.
pub const COSINE_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        ensure_arg!(ws.len() == 5, "conv weight must be [Co,Ci,k,k,k], got {ws:?}");
        ensure_arg!(xs.len() == 4, "conv input must be [C,H,W,D], got {xs:?}");
        let k = geom.kernel;
        ensure_arg!(
            ws.len() == 5 && ws == [ws[0], xs[0], k, k, k],
            "conv weight {ws:?} incompatible with input {xs:?} and kernel {k}"
        );
        ensure_arg!(bs == [ws[0]], "conv bias {bs:?} must be [{}]", ws[0]);
        for &n in &xs[1..] {
            ensure_arg!(
                geom.out_len(n).is_some(),
                "extent {n} too small for {geom:?}"
            );
        }
        let out_ch = ws[0];
        let in_ch = xs[0];
        let spatial = self.value(x).spatial();
        let (data, out) = kernels::conv3d_forward(
            self.value(x).data(),
            in_ch,
            spatial,
            self.value(w).data(),
            self.value(b).data(),
            out_ch,
            geom,
        );
        let value = Tensor {
            shape: vec![out_ch, out[0], out[1], out[2]],
            data,
        };
        Ok(self.push(Op::Conv3d { x, w, b, geom }, value))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(op, value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.map(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure_arg!(
            ta.shape == tb.shape,
            "shape mismatch {:?} vs {:?}",
            ta.shape,
            tb.shape
        );
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Softmax over the leading (channel) axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        ensure_arg!(!t.shape.is_empty(), "softmax needs a channel axis");
        let data = kernels::softmax_channels(&t.data, t.shape[0]);
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        Ok(self.push(Op::Softmax(x), value))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        ensure_arg!(t.shape.len() == 4, "upsample needs [C,H,W,D]");
        let data = kernels::upsample2(&t.data, t.shape[0], t.spatial());
        let shape = vec![t.shape[0], 2 * t.shape[1], 2 * t.shape[2], 2 * t.shape[3]];
        Ok(self.push(Op::Upsample2(x), Tensor { shape, data }))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        ensure_arg!(
            t.shape.len() == 4 && t.shape[1..].iter().all(|n| n % 2 == 0),
            "avg_pool2 needs [C,H,W,D] with even spatial extents, got {:?}",
            t.shape
        );
        let data = kernels::avg_pool2(&t.data, t.shape[0], t.spatial());
        let shape = vec![t.shape[0], t.shape[1] / 2, t.shape[2] / 2, t.shape[3] / 2];
        Ok(self.push(Op::AvgPool2(x), Tensor { shape, data }))
    }

    /// Multiplies by a fixed pattern (typically zeros and `1/(1-rate)`).
    pub fn dropout(&mut self, x: Var, pattern: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        ensure_arg!(
            pattern.len() == t.len(),
            "dropout pattern length {} vs tensor {}",
            pattern.len(),
            t.len()
        );
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&pattern).map(|(v, m)| v * m).collect(),
        };
        Ok(self.push(Op::Dropout(x, pattern), value))
    }

    /// Cosine similarity between the channel vectors of two equally shaped
    /// `[F, …]` tensors; output has one entry per location.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure_arg!(
            ta.shape == tb.shape && !ta.shape.is_empty(),
            "cosine shape mismatch {:?} vs {:?}",
            ta.shape,
            tb.shape
        );
        let f = ta.shape[0];
        let n = ta.len() / f;
        let data = (0..n)
            .map(|i| {
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for c in 0..f {
                    let (x, y) = (ta.data[c * n + i], tb.data[c * n + i]);
                    ab += x * y;
                    aa += x * x;
                    bb += y * y;
                }
                ab / (aa.sqrt().max(COSINE_EPS) * bb.sqrt().max(COSINE_EPS))
            })
            .collect();
        let value = Tensor {
            shape: ta.shape[1..].to_vec(),
            data,
        };
        Ok(self.push(Op::Cosine(a, b), value))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp>, value: Tensor) -> Var {
        self.push(Op::Custom(inputs.to_vec(), op), value)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure_arg!(loss.0 < self.nodes.len(), "loss node not on this tape");
        if self.value(loss).len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, node has shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
            match slot {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Conv3d { x, w, b, geom } => {
                    let tx = self.value(*x);
                    let tw = self.value(*w);
                    let (gx, gw, gb) = kernels::conv3d_backward(
                        &tx.data,
                        tx.shape[0],
                        tx.spatial(),
                        &tw.data,
                        tw.shape[0],
                        *geom,
                        out.spatial(),
                        &up,
                        !matches!(self.nodes[x.0].op, Op::Constant),
                    );
                    if !gx.is_empty() {
                        accumulate(&mut grads[x.0], gx);
                    }
                    accumulate(&mut grads[w.0], gw);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Relu(x) => {
                    let g = up
                        .iter()
                        .zip(&self.value(*x).data)
                        .map(|(&u, &v)| if v > 0.0 { u } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[x.0], g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], up.clone());
                    accumulate(&mut grads[b.0], up.clone());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.value(*a).data, &self.value(*b).data);
                    accumulate(&mut grads[a.0], up.iter().zip(tb).map(|(u, y)| u * y).collect());
                    accumulate(&mut grads[b.0], up.iter().zip(ta).map(|(u, x)| u * x).collect());
                }
                Op::Scale(x, k) => {
                    accumulate(&mut grads[x.0], up.iter().map(|u| u * k).collect());
                }
                Op::Sum(x) => {
                    accumulate(&mut grads[x.0], vec![up[0]; self.value(*x).len()]);
                }
                Op::Log(x) => {
                    let g = up
                        .iter()
                        .zip(&self.value(*x).data)
                        .map(|(u, v)| u / v)
                        .collect();
                    accumulate(&mut grads[x.0], g);
                }
                Op::Exp(x) => {
                    let g = up.iter().zip(&out.data).map(|(u, y)| u * y).collect();
                    accumulate(&mut grads[x.0], g);
                }
                Op::Softmax(x) => {
                    let g = kernels::softmax_channels_backward(&out.data, out.shape[0], &up);
                    accumulate(&mut grads[x.0], g);
                }
                Op::Upsample2(x) => {
                    let tx = self.value(*x);
                    let g = kernels::upsample2_backward(&up, tx.shape[0], tx.spatial());
                    accumulate(&mut grads[x.0], g);
                }
                Op::AvgPool2(x) => {
                    let tx = self.value(*x);
                    let g = kernels::avg_pool2_backward(&up, tx.shape[0], tx.spatial());
                    accumulate(&mut grads[x.0], g);
                }
                Op::Dropout(x, pattern) => {
                    accumulate(
                        &mut grads[x.0],
                        up.iter().zip(pattern).map(|(u, m)| u * m).collect(),
                    );
                }
                Op::Cosine(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let f = ta.shape[0];
                    let n = ta.len() / f;
                    let mut ga = vec![0.0; ta.len()];
                    let mut gb = vec![0.0; tb.len()];
                    for i in 0..n {
                        let (mut aa, mut bb) = (0.0, 0.0);
                        for c in 0..f {
                            aa += ta.data[c * n + i].powi(2);
                            bb += tb.data[c * n + i].powi(2);
                        }
                        let (na, nb) = (aa.sqrt(), bb.sqrt());
                        let cos = out.data[i];
                        for c in 0..f {
                            let (x, y) = (ta.data[c * n + i], tb.data[c * n + i]);
                            if na > COSINE_EPS {
                                ga[c * n + i] = up[i] * (y / (na * nb.max(COSINE_EPS)) - cos * x / aa);
                            }
                            if nb > COSINE_EPS {
                                gb[c * n + i] = up[i] * (x / (na.max(COSINE_EPS) * nb) - cos * y / bb);
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Custom(inputs, op) => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    let gs = op.backward(&ins, out, &up);
                    debug_assert_eq!(gs.len(), inputs.len());
                    for (v, g) in inputs.iter().zip(gs) {
                        accumulate(&mut grads[v.0], g);
                    }
                }
            }
            grads[idx] = Some(up);
        }
        Ok(Gradients { grads })
    }
}

/// Central finite-difference helpers shared by the gradient tests.
#[cfg(test)]
pub(crate) mod fd {
    /// Relative error used throughout: `|a - n| / max(1, |n|)`.
    pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / numeric.abs().max(1.0)
    }

    /// Central difference of `f` at coordinate `i` of `x`.
    pub fn central(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        xp[i] += h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        (fp - fm) / (2.0 * h)
    }
}

#[cfg(test)]
mod tests {
    use super::fd::{central, rel_err};
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Builds a scalar from one input tensor with `build`, then checks every
    /// coordinate's gradient against central differences.
    fn check_op(input: Tensor, build: impl Fn(&mut Tape, Var) -> Var, h: f64) {
        let shape = input.shape().to_vec();
        let weights = random(&[input.len() * 8], 99).into_data();
        let eval = |tape: &mut Tape, x: Var| {
            let y = build(tape, x);
            let n = tape.value(y).len();
            let wv = tape.leaf(Tensor::new(tape.value(y).shape().to_vec(), weights[..n].to_vec()).unwrap());
            let prod = tape.mul(y, wv).unwrap();
            tape.sum(prod)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let loss = eval(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().to_vec();
        let mut f = |xs: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(shape.clone(), xs.to_vec()).unwrap());
            let l = eval(&mut t, x);
            t.value(l).item().unwrap()
        };
        for i in 0..input.len() {
            let num = central(&mut f, input.data(), i, h);
            assert!(
                rel_err(analytic[i], num) < 1e-4,
                "coord {i}: analytic {} numeric {num}",
                analytic[i]
            );
        }
    }

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(random(&[7], 1));
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(p).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut tape = Tape::new();
        let t = random(&[9], 2);
        let p = tape.leaf(t.clone());
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half).unwrap();
        for (a, b) in g.get(p).unwrap().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.leaf(random(&[3], 3));
        assert!(matches!(tape.backward(p), Err(Error::Argument(_))));
    }

    #[test]
    fn unreachable_nodes_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(random(&[3], 4));
        let b = tape.leaf(random(&[3], 5));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_some());
        assert!(g.get(b).is_none());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let w = random(&[2, 2, 3, 3, 3], 6);
        let b = random(&[2], 7);
        check_op(
            random(&[2, 3, 2, 4], 8),
            |t, x| {
                let wv = t.leaf(w.clone());
                let bv = t.leaf(b.clone());
                t.conv3d(x, wv, bv, ConvGeom::new(3, 1, 1)).unwrap()
            },
            1e-3,
        );
        // weight gradient with a strided kernel
        let x = random(&[1, 4, 4, 2], 9);
        check_op(
            random(&[3, 1, 2, 2, 2], 10),
            |t, wv| {
                let xv = t.leaf(x.clone());
                let bv = t.leaf(Tensor::zeros(vec![3]));
                t.conv3d(xv, wv, bv, ConvGeom::new(2, 2, 0)).unwrap()
            },
            1e-3,
        );
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        // keep relu inputs away from the kink
        let mut away = random(&[2, 2, 2, 2], 11);
        away.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 0.05 {
                *v += 0.1
            }
        });
        check_op(away, |t, x| t.relu(x), 1e-3);
        check_op(random(&[5], 12), |t, x| t.exp(x), 1e-3);
        let mut pos = random(&[5], 13);
        pos.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
        check_op(pos, |t, x| t.log(x), 1e-3);
        let other = random(&[5], 14);
        check_op(
            random(&[5], 15),
            |t, x| {
                let o = t.leaf(other.clone());
                let m = t.mul(x, o).unwrap();
                let a = t.add(m, x).unwrap();
                t.scale(a, -1.5)
            },
            1e-3,
        );
    }

    #[test]
    fn softmax_pool_upsample_gradients_match_finite_differences() {
        check_op(random(&[3, 2, 2, 1], 16), |t, x| t.softmax(x).unwrap(), 1e-3);
        check_op(random(&[2, 4, 2, 2], 17), |t, x| t.avg_pool2(x).unwrap(), 1e-3);
        check_op(random(&[2, 1, 2, 1], 18), |t, x| t.upsample2(x).unwrap(), 1e-3);
        let pattern = vec![0.0, 2.0, 2.0, 0.0, 2.0, 2.0];
        check_op(random(&[6], 19), move |t, x| t.dropout(x, pattern.clone()).unwrap(), 1e-3);
    }

    #[test]
    fn cosine_gradients_match_finite_differences() {
        let other = random(&[4, 3], 20);
        check_op(
            random(&[4, 3], 21),
            |t, x| {
                let o = t.leaf(other.clone());
                t.cosine(x, o).unwrap()
            },
            1e-4,
        );
        check_op(
            random(&[4, 3], 22),
            |t, x| {
                let o = t.leaf(other.clone());
                t.cosine(o, x).unwrap()
            },
            1e-4,
        );
    }
}
