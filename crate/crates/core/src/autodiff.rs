//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the tape in reverse. Nodes none of whose inputs require gradients keep
//! only their value, so a graph built from constants doubles as a plain
//! evaluator.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::Stencil;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Relu,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Abs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinKind, Var, Var),
    Unary(UnKind, Var),
    Scale(Var, f64),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        dims: [usize; 3],
        kernel: [usize; 3],
    },
    Sum(Var, Option<usize>),
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    Trilinear(Var, Vec<Stencil>),
    Dropout(Var, Vec<f64>),
    Reshape(Var),
    Transpose(Var),
    Laplace(Var, Var),
    RenderWeights(Var),
    RayReduce(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient of `v`, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn dims_of(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Cuts the gradient path: a constant copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (na, nb) = (ta.numel(), tb.numel());
        let shape = if ta.shape == tb.shape || nb == 1 {
            ta.shape.clone()
        } else if na == 1 {
            tb.shape.clone()
        } else {
            return Err(Error::shape(
                "binary",
                format!("{:?} vs {:?}", ta.shape, tb.shape),
            ));
        };
        let n = na.max(nb);
        let f = match kind {
            BinKind::Add => |x: f64, y: f64| x + y,
            BinKind::Sub => |x: f64, y: f64| x - y,
            BinKind::Mul => |x: f64, y: f64| x * y,
            BinKind::Div => |x: f64, y: f64| x / y,
        };
        let data = (0..n)
            .map(|i| {
                f(
                    ta.data[if na == 1 { 0 } else { i }],
                    tb.data[if nb == 1 { 0 } else { i }],
                )
            })
            .collect();
        Ok(self.push(Tensor { shape, data }, Op::Binary(kind, a, b), &[a, b]))
    }

    /// Elementwise sum; either operand may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnKind::Relu => |v| v.max(0.0),
            UnKind::Exp => f64::exp,
            UnKind::Log => f64::ln,
            UnKind::Tanh => f64::tanh,
            UnKind::Sigmoid => |v| 1.0 / (1.0 + (-v).exp()),
            UnKind::Abs => f64::abs,
        };
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(out, Op::Unary(kind, x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnKind::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnKind::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnKind::Sigmoid, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnKind::Abs, x)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * c).collect(),
        };
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        };
        self.push(out, Op::Clamp(x, lo, hi), &[x])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape, tb.shape),
            ));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let out = matmul_raw(&ta.data, &tb.data, m, k, n);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            &[a, b],
        ))
    }

    /// `[m, n] + [n]`, the bias row repeated for every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.shape.len() != 2 || tb.numel() != tx.shape[1] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", tx.shape, tb.shape),
            ));
        }
        let n = tx.shape[1];
        let data = tx
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data[i % n])
            .collect();
        Ok(self.push(
            Tensor {
                shape: tx.shape.clone(),
                data,
            },
            Op::AddBias(x, b),
            &[x, b],
        ))
    }

    /// 3x3 convolution, stride 1, zero padding 1: `x [Cin, H, W]`,
    /// `w [Cout, Cin, 3, 3]`, `b [Cout]` -> `[Cout, H, W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let s = self.value(x).shape.clone();
        if s.len() != 3 {
            return Err(Error::shape("conv2d", format!("input {s:?} is not [C, H, W]")));
        }
        self.conv(x, w, b, s[0], [1, s[1], s[2]], [1, 3, 3], "conv2d")
    }

    /// 3x3x3 convolution, stride 1, zero padding 1: `x [Cin, X, Y, Z]`,
    /// `w [Cout, Cin, 3, 3, 3]`, `b [Cout]` -> `[Cout, X, Y, Z]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let s = self.value(x).shape.clone();
        if s.len() != 4 {
            return Err(Error::shape("conv3d", format!("input {s:?} is not [C, X, Y, Z]")));
        }
        self.conv(x, w, b, s[0], [s[1], s[2], s[3]], [3, 3, 3], "conv3d")
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        cin: usize,
        dims: [usize; 3],
        kernel: [usize; 3],
        op: &'static str,
    ) -> Result<Var> {
        let (tw, tb) = (self.value(w), self.value(b));
        let ksize: usize = kernel.iter().product();
        if tw.shape.len() != 2 + kernel.iter().filter(|&&k| k == 3).count()
            || tw.shape[1] != cin
            || tw.numel() != tw.shape[0] * cin * ksize
        {
            return Err(Error::shape(op, format!("weight {:?} for {cin} input channels", tw.shape)));
        }
        let cout = tw.shape[0];
        if tb.numel() != cout {
            return Err(Error::shape(op, format!("bias {:?} for {cout} outputs", tb.shape)));
        }
        let out = conv_forward(&self.value(x).data, &tw.data, &tb.data, cin, cout, dims, kernel);
        let mut shape = vec![cout];
        shape.extend(self.value(x).shape[1..].iter());
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Conv {
                x,
                w,
                b,
                dims,
                kernel,
            },
            &[x, w, b],
        ))
    }

    /// Sum of all elements (`axis = None`, result shape `[1]`) or along one axis.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(x);
        let out = match axis {
            None => Tensor::scalar(t.data.iter().sum()),
            Some(a) => {
                if a >= t.shape.len() {
                    return Err(Error::shape("sum", format!("axis {a} for {:?}", t.shape)));
                }
                let (outer, len, inner) = dims_of(&t.shape, a);
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &t.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                let mut shape = t.shape.clone();
                shape.remove(a);
                if shape.is_empty() {
                    shape.push(1);
                }
                Tensor { shape, data }
            }
        };
        Ok(self.push(out, Op::Sum(x, axis), &[x]))
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let n = match axis {
            None => self.value(x).numel(),
            Some(a) => *self
                .value(x)
                .shape
                .get(a)
                .ok_or_else(|| Error::shape("mean", format!("axis {a}")))?,
        };
        let s = self.sum(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .shape
            .clone();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = &self.value(v).shape;
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = dims_of(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Tensor { shape, data }, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// Rows `idx` of `x` (first axis).
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = *t.shape.first().ok_or_else(|| Error::shape("gather", "scalar input"))?;
        let row = t.numel() / rows.max(1);
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= rows {
                return Err(Error::shape("gather", format!("row {i} of {rows}")));
            }
            data.extend_from_slice(&t.data[i * row..(i + 1) * row]);
        }
        let mut shape = t.shape.clone();
        shape[0] = idx.len();
        Ok(self.push(Tensor { shape, data }, Op::Gather(x, idx.to_vec()), &[x]))
    }

    /// Adds row `r` of `x` into row `idx[r]` of an `n`-row zero tensor.
    pub fn scatter_add(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape.first() != Some(&idx.len()) {
            return Err(Error::shape(
                "scatter_add",
                format!("{} indices for {:?}", idx.len(), t.shape),
            ));
        }
        let row = t.numel() / idx.len().max(1);
        let mut data = vec![0.0; n * row];
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::shape("scatter_add", format!("row {i} of {n}")));
            }
            for (d, s) in data[i * row..(i + 1) * row].iter_mut().zip(&t.data[r * row..(r + 1) * row]) {
                *d += s;
            }
        }
        let mut shape = t.shape.clone();
        shape[0] = n;
        Ok(self.push(Tensor { shape, data }, Op::ScatterAdd(x, idx.to_vec()), &[x]))
    }

    /// Trilinear samples of a channel-first volume `[C, X, Y, Z]` at precomputed
    /// stencils, giving `[P, C]`. Differentiable w.r.t. the volume only.
    pub fn trilinear_sample(&mut self, vol: Var, stencils: &[Stencil]) -> Result<Var> {
        let t = self.value(vol);
        if t.shape.len() != 4 {
            return Err(Error::shape("trilinear_sample", format!("volume {:?}", t.shape)));
        }
        let c = t.shape[0];
        let nvox = t.numel() / c;
        let mut data = vec![0.0; stencils.len() * c];
        for (p, st) in stencils.iter().enumerate() {
            if st.index.iter().any(|&i| i >= nvox) {
                return Err(Error::shape("trilinear_sample", "stencil index outside volume"));
            }
            for ch in 0..c {
                let base = ch * nvox;
                data[p * c + ch] = st
                    .index
                    .iter()
                    .zip(&st.weight)
                    .map(|(&i, &w)| w * t.data[base + i])
                    .sum();
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![stencils.len(), c],
                data,
            },
            Op::Trilinear(vol, stencils.to_vec()),
            &[vol],
        ))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and scales
    /// survivors by `1/(1-rate)`. The mask depends only on `seed` and the shape.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::domain("dropout rate must lie in [0, 1)"));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).numel(), rate, seed);
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        Ok(self.push(out, Op::Dropout(x, mask), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", t.shape)));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: t.data.clone(),
        };
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() != 2 {
            return Err(Error::shape("transpose", format!("{:?} is not 2-D", t.shape)));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let out = Tensor {
            shape: vec![c, r],
            data: transpose_raw(&t.data, r, c),
        };
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    /// Laplace-CDF density of signed distances `s` with one-element scale `beta`.
    pub fn laplace_density(&mut self, s: Var, beta: Var) -> Result<Var> {
        if self.value(beta).numel() != 1 {
            return Err(Error::shape("laplace_density", "beta must be a single value"));
        }
        let b = self.value(beta).item();
        let t = self.value(s);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| laplace_sigma(v, b)).collect(),
        };
        Ok(self.push(out, Op::Laplace(s, beta), &[s, beta]))
    }

    /// Alpha-compositing weights from optical thickness `tau = sigma * delta`,
    /// `[R, S]` -> `[R, S]`: `w_i = exp(-sum_{j<i} tau_j) * (1 - exp(-tau_i))`.
    pub fn render_weights(&mut self, tau: Var) -> Result<Var> {
        let t = self.value(tau);
        if t.shape.len() != 2 {
            return Err(Error::shape("render_weights", format!("{:?} is not [R, S]", t.shape)));
        }
        let (r, s) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; r * s];
        for ray in 0..r {
            let mut trans = 1.0;
            for i in 0..s {
                let tv = t.data[ray * s + i];
                data[ray * s + i] = trans * -(-tv).exp_m1();
                trans *= (-tv).exp();
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![r, s],
                data,
            },
            Op::RenderWeights(tau),
            &[tau],
        ))
    }

    /// Per-ray weighted sums: `w [R, S]`, `v [R*S, C]` -> `[R, C]`.
    pub fn ray_reduce(&mut self, w: Var, v: Var) -> Result<Var> {
        let (tw, tv) = (self.value(w), self.value(v));
        if tw.shape.len() != 2 || tv.shape.len() != 2 || tv.shape[0] != tw.numel() {
            return Err(Error::shape("ray_reduce", format!("{:?} with {:?}", tw.shape, tv.shape)));
        }
        let (r, s, c) = (tw.shape[0], tw.shape[1], tv.shape[1]);
        let mut data = vec![0.0; r * c];
        for ray in 0..r {
            for i in 0..s {
                let wi = tw.data[ray * s + i];
                let row = &tv.data[(ray * s + i) * c..(ray * s + i + 1) * c];
                for (d, x) in data[ray * c..(ray + 1) * c].iter_mut().zip(row) {
                    *d += wi * x;
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![r, c],
                data,
            },
            Op::RayReduce(w, v),
            &[w, v],
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be a single value"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let y = &node.value.data;
        // lazily-zeroed gradient buffer for an input that requires grad
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
            }};
        }
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (na, nb) = (ta.numel(), tb.numel());
                let ai = |i: usize| if na == 1 { 0 } else { i };
                let bi = |i: usize| if nb == 1 { 0 } else { i };
                if needs(*a) {
                    let ga = buf!(*a);
                    for (i, gi) in g.iter().enumerate() {
                        ga[ai(i)] += match kind {
                            BinKind::Add | BinKind::Sub => *gi,
                            BinKind::Mul => gi * tb.data[bi(i)],
                            BinKind::Div => gi / tb.data[bi(i)],
                        };
                    }
                }
                if needs(*b) {
                    let gb = buf!(*b);
                    for (i, gi) in g.iter().enumerate() {
                        let bv = tb.data[bi(i)];
                        gb[bi(i)] += match kind {
                            BinKind::Add => *gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * ta.data[ai(i)],
                            BinKind::Div => -gi * ta.data[ai(i)] / (bv * bv),
                        };
                    }
                }
            }
            Op::Unary(kind, x) => {
                let tx = &val(*x).data;
                let gx = buf!(*x);
                for i in 0..g.len() {
                    let d = match kind {
                        UnKind::Relu => {
                            if tx[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnKind::Exp => y[i],
                        UnKind::Log => 1.0 / tx[i],
                        UnKind::Tanh => 1.0 - y[i] * y[i],
                        UnKind::Sigmoid => y[i] * (1.0 - y[i]),
                        UnKind::Abs => {
                            if tx[i] > 0.0 {
                                1.0
                            } else if tx[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    gx[i] += g[i] * d;
                }
            }
            Op::Scale(x, c) => {
                let gx = buf!(*x);
                for (d, gi) in gx.iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
            Op::Clamp(x, lo, hi) => {
                let tx = &val(*x).data;
                let gx = buf!(*x);
                for i in 0..g.len() {
                    if tx[i] >= *lo && tx[i] <= *hi {
                        gx[i] += g[i];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if needs(*a) {
                    // g [m,n] x b^T [n,k]
                    gemm_acc(g, (n, 1), &tb.data, (1, n), buf!(*a), m, n, k);
                }
                if needs(*b) {
                    gemm_acc(&ta.data, (1, k), g, (n, 1), buf!(*b), k, m, n);
                }
            }
            Op::AddBias(x, b) => {
                let n = val(*b).numel();
                if needs(*x) {
                    add_into(buf!(*x), g);
                }
                if needs(*b) {
                    let gb = buf!(*b);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                }
            }
            Op::Conv {
                x,
                w,
                b,
                dims,
                kernel,
            } => {
                let (tx, tw) = (val(*x), val(*w));
                let (cin, cout) = (tw.shape[1], tw.shape[0]);
                let (gx, gw, gb) = conv_backward(&tx.data, &tw.data, g, cin, cout, *dims, *kernel, needs(*x));
                if needs(*x) {
                    add_into(buf!(*x), &gx);
                }
                if needs(*w) {
                    add_into(buf!(*w), &gw);
                }
                if needs(*b) {
                    add_into(buf!(*b), &gb);
                }
            }
            Op::Sum(x, axis) => {
                let tx = val(*x);
                let gx = buf!(*x);
                match axis {
                    None => gx.iter_mut().for_each(|d| *d += g[0]),
                    Some(a) => {
                        let (outer, len, inner) = dims_of(&tx.shape, *a);
                        for o in 0..outer {
                            for l in 0..len {
                                let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let shape = &node.value.shape;
                let (outer, total, inner) = dims_of(shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = val(v).shape[*axis];
                    if needs(v) {
                        let gv = buf!(v);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gv[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Gather(x, idx) => {
                let row = node.value.numel() / idx.len().max(1);
                let gx = buf!(*x);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gx[i * row..(i + 1) * row], &g[r * row..(r + 1) * row]);
                }
            }
            Op::ScatterAdd(x, idx) => {
                let row = val(*x).numel() / idx.len().max(1);
                let gx = buf!(*x);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gx[r * row..(r + 1) * row], &g[i * row..(i + 1) * row]);
                }
            }
            Op::Trilinear(vol, stencils) => {
                let tv = val(*vol);
                let c = tv.shape[0];
                let nvox = tv.numel() / c;
                let gv = buf!(*vol);
                for (p, st) in stencils.iter().enumerate() {
                    for ch in 0..c {
                        let gp = g[p * c + ch];
                        for (&i, &w) in st.index.iter().zip(&st.weight) {
                            gv[ch * nvox + i] += w * gp;
                        }
                    }
                }
            }
            Op::Dropout(x, mask) => {
                let gx = buf!(*x);
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
            Op::Reshape(x) => add_into(buf!(*x), g),
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape[1], node.value.shape[0]);
                let d = transpose_raw(g, c, r);
                add_into(buf!(*x), &d);
            }
            Op::Laplace(s, beta) => {
                let b = val(*beta).item();
                let ts = &val(*s).data;
                let mut gbeta = 0.0;
                if needs(*s) {
                    let gs = buf!(*s);
                    for i in 0..g.len() {
                        gs[i] += g[i] * laplace_dsigma_ds(ts[i], b);
                    }
                }
                if needs(*beta) {
                    for i in 0..g.len() {
                        gbeta += g[i] * laplace_dsigma_dbeta(ts[i], b);
                    }
                    buf!(*beta)[0] += gbeta;
                }
            }
            Op::RenderWeights(tau) => {
                let (r, s) = (node.value.shape[0], node.value.shape[1]);
                let tt = &val(*tau).data;
                let gt = buf!(*tau);
                for ray in 0..r {
                    // running suffix sum of g_i * w_i over i > k
                    let mut suffix = 0.0;
                    let mut trans_after = vec![0.0; s];
                    let mut cum = 0.0;
                    for i in 0..s {
                        cum += tt[ray * s + i];
                        trans_after[i] = (-cum).exp();
                    }
                    for k in (0..s).rev() {
                        let idx = ray * s + k;
                        gt[idx] += g[idx] * trans_after[k] - suffix;
                        suffix += g[idx] * y[idx];
                    }
                }
            }
            Op::RayReduce(w, v) => {
                let (tw, tv) = (val(*w), val(*v));
                let (r, s, c) = (tw.shape[0], tw.shape[1], tv.shape[1]);
                if needs(*w) {
                    let gw = buf!(*w);
                    for ray in 0..r {
                        let gr = &g[ray * c..(ray + 1) * c];
                        for i in 0..s {
                            let row = &tv.data[(ray * s + i) * c..(ray * s + i + 1) * c];
                            gw[ray * s + i] += row.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if needs(*v) {
                    let gv = buf!(*v);
                    for ray in 0..r {
                        let gr = &g[ray * c..(ray + 1) * c];
                        for i in 0..s {
                            let wi = tw.data[ray * s + i];
                            let dst = &mut gv[(ray * s + i) * c..(ray * s + i + 1) * c];
                            for (d, gg) in dst.iter_mut().zip(gr) {
                                *d += wi * gg;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(a, (k, 1), b, (n, 1), &mut out, m, k, n);
    out
}

/// `c += a b` with `a` `[m, k]` and `b` `[k, n]` given by (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    // SAFETY: the slices cover every index reachable through the given shapes
    // and strides, and `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Range of output positions `o` along one axis for which input `o + d - half`
/// is inside `[0, n)`; returns `(start, end, shift)` with input = output + shift.
fn valid_range(n: usize, d: usize, half: usize) -> (usize, usize, isize) {
    let shift = d as isize - half as isize;
    let start = (-shift).max(0) as usize;
    let end = (n as isize - shift.max(0)).max(0) as usize;
    (start.min(end), end, shift)
}

fn conv_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
) -> Vec<f64> {
    let nvox: usize = dims.iter().product();
    let ksize: usize = kernel.iter().product();
    let mut out = vec![0.0; cout * nvox];
    for o in 0..cout {
        out[o * nvox..(o + 1) * nvox].iter_mut().for_each(|v| *v = b[o]);
    }
    let col = im2col(x, cin, dims, kernel);
    gemm_acc(w, (cin * ksize, 1), &col, (nvox, 1), &mut out, cout, cin * ksize, nvox);
    out
}

/// `[cin * ksize, nvox]` matrix of shifted inputs (zero outside the volume),
/// rows ordered channel-major then tap.
fn im2col(x: &[f64], cin: usize, dims: [usize; 3], kernel: [usize; 3]) -> Vec<f64> {
    let [_, ny, nz] = dims;
    let nvox: usize = dims.iter().product();
    let ksize: usize = kernel.iter().product();
    let mut col = vec![0.0; cin * ksize * nvox];
    for_each_tap(dims, kernel, |tap, (x0, x1, sx), (y0, y1, sy), (z0, z1, sz)| {
        for c in 0..cin {
            let src = &x[c * nvox..(c + 1) * nvox];
            let dst = &mut col[(c * ksize + tap) * nvox..(c * ksize + tap + 1) * nvox];
            for i in x0..x1 {
                let ii = (i as isize + sx) as usize;
                for j in y0..y1 {
                    let jj = (j as isize + sy) as usize;
                    let d0 = (i * ny + j) * nz;
                    let s0 = (((ii * ny + jj) * nz + z0) as isize + sz) as usize;
                    dst[d0 + z0..d0 + z1].copy_from_slice(&src[s0..s0 + (z1 - z0)]);
                }
            }
        }
    });
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(col: &[f64], cin: usize, dims: [usize; 3], kernel: [usize; 3]) -> Vec<f64> {
    let [_, ny, nz] = dims;
    let nvox: usize = dims.iter().product();
    let ksize: usize = kernel.iter().product();
    let mut x = vec![0.0; cin * nvox];
    for_each_tap(dims, kernel, |tap, (x0, x1, sx), (y0, y1, sy), (z0, z1, sz)| {
        for c in 0..cin {
            let src = &col[(c * ksize + tap) * nvox..(c * ksize + tap + 1) * nvox];
            let dst = &mut x[c * nvox..(c + 1) * nvox];
            for i in x0..x1 {
                let ii = (i as isize + sx) as usize;
                for j in y0..y1 {
                    let jj = (j as isize + sy) as usize;
                    let d0 = (i * ny + j) * nz;
                    let s0 = (((ii * ny + jj) * nz + z0) as isize + sz) as usize;
                    for (d, g) in dst[s0..s0 + (z1 - z0)].iter_mut().zip(&src[d0 + z0..d0 + z1]) {
                        *d += g;
                    }
                }
            }
        }
    });
    x
}

/// Calls `f(tap, xr, yr, zr)` for every kernel tap with the valid output range
/// and input shift along each axis.
#[allow(clippy::type_complexity)]
fn for_each_tap(
    dims: [usize; 3],
    kernel: [usize; 3],
    mut f: impl FnMut(usize, (usize, usize, isize), (usize, usize, isize), (usize, usize, isize)),
) {
    let mut tap = 0;
    for dx in 0..kernel[0] {
        for dy in 0..kernel[1] {
            for dz in 0..kernel[2] {
                let rx = valid_range(dims[0], dx, kernel[0] / 2);
                let ry = valid_range(dims[1], dy, kernel[1] / 2);
                let rz = valid_range(dims[2], dz, kernel[2] / 2);
                f(tap, rx, ry, rz);
                tap += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
    want_x: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let nvox: usize = dims.iter().product();
    let ksize: usize = kernel.iter().product();
    let kk = cin * ksize;
    let gb: Vec<f64> = (0..cout).map(|o| g[o * nvox..(o + 1) * nvox].iter().sum()).collect();
    let col = im2col(x, cin, dims, kernel);
    // gw = g [cout, nvox] x col^T [nvox, kk]
    let mut gw = vec![0.0; cout * kk];
    gemm_acc(g, (nvox, 1), &col, (1, nvox), &mut gw, cout, nvox, kk);
    let gx = if want_x {
        // gcol = w^T [kk, cout] x g [cout, nvox]
        let mut gcol = col;
        gcol.iter_mut().for_each(|v| *v = 0.0);
        gemm_acc(w, (1, kk), g, (nvox, 1), &mut gcol, kk, cout, nvox);
        col2im(&gcol, cin, dims, kernel)
    } else {
        Vec::new()
    };
    (gx, gw, gb)
}

pub(crate) fn laplace_sigma(s: f64, beta: f64) -> f64 {
    if s < 0.0 {
        (1.0 - 0.5 * (s / beta).exp()) / beta
    } else {
        0.5 * (-s / beta).exp() / beta
    }
}

fn laplace_dsigma_ds(s: f64, beta: f64) -> f64 {
    if s < 0.0 {
        -0.5 * (s / beta).exp() / (beta * beta)
    } else {
        -laplace_sigma(s, beta) / beta
    }
}

fn laplace_dsigma_dbeta(s: f64, beta: f64) -> f64 {
    if s < 0.0 {
        let e = 0.5 * (s / beta).exp() / beta;
        -1.0 / (beta * beta) + e * (s / (beta * beta) + 1.0 / beta)
    } else {
        laplace_sigma(s, beta) * (s / (beta * beta) - 1.0 / beta)
    }
}

/// Keep-mask with survivors scaled by `1/(1-rate)`.
pub fn dropout_mask(n: usize, rate: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Maximum relative error between reverse-mode gradients of `f` at `params` and
/// central finite differences with step `eps`, over every coordinate.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_coords(f, params, eps, |p| (0..params[p].numel()).collect())
}

/// As [`grad_check`] but probing at most `per_param` seeded coordinates of each tensor.
pub fn grad_check_sampled<F>(f: F, params: &[Tensor], eps: f64, per_param: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = params
        .iter()
        .map(|t| {
            if t.numel() <= per_param {
                (0..t.numel()).collect()
            } else {
                rand::seq::index::sample(&mut rng, t.numel(), per_param).into_vec()
            }
        })
        .collect();
    grad_check_coords(f, params, eps, |p| picks[p].clone())
}

fn grad_check_coords<F>(f: F, params: &[Tensor], eps: f64, coords: impl Fn(usize) -> Vec<usize>) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::domain("finite-difference step must be positive"));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (p, &v) in vars.iter().enumerate() {
        let ga = grads.get_or_zeros(v);
        for i in coords(p) {
            let orig = probe[p].data[i];
            probe[p].data[i] = orig + eps;
            let fp = eval(&probe)?;
            probe[p].data[i] = orig - eps;
            let fm = eval(&probe)?;
            probe[p].data[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let ad = ga.data[i];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Named parameter tensors in a stable (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, Tensor>,
}

/// Graph handles of a [`ParamStore`] bound into one graph.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradient tensors keyed like the store; zeros where nothing flowed.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VFCK";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn n_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Binds every tensor as a trainable leaf (or as constants when `trainable` is false).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Checkpoint layout, little endian: magic `VFCK`, u32 version, u32 tensor
    /// count, then per tensor (sorted by name): u32 name length, UTF-8 name,
    /// u32 rank, u64 dims, f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.n_values());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.f64s(n)?;
            store.insert(name, Tensor { shape, data });
        }
        r.finish()?;
        Ok(store)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.what, "unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if (self.bytes.len() - self.pos) / 8 < n {
            return Err(Error::format(self.what, "unexpected end of data"));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.what, "trailing bytes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One Adam update with bias correction. Parameters without a gradient entry
/// are left untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::domain(format!("gradient for unknown parameter {name}")))?;
        if p.shape != g.shape {
            return Err(Error::shape("adam_step", format!("{name}: {:?} vs {:?}", p.shape, g.shape)));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
        for i in 0..g.numel() {
            let gi = g.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p.data[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
