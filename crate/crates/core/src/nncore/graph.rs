//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and applies each node's adjoint rule. Nodes are
//! appended in evaluation order, so the tape is already topologically sorted.
//!
//! ```
//! use mage_core::nncore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
//! ```

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MixFrames {
        w: Var,
        x: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Mse(Var, Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// A recording of one forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFiniteValue(op))
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input or constant; gradients are still reported for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Copies a parameter onto the tape; [`Graph::backward_into`] routes its
    /// gradient back to the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, false);
        let t = finite(Tensor::new(&[m, n], out)?, "matmul")?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `x·W + b` over the last axis of `x`; `W` is `[in, out]`, `b` is `[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        let k = *sx.last().ok_or_else(|| Error::shape("affine", "scalar input"))?;
        if sw.len() != 2 || sw[0] != k {
            return Err(Error::shape("affine", format!("x {sx:?}, W {sw:?}")));
        }
        let n = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape("affine", format!("bias {:?}, want [{n}]", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / k.max(1);
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_exact_mut(n) {
                r.copy_from_slice(bv);
            }
        }
        gemm(rows, k, n, self.value(x).data(), (k, 1), self.value(w).data(), (n, 1), &mut out, b.is_some());
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let t = finite(Tensor::new(&shape, out)?, "affine")?;
        Ok(self.push(t, Op::Affine { x, w, b }))
    }

    /// Mixes along the frame axis: `y[b] = W·x[b] + bias` with `x` of shape
    /// `[B, frames_in, D]`, `W` `[frames_out, frames_in]`, bias `[frames_out]`
    /// broadcast over features.
    pub fn mix_frames(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[1] {
            return Err(Error::shape("mix_frames", format!("W {sw:?}, x {sx:?}")));
        }
        let (bs, m, d) = (sx[0], sx[1], sx[2]);
        let n = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape("mix_frames", format!("bias {:?}", self.shape(b))));
            }
        }
        let mut out = vec![0.0; bs * n * d];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..bs {
                let y = &mut out[bi * n * d..(bi + 1) * n * d];
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (i, row) in y.chunks_exact_mut(d).enumerate() {
                        row.fill(bv[i]);
                    }
                }
                gemm(n, m, d, wv, (m, 1), &xv[bi * m * d..], (d, 1), y, b.is_some());
            }
        }
        let t = finite(Tensor::new(&[bs, n, d], out)?, "mix_frames")?;
        Ok(self.push(t, Op::MixFrames { w, x, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = finite(self.value(a).zip_map(self.value(b), |x, y| x + y), "add")?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = finite(self.value(a).zip_map(self.value(b), |x, y| x - y), "sub")?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = finite(self.value(a).zip_map(self.value(b), |x, y| x * y), "mul")?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = finite(self.value(a).map(|x| x * c), "scale")?;
        Ok(self.push(t, Op::Scale(a, c)))
    }

    /// `x + e` where `x` is `[B, N, D]` and `e` is `[B, D]`, broadcast over `N`.
    pub fn add_broadcast(&mut self, x: Var, e: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let se = self.shape(e);
        if sx.len() != 3 || se != [sx[0], sx[2]] {
            return Err(Error::shape("add_broadcast", format!("x {sx:?}, e {se:?}")));
        }
        let (bs, n, d) = (sx[0], sx[1], sx[2]);
        let mut out = self.value(x).clone();
        let ev = self.value(e).data();
        {
            let o = out.data_mut();
            for bi in 0..bs {
                let erow = &ev[bi * d..(bi + 1) * d];
                for r in o[bi * n * d..(bi + 1) * n * d].chunks_exact_mut(d) {
                    for (a, b) in r.iter_mut().zip(erow) {
                        *a += b;
                    }
                }
            }
        }
        let t = finite(out, "add_broadcast")?;
        Ok(self.push(t, Op::AddBroadcast(x, e)))
    }

    /// Normalizes over the last axis, then applies per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", format!("features {d}")));
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let t = finite(Tensor::new(xv.shape(), out)?, "layer_norm")?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Sigmoid-weighted linear unit `x·σ(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let t = finite(self.value(x).map(|v| v / (1.0 + (-v).exp())), "silu")?;
        Ok(self.push(t, Op::Silu(x)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = around(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("slice", format!("{s:?} axis {axis} [{start}, +{len})")));
        }
        let (outer, full, inner) = around(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = av.len().max(1) as f64;
        let s = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let t = finite(Tensor::scalar(s), "mse")?;
        Ok(self.push(t, Op::Mse(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let t = finite(Tensor::scalar(s), "sum")?;
        Ok(self.push(t, Op::Sum(x)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Zeroes the store's gradients, runs [`Graph::backward`], and accumulates
    /// into every parameter that appears on the tape.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        store.zero_grad();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, gy.data(), (n, 1), val(*b).data(), (1, n), &mut ga, false);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, val(*a).data(), (1, k), gy.data(), (n, 1), &mut gb, false);
                acc(grads, *a, Tensor::new(sa, ga).unwrap());
                acc(grads, *b, Tensor::new(sb, gb).unwrap());
            }
            Op::Affine { x, w, b } => {
                let sw = val(*w).shape();
                let (k, n) = (sw[0], sw[1]);
                let rows = gy.len() / n.max(1);
                let mut gx = vec![0.0; rows * k];
                gemm(rows, n, k, gy.data(), (n, 1), val(*w).data(), (1, n), &mut gx, false);
                let mut gw = vec![0.0; k * n];
                gemm(k, rows, n, val(*x).data(), (1, k), gy.data(), (n, 1), &mut gw, false);
                if let Some(b) = b {
                    let mut gb = vec![0.0; n];
                    for r in gy.data().chunks_exact(n) {
                        for (a, v) in gb.iter_mut().zip(r) {
                            *a += v;
                        }
                    }
                    acc(grads, *b, Tensor::new(&[n], gb).unwrap());
                }
                acc(grads, *x, Tensor::new(val(*x).shape(), gx).unwrap());
                acc(grads, *w, Tensor::new(sw, gw).unwrap());
            }
            Op::MixFrames { w, x, b } => {
                let sx = val(*x).shape();
                let (bs, m, d) = (sx[0], sx[1], sx[2]);
                let n = val(*w).shape()[0];
                let (xv, wv, g) = (val(*x).data(), val(*w).data(), gy.data());
                let mut gx = vec![0.0; bs * m * d];
                let mut gw = vec![0.0; n * m];
                for bi in 0..bs {
                    let gyb = &g[bi * n * d..(bi + 1) * n * d];
                    // dx[b] = Wᵀ·dy[b]
                    gemm(m, n, d, wv, (1, m), gyb, (d, 1), &mut gx[bi * m * d..(bi + 1) * m * d], false);
                    // dW += dy[b]·x[b]ᵀ
                    gemm(n, d, m, gyb, (d, 1), &xv[bi * m * d..], (1, d), &mut gw, true);
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; n];
                    for bi in 0..bs {
                        for (r, row) in g[bi * n * d..(bi + 1) * n * d].chunks_exact(d).enumerate() {
                            gb[r] += row.iter().sum::<f64>();
                        }
                    }
                    acc(grads, *b, Tensor::new(&[n], gb).unwrap());
                }
                acc(grads, *x, Tensor::new(sx, gx).unwrap());
                acc(grads, *w, Tensor::new(val(*w).shape(), gw).unwrap());
            }
            Op::Add(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, gy.zip_map(val(*b), |g, y| g * y));
                acc(grads, *b, gy.zip_map(val(*a), |g, x| g * x));
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(grads, *a, gy.map(|v| v * c));
            }
            Op::AddBroadcast(x, e) => {
                let sx = val(*x).shape();
                let (bs, n, d) = (sx[0], sx[1], sx[2]);
                let mut ge = vec![0.0; bs * d];
                for bi in 0..bs {
                    for r in gy.data()[bi * n * d..(bi + 1) * n * d].chunks_exact(d) {
                        for (a, v) in ge[bi * d..(bi + 1) * d].iter_mut().zip(r) {
                            *a += v;
                        }
                    }
                }
                acc(grads, *x, gy.clone());
                acc(grads, *e, Tensor::new(&[bs, d], ge).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain).data();
                let d = gv.len();
                let rows = rstd.len();
                let mut gx = vec![0.0; rows * d];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let g = gy.data();
                for r in 0..rows {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for i in 0..d {
                        let dh = g[r * d + i] * gv[i];
                        s1 += dh;
                        s2 += dh * xhat[r * d + i];
                        gg[i] += g[r * d + i] * xhat[r * d + i];
                        gb[i] += g[r * d + i];
                    }
                    let inv_d = 1.0 / d as f64;
                    for i in 0..d {
                        let dh = g[r * d + i] * gv[i];
                        gx[r * d + i] = rstd[r] * (dh - inv_d * s1 - xhat[r * d + i] * inv_d * s2);
                    }
                }
                acc(grads, *x, Tensor::new(val(*x).shape(), gx).unwrap());
                acc(grads, *gain, Tensor::new(&[d], gg).unwrap());
                acc(grads, *bias, Tensor::new(&[d], gb).unwrap());
            }
            Op::Silu(x) => {
                let g = gy.zip_map(val(*x), |g, v| {
                    let s = 1.0 / (1.0 + (-v).exp());
                    g * s * (1.0 + v * (1.0 - s))
                });
                acc(grads, *x, g);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = around(gy.shape(), *axis);
                let total = gy.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis] * inner;
                    let mut out = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        let base = o * total + offset;
                        out.extend_from_slice(&gy.data()[base..base + len]);
                    }
                    offset += len;
                    acc(grads, p, Tensor::new(val(p).shape(), out).unwrap());
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = val(*x).shape();
                let (outer, full, inner) = around(sx, *axis);
                let len = gy.shape()[*axis];
                let mut out = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    out[dst..dst + len * inner]
                        .copy_from_slice(&gy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(grads, *x, Tensor::new(sx, out).unwrap());
            }
            Op::Reshape(x) => {
                acc(grads, *x, gy.clone().reshape(val(*x).shape()).unwrap());
            }
            Op::Mse(a, b) => {
                let n = val(*a).len().max(1) as f64;
                let c = 2.0 * gy.item() / n;
                let ga = val(*a).zip_map(val(*b), |x, y| c * (x - y));
                acc(grads, *b, ga.map(|v| -v));
                acc(grads, *a, ga);
            }
            Op::Sum(x) => {
                acc(grads, *x, Tensor::full(val(*x).shape(), gy.item()));
            }
        }
    }
}
