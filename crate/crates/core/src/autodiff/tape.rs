use rand::Rng;

use super::tensor::{gemm, gemm_nt, gemm_tn_acc};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout { a: Var, mask: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape(Var),
    MseLoss { pred: Var, target: Tensor },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is already a topological
/// order, so the reverse sweep is a single pass from the seed node down.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one reverse sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Records a parameter read; its gradient flows back into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// `a (..., k) x b (k, n) -> (..., n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let k = *sa.last().unwrap_or(&0);
        if sb.len() != 2 || sb[0] != k || sa.is_empty() {
            return Err(Error::shape("matmul", sa, sb));
        }
        let n = sb[1];
        let rows = self.value(a).numel() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let out = gemm(self.value(a).data(), self.value(b).data(), rows, k, n);
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), "matmul")
    }

    /// Batched product `(B, m, k) x (B, k, n)`, or `(B, m, k) x (B, n, k)^T`
    /// when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            let ab = &va[i * m * k..(i + 1) * m * k];
            let bb = &vb[i * k * n..(i + 1) * k * n];
            out.extend(if transpose_b {
                gemm_nt(ab, bb, m, k, n)
            } else {
                gemm(ab, bb, m, k, n)
            });
        }
        self.push(
            Tensor::new([batch, m, n], out)?,
            Op::BatchMatMul { a, b, transpose_b },
            "bmm",
        )
    }

    /// Elementwise sum; `b` may also be broadcast over the leading axes of
    /// `a` when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let vb = self.value(b).data();
        let period = vb.len();
        let mut out = self.value(a).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += vb[i % period];
        }
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, op, name)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let c = out.last_dim();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, Op::Softmax(a), "softmax")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(a), self.shape(gamma)));
        }
        let x = self.value(a);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = x.clone();
        let mut xhat = vec![0.0; x.numel()];
        let rows = x.numel() / d;
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out.data_mut()[r * d + j] = g[j] * h + bt[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Inverted dropout. Eval mode and `p == 0` return `a` unchanged.
    pub fn dropout(&mut self, a: Var, p: f64, mode: Mode, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mut rng = rng::keyed(seed, Stream::Dropout, &[]);
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut out = self.value(a).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { a, mask }, "dropout")
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.concat_all(&[a, b], axis)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat_all(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rest = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = around(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, len]));
        }
        let (outer, extent, inner) = around(&s, axis);
        let v = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Slice { a, axis, start }, "slice")
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape("mse_loss", p.shape(), target.shape()));
        }
        let n = p.numel() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::MseLoss {
                pred,
                target: target.clone(),
            },
            "mse_loss",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Sign pattern of every ReLU input, used to detect kinks crossed by a
    /// finite-difference probe.
    pub fn relu_signature(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a)),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        self.gradients_with_seed(loss, &Tensor::full(shape.to_vec(), 1.0))
    }

    /// Vector-Jacobian product: reverse sweep seeded with `seed` at `out`.
    pub fn gradients_with_seed(&self, out: Var, seed: &Tensor) -> Result<Gradients> {
        if self.shape(out) != seed.shape() {
            return Err(Error::shape("backward seed", self.shape(out), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.clone());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse sweep from `loss`, adding parameter gradients into `store`.
    /// Repeated calls accumulate.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let rows = va.numel() / k.max(1);
                let da = gemm_nt(g.data(), vb.data(), rows, n, k);
                accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                let mut db = vec![0.0; k * n];
                gemm_tn_acc(va.data(), g.data(), rows, k, n, &mut db);
                accumulate(grads, *b, Tensor::new([k, n], db)?);
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = g.shape()[2];
                let mut da = Vec::with_capacity(va.numel());
                let mut db = vec![0.0; vb.numel()];
                for t in 0..batch {
                    let ga = &g.data()[t * m * n..(t + 1) * m * n];
                    let ab = &va.data()[t * m * k..(t + 1) * m * k];
                    let bb = &vb.data()[t * k * n..(t + 1) * k * n];
                    let dbb = &mut db[t * k * n..(t + 1) * k * n];
                    if *transpose_b {
                        da.extend(gemm(ga, bb, m, n, k));
                        gemm_tn_acc(ga, ab, m, n, k, dbb);
                    } else {
                        da.extend(gemm_nt(ga, bb, m, n, k));
                        gemm_tn_acc(ab, ga, m, k, n, dbb);
                    }
                }
                accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), db)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                let vb = self.value(*b);
                let period = vb.numel();
                let mut db = vec![0.0; period];
                for (j, v) in g.data().iter().enumerate() {
                    db[j % period] += v;
                }
                accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), db)?);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, zip(g, vb, |x, y| x * y));
                accumulate(grads, *b, zip(g, va, |x, y| x * y));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, zip(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                accumulate(grads, *a, zip(g, &node.value, |gv, y| gv * y * (1.0 - y)));
            }
            Op::Tanh(a) => {
                accumulate(grads, *a, zip(g, &node.value, |gv, y| gv * (1.0 - y * y)));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    dx.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).numel();
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xhat.len()];
                for (r, inv) in inv_std.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gm[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        dx[r * d + j] =
                            inv / d as f64 * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), dx)?);
                accumulate(grads, *gamma, Tensor::new([d], dgamma)?);
                accumulate(grads, *beta, Tensor::new([d], dbeta)?);
            }
            Op::Dropout { a, mask } => {
                let data = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = around(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let sp = self.shape(p).to_vec();
                    let len = sp[*axis];
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    offset += len;
                    accumulate(grads, p, Tensor::new(sp, data)?);
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = self.shape(*a).to_vec();
                let (outer, extent, inner) = around(&sa, *axis);
                let len = g.shape()[*axis];
                let mut data = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    let dst = o * extent * inner + start * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                accumulate(grads, *a, Tensor::new(sa, data)?);
            }
            Op::Reshape(a) => {
                let sa = self.shape(*a).to_vec();
                accumulate(grads, *a, g.clone().reshape(sa)?);
            }
            Op::MseLoss { pred, target } => {
                let p = self.value(*pred);
                let scale = 2.0 * g.data()[0] / p.numel() as f64;
                accumulate(grads, *pred, zip(p, target, |x, y| scale * (x - y)));
            }
            Op::Sum(a) => {
                let sa = self.shape(*a).to_vec();
                accumulate(grads, *a, Tensor::full(sa, g.data()[0]));
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(a.shape().to_vec(), |i| f(a.data()[i], b.data()[i]))
}
