use nalgebra::DMatrix;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    Sum { x: Var, axis: usize },
    SumAll(Var),
    Relu(Var),
    Abs(Var),
    Softmax(Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    RowwiseMatVec { w: Var, x: Var },
    GroupSum { x: Var, group: usize, scale: f64 },
    GroupMax { x: Var, argmax: Vec<usize> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    NllProbs { probs: Var, labels: Vec<usize> },
    FrobeniusSq(Var),
    Solve { a: Var, b: Var },
    NormalizeRows { x: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so parents
/// always precede children.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients returned by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Distance of the recorded evaluation from the nearest non-smooth point
    /// of a differentiable node: the smallest |input| of `relu`/`abs` and the
    /// smallest gap between a group maximum and the best distinct runner-up.
    /// Bit-identical copies (padded members) move together and do not count.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in self.nodes.iter().filter(|n| n.requires_grad) {
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    margin = self.data(*x).iter().fold(margin, |m, v| m.min(v.abs()));
                }
                Op::GroupMax { x, .. } => {
                    let f = node.value.shape[1];
                    let xd = self.data(*x);
                    let group = xd.len() / node.value.data.len().max(1);
                    for (o, &top) in node.value.data.iter().enumerate() {
                        let (gi, c) = (o / f, o % f);
                        for r in gi * group..(gi + 1) * group {
                            let v = xd[r * f + c];
                            if v != top {
                                margin = margin.min(top - v);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite output from {:?}",
                std::mem::discriminant(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Self::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.data(a), m, k, self.data(b), n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    fn broadcast_check(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if is_suffix(self.shape(a), self.shape(b)) && !self.value(b).is_empty() {
            Ok(())
        } else {
            Err(Error::shape(op, self.shape(a), self.shape(b)))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.data(a), self.data(b));
        let mut data = vec![0.0; av.len()];
        for (out, chunk) in data.chunks_exact_mut(bv.len()).zip(av.chunks_exact(bv.len())) {
            for ((o, &x), &y) in out.iter_mut().zip(chunk).zip(bv) {
                *o = f(x, y);
            }
        }
        Tensor {
            shape: self.shape(a).to_vec(),
            data,
        }
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (repeated over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "add")?;
        let t = self.zip_broadcast(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "sub")?;
        let t = self.zip_broadcast(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "mul")?;
        let t = self.zip_broadcast(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|x| x * c).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(d, &n)| d != axis && n != base[d])
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.data(*p)[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("sum", &s, &[axis]));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * n + a) * inner + i];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out }, Op::Sum { x, axis }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data: self.data(x).iter().map(|v| v.max(0.0)).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data: self.data(x).iter().map(|v| v.abs()).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Abs(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| Error::shape("softmax", &s, &[1]))?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(Tensor { shape: s, data }, Op::Softmax(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let data = kernels::transpose(self.data(x), r, c);
        let rg = self.rg(x);
        self.push(Tensor::matrix(c, r, data)?, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Rows of `x[n x f]` picked by `idx`, giving `idx.len() x f`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, f) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", &[n, f], &[bad]));
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            data.extend_from_slice(&xd[i * f..(i + 1) * f]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::matrix(idx.len(), f, data)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Per-row matrix-vector product: row `r` of `w[R x (O*D)]` is read as an
    /// `O x D` matrix and applied to row `r` of `x[R x D]`, giving `R x O`.
    pub fn rowwise_matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (r, od) = self.dims2(w, "rowwise_matvec")?;
        let (r2, d) = self.dims2(x, "rowwise_matvec")?;
        if r != r2 || d == 0 || od % d != 0 {
            return Err(Error::shape("rowwise_matvec", self.shape(w), self.shape(x)));
        }
        let o = od / d;
        let (wd, xd) = (self.data(w), self.data(x));
        let mut out = vec![0.0; r * o];
        for row in 0..r {
            let xr = &xd[row * d..(row + 1) * d];
            let wr = &wd[row * od..(row + 1) * od];
            for (oi, slot) in out[row * o..(row + 1) * o].iter_mut().enumerate() {
                *slot = wr[oi * d..(oi + 1) * d]
                    .iter()
                    .zip(xr)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        let rg = self.rg(w) || self.rg(x);
        self.push(Tensor::matrix(r, o, out)?, Op::RowwiseMatVec { w, x }, rg)
    }

    /// Sums consecutive blocks of `group` rows of `x[(G*group) x F]` and
    /// multiplies by `scale`, giving `G x F`.
    pub fn group_sum(&mut self, x: Var, group: usize, scale: f64) -> Result<Var> {
        let (n, f) = self.dims2(x, "group_sum")?;
        if group == 0 || n % group != 0 {
            return Err(Error::shape("group_sum", &[n, f], &[group]));
        }
        let g = n / group;
        let xd = self.data(x);
        let mut out = vec![0.0; g * f];
        for r in 0..n {
            let dst = &mut out[(r / group) * f..(r / group + 1) * f];
            for (o, v) in dst.iter_mut().zip(&xd[r * f..(r + 1) * f]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let rg = self.rg(x);
        self.push(Tensor::matrix(g, f, out)?, Op::GroupSum { x, group, scale }, rg)
    }

    /// Column-wise max over consecutive blocks of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, f) = self.dims2(x, "group_max")?;
        if group == 0 || n % group != 0 {
            return Err(Error::shape("group_max", &[n, f], &[group]));
        }
        let g = n / group;
        let xd = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; g * f];
        let mut argmax = vec![0usize; g * f];
        for r in 0..n {
            let gi = r / group;
            for c in 0..f {
                let v = xd[r * f + c];
                if v > out[gi * f + c] {
                    out[gi * f + c] = v;
                    argmax[gi * f + c] = r;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(g, f, out)?, Op::GroupMax { x, argmax }, rg)
    }

    /// Batch normalisation of `x[n x f]` over its rows. In train mode the batch
    /// statistics are used and folded into `stats`; in eval mode `stats` is
    /// read only.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: Mode,
    ) -> Result<Var> {
        let (n, f) = self.dims2(x, "batchnorm")?;
        if self.shape(gamma) != [f] || self.shape(beta) != [f] || stats.mean.len() != f {
            return Err(Error::shape("batchnorm", &[n, f], self.shape(gamma)));
        }
        let xd = self.data(x);
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::invalid("train-mode batchnorm needs at least 2 rows"));
                }
                let mut mean = vec![0.0; f];
                for r in 0..n {
                    for c in 0..f {
                        mean[c] += xd[r * f + c];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; f];
                for r in 0..n {
                    for c in 0..f {
                        let d = xd[r * f + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let unbias = n as f64 / (n - 1) as f64;
                for c in 0..f {
                    stats.mean[c] = stats.momentum * stats.mean[c] + (1.0 - stats.momentum) * mean[c];
                    stats.var[c] =
                        stats.momentum * stats.var[c] + (1.0 - stats.momentum) * var[c] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut x_hat = vec![0.0; n * f];
        let mut out = vec![0.0; n * f];
        for r in 0..n {
            for c in 0..f {
                let h = (xd[r * f + c] - mean[c]) * inv_std[c];
                x_hat[r * f + c] = h;
                out[r * f + c] = g[c] * h + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::matrix(n, f, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train: mode == Mode::Train,
            },
            rg,
        )
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", &[n, c], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            loss += lse - row[labels[r]];
            softmax_in_place(row);
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean over rows of `-log probs[label]`.
    pub fn nll_probs(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(probs, "nll_probs")?;
        if labels.len() != n {
            return Err(Error::shape("nll_probs", &[n, c], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let p = self.data(probs);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -p[r * c + l].ln())
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(probs);
        self.push(
            Tensor::scalar(loss),
            Op::NllProbs {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::FrobeniusSq(x), rg)
    }

    /// `A^{-1} B` for square `A`.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, n2) = self.dims2(a, "solve")?;
        let (nb, m) = self.dims2(b, "solve")?;
        if n != n2 || nb != n {
            return Err(Error::shape("solve", self.shape(a), self.shape(b)));
        }
        let x = solve_dense(self.data(a), n, self.data(b), m, false)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, m, x)?, Op::Solve { a, b }, rg)
    }

    /// Each row scaled to unit Euclidean norm (zero rows stay zero).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "normalize_rows")?;
        let mut data = self.data(x).to_vec();
        let mut norms = vec![0.0; r];
        for (i, row) in data.chunks_mut(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = n;
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(r, c, data)?, Op::NormalizeRows { x, norms }, rg)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let da = kernels::matmul_nt(g, m, n, self.data(*b), k);
                    add_into(slot(&self.nodes, grads, *a).expect("rg"), &da);
                }
                if self.rg(*b) {
                    let db = kernels::matmul_tn(self.data(*a), m, k, g, n);
                    add_into(slot(&self.nodes, grads, *b).expect("rg"), &db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(da) = slot(&self.nodes, grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(&self.nodes, grads, *b) {
                    let bl = db.len();
                    for chunk in g.chunks(bl) {
                        db.iter_mut().zip(chunk).for_each(|(d, gv)| *d += sign * gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let bl = bv.len();
                if let Some(da) = slot(&self.nodes, grads, *a) {
                    for (dc, gc) in da.chunks_mut(bl).zip(g.chunks(bl)) {
                        for ((d, gv), bv) in dc.iter_mut().zip(gc).zip(bv) {
                            *d += gv * bv;
                        }
                    }
                }
                if let Some(db) = slot(&self.nodes, grads, *b) {
                    for (ac, gc) in av.chunks(bl).zip(g.chunks(bl)) {
                        for ((d, gv), a) in db.iter_mut().zip(gc).zip(ac) {
                            *d += gv * a;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = slot(&self.nodes, grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
            }
            Op::Concat { parts, axis } => {
                let base = self.shape(parts[0]);
                let (outer, _, inner) = split_axis(base, *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for p in parts {
                        let len = self.shape(*p)[*axis] * inner;
                        if let Some(dp) = slot(&self.nodes, grads, *p) {
                            add_into(&mut dp[o * len..(o + 1) * len], &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
            }
            Op::Sum { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for o in 0..outer {
                        for a in 0..n {
                            for i in 0..inner {
                                dx[(o * n + a) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
            }
            Op::Abs(x) => {
                let xv = self.data(*x);
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * sign(xv[i]);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = *node.value.shape().last().expect("rank >= 1");
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for r in 0..y.len() / c {
                        let (ys, gs) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    add_into(dx, &kernels::transpose(g, c, r));
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::GatherRows { x, idx } => {
                let f = self.shape(*x)[1];
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * f..(i + 1) * f], &g[r * f..(r + 1) * f]);
                    }
                }
            }
            Op::RowwiseMatVec { w, x } => {
                let (r, od) = (self.shape(*w)[0], self.shape(*w)[1]);
                let d = self.shape(*x)[1];
                let o = od / d;
                let (wv, xv) = (self.data(*w), self.data(*x));
                if let Some(dw) = slot(&self.nodes, grads, *w) {
                    for row in 0..r {
                        let xr = &xv[row * d..(row + 1) * d];
                        for oi in 0..o {
                            let gv = g[row * o + oi];
                            let dst = &mut dw[row * od + oi * d..row * od + (oi + 1) * d];
                            dst.iter_mut().zip(xr).for_each(|(a, b)| *a += gv * b);
                        }
                    }
                }
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for row in 0..r {
                        let dst = &mut dx[row * d..(row + 1) * d];
                        for oi in 0..o {
                            let gv = g[row * o + oi];
                            let src = &wv[row * od + oi * d..row * od + (oi + 1) * d];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += gv * b);
                        }
                    }
                }
            }
            Op::GroupSum { x, group, scale } => {
                let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for r in 0..n {
                        let src = &g[(r / group) * f..(r / group + 1) * f];
                        dx[r * f..(r + 1) * f]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += scale * s);
                    }
                }
            }
            Op::GroupMax { x, argmax, .. } => {
                let f = self.shape(*x)[1];
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for (slot, &r) in argmax.iter().enumerate() {
                        dx[r * f + slot % f] += g[slot];
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train,
            } => {
                let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gm = self.data(*gamma);
                let mut sum_g = vec![0.0; f];
                let mut sum_gx = vec![0.0; f];
                for r in 0..n {
                    for c in 0..f {
                        sum_g[c] += g[r * f + c];
                        sum_gx[c] += g[r * f + c] * x_hat[r * f + c];
                    }
                }
                if let Some(dg) = slot(&self.nodes, grads, *gamma) {
                    add_into(dg, &sum_gx);
                }
                if let Some(db) = slot(&self.nodes, grads, *beta) {
                    add_into(db, &sum_g);
                }
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    let nf = n as f64;
                    for r in 0..n {
                        for c in 0..f {
                            let i = r * f + c;
                            dx[i] += if *train {
                                gm[c] * inv_std[c] / nf
                                    * (nf * g[i] - sum_g[c] - x_hat[i] * sum_gx[c])
                            } else {
                                gm[c] * inv_std[c] * g[i]
                            };
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                if let Some(dl) = slot(&self.nodes, grads, *logits) {
                    let s = g[0] / n as f64;
                    for r in 0..n {
                        for j in 0..c {
                            let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                            dl[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::NllProbs { probs, labels } => {
                let n = labels.len();
                let c = self.shape(*probs)[1];
                let p = self.data(*probs);
                if let Some(dp) = slot(&self.nodes, grads, *probs) {
                    for (r, &l) in labels.iter().enumerate() {
                        dp[r * c + l] -= g[0] / (n as f64 * p[r * c + l]);
                    }
                }
            }
            Op::FrobeniusSq(x) => {
                let xv = self.data(*x);
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    dx.iter_mut().zip(xv).for_each(|(d, v)| *d += 2.0 * g[0] * v);
                }
            }
            Op::Solve { a, b } => {
                let n = self.shape(*a)[0];
                let m = self.shape(*b)[1];
                // dB = A^{-T} dX, dA = -dB X^T
                let db = solve_dense(self.data(*a), n, g, m, true)?;
                if let Some(dbv) = slot(&self.nodes, grads, *b) {
                    add_into(dbv, &db);
                }
                if let Some(da) = slot(&self.nodes, grads, *a) {
                    let dax = kernels::matmul_nt(&db, n, m, node.value.data(), n);
                    da.iter_mut().zip(&dax).for_each(|(d, v)| *d -= v);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let c = self.shape(*x)[1];
                let y = node.value.data();
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for (r, &nr) in norms.iter().enumerate() {
                        if nr == 0.0 {
                            continue;
                        }
                        let (ys, gs) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] += (gs[j] - ys[j] * dot) / nr;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Solves `A X = B` (or `A^T X = B`) for row-major `A[n x n]`, `B[n x m]`.
fn solve_dense(a: &[f64], n: usize, b: &[f64], m: usize, transpose_a: bool) -> Result<Vec<f64>> {
    let mut am = DMatrix::from_row_slice(n, n, a);
    if transpose_a {
        am.transpose_mut();
    }
    let bm = DMatrix::from_row_slice(n, m, b);
    let x = am
        .lu()
        .solve(&bm)
        .ok_or_else(|| Error::Numerical("solve: singular matrix".into()))?;
    Ok(kernels::transpose(x.as_slice(), m, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn kink_margin_sees_relu_inputs_and_max_gaps() {
        let mut g = Graph::new();
        let x = g.leaf(m(4, 1, &[0.5, -0.02, 0.5, 0.3]));
        g.relu(x).unwrap();
        assert!((g.kink_margin() - 0.02).abs() < 1e-15);
        // duplicated maxima are one member; the runner-up gap is 0.2
        g.group_max(x, 4).unwrap();
        assert!((g.kink_margin() - 0.02).abs() < 1e-15);
        let mut h = Graph::new();
        let y = h.leaf(m(4, 1, &[0.5, 0.1, 0.5, 0.3]));
        h.group_max(y, 4).unwrap();
        assert!((h.kink_margin() - 0.2).abs() < 1e-15);
        let mut c = Graph::new();
        let z = c.constant(m(1, 1, &[0.0]));
        c.relu(z).unwrap();
        assert_eq!(c.kink_margin(), f64::INFINITY);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a = m(3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.5]);
        let i = g.constant(m(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let av = g.constant(a.clone());
        let p = g.matmul(i, av).unwrap();
        assert_eq!(g.value(p), &a);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let e = g.matmul(a, b).unwrap_err().to_string();
        assert!(e.contains("matmul") && e.contains("[2, 3]"), "{e}");
        let c = g.constant(Tensor::zeros(&[2]));
        let e = g.add(a, c).unwrap_err().to_string();
        assert!(e.contains("add") && e.contains("[2]"), "{e}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let s = g.softmax(x).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn confident_cross_entropy_vanishes() {
        let mut g = Graph::new();
        let x = g.constant(m(1, 3, &[1e3, 0.0, 0.0]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!(g.value(l).item() <= 1e-6);
    }

    #[test]
    fn backward_reaches_only_leaves_in_use() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.leaf(Tensor::vector(vec![3.0]));
        let c = g.constant(Tensor::vector(vec![5.0, 7.0]));
        let p = g.mul(a, c).unwrap();
        let s = g.sum_all(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[5.0, 7.0]);
        assert!(grads.get(unused).is_none());
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(3.0));
        let b = g.mul(a, a).unwrap();
        let c = g.add(b, a).unwrap();
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[7.0]);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut g = Graph::new();
        let mut s = BatchNormStats::new(1);
        let x = g.constant(m(4, 1, &[1.0, 2.0, 3.0, 6.0]));
        let gm = g.constant(Tensor::vector(vec![1.0]));
        let bt = g.constant(Tensor::vector(vec![0.0]));
        g.batchnorm(x, gm, bt, &mut s, Mode::Train).unwrap();
        // batch mean 3, unbiased var 14/3
        assert!((s.mean[0] - 0.3).abs() < 1e-12);
        assert!((s.var[0] - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-12);
        let before = s.clone();
        let y = g.batchnorm(x, gm, bt, &mut s, Mode::Eval).unwrap();
        assert_eq!(s, before);
        let expect = (1.0 - 0.3) / (s.var[0] + 1e-5).sqrt();
        assert!((g.value(y).data()[0] - expect).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_rows_form_a_simplex(v in prop::collection::vec(-50.0f64..50.0, 12)) {
            let mut g = Graph::new();
            let x = g.constant(m(3, 4, &v));
            let s = g.softmax(x).unwrap();
            for row in g.value(s).data().chunks(4) {
                prop_assert!(row.iter().all(|p| *p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn batchnorm_train_standardises(
            v in prop::collection::vec(-100.0f64..100.0, 8 * 2..=16 * 2),
        ) {
            let n = v.len() / 2;
            let mut data = v[..n * 2].to_vec();
            // keep the per-feature spread well above eps
            for (i, x) in data.iter_mut().enumerate() {
                *x += (i / 2) as f64 * 10.0;
            }
            let mut g = Graph::new();
            let mut s = BatchNormStats::new(2);
            let x = g.constant(m(n, 2, &data));
            let gm = g.constant(Tensor::vector(vec![1.0, 1.0]));
            let bt = g.constant(Tensor::vector(vec![0.0, 0.0]));
            let y = g.batchnorm(x, gm, bt, &mut s, Mode::Train).unwrap();
            let y = g.value(y);
            for c in 0..2 {
                let col: Vec<f64> = (0..n).map(|r| y.at(r, c)).collect();
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                prop_assert!(mean.abs() < 1e-6);
                prop_assert!((var - 1.0).abs() < 1e-6, "var {}", var);
            }
        }
    }
}
