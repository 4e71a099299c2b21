use super::kernels::{self, split_axis};
use super::Tensor;
use crate::error::{dim_err, Result, TspmError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    AddBias { x: Var, bias: Var },
    Softmax { x: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
    Concat { inputs: Vec<Var>, axis: usize },
    Mean { x: Var, axis: usize },
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    Sum { x: Var },
    Reshape { x: Var },
    GatherRows { x: Var, rows: Vec<usize> },
    StraightThrough { x: Var, w: Var },
    Gelu { x: Var },
    Tanh { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Narrow { x: Var, start: usize, len: usize },
    CombineRows { x: Var, groups: Vec<Vec<(usize, f32)>> },
    Repeat { x: Var, axis: usize, times: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
}

/// Records forward operations so gradients can be replayed in reverse.
///
/// Leaves keep accumulated gradients in their tensor's grad buffer; repeated
/// `backward` calls add to it until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor. Its `requires_grad` flag decides whether
    /// gradients are collected for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Record a tensor that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf)
    }

    /// Record a named trainable parameter (copied; the caller keeps the original).
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        let mut t = value.clone().with_requires_grad(true);
        t.zero_grad();
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    /// Named parameters recorded on this tape, with their handles.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.as_deref().map(|name| (name, Var(i))))
    }

    /// Move accumulated parameter gradients out of the tape.
    pub fn take_param_grads(&mut self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            if let Some(name) = &node.param {
                if let Some(g) = node.value.take_grad() {
                    out.push((name.clone(), g));
                }
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.needs_grad(v));
        self.push(value.with_requires_grad(rg), op)
    }

    // ---- forward ops -------------------------------------------------

    /// Batched matrix product. `a` is `[.., n, k]`; `b` is either `[k, m]`
    /// (shared across the batch) or `[.., k, m]` with the same batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, n, k, m) = matmul_dims(&sa, &sb)?;
        let mut out = vec![0.0; batch * n * m];
        let shared_b = sb.len() == 2;
        kernels::batched_matmul(self.data(a), self.data(b), batch, n, k, m, shared_b, &mut out);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(m);
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(t, Op::MatMul { a, b }, &[a, b]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(dim_err("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product::<usize>();
        let d = self.data(x);
        let mut out = Vec::with_capacity(d.len());
        for b in 0..batch {
            out.extend(kernels::transpose(&d[b * r * c..(b + 1) * r * c], r, c));
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(t, Op::Transpose { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.derived(t, Op::Add { a, b }, &[a, b]))
    }

    /// Element-wise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise_mul", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.derived(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.derived(t, Op::Scale { x, c }, &[x])
    }

    /// Add a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(dim_err("add_bias", sx, sb));
        }
        let n = sb[0];
        let b = self.data(bias);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.derived(t, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `x · weight + bias` with `weight` stored as `[in, out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let y = if s.len() == 1 {
            let x2 = self.reshape(x, &[1, s[0]])?;
            let y = self.matmul(x2, weight)?;
            let m = self.shape(y)[1];
            self.reshape(y, &[m])?
        } else {
            self.matmul(x, weight)?
        };
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(dim_err("softmax", &s, &[axis]));
        }
        let (o, l, i) = split_axis(&s, axis);
        let out = kernels::softmax(self.data(x), o, l, i);
        let t = Tensor::new(s, out)?;
        Ok(self.derived(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    /// `logits` is `[C]` (one label) or `[B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (rows, c) = match s.as_slice() {
            [c] => (1, *c),
            [b, c] => (*b, *c),
            _ => return Err(dim_err("cross_entropy", &s, &[labels.len()])),
        };
        if labels.len() != rows {
            return Err(dim_err("cross_entropy", &s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TspmError::Index {
                what: "answer label",
                index: bad,
                len: c,
            });
        }
        let d = self.data(logits);
        let mut total = 0f64;
        let mut probs = Vec::with_capacity(d.len());
        for (r, &label) in labels.iter().enumerate() {
            let row = &d[r * c..(r + 1) * c];
            let lse = kernels::log_sum_exp(row);
            total += lse - row[label] as f64;
            probs.extend(row.iter().map(|&v| (v as f64 - lse).exp() as f32));
        }
        let t = Tensor::scalar((total / rows as f64) as f32);
        Ok(self.derived(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(dim_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.data(v);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Mean over `axis`, removing it. Reducing a rank-1 tensor yields a scalar.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(dim_err("mean", &s, &[axis]));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let sum: f64 = (0..len).map(|j| d[(o * len + j) * inner + i] as f64).sum();
                out[o * inner + i] = (sum / len as f64) as f32;
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(t, Op::Mean { x, axis }, &[x]))
    }

    /// Max over `axis`, removing it. Gradient goes to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(dim_err("max_axis", &s, &[axis]));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..len {
                    if d[(o * len + j) * inner + i] > d[(o * len + best) * inner + i] {
                        best = j;
                    }
                }
                out[o * inner + i] = d[(o * len + best) * inner + i];
                argmax[o * inner + i] = best;
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(t, Op::MaxAxis { x, axis, argmax }, &[x]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        self.derived(Tensor::scalar(s as f32), Op::Sum { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(t, Op::Reshape { x }, &[x]))
    }

    /// Select rows of `x` viewed as `[N, rest]`; output is `[rows.len(), ..]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = s[0];
        let width = self.value(x).numel() / n;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TspmError::Index {
                what: "gather row",
                index: bad,
                len: n,
            });
        }
        if rows.is_empty() {
            return Err(TspmError::Contract("gather of zero rows".into()));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&d[r * width..(r + 1) * width]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Forward: an exact copy of `x`. Backward: as if each row `i` of `x`
    /// had been scaled by `w[i]` at `w[i] = 1`, so `w` receives `Σ_j g_ij·x_ij`.
    pub fn straight_through(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 1 || sx[0] != sw[0] {
            return Err(dim_err("straight_through", sx, sw));
        }
        let t = self.value(x).clone().with_requires_grad(false);
        Ok(self.derived(t, Op::StraightThrough { x, w }, &[x, w]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.derived(t, Op::Gelu { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| v.tanh()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.derived(t, Op::Tanh { x }, &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().expect("rank >= 1");
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(dim_err("layer_norm", &s, self.shape(gamma)));
        }
        let d = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = d.len() / n;
        let mut xhat = vec![0.0; d.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..n {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(s, out)?;
        Ok(self.derived(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Slice `len` entries of the last axis starting at `start`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().expect("rank >= 1");
        if len == 0 || start + len > n {
            return Err(dim_err("narrow", &s, &[start, len]));
        }
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().expect("rank >= 1") = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(t, Op::Narrow { x, start, len }, &[x]))
    }

    /// Weighted row combination of `x` viewed as `[N, D]`: output row `g` is
    /// `Σ w · x[i]` over `(i, w)` in `groups[g]`. `shape` is the output shape.
    pub fn combine_rows(
        &mut self,
        x: Var,
        groups: Vec<Vec<(usize, f32)>>,
        shape: &[usize],
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().expect("rank >= 1");
        let n = self.value(x).numel() / width;
        if shape.iter().product::<usize>() != groups.len() * width {
            return Err(dim_err("combine_rows", &s, shape));
        }
        let d = self.data(x);
        let mut out = vec![0.0; groups.len() * width];
        for (g, members) in groups.iter().enumerate() {
            let mut acc = vec![0f64; width];
            for &(i, w) in members {
                if i >= n {
                    return Err(TspmError::Index {
                        what: "combine row",
                        index: i,
                        len: n,
                    });
                }
                for (a, &v) in acc.iter_mut().zip(&d[i * width..(i + 1) * width]) {
                    *a += w as f64 * v as f64;
                }
            }
            for (o, a) in out[g * width..(g + 1) * width].iter_mut().zip(acc) {
                *o = a as f32;
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        Ok(self.derived(t, Op::CombineRows { x, groups }, &[x]))
    }

    /// Expand a size-1 `axis` to `times` copies.
    pub fn repeat_axis(&mut self, x: Var, axis: usize, times: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] != 1 || times == 0 {
            return Err(dim_err("repeat_axis", &s, &[axis, times]));
        }
        let (outer, _, inner) = split_axis(&s, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * times * inner);
        for o in 0..outer {
            for _ in 0..times {
                out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s;
        shape[axis] = times;
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(t, Op::Repeat { x, axis, times }, &[x]))
    }

    /// `softmax(q·kᵀ/√d)·v`; returns the output and the attention weights.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        let rank = sq.len();
        if rank < 2
            || sk.len() != rank
            || sv.len() != rank
            || sq[rank - 1] != sk[rank - 1]
            || sk[rank - 2] != sv[rank - 2]
            || sq[..rank - 2] != sk[..rank - 2]
            || sk[..rank - 2] != sv[..rank - 2]
        {
            return Err(dim_err("scaled_dot_attention", &sq, &sk));
        }
        let d = sq[rank - 1];
        let kt = self.transpose(k)?;
        let scores = self.batched_matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / (d as f32).sqrt());
        let weights = self.softmax(scores, rank - 1)?;
        let out = self.batched_matmul(weights, v)?;
        Ok((out, weights))
    }

    // Matmul where both sides carry the same batch dims, including rank-2.
    fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() == 2 {
            let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
            let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
            let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
            let y = self.matmul(a3, b3)?;
            return self.reshape(y, &[sa[0], sb[1]]);
        }
        self.matmul(a, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- reverse pass ------------------------------------------------

    /// Accumulate d`loss`/d`leaf` into every reachable leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TspmError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (input, delta) in self.local_grads(i, &g)? {
                if !self.needs_grad(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (batch, n, k, m) = matmul_dims(sa, sb)?;
                let shared_b = sb.len() == 2;
                let (da, db) = (self.data(a), self.data(b));
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                if shared_b {
                    let bt = kernels::transpose(db, k, m);
                    kernels::matmul(g, &bt, batch * n, m, k, &mut ga);
                    let at = kernels::transpose(da, batch * n, k);
                    kernels::matmul(&at, g, k, batch * n, m, &mut gb);
                } else {
                    let bt = batched_transpose(db, batch, k, m);
                    kernels::batched_matmul(g, &bt, batch, n, m, k, false, &mut ga);
                    let at = batched_transpose(da, batch, n, k);
                    kernels::batched_matmul(&at, g, batch, k, n, m, false, &mut gb);
                }
                vec![(a, ga), (b, gb)]
            }
            &Op::Transpose { x } => {
                let s = self.shape(x);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c);
                let mut gx = Vec::with_capacity(g.len());
                for b in 0..batch {
                    gx.extend(kernels::transpose(&g[b * r * c..(b + 1) * r * c], c, r));
                }
                vec![(x, gx)]
            }
            &Op::Add { a, b } => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Mul { a, b } => vec![
                (a, zip_map(g, self.data(b), |g, y| g * y)),
                (b, zip_map(g, self.data(a), |g, x| g * x)),
            ],
            &Op::Scale { x, c } => vec![(x, g.iter().map(|v| v * c).collect())],
            &Op::AddBias { x, bias } => {
                let n = self.shape(bias)[0];
                let mut gb = vec![0f64; n];
                for (j, &v) in g.iter().enumerate() {
                    gb[j % n] += v as f64;
                }
                vec![(x, g.to_vec()), (bias, gb.into_iter().map(|v| v as f32).collect())]
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), axis);
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let dotp: f64 = (0..len).map(|j| g[idx(j)] as f64 * y[idx(j)] as f64).sum();
                        for j in 0..len {
                            gx[idx(j)] = (y[idx(j)] as f64 * (g[idx(j)] as f64 - dotp)) as f32;
                        }
                    }
                }
                vec![(x, gx)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let rows = labels.len();
                let c = probs.len() / rows;
                let scale = g[0] / rows as f32;
                let mut gx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * c + l] -= scale;
                }
                vec![(*logits, gx)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut res = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut gv = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gv.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    res.push((v, gv));
                }
                res
            }
            &Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(x), axis);
                let mut gx = vec![0.0; outer * len * inner];
                let inv = 1.0 / len as f32;
                for o in 0..outer {
                    for j in 0..len {
                        for ii in 0..inner {
                            gx[(o * len + j) * inner + ii] = g[o * inner + ii] * inv;
                        }
                    }
                }
                vec![(x, gx)]
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for ii in 0..inner {
                        let j = argmax[o * inner + ii];
                        gx[(o * len + j) * inner + ii] = g[o * inner + ii];
                    }
                }
                vec![(*x, gx)]
            }
            &Op::Sum { x } => vec![(x, vec![g[0]; self.value(x).numel()])],
            &Op::Reshape { x } => vec![(x, g.to_vec())],
            Op::GatherRows { x, rows } => {
                let n = self.shape(*x)[0];
                let width = self.value(*x).numel() / n;
                let mut gx = vec![0.0; n * width];
                for (k, &r) in rows.iter().enumerate() {
                    gx[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(&g[k * width..(k + 1) * width])
                        .for_each(|(a, b)| *a += b);
                }
                vec![(*x, gx)]
            }
            &Op::StraightThrough { x, w } => {
                let rows = self.shape(w)[0];
                let width = g.len() / rows;
                let d = self.data(x);
                let gw = (0..rows)
                    .map(|r| {
                        kernels::dot(&g[r * width..(r + 1) * width], &d[r * width..(r + 1) * width])
                            as f32
                    })
                    .collect();
                vec![(x, g.to_vec()), (w, gw)]
            }
            &Op::Gelu { x } => vec![(
                x,
                zip_map(g, self.data(x), |g, v| g * kernels::gelu_grad(v)),
            )],
            &Op::Tanh { x } => vec![(x, zip_map(g, out.data(), |g, y| g * (1.0 - y * y)))],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.shape(*gamma)[0];
                let gam = self.data(*gamma);
                let rows = g.len() / n;
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0f64; n];
                let mut gbeta = vec![0f64; n];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0f64;
                    let mut mean_dh = 0f64;
                    for j in 0..n {
                        let dh = gr[j] as f64 * gam[j] as f64;
                        mean_d += dh;
                        mean_dh += dh * hr[j] as f64;
                        gg[j] += gr[j] as f64 * hr[j] as f64;
                        gbeta[j] += gr[j] as f64;
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for j in 0..n {
                        let dh = gr[j] as f64 * gam[j] as f64;
                        gx[r * n + j] =
                            (rstd[r] as f64 * (dh - mean_d - hr[j] as f64 * mean_dh)) as f32;
                    }
                }
                vec![
                    (*x, gx),
                    (*gamma, gg.into_iter().map(|v| v as f32).collect()),
                    (*beta, gbeta.into_iter().map(|v| v as f32).collect()),
                ]
            }
            &Op::Narrow { x, start, len } => {
                let n = *self.shape(x).last().expect("rank >= 1");
                let rows = g.len() / len;
                let mut gx = vec![0.0; rows * n];
                for r in 0..rows {
                    gx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![(x, gx)]
            }
            Op::CombineRows { x, groups } => {
                let width = *self.shape(*x).last().expect("rank >= 1");
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (gi, members) in groups.iter().enumerate() {
                    let gr = &g[gi * width..(gi + 1) * width];
                    for &(i, w) in members {
                        gx[i * width..(i + 1) * width]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(a, b)| *a += w * b);
                    }
                }
                vec![(*x, gx)]
            }
            &Op::Repeat { x, axis, times } => {
                let (outer, _, inner) = split_axis(self.shape(x), axis);
                let mut gx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for t in 0..times {
                        let base = (o * times + t) * inner;
                        gx[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(&g[base..base + inner])
                            .for_each(|(a, b)| *a += b);
                    }
                }
                vec![(x, gx)]
            }
        })
    }
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn batched_transpose(x: &[f32], batch: usize, r: usize, c: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for b in 0..batch {
        out.extend(kernels::transpose(&x[b * r * c..(b + 1) * r * c], r, c));
    }
    out
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(dim_err("matmul", sa, sb));
    }
    let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    let batch_a = &sa[..sa.len() - 2];
    let batch_b = &sb[..sb.len() - 2];
    if k != kb || !(batch_b.is_empty() || batch_a == batch_b) {
        return Err(dim_err("matmul", sa, sb));
    }
    Ok((batch_a.iter().product(), n, k, m))
}
