//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! append a node that records its parents, so the tape order is a
//! topological order by construction and [`Tape::backward`] is a single
//! reverse sweep that visits each node exactly once.
//!
//! ```
//! use patch_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let a = tape.param(Tensor::from_rows(&[&[1.0, 2.0]]));
//! let b = tape.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
//! let c = tape.matmul(a, b).unwrap();
//! let loss = tape.sum(c);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
//! ```
//!
//! Only the operations the pruning pipeline needs are provided, and there
//! is no implicit broadcasting: every expansion is an explicit op.

use crate::error::{Error, Result};
use crate::tensor::{axpy, gemm_acc, gemm_tn_acc, transpose, Tensor};

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
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Silu(Var),
    Softmax {
        x: Var,
        axis_len: usize,
        inner: usize,
        scale: f32,
    },
    SoftmaxMix {
        x: Var,
        probs: Vec<f32>,
        table: Tensor,
        scale: f32,
    },
    Reshape(Var),
    Transpose(Var),
    KronOnes {
        x: Var,
        b1: usize,
        b2: usize,
    },
    TileMerge {
        tiles: Var,
        m: Var,
        b1: usize,
        b2: usize,
    },
    Sum(Var),
    SumSq(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Var, Var),
    SelectCol {
        x: Var,
        col: usize,
    },
    RmsNorm {
        x: Var,
        inv_rms: Vec<f32>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
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

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, or `None` if no gradient reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Resets every tracked gradient buffer to exactly `0.0`.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    // ----- binary ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`; the layout of a linear layer whose
    /// weight is stored `out × in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let bt = transpose(self.data(b), n, k);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.data(a), &bt, &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    // ----- unary ops --------------------------------------------------------

    fn map(&self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let value = self.map(x, |v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let value = self.map(x, |v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.map(x, f32::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.map(x, f32::ln);
        self.push(value, Op::Log(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.map(x, f32::abs);
        self.push(value, Op::Abs(x), &[x])
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| v * sigmoid(v));
        self.push(value, Op::Silu(x), &[x])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_affine(x, axis, 1.0, None)
    }

    /// `softmax(scale·x + offset)` along `axis`; `offset` is a constant of
    /// the same shape as `x`.
    pub fn softmax_affine(&mut self, x: Var, axis: usize, scale: f32, offset: Option<&[f32]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                index: axis,
                bound: shape.len(),
            });
        }
        let src = self.data(x);
        if let Some(off) = offset {
            if off.len() != src.len() {
                return Err(Error::shape("softmax_affine", &shape, &[off.len()]));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out: Vec<f32> = match offset {
            Some(off) => src.iter().zip(off).map(|(&v, &o)| scale * v + o).collect(),
            None => src.iter().map(|&v| scale * v).collect(),
        };
        let mut lane = vec![0.0f32; n];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                for (i, l) in lane.iter_mut().enumerate() {
                    *l = out[at(i)];
                }
                let max = lane.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
                let mut sum = 0.0f32;
                for l in lane.iter_mut() {
                    *l = (*l - max).exp();
                    sum += *l;
                }
                for (i, &l) in lane.iter().enumerate() {
                    out[at(i)] = l / sum;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                axis_len: n,
                inner,
                scale,
            },
            &[x],
        ))
    }

    /// For `x: k × g`, takes the softmax of `scale · x[:, j] + offset[j]` for
    /// every column `j` and mixes the rows of `table: k × c` with it. The
    /// result has `g · c` elements laid out as `out_shape`; `offset` is
    /// stored column-major (`g × k`).
    ///
    /// Same values as transpose, [`softmax_affine`](Self::softmax_affine),
    /// matmul with `table`, then reshape; the result stays bit-identical.
    pub fn softmax_mix(
        &mut self,
        x: Var,
        table: &Tensor,
        scale: f32,
        offset: Option<&[f32]>,
        out_shape: &[usize],
    ) -> Result<Var> {
        let (k, g) = self.value(x).dims2()?;
        let (tk, c) = table.dims2()?;
        if tk != k {
            return Err(Error::shape("softmax_mix", self.shape(x), table.shape()));
        }
        if let Some(off) = offset {
            if off.len() != k * g {
                return Err(Error::shape("softmax_mix", &[g, k], &[off.len()]));
            }
        }
        if out_shape.iter().product::<usize>() != g * c {
            return Err(Error::shape("softmax_mix", &[g, c], out_shape));
        }
        let src = self.data(x);
        let t = table.data();
        let mut probs = vec![0.0f32; g * k];
        let mut out = vec![0.0f32; g * c];
        for j in 0..g {
            let lane = &mut probs[j * k..(j + 1) * k];
            for (i, l) in lane.iter_mut().enumerate() {
                *l = match offset {
                    Some(off) => scale * src[i * g + j] + off[j * k + i],
                    None => scale * src[i * g + j],
                };
            }
            let max = lane.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0f32;
            for l in lane.iter_mut() {
                *l = (*l - max).exp();
                sum += *l;
            }
            for l in lane.iter_mut() {
                *l /= sum;
            }
            for (q, o) in out[j * c..(j + 1) * c].iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for (i, &w) in lane.iter().enumerate() {
                    acc += w * t[i * c + q];
                }
                *o = acc;
            }
        }
        let value = Tensor::new(out_shape.to_vec(), out)?;
        Ok(self.push(
            value,
            Op::SoftmaxMix {
                x,
                probs,
                table: table.clone(),
                scale,
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Kronecker product with a `b1 × b2` all-ones block: every entry of
    /// `x` is broadcast over its own block.
    pub fn kron_ones(&mut self, x: Var, b1: usize, b2: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let (rows, cols) = (r * b1, c * b2);
        let src = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let src_row = &src[(i / b1) * c..(i / b1 + 1) * c];
            for (j, o) in out[i * cols..(i + 1) * cols].iter_mut().enumerate() {
                *o = src_row[j / b2];
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::KronOnes { x, b1, b2 }, &[x]))
    }

    /// `t + (1 - t) ⊙ m` where `t` is `tiles` broadcast over `b1 × b2`
    /// blocks. Equal to merging `kron_ones(tiles)` with `m`, in one node.
    pub fn tile_merge(&mut self, tiles: Var, m: Var, b1: usize, b2: usize) -> Result<Var> {
        let (r, c) = self.value(tiles).dims2()?;
        let (rows, cols) = (r * b1, c * b2);
        if self.shape(m) != [rows, cols] {
            return Err(Error::shape("tile_merge", self.shape(m), &[rows, cols]));
        }
        let (t, mv) = (self.data(tiles), self.data(m));
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let t_row = &t[(i / b1) * c..(i / b1 + 1) * c];
            for (chunk, &tv) in mv[i * cols..(i + 1) * cols].chunks_exact(b2).zip(t_row) {
                out.extend(chunk.iter().map(|&x| tv + (1.0 - tv) * x));
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::TileMerge { tiles, m, b1, b2 }, &[tiles, m]))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Squared Frobenius norm, as a scalar.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_sq() as f32;
        self.push(Tensor::scalar(s), Op::SumSq(x), &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: batch × vocab`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                index: bad,
                bound: vocab,
            });
        }
        let src = self.data(logits);
        let mut probs = vec![0.0f32; n * vocab];
        let mut total = 0.0f64;
        for (row, (&t, p)) in src.chunks_exact(vocab).zip(targets.iter().zip(probs.chunks_exact_mut(vocab))) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0f32;
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp();
                sum += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= sum;
            }
            total += (sum.ln() + max - row[t]) as f64;
        }
        let loss = (total / n as f64) as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, dim) = self.value(table).dims2()?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index { index: id, bound: rows });
            }
            out.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.value(a).dims2()?;
        let (n2, q) = self.value(b).dims2()?;
        if n != n2 {
            return Err(Error::shape("concat_cols", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&da[i * p..(i + 1) * p]);
            out.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        let value = Tensor::new(vec![n, p + q], out)?;
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Column `col` of a 2-D tensor as a 1-D tensor.
    pub fn select_col(&mut self, x: Var, col: usize) -> Result<Var> {
        let (n, k) = self.value(x).dims2()?;
        if col >= k {
            return Err(Error::Index { index: col, bound: k });
        }
        let src = self.data(x);
        let out = (0..n).map(|i| src[i * k + col]).collect();
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(value, Op::SelectCol { x, col }, &[x]))
    }

    /// Parameter-free RMS normalisation of each row.
    pub fn rms_norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let (n, h) = self.value(x).dims2()?;
        let src = self.data(x);
        let mut out = vec![0.0; n * h];
        let mut inv_rms = Vec::with_capacity(n);
        for (row, o) in src.chunks_exact(h).zip(out.chunks_exact_mut(h)) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / h as f32;
            let r = 1.0 / (ms + eps).sqrt();
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = v * r;
            }
            inv_rms.push(r);
        }
        let value = Tensor::new(vec![n, h], out)?;
        Ok(self.push(value, Op::RmsNorm { x, inv_rms }, &[x]))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `(batch·seq_len) × dim`; rows of one sequence are
    /// contiguous and `dim` splits evenly into `heads`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (rows, dim) = self.value(q).dims2()?;
        for other in [k, v] {
            if self.shape(other) != [rows, dim] {
                return Err(Error::shape("causal_attention", &[rows, dim], self.shape(other)));
            }
        }
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::Param(format!(
                "attention geometry rows={rows} dim={dim} seq_len={seq_len} heads={heads}"
            )));
        }
        let batch = rows / seq_len;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (dq, dk, dv) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0f32; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0f32; rows * dim];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq_len * seq_len;
                for t in 0..seq_len {
                    let qrow = &dq[(b * seq_len + t) * dim + h * dh..][..dh];
                    let p = &mut probs[base + t * seq_len..base + (t + 1) * seq_len];
                    let mut max = f32::NEG_INFINITY;
                    for u in 0..=t {
                        let krow = &dk[(b * seq_len + u) * dim + h * dh..][..dh];
                        let s = dot(qrow, krow) * scale;
                        p[u] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0f32;
                    for pu in p[..=t].iter_mut() {
                        *pu = (*pu - max).exp();
                        sum += *pu;
                    }
                    for pu in p[..=t].iter_mut() {
                        *pu /= sum;
                    }
                    let orow = &mut out[(b * seq_len + t) * dim + h * dh..][..dh];
                    for u in 0..=t {
                        let vrow = &dv[(b * seq_len + u) * dim + h * dh..][..dh];
                        axpy(p[u], vrow, orow);
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, dim], out)?;
        Ok(self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    // ----- backward ---------------------------------------------------------

    /// Accumulates `∂loss/∂x` into every tracked node reachable from `loss`.
    ///
    /// Gradients accumulate across calls; use [`Tape::zero_grad`] between
    /// passes that should not add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut seed = self.take_grad(loss).expect("loss requires grad");
        seed[0] += 1.0;
        self.nodes[loss.0].grad = Some(seed);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.propagate(id, &op, &g);
            self.nodes[id].op = op;
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(node.grad.take().unwrap_or_else(|| vec![0.0; n]))
    }

    fn put_grad(&mut self, v: Var, g: Vec<f32>) {
        self.nodes[v.0].grad = Some(g);
    }

    /// Adds `f(i)` to every gradient entry of `v`.
    fn acc_map(&mut self, v: Var, f: impl Fn(usize) -> f32) {
        if let Some(mut gv) = self.take_grad(v) {
            for (i, gi) in gv.iter_mut().enumerate() {
                *gi += f(i);
            }
            self.put_grad(v, gv);
        }
    }

    fn propagate(&mut self, id: usize, op: &Op, g: &[f32]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().expect("2-D");
                let n = self.value(b).shape()[1];
                if let Some(mut ga) = self.take_grad(a) {
                    let bt = transpose(self.data(b), k, n);
                    gemm_acc(g, &bt, &mut ga, m, n, k);
                    self.put_grad(a, ga);
                }
                if let Some(mut gb) = self.take_grad(b) {
                    gemm_tn_acc(self.data(a), g, &mut gb, m, k, n);
                    self.put_grad(b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(a).dims2().expect("2-D");
                let n = self.value(b).shape()[0];
                if let Some(mut ga) = self.take_grad(a) {
                    gemm_acc(g, self.data(b), &mut ga, m, n, k);
                    self.put_grad(a, ga);
                }
                if let Some(mut gb) = self.take_grad(b) {
                    gemm_tn_acc(g, self.data(a), &mut gb, m, n, k);
                    self.put_grad(b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc_map(a, |i| g[i]);
                self.acc_map(b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc_map(a, |i| g[i]);
                self.acc_map(b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                if let Some(mut ga) = self.take_grad(a) {
                    for ((gi, &gy), &bv) in ga.iter_mut().zip(g).zip(self.data(b)) {
                        *gi += gy * bv;
                    }
                    self.put_grad(a, ga);
                }
                if let Some(mut gb) = self.take_grad(b) {
                    for ((gi, &gy), &av) in gb.iter_mut().zip(g).zip(self.data(a)) {
                        *gi += gy * av;
                    }
                    self.put_grad(b, gb);
                }
            }
            Op::Scale(x, c) => self.acc_map(x, |i| g[i] * c),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc_map(x, |i| g[i]),
            Op::Exp(x) => {
                let y = self.nodes[id].value.data().to_vec();
                self.acc_map(x, |i| g[i] * y[i]);
            }
            Op::Log(x) => {
                let xv = self.data(x).to_vec();
                self.acc_map(x, |i| g[i] / xv[i]);
            }
            Op::Abs(x) => {
                let xv = self.data(x).to_vec();
                self.acc_map(x, |i| {
                    let s = if xv[i] > 0.0 {
                        1.0
                    } else if xv[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    g[i] * s
                });
            }
            Op::Silu(x) => {
                let xv = self.data(x).to_vec();
                self.acc_map(x, |i| {
                    let s = sigmoid(xv[i]);
                    g[i] * s * (1.0 + xv[i] * (1.0 - s))
                });
            }
            Op::Softmax {
                x,
                axis_len,
                inner,
                scale,
            } => {
                if let Some(mut gx) = self.take_grad(x) {
                    let y = self.nodes[id].value.data();
                    let outer = y.len() / (axis_len * inner).max(1);
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * axis_len + i) * inner + j;
                            let mut dot = 0.0f32;
                            for i in 0..axis_len {
                                dot += g[at(i)] * y[at(i)];
                            }
                            for i in 0..axis_len {
                                gx[at(i)] += scale * (y[at(i)] * (g[at(i)] - dot));
                            }
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::SoftmaxMix {
                x,
                ref probs,
                ref table,
                scale,
            } => {
                if let Some(mut gx) = self.take_grad(x) {
                    let (k, c) = table.dims2().expect("2-D");
                    let t = table.data();
                    let groups = probs.len() / k.max(1);
                    let mut dp = vec![0.0f32; k];
                    for j in 0..groups {
                        let y = &probs[j * k..(j + 1) * k];
                        let gj = &g[j * c..(j + 1) * c];
                        for (i, d) in dp.iter_mut().enumerate() {
                            let mut acc = 0.0f32;
                            for (q, &gq) in gj.iter().enumerate() {
                                acc += gq * t[i * c + q];
                            }
                            *d = acc;
                        }
                        let mut dot = 0.0f32;
                        for i in 0..k {
                            dot += dp[i] * y[i];
                        }
                        for i in 0..k {
                            gx[i * groups + j] += scale * (y[i] * (dp[i] - dot));
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(x).dims2().expect("2-D");
                let gt = transpose(g, c, r);
                self.acc_map(x, |i| gt[i]);
            }
            Op::KronOnes { x, b1, b2 } => {
                if let Some(mut gx) = self.take_grad(x) {
                    let c = self.value(x).shape()[1];
                    let cols = c * b2;
                    for (i, grow) in g.chunks_exact(cols).enumerate() {
                        let dst = &mut gx[(i / b1) * c..(i / b1 + 1) * c];
                        for (j, &gv) in grow.iter().enumerate() {
                            dst[j / b2] += gv;
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::TileMerge { tiles, m, b1, b2 } => {
                let c = self.value(tiles).shape()[1];
                let cols = c * b2;
                if let Some(mut gt) = self.take_grad(tiles) {
                    let mv = self.data(m);
                    for (i, (grow, mrow)) in g.chunks_exact(cols).zip(mv.chunks_exact(cols)).enumerate() {
                        let dst = &mut gt[(i / b1) * c..(i / b1 + 1) * c];
                        for ((d, gc), mc) in dst.iter_mut().zip(grow.chunks_exact(b2)).zip(mrow.chunks_exact(b2)) {
                            *d += gc.iter().zip(mc).map(|(&gv, &x)| gv * (1.0 - x)).sum::<f32>();
                        }
                    }
                    self.put_grad(tiles, gt);
                }
                if let Some(mut gm) = self.take_grad(m) {
                    let t = self.data(tiles);
                    for (i, (grow, dst)) in g.chunks_exact(cols).zip(gm.chunks_exact_mut(cols)).enumerate() {
                        let t_row = &t[(i / b1) * c..(i / b1 + 1) * c];
                        for ((dc, gc), &tv) in dst.chunks_exact_mut(b2).zip(grow.chunks_exact(b2)).zip(t_row) {
                            for (d, &gv) in dc.iter_mut().zip(gc) {
                                *d += gv * (1.0 - tv);
                            }
                        }
                    }
                    self.put_grad(m, gm);
                }
            }
            Op::Sum(x) => self.acc_map(x, |_| g[0]),
            Op::SumSq(x) => {
                let xv = self.data(x).to_vec();
                self.acc_map(x, |i| 2.0 * g[0] * xv[i]);
            }
            Op::CrossEntropy {
                logits,
                ref targets,
                ref probs,
            } => {
                if let Some(mut gl) = self.take_grad(logits) {
                    let vocab = self.value(logits).shape()[1];
                    let w = g[0] / targets.len() as f32;
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        for (gi, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *gi += w * p;
                        }
                        row[t] -= w;
                    }
                    self.put_grad(logits, gl);
                }
            }
            Op::Embedding { table, ref ids } => {
                if let Some(mut gt) = self.take_grad(table) {
                    let dim = self.value(table).shape()[1];
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * dim..(r + 1) * dim], &mut gt[id * dim..(id + 1) * dim]);
                    }
                    self.put_grad(table, gt);
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(a).shape()[1];
                let q = self.value(b).shape()[1];
                self.acc_map(a, |i| g[(i / p) * (p + q) + i % p]);
                self.acc_map(b, |i| g[(i / q) * (p + q) + p + i % q]);
            }
            Op::SelectCol { x, col } => {
                let k = self.value(x).shape()[1];
                self.acc_map(x, |i| if i % k == col { g[i / k] } else { 0.0 });
            }
            Op::RmsNorm { x, ref inv_rms } => {
                if let Some(mut gx) = self.take_grad(x) {
                    let y = self.nodes[id].value.data();
                    let h = self.value(x).shape()[1];
                    for (r, &rr) in inv_rms.iter().enumerate() {
                        let (gy, yy) = (&g[r * h..(r + 1) * h], &y[r * h..(r + 1) * h]);
                        let mean = dot(gy, yy) / h as f32;
                        for ((gi, &gv), &yv) in gx[r * h..(r + 1) * h].iter_mut().zip(gy).zip(yy) {
                            *gi += rr * (gv - yv * mean);
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                ref probs,
            } => self.attention_backward(g, q, k, v, seq_len, heads, probs),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&mut self, g: &[f32], q: Var, k: Var, v: Var, seq_len: usize, heads: usize, probs: &[f32]) {
        let (rows, dim) = self.value(q).dims2().expect("2-D");
        let batch = rows / seq_len;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut gq = vec![0.0f32; rows * dim];
        let mut gk = vec![0.0f32; rows * dim];
        let mut gv = vec![0.0f32; rows * dim];
        let (dq, dk, dv) = (self.data(q), self.data(k), self.data(v));
        let mut dp = vec![0.0f32; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq_len * seq_len;
                let at = |t: usize| (b * seq_len + t) * dim + h * dh;
                for t in 0..seq_len {
                    let p = &probs[base + t * seq_len..base + (t + 1) * seq_len];
                    let grow = &g[at(t)..at(t) + dh];
                    let mut weighted = 0.0f32;
                    for u in 0..=t {
                        dp[u] = dot(grow, &dv[at(u)..at(u) + dh]);
                        weighted += p[u] * dp[u];
                        axpy(p[u], grow, &mut gv[at(u)..at(u) + dh]);
                    }
                    for u in 0..=t {
                        let ds = p[u] * (dp[u] - weighted) * scale;
                        axpy(ds, &dk[at(u)..at(u) + dh], &mut gq[at(t)..at(t) + dh]);
                        axpy(ds, &dq[at(t)..at(t) + dh], &mut gk[at(u)..at(u) + dh]);
                    }
                }
            }
        }
        self.acc_map(q, |i| gq[i]);
        self.acc_map(k, |i| gk[i]);
        self.acc_map(v, |i| gv[i]);
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}
