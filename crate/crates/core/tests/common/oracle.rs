//! Double-precision reference implementations written straight from the
//! definitions, with no shared code from the crate under test.

use patch_core::lm::{Batch, ModelConfig, ToyLm};
use patch_core::mask::PATTERNS;
use patch_core::trainer::{SparsityScope, TrainConfig};

pub fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// `a · bᵀ` with `b: n × k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
        }
    }
    out
}

pub fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `softmax(scale·x + offset)` along `axis` of a row-major tensor.
pub fn softmax_affine(x: &[f64], shape: &[usize], axis: usize, scale: f64, offset: Option<&[f64]>) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx: Vec<usize> = (0..n).map(|i| (o * n + i) * inner + j).collect();
            let z: Vec<f64> = idx
                .iter()
                .map(|&p| scale * x[p] + offset.map_or(0.0, |off| off[p]))
                .collect();
            for (&p, s) in idx.iter().zip(softmax_vec(&z)) {
                out[p] = s;
            }
        }
    }
    out
}

/// Column-wise softmax of `x: k × g` mixed through `table: k × c`; `offset` is `g × k`.
pub fn softmax_mix(x: &[f64], k: usize, g: usize, table: &[f64], c: usize, scale: f64, offset: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g * c];
    for j in 0..g {
        let z: Vec<f64> = (0..k)
            .map(|i| scale * x[i * g + j] + offset.map_or(0.0, |off| off[j * k + i]))
            .collect();
        let p = softmax_vec(&z);
        for q in 0..c {
            out[j * c + q] = (0..k).map(|i| p[i] * table[i * c + q]).sum();
        }
    }
    out
}

pub fn kron_ones(x: &[f64], r: usize, c: usize, b1: usize, b2: usize) -> Vec<f64> {
    let cols = c * b2;
    let mut out = vec![0.0; r * b1 * cols];
    for i in 0..r * b1 {
        for j in 0..cols {
            out[i * cols + j] = x[(i / b1) * c + j / b2];
        }
    }
    out
}

pub fn cross_entropy(logits: &[f64], vocab: usize, targets: &[usize]) -> f64 {
    let n = targets.len();
    let mut total = 0.0;
    for (row, &t) in logits.chunks_exact(vocab).zip(targets) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    total / n as f64
}

pub fn embedding(table: &[f64], dim: usize, ids: &[usize]) -> Vec<f64> {
    ids.iter().flat_map(|&i| table[i * dim..(i + 1) * dim].to_vec()).collect()
}

pub fn concat_cols(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (p + q));
    for i in 0..n {
        out.extend_from_slice(&a[i * p..(i + 1) * p]);
        out.extend_from_slice(&b[i * q..(i + 1) * q]);
    }
    out
}

pub fn select_col(x: &[f64], n: usize, k: usize, col: usize) -> Vec<f64> {
    (0..n).map(|i| x[i * k + col]).collect()
}

pub fn rms_norm(x: &[f64], h: usize, eps: f64) -> Vec<f64> {
    x.chunks_exact(h)
        .flat_map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / h as f64;
            let r = 1.0 / (ms + eps).sqrt();
            row.iter().map(move |v| v * r)
        })
        .collect()
}

pub fn causal_attention(q: &[f64], k: &[f64], v: &[f64], dim: usize, seq: usize, heads: usize) -> Vec<f64> {
    let rows = q.len() / dim;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; rows * dim];
    for b in 0..rows / seq {
        for h in 0..heads {
            for t in 0..seq {
                let qi = (b * seq + t) * dim + h * dh;
                let scores: Vec<f64> = (0..=t)
                    .map(|u| {
                        let ki = (b * seq + u) * dim + h * dh;
                        (0..dh).map(|d| q[qi + d] * k[ki + d]).sum::<f64>() * scale
                    })
                    .collect();
                let p = softmax_vec(&scores);
                for (u, pu) in p.iter().enumerate() {
                    let vi = (b * seq + u) * dim + h * dh;
                    for d in 0..dh {
                        out[qi + d] += pu * v[vi + d];
                    }
                }
            }
        }
    }
    out
}

/// Frozen toy-model weights in double precision.
pub struct ModelOracle {
    pub cfg: ModelConfig,
    pub tok: Vec<f64>,
    pub pos: Vec<f64>,
    pub layers: Vec<Vec<f64>>,
    pub shapes: Vec<(usize, usize)>,
}

impl ModelOracle {
    pub fn new(model: &ToyLm) -> Self {
        Self {
            cfg: model.config().clone(),
            tok: to64(model.tok_embed().data()),
            pos: to64(model.pos_embed().data()),
            layers: model.layers().iter().map(|t| to64(t.data())).collect(),
            shapes: model.layers().iter().map(|t| (t.shape()[0], t.shape()[1])).collect(),
        }
    }

    /// Mean next-token cross-entropy with `weights` in place of the layers.
    pub fn loss(&self, weights: &[Vec<f64>], batch: &Batch) -> f64 {
        const EPS: f64 = 1e-5;
        let h = self.cfg.hidden_dim;
        let f = self.cfg.ffn_dim;
        let n = batch.inputs.len();
        let positions: Vec<usize> = (0..n).map(|i| i % batch.seq_len).collect();
        let tok = embedding(&self.tok, h, &batch.inputs);
        let pos = embedding(&self.pos, h, &positions);
        let mut x: Vec<f64> = tok.iter().zip(&pos).map(|(a, b)| a + b).collect();
        for blk in 0..self.cfg.num_blocks {
            let w = &weights[blk * 7..blk * 7 + 7];
            let hn = rms_norm(&x, h, EPS);
            let q = matmul_nt(&hn, &w[0], n, h, h);
            let k = matmul_nt(&hn, &w[1], n, h, h);
            let v = matmul_nt(&hn, &w[2], n, h, h);
            let a = causal_attention(&q, &k, &v, h, batch.seq_len, self.cfg.num_heads);
            let o = matmul_nt(&a, &w[3], n, h, h);
            x.iter_mut().zip(&o).for_each(|(x, o)| *x += o);
            let h2 = rms_norm(&x, h, EPS);
            let g = matmul_nt(&h2, &w[4], n, h, f);
            let u = matmul_nt(&h2, &w[5], n, h, f);
            let m: Vec<f64> = g.iter().zip(&u).map(|(&g, &u)| silu(g) * u).collect();
            let d = matmul_nt(&m, &w[6], n, f, h);
            x.iter_mut().zip(&d).for_each(|(x, d)| *x += d);
        }
        let hf = rms_norm(&x, h, EPS);
        let v = self.cfg.vocab_size;
        let logits = matmul_nt(&hf, weights.last().expect("head"), n, h, v);
        cross_entropy(&logits, v, &batch.targets)
    }
}

/// Dense-class probability of each tile broadcast over the tile.
pub fn tile_mask(
    logits: &[f64],
    d1: usize,
    d2: usize,
    b1: usize,
    b2: usize,
    tau: f64,
    kappa: f64,
    noise: Option<&[f64]>,
) -> Vec<f64> {
    let (r, c) = (d1 / b1, d2 / b2);
    let probs: Vec<f64> = (0..r * c)
        .map(|t| {
            let (z0, z1) = noise.map_or((0.0, 0.0), |z| (z[2 * t], z[2 * t + 1]));
            let a = (kappa * logits[t] + z0) / tau;
            let b = z1 / tau;
            softmax_vec(&[a, b])[0]
        })
        .collect();
    kron_ones(&probs, r, c, b1, b2)
}

/// Soft 2:4 mask from pattern-major `6 × groups` logits; noise is `groups × 6`.
pub fn mask_2_4(logits: &[f64], d1: usize, d2: usize, tau: f64, kappa: f64, noise: Option<&[f64]>) -> Vec<f64> {
    let groups = d1 * d2 / 4;
    let mut out = vec![0.0; d1 * d2];
    for g in 0..groups {
        let z: Vec<f64> = (0..6)
            .map(|p| (kappa * logits[p * groups + g] + noise.map_or(0.0, |n| n[g * 6 + p])) / tau)
            .collect();
        let w = softmax_vec(&z);
        for (j, o) in out[4 * g..4 * g + 4].iter_mut().enumerate() {
            *o = (0..6).map(|p| w[p] * PATTERNS[p][j] as f64).sum();
        }
    }
    out
}

pub fn hard_2_4(idx: &[u8]) -> Vec<f64> {
    idx.iter().flat_map(|&p| PATTERNS[p as usize].map(|b| b as f64)).collect()
}

pub fn merge(m_tile: &[f64], m24: &[f64]) -> Vec<f64> {
    m_tile.iter().zip(m24).map(|(t, s)| t + (1.0 - t) * s).collect()
}

pub enum PatternOracle {
    Learned(Vec<f64>),
    Frozen(Vec<u8>),
}

/// Logits and pre-drawn Gumbel noise of one masked layer.
pub struct LayerOracle {
    pub tile: Option<Vec<f64>>,
    pub pattern: PatternOracle,
    pub tile_noise: Option<Vec<f64>>,
    pub pattern_noise: Option<Vec<f64>>,
}

pub fn soft_masks(model: &ModelOracle, cfg: &TrainConfig, layers: &[LayerOracle], tau: f64, kappa: f64) -> Vec<Vec<f64>> {
    layers
        .iter()
        .zip(&model.shapes)
        .map(|(l, &(d1, d2))| {
            let m24 = match &l.pattern {
                PatternOracle::Learned(p) => mask_2_4(p, d1, d2, tau, kappa, l.pattern_noise.as_deref()),
                PatternOracle::Frozen(idx) => hard_2_4(idx),
            };
            match &l.tile {
                Some(t) => {
                    let mt = tile_mask(t, d1, d2, cfg.tile.rows, cfg.tile.cols, tau, kappa, l.tile_noise.as_deref());
                    merge(&mt, &m24)
                }
                None => m24,
            }
        })
        .collect()
}

/// The full training objective evaluated in double precision.
pub fn total_loss(model: &ModelOracle, cfg: &TrainConfig, layers: &[LayerOracle], batch: &Batch, tau: f64, kappa: f64) -> f64 {
    let masks = soft_masks(model, cfg, layers, tau, kappa);
    let weights: Vec<Vec<f64>> = masks
        .iter()
        .zip(&model.layers)
        .map(|(m, w)| m.iter().zip(w).map(|(m, w)| m * w).collect())
        .collect();
    let lm = model.loss(&weights, batch);
    let rho = cfg.rho as f32 as f64;
    let sparsity = match cfg.sparsity_scope {
        SparsityScope::Global => {
            let kept: f64 = masks.iter().flatten().sum();
            let n: usize = masks.iter().map(Vec::len).sum();
            cfg.lambda1 as f64 * (kept / n as f64 - rho).abs()
        }
        SparsityScope::PerLayer => {
            let gaps: f64 = masks
                .iter()
                .map(|m| (m.iter().sum::<f64>() / m.len() as f64 - rho).abs())
                .sum();
            cfg.lambda1 as f64 * gaps / masks.len() as f64
        }
    };
    let kept_sq: f64 = weights.iter().flatten().map(|v| v * v).sum();
    let all_sq: f64 = model.layers.iter().flatten().map(|v| v * v).sum();
    lm + sparsity - cfg.lambda2 as f64 * kept_sq / all_sq
}

/// Central difference of `f` at every coordinate of `x`.
pub fn finite_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖∞ / ‖b‖∞`, guarded against an all-zero reference.
pub fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    num / den.max(1e-12)
}
