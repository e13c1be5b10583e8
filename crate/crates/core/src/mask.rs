//! Mask mathematics: Gumbel-Softmax relaxation, soft 2:4 and tile masks,
//! their merge, and hardening to an inference-time [`HybridMask`].
//!
//! Groups of four run along the column (second) dimension of a row-major
//! `d1 × d2` weight, so group `g` covers columns `4(g mod d2/4) ..` of row
//! `g / (d2/4)`. Pattern indices always refer to [`PATTERNS`].

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seeded random stream used for every stochastic draw.
pub type Rng = rand_chacha::ChaCha8Rng;

/// The six ways of keeping two of four consecutive weights, in
/// lexicographically descending order of their bit strings.
pub const PATTERNS: [[u8; 4]; 6] = [
    [1, 1, 0, 0],
    [1, 0, 1, 0],
    [1, 0, 0, 1],
    [0, 1, 1, 0],
    [0, 1, 0, 1],
    [0, 0, 1, 1],
];

/// Ascending intra-group offsets of the two kept elements of a pattern.
pub const fn pattern_offsets(idx: u8) -> [u8; 2] {
    match idx {
        0 => [0, 1],
        1 => [0, 2],
        2 => [0, 3],
        3 => [1, 2],
        4 => [1, 3],
        _ => [2, 3],
    }
}

/// Inverse of [`pattern_offsets`]; `None` unless `lo < hi < 4`.
pub fn pattern_from_offsets(lo: u8, hi: u8) -> Option<u8> {
    (0..6u8).find(|&i| pattern_offsets(i) == [lo, hi])
}

/// The pattern table `S` as a `6 × 4` tensor.
pub fn pattern_table() -> Tensor {
    let data = PATTERNS.iter().flatten().map(|&b| b as f32).collect();
    Tensor::new(vec![6, 4], data).expect("6x4")
}

/// Extents of one tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct TileShape {
    pub rows: usize,
    pub cols: usize,
}

impl TileShape {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }

    /// Tile grid of a `d1 × d2` matrix; rejects shapes that do not divide evenly.
    pub fn grid(&self, d1: usize, d2: usize) -> Result<(usize, usize)> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Layout(format!("empty tile {}x{}", self.rows, self.cols)));
        }
        if d1 % self.rows != 0 || d2 % self.cols != 0 {
            return Err(Error::Layout(format!(
                "{d1}x{d2} matrix is not divisible into {}x{} tiles",
                self.rows, self.cols
            )));
        }
        Ok((d1 / self.rows, d2 / self.cols))
    }

    /// Like [`TileShape::grid`], additionally requiring that no group of four
    /// straddles two tiles.
    pub fn hybrid_grid(&self, d1: usize, d2: usize) -> Result<(usize, usize)> {
        if self.cols % 4 != 0 {
            return Err(Error::Layout(format!(
                "tile width {} is not a multiple of the 2:4 group size",
                self.cols
            )));
        }
        self.grid(d1, d2)
    }
}

impl From<[usize; 2]> for TileShape {
    fn from([rows, cols]: [usize; 2]) -> Self {
        Self { rows, cols }
    }
}

impl From<TileShape> for [usize; 2] {
    fn from(t: TileShape) -> Self {
        [t.rows, t.cols]
    }
}

impl std::fmt::Display for TileShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

fn group_count(d1: usize, d2: usize) -> Result<usize> {
    if d2 % 4 != 0 {
        return Err(Error::Layout(format!("column count {d2} is not divisible by 4")));
    }
    Ok(d1 * d2 / 4)
}

/// Learnable 2:4 logits: one 6-way categorical per group, stored `6 × groups`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternLogits {
    d1: usize,
    d2: usize,
    values: Tensor,
}

impl PatternLogits {
    pub fn new(d1: usize, d2: usize, values: Tensor) -> Result<Self> {
        let groups = group_count(d1, d2)?;
        if values.shape() != [6, groups] {
            return Err(Error::shape("pattern logits", values.shape(), &[6, groups]));
        }
        Ok(Self { d1, d2, values })
    }

    pub fn zeros(d1: usize, d2: usize) -> Result<Self> {
        let groups = group_count(d1, d2)?;
        Self::new(d1, d2, Tensor::zeros(&[6, groups]))
    }

    /// Logits that put `strength` on the given pattern of each group.
    pub fn from_patterns(d1: usize, d2: usize, patterns: &[u8], strength: f32) -> Result<Self> {
        let groups = group_count(d1, d2)?;
        if patterns.len() != groups {
            return Err(Error::shape("pattern prior", &[patterns.len()], &[groups]));
        }
        let mut values = Tensor::zeros(&[6, groups]);
        for (g, &p) in patterns.iter().enumerate() {
            values.data_mut()[p as usize * groups + g] = strength;
        }
        Self::new(d1, d2, values)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d1, self.d2)
    }

    pub fn groups(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        self.values.data_mut()
    }

    /// The six logits of group `g`.
    pub fn group(&self, g: usize) -> [f32; 6] {
        let n = self.groups();
        std::array::from_fn(|k| self.values.data()[k * n + g])
    }

    /// Soft mask evaluated outside of any training tape.
    pub fn soft_mask(&self, tau: f32, kappa: f32, rng: Option<&mut Rng>) -> Result<SoftMask> {
        let mut tape = Tape::new();
        let p = tape.constant(self.values.clone());
        let m = soft_mask_2_4(&mut tape, p, self.d1, self.d2, tau, kappa, rng)?;
        Ok(SoftMask(tape.value(m).clone()))
    }
}

/// Learnable tile logits, one per `rows × cols` tile.
#[derive(Clone, Debug, PartialEq)]
pub struct TileLogits {
    tile: TileShape,
    values: Tensor,
}

impl TileLogits {
    pub fn new(d1: usize, d2: usize, tile: TileShape, values: Tensor) -> Result<Self> {
        let (r, c) = tile.grid(d1, d2)?;
        if values.shape() != [r, c] {
            return Err(Error::shape("tile logits", values.shape(), &[r, c]));
        }
        Ok(Self { tile, values })
    }

    pub fn zeros(d1: usize, d2: usize, tile: TileShape) -> Result<Self> {
        let (r, c) = tile.grid(d1, d2)?;
        Self::new(d1, d2, tile, Tensor::zeros(&[r, c]))
    }

    pub fn tile(&self) -> TileShape {
        self.tile
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    pub fn dims(&self) -> (usize, usize) {
        let (r, c) = self.grid();
        (r * self.tile.rows, c * self.tile.cols)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        self.values.data_mut()
    }

    pub fn soft_mask(&self, tau: f32, kappa: f32, rng: Option<&mut Rng>) -> Result<SoftMask> {
        let mut tape = Tape::new();
        let p = tape.constant(self.values.clone());
        let m = soft_mask_tile(&mut tape, p, self.tile, tau, kappa, rng)?;
        Ok(SoftMask(tape.value(m).clone()))
    }
}

/// A `d1 × d2` mask with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask(pub Tensor);

impl SoftMask {
    pub fn values(&self) -> &Tensor {
        &self.0
    }

    /// Sum of mask entries over the full element count of the masked weight.
    pub fn density(&self) -> f64 {
        self.0.sum() / self.0.numel() as f64
    }

    /// `m_tile + (1 - m_tile) ⊙ m_24`.
    pub fn merge(m_tile: &SoftMask, m_24: &SoftMask) -> Result<SoftMask> {
        let mut tape = Tape::new();
        let a = tape.constant(m_tile.0.clone());
        let b = tape.constant(m_24.0.clone());
        let m = merge_masks(&mut tape, a, b)?;
        Ok(SoftMask(tape.value(m).clone()))
    }
}

/// Standard Gumbel draws `-ln(-ln u)` with `u` clamped to `[1e-10, 1 - 1e-10]`.
pub fn sample_gumbel(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(1e-10, 1.0 - 1e-10);
            // -ln(u) lies in [1e-10, 23.1], where single precision suffices.
            -((-u.ln()) as f32).ln()
        })
        .collect()
}

/// `softmax((κ·logits + z) / τ)` along the last axis. With `rng = None` the
/// noise `z` is zero, which is the deterministic evaluation mode.
pub fn gumbel_softmax(tape: &mut Tape, logits: Var, tau: f32, kappa: f32, rng: Option<&mut Rng>) -> Result<Var> {
    check_temperature(tau, kappa)?;
    let shape = tape.shape(logits).to_vec();
    if shape.is_empty() {
        return Err(Error::shape("gumbel_softmax", &shape, &[1]));
    }
    let noise = rng.map(|rng| scaled_noise(rng, tape.value(logits).numel(), tau));
    tape.softmax_affine(logits, shape.len() - 1, kappa / tau, noise.as_deref())
}

fn check_temperature(tau: f32, kappa: f32) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::Param(format!("logit scale must be positive, got {kappa}")));
    }
    Ok(())
}

fn scaled_noise(rng: &mut Rng, n: usize, tau: f32) -> Vec<f32> {
    sample_gumbel(rng, n).into_iter().map(|z| z / tau).collect()
}

/// Soft 2:4 mask from `6 × groups` logits: each group's Gumbel-Softmax
/// weights average the six candidate patterns.
///
/// Noise is drawn group by group, six values per group.
pub fn soft_mask_2_4(
    tape: &mut Tape,
    logits: Var,
    d1: usize,
    d2: usize,
    tau: f32,
    kappa: f32,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let groups = group_count(d1, d2)?;
    if tape.shape(logits) != [6, groups] {
        return Err(Error::shape("soft_mask_2_4", tape.shape(logits), &[6, groups]));
    }
    check_temperature(tau, kappa)?;
    let noise = rng.map(|rng| scaled_noise(rng, 6 * groups, tau));
    tape.softmax_mix(logits, &pattern_table(), kappa / tau, noise.as_deref(), &[d1, d2])
}

/// Soft tile mask: two-class Gumbel-Softmax over `[logit, 0]` per tile, with
/// the dense-class probability broadcast over the tile.
///
/// Noise is drawn tile by tile in row-major order, two values per tile.
pub fn soft_mask_tile(
    tape: &mut Tape,
    logits: Var,
    tile: TileShape,
    tau: f32,
    kappa: f32,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let grid = soft_tile_probs(tape, logits, tile, tau, kappa, rng)?;
    tape.kron_ones(grid, tile.rows, tile.cols)
}

/// Dense-class probability of every tile, one per logit (not broadcast).
pub fn soft_tile_probs(
    tape: &mut Tape,
    logits: Var,
    tile: TileShape,
    tau: f32,
    kappa: f32,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let (r, c) = tape.value(logits).dims2()?;
    tile.grid(r * tile.rows, c * tile.cols)?;
    let col = tape.reshape(logits, &[r * c, 1])?;
    let zero = tape.constant(Tensor::zeros(&[r * c, 1]));
    let pair = tape.concat_cols(col, zero)?;
    let probs = gumbel_softmax(tape, pair, tau, kappa, rng)?;
    let dense = tape.select_col(probs, 0)?;
    tape.reshape(dense, &[r, c])
}

/// `m_tile + (1 - m_tile) ⊙ m_24`.
pub fn merge_masks(tape: &mut Tape, m_tile: Var, m_24: Var) -> Result<Var> {
    if tape.shape(m_tile) != tape.shape(m_24) {
        return Err(Error::shape("merge_masks", tape.shape(m_tile), tape.shape(m_24)));
    }
    let sparse_share = tape.one_minus(m_tile);
    let sparse_part = tape.mul(sparse_share, m_24)?;
    tape.add(m_tile, sparse_part)
}

/// [`merge_masks`] with the tile mask given as per-tile probabilities from
/// [`soft_tile_probs`]. Same values, far fewer tape nodes.
pub fn merge_tile_probs(tape: &mut Tape, tiles: Var, m_24: Var, tile: TileShape) -> Result<Var> {
    tape.tile_merge(tiles, m_24, tile.rows, tile.cols)
}

/// Index of the first maximum.
pub fn argmax_first(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Hardened mask: dense/sparse flag per tile plus a pattern per group.
///
/// Every group carries a pattern index; groups inside dense tiles ignore it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HybridMask {
    d1: usize,
    d2: usize,
    tile: TileShape,
    tile_flags: Vec<bool>,
    pattern_idx: Vec<u8>,
}

impl HybridMask {
    pub fn new(d1: usize, d2: usize, tile: TileShape, tile_flags: Vec<bool>, pattern_idx: Vec<u8>) -> Result<Self> {
        let (r, c) = tile.hybrid_grid(d1, d2)?;
        if tile_flags.len() != r * c {
            return Err(Error::shape("tile flags", &[tile_flags.len()], &[r * c]));
        }
        let groups = group_count(d1, d2)?;
        if pattern_idx.len() != groups {
            return Err(Error::shape("pattern indices", &[pattern_idx.len()], &[groups]));
        }
        if let Some(&bad) = pattern_idx.iter().find(|&&p| p >= 6) {
            return Err(Error::Index {
                index: bad as usize,
                bound: 6,
            });
        }
        Ok(Self {
            d1,
            d2,
            tile,
            tile_flags,
            pattern_idx,
        })
    }

    pub fn all_dense(d1: usize, d2: usize, tile: TileShape) -> Result<Self> {
        let (r, c) = tile.grid(d1, d2)?;
        Self::new(d1, d2, tile, vec![true; r * c], vec![0; group_count(d1, d2)?])
    }

    pub fn all_sparse(d1: usize, d2: usize, tile: TileShape, pattern_idx: Vec<u8>) -> Result<Self> {
        let (r, c) = tile.grid(d1, d2)?;
        Self::new(d1, d2, tile, vec![false; r * c], pattern_idx)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d1, self.d2)
    }

    pub fn tile(&self) -> TileShape {
        self.tile
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.d1 / self.tile.rows, self.d2 / self.tile.cols)
    }

    pub fn tile_flags(&self) -> &[bool] {
        &self.tile_flags
    }

    pub fn pattern_idx(&self) -> &[u8] {
        &self.pattern_idx
    }

    pub fn tile_count(&self) -> usize {
        self.tile_flags.len()
    }

    pub fn dense_tiles(&self) -> usize {
        self.tile_flags.iter().filter(|&&d| d).count()
    }

    pub fn is_dense(&self, tile_row: usize, tile_col: usize) -> bool {
        self.tile_flags[tile_row * (self.d2 / self.tile.cols) + tile_col]
    }

    /// Pattern of the group starting at (`row`, `col`); `col` must be a multiple of 4.
    pub fn pattern_at(&self, row: usize, col: usize) -> u8 {
        self.pattern_idx[row * (self.d2 / 4) + col / 4]
    }

    /// Number of weights kept by the expanded mask.
    pub fn kept(&self) -> usize {
        let k = self.dense_tiles();
        let area = self.tile.area();
        k * area + (self.tile_count() - k) * area / 2
    }

    /// Exact density `kept / (d1·d2)`.
    pub fn density(&self) -> f64 {
        self.kept() as f64 / (self.d1 * self.d2) as f64
    }

    /// Binary `d1 × d2` mask: ones in dense tiles, pattern rows in sparse tiles.
    pub fn expand(&self) -> SoftMask {
        let mut out = vec![0.0f32; self.d1 * self.d2];
        for row in 0..self.d1 {
            for g in 0..self.d2 / 4 {
                let col = 4 * g;
                let dst = &mut out[row * self.d2 + col..row * self.d2 + col + 4];
                if self.is_dense(row / self.tile.rows, col / self.tile.cols) {
                    dst.fill(1.0);
                } else {
                    let p = PATTERNS[self.pattern_at(row, col) as usize];
                    for (d, &b) in dst.iter_mut().zip(&p) {
                        *d = b as f32;
                    }
                }
            }
        }
        SoftMask(Tensor::new(vec![self.d1, self.d2], out).expect("shape"))
    }
}

/// Tile is dense iff its logit is strictly positive; each group takes the
/// first arg-max of its six logits.
pub fn harden(tile: &TileLogits, patterns: &PatternLogits) -> Result<HybridMask> {
    if tile.dims() != patterns.dims() {
        let (a, b) = (tile.dims(), patterns.dims());
        return Err(Error::shape("harden", &[a.0, a.1], &[b.0, b.1]));
    }
    let (d1, d2) = tile.dims();
    let flags = tile.values().data().iter().map(|&p| p > 0.0).collect();
    let idx = (0..patterns.groups())
        .map(|g| argmax_first(&patterns.group(g)) as u8)
        .collect();
    HybridMask::new(d1, d2, tile.tile(), flags, idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Linear,
    Exponential,
}

/// One annealed quantity: `start` at step 0, `end` at the final step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anneal {
    pub start: f32,
    pub end: f32,
    pub interpolation: Interpolation,
}

impl Anneal {
    pub fn at(&self, frac: f64) -> f32 {
        let frac = frac.clamp(0.0, 1.0);
        let (s, e) = (self.start as f64, self.end as f64);
        let v = match self.interpolation {
            Interpolation::Linear => s + (e - s) * frac,
            Interpolation::Exponential => s * (e / s).powf(frac),
        };
        v as f32
    }
}

/// Temperature decreases and logit scale increases over training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GumbelSchedule {
    pub tau: Anneal,
    pub kappa: Anneal,
}

impl Default for GumbelSchedule {
    fn default() -> Self {
        Self {
            tau: Anneal {
                start: 4.0,
                end: 0.05,
                interpolation: Interpolation::Linear,
            },
            kappa: Anneal {
                start: 1.0,
                end: 100.0,
                interpolation: Interpolation::Exponential,
            },
        }
    }
}

impl GumbelSchedule {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f32| v > 0.0 && v.is_finite();
        if !(positive(self.tau.start) && positive(self.tau.end)) {
            return Err(Error::Config("temperature endpoints must be positive".into()));
        }
        if !(positive(self.kappa.start) && positive(self.kappa.end)) {
            return Err(Error::Config("logit scale endpoints must be positive".into()));
        }
        if self.tau.end > self.tau.start {
            return Err(Error::Config("temperature must not increase".into()));
        }
        if self.kappa.end < self.kappa.start {
            return Err(Error::Config("logit scale must not decrease".into()));
        }
        Ok(())
    }

    fn frac(step: usize, total_steps: usize) -> f64 {
        if total_steps <= 1 {
            return 1.0;
        }
        step as f64 / (total_steps - 1) as f64
    }

    pub fn tau(&self, step: usize, total_steps: usize) -> f32 {
        self.tau.at(Self::frac(step, total_steps))
    }

    pub fn kappa(&self, step: usize, total_steps: usize) -> f32 {
        self.kappa.at(Self::frac(step, total_steps))
    }
}
