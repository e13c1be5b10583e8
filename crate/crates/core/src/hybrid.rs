//! Compressed hybrid tile matrices: the `.hsm` format, a tiled SpMM kernel,
//! a small autotuner, and byte/FLOP accounting.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PTCHHSM1" | u32 d1 | u32 d2 | u32 b1 | u32 b2
//! tile bitmap, one bit per tile (1 = dense), LSB first, zero padded
//! per tile in row-major tile order:
//!   dense:  b1·b2 f32, row-major
//!   sparse: b1·b2/2 f32 kept values in group order,
//!           then ceil(b1·b2/8) bytes of 4-bit group codes `lo | hi << 2`
//!           (even groups in the low nibble)
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::codec::{put_f32s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::mask::{pattern_from_offsets, pattern_offsets, HybridMask, Rng, TileShape};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PTCHHSM1";
pub const HEADER_BYTES: usize = 24;

/// Exec tile sizes tried by the autotuner, in canonical order.
pub const PLAN_TILES: [TileShape; 4] = [
    TileShape::new(128, 128),
    TileShape::new(128, 64),
    TileShape::new(64, 128),
    TileShape::new(64, 64),
];

#[derive(Clone, Debug, PartialEq)]
pub struct HybridSparseMatrix {
    d1: usize,
    d2: usize,
    tile: TileShape,
    tile_dense: Vec<bool>,
    /// Position of each tile within the dense or the sparse payload.
    slot: Vec<usize>,
    dense: Vec<f32>,
    values: Vec<f32>,
    meta: Vec<u8>,
    /// In-tile column of every entry of `values`, expanded from `meta`.
    cols: Vec<u32>,
}

fn meta_bytes(tile: TileShape) -> usize {
    tile.area().div_ceil(8)
}

fn encode_nibble(pattern: u8) -> u8 {
    let [lo, hi] = pattern_offsets(pattern);
    lo | (hi << 2)
}

fn decode_nibble(nib: u8) -> Option<u8> {
    pattern_from_offsets(nib & 3, nib >> 2)
}

impl HybridSparseMatrix {
    /// Dense tiles are copied verbatim; sparse tiles keep the two masked-in
    /// values of every group.
    pub fn compress(weights: &Tensor, mask: &HybridMask) -> Result<Self> {
        let (d1, d2) = weights.dims2()?;
        if mask.dims() != (d1, d2) {
            let (m1, m2) = mask.dims();
            return Err(Error::shape("compress", &[d1, d2], &[m1, m2]));
        }
        let tile = mask.tile();
        let (gr, gc) = mask.grid();
        let (b1, b2) = (tile.rows, tile.cols);
        let w = weights.data();
        let mut out = Self {
            d1,
            d2,
            tile,
            tile_dense: mask.tile_flags().to_vec(),
            slot: Vec::with_capacity(gr * gc),
            dense: Vec::new(),
            values: Vec::new(),
            meta: Vec::new(),
            cols: Vec::new(),
        };
        let (mut nd, mut ns) = (0, 0);
        for tr in 0..gr {
            for tc in 0..gc {
                if mask.is_dense(tr, tc) {
                    out.slot.push(nd);
                    nd += 1;
                    for r in 0..b1 {
                        let row = (tr * b1 + r) * d2 + tc * b2;
                        out.dense.extend_from_slice(&w[row..row + b2]);
                    }
                } else {
                    out.slot.push(ns);
                    ns += 1;
                    let mut meta = vec![0u8; meta_bytes(tile)];
                    let mut j = 0;
                    for r in 0..b1 {
                        for g in 0..b2 / 4 {
                            let (row, col) = (tr * b1 + r, tc * b2 + 4 * g);
                            let p = mask.pattern_at(row, col);
                            for off in pattern_offsets(p) {
                                out.values.push(w[row * d2 + col + off as usize]);
                            }
                            meta[j / 2] |= encode_nibble(p) << ((j % 2) * 4);
                            j += 1;
                        }
                    }
                    out.meta.extend_from_slice(&meta);
                }
            }
        }
        out.index_columns();
        Ok(out)
    }

    fn index_columns(&mut self) {
        let quads = self.tile.cols / 4;
        let groups = self.tile.area() / 4;
        let mb = meta_bytes(self.tile);
        self.cols = Vec::with_capacity(self.values.len());
        for tile_meta in self.meta.chunks_exact(mb) {
            for j in 0..groups {
                let nib = (tile_meta[j / 2] >> ((j % 2) * 4)) & 0xF;
                let col = 4 * (j % quads) as u32;
                self.cols.extend([col + (nib & 3) as u32, col + (nib >> 2) as u32]);
            }
        }
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

    pub fn tile_dense(&self) -> &[bool] {
        &self.tile_dense
    }

    pub fn dense_tiles(&self) -> usize {
        self.tile_dense.iter().filter(|&&d| d).count()
    }

    fn group_pattern(&self, sparse_slot: usize, group: usize) -> u8 {
        let byte = self.meta[sparse_slot * meta_bytes(self.tile) + group / 2];
        decode_nibble((byte >> ((group % 2) * 4)) & 0xF).expect("validated nibble")
    }

    /// The mask this matrix was compressed with. Groups inside dense tiles
    /// report pattern 0.
    pub fn to_mask(&self) -> Result<HybridMask> {
        let (b1, b2) = (self.tile.rows, self.tile.cols);
        let gc = self.d2 / b2;
        let mut idx = vec![0u8; self.d1 * self.d2 / 4];
        for row in 0..self.d1 {
            for g in 0..self.d2 / 4 {
                let t = (row / b1) * gc + (4 * g) / b2;
                if !self.tile_dense[t] {
                    let local = (row % b1) * (b2 / 4) + (4 * g % b2) / 4;
                    idx[row * (self.d2 / 4) + g] = self.group_pattern(self.slot[t], local);
                }
            }
        }
        HybridMask::new(self.d1, self.d2, self.tile, self.tile_dense.clone(), idx)
    }

    /// `W ⊙ expand(mask)` as a dense matrix.
    pub fn decompress(&self) -> Tensor {
        let (b1, b2) = (self.tile.rows, self.tile.cols);
        let (gr, gc) = self.grid();
        let mut out = vec![0.0f32; self.d1 * self.d2];
        for tr in 0..gr {
            for tc in 0..gc {
                let t = tr * gc + tc;
                let s = self.slot[t];
                for r in 0..b1 {
                    let row = (tr * b1 + r) * self.d2 + tc * b2;
                    if self.tile_dense[t] {
                        let src = &self.dense[s * b1 * b2 + r * b2..][..b2];
                        out[row..row + b2].copy_from_slice(src);
                    } else {
                        for g in 0..b2 / 4 {
                            let j = r * (b2 / 4) + g;
                            let [lo, hi] = pattern_offsets(self.group_pattern(s, j));
                            let v = &self.values[s * b1 * b2 / 2 + 2 * j..];
                            out[row + 4 * g + lo as usize] = v[0];
                            out[row + 4 * g + hi as usize] = v[1];
                        }
                    }
                }
            }
        }
        Tensor::new(vec![self.d1, self.d2], out).expect("shape")
    }

    /// Number of weights stored (and multiplied).
    pub fn kept(&self) -> usize {
        let k = self.dense_tiles();
        let area = self.tile.area();
        k * area + (self.tile_dense.len() - k) * area / 2
    }

    pub fn density(&self) -> f64 {
        self.kept() as f64 / (self.d1 * self.d2) as f64
    }

    pub fn serialize(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(MAGIC);
        for (name, v) in [
            ("d1", self.d1),
            ("d2", self.d2),
            ("b1", self.tile.rows),
            ("b2", self.tile.cols),
        ] {
            put_u32(&mut out, to_u32(v, name)?);
        }
        let mut bitmap = vec![0u8; self.tile_dense.len().div_ceil(8)];
        for (t, &d) in self.tile_dense.iter().enumerate() {
            if d {
                bitmap[t / 8] |= 1 << (t % 8);
            }
        }
        out.extend_from_slice(&bitmap);
        let area = self.tile.area();
        let mb = meta_bytes(self.tile);
        for (t, &d) in self.tile_dense.iter().enumerate() {
            let s = self.slot[t];
            if d {
                put_f32s(&mut out, &self.dense[s * area..(s + 1) * area]);
            } else {
                put_f32s(&mut out, &self.values[s * area / 2..(s + 1) * area / 2]);
                out.extend_from_slice(&self.meta[s * mb..(s + 1) * mb]);
            }
        }
        debug_assert_eq!(out.len(), self.serialized_len());
        Ok(out)
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, not a hybrid sparse matrix"));
        }
        let d1 = r.u32("d1")? as usize;
        let d2 = r.u32("d2")? as usize;
        let b1 = r.u32("b1")? as usize;
        let b2 = r.u32("b2")? as usize;
        let tile = TileShape::new(b1, b2);
        if d1 == 0 || d2 == 0 {
            return Err(Error::format(8, "zero matrix extent"));
        }
        let (gr, gc) = tile
            .hybrid_grid(d1, d2)
            .map_err(|e| Error::format(16, format!("invalid tile geometry: {e}")))?;
        let tiles = gr
            .checked_mul(gc)
            .ok_or_else(|| Error::format(8, "tile count overflows"))?;
        let bitmap_at = r.pos();
        let bitmap = r.take(tiles.div_ceil(8), "tile bitmap")?;
        if tiles % 8 != 0 {
            let last = bitmap[bitmap.len() - 1];
            if last >> (tiles % 8) != 0 {
                return Err(Error::format(bitmap_at + bitmap.len() - 1, "nonzero bitmap padding"));
            }
        }
        let tile_dense: Vec<bool> = (0..tiles).map(|t| bitmap[t / 8] >> (t % 8) & 1 == 1).collect();
        let area = tile.area();
        let mb = meta_bytes(tile);
        let groups = area / 4;
        let mut out = Self {
            d1,
            d2,
            tile,
            slot: Vec::new(),
            tile_dense,
            dense: Vec::new(),
            values: Vec::new(),
            meta: Vec::new(),
            cols: Vec::new(),
        };
        let (mut nd, mut ns) = (0, 0);
        for t in 0..tiles {
            if out.tile_dense[t] {
                out.slot.push(nd);
                nd += 1;
                out.dense.extend(r.f32s(area, "dense tile")?);
            } else {
                out.slot.push(ns);
                ns += 1;
                out.values.extend(r.f32s(area / 2, "sparse values")?);
                let at = r.pos();
                let meta = r.take(mb, "sparse metadata")?;
                for (i, &byte) in meta.iter().enumerate() {
                    for half in 0..2 {
                        let nib = (byte >> (4 * half)) & 0xF;
                        let ok = if 2 * i + half < groups {
                            decode_nibble(nib).is_some()
                        } else {
                            nib == 0
                        };
                        if !ok {
                            return Err(Error::format(at + i, format!("invalid 2:4 metadata nibble {nib:#x}")));
                        }
                    }
                }
                out.meta.extend_from_slice(meta);
            }
        }
        r.finish()?;
        out.index_columns();
        Ok(out)
    }

    /// Closed-form size of [`serialize`](Self::serialize)'s output.
    pub fn serialized_len(&self) -> usize {
        payload_bytes(self.tile, self.tile_dense.len(), self.dense_tiles())
    }

    pub fn accounting(&self, batch: usize) -> Accounting {
        let kept = self.kept();
        let total = self.d1 * self.d2;
        let bytes = self.serialized_len();
        let dense_bytes = 4 * total;
        let flops = 2 * batch as u64 * kept as u64;
        let dense_flops = 2 * batch as u64 * total as u64;
        Accounting {
            d1: self.d1,
            d2: self.d2,
            b1: self.tile.rows,
            b2: self.tile.cols,
            tiles: self.tile_dense.len(),
            dense_tiles: self.dense_tiles(),
            kept,
            density: self.density(),
            bytes,
            dense_bytes,
            byte_ratio: bytes as f64 / dense_bytes as f64,
            batch,
            flops,
            dense_flops,
            flop_ratio: flops as f64 / dense_flops as f64,
        }
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()?)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::deserialize(&std::fs::read(path)?)
    }
}

/// Total serialized bytes for `tiles` tiles of which `dense` are dense:
/// header, bitmap, `4·b1·b2` per dense tile and `2·b1·b2 + ceil(b1·b2/8)`
/// per sparse tile.
pub fn payload_bytes(tile: TileShape, tiles: usize, dense: usize) -> usize {
    let area = tile.area();
    HEADER_BYTES + tiles.div_ceil(8) + dense * 4 * area + (tiles - dense) * (2 * area + meta_bytes(tile))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub d1: usize,
    pub d2: usize,
    pub b1: usize,
    pub b2: usize,
    pub tiles: usize,
    pub dense_tiles: usize,
    pub kept: usize,
    pub density: f64,
    /// Serialized `.hsm` size.
    pub bytes: usize,
    /// Plain row-major `f32` storage.
    pub dense_bytes: usize,
    pub byte_ratio: f64,
    pub batch: usize,
    pub flops: u64,
    pub dense_flops: u64,
    pub flop_ratio: f64,
}

/// `foo.hsm` → `foo.meta.json`.
pub fn sidecar_path(hsm: &Path) -> PathBuf {
    hsm.with_extension("meta.json")
}

// ----- kernel ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopOrder {
    /// Row bands outermost, column chunks inside.
    RowsOuter,
    /// Column chunks outermost, row bands inside.
    ColsOuter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelPlan {
    pub tile: TileShape,
    pub order: LoopOrder,
    pub threads: usize,
}

impl KernelPlan {
    pub fn native(a: &HybridSparseMatrix) -> Self {
        Self {
            tile: a.tile,
            order: LoopOrder::RowsOuter,
            threads: 1,
        }
    }
}

fn nests(p: usize, s: usize) -> bool {
    p % s == 0 || s % p == 0
}

/// Canonical candidate list: the four exec tiles, then the storage tile,
/// each with both loop orders. Sizes are clipped to the matrix, filtered to
/// those nesting with the storage tile, and de-duplicated in order.
pub fn candidate_plans(a: &HybridSparseMatrix, threads: usize) -> Vec<KernelPlan> {
    let mut out: Vec<KernelPlan> = Vec::new();
    for t in PLAN_TILES.iter().chain(std::iter::once(&a.tile)) {
        let t = TileShape::new(t.rows.min(a.d1), t.cols.min(a.d2));
        if !(nests(t.rows, a.tile.rows) && nests(t.cols, a.tile.cols)) {
            continue;
        }
        for order in [LoopOrder::RowsOuter, LoopOrder::ColsOuter] {
            let plan = KernelPlan {
                tile: t,
                order,
                threads: threads.max(1),
            };
            if !out.contains(&plan) {
                out.push(plan);
            }
        }
    }
    out
}

/// `A · X` with the native plan on one thread.
pub fn spmm(a: &HybridSparseMatrix, x: &Tensor) -> Result<Tensor> {
    spmm_with(a, x, &KernelPlan::native(a))
}

/// `A · X` for `X: d2 × n`. Each output row accumulates its kept products in
/// ascending column order whatever the plan, so every plan and thread count
/// gives the same bits as a dense ascending-k product of the decompressed
/// matrix.
pub fn spmm_with(a: &HybridSparseMatrix, x: &Tensor, plan: &KernelPlan) -> Result<Tensor> {
    let (k, n) = x.dims2()?;
    if k != a.d2 {
        return Err(Error::shape("spmm", &[a.d1, a.d2], x.shape()));
    }
    if plan.tile.rows == 0 || plan.tile.cols == 0 || plan.tile.cols % 4 != 0 {
        return Err(Error::Param(format!("invalid exec tile {}", plan.tile)));
    }
    let mut out = vec![0.0f32; a.d1 * n];
    let threads = plan.threads.clamp(1, a.d1.max(1));
    if threads == 1 || n == 0 {
        run_rows(a, x.data(), n, &mut out, 0, a.d1, plan);
    } else {
        let band = a.d1.div_ceil(threads);
        std::thread::scope(|s| {
            for (i, chunk) in out.chunks_mut(band * n).enumerate() {
                let r0 = i * band;
                let r1 = r0 + chunk.len() / n;
                let xd = x.data();
                s.spawn(move || run_rows(a, xd, n, chunk, r0, r1, plan));
            }
        });
    }
    Tensor::new(vec![a.d1, n], out)
}

fn run_rows(a: &HybridSparseMatrix, x: &[f32], n: usize, out: &mut [f32], r0: usize, r1: usize, plan: &KernelPlan) {
    let (eb1, eb2) = (plan.tile.rows, plan.tile.cols);
    match plan.order {
        LoopOrder::RowsOuter => {
            for band in (r0..r1).step_by(eb1) {
                for c0 in (0..a.d2).step_by(eb2) {
                    block(a, x, n, out, r0, band..(band + eb1).min(r1), c0..(c0 + eb2).min(a.d2));
                }
            }
        }
        LoopOrder::ColsOuter => {
            for c0 in (0..a.d2).step_by(eb2) {
                for band in (r0..r1).step_by(eb1) {
                    block(a, x, n, out, r0, band..(band + eb1).min(r1), c0..(c0 + eb2).min(a.d2));
                }
            }
        }
    }
}

#[inline]
fn block(
    a: &HybridSparseMatrix,
    x: &[f32],
    n: usize,
    out: &mut [f32],
    r0: usize,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) {
    let (b1, b2) = (a.tile.rows, a.tile.cols);
    let gc = a.d2 / b2;
    let area = a.tile.area();
    for i in rows {
        let orow = &mut out[(i - r0) * n..(i - r0 + 1) * n];
        let (tr, r) = (i / b1, i % b1);
        let mut c = cols.start;
        while c < cols.end {
            let tc = c / b2;
            let tile_end = ((tc + 1) * b2).min(cols.end);
            let t = tr * gc + tc;
            let s = a.slot[t];
            let base_col = tc * b2;
            if a.tile_dense[t] {
                let w = &a.dense[s * area + r * b2..][..b2];
                dense_row(&w[c - base_col..tile_end - base_col], c, x, n, orow);
            } else {
                let v0 = s * area / 2 + r * b2 / 2 + (c - base_col) / 2;
                let v1 = s * area / 2 + r * b2 / 2 + (tile_end - base_col) / 2;
                sparse_row(&a.values[v0..v1], &a.cols[v0..v1], base_col, x, n, orow);
            }
            c = tile_end;
        }
    }
}

const LANES: usize = 16;

/// `orow += Σ_k w[k] · x[col0 + k]`, ascending `k`, in register-sized chunks.
#[inline]
fn dense_row(w: &[f32], col0: usize, x: &[f32], n: usize, orow: &mut [f32]) {
    let mut j0 = 0;
    while j0 + LANES <= n {
        let mut acc: [f32; LANES] = orow[j0..j0 + LANES].try_into().expect("lanes");
        for (kk, &wv) in w.iter().enumerate() {
            let xr = &x[(col0 + kk) * n + j0..][..LANES];
            for q in 0..LANES {
                acc[q] += wv * xr[q];
            }
        }
        orow[j0..j0 + LANES].copy_from_slice(&acc);
        j0 += LANES;
    }
    for j in j0..n {
        let mut acc = orow[j];
        for (kk, &wv) in w.iter().enumerate() {
            acc += wv * x[(col0 + kk) * n + j];
        }
        orow[j] = acc;
    }
}

/// Same as [`dense_row`] over kept values `vals` at in-tile columns `cols`
/// of a tile starting at column `base`.
#[inline]
fn sparse_row(vals: &[f32], cols: &[u32], base: usize, x: &[f32], n: usize, orow: &mut [f32]) {
    let mut j0 = 0;
    while j0 + LANES <= n {
        let mut acc: [f32; LANES] = orow[j0..j0 + LANES].try_into().expect("lanes");
        for (&v, &c) in vals.iter().zip(cols) {
            let xr = &x[(base + c as usize) * n + j0..][..LANES];
            for q in 0..LANES {
                acc[q] += v * xr[q];
            }
        }
        orow[j0..j0 + LANES].copy_from_slice(&acc);
        j0 += LANES;
    }
    for jj in j0..n {
        let mut acc = orow[jj];
        for (&v, &c) in vals.iter().zip(cols) {
            acc += v * x[(base + c as usize) * n + jj];
        }
        orow[jj] = acc;
    }
}

// ----- autotuning -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanTiming {
    pub plan: KernelPlan,
    pub median_ns: f64,
    pub samples_ns: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub timings: Vec<PlanTiming>,
    pub chosen: usize,
}

impl TuneReport {
    pub fn plan(&self) -> KernelPlan {
        self.timings[self.chosen].plan
    }
}

/// Index of the smallest median; ties go to the earliest candidate.
pub fn select_plan(medians: &[f64]) -> usize {
    let mut best = 0;
    for (i, &m) in medians.iter().enumerate().skip(1) {
        if m < medians[best] {
            best = i;
        }
    }
    best
}

pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

pub const MIN_TUNE_REPS: usize = 5;

/// Times `plans` sequentially on `x`, at least [`MIN_TUNE_REPS`] runs each
/// after one warm-up.
pub fn autotune_plans(a: &HybridSparseMatrix, x: &Tensor, plans: &[KernelPlan], reps: usize) -> Result<TuneReport> {
    if plans.is_empty() {
        return Err(Error::Param("no candidate plans".into()));
    }
    let reps = reps.max(MIN_TUNE_REPS);
    let mut timings = Vec::with_capacity(plans.len());
    for plan in plans {
        std::hint::black_box(spmm_with(a, x, plan)?);
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            std::hint::black_box(spmm_with(a, x, plan)?);
            samples.push(t.elapsed().as_nanos() as f64);
        }
        timings.push(PlanTiming {
            plan: *plan,
            median_ns: median(&samples),
            samples_ns: samples,
        });
    }
    let medians: Vec<f64> = timings.iter().map(|t| t.median_ns).collect();
    Ok(TuneReport {
        chosen: select_plan(&medians),
        timings,
    })
}

/// Autotunes over [`candidate_plans`] with a seeded random `d2 × batch` input.
pub fn autotune(a: &HybridSparseMatrix, batch: usize, threads: usize, reps: usize, seed: u64) -> Result<TuneReport> {
    let x = random_input(a.d2, batch, seed);
    autotune_plans(a, &x, &candidate_plans(a, threads), reps)
}

/// Uniform `[-1, 1)` matrix from `seed`.
pub fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}
