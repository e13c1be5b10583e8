//! Mask training: tile and 2:4 logits learned against a frozen model.
//!
//! The objective is
//! `L_LM + λ1·|ΣM / ΣN − ρ| − λ2·Σ‖M⊙W‖² / Σ‖W‖²`, where `M` are the soft
//! masks. In per-layer scope the middle term becomes the mean over layers of
//! `|density_i − ρ|`.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lm::{Batch, Corpus, ToyLm};
use crate::mask::{
    harden, merge_tile_probs, soft_mask_2_4, soft_tile_probs, GumbelSchedule, HybridMask, PatternLogits, Rng,
    TileLogits, TileShape,
};
use crate::oneshot::{patterns_2_4, prune_unstructured, score, CalibrationStats, ScoreMethod};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Number of calibration windows used for activation-aware scoring.
pub const CALIBRATION_SEQUENCES: usize = 128;

const STREAM_DATA: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_PRIOR: u64 = 2;
const STREAM_CALIB: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Tile and 2:4 logits trained together.
    Joint,
    /// Tile logits only; 2:4 patterns frozen from a one-shot source.
    TileOnly,
    /// Every tile sparse; only 2:4 logits trained (density fixed at 0.5).
    #[serde(rename = "sparse_2_4")]
    Sparse24,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityScope {
    Global,
    PerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prior {
    Random,
    MagnitudeUnstructured,
    WandaUnstructured,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            learning_rate: a.learning_rate,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            steps: 2000,
            batch_size: 2,
        }
    }
}

impl OptimizerConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rho: f64,
    pub lambda1: f32,
    pub lambda2: f32,
    pub tile: TileShape,
    pub mode: Mode,
    pub sparsity_scope: SparsityScope,
    pub schedule: GumbelSchedule,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub prior: Prior,
    pub prior_strength: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rho: 0.65,
            lambda1: 10.0,
            lambda2: 0.5,
            tile: TileShape::new(16, 16),
            mode: Mode::Joint,
            sparsity_scope: SparsityScope::Global,
            schedule: GumbelSchedule::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            prior: Prior::MagnitudeUnstructured,
            prior_strength: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "rho must lie in [0.5, 1] (sparse tiles are exactly 2:4), got {}",
                self.rho
            )));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        if !(self.prior_strength > 0.0 && self.prior_strength.is_finite()) {
            return Err(Error::Config("prior_strength must be positive".into()));
        }
        let o = &self.optimizer;
        if o.steps == 0 || o.batch_size == 0 {
            return Err(Error::Config("optimizer steps and batch_size must be positive".into()));
        }
        if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("optimizer hyperparameters out of range".into()));
        }
        self.schedule.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where the one-shot 2:4 patterns come from.
#[derive(Clone, Debug, PartialEq)]
pub enum PatternSource {
    Score(ScoreMethod),
    /// Pattern indices per registry layer, e.g. read back from `.hsm` files.
    Fixed(Vec<Vec<u8>>),
}

impl Default for PatternSource {
    fn default() -> Self {
        Self::Score(ScoreMethod::Magnitude)
    }
}

/// Learnable (or frozen) mask state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskParams {
    pub tile: TileLogits,
    pub patterns: PatternState,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PatternState {
    Learned(PatternLogits),
    Frozen(Vec<u8>),
}

/// Loss components on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub lm: Var,
    pub sparsity: Var,
    pub weight_reg: Var,
}

/// One built objective together with the leaves it depends on.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub terms: LossTerms,
    pub masks: Vec<Var>,
    pub tile_logits: Vec<Option<Var>>,
    pub pattern_logits: Vec<Option<Var>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f32,
    pub lm: f32,
    pub sparsity: f32,
    pub weight_reg: f32,
    pub soft_density: f64,
    pub tau: f32,
    pub kappa: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub block: Option<usize>,
    pub role: String,
    pub rows: usize,
    pub cols: usize,
    pub density: f64,
    pub dense_tiles: usize,
    pub tiles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleReport {
    pub role: String,
    pub density: f64,
    pub dense_tile_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub steps: Vec<StepLog>,
    /// Hardened global density.
    pub density: f64,
    pub dense_tile_fraction: f64,
    pub layers: Vec<LayerReport>,
    pub roles: Vec<RoleReport>,
    /// Held-out loss with hardened masks and no noise.
    pub val_loss: f64,
    pub dense_val_loss: Option<f64>,
    pub wall_time_secs: f64,
    #[serde(skip)]
    pub masks: Vec<HybridMask>,
}

/// CSV row of the allocation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub block: String,
    pub role: String,
    pub density: f64,
    pub dense_tile_fraction: f64,
}

fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Calibration statistics for every registry layer, drawn from the config seed.
pub fn calibration(model: &ToyLm, corpus: &Corpus, seed: u64) -> Result<Vec<CalibrationStats>> {
    let mut rng = stream(seed, STREAM_CALIB);
    let calib_seed = rand::Rng::random::<u64>(&mut rng);
    model.calibrate(corpus, CALIBRATION_SEQUENCES, calib_seed)
}

fn layer_scores(model: &ToyLm, method: ScoreMethod, calib: Option<&[CalibrationStats]>) -> Result<Vec<Tensor>> {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, w)| score(w, method, calib.map(|c| &c[i])))
        .collect()
}

/// Best-scoring 2:4 pattern per group for each registry layer.
pub fn freeze_24(model: &ToyLm, method: ScoreMethod, calib: Option<&[CalibrationStats]>) -> Result<Vec<Vec<u8>>> {
    layer_scores(model, method, calib)?.iter().map(patterns_2_4).collect()
}

/// Tile logits from a prior.
///
/// Score-based priors prune each matrix unstructured to sparsity `1 − ρ`,
/// rank all tiles of the model by retained count (ties by position), and
/// give the top `round((2ρ − 1)·T)` tiles `+strength`, the rest `−strength`.
/// The random prior draws every logit from `N(0, strength²)`.
pub fn init_tile_priors(
    model: &ToyLm,
    prior: Prior,
    strength: f32,
    rho: f64,
    tile: TileShape,
    calib: Option<&[CalibrationStats]>,
    rng: &mut Rng,
) -> Result<Vec<TileLogits>> {
    let layers = model.registry().layers();
    let mut out: Vec<TileLogits> = layers
        .iter()
        .map(|l| TileLogits::zeros(l.rows, l.cols, tile))
        .collect::<Result<_>>()?;
    let method = match prior {
        Prior::Random => {
            let normal = Normal::new(0.0f32, strength).map_err(|e| Error::Config(e.to_string()))?;
            for t in &mut out {
                for v in t.values_mut() {
                    *v = normal.sample(rng);
                }
            }
            return Ok(out);
        }
        Prior::MagnitudeUnstructured => ScoreMethod::Magnitude,
        Prior::WandaUnstructured => ScoreMethod::Wanda,
    };
    let scores = layer_scores(model, method, calib)?;
    // (retained count, layer, tile) for every tile of the model.
    let mut ranked = Vec::new();
    for (li, s) in scores.iter().enumerate() {
        let keep = prune_unstructured(s, 1.0 - rho)?;
        let (_, cols) = keep.dims2()?;
        let (gr, gc) = out[li].grid();
        let mut counts = vec![0usize; gr * gc];
        for (idx, &k) in keep.data().iter().enumerate() {
            if k != 0.0 {
                let (r, c) = (idx / cols, idx % cols);
                counts[(r / tile.rows) * gc + c / tile.cols] += 1;
            }
        }
        ranked.extend(counts.into_iter().enumerate().map(|(ti, n)| (n, li, ti)));
    }
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let dense = (((2.0 * rho - 1.0) * ranked.len() as f64).round() as usize).min(ranked.len());
    for (rank, &(_, li, ti)) in ranked.iter().enumerate() {
        out[li].values_mut()[ti] = if rank < dense { strength } else { -strength };
    }
    Ok(out)
}

pub struct Trainer<'a> {
    model: &'a ToyLm,
    corpus: &'a Corpus,
    config: TrainConfig,
    params: Vec<MaskParams>,
    weight_sq: f64,
    total_weights: usize,
    data_rng: Rng,
    noise_rng: Rng,
    adam: Adam,
}

impl<'a> Trainer<'a> {
    /// Validates the config, runs priors and freezes patterns as the mode requires.
    pub fn new(model: &'a ToyLm, corpus: &'a Corpus, config: TrainConfig, source: PatternSource) -> Result<Self> {
        config.validate()?;
        model.config().check_tile(config.tile)?;
        let need_calib =
            config.prior == Prior::WandaUnstructured || source == PatternSource::Score(ScoreMethod::Wanda);
        let calib = if need_calib {
            Some(calibration(model, corpus, config.seed)?)
        } else {
            None
        };
        let patterns = match source {
            PatternSource::Score(method) => freeze_24(model, method, calib.as_deref())?,
            PatternSource::Fixed(p) => {
                let reg = model.registry().layers();
                if p.len() != reg.len() || p.iter().zip(reg).any(|(p, l)| p.len() != l.numel() / 4) {
                    return Err(Error::Config("fixed 2:4 patterns do not match the model layers".into()));
                }
                if p.iter().flatten().any(|&i| i >= 6) {
                    return Err(Error::Config("fixed 2:4 pattern index out of range".into()));
                }
                p
            }
        };
        let mut prior_rng = stream(config.seed, STREAM_PRIOR);
        let tiles = init_tile_priors(
            model,
            config.prior,
            config.prior_strength,
            config.rho,
            config.tile,
            calib.as_deref(),
            &mut prior_rng,
        )?;
        let params: Vec<MaskParams> = tiles
            .into_iter()
            .zip(patterns)
            .zip(model.registry().layers())
            .map(|((tile, p), l)| {
                let patterns = match config.mode {
                    Mode::TileOnly => PatternState::Frozen(p),
                    Mode::Joint | Mode::Sparse24 => {
                        PatternState::Learned(PatternLogits::from_patterns(l.rows, l.cols, &p, config.prior_strength)?)
                    }
                };
                Ok(MaskParams { tile, patterns })
            })
            .collect::<Result<_>>()?;
        let mut sizes = Vec::new();
        for p in &params {
            sizes.push(p.tile.values().numel());
            sizes.push(match &p.patterns {
                PatternState::Learned(l) => l.values().numel(),
                PatternState::Frozen(_) => 0,
            });
        }
        let weight_sq = model.layers().iter().map(Tensor::sum_sq).sum();
        Ok(Self {
            model,
            corpus,
            adam: Adam::new(config.optimizer.adam(), &sizes),
            data_rng: stream(config.seed, STREAM_DATA),
            noise_rng: stream(config.seed, STREAM_NOISE),
            total_weights: model.registry().total_weights(),
            weight_sq,
            config,
            params,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &[MaskParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [MaskParams] {
        &mut self.params
    }

    /// Builds the objective on `tape` at schedule position `step`.
    ///
    /// Noise, when given, is drawn layer by layer in registry order: tile
    /// noise first, then pattern noise.
    pub fn total_loss(&self, tape: &mut Tape, batch: &Batch, step: usize, mut noise: Option<&mut Rng>) -> Result<LossGraph> {
        let cfg = &self.config;
        let steps = cfg.optimizer.steps;
        let (tau, kappa) = (cfg.schedule.tau(step, steps), cfg.schedule.kappa(step, steps));
        let mut masks = Vec::with_capacity(self.params.len());
        let mut tile_logits = Vec::with_capacity(self.params.len());
        let mut pattern_logits = Vec::with_capacity(self.params.len());
        for (p, info) in self.params.iter().zip(self.model.registry().layers()) {
            let (d1, d2) = (info.rows, info.cols);
            let m_tile = if cfg.mode == Mode::Sparse24 {
                tile_logits.push(None);
                None
            } else {
                let t = tape.param(p.tile.values().clone());
                tile_logits.push(Some(t));
                Some(soft_tile_probs(tape, t, cfg.tile, tau, kappa, noise.as_deref_mut())?)
            };
            let m24 = match &p.patterns {
                PatternState::Learned(l) => {
                    let v = tape.param(l.values().clone());
                    pattern_logits.push(Some(v));
                    soft_mask_2_4(tape, v, d1, d2, tau, kappa, noise.as_deref_mut())?
                }
                PatternState::Frozen(idx) => {
                    pattern_logits.push(None);
                    let hard = HybridMask::all_sparse(d1, d2, cfg.tile, idx.clone())?;
                    tape.constant(hard.expand().0)
                }
            };
            masks.push(match m_tile {
                Some(t) => merge_tile_probs(tape, t, m24, cfg.tile)?,
                None => m24,
            });
        }
        let (out, vars) = self.model.forward_masked(tape, batch, &masks)?;
        let sparsity = self.sparsity_term(tape, &masks);
        let mut kept_sq = None;
        for &w in &vars.layers {
            let s = tape.sum_sq(w);
            kept_sq = Some(match kept_sq {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        let weight_reg = tape.scale(kept_sq.expect("layers"), cfg.lambda2 / self.weight_sq as f32);
        let with_sparsity = tape.add(out.loss, sparsity)?;
        let total = tape.sub(with_sparsity, weight_reg)?;
        Ok(LossGraph {
            terms: LossTerms {
                total,
                lm: out.loss,
                sparsity,
                weight_reg,
            },
            masks,
            tile_logits,
            pattern_logits,
        })
    }

    fn sparsity_term(&self, tape: &mut Tape, masks: &[Var]) -> Var {
        let cfg = &self.config;
        let rho = cfg.rho as f32;
        let mut acc: Option<Var> = None;
        let mut push = |tape: &mut Tape, v: Var| {
            acc = Some(match acc {
                None => v,
                Some(a) => tape.add(a, v).expect("scalars"),
            });
        };
        match cfg.sparsity_scope {
            SparsityScope::Global => {
                for &m in masks {
                    let s = tape.sum(m);
                    push(tape, s);
                }
                let density = tape.scale(acc.expect("layers"), 1.0 / self.total_weights as f32);
                let gap = tape.add_scalar(density, -rho);
                let gap = tape.abs(gap);
                tape.scale(gap, cfg.lambda1)
            }
            SparsityScope::PerLayer => {
                for &m in masks {
                    let n = tape.value(m).numel() as f32;
                    let s = tape.sum(m);
                    let d = tape.scale(s, 1.0 / n);
                    let gap = tape.add_scalar(d, -rho);
                    let gap = tape.abs(gap);
                    push(tape, gap);
                }
                tape.scale(acc.expect("layers"), cfg.lambda1 / masks.len() as f32)
            }
        }
    }

    /// One Adam step on the logits.
    pub fn step(&mut self, step: usize) -> Result<StepLog> {
        let cfg = &self.config;
        let batch = self
            .corpus
            .sample_batch(&mut self.data_rng, cfg.optimizer.batch_size, self.model.config().context_len);
        let mut tape = Tape::new();
        let mut noise = self.noise_rng.clone();
        let graph = self.total_loss(&mut tape, &batch, step, Some(&mut noise))?;
        self.noise_rng = noise;
        let scalar = |v: Var| tape.value(v).data()[0];
        let total = scalar(graph.terms.total);
        if !total.is_finite() {
            return Err(Error::Divergence { step });
        }
        let soft_kept: f64 = graph.masks.iter().map(|&m| tape.value(m).sum()).sum();
        let log = StepLog {
            step,
            total,
            lm: scalar(graph.terms.lm),
            sparsity: scalar(graph.terms.sparsity),
            weight_reg: scalar(graph.terms.weight_reg),
            soft_density: soft_kept / self.total_weights as f64,
            tau: cfg.schedule.tau(step, cfg.optimizer.steps),
            kappa: cfg.schedule.kappa(step, cfg.optimizer.steps),
        };
        tape.backward(graph.terms.total)?;
        self.adam.tick();
        for (i, p) in self.params.iter_mut().enumerate() {
            if let Some(v) = graph.tile_logits[i] {
                self.adam.update(2 * i, p.tile.values_mut(), tape.grad(v).expect("param"));
            }
            if let (Some(v), PatternState::Learned(l)) = (graph.pattern_logits[i], &mut p.patterns) {
                self.adam.update(2 * i + 1, l.values_mut(), tape.grad(v).expect("param"));
            }
        }
        Ok(log)
    }

    /// Current hardened masks.
    pub fn harden(&self) -> Result<Vec<HybridMask>> {
        self.params
            .iter()
            .zip(self.model.registry().layers())
            .map(|(p, l)| match (&p.patterns, self.config.mode) {
                (PatternState::Learned(pl), Mode::Sparse24) => {
                    let flags = TileLogits::zeros(l.rows, l.cols, self.config.tile)?;
                    harden(&flags, pl)
                }
                (PatternState::Learned(pl), _) => harden(&p.tile, pl),
                (PatternState::Frozen(idx), _) => {
                    let flags = p.tile.values().data().iter().map(|&v| v > 0.0).collect();
                    HybridMask::new(l.rows, l.cols, self.config.tile, flags, idx.clone())
                }
            })
            .collect()
    }

    /// Runs every step, hardens, and evaluates on the held-out split.
    pub fn run(mut self) -> Result<TrainReport> {
        let start = Instant::now();
        let mut steps = Vec::with_capacity(self.config.optimizer.steps);
        for s in 0..self.config.optimizer.steps {
            steps.push(self.step(s)?);
        }
        let masks = self.harden()?;
        let val_loss = self.model.eval_masked(self.corpus, &masks)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                step: self.config.optimizer.steps,
            });
        }
        let mut report = build_report(self.model, self.config.clone(), steps, masks, val_loss);
        report.wall_time_secs = start.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Trains masks for `model` and returns the report with hardened masks.
pub fn train(model: &ToyLm, corpus: &Corpus, config: TrainConfig, source: PatternSource) -> Result<TrainReport> {
    Trainer::new(model, corpus, config, source)?.run()
}

/// Report for a fixed set of hardened masks.
pub fn build_report(
    model: &ToyLm,
    config: TrainConfig,
    steps: Vec<StepLog>,
    masks: Vec<HybridMask>,
    val_loss: f64,
) -> TrainReport {
    let infos = model.registry().layers();
    let layers: Vec<LayerReport> = infos
        .iter()
        .zip(&masks)
        .map(|(l, m)| LayerReport {
            name: l.name.clone(),
            block: l.block,
            role: l.role.to_string(),
            rows: l.rows,
            cols: l.cols,
            density: m.density(),
            dense_tiles: m.dense_tiles(),
            tiles: m.tile_count(),
        })
        .collect();
    let kept: usize = masks.iter().map(HybridMask::kept).sum();
    let total: usize = infos.iter().map(|l| l.numel()).sum();
    let dense_tiles: usize = masks.iter().map(HybridMask::dense_tiles).sum();
    let tiles: usize = masks.iter().map(HybridMask::tile_count).sum();
    let mut roles: Vec<RoleReport> = Vec::new();
    let mut role_order: Vec<_> = infos.iter().map(|l| l.role).collect();
    role_order.sort();
    role_order.dedup();
    for role in role_order {
        let (mut k, mut n, mut d, mut t) = (0usize, 0usize, 0usize, 0usize);
        for (l, m) in infos.iter().zip(&masks).filter(|(l, _)| l.role == role) {
            k += m.kept();
            n += l.numel();
            d += m.dense_tiles();
            t += m.tile_count();
        }
        roles.push(RoleReport {
            role: role.to_string(),
            density: k as f64 / n as f64,
            dense_tile_fraction: d as f64 / t as f64,
        });
    }
    TrainReport {
        config,
        steps,
        density: kept as f64 / total as f64,
        dense_tile_fraction: dense_tiles as f64 / tiles as f64,
        layers,
        roles,
        val_loss,
        dense_val_loss: model.dense_val_loss(),
        wall_time_secs: 0.0,
        masks,
    }
}

/// One row per masked matrix; the output head reports block `-`.
pub fn allocation_report(report: &TrainReport) -> Vec<AllocationRow> {
    report
        .layers
        .iter()
        .map(|l| AllocationRow {
            block: l.block.map_or_else(|| "-".to_string(), |b| b.to_string()),
            role: l.role.clone(),
            density: l.density,
            dense_tile_fraction: l.dense_tiles as f64 / l.tiles as f64,
        })
        .collect()
}

pub fn write_allocation_csv<W: Write>(rows: &[AllocationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{ModelConfig, Vocab, MIN_CORPUS_BYTES};

    fn setup() -> (ToyLm, Corpus) {
        let bytes: Vec<u8> = (0..MIN_CORPUS_BYTES).map(|i| b"abcdefgh"[(i * 5 + i / 7) % 8]).collect();
        let vocab = Vocab::from_corpus(&bytes, 8).unwrap();
        let corpus = Corpus::new(&bytes, &vocab, 0.1, 8).unwrap();
        let cfg = ModelConfig {
            vocab_size: 8,
            context_len: 8,
            hidden_dim: 8,
            ffn_dim: 16,
            num_heads: 2,
            num_blocks: 1,
            seed: 1,
        };
        (ToyLm::init(cfg, vocab).unwrap(), corpus)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            tile: TileShape::new(4, 4),
            optimizer: OptimizerConfig {
                steps: 10,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_json_round_trip_and_keys() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "lambda1",
                "lambda2",
                "mode",
                "optimizer",
                "prior",
                "prior_strength",
                "rho",
                "schedule",
                "seed",
                "sparsity_scope",
                "tile"
            ]
        );
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        assert!(text.contains("\"tile\":[16,16]"));
    }

    #[test]
    fn rho_out_of_range_names_bound() {
        let cfg = TrainConfig {
            rho: 0.3,
            ..Default::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("[0.5, 1]"), "{msg}");
    }

    #[test]
    fn sparsity_and_weight_terms_on_unit_masks() {
        let (model, corpus) = setup();
        let mut cfg = small_config();
        cfg.rho = 0.75;
        cfg.lambda1 = 1.0;
        cfg.lambda2 = 1.0;
        let mut trainer = Trainer::new(&model, &corpus, cfg, PatternSource::default()).unwrap();
        // Saturated dense tiles make every soft mask exactly one.
        for p in trainer.params_mut() {
            p.tile.values_mut().fill(100.0);
        }
        let mut tape = Tape::new();
        let mut rng = Rng::seed_from_u64(0);
        let batch = corpus.sample_batch(&mut rng, 1, 8);
        let g = trainer.total_loss(&mut tape, &batch, 9, None).unwrap();
        assert_eq!(tape.value(g.terms.sparsity).data()[0], 0.25);
        assert!((tape.value(g.terms.weight_reg).data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn priors_pick_dense_fraction() {
        let (model, _) = setup();
        let tile = TileShape::new(4, 4);
        let mut rng = Rng::seed_from_u64(0);
        let t = init_tile_priors(&model, Prior::MagnitudeUnstructured, 2.0, 0.75, tile, None, &mut rng).unwrap();
        let all: Vec<f32> = t.iter().flat_map(|l| l.values().data().to_vec()).collect();
        let dense = all.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(dense * 2, all.len());
        assert!(all.iter().all(|&v| v.abs() == 2.0));

        let t = init_tile_priors(&model, Prior::MagnitudeUnstructured, 2.0, 0.5, tile, None, &mut rng).unwrap();
        assert!(t.iter().flat_map(|l| l.values().data()).all(|&v| v == -2.0));
        assert!(matches!(
            init_tile_priors(&model, Prior::WandaUnstructured, 1.0, 0.75, tile, None, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tile_only_keeps_frozen_patterns() {
        let (model, corpus) = setup();
        let mut cfg = small_config();
        cfg.mode = Mode::TileOnly;
        let frozen = freeze_24(&model, ScoreMethod::Magnitude, None).unwrap();
        let report = train(&model, &corpus, cfg, PatternSource::Fixed(frozen.clone())).unwrap();
        for (m, f) in report.masks.iter().zip(&frozen) {
            assert_eq!(m.pattern_idx(), &f[..]);
        }
    }

    #[test]
    fn short_run_is_deterministic_and_consistent() {
        let (model, corpus) = setup();
        let before = model.clone();
        let a = train(&model, &corpus, small_config(), PatternSource::default()).unwrap();
        let mut b = train(&model, &corpus, small_config(), PatternSource::default()).unwrap();
        b.wall_time_secs = a.wall_time_secs;
        assert_eq!(a, b);
        assert_eq!(model, before);
        assert_eq!(a.steps.len(), 10);
        let kept: usize = a.masks.iter().map(HybridMask::kept).sum();
        assert_eq!(a.density, kept as f64 / model.registry().total_weights() as f64);

        let rows = allocation_report(&a);
        let mut csv = Vec::new();
        write_allocation_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("block,role,density,dense_tile_fraction\n"));
        assert!(text.contains("\n-,head,"));
    }
}
