//! Character-level toy transformer with frozen weights.
//!
//! Pre-norm blocks (parameter-free RMS norm), causal multi-head attention and
//! a SwiGLU MLP. Every projection, including the output head, is bias-free and
//! stored `out × in`; these are the matrices the masks act on.

use std::fmt;

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::{put_f32s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::mask::{HybridMask, Rng, TileShape};
use crate::oneshot::CalibrationStats;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const MIN_CORPUS_BYTES: usize = 100_000;
const CHECKPOINT_MAGIC: &[u8; 8] = b"PTCHCKPT";
const CHECKPOINT_VERSION: u32 = 1;
const NORM_EPS: f32 = 1e-5;
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            context_len: 64,
            hidden_dim: 64,
            ffn_dim: 128,
            num_heads: 4,
            num_blocks: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("num_blocks", self.num_blocks),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size > 256 {
            return Err(Error::Config(format!("vocab_size {} exceeds 256", self.vocab_size)));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Checks every masked matrix splits into whole hybrid tiles.
    pub fn check_tile(&self, tile: TileShape) -> Result<()> {
        for info in MaskedLayerRegistry::new(self).layers() {
            tile.hybrid_grid(info.rows, info.cols)
                .map_err(|e| Error::Config(format!("layer {}: {e}", info.name)))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Tail fraction of the corpus held out for validation.
    pub val_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 3000,
            batch_size: 8,
            learning_rate: 3e-3,
            val_fraction: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Byte-to-id table: sorted distinct corpus bytes; unknown bytes map to id 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    symbols: Vec<u8>,
    lookup: [u16; 256],
}

impl Vocab {
    pub fn from_symbols(symbols: Vec<u8>) -> Result<Self> {
        let mut lookup = [0u16; 256];
        for (i, &s) in symbols.iter().enumerate() {
            if i > 0 && symbols[i - 1] >= s {
                return Err(Error::Data("vocabulary symbols must be strictly increasing".into()));
            }
            lookup[s as usize] = i as u16;
        }
        Ok(Self { symbols, lookup })
    }

    pub fn from_corpus(bytes: &[u8], vocab_size: usize) -> Result<Self> {
        let mut seen = [false; 256];
        for &b in bytes {
            seen[b as usize] = true;
        }
        let symbols: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        if symbols.len() > vocab_size {
            return Err(Error::Config(format!(
                "corpus has {} distinct bytes but vocab_size is {vocab_size}",
                symbols.len()
            )));
        }
        Self::from_symbols(symbols)
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| self.lookup[b as usize] as usize).collect()
    }
}

/// One batch of `batch_size` windows of `seq_len` tokens, packed row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn tokens(&self) -> usize {
        self.inputs.len()
    }
}

/// Encoded corpus split into a training head and validation tail.
#[derive(Clone, Debug)]
pub struct Corpus {
    train: Vec<usize>,
    val: Vec<usize>,
}

impl Corpus {
    pub fn new(bytes: &[u8], vocab: &Vocab, val_fraction: f64, context_len: usize) -> Result<Self> {
        if bytes.len() < MIN_CORPUS_BYTES {
            return Err(Error::Data(format!(
                "corpus has {} bytes, at least {MIN_CORPUS_BYTES} required",
                bytes.len()
            )));
        }
        let ids = vocab.encode(bytes);
        let split = ids.len() - ((ids.len() as f64) * val_fraction).round() as usize;
        let (train, val) = ids.split_at(split);
        if train.len() <= context_len || val.len() <= context_len {
            return Err(Error::Data("corpus split leaves a side shorter than one window".into()));
        }
        Ok(Self {
            train: train.to_vec(),
            val: val.to_vec(),
        })
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn val_len(&self) -> usize {
        self.val.len()
    }

    /// Random training windows.
    pub fn sample_batch(&self, rng: &mut Rng, batch_size: usize, seq_len: usize) -> Batch {
        let mut inputs = Vec::with_capacity(batch_size * seq_len);
        let mut targets = Vec::with_capacity(batch_size * seq_len);
        for _ in 0..batch_size {
            let start = rng.random_range(0..self.train.len() - seq_len);
            inputs.extend_from_slice(&self.train[start..start + seq_len]);
            targets.extend_from_slice(&self.train[start + 1..start + seq_len + 1]);
        }
        Batch {
            inputs,
            targets,
            seq_len,
        }
    }

    /// Consecutive non-overlapping validation windows, grouped into batches.
    pub fn val_batches(&self, seq_len: usize, batch_size: usize) -> Vec<Batch> {
        let windows = (self.val.len() - 1) / seq_len;
        let starts: Vec<usize> = (0..windows).map(|w| w * seq_len).collect();
        starts
            .chunks(batch_size)
            .map(|chunk| {
                let mut inputs = Vec::new();
                let mut targets = Vec::new();
                for &s in chunk {
                    inputs.extend_from_slice(&self.val[s..s + seq_len]);
                    targets.extend_from_slice(&self.val[s + 1..s + seq_len + 1]);
                }
                Batch {
                    inputs,
                    targets,
                    seq_len,
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
    Head,
}

impl Role {
    pub const BLOCK_ROLES: [Role; 7] = [Role::Q, Role::K, Role::V, Role::O, Role::Gate, Role::Up, Role::Down];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::O => "o",
            Role::Gate => "gate",
            Role::Up => "up",
            Role::Down => "down",
            Role::Head => "head",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub block: Option<usize>,
    pub role: Role,
    pub rows: usize,
    pub cols: usize,
}

impl LayerInfo {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

/// Masked matrices in forward order: per block q, k, v, o, gate, up, down,
/// then the output head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedLayerRegistry {
    layers: Vec<LayerInfo>,
}

impl MaskedLayerRegistry {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (h, f) = (cfg.hidden_dim, cfg.ffn_dim);
        let mut layers = Vec::new();
        for b in 0..cfg.num_blocks {
            for role in Role::BLOCK_ROLES {
                let (rows, cols, kind) = match role {
                    Role::Q | Role::K | Role::V | Role::O => (h, h, "attn"),
                    Role::Gate | Role::Up => (f, h, "mlp"),
                    Role::Down => (h, f, "mlp"),
                    Role::Head => unreachable!(),
                };
                layers.push(LayerInfo {
                    name: format!("blocks.{b}.{kind}.{role}"),
                    block: Some(b),
                    role,
                    rows,
                    cols,
                });
            }
        }
        layers.push(LayerInfo {
            name: "head".into(),
            block: None,
            role: Role::Head,
            rows: cfg.vocab_size,
            cols: h,
        });
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// `Σ_i ‖W_i‖₀` in the dense sense: total masked element count.
    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(LayerInfo::numel).sum()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }
}

/// Handles of the model weights on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub tok_embed: Var,
    pub pos_embed: Var,
    /// Effective (possibly masked) matrices in registry order.
    pub layers: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub loss: Var,
    /// Input activation of each registry layer (q, k and v share one).
    pub layer_inputs: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub train_loss: Vec<f32>,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyLm {
    config: ModelConfig,
    vocab: Vocab,
    registry: MaskedLayerRegistry,
    tok_embed: Tensor,
    pos_embed: Tensor,
    layers: Vec<Tensor>,
    dense_val_loss: Option<f64>,
}

fn normal(rng: &mut Rng, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl ToyLm {
    /// Randomly initialised model.
    pub fn init(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.symbols().len() > config.vocab_size {
            return Err(Error::Config("vocabulary larger than vocab_size".into()));
        }
        let registry = MaskedLayerRegistry::new(&config);
        let mut rng = Rng::seed_from_u64(config.seed);
        let h = config.hidden_dim;
        let tok_embed = normal(&mut rng, &[config.vocab_size, h], 0.5);
        let pos_embed = normal(&mut rng, &[config.context_len, h], 0.1);
        let resid = (2.0 * config.num_blocks as f32).sqrt();
        let layers = registry
            .layers()
            .iter()
            .map(|l| {
                let mut std = 1.0 / (l.cols as f32).sqrt();
                if matches!(l.role, Role::O | Role::Down) {
                    std /= resid;
                }
                normal(&mut rng, &[l.rows, l.cols], std)
            })
            .collect();
        Ok(Self {
            config,
            vocab,
            registry,
            tok_embed,
            pos_embed,
            layers,
            dense_val_loss: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn registry(&self) -> &MaskedLayerRegistry {
        &self.registry
    }

    /// Frozen matrices in registry order.
    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn tok_embed(&self) -> &Tensor {
        &self.tok_embed
    }

    pub fn pos_embed(&self) -> &Tensor {
        &self.pos_embed
    }

    /// Held-out loss of the dense model recorded at the end of pretraining.
    pub fn dense_val_loss(&self) -> Option<f64> {
        self.dense_val_loss
    }

    pub fn corpus(&self, bytes: &[u8], val_fraction: f64) -> Result<Corpus> {
        Corpus::new(bytes, &self.vocab, val_fraction, self.config.context_len)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.seq_len == 0 || batch.seq_len > self.config.context_len || batch.tokens() % batch.seq_len != 0 {
            return Err(Error::Param(format!(
                "batch of {} tokens with seq_len {} does not fit context {}",
                batch.tokens(),
                batch.seq_len,
                self.config.context_len
            )));
        }
        if batch.targets.len() != batch.inputs.len() {
            return Err(Error::Param("inputs and targets differ in length".into()));
        }
        Ok(())
    }

    /// Forward pass with the given weight handles; returns mean cross-entropy.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, batch: &Batch) -> Result<ForwardOut> {
        self.check_batch(batch)?;
        if vars.layers.len() != self.registry.len() {
            return Err(Error::Config(format!(
                "{} layer weights supplied for {} registered layers",
                vars.layers.len(),
                self.registry.len()
            )));
        }
        let cfg = &self.config;
        let positions: Vec<usize> = (0..batch.tokens()).map(|i| i % batch.seq_len).collect();
        let tok = tape.embedding(vars.tok_embed, &batch.inputs)?;
        let pos = tape.embedding(vars.pos_embed, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut inputs = Vec::with_capacity(self.registry.len());
        let w = &vars.layers;
        for b in 0..cfg.num_blocks {
            let base = b * Role::BLOCK_ROLES.len();
            let h = tape.rms_norm(x, NORM_EPS)?;
            let q = tape.matmul_nt(h, w[base])?;
            let k = tape.matmul_nt(h, w[base + 1])?;
            let v = tape.matmul_nt(h, w[base + 2])?;
            let a = tape.causal_attention(q, k, v, batch.seq_len, cfg.num_heads)?;
            let o = tape.matmul_nt(a, w[base + 3])?;
            x = tape.add(x, o)?;
            let h2 = tape.rms_norm(x, NORM_EPS)?;
            let g = tape.matmul_nt(h2, w[base + 4])?;
            let u = tape.matmul_nt(h2, w[base + 5])?;
            let g = tape.silu(g);
            let m = tape.mul(g, u)?;
            let d = tape.matmul_nt(m, w[base + 6])?;
            x = tape.add(x, d)?;
            inputs.extend([h, h, h, a, h2, h2, m]);
        }
        let hf = tape.rms_norm(x, NORM_EPS)?;
        inputs.push(hf);
        let logits = tape.matmul_nt(hf, w[self.registry.len() - 1])?;
        let loss = tape.cross_entropy(logits, &batch.targets)?;
        Ok(ForwardOut {
            loss,
            layer_inputs: inputs,
        })
    }

    /// Puts the frozen embeddings on the tape and multiplies each frozen
    /// matrix by its mask. Returns the effective weight handles.
    pub fn masked_vars(&self, tape: &mut Tape, masks: &[Var]) -> Result<ModelVars> {
        if masks.len() != self.registry.len() {
            return Err(Error::Config(format!(
                "{} masks supplied for {} registered layers",
                masks.len(),
                self.registry.len()
            )));
        }
        let tok_embed = tape.constant(self.tok_embed.clone());
        let pos_embed = tape.constant(self.pos_embed.clone());
        let mut layers = Vec::with_capacity(masks.len());
        for ((w, &m), info) in self.layers.iter().zip(masks).zip(self.registry.layers()) {
            if tape.shape(m) != w.shape() {
                return Err(Error::Config(format!(
                    "mask for {} has shape {:?}, weight is {:?}",
                    info.name,
                    tape.shape(m),
                    w.shape()
                )));
            }
            let wv = tape.constant(w.clone());
            layers.push(tape.mul(m, wv)?);
        }
        Ok(ModelVars {
            tok_embed,
            pos_embed,
            layers,
        })
    }

    /// Loss with every matrix replaced by `mask ⊙ W`.
    pub fn forward_masked(&self, tape: &mut Tape, batch: &Batch, masks: &[Var]) -> Result<(ForwardOut, ModelVars)> {
        let vars = self.masked_vars(tape, masks)?;
        let out = self.forward(tape, &vars, batch)?;
        Ok((out, vars))
    }

    /// Frozen weights as tape constants, with `layers` substituted for the
    /// registry matrices.
    pub fn constant_vars(&self, tape: &mut Tape, layers: &[Tensor]) -> Result<ModelVars> {
        if layers.len() != self.registry.len() {
            return Err(Error::Config(format!(
                "{} layer weights supplied for {} registered layers",
                layers.len(),
                self.registry.len()
            )));
        }
        for ((l, w), info) in layers.iter().zip(&self.layers).zip(self.registry.layers()) {
            if l.shape() != w.shape() {
                return Err(Error::Config(format!(
                    "{} has shape {:?}, expected {:?}",
                    info.name,
                    l.shape(),
                    w.shape()
                )));
            }
        }
        Ok(ModelVars {
            tok_embed: tape.constant(self.tok_embed.clone()),
            pos_embed: tape.constant(self.pos_embed.clone()),
            layers: layers.iter().map(|l| tape.constant(l.clone())).collect(),
        })
    }

    /// `W ⊙ expand(mask)` for every registry layer.
    pub fn apply_masks(&self, masks: &[HybridMask]) -> Result<Vec<Tensor>> {
        if masks.len() != self.registry.len() {
            return Err(Error::Config(format!(
                "{} masks supplied for {} registered layers",
                masks.len(),
                self.registry.len()
            )));
        }
        self.layers
            .iter()
            .zip(masks)
            .map(|(w, m)| w.hadamard(&m.expand().0))
            .collect()
    }

    /// Mean held-out cross-entropy (nats per character) with the given matrices.
    pub fn eval_with_layers(&self, corpus: &Corpus, layers: &[Tensor]) -> Result<f64> {
        let batches = corpus.val_batches(self.config.context_len, EVAL_BATCH);
        let mut total = 0.0f64;
        let mut tokens = 0usize;
        for batch in &batches {
            let mut tape = Tape::new();
            let vars = self.constant_vars(&mut tape, layers)?;
            let out = self.forward(&mut tape, &vars, batch)?;
            total += tape.value(out.loss).data()[0] as f64 * batch.tokens() as f64;
            tokens += batch.tokens();
        }
        Ok(total / tokens as f64)
    }

    pub fn eval_dense(&self, corpus: &Corpus) -> Result<f64> {
        self.eval_with_layers(corpus, &self.layers)
    }

    pub fn eval_masked(&self, corpus: &Corpus, masks: &[HybridMask]) -> Result<f64> {
        let layers = self.apply_masks(masks)?;
        self.eval_with_layers(corpus, &layers)
    }

    /// Input-activation norms of every registry layer over `sequences`
    /// random training windows of the dense model.
    pub fn calibrate(&self, corpus: &Corpus, sequences: usize, seed: u64) -> Result<Vec<CalibrationStats>> {
        let mut rng = Rng::seed_from_u64(seed);
        let mut stats: Vec<CalibrationStats> = self
            .registry
            .layers()
            .iter()
            .map(|l| CalibrationStats::new(l.cols))
            .collect();
        let mut left = sequences;
        while left > 0 {
            let n = left.min(EVAL_BATCH);
            left -= n;
            let batch = corpus.sample_batch(&mut rng, n, self.config.context_len);
            let mut tape = Tape::new();
            let vars = self.constant_vars(&mut tape, &self.layers)?;
            let out = self.forward(&mut tape, &vars, &batch)?;
            for (s, &x) in stats.iter_mut().zip(&out.layer_inputs) {
                s.accumulate(tape.value(x))?;
            }
        }
        Ok(stats)
    }

    // ----- checkpoint ------------------------------------------------------

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        for (name, v) in [
            ("vocab_size", c.vocab_size),
            ("context_len", c.context_len),
            ("hidden_dim", c.hidden_dim),
            ("ffn_dim", c.ffn_dim),
            ("num_heads", c.num_heads),
            ("num_blocks", c.num_blocks),
        ] {
            put_u32(&mut out, to_u32(v, name)?);
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&self.dense_val_loss.unwrap_or(f64::NAN).to_le_bytes());
        put_u32(&mut out, self.vocab.symbols().len() as u32);
        out.extend_from_slice(self.vocab.symbols());
        let tensors: Vec<&Tensor> = [&self.tok_embed, &self.pos_embed]
            .into_iter()
            .chain(self.layers.iter())
            .collect();
        put_u32(&mut out, tensors.len() as u32);
        for t in tensors {
            let (r, c) = t.dims2()?;
            put_u32(&mut out, to_u32(r, "rows")?);
            put_u32(&mut out, to_u32(c, "cols")?);
            put_f32s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let at = r.pos();
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
        }
        let mut field = |name: &str| -> Result<usize> { Ok(r.u32(name)? as usize) };
        let vocab_size = field("vocab_size")?;
        let context_len = field("context_len")?;
        let hidden_dim = field("hidden_dim")?;
        let ffn_dim = field("ffn_dim")?;
        let num_heads = field("num_heads")?;
        let num_blocks = field("num_blocks")?;
        let seed = r.u64("seed")?;
        let dense_val_loss = Some(f64::from_bits(r.u64("dense loss")?)).filter(|v| !v.is_nan());
        let config = ModelConfig {
            vocab_size,
            context_len,
            hidden_dim,
            ffn_dim,
            num_heads,
            num_blocks,
            seed,
        };
        config
            .validate()
            .map_err(|e| Error::format(12, format!("invalid model config: {e}")))?;
        let at = r.pos();
        let n_symbols = r.u32("symbol count")? as usize;
        if n_symbols > vocab_size {
            return Err(Error::format(at, "more symbols than vocab_size"));
        }
        let at = r.pos();
        let vocab = Vocab::from_symbols(r.take(n_symbols, "symbols")?.to_vec())
            .map_err(|e| Error::format(at, e.to_string()))?;
        let registry = MaskedLayerRegistry::new(&config);
        let mut expected = vec![(vocab_size, hidden_dim), (context_len, hidden_dim)];
        expected.extend(registry.layers().iter().map(|l| (l.rows, l.cols)));
        let at = r.pos();
        let count = r.u32("tensor count")? as usize;
        if count != expected.len() {
            return Err(Error::format(at, format!("expected {} tensors, found {count}", expected.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for (rows, cols) in expected {
            let at = r.pos();
            let (rr, cc) = (r.u32("rows")? as usize, r.u32("cols")? as usize);
            if (rr, cc) != (rows, cols) {
                return Err(Error::format(at, format!("tensor is {rr}x{cc}, expected {rows}x{cols}")));
            }
            tensors.push(Tensor::new(vec![rows, cols], r.f32s(rows * cols, "weights")?)?);
        }
        r.finish()?;
        let mut it = tensors.into_iter();
        let tok_embed = it.next().expect("tok");
        let pos_embed = it.next().expect("pos");
        Ok(Self {
            config,
            vocab,
            registry,
            tok_embed,
            pos_embed,
            layers: it.collect(),
            dense_val_loss,
        })
    }
}

/// Trains the dense model with Adam from a seeded initialisation.
///
/// Batches come from a stream seeded by `seed + 1`; the global gradient norm
/// is clipped at 1.
/// Cosine decay from `peak` at step 0 towards zero at `steps`.
pub fn cosine_lr(peak: f32, step: usize, steps: usize) -> f32 {
    let frac = step as f64 / steps as f64;
    (peak as f64 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
}

pub fn pretrain(corpus_bytes: &[u8], cfg: &PretrainConfig) -> Result<(ToyLm, PretrainLog)> {
    cfg.validate()?;
    let vocab = Vocab::from_corpus(corpus_bytes, cfg.model.vocab_size)?;
    let corpus = Corpus::new(corpus_bytes, &vocab, cfg.val_fraction, cfg.model.context_len)?;
    let mut model = ToyLm::init(cfg.model.clone(), vocab)?;
    let mut data_rng = Rng::seed_from_u64(cfg.model.seed.wrapping_add(1));
    let sizes: Vec<usize> = [&model.tok_embed, &model.pos_embed]
        .into_iter()
        .chain(model.layers.iter())
        .map(Tensor::numel)
        .collect();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &sizes,
    );
    let mut train_loss = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = corpus.sample_batch(&mut data_rng, cfg.batch_size, cfg.model.context_len);
        let mut tape = Tape::new();
        let vars = ModelVars {
            tok_embed: tape.param(model.tok_embed.clone()),
            pos_embed: tape.param(model.pos_embed.clone()),
            layers: model.layers.iter().map(|w| tape.param(w.clone())).collect(),
        };
        let out = model.forward(&mut tape, &vars, &batch)?;
        let loss = tape.value(out.loss).data()[0];
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        train_loss.push(loss);
        tape.backward(out.loss)?;
        let handles: Vec<Var> = [vars.tok_embed, vars.pos_embed]
            .into_iter()
            .chain(vars.layers.iter().copied())
            .collect();
        let norm_sq: f64 = handles
            .iter()
            .map(|&h| tape.grad(h).expect("param").iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>())
            .sum();
        let clip = (1.0 / norm_sq.sqrt().max(1.0)) as f32;
        adam.set_learning_rate(cosine_lr(cfg.learning_rate, step, cfg.steps));
        adam.tick();
        let params = [&mut model.tok_embed, &mut model.pos_embed]
            .into_iter()
            .chain(model.layers.iter_mut());
        for (slot, (p, &h)) in params.zip(&handles).enumerate() {
            adam.update_scaled(slot, p.data_mut(), tape.grad(h).expect("param"), clip);
        }
    }
    let val_loss = model.eval_dense(&corpus)?;
    model.dense_val_loss = Some(val_loss);
    Ok((model, PretrainLog { train_loss, val_loss }))
}
