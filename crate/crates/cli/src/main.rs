use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use patch_core::hybrid::{autotune, sidecar_path, Accounting, HybridSparseMatrix};
use patch_core::lm::{pretrain, LayerInfo, PretrainConfig, ToyLm};
use patch_core::mask::{HybridMask, Rng, TileShape};
use patch_core::oneshot::{prune_2_4, prune_unstructured, score, ScoreMethod};
use patch_core::trainer::{allocation_report, calibration, train, write_allocation_csv, Mode, PatternSource, TrainConfig};
use patch_core::{Error, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "patch", version, about = "Hybrid dense / 2:4 tile sparsity for a toy character LM")]
struct Cli {
    /// Seed for every random stream; overrides seeds given in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense toy LM and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Learn hybrid masks for a checkpoint and write the report, allocation
    /// CSV and one compressed matrix per layer.
    Prune(PruneArgs),
    /// Held-out loss for the dense model and for each mask directory.
    Eval(EvalArgs),
    /// Autotune and time the SpMM kernel on a compressed matrix.
    Bench(BenchArgs),
    /// One-shot magnitude or Wanda pruning (2:4 or unstructured).
    Baseline(BaselineArgs),
    /// Write a random hybrid matrix at a given density.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// JSON pretraining config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Frozen 2:4 source for tile_only mode: `magnitude`, `wanda`, or a
    /// directory of `.hsm` files whose sparse-tile patterns are reused.
    #[arg(long = "frozen-24")]
    frozen_24: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Directory of per-layer `.hsm` files; repeat for several configurations.
    #[arg(long)]
    masks: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Timed repetitions per plan (at least 5).
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "magnitude")]
    method: ScoreMethod,
    /// `2:4`, or an unstructured sparsity fraction in [0, 1].
    #[arg(long, default_value = "2:4")]
    pattern: Pattern,
    /// Storage tile for written `.hsm` files (2:4 only).
    #[arg(long, default_value = "16x16")]
    tile: Tile,
    /// Write compressed layers here (2:4 only).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long, default_value = "64x64")]
    tile: Tile,
    /// Target density in [0.5, 1]; rounded to whole dense tiles.
    #[arg(long)]
    density: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy)]
struct Tile(TileShape);

impl FromStr for Tile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (r, c) = s.split_once('x').ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        Ok(Tile(TileShape::new(parse(r)?, parse(c)?)))
    }
}

#[derive(Clone, Copy)]
enum Pattern {
    TwoFour,
    Unstructured(f64),
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "2:4" {
            return Ok(Pattern::TwoFour);
        }
        s.parse::<f64>()
            .map(Pattern::Unstructured)
            .map_err(|_| format!("expected 2:4 or a sparsity fraction, got {s:?}"))
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    layer: &'a str,
    role: Option<String>,
    block: Option<usize>,
    accounting: Accounting,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Format { .. } => 4,
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a, cli.seed),
        Command::Prune(a) => cmd_prune(a, cli.seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a, cli.seed),
        Command::Baseline(a) => cmd_baseline(a, cli.seed),
        Command::Synth(a) => cmd_synth(a, cli.seed),
    };
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Error> {
    match path {
        Some(p) => Ok(serde_json::from_slice(&read(p)?)?),
        None => Ok(T::default()),
    }
}

fn perplexity(loss: f64) -> f64 {
    loss.exp()
}

fn cmd_pretrain(a: PretrainArgs, seed: Option<u64>) -> Result<Value, Error> {
    let bytes = read(&a.corpus)?;
    let mut cfg: PretrainConfig = load_json(a.config.as_deref())?;
    if let Some(s) = seed {
        cfg.model.seed = s;
    }
    let (model, log) = pretrain(&bytes, &cfg)?;
    let ckpt = model.to_bytes()?;
    fs::write(&a.out, &ckpt)?;
    Ok(json!({
        "command": "pretrain",
        "checkpoint": a.out,
        "bytes": ckpt.len(),
        "steps": cfg.steps,
        "seed": cfg.model.seed,
        "final_train_loss": log.train_loss.last(),
        "val_loss": log.val_loss,
        "val_perplexity": perplexity(log.val_loss),
    }))
}

fn layer_path(dir: &Path, layer: &LayerInfo) -> PathBuf {
    dir.join(format!("{}.hsm", layer.name))
}

/// Reads one `.hsm` per registry layer, checking geometry.
fn load_layers(model: &ToyLm, dir: &Path) -> Result<Vec<HybridSparseMatrix>, Error> {
    model
        .registry()
        .layers()
        .iter()
        .map(|l| {
            let m = HybridSparseMatrix::read_file(&layer_path(dir, l)).map_err(|e| match e {
                Error::Format { offset, reason } => Error::Format {
                    offset,
                    reason: format!("{}: {reason}", layer_path(dir, l).display()),
                },
                other => other,
            })?;
            if m.dims() != (l.rows, l.cols) {
                return Err(Error::Shape {
                    op: "layer geometry",
                    lhs: vec![l.rows, l.cols],
                    rhs: vec![m.dims().0, m.dims().1],
                });
            }
            Ok(m)
        })
        .collect()
}

fn write_layers(model: &ToyLm, dir: &Path, masks: &[HybridMask]) -> Result<Vec<PathBuf>, Error> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for ((info, w), mask) in model.registry().layers().iter().zip(model.layers()).zip(masks) {
        let m = HybridSparseMatrix::compress(w, mask)?;
        let path = layer_path(dir, info);
        m.write_file(&path)?;
        let sidecar = Sidecar {
            layer: &info.name,
            role: Some(info.role.to_string()),
            block: info.block,
            accounting: m.accounting(1),
        };
        fs::write(sidecar_path(&path), serde_json::to_vec_pretty(&sidecar)?)?;
        written.push(path);
    }
    Ok(written)
}

fn frozen_source(model: &ToyLm, spec: &str) -> Result<PatternSource, Error> {
    if let Ok(method) = spec.parse::<ScoreMethod>() {
        return Ok(PatternSource::Score(method));
    }
    let dir = Path::new(spec);
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "--frozen-24 expects magnitude, wanda or a directory of .hsm files, got {spec:?}"
        )));
    }
    let layers = load_layers(model, dir)?;
    let patterns = layers
        .iter()
        .map(|m| Ok(m.to_mask()?.pattern_idx().to_vec()))
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(PatternSource::Fixed(patterns))
}

fn cmd_prune(a: PruneArgs, seed: Option<u64>) -> Result<Value, Error> {
    let model = ToyLm::from_bytes(&read(&a.checkpoint)?)?;
    let bytes = read(&a.corpus)?;
    let corpus = model.corpus(&bytes, a.val_fraction)?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json(&String::from_utf8_lossy(&read(p)?))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let source = match &a.frozen_24 {
        Some(spec) if cfg.mode == Mode::TileOnly => frozen_source(&model, spec)?,
        Some(_) => return Err(Error::Config("--frozen-24 requires mode tile_only".into())),
        None => PatternSource::default(),
    };
    let report = train(&model, &corpus, cfg, source)?;
    fs::create_dir_all(&a.out)?;
    let report_path = a.out.join("report.json");
    fs::write(&report_path, serde_json::to_vec_pretty(&report)?)?;
    let csv_path = a.out.join("allocation.csv");
    write_allocation_csv(&allocation_report(&report), fs::File::create(&csv_path)?)?;
    let layers = write_layers(&model, &a.out, &report.masks)?;
    Ok(json!({
        "command": "prune",
        "out": a.out,
        "report": report_path,
        "allocation": csv_path,
        "layers": layers,
        "rho": report.config.rho,
        "mode": report.config.mode,
        "seed": report.config.seed,
        "density": report.density,
        "dense_tile_fraction": report.dense_tile_fraction,
        "val_loss": report.val_loss,
        "val_perplexity": perplexity(report.val_loss),
        "dense_val_loss": report.dense_val_loss,
        "wall_time_secs": report.wall_time_secs,
    }))
}

fn cmd_eval(a: EvalArgs) -> Result<Value, Error> {
    let model = ToyLm::from_bytes(&read(&a.checkpoint)?)?;
    let bytes = read(&a.corpus)?;
    let corpus = model.corpus(&bytes, a.val_fraction)?;
    let dense = model.eval_dense(&corpus)?;
    let mut configs = Vec::new();
    for dir in &a.masks {
        let layers = load_layers(&model, dir)?;
        let weights: Vec<Tensor> = layers.iter().map(HybridSparseMatrix::decompress).collect();
        let kept: usize = layers.iter().map(HybridSparseMatrix::kept).sum();
        let loss = model.eval_with_layers(&corpus, &weights)?;
        configs.push(json!({
            "masks": dir,
            "density": kept as f64 / model.registry().total_weights() as f64,
            "loss": loss,
            "perplexity": perplexity(loss),
        }));
    }
    Ok(json!({
        "command": "eval",
        "dense": { "loss": dense, "perplexity": perplexity(dense) },
        "configs": configs,
    }))
}

fn cmd_bench(a: BenchArgs, seed: Option<u64>) -> Result<Value, Error> {
    let m = HybridSparseMatrix::read_file(&a.matrix)?;
    let tune = autotune(&m, a.batch, a.threads, a.reps, seed.unwrap_or(0))?;
    let plans: Vec<Value> = tune
        .timings
        .iter()
        .map(|t| {
            json!({
                "tile": [t.plan.tile.rows, t.plan.tile.cols],
                "order": t.plan.order,
                "threads": t.plan.threads,
                "median_ns": t.median_ns,
                "samples_ns": t.samples_ns,
            })
        })
        .collect();
    let chosen = &tune.timings[tune.chosen];
    let tokens_per_sec = a.batch as f64 / (chosen.median_ns * 1e-9);
    Ok(json!({
        "command": "bench",
        "matrix": a.matrix,
        "batch": a.batch,
        "plans": plans,
        "chosen": tune.chosen,
        "chosen_plan": tune.plan(),
        "tokens_per_sec": tokens_per_sec,
        "accounting": m.accounting(a.batch),
    }))
}

fn cmd_baseline(a: BaselineArgs, seed: Option<u64>) -> Result<Value, Error> {
    let model = ToyLm::from_bytes(&read(&a.checkpoint)?)?;
    let bytes = read(&a.corpus)?;
    let corpus = model.corpus(&bytes, a.val_fraction)?;
    let calib = match a.method {
        ScoreMethod::Wanda => Some(calibration(&model, &corpus, seed.unwrap_or(0))?),
        ScoreMethod::Magnitude => None,
    };
    let scores = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, w)| score(w, a.method, calib.as_ref().map(|c| &c[i])))
        .collect::<Result<Vec<_>, Error>>()?;
    let total = model.registry().total_weights() as f64;
    let (loss, density, written, pattern) = match a.pattern {
        Pattern::TwoFour => {
            model.config().check_tile(a.tile.0)?;
            let masks = scores
                .iter()
                .map(|s| prune_2_4(s, a.tile.0))
                .collect::<Result<Vec<_>, Error>>()?;
            let loss = model.eval_masked(&corpus, &masks)?;
            let kept: usize = masks.iter().map(HybridMask::kept).sum();
            let written = match &a.out {
                Some(dir) => write_layers(&model, dir, &masks)?,
                None => Vec::new(),
            };
            (loss, kept as f64 / total, written, "2:4".to_string())
        }
        Pattern::Unstructured(s) => {
            if a.out.is_some() {
                return Err(Error::Config("unstructured masks cannot be stored as hybrid tiles".into()));
            }
            let masks = scores
                .iter()
                .map(|sc| prune_unstructured(sc, s))
                .collect::<Result<Vec<_>, Error>>()?;
            let weights = model
                .layers()
                .iter()
                .zip(&masks)
                .map(|(w, m)| w.hadamard(m))
                .collect::<Result<Vec<_>, Error>>()?;
            let kept: f64 = masks.iter().map(Tensor::sum).sum();
            let loss = model.eval_with_layers(&corpus, &weights)?;
            (loss, kept / total, Vec::new(), format!("unstructured:{s}"))
        }
    };
    Ok(json!({
        "command": "baseline",
        "method": a.method,
        "pattern": pattern,
        "density": density,
        "loss": loss,
        "perplexity": perplexity(loss),
        "dense_loss": model.dense_val_loss(),
        "layers": written,
    }))
}

fn cmd_synth(a: SynthArgs, seed: Option<u64>) -> Result<Value, Error> {
    if !(0.5..=1.0).contains(&a.density) {
        return Err(Error::Config(format!("density must lie in [0.5, 1], got {}", a.density)));
    }
    let tile = a.tile.0;
    let (gr, gc) = tile.hybrid_grid(a.rows, a.cols)?;
    let mut rng = Rng::seed_from_u64(seed.unwrap_or(0));
    let weights: Vec<f32> = (0..a.rows * a.cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let tiles = gr * gc;
    let dense = ((2.0 * a.density - 1.0) * tiles as f64).round() as usize;
    let mut order: Vec<usize> = (0..tiles).collect();
    order.shuffle(&mut rng);
    let mut flags = vec![false; tiles];
    for &t in &order[..dense] {
        flags[t] = true;
    }
    let patterns: Vec<u8> = (0..a.rows * a.cols / 4).map(|_| rng.random_range(0..6u8)).collect();
    let mask = HybridMask::new(a.rows, a.cols, tile, flags, patterns)?;
    let m = HybridSparseMatrix::compress(&Tensor::new(vec![a.rows, a.cols], weights)?, &mask)?;
    m.write_file(&a.out)?;
    let sidecar = Sidecar {
        layer: "synthetic",
        role: None,
        block: None,
        accounting: m.accounting(1),
    };
    fs::write(sidecar_path(&a.out), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(json!({
        "command": "synth",
        "out": a.out,
        "density": m.density(),
        "dense_tiles": m.dense_tiles(),
        "tiles": tiles,
        "bytes": m.serialized_len(),
    }))
}
