//! Finite-difference checks of tape gradients against the f64 oracles.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use patch_core::autodiff::{Tape, Var};
use patch_core::lm::{Corpus, ModelConfig, ToyLm, Vocab, MIN_CORPUS_BYTES};
use patch_core::mask::{merge_masks, sample_gumbel, soft_mask_2_4, soft_mask_tile, Rng, TileShape};
use patch_core::trainer::{Mode, PatternSource, PatternState, SparsityScope, TrainConfig, Trainer};
use patch_core::{Result, Tensor};

use super::oracle::{self, to64, LayerOracle, ModelOracle, PatternOracle};

pub const STEP: f64 = 1e-3;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Case {
    pub name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
    reference: Reference,
}

/// Worst errors of one case: gradient and forward value, both relative ∞-norm.
#[derive(Clone, Copy, Debug)]
pub struct CaseError {
    pub grad: f64,
    pub value: f64,
}

fn normal(rng: &mut Rng, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.05, 2.0);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn dim(rng: &mut Rng) -> usize {
    rng.random_range(1..=5)
}

fn case(name: &'static str, inputs: Vec<Tensor>, build: Build, reference: Reference) -> Case {
    Case {
        name,
        inputs,
        build,
        reference,
    }
}

fn unary(name: &'static str, x: Tensor, t: fn(&mut Tape, Var) -> Var, f: fn(f64) -> f64) -> Case {
    case(
        name,
        vec![x],
        Box::new(move |tape, v| Ok(t(tape, v[0]))),
        Box::new(move |x| x[0].iter().map(|&v| f(v)).collect()),
    )
}

/// One randomly shaped instance of every tape op, plus the mask builders.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();

    let (m, k, n) = (dim(r), dim(r), dim(r));
    cases.push(case(
        "matmul",
        vec![normal(r, &[m, k], 1.0), normal(r, &[k, n], 1.0)],
        Box::new(|t, v| t.matmul(v[0], v[1])),
        Box::new(move |x| oracle::matmul(&x[0], &x[1], m, k, n)),
    ));
    let (m, k, n) = (dim(r), dim(r), dim(r));
    cases.push(case(
        "matmul_nt",
        vec![normal(r, &[m, k], 1.0), normal(r, &[n, k], 1.0)],
        Box::new(|t, v| t.matmul_nt(v[0], v[1])),
        Box::new(move |x| oracle::matmul_nt(&x[0], &x[1], m, k, n)),
    ));

    let shape = [dim(r), dim(r)];
    let pair = |r: &mut Rng| vec![normal(r, &shape, 1.0), normal(r, &shape, 1.0)];
    cases.push(case(
        "add",
        pair(r),
        Box::new(|t, v| t.add(v[0], v[1])),
        Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
    ));
    cases.push(case(
        "sub",
        pair(r),
        Box::new(|t, v| t.sub(v[0], v[1])),
        Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect()),
    ));
    cases.push(case(
        "mul",
        pair(r),
        Box::new(|t, v| t.mul(v[0], v[1])),
        Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
    ));

    let c: f32 = r.random_range(-2.0..2.0);
    cases.push(case(
        "scale",
        vec![normal(r, &shape, 1.0)],
        Box::new(move |t, v| Ok(t.scale(v[0], c))),
        Box::new(move |x| x[0].iter().map(|v| v * c as f64).collect()),
    ));
    cases.push(case(
        "add_scalar",
        vec![normal(r, &shape, 1.0)],
        Box::new(move |t, v| Ok(t.add_scalar(v[0], c))),
        Box::new(move |x| x[0].iter().map(|v| v + c as f64).collect()),
    ));
    cases.push(unary("one_minus", normal(r, &shape, 1.0), Tape::one_minus, |v| 1.0 - v));
    cases.push(unary("exp", uniform(r, &shape, -2.0, 2.0), Tape::exp, f64::exp));
    cases.push(unary("log", uniform(r, &shape, 0.5, 2.0), Tape::log, f64::ln));
    cases.push(unary("abs", away_from_zero(r, &shape), Tape::abs, f64::abs));
    cases.push(unary("silu", normal(r, &shape, 2.0), Tape::silu, oracle::silu));

    let s3 = vec![dim(r), dim(r), dim(r)];
    let axis = r.random_range(0..3);
    let s = s3.clone();
    cases.push(case(
        "softmax",
        vec![normal(r, &s3, 1.5)],
        Box::new(move |t, v| t.softmax(v[0], axis)),
        Box::new(move |x| oracle::softmax_affine(&x[0], &s, axis, 1.0, None)),
    ));
    let axis = r.random_range(0..3);
    let scale: f32 = r.random_range(0.25..2.0);
    let offset = normal(r, &s3, 1.0).into_data();
    let (s, off64) = (s3.clone(), to64(&offset));
    cases.push(case(
        "softmax_affine",
        vec![normal(r, &s3, 1.0)],
        Box::new(move |t, v| t.softmax_affine(v[0], axis, scale, Some(&offset))),
        Box::new(move |x| oracle::softmax_affine(&x[0], &s, axis, scale as f64, Some(&off64))),
    ));

    let (k, g, c) = (r.random_range(2..=6), dim(r), dim(r));
    let table = normal(r, &[k, c], 1.0);
    let offset = normal(r, &[g, k], 1.0).into_data();
    let scale: f32 = r.random_range(0.25..2.0);
    let (t64, off64) = (to64(table.data()), to64(&offset));
    cases.push(case(
        "softmax_mix",
        vec![normal(r, &[k, g], 1.0)],
        Box::new(move |t, v| t.softmax_mix(v[0], &table, scale, Some(&offset), &[g, c])),
        Box::new(move |x| oracle::softmax_mix(&x[0], k, g, &t64, c, scale as f64, Some(&off64))),
    ));

    let (a, b) = (dim(r), dim(r));
    cases.push(case(
        "reshape",
        vec![normal(r, &[a, b], 1.0)],
        Box::new(move |t, v| t.reshape(v[0], &[b, a])),
        Box::new(|x| x[0].clone()),
    ));
    cases.push(case(
        "transpose",
        vec![normal(r, &[a, b], 1.0)],
        Box::new(|t, v| t.transpose(v[0])),
        Box::new(move |x| oracle::transpose(&x[0], a, b)),
    ));
    let (b1, b2) = (dim(r), dim(r));
    cases.push(case(
        "kron_ones",
        vec![normal(r, &[a, b], 1.0)],
        Box::new(move |t, v| t.kron_ones(v[0], b1, b2)),
        Box::new(move |x| oracle::kron_ones(&x[0], a, b, b1, b2)),
    ));
    cases.push(case(
        "tile_merge",
        vec![uniform(r, &[a, b], 0.0, 1.0), uniform(r, &[a * b1, b * b2], 0.0, 1.0)],
        Box::new(move |t, v| t.tile_merge(v[0], v[1], b1, b2)),
        Box::new(move |x| oracle::merge(&oracle::kron_ones(&x[0], a, b, b1, b2), &x[1])),
    ));
    cases.push(case(
        "sum",
        vec![normal(r, &[a, b], 1.0)],
        Box::new(|t, v| Ok(t.sum(v[0]))),
        Box::new(|x| vec![x[0].iter().sum()]),
    ));
    cases.push(case(
        "sum_sq",
        vec![normal(r, &[a, b], 1.0)],
        Box::new(|t, v| Ok(t.sum_sq(v[0]))),
        Box::new(|x| vec![x[0].iter().map(|v| v * v).sum()]),
    ));

    let (rows, vocab) = (dim(r), r.random_range(2..=6));
    let targets: Vec<usize> = (0..rows).map(|_| r.random_range(0..vocab)).collect();
    let t2 = targets.clone();
    cases.push(case(
        "cross_entropy",
        vec![normal(r, &[rows, vocab], 2.0)],
        Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
        Box::new(move |x| vec![oracle::cross_entropy(&x[0], vocab, &t2)]),
    ));

    let (table_rows, d) = (dim(r), dim(r));
    let ids: Vec<usize> = (0..r.random_range(1..=8)).map(|_| r.random_range(0..table_rows)).collect();
    let ids2 = ids.clone();
    cases.push(case(
        "embedding",
        vec![normal(r, &[table_rows, d], 1.0)],
        Box::new(move |t, v| t.embedding(v[0], &ids)),
        Box::new(move |x| oracle::embedding(&x[0], d, &ids2)),
    ));

    let (rows, p, q) = (dim(r), dim(r), dim(r));
    cases.push(case(
        "concat_cols",
        vec![normal(r, &[rows, p], 1.0), normal(r, &[rows, q], 1.0)],
        Box::new(|t, v| t.concat_cols(v[0], v[1])),
        Box::new(move |x| oracle::concat_cols(&x[0], &x[1], rows, p, q)),
    ));
    let col = r.random_range(0..p);
    cases.push(case(
        "select_col",
        vec![normal(r, &[rows, p], 1.0)],
        Box::new(move |t, v| t.select_col(v[0], col)),
        Box::new(move |x| oracle::select_col(&x[0], rows, p, col)),
    ));
    let h = r.random_range(2..=8);
    cases.push(case(
        "rms_norm",
        vec![normal(r, &[rows, h], 1.0)],
        Box::new(|t, v| t.rms_norm(v[0], 1e-5)),
        Box::new(move |x| oracle::rms_norm(&x[0], h, 1e-5)),
    ));

    let (batch, seq, heads, dh) = (r.random_range(1..=2), r.random_range(1..=5), r.random_range(1..=3), dim(r));
    let dmodel = heads * dh;
    let shape = [batch * seq, dmodel];
    cases.push(case(
        "causal_attention",
        vec![normal(r, &shape, 1.0), normal(r, &shape, 1.0), normal(r, &shape, 1.0)],
        Box::new(move |t, v| t.causal_attention(v[0], v[1], v[2], seq, heads)),
        Box::new(move |x| oracle::causal_attention(&x[0], &x[1], &x[2], dmodel, seq, heads)),
    ));

    // Mask builders with Gumbel noise from a fixed stream.
    let tau: f32 = r.random_range(0.5..4.0);
    let kappa: f32 = r.random_range(0.5..3.0);
    let noise_seed: u64 = r.random();
    let (tr, tc) = (dim(r), dim(r));
    let tile = TileShape::new(dim(r), 4 * dim(r));
    let z = to64(&sample_gumbel(&mut Rng::seed_from_u64(noise_seed), 2 * tr * tc));
    cases.push(case(
        "soft_mask_tile",
        vec![normal(r, &[tr, tc], 1.0)],
        Box::new(move |t, v| soft_mask_tile(t, v[0], tile, tau, kappa, Some(&mut Rng::seed_from_u64(noise_seed)))),
        Box::new(move |x| {
            oracle::tile_mask(&x[0], tr * tile.rows, tc * tile.cols, tile.rows, tile.cols, tau as f64, kappa as f64, Some(&z))
        }),
    ));
    let (d1, d2) = (dim(r), 4 * dim(r));
    let groups = d1 * d2 / 4;
    let z = to64(&sample_gumbel(&mut Rng::seed_from_u64(noise_seed), 6 * groups));
    cases.push(case(
        "soft_mask_2_4",
        vec![normal(r, &[6, groups], 1.0)],
        Box::new(move |t, v| soft_mask_2_4(t, v[0], d1, d2, tau, kappa, Some(&mut Rng::seed_from_u64(noise_seed)))),
        Box::new(move |x| oracle::mask_2_4(&x[0], d1, d2, tau as f64, kappa as f64, Some(&z))),
    ));
    cases.push(case(
        "merge_masks",
        vec![uniform(r, &[d1, d2], 0.0, 1.0), uniform(r, &[d1, d2], 0.0, 1.0)],
        Box::new(|t, v| merge_masks(t, v[0], v[1])),
        Box::new(|x| oracle::merge(&x[0], &x[1])),
    ));
    cases
}

/// Compares the tape gradient of `Σ op(x) ⊙ R` with central differences of
/// the oracle, for a fixed random `R`.
pub fn check_case(c: &Case, seed: u64) -> CaseError {
    let mut rng = Rng::seed_from_u64(seed ^ 0x5eed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = c.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (c.build)(&mut tape, &vars).unwrap_or_else(|e| panic!("{}: {e}", c.name));
    let weights = normal(&mut rng, tape.shape(out), 1.0);
    let w64 = to64(weights.data());
    let wv = tape.constant(weights);
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let x64: Vec<Vec<f64>> = c.inputs.iter().map(|t| to64(t.data())).collect();
    let value = oracle::rel_inf(&to64(tape.value(out).data()), &(c.reference)(&x64));
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, &v) in vars.iter().enumerate() {
        analytic.extend(to64(tape.grad(v).expect("param gradient")));
        numeric.extend(oracle::finite_diff(&x64[i], STEP, |xi| {
            let mut xs = x64.clone();
            xs[i] = xi.to_vec();
            (c.reference)(&xs).iter().zip(&w64).map(|(a, b)| a * b).sum()
        }));
    }
    CaseError {
        grad: oracle::rel_inf(&analytic, &numeric),
        value,
    }
}

/// Two-block toy model on a small synthetic corpus.
pub fn tiny_model(seed: u64) -> (ToyLm, Corpus) {
    let bytes: Vec<u8> = (0..MIN_CORPUS_BYTES)
        .map(|i| b"abcdefgh"[(i * 5 + i / 7 + (i / 13) % 3) % 8])
        .collect();
    let vocab = Vocab::from_corpus(&bytes, 8).unwrap();
    let corpus = Corpus::new(&bytes, &vocab, 0.1, 8).unwrap();
    let cfg = ModelConfig {
        vocab_size: 8,
        context_len: 8,
        hidden_dim: 8,
        ffn_dim: 16,
        num_heads: 2,
        num_blocks: 2,
        seed,
    };
    (ToyLm::init(cfg, vocab).unwrap(), corpus)
}

/// Result of one end-to-end objective check.
#[derive(Clone, Copy, Debug)]
pub struct LossCheck {
    pub grad: f64,
    pub value: f64,
    pub mode: Mode,
    pub scope: SparsityScope,
}

/// Checks the objective's gradient with respect to every tile logit and a
/// random subset of pattern logits. Mode and scope rotate with `seed`.
/// Also compares the objective value against the f64 re-evaluation.
pub fn check_total_loss(seed: u64, pattern_samples: usize) -> LossCheck {
    let mode = [Mode::Joint, Mode::TileOnly, Mode::Sparse24][seed as usize % 3];
    let scope = [SparsityScope::Global, SparsityScope::PerLayer][(seed as usize / 3) % 2];
    let (model, corpus) = tiny_model(seed);
    let mut rng = Rng::seed_from_u64(seed);
    let steps = 10;
    let mut cfg = TrainConfig {
        rho: 0.5 + 0.5 * rng.random::<f64>(),
        lambda1: rng.random_range(0.5..4.0),
        lambda2: rng.random_range(0.1..1.0),
        tile: TileShape::new(4, 4),
        mode,
        sparsity_scope: scope,
        ..TrainConfig::default()
    };
    cfg.optimizer.steps = steps;
    // First half of the schedule: κ/τ stays small enough for the difference step.
    let step = rng.random_range(0..=steps / 2);
    let mut trainer = Trainer::new(&model, &corpus, cfg.clone(), PatternSource::default()).unwrap();
    for p in trainer.params_mut() {
        for v in p.tile.values_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        if let PatternState::Learned(l) = &mut p.patterns {
            for v in l.values_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        }
    }
    let batch = corpus.sample_batch(&mut rng, 2, 8);
    let noise_seed: u64 = rng.random();

    let mut tape = Tape::new();
    let graph = trainer
        .total_loss(&mut tape, &batch, step, Some(&mut Rng::seed_from_u64(noise_seed)))
        .unwrap();
    tape.backward(graph.terms.total).unwrap();

    let mut noise = Rng::seed_from_u64(noise_seed);
    let mut layers: Vec<LayerOracle> = Vec::new();
    for (p, info) in trainer.params().iter().zip(model.registry().layers()) {
        let tile = (mode != Mode::Sparse24).then(|| to64(p.tile.values().data()));
        let tile_noise = tile.as_ref().map(|t| to64(&sample_gumbel(&mut noise, 2 * t.len())));
        let (pattern, pattern_noise) = match &p.patterns {
            PatternState::Learned(l) => (
                PatternOracle::Learned(to64(l.values().data())),
                Some(to64(&sample_gumbel(&mut noise, 6 * info.numel() / 4))),
            ),
            PatternState::Frozen(idx) => (PatternOracle::Frozen(idx.clone()), None),
        };
        layers.push(LayerOracle {
            tile,
            pattern,
            tile_noise,
            pattern_noise,
        });
    }
    let mo = ModelOracle::new(&model);
    let tau = cfg.schedule.tau(step, steps) as f64;
    let kappa = cfg.schedule.kappa(step, steps) as f64;
    let reference = oracle::total_loss(&mo, &cfg, &layers, &batch, tau, kappa);
    let value = (tape.value(graph.terms.total).data()[0] as f64 - reference).abs() / reference.abs().max(1e-12);

    // (layer, is_pattern, index) coordinates to probe.
    let mut coords = Vec::new();
    for (li, l) in layers.iter().enumerate() {
        if let Some(t) = &l.tile {
            coords.extend((0..t.len()).map(|i| (li, false, i)));
        }
    }
    let learned: Vec<(usize, usize)> = layers
        .iter()
        .enumerate()
        .filter_map(|(li, l)| match &l.pattern {
            PatternOracle::Learned(p) => Some((li, p.len())),
            PatternOracle::Frozen(_) => None,
        })
        .collect();
    if !learned.is_empty() {
        for _ in 0..pattern_samples {
            let (li, n) = learned[rng.random_range(0..learned.len())];
            coords.push((li, true, rng.random_range(0..n)));
        }
    }

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &(li, is_pattern, i) in &coords {
        let var = if is_pattern {
            graph.pattern_logits[li]
        } else {
            graph.tile_logits[li]
        }
        .expect("trainable logits");
        analytic.push(tape.grad(var).expect("gradient")[i] as f64);
        let mut eval = |delta: f64| {
            let orig = *slot(&mut layers, li, is_pattern, i);
            *slot(&mut layers, li, is_pattern, i) = orig + delta;
            let v = oracle::total_loss(&mo, &cfg, &layers, &batch, tau, kappa);
            *slot(&mut layers, li, is_pattern, i) = orig;
            v
        };
        numeric.push((eval(STEP) - eval(-STEP)) / (2.0 * STEP));
    }
    LossCheck {
        grad: oracle::rel_inf(&analytic, &numeric),
        value,
        mode,
        scope,
    }
}

fn slot(layers: &mut [LayerOracle], li: usize, is_pattern: bool, i: usize) -> &mut f64 {
    match (is_pattern, &mut layers[li]) {
        (true, LayerOracle { pattern: PatternOracle::Learned(p), .. }) => &mut p[i],
        (false, LayerOracle { tile: Some(t), .. }) => &mut t[i],
        _ => unreachable!("probed logits are trainable"),
    }
}
