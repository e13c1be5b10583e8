//! One-shot pruning scorers: magnitude and Wanda (`|W|·‖X_j‖₂`), with 2:4
//! and unstructured selection. Used as baselines, as the frozen 2:4 source
//! for tile-only training, and as tile priors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{pattern_from_offsets, HybridMask, TileShape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Magnitude,
    Wanda,
}

impl std::str::FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Self::Magnitude),
            "wanda" => Ok(Self::Wanda),
            other => Err(Error::Config(format!("unknown scoring method {other:?}"))),
        }
    }
}

/// Per-input-feature activation norms accumulated over a calibration stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    sum_sq: Vec<f64>,
    samples: usize,
}

impl CalibrationStats {
    pub fn new(features: usize) -> Self {
        Self {
            sum_sq: vec![0.0; features],
            samples: 0,
        }
    }

    pub fn features(&self) -> usize {
        self.sum_sq.len()
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Adds the rows of a `samples × features` activation matrix.
    pub fn accumulate(&mut self, activations: &Tensor) -> Result<()> {
        let (rows, cols) = activations.dims2()?;
        if cols != self.features() {
            return Err(Error::shape("calibration", activations.shape(), &[rows, self.features()]));
        }
        for row in activations.data().chunks_exact(cols) {
            for (acc, &x) in self.sum_sq.iter_mut().zip(row) {
                *acc += (x as f64) * (x as f64);
            }
        }
        self.samples += rows;
        Ok(())
    }

    /// `‖X_j‖₂` per input feature.
    pub fn norms(&self) -> Vec<f32> {
        self.sum_sq.iter().map(|&s| s.sqrt() as f32).collect()
    }
}

/// Importance of each weight: `|W|` or `|W_ij|·‖X_j‖₂`.
pub fn score(weights: &Tensor, method: ScoreMethod, calib: Option<&CalibrationStats>) -> Result<Tensor> {
    let (rows, cols) = weights.dims2()?;
    let data = match method {
        ScoreMethod::Magnitude => weights.data().iter().map(|w| w.abs()).collect(),
        ScoreMethod::Wanda => {
            let calib = calib.ok_or_else(|| Error::Config("wanda scoring requires calibration statistics".into()))?;
            if calib.features() != cols {
                return Err(Error::shape("wanda", &[rows, cols], &[calib.features()]));
            }
            let norms = calib.norms();
            weights
                .data()
                .chunks_exact(cols)
                .flat_map(|row| row.iter().zip(&norms).map(|(w, n)| w.abs() * n))
                .collect()
        }
    };
    Tensor::new(vec![rows, cols], data)
}

/// Pattern keeping the two highest scores of a group; ties go to the lower index.
pub fn best_pattern(group: [f32; 4]) -> u8 {
    let mut order = [0u8, 1, 2, 3];
    order.sort_by(|&a, &b| group[b as usize].total_cmp(&group[a as usize]).then(a.cmp(&b)));
    let (lo, hi) = (order[0].min(order[1]), order[0].max(order[1]));
    pattern_from_offsets(lo, hi).expect("distinct offsets")
}

/// Best 2:4 pattern of every group of four along each row.
pub fn patterns_2_4(scores: &Tensor) -> Result<Vec<u8>> {
    let (_, cols) = scores.dims2()?;
    if cols % 4 != 0 {
        return Err(Error::Layout(format!("column count {cols} is not divisible by 4")));
    }
    Ok(scores
        .data()
        .chunks_exact(4)
        .map(|g| best_pattern([g[0], g[1], g[2], g[3]]))
        .collect())
}

/// Fixed 2:4 mask (every tile sparse) keeping the top two scores per group.
pub fn prune_2_4(scores: &Tensor, tile: TileShape) -> Result<HybridMask> {
    let (rows, cols) = scores.dims2()?;
    HybridMask::all_sparse(rows, cols, tile, patterns_2_4(scores)?)
}

/// Binary mask zeroing exactly `floor(n·sparsity)` of the lowest scores,
/// ordered by `(score, index)`.
pub fn prune_unstructured(scores: &Tensor, sparsity: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Param(format!("sparsity must lie in [0, 1], got {sparsity}")));
    }
    let n = scores.numel();
    let zeros = ((n as f64) * sparsity).floor() as usize;
    let s = scores.data();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
    let mut mask = vec![1.0f32; n];
    for &i in &order[..zeros] {
        mask[i] = 0.0;
    }
    Tensor::new(scores.shape().to_vec(), mask)
}
