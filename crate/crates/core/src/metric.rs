//! Channel and head importance metrics and the mask selection step.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{BlockKind, ChannelMask};
use crate::tensor::{argsort_desc, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Ppsp,
    WandaSp,
    Flap,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Ppsp => "ppsp",
            MetricKind::WandaSp => "wanda_sp",
            MetricKind::Flap => "flap",
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppsp" => Ok(MetricKind::Ppsp),
            "wanda_sp" | "wanda-sp" => Ok(MetricKind::WandaSp),
            "flap" => Ok(MetricKind::Flap),
            _ => Err(Error::Config(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScores {
    pub scores: Vec<f32>,
    pub kind: MetricKind,
}

impl ChannelScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn check_stats(w: &Matrix, stats: &[f32], what: &str) -> Result<()> {
    if stats.len() != w.cols() {
        return Err(shape_err!("{what} has {} entries, W_final has {} columns", stats.len(), w.cols()));
    }
    if stats.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Value(format!("{what} must be finite and >= 0")));
    }
    Ok(())
}

/// Per-column `sum_i |w[i, k]|^p` in f64.
fn column_power_sums(w: &Matrix, p: i32) -> Vec<f64> {
    let mut acc = vec![0f64; w.cols()];
    for r in 0..w.rows() {
        for (a, &v) in acc.iter_mut().zip(w.row(r)) {
            *a += (v.abs() as f64).powi(p);
        }
    }
    acc
}

/// `xsq[k] * sqrt(sum_i w[i, k]^4)`: the L2 norm over output rows of the
/// squared per-weight importance `w^2 xsq`.
pub fn ppsp_scores(w_final: &Matrix, xsq: &[f32]) -> Result<ChannelScores> {
    check_stats(w_final, xsq, "xsq")?;
    let scores = column_power_sums(w_final, 4)
        .into_iter()
        .zip(xsq)
        .map(|(s4, &x)| (x as f64 * s4.sqrt()) as f32)
        .collect();
    Ok(ChannelScores { scores, kind: MetricKind::Ppsp })
}

/// `xnorm[k] * sum_i |w[i, k]|`, with `xnorm` the un-squared channel norm.
pub fn wanda_sp_scores(w_final: &Matrix, xnorm: &[f32]) -> Result<ChannelScores> {
    check_stats(w_final, xnorm, "xnorm")?;
    let scores = column_power_sums(w_final, 1)
        .into_iter()
        .zip(xnorm)
        .map(|(s1, &x)| (x as f64 * s1) as f32)
        .collect();
    Ok(ChannelScores { scores, kind: MetricKind::WandaSp })
}

/// `||w[:, k]||^2` times the sample variance (divisor `n - 1`) of column
/// `k` of `x_samples`, whose rows are individual observations.
pub fn flap_scores(w_final: &Matrix, x_samples: &Matrix) -> Result<ChannelScores> {
    if x_samples.cols() != w_final.cols() {
        return Err(shape_err!(
            "observations have {} channels, W_final has {} columns",
            x_samples.cols(),
            w_final.cols()
        ));
    }
    let n = x_samples.rows();
    if n < 2 {
        return Err(Error::Precondition(format!("FLAP needs >= 2 observations, got {n}")));
    }
    let mut mean = vec![0f64; x_samples.cols()];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(x_samples.row(r)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0f64; x_samples.cols()];
    for r in 0..n {
        for ((acc, &v), m) in var.iter_mut().zip(x_samples.row(r)).zip(&mean) {
            let d = v as f64 - m;
            *acc += d * d;
        }
    }
    let scores = column_power_sums(w_final, 2)
        .into_iter()
        .zip(var)
        .map(|(w2, v)| (w2 * v / (n - 1) as f64) as f32)
        .collect();
    Ok(ChannelScores { scores, kind: MetricKind::Flap })
}

/// Per-weight `|w[i, k]| * xnorm[k]`, row-major `C_out x C_in`.
pub fn wanda_weight_scores(w: &Matrix, xnorm: &[f32]) -> Result<Vec<f64>> {
    check_stats(w, xnorm, "xnorm")?;
    Ok((0..w.rows())
        .flat_map(|r| w.row(r).iter().zip(xnorm).map(|(&v, &x)| v.abs() as f64 * x as f64))
        .collect())
}

/// L2 norm of each consecutive group of `head_dim` channel scores.
pub fn aggregate_heads(scores: &ChannelScores, head_dim: usize) -> Result<ChannelScores> {
    if head_dim == 0 || !scores.len().is_multiple_of(head_dim) {
        return Err(shape_err!("{} channel scores do not split into heads of {head_dim}", scores.len()));
    }
    let heads = scores
        .scores
        .chunks(head_dim)
        .map(|h| h.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() as f32)
        .collect();
    Ok(ChannelScores { scores: heads, kind: scores.kind })
}

/// Round half away from zero.
fn round_count(x: f64) -> usize {
    x.round().max(0.0) as usize
}

/// Number of units pruned out of `units` at `ratio`; at least one unit is
/// always retained.
pub fn pruned_count(units: usize, ratio: f64) -> usize {
    round_count(ratio * units as f64).min(units.saturating_sub(1))
}

/// Keeps the highest-scoring units. `scores` has one entry per unit (heads
/// or channels) and `group` is the channels per unit. Ties go to the lower
/// index.
pub fn select_mask(block_index: usize, scores: &[f32], ratio: f64, group: usize) -> Result<ChannelMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("pruning ratio {ratio} outside [0, 1)")));
    }
    if scores.is_empty() {
        return Err(Error::Precondition(format!("block {block_index}: no scores")));
    }
    let keep = scores.len() - pruned_count(scores.len(), ratio);
    let order = argsort_desc(scores)?;
    let mut retained = order.prefix(keep).to_vec();
    retained.sort_unstable();
    ChannelMask::new(block_index, retained, scores.len(), group)
}

fn default_skip() -> usize {
    3
}

pub const MAX_BLOCK_RATIO: f64 = 0.95;

/// Model-wide pruning ratio, the first-layer exemption and the resulting
/// per-block ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneRatioPlan {
    pub target_ratio: f64,
    /// Leading layers left dense (each layer is two blocks).
    #[serde(default = "default_skip")]
    pub skip_first_layers: usize,
    /// Replaces the rescaled ratio for non-skipped attention blocks.
    #[serde(default)]
    pub attention_ratio: Option<f64>,
    #[serde(default)]
    pub mlp_ratio: Option<f64>,
}

impl Default for PruneRatioPlan {
    fn default() -> Self {
        Self { target_ratio: 0.4, skip_first_layers: 3, attention_ratio: None, mlp_ratio: None }
    }
}

impl PruneRatioPlan {
    pub fn new(target_ratio: f64, skip_first_layers: usize) -> Self {
        Self { target_ratio, skip_first_layers, ..Self::default() }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_ratio) {
            return Err(Error::Config(format!("target ratio {} outside [0, 1)", self.target_ratio)));
        }
        for r in [self.attention_ratio, self.mlp_ratio].into_iter().flatten() {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("block ratio override {r} outside [0, 1)")));
            }
        }
        if self.target_ratio > 0.0 && self.skip_first_layers >= num_layers {
            return Err(Error::Config(format!(
                "skipping {} of {num_layers} layers leaves nothing to prune",
                self.skip_first_layers
            )));
        }
        Ok(())
    }

    /// `target * L / (L - skipped)`, capped.
    pub fn per_block_ratio(&self, num_layers: usize) -> f64 {
        if self.skip_first_layers >= num_layers {
            return 0.0;
        }
        let scaled = self.target_ratio * num_layers as f64 / (num_layers - self.skip_first_layers) as f64;
        scaled.min(MAX_BLOCK_RATIO)
    }

    pub fn is_skipped(&self, block: usize) -> bool {
        block < 2 * self.skip_first_layers
    }

    pub fn ratio_for(&self, block: usize, kind: BlockKind, num_layers: usize) -> f64 {
        if self.is_skipped(block) {
            return 0.0;
        }
        let over = match kind {
            BlockKind::Attention => self.attention_ratio,
            BlockKind::Mlp => self.mlp_ratio,
        };
        over.unwrap_or_else(|| self.per_block_ratio(num_layers))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::argsort_desc_f64;
    use proptest::prelude::*;

    fn w22() -> Matrix {
        Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap()
    }

    #[test]
    fn ppsp_examples() {
        let s = ppsp_scores(&w22(), &[1.0, 4.0]).unwrap().scores;
        assert!((s[0] - 82f32.sqrt()).abs() < 1e-5);
        assert!((s[1] - 4352f32.sqrt()).abs() < 1e-4);
        assert!(ppsp_scores(&w22(), &[0.0, 0.0]).unwrap().scores.iter().all(|&v| v == 0.0));
        assert!(ppsp_scores(&w22(), &[1.0]).is_err());
        assert!(ppsp_scores(&w22(), &[1.0, -1.0]).is_err());
    }

    #[test]
    fn wanda_sp_examples() {
        assert_eq!(wanda_sp_scores(&w22(), &[1.0, 2.0]).unwrap().scores, vec![4.0, 12.0]);
        let id = Matrix::identity(3);
        assert_eq!(wanda_sp_scores(&id, &[0.5, 2.0, 7.0]).unwrap().scores, vec![0.5, 2.0, 7.0]);
        assert!(wanda_sp_scores(&Matrix::zeros(2, 2), &[1.0, 1.0]).unwrap().scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flap_examples() {
        let w = Matrix::from_rows(&[[1.0, 3.0]]).unwrap();
        let x = Matrix::from_rows(&[[0.0, 5.0], [2.0, 5.0]]).unwrap();
        assert_eq!(flap_scores(&w, &x).unwrap().scores, vec![2.0, 0.0]);
        let w3 = Matrix::from_rows(&[[3.0, 3.0]]).unwrap();
        assert_eq!(flap_scores(&w3, &x).unwrap().scores[0], 18.0);
        let one = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        assert!(matches!(flap_scores(&w, &one), Err(Error::Precondition(_))));
    }

    #[test]
    fn head_aggregation() {
        let s = ChannelScores { scores: vec![3.0, 4.0], kind: MetricKind::Ppsp };
        assert_eq!(aggregate_heads(&s, 2).unwrap().scores, vec![5.0]);
        assert_eq!(aggregate_heads(&s, 1).unwrap().scores, s.scores);
        let z = ChannelScores { scores: vec![0.0, 0.0, 1.0, 0.0], kind: MetricKind::Ppsp };
        assert_eq!(aggregate_heads(&z, 2).unwrap().scores, vec![0.0, 1.0]);
        assert!(aggregate_heads(&s, 3).is_err());
    }

    #[test]
    fn select_mask_examples() {
        assert_eq!(select_mask(0, &[5.0, 1.0, 9.0, 2.0], 0.5, 1).unwrap().retained(), &[0, 2]);
        assert_eq!(select_mask(0, &[1.0; 4], 0.5, 1).unwrap().retained(), &[0, 1]);
        assert!(select_mask(0, &[1.0, 2.0, 3.0], 0.0, 1).unwrap().is_full());
        // at least one unit survives
        assert_eq!(select_mask(0, &[1.0, 2.0], 0.9, 1).unwrap().retained(), &[1]);
        assert!(select_mask(0, &[1.0], 1.0, 1).is_err());
    }

    #[test]
    fn pruned_count_rounds_half_away() {
        assert_eq!(pruned_count(10, 0.25), 3);
        assert_eq!(pruned_count(10, 0.24), 2);
        assert_eq!(pruned_count(4, 0.125), 1);
        assert_eq!(pruned_count(1, 0.9), 0);
    }

    #[test]
    fn ratio_plan_rescaling() {
        let p = PruneRatioPlan::new(0.2, 3);
        assert!((p.per_block_ratio(32) - 0.2 * 32.0 / 29.0).abs() < 1e-12);
        assert_eq!((p.per_block_ratio(32) * 100.0).round(), 22.0);
        assert_eq!((PruneRatioPlan::new(0.4, 3).per_block_ratio(32) * 100.0).round(), 44.0);
        assert_eq!(PruneRatioPlan::new(0.9, 3).per_block_ratio(6), MAX_BLOCK_RATIO);
        assert_eq!(p.ratio_for(5, BlockKind::Mlp, 32), 0.0);
        assert!(p.ratio_for(6, BlockKind::Attention, 32) > 0.2);
        let avg: f64 = (0..64)
            .map(|b| p.ratio_for(b, if b % 2 == 0 { BlockKind::Attention } else { BlockKind::Mlp }, 32))
            .sum::<f64>()
            / 64.0;
        assert!((avg - 0.2).abs() < 1e-12);
        assert!(PruneRatioPlan::new(0.4, 6).validate(6).is_err());
        assert!(PruneRatioPlan::new(0.0, 6).validate(6).is_ok());
    }

    #[test]
    fn ratio_overrides_apply_per_kind() {
        let p = PruneRatioPlan { attention_ratio: Some(0.1), mlp_ratio: Some(0.5), ..PruneRatioPlan::new(0.4, 1) };
        assert_eq!(p.ratio_for(2, BlockKind::Attention, 4), 0.1);
        assert_eq!(p.ratio_for(3, BlockKind::Mlp, 4), 0.5);
        assert_eq!(p.ratio_for(1, BlockKind::Mlp, 4), 0.0);
    }

    fn matrix_and_stats() -> impl Strategy<Value = (Matrix, Vec<f32>)> {
        (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
            (
                prop::collection::vec(-3f32..3.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap()),
                prop::collection::vec(0f32..5.0, c),
            )
        })
    }

    proptest! {
        #[test]
        fn positive_scaling_keeps_mask((w, x) in matrix_and_stats(), c in 0.1f32..10.0, ratio in 0.0f64..0.9) {
            let a = ppsp_scores(&w, &x).unwrap().scores;
            let scaled: Vec<f32> = x.iter().map(|v| v * c).collect();
            let b = ppsp_scores(&w, &scaled).unwrap().scores;
            // exact scaling may create or break float ties, so compare values
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p * c - q).abs() <= 1e-4 * q.abs().max(1e-6));
            }
            let m = select_mask(0, &a, ratio, 1).unwrap();
            prop_assert_eq!(m.retained().len(), a.len() - pruned_count(a.len(), ratio));
        }

        #[test]
        fn squared_wanda_keeps_ordering((w, x) in matrix_and_stats()) {
            let s = wanda_weight_scores(&w, &x).unwrap();
            let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
            prop_assert_eq!(argsort_desc_f64(&s).unwrap(), argsort_desc_f64(&sq).unwrap());
        }
    }
}
