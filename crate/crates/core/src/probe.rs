//! Probe generation: rank tokens and samples by residual importance, gather
//! the top fraction from the layer-normalized block input, and run the
//! block's intermediate transformation on that reduced slice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BlockWeights;
use crate::tensor::{argsort_desc, l2_norm_over_axes, Axis, Tensor3};

/// Which tensor the sample/token ranking is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSource {
    /// Pre-norm residual `X^l`.
    #[default]
    Residual,
    /// `LN(X^l)`; ablation of residual importance.
    PostLayernorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Fraction of samples kept, in `(0, 1]`.
    pub batch_frac: f64,
    /// Fraction of tokens kept, in `(0, 1]`.
    pub seq_frac: f64,
    #[serde(default)]
    pub selection_source: SelectionSource,
    /// Blocks between the residual used for probing and the block being
    /// pruned; 0 probes from the block's own input.
    #[serde(default)]
    pub parallel_offset: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { batch_frac: 0.05, seq_frac: 0.5, selection_source: SelectionSource::Residual, parallel_offset: 0 }
    }
}

/// `ceil(frac * n)`, tolerant of binary rounding in `frac`.
pub fn fraction_count(frac: f64, n: usize) -> usize {
    ((frac * n as f64) - 1e-9).ceil().max(0.0) as usize
}

impl ProbeConfig {
    /// The whole batch: every sample and token.
    pub fn full() -> Self {
        Self { batch_frac: 1.0, seq_frac: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("batch_frac", self.batch_frac), ("seq_frac", self.seq_frac)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("{name} {f} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Probe sample and token counts for an `(n, s)` batch.
    pub fn counts(&self, n: usize, s: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (nb, ns) = (fraction_count(self.batch_frac, n), fraction_count(self.seq_frac, s));
        if nb == 0 || ns == 0 {
            return Err(Error::Config(format!(
                "probe fractions {}/{} select nothing from a {n}x{s} batch",
                self.batch_frac, self.seq_frac
            )));
        }
        Ok((nb, ns))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImportanceTarget {
    Batch,
    Sequence,
}

/// Per-sample or per-token L2 norm of `x` over the remaining two axes.
pub fn residual_importance(x: &Tensor3, target: ImportanceTarget) -> Vec<f32> {
    match target {
        ImportanceTarget::Batch => l2_norm_over_axes(x, Axis::Batch),
        ImportanceTarget::Sequence => l2_norm_over_axes(x, Axis::Sequence),
    }
}

/// Selected token and sample indices, each in descending importance order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSelection {
    pub seq_indices: Vec<usize>,
    pub batch_indices: Vec<usize>,
}

impl ProbeSelection {
    /// Token indices in ascending position order, the order probe rows
    /// are laid out in.
    pub fn seq_gather_order(&self) -> Vec<usize> {
        let mut v = self.seq_indices.clone();
        v.sort_unstable();
        v
    }

    pub fn batch_gather_order(&self) -> Vec<usize> {
        let mut v = self.batch_indices.clone();
        v.sort_unstable();
        v
    }
}

/// Tokens first: the top `seq_frac` tokens by norm over the whole batch.
/// Then samples: the top `batch_frac` samples by norm over the selected
/// tokens only.
pub fn select_probe(x: &Tensor3, cfg: &ProbeConfig) -> Result<ProbeSelection> {
    if !x.is_finite() {
        return Err(Error::Value("probe selection input contains non-finite values".into()));
    }
    let (nb, ns) = cfg.counts(x.n(), x.s())?;
    let seq_rank = argsort_desc(&residual_importance(x, ImportanceTarget::Sequence))?;
    let seq_indices = seq_rank.prefix(ns).to_vec();
    let all_samples: Vec<usize> = (0..x.n()).collect();
    let reduced = x.gather(&all_samples, &seq_indices)?;
    let batch_rank = argsort_desc(&residual_importance(&reduced, ImportanceTarget::Batch))?;
    Ok(ProbeSelection { seq_indices, batch_indices: batch_rank.prefix(nb).to_vec() })
}

/// `LN(x)` restricted to the selected samples and tokens, both in
/// ascending original order.
pub fn build_probe(x: &Tensor3, block: &BlockWeights, sel: &ProbeSelection) -> Result<Tensor3> {
    // layer norm is position-wise, so gathering first gives identical rows
    let gathered = x.gather(&sel.batch_gather_order(), &sel.seq_gather_order())?;
    block.layer_norm(&gathered)
}

/// `T(P)`: the block's intermediate transformation on the probe. Attention
/// runs only among probe tokens, causally in original position order.
pub fn probe_forward(block: &BlockWeights, probe: &Tensor3) -> Result<Tensor3> {
    block.intermediate(probe, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_synthetic_model, ModelConfig};

    fn cfg(b: f64, s: f64) -> ProbeConfig {
        ProbeConfig { batch_frac: b, seq_frac: s, ..ProbeConfig::default() }
    }

    #[test]
    fn importance_examples() {
        let x = Tensor3::new(2, 1, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(residual_importance(&x, ImportanceTarget::Batch), vec![3.0, 4.0]);
        let x = Tensor3::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(residual_importance(&x, ImportanceTarget::Sequence), vec![5f32.sqrt(), 5.0]);
        let x = Tensor3::new(3, 2, 2, vec![0.5; 12]).unwrap();
        let u = residual_importance(&x, ImportanceTarget::Batch);
        assert!(u.iter().all(|&v| v == u[0]));
    }

    #[test]
    fn selection_full_fraction_is_importance_order() {
        let x = Tensor3::new(3, 2, 1, vec![1.0, 0.0, 5.0, 0.0, 2.0, 9.0]).unwrap();
        let sel = select_probe(&x, &cfg(1.0, 1.0)).unwrap();
        // token norms: sqrt(1+25+4)=5.48, sqrt(0+0+81)=9
        assert_eq!(sel.seq_indices, vec![1, 0]);
        // sample norms over both tokens: 1, 5, sqrt(85)
        assert_eq!(sel.batch_indices, vec![2, 1, 0]);
    }

    #[test]
    fn selection_hand_example() {
        let x = Tensor3::new(2, 2, 1, vec![1.0, 10.0, 2.0, 3.0]).unwrap();
        let sel = select_probe(&x, &cfg(0.5, 0.5)).unwrap();
        assert_eq!(sel.seq_indices, vec![1]);
        assert_eq!(sel.batch_indices, vec![0]);
    }

    #[test]
    fn selection_ties_take_lowest_indices() {
        let x = Tensor3::new(4, 6, 3, vec![1.5; 72]).unwrap();
        let sel = select_probe(&x, &cfg(0.5, 0.5)).unwrap();
        assert_eq!(sel.seq_indices, vec![0, 1, 2]);
        assert_eq!(sel.batch_indices, vec![0, 1]);
    }

    #[test]
    fn counts_use_ceiling() {
        assert_eq!(cfg(0.05, 0.5).counts(20, 1024).unwrap(), (1, 512));
        assert_eq!(cfg(0.05, 0.5).counts(8, 5).unwrap(), (1, 3));
        assert_eq!(cfg(0.1, 0.3).counts(10, 10).unwrap(), (1, 3));
        assert!(matches!(cfg(0.0, 0.5).counts(4, 4), Err(Error::Config(_))));
        assert!(cfg(0.5, 1.5).validate().is_err());
    }

    fn small_model() -> crate::model::Model {
        generate_synthetic_model(&ModelConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            mlp_hidden: 12,
            vocab_size: 16,
            seed: 11,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn input(n: usize, s: usize) -> Tensor3 {
        Tensor3::new(n, s, 8, (0..n * s * 8).map(|i| ((i * 37 % 23) as f32 - 11.0) / 3.0).collect()).unwrap()
    }

    #[test]
    fn full_probe_equals_layer_norm_and_dense_intermediate() {
        let model = small_model();
        let x = input(3, 4);
        for block in model.blocks() {
            let sel = select_probe(&x, &ProbeConfig::full()).unwrap();
            let probe = build_probe(&x, block, &sel).unwrap();
            let ln = block.layer_norm(&x).unwrap();
            assert_eq!(probe, ln);
            assert_eq!(
                probe_forward(block, &probe).unwrap(),
                crate::model::block_forward_intermediate(block, &ln).unwrap()
            );
        }
    }

    #[test]
    fn gather_matches_layer_normed_rows() {
        let model = small_model();
        let block = &model.blocks()[0];
        let x = input(2, 2);
        let sel = ProbeSelection { seq_indices: vec![1, 0], batch_indices: vec![1] };
        let probe = build_probe(&x, block, &sel).unwrap();
        let ln = block.layer_norm(&x).unwrap();
        assert_eq!(probe.shape(), (1, 2, 8));
        assert_eq!(probe.row(0, 0), ln.row(1, 0));
        assert_eq!(probe.row(0, 1), ln.row(1, 1));

        let single = ProbeSelection { seq_indices: vec![1], batch_indices: vec![0] };
        let p = build_probe(&x, block, &single).unwrap();
        assert_eq!(p.shape(), (1, 1, 8));
        assert_eq!(p.row(0, 0), ln.row(0, 1));
    }

    #[test]
    fn mlp_probe_is_gathered_dense_rows() {
        let model = small_model();
        let block = &model.blocks()[1];
        let x = input(4, 6);
        let sel = select_probe(&x, &cfg(0.5, 0.5)).unwrap();
        let probe = build_probe(&x, block, &sel).unwrap();
        let got = probe_forward(block, &probe).unwrap();
        let dense = crate::model::block_forward_intermediate(block, &block.layer_norm(&x).unwrap()).unwrap();
        let want = dense.gather(&sel.batch_gather_order(), &sel.seq_gather_order()).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn out_of_range_selection_rejected() {
        let model = small_model();
        let sel = ProbeSelection { seq_indices: vec![5], batch_indices: vec![0] };
        assert!(build_probe(&input(1, 2), &model.blocks()[0], &sel).is_err());
    }
}
