//! Multiply-accumulate accounting for dense inference and probing.
//!
//! Two levels are provided. The `complexity_*` functions are the asymptotic
//! cost model with a single `C_in x C_out` shape: six projections plus the
//! two attention products for dense inference, and four projections (Q, K,
//! V, FC1) plus the attention products on an `x% x y%` slice for probing.
//! The `*_macs` functions count exactly what the forward kernels in
//! [`crate::model`] execute, block by block, and agree with the kernels'
//! instrumented counts.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{BlockKind, ModelConfig};
use crate::probe::ProbeConfig;

/// `6 N S C_in C_out + 2 N S^2 C_in`.
pub fn complexity_dense(n: f64, s: f64, c_in: f64, c_out: f64) -> f64 {
    6.0 * n * s * c_in * c_out + 2.0 * n * s * s * c_in
}

/// `4 x y N S C_in C_out + 2 x y^2 N S^2 C_in`.
pub fn complexity_probe(x: f64, y: f64, n: f64, s: f64, c_in: f64, c_out: f64) -> f64 {
    4.0 * x * y * n * s * c_in * c_out + 2.0 * x * y * y * n * s * s * c_in
}

/// Full pass of one block over `(n, s)` tokens with `c` retained
/// intermediate channels (`c = d_model` for dense attention, `mlp_hidden`
/// for a dense MLP).
pub fn block_macs(kind: BlockKind, d_model: usize, c: usize, n: usize, s: usize) -> u64 {
    let (d, c, n, s) = (d_model as u64, c as u64, n as u64, s as u64);
    match kind {
        // Q, K, V and O projections, scores and weighted values
        BlockKind::Attention => 4 * n * s * d * c + 2 * n * s * s * c,
        // FC1 and FC2
        BlockKind::Mlp => 2 * n * s * d * c,
    }
}

/// Probe pass of one block on an `(n_probe, s_probe)` slice: everything up
/// to the intermediate states, i.e. without O / FC2.
pub fn probe_block_macs(kind: BlockKind, d_model: usize, c: usize, n_probe: usize, s_probe: usize) -> u64 {
    let (d, c, n, s) = (d_model as u64, c as u64, n_probe as u64, s_probe as u64);
    match kind {
        BlockKind::Attention => 3 * n * s * d * c + 2 * n * s * s * c,
        BlockKind::Mlp => n * s * d * c,
    }
}

fn blocks(cfg: &ModelConfig) -> impl Iterator<Item = (BlockKind, usize)> + '_ {
    (0..cfg.num_layers).flat_map(move |_| {
        [(BlockKind::Attention, cfg.d_model), (BlockKind::Mlp, cfg.mlp_hidden)]
    })
}

/// Dense inference over all blocks (embedding and LM head excluded).
pub fn flops_dense(cfg: &ModelConfig, n: usize, s: usize) -> u64 {
    blocks(cfg).map(|(k, c)| block_macs(k, cfg.d_model, c, n, s)).sum()
}

/// Probing every block with the given fractions.
pub fn flops_probe(probe: &ProbeConfig, cfg: &ModelConfig, n: usize, s: usize) -> Result<u64> {
    let (np, sp) = probe.counts(n, s)?;
    Ok(blocks(cfg).map(|(k, c)| probe_block_macs(k, cfg.d_model, c, np, sp)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub dense: u64,
    pub probe: u64,
    /// `probe / dense`.
    pub share: f64,
}

pub fn estimate(probe: &ProbeConfig, cfg: &ModelConfig, n: usize, s: usize) -> Result<FlopsEstimate> {
    let dense = flops_dense(cfg, n, s);
    let probe = flops_probe(probe, cfg, n, s)?;
    Ok(FlopsEstimate { dense, probe, share: probe as f64 / dense as f64 })
}

/// LLaMA-2-7B block shapes under the two-matrix MLP used here.
pub fn llama2_7b_shapes() -> ModelConfig {
    ModelConfig {
        num_layers: 32,
        d_model: 4096,
        num_heads: 32,
        mlp_hidden: 11008,
        vocab_size: 32000,
        seed: 0,
        outlier_fraction: 0.0,
        outlier_gain: 1.0,
    }
}
