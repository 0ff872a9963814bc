//! Pre-norm residual transformer with coupled-structure pruning.
//!
//! Every layer contributes two blocks, attention then MLP. A block maps
//! `X -> X + T(LN(X)) W_final^T`, where `T` is the intermediate
//! transformation (multi-head causal attention, or FC1 followed by SiLU) and
//! `W_final` is the output projection O or FC2. Pruning removes input
//! channels of `W_final` together with the weights that produce them: FC1
//! rows for an MLP block, whole heads across Q/K/V rows and O columns for an
//! attention block.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::format::{Reader, Writer};
use crate::tensor::{self, layer_norm, matmul_rhs_transposed, Matrix, Tensor3};

pub const LN_EPS: f32 = 1e-5;
pub const WEIGHT_MAGIC: &[u8; 4] = b"PPW1";

/// Standard deviation of the logits produced by the LM head on a
/// layer-normalized input.
const LOGIT_SCALE: f32 = 2.0;

fn default_outlier_gain() -> f32 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Fraction of residual channels whose embedding columns are amplified.
    #[serde(default)]
    pub outlier_fraction: f32,
    #[serde(default = "default_outlier_gain")]
    pub outlier_gain: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            d_model: 64,
            num_heads: 4,
            mlp_hidden: 256,
            vocab_size: 512,
            seed: 0,
            outlier_fraction: 0.05,
            outlier_gain: default_outlier_gain(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config(format!(
                "outlier_fraction {} outside [0, 1]",
                self.outlier_fraction
            )));
        }
        if !(self.outlier_gain > 0.0 && self.outlier_gain.is_finite()) {
            return Err(Error::Config(format!("outlier_gain {} must be positive", self.outlier_gain)));
        }
        let limit = u32::MAX as usize;
        if [self.num_layers, self.d_model, self.num_heads, self.mlp_hidden, self.vocab_size]
            .iter()
            .any(|&v| v > limit)
        {
            return Err(Error::Config("model dimension exceeds u32".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn num_blocks(&self) -> usize {
        2 * self.num_layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Attention,
    Mlp,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Attention => "attention",
            BlockKind::Mlp => "mlp",
        }
    }
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockParams {
    Attention { wq: Matrix, wk: Matrix, wv: Matrix, wo: Matrix, num_heads: usize },
    Mlp { fc1: Matrix, fc2: Matrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln_gain: Vec<f32>,
    pub ln_bias: Vec<f32>,
    pub params: BlockParams,
}

/// Output of a block's full pass.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    /// `X + F(X)`.
    pub output: Tensor3,
    /// Intermediate states of the retained channels only, in mask order.
    pub intermediate: Tensor3,
}

impl BlockWeights {
    pub fn kind(&self) -> BlockKind {
        match self.params {
            BlockParams::Attention { .. } => BlockKind::Attention,
            BlockParams::Mlp { .. } => BlockKind::Mlp,
        }
    }

    pub fn d_model(&self) -> usize {
        self.ln_gain.len()
    }

    /// The output projection whose input channels are the pruning targets.
    pub fn w_final(&self) -> &Matrix {
        match &self.params {
            BlockParams::Attention { wo, .. } => wo,
            BlockParams::Mlp { fc2, .. } => fc2,
        }
    }

    /// Input width of `W_final`.
    pub fn c_in(&self) -> usize {
        self.w_final().cols()
    }

    /// Number of prunable units: heads for attention, channels for MLP.
    pub fn units(&self) -> usize {
        match &self.params {
            BlockParams::Attention { num_heads, .. } => *num_heads,
            BlockParams::Mlp { fc2, .. } => fc2.cols(),
        }
    }

    /// Channels per prunable unit.
    pub fn unit_width(&self) -> usize {
        self.c_in() / self.units()
    }

    pub fn layer_norm(&self, x: &Tensor3) -> Result<Tensor3> {
        layer_norm(x, &self.ln_gain, &self.ln_bias, LN_EPS)
    }

    fn check_mask(&self, mask: &ChannelMask) -> Result<()> {
        if mask.units() != self.units() || mask.group() != self.unit_width() {
            return Err(Error::Precondition(format!(
                "mask over {} units of width {} does not fit a {} block with {} units of width {}",
                mask.units(),
                mask.group(),
                self.kind(),
                self.units(),
                self.unit_width()
            )));
        }
        Ok(())
    }

    /// Intermediate transformation `T(x_ln)` restricted to the retained
    /// units (all units when `mask` is `None`).
    pub fn intermediate(&self, x_ln: &Tensor3, mask: Option<&ChannelMask>) -> Result<Tensor3> {
        if x_ln.d() != self.d_model() {
            return Err(shape_err!(
                "block input width {} does not match d_model {}",
                x_ln.d(),
                self.d_model()
            ));
        }
        if let Some(m) = mask {
            self.check_mask(m)?;
        }
        match &self.params {
            BlockParams::Mlp { fc1, .. } => {
                let mut h = match mask {
                    Some(m) => matmul_rhs_transposed(x_ln, &fc1.select_rows(m.retained())?)?,
                    None => matmul_rhs_transposed(x_ln, fc1)?,
                };
                h.data_mut().iter_mut().for_each(|v| *v = silu(*v));
                Ok(h)
            }
            BlockParams::Attention { wq, wk, wv, num_heads, .. } => {
                let head_dim = self.d_model() / num_heads;
                match mask {
                    Some(m) => {
                        let rows = m.channel_indices();
                        causal_attention(
                            x_ln,
                            &wq.select_rows(&rows)?,
                            &wk.select_rows(&rows)?,
                            &wv.select_rows(&rows)?,
                            head_dim,
                        )
                    }
                    None => causal_attention(x_ln, wq, wk, wv, head_dim),
                }
            }
        }
    }

    /// Full pass with optional pruning, also returning the retained
    /// intermediate states.
    pub fn forward(&self, x: &Tensor3, mask: Option<&ChannelMask>) -> Result<BlockOutput> {
        let x_ln = self.layer_norm(x)?;
        let intermediate = self.intermediate(&x_ln, mask)?;
        let delta = match mask {
            Some(m) => matmul_rhs_transposed(
                &intermediate,
                &self.w_final().select_cols(&m.channel_indices())?,
            )?,
            None => matmul_rhs_transposed(&intermediate, self.w_final())?,
        };
        let mut output = x.clone();
        output.data_mut().iter_mut().zip(delta.data()).for_each(|(o, d)| *o += d);
        Ok(BlockOutput { output, intermediate })
    }
}

#[inline]
pub fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

/// Multi-head causal self-attention; returns the concatenated per-head
/// outputs (the input to O). Scores are computed for every position pair
/// and masked afterwards, so the MAC count is `2 n s^2 c` for `c` output
/// channels.
fn causal_attention(
    x_ln: &Tensor3,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    head_dim: usize,
) -> Result<Tensor3> {
    let q = matmul_rhs_transposed(x_ln, wq)?;
    let k = matmul_rhs_transposed(x_ln, wk)?;
    let v = matmul_rhs_transposed(x_ln, wv)?;
    let (n, s, c) = q.shape();
    let heads = c / head_dim;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut out = Tensor3::zeros(n, s, c);
    let mut scores = vec![0f32; s];
    for i in 0..n {
        for h in 0..heads {
            let span = h * head_dim..(h + 1) * head_dim;
            for a in 0..s {
                let qa = &q.row(i, a)[span.clone()];
                for (b, sc) in scores.iter_mut().enumerate() {
                    let dot = tensor::dot(qa, &k.row(i, b)[span.clone()]) * scale;
                    *sc = if b <= a { dot } else { f32::NEG_INFINITY };
                }
                tensor::softmax_in_place(&mut scores);
                let dst = &mut out.row_mut(i, a)[span.clone()];
                for (b, &p) in scores.iter().enumerate() {
                    for (o, &vv) in dst.iter_mut().zip(&v.row(i, b)[span.clone()]) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    tensor::record_macs(2 * (n * s * s * c) as u64);
    Ok(out)
}

/// Retained units of one block: channel indices into `C_in` for MLP
/// blocks, head indices for attention blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    block_index: usize,
    retained: Vec<usize>,
    units: usize,
    group: usize,
}

impl ChannelMask {
    /// `units` is the total unit count and `group` the channels per unit.
    pub fn new(block_index: usize, retained: Vec<usize>, units: usize, group: usize) -> Result<Self> {
        if retained.is_empty() {
            return Err(Error::Precondition(format!("block {block_index}: empty mask")));
        }
        if group == 0 {
            return Err(Error::Precondition("mask group width must be >= 1".into()));
        }
        if retained.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Precondition(format!(
                "block {block_index}: mask indices must be strictly increasing"
            )));
        }
        if let Some(&u) = retained.last().filter(|&&u| u >= units) {
            return Err(Error::Precondition(format!(
                "block {block_index}: mask index {u} out of range {units}"
            )));
        }
        Ok(Self { block_index, retained, units, group })
    }

    pub fn full(block_index: usize, units: usize, group: usize) -> Self {
        Self { block_index, retained: (0..units).collect(), units, group }
    }

    /// Full mask shaped for `block`.
    pub fn full_for(block_index: usize, block: &BlockWeights) -> Self {
        Self::full(block_index, block.units(), block.unit_width())
    }

    pub fn block_index(&self) -> usize {
        self.block_index
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn is_full(&self) -> bool {
        self.retained.len() == self.units
    }

    /// Units not retained, ascending.
    pub fn pruned(&self) -> Vec<usize> {
        let mut keep = self.retained.iter().peekable();
        (0..self.units)
            .filter(|u| {
                if keep.peek() == Some(&u) {
                    keep.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }

    /// Retained `C_in` channel indices (heads expanded to their channels).
    pub fn channel_indices(&self) -> Vec<usize> {
        self.retained
            .iter()
            .flat_map(|&u| u * self.group..(u + 1) * self.group)
            .collect()
    }
}

/// `X + F(X)` with `F` computed on the retained weights.
pub fn block_forward_full(
    block: &BlockWeights,
    x: &Tensor3,
    mask: Option<&ChannelMask>,
) -> Result<Tensor3> {
    Ok(block.forward(x, mask)?.output)
}

/// `T(LN(X))` on the dense block; `x_ln` must already be normalized.
pub fn block_forward_intermediate(block: &BlockWeights, x_ln: &Tensor3) -> Result<Tensor3> {
    block.intermediate(x_ln, None)
}

/// `N x S` token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    n: usize,
    s: usize,
    ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(n: usize, s: usize, ids: Vec<u32>) -> Result<Self> {
        if n == 0 || s == 0 {
            return Err(shape_err!("token batch dims must be positive, got ({n},{s})"));
        }
        if ids.len() != n * s {
            return Err(shape_err!("token batch ({n},{s}) needs {} ids, got {}", n * s, ids.len()));
        }
        Ok(Self { n, s, ids })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn sample(&self, i: usize) -> &[u32] {
        &self.ids[i * self.s..(i + 1) * self.s]
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&t| t as usize >= vocab_size) {
            Some(t) => Err(Error::Value(format!("token id {t} >= vocab size {vocab_size}"))),
            None => Ok(()),
        }
    }
}

/// Per-block observations recorded during [`model_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    pub block: usize,
    /// L2 norm of the block input `X^l`.
    pub residual_norm: f32,
    /// Squared L2 norm of each retained intermediate channel.
    pub intermediate_sq: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor3,
    pub traces: Vec<BlockTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embedding: Matrix,
    blocks: Vec<BlockWeights>,
    final_gain: Vec<f32>,
    final_bias: Vec<f32>,
    lm_head: Matrix,
}

impl Model {
    pub fn from_parts(
        config: ModelConfig,
        embedding: Matrix,
        blocks: Vec<BlockWeights>,
        final_gain: Vec<f32>,
        final_bias: Vec<f32>,
        lm_head: Matrix,
    ) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d_model, config.vocab_size);
        if embedding.rows() != v || embedding.cols() != d || lm_head.rows() != v || lm_head.cols() != d {
            return Err(shape_err!("embedding / LM head must be {v}x{d}"));
        }
        if final_gain.len() != d || final_bias.len() != d {
            return Err(shape_err!("final layer norm must have width {d}"));
        }
        if blocks.len() != config.num_blocks() {
            return Err(shape_err!("expected {} blocks, got {}", config.num_blocks(), blocks.len()));
        }
        for (b, block) in blocks.iter().enumerate() {
            let want = if b % 2 == 0 { BlockKind::Attention } else { BlockKind::Mlp };
            if block.kind() != want {
                return Err(shape_err!("block {b} should be {want}"));
            }
            if block.ln_gain.len() != d || block.ln_bias.len() != d {
                return Err(shape_err!("block {b}: layer norm width must be {d}"));
            }
            let ok = match &block.params {
                BlockParams::Attention { wq, wk, wv, wo, num_heads } => {
                    *num_heads == config.num_heads
                        && [wq, wk, wv, wo].iter().all(|w| w.rows() == d && w.cols() == d)
                }
                BlockParams::Mlp { fc1, fc2 } => {
                    fc1.rows() == config.mlp_hidden
                        && fc1.cols() == d
                        && fc2.rows() == d
                        && fc2.cols() == config.mlp_hidden
                }
            };
            if !ok {
                return Err(shape_err!("block {b}: weight shapes inconsistent with config"));
            }
        }
        Ok(Self { config, embedding, blocks, final_gain, final_bias, lm_head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[BlockWeights] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [BlockWeights] {
        &mut self.blocks
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn lm_head(&self) -> &Matrix {
        &self.lm_head
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `X^0`: embedding lookup.
    pub fn embed(&self, batch: &TokenBatch) -> Result<Tensor3> {
        batch.validate(self.config.vocab_size)?;
        let mut data = Vec::with_capacity(batch.ids.len() * self.config.d_model);
        for &t in &batch.ids {
            data.extend_from_slice(self.embedding.row(t as usize));
        }
        Tensor3::new(batch.n, batch.s, self.config.d_model, data)
    }

    /// Final layer norm and LM head.
    pub fn logits(&self, x: &Tensor3) -> Result<Tensor3> {
        let h = layer_norm(x, &self.final_gain, &self.final_bias, LN_EPS)?;
        matmul_rhs_transposed(&h, &self.lm_head)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new();
        w.bytes(WEIGHT_MAGIC);
        for v in [c.num_layers, c.d_model, c.num_heads, c.mlp_hidden, c.vocab_size] {
            w.u32(v as u32);
        }
        w.u64(c.seed);
        w.f32s(self.embedding.data());
        for block in &self.blocks {
            w.f32s(&block.ln_gain);
            w.f32s(&block.ln_bias);
            match &block.params {
                BlockParams::Attention { wq, wk, wv, wo, .. } => {
                    for m in [wq, wk, wv, wo] {
                        w.f32s(m.data());
                    }
                }
                BlockParams::Mlp { fc1, fc2 } => {
                    w.f32s(fc1.data());
                    w.f32s(fc2.data());
                }
            }
        }
        w.f32s(&self.final_gain);
        w.f32s(&self.final_bias);
        w.f32s(self.lm_head.data());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "weight file");
        r.magic(WEIGHT_MAGIC)?;
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let [num_layers, d_model, num_heads, mlp_hidden, vocab_size] = dims;
        let config = ModelConfig {
            num_layers,
            d_model,
            num_heads,
            mlp_hidden,
            vocab_size,
            seed: r.u64()?,
            outlier_fraction: 0.0,
            outlier_gain: default_outlier_gain(),
        };
        config.validate().map_err(|e| Error::Format(format!("weight file header: {e}")))?;
        let (d, h, v) = (d_model, mlp_hidden, vocab_size);
        let mut matrix = |rows, cols| -> Result<Matrix> { Matrix::new(rows, cols, r.f32s(rows * cols)?) };
        let embedding = matrix(v, d)?;
        let mut blocks = Vec::with_capacity(2 * num_layers);
        for _ in 0..num_layers {
            for kind in [BlockKind::Attention, BlockKind::Mlp] {
                let ln_gain = matrix(1, d)?.into_data();
                let ln_bias = matrix(1, d)?.into_data();
                let params = match kind {
                    BlockKind::Attention => BlockParams::Attention {
                        wq: matrix(d, d)?,
                        wk: matrix(d, d)?,
                        wv: matrix(d, d)?,
                        wo: matrix(d, d)?,
                        num_heads,
                    },
                    BlockKind::Mlp => BlockParams::Mlp { fc1: matrix(h, d)?, fc2: matrix(d, h)? },
                };
                blocks.push(BlockWeights { ln_gain, ln_bias, params });
            }
        }
        let final_gain = matrix(1, d)?.into_data();
        let final_bias = matrix(1, d)?.into_data();
        let lm_head = matrix(v, d)?;
        r.finish()?;
        Self::from_parts(config, embedding, blocks, final_gain, final_bias, lm_head)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Model::load(path)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect();
    Matrix::new(rows, cols, data).expect("sized by construction")
}

fn ln_params(rng: &mut ChaCha8Rng, d: usize) -> (Vec<f32>, Vec<f32>) {
    let gain = (0..d).map(|_| 1.0 + 0.1 * rng.sample::<f32, _>(StandardNormal)).collect();
    let bias = (0..d).map(|_| 0.02 * rng.sample::<f32, _>(StandardNormal)).collect();
    (gain, bias)
}

/// Residual channels that receive amplified embedding columns.
pub fn outlier_channels(cfg: &ModelConfig) -> Vec<usize> {
    let count = (cfg.outlier_fraction as f64 * cfg.d_model as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6f75_746c_6965_7273);
    let mut channels: Vec<usize> = (0..cfg.d_model).collect();
    channels.shuffle(&mut rng);
    channels.truncate(count);
    channels.sort_unstable();
    channels
}

/// Deterministic random weights from `cfg.seed`.
///
/// Projections are Gaussian with `1/sqrt(fan_in)` scaling. The embedding
/// columns of a random `outlier_fraction` of residual channels are
/// multiplied by `outlier_gain`, which gives the residual stream a few
/// large-magnitude channels whose per-token values vary with the input.
/// The final layer norm divides those channels back down so the LM head
/// sees a balanced representation.
pub fn generate_synthetic_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let (d, h, v) = (cfg.d_model, cfg.mlp_hidden, cfg.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inv_d = 1.0 / (d as f32).sqrt();
    let inv_h = 1.0 / (h as f32).sqrt();

    let mut embedding = normal_matrix(&mut rng, v, d, 1.0);
    let outliers = outlier_channels(cfg);
    for r in 0..v {
        let row = embedding.row_mut(r);
        for &c in &outliers {
            row[c] *= cfg.outlier_gain;
        }
    }

    let mut blocks = Vec::with_capacity(cfg.num_blocks());
    for _ in 0..cfg.num_layers {
        let (ln_gain, ln_bias) = ln_params(&mut rng, d);
        blocks.push(BlockWeights {
            ln_gain,
            ln_bias,
            params: BlockParams::Attention {
                wq: normal_matrix(&mut rng, d, d, inv_d),
                wk: normal_matrix(&mut rng, d, d, inv_d),
                wv: normal_matrix(&mut rng, d, d, inv_d),
                wo: normal_matrix(&mut rng, d, d, inv_d),
                num_heads: cfg.num_heads,
            },
        });
        let (ln_gain, ln_bias) = ln_params(&mut rng, d);
        blocks.push(BlockWeights {
            ln_gain,
            ln_bias,
            params: BlockParams::Mlp {
                fc1: normal_matrix(&mut rng, h, d, inv_d),
                fc2: normal_matrix(&mut rng, d, h, inv_h),
            },
        });
    }

    let mut final_gain = vec![1.0; d];
    for &c in &outliers {
        final_gain[c] = 1.0 / cfg.outlier_gain;
    }
    let final_bias = vec![0.0; d];
    let lm_head = normal_matrix(&mut rng, v, d, LOGIT_SCALE * inv_d);
    Model::from_parts(cfg.clone(), embedding, blocks, final_gain, final_bias, lm_head)
}

/// Runs the whole model. `masks`, when given, holds one optional mask per
/// block; `None` entries run the dense block.
pub fn model_forward(
    model: &Model,
    batch: &TokenBatch,
    masks: Option<&[Option<ChannelMask>]>,
    record_traces: bool,
) -> Result<ForwardOutput> {
    if let Some(m) = masks {
        if m.len() != model.num_blocks() {
            return Err(Error::Precondition(format!(
                "got {} masks for {} blocks",
                m.len(),
                model.num_blocks()
            )));
        }
    }
    let mut x = model.embed(batch)?;
    let mut traces = Vec::new();
    for (b, block) in model.blocks.iter().enumerate() {
        let mask = masks.and_then(|m| m[b].as_ref());
        let out = block.forward(&x, mask)?;
        if record_traces {
            traces.push(BlockTrace {
                block: b,
                residual_norm: x.data().iter().map(|v| v * v).sum::<f32>().sqrt(),
                intermediate_sq: tensor::l2_norm_over_axes(&out.intermediate, tensor::Axis::Feature)
                    .into_iter()
                    .map(|v| v * v)
                    .collect(),
            });
        }
        x = out.output;
    }
    Ok(ForwardOutput { logits: model.logits(&x)?, traces })
}

/// Dense intermediate states `X^{l,int}` of every block.
pub fn collect_intermediates(model: &Model, batch: &TokenBatch) -> Result<Vec<Tensor3>> {
    let mut x = model.embed(batch)?;
    let mut out = Vec::with_capacity(model.num_blocks());
    for block in &model.blocks {
        let o = block.forward(&x, None)?;
        out.push(o.intermediate);
        x = o.output;
    }
    Ok(out)
}

/// Mean natural-log cross-entropy of predicting token `j + 1` from position
/// `j`, over all samples.
pub fn next_token_loss(logits: &Tensor3, batch: &TokenBatch) -> Result<f64> {
    if logits.n() != batch.n || logits.s() != batch.s {
        return Err(shape_err!("logits and batch disagree on (N, S)"));
    }
    if batch.s < 2 {
        return Err(Error::Precondition("need sequence length >= 2 for next-token loss".into()));
    }
    let mut total = 0f64;
    for i in 0..batch.n {
        for j in 0..batch.s - 1 {
            let row = logits.row(i, j);
            let target = batch.ids[i * batch.s + j + 1] as usize;
            if target >= row.len() {
                return Err(Error::Value(format!("token id {target} >= vocab {}", row.len())));
            }
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[target] as f64;
        }
    }
    Ok(total / (batch.n * (batch.s - 1)) as f64)
}
