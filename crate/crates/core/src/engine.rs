//! The per-batch pruning loop.
//!
//! For every block of every batch: rank the block input, probe, fuse the
//! probe statistics with history, score channels or heads, build a mask,
//! run the block on the retained weights and refresh the history. The
//! other run modes reuse the same loop with some steps fixed or removed.
//!
//! History is kept in per-sample units: calibration sums are divided by
//! the calibration batch size, probe sums by the probe sample count and
//! EMA targets by the inference batch size. Without this the probe term
//! of the fusion would be dwarfed by a history summed over many more
//! samples.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{jaccard_profile, BlockJaccard, MaskStream};
use crate::flops::{block_macs, probe_block_macs};
use crate::history::{
    collapse_seq, ema_update_scaled, fuse, init_history, FusionMode, HistoricalState,
};
use crate::metric::{
    aggregate_heads, flap_scores, ppsp_scores, select_mask, wanda_sp_scores, ChannelScores, MetricKind,
    PruneRatioPlan,
};
use crate::model::{next_token_loss, BlockKind, BlockWeights, ChannelMask, Model, TokenBatch};
use crate::probe::{build_probe, probe_forward, select_probe, ProbeConfig, SelectionSource};
use crate::tensor::{Matrix, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Dense,
    /// Masks computed once from calibration statistics.
    Fixed,
    /// Probe with the whole batch and no history: the quality ceiling.
    FullBatchProbing,
    #[default]
    Pp,
    /// Probe block `l` from the input of block `l - k`.
    PpParallel,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Dense => "dense",
            RunMode::Fixed => "fixed",
            RunMode::FullBatchProbing => "full_batch_probing",
            RunMode::Pp => "pp",
            RunMode::PpParallel => "pp_parallel",
        }
    }

    fn probes(self) -> bool {
        matches!(self, RunMode::FullBatchProbing | RunMode::Pp | RunMode::PpParallel)
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "dense" => Ok(RunMode::Dense),
            "fixed" => Ok(RunMode::Fixed),
            "full_batch_probing" | "full_batch" => Ok(RunMode::FullBatchProbing),
            "pp" => Ok(RunMode::Pp),
            "pp_parallel" => Ok(RunMode::PpParallel),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

fn default_lambda() -> f64 {
    crate::history::DEFAULT_LAMBDA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default)]
    pub metric: MetricKind,
    #[serde(default)]
    pub ratio_plan: PruneRatioPlan,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Keep per-block scores in the report.
    #[serde(default)]
    pub record_traces: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Pp,
            probe: ProbeConfig::default(),
            fusion: FusionMode::ImportanceScaled,
            metric: MetricKind::Ppsp,
            ratio_plan: PruneRatioPlan::default(),
            lambda: default_lambda(),
            record_traces: false,
        }
    }
}

impl EngineConfig {
    pub fn with_mode(mode: RunMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        self.probe.validate()?;
        self.fusion.validate()?;
        if self.mode != RunMode::Dense {
            self.ratio_plan.validate(num_layers)?;
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("EMA lambda {} outside [0, 1)", self.lambda)));
        }
        if self.metric == MetricKind::Flap && !matches!(self.mode, RunMode::Fixed | RunMode::Dense) {
            return Err(Error::Config(format!("flap is only defined for fixed pruning, not {}", self.mode)));
        }
        if self.mode == RunMode::Pp && self.probe.parallel_offset > 0 {
            return Err(Error::Config("parallel_offset requires mode pp_parallel".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of this config and the model header.
    /// Generation-only settings (outliers) are left out: a weight file does
    /// not carry them.
    pub fn digest(&self, model: &crate::model::ModelConfig) -> String {
        let header = serde_json::json!([
            model.num_layers,
            model.d_model,
            model.num_heads,
            model.mlp_hidden,
            model.vocab_size,
            model.seed
        ]);
        let doc = serde_json::json!({ "engine": self, "model": header });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }
}

/// One (batch, block) line of a run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub batch: usize,
    pub block: usize,
    pub kind: BlockKind,
    /// Retained heads (attention) or channels (MLP).
    pub retained_indices: Vec<usize>,
    pub units: usize,
    pub ratio: f64,
    pub probe_flops: u64,
    pub block_flops: u64,
    pub dense_block_flops: u64,
    pub metric: MetricKind,
    /// Mean next-token cross-entropy of the whole batch.
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub batch: usize,
    pub loss: f64,
    pub blocks: Vec<BlockRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mode: RunMode,
    pub config_digest: String,
    pub batches: usize,
    pub mean_loss: f64,
    pub perplexity: f64,
    /// Block passes plus probes.
    pub total_flops: u64,
    pub probe_flops: u64,
    pub dense_flops: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jaccard: Option<Vec<BlockJaccard>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    pub aggregate: AggregateReport,
    pub records: Vec<BlockRecord>,
}

impl CorpusReport {
    pub fn mask_stream(&self) -> Result<MaskStream> {
        MaskStream::from_records(&self.records)
    }
}

pub struct Engine {
    model: Arc<Model>,
    config: EngineConfig,
    history: Option<Vec<HistoricalState>>,
    fixed_masks: Option<Vec<ChannelMask>>,
    batches_seen: usize,
}

impl Engine {
    pub fn new(model: impl Into<Arc<Model>>, config: EngineConfig) -> Result<Self> {
        let model = model.into();
        config.validate(model.config().num_layers)?;
        Ok(Self { model, config, history: None, fixed_masks: None, batches_seen: 0 })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn history(&self) -> Option<&[HistoricalState]> {
        self.history.as_deref()
    }

    pub fn fixed_masks(&self) -> Option<&[ChannelMask]> {
        self.fixed_masks.as_deref()
    }

    pub fn config_digest(&self) -> String {
        self.config.digest(self.model.config())
    }

    /// Seeds history from the dense model and, for fixed pruning, derives
    /// the one-time masks.
    pub fn calibrate(&mut self, calibration: &TokenBatch) -> Result<()> {
        let states = calibrated_history(&self.model, calibration, self.config.lambda)?;
        if self.config.metric == MetricKind::Flap {
            let ints = crate::model::collect_intermediates(&self.model, calibration)?;
            let masks = self
                .model
                .blocks()
                .iter()
                .zip(&ints)
                .enumerate()
                .map(|(b, (block, x))| {
                    let ratio = self.ratio(b, block);
                    if ratio == 0.0 {
                        return Ok(ChannelMask::full_for(b, block));
                    }
                    let obs = Matrix::new(x.n() * x.s(), x.d(), x.data().to_vec())?;
                    let scores = flap_scores(block.w_final(), &obs)?;
                    unit_mask(b, block, &scores, ratio)
                })
                .collect::<Result<Vec<_>>>()?;
            self.fixed_masks = Some(masks);
            self.history = Some(states);
        } else {
            self.set_history(states)?;
        }
        Ok(())
    }

    /// Installs history (e.g. from a snapshot) and recomputes fixed masks
    /// from it.
    pub fn set_history(&mut self, mut states: Vec<HistoricalState>) -> Result<()> {
        if states.len() != self.model.num_blocks() {
            return Err(Error::Precondition(format!(
                "history has {} blocks, model has {}",
                states.len(),
                self.model.num_blocks()
            )));
        }
        for (b, (st, block)) in states.iter_mut().zip(self.model.blocks()).enumerate() {
            if st.channels() != block.c_in() {
                return Err(Error::Precondition(format!(
                    "history block {b} has {} channels, model has {}",
                    st.channels(),
                    block.c_in()
                )));
            }
            st.set_lambda(self.config.lambda)?;
        }
        if self.config.metric == MetricKind::Flap {
            return Err(Error::Config("flap masks need calibration intermediates, not a history snapshot".into()));
        }
        let masks = self
            .model
            .blocks()
            .iter()
            .zip(&states)
            .enumerate()
            .map(|(b, (block, st))| {
                let ratio = self.ratio(b, block);
                if ratio == 0.0 {
                    return Ok(ChannelMask::full_for(b, block));
                }
                self.mask_from_stats(b, block, &collapse_seq(st.v()), ratio)
            })
            .collect::<Result<Vec<_>>>()?;
        self.fixed_masks = Some(masks);
        self.history = Some(states);
        Ok(())
    }

    fn ratio(&self, b: usize, block: &BlockWeights) -> f64 {
        self.config.ratio_plan.ratio_for(b, block.kind(), self.model.config().num_layers)
    }

    /// Scores channel statistics `xsq` (squared norms) with the configured
    /// metric and selects the block's mask.
    fn mask_from_stats(&self, b: usize, block: &BlockWeights, xsq: &[f32], ratio: f64) -> Result<ChannelMask> {
        let scores = match self.config.metric {
            MetricKind::Ppsp => ppsp_scores(block.w_final(), xsq)?,
            MetricKind::WandaSp => {
                let xnorm: Vec<f32> = xsq.iter().map(|v| v.sqrt()).collect();
                wanda_sp_scores(block.w_final(), &xnorm)?
            }
            MetricKind::Flap => {
                return Err(Error::Config("flap is only defined for fixed pruning".into()));
            }
        };
        unit_mask(b, block, &scores, ratio)
    }

    fn require_history(&self) -> Result<()> {
        if self.history.is_none() {
            return Err(Error::Precondition(format!("mode {} needs calibration first", self.config.mode)));
        }
        Ok(())
    }

    /// Runs one batch through all blocks under the configured mode.
    pub fn run_batch(&mut self, batch: &TokenBatch) -> Result<(Tensor3, BatchReport)> {
        let mode = self.config.mode;
        batch.validate(self.model.config().vocab_size)?;
        match mode {
            RunMode::Pp | RunMode::PpParallel => self.require_history()?,
            RunMode::Fixed if self.fixed_masks.is_none() => self.require_history()?,
            _ => {}
        }
        if let (true, Some(h)) = (mode.probes(), self.history.as_ref()) {
            if batch.s() > h[0].seq_len() {
                return Err(Error::Config(format!(
                    "batch sequence length {} exceeds calibrated length {}",
                    batch.s(),
                    h[0].seq_len()
                )));
            }
        }
        let model = Arc::clone(&self.model);
        let num_layers = model.config().num_layers;
        let (n, s, d) = (batch.n(), batch.s(), model.config().d_model);
        let offset = self.config.probe.parallel_offset.max(1);
        let mut x = model.embed(batch)?;
        let mut inputs: Vec<Tensor3> = Vec::new();
        let mut records = Vec::with_capacity(model.num_blocks());
        for (b, block) in model.blocks().iter().enumerate() {
            let kind = block.kind();
            let ratio = self.config.ratio_plan.ratio_for(b, kind, num_layers);
            let mut probe_flops = 0;
            let mut scores = None;
            let mask = match mode {
                RunMode::Dense => ChannelMask::full_for(b, block),
                RunMode::Fixed => self.fixed_masks.as_ref().expect("checked above")[b].clone(),
                _ if ratio == 0.0 => ChannelMask::full_for(b, block),
                _ => {
                    let src = match mode {
                        RunMode::PpParallel => inputs.get(b.saturating_sub(offset)).unwrap_or(&x),
                        _ => &x,
                    };
                    let (xsq, flops) = self.probe_stats(b, block, src, s)?;
                    probe_flops = flops;
                    let m = self.mask_from_stats(b, block, &xsq, ratio)?;
                    if self.config.record_traces {
                        scores = Some(xsq);
                    }
                    m
                }
            };
            let out = block.forward(&x, (!mask.is_full()).then_some(&mask))?;
            if mode.probes() && ratio > 0.0 {
                if let Some(h) = self.history.as_mut() {
                    ema_update_scaled(&mut h[b], &out.intermediate, &mask, 1.0 / n as f32)?;
                }
            }
            let retained_channels = mask.retained().len() * mask.group();
            records.push(BlockRecord {
                batch: self.batches_seen,
                block: b,
                kind,
                retained_indices: mask.retained().to_vec(),
                units: mask.units(),
                ratio: if mode == RunMode::Dense { 0.0 } else { ratio },
                probe_flops,
                block_flops: block_macs(kind, d, retained_channels, n, s),
                dense_block_flops: block_macs(kind, d, block.c_in(), n, s),
                metric: self.config.metric,
                loss: 0.0,
                scores,
            });
            if mode == RunMode::PpParallel {
                inputs.push(std::mem::replace(&mut x, out.output));
            } else {
                x = out.output;
            }
        }
        let logits = model.logits(&x)?;
        let loss = next_token_loss(&logits, batch)?;
        records.iter_mut().for_each(|r| r.loss = loss);
        let report = BatchReport { batch: self.batches_seen, loss, blocks: records };
        self.batches_seen += 1;
        Ok((logits, report))
    }

    /// Squared channel statistics driving block `b`'s mask, in per-sample
    /// units, plus the probe's analytic cost.
    fn probe_stats(&self, b: usize, block: &BlockWeights, src: &Tensor3, s: usize) -> Result<(Vec<f32>, u64)> {
        let (probe_cfg, fusion) = match self.config.mode {
            RunMode::FullBatchProbing => (ProbeConfig::full(), FusionMode::ProbeOnly),
            _ => (self.config.probe, self.config.fusion),
        };
        if fusion == FusionMode::HistoryOnly {
            let h = &self.history.as_ref().expect("pp modes require history")[b];
            return Ok((collapse_seq(&h.leading_rows(s)?), 0));
        }
        let ranked;
        let rank_src = match probe_cfg.selection_source {
            SelectionSource::Residual => src,
            SelectionSource::PostLayernorm => {
                ranked = block.layer_norm(src)?;
                &ranked
            }
        };
        let sel = select_probe(rank_src, &probe_cfg)?;
        let probe = build_probe(src, block, &sel)?;
        let pint = probe_forward(block, &probe)?;
        let (np, sp) = (probe.n(), probe.s());
        let mut p = crate::history::reduce_batch_sq(&pint);
        let inv = 1.0 / np as f32;
        p.data_mut().iter_mut().for_each(|v| *v *= inv);
        let fused = match (fusion, self.history.as_ref()) {
            (FusionMode::ProbeOnly, _) => p,
            (_, Some(h)) => fuse(&p, &h[b], &sel.seq_gather_order(), fusion)?,
            (_, None) => return Err(Error::Precondition(format!("fusion {fusion:?} needs history"))),
        };
        Ok((collapse_seq(&fused), probe_block_macs(block.kind(), block.d_model(), block.c_in(), np, sp)))
    }

    /// Runs up to `max_batches` consecutive batches. With `reference`, the
    /// aggregate carries per-block Jaccard overlap against it.
    pub fn run_corpus(
        &mut self,
        corpus: &crate::corpus::Corpus,
        batch_size: usize,
        seq_len: usize,
        max_batches: Option<usize>,
        reference: Option<&MaskStream>,
    ) -> Result<CorpusReport> {
        let available = corpus.num_batches(batch_size, seq_len);
        let count = max_batches.map_or(available, |m| m.min(available));
        if count == 0 {
            return Err(Error::Precondition(format!(
                "corpus of {} tokens holds no {batch_size}x{seq_len} batch",
                corpus.len()
            )));
        }
        self.batches_seen = 0;
        let mut records = Vec::with_capacity(count * self.model.num_blocks());
        let mut loss_sum = 0f64;
        for i in 0..count {
            let (_, report) = self.run_batch(&corpus.batch(i, batch_size, seq_len)?)?;
            loss_sum += report.loss;
            records.extend(report.blocks);
        }
        let mean_loss = loss_sum / count as f64;
        let probe_flops: u64 = records.iter().map(|r| r.probe_flops).sum();
        let jaccard = match reference {
            Some(r) => Some(jaccard_profile(&MaskStream::from_records(&records)?, r)?),
            None => None,
        };
        let aggregate = AggregateReport {
            mode: self.config.mode,
            config_digest: self.config_digest(),
            batches: count,
            mean_loss,
            perplexity: mean_loss.exp(),
            total_flops: records.iter().map(|r| r.block_flops).sum::<u64>() + probe_flops,
            probe_flops,
            dense_flops: records.iter().map(|r| r.dense_block_flops).sum(),
            jaccard,
        };
        Ok(CorpusReport { aggregate, records })
    }
}

/// Per-sample calibration statistics for every block, as a snapshot holds them.
pub fn calibrated_history(model: &Model, calibration: &TokenBatch, lambda: f64) -> Result<Vec<HistoricalState>> {
    calibration.validate(model.config().vocab_size)?;
    let mut states = init_history(model, calibration, lambda, calibration.s())?;
    for st in &mut states {
        st.scale(1.0 / calibration.n() as f32);
    }
    Ok(states)
}

/// Selects a mask over `block`'s units from per-channel scores; attention
/// channels are pooled into heads first.
fn unit_mask(b: usize, block: &BlockWeights, scores: &ChannelScores, ratio: f64) -> Result<ChannelMask> {
    match block.kind() {
        BlockKind::Attention => {
            let heads = aggregate_heads(scores, block.unit_width())?;
            select_mask(b, &heads.scores, ratio, block.unit_width())
        }
        BlockKind::Mlp => select_mask(b, &scores.scores, ratio, 1),
    }
}

/// Writes one JSON object per record.
pub fn write_records(records: &[BlockRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(input: impl BufRead) -> Result<Vec<BlockRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("report line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_topic_corpus, CorpusConfig};
    use crate::model::{generate_synthetic_model, model_forward, ModelConfig};

    fn model() -> Arc<Model> {
        Arc::new(
            generate_synthetic_model(&ModelConfig {
                num_layers: 3,
                d_model: 16,
                num_heads: 4,
                mlp_hidden: 32,
                vocab_size: 64,
                seed: 9,
                ..ModelConfig::default()
            })
            .unwrap(),
        )
    }

    fn corpus() -> crate::corpus::Corpus {
        generate_topic_corpus(&CorpusConfig {
            vocab_size: 64,
            sequences: 40,
            seq_len: 8,
            seed: 2,
            num_topics: 4,
            segment_sequences: 4,
        })
        .unwrap()
    }

    fn cfg(mode: RunMode) -> EngineConfig {
        EngineConfig {
            mode,
            ratio_plan: PruneRatioPlan::new(0.4, 1),
            probe: ProbeConfig { batch_frac: 0.5, seq_frac: 0.5, ..ProbeConfig::default() },
            ..EngineConfig::default()
        }
    }

    fn calibrated(mode: RunMode, c: EngineConfig) -> Engine {
        let mut e = Engine::new(model(), EngineConfig { mode, ..c }).unwrap();
        e.calibrate(&corpus().batch(0, 8, 8).unwrap()).unwrap();
        e
    }

    #[test]
    fn config_validation() {
        let m = model();
        assert!(Engine::new(m.clone(), EngineConfig { metric: MetricKind::Flap, ..cfg(RunMode::Pp) }).is_err());
        assert!(Engine::new(m.clone(), EngineConfig { metric: MetricKind::Flap, ..cfg(RunMode::Fixed) }).is_ok());
        let offset = ProbeConfig { parallel_offset: 2, ..ProbeConfig::default() };
        assert!(matches!(
            Engine::new(m.clone(), EngineConfig { probe: offset, ..cfg(RunMode::Pp) }),
            Err(Error::Config(_))
        ));
        assert!(Engine::new(m, EngineConfig { probe: offset, ..cfg(RunMode::PpParallel) }).is_ok());
        assert_eq!("full-batch".parse::<RunMode>().unwrap(), RunMode::FullBatchProbing);
    }

    #[test]
    fn pp_requires_calibration() {
        let mut e = Engine::new(model(), cfg(RunMode::Pp)).unwrap();
        assert!(matches!(e.run_batch(&corpus().batch(0, 4, 8).unwrap()), Err(Error::Precondition(_))));
    }

    #[test]
    fn ratio_zero_matches_dense_bitwise() {
        let c = corpus();
        let batch = c.batch(1, 4, 8).unwrap();
        let dense = model_forward(&model(), &batch, None, false).unwrap().logits;
        for mode in [RunMode::Pp, RunMode::FullBatchProbing, RunMode::Fixed, RunMode::Dense] {
            let mut e = calibrated(mode, EngineConfig { ratio_plan: PruneRatioPlan::new(0.0, 0), ..cfg(mode) });
            let (logits, _) = e.run_batch(&batch).unwrap();
            assert_eq!(logits, dense, "{mode}");
        }
    }

    #[test]
    fn full_probe_pp_equals_full_batch_probing() {
        let c = corpus();
        let full = EngineConfig {
            probe: ProbeConfig::full(),
            fusion: FusionMode::ProbeOnly,
            ..cfg(RunMode::Pp)
        };
        let mut pp = calibrated(RunMode::Pp, full.clone());
        let mut fb = calibrated(RunMode::FullBatchProbing, full);
        let a = pp.run_corpus(&c, 4, 8, Some(5), None).unwrap();
        let b = fb.run_corpus(&c, 4, 8, Some(5), None).unwrap();
        let masks = |r: &CorpusReport| r.records.iter().map(|x| x.retained_indices.clone()).collect::<Vec<_>>();
        assert_eq!(masks(&a), masks(&b));
    }

    #[test]
    fn skipped_blocks_stay_dense_and_masks_respect_plan() {
        let mut e = calibrated(RunMode::Pp, cfg(RunMode::Pp));
        let (_, rep) = e.run_batch(&corpus().batch(0, 4, 8).unwrap()).unwrap();
        for r in &rep.blocks {
            if r.block < 2 {
                assert_eq!(r.retained_indices.len(), r.units);
                assert_eq!(r.probe_flops, 0);
            } else {
                let pruned = crate::metric::pruned_count(r.units, r.ratio);
                assert_eq!(r.retained_indices.len(), r.units - pruned);
                assert!(r.probe_flops > 0);
            }
        }
    }

    #[test]
    fn fixed_mode_is_stateless() {
        let mut e = calibrated(RunMode::Fixed, cfg(RunMode::Fixed));
        let before = e.history().unwrap().to_vec();
        let batch = corpus().batch(2, 4, 8).unwrap();
        let (_, a) = e.run_batch(&batch).unwrap();
        let (_, b) = e.run_batch(&batch).unwrap();
        let ma: Vec<_> = a.blocks.iter().map(|r| &r.retained_indices).collect();
        let mb: Vec<_> = b.blocks.iter().map(|r| &r.retained_indices).collect();
        assert_eq!(ma, mb);
        assert_eq!(e.history().unwrap(), &before[..]);
    }

    #[test]
    fn history_only_pp_matches_fixed_on_first_batch() {
        let c = corpus();
        let base = EngineConfig { fusion: FusionMode::HistoryOnly, ..cfg(RunMode::Pp) };
        let mut pp = calibrated(RunMode::Pp, base.clone());
        let mut fixed = calibrated(RunMode::Fixed, base);
        let batch = c.batch(3, 4, 8).unwrap();
        let (_, a) = pp.run_batch(&batch).unwrap();
        let (_, b) = fixed.run_batch(&batch).unwrap();
        for (x, y) in a.blocks.iter().zip(&b.blocks) {
            assert_eq!(x.retained_indices, y.retained_indices, "block {}", x.block);
        }
    }

    #[test]
    fn pp_updates_only_retained_history_columns() {
        let mut e = calibrated(RunMode::Pp, cfg(RunMode::Pp));
        let before = e.history().unwrap().to_vec();
        let (_, rep) = e.run_batch(&corpus().batch(1, 4, 8).unwrap()).unwrap();
        let after = e.history().unwrap();
        for r in &rep.blocks {
            let group = before[r.block].channels() / r.units;
            for u in 0..r.units {
                let kept = r.retained_indices.contains(&u);
                for ch in u * group..(u + 1) * group {
                    let changed = (0..8).any(|j| before[r.block].v().get(j, ch) != after[r.block].v().get(j, ch));
                    if !kept || r.block < 2 {
                        assert!(!changed, "block {} channel {ch}", r.block);
                    }
                }
            }
        }
    }

    #[test]
    fn corpus_run_is_deterministic_and_serializes() {
        let c = corpus();
        let run = || {
            let mut e = calibrated(RunMode::Pp, cfg(RunMode::Pp));
            e.run_corpus(&c, 4, 8, Some(3), None).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.aggregate.perplexity >= 1.0 && a.aggregate.perplexity.is_finite());
        let mut buf = Vec::new();
        write_records(&a.records, &mut buf).unwrap();
        assert_eq!(read_records(&buf[..]).unwrap(), a.records);
        assert!(read_records(&b"{\"batch\": 1}\n"[..]).is_err());
    }

    #[test]
    fn dense_single_batch_perplexity() {
        let c = corpus();
        let mut e = Engine::new(model(), EngineConfig::with_mode(RunMode::Dense)).unwrap();
        let rep = e.run_corpus(&c, 4, 8, Some(1), None).unwrap();
        let logits = model_forward(&model(), &c.batch(0, 4, 8).unwrap(), None, false).unwrap().logits;
        let loss = next_token_loss(&logits, &c.batch(0, 4, 8).unwrap()).unwrap();
        assert_eq!(rep.aggregate.perplexity, loss.exp());
        assert_eq!(rep.aggregate.probe_flops, 0);
        assert_eq!(rep.aggregate.total_flops, rep.aggregate.dense_flops);
    }

    #[test]
    fn probe_flops_grow_with_fractions() {
        let c = corpus();
        let mut last = 0;
        for (bf, sf) in [(0.25, 0.25), (0.5, 0.25), (0.5, 0.5), (1.0, 0.5), (1.0, 1.0)] {
            let probe = ProbeConfig { batch_frac: bf, seq_frac: sf, ..ProbeConfig::default() };
            let mut e = calibrated(RunMode::Pp, EngineConfig { probe, ..cfg(RunMode::Pp) });
            let rep = e.run_corpus(&c, 4, 8, Some(1), None).unwrap();
            assert!(rep.aggregate.probe_flops > last);
            last = rep.aggregate.probe_flops;
        }
    }

    #[test]
    fn pp_parallel_runs_and_differs_in_source() {
        let c = corpus();
        let probe = ProbeConfig { parallel_offset: 1, ..cfg(RunMode::PpParallel).probe };
        let mut e = calibrated(RunMode::PpParallel, EngineConfig { probe, ..cfg(RunMode::PpParallel) });
        let rep = e.run_corpus(&c, 4, 8, Some(2), None).unwrap();
        assert!(rep.aggregate.perplexity.is_finite());
    }

    #[test]
    fn sequence_longer_than_calibration_is_rejected() {
        let mut e = Engine::new(model(), cfg(RunMode::Pp)).unwrap();
        e.calibrate(&corpus().batch(0, 8, 4).unwrap()).unwrap();
        assert!(matches!(e.run_batch(&corpus().batch(0, 4, 8).unwrap()), Err(Error::Config(_))));
    }
}
