//! Token streams: the `PPT1` file format and two synthetic generators.
//!
//! Both generators split the vocabulary into disjoint topics and emit the
//! stream in topic segments, so consecutive batches share a topic while
//! batches far apart usually do not. That is what makes activation
//! statistics batch-dependent.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{Reader, Writer};
use crate::model::{model_forward, Model, TokenBatch};

pub const CORPUS_MAGIC: &[u8; 4] = b"PPT1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    vocab_size: usize,
    tokens: Vec<u32>,
}

impl Corpus {
    pub fn new(vocab_size: usize, tokens: Vec<u32>) -> Result<Self> {
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Value(format!("token id {t} >= vocab size {vocab_size}")));
        }
        if vocab_size > u32::MAX as usize {
            return Err(Error::Value("vocab size exceeds u32".into()));
        }
        Ok(Self { vocab_size, tokens })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of whole `(batch_size, seq_len)` batches in the stream.
    pub fn num_batches(&self, batch_size: usize, seq_len: usize) -> usize {
        match batch_size * seq_len {
            0 => 0,
            per => self.tokens.len() / per,
        }
    }

    /// The `index`-th non-overlapping batch.
    pub fn batch(&self, index: usize, batch_size: usize, seq_len: usize) -> Result<TokenBatch> {
        let per = batch_size * seq_len;
        let start = index * per;
        if per == 0 || start + per > self.tokens.len() {
            return Err(Error::Precondition(format!(
                "corpus of {} tokens has no batch {index} of {batch_size}x{seq_len}",
                self.tokens.len()
            )));
        }
        TokenBatch::new(batch_size, seq_len, self.tokens[start..start + per].to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CORPUS_MAGIC);
        w.u32(self.vocab_size as u32);
        w.u64(self.tokens.len() as u64);
        w.u32s(&self.tokens);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "token file");
        r.magic(CORPUS_MAGIC)?;
        let vocab = r.u32()? as usize;
        let count = usize::try_from(r.u64()?)
            .map_err(|_| Error::Format("token file: count overflows".into()))?;
        let tokens = r.u32s(count)?;
        r.finish()?;
        Self::new(vocab, tokens).map_err(|e| Error::Format(format!("token file: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn default_topics() -> usize {
    8
}

fn default_segment() -> usize {
    4
}

/// Settings shared by both generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    /// Number of sequences to emit.
    pub sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
    #[serde(default = "default_topics")]
    pub num_topics: usize,
    /// Consecutive sequences drawn from the same topic.
    #[serde(default = "default_segment")]
    pub segment_sequences: usize,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.seq_len == 0 || self.sequences == 0 {
            return Err(Error::Config("corpus sizes must be >= 1".into()));
        }
        if self.num_topics == 0 || self.num_topics > self.vocab_size {
            return Err(Error::Config(format!(
                "num_topics {} must be in 1..={}",
                self.num_topics, self.vocab_size
            )));
        }
        if self.segment_sequences == 0 {
            return Err(Error::Config("segment_sequences must be >= 1".into()));
        }
        Ok(())
    }

    /// Disjoint vocabulary slices, one per topic.
    fn topics(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
        let mut vocab: Vec<u32> = (0..self.vocab_size as u32).collect();
        vocab.shuffle(rng);
        let per = self.vocab_size / self.num_topics;
        (0..self.num_topics).map(|t| vocab[t * per..(t + 1) * per].to_vec()).collect()
    }

    fn topic_schedule(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.sequences);
        while out.len() < self.sequences {
            let topic = rng.random_range(0..self.num_topics);
            let n = self.segment_sequences.min(self.sequences - out.len());
            out.extend(std::iter::repeat_n(topic, n));
        }
        out
    }
}

/// Zipf-distributed tokens within each topic; no model involved.
pub fn generate_topic_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topics = cfg.topics(&mut rng);
    let schedule = cfg.topic_schedule(&mut rng);
    let per = topics[0].len();
    let zipf = WeightedIndex::new((0..per).map(|r| 1.0 / (r as f64 + 1.0).powf(1.1)))
        .map_err(|e| Error::Config(format!("topic weights: {e}")))?;
    let mut tokens = Vec::with_capacity(cfg.sequences * cfg.seq_len);
    for &topic in &schedule {
        tokens.extend((0..cfg.seq_len).map(|_| topics[topic][zipf.sample(&mut rng)]));
    }
    Corpus::new(cfg.vocab_size, tokens)
}

/// Samples every sequence autoregressively from the dense model with the
/// next-token distribution restricted to the sequence's topic.
///
/// Sequences are generated `parallel` at a time; each step reruns the
/// prefix, so the cost is quadratic in `seq_len`.
pub fn sample_from_model(model: &Model, cfg: &CorpusConfig, parallel: usize) -> Result<Corpus> {
    cfg.validate()?;
    if cfg.vocab_size != model.config().vocab_size {
        return Err(Error::Config(format!(
            "corpus vocab {} differs from model vocab {}",
            cfg.vocab_size,
            model.config().vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topics = cfg.topics(&mut rng);
    let schedule = cfg.topic_schedule(&mut rng);
    let mut tokens = Vec::with_capacity(cfg.sequences * cfg.seq_len);
    for group in schedule.chunks(parallel.max(1)) {
        let g = group.len();
        let mut seqs: Vec<Vec<u32>> = group
            .iter()
            .map(|&t| vec![*topics[t].choose(&mut rng).expect("non-empty topic")])
            .collect();
        for t in 1..cfg.seq_len {
            let ids = seqs.iter().flatten().copied().collect();
            let batch = TokenBatch::new(g, t, ids)?;
            let logits = model_forward(model, &batch, None, false)?.logits;
            for (i, seq) in seqs.iter_mut().enumerate() {
                let row = logits.row(i, t - 1);
                let allowed = &topics[group[i]];
                let max = allowed.iter().map(|&a| row[a as usize]).fold(f32::NEG_INFINITY, f32::max);
                let weights = allowed.iter().map(|&a| ((row[a as usize] - max) as f64).exp());
                let pick = WeightedIndex::new(weights)
                    .map_err(|e| Error::Value(format!("sampling weights: {e}")))?;
                seq.push(allowed[pick.sample(&mut rng)]);
            }
        }
        tokens.extend(seqs.into_iter().flatten());
    }
    Corpus::new(cfg.vocab_size, tokens)
}
