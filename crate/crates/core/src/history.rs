//! Historical activation statistics.
//!
//! For every block the history holds `V`, an `S_cal x C_in` matrix of
//! squared intermediate-state norms with the batch axis summed out. It is
//! seeded from a calibration batch, fused with probe statistics before each
//! pruning decision, and refreshed by an exponential moving average over
//! the retained channels after each full pass. Rows are indexed by absolute
//! token position.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::format::{Reader, Writer};
use crate::model::{collect_intermediates, ChannelMask, Model, TokenBatch};
use crate::tensor::{Matrix, Tensor3};

pub const HISTORY_MAGIC: &[u8; 4] = b"PPH1";
pub const DEFAULT_LAMBDA: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalState {
    v: Matrix,
    lambda: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Config(format!("EMA lambda {lambda} outside [0, 1)")));
    }
    Ok(())
}

impl HistoricalState {
    pub fn new(v: Matrix, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if v.data().iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Value("history entries must be finite and >= 0".into()));
        }
        Ok(Self { v, lambda })
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        check_lambda(lambda)?;
        self.lambda = lambda;
        Ok(())
    }

    /// Number of token positions covered.
    pub fn seq_len(&self) -> usize {
        self.v.rows()
    }

    pub fn channels(&self) -> usize {
        self.v.cols()
    }

    /// Multiplies every entry by `factor` (e.g. to express sums per sample).
    pub fn scale(&mut self, factor: f32) {
        self.v.data_mut().iter_mut().for_each(|x| *x *= factor);
    }

    /// The first `rows` rows.
    pub fn leading_rows(&self, rows: usize) -> Result<Matrix> {
        if rows > self.seq_len() {
            return Err(Error::Config(format!(
                "history covers {} positions, batch needs {rows}",
                self.seq_len()
            )));
        }
        let idx: Vec<usize> = (0..rows).collect();
        self.v.select_rows(&idx)
    }
}

/// How probe statistics `p` and historical statistics `v` are combined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum FusionMode {
    /// `p^2/(p+v) + v^2/(p+v)`.
    #[default]
    ImportanceScaled,
    /// `alpha p + (1 - alpha) v`.
    FixedRatio { alpha: f32 },
    ProbeOnly,
    HistoryOnly,
}

impl FusionMode {
    pub fn validate(&self) -> Result<()> {
        if let FusionMode::FixedRatio { alpha } = self {
            if !(0.0..=1.0).contains(alpha) {
                return Err(Error::Config(format!("fusion alpha {alpha} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    /// `importance_scaled`, `probe_only`, `history_only` or `fixed_ratio:<alpha>`.
    fn from_str(s: &str) -> Result<Self> {
        let mode = match s {
            "importance_scaled" => FusionMode::ImportanceScaled,
            "probe_only" => FusionMode::ProbeOnly,
            "history_only" => FusionMode::HistoryOnly,
            other => match other.strip_prefix("fixed_ratio:") {
                Some(a) => FusionMode::FixedRatio {
                    alpha: a.parse().map_err(|_| Error::Config(format!("bad fusion alpha {a:?}")))?,
                },
                None => return Err(Error::Config(format!("unknown fusion mode {s:?}"))),
            },
        };
        mode.validate()?;
        Ok(mode)
    }
}

/// `(S x C)` matrix of `sum_i x[i, j, k]^2`.
pub fn reduce_batch_sq(x_int: &Tensor3) -> Matrix {
    let (n, s, d) = x_int.shape();
    let mut acc = vec![0f64; s * d];
    for i in 0..n {
        for j in 0..s {
            let dst = &mut acc[j * d..(j + 1) * d];
            for (a, &v) in dst.iter_mut().zip(x_int.row(i, j)) {
                *a += (v as f64) * (v as f64);
            }
        }
    }
    Matrix::new(s, d, acc.into_iter().map(|v| v as f32).collect()).expect("sized by construction")
}

/// Seeds per-block history from the dense model on `calibration`.
/// `min_seq_len` is the longest inference sequence the history must cover.
pub fn init_history(
    model: &Model,
    calibration: &TokenBatch,
    lambda: f64,
    min_seq_len: usize,
) -> Result<Vec<HistoricalState>> {
    check_lambda(lambda)?;
    if calibration.s() < min_seq_len {
        return Err(Error::Config(format!(
            "calibration sequence length {} is shorter than inference length {min_seq_len}",
            calibration.s()
        )));
    }
    collect_intermediates(model, calibration)?
        .iter()
        .map(|x| HistoricalState::new(reduce_batch_sq(x), lambda))
        .collect()
}

fn fuse_value(p: f32, v: f32, mode: FusionMode) -> f32 {
    match mode {
        FusionMode::ImportanceScaled => {
            let (p64, v64) = (p as f64, v as f64);
            let denom = p64 + v64;
            if denom == 0.0 {
                return 0.0;
            }
            let out = ((p64 * p64 + v64 * v64) / denom) as f32;
            out.clamp(p.min(v), p.max(v))
        }
        FusionMode::FixedRatio { alpha } => {
            (alpha as f64 * p as f64 + (1.0 - alpha as f64) * v as f64) as f32
        }
        FusionMode::ProbeOnly => p,
        FusionMode::HistoryOnly => v,
    }
}

/// Combines probe statistics with the history rows at `seq_indices`
/// (row `r` of `probe_sq` pairs with history row `seq_indices[r]`).
pub fn fuse(
    probe_sq: &Matrix,
    hist: &HistoricalState,
    seq_indices: &[usize],
    mode: FusionMode,
) -> Result<Matrix> {
    mode.validate()?;
    if probe_sq.rows() != seq_indices.len() || probe_sq.cols() != hist.channels() {
        return Err(shape_err!(
            "fuse: probe stats {}x{} vs {} positions over {} channels",
            probe_sq.rows(),
            probe_sq.cols(),
            seq_indices.len(),
            hist.channels()
        ));
    }
    let hist_rows = hist.v.select_rows(seq_indices)?;
    let data = probe_sq
        .data()
        .iter()
        .zip(hist_rows.data())
        .map(|(&p, &v)| fuse_value(p, v, mode))
        .collect();
    Matrix::new(probe_sq.rows(), probe_sq.cols(), data)
}

/// Column sums: the per-channel surrogate of `||X^int[:, :, k]||^2`.
pub fn collapse_seq(fused: &Matrix) -> Vec<f32> {
    let mut acc = vec![0f64; fused.cols()];
    for r in 0..fused.rows() {
        for (a, &v) in acc.iter_mut().zip(fused.row(r)) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// EMA over the retained channels: `V[:S, C] = lambda V[:S, C] + (1 - lambda)
/// sum_i x^2`. `x_int` holds either only the retained channels (in mask
/// order) or all `C_in` channels.
pub fn ema_update(hist: &mut HistoricalState, x_int: &Tensor3, mask: &ChannelMask) -> Result<()> {
    ema_update_scaled(hist, x_int, mask, 1.0)
}

/// [`ema_update`] with the new batch statistics multiplied by `scale`
/// before mixing.
pub fn ema_update_scaled(
    hist: &mut HistoricalState,
    x_int: &Tensor3,
    mask: &ChannelMask,
    scale: f32,
) -> Result<()> {
    let channels = mask.channel_indices();
    if channels.last().is_some_and(|&c| c >= hist.channels()) {
        return Err(shape_err!("mask channels exceed history width {}", hist.channels()));
    }
    let compact = if x_int.d() == channels.len() {
        x_int.clone()
    } else if x_int.d() == hist.channels() {
        x_int.select_features(&channels)?
    } else {
        return Err(shape_err!(
            "EMA input width {} matches neither the mask ({}) nor the history ({})",
            x_int.d(),
            channels.len(),
            hist.channels()
        ));
    };
    if compact.s() > hist.seq_len() {
        return Err(Error::Config(format!(
            "batch sequence length {} exceeds history length {}",
            compact.s(),
            hist.seq_len()
        )));
    }
    let fresh = reduce_batch_sq(&compact);
    let lambda = hist.lambda;
    for j in 0..fresh.rows() {
        let src = fresh.row(j);
        let dst = hist.v.row_mut(j);
        for (&c, &f) in channels.iter().zip(src) {
            let mixed = lambda * dst[c] as f64 + (1.0 - lambda) * (f as f64 * scale as f64);
            dst[c] = mixed.max(0.0) as f32;
        }
    }
    Ok(())
}

/// Writes `PPH1` followed by `(u32 S, u32 C, f32 payload)` per block.
pub fn history_to_bytes(states: &[HistoricalState]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(HISTORY_MAGIC);
    for st in states {
        w.u32(st.seq_len() as u32);
        w.u32(st.channels() as u32);
        w.f32s(st.v.data());
    }
    w.finish()
}

pub fn history_from_bytes(bytes: &[u8], lambda: f64) -> Result<Vec<HistoricalState>> {
    check_lambda(lambda)?;
    let mut r = Reader::new(bytes, "history snapshot");
    r.magic(HISTORY_MAGIC)?;
    let mut out = Vec::new();
    while !r.is_empty() {
        let s = r.u32()? as usize;
        let c = r.u32()? as usize;
        let v = Matrix::new(s, c, r.f32s(s * c)?)?;
        out.push(
            HistoricalState::new(v, lambda)
                .map_err(|e| Error::Format(format!("history snapshot block {}: {e}", out.len())))?,
        );
    }
    r.finish()?;
    Ok(out)
}

pub fn save_history(states: &[HistoricalState], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, history_to_bytes(states))?;
    Ok(())
}

pub fn load_history(path: impl AsRef<Path>, lambda: f64) -> Result<Vec<HistoricalState>> {
    history_from_bytes(&std::fs::read(path)?, lambda)
}
