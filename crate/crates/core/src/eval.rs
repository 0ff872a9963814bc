//! Post-run analysis: mask overlap between runs, performance-runtime
//! ratio and FLOPs summaries, with CSV writers for each.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::BlockRecord;
use crate::error::{Error, Result};
use crate::model::BlockKind;

/// `|a ∩ b| / |a ∪ b|`; two empty sets count as identical.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct StreamEntry {
    kind: BlockKind,
    units: usize,
    retained: Vec<usize>,
}

impl StreamEntry {
    fn pruned(&self) -> Vec<usize> {
        let keep: BTreeSet<_> = self.retained.iter().copied().collect();
        (0..self.units).filter(|u| !keep.contains(u)).collect()
    }
}

/// Retained sets keyed by `(batch, block)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskStream {
    entries: BTreeMap<(usize, usize), StreamEntry>,
}

impl MaskStream {
    pub fn from_records(records: &[BlockRecord]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for r in records {
            if r.retained_indices.is_empty() {
                return Err(Error::Value(format!("batch {} block {}: empty mask", r.batch, r.block)));
            }
            let e = StreamEntry { kind: r.kind, units: r.units, retained: r.retained_indices.clone() };
            if entries.insert((r.batch, r.block), e).is_some() {
                return Err(Error::Value(format!("duplicate record for batch {} block {}", r.batch, r.block)));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn retained(&self, batch: usize, block: usize) -> Option<&[usize]> {
        self.entries.get(&(batch, block)).map(|e| e.retained.as_slice())
    }

    /// The first `batches` batches only.
    pub fn truncated(&self, batches: usize) -> Self {
        Self { entries: self.entries.iter().filter(|((b, _), _)| *b < batches).map(|(k, v)| (*k, v.clone())).collect() }
    }
}

/// Per-block mean overlap across batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockJaccard {
    pub block: usize,
    pub kind: BlockKind,
    /// Over pruned units.
    pub pruned: f64,
    /// Over retained units.
    pub retained: f64,
}

/// Compares two streams over an identical `(batch, block)` grid.
pub fn jaccard_profile(a: &MaskStream, b: &MaskStream) -> Result<Vec<BlockJaccard>> {
    if a.entries.len() != b.entries.len() || a.entries.keys().zip(b.entries.keys()).any(|(x, y)| x != y) {
        return Err(Error::Config("mask streams cover different (batch, block) grids".into()));
    }
    let mut per_block: BTreeMap<usize, (BlockKind, f64, f64, usize)> = BTreeMap::new();
    for (key, ea) in &a.entries {
        let eb = &b.entries[key];
        if ea.kind != eb.kind || ea.units != eb.units {
            return Err(Error::Config(format!("block {} differs in kind or width between streams", key.1)));
        }
        let slot = per_block.entry(key.1).or_insert((ea.kind, 0.0, 0.0, 0));
        slot.1 += jaccard(&ea.pruned(), &eb.pruned());
        slot.2 += jaccard(&ea.retained, &eb.retained);
        slot.3 += 1;
    }
    Ok(per_block
        .into_iter()
        .map(|(block, (kind, p, r, n))| BlockJaccard {
            block,
            kind,
            pruned: p / n as f64,
            retained: r / n as f64,
        })
        .collect())
}

/// Mean of `field` over the blocks whose masks can differ (at least one
/// stream prunes there).
pub fn mean_over_pruned_blocks(profile: &[BlockJaccard], pruned_blocks: &BTreeSet<usize>) -> f64 {
    let vals: Vec<f64> = profile.iter().filter(|j| pruned_blocks.contains(&j.block)).map(|j| j.pruned).collect();
    if vals.is_empty() {
        return 1.0;
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Task performance and wall-clock runtime, dense versus pruned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfRuntime {
    pub perf_dense: f64,
    pub perf_pruned: f64,
    pub runtime_dense: f64,
    pub runtime_pruned: f64,
}

/// `|perf_dense - perf_pruned| / (runtime_dense - runtime_pruned)`.
pub fn prr(p: &PerfRuntime) -> Result<f64> {
    let dt = p.runtime_dense - p.runtime_pruned;
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::Value(format!(
            "runtime must drop to define PRR (dense {}, pruned {})",
            p.runtime_dense, p.runtime_pruned
        )));
    }
    Ok((p.perf_dense - p.perf_pruned).abs() / dt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub label: String,
    pub dense_flops: u64,
    pub probe_flops: u64,
    pub total_flops: u64,
    /// `probe / dense`.
    pub probe_share: f64,
}

pub fn flops_summary(label: &str, records: &[BlockRecord]) -> FlopsRow {
    let dense: u64 = records.iter().map(|r| r.dense_block_flops).sum();
    let probe: u64 = records.iter().map(|r| r.probe_flops).sum();
    let total = records.iter().map(|r| r.block_flops).sum::<u64>() + probe;
    FlopsRow {
        label: label.to_string(),
        dense_flops: dense,
        probe_flops: probe,
        total_flops: total,
        probe_share: if dense == 0 { 0.0 } else { probe as f64 / dense as f64 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct JaccardCsvRow {
    block: usize,
    kind: BlockKind,
    j_pp_oracle: f64,
    j_fixed_oracle: Option<f64>,
    jr_pp_oracle: f64,
    jr_fixed_oracle: Option<f64>,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Value(format!("csv: {other:?}")),
    }
}

/// `block,kind,j_pp_oracle,j_fixed_oracle` plus the retained-set
/// counterparts; the fixed columns are empty when no fixed run is given.
pub fn write_jaccard_csv(pp: &[BlockJaccard], fixed: Option<&[BlockJaccard]>, out: impl Write) -> Result<()> {
    if let Some(f) = fixed {
        if f.len() != pp.len() || f.iter().zip(pp).any(|(a, b)| a.block != b.block) {
            return Err(Error::Config("jaccard profiles cover different blocks".into()));
        }
    }
    let mut w = csv::Writer::from_writer(out);
    for (i, j) in pp.iter().enumerate() {
        let f = fixed.map(|f| &f[i]);
        w.serialize(JaccardCsvRow {
            block: j.block,
            kind: j.kind,
            j_pp_oracle: j.pruned,
            j_fixed_oracle: f.map(|f| f.pruned),
            jr_pp_oracle: j.retained,
            jr_fixed_oracle: f.map(|f| f.retained),
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct PrrCsvRow<'a> {
    label: &'a str,
    perf_dense: f64,
    perf_pruned: f64,
    runtime_dense: f64,
    runtime_pruned: f64,
    prr: f64,
}

pub fn write_prr_csv(rows: &[(String, PerfRuntime)], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (label, p) in rows {
        w.serialize(PrrCsvRow {
            label,
            perf_dense: p.perf_dense,
            perf_pruned: p.perf_pruned,
            runtime_dense: p.runtime_dense,
            runtime_pruned: p.runtime_pruned,
            prr: prr(p)?,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_flops_csv(rows: &[FlopsRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
