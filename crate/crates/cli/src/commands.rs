use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use pp_core::corpus::{generate_topic_corpus, sample_from_model, Corpus};
use pp_core::engine::{calibrated_history, read_records, write_records, BlockRecord, Engine, RunMode};
use pp_core::eval::{
    flops_summary, jaccard_profile, prr, write_flops_csv, write_jaccard_csv, write_prr_csv, FlopsRow, MaskStream,
    PerfRuntime,
};
use pp_core::flops::{complexity_dense, complexity_probe, estimate, llama2_7b_shapes};
use pp_core::history::{load_history, save_history};
use pp_core::model::{generate_synthetic_model, Model, ModelConfig};
use pp_core::probe::{ProbeConfig, SelectionSource};
use pp_core::Error;
use serde::Deserialize;

use crate::config::{resolve_seed, CliConfig, CorpusSource};
use crate::{
    AnalyzeArgs, AnalyzeKind, CalibrateArgs, EngineFlags, FlopsArgs, GenCorpusArgs, GenModelArgs, ModelShape, RunArgs,
    Selection,
};

/// Prints a line to stdout; a closed pipe is not an error.
fn emit(text: impl std::fmt::Display) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other.map_err(Error::Io)?),
    }
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| config_err(format!("missing --{name} (or paths.{name} in the config)")))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("reading model {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn apply_shape(cfg: &mut CliConfig, shape: &ModelShape) {
    let m = &mut cfg.model;
    let pairs = [
        (&mut m.num_layers, shape.layers),
        (&mut m.d_model, shape.d_model),
        (&mut m.num_heads, shape.heads),
        (&mut m.mlp_hidden, shape.mlp_hidden),
        (&mut m.vocab_size, shape.vocab),
    ];
    for (dst, src) in pairs {
        if let Some(v) = src {
            *dst = v;
        }
    }
}

pub fn gen_model(a: GenModelArgs) -> Result<()> {
    let mut cfg = CliConfig::load_or_default(a.config.as_deref())?;
    apply_shape(&mut cfg, &a.shape);
    if let Some(f) = a.outlier_fraction {
        cfg.model.outlier_fraction = f;
    }
    if let Some(g) = a.outlier_gain {
        cfg.model.outlier_gain = g;
    }
    let seed = resolve_seed(a.seed, cfg.seed)?;
    let model = generate_synthetic_model(&cfg.model.to_config(seed))?;
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    emit(serde_json::json!({ "out": a.out, "model": model.config(), "blocks": model.num_blocks() }))?;
    Ok(())
}

pub fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut cfg = CliConfig::load_or_default(a.config.as_deref())?;
    let c = &mut cfg.corpus;
    if let Some(s) = a.source {
        c.source = s;
    }
    for (dst, src) in [
        (&mut c.sequences, a.sequences),
        (&mut c.seq_len, a.seq_len),
        (&mut c.num_topics, a.topics),
        (&mut c.segment_sequences, a.segment),
    ] {
        if let Some(v) = src {
            *dst = v;
        }
    }
    let seed = resolve_seed(a.seed, cfg.seed)?;
    let model_path = a.model.or(cfg.paths.model.clone());
    let model = model_path.as_deref().map(load_model).transpose()?;
    let vocab = a.vocab.or(model.as_ref().map(|m| m.config().vocab_size)).unwrap_or(cfg.model.vocab_size);
    let corpus_cfg = cfg.corpus.to_config(vocab, seed);
    let corpus = match cfg.corpus.source {
        CorpusSource::Topic => generate_topic_corpus(&corpus_cfg)?,
        CorpusSource::Model => {
            let model = model.ok_or_else(|| config_err("--source model needs --model"))?;
            sample_from_model(&model, &corpus_cfg, 16)?
        }
    };
    corpus.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    emit(serde_json::json!({ "out": a.out, "tokens": corpus.len(), "vocab_size": vocab, "seed": seed }))?;
    Ok(())
}

fn calibration_batch(corpus: &Corpus, n: usize, s: usize) -> Result<pp_core::model::TokenBatch> {
    if corpus.num_batches(n, s) == 0 {
        return Err(config_err(format!(
            "calibration corpus has {} tokens, need {n} x {s} = {}",
            corpus.len(),
            n * s
        )));
    }
    Ok(corpus.batch(0, n, s)?)
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let cfg = CliConfig::load_or_default(a.config.as_deref())?;
    let model = load_model(&required(a.model, &cfg.paths.model, "model")?)?;
    let corpus = load_corpus(&required(a.corpus, &cfg.paths.calibration, "corpus")?)?;
    let out = required(a.out_history, &cfg.paths.history, "out-history")?;
    let n = a.batch_size.unwrap_or(cfg.run.calibration_batch_size);
    let s = a.seq_len.unwrap_or(cfg.run.seq_len);
    let batch = calibration_batch(&corpus, n, s)?;
    let history = calibrated_history(&model, &batch, cfg.engine.lambda)?;
    save_history(&history, &out).with_context(|| format!("writing {}", out.display()))?;
    emit(serde_json::json!({ "out": out, "blocks": history.len(), "batch_size": n, "seq_len": s }))?;
    Ok(())
}

fn apply_engine_flags(cfg: &mut CliConfig, f: &EngineFlags) {
    let e = &mut cfg.engine;
    if let Some(m) = f.mode {
        e.mode = m;
    }
    if let Some(r) = f.ratio {
        e.ratio_plan.target_ratio = r;
    }
    if let Some(s) = f.skip_layers {
        e.ratio_plan.skip_first_layers = s;
    }
    if f.attention_ratio.is_some() {
        e.ratio_plan.attention_ratio = f.attention_ratio;
    }
    if f.mlp_ratio.is_some() {
        e.ratio_plan.mlp_ratio = f.mlp_ratio;
    }
    if let Some(b) = f.probe_batch {
        e.probe.batch_frac = b;
    }
    if let Some(s) = f.probe_seq {
        e.probe.seq_frac = s;
    }
    if let Some(sel) = f.selection {
        e.probe.selection_source = match sel {
            Selection::Residual => SelectionSource::Residual,
            Selection::PostLayernorm => SelectionSource::PostLayernorm,
        };
    }
    if let Some(o) = f.parallel_offset {
        e.probe.parallel_offset = o;
    }
    if let Some(fu) = f.fusion {
        e.fusion = fu;
    }
    if let Some(m) = f.metric {
        e.metric = m;
    }
    if let Some(l) = f.lambda {
        e.lambda = l;
    }
    if f.record_traces {
        e.record_traces = true;
    }
}

fn read_report(path: &Path) -> Result<Vec<BlockRecord>> {
    let file = File::open(path).with_context(|| format!("opening report {}", path.display()))?;
    read_records(BufReader::new(file)).with_context(|| format!("parsing report {}", path.display()))
}

pub fn run(a: RunArgs) -> Result<()> {
    let mut cfg = CliConfig::load_or_default(a.config.as_deref())?;
    apply_engine_flags(&mut cfg, &a.engine);
    if let Some(b) = a.batch_size {
        cfg.run.batch_size = b;
    }
    if let Some(s) = a.seq_len {
        cfg.run.seq_len = s;
    }
    if a.max_batches.is_some() {
        cfg.run.max_batches = a.max_batches;
    }
    if let Some(c) = a.calibration_batch_size {
        cfg.run.calibration_batch_size = c;
    }
    let model = Arc::new(load_model(&required(a.model, &cfg.paths.model, "model")?)?);
    let corpus = load_corpus(&required(a.corpus, &cfg.paths.corpus, "corpus")?)?;
    let report_path = required(a.report, &cfg.paths.report, "report")?;
    let mut engine = Engine::new(Arc::clone(&model), cfg.engine.clone())?;

    let calibration = a.calibration.or(cfg.paths.calibration.clone());
    let history = a.history.or(cfg.paths.history.clone());
    match (calibration, history) {
        (Some(_), Some(_)) => return Err(config_err("give either --calibration or --history, not both")),
        (Some(path), None) => {
            let corpus = load_corpus(&path)?;
            engine.calibrate(&calibration_batch(&corpus, cfg.run.calibration_batch_size, cfg.run.seq_len)?)?;
        }
        (None, Some(path)) => {
            let states = load_history(&path, cfg.engine.lambda)
                .with_context(|| format!("reading history {}", path.display()))?;
            engine.set_history(states)?;
        }
        (None, None) if matches!(cfg.engine.mode, RunMode::Pp | RunMode::PpParallel | RunMode::Fixed) => {
            return Err(config_err(format!("mode {} needs --calibration or --history", cfg.engine.mode)));
        }
        (None, None) => {}
    }

    let reference = match &a.reference {
        Some(p) => Some(MaskStream::from_records(&read_report(p)?)?),
        None => None,
    };
    let report = engine.run_corpus(
        &corpus,
        cfg.run.batch_size,
        cfg.run.seq_len,
        cfg.run.max_batches,
        reference.as_ref(),
    )?;

    let mut out = BufWriter::new(
        File::create(&report_path).with_context(|| format!("creating {}", report_path.display()))?,
    );
    write_records(&report.records, &mut out)?;
    out.flush()?;
    let aggregate = serde_json::to_string_pretty(&report.aggregate)?;
    if let Some(p) = &a.aggregate {
        std::fs::write(p, format!("{aggregate}\n")).with_context(|| format!("writing {}", p.display()))?;
    }
    emit(&aggregate)?;
    Ok(())
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

#[derive(Deserialize)]
struct PrrEntry {
    #[serde(default)]
    label: Option<String>,
    #[serde(flatten)]
    values: PerfRuntime,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PrrFile {
    One(PrrEntry),
    Many(Vec<PrrEntry>),
}

fn label_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    match a.kind {
        AnalyzeKind::Jaccard => {
            if !(2..=3).contains(&a.reports.len()) {
                return Err(config_err("jaccard takes --reports ORACLE PP [FIXED]"));
            }
            let streams = a
                .reports
                .iter()
                .map(|p| Ok(MaskStream::from_records(&read_report(p)?)?))
                .collect::<Result<Vec<_>>>()?;
            let pp = jaccard_profile(&streams[1], &streams[0])?;
            let fixed = streams.get(2).map(|f| jaccard_profile(f, &streams[0])).transpose()?;
            let mut out = output(&a.out)?;
            write_jaccard_csv(&pp, fixed.as_deref(), &mut out)?;
            out.flush()?;
        }
        AnalyzeKind::Prr => {
            let mut rows = Vec::new();
            for p in &a.reports {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let parsed: PrrFile = serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
                let entries = match parsed {
                    PrrFile::One(e) => vec![e],
                    PrrFile::Many(v) => v,
                };
                rows.extend(entries.into_iter().map(|e| (e.label.unwrap_or_else(|| label_of(p)), e.values)));
            }
            match (a.perf_dense, a.perf_pruned, a.runtime_dense, a.runtime_pruned) {
                (Some(perf_dense), Some(perf_pruned), Some(runtime_dense), Some(runtime_pruned)) => {
                    let values = PerfRuntime { perf_dense, perf_pruned, runtime_dense, runtime_pruned };
                    rows.push((a.label.clone(), values));
                }
                (None, None, None, None) => {}
                _ => return Err(config_err("give all four of --perf-dense --perf-pruned --runtime-dense --runtime-pruned")),
            }
            if rows.is_empty() {
                return Err(config_err("prr needs --reports files or the four value flags"));
            }
            for (_, v) in &rows {
                prr(v).map_err(|e| Error::Config(e.to_string()))?;
            }
            let mut out = output(&a.out)?;
            write_prr_csv(&rows, &mut out)?;
            out.flush()?;
        }
        AnalyzeKind::Flops => {
            if a.reports.is_empty() {
                return Err(config_err("flops needs at least one --reports file"));
            }
            let rows = a
                .reports
                .iter()
                .map(|p| Ok(flops_summary(&label_of(p), &read_report(p)?)))
                .collect::<Result<Vec<FlopsRow>>>()?;
            let mut out = output(&a.out)?;
            write_flops_csv(&rows, &mut out)?;
            out.flush()?;
        }
    }
    Ok(())
}

pub fn flops(a: FlopsArgs) -> Result<()> {
    let model_cfg = if a.llama2_7b {
        llama2_7b_shapes()
    } else {
        let mut cfg = CliConfig::load_or_default(a.config.as_deref())?;
        apply_shape(&mut cfg, &a.shape);
        cfg.model.to_config(0)
    };
    model_cfg.validate()?;
    let probe = ProbeConfig {
        batch_frac: a.probe_batch.unwrap_or(ProbeConfig::default().batch_frac),
        seq_frac: a.probe_seq.unwrap_or(ProbeConfig::default().seq_frac),
        ..ProbeConfig::default()
    };
    let est = estimate(&probe, &model_cfg, a.batch, a.seq)?;
    let ModelConfig { d_model, .. } = model_cfg;
    let (n, s, d) = (a.batch as f64, a.seq as f64, d_model as f64);
    let simple_dense = complexity_dense(n, s, d, d);
    let simple_probe = complexity_probe(probe.batch_frac, probe.seq_frac, n, s, d, d);
    let row = FlopsRow {
        label: "probe".into(),
        dense_flops: est.dense,
        probe_flops: est.probe,
        total_flops: est.dense + est.probe,
        probe_share: est.share,
    };
    if let Some(p) = &a.out {
        let mut out = output(&Some(p.clone()))?;
        write_flops_csv(&[row], &mut out)?;
        out.flush()?;
    }
    emit(serde_json::to_string_pretty(&serde_json::json!({
            "model": model_cfg,
            "batch": a.batch,
            "seq": a.seq,
            "probe": { "batch_frac": probe.batch_frac, "seq_frac": probe.seq_frac },
            "dense_macs": est.dense,
            "probe_macs": est.probe,
            "probe_share": est.share,
            "single_shape_share": simple_probe / simple_dense,
        }))?)?;
    Ok(())
}
