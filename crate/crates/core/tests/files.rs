use pp_core::corpus::{generate_topic_corpus, Corpus, CorpusConfig};
use pp_core::engine::{calibrated_history, read_records, write_records, Engine, EngineConfig, RunMode};
use pp_core::history::{load_history, save_history};
use pp_core::metric::PruneRatioPlan;
use pp_core::model::{generate_synthetic_model, load_model, save_model, ModelConfig};
use pp_core::Error;

fn small() -> ModelConfig {
    ModelConfig { num_layers: 2, d_model: 16, num_heads: 2, mlp_hidden: 32, vocab_size: 64, seed: 11, ..ModelConfig::default() }
}

fn corpus(seed: u64, sequences: usize) -> Corpus {
    let cfg = CorpusConfig { vocab_size: 64, sequences, seq_len: 8, seed, num_topics: 4, segment_sequences: 2 };
    generate_topic_corpus(&cfg).unwrap()
}

fn pp_config() -> EngineConfig {
    EngineConfig {
        ratio_plan: PruneRatioPlan { skip_first_layers: 1, ..PruneRatioPlan::default() },
        ..EngineConfig::default()
    }
}

#[test]
fn saved_artifacts_drive_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let model = generate_synthetic_model(&small()).unwrap();
    let calib = corpus(1, 8);
    let data = corpus(2, 24);

    save_model(&model, dir.path().join("m.ppw")).unwrap();
    data.save(dir.path().join("c.ppt")).unwrap();
    let states = calibrated_history(&model, &calib.batch(0, 8, 8).unwrap(), 0.99).unwrap();
    save_history(&states, dir.path().join("h.pph")).unwrap();

    let mut live = Engine::new(model, pp_config()).unwrap();
    live.calibrate(&calib.batch(0, 8, 8).unwrap()).unwrap();
    let a = live.run_corpus(&data, 4, 8, None, None).unwrap();

    let loaded = load_model(dir.path().join("m.ppw")).unwrap();
    let mut cold = Engine::new(loaded, pp_config()).unwrap();
    cold.set_history(load_history(dir.path().join("h.pph"), 0.99).unwrap()).unwrap();
    let b = cold.run_corpus(&Corpus::load(dir.path().join("c.ppt")).unwrap(), 4, 8, None, None).unwrap();

    assert_eq!(a.records, b.records);
    assert_eq!(a.aggregate, b.aggregate);
}

#[test]
fn report_lines_round_trip() {
    let model = generate_synthetic_model(&small()).unwrap();
    let mut engine = Engine::new(model, EngineConfig { mode: RunMode::FullBatchProbing, ..pp_config() }).unwrap();
    let report = engine.run_corpus(&corpus(3, 16), 4, 8, Some(2), None).unwrap();
    let mut buf = Vec::new();
    write_records(&report.records, &mut buf).unwrap();
    assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 2 * 4);
    assert_eq!(read_records(buf.as_slice()).unwrap(), report.records);
    assert!(matches!(read_records(&b"{\"batch\": 0}\n"[..]), Err(Error::Format(_))));
}

#[test]
fn truncated_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = generate_synthetic_model(&small()).unwrap();
    let bytes = model.to_bytes();
    std::fs::write(dir.path().join("cut.ppw"), &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_model(dir.path().join("cut.ppw")), Err(Error::Format(_))));
    std::fs::write(dir.path().join("bad.ppt"), b"PPW1").unwrap();
    assert!(matches!(Corpus::load(dir.path().join("bad.ppt")), Err(Error::Format(_))));
    assert!(matches!(load_history(dir.path().join("absent.pph"), 0.99), Err(Error::Io(_))));
}
