//! End-to-end checks of the `sicl` binary: artifact layout, determinism,
//! mode reductions, and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sicl_core::config::RunConfig;
use sicl_core::decoding::read_hypotheses;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sicl"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny_run_config() -> RunConfig {
    let mut run = RunConfig::desk();
    run.model.model_dim = 16;
    run.model.num_heads = 2;
    run.model.ff_dim = 24;
    run.model.enc_layers = 1;
    run.model.dec_layers = 1;
    run.model.max_doc_tokens = 128;
    run.model.max_enc_positions = 128;
    run.train.stage1_epochs = 1;
    run.train.stage2_epochs = 1;
    run.train.icft_epochs = 1;
    run.train.batch_docs = 4;
    run.data.num_speakers = 3;
    run.data.utts_per_speaker = 10;
    run.data.test_utts_per_speaker = 2;
    run.data.adapt_speakers = 2;
    run.data.adapt_utts_per_speaker = 6;
    run.data.adapt_context_utts = 3;
    run.data.bias_speakers = 2;
    run.data.bias_utts_per_speaker = 8;
    run.data.bias_eval_utts_per_speaker = 4;
    run
}

struct Setup {
    _dir: tempfile::TempDir,
    config: PathBuf,
    corpus: PathBuf,
    ckpt: PathBuf,
}

fn setup() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let config = dir.path().join("tiny.json");
        fs::write(&config, tiny_run_config().to_json_pretty()).expect("config written");
        let corpus = dir.path().join("corpus");
        let train_out = dir.path().join("train");
        run_ok(&["generate", "--out", corpus.to_str().unwrap(), "--config", config.to_str().unwrap()]);
        run_ok(&[
            "train",
            "--data",
            corpus.to_str().unwrap(),
            "--out",
            train_out.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ]);
        Setup { config, corpus, ckpt: train_out.join("model.ckpt"), _dir: dir }
    })
}

fn decode(s: &Setup, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "decode",
        "--checkpoint",
        s.ckpt.to_str().unwrap(),
        "--data",
        s.corpus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run_ok(&args);
}

#[test]
fn generate_same_seed_is_byte_identical() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("corpus");
    run_ok(&["generate", "--out", again.to_str().unwrap(), "--config", s.config.to_str().unwrap()]);
    for split in ["train", "test", "adapt", "bias_train", "bias_eval"] {
        let a = fs::read(s.corpus.join(split).join("manifest.jsonl")).unwrap();
        let b = fs::read(again.join(split).join("manifest.jsonl")).unwrap();
        assert_eq!(a, b, "{split} manifest differs");
    }
    let mut feature_files: Vec<_> = fs::read_dir(again.join("train/feats"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    feature_files.sort();
    assert!(!feature_files.is_empty());
    for name in feature_files {
        let a = fs::read(s.corpus.join("train/feats").join(&name)).unwrap();
        let b = fs::read(again.join("train/feats").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs");
    }
}

#[test]
fn train_same_seed_is_byte_identical() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train");
    run_ok(&[
        "train",
        "--data",
        s.corpus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--config",
        s.config.to_str().unwrap(),
    ]);
    assert_eq!(fs::read(&s.ckpt).unwrap(), fs::read(out.join("model.ckpt")).unwrap());
}

#[test]
fn config_is_echoed_into_output_directories() {
    let s = setup();
    let echoed = fs::read_to_string(s.ckpt.parent().unwrap().join("config.resolved")).unwrap();
    assert_eq!(RunConfig::from_json(&echoed).unwrap(), tiny_run_config());
}

#[test]
fn utterance_mode_equals_longform_on_single_utterance_documents() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("utt");
    let b = dir.path().join("lf");
    decode(s, &a, &["--mode", "utterance"]);
    decode(s, &b, &["--mode", "longform", "--doc-utts", "1"]);
    assert_eq!(
        fs::read(a.join("hypotheses.jsonl")).unwrap(),
        fs::read(b.join("hypotheses.jsonl")).unwrap()
    );
}

#[test]
fn adapt_with_zero_context_equals_utterance_decoding() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("adapt0");
    let b = dir.path().join("utt");
    decode(s, &a, &["--mode", "adapt", "--context-size", "0"]);
    decode(s, &b, &["--mode", "utterance", "--split", "adapt"]);
    let adapt = read_hypotheses(&a.join("hypotheses.jsonl")).unwrap();
    let plain = read_hypotheses(&b.join("hypotheses.jsonl")).unwrap();
    assert!(!adapt.is_empty());
    assert!(plain.len() > adapt.len(), "utterance mode also decodes the context pool");
    for rec in &adapt {
        let twin = plain.iter().find(|p| p.id == rec.id).expect("shared utterance id");
        assert_eq!(rec.hypothesis, twin.hypothesis);
        assert_eq!(rec.att_score, twin.att_score);
        assert_eq!(rec.joint_score, twin.joint_score);
        assert!(rec.context_ids.is_empty());
    }
}

#[test]
fn decode_is_deterministic_and_reports_metrics() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    decode(s, &a, &["--mode", "bias"]);
    decode(s, &b, &["--mode", "bias"]);
    assert_eq!(
        fs::read(a.join("hypotheses.jsonl")).unwrap(),
        fs::read(b.join("hypotheses.jsonl")).unwrap()
    );
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["wer"].is_number());
    assert!(metrics["cer"].is_number());
    assert!(metrics["entity_recall"].is_number());
}

#[test]
fn icft_command_produces_a_usable_checkpoint() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let tuned = dir.path().join("icft");
    run_ok(&[
        "icft",
        "--checkpoint",
        s.ckpt.to_str().unwrap(),
        "--data",
        s.corpus.to_str().unwrap(),
        "--out",
        tuned.to_str().unwrap(),
    ]);
    let out = dir.path().join("dec");
    run_ok(&[
        "decode",
        "--checkpoint",
        tuned.join("model.ckpt").to_str().unwrap(),
        "--data",
        s.corpus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--mode",
        "adapt",
    ]);
    assert!(out.join("metrics.json").exists());
}

#[test]
fn bench_writes_the_pinned_csv_shape() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    run_ok(&[
        "bench",
        "--out",
        csv.to_str().unwrap(),
        "--n-utts",
        "1,2",
        "--frames",
        "16",
        "--tokens",
        "6",
        "--repeats",
        "3",
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,n_utterances,wall_ms,score_elems,bytes");
    assert_eq!(lines.len(), 1 + 2 * 2, "one row per variant per size");
    assert!(dir.path().join("config.resolved").exists());
}

#[test]
fn verify_suites_pass_through_the_binary() {
    let out = run_ok(&["verify", "--suite", "equiv"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("PASS equiv.block_vs_masked_cross_attention"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn exit_codes_distinguish_usage_from_io() {
    let usage = bin().args(["decode", "--mode", "utterance"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(1), "missing required flags is a usage error");

    let unknown = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));

    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let io = bin()
        .args([
            "train",
            "--data",
            dir.path().join("missing").to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
            "--config",
            s.config.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(io.status.code(), Some(3), "missing corpus directory is an I/O error");

    let help = bin().args(["--help"]).output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}
