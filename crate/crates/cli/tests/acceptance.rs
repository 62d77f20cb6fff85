//! End-to-end gates for the desk-scale system, one test per shipped
//! guarantee: gradient correctness of every layer, the CTC and
//! block-attention oracles, utterance-level reduction of the document
//! decoder, trainability of the desk preset on its synthetic corpus, the
//! in-context effects that corpus is engineered to expose, the cost profile
//! of utterance-aligned cross-attention, and cache-exact long-form decoding.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

use sicl_core::checkpoint::load_checkpoint;
use sicl_core::config::{ModelConfig, RunConfig};
use sicl_core::data::{assemble_document, generate_corpus, DocumentMode};
use sicl_core::decoding::{
    decode_longform, decode_longform_reference, decode_utterance, decode_with_context, ContextSet,
    DecodeModel,
};
use sicl_core::mat::Mat;
use sicl_core::model::decoder::{decoder_forward_full, CrossMode, DocumentLayout, SelfAttnScope};
use sicl_core::model::encoder::{encode_document_infer, encoder_tape};
use sicl_core::model::weights::weights_from_ids;
use sicl_core::model::Model;
use sicl_core::objectives::{attention_ce_loss, ctc_loss_tape, hybrid_loss};
use sicl_core::train::teacher_forced_accuracy;
use sicl_core::vocab;
use sicl_tensor::{grad_check_coords, CheckInput};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sicl")
}

fn run_ok(args: &[&str]) {
    let out = Command::new(bin()).args(args).output().expect("spawn sicl");
    assert!(
        out.status.success(),
        "sicl {:?} failed:\n{}\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn metrics(dir: &Path) -> Value {
    let raw = std::fs::read_to_string(dir.join("metrics.json")).expect("metrics.json");
    serde_json::from_str(&raw).expect("valid metrics")
}

fn metric(dir: &Path, key: &str) -> f64 {
    metrics(dir)[key].as_f64().unwrap_or_else(|| panic!("metric {key} missing in {dir:?}"))
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// One shared desk-scale pipeline: corpus, two-stage training, fine-tuning,
/// and every decode the gates below read. Building it once keeps the whole
/// suite inside the training-time budget it asserts.
struct Artifacts {
    _dir: TempDir,
    root: PathBuf,
    train_secs: f64,
}

impl Artifacts {
    fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    fn stage2_ckpt(&self) -> PathBuf {
        self.root.join("train/model.ckpt")
    }
    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn artifacts() -> &'static Artifacts {
    static CELL: OnceLock<Artifacts> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus");
        let corpus = corpus.to_str().unwrap();
        run_ok(&["generate", "--out", corpus, "--preset", "desk"]);

        let started = Instant::now();
        run_ok(&["train", "--data", corpus, "--out", root.join("train").to_str().unwrap(), "--preset", "desk"]);
        let train_secs = started.elapsed().as_secs_f64();

        let stage2 = root.join("train/model.ckpt");
        let stage2 = stage2.to_str().unwrap();
        run_ok(&["icft", "--checkpoint", stage2, "--data", corpus, "--out", root.join("icft").to_str().unwrap()]);
        let icft = root.join("icft/model.ckpt");
        let icft = icft.to_str().unwrap();

        let decode = |ckpt: &str, out: &str, mode: &str, ctx: Option<usize>| {
            let out_dir = root.join(out);
            let mut args = vec![
                "decode",
                "--checkpoint",
                ckpt,
                "--data",
                corpus,
                "--out",
                out_dir.to_str().unwrap(),
                "--mode",
                mode,
            ];
            let ctx_str;
            if let Some(k) = ctx {
                ctx_str = k.to_string();
                args.push("--context-size");
                args.push(&ctx_str);
            }
            run_ok(&args);
        };

        decode(stage2, "dec-test-pre", "utterance", None);
        decode(icft, "dec-test-post", "utterance", None);
        decode(stage2, "dec-adapt3", "adapt", Some(3));
        decode(stage2, "dec-adapt0", "adapt", Some(0));
        decode(stage2, "dec-bias3-pre", "bias", Some(3));
        decode(icft, "dec-bias3-post", "bias", Some(3));
        decode(icft, "dec-bias0-post", "bias", Some(0));

        Artifacts { _dir: dir, root, train_secs }
    })
}

/// Every parameter tensor of the desk model feeds one hybrid document loss;
/// two sampled coordinates per tensor must match central differences. The
/// coordinate list covers each tensor explicitly, so each layer kind
/// (subsampling convolution, encoder self-attention and convolution
/// modules, gated and plain feed-forwards, layer norms, the embedding,
/// document self-attention, utterance cross-attention, and both output
/// heads) is checked, inside the same composition used for training.
#[test]
fn gradients_match_finite_differences_for_every_layer_of_the_desk_model() {
    let started = Instant::now();
    let cfg = ModelConfig::desk();
    let model = Model::new(cfg.clone(), 5).expect("desk model");

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let feats: Vec<Mat> = (0..2).map(|_| rand_mat(&mut rng, 17, cfg.feature_dim)).collect();
    let tokens = vec![vocab::encode("ab"), vocab::encode("cd")];
    let layout = DocumentLayout::new(&tokens).expect("layout");

    let inputs: Vec<CheckInput> = model
        .params
        .iter()
        .map(|p| CheckInput::new(p.data.clone(), p.shape.clone()))
        .collect();
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, inp)| {
            let mid = inp.data.len() / 2;
            let mut c = vec![(i, 0)];
            if mid > 0 {
                c.push((i, mid));
            }
            c
        })
        .collect();

    let worst = grad_check_coords(
        |tape, ids| {
            let w = weights_from_ids(&cfg, ids);
            let enc_ids: Vec<_> = feats
                .iter()
                .map(|f| encoder_tape(tape, &w, &cfg, f, &model.pe_enc).unwrap())
                .collect();
            let mut ctc_terms = Vec::new();
            for (id, toks) in enc_ids.iter().zip(&tokens) {
                let proj = tape.matmul(*id, w.ctc_w);
                let proj = tape.add_row_broadcast(proj, w.ctc_b);
                let lp = tape.log_softmax(proj, 1);
                ctc_terms.push(
                    ctc_loss_tape(tape, lp, vocab::CTC_BLANK, toks).expect("realizable target"),
                );
            }
            let logits = sicl_core::model::decoder::decoder_tape(
                tape,
                &w,
                &cfg,
                &model.pe_dec,
                &layout.input,
                &layout.assignment,
                &enc_ids,
                SelfAttnScope::Document,
            )
            .unwrap();
            let att = attention_ce_loss(tape, logits, &layout.targets, None).unwrap();
            hybrid_loss(tape, &ctc_terms, att, 0.2)
        },
        &inputs,
        1e-5,
        &coords,
    );
    assert!(worst < 1e-4, "worst relative gradient error {worst}");
    assert!(started.elapsed().as_secs() < 120, "gradient gate exceeded two minutes");
}

/// The dynamic-programming CTC loss must agree with exhaustive path
/// enumeration on five hundred randomized small instances, including empty
/// and unrealizable targets. The enumeration oracle lives in the binary's
/// verify command; the gate drives it end to end.
#[test]
fn ctc_loss_matches_exhaustive_path_enumeration() {
    let started = Instant::now();
    run_ok(&["verify", "--suite", "ctc"]);
    assert!(started.elapsed().as_secs() < 60, "oracle comparison exceeded one minute");
}

/// Utterance-aligned cross-attention must match the masked full-matrix
/// reference for mixed-length documents, and batching a document by
/// utterance must round-trip bit-exactly.
#[test]
fn block_cross_attention_matches_the_masked_reference() {
    let started = Instant::now();
    run_ok(&["verify", "--suite", "equiv"]);
    assert!(started.elapsed().as_secs() < 60, "equivalence suite exceeded one minute");
}

/// With self-attention restricted to within-utterance blocks, a
/// three-utterance document must reproduce three independent forwards, and
/// long-form decoding of a single-utterance document must produce exactly
/// the plain decode.
#[test]
fn utterance_scope_reduces_documents_to_independent_forwards() {
    let cfg = ModelConfig::desk();
    let model = Model::new(cfg.clone(), 11).expect("desk model");
    let w = model.infer_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(12);

    let feats: Vec<Mat> = (0..3)
        .map(|_| {
            let frames = 12 + 4 * rng.gen_range(0..3);
            rand_mat(&mut rng, frames, cfg.feature_dim)
        })
        .collect();
    let texts = ["vat on", "red sun up", "low"];
    let tokens: Vec<Vec<usize>> = texts.iter().map(|t| vocab::encode(t)).collect();

    let enc = encode_document_infer(&w, &cfg, &feats, &model.pe_enc).expect("encode");
    let layout = DocumentLayout::new(&tokens).expect("layout");
    let doc_logits = decoder_forward_full(
        &w,
        &cfg,
        &model.pe_dec,
        &layout.input,
        &layout.assignment,
        &enc,
        SelfAttnScope::Utterance,
        CrossMode::Block,
        None,
    )
    .expect("document forward");

    let mut worst = 0.0_f64;
    for (u, toks) in tokens.iter().enumerate() {
        let single_enc = encode_document_infer(&w, &cfg, &feats[u..u + 1], &model.pe_enc).unwrap();
        let single_layout = DocumentLayout::new(std::slice::from_ref(toks)).unwrap();
        let single = decoder_forward_full(
            &w,
            &cfg,
            &model.pe_dec,
            &single_layout.input,
            &single_layout.assignment,
            &single_enc,
            SelfAttnScope::Utterance,
            CrossMode::Block,
            None,
        )
        .unwrap();
        let (start, end) = layout.utt_ranges[u];
        for (row, srow) in (start..end).zip(0..single.rows) {
            for (a, b) in doc_logits.row(row).iter().zip(single.row(srow)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst < 1e-10, "document and independent forwards differ by {worst}");

    let dm = DecodeModel::new(&model);
    let mut dcfg = RunConfig::desk().decode;
    dcfg.max_tokens_per_utterance = 12;
    let plain = decode_utterance(&dm, &feats[0], &dcfg).expect("plain decode");
    let empty_ctx = decode_with_context(&dm, &ContextSet::default(), &feats[0], &dcfg).unwrap();
    let longform = decode_longform(&dm, &feats[..1], &dcfg).expect("longform decode");
    assert_eq!(plain.tokens, empty_ctx.tokens, "empty context changed the tokens");
    assert_eq!(longform.len(), 1);
    assert_eq!(plain.tokens, longform[0].tokens, "single-utterance longform differs");
    assert_eq!(plain.text, longform[0].text);
}

/// The desk preset must fit its seed-0 corpus: at least 99% teacher-forced
/// token accuracy on the training split within thirty minutes of CPU
/// training, and a character-level WER below 10% on the held-out test set.
#[test]
fn desk_training_fits_its_corpus_within_budget() {
    let art = artifacts();
    assert!(
        art.train_secs < 1800.0,
        "training took {:.0} s, budget is 1800 s",
        art.train_secs
    );

    let (run, model) = load_checkpoint(&art.stage2_ckpt()).expect("stage-2 checkpoint");
    let corpus = sicl_core::data::load_corpus(&art.corpus()).expect("corpus");
    let acc = teacher_forced_accuracy(&model, &corpus.train, run.train.doc_utterances)
        .expect("accuracy");
    assert!(acc >= 0.99, "teacher-forced accuracy {acc:.4} is below 0.99");

    let cer = metric(&art.out("dec-test-pre"), "cer");
    assert!(cer < 10.0, "character-level WER {cer:.2}% is not below 10%");
}

/// Decoding the adaptation evaluation set with three same-speaker examples
/// must beat zero-context decoding on ambiguous-character accuracy by at
/// least fifteen points.
#[test]
fn same_speaker_context_lifts_ambiguous_character_accuracy() {
    let art = artifacts();
    let with_ctx = metric(&art.out("dec-adapt3"), "ambiguous_char_accuracy");
    let without = metric(&art.out("dec-adapt0"), "ambiguous_char_accuracy");
    assert!(
        with_ctx > without,
        "context did not help: {with_ctx:.4} vs {without:.4}"
    );
    assert!(
        with_ctx - without >= 0.15,
        "improvement {:.4} is below 15 points ({with_ctx:.4} vs {without:.4})",
        with_ctx - without
    );
}

/// After fine-tuning, entity recall with biasing context must strictly
/// exceed both the pre-fine-tuning model with the same context and the
/// fine-tuned model without context, while overall WER on the test set
/// degrades by at most one point.
#[test]
fn fine_tuning_lifts_entity_recall_without_wer_regression() {
    let art = artifacts();
    let post_ctx = metric(&art.out("dec-bias3-post"), "entity_recall");
    let pre_ctx = metric(&art.out("dec-bias3-pre"), "entity_recall");
    let post_noctx = metric(&art.out("dec-bias0-post"), "entity_recall");
    assert!(
        post_ctx > pre_ctx,
        "fine-tuning did not lift recall with context: {post_ctx:.2} vs {pre_ctx:.2}"
    );
    assert!(
        post_ctx > post_noctx,
        "context does not matter after fine-tuning: {post_ctx:.2} vs {post_noctx:.2}"
    );

    let wer_pre = metric(&art.out("dec-test-pre"), "wer");
    let wer_post = metric(&art.out("dec-test-post"), "wer");
    assert!(
        wer_post <= wer_pre + 1.0,
        "fine-tuning degraded test WER too much: {wer_pre:.2}% -> {wer_post:.2}%"
    );
}

/// The benchmark must show the quadratic/linear split between full-document
/// and utterance-aligned cross-attention: score-element ratio exactly N,
/// and at N=6 a wall-time ratio above 1.5 and a tracked-memory ratio above
/// 2.
#[test]
fn block_attention_saves_time_and_memory_as_documents_grow() {
    let started = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let csv = dir.path().join("bench.csv");
    run_ok(&["bench", "--out", csv.to_str().unwrap()]);

    let raw = std::fs::read_to_string(&csv).expect("bench csv");
    let mut rows: std::collections::HashMap<(String, usize), (f64, u64, u64)> =
        std::collections::HashMap::new();
    for line in raw.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        assert_eq!(parts.len(), 5, "unexpected bench row {line:?}");
        if parts[2].is_empty() {
            panic!("bench skipped a configuration: {line:?}");
        }
        rows.insert(
            (parts[0].to_string(), parts[1].parse().unwrap()),
            (parts[2].parse().unwrap(), parts[3].parse().unwrap(), parts[4].parse().unwrap()),
        );
    }

    for n in [1usize, 2, 4, 6] {
        let block = rows[&("block".to_string(), n)];
        let full = rows[&("full".to_string(), n)];
        assert_eq!(
            full.1,
            block.1 * n as u64,
            "score elements at N={n} are not in ratio {n}"
        );
    }
    let block6 = rows[&("block".to_string(), 6)];
    let full6 = rows[&("full".to_string(), 6)];
    let wall_ratio = full6.0 / block6.0;
    assert!(wall_ratio > 1.5, "wall-time ratio at N=6 is {wall_ratio:.2}, need > 1.5");
    let mem_ratio = full6.2 as f64 / block6.2 as f64;
    assert!(mem_ratio > 2.0, "tracked-memory ratio at N=6 is {mem_ratio:.2}, need > 2");
    assert!(started.elapsed().as_secs() < 300, "benchmark exceeded five minutes");
}

/// Cached long-form decoding must reproduce the no-cache oracle exactly,
/// hypothesis for hypothesis, on twenty random six-utterance documents,
/// including documents tight enough to force context eviction.
#[test]
fn cached_longform_decoding_reproduces_the_uncached_oracle() {
    let mut run = RunConfig::desk();
    run.model.model_dim = 32;
    run.model.num_heads = 4;
    run.model.ff_dim = 48;
    run.model.enc_layers = 1;
    run.model.dec_layers = 1;
    run.model.max_doc_tokens = 72;
    run.data.num_speakers = 3;
    run.data.utts_per_speaker = 20;
    run.data.test_utts_per_speaker = 2;
    run.decode.max_tokens_per_utterance = 12;

    let corpus = generate_corpus(&run.data).expect("corpus");
    let model = Model::new(run.model.clone(), 17).expect("model");
    let dm = DecodeModel::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(23);

    for doc_idx in 0..20 {
        let picked = assemble_document(
            &corpus.train,
            DocumentMode::RandomAny,
            6,
            usize::MAX,
            &mut rng,
        )
        .expect("document");
        let feats: Vec<Mat> = picked.iter().map(|u| u.features.clone()).collect();
        let cached = decode_longform(&dm, &feats, &run.decode).expect("cached decode");
        let oracle = decode_longform_reference(&dm, &feats, &run.decode).expect("oracle decode");
        assert_eq!(cached, oracle, "document {doc_idx} diverged between cache and oracle");
    }
}
