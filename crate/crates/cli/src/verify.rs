//! Built-in verification suites: compact property checks runnable from the
//! shipped binary. Each suite prints PASS/FAIL per property; any failure
//! turns into exit code 2.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sicl_core::checkpoint::{load_checkpoint, save_checkpoint};
use sicl_core::config::{ModelConfig, RunConfig};
use sicl_core::decoding::{decode_utterance, DecodeModel, Hypothesis};
use sicl_core::error::Result;
use sicl_core::mat::Mat;
use sicl_core::model::decoder::{
    batch_to_doc, decoder_forward_full, doc_to_batch, CrossMode, DocumentLayout, SelfAttnScope,
};
use sicl_core::model::encoder::{encoder_tape, EncodedDoc};
use sicl_core::model::weights::weights_from_ids;
use sicl_core::model::Model;
use sicl_core::objectives::{attention_ce_loss, ctc_loss_tape, hybrid_loss, logsumexp};
use sicl_core::vocab;
use sicl_tensor::{grad_check_sampled, CheckInput, Tape};

use crate::Suite;

type CheckResult = std::result::Result<(), String>;
type Check = (&'static str, CheckResult);

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const EQUIV_TOL: f64 = 1e-10;

fn small_model_cfg() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        model_dim: 8,
        num_heads: 2,
        ff_dim: 10,
        enc_layers: 1,
        dec_layers: 1,
        conv_kernel: 3,
        vocab_size: vocab::VOCAB_SIZE,
        ctc_dim: vocab::CTC_DIM,
        ln_eps: 1e-5,
        max_doc_tokens: 96,
        max_enc_positions: 64,
    }
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn check_worst(name: &'static str, worst: f64) -> Check {
    if worst < GRAD_TOL {
        (name, Ok(()))
    } else {
        (name, Err(format!("worst relative gradient error {worst:.3e} >= {GRAD_TOL:.0e}")))
    }
}

fn grad_suite() -> Vec<Check> {
    let cfg = small_model_cfg();
    let model = Model::new(cfg.clone(), 11).expect("valid configuration");
    let inputs: Vec<CheckInput> =
        model.params.iter().map(|p| CheckInput::new(p.data.clone(), p.shape.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let feats: Vec<Mat> = (0..2).map(|_| random_mat(&mut rng, 15, cfg.feature_dim)).collect();
    let tokens = vec![
        vec![vocab::char_to_id('a'), vocab::char_to_id('b')],
        vec![vocab::char_to_id('c'), vocab::char_to_id('d')],
    ];
    let layout = DocumentLayout::new(&tokens).expect("non-empty document");
    let pe_enc = model.pe_enc.clone();
    let pe_dec = model.pe_dec.clone();

    let enc_worst = grad_check_sampled(
        |tape, ids| {
            let w = weights_from_ids(&cfg, ids);
            let enc = encoder_tape(tape, &w, &cfg, &feats[0], &pe_enc).expect("valid input");
            tape.mean(enc)
        },
        &inputs,
        GRAD_EPS,
        60,
        21,
    );

    let hybrid_worst = grad_check_sampled(
        |tape, ids| {
            let w = weights_from_ids(&cfg, ids);
            let enc_ids: Vec<_> = feats
                .iter()
                .map(|f| encoder_tape(tape, &w, &cfg, f, &pe_enc).expect("valid input"))
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
            let logits = decoder_tape_for_check(tape, &w, &cfg, &pe_dec, &layout, &enc_ids);
            let att = attention_ce_loss(tape, logits, &layout.targets, None).expect("sized");
            hybrid_loss(tape, &ctc_terms, att, 0.3)
        },
        &inputs,
        GRAD_EPS,
        60,
        22,
    );

    vec![
        check_worst("grad.encoder_stack", enc_worst),
        check_worst("grad.full_hybrid_loss", hybrid_worst),
    ]
}

fn decoder_tape_for_check(
    tape: &mut Tape,
    w: &sicl_core::model::weights::TapeWeights,
    cfg: &ModelConfig,
    pe_dec: &Mat,
    layout: &DocumentLayout,
    enc_ids: &[sicl_tensor::TensorId],
) -> sicl_tensor::TensorId {
    sicl_core::model::decoder::decoder_tape(
        tape,
        w,
        cfg,
        pe_dec,
        &layout.input,
        &layout.assignment,
        enc_ids,
        SelfAttnScope::Document,
    )
    .expect("valid document")
}

/// Collapse a frame-level path: merge repeats, then drop blanks.
fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if prev != Some(c) && c != blank {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Exhaustive CTC: log-sum over every frame labeling whose collapse equals
/// the target. None when no path produces it.
fn ctc_exhaustive(lp: &Mat, blank: usize, target: &[usize]) -> Option<f64> {
    let (t, v) = (lp.rows, lp.cols);
    let mut path = vec![0usize; t];
    let mut terms = Vec::new();
    loop {
        if collapse(&path, blank) == target {
            terms.push((0..t).map(|i| lp.row(i)[path[i]]).sum());
        }
        let mut pos = 0;
        loop {
            if pos == t {
                if terms.is_empty() {
                    return None;
                }
                return Some(-logsumexp(terms.iter().copied()));
            }
            path[pos] += 1;
            if path[pos] < v {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

fn ctc_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for case in 0..500 {
        let t = rng.gen_range(1..=6);
        let v = rng.gen_range(2..=3);
        let blank = v - 1;
        let len = rng.gen_range(0..=3usize.min(t));
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(0..blank)).collect();
        let mut lp = random_mat(&mut rng, t, v);
        lp.log_softmax_rows();

        let mut tape = Tape::new();
        let lp_id = tape.constant(lp.data.clone(), vec![t, v]);
        let got = ctc_loss_tape(&mut tape, lp_id, blank, &target).map(|id| tape.value(id)[0]);
        let want = ctc_exhaustive(&lp, blank, &target);
        match (got, want) {
            (None, None) => {}
            (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
            (got, want) => {
                return vec![(
                    "ctc.matches_exhaustive_sum",
                    Err(format!(
                        "case {case}: realizability disagrees (dp {got:?}, exhaustive {want:?})"
                    )),
                )];
            }
        }
    }
    let result = if worst < EQUIV_TOL {
        Ok(())
    } else {
        Err(format!("worst absolute difference {worst:.3e} >= {EQUIV_TOL:.0e}"))
    };
    vec![("ctc.matches_exhaustive_sum", result)]
}

fn equiv_suite() -> Vec<Check> {
    let cfg = small_model_cfg();
    let model = Model::new(cfg.clone(), 17).expect("valid configuration");
    let w = model.infer_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    for &n in &[1usize, 2, 4, 8] {
        let enc = EncodedDoc {
            utts: (0..n)
                .map(|_| {
                    let frames = rng.gen_range(3..9);
                    random_mat(&mut rng, frames, cfg.model_dim)
                })
                .collect(),
        };
        let labels: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                (0..rng.gen_range(2..6))
                    .map(|_| rng.gen_range(vocab::LETTER_BASE..vocab::LETTER_BASE + 26))
                    .collect()
            })
            .collect();
        let layout = DocumentLayout::new(&labels).expect("non-empty document");
        let run = |mode| {
            decoder_forward_full(
                &w,
                &cfg,
                &model.pe_dec,
                &layout.input,
                &layout.assignment,
                &enc,
                SelfAttnScope::Document,
                mode,
                None,
            )
            .expect("valid document")
        };
        let a = run(CrossMode::Block);
        let b = run(CrossMode::FullMasked);
        let diff =
            a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
        worst = worst.max(diff);
    }
    checks.push((
        "equiv.block_vs_masked_cross_attention",
        if worst < EQUIV_TOL {
            Ok(())
        } else {
            Err(format!("worst difference {worst:.3e} >= {EQUIV_TOL:.0e}"))
        },
    ));

    let mut round_trip_ok = Ok(());
    'outer: for case in 0..100 {
        let n_utts = rng.gen_range(1..5);
        let mut assignment = Vec::new();
        for u in 0..n_utts {
            for _ in 0..rng.gen_range(1..5) {
                assignment.push(u);
            }
        }
        let x = random_mat(&mut rng, assignment.len(), cfg.model_dim);
        let batched = doc_to_batch(&x, &assignment).expect("grouped assignment");
        let (back, assignment_back) = batch_to_doc(&batched).expect("well-formed batch");
        if back.data != x.data || assignment_back != assignment {
            round_trip_ok = Err(format!("case {case}: round trip not bit-exact"));
            break 'outer;
        }
    }
    checks.push(("equiv.doc_batch_round_trip", round_trip_ok));
    checks
}

fn roundtrip_suite() -> Result<Vec<Check>> {
    let mut run = RunConfig::desk();
    run.model = small_model_cfg();
    let model = Model::new(run.model.clone(), 23)?;
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let feats: Vec<Mat> = (0..3)
        .map(|_| {
            let frames = rng.gen_range(12..40);
            random_mat(&mut rng, frames, run.model.feature_dim)
        })
        .collect();

    let decode_all = |m: &Model| -> Result<Vec<Hypothesis>> {
        let dm = DecodeModel::new(m);
        feats.iter().map(|f| decode_utterance(&dm, f, &run.decode)).collect()
    };
    let before = decode_all(&model)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &run, &model)?;
    let (loaded_run, loaded) = load_checkpoint(&path)?;
    let after = decode_all(&loaded)?;

    let mut checks = Vec::new();
    checks.push((
        "roundtrip.config_identical",
        if loaded_run == run { Ok(()) } else { Err("configuration changed".into()) },
    ));
    let params_equal = model
        .params
        .iter()
        .zip(loaded.params.iter())
        .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data == b.data);
    checks.push((
        "roundtrip.parameters_bit_exact",
        if params_equal { Ok(()) } else { Err("parameter tensors changed".into()) },
    ));
    checks.push((
        "roundtrip.decode_reproduced",
        if before == after {
            Ok(())
        } else {
            Err("hypotheses differ after save/load".into())
        },
    ));
    Ok(checks)
}

pub fn run(suite: Suite) -> Result<bool> {
    let mut checks: Vec<Check> = Vec::new();
    if matches!(suite, Suite::Grad | Suite::All) {
        checks.extend(grad_suite());
    }
    if matches!(suite, Suite::Ctc | Suite::All) {
        checks.extend(ctc_suite());
    }
    if matches!(suite, Suite::Equiv | Suite::All) {
        checks.extend(equiv_suite());
    }
    if matches!(suite, Suite::Roundtrip | Suite::All) {
        checks.extend(roundtrip_suite()?);
    }
    let mut ok = true;
    for (name, result) in checks {
        match result {
            Ok(()) => println!("PASS {name}"),
            Err(reason) => {
                ok = false;
                println!("FAIL {name}: {reason}");
            }
        }
    }
    Ok(ok)
}
