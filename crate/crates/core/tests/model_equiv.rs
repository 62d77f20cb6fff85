//! Equivalence guarantees between the model's execution paths: training
//! tape vs. full-matrix inference, sliced vs. masked cross-attention,
//! incremental vs. full decoding, and restricted-scope documents vs.
//! independent utterance runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sicl_core::config::ModelConfig;
use sicl_core::mat::Mat;
use sicl_core::model::attention::ScoreStats;
use sicl_core::model::decoder::{
    batch_to_doc, decoder_forward_full, decoder_step, decoder_tape, doc_to_batch, CrossMode,
    DecoderCache, DocumentLayout, SelfAttnScope,
};
use sicl_core::model::encoder::{encode_document_infer, encoder_tape, EncodedDoc};
use sicl_core::model::Model;
use sicl_core::vocab;
use sicl_tensor::{kernels, Tape};

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        feature_dim: 5,
        model_dim: 8,
        num_heads: 2,
        ff_dim: 12,
        enc_layers: 2,
        dec_layers: 2,
        conv_kernel: 3,
        vocab_size: vocab::VOCAB_SIZE,
        ctc_dim: vocab::CTC_DIM,
        ln_eps: 1e-5,
        max_doc_tokens: 128,
        max_enc_positions: 64,
    }
}

fn rand_feats(rng: &mut ChaCha8Rng, t: usize, dim: usize) -> Mat {
    Mat::from_vec(t, dim, (0..t * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn rand_tokens(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(vocab::LETTER_BASE..=vocab::SPACE)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn tape_and_inference_paths_agree_bitwise() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let feats: Vec<Mat> =
        [9, 14, 11].iter().map(|&t| rand_feats(&mut rng, t, cfg.feature_dim)).collect();
    let tokens: Vec<Vec<usize>> = [3, 5, 4].iter().map(|&l| rand_tokens(&mut rng, l)).collect();
    let layout = DocumentLayout::new(&tokens).unwrap();

    let w = model.infer_weights();
    let enc = encode_document_infer(&w, &cfg, &feats, &model.pe_enc).unwrap();
    let logits = decoder_forward_full(
        &w,
        &cfg,
        &model.pe_dec,
        &layout.input,
        &layout.assignment,
        &enc,
        SelfAttnScope::Document,
        CrossMode::Block,
        None,
    )
    .unwrap();

    let mut tape = Tape::new();
    let (_, tw) = model.bind(&mut tape);
    let enc_ids: Vec<_> = feats
        .iter()
        .map(|f| encoder_tape(&mut tape, &tw, &cfg, f, &model.pe_enc).unwrap())
        .collect();
    for (id, m) in enc_ids.iter().zip(&enc.utts) {
        assert_eq!(tape.value(*id), m.data.as_slice(), "encoder paths diverged");
    }
    let logits_id = decoder_tape(
        &mut tape,
        &tw,
        &cfg,
        &model.pe_dec,
        &layout.input,
        &layout.assignment,
        &enc_ids,
        SelfAttnScope::Document,
    )
    .unwrap();
    assert_eq!(tape.value(logits_id), logits.data.as_slice(), "decoder paths diverged");
}

#[test]
fn sliced_cross_attention_matches_masked_reference() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone(), 3).unwrap();
    let w = model.infer_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &n in &[1usize, 2, 4, 8] {
        let feats: Vec<Mat> = (0..n)
            .map(|_| {
                let t = rng.gen_range(8..=20);
                rand_feats(&mut rng, t, cfg.feature_dim)
            })
            .collect();
        let tokens: Vec<Vec<usize>> =
            (0..n)
                .map(|_| {
                    let l = rng.gen_range(1..=6);
                    rand_tokens(&mut rng, l)
                })
                .collect();
        let layout = DocumentLayout::new(&tokens).unwrap();
        let enc = encode_document_infer(&w, &cfg, &feats, &model.pe_enc).unwrap();
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
            .unwrap()
        };
        let block = run(CrossMode::Block);
        let full = run(CrossMode::FullMasked);
        let diff = max_abs_diff(&block.data, &full.data);
        assert!(diff < 1e-10, "N={n}: sliced vs masked cross-attention differ by {diff}");
    }
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone(), 19).unwrap();
    let w = model.infer_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let feats: Vec<Mat> = (0..3)
        .map(|_| {
            let t = rng.gen_range(8..=16);
            rand_feats(&mut rng, t, cfg.feature_dim)
        })
        .collect();
    let tokens: Vec<Vec<usize>> = (0..3)
        .map(|_| {
            let l = rng.gen_range(2..=5);
            rand_tokens(&mut rng, l)
        })
        .collect();
    let layout = DocumentLayout::new(&tokens).unwrap();
    let enc = encode_document_infer(&w, &cfg, &feats, &model.pe_enc).unwrap();
    let full = decoder_forward_full(
        &w,
        &cfg,
        &model.pe_dec,
        &layout.input,
        &layout.assignment,
        &enc,
        SelfAttnScope::Document,
        CrossMode::Block,
        None,
    )
    .unwrap();

    let mut cache = DecoderCache::new(&cfg, enc.utts.len());
    for (i, (&tok, &utt)) in layout.input.iter().zip(&layout.assignment).enumerate() {
        let logits = decoder_step(&w, &cfg, &model.pe_dec, &enc, &mut cache, tok, utt).unwrap();
        assert_eq!(logits.as_slice(), full.row(i), "step {i} diverged from the full forward");
    }
}

#[test]
fn restricted_scope_equals_independent_utterance_forwards() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone(), 5).unwrap();
    let w = model.infer_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let feats: Vec<Mat> = (0..3)
        .map(|_| {
            let t = rng.gen_range(9..=18);
            rand_feats(&mut rng, t, cfg.feature_dim)
        })
        .collect();
    let tokens: Vec<Vec<usize>> = (0..3)
        .map(|_| {
            let l = rng.gen_range(2..=5);
            rand_tokens(&mut rng, l)
        })
        .collect();
    let enc = encode_document_infer(&w, &cfg, &feats, &model.pe_enc).unwrap();

    // Independent single-utterance runs.
    let mut standalone: Vec<Mat> = Vec::new();
    let mut fused_input = Vec::new();
    let mut fused_assignment = Vec::new();
    for (u, toks) in tokens.iter().enumerate() {
        let layout = DocumentLayout::new(std::slice::from_ref(toks)).unwrap();
        let single = EncodedDoc { utts: vec![enc.utts[u].clone()] };
        standalone.push(
            decoder_forward_full(
                &w,
                &cfg,
                &model.pe_dec,
                &layout.input,
                &layout.assignment,
                &single,
                SelfAttnScope::Document,
                CrossMode::Block,
                None,
            )
            .unwrap(),
        );
        fused_input.extend_from_slice(&layout.input);
        fused_assignment.extend(std::iter::repeat(u).take(layout.input.len()));
    }

    // One fused pass over the same token stream with self-attention and
    // positions restricted to utterance blocks.
    let fused = decoder_forward_full(
        &w,
        &cfg,
        &model.pe_dec,
        &fused_input,
        &fused_assignment,
        &enc,
        SelfAttnScope::Utterance,
        CrossMode::Block,
        None,
    )
    .unwrap();

    let mut row = 0;
    for (u, single) in standalone.iter().enumerate() {
        for r in 0..single.rows {
            let diff = max_abs_diff(fused.row(row), single.row(r));
            assert!(
                diff < 1e-10,
                "utterance {u} row {r}: fused restricted forward differs by {diff}"
            );
            row += 1;
        }
    }
    assert_eq!(row, fused.rows);
}

#[test]
fn document_scope_couples_utterances_but_restricted_scope_does_not() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone(), 13).unwrap();
    let w = model.infer_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let feats: Vec<Mat> = (0..2).map(|_| rand_feats(&mut rng, 12, cfg.feature_dim)).collect();
    let enc = encode_document_infer(&w, &cfg, &feats, &model.pe_enc).unwrap();
    let tokens = vec![rand_tokens(&mut rng, 3), rand_tokens(&mut rng, 3)];
    let layout = DocumentLayout::new(&tokens).unwrap();
    let mut altered_tokens = tokens.clone();
    altered_tokens[0][1] = if tokens[0][1] == vocab::char_to_id('a') {
        vocab::char_to_id('b')
    } else {
        vocab::char_to_id('a')
    };
    let altered = DocumentLayout::new(&altered_tokens).unwrap();

    let run = |input: &[usize], assignment: &[usize], scope| {
        decoder_forward_full(
            &w, &cfg, &model.pe_dec, input, assignment, &enc, scope, CrossMode::Block, None,
        )
        .unwrap()
    };

    let (u1_start, u1_end) = layout.utt_ranges[1];
    let base_doc = run(&layout.input, &layout.assignment, SelfAttnScope::Document);
    let alt_doc = run(&altered.input, &altered.assignment, SelfAttnScope::Document);
    assert!(
        max_abs_diff(
            &base_doc.slice_rows(u1_start, u1_end - u1_start).data,
            &alt_doc.slice_rows(u1_start, u1_end - u1_start).data,
        ) > 0.0,
        "document scope must let utterance 1 see utterance 0"
    );
    // Causality within the document: positions before the edit are untouched.
    assert_eq!(base_doc.row(0), alt_doc.row(0));
    assert_eq!(base_doc.row(1), alt_doc.row(1));

    let base_r = run(&layout.input, &layout.assignment, SelfAttnScope::Utterance);
    let alt_r = run(&altered.input, &altered.assignment, SelfAttnScope::Utterance);
    assert_eq!(
        base_r.slice_rows(u1_start, u1_end - u1_start).data,
        alt_r.slice_rows(u1_start, u1_end - u1_start).data,
        "restricted scope must isolate utterance 1 from utterance 0 edits"
    );
}

#[test]
fn cross_attention_score_footprint_ratio_is_exactly_n() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone(), 29).unwrap();
    let w = model.infer_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for &n in &[1usize, 2, 4, 6] {
        let feats: Vec<Mat> = (0..n).map(|_| rand_feats(&mut rng, 16, cfg.feature_dim)).collect();
        let tokens: Vec<Vec<usize>> = (0..n).map(|_| rand_tokens(&mut rng, 4)).collect();
        let layout = DocumentLayout::new(&tokens).unwrap();
        let enc = encode_document_infer(&w, &cfg, &feats, &model.pe_enc).unwrap();
        let frames = enc.utts[0].rows;
        let per_utt_rows = 5; // 4 tokens + end marker
        let run = |mode| {
            let mut stats = ScoreStats::default();
            decoder_forward_full(
                &w,
                &cfg,
                &model.pe_dec,
                &layout.input,
                &layout.assignment,
                &enc,
                SelfAttnScope::Document,
                mode,
                Some(&mut stats),
            )
            .unwrap();
            stats.peak
        };
        let block = run(CrossMode::Block);
        let full = run(CrossMode::FullMasked);
        assert_eq!(block, n * per_utt_rows * frames * cfg.num_heads);
        assert_eq!(full, n * block, "footprint ratio must be exactly the utterance count");
    }
}

#[test]
fn encoder_blocks_vanish_with_zero_output_projections() {
    let cfg = tiny_cfg();
    let mut model = Model::new(cfg.clone(), 17).unwrap();
    for i in 0..cfg.enc_layers {
        for name in ["ff1.wo", "attn.wo", "conv.pw2.w", "ff2.wo"] {
            let id = model.params.id(&format!("enc.{i}.{name}"));
            model.params.get_mut(id).data.fill(0.0);
        }
    }
    let w = model.infer_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let feats = rand_feats(&mut rng, 13, cfg.feature_dim);
    let out = sicl_core::model::encoder::encoder_infer(&w, &cfg, &feats, &model.pe_enc).unwrap();

    // Expected: subsample + positions, then only the final norm.
    let d = cfg.model_dim;
    let t1 = kernels::conv_out_len(13, 3, 2, 1);
    let x = kernels::conv1d(&feats.data, &w.sub.w1.data, &w.sub.b1.data, 13, cfg.feature_dim, d, 3, 2, 1);
    let mut x = Mat::from_vec(t1, d, x);
    x.swish_inplace();
    let t2 = kernels::conv_out_len(t1, 3, 2, 1);
    let x2 = kernels::conv1d(&x.data, &w.sub.w2.data, &w.sub.b2.data, t1, d, d, 3, 2, 1);
    let mut x = Mat::from_vec(t2, d, x2);
    x.swish_inplace();
    x.add_assign(&model.pe_enc.slice_rows(0, t2));
    let expected = x.layer_norm_rows(&w.enc_final.g.data, &w.enc_final.b.data, cfg.ln_eps);
    assert_eq!(out.data, expected.data, "zeroed blocks must pass input through unchanged");
}

#[test]
fn batch_round_trip_is_exact_on_random_assignments() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for case in 0..100 {
        let n_utts = rng.gen_range(1..=8);
        let mut assignment = Vec::new();
        for u in 0..n_utts {
            let len = rng.gen_range(0..=6);
            assignment.extend(std::iter::repeat(u).take(len));
        }
        if assignment.is_empty() {
            assignment.push(rng.gen_range(0..n_utts.max(1)));
            assignment.sort_unstable();
        }
        let dim = rng.gen_range(1..=8);
        let x = Mat::from_vec(
            assignment.len(),
            dim,
            (0..assignment.len() * dim).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        );
        let b = doc_to_batch(&x, &assignment).unwrap();
        let (x2, a2) = batch_to_doc(&b).unwrap();
        assert_eq!(x2.data, x.data, "case {case}: data changed in round trip");
        assert_eq!(a2, assignment, "case {case}: assignment changed in round trip");
    }
}
