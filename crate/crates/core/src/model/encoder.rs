//! Conformer-style acoustic encoder.
//!
//! Each utterance is encoded independently at its exact length, so nothing
//! here ever attends across utterance boundaries. A two-layer stride-2
//! convolutional frontend reduces time 4x, sinusoidal positions are added,
//! and a stack of macaron blocks (half feed-forward, bidirectional
//! self-attention, gated convolution, half feed-forward) refines the frames.
//! Blocks are pre-norm with no trailing per-block norm, so a block whose
//! output projections are zero passes its input through unchanged; one final
//! norm closes the stack.
//!
//! The tape and inference paths below are deliberate mirror images, calling
//! the same kernels in the same order so they agree bit-for-bit.

use sicl_tensor::{kernels, Tape, TensorId};

use crate::config::ModelConfig;
use crate::error::{Result, SiclError};
use crate::mat::Mat;
use crate::model::attention::mha_tape;
use crate::model::attention::mha_full;
use crate::model::weights::{EncLayer, Weights};

/// Fewer input frames than this cannot survive two stride-2 convolutions
/// with enough frames left to say anything.
pub const MIN_INPUT_FRAMES: usize = 4;

/// Encoded frame count after the two stride-2 convolutions.
pub fn subsampled_len(t: usize) -> usize {
    let t1 = kernels::conv_out_len(t, 3, 2, 1);
    kernels::conv_out_len(t1, 3, 2, 1)
}

/// Encoder outputs for one document, one matrix per utterance at its exact
/// subsampled length.
#[derive(Debug, Clone)]
pub struct EncodedDoc {
    pub utts: Vec<Mat>,
}

impl EncodedDoc {
    pub fn lengths(&self) -> Vec<usize> {
        self.utts.iter().map(|m| m.rows).collect()
    }

    pub fn total_frames(&self) -> usize {
        self.utts.iter().map(|m| m.rows).sum()
    }
}

fn check_input(t: usize, cfg: &ModelConfig, pe_rows: usize) -> Result<usize> {
    if t < MIN_INPUT_FRAMES {
        return Err(SiclError::InputTooShort(format!(
            "utterance has {t} frames; at least {MIN_INPUT_FRAMES} are required"
        )));
    }
    let t2 = subsampled_len(t);
    if t2 > pe_rows || t2 > cfg.max_enc_positions {
        return Err(SiclError::Capacity(format!(
            "utterance subsamples to {t2} frames, beyond the {} supported positions",
            cfg.max_enc_positions.min(pe_rows)
        )));
    }
    Ok(t2)
}

/// Encode one utterance on the tape. `feats` is [t, feature_dim]; the
/// result is [subsampled_len(t), model_dim].
pub fn encoder_tape(
    tape: &mut Tape,
    w: &Weights<TensorId>,
    cfg: &ModelConfig,
    feats: &Mat,
    pe: &Mat,
) -> Result<TensorId> {
    let t2 = check_input(feats.rows, cfg, pe.rows)?;
    let x = tape.constant(feats.data.clone(), vec![feats.rows, feats.cols]);
    let x = tape.conv1d(x, w.sub.w1, w.sub.b1, 2, 1);
    let x = tape.swish(x);
    let x = tape.conv1d(x, w.sub.w2, w.sub.b2, 2, 1);
    let x = tape.swish(x);
    let pe_slice = pe.slice_rows(0, t2);
    let pe_const = tape.constant(pe_slice.data, vec![t2, cfg.model_dim]);
    let mut x = tape.add(x, pe_const);
    for layer in &w.enc {
        x = encoder_block_tape(tape, layer, cfg, x);
    }
    Ok(tape.layer_norm(x, w.enc_final.g, w.enc_final.b, cfg.ln_eps))
}

fn encoder_block_tape(
    tape: &mut Tape,
    l: &EncLayer<TensorId>,
    cfg: &ModelConfig,
    mut x: TensorId,
) -> TensorId {
    let eps = cfg.ln_eps;
    let d = cfg.model_dim;

    // First half feed-forward.
    let n = tape.layer_norm(x, l.ff1.norm.g, l.ff1.norm.b, eps);
    let g = tape.matmul(n, l.ff1.wg);
    let g = tape.swish(g);
    let v = tape.matmul(n, l.ff1.wv);
    let h = tape.mul(g, v);
    let h = tape.matmul(h, l.ff1.wo);
    let h = tape.scale(h, 0.5);
    x = tape.add(x, h);

    // Bidirectional self-attention over this utterance only.
    let n = tape.layer_norm(x, l.attn_norm.g, l.attn_norm.b, eps);
    let a = mha_tape(tape, n, n, &l.attn, cfg.num_heads, None);
    x = tape.add(x, a);

    // Convolution module with a gated linear unit.
    let n = tape.layer_norm(x, l.conv.norm.g, l.conv.norm.b, eps);
    let c = tape.conv1d(n, l.conv.pw1_w, l.conv.pw1_b, 1, 0);
    let lin = tape.slice_cols(c, 0, d);
    let gate = tape.slice_cols(c, d, d);
    let gate = tape.sigmoid(gate);
    let c = tape.mul(lin, gate);
    let c = tape.depthwise_conv1d(c, l.conv.dw_w, 1, (cfg.conv_kernel - 1) / 2);
    let c = tape.layer_norm(c, l.conv.norm2.g, l.conv.norm2.b, eps);
    let c = tape.swish(c);
    let c = tape.conv1d(c, l.conv.pw2_w, l.conv.pw2_b, 1, 0);
    x = tape.add(x, c);

    // Second half feed-forward.
    let n = tape.layer_norm(x, l.ff2.norm.g, l.ff2.norm.b, eps);
    let g = tape.matmul(n, l.ff2.wg);
    let g = tape.swish(g);
    let v = tape.matmul(n, l.ff2.wv);
    let h = tape.mul(g, v);
    let h = tape.matmul(h, l.ff2.wo);
    let h = tape.scale(h, 0.5);
    tape.add(x, h)
}

/// Encode one utterance with plain matrices. Mirrors [`encoder_tape`]
/// kernel-for-kernel.
pub fn encoder_infer(
    w: &Weights<Mat>,
    cfg: &ModelConfig,
    feats: &Mat,
    pe: &Mat,
) -> Result<Mat> {
    let t2 = check_input(feats.rows, cfg, pe.rows)?;
    let d = cfg.model_dim;
    let data = kernels::conv1d(
        &feats.data, &w.sub.w1.data, &w.sub.b1.data,
        feats.rows, feats.cols, d, 3, 2, 1,
    );
    let t1 = kernels::conv_out_len(feats.rows, 3, 2, 1);
    let mut x = Mat::from_vec(t1, d, data);
    x.swish_inplace();
    let data = kernels::conv1d(&x.data, &w.sub.w2.data, &w.sub.b2.data, t1, d, d, 3, 2, 1);
    let mut x = Mat::from_vec(t2, d, data);
    x.swish_inplace();
    x.add_assign(&pe.slice_rows(0, t2));
    for layer in &w.enc {
        encoder_block_infer(layer, cfg, &mut x);
    }
    Ok(x.layer_norm_rows(&w.enc_final.g.data, &w.enc_final.b.data, cfg.ln_eps))
}

fn encoder_block_infer(l: &EncLayer<Mat>, cfg: &ModelConfig, x: &mut Mat) {
    let eps = cfg.ln_eps;
    let d = cfg.model_dim;

    let n = x.layer_norm_rows(&l.ff1.norm.g.data, &l.ff1.norm.b.data, eps);
    let mut g = n.matmul(&l.ff1.wg);
    g.swish_inplace();
    let v = n.matmul(&l.ff1.wv);
    for (gv, vv) in g.data.iter_mut().zip(v.data.iter()) {
        *gv *= vv;
    }
    let mut h = g.matmul(&l.ff1.wo);
    h.scale(0.5);
    x.add_assign(&h);

    let n = x.layer_norm_rows(&l.attn_norm.g.data, &l.attn_norm.b.data, eps);
    let a = mha_full(&n, &n, &l.attn, cfg.num_heads, None, None);
    x.add_assign(&a);

    let n = x.layer_norm_rows(&l.conv.norm.g.data, &l.conv.norm.b.data, eps);
    let c = kernels::conv1d(&n.data, &l.conv.pw1_w.data, &l.conv.pw1_b.data, n.rows, d, 2 * d, 1, 1, 0);
    let c = Mat::from_vec(n.rows, 2 * d, c);
    let mut lin = c.slice_cols(0, d);
    let gate = c.slice_cols(d, d);
    for (lv, gv) in lin.data.iter_mut().zip(gate.data.iter()) {
        *lv *= kernels::sigmoid(*gv);
    }
    let c = kernels::depthwise_conv1d(
        &lin.data, &l.conv.dw_w.data,
        lin.rows, d, cfg.conv_kernel, 1, (cfg.conv_kernel - 1) / 2,
    );
    let c = Mat::from_vec(lin.rows, d, c);
    let mut c = c.layer_norm_rows(&l.conv.norm2.g.data, &l.conv.norm2.b.data, eps);
    c.swish_inplace();
    let c = kernels::conv1d(&c.data, &l.conv.pw2_w.data, &l.conv.pw2_b.data, c.rows, d, d, 1, 1, 0);
    x.add_assign(&Mat::from_vec(x.rows, d, c));

    let n = x.layer_norm_rows(&l.ff2.norm.g.data, &l.ff2.norm.b.data, eps);
    let mut g = n.matmul(&l.ff2.wg);
    g.swish_inplace();
    let v = n.matmul(&l.ff2.wv);
    for (gv, vv) in g.data.iter_mut().zip(v.data.iter()) {
        *gv *= vv;
    }
    let mut h = g.matmul(&l.ff2.wo);
    h.scale(0.5);
    x.add_assign(&h);
}

/// Encode every utterance of a document independently.
pub fn encode_document_infer(
    w: &Weights<Mat>,
    cfg: &ModelConfig,
    feats: &[Mat],
    pe: &Mat,
) -> Result<EncodedDoc> {
    let utts = feats.iter().map(|f| encoder_infer(w, cfg, f, pe)).collect::<Result<Vec<_>>>()?;
    Ok(EncodedDoc { utts })
}
