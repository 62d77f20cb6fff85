//! Document-level transformer decoder.
//!
//! A document is one token stream covering several utterances. Causal
//! self-attention may run over the whole document (the in-context mode) or
//! be restricted to within-utterance blocks, in which case positions also
//! restart at each utterance and the document computes exactly what
//! independent per-utterance runs would. Cross-attention is always
//! per-utterance: a position only sees the encoder frames of its own
//! utterance, either by slicing (the production path, whose score matrices
//! scale linearly with document length) or through a block-diagonal mask
//! over all frames (the quadratic reference the slicing path is checked
//! against).
//!
//! Three execution paths share the same kernels and op order: the autodiff
//! tape for training, the full-matrix path for scoring and equivalence
//! checks, and a row-incremental path with cached projections for beam
//! decoding.

use sicl_tensor::{kernels, Tape, TensorId};

use crate::config::ModelConfig;
use crate::error::{contract, Result, SiclError};
use crate::mat::Mat;
use crate::model::attention::{
    block_causal_mask, block_cross_mask, causal_mask, mha_full, mha_row, mha_tape, AttnW,
    ScoreStats,
};
use crate::model::encoder::EncodedDoc;
use crate::model::weights::{InferWeights, Weights};
use crate::vocab::{EOU, SOS};

/// How far self-attention may reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelfAttnScope {
    /// Causal over the whole document; positions count from the document
    /// start. This is the trained in-context configuration.
    Document,
    /// Causal within each utterance only; positions restart per utterance.
    /// A document forward in this scope equals independent utterance
    /// forwards.
    Utterance,
}

/// Which cross-attention implementation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossMode {
    /// Per-utterance slicing; score matrices grow linearly with the number
    /// of utterances.
    Block,
    /// Block-diagonal masking over all concatenated frames; quadratic, kept
    /// as the reference implementation.
    FullMasked,
}

/// One maximal run of equal assignment values: positions `start..end` all
/// belong to `utt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UttRun {
    pub utt: usize,
    pub start: usize,
    pub end: usize,
}

/// Splits an assignment vector into runs, requiring utterance indices to be
/// grouped and strictly increasing run to run, each below `n_utts`.
pub fn assignment_runs(assignment: &[usize], n_utts: usize) -> Result<Vec<UttRun>> {
    let mut runs: Vec<UttRun> = Vec::new();
    for (i, &u) in assignment.iter().enumerate() {
        if u >= n_utts {
            return Err(contract(format!(
                "assignment refers to utterance {u} but the document has {n_utts}"
            )));
        }
        match runs.last_mut() {
            Some(run) if run.utt == u => run.end = i + 1,
            Some(run) if run.utt > u => {
                return Err(contract(format!(
                    "assignment must be grouped and ascending; utterance {u} follows {}",
                    run.utt
                )));
            }
            _ => runs.push(UttRun { utt: u, start: i, end: i + 1 }),
        }
    }
    Ok(runs)
}

/// Token stream of one document: per-utterance transcriptions, each closed
/// by an end-of-utterance marker, concatenated in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentLayout {
    /// Decoder input ids: start-of-sequence, then all targets but the last.
    pub input: Vec<usize>,
    /// Prediction targets at each position.
    pub targets: Vec<usize>,
    /// Utterance owning each predicted position.
    pub assignment: Vec<usize>,
    /// Position range `start..end` of each utterance.
    pub utt_ranges: Vec<(usize, usize)>,
}

impl DocumentLayout {
    pub fn new(utt_tokens: &[Vec<usize>]) -> Result<Self> {
        if utt_tokens.is_empty() {
            return Err(contract("a document needs at least one utterance"));
        }
        let mut targets = Vec::new();
        let mut assignment = Vec::new();
        let mut utt_ranges = Vec::with_capacity(utt_tokens.len());
        for (u, toks) in utt_tokens.iter().enumerate() {
            let start = targets.len();
            targets.extend_from_slice(toks);
            targets.push(EOU);
            assignment.resize(targets.len(), u);
            utt_ranges.push((start, targets.len()));
        }
        let mut input = Vec::with_capacity(targets.len());
        input.push(SOS);
        input.extend_from_slice(&targets[..targets.len() - 1]);
        Ok(DocumentLayout { input, targets, assignment, utt_ranges })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

fn check_decoder_args(
    cfg: &ModelConfig,
    pe_rows: usize,
    input: &[usize],
    assignment: &[usize],
    n_utts: usize,
) -> Result<Vec<UttRun>> {
    if input.is_empty() {
        return Err(contract("decoder input is empty"));
    }
    if input.len() != assignment.len() {
        return Err(contract(format!(
            "decoder input has {} tokens but assignment covers {}",
            input.len(),
            assignment.len()
        )));
    }
    if input.len() > cfg.max_doc_tokens || input.len() > pe_rows {
        return Err(SiclError::Capacity(format!(
            "document has {} tokens, beyond the {} supported positions",
            input.len(),
            cfg.max_doc_tokens.min(pe_rows)
        )));
    }
    if let Some(&bad) = input.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(contract(format!("token id {bad} outside vocabulary")));
    }
    assignment_runs(assignment, n_utts)
}

/// Document position of each row under the given scope.
fn positions(scope: SelfAttnScope, len: usize, runs: &[UttRun]) -> Vec<usize> {
    match scope {
        SelfAttnScope::Document => (0..len).collect(),
        SelfAttnScope::Utterance => {
            let mut pos = vec![0usize; len];
            for run in runs {
                for i in run.start..run.end {
                    pos[i] = i - run.start;
                }
            }
            pos
        }
    }
}

fn self_mask(scope: SelfAttnScope, assignment: &[usize]) -> Vec<f64> {
    match scope {
        SelfAttnScope::Document => causal_mask(assignment.len(), assignment.len(), 0),
        SelfAttnScope::Utterance => block_causal_mask(assignment),
    }
}

/// Per-utterance cross-attention by row slicing. Score matrices for every
/// (utterance, head) pair are materialized together, as a batched kernel
/// would hold them, then consumed; `stats` observes that peak.
pub fn utterance_cross_attention(
    q_in: &Mat,
    enc: &EncodedDoc,
    assignment: &[usize],
    w: &AttnW,
    heads: usize,
    mut stats: Option<&mut ScoreStats>,
) -> Result<Mat> {
    if q_in.rows != assignment.len() {
        return Err(contract(format!(
            "{} query rows but assignment covers {}",
            q_in.rows,
            assignment.len()
        )));
    }
    let runs = assignment_runs(assignment, enc.utts.len())?;
    let d = q_in.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // Phase 1: attention weights for every (utterance, head) at once.
    let mut ctxs: Vec<(UttRun, Vec<Mat>, Mat)> = Vec::with_capacity(runs.len());
    let mut counted = 0usize;
    for run in &runs {
        let q = q_in.slice_rows(run.start, run.end - run.start).matmul(&w.wq);
        let k = enc.utts[run.utt].matmul(&w.wk);
        let v = enc.utts[run.utt].matmul(&w.wv);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice_cols(h * dh, dh);
            let kh = k.slice_cols(h * dh, dh);
            let mut s = qh.matmul_nt(&kh);
            counted += s.data.len();
            s.scale(scale);
            s.softmax_rows();
            weights.push(s);
        }
        ctxs.push((*run, weights, v));
    }
    if let Some(stats) = stats.as_deref_mut() {
        stats.alloc(counted);
    }

    // Phase 2: consume the weights into output rows.
    let mut out = Mat::zeros(q_in.rows, d);
    for (run, weights, v) in &ctxs {
        let head_outs: Vec<Mat> =
            weights.iter().enumerate().map(|(h, a)| a.matmul(&v.slice_cols(h * dh, dh))).collect();
        let refs: Vec<&Mat> = head_outs.iter().collect();
        let o = Mat::concat_cols(&refs).matmul(&w.wo);
        for (local, i) in (run.start..run.end).enumerate() {
            out.row_mut(i).copy_from_slice(o.row(local));
        }
    }
    drop(ctxs);
    if let Some(stats) = stats.as_deref_mut() {
        stats.free(counted);
    }
    Ok(out)
}

/// Reference cross-attention: every query scores every frame of every
/// utterance, with frames outside the query's utterance masked off.
pub fn cross_attention_blockmask_reference(
    q_in: &Mat,
    enc: &EncodedDoc,
    assignment: &[usize],
    w: &AttnW,
    heads: usize,
    stats: Option<&mut ScoreStats>,
) -> Result<Mat> {
    if q_in.rows != assignment.len() {
        return Err(contract(format!(
            "{} query rows but assignment covers {}",
            q_in.rows,
            assignment.len()
        )));
    }
    assignment_runs(assignment, enc.utts.len())?;
    let refs: Vec<&Mat> = enc.utts.iter().collect();
    let enc_cat = Mat::concat_rows(&refs);
    let mut frame_utts = Vec::with_capacity(enc_cat.rows);
    for (u, m) in enc.utts.iter().enumerate() {
        frame_utts.extend(std::iter::repeat(u).take(m.rows));
    }
    let mask = block_cross_mask(assignment, &frame_utts);
    Ok(mha_full(q_in, &enc_cat, w, heads, Some(&mask), stats))
}

/// Full teacher-forced decoder pass on the tape. `enc_utts` are the encoder
/// outputs, one tape tensor per utterance. Returns logits, [len x vocab].
pub fn decoder_tape(
    tape: &mut Tape,
    w: &Weights<TensorId>,
    cfg: &ModelConfig,
    pe: &Mat,
    input: &[usize],
    assignment: &[usize],
    enc_utts: &[TensorId],
    scope: SelfAttnScope,
) -> Result<TensorId> {
    let runs = check_decoder_args(cfg, pe.rows, input, assignment, enc_utts.len())?;
    let len = input.len();
    let d = cfg.model_dim;
    let pos = positions(scope, len, &runs);
    let mask = self_mask(scope, assignment);

    let emb = tape.embedding(w.embed, input);
    let mut pe_rows = Vec::with_capacity(len * d);
    for &p in &pos {
        pe_rows.extend_from_slice(pe.row(p));
    }
    let pe_const = tape.constant(pe_rows, vec![len, d]);
    let mut x = tape.add(emb, pe_const);

    for l in &w.dec {
        // Causal self-attention.
        let n = tape.layer_norm(x, l.self_norm.g, l.self_norm.b, cfg.ln_eps);
        let a = mha_tape(tape, n, n, &l.self_attn, cfg.num_heads, Some(&mask));
        x = tape.add(x, a);

        // Per-utterance cross-attention by slicing; runs are contiguous and
        // ascending, so concatenating per-run outputs restores document
        // order.
        let n = tape.layer_norm(x, l.cross_norm.g, l.cross_norm.b, cfg.ln_eps);
        let mut outs = Vec::with_capacity(runs.len());
        for run in &runs {
            let q = tape.slice_rows(n, run.start, run.end - run.start);
            outs.push(mha_tape(tape, q, enc_utts[run.utt], &l.cross_attn, cfg.num_heads, None));
        }
        let cat = tape.concat_rows(&outs);
        x = tape.add(x, cat);

        // Feed-forward.
        let n = tape.layer_norm(x, l.ff.norm.g, l.ff.norm.b, cfg.ln_eps);
        let h = tape.matmul(n, l.ff.w1);
        let h = tape.add_row_broadcast(h, l.ff.b1);
        let h = tape.swish(h);
        let h = tape.matmul(h, l.ff.w2);
        let h = tape.add_row_broadcast(h, l.ff.b2);
        x = tape.add(x, h);
    }

    let x = tape.layer_norm(x, w.dec_final.g, w.dec_final.b, cfg.ln_eps);
    let logits = tape.matmul(x, w.head_w);
    Ok(tape.add_row_broadcast(logits, w.head_b))
}

/// Full teacher-forced decoder pass with plain matrices. Mirrors
/// [`decoder_tape`] kernel-for-kernel; `cross` selects the sliced or the
/// masked-reference cross-attention, and `stats` observes cross-attention
/// score-matrix footprints.
pub fn decoder_forward_full(
    w: &InferWeights,
    cfg: &ModelConfig,
    pe: &Mat,
    input: &[usize],
    assignment: &[usize],
    enc: &EncodedDoc,
    scope: SelfAttnScope,
    cross: CrossMode,
    mut stats: Option<&mut ScoreStats>,
) -> Result<Mat> {
    let runs = check_decoder_args(cfg, pe.rows, input, assignment, enc.utts.len())?;
    let len = input.len();
    let d = cfg.model_dim;
    let pos = positions(scope, len, &runs);
    let mask = self_mask(scope, assignment);

    let mut x = Mat::zeros(len, d);
    for i in 0..len {
        let row = x.row_mut(i);
        row.copy_from_slice(w.embed.row(input[i]));
        for (a, b) in row.iter_mut().zip(pe.row(pos[i])) {
            *a += b;
        }
    }

    for l in &w.dec {
        let n = x.layer_norm_rows(&l.self_norm.g.data, &l.self_norm.b.data, cfg.ln_eps);
        let a = mha_full(&n, &n, &l.self_attn, cfg.num_heads, Some(&mask), None);
        x.add_assign(&a);

        let n = x.layer_norm_rows(&l.cross_norm.g.data, &l.cross_norm.b.data, cfg.ln_eps);
        let a = match cross {
            CrossMode::Block => utterance_cross_attention(
                &n,
                enc,
                assignment,
                &l.cross_attn,
                cfg.num_heads,
                stats.as_deref_mut(),
            )?,
            CrossMode::FullMasked => cross_attention_blockmask_reference(
                &n,
                enc,
                assignment,
                &l.cross_attn,
                cfg.num_heads,
                stats.as_deref_mut(),
            )?,
        };
        x.add_assign(&a);

        let n = x.layer_norm_rows(&l.ff.norm.g.data, &l.ff.norm.b.data, cfg.ln_eps);
        let mut h = n.matmul(&l.ff.w1);
        h.add_row_broadcast(&l.ff.b1.data);
        h.swish_inplace();
        let mut h = h.matmul(&l.ff.w2);
        h.add_row_broadcast(&l.ff.b2.data);
        x.add_assign(&h);
    }

    let x = x.layer_norm_rows(&w.dec_final.g.data, &w.dec_final.b.data, cfg.ln_eps);
    let mut logits = x.matmul(&w.head_w);
    logits.add_row_broadcast(&w.head_b.data);
    Ok(logits)
}

/// Cached projections for row-incremental decoding in document scope.
///
/// Self-attention keys and values are appended row by row as tokens are
/// consumed; cross-attention keys and values are projected once per
/// (layer, utterance) on first use. Cloning a cache forks a hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    pub tokens: Vec<usize>,
    pub assignment: Vec<usize>,
    self_k: Vec<Mat>,
    self_v: Vec<Mat>,
    cross_kv: Vec<Vec<Option<(Mat, Mat)>>>,
}

impl DecoderCache {
    pub fn new(cfg: &ModelConfig, n_utts: usize) -> Self {
        let d = cfg.model_dim;
        DecoderCache {
            tokens: Vec::new(),
            assignment: Vec::new(),
            self_k: (0..cfg.dec_layers).map(|_| Mat::zeros(0, d)).collect(),
            self_v: (0..cfg.dec_layers).map(|_| Mat::zeros(0, d)).collect(),
            cross_kv: (0..cfg.dec_layers).map(|_| vec![None; n_utts]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Consumes one token for utterance `utt` and returns the next-token
/// logits. Equivalent to running [`decoder_forward_full`] over the whole
/// prefix in document scope and reading the last row.
pub fn decoder_step(
    w: &InferWeights,
    cfg: &ModelConfig,
    pe: &Mat,
    enc: &EncodedDoc,
    cache: &mut DecoderCache,
    token: usize,
    utt: usize,
) -> Result<Vec<f64>> {
    let pos = cache.tokens.len();
    if pos >= cfg.max_doc_tokens || pos >= pe.rows {
        return Err(SiclError::Capacity(format!(
            "document position {pos} is beyond the {} supported positions",
            cfg.max_doc_tokens.min(pe.rows)
        )));
    }
    if token >= cfg.vocab_size {
        return Err(contract(format!("token id {token} outside vocabulary")));
    }
    if utt >= enc.utts.len() {
        return Err(contract(format!(
            "assignment refers to utterance {utt} but the document has {}",
            enc.utts.len()
        )));
    }
    if let Some(&last) = cache.assignment.last() {
        if utt < last {
            return Err(contract(format!(
                "assignment must be grouped and ascending; utterance {utt} follows {last}"
            )));
        }
    }
    let d = cfg.model_dim;
    let heads = cfg.num_heads;

    let mut row = w.embed.row(token).to_vec();
    for (a, b) in row.iter_mut().zip(pe.row(pos)) {
        *a += b;
    }

    let mut n = vec![0.0; d];
    for (li, l) in w.dec.iter().enumerate() {
        kernels::layer_norm_row(&row, &l.self_norm.g.data, &l.self_norm.b.data, cfg.ln_eps, &mut n);
        let k_new = kernels::matmul(&n, &l.self_attn.wk.data, 1, d, d);
        let v_new = kernels::matmul(&n, &l.self_attn.wv.data, 1, d, d);
        cache.self_k[li].push_row(&k_new);
        cache.self_v[li].push_row(&v_new);
        let a = mha_row(&n, &cache.self_k[li], &cache.self_v[li], &l.self_attn, heads);
        for (r, v) in row.iter_mut().zip(a) {
            *r += v;
        }

        kernels::layer_norm_row(&row, &l.cross_norm.g.data, &l.cross_norm.b.data, cfg.ln_eps, &mut n);
        let (ck, cv) = cache.cross_kv[li][utt].get_or_insert_with(|| {
            (enc.utts[utt].matmul(&l.cross_attn.wk), enc.utts[utt].matmul(&l.cross_attn.wv))
        });
        let a = mha_row(&n, ck, cv, &l.cross_attn, heads);
        for (r, v) in row.iter_mut().zip(a) {
            *r += v;
        }

        kernels::layer_norm_row(&row, &l.ff.norm.g.data, &l.ff.norm.b.data, cfg.ln_eps, &mut n);
        let mut h = kernels::matmul(&n, &l.ff.w1.data, 1, d, cfg.ff_dim);
        for (hv, bv) in h.iter_mut().zip(&l.ff.b1.data) {
            *hv += bv;
        }
        for hv in &mut h {
            *hv = kernels::swish(*hv);
        }
        let mut h = kernels::matmul(&h, &l.ff.w2.data, 1, cfg.ff_dim, d);
        for (hv, bv) in h.iter_mut().zip(&l.ff.b2.data) {
            *hv += bv;
        }
        for (r, v) in row.iter_mut().zip(h) {
            *r += v;
        }
    }

    cache.tokens.push(token);
    cache.assignment.push(utt);

    kernels::layer_norm_row(&row, &w.dec_final.g.data, &w.dec_final.b.data, cfg.ln_eps, &mut n);
    let mut logits = kernels::matmul(&n, &w.head_w.data, 1, d, cfg.vocab_size);
    for (lv, bv) in logits.iter_mut().zip(&w.head_b.data) {
        *lv += bv;
    }
    Ok(logits)
}

/// Dense padded view of a document: one row-major [n x max_len x dim] block
/// plus a validity mask, the shape batched attention kernels consume.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchedDoc {
    pub n: usize,
    pub max_len: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Scatters document rows into padded per-utterance slots.
pub fn doc_to_batch(x: &Mat, assignment: &[usize]) -> Result<BatchedDoc> {
    if assignment.len() != x.rows {
        return Err(contract(format!(
            "{} rows but assignment covers {}",
            x.rows,
            assignment.len()
        )));
    }
    if assignment.windows(2).any(|w| w[0] > w[1]) {
        return Err(contract("assignment must be non-decreasing"));
    }
    let n = assignment.last().map_or(0, |&u| u + 1);
    let mut lengths = vec![0usize; n];
    for &u in assignment {
        lengths[u] += 1;
    }
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let dim = x.cols;
    let mut data = vec![0.0; n * max_len * dim];
    let mut valid = vec![false; n * max_len];
    let mut slot = vec![0usize; n];
    for (i, &u) in assignment.iter().enumerate() {
        let t = slot[u];
        slot[u] += 1;
        data[(u * max_len + t) * dim..(u * max_len + t + 1) * dim].copy_from_slice(x.row(i));
        valid[u * max_len + t] = true;
    }
    Ok(BatchedDoc { n, max_len, dim, data, valid })
}

/// Gathers valid padded slots back into a contiguous document. Inverse of
/// [`doc_to_batch`], bit for bit.
pub fn batch_to_doc(b: &BatchedDoc) -> Result<(Mat, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut assignment = Vec::new();
    for u in 0..b.n {
        let mut ended = false;
        for t in 0..b.max_len {
            if b.valid[u * b.max_len + t] {
                if ended {
                    return Err(contract(format!(
                        "utterance {u} has a gap in its validity mask"
                    )));
                }
                rows.push(&b.data[(u * b.max_len + t) * b.dim..(u * b.max_len + t + 1) * b.dim]);
                assignment.push(u);
            } else {
                ended = true;
            }
        }
    }
    let mut out = Mat::zeros(rows.len(), b.dim);
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(r);
    }
    Ok((out, assignment))
}
