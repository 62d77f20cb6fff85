//! Joint CTC/attention beam search over single utterances, long documents,
//! and documents seeded with in-context examples.
//!
//! All variants run the same beam loop; they differ only in how the decoder
//! state is seeded. Long-form decoding keeps the per-layer key/value cache of
//! the winning hypothesis and carries it into the next utterance, so earlier
//! text is never re-forwarded; a reference implementation that re-runs the
//! full decoder at every step exists for equivalence testing and produces
//! bit-identical hypotheses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{DecodeConfig, ModelConfig};
use crate::data::{Utterance, AMBIGUOUS_CHARS};
use crate::error::{contract, Result, SiclError};
use crate::mat::Mat;
use crate::model::decoder::{
    decoder_forward_full, decoder_step, CrossMode, DecoderCache, SelfAttnScope,
};
use crate::model::encoder::{encode_document_infer, encoder_infer, EncodedDoc};
use crate::model::weights::InferWeights;
use crate::model::Model;
use crate::objectives::{logsumexp, CtcPrefixScorer, CtcPrefixState};
use crate::vocab::{self, CTC_BLANK, CTC_DIM, EOU, LETTER_BASE, SOS, SPACE};

/// Inference-ready snapshot of a model: materialized weights plus the
/// positional tables.
pub struct DecodeModel {
    pub cfg: ModelConfig,
    pub w: InferWeights,
    pub pe_enc: Mat,
    pub pe_dec: Mat,
}

impl DecodeModel {
    pub fn new(model: &Model) -> Self {
        DecodeModel {
            cfg: model.cfg.clone(),
            w: model.infer_weights(),
            pe_enc: model.pe_enc.clone(),
            pe_dec: model.pe_dec.clone(),
        }
    }

    /// Per-frame CTC log-probabilities for one encoded utterance.
    fn ctc_log_probs(&self, enc_utt: &Mat) -> Vec<f64> {
        let mut m = enc_utt.matmul(&self.w.ctc_w);
        m.add_row_broadcast(&self.w.ctc_b.data);
        m.log_softmax_rows();
        m.data
    }

    fn prefix_scorer(&self, enc_utt: &Mat) -> CtcPrefixScorer {
        CtcPrefixScorer::new(self.ctc_log_probs(enc_utt), enc_utt.rows, CTC_DIM, CTC_BLANK)
    }
}

/// A decoded utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Content tokens; the closing end-of-utterance marker is implicit.
    pub tokens: Vec<usize>,
    pub text: String,
    /// Sum of decoder log-probabilities, including the end marker.
    pub att_score: f64,
    /// CTC score of the token sequence (prefix score while unfinished).
    pub ctc_score: f64,
    /// The pruning and ranking score the beam search used.
    pub joint_score: f64,
    pub finished: bool,
    /// No hypothesis emitted the end marker within the token budget.
    pub truncated: bool,
}

/// An ordered speech/text exemplar fed to the decoder before the target.
#[derive(Clone, Debug)]
pub struct ContextItem {
    pub id: String,
    pub speaker: String,
    pub features: Mat,
    pub transcription: String,
}

/// The in-context examples for one decode, oldest first.
#[derive(Clone, Debug, Default)]
pub struct ContextSet {
    pub items: Vec<ContextItem>,
}

impl ContextSet {
    pub fn from_utterances(utts: &[&Utterance]) -> ContextSet {
        ContextSet {
            items: utts
                .iter()
                .map(|u| ContextItem {
                    id: u.id.clone(),
                    speaker: u.speaker.clone(),
                    features: u.features.clone(),
                    transcription: u.transcription.clone(),
                })
                .collect(),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.id.clone()).collect()
    }

    /// Decoder positions the context alone will occupy.
    fn token_cost(&self) -> usize {
        self.items.iter().map(|i| i.transcription.chars().count() + 1).sum()
    }
}

/// Decoder state threaded through the beam search. The cached variant
/// appends to per-layer key/value tensors; the reference variant replays the
/// whole prefix through the full forward pass at every step. Both produce
/// bit-identical logits.
#[derive(Clone)]
enum Stepper {
    Cached(DecoderCache),
    Reference { input: Vec<usize>, assignment: Vec<usize> },
}

impl Stepper {
    fn fresh(dm: &DecodeModel, n_utts: usize, cached: bool) -> Stepper {
        if cached {
            Stepper::Cached(DecoderCache::new(&dm.cfg, n_utts))
        } else {
            Stepper::Reference { input: Vec::new(), assignment: Vec::new() }
        }
    }

    fn step(
        &mut self,
        dm: &DecodeModel,
        enc: &EncodedDoc,
        token: usize,
        utt: usize,
    ) -> Result<Vec<f64>> {
        match self {
            Stepper::Cached(cache) => {
                decoder_step(&dm.w, &dm.cfg, &dm.pe_dec, enc, cache, token, utt)
            }
            Stepper::Reference { input, assignment } => {
                input.push(token);
                assignment.push(utt);
                let logits = decoder_forward_full(
                    &dm.w,
                    &dm.cfg,
                    &dm.pe_dec,
                    input,
                    assignment,
                    enc,
                    SelfAttnScope::Document,
                    CrossMode::Block,
                    None,
                )?;
                Ok(logits.row(logits.rows - 1).to_vec())
            }
        }
    }
}

fn log_softmax_vec(logits: &[f64]) -> Vec<f64> {
    let z = logsumexp(logits.iter().copied());
    logits.iter().map(|&v| v - z).collect()
}

/// Combines the two scores without producing NaN at the endpoints, where one
/// side may be negative infinity with weight zero.
fn joint(lambda: f64, ctc: f64, att: f64) -> f64 {
    if lambda == 0.0 {
        att
    } else if lambda == 1.0 {
        ctc
    } else {
        lambda * ctc + (1.0 - lambda) * att
    }
}

struct Beam {
    stepper: Stepper,
    /// Log-softmax over the next token.
    logp: Vec<f64>,
    tokens: Vec<usize>,
    att: f64,
    ctc_state: CtcPrefixState,
}

struct FinishedHyp {
    tokens: Vec<usize>,
    att: f64,
    ctc: f64,
    joint: f64,
    /// Stepper state before the end marker was consumed; long-form decoding
    /// continues from here.
    stepper: Stepper,
}

/// Expands beams over one utterance until every survivor has emitted the end
/// marker or the token budget runs out. `seed` must already have consumed
/// the token preceding the target utterance (start marker or the previous
/// utterance's end marker), with `seed_logits` its output.
fn beam_decode(
    dm: &DecodeModel,
    enc: &EncodedDoc,
    scorer: &CtcPrefixScorer,
    seed: Stepper,
    seed_logits: Vec<f64>,
    utt: usize,
    dcfg: &DecodeConfig,
) -> Result<(Hypothesis, Stepper)> {
    if dcfg.beam_size == 0 {
        return Err(contract("beam size must be at least 1"));
    }
    let lam = dcfg.lambda_dec;
    if !(0.0..=1.0).contains(&lam) {
        return Err(contract(format!("lambda_dec {lam} outside [0, 1]")));
    }
    let mut beams = vec![Beam {
        stepper: seed,
        logp: log_softmax_vec(&seed_logits),
        tokens: Vec::new(),
        att: 0.0,
        ctc_state: scorer.initial_state(),
    }];
    let mut finished: Vec<FinishedHyp> = Vec::new();

    struct Cand {
        parent: usize,
        token: usize,
        att: f64,
        ctc: f64,
        ctc_state: Option<CtcPrefixState>,
        joint: f64,
    }

    // The end marker competes with every letter for beam slots; a hypothesis
    // counts as finished only if the marker actually wins one, so a search
    // that runs out of budget first reports truncation instead of silently
    // closing the best prefix.
    for _ in 0..dcfg.max_tokens_per_utterance {
        let mut cands: Vec<Cand> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            let penalty = dcfg.length_penalty * b.tokens.len() as f64;
            let fin_att = b.att + b.logp[EOU];
            let fin_ctc = scorer.finish(&b.ctc_state);
            cands.push(Cand {
                parent: bi,
                token: EOU,
                att: fin_att,
                ctc: fin_ctc,
                ctc_state: None,
                joint: joint(lam, fin_ctc, fin_att) + penalty,
            });
            for token in LETTER_BASE..=SPACE {
                let state = scorer.extend(&b.ctc_state, token);
                let att = b.att + b.logp[token];
                let score = joint(lam, state.log_psi, att) + penalty + dcfg.length_penalty;
                cands.push(Cand {
                    parent: bi,
                    token,
                    att,
                    ctc: state.log_psi,
                    ctc_state: Some(state),
                    joint: score,
                });
            }
        }
        cands.sort_by(|a, b| b.joint.partial_cmp(&a.joint).unwrap());
        cands.truncate(dcfg.beam_size);

        let mut next = Vec::new();
        for c in cands {
            if c.token == EOU {
                finished.push(FinishedHyp {
                    tokens: beams[c.parent].tokens.clone(),
                    att: c.att,
                    ctc: c.ctc,
                    joint: c.joint,
                    stepper: beams[c.parent].stepper.clone(),
                });
                continue;
            }
            let mut stepper = beams[c.parent].stepper.clone();
            let logits = stepper.step(dm, enc, c.token, utt)?;
            let mut tokens = beams[c.parent].tokens.clone();
            tokens.push(c.token);
            next.push(Beam {
                stepper,
                logp: log_softmax_vec(&logits),
                tokens,
                att: c.att,
                ctc_state: c.ctc_state.unwrap(),
            });
        }
        beams = next;
        if beams.is_empty() {
            break;
        }
        // Scores only decay as prefixes grow (log-probabilities and CTC
        // prefix extensions are non-positive), so once the best finished
        // hypothesis outranks every live beam nothing better can appear.
        if dcfg.length_penalty == 0.0 && !finished.is_empty() {
            let best_fin =
                finished.iter().map(|f| f.joint).fold(f64::NEG_INFINITY, f64::max);
            let best_live = beams
                .iter()
                .map(|b| joint(lam, b.ctc_state.log_psi, b.att))
                .fold(f64::NEG_INFINITY, f64::max);
            if best_fin >= best_live {
                break;
            }
        }
    }

    finished.sort_by(|a, b| b.joint.partial_cmp(&a.joint).unwrap());
    if let Some(best) = finished.into_iter().next() {
        let text = vocab::decode(&best.tokens);
        return Ok((
            Hypothesis {
                tokens: best.tokens,
                text,
                att_score: best.att,
                ctc_score: best.ctc,
                joint_score: best.joint,
                finished: true,
                truncated: false,
            },
            best.stepper,
        ));
    }
    // Nothing finished inside the budget: surface the best live prefix and
    // flag the truncation.
    let best = beams
        .into_iter()
        .max_by(|a, b| {
            joint(lam, a.ctc_state.log_psi, a.att)
                .partial_cmp(&joint(lam, b.ctc_state.log_psi, b.att))
                .unwrap()
        })
        .ok_or_else(|| contract("beam search produced no hypothesis"))?;
    let score = joint(lam, best.ctc_state.log_psi, best.att)
        + dcfg.length_penalty * best.tokens.len() as f64;
    let text = vocab::decode(&best.tokens);
    Ok((
        Hypothesis {
            tokens: best.tokens,
            text,
            att_score: best.att,
            ctc_score: best.ctc_state.log_psi,
            joint_score: score,
            finished: false,
            truncated: true,
        },
        best.stepper,
    ))
}

/// Decode a single utterance with no document context.
pub fn decode_utterance(dm: &DecodeModel, feats: &Mat, dcfg: &DecodeConfig) -> Result<Hypothesis> {
    decode_with_context(dm, &ContextSet::default(), feats, dcfg)
}

/// Decode one utterance preceded by in-context speech/text exemplars. The
/// exemplar transcriptions are forced into the decoder exactly as if they had
/// been recognized earlier in the same document.
pub fn decode_with_context(
    dm: &DecodeModel,
    ctx: &ContextSet,
    feats: &Mat,
    dcfg: &DecodeConfig,
) -> Result<Hypothesis> {
    let budget = dm.cfg.max_doc_tokens.min(dm.pe_dec.rows);
    let need = 1 + ctx.token_cost() + dcfg.max_tokens_per_utterance;
    if need > budget {
        return Err(contract(format!(
            "context of {} tokens leaves no room for the target ({need} > {budget})",
            ctx.token_cost()
        )));
    }
    let mut doc_feats: Vec<Mat> = ctx.items.iter().map(|i| i.features.clone()).collect();
    doc_feats.push(feats.clone());
    let enc = encode_document_infer(&dm.w, &dm.cfg, &doc_feats, &dm.pe_enc)?;

    let n_ctx = ctx.items.len();
    let mut stepper = Stepper::fresh(dm, n_ctx + 1, true);
    let mut logits = stepper.step(dm, &enc, SOS, 0)?;
    for (i, item) in ctx.items.iter().enumerate() {
        for t in vocab::encode(&item.transcription) {
            // Teacher forcing: the prediction at this position is discarded.
            stepper.step(dm, &enc, t, i)?;
        }
        logits = stepper.step(dm, &enc, EOU, i + 1)?;
    }
    let scorer = dm.prefix_scorer(&enc.utts[n_ctx]);
    let (hyp, _) = beam_decode(dm, &enc, &scorer, stepper, logits, n_ctx, dcfg)?;
    Ok(hyp)
}

/// Decode a document of consecutive utterances, reusing the winning beam's
/// key/value cache across utterance boundaries.
pub fn decode_longform(dm: &DecodeModel, feats: &[Mat], dcfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    decode_longform_impl(dm, feats, dcfg, true)
}

/// Reference long-form decoder: identical search, but every step re-runs the
/// full decoder over the whole prefix instead of touching a cache. Exists to
/// pin down the cache's correctness; its output must match
/// [`decode_longform`] exactly.
pub fn decode_longform_reference(
    dm: &DecodeModel,
    feats: &[Mat],
    dcfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    decode_longform_impl(dm, feats, dcfg, false)
}

fn decode_longform_impl(
    dm: &DecodeModel,
    feats: &[Mat],
    dcfg: &DecodeConfig,
    cached: bool,
) -> Result<Vec<Hypothesis>> {
    if feats.is_empty() {
        return Err(contract("long-form decoding needs at least one utterance"));
    }
    let budget = dm.cfg.max_doc_tokens.min(dm.pe_dec.rows);
    if 1 + dcfg.max_tokens_per_utterance > budget {
        return Err(SiclError::Capacity(format!(
            "token budget {budget} cannot hold a single utterance of up to {} tokens",
            dcfg.max_tokens_per_utterance
        )));
    }
    let enc = EncodedDoc {
        utts: feats
            .iter()
            .map(|f| encoder_infer(&dm.w, &dm.cfg, f, &dm.pe_enc))
            .collect::<Result<Vec<_>>>()?,
    };

    let mut hyps: Vec<Hypothesis> = Vec::new();
    let mut history: Vec<Vec<usize>> = Vec::new();
    let mut window_start = 0usize;
    // Winning stepper of the previous utterance; its end marker has not been
    // consumed yet.
    let mut carry: Option<Stepper> = None;

    for k in 0..feats.len() {
        // Evict oldest utterances until the retained history plus a
        // worst-case target fits the budget.
        let mut w = window_start;
        loop {
            let hist: usize = history[w..k].iter().map(|t| t.len() + 1).sum();
            if 1 + hist + dcfg.max_tokens_per_utterance <= budget {
                break;
            }
            w += 1;
            debug_assert!(w <= k, "a lone utterance always fits after the budget check");
        }

        let (stepper, logits) = if carry.is_some() && w == window_start {
            // The document continues: consume the previous utterance's end
            // marker, which is assigned to the utterance it introduces.
            let mut st = carry.take().unwrap();
            let lg = st.step(dm, &enc, EOU, k)?;
            (st, lg)
        } else {
            // Fresh window: replay the retained history into a new state.
            window_start = w;
            let mut st = Stepper::fresh(dm, feats.len(), cached);
            let mut lg = st.step(dm, &enc, SOS, w)?;
            for j in w..k {
                for &t in &history[j] {
                    // Replayed history is teacher-forced on its own output.
                    st.step(dm, &enc, t, j)?;
                }
                lg = st.step(dm, &enc, EOU, j + 1)?;
            }
            (st, lg)
        };

        let scorer = dm.prefix_scorer(&enc.utts[k]);
        let (hyp, win) = beam_decode(dm, &enc, &scorer, stepper, logits, k, dcfg)?;
        history.push(hyp.tokens.clone());
        hyps.push(hyp);
        carry = Some(win);
    }
    Ok(hyps)
}

/// One hypothesis as written to `hypotheses.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HypothesisRecord {
    pub id: String,
    pub speaker: String,
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(rename = "hyp")]
    pub hypothesis: String,
    pub att_score: f64,
    pub ctc_score: f64,
    pub joint_score: f64,
    pub context_ids: Vec<String>,
}

pub fn write_hypotheses(path: &Path, records: &[HypothesisRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<HypothesisRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub(crate) fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn error_rate(ref_len: usize, hyp_len: usize, dist: usize) -> Result<f64> {
    if ref_len == 0 {
        if hyp_len == 0 {
            return Ok(0.0);
        }
        return Err(contract("empty reference with non-empty hypothesis"));
    }
    Ok(100.0 * dist as f64 / ref_len as f64)
}

/// Word error rate in percent.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    error_rate(r.len(), h.len(), edit_distance(&r, &h))
}

/// Character error rate in percent.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    error_rate(r.len(), h.len(), edit_distance(&r, &h))
}

/// Corpus-level word error rate: total edits over total reference words.
pub fn corpus_wer(pairs: &[(String, String)]) -> Result<f64> {
    let mut dist = 0usize;
    let mut len = 0usize;
    for (reference, hypothesis) in pairs {
        let r: Vec<&str> = reference.split_whitespace().collect();
        let h: Vec<&str> = hypothesis.split_whitespace().collect();
        if r.is_empty() && !h.is_empty() {
            return Err(contract("empty reference with non-empty hypothesis"));
        }
        dist += edit_distance(&r, &h);
        len += r.len();
    }
    if len == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * dist as f64 / len as f64)
}

/// Corpus-level character error rate: total edits over total reference
/// characters.
pub fn corpus_cer(pairs: &[(String, String)]) -> Result<f64> {
    let mut dist = 0usize;
    let mut len = 0usize;
    for (reference, hypothesis) in pairs {
        let r: Vec<char> = reference.chars().collect();
        let h: Vec<char> = hypothesis.chars().collect();
        if r.is_empty() && !h.is_empty() {
            return Err(contract("empty reference with non-empty hypothesis"));
        }
        dist += edit_distance(&r, &h);
        len += r.len();
    }
    if len == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * dist as f64 / len as f64)
}

/// Fraction of tagged entity occurrences whose exact surface form appears as
/// a word of the paired hypothesis. Case-sensitive; errors when no entity
/// occurs at all.
pub fn entity_recall(pairs: &[(Vec<String>, String)]) -> Result<f64> {
    let mut total = 0usize;
    let mut hit = 0usize;
    for (entities, hypothesis) in pairs {
        let words: Vec<&str> = hypothesis.split_whitespace().collect();
        for e in entities {
            total += 1;
            if words.iter().any(|w| w == e) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(contract("no entity occurrences to score"));
    }
    Ok(hit as f64 / total as f64)
}

/// Aligns hypothesis characters to reference characters with a minimum-edit
/// trace and returns, per reference position, the aligned hypothesis
/// character (None for a deletion). Ties prefer substitution, then deletion.
fn align_chars(r: &[char], h: &[char]) -> Vec<Option<char>> {
    let rows = r.len() + 1;
    let cols = h.len() + 1;
    let mut dp = vec![0usize; rows * cols];
    for i in 0..rows {
        dp[i * cols] = i;
    }
    for j in 0..cols {
        dp[j] = j;
    }
    for i in 1..rows {
        for j in 1..cols {
            let sub = dp[(i - 1) * cols + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            dp[i * cols + j] = sub.min(dp[(i - 1) * cols + j] + 1).min(dp[i * cols + j - 1] + 1);
        }
    }
    let mut out = vec![None; r.len()];
    let (mut i, mut j) = (r.len(), h.len());
    while i > 0 || j > 0 {
        let cur = dp[i * cols + j];
        if i > 0 && j > 0 && cur == dp[(i - 1) * cols + j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            out[i - 1] = Some(h[j - 1]);
            i -= 1;
            j -= 1;
        } else if i > 0 && cur == dp[(i - 1) * cols + j] + 1 {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out
}

/// Accuracy over the acoustically ambiguous letters of the references: the
/// fraction of `v`/`w` reference positions whose aligned hypothesis character
/// matches. Errors if the references contain no ambiguous letters.
pub fn ambiguous_char_accuracy(pairs: &[(String, String)]) -> Result<f64> {
    let mut total = 0usize;
    let mut hit = 0usize;
    for (reference, hypothesis) in pairs {
        let r: Vec<char> = reference.chars().collect();
        let h: Vec<char> = hypothesis.chars().collect();
        let aligned = align_chars(&r, &h);
        for (idx, &c) in r.iter().enumerate() {
            if AMBIGUOUS_CHARS.contains(&c) {
                total += 1;
                if aligned[idx] == Some(c) {
                    hit += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(contract("references contain no ambiguous letters"));
    }
    Ok(hit as f64 / total as f64)
}
