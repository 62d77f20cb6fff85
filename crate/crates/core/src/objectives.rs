//! Training objectives: CTC loss (forward-backward DP), attention
//! cross-entropy over the output document, their hybrid combination, and the
//! incremental CTC prefix scorer used by joint beam search.
//!
//! `ctc_brute_force` enumerates alignment paths outright and exists purely
//! as a test oracle for the DP implementation.

use sicl_tensor::{CustomCtx, CustomOp, Tape, TensorId};

use crate::error::{contract, Result};

/// log(exp(a) + exp(b)) without leaving log space.
pub fn logadd(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn logsumexp(xs: impl Iterator<Item = f64>) -> f64 {
    xs.fold(f64::NEG_INFINITY, logadd)
}

/// Blank-augmented target: blank, y1, blank, y2, ..., yL, blank.
fn extend_target(target: &[usize], blank: usize) -> Vec<usize> {
    let mut z = Vec::with_capacity(2 * target.len() + 1);
    z.push(blank);
    for &y in target {
        z.push(y);
        z.push(blank);
    }
    z
}

/// CTC negative log-likelihood by explicit enumeration of all
/// `num_classes^T` alignment paths. Only usable at toy sizes; guards reject
/// anything larger.
pub fn ctc_brute_force(
    log_probs: &[f64],
    t_len: usize,
    num_classes: usize,
    blank: usize,
    target: &[usize],
) -> Result<f64> {
    if t_len > 8 {
        return Err(contract(format!("brute force limited to T <= 8, got {t_len}")));
    }
    if num_classes > 5 {
        return Err(contract(format!(
            "brute force limited to 4 labels + blank, got {num_classes} classes"
        )));
    }
    assert_eq!(log_probs.len(), t_len * num_classes, "log_probs shape");
    let mut total = 0.0_f64;
    let n_paths = num_classes.pow(t_len as u32);
    let mut path = vec![0usize; t_len];
    for mut code in 0..n_paths {
        for slot in path.iter_mut() {
            *slot = code % num_classes;
            code /= num_classes;
        }
        // Collapse: merge adjacent repeats, then drop blanks.
        let mut collapsed = Vec::with_capacity(t_len);
        let mut prev = usize::MAX;
        for &c in &path {
            if c != prev && c != blank {
                collapsed.push(c);
            }
            prev = c;
        }
        if collapsed == target {
            let logp: f64 = path.iter().enumerate().map(|(t, &c)| log_probs[t * num_classes + c]).sum();
            total += logp.exp();
        }
    }
    Ok(if total == 0.0 { f64::INFINITY } else { -total.ln() })
}

/// CTC forward-backward in log space. Returns the loss and, when the target
/// is realizable, d(loss)/d(log_probs) as a dense [T x K] buffer.
fn ctc_forward_backward(
    lp: &[f64],
    t_len: usize,
    num_classes: usize,
    blank: usize,
    target: &[usize],
) -> (f64, Option<Vec<f64>>) {
    if t_len == 0 {
        return (if target.is_empty() { 0.0 } else { f64::INFINITY }, None);
    }
    let z = extend_target(target, blank);
    let s_len = z.len();
    let at = |t: usize, s: usize| t * s_len + s;
    let lpv = |t: usize, s: usize| lp[t * num_classes + z[s]];

    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[at(0, 0)] = lpv(0, 0);
    if s_len > 1 {
        alpha[at(0, 1)] = lpv(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[at(t - 1, s)];
            if s >= 1 {
                acc = logadd(acc, alpha[at(t - 1, s - 1)]);
            }
            // Skip transition: allowed when entering a non-blank that does
            // not repeat the previous non-blank.
            if s >= 2 && z[s] != blank && z[s] != z[s - 2] {
                acc = logadd(acc, alpha[at(t - 1, s - 2)]);
            }
            alpha[at(t, s)] = acc + lpv(t, s);
        }
    }
    let log_z = if s_len > 1 {
        logadd(alpha[at(t_len - 1, s_len - 1)], alpha[at(t_len - 1, s_len - 2)])
    } else {
        alpha[at(t_len - 1, 0)]
    };
    if log_z == f64::NEG_INFINITY {
        return (f64::INFINITY, None);
    }

    // beta excludes the emission at its own frame; the occupancy
    // alpha + beta then counts each path exactly once.
    let mut beta = vec![f64::NEG_INFINITY; t_len * s_len];
    beta[at(t_len - 1, s_len - 1)] = 0.0;
    if s_len > 1 {
        beta[at(t_len - 1, s_len - 2)] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[at(t + 1, s)] + lpv(t + 1, s);
            if s + 1 < s_len {
                acc = logadd(acc, beta[at(t + 1, s + 1)] + lpv(t + 1, s + 1));
            }
            if s + 2 < s_len && z[s + 2] != blank && z[s + 2] != z[s] {
                acc = logadd(acc, beta[at(t + 1, s + 2)] + lpv(t + 1, s + 2));
            }
            beta[at(t, s)] = acc;
        }
    }

    let mut grad = vec![0.0; t_len * num_classes];
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[at(t, s)] + beta[at(t, s)];
            if occ != f64::NEG_INFINITY {
                grad[t * num_classes + z[s]] -= (occ - log_z).exp();
            }
        }
    }
    (-log_z, Some(grad))
}

/// CTC negative log-likelihood of `target` given per-frame log-probs.
/// Unrealizable targets return +inf (a documented sentinel, not an error).
pub fn ctc_loss_value(
    log_probs: &[f64],
    t_len: usize,
    num_classes: usize,
    blank: usize,
    target: &[usize],
) -> f64 {
    ctc_forward_backward(log_probs, t_len, num_classes, blank, target).0
}

struct CtcLossOp {
    grad: Vec<f64>,
}

impl CustomOp for CtcLossOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(&self, ctx: CustomCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.out_grad[0];
        vec![Some(self.grad.iter().map(|d| d * g).collect())]
    }
}

/// Record CTC loss on the tape. `log_probs` must be a [T x K] tensor of
/// log-softmax rows. Returns `None` when the target is unrealizable in T
/// frames (callers skip such utterances and count them).
pub fn ctc_loss_tape(
    tape: &mut Tape,
    log_probs: TensorId,
    blank: usize,
    target: &[usize],
) -> Option<TensorId> {
    let shape = tape.shape(log_probs).to_vec();
    assert_eq!(shape.len(), 2, "ctc_loss expects [T, K] log-probs, got {shape:?}");
    let (t_len, k) = (shape[0], shape[1]);
    let (loss, grad) = ctc_forward_backward(tape.value(log_probs), t_len, k, blank, target);
    let grad = grad?;
    Some(tape.custom(&[log_probs], vec![loss], vec![1], Box::new(CtcLossOp { grad })))
}

/// Mean negative log-likelihood of `targets` under `logits` over positions
/// where `mask` is true (all positions when absent).
pub fn attention_ce_loss(
    tape: &mut Tape,
    logits: TensorId,
    targets: &[usize],
    mask: Option<&[bool]>,
) -> Result<TensorId> {
    let rows = tape.shape(logits)[0];
    if rows != targets.len() {
        return Err(contract(format!(
            "logits rows {rows} != target length {}",
            targets.len()
        )));
    }
    let all_true;
    let mask = match mask {
        Some(m) => {
            if m.len() != targets.len() {
                return Err(contract("loss mask length mismatch"));
            }
            if !m.iter().any(|&b| b) {
                return Err(contract("attention loss mask is all false"));
            }
            m
        }
        None => {
            all_true = vec![true; targets.len()];
            &all_true[..]
        }
    };
    let ls = tape.log_softmax(logits, 1);
    let picked = tape.pick(ls, targets);
    let nll = tape.scale(picked, -1.0);
    Ok(tape.masked_mean(nll, mask))
}

/// lambda * mean(ctc terms) + (1 - lambda) * attention loss. Empty ctc term
/// lists (every target unrealizable) contribute zero.
pub fn hybrid_loss(
    tape: &mut Tape,
    ctc_terms: &[TensorId],
    att_loss: TensorId,
    lambda: f64,
) -> TensorId {
    let att_part = tape.scale(att_loss, 1.0 - lambda);
    if ctc_terms.is_empty() || lambda == 0.0 {
        return att_part;
    }
    let stacked = if ctc_terms.len() == 1 {
        ctc_terms[0]
    } else {
        let mut acc = ctc_terms[0];
        for &t in &ctc_terms[1..] {
            acc = tape.add(acc, t);
        }
        acc
    };
    let mean_ctc = tape.scale(stacked, 1.0 / ctc_terms.len() as f64);
    let ctc_part = tape.scale(mean_ctc, lambda);
    tape.add(ctc_part, att_part)
}

/// Incremental CTC prefix scoring over one utterance's frame log-probs,
/// following the standard hybrid-decoding recursion: a hypothesis tracks,
/// per frame, the probability of having emitted exactly its prefix with the
/// last frame blank vs. non-blank.
pub struct CtcPrefixScorer {
    lp: Vec<f64>,
    t_len: usize,
    num_classes: usize,
    blank: usize,
}

#[derive(Clone, Debug)]
pub struct CtcPrefixState {
    log_b: Vec<f64>,
    log_nb: Vec<f64>,
    last: Option<usize>,
    /// ln of the prefix probability (mass of all emissions starting with
    /// this prefix); 0 for the empty prefix.
    pub log_psi: f64,
}

impl CtcPrefixScorer {
    pub fn new(log_probs: Vec<f64>, t_len: usize, num_classes: usize, blank: usize) -> Self {
        assert_eq!(log_probs.len(), t_len * num_classes, "log_probs shape");
        assert!(t_len > 0, "prefix scorer needs at least one frame");
        CtcPrefixScorer { lp: log_probs, t_len, num_classes, blank }
    }

    fn lp(&self, t: usize, c: usize) -> f64 {
        self.lp[t * self.num_classes + c]
    }

    /// State of the empty prefix: only all-blank paths, nothing emitted.
    pub fn initial_state(&self) -> CtcPrefixState {
        let mut log_b = Vec::with_capacity(self.t_len);
        let mut acc = 0.0;
        for t in 0..self.t_len {
            acc += self.lp(t, self.blank);
            log_b.push(acc);
        }
        CtcPrefixState {
            log_b,
            log_nb: vec![f64::NEG_INFINITY; self.t_len],
            last: None,
            log_psi: 0.0,
        }
    }

    /// Extend a prefix by `label`; returns the new state, whose `log_psi` is
    /// the new cumulative CTC prefix score.
    pub fn extend(&self, state: &CtcPrefixState, label: usize) -> CtcPrefixState {
        assert!(label < self.num_classes && label != self.blank, "label {label} out of range");
        let t_len = self.t_len;
        let mut log_b = vec![f64::NEG_INFINITY; t_len];
        let mut log_nb = vec![f64::NEG_INFINITY; t_len];
        let empty = state.last.is_none();
        let mut psi = f64::NEG_INFINITY;
        for t in 0..t_len {
            // Probability mass arriving in `label` at frame t from the old
            // prefix: previous frame ended in blank, or in a different
            // label. The empty prefix contributes mass 1 before frame 0.
            let b_prev = if t == 0 {
                if empty { 0.0 } else { f64::NEG_INFINITY }
            } else {
                state.log_b[t - 1]
            };
            let nb_prev = if t == 0 || state.last == Some(label) {
                f64::NEG_INFINITY
            } else {
                state.log_nb[t - 1]
            };
            let new_emit = self.lp(t, label) + logadd(b_prev, nb_prev);
            psi = logadd(psi, new_emit);
            let nb_cont = if t == 0 { f64::NEG_INFINITY } else { log_nb[t - 1] + self.lp(t, label) };
            log_nb[t] = logadd(new_emit, nb_cont);
            log_b[t] = if t == 0 {
                f64::NEG_INFINITY
            } else {
                self.lp(t, self.blank) + logadd(log_b[t - 1], log_nb[t - 1])
            };
        }
        CtcPrefixState { log_b, log_nb, last: Some(label), log_psi: psi }
    }

    /// ln P(the complete emission equals exactly this prefix). For a
    /// finished hypothesis this equals -ctc_loss of its token sequence.
    pub fn finish(&self, state: &CtcPrefixState) -> f64 {
        logadd(state.log_b[self.t_len - 1], state.log_nb[self.t_len - 1])
    }
}

/// One scoring step as a (delta, new state) pair: the delta is the change in
/// cumulative CTC score from appending `label`.
pub fn ctc_prefix_score(
    scorer: &CtcPrefixScorer,
    state: &CtcPrefixState,
    label: usize,
) -> (f64, CtcPrefixState) {
    let new_state = scorer.extend(state, label);
    (new_state.log_psi - state.log_psi, new_state)
}
