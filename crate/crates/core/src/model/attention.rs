//! Multi-head attention, shared between the training tape, the full-matrix
//! inference path, and the row-incremental decoding path.
//!
//! All three use the same kernels and the same per-head slicing order, so a
//! given query row produces bit-identical output no matter which path
//! computes it. Masks are additive: 0 for allowed, -inf for blocked, which
//! yields exactly zero attention weight (and zero gradient) on blocked
//! positions.

use sicl_tensor::{kernels, Tape, TensorId};

use crate::mat::Mat;

pub const NEG_INF: f64 = f64::NEG_INFINITY;

/// Projection weights for one attention module. `T` is `TensorId` on the
/// training tape and `Mat` for inference.
#[derive(Debug, Clone)]
pub struct Attn<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

pub type AttnIds = Attn<TensorId>;
pub type AttnW = Attn<Mat>;

/// Lower-triangular causal mask for queries at positions
/// `offset..offset+lq` over `lk` keys: query i may see keys 0..=offset+i.
pub fn causal_mask(lq: usize, lk: usize, offset: usize) -> Vec<f64> {
    let mut m = vec![0.0; lq * lk];
    for i in 0..lq {
        for j in 0..lk {
            if j > offset + i {
                m[i * lk + j] = NEG_INF;
            }
        }
    }
    m
}

/// Causal mask additionally restricted to within-utterance blocks: query i
/// sees key j only when both belong to the same utterance and j <= i.
pub fn block_causal_mask(assignment: &[usize]) -> Vec<f64> {
    let l = assignment.len();
    let mut m = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            if j > i || assignment[j] != assignment[i] {
                m[i * l + j] = NEG_INF;
            }
        }
    }
    m
}

/// Block-diagonal cross-attention mask over concatenated encoder frames:
/// query row r (of utterance assignment[r]) may see only frames whose
/// utterance matches. `frame_utts[j]` is the utterance of concatenated
/// frame j.
pub fn block_cross_mask(assignment: &[usize], frame_utts: &[usize]) -> Vec<f64> {
    let (lq, lk) = (assignment.len(), frame_utts.len());
    let mut m = vec![0.0; lq * lk];
    for i in 0..lq {
        for j in 0..lk {
            if frame_utts[j] != assignment[i] {
                m[i * lk + j] = NEG_INF;
            }
        }
    }
    m
}

/// Multi-head attention on the tape. `mask`, when present, is an additive
/// [lq x lk] matrix.
pub fn mha_tape(
    tape: &mut Tape,
    q_in: TensorId,
    kv_in: TensorId,
    w: &AttnIds,
    heads: usize,
    mask: Option<&[f64]>,
) -> TensorId {
    let d = tape.shape(q_in)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let lq = tape.shape(q_in)[0];
    let lk = tape.shape(kv_in)[0];
    let q = tape.matmul(q_in, w.wq);
    let k = tape.matmul(kv_in, w.wk);
    let v = tape.matmul(kv_in, w.wv);
    let mask_id = mask.map(|m| {
        assert_eq!(m.len(), lq * lk, "mask shape");
        tape.constant(m.to_vec(), vec![lq, lk])
    });
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, scale);
        let masked = match mask_id {
            Some(m) => tape.add(scaled, m),
            None => scaled,
        };
        let attn = tape.softmax(masked, 1);
        head_outs.push(tape.matmul(attn, vh));
    }
    let concat = tape.concat_cols(&head_outs);
    tape.matmul(concat, w.wo)
}

/// Counts score-matrix elements currently materialized by cross-attention,
/// and the peak. The bench reads the peak; everything else ignores it.
#[derive(Debug, Default, Clone)]
pub struct ScoreStats {
    pub current: usize,
    pub peak: usize,
}

impl ScoreStats {
    pub fn alloc(&mut self, elems: usize) {
        self.current += elems;
        self.peak = self.peak.max(self.current);
    }

    pub fn free(&mut self, elems: usize) {
        self.current -= elems;
    }
}

/// Full-matrix multi-head attention for inference. Mirrors `mha_tape`
/// op-for-op. When `stats` is given, score matrices for all heads are
/// materialized simultaneously (as a batched implementation would) and
/// counted before being consumed.
pub fn mha_full(
    q_in: &Mat,
    kv_in: &Mat,
    w: &AttnW,
    heads: usize,
    mask: Option<&[f64]>,
    stats: Option<&mut ScoreStats>,
) -> Mat {
    let d = q_in.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = q_in.matmul(&w.wq);
    let k = kv_in.matmul(&w.wk);
    let v = kv_in.matmul(&w.wv);
    let (lq, lk) = (q.rows, k.rows);
    if let Some(m) = mask {
        assert_eq!(m.len(), lq * lk, "mask shape");
    }

    // Phase 1: materialize every head's attention weights.
    let mut weights: Vec<Mat> = Vec::with_capacity(heads);
    let mut counted = 0usize;
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh);
        let kh = k.slice_cols(h * dh, dh);
        let mut scores = qh.matmul_nt(&kh);
        counted += scores.data.len();
        scores.scale(scale);
        if let Some(m) = mask {
            for (s, &mv) in scores.data.iter_mut().zip(m.iter()) {
                *s += mv;
            }
        }
        scores.softmax_rows();
        weights.push(scores);
    }
    let mut stats = stats;
    if let Some(stats) = stats.as_deref_mut() {
        stats.alloc(counted);
    }

    // Phase 2: consume the weights into per-head context vectors.
    let mut head_outs: Vec<Mat> = Vec::with_capacity(heads);
    for (h, attn) in weights.iter().enumerate() {
        let vh = v.slice_cols(h * dh, dh);
        head_outs.push(attn.matmul(&vh));
    }
    drop(weights);
    if let Some(stats) = stats.as_deref_mut() {
        stats.free(counted);
    }
    let refs: Vec<&Mat> = head_outs.iter().collect();
    Mat::concat_cols(&refs).matmul(&w.wo)
}

/// One query row against cached keys/values (both [len x d], already
/// projected). Returns the attended output row (after Wo). The per-head dot
/// products run over ascending key indices, matching the full-matrix path
/// bit-for-bit on the shared prefix.
pub fn mha_row(q_in_row: &[f64], k_cache: &Mat, v_cache: &Mat, w: &AttnW, heads: usize) -> Vec<f64> {
    let d = q_in_row.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let len = k_cache.rows;
    let q = kernels::matmul(q_in_row, &w.wq.data, 1, d, d);
    let mut concat = vec![0.0; d];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let mut scores: Vec<f64> = (0..len)
            .map(|j| kernels::dot(qh, &k_cache.row(j)[h * dh..(h + 1) * dh]) * scale)
            .collect();
        kernels::softmax_row_inplace(&mut scores);
        let out = &mut concat[h * dh..(h + 1) * dh];
        for (j, &a) in scores.iter().enumerate() {
            let vh = &v_cache.row(j)[h * dh..(h + 1) * dh];
            for (o, &vv) in out.iter_mut().zip(vh.iter()) {
                *o += a * vv;
            }
        }
    }
    kernels::matmul(&concat, &w.wo.data, 1, d, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn rand_attn(rng: &mut ChaCha8Rng, d: usize) -> AttnW {
        AttnW {
            wq: rand_mat(rng, d, d),
            wk: rand_mat(rng, d, d),
            wv: rand_mat(rng, d, d),
            wo: rand_mat(rng, d, d),
        }
    }

    /// Tape and full-matrix paths produce identical bits.
    #[test]
    fn tape_and_full_inference_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 8;
        let heads = 2;
        let q = rand_mat(&mut rng, 5, d);
        let kv = rand_mat(&mut rng, 7, d);
        let w = rand_attn(&mut rng, d);
        let mask = causal_mask(5, 7, 2);

        let full = mha_full(&q, &kv, &w, heads, Some(&mask), None);

        let mut tape = Tape::new();
        let qt = tape.constant(q.data.clone(), vec![5, d]);
        let kvt = tape.constant(kv.data.clone(), vec![7, d]);
        let ids = AttnIds {
            wq: tape.constant(w.wq.data.clone(), vec![d, d]),
            wk: tape.constant(w.wk.data.clone(), vec![d, d]),
            wv: tape.constant(w.wv.data.clone(), vec![d, d]),
            wo: tape.constant(w.wo.data.clone(), vec![d, d]),
        };
        let out = mha_tape(&mut tape, qt, kvt, &ids, heads, Some(&mask));
        assert_eq!(tape.value(out), full.data.as_slice());
    }

    /// The row path over a causal prefix equals the corresponding row of the
    /// full-matrix causal result.
    #[test]
    fn row_path_matches_full_causal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 8;
        let heads = 4;
        let l = 6;
        let x = rand_mat(&mut rng, l, d);
        let w = rand_attn(&mut rng, d);
        let mask = causal_mask(l, l, 0);
        let full = mha_full(&x, &x, &w, heads, Some(&mask), None);

        let k_all = x.matmul(&w.wk);
        let v_all = x.matmul(&w.wv);
        for i in 0..l {
            let k_cache = k_all.slice_rows(0, i + 1);
            let v_cache = v_all.slice_rows(0, i + 1);
            let row = mha_row(x.row(i), &k_cache, &v_cache, &w, heads);
            assert_eq!(row.as_slice(), full.row(i), "row {i} diverged");
        }
    }

    #[test]
    fn masked_positions_get_exactly_zero_weight() {
        let mask = block_cross_mask(&[0, 0, 1], &[0, 0, 1, 1, 1]);
        assert_eq!(mask[0 * 5 + 2], NEG_INF);
        assert_eq!(mask[2 * 5 + 0], NEG_INF);
        assert_eq!(mask[2 * 5 + 4], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let q = rand_mat(&mut rng, 3, d);
        let kv = rand_mat(&mut rng, 5, d);
        let w = rand_attn(&mut rng, d);
        // Inspect the weights by running one head with V = identity-ish:
        // instead check output invariance: perturbing masked kv rows leaves
        // outputs bit-identical.
        let base = mha_full(&q, &kv, &w, 2, Some(&mask), None);
        let mut kv2 = kv.clone();
        for x in kv2.row_mut(3) {
            *x += 100.0;
        }
        let out2 = mha_full(&q, &kv2, &w, 2, Some(&mask), None);
        assert_eq!(base.row(0), out2.row(0), "utterance-0 query saw utterance-1 frame");
        assert_eq!(base.row(1), out2.row(1));
        assert_ne!(base.row(2), out2.row(2), "utterance-1 query must see its own frames");
    }

    #[test]
    fn score_stats_track_simultaneous_materialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 8;
        let heads = 2;
        let q = rand_mat(&mut rng, 4, d);
        let kv = rand_mat(&mut rng, 6, d);
        let w = rand_attn(&mut rng, d);
        let mut stats = ScoreStats::default();
        let _ = mha_full(&q, &kv, &w, heads, None, Some(&mut stats));
        assert_eq!(stats.peak, 4 * 6 * heads);
        assert_eq!(stats.current, 0, "scores must be freed after use");
    }
}
