//! Forward-pass benchmark of the two cross-attention implementations.
//!
//! For each document size the harness runs the teacher-forced decoder with
//! per-utterance block cross-attention and with the masked full-document
//! reference, recording median wall time, the exact count of materialized
//! score-matrix elements, and allocator-tracked peak bytes. The element
//! counter is portable and exact; the byte counter reflects the actual
//! allocator and is only populated when the tracking allocator is installed
//! as the global allocator (the shipped binary installs it).

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{contract, Result};
use crate::mat::Mat;
use crate::model::attention::ScoreStats;
use crate::model::decoder::{decoder_forward_full, CrossMode, DocumentLayout, SelfAttnScope};
use crate::model::encoder::EncodedDoc;
use crate::model::Model;
use crate::vocab::{self, LETTER_BASE};

static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);
static TRACKING: AtomicBool = AtomicBool::new(false);

/// Global allocator wrapper that tracks live and peak heap bytes.
pub struct TrackingAlloc;

impl TrackingAlloc {
    pub const fn new() -> Self {
        TrackingAlloc
    }

    fn grow(size: usize) {
        TRACKING.store(true, Ordering::Relaxed);
        let live = LIVE_BYTES.fetch_add(size, Ordering::Relaxed) + size;
        PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
    }

    fn shrink(size: usize) {
        LIVE_BYTES.fetch_sub(size, Ordering::Relaxed);
    }
}

impl Default for TrackingAlloc {
    fn default() -> Self {
        TrackingAlloc::new()
    }
}

unsafe impl GlobalAlloc for TrackingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            TrackingAlloc::grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            TrackingAlloc::grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        TrackingAlloc::shrink(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            TrackingAlloc::shrink(layout.size());
            TrackingAlloc::grow(new_size);
        }
        p
    }
}

/// True once the tracking allocator has served an allocation, i.e. it is
/// installed as the process's global allocator.
pub fn allocator_tracking() -> bool {
    TRACKING.load(Ordering::Relaxed)
}

/// Restarts peak tracking from the current live size and returns that
/// baseline.
pub fn reset_peak() -> usize {
    let live = LIVE_BYTES.load(Ordering::Relaxed);
    PEAK_BYTES.store(live, Ordering::Relaxed);
    live
}

pub fn peak_bytes() -> usize {
    PEAK_BYTES.load(Ordering::Relaxed)
}

/// Benchmark configuration. `frames_per_utt` counts encoder output frames
/// (cross-attention keys); encoder outputs are synthesized directly so the
/// harness isolates the decoder forward pass.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub n_utterances: Vec<usize>,
    pub frames_per_utt: usize,
    pub tokens_per_utt: usize,
    pub model: ModelConfig,
    pub repeats: usize,
    /// Hard guard on the estimated score-matrix footprint of a single
    /// configuration; anything above is skipped, not run.
    pub mem_guard_bytes: usize,
    pub seed: u64,
}

impl BenchConfig {
    /// Desk-scale defaults: two decoder layers over documents of 16-token
    /// utterances with 256 encoder frames each.
    pub fn desk() -> Self {
        BenchConfig {
            n_utterances: vec![1, 2, 4, 6],
            frames_per_utt: 256,
            tokens_per_utt: 16,
            model: ModelConfig {
                feature_dim: 16,
                model_dim: 32,
                num_heads: 4,
                ff_dim: 64,
                enc_layers: 1,
                dec_layers: 2,
                conv_kernel: 3,
                vocab_size: vocab::VOCAB_SIZE,
                ctc_dim: vocab::CTC_DIM,
                ln_eps: 1e-5,
                max_doc_tokens: 512,
                max_enc_positions: 512,
            },
            repeats: 7,
            mem_guard_bytes: 1 << 31,
            seed: 0,
        }
    }
}

/// One measured (or skipped) configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: &'static str,
    pub n_utterances: usize,
    /// Nominal audio length of the document: raw frames are subsampled 4x
    /// and taken at 100 per second.
    pub doc_seconds_equivalent: f64,
    pub wall_ms: f64,
    pub peak_score_elements: usize,
    pub peak_bytes_tracked: usize,
    /// Reason this configuration was not run; measurement fields are zero.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

fn ensure_single_thread() -> Result<()> {
    #[cfg(feature = "parallel")]
    {
        let threads = rayon::current_num_threads();
        if threads != 1 {
            return Err(contract(format!(
                "benchmarking needs a single-threaded pool but found {threads} threads; \
                 cap the pool at one thread or build without the parallel feature"
            )));
        }
    }
    Ok(())
}

struct BenchCase {
    n: usize,
    layout: DocumentLayout,
    enc: EncodedDoc,
}

fn make_case(cfg: &BenchConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<BenchCase> {
    let d = cfg.model.model_dim;
    let labels: Vec<Vec<usize>> = (0..n)
        .map(|_| (0..cfg.tokens_per_utt).map(|_| rng.gen_range(LETTER_BASE..LETTER_BASE + 26)).collect())
        .collect();
    let layout = DocumentLayout::new(&labels)?;
    let utts = (0..n)
        .map(|_| {
            Mat::from_vec(
                cfg.frames_per_utt,
                d,
                (0..cfg.frames_per_utt * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
        })
        .collect();
    Ok(BenchCase { n, layout, enc: EncodedDoc { utts } })
}

fn run_case(
    model: &Model,
    case: &BenchCase,
    mode: CrossMode,
    stats: Option<&mut ScoreStats>,
) -> Result<Mat> {
    let w = model.infer_weights();
    decoder_forward_full(
        &w,
        &model.cfg,
        &model.pe_dec,
        &case.layout.input,
        &case.layout.assignment,
        &case.enc,
        SelfAttnScope::Document,
        mode,
        stats,
    )
}

/// Estimated bytes of the largest score-matrix set one decoder layer
/// materializes at once.
fn score_bytes_estimate(cfg: &BenchConfig, n: usize, mode: CrossMode) -> usize {
    let l_y = n * (cfg.tokens_per_utt + 1);
    let l_x = cfg.frames_per_utt;
    let heads = cfg.model.num_heads;
    let elems = match mode {
        CrossMode::Block => heads * n * (cfg.tokens_per_utt + 1) * l_x,
        CrossMode::FullMasked => heads * l_y * (n * l_x),
    };
    elems * std::mem::size_of::<f64>()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    xs[xs.len() / 2]
}

fn measure(model: &Model, case: &BenchCase, mode: CrossMode, repeats: usize) -> Result<BenchRow> {
    let variant = match mode {
        CrossMode::Block => "block",
        CrossMode::FullMasked => "full",
    };
    for _ in 0..2 {
        run_case(model, case, mode, None)?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        run_case(model, case, mode, None)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let baseline = reset_peak();
    let mut stats = ScoreStats::default();
    run_case(model, case, mode, Some(&mut stats))?;
    let bytes = if allocator_tracking() { peak_bytes() - baseline } else { 0 };
    Ok(BenchRow {
        variant,
        n_utterances: case.n,
        doc_seconds_equivalent: doc_seconds(case.n, model.cfg.feature_dim, case.enc.utts[0].rows),
        wall_ms: median(times),
        peak_score_elements: stats.peak,
        peak_bytes_tracked: bytes,
        skipped: None,
    })
}

fn doc_seconds(n: usize, _feature_dim: usize, enc_frames: usize) -> f64 {
    (n * enc_frames * 4) as f64 / 100.0
}

/// Runs both cross-attention variants over every document size. Outputs are
/// checked for agreement below 1e-10 before timing, so the benchmark doubles
/// as an equivalence test at scale.
pub fn bench_cross_attention(cfg: &BenchConfig) -> Result<BenchReport> {
    ensure_single_thread()?;
    if cfg.n_utterances.is_empty() || cfg.repeats == 0 {
        return Err(contract("benchmark needs document sizes and at least one repeat"));
    }
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = BenchReport::default();
    for &n in &cfg.n_utterances {
        let case = make_case(cfg, n, &mut rng)?;
        let modes = [CrossMode::Block, CrossMode::FullMasked];
        let within_guard: Vec<bool> =
            modes.iter().map(|&m| score_bytes_estimate(cfg, n, m) <= cfg.mem_guard_bytes).collect();
        if within_guard.iter().all(|&ok| ok) {
            let a = run_case(&model, &case, CrossMode::Block, None)?;
            let b = run_case(&model, &case, CrossMode::FullMasked, None)?;
            let diff = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            if diff >= 1e-10 {
                return Err(contract(format!(
                    "cross-attention variants disagree by {diff:e} at {n} utterances"
                )));
            }
        }
        for (&mode, &ok) in modes.iter().zip(&within_guard) {
            let variant = match mode {
                CrossMode::Block => "block",
                CrossMode::FullMasked => "full",
            };
            if ok {
                report.rows.push(measure(&model, &case, mode, cfg.repeats)?);
            } else {
                let est = score_bytes_estimate(cfg, n, mode);
                log::warn!("skipping {variant} at {n} utterances: {est} bytes over guard");
                report.rows.push(BenchRow {
                    variant,
                    n_utterances: n,
                    doc_seconds_equivalent: 0.0,
                    wall_ms: 0.0,
                    peak_score_elements: 0,
                    peak_bytes_tracked: 0,
                    skipped: Some(format!(
                        "estimated {est} score bytes exceed the {} byte guard",
                        cfg.mem_guard_bytes
                    )),
                });
            }
        }
    }
    Ok(report)
}

/// Serializes a report as CSV. Skipped rows keep their variant and size but
/// leave the measurement cells empty.
pub fn report_to_csv(report: &BenchReport) -> String {
    let mut out = String::from("variant,n_utterances,wall_ms,score_elems,bytes\n");
    for row in &report.rows {
        if row.skipped.is_some() {
            let _ = writeln!(out, "{},{},,,", row.variant, row.n_utterances);
        } else {
            let _ = writeln!(
                out,
                "{},{},{:.3},{},{}",
                row.variant, row.n_utterances, row.wall_ms, row.peak_score_elements, row.peak_bytes_tracked
            );
        }
    }
    out
}

pub fn emit_report(report: &BenchReport, path: &Path) -> Result<()> {
    fs::write(path, report_to_csv(report))?;
    Ok(())
}
