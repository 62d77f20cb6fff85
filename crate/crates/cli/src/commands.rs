//! Command implementations. Each resolves its configuration from preset,
//! optional config file, and flags (later sources win), runs the library,
//! and leaves every artifact plus a `config.resolved` echo under `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use sicl_core::bench::{bench_cross_attention, emit_report, BenchConfig};
use sicl_core::checkpoint::{load_checkpoint, save_checkpoint};
use sicl_core::config::RunConfig;
use sicl_core::data::{
    generate_corpus, load_corpus, save_corpus, split_adaptation, utterances_by_speaker, Corpus,
    Utterance,
};
use sicl_core::decoding::{
    ambiguous_char_accuracy, corpus_cer, corpus_wer, decode_longform, decode_utterance,
    decode_with_context, entity_recall, write_hypotheses, ContextSet, DecodeModel, Hypothesis,
    HypothesisRecord,
};
use sicl_core::error::{Result, SiclError};
use sicl_core::model::Model;
use sicl_core::train::{run_icft, train_stage1, train_stage2};

use crate::{BenchArgs, DecodeArgs, GenerateArgs, IcftArgs, Mode, Preset, Stage, TrainArgs};

fn usage(msg: impl std::fmt::Display) -> SiclError {
    SiclError::Contract(msg.to_string())
}

fn resolve_run(preset: Preset, config: Option<&Path>) -> Result<RunConfig> {
    let mut run = match preset {
        Preset::Desk => RunConfig::desk(),
        Preset::Paper => RunConfig::paper(),
    };
    if let Some(path) = config {
        run = RunConfig::from_json(&fs::read_to_string(path)?)?;
    }
    Ok(run)
}

fn write_resolved(dir: &Path, run: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.resolved"), run.to_json_pretty())?;
    Ok(())
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let mut run = resolve_run(args.preset, args.config.as_deref())?;
    if let Some(seed) = args.seed {
        run.data.seed = seed;
    }
    if let Some(n) = args.speakers {
        run.data.num_speakers = n;
    }
    if let Some(n) = args.utts_per_speaker {
        run.data.utts_per_speaker = n;
    }
    let corpus = generate_corpus(&run.data)?;
    save_corpus(&corpus, &args.out)?;
    write_resolved(&args.out, &run)?;
    for (name, utts) in corpus.splits() {
        log::info!("split {name}: {} utterances", utts.len());
    }
    Ok(())
}

fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("model.ckpt")
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut run = resolve_run(args.preset, args.config.as_deref())?;
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    let corpus = load_corpus(&args.data)?;
    let mut model = match &args.init {
        Some(path) => {
            let (ckpt_run, model) = load_checkpoint(path)?;
            if ckpt_run.model != run.model {
                return Err(usage("checkpoint model configuration disagrees with the requested one"));
            }
            model
        }
        None => Model::new(run.model.clone(), run.train.seed)?,
    };
    if matches!(args.stage, Stage::Utterance | Stage::Both) {
        let report = train_stage1(&mut model, &run, &corpus.train)?;
        log::info!("utterance stage losses: {:?}", report.epoch_mean_loss);
    }
    if matches!(args.stage, Stage::Document | Stage::Both) {
        let report = train_stage2(&mut model, &run, &corpus.train)?;
        log::info!("document stage losses: {:?}", report.epoch_mean_loss);
    }
    fs::create_dir_all(&args.out)?;
    save_checkpoint(&checkpoint_path(&args.out), &run, &model)?;
    write_resolved(&args.out, &run)?;
    Ok(())
}

pub fn icft(args: IcftArgs) -> Result<()> {
    let (mut run, mut model) = load_checkpoint(&args.checkpoint)?;
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        run.train.icft_epochs = epochs;
    }
    let corpus = load_corpus(&args.data)?;
    let report = run_icft(&mut model, &run, &corpus.train, &corpus.bias_train)?;
    log::info!("fine-tuning losses: {:?}", report.epoch_mean_loss);
    fs::create_dir_all(&args.out)?;
    save_checkpoint(&checkpoint_path(&args.out), &run, &model)?;
    write_resolved(&args.out, &run)?;
    Ok(())
}

fn record(u: &Utterance, hyp: &Hypothesis, context_ids: Vec<String>) -> HypothesisRecord {
    HypothesisRecord {
        id: u.id.clone(),
        speaker: u.speaker.clone(),
        reference: u.transcription.clone(),
        hypothesis: hyp.text.clone(),
        att_score: hyp.att_score,
        ctc_score: hyp.ctc_score,
        joint_score: hyp.joint_score,
        context_ids,
    }
}

fn decode_split_utterances(
    dm: &DecodeModel,
    run: &RunConfig,
    utts: &[Utterance],
) -> Result<Vec<HypothesisRecord>> {
    utts.iter()
        .map(|u| Ok(record(u, &decode_utterance(dm, &u.features, &run.decode)?, vec![])))
        .collect()
}

fn decode_longform_split(
    dm: &DecodeModel,
    run: &RunConfig,
    utts: &[Utterance],
    doc_utts: usize,
) -> Result<Vec<HypothesisRecord>> {
    if doc_utts == 0 {
        return Err(usage("long-form documents need at least one utterance"));
    }
    let mut records = Vec::with_capacity(utts.len());
    for (_, speaker_utts) in utterances_by_speaker(utts) {
        for chunk in speaker_utts.chunks(doc_utts) {
            let feats: Vec<_> = chunk.iter().map(|u| u.features.clone()).collect();
            let hyps = decode_longform(dm, &feats, &run.decode)?;
            for (u, hyp) in chunk.iter().zip(&hyps) {
                records.push(record(u, hyp, vec![]));
            }
        }
    }
    Ok(records)
}

fn decode_adapt(dm: &DecodeModel, run: &RunConfig, corpus: &Corpus) -> Result<Vec<HypothesisRecord>> {
    let adaptation = split_adaptation(&corpus.adapt, run.data.adapt_context_utts)?;
    let mut records = Vec::with_capacity(adaptation.eval.len());
    for u in &adaptation.eval {
        let pool = adaptation
            .context
            .get(u.speaker.as_str())
            .ok_or_else(|| usage(format!("no context pool for speaker {}", u.speaker)))?;
        let take = run.decode.context_size.min(pool.len());
        let ctx = ContextSet::from_utterances(&pool[..take]);
        let hyp = decode_with_context(dm, &ctx, &u.features, &run.decode)?;
        records.push(record(u, &hyp, ctx.ids()));
    }
    Ok(records)
}

/// Context selection for biasing: same-speaker exemplars, those sharing an
/// entity with the target first, in manifest order, never the target itself.
fn bias_context<'a>(target: &Utterance, same_speaker: &[&'a Utterance], k: usize) -> Vec<&'a Utterance> {
    let mut picked: Vec<&Utterance> = same_speaker
        .iter()
        .filter(|c| c.id != target.id && c.entities.iter().any(|e| target.entities.contains(e)))
        .copied()
        .collect();
    for c in same_speaker {
        if picked.len() >= k {
            break;
        }
        if c.id != target.id && !picked.iter().any(|p| p.id == c.id) {
            picked.push(c);
        }
    }
    picked.truncate(k);
    picked
}

fn decode_bias(dm: &DecodeModel, run: &RunConfig, corpus: &Corpus) -> Result<Vec<HypothesisRecord>> {
    let by_speaker = utterances_by_speaker(&corpus.bias_eval);
    let mut records = Vec::with_capacity(corpus.bias_eval.len());
    for u in &corpus.bias_eval {
        let same = &by_speaker[u.speaker.as_str()];
        let ctx_utts = bias_context(u, same, run.decode.context_size);
        let ctx = ContextSet::from_utterances(&ctx_utts);
        let hyp = decode_with_context(dm, &ctx, &u.features, &run.decode)?;
        records.push(record(u, &hyp, ctx.ids()));
    }
    Ok(records)
}

fn metrics_json(
    mode: Mode,
    split: &str,
    records: &[HypothesisRecord],
    entity_pairs: Option<&[(Vec<String>, String)]>,
) -> Result<serde_json::Value> {
    let pairs: Vec<(String, String)> =
        records.iter().map(|r| (r.reference.clone(), r.hypothesis.clone())).collect();
    let mut metrics = serde_json::json!({
        "mode": format!("{mode:?}").to_lowercase(),
        "split": split,
        "n_utterances": records.len(),
        "wer": corpus_wer(&pairs)?,
        "cer": corpus_cer(&pairs)?,
    });
    if mode == Mode::Adapt {
        metrics["ambiguous_char_accuracy"] =
            serde_json::Value::from(ambiguous_char_accuracy(&pairs)?);
    }
    if let Some(ep) = entity_pairs {
        metrics["entity_recall"] = serde_json::Value::from(entity_recall(ep)?);
    }
    Ok(metrics)
}

pub fn decode(args: DecodeArgs) -> Result<()> {
    let (mut run, model) = load_checkpoint(&args.checkpoint)?;
    if let Some(beam) = args.beam {
        run.decode.beam_size = beam;
    }
    if let Some(lambda) = args.lambda_dec {
        run.decode.lambda_dec = lambda;
    }
    if let Some(k) = args.context_size {
        run.decode.context_size = k;
    }
    let corpus = load_corpus(&args.data)?;
    let dm = DecodeModel::new(&model);

    let default_split = match args.mode {
        Mode::Utterance | Mode::Longform => "test",
        Mode::Adapt => "adapt",
        Mode::Bias => "bias_eval",
    };
    let split = args.split.as_deref().unwrap_or(default_split);
    let utts = corpus
        .split(split)
        .ok_or_else(|| usage(format!("unknown split {split:?}")))?;

    let records = match args.mode {
        Mode::Utterance => decode_split_utterances(&dm, &run, utts)?,
        Mode::Longform => {
            let doc_utts = args.doc_utts.unwrap_or(run.train.doc_utterances);
            decode_longform_split(&dm, &run, utts, doc_utts)?
        }
        Mode::Adapt => {
            if split != "adapt" {
                return Err(usage("adapt decoding is defined on the adapt split"));
            }
            decode_adapt(&dm, &run, &corpus)?
        }
        Mode::Bias => {
            if split != "bias_eval" {
                return Err(usage("bias decoding is defined on the bias_eval split"));
            }
            decode_bias(&dm, &run, &corpus)?
        }
    };

    let entity_pairs: Option<Vec<(Vec<String>, String)>> = match args.mode {
        Mode::Bias => {
            let by_id: std::collections::BTreeMap<&str, &Utterance> =
                utts.iter().map(|u| (u.id.as_str(), u)).collect();
            Some(
                records
                    .iter()
                    .map(|r| (by_id[r.id.as_str()].entities.clone(), r.hypothesis.clone()))
                    .collect(),
            )
        }
        _ => None,
    };

    fs::create_dir_all(&args.out)?;
    write_hypotheses(&args.out.join("hypotheses.jsonl"), &records)?;
    let metrics = metrics_json(args.mode, split, &records, entity_pairs.as_deref())?;
    fs::write(args.out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    write_resolved(&args.out, &run)?;
    log::info!("decoded {} utterances from {split}: {metrics}", records.len());
    Ok(())
}

pub fn bench(args: BenchArgs) -> Result<()> {
    #[cfg(feature = "parallel")]
    {
        // Measurement is strictly single-threaded; cap the global pool
        // before anything can spin it up wider.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let mut cfg = BenchConfig::desk();
    cfg.n_utterances = args.n_utts.clone();
    cfg.frames_per_utt = args.frames;
    cfg.tokens_per_utt = args.tokens;
    cfg.repeats = args.repeats;
    cfg.seed = args.seed;
    let report = bench_cross_attention(&cfg)?;
    for row in &report.rows {
        match &row.skipped {
            Some(reason) => log::warn!("{} n={} skipped: {reason}", row.variant, row.n_utterances),
            None => log::info!(
                "{} n={} wall_ms={:.3} score_elems={} bytes={}",
                row.variant,
                row.n_utterances,
                row.wall_ms,
                row.peak_score_elements,
                row.peak_bytes_tracked
            ),
        }
    }
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    emit_report(&report, &args.out)?;
    let resolved = serde_json::json!({
        "n_utterances": cfg.n_utterances,
        "frames_per_utt": cfg.frames_per_utt,
        "tokens_per_utt": cfg.tokens_per_utt,
        "repeats": cfg.repeats,
        "mem_guard_bytes": cfg.mem_guard_bytes,
        "seed": cfg.seed,
        "model": cfg.model,
    });
    let dir = args.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::write(dir.join("config.resolved"), serde_json::to_string_pretty(&resolved)?)?;
    Ok(())
}
