//! Two-stage document training plus in-context fine-tuning.
//!
//! Stage one grounds the acoustics on single-utterance documents; stage two
//! switches to multi-utterance same-speaker documents so the decoder learns
//! to exploit earlier transcriptions in its self-attention window. The
//! fine-tuning pass trains on context/target documents whose target label
//! sometimes disagrees with the model's acoustic prior, which rewards
//! copying from the context.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{
    assemble_document, utterances_by_speaker, Corpus, DocumentMode, Utterance, AMBIGUOUS_CHARS,
};
use crate::error::{contract, Result};
use crate::icft::build_icft_example;
use crate::mat::Mat;
use crate::model::decoder::{decoder_forward_full, CrossMode, DocumentLayout, SelfAttnScope};
use crate::model::decoder::decoder_tape;
use crate::model::encoder::{encode_document_infer, encoder_tape};
use crate::model::Model;
use crate::objectives::{attention_ce_loss, ctc_loss_tape, hybrid_loss};
use crate::params::Adam;
use crate::vocab::{self, CTC_BLANK};
use sicl_tensor::Tape;

/// One optimization sample: utterance features plus the labels the decoder
/// is trained to produce. `mask` restricts the attention loss to a subset
/// of document positions; CTC terms are built for utterances `ctc_from..`
/// so fine-tuning documents can supervise only their target utterance.
pub struct TrainDoc<'a> {
    pub feats: Vec<&'a Mat>,
    pub labels: Vec<Vec<usize>>,
    pub mask: Option<Vec<bool>>,
    pub ctc_from: usize,
}

impl<'a> TrainDoc<'a> {
    pub fn from_utterances(utts: &[&'a Utterance]) -> Self {
        TrainDoc {
            feats: utts.iter().map(|u| &u.features).collect(),
            labels: utts.iter().map(|u| u.tokens()).collect(),
            mask: None,
            ctc_from: 0,
        }
    }

    /// Swaps the two speaker-dependent ambiguous letters in every label.
    ///
    /// The flipped labels describe the same audio as spoken by a phantom
    /// speaker with the opposite ambiguous mapping, so they are exactly as
    /// valid as the originals. Applying the swap to a random half of the
    /// training documents makes a voice carry no information about the
    /// mapping; earlier in-document audio/text pairs become the only
    /// evidence for the letter, which is the behaviour context decoding
    /// relies on.
    pub fn flip_ambiguous_labels(&mut self) {
        let a = vocab::char_to_id(AMBIGUOUS_CHARS[0]);
        let b = vocab::char_to_id(AMBIGUOUS_CHARS[1]);
        for label in &mut self.labels {
            for t in label.iter_mut() {
                if *t == a {
                    *t = b;
                } else if *t == b {
                    *t = a;
                }
            }
        }
    }
}

/// Mean loss per optimizer step, grouped by epoch.
#[derive(Debug, Clone, Default)]
pub struct StageReport {
    pub epoch_mean_loss: Vec<f64>,
}

/// Builds one document's hybrid loss on a fresh tape and returns its value
/// together with gradients ordered by parameter id.
pub fn doc_loss_and_grads(
    model: &Model,
    doc: &TrainDoc,
    lambda: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if doc.feats.len() != doc.labels.len() {
        return Err(contract("document features and labels disagree in length"));
    }
    let cfg = &model.cfg;
    let mut tape = Tape::new();
    let (ids, w) = model.bind(&mut tape);

    let mut enc_ids = Vec::with_capacity(doc.feats.len());
    for f in &doc.feats {
        enc_ids.push(encoder_tape(&mut tape, &w, cfg, f, &model.pe_enc)?);
    }

    let mut ctc_terms = Vec::new();
    for (u, toks) in doc.labels.iter().enumerate().skip(doc.ctc_from) {
        let proj = tape.matmul(enc_ids[u], w.ctc_w);
        let proj = tape.add_row_broadcast(proj, w.ctc_b);
        let lp = tape.log_softmax(proj, 1);
        // A perturbed label can be unrealizable in the available frames;
        // the attention loss still supervises that utterance.
        if let Some(term) = ctc_loss_tape(&mut tape, lp, CTC_BLANK, toks) {
            ctc_terms.push(term);
        }
    }

    let layout = DocumentLayout::new(&doc.labels)?;
    let logits = decoder_tape(
        &mut tape,
        &w,
        cfg,
        &model.pe_dec,
        &layout.input,
        &layout.assignment,
        &enc_ids,
        SelfAttnScope::Document,
    )?;
    let att = attention_ce_loss(&mut tape, logits, &layout.targets, doc.mask.as_deref())?;
    let loss = hybrid_loss(&mut tape, &ctc_terms, att, lambda);
    tape.backward(loss);
    let grads = model.params.grads(&tape, &ids);
    Ok((tape.value(loss)[0], grads))
}

#[cfg(feature = "parallel")]
fn map_docs(model: &Model, docs: &[TrainDoc], lambda: f64) -> Result<Vec<(f64, Vec<Vec<f64>>)>> {
    docs.par_iter().map(|d| doc_loss_and_grads(model, d, lambda)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_docs(model: &Model, docs: &[TrainDoc], lambda: f64) -> Result<Vec<(f64, Vec<Vec<f64>>)>> {
    docs.iter().map(|d| doc_loss_and_grads(model, d, lambda)).collect()
}

/// One optimizer step over a batch of documents: per-document gradients are
/// averaged in document order (so parallel and sequential execution give
/// identical sums) and fed to Adam. Returns the batch mean loss.
pub fn batch_step(
    model: &mut Model,
    adam: &mut Adam,
    docs: &[TrainDoc],
    lambda: f64,
) -> Result<f64> {
    if docs.is_empty() {
        return Err(contract("an optimizer step needs at least one document"));
    }
    let results = map_docs(model, docs, lambda)?;
    let inv = 1.0 / results.len() as f64;
    let mut loss_mean = 0.0;
    let mut acc: Vec<Vec<f64>> = Vec::new();
    for (loss, grads) in results {
        loss_mean += loss * inv;
        if acc.is_empty() {
            acc = grads;
        } else {
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (x, v) in a.iter_mut().zip(g) {
                    *x += v;
                }
            }
        }
    }
    for g in &mut acc {
        for x in g.iter_mut() {
            *x *= inv;
        }
    }
    adam.step(&mut model.params, &acc);
    Ok(loss_mean)
}

fn adam_for(model: &Model, run: &RunConfig, lr: f64) -> Adam {
    let t = &run.train;
    Adam::new(&model.params, lr, t.beta1, t.beta2, t.adam_eps, t.grad_clip)
}

/// Stage one: every training utterance as its own document, shuffled each
/// epoch, `batch_docs` documents per step.
pub fn train_stage1(model: &mut Model, run: &RunConfig, train: &[Utterance]) -> Result<StageReport> {
    if train.is_empty() {
        return Err(contract("stage one needs a non-empty training split"));
    }
    let tc = &run.train;
    let mut adam = adam_for(model, run, tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = StageReport::default();
    for epoch in 0..tc.stage1_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(tc.batch_docs) {
            let mut docs: Vec<TrainDoc> = chunk
                .iter()
                .map(|&i| TrainDoc::from_utterances(&[&train[i]]))
                .collect();
            for doc in &mut docs {
                if rng.gen_bool(0.5) {
                    doc.flip_ambiguous_labels();
                }
            }
            sum += batch_step(model, &mut adam, &docs, tc.lambda)?;
            steps += 1;
        }
        let mean = sum / steps as f64;
        log::info!("stage1 epoch {}/{} mean loss {:.4}", epoch + 1, tc.stage1_epochs, mean);
        report.epoch_mean_loss.push(mean);
    }
    Ok(report)
}

fn has_ambiguous(u: &Utterance) -> bool {
    u.transcription.chars().any(|c| AMBIGUOUS_CHARS.contains(&c))
}

/// Document pools the curriculum draws from, besides the full split.
///
/// The dense pool keeps the interesting tokens frequent. Each focused pool
/// narrows to utterances sharing one such token, so a same-speaker document
/// sampled from it repeats that token: earlier utterances then carry
/// aligned audio/text evidence for exactly the token the decoder must
/// produce later, which is the situation context decoding faces.
struct DocPools {
    dense: Vec<Utterance>,
    dense_usable: bool,
    focused: Vec<(Vec<Utterance>, bool)>,
}

fn speaker_can_fill(utts: &[Utterance], n: usize) -> bool {
    utterances_by_speaker(utts).values().any(|v| v.len() >= n)
}

impl DocPools {
    /// Pools around the speaker-swapped ambiguous letters.
    fn for_ambiguous_letters(utts: &[Utterance], doc_utterances: usize) -> Self {
        let dense: Vec<Utterance> = utts.iter().filter(|u| has_ambiguous(u)).cloned().collect();
        let focused = AMBIGUOUS_CHARS
            .iter()
            .map(|&c| {
                let pool: Vec<Utterance> =
                    utts.iter().filter(|u| u.transcription.contains(c)).cloned().collect();
                let usable = speaker_can_fill(&pool, doc_utterances);
                (pool, usable)
            })
            .collect();
        let dense_usable = speaker_can_fill(&dense, doc_utterances);
        DocPools { dense, dense_usable, focused }
    }

    /// Pools around tagged entity surface forms.
    fn for_entities(utts: &[Utterance], doc_utterances: usize) -> Self {
        let dense: Vec<Utterance> =
            utts.iter().filter(|u| !u.entities.is_empty()).cloned().collect();
        let mut surfaces: Vec<String> =
            utts.iter().flat_map(|u| u.entities.iter().cloned()).collect();
        surfaces.sort();
        surfaces.dedup();
        let focused = surfaces
            .iter()
            .map(|e| {
                let pool: Vec<Utterance> =
                    utts.iter().filter(|u| u.entities.contains(e)).cloned().collect();
                let usable = speaker_can_fill(&pool, doc_utterances);
                (pool, usable)
            })
            .collect();
        let dense_usable = speaker_can_fill(&dense, doc_utterances);
        DocPools { dense, dense_usable, focused }
    }

    fn any_usable(&self) -> bool {
        self.dense_usable || self.focused.iter().any(|(_, usable)| *usable)
    }

    /// Slice to sample one document from: with probability `fraction` a
    /// focused pool (falling back to the dense pool), otherwise the full
    /// split.
    fn pick<'a>(
        &'a self,
        all: &'a [Utterance],
        fraction: f64,
        rng: &mut ChaCha8Rng,
    ) -> &'a [Utterance] {
        if !self.focused.is_empty() && rng.gen_bool(fraction) {
            let i = rng.gen_range(0..self.focused.len());
            if self.focused[i].1 && rng.gen_bool(0.75) {
                return &self.focused[i].0;
            }
            if self.dense_usable {
                return &self.dense;
            }
        }
        all
    }
}

/// Stage two: random same-speaker documents of `doc_utterances` utterances.
/// A configured fraction of documents comes from ambiguity-dense pools so
/// context copying sees dense supervision.
pub fn train_stage2(model: &mut Model, run: &RunConfig, train: &[Utterance]) -> Result<StageReport> {
    let tc = &run.train;
    if train.is_empty() {
        return Err(contract("stage two needs a non-empty training split"));
    }
    let pools = DocPools::for_ambiguous_letters(train, tc.doc_utterances);
    if !pools.any_usable() && tc.ambiguous_doc_fraction > 0.0 {
        log::warn!("no speaker has enough ambiguous utterances; stage2 uses the full pool only");
    }
    let mut adam = adam_for(model, run, tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(2));
    let docs_per_epoch = (train.len() / tc.doc_utterances).max(1);
    let budget = model.cfg.max_doc_tokens;
    let mut report = StageReport::default();
    for epoch in 0..tc.stage2_epochs {
        let mut sum = 0.0;
        let mut steps = 0usize;
        let mut remaining = docs_per_epoch;
        while remaining > 0 {
            let batch = remaining.min(tc.batch_docs);
            let mut docs = Vec::with_capacity(batch);
            for _ in 0..batch {
                let pool = pools.pick(train, tc.ambiguous_doc_fraction, &mut rng);
                let picked = assemble_document(
                    pool,
                    DocumentMode::RandomSameSpeaker,
                    tc.doc_utterances,
                    budget,
                    &mut rng,
                )?;
                let mut doc = TrainDoc::from_utterances(&picked);
                if rng.gen_bool(0.5) {
                    doc.flip_ambiguous_labels();
                }
                docs.push(doc);
            }
            sum += batch_step(model, &mut adam, &docs, tc.lambda)?;
            steps += 1;
            remaining -= batch;
        }
        let mean = sum / steps as f64;
        log::info!("stage2 epoch {}/{} mean loss {:.4}", epoch + 1, tc.stage2_epochs, mean);
        report.epoch_mean_loss.push(mean);
    }
    Ok(report)
}

/// Runs both training stages on a freshly initialized model.
pub fn train_model(run: &RunConfig, corpus: &Corpus) -> Result<(Model, StageReport, StageReport)> {
    let mut model = Model::new(run.model.clone(), run.train.seed)?;
    let s1 = train_stage1(&mut model, run, &corpus.train)?;
    let s2 = train_stage2(&mut model, run, &corpus.train)?;
    Ok((model, s1, s2))
}

/// In-context fine-tuning. Half the documents are context/target examples
/// with the loss masked to the target utterance (and, half of those, a
/// perturbed target label); the other half are plain full-loss documents,
/// which anchors the acoustic behaviour. Documents alternate between the
/// base training split and the biasing split.
pub fn run_icft(
    model: &mut Model,
    run: &RunConfig,
    train: &[Utterance],
    bias_train: &[Utterance],
) -> Result<StageReport> {
    let tc = &run.train;
    let context_size = run.decode.context_size;
    if train.is_empty() || bias_train.is_empty() {
        return Err(contract("fine-tuning needs both the train and bias splits"));
    }
    let sources = [train, bias_train];
    for (name, split) in ["train", "bias_train"].iter().zip(sources) {
        let by_speaker = utterances_by_speaker(split);
        if !by_speaker.values().any(|v| v.len() > context_size) {
            return Err(contract(format!(
                "no {name} speaker can supply {context_size} context utterances plus a target"
            )));
        }
    }

    let mut adam = adam_for(model, run, tc.icft_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(3));
    let docs_per_epoch =
        ((train.len() + bias_train.len()) / (context_size + 1)).max(1);
    let budget = model.cfg.max_doc_tokens;
    // Plain documents keep the curriculum of the document stage alive while
    // fine-tuning: ambiguity-dense documents for the base split and
    // entity-dense documents for the biasing split.
    let doc_pools = [
        DocPools::for_ambiguous_letters(train, context_size + 1),
        DocPools::for_entities(bias_train, context_size + 1),
    ];
    let mut report = StageReport::default();

    for epoch in 0..tc.icft_epochs {
        let mut sum = 0.0;
        let mut steps = 0usize;
        let mut remaining = docs_per_epoch;
        while remaining > 0 {
            let batch = remaining.min(tc.batch_docs);
            // Examples own their sampled context features; build them first
            // and borrow from them when assembling the batch.
            let mut examples = Vec::new();
            let mut plain: Vec<Vec<&Utterance>> = Vec::new();
            let mut kinds = Vec::with_capacity(batch);
            let mut flips = Vec::with_capacity(batch);
            for _ in 0..batch {
                let source = usize::from(rng.gen_bool(0.5));
                let split = sources[source];
                if rng.gen_bool(0.5) {
                    let by_speaker = utterances_by_speaker(split);
                    let pools: Vec<&Vec<&Utterance>> =
                        by_speaker.values().filter(|v| v.len() > context_size).collect();
                    let pool = pools[rng.gen_range(0..pools.len())];
                    let perturb = rng.gen_bool(0.5);
                    examples.push(build_icft_example(pool, context_size, perturb, &mut rng)?);
                    kinds.push(true);
                } else {
                    let pool =
                        doc_pools[source].pick(split, tc.ambiguous_doc_fraction, &mut rng);
                    plain.push(assemble_document(
                        pool,
                        DocumentMode::RandomSameSpeaker,
                        context_size + 1,
                        budget,
                        &mut rng,
                    )?);
                    kinds.push(false);
                }
                flips.push(rng.gen_bool(0.5));
            }
            let mut ex_it = examples.iter();
            let mut plain_it = plain.iter();
            let docs: Vec<TrainDoc> = kinds
                .iter()
                .zip(&flips)
                .map(|(&is_example, &flip)| {
                    let mut doc = if is_example {
                        let ex = ex_it.next().expect("counted above");
                        let mut feats: Vec<&Mat> =
                            ex.context.items.iter().map(|i| &i.features).collect();
                        feats.push(&ex.target.features);
                        let mut labels: Vec<Vec<usize>> = ex
                            .context
                            .items
                            .iter()
                            .map(|i| vocab::encode(&i.transcription))
                            .collect();
                        labels.push(vocab::encode(&ex.target_label));
                        let ctc_from = labels.len() - 1;
                        TrainDoc { feats, labels, mask: Some(ex.loss_mask.clone()), ctc_from }
                    } else {
                        TrainDoc::from_utterances(plain_it.next().expect("counted above"))
                    };
                    if flip {
                        doc.flip_ambiguous_labels();
                    }
                    doc
                })
                .collect();
            sum += batch_step(model, &mut adam, &docs, tc.lambda)?;
            steps += 1;
            remaining -= batch;
        }
        let mean = sum / steps as f64;
        log::info!("icft epoch {}/{} mean loss {:.4}", epoch + 1, tc.icft_epochs, mean);
        report.epoch_mean_loss.push(mean);
    }
    Ok(report)
}

/// Fraction of document positions where the teacher-forced argmax equals
/// the target. Utterances are grouped by speaker and folded into
/// consecutive documents of `doc_utterances`, matching the layout the
/// document stage trains on; pass 1 to score isolated utterances.
pub fn teacher_forced_accuracy(
    model: &Model,
    utts: &[Utterance],
    doc_utterances: usize,
) -> Result<f64> {
    if utts.is_empty() {
        return Err(contract("accuracy needs at least one utterance"));
    }
    if doc_utterances == 0 {
        return Err(contract("accuracy documents need at least one utterance"));
    }
    let w = model.infer_weights();
    let cfg = &model.cfg;
    let mut correct = 0usize;
    let mut total = 0usize;
    let by_speaker = utterances_by_speaker(utts);
    for group in by_speaker.values() {
        for window in group.chunks(doc_utterances) {
            let feats: Vec<Mat> = window.iter().map(|u| u.features.clone()).collect();
            let enc = encode_document_infer(&w, cfg, &feats, &model.pe_enc)?;
            let toks: Vec<Vec<usize>> = window.iter().map(|u| u.tokens()).collect();
            let layout = DocumentLayout::new(&toks)?;
            let logits = decoder_forward_full(
                &w,
                cfg,
                &model.pe_dec,
                &layout.input,
                &layout.assignment,
                &enc,
                SelfAttnScope::Document,
                CrossMode::Block,
                None,
            )?;
            for (row, &target) in layout.targets.iter().enumerate() {
                let r = logits.row(row);
                let argmax = r
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .expect("non-empty vocabulary");
                if argmax == target {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    Ok(correct as f64 / total as f64)
}
