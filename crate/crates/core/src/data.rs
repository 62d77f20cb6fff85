//! Synthetic desk-scale speech corpus.
//!
//! Utterances are sequences of characters; every character has a gaussian
//! prototype vector, each speaker passes prototypes through a private mixing
//! transform, and frames are noisy copies of the transformed prototype. Three
//! kinds of controlled ambiguity are built in:
//!
//! * the letters `q` and `j` share one prototype, as do `z` and `x`, so those
//!   pairs are acoustically indistinguishable for every speaker;
//! * the letters `v` and `w` have distinct prototypes, but half of the
//!   speakers swap them, so the mapping is only resolvable from same-speaker
//!   context (the minimal pairs in [`AMBIGUOUS_PAIRS`] make both readings
//!   valid words);
//! * rare letters (`j`, `q`, `x`, `z`) appear only inside entity words, which
//!   are confined to the biasing splits.
//!
//! Features are quantized to f32 at generation time so that a generate, save,
//! load round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{contract, Result, SiclError};
use crate::mat::Mat;
use crate::model::encoder::subsampled_len;
use sicl_tensor::kernels;

/// Letters whose prototypes are speaker-dependently swapped.
pub const AMBIGUOUS_CHARS: [char; 2] = ['v', 'w'];

/// Letters reserved for entity words; they never occur in the base lexicon.
pub const RARE_CHARS: [char; 4] = ['j', 'q', 'x', 'z'];

/// Base lexicon. Every word uses only "safe" letters (no ambiguous or rare
/// characters) and never repeats a letter in adjacent positions, which keeps
/// every transcription CTC-realizable after 4x subsampling.
pub const BASE_WORDS: [&str; 36] = [
    "ban", "cat", "dome", "felt", "gust", "hint", "kelp", "lamp", "mist", "nest", "opal", "pond",
    "rust", "salt", "tusk", "yarn", "amber", "blunt", "crisp", "denim", "ethos", "grime", "haste",
    "ideal", "latch", "moist", "niche", "ocean", "pearl", "ridge", "stone", "tulip", "umber",
    "yeast", "cedar", "flint",
];

/// Minimal pairs differing only in `v` versus `w`. Both members are listed in
/// the lexicon with equal frequency, so no language-model prior can resolve
/// which one was said; only same-speaker context can.
pub const AMBIGUOUS_PAIRS: [(&str, &str); 4] =
    [("vat", "wat"), ("vest", "west"), ("vine", "wine"), ("oven", "owen")];

/// Entity words used during biasing fine-tuning. Each starts with a rare
/// letter, so its acoustics are out of distribution for a model trained on
/// the base splits.
pub const TRAIN_ENTITIES: [&str; 8] =
    ["jold", "qern", "xant", "zuri", "jasp", "quom", "xebo", "zilt"];

/// Entity words held out for biasing evaluation; disjoint from
/// [`TRAIN_ENTITIES`] but drawn from the same rare-letter distribution.
pub const EVAL_ENTITIES: [&str; 8] =
    ["jurn", "qade", "xomp", "zeft", "jiko", "qesh", "xalo", "zemb"];

/// Magic prefix of a feature file; the header is exactly these eight bytes,
/// followed by row-major little-endian f32 frames.
pub const FEATURE_MAGIC: &[u8; 8] = b"SICLFEAT";

/// One synthetic utterance with its features and reference transcription.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub features: Mat,
    pub transcription: String,
    /// Entity surface forms tagged in the transcription (empty outside the
    /// biasing splits).
    pub entities: Vec<String>,
}

impl Utterance {
    pub fn tokens(&self) -> Vec<usize> {
        crate::vocab::encode(&self.transcription)
    }
}

/// A generated corpus, split by usage.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    /// Seen speakers, base lexicon; the recognition training set.
    pub train: Vec<Utterance>,
    /// Same speakers as `train`, fresh utterances.
    pub test: Vec<Utterance>,
    /// Unseen speakers; every utterance contains at least one ambiguous word.
    pub adapt: Vec<Utterance>,
    /// Biasing speakers with training entities.
    pub bias_train: Vec<Utterance>,
    /// Same biasing speakers with held-out entities, assigned round-robin so
    /// every entity recurs within a speaker and can serve as its own context
    /// exemplar.
    pub bias_eval: Vec<Utterance>,
}

impl Corpus {
    pub const SPLIT_NAMES: [&'static str; 5] =
        ["train", "test", "adapt", "bias_train", "bias_eval"];

    pub fn split(&self, name: &str) -> Option<&[Utterance]> {
        match name {
            "train" => Some(&self.train),
            "test" => Some(&self.test),
            "adapt" => Some(&self.adapt),
            "bias_train" => Some(&self.bias_train),
            "bias_eval" => Some(&self.bias_eval),
            _ => None,
        }
    }

    pub fn splits(&self) -> impl Iterator<Item = (&'static str, &[Utterance])> {
        Self::SPLIT_NAMES.iter().map(|&n| (n, self.split(n).unwrap()))
    }
}

/// Per-speaker acoustic identity.
#[derive(Clone, Debug)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    /// Near-identity mixing transform applied to every prototype. Built as
    /// diag(gains) * (I + skew) so its condition number has a cheap closed
    /// bound; it is checked to stay below 10, keeping every speaker's
    /// acoustics linearly invertible.
    pub transform: Mat,
    pub noise_scale: f64,
    /// Whether this speaker swaps the `v` and `w` prototypes.
    pub swap_ambiguous: bool,
}

impl SpeakerProfile {
    fn apply(&self, proto: &[f64]) -> Vec<f64> {
        let d = proto.len();
        kernels::matmul(&self.transform.data, proto, d, d, 1)
    }
}

/// Character prototypes, indexed a..z then space.
struct Prototypes(Vec<Vec<f64>>);

const PROTO_SPACE: usize = 26;

fn proto_index(c: char) -> usize {
    match c {
        'a'..='z' => c as usize - 'a' as usize,
        ' ' => PROTO_SPACE,
        other => panic!("no prototype for character {other:?}"),
    }
}

fn make_prototypes(rng: &mut ChaCha8Rng, dim: usize) -> Prototypes {
    let mut protos: Vec<Vec<f64>> = (0..27)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    // q aliases j and z aliases x for every speaker: those letter pairs are
    // acoustically unrecoverable by construction.
    protos[proto_index('q')] = protos[proto_index('j')].clone();
    protos[proto_index('z')] = protos[proto_index('x')].clone();
    Prototypes(protos)
}

fn make_profile(
    rng: &mut ChaCha8Rng,
    speaker_id: String,
    cfg: &DataConfig,
    swap_ambiguous: bool,
) -> Result<SpeakerProfile> {
    let d = cfg.feature_dim;
    let s = cfg.speaker_transform_scale;
    let gauss: Vec<f64> = (0..d * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut transform = Mat::zeros(d, d);
    let mut fro_sq = 0.0;
    for i in 0..d {
        transform.data[i * d + i] = 1.0;
        for j in i + 1..d {
            let v = s * (gauss[i * d + j] - gauss[j * d + i]) / (2.0 * (d as f64).sqrt());
            transform.data[i * d + j] = v;
            transform.data[j * d + i] = -v;
            fro_sq += 2.0 * v * v;
        }
    }
    let mut gain_min = f64::INFINITY;
    let mut gain_max = 0.0f64;
    for i in 0..d {
        let g = 1.0 + s * rng.gen_range(-1.0..1.0);
        gain_min = gain_min.min(g);
        gain_max = gain_max.max(g);
        for j in 0..d {
            transform.data[i * d + j] *= g;
        }
    }
    // I + skew has singular values in [1, sqrt(1 + ||skew||_F^2)], so this
    // bound is valid however the gaussian draws land.
    let cond_bound = (gain_max / gain_min) * (1.0 + fro_sq).sqrt();
    if !(cond_bound <= 10.0) {
        return Err(contract(format!(
            "speaker transform condition bound {cond_bound:.2} exceeds 10; \
             lower speaker_transform_scale ({s})"
        )));
    }
    Ok(SpeakerProfile { speaker_id, transform, noise_scale: cfg.noise_scale, swap_ambiguous })
}

fn synth_features(
    rng: &mut ChaCha8Rng,
    protos: &Prototypes,
    profile: &SpeakerProfile,
    text: &str,
    cfg: &DataConfig,
) -> Result<Mat> {
    let chars: Vec<char> = text.chars().collect();
    let dim = cfg.feature_dim;
    let mut data = Vec::new();
    let mut frames = 0usize;
    for &c in &chars {
        let heard = if profile.swap_ambiguous {
            match c {
                'v' => 'w',
                'w' => 'v',
                other => other,
            }
        } else {
            c
        };
        let moved = profile.apply(&protos.0[proto_index(heard)]);
        let n = rng.gen_range(cfg.frames_per_char_min..=cfg.frames_per_char_max);
        for _ in 0..n {
            for &m in &moved {
                let raw = m + profile.noise_scale * rng.sample::<f64, _>(StandardNormal);
                data.push((raw as f32) as f64);
            }
        }
        frames += n;
    }
    if !(8..=512).contains(&frames) {
        return Err(contract(format!("utterance frame count {frames} outside 8..=512")));
    }
    if subsampled_len(frames) < chars.len() {
        return Err(contract(format!(
            "transcription of {} chars is not CTC-realizable in {} subsampled frames",
            chars.len(),
            subsampled_len(frames)
        )));
    }
    Ok(Mat::from_vec(frames, dim, data))
}

fn word_ok(w: &str) -> bool {
    !w.is_empty()
        && w.chars().all(|c| c.is_ascii_lowercase())
        && w.chars().zip(w.chars().skip(1)).all(|(a, b)| a != b)
}

/// Validates the configured lexicon against the structural assumptions the
/// generator and the evaluation metrics rely on.
pub fn validate_lexicon(cfg: &DataConfig) -> Result<()> {
    if cfg.words.is_empty() {
        return Err(contract("word list is empty"));
    }
    for w in &cfg.words {
        if !word_ok(w) {
            return Err(contract(format!("base word {w:?} has repeats or bad characters")));
        }
        if w.chars().any(|c| AMBIGUOUS_CHARS.contains(&c) || RARE_CHARS.contains(&c)) {
            return Err(contract(format!("base word {w:?} uses a reserved letter")));
        }
    }
    for (a, b) in &cfg.ambiguous_pairs {
        if !word_ok(a) || !word_ok(b) || a.len() != b.len() {
            return Err(contract(format!("ambiguous pair {a:?}/{b:?} is malformed")));
        }
        let diffs: Vec<(char, char)> = a
            .chars()
            .zip(b.chars())
            .filter(|(x, y)| x != y)
            .collect();
        let swap_ok = diffs.len() == 1
            && matches!(diffs[0], ('v', 'w') | ('w', 'v'));
        if !swap_ok {
            return Err(contract(format!(
                "ambiguous pair {a:?}/{b:?} must differ exactly at one v/w position"
            )));
        }
    }
    if cfg.entities_train.is_empty() || cfg.entities_eval.is_empty() {
        return Err(contract("entity lists must be non-empty"));
    }
    for e in cfg.entities_train.iter().chain(&cfg.entities_eval) {
        if !word_ok(e) {
            return Err(contract(format!("entity {e:?} has repeats or bad characters")));
        }
        if !e.chars().any(|c| RARE_CHARS.contains(&c)) {
            return Err(contract(format!("entity {e:?} contains no rare letter")));
        }
        if e.chars().any(|c| AMBIGUOUS_CHARS.contains(&c)) {
            return Err(contract(format!("entity {e:?} uses an ambiguous letter")));
        }
        if cfg.words.iter().any(|w| w == e) {
            return Err(contract(format!("entity {e:?} collides with the base lexicon")));
        }
    }
    for e in &cfg.entities_eval {
        if cfg.entities_train.contains(e) {
            return Err(contract(format!("entity {e:?} appears in both entity splits")));
        }
    }
    Ok(())
}

enum TextMode<'a> {
    /// Base words, each independently swapped for an ambiguous word with
    /// probability `ambiguous_word_prob`.
    Standard,
    /// Standard, then one position forced to an ambiguous word.
    ForceAmbiguous,
    /// Standard base words with the given entity at a random position.
    Entity(&'a str),
}

fn ambiguous_surfaces(cfg: &DataConfig) -> Vec<&str> {
    cfg.ambiguous_pairs.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect()
}

fn sample_text(rng: &mut ChaCha8Rng, cfg: &DataConfig, mode: TextMode) -> (String, Vec<String>) {
    let surfaces = ambiguous_surfaces(cfg);
    let n = rng.gen_range(cfg.words_per_utt_min..=cfg.words_per_utt_max);
    let mut words: Vec<String> = (0..n)
        .map(|_| {
            if !surfaces.is_empty() && rng.gen_bool(cfg.ambiguous_word_prob) {
                surfaces[rng.gen_range(0..surfaces.len())].to_string()
            } else {
                cfg.words[rng.gen_range(0..cfg.words.len())].clone()
            }
        })
        .collect();
    let mut entities = Vec::new();
    match mode {
        TextMode::Standard => {}
        TextMode::ForceAmbiguous => {
            let slot = rng.gen_range(0..n);
            words[slot] = surfaces[rng.gen_range(0..surfaces.len())].to_string();
        }
        TextMode::Entity(e) => {
            let slot = rng.gen_range(0..n);
            words[slot] = e.to_string();
            entities.push(e.to_string());
        }
    }
    (words.join(" "), entities)
}

fn make_split<'a>(
    rng: &mut ChaCha8Rng,
    cfg: &'a DataConfig,
    protos: &Prototypes,
    split: &str,
    profiles: &[SpeakerProfile],
    utts_per_speaker: usize,
    mut mode_for: impl FnMut(usize) -> TextMode<'a>,
) -> Result<Vec<Utterance>> {
    let mut out = Vec::with_capacity(profiles.len() * utts_per_speaker);
    for profile in profiles {
        for k in 0..utts_per_speaker {
            let (text, entities) = sample_text(rng, cfg, mode_for(k));
            let features = synth_features(rng, protos, profile, &text, cfg)?;
            out.push(Utterance {
                id: format!("{split}-{}-{k:03}", profile.speaker_id),
                speaker: profile.speaker_id.clone(),
                features,
                transcription: text,
                entities,
            });
        }
    }
    Ok(out)
}

/// Generates the full corpus deterministically from `cfg.seed`.
pub fn generate_corpus(cfg: &DataConfig) -> Result<Corpus> {
    validate_lexicon(cfg)?;
    if cfg.num_speakers == 0 || cfg.utts_per_speaker == 0 {
        return Err(contract("need at least one training speaker and utterance"));
    }
    if cfg.words_per_utt_min == 0 || cfg.words_per_utt_min > cfg.words_per_utt_max {
        return Err(contract("words_per_utt range is empty"));
    }
    if cfg.frames_per_char_min < 4 || cfg.frames_per_char_min > cfg.frames_per_char_max {
        return Err(contract(
            "frames_per_char_min must be at least the 4x subsampling factor",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = make_prototypes(&mut rng, cfg.feature_dim);
    // Group membership (v/w swap) alternates by speaker index within every
    // speaker set, so both groups are equally represented and membership is
    // uncorrelated with the mixing transform.
    let profiles = |prefix: &str, count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<_>> {
        (0..count)
            .map(|i| make_profile(rng, format!("{prefix}{i:02}"), cfg, i % 2 == 1))
            .collect()
    };
    let train_profiles = profiles("spk", cfg.num_speakers, &mut rng)?;
    let adapt_profiles = profiles("adp", cfg.adapt_speakers, &mut rng)?;
    let bias_profiles = profiles("bia", cfg.bias_speakers, &mut rng)?;

    let train = make_split(&mut rng, cfg, &protos, "train", &train_profiles,
        cfg.utts_per_speaker, |_| TextMode::Standard)?;
    let test = make_split(&mut rng, cfg, &protos, "test", &train_profiles,
        cfg.test_utts_per_speaker, |_| TextMode::Standard)?;
    let adapt = make_split(&mut rng, cfg, &protos, "adapt", &adapt_profiles,
        cfg.adapt_utts_per_speaker, |_| TextMode::ForceAmbiguous)?;
    let bias_train = make_split(&mut rng, cfg, &protos, "bias_train", &bias_profiles,
        cfg.bias_utts_per_speaker,
        |k| TextMode::Entity(&cfg.entities_train[k % cfg.entities_train.len()]))?;
    let bias_eval = make_split(&mut rng, cfg, &protos, "bias_eval", &bias_profiles,
        cfg.bias_eval_utts_per_speaker,
        |k| TextMode::Entity(&cfg.entities_eval[k % cfg.entities_eval.len()]))?;
    Ok(Corpus { train, test, adapt, bias_train, bias_eval })
}

/// Writes features as the 8-byte magic header plus row-major little-endian
/// f32 values.
pub fn write_features(path: &Path, feats: &Mat) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + feats.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    for &v in &feats.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a feature file; the frame count comes from the manifest, the width
/// is inferred from the payload size.
pub fn read_features(path: &Path, num_frames: usize) -> Result<Mat> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..8] != FEATURE_MAGIC {
        return Err(SiclError::Format(format!("{}: bad feature magic", path.display())));
    }
    let body = &bytes[8..];
    if body.len() % 4 != 0 {
        return Err(SiclError::Format(format!("{}: truncated feature payload", path.display())));
    }
    let values = body.len() / 4;
    if num_frames == 0 || values % num_frames != 0 {
        return Err(SiclError::Format(format!(
            "{}: {values} values do not divide into {num_frames} frames",
            path.display()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Mat::from_vec(num_frames, values / num_frames, data))
}

/// One line of a split manifest.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub speaker: String,
    /// Feature file path relative to the corpus root.
    pub path: String,
    pub num_frames: usize,
    pub transcription: String,
    pub entities: Vec<String>,
}

/// Saves every split under `root` as `<split>/manifest.jsonl` plus one
/// feature file per utterance.
pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    for (name, utts) in corpus.splits() {
        let feat_dir = root.join(name).join("feats");
        fs::create_dir_all(&feat_dir)?;
        let mut manifest = String::new();
        for u in utts {
            let rel = format!("{name}/feats/{}.feat", u.id);
            write_features(&root.join(&rel), &u.features)?;
            let record = ManifestRecord {
                id: u.id.clone(),
                speaker: u.speaker.clone(),
                path: rel,
                num_frames: u.features.rows,
                transcription: u.transcription.clone(),
                entities: u.entities.clone(),
            };
            manifest.push_str(&serde_json::to_string(&record)?);
            manifest.push('\n');
        }
        fs::write(root.join(name).join("manifest.jsonl"), manifest)?;
    }
    Ok(())
}

/// Loads one split in manifest order.
pub fn load_split(root: &Path, name: &str) -> Result<Vec<Utterance>> {
    let manifest_path = root.join(name).join("manifest.jsonl");
    let text = fs::read_to_string(&manifest_path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let record: ManifestRecord = serde_json::from_str(line)?;
        let features = read_features(&root.join(&record.path), record.num_frames)?;
        out.push(Utterance {
            id: record.id,
            speaker: record.speaker,
            features,
            transcription: record.transcription,
            entities: record.entities,
        });
    }
    Ok(out)
}

pub fn load_corpus(root: &Path) -> Result<Corpus> {
    Ok(Corpus {
        train: load_split(root, "train")?,
        test: load_split(root, "test")?,
        adapt: load_split(root, "adapt")?,
        bias_train: load_split(root, "bias_train")?,
        bias_eval: load_split(root, "bias_eval")?,
    })
}

/// Groups utterances by speaker, preserving within-speaker order. BTreeMap
/// keeps speaker iteration order deterministic.
pub fn utterances_by_speaker(utts: &[Utterance]) -> BTreeMap<&str, Vec<&Utterance>> {
    let mut map: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    for u in utts {
        map.entry(u.speaker.as_str()).or_default().push(u);
    }
    map
}

/// How utterances are grouped into a document.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DocumentMode {
    /// A contiguous window of one speaker's utterances, in order.
    Consecutive,
    /// Distinct random utterances of one speaker.
    RandomSameSpeaker,
    /// Distinct random utterances from the whole split.
    RandomAny,
}

/// Picks `n` utterances forming one document and checks the decoder token
/// budget (each utterance costs its characters plus one end marker).
pub fn assemble_document<'a>(
    utts: &'a [Utterance],
    mode: DocumentMode,
    n: usize,
    max_doc_tokens: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'a Utterance>> {
    if n == 0 {
        return Err(contract("a document needs at least one utterance"));
    }
    let doc: Vec<&Utterance> = match mode {
        DocumentMode::Consecutive | DocumentMode::RandomSameSpeaker => {
            let by_speaker = utterances_by_speaker(utts);
            let eligible: Vec<&Vec<&Utterance>> =
                by_speaker.values().filter(|v| v.len() >= n).collect();
            if eligible.is_empty() {
                return Err(contract(format!("no speaker has {n} utterances in this split")));
            }
            let pool = eligible[rng.gen_range(0..eligible.len())];
            if mode == DocumentMode::Consecutive {
                let start = rng.gen_range(0..=pool.len() - n);
                pool[start..start + n].to_vec()
            } else {
                index_sample(rng, pool.len(), n).iter().map(|i| pool[i]).collect()
            }
        }
        DocumentMode::RandomAny => {
            if utts.len() < n {
                return Err(contract(format!(
                    "split has {} utterances, document wants {n}",
                    utts.len()
                )));
            }
            index_sample(rng, utts.len(), n).iter().map(|i| &utts[i]).collect()
        }
    };
    let tokens: usize = doc.iter().map(|u| u.transcription.chars().count() + 1).sum();
    if tokens > max_doc_tokens {
        return Err(SiclError::Capacity(format!(
            "document needs {tokens} decoder positions, budget is {max_doc_tokens}"
        )));
    }
    Ok(doc)
}

/// The adaptation split divided into a per-speaker context pool (the first
/// `context_per_speaker` utterances, matching generation order) and the
/// evaluation remainder.
#[derive(Debug)]
pub struct AdaptationSplit<'a> {
    pub context: BTreeMap<&'a str, Vec<&'a Utterance>>,
    pub eval: Vec<&'a Utterance>,
}

pub fn split_adaptation(
    adapt: &[Utterance],
    context_per_speaker: usize,
) -> Result<AdaptationSplit<'_>> {
    if context_per_speaker == 0 {
        return Err(contract("adaptation context pool must be non-empty"));
    }
    let mut context: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    let mut eval = Vec::new();
    for (speaker, utts) in utterances_by_speaker(adapt) {
        if utts.len() <= context_per_speaker {
            return Err(contract(format!(
                "speaker {speaker} has {} adaptation utterances, needs more than {context_per_speaker}",
                utts.len()
            )));
        }
        context.insert(speaker, utts[..context_per_speaker].to_vec());
        eval.extend_from_slice(&utts[context_per_speaker..]);
    }
    Ok(AdaptationSplit { context, eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab;

    fn tiny_cfg(seed: u64) -> DataConfig {
        DataConfig {
            seed,
            feature_dim: 4,
            num_speakers: 2,
            utts_per_speaker: 4,
            test_utts_per_speaker: 2,
            adapt_speakers: 2,
            adapt_utts_per_speaker: 3,
            adapt_context_utts: 1,
            bias_speakers: 2,
            bias_utts_per_speaker: 4,
            bias_eval_utts_per_speaker: 4,
            words_per_utt_min: 2,
            words_per_utt_max: 3,
            frames_per_char_min: 4,
            frames_per_char_max: 6,
            ..DataConfig::desk()
        }
    }

    #[test]
    fn desk_lexicon_is_well_formed() {
        validate_lexicon(&DataConfig::desk()).unwrap();
    }

    #[test]
    fn lexicon_violations_are_rejected() {
        let mut cfg = tiny_cfg(0);
        cfg.words.push("vane".into());
        assert!(validate_lexicon(&cfg).is_err(), "reserved letter in base word");

        let mut cfg = tiny_cfg(0);
        cfg.words.clear();
        assert!(validate_lexicon(&cfg).is_err(), "empty lexicon");

        let mut cfg = tiny_cfg(0);
        cfg.ambiguous_pairs.push(("vend".into(), "mend".into()));
        assert!(validate_lexicon(&cfg).is_err(), "pair not a v/w swap");

        let mut cfg = tiny_cfg(0);
        cfg.entities_eval.push("jold".into());
        assert!(validate_lexicon(&cfg).is_err(), "entity in both splits");
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate_corpus(&tiny_cfg(7)).unwrap();
        let b = generate_corpus(&tiny_cfg(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&tiny_cfg(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rare_letter_pairs_share_prototypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let protos = make_prototypes(&mut rng, 8);
        assert_eq!(protos.0[proto_index('q')], protos.0[proto_index('j')]);
        assert_eq!(protos.0[proto_index('z')], protos.0[proto_index('x')]);
        assert_ne!(protos.0[proto_index('v')], protos.0[proto_index('w')]);
    }

    #[test]
    fn swapped_speakers_make_minimal_pairs_collide() {
        // With noise and mixing off, a group-B speaker saying "vat" must
        // produce exactly the frames of a group-A speaker saying "wat".
        let mut cfg = tiny_cfg(0);
        cfg.noise_scale = 0.0;
        cfg.speaker_transform_scale = 0.0;
        cfg.frames_per_char_min = 4;
        cfg.frames_per_char_max = 4;
        let mut proto_rng = ChaCha8Rng::seed_from_u64(11);
        let protos = make_prototypes(&mut proto_rng, cfg.feature_dim);
        let plain = make_profile(&mut proto_rng, "a".into(), &cfg, false).unwrap();
        let swapped = make_profile(&mut proto_rng, "b".into(), &cfg, true).unwrap();

        let synth = |profile: &SpeakerProfile, text: &str| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            synth_features(&mut rng, &protos, profile, text, &cfg).unwrap()
        };
        assert_eq!(synth(&swapped, "vat"), synth(&plain, "wat"));
        assert_eq!(synth(&swapped, "wat"), synth(&plain, "vat"));
        assert_ne!(synth(&plain, "vat"), synth(&plain, "wat"));
    }

    #[test]
    fn every_utterance_is_realizable_sized_and_quantized() {
        let corpus = generate_corpus(&tiny_cfg(1)).unwrap();
        for (_, utts) in corpus.splits() {
            assert!(!utts.is_empty());
            for u in utts {
                let chars = u.transcription.chars().count();
                assert!(subsampled_len(u.features.rows) >= chars, "{}", u.id);
                assert!((8..=512).contains(&u.features.rows), "{}", u.id);
                assert!(u.features.data.iter().all(|&v| v == (v as f32) as f64), "{}", u.id);
                let toks = u.tokens();
                assert!(toks.iter().all(|&t| t != vocab::UNK), "{}", u.id);
            }
        }
    }

    #[test]
    fn splits_have_expected_shape() {
        let cfg = tiny_cfg(2);
        let corpus = generate_corpus(&cfg).unwrap();
        assert_eq!(corpus.train.len(), cfg.num_speakers * cfg.utts_per_speaker);
        assert_eq!(corpus.test.len(), cfg.num_speakers * cfg.test_utts_per_speaker);
        assert_eq!(corpus.adapt.len(), cfg.adapt_speakers * cfg.adapt_utts_per_speaker);
        assert_eq!(corpus.bias_train.len(), cfg.bias_speakers * cfg.bias_utts_per_speaker);
        assert_eq!(corpus.bias_eval.len(), cfg.bias_speakers * cfg.bias_eval_utts_per_speaker);

        // Rare letters stay confined to the biasing splits.
        for split in [&corpus.train, &corpus.test, &corpus.adapt] {
            for u in split {
                assert!(
                    !u.transcription.chars().any(|c| RARE_CHARS.contains(&c)),
                    "rare letter leaked into {}",
                    u.id
                );
                assert!(u.entities.is_empty());
            }
        }
        // Every adaptation utterance carries at least one ambiguous letter.
        for u in &corpus.adapt {
            assert!(
                u.transcription.chars().any(|c| AMBIGUOUS_CHARS.contains(&c)),
                "{} has no ambiguous word",
                u.id
            );
        }
        // Biasing utterances tag exactly one entity from the right inventory,
        // assigned round-robin within each speaker.
        let by_speaker = utterances_by_speaker(&corpus.bias_eval);
        for (_, utts) in by_speaker {
            for (k, u) in utts.iter().enumerate() {
                assert_eq!(u.entities.len(), 1);
                let e = &u.entities[0];
                assert_eq!(e, &cfg.entities_eval[k % cfg.entities_eval.len()]);
                assert!(u.transcription.split(' ').any(|w| w == e));
            }
        }
        for u in &corpus.bias_train {
            assert!(cfg.entities_train.contains(&u.entities[0]));
        }
        // Test speakers are train speakers; adaptation and biasing speakers
        // are disjoint from them.
        let train_speakers: std::collections::BTreeSet<_> =
            corpus.train.iter().map(|u| u.speaker.clone()).collect();
        assert!(corpus.test.iter().all(|u| train_speakers.contains(&u.speaker)));
        assert!(corpus.adapt.iter().all(|u| !train_speakers.contains(&u.speaker)));
        assert!(corpus.bias_train.iter().all(|u| !train_speakers.contains(&u.speaker)));
    }

    #[test]
    fn save_and_load_round_trip_bit_exactly() {
        let corpus = generate_corpus(&tiny_cfg(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus, loaded);
    }

    #[test]
    fn feature_files_reject_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feat");
        let feats = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        write_features(&path, &feats).unwrap();
        assert_eq!(read_features(&path, 2).unwrap(), feats);
        assert!(read_features(&path, 3).is_err(), "frame count mismatch");

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_features(&path, 2), Err(SiclError::Format(_))));
    }

    #[test]
    fn document_assembly_modes_hold_their_contracts() {
        let corpus = generate_corpus(&tiny_cfg(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let doc =
            assemble_document(&corpus.train, DocumentMode::Consecutive, 3, 256, &mut rng).unwrap();
        let speaker = &doc[0].speaker;
        assert!(doc.iter().all(|u| &u.speaker == speaker));
        let ids: Vec<&str> = doc.iter().map(|u| u.id.as_str()).collect();
        let pool = utterances_by_speaker(&corpus.train)[speaker.as_str()].clone();
        let start = pool.iter().position(|u| u.id == ids[0]).unwrap();
        for (offset, id) in ids.iter().enumerate() {
            assert_eq!(*id, pool[start + offset].id);
        }

        let doc =
            assemble_document(&corpus.train, DocumentMode::RandomSameSpeaker, 4, 256, &mut rng)
                .unwrap();
        let speaker = &doc[0].speaker;
        assert!(doc.iter().all(|u| &u.speaker == speaker));
        let mut seen: Vec<&str> = doc.iter().map(|u| u.id.as_str()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 4, "utterances must be distinct");

        assert!(matches!(
            assemble_document(&corpus.train, DocumentMode::RandomAny, 2, 5, &mut rng),
            Err(SiclError::Capacity(_))
        ));
        assert!(assemble_document(&corpus.train, DocumentMode::Consecutive, 100, 10_000, &mut rng)
            .is_err());
        assert!(assemble_document(&corpus.train, DocumentMode::RandomAny, 0, 256, &mut rng)
            .is_err());
    }

    #[test]
    fn adaptation_split_is_deterministic_and_disjoint() {
        let cfg = tiny_cfg(6);
        let corpus = generate_corpus(&cfg).unwrap();
        let split = split_adaptation(&corpus.adapt, cfg.adapt_context_utts).unwrap();
        assert_eq!(split.context.len(), cfg.adapt_speakers);
        let mut context_ids = Vec::new();
        for (_, utts) in &split.context {
            assert_eq!(utts.len(), cfg.adapt_context_utts);
            context_ids.extend(utts.iter().map(|u| u.id.clone()));
        }
        for u in &split.eval {
            assert!(!context_ids.contains(&u.id));
        }
        assert_eq!(
            context_ids.len() + split.eval.len(),
            corpus.adapt.len(),
            "no utterance is dropped"
        );
        // Context utterances are each speaker's earliest, matching the pool a
        // deployed system would have collected first.
        for (speaker, utts) in &split.context {
            for (k, u) in utts.iter().enumerate() {
                assert_eq!(u.id, format!("adapt-{speaker}-{k:03}"));
            }
        }
        assert!(split_adaptation(&corpus.adapt, cfg.adapt_utts_per_speaker).is_err());
    }
}
