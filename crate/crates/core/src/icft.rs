//! In-context fine-tuning examples.
//!
//! Each example is a same-speaker document whose final utterance is the
//! training target. When a word of length three or more is shared between
//! the target and the context transcriptions, one such word is chosen
//! uniformly and its occurrences in the target label are rewritten with one
//! or two random character edits; the context keeps the original spelling and
//! the audio is untouched. The model therefore earns low loss only by staying
//! anchored to the context text while tolerating spelling deviations, instead
//! of memorizing word forms. The loss covers only the final utterance's
//! positions.

use std::collections::BTreeSet;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Utterance;
use crate::decoding::ContextSet;
use crate::error::{contract, Result};

/// One fine-tuning document. `target.transcription` keeps the reference
/// spelling; `target_label` is what the decoder is trained to emit.
#[derive(Clone, Debug)]
pub struct IcftExample {
    pub context: ContextSet,
    pub target: Utterance,
    pub target_label: String,
    /// Original and perturbed surface forms, when a shared word was found.
    pub modified_word: Option<(String, String)>,
    /// One flag per document target position (every utterance's tokens plus
    /// its end marker); true only on the final utterance's segment.
    pub loss_mask: Vec<bool>,
}

/// Picks a word of length ≥ 3 that occurs in the target and in at least one
/// context transcription, uniformly among the distinct candidates.
pub fn select_shared_word(
    target: &str,
    contexts: &[&str],
    rng: &mut ChaCha8Rng,
) -> Option<String> {
    let target_words: BTreeSet<&str> =
        target.split_whitespace().filter(|w| w.chars().count() >= 3).collect();
    let context_words: BTreeSet<&str> = contexts
        .iter()
        .flat_map(|c| c.split_whitespace())
        .filter(|w| w.chars().count() >= 3)
        .collect();
    let shared: Vec<&&str> = target_words.intersection(&context_words).collect();
    if shared.is_empty() {
        return None;
    }
    Some(shared[rng.gen_range(0..shared.len())].to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EditKind {
    Insert,
    Delete,
    Substitute,
}

fn random_letter(rng: &mut ChaCha8Rng) -> char {
    (b'a' + rng.gen_range(0..26u8)) as char
}

fn apply_edit(chars: &mut Vec<char>, rng: &mut ChaCha8Rng) -> EditKind {
    let kind = match rng.gen_range(0..3u8) {
        0 => EditKind::Insert,
        1 => EditKind::Delete,
        _ => EditKind::Substitute,
    };
    match kind {
        EditKind::Insert => {
            let pos = rng.gen_range(0..=chars.len());
            chars.insert(pos, random_letter(rng));
        }
        EditKind::Delete => {
            let pos = rng.gen_range(0..chars.len());
            chars.remove(pos);
        }
        EditKind::Substitute => {
            let pos = rng.gen_range(0..chars.len());
            loop {
                let c = random_letter(rng);
                if c != chars[pos] {
                    chars[pos] = c;
                    break;
                }
            }
        }
    }
    kind
}

fn perturb_word_traced(word: &str, rng: &mut ChaCha8Rng) -> Result<(String, Vec<EditKind>)> {
    if word.chars().count() < 3 {
        return Err(contract(format!("word {word:?} too short to perturb")));
    }
    loop {
        let mut chars: Vec<char> = word.chars().collect();
        let k = rng.gen_range(1..=2usize);
        let kinds: Vec<EditKind> = (0..k).map(|_| apply_edit(&mut chars, rng)).collect();
        let out: String = chars.iter().collect();
        // A delete/insert pair can reassemble the original; draw again.
        if !out.is_empty() && out != word {
            return Ok((out, kinds));
        }
    }
}

/// Applies one or two random character edits (insert, delete or substitute,
/// all uniform) and guarantees a non-empty result different from the input.
pub fn perturb_word(word: &str, rng: &mut ChaCha8Rng) -> Result<String> {
    perturb_word_traced(word, rng).map(|(w, _)| w)
}

fn replace_word(text: &str, from: &str, to: &str) -> String {
    text.split(' ')
        .map(|w| if w == from { to } else { w })
        .collect::<Vec<_>>()
        .join(" ")
}

fn target_only_mask(context_texts: &[&str], target_label: &str) -> Vec<bool> {
    let mut mask = Vec::new();
    for c in context_texts {
        mask.extend(std::iter::repeat(false).take(c.chars().count() + 1));
    }
    mask.extend(std::iter::repeat(true).take(target_label.chars().count() + 1));
    mask
}

/// Builds one fine-tuning document from a single speaker's pool:
/// `context_size` exemplars plus a distinct target, all drawn without
/// replacement. With `perturb` set, a shared word (if any) is rewritten in
/// the target label; otherwise, or when no word qualifies, the document is
/// returned unmodified. The loss mask always covers exactly the final
/// utterance.
pub fn build_icft_example(
    pool: &[&Utterance],
    context_size: usize,
    perturb: bool,
    rng: &mut ChaCha8Rng,
) -> Result<IcftExample> {
    if pool.len() < context_size + 1 {
        return Err(contract(format!(
            "speaker pool of {} utterances cannot supply {} context examples plus a target",
            pool.len(),
            context_size
        )));
    }
    let speaker = &pool[0].speaker;
    if pool.iter().any(|u| &u.speaker != speaker) {
        return Err(contract("in-context examples must come from a single speaker"));
    }
    let picked = index_sample(rng, pool.len(), context_size + 1);
    let mut picked: Vec<&Utterance> = picked.iter().map(|i| pool[i]).collect();
    let target = picked.pop().expect("sampled context_size+1 utterances").clone();
    let context = ContextSet::from_utterances(&picked);

    let context_texts: Vec<&str> =
        context.items.iter().map(|i| i.transcription.as_str()).collect();
    let mut target_label = target.transcription.clone();
    let mut modified_word = None;
    if perturb {
        if let Some(word) = select_shared_word(&target.transcription, &context_texts, rng) {
            let perturbed = perturb_word(&word, rng)?;
            target_label = replace_word(&target.transcription, &word, &perturbed);
            modified_word = Some((word, perturbed));
        }
    }
    let loss_mask = target_only_mask(&context_texts, &target_label);
    Ok(IcftExample { context, target, target_label, modified_word, loss_mask })
}
