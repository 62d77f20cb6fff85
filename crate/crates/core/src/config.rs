//! Model, training, decoding, and data-generation configuration.
//!
//! Two named presets exist: `desk` (the test default, small enough to train
//! on a laptop CPU) and `paper` (the published architecture dimensions,
//! recorded for fidelity but not exercised by tests).

use serde::{Deserialize, Serialize};

use crate::error::{Result, SiclError};
use crate::vocab;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub conv_kernel: usize,
    pub vocab_size: usize,
    pub ctc_dim: usize,
    pub ln_eps: f64,
    /// Hard cap on decoder document length; longer documents are a capacity
    /// error (decode paths evict or reject before hitting it).
    pub max_doc_tokens: usize,
    /// Positional table size for encoder frames after subsampling.
    pub max_enc_positions: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            feature_dim: 16,
            model_dim: 64,
            num_heads: 4,
            ff_dim: 128,
            enc_layers: 4,
            dec_layers: 2,
            conv_kernel: 3,
            vocab_size: vocab::VOCAB_SIZE,
            ctc_dim: vocab::CTC_DIM,
            ln_eps: 1e-5,
            max_doc_tokens: 256,
            max_enc_positions: 256,
        }
    }

    /// Published dimensions. Training this preset needs GPU-scale compute;
    /// it exists so the configuration space matches the reference system.
    pub fn paper() -> Self {
        ModelConfig {
            feature_dim: 80,
            model_dim: 512,
            num_heads: 8,
            ff_dim: 684,
            enc_layers: 18,
            dec_layers: 6,
            conv_kernel: 3,
            vocab_size: vocab::VOCAB_SIZE,
            ctc_dim: vocab::CTC_DIM,
            ln_eps: 1e-5,
            max_doc_tokens: 2048,
            max_enc_positions: 4096,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.num_heads != 0 {
            return Err(SiclError::Contract(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(SiclError::Contract(format!(
                "conv_kernel {} must be odd",
                self.conv_kernel
            )));
        }
        if self.vocab_size + 1 != self.ctc_dim {
            return Err(SiclError::Contract(format!(
                "ctc_dim {} must be vocab_size {} + 1 (blank)",
                self.ctc_dim, self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// CTC weight in the hybrid loss.
    pub lambda: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Documents per optimizer step.
    pub batch_docs: usize,
    /// Utterances per document in stage-2 training.
    pub doc_utterances: usize,
    pub icft_epochs: usize,
    pub icft_lr: f64,
    /// Fraction of stage-2 documents assembled only from utterances that
    /// contain an ambiguous word, to give the context-copy circuit enough
    /// signal.
    pub ambiguous_doc_fraction: f64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            seed: 0,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            lambda: 0.2,
            stage1_epochs: 6,
            stage2_epochs: 48,
            batch_docs: 8,
            doc_utterances: 4,
            icft_epochs: 6,
            icft_lr: 5e-4,
            ambiguous_doc_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// CTC weight in the joint decoding score; defaults to the training
    /// weight since the same symbol is reused.
    pub lambda_dec: f64,
    pub max_tokens_per_utterance: usize,
    pub length_penalty: f64,
    /// Number of in-context examples for adapt/bias decoding.
    pub context_size: usize,
}

impl DecodeConfig {
    pub fn desk() -> Self {
        DecodeConfig {
            beam_size: 4,
            lambda_dec: 0.2,
            max_tokens_per_utterance: 48,
            length_penalty: 0.0,
            context_size: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub test_utts_per_speaker: usize,
    /// Speakers held out entirely for the adaptation split.
    pub adapt_speakers: usize,
    pub adapt_utts_per_speaker: usize,
    /// Per-speaker utterances reserved as adaptation context.
    pub adapt_context_utts: usize,
    pub bias_speakers: usize,
    pub bias_utts_per_speaker: usize,
    /// Biasing-eval utterances per biasing speaker; these carry the held-out
    /// entity inventory that never appears in any training split.
    pub bias_eval_utts_per_speaker: usize,
    pub words_per_utt_min: usize,
    pub words_per_utt_max: usize,
    pub frames_per_char_min: usize,
    pub frames_per_char_max: usize,
    pub noise_scale: f64,
    /// Scale of the random perturbation in each speaker's mixing transform
    /// (I + scale * G). Small values keep speaker identity hard to memorize.
    pub speaker_transform_scale: f64,
    /// Probability that a sampled word is an ambiguous-pair word in the
    /// train/test splits (the adapt split forces at least one per utterance).
    pub ambiguous_word_prob: f64,
    /// Base vocabulary; every word avoids the ambiguous and rare letters.
    pub words: Vec<String>,
    /// Minimal pairs that share acoustics; both surface forms are real words.
    pub ambiguous_pairs: Vec<(String, String)>,
    /// Entity surface forms seen during biasing fine-tuning.
    pub entities_train: Vec<String>,
    /// Entity surface forms reserved for biasing evaluation.
    pub entities_eval: Vec<String>,
}

impl DataConfig {
    pub fn desk() -> Self {
        DataConfig {
            seed: 0,
            feature_dim: 16,
            num_speakers: 12,
            utts_per_speaker: 80,
            test_utts_per_speaker: 8,
            adapt_speakers: 4,
            adapt_utts_per_speaker: 64,
            adapt_context_utts: 12,
            bias_speakers: 4,
            bias_utts_per_speaker: 40,
            bias_eval_utts_per_speaker: 16,
            words_per_utt_min: 2,
            words_per_utt_max: 3,
            frames_per_char_min: 4,
            frames_per_char_max: 8,
            noise_scale: 0.25,
            speaker_transform_scale: 0.1,
            ambiguous_word_prob: 0.11,
            words: crate::data::BASE_WORDS.iter().map(|w| w.to_string()).collect(),
            ambiguous_pairs: crate::data::AMBIGUOUS_PAIRS
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            entities_train: crate::data::TRAIN_ENTITIES.iter().map(|w| w.to_string()).collect(),
            entities_eval: crate::data::EVAL_ENTITIES.iter().map(|w| w.to_string()).collect(),
        }
    }
}

/// The fully resolved run configuration; echoed as `config.resolved` into
/// every output directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            decode: DecodeConfig::desk(),
            data: DataConfig::desk(),
        }
    }

    pub fn paper() -> Self {
        RunConfig { model: ModelConfig::paper(), ..RunConfig::desk() }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.model.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::desk();
        let back = RunConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&RunConfig::desk().to_json_pretty()).unwrap();
        v["model"]["bogus_knob"] = serde_json::json!(1);
        let err = RunConfig::from_json(&v.to_string());
        assert!(err.is_err(), "unknown key must be rejected");
    }

    #[test]
    fn paper_preset_records_published_dims() {
        let p = ModelConfig::paper();
        assert_eq!(p.enc_layers, 18);
        assert_eq!(p.model_dim, 512);
        assert_eq!(p.num_heads, 8);
        assert_eq!(p.ff_dim, 684);
        assert_eq!(p.dec_layers, 6);
        assert_eq!(p.conv_kernel, 3);
    }
}
