//! Encoder-decoder model assembly.
//!
//! [`Model`] owns the parameter store and the precomputed position tables.
//! Training binds every parameter onto an autodiff tape ([`Model::bind`]);
//! inference materializes them once as plain matrices
//! ([`Model::infer_weights`]). Both views are produced by the same canonical
//! parameter walk, so they cannot drift apart.

pub mod attention;
pub mod decoder;
pub mod encoder;
pub mod weights;

use sicl_tensor::{Tape, TensorId};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::mat::Mat;
use crate::params::{init_rng, ParamStore};
use weights::{walk, InferWeights, TapeWeights};

/// Sinusoidal position table: row p holds sin(p / 10000^(2i/d)) and
/// cos(p / 10000^(2i/d)) interleaved over column pairs.
pub fn sinusoidal_pe(max_pos: usize, d: usize) -> Mat {
    let mut pe = Mat::zeros(max_pos, d);
    for p in 0..max_pos {
        let row = pe.row_mut(p);
        for i in 0..d / 2 {
            let rate = (p as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            row[2 * i] = rate.sin();
            row[2 * i + 1] = rate.cos();
        }
    }
    pe
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    /// Position table for subsampled encoder frames.
    pub pe_enc: Mat,
    /// Position table for decoder document positions.
    pub pe_dec: Mat,
}

impl Model {
    /// Fresh model with deterministic fan-based initialization. Norm gains
    /// start at one, biases at zero.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = init_rng(seed);
        walk(&cfg, &mut |name, shape| {
            match name.rsplit('.').next().unwrap() {
                "g" => store.filled(name, shape.to_vec(), 1.0),
                "b" | "b1" | "b2" => store.zeros(name, shape.to_vec()),
                _ => store.uniform(name, shape.to_vec(), &mut rng),
            };
        });
        Ok(Self::from_store(cfg, store))
    }

    /// Model around an existing parameter store (checkpoint restore).
    pub fn from_store(cfg: ModelConfig, params: ParamStore) -> Self {
        let pe_enc = sinusoidal_pe(cfg.max_enc_positions, cfg.model_dim);
        let pe_dec = sinusoidal_pe(cfg.max_doc_tokens, cfg.model_dim);
        Model { cfg, params, pe_enc, pe_dec }
    }

    pub fn num_values(&self) -> usize {
        self.params.total_values()
    }

    /// Register every parameter on a tape and return both the flat id list
    /// (ordered by parameter id, for gradient collection) and the typed
    /// tree.
    pub fn bind(&self, tape: &mut Tape) -> (Vec<TensorId>, TapeWeights) {
        let ids = self.params.bind(tape);
        let mut next = 0usize;
        let tree = walk(&self.cfg, &mut |name, _| {
            debug_assert_eq!(self.params.get(next).name, name);
            let id = ids[next];
            next += 1;
            id
        });
        (ids, tree)
    }

    /// Materialize all parameters as inference matrices.
    pub fn infer_weights(&self) -> InferWeights {
        let mut next = 0usize;
        walk(&self.cfg, &mut |name, _| {
            debug_assert_eq!(self.params.get(next).name, name);
            let m = self.params.mat(next);
            next += 1;
            m
        })
    }
}
