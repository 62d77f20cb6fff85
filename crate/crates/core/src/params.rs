//! Named parameter storage, initialization, tape binding, and Adam.
//!
//! Parameters live in a flat name-indexed store. Registration order is fixed
//! by construction order, which makes initialization and optimizer state
//! reproducible from a seed alone.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sicl_tensor::{Tape, TensorId};

use crate::mat::Mat;

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a zero-filled parameter. Names must be unique.
    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> usize {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![0.0; n])
    }

    /// Register with scaled-uniform init, U(-s, s) with s = sqrt(6/(fan_in+fan_out)).
    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> usize {
        let n: usize = shape.iter().product();
        let (fan_in, fan_out) = match shape.len() {
            1 => (shape[0], shape[0]),
            2 => (shape[0], shape[1]),
            // conv weight [c_out, c_in, k]
            3 => (shape[1] * shape[2], shape[0] * shape[2]),
            _ => (n, n),
        };
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..n).map(|_| rng.gen_range(-s..s)).collect();
        self.insert(name, shape, data)
    }

    /// Register with all values set to `v` (layer-norm gains).
    pub fn filled(&mut self, name: &str, shape: Vec<usize>, v: f64) -> usize {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![v; n])
    }

    fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param { name: name.to_string(), shape, data });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn id(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param {
        &mut self.params[id]
    }

    pub fn by_name(&self, name: &str) -> &Param {
        self.get(self.id(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Parameter as an inference matrix view (copies; desk-scale sizes).
    /// Rank-1 parameters become a single row; rank-3 convolution filters
    /// keep their leading (output-channel) dimension as rows, flat data
    /// unchanged.
    pub fn mat(&self, id: usize) -> Mat {
        let p = &self.params[id];
        match p.shape.len() {
            1 => Mat::from_vec(1, p.shape[0], p.data.clone()),
            2 => Mat::from_vec(p.shape[0], p.shape[1], p.data.clone()),
            _ => Mat::from_vec(
                p.shape[0],
                p.shape[1..].iter().product(),
                p.data.clone(),
            ),
        }
    }

    pub fn vec(&self, id: usize) -> &[f64] {
        &self.params[id].data
    }

    /// Register every parameter on a tape as a differentiable leaf, in store
    /// order. The returned ids are indexed by parameter id.
    pub fn bind(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.data.clone(), p.shape.clone(), true))
            .collect()
    }

    /// Collect gradients off a tape after backward, ordered by parameter id.
    /// Parameters not reached by the loss get zero gradients.
    pub fn grads(&self, tape: &Tape, ids: &[TensorId]) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .zip(ids.iter())
            .map(|(p, &id)| {
                tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.data.len()])
            })
            .collect()
    }
}

/// Deterministic RNG for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Adam with optional global gradient-norm clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64, grad_clip: f64) -> Self {
        let m = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let v = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Adam { lr, beta1, beta2, eps, grad_clip, m, v, t: 0 }
    }

    /// Apply one update from gradients ordered by parameter id.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        let mut scale = 1.0;
        if self.grad_clip > 0.0 {
            let norm_sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum();
            let norm = norm_sq.sqrt();
            if norm > self.grad_clip {
                scale = self.grad_clip / norm;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pid, grad) in grads.iter().enumerate() {
            let param = store.get_mut(pid);
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            for (i, &g_raw) in grad.iter().enumerate() {
                let g = g_raw * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
