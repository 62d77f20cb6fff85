//! Finite-difference gradient verification.
//!
//! The checker rebuilds the computation from scratch for every perturbed
//! coordinate, so the function under test must be a pure map from leaf
//! values to a scalar loss.

use crate::tape::{Tape, TensorId};

/// Relative error between an analytic and a numeric derivative:
/// |a - n| / max(1, |a|, |n|). The 1 in the denominator keeps the measure
/// absolute near zero instead of amplifying noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// One differentiable input to a checked function.
#[derive(Clone)]
pub struct CheckInput {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl CheckInput {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Self {
        CheckInput { data, shape }
    }
}

fn eval<F>(f: &F, inputs: &[CheckInput], requires_grad: bool) -> (Tape, Vec<TensorId>, TensorId)
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|inp| tape.leaf(inp.data.clone(), inp.shape.clone(), requires_grad))
        .collect();
    let loss = f(&mut tape, &ids);
    assert_eq!(tape.value(loss).len(), 1, "grad check target must be scalar");
    (tape, ids, loss)
}

/// Check every coordinate of every input against central differences.
/// Returns the worst relative error observed.
pub fn grad_check<F>(f: F, inputs: &[CheckInput], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, inp)| (0..inp.data.len()).map(move |j| (i, j)))
        .collect();
    grad_check_coords(f, inputs, eps, &coords)
}

/// Check only the listed `(input, coordinate)` pairs. Full checks on large
/// models are quadratic in parameter count; sampling keeps them tractable
/// while still probing every tensor.
pub fn grad_check_coords<F>(f: F, inputs: &[CheckInput], eps: f64, coords: &[(usize, usize)]) -> f64
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let (mut tape, ids, loss) = eval(&f, inputs, true);
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, inp)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inp.data.len()]))
        .collect();

    let mut worst = 0.0_f64;
    let mut perturbed = inputs.to_vec();
    for &(i, j) in coords {
        let orig = perturbed[i].data[j];
        perturbed[i].data[j] = orig + eps;
        let plus = {
            let (tape, _, loss) = eval(&f, &perturbed, false);
            tape.value(loss)[0]
        };
        perturbed[i].data[j] = orig - eps;
        let minus = {
            let (tape, _, loss) = eval(&f, &perturbed, false);
            tape.value(loss)[0]
        };
        perturbed[i].data[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i][j], numeric));
    }
    worst
}

/// Deterministically sample up to `max_coords` coordinates spread across all
/// inputs (at least one per input), then run [`grad_check_coords`].
pub fn grad_check_sampled<F>(f: F, inputs: &[CheckInput], eps: f64, max_coords: usize, seed: u64) -> f64
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let total: usize = inputs.iter().map(|i| i.data.len()).sum();
    if total <= max_coords {
        return grad_check(f, inputs, eps);
    }
    let mut state = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut next = || {
        // splitmix64: cheap, stateless-seedable, good enough for coordinate picks
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    let mut coords = Vec::with_capacity(max_coords);
    for (i, inp) in inputs.iter().enumerate() {
        coords.push((i, (next() % inp.data.len() as u64) as usize));
    }
    while coords.len() < max_coords {
        let i = (next() % inputs.len() as u64) as usize;
        let j = (next() % inputs[i].data.len() as u64) as usize;
        coords.push((i, j));
    }
    coords.sort_unstable();
    coords.dedup();
    grad_check_coords(f, inputs, eps, &coords)
}
