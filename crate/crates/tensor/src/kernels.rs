//! Raw numeric kernels on flat `f64` slices.
//!
//! Both the tape ops and any tape-free inference path call into these, so the
//! two paths produce bit-identical results for the same inputs.

/// C[m,n] += A[m,k] @ B[k,n]. Accumulates into `out`.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// A[m,k] @ B[k,n] -> C[m,n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// A[m,k] @ B[n,k]^T -> C[m,n]. Row-times-row dot products; no transpose copy.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(a_row, b_row);
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// 2D transpose: [r,c] -> [c,r].
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// In-place softmax over one contiguous row, with max-subtraction.
/// Entries equal to -inf get exactly zero weight. Panics if the whole row
/// is -inf (an all-masked row is a caller contract violation).
pub fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(
        max > f64::NEG_INFINITY,
        "softmax over an all-masked (-inf) row"
    );
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// In-place log-softmax over one contiguous row.
pub fn log_softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(
        max > f64::NEG_INFINITY,
        "log_softmax over an all-masked (-inf) row"
    );
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Layer norm over one row: (x - mean) / sqrt(var + eps) * gain + bias.
pub fn layer_norm_row(row: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) {
    let d = row.len();
    let mean = row.iter().sum::<f64>() / d as f64;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
    let inv_std = 1.0 / (var + eps).sqrt();
    for i in 0..d {
        out[i] = (row[i] - mean) * inv_std * gain[i] + bias[i];
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Output length of a 1-D convolution: floor((len + 2*pad - kernel) / stride) + 1.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Dense 1-D convolution over time-major input.
/// x: [t, c_in], w: [c_out, c_in, k], b: [c_out] -> [t', c_out].
pub fn conv1d(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    t: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let t_out = conv_out_len(t, kernel, stride, pad);
    let mut out = vec![0.0; t_out * c_out];
    for ti in 0..t_out {
        let start = (ti * stride) as isize - pad as isize;
        for co in 0..c_out {
            let mut acc = b[co];
            let w_base = co * c_in * kernel;
            for kk in 0..kernel {
                let src = start + kk as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let x_row = &x[src as usize * c_in..(src as usize + 1) * c_in];
                let w_row = &w[w_base + kk..];
                for (ci, &xv) in x_row.iter().enumerate() {
                    acc += xv * w_row[ci * kernel];
                }
            }
            out[ti * c_out + co] = acc;
        }
    }
    out
}

/// Depthwise 1-D convolution: each channel convolved with its own kernel.
/// x: [t, c], w: [c, k] -> [t', c].
pub fn depthwise_conv1d(
    x: &[f64],
    w: &[f64],
    t: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let t_out = conv_out_len(t, kernel, stride, pad);
    let mut out = vec![0.0; t_out * c];
    for ti in 0..t_out {
        let start = (ti * stride) as isize - pad as isize;
        for kk in 0..kernel {
            let src = start + kk as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let x_row = &x[src as usize * c..(src as usize + 1) * c];
            let out_row = &mut out[ti * c..(ti + 1) * c];
            for ci in 0..c {
                out_row[ci] += x_row[ci] * w[ci * kernel + kk];
            }
        }
    }
    out
}
