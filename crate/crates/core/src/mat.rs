//! Small dense row-major matrix for the tape-free inference path.
//!
//! All arithmetic goes through `sicl_tensor::kernels`, the same routines the
//! training tape uses, so inference and training produce bit-identical
//! numbers for identical inputs.

use sicl_tensor::kernels;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length {} != {rows}x{cols}", data.len());
        Mat { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols, "pushed row has wrong width");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// self[rows x k] @ other[k x n]
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dims {} vs {}", self.cols, other.rows);
        Mat {
            rows: self.rows,
            cols: other.cols,
            data: kernels::matmul(&self.data, &other.data, self.rows, self.cols, other.cols),
        }
    }

    /// self[rows x k] @ other[n x k]^T
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dims {} vs {}", self.cols, other.cols);
        Mat {
            rows: self.rows,
            cols: other.rows,
            data: kernels::matmul_nt(&self.data, &other.data, self.rows, self.cols, other.rows),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn add_row_broadcast(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols, "bias length");
        for row in self.data.chunks_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(bias.iter()) {
                *x += b;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for x in self.data.iter_mut() {
            *x *= c;
        }
    }

    /// Columns [start, start+len) as a new matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Mat {
        assert!(start + len <= self.cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.data[r * self.cols + start..r * self.cols + start + len]);
        }
        Mat { rows: self.rows, cols: len, data }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Mat {
        assert!(start + len <= self.rows, "slice_rows out of range");
        Mat {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    pub fn concat_cols(parts: &[&Mat]) -> Mat {
        assert!(!parts.is_empty());
        let rows = parts[0].rows;
        let total: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                assert_eq!(p.rows, rows, "concat_cols row mismatch");
                data.extend_from_slice(p.row(r));
            }
        }
        Mat { rows, cols: total, data }
    }

    pub fn concat_rows(parts: &[&Mat]) -> Mat {
        assert!(!parts.is_empty());
        let cols = parts[0].cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "concat_rows col mismatch");
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Mat { rows, cols, data }
    }

    pub fn softmax_rows(&mut self) {
        for row in self.data.chunks_mut(self.cols) {
            kernels::softmax_row_inplace(row);
        }
    }

    pub fn log_softmax_rows(&mut self) {
        for row in self.data.chunks_mut(self.cols) {
            kernels::log_softmax_row_inplace(row);
        }
    }

    pub fn layer_norm_rows(&self, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
        let mut out = Mat::zeros(self.rows, self.cols);
        for (row, dst) in self.data.chunks(self.cols).zip(out.data.chunks_mut(self.cols)) {
            kernels::layer_norm_row(row, gain, bias, eps, dst);
        }
        out
    }

    pub fn swish_inplace(&mut self) {
        for x in self.data.iter_mut() {
            *x = kernels::swish(*x);
        }
    }
}
