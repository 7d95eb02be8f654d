//! Dense row-major f32 tensors and the value-level kernels built on them.
//!
//! Tensors are plain values: once built they are never mutated in place by
//! library code (training swaps whole buffers). All differentiable structure
//! lives in [`crate::tape`]; the kernels here are shared by both the tape ops
//! and the fast no-gradient inference paths.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor; a 1-D tensor is treated as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Columns of a 2-D tensor; a 1-D tensor is its own row.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), self.numel());
        Tensor {
            shape,
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

// ── shape checks ─────────────────────────────────────────────────────

pub fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

// ── matmul ───────────────────────────────────────────────────────────

/// C = op(A) · op(B) over row-major buffers, optionally transposing either
/// argument via strides (no copies). Rows of C are split across the rayon
/// pool; each row's accumulation order is fixed, so results are identical
/// for any thread count.
pub fn gemm(
    a: &[f32],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[f32],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
    out: &mut [f32],
) {
    let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (kb, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
    assert_eq!(k, kb, "gemm inner dims {k} vs {kb}");
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.fill(0.0);
        return;
    }
    // transposed views walk the original buffer: row step 1, col step = the
    // source row length
    let (rsa, csa) = if ta {
        (1isize, a_cols as isize)
    } else {
        (a_cols as isize, 1isize)
    };
    let (rsb, csb) = if tb {
        (1isize, b_cols as isize)
    } else {
        (b_cols as isize, 1isize)
    };

    let threads = rayon::current_num_threads();
    if threads > 1 && m >= 2 * GEMM_ROW_SPLIT_MIN {
        use rayon::prelude::*;
        let block = m.div_ceil(threads).max(GEMM_ROW_SPLIT_MIN);
        out.par_chunks_mut(block * n).enumerate().for_each(|(i, chunk)| {
            let r0 = i * block;
            let mb = chunk.len() / n;
            let a_off = if ta { r0 as isize } else { (r0 * a_cols) as isize };
            unsafe {
                matrixmultiply::sgemm(
                    mb,
                    k,
                    n,
                    1.0,
                    a.as_ptr().offset(a_off),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
    } else {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

const GEMM_ROW_SPLIT_MIN: usize = 64;

/// [m,k]·[k,n] for tensors, with shape validation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(vec![m, n]);
    gemm(a.data(), m, k, false, b.data(), k, n, false, out.data_mut());
    Ok(out)
}

/// y[i,j] = x[i,j] + bias[j]
pub fn add_bias_into(x: &mut [f32], bias: &[f32]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

pub fn relu_into(x: &mut [f32]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Row-wise softmax with max shift, reused verbatim by the tape op so value
/// paths and gradient paths agree bit-for-bit.
pub fn softmax_rows_into(x: &mut [f32], cols: usize) {
    for row in x.chunks_mut(cols) {
        let mut mx = f32::NEG_INFINITY;
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// ln(1 + e^x), switched to avoid overflow for large x.
pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// d/dx softplus = logistic sigmoid.
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let a = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]);
        let c = matmul(&eye, &a).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn gemm_transpose_routes_agree() {
        // (AᵀB)ᵀ == Bᵀ A as a cross-check of the stride handling
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(vec![2, 4], (0..8).map(|i| i as f32 * 0.5).collect());
        let mut atb = vec![0.0; 3 * 4];
        gemm(a.data(), 2, 3, true, b.data(), 2, 4, false, &mut atb);
        // reference: naive
        let mut want = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                for p in 0..2 {
                    want[i * 4 + j] += a.data()[p * 3 + i] * b.data()[p * 4 + j];
                }
            }
        }
        for (x, y) in atb.iter().zip(&want) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_inner_dim_gives_zeros() {
        let a = Tensor::zeros(vec![4, 0]);
        let b = Tensor::zeros(vec![0, 5]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[4, 5]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let mut x = vec![0.0f32; 4];
        softmax_rows_into(&mut x, 4);
        for v in x {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn softplus_matches_naive_midrange() {
        for i in -40..=40 {
            let x = i as f32 * 0.25;
            let naive = (1.0 + (x as f64).exp()).ln() as f32;
            assert!((softplus(x) - naive).abs() < 1e-6, "x={x}");
        }
    }
}
