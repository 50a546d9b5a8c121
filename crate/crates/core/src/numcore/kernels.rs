//! Tape-free numerical kernels shared by the autodiff ops and the inference
//! paths. Matrices are row-major.

use super::Tensor;
use crate::{Error, Result};

/// `C = A·B` (optionally with transposed operands), via `matrixmultiply`.
pub fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() {
        return Err(Error::invalid("matmul needs 2-d operands"));
    }
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::invalid(format!(
            "matmul shape mismatch {:?}{} x {:?}{}",
            a.shape(),
            if trans_a { "ᵀ" } else { "" },
            b.shape(),
            if trans_b { "ᵀ" } else { "" }
        )));
    }
    let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: strides describe exactly the row-major buffers above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, false, b, false)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adds a `1 × cols` (or length-`cols`) bias to every row.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || bias.len() != a.cols() {
        return Err(Error::invalid(format!(
            "row broadcast {:?} + {:?}",
            a.shape(),
            bias.shape()
        )));
    }
    let cols = a.cols();
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(cols) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map_or(0, |p| p.rows());
    if parts.iter().any(|p| !p.is_matrix() || p.rows() != rows) {
        return Err(Error::invalid("concat_cols row mismatch"));
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::matrix(rows, cols, data)
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts.first().map_or(0, |p| p.cols());
    if parts.iter().any(|p| !p.is_matrix() || p.cols() != cols) {
        return Err(Error::invalid("concat_rows column mismatch"));
    }
    let rows: usize = parts.iter().map(|p| p.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(rows, cols, data)
}

pub fn slice_cols(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    if !a.is_matrix() || start > end || end > a.cols() {
        return Err(Error::invalid(format!(
            "slice {start}..{end} of {:?}",
            a.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.rows() * (end - start));
    for r in 0..a.rows() {
        data.extend_from_slice(&a.row(r)[start..end]);
    }
    Tensor::matrix(a.rows(), end - start, data)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let cols = a.cols();
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

/// `ln(e^a + e^b)` with `-inf` handled.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn embedding_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let dim = table.cols();
    let mut data = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        if id >= table.rows() {
            return Err(Error::invalid(format!(
                "id {id} outside embedding table of {} rows",
                table.rows()
            )));
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::matrix(ids.len(), dim, data)
}
