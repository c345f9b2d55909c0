//! Anisotropic Gaussian correlation `K(x1, x2) = exp(-sum_j w_j (x1_j - x2_j)^2)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};

/// Per-dimension inverse lengthscales `w_j >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    omega: Vec<f64>,
}

impl KernelParams {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if let Some(w) = omega.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return invalid(format!("inverse lengthscales must be finite and >= 0, got {w}"));
        }
        Ok(Self { omega })
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }
}

fn check_dim(params: &KernelParams, d: usize) -> Result<()> {
    if params.dim() != d {
        return invalid(format!(
            "kernel has {} lengthscales but inputs have dimension {d}",
            params.dim()
        ));
    }
    Ok(())
}

#[inline]
fn weighted_sq_dist<'a>(
    a: impl Iterator<Item = &'a f64>,
    b: impl Iterator<Item = &'a f64>,
    omega: &[f64],
) -> f64 {
    a.zip(b).zip(omega).map(|((u, v), w)| w * (u - v) * (u - v)).sum()
}

pub fn gaussian_kernel(x1: &[f64], x2: &[f64], params: &KernelParams) -> Result<f64> {
    if x1.len() != x2.len() {
        return invalid(format!("input lengths differ: {} vs {}", x1.len(), x2.len()));
    }
    check_dim(params, x1.len())?;
    Ok((-weighted_sq_dist(x1.iter(), x2.iter(), &params.omega)).exp())
}

/// `n x n` correlation matrix of the rows of `x`.
pub fn kernel_matrix(x: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    check_dim(params, x.ncols())?;
    let n = x.nrows();
    let mut k = DMatrix::from_element(n, n, 1.0);
    let mut acc = vec![0.0; n];
    for i in 0..n {
        acc[..i].iter_mut().for_each(|a| *a = 0.0);
        for (j, &w) in params.omega.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let col = x.column(j);
            let xi = col[i];
            for (l, a) in acc[..i].iter_mut().enumerate() {
                let diff = xi - col[l];
                *a += w * diff * diff;
            }
        }
        for l in 0..i {
            let v = (-acc[l]).exp();
            k[(i, l)] = v;
            k[(l, i)] = v;
        }
    }
    Ok(k)
}

/// Correlations between `x` and each row of `data`.
pub fn cross_kernel(x: &[f64], data: &DMatrix<f64>, params: &KernelParams) -> Result<DVector<f64>> {
    if x.len() != data.ncols() {
        return invalid(format!(
            "query has dimension {} but data has {}",
            x.len(),
            data.ncols()
        ));
    }
    check_dim(params, x.len())?;
    Ok(DVector::from_iterator(
        data.nrows(),
        data.row_iter()
            .map(|row| (-weighted_sq_dist(x.iter(), row.iter(), &params.omega)).exp()),
    ))
}

/// `dK/dw_j`, entries `-(x_ij - x_kj)^2 K[i,k]`.
pub fn kernel_matrix_grad(
    x: &DMatrix<f64>,
    params: &KernelParams,
    j: usize,
) -> Result<DMatrix<f64>> {
    let k = kernel_matrix(x, params)?;
    kernel_matrix_grad_from(x, &k, j)
}

/// Same as [`kernel_matrix_grad`] reusing an already computed kernel matrix.
pub fn kernel_matrix_grad_from(x: &DMatrix<f64>, k: &DMatrix<f64>, j: usize) -> Result<DMatrix<f64>> {
    if j >= x.ncols() {
        return invalid(format!("dimension index {j} out of range for d={}", x.ncols()));
    }
    let col = x.column(j);
    let n = x.nrows();
    Ok(DMatrix::from_fn(n, n, |a, b| {
        let diff = col[a] - col[b];
        -diff * diff * k[(a, b)]
    }))
}
