//! Kernel evaluations, Gram matrices, jittered Cholesky factors, and GP
//! conditional moments.
//!
//! Three kernels are supported: the squared exponential and Matérn-3/2
//! stationary kernels, and a non-stationary isotropic kernel whose
//! length-scale varies by location,
//!
//!   C(x, x') = tau² · (l l')^{D/2} / (((l² + l'²)/2)^{D/2}) · exp(-|x-x'|² / (l² + l'²)),
//!
//! together with the analytic derivative of C with respect to u = log l.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum KernelKind {
    SquaredExp,
    Matern32,
    NonStatIso,
}

/// Kernel selector plus hyperparameters.
///
/// For the stationary kinds `lengthscales` holds one positive scale per input
/// dimension. The non-stationary kind carries per-location length-scales at
/// call sites instead.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub magnitude: f64,
    pub lengthscales: Vec<f64>,
    pub dim: usize,
}

impl KernelSpec {
    pub fn squared_exp(magnitude: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let dim = lengthscales.len();
        Self::validated(KernelKind::SquaredExp, magnitude, lengthscales, dim)
    }

    pub fn matern32(magnitude: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let dim = lengthscales.len();
        Self::validated(KernelKind::Matern32, magnitude, lengthscales, dim)
    }

    pub fn nonstat_iso(magnitude: f64, dim: usize) -> Result<Self> {
        Self::validated(KernelKind::NonStatIso, magnitude, Vec::new(), dim)
    }

    fn validated(kind: KernelKind, magnitude: f64, lengthscales: Vec<f64>, dim: usize) -> Result<Self> {
        if !(magnitude > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kernel magnitude must be positive, got {magnitude}"
            )));
        }
        if lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidParameter("length-scales must be positive".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("input dimension must be >= 1".into()));
        }
        if kind != KernelKind::NonStatIso && lengthscales.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "{} length-scales for dim {dim}",
                lengthscales.len()
            )));
        }
        Ok(KernelSpec { kind, magnitude, lengthscales, dim })
    }
}

fn check_dims(x: &[f64], x2: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim || x2.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "inputs of length {} and {} for kernel dim {dim}",
            x.len(),
            x2.len()
        )));
    }
    Ok(())
}

/// Squared exponential: tau² exp(-sum_d (x_d - x'_d)² / (2 lam_d²)).
pub fn se_kernel(x: &[f64], x2: &[f64], spec: &KernelSpec) -> Result<f64> {
    check_dims(x, x2, spec.dim)?;
    let mut q = 0.0;
    for d in 0..spec.dim {
        let diff = x[d] - x2[d];
        let l = spec.lengthscales[d];
        q += diff * diff / (l * l);
    }
    Ok(spec.magnitude * (-0.5 * q).exp())
}

/// Matérn-3/2: tau² (1 + sqrt(3) r) exp(-sqrt(3) r) with scaled distance r.
pub fn matern32_kernel(x: &[f64], x2: &[f64], spec: &KernelSpec) -> Result<f64> {
    check_dims(x, x2, spec.dim)?;
    let mut q = 0.0;
    for d in 0..spec.dim {
        let diff = x[d] - x2[d];
        let l = spec.lengthscales[d];
        q += diff * diff / (l * l);
    }
    let r = q.sqrt();
    let s = 3.0f64.sqrt() * r;
    Ok(spec.magnitude * (1.0 + s) * (-s).exp())
}

/// Non-stationary isotropic kernel with per-location length-scales.
pub fn nonstat_iso_kernel(
    x: &[f64],
    x2: &[f64],
    ell1: f64,
    ell2: f64,
    tau2: f64,
    dim: usize,
) -> Result<f64> {
    if !(ell1 > 0.0 && ell2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "non-stationary length-scales must be positive, got ({ell1}, {ell2})"
        )));
    }
    check_dims(x, x2, dim)?;
    Ok(nonstat_iso_unchecked(x, x2, ell1, ell2, tau2, dim))
}

#[inline]
pub(crate) fn nonstat_iso_unchecked(
    x: &[f64],
    x2: &[f64],
    ell1: f64,
    ell2: f64,
    tau2: f64,
    dim: usize,
) -> f64 {
    let mut d2 = 0.0;
    for d in 0..dim {
        let diff = x[d] - x2[d];
        d2 += diff * diff;
    }
    let s = ell1 * ell1 + ell2 * ell2;
    // (l l')^{D/2} / ((s/2)^{D/2}) = (2 l l' / s)^{D/2}
    let pref = (2.0 * ell1 * ell2 / s).powf(dim as f64 / 2.0);
    tau2 * pref * (-d2 / s).exp()
}

/// Derivative of the non-stationary isotropic kernel with respect to
/// u1 = log(ell1).
pub fn nonstat_iso_kernel_dlog_ell(
    x: &[f64],
    x2: &[f64],
    ell1: f64,
    ell2: f64,
    tau2: f64,
    dim: usize,
) -> Result<f64> {
    if !(ell1 > 0.0 && ell2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "non-stationary length-scales must be positive, got ({ell1}, {ell2})"
        )));
    }
    check_dims(x, x2, dim)?;
    Ok(nonstat_iso_dlog_ell_unchecked(x, x2, ell1, ell2, tau2, dim))
}

#[inline]
pub(crate) fn nonstat_iso_dlog_ell_unchecked(
    x: &[f64],
    x2: &[f64],
    ell1: f64,
    ell2: f64,
    tau2: f64,
    dim: usize,
) -> f64 {
    let mut d2 = 0.0;
    for d in 0..dim {
        let diff = x[d] - x2[d];
        d2 += diff * diff;
    }
    let s = ell1 * ell1 + ell2 * ell2;
    let df = dim as f64;
    let pref = (ell1 / (2.0 * ell2) + ell2 / (2.0 * ell1)).powf(-df / 2.0);
    let bracket = (ell1 / ell2 + ell2 / ell1).recip()
        * (-df / (2.0 * ell2) + df * ell2 / (2.0 * ell1 * ell1))
        + 2.0 * ell1 * d2 / (s * s);
    tau2 * ell1 * pref * (-d2 / s).exp() * bracket
}

/// Dense Gram matrix with its generating locations.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub row_inputs: DMatrix<f64>,
    pub col_inputs: DMatrix<f64>,
}

fn row_slice(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Gram matrix between `rows` and `cols` location sets (one location per
/// matrix row). The non-stationary kernel requires per-location length-scale
/// vectors. When the row and column sets (and length-scales) coincide, each
/// pair is evaluated once so the result is exactly symmetric.
pub fn gram(
    spec: &KernelSpec,
    rows: &DMatrix<f64>,
    cols: &DMatrix<f64>,
    row_ells: Option<&[f64]>,
    col_ells: Option<&[f64]>,
) -> Result<GramMatrix> {
    if rows.ncols() != spec.dim || cols.ncols() != spec.dim {
        return Err(Error::DimensionMismatch(format!(
            "locations have {} / {} columns for kernel dim {}",
            rows.ncols(),
            cols.ncols(),
            spec.dim
        )));
    }
    if spec.kind == KernelKind::NonStatIso {
        match (row_ells, col_ells) {
            (Some(r), Some(c)) if r.len() == rows.nrows() && c.len() == cols.nrows() => {}
            _ => {
                return Err(Error::InvalidParameter(
                    "non-stationary Gram requires per-location length-scales".into(),
                ))
            }
        }
    }

    let n = rows.nrows();
    let m = cols.nrows();
    let symmetric = n == m
        && rows == cols
        && match (row_ells, col_ells) {
            (Some(a), Some(b)) => a == b,
            (None, None) => true,
            _ => false,
        };

    let eval = |i: usize, j: usize| -> f64 {
        let xi = row_slice(rows, i);
        let xj = row_slice(cols, j);
        match spec.kind {
            KernelKind::SquaredExp => se_kernel(&xi, &xj, spec).unwrap(),
            KernelKind::Matern32 => matern32_kernel(&xi, &xj, spec).unwrap(),
            KernelKind::NonStatIso => nonstat_iso_unchecked(
                &xi,
                &xj,
                row_ells.unwrap()[i],
                col_ells.unwrap()[j],
                spec.magnitude,
                spec.dim,
            ),
        }
    };

    let mut values = DMatrix::zeros(n, m);
    if symmetric {
        let entries: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (i..m).map(|j| eval(i, j)).collect())
            .collect();
        for (i, row) in entries.into_iter().enumerate() {
            for (off, v) in row.into_iter().enumerate() {
                let j = i + off;
                values[(i, j)] = v;
                values[(j, i)] = v;
            }
        }
    } else {
        let entries: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (0..m).map(|j| eval(i, j)).collect())
            .collect();
        for (i, row) in entries.into_iter().enumerate() {
            for (j, v) in row.into_iter().enumerate() {
                values[(i, j)] = v;
            }
        }
    }

    Ok(GramMatrix { values, row_inputs: rows.clone(), col_inputs: cols.clone() })
}

/// Lower-triangular Cholesky factor of C + jitter·I.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

impl JitteredCholesky {
    /// Solve L v = b.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut v = b.clone();
        self.l.solve_lower_triangular_mut(&mut v);
        v
    }

    /// Solve (L Lᵀ) v = b.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut v = b.clone();
        self.l.solve_lower_triangular_mut(&mut v);
        self.l.transpose().solve_upper_triangular_mut(&mut v);
        v
    }

    /// Explicit inverse of C (small matrices only).
    pub fn inverse(&self) -> DMatrix<f64> {
        let m = self.l.nrows();
        let mut inv = DMatrix::identity(m, m);
        for j in 0..m {
            let mut col = inv.column(j).into_owned();
            self.l.solve_lower_triangular_mut(&mut col);
            self.l.transpose().solve_upper_triangular_mut(&mut col);
            inv.set_column(j, &col);
        }
        inv
    }

    /// log |C| from the factor diagonal.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }
}

/// Cholesky with escalating jitter: 0, then 1e-10·mean(diag) through
/// 1e-4·mean(diag) in decade steps. Fails with the last attempted jitter.
pub fn jittered_cholesky(c: &DMatrix<f64>) -> Result<JitteredCholesky> {
    let m = c.nrows();
    if m != c.ncols() {
        return Err(Error::DimensionMismatch(format!("{}x{} matrix in cholesky", m, c.ncols())));
    }
    let mean_diag = c.diagonal().iter().sum::<f64>() / m.max(1) as f64;
    let mut jitters = vec![0.0];
    for k in 0..7 {
        jitters.push(1e-10 * 10f64.powi(k) * mean_diag.abs().max(f64::MIN_POSITIVE));
    }
    let mut last = 0.0;
    for &jitter in &jitters {
        last = jitter;
        let mut cj = c.clone();
        for i in 0..m {
            cj[(i, i)] += jitter;
        }
        if let Some(chol) = nalgebra::Cholesky::new(cj) {
            return Ok(JitteredCholesky { l: chol.l(), jitter });
        }
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

/// GP conditional (predictive) moments given latent values at inducing
/// points: means = prior_mean_x + C_xz C_zz⁻¹ (latent − prior_mean_z),
/// variances = prior_diag − row-wise quadratic form, clamped at zero.
pub fn gp_conditional(
    c_xz: &DMatrix<f64>,
    c_zz: &DMatrix<f64>,
    prior_diag: &DVector<f64>,
    latent: &DVector<f64>,
    prior_mean_x: &DVector<f64>,
    prior_mean_z: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let chol = jittered_cholesky(c_zz)?;
    Ok(gp_conditional_with_chol(c_xz, &chol, prior_diag, latent, prior_mean_x, prior_mean_z))
}

/// Same as [`gp_conditional`] but reusing an existing Cholesky factor.
pub fn gp_conditional_with_chol(
    c_xz: &DMatrix<f64>,
    chol_zz: &JitteredCholesky,
    prior_diag: &DVector<f64>,
    latent: &DVector<f64>,
    prior_mean_x: &DVector<f64>,
    prior_mean_z: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let centered = latent - prior_mean_z;
    let alpha = chol_zz.solve(&centered);
    let n = c_xz.nrows();
    let mut means = DVector::zeros(n);
    let mut vars = DVector::zeros(n);
    for i in 0..n {
        let k = c_xz.row(i).transpose();
        means[i] = prior_mean_x[i] + k.dot(&alpha);
        let s = chol_zz.solve_lower(&k);
        vars[i] = (prior_diag[i] - s.norm_squared()).max(0.0);
    }
    (means, vars)
}
