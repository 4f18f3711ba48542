//! Gauss-Hermite quadrature (probabilists' convention) and the quadrature
//! approximation of the marginal variational posterior.
//!
//! Rules are generated through Golub-Welsch: eigenvalues of the symmetric
//! tridiagonal Jacobi matrix of the Hermite recurrence give the nodes, the
//! squared first eigenvector components the weights. Weights sum to one and
//! the rule is exact for N(0,1) moments up to degree 2J-1.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{self, JitteredCholesky};
use crate::model::SparseModel;

pub const MAX_GH_ORDER: usize = 64;

/// Gauss-Hermite rule for expectations against N(0,1).
#[derive(Debug, Clone)]
pub struct GHRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GHRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }
}

/// Rule of order `j` in 1..=64.
pub fn gh_rule(j: usize) -> Result<GHRule> {
    if j < 1 || j > MAX_GH_ORDER {
        return Err(Error::InvalidParameter(format!(
            "Gauss-Hermite order {j} outside 1..={MAX_GH_ORDER}"
        )));
    }
    if j == 1 {
        return Ok(GHRule { nodes: vec![0.0], weights: vec![1.0] });
    }
    // Jacobi matrix for probabilists' Hermite: zero diagonal, off-diagonal sqrt(k).
    let mut jac = DMatrix::zeros(j, j);
    for k in 1..j {
        let b = (k as f64).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(jac);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // Polish each node with Newton steps on He_j and recompute weights from
    // the derivative: w = j! / He_j'(x)^2.
    let mut weights = vec![0.0; j];
    let log_fact: f64 = (1..=j).map(|k| (k as f64).ln()).sum();
    for (node, weight) in nodes.iter_mut().zip(weights.iter_mut()) {
        let mut x = *node;
        for _ in 0..4 {
            let (h, dh) = hermite_prob(j, x);
            let step = h / dh;
            x -= step;
            if step.abs() < 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        let (_, dh) = hermite_prob(j, x);
        *node = x;
        *weight = (log_fact - 2.0 * dh.abs().ln()).exp();
    }
    for i in 0..j / 2 {
        let k = j - 1 - i;
        let node = 0.5 * (nodes[k] - nodes[i]);
        nodes[i] = -node;
        nodes[k] = node;
        let w = 0.5 * (weights[i] + weights[k]);
        weights[i] = w;
        weights[k] = w;
    }
    if j % 2 == 1 {
        nodes[j / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(GHRule { nodes, weights })
}

// He_n(x) and its derivative via the three-term recurrence
// He_{k+1} = x He_k - k He_{k-1}, with He_n' = n He_{n-1}.
fn hermite_prob(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 1.0;
    let mut cur = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    (cur, n as f64 * prev)
}

/// E[f(X)] for X ~ N(mean, var) by the given rule.
pub fn gh_expect(f: impl Fn(f64) -> f64, mean: f64, var: f64, rule: &GHRule) -> f64 {
    debug_assert!(var >= 0.0);
    let sd = var.max(0.0).sqrt();
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&t, &w)| w * f(mean + sd * t))
        .sum()
}

/// Quadrature approximations of the kernel-row expectations over the latent
/// log length-scale at each data point: rows beta_n = E[C_{z_n, ztilde}],
/// their accumulated second moment P = sum_n E[rowᵀ row], and
/// alpha_n = sum_ij (C_{ztilde,ztilde}⁻¹ ⊙ P_n)_ij.
#[derive(Debug, Clone)]
pub struct QuadMoments {
    pub beta: DMatrix<f64>,
    pub p_total: DMatrix<f64>,
    pub alpha: DVector<f64>,
}

/// Compute the moments for every data location. `u_means`/`u_vars` are the
/// conditional moments of u_n given the inducing values, `u_tilde` the log
/// length-scales at the inducing points, and `cinv` the explicit inverse of
/// the inducing Gram matrix.
pub fn quad_moments(
    model: &SparseModel,
    u_tilde: &DVector<f64>,
    cinv: &DMatrix<f64>,
    u_means: &DVector<f64>,
    u_vars: &DVector<f64>,
    rule: &GHRule,
) -> QuadMoments {
    let n = model.data.x.nrows();
    let m = model.inducing.nrows();
    let d = model.inducing.ncols();
    let tau2 = model.fixed.tau2_z;
    let ell_ind: Vec<f64> = u_tilde.iter().map(|u| u.exp()).collect();
    let xt: Vec<Vec<f64>> = (0..m).map(|j| model.inducing.row(j).iter().copied().collect()).collect();

    let per_point: Vec<(Vec<f64>, DMatrix<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi: Vec<f64> = model.data.x.row(i).iter().copied().collect();
            let sd = u_vars[i].max(0.0).sqrt();
            let mut beta = vec![0.0; m];
            let mut p = DMatrix::zeros(m, m);
            let mut row = vec![0.0; m];
            for (t, w) in rule.nodes.iter().zip(&rule.weights) {
                let ell = (u_means[i] + sd * t).exp();
                for j in 0..m {
                    row[j] =
                        kernels::nonstat_iso_unchecked(&xi, &xt[j], ell, ell_ind[j], tau2, d);
                }
                for j in 0..m {
                    beta[j] += w * row[j];
                    let wr = w * row[j];
                    for k in j..m {
                        p[(j, k)] += wr * row[k];
                    }
                }
            }
            for j in 0..m {
                for k in 0..j {
                    p[(j, k)] = p[(k, j)];
                }
            }
            (beta, p)
        })
        .collect();

    let mut beta = DMatrix::zeros(n, m);
    let mut p_total = DMatrix::zeros(m, m);
    let mut alpha = DVector::zeros(n);
    for (i, (b, p)) in per_point.into_iter().enumerate() {
        for j in 0..m {
            beta[(i, j)] = b[j];
        }
        alpha[i] = cinv.component_mul(&p).sum();
        p_total += p;
    }
    QuadMoments { beta, p_total, alpha }
}

/// All state-dependent quantities entering the marginal variational
/// posterior for one (zeta, theta) configuration.
#[derive(Debug, Clone)]
pub struct MarginalEval {
    pub u_tilde: DVector<f64>,
    pub chol_s: JitteredCholesky,
    pub u_means: DVector<f64>,
    pub u_vars: DVector<f64>,
    pub chol_ns: JitteredCholesky,
    pub cinv: DMatrix<f64>,
    pub moments: QuadMoments,
    /// Data-dependent part of the log posterior (everything except the
    /// whitened prior of zeta and the hyperparameter priors).
    pub data_logpost: f64,
    pub logpost: f64,
}

/// Second-level conditional moments of u at the data locations given the
/// whitened inducing values.
pub fn second_level_conditionals(
    model: &SparseModel,
    zeta: &DVector<f64>,
    log_lambda: &[f64],
) -> Result<(DVector<f64>, JitteredCholesky, DVector<f64>, DVector<f64>)> {
    let (u_tilde, chol_s) = crate::model::unwhiten_u(
        zeta,
        log_lambda,
        &model.fixed,
        &model.inducing,
    )?;
    let lambda: Vec<f64> = log_lambda.iter().map(|l| l.exp()).collect();
    let spec = kernels::KernelSpec::squared_exp(model.fixed.tau2_u, lambda)?;
    let c_xz = kernels::gram(&spec, &model.data.x, &model.inducing, None, None)?.values;
    let n = model.data.x.nrows();
    let prior_diag = DVector::from_element(n, model.fixed.tau2_u);
    let prior_mean_x = DVector::from_element(n, model.fixed.mu_u);
    let prior_mean_z = DVector::from_element(model.inducing.nrows(), model.fixed.mu_u);
    let (u_means, u_vars) = kernels::gp_conditional_with_chol(
        &c_xz,
        &chol_s,
        &prior_diag,
        &u_tilde,
        &prior_mean_x,
        &prior_mean_z,
    );
    Ok((u_tilde, chol_s, u_means, u_vars))
}

/// Evaluate the whitened marginal variational posterior (up to an additive
/// constant) at (zeta, log sigma2, log lambda).
pub fn gh_marginal_eval(
    model: &SparseModel,
    zeta: &DVector<f64>,
    log_sigma2: f64,
    log_lambda: &[f64],
    rule: &GHRule,
) -> Result<MarginalEval> {
    let (u_tilde, chol_s, u_means, u_vars) = second_level_conditionals(model, zeta, log_lambda)?;
    let ells: Vec<f64> = u_tilde.iter().map(|u| u.exp()).collect();
    let spec = kernels::KernelSpec::nonstat_iso(model.fixed.tau2_z, model.inducing.ncols())?;
    let gram_ns =
        kernels::gram(&spec, &model.inducing, &model.inducing, Some(&ells), Some(&ells))?.values;
    let chol_ns = kernels::jittered_cholesky(&gram_ns)?;
    let cinv = chol_ns.inverse();
    let moments = quad_moments(model, &u_tilde, &cinv, &u_means, &u_vars, rule);

    let data_logpost =
        marginal_data_logpost(model, &gram_ns, &chol_ns, &moments, log_sigma2)?;
    let prior_zeta = -0.5 * zeta.norm_squared()
        - 0.5 * zeta.len() as f64 * (2.0 * std::f64::consts::PI).ln();
    let prior_theta = model.priors.log_prior_theta(log_sigma2, log_lambda);
    let logpost = data_logpost + prior_zeta + prior_theta;
    if !logpost.is_finite() {
        return Err(Error::NonFinite(format!(
            "marginal log posterior (data part {data_logpost}, priors {})",
            prior_zeta + prior_theta
        )));
    }
    Ok(MarginalEval {
        u_tilde,
        chol_s,
        u_means,
        u_vars,
        chol_ns,
        cinv,
        moments,
        data_logpost,
        logpost,
    })
}

/// Data part of the marginal log posterior given precomputed moments:
/// -N log sigma - sum(y² + tau² - alpha)/(2 sigma²) + (1/2) log|C|
/// - (1/2) log|C + sigma⁻² P| + (1/(2 sigma⁴)) yᵀ B (C + sigma⁻² P)⁻¹ Bᵀ y.
pub fn marginal_data_logpost(
    model: &SparseModel,
    gram_ns: &DMatrix<f64>,
    chol_ns: &JitteredCholesky,
    moments: &QuadMoments,
    log_sigma2: f64,
) -> Result<f64> {
    let n = model.data.y.len();
    let sigma2 = log_sigma2.exp();
    let tau2 = model.fixed.tau2_z;
    let mut a = gram_ns.clone();
    a += &moments.p_total / sigma2;
    let chol_a = kernels::jittered_cholesky(&a)?;

    let mut quad_sum = 0.0;
    for i in 0..n {
        let y = model.data.y[i];
        quad_sum += y * y + tau2 - moments.alpha[i];
    }
    let bty = moments.beta.transpose() * &model.data.y;
    let solved = chol_a.solve(&bty);
    let quad_form = bty.dot(&solved);

    let val = -(n as f64) * 0.5 * log_sigma2 - quad_sum / (2.0 * sigma2)
        + 0.5 * chol_ns.log_det()
        - 0.5 * chol_a.log_det()
        + quad_form / (2.0 * sigma2 * sigma2);
    if !val.is_finite() {
        let term = if !quad_form.is_finite() {
            "quadratic form"
        } else if !chol_a.log_det().is_finite() {
            "log determinant"
        } else {
            "quadratic sum"
        };
        return Err(Error::NonFinite(format!("marginal data log posterior ({term})")));
    }
    Ok(val)
}

/// Convenience wrapper returning only the log posterior value.
pub fn gh_marginal_logpost(
    model: &SparseModel,
    zeta: &DVector<f64>,
    log_sigma2: f64,
    log_lambda: &[f64],
    rule: &GHRule,
) -> Result<f64> {
    Ok(gh_marginal_eval(model, zeta, log_sigma2, log_lambda, rule)?.logpost)
}

/// Mean and covariance factor of the conditional variational posterior of
/// the inducing values:
/// N(sigma⁻² C A⁻¹ Bᵀ y, C A⁻¹ C) with A = C + sigma⁻² P.
pub struct ZtildeConditional {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub cov_chol: JitteredCholesky,
}

pub fn ztilde_conditional(
    model: &SparseModel,
    gram_ns: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    p_total: &DMatrix<f64>,
    log_sigma2: f64,
) -> Result<ZtildeConditional> {
    let sigma2 = log_sigma2.exp();
    let mut a = gram_ns.clone();
    a += p_total / sigma2;
    let chol_a = kernels::jittered_cholesky(&a)?;
    let bty = beta.transpose() * &model.data.y;
    let mean = gram_ns * chol_a.solve(&bty) / sigma2;
    // C A⁻¹ C = Wᵀ W with W = L_A⁻¹ C; symmetric PSD by construction.
    let m = gram_ns.nrows();
    let mut w = DMatrix::zeros(m, m);
    for j in 0..m {
        let col = chol_a.solve_lower(&gram_ns.column(j).into_owned());
        w.set_column(j, &col);
    }
    let cov = w.transpose() * &w;
    let cov_chol = kernels::jittered_cholesky(&cov)?;
    Ok(ZtildeConditional { mean, cov, cov_chol })
}

/// Draw from the conditional variational posterior of the inducing values.
pub fn sample_ztilde_conditional(
    cond: &ZtildeConditional,
    rng: &mut impl rand::Rng,
) -> DVector<f64> {
    let m = cond.mean.len();
    let std: DVector<f64> = DVector::from_fn(m, |_, _| {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
    });
    &cond.mean + &cond.cov_chol.l * std
}

/// Log density of the conditional variational posterior at `z`.
pub fn ztilde_conditional_logpdf(cond: &ZtildeConditional, z: &DVector<f64>) -> f64 {
    let m = z.len() as f64;
    let centered = z - &cond.mean;
    let s = cond.cov_chol.solve_lower(&centered);
    -0.5 * (m * (2.0 * std::f64::consts::PI).ln() + cond.cov_chol.log_det() + s.norm_squared())
}
