//! Two-level non-stationary GP regression model: whitened state, whitening
//! transforms, per-point expected log-likelihood terms, and log priors.
//!
//! The hierarchy is y_n ~ N(z(x_n), sigma2_eps) with z a GP under the
//! non-stationary isotropic kernel whose log length-scale field u = log(ell)
//! is itself a stationary squared-exponential GP. Inference runs on the
//! whitened variables xi (for the inducing values of z) and zeta (for the
//! inducing values of u), plus the free hyperparameters on log scale.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{self, JitteredCholesky, KernelSpec};

/// Constants fixed by the empirical-prior rule rather than sampled.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FixedHypers {
    pub tau2_z: f64,
    pub mu_u: f64,
    pub tau2_u: f64,
}

/// Independent normal priors on the log-scale hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl NormalPrior {
    pub fn logpdf(&self, x: f64) -> f64 {
        crate::math::normal_logpdf(x, self.mean, self.sd * self.sd)
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Priors {
    pub log_sigma2_eps: NormalPrior,
    pub log_lambda: NormalPrior,
}

impl Default for Priors {
    fn default() -> Self {
        // Weakly informative on log scale.
        Priors {
            log_sigma2_eps: NormalPrior { mean: 0.0, sd: 3.0 },
            log_lambda: NormalPrior { mean: 0.0, sd: 3.0 },
        }
    }
}

impl Priors {
    pub fn log_prior_theta(&self, log_sigma2: f64, log_lambda: &[f64]) -> f64 {
        self.log_sigma2_eps.logpdf(log_sigma2)
            + log_lambda.iter().map(|&l| self.log_lambda.logpdf(l)).sum::<f64>()
    }
}

/// Whitened sampler state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub xi: DVector<f64>,
    pub zeta: DVector<f64>,
    pub log_sigma2_eps: f64,
    pub log_lambda: Vec<f64>,
}

impl ModelState {
    pub fn sigma2_eps(&self) -> f64 {
        self.log_sigma2_eps.exp()
    }
}

/// Linear transform recording how observations were standardized.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

impl Standardization {
    pub fn identity() -> Self {
        Standardization { mean: 0.0, sd: 1.0 }
    }

    pub fn to_original(&self, y_std: f64) -> f64 {
        y_std * self.sd + self.mean
    }
}

/// Inputs and (possibly standardized) outputs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub standardization: Standardization,
}

/// The sparse model: data, inducing locations, fixed constants, and priors.
#[derive(Debug, Clone)]
pub struct SparseModel {
    pub data: Dataset,
    pub inducing: DMatrix<f64>,
    pub fixed: FixedHypers,
    pub priors: Priors,
}

impl SparseModel {
    /// Build the model, standardizing `y` and fixing the empirical-prior
    /// constants: tau2_z = 1, tau2_u = 1, mu_u = log median pairwise distance
    /// of (a subsample of) the inputs. Warns to stderr when inducing
    /// locations fall outside the bounding box of the inputs.
    pub fn new(
        x: DMatrix<f64>,
        y_raw: DVector<f64>,
        inducing: DMatrix<f64>,
        priors: Priors,
        standardize_y: bool,
    ) -> Result<Self> {
        if x.nrows() != y_raw.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs vs {} outputs",
                x.nrows(),
                y_raw.len()
            )));
        }
        if inducing.ncols() != x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "inducing dim {} vs input dim {}",
                inducing.ncols(),
                x.ncols()
            )));
        }
        // M <= N, except for the degenerate no-data case used when the
        // target reduces to the priors alone.
        if x.nrows() > 0 && inducing.nrows() > x.nrows() {
            return Err(Error::InvalidParameter(format!(
                "M = {} inducing points exceed N = {} observations",
                inducing.nrows(),
                x.nrows()
            )));
        }
        if out_of_bounding_box(&x, &inducing) {
            eprintln!("warning: some inducing locations lie outside the input bounding box");
        }
        let (y, standardization) = if standardize_y {
            standardize(&y_raw)
        } else {
            (y_raw, Standardization::identity())
        };
        let mu_u = empirical_mu_u(&x);
        Ok(SparseModel {
            data: Dataset { x, y, standardization },
            inducing,
            fixed: FixedHypers { tau2_z: 1.0, mu_u, tau2_u: 1.0 },
            priors,
        })
    }

    /// Override the fixed constants (simulation studies and tests).
    pub fn with_fixed(mut self, fixed: FixedHypers) -> Self {
        self.fixed = fixed;
        self
    }

    pub fn n(&self) -> usize {
        self.data.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.x.ncols()
    }
}

fn out_of_bounding_box(x: &DMatrix<f64>, inducing: &DMatrix<f64>) -> bool {
    for d in 0..x.ncols() {
        let col = x.column(d);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in col.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        for &v in inducing.column(d).iter() {
            if v < lo || v > hi {
                return true;
            }
        }
    }
    false
}

/// Standardize to zero mean and unit (population) standard deviation.
pub fn standardize(y: &DVector<f64>) -> (DVector<f64>, Standardization) {
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(f64::MIN_POSITIVE);
    ((y.add_scalar(-mean)) / sd, Standardization { mean, sd })
}

/// log of the median pairwise distance over a deterministic subsample of at
/// most 1000 inputs.
pub fn empirical_mu_u(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let keep = n.min(1000);
    let stride = (n as f64 / keep as f64).ceil() as usize;
    let idx: Vec<usize> = (0..n).step_by(stride.max(1)).take(keep).collect();
    let mut dists = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in idx.iter().skip(a + 1) {
            let mut d2 = 0.0;
            for c in 0..x.ncols() {
                let diff = x[(i, c)] - x[(j, c)];
                d2 += diff * diff;
            }
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 { 0.5 * (dists[mid - 1] + dists[mid]) } else { dists[mid] };
    median.max(f64::MIN_POSITIVE).ln()
}

/// u_tilde = L(lambda) zeta + mu_u, with L from the jittered Cholesky of the
/// stationary second-level Gram at the inducing points.
pub fn unwhiten_u(
    zeta: &DVector<f64>,
    log_lambda: &[f64],
    fixed: &FixedHypers,
    inducing: &DMatrix<f64>,
) -> Result<(DVector<f64>, JitteredCholesky)> {
    let lambda: Vec<f64> = log_lambda.iter().map(|l| l.exp()).collect();
    let spec = KernelSpec::squared_exp(fixed.tau2_u, lambda)?;
    let c = kernels::gram(&spec, inducing, inducing, None, None)?.values;
    let chol = kernels::jittered_cholesky(&c)?;
    let u = &chol.l * zeta + DVector::from_element(zeta.len(), fixed.mu_u);
    Ok((u, chol))
}

/// z_tilde = L(u_tilde) xi, with L from the non-stationary Gram at the
/// inducing points using per-point length-scales exp(u_tilde).
pub fn unwhiten_z(
    xi: &DVector<f64>,
    u_tilde: &DVector<f64>,
    tau2_z: f64,
    inducing: &DMatrix<f64>,
) -> Result<(DVector<f64>, JitteredCholesky)> {
    let ells: Vec<f64> = u_tilde.iter().map(|u| u.exp()).collect();
    let spec = KernelSpec::nonstat_iso(tau2_z, inducing.ncols())?;
    let c = kernels::gram(&spec, inducing, inducing, Some(&ells), Some(&ells))?.values;
    let chol = kernels::jittered_cholesky(&c)?;
    Ok((&chol.l * xi, chol))
}

/// Per-point expected log-likelihood given the conditional moments of z_n:
/// -log(2 pi sigma²)/2 - ((y - mean)² + var) / (2 sigma²).
pub fn expected_loglik_term(y: f64, mean: f64, var: f64, sigma2: f64) -> f64 {
    debug_assert!(sigma2 > 0.0 && var >= 0.0);
    -0.5 * (2.0 * std::f64::consts::PI * sigma2).ln()
        - ((y - mean).powi(2) + var) / (2.0 * sigma2)
}

/// Whitened-prior plus hyperparameter log prior of a full state.
pub fn log_prior(state: &ModelState, priors: &Priors) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let whitened = -0.5 * (state.xi.norm_squared() + state.zeta.norm_squared())
        - (state.xi.len() + state.zeta.len()) as f64 * half_log_2pi;
    whitened + priors.log_prior_theta(state.log_sigma2_eps, &state.log_lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn grid_inputs(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 1, |i, _| i as f64 / (n.max(2) - 1) as f64)
    }

    #[test]
    fn standardization_invariants() {
        let y = DVector::from_row_slice(&[3.0, -1.0, 2.5, 0.7, 9.1]);
        let (ys, st) = standardize(&y);
        let n = ys.len() as f64;
        let mean = ys.sum() / n;
        let sd = (ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((sd - 1.0).abs() < 1e-10);
        for i in 0..y.len() {
            assert_relative_eq!(st.to_original(ys[i]), y[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn model_rejects_m_greater_than_n() {
        let x = grid_inputs(3);
        let y = DVector::zeros(3);
        let ind = grid_inputs(4);
        assert!(SparseModel::new(x, y, ind, Priors::default(), true).is_err());
    }

    #[test]
    fn unwhiten_u_zero_and_identity_cases() {
        let inducing = grid_inputs(4);
        let fixed = FixedHypers { tau2_z: 1.0, mu_u: -1.3, tau2_u: 1.0 };
        let zeta = DVector::zeros(4);
        let (u, _) = unwhiten_u(&zeta, &[0.1f64.ln()], &fixed, &inducing).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(u[i], -1.3, epsilon = 1e-12);
        }
        // Degenerate test kernel: with a tiny length-scale the Gram is
        // effectively the identity, so u = zeta + mu_u.
        let zeta = DVector::from_row_slice(&[0.5, -0.2, 1.1, 0.0]);
        let (u, chol) = unwhiten_u(&zeta, &[1e-4f64.ln()], &fixed, &inducing).unwrap();
        assert_abs_diff_eq!(chol.l, DMatrix::identity(4, 4), epsilon = 1e-9);
        for i in 0..4 {
            assert_abs_diff_eq!(u[i], zeta[i] - 1.3, epsilon = 1e-8);
        }
    }

    #[test]
    fn unwhiten_u_monte_carlo_covariance() {
        let inducing = grid_inputs(3);
        let fixed = FixedHypers { tau2_z: 1.0, mu_u: 0.7, tau2_u: 1.0 };
        let log_lambda = [0.25f64.ln()];
        let spec = KernelSpec::squared_exp(1.0, vec![0.25]).unwrap();
        let c = kernels::gram(&spec, &inducing, &inducing, None, None).unwrap().values;

        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let reps = 10_000;
        let mut sums = DVector::zeros(3);
        let mut crosses = DMatrix::zeros(3, 3);
        for _ in 0..reps {
            let zeta = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let (u, _) = unwhiten_u(&zeta, &log_lambda, &fixed, &inducing).unwrap();
            sums += &u;
            crosses += &u * u.transpose();
        }
        let mean = &sums / reps as f64;
        let cov = &crosses / reps as f64 - &mean * mean.transpose();
        // 3-standard-error tolerance; Var of a covariance MC estimate is
        // roughly (c_ii c_jj + c_ij^2)/reps.
        for i in 0..3 {
            assert!((mean[i] - 0.7).abs() < 3.0 * (c[(i, i)] / reps as f64).sqrt());
            for j in 0..3 {
                let se =
                    ((c[(i, i)] * c[(j, j)] + c[(i, j)].powi(2)) / reps as f64).sqrt();
                assert!(
                    (cov[(i, j)] - c[(i, j)]).abs() < 3.5 * se,
                    "cov[{i},{j}] = {} vs {}",
                    cov[(i, j)],
                    c[(i, j)]
                );
            }
        }
    }

    #[test]
    fn unwhiten_z_zero_and_scaling() {
        let inducing = grid_inputs(4);
        let u_tilde = DVector::from_row_slice(&[-1.0, -1.2, -0.8, -1.1]);
        let xi = DVector::zeros(4);
        let (z, _) = unwhiten_z(&xi, &u_tilde, 1.0, &inducing).unwrap();
        assert_eq!(z, DVector::zeros(4));

        let xi = DVector::from_row_slice(&[0.3, -0.4, 0.9, 0.2]);
        let (z1, _) = unwhiten_z(&xi, &u_tilde, 1.0, &inducing).unwrap();
        let (z4, _) = unwhiten_z(&xi, &u_tilde, 4.0, &inducing).unwrap();
        for i in 0..4 {
            assert_relative_eq!(z4[i], 2.0 * z1[i], max_relative = 1e-9);
        }
    }

    #[test]
    fn unwhiten_z_monte_carlo_covariance() {
        let inducing = grid_inputs(3);
        let u_tilde: DVector<f64> = DVector::from_row_slice(&[-1.0, -0.7, -1.4]);
        let ells: Vec<f64> = u_tilde.iter().map(|u| u.exp()).collect();
        let spec = KernelSpec::nonstat_iso(1.0, 1).unwrap();
        let c = kernels::gram(&spec, &inducing, &inducing, Some(&ells), Some(&ells))
            .unwrap()
            .values;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let reps = 10_000;
        let mut crosses = DMatrix::zeros(3, 3);
        for _ in 0..reps {
            let xi = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let (z, _) = unwhiten_z(&xi, &u_tilde, 1.0, &inducing).unwrap();
            crosses += &z * z.transpose();
        }
        let cov = &crosses / reps as f64;
        for i in 0..3 {
            for j in 0..3 {
                let se =
                    ((c[(i, i)] * c[(j, j)] + c[(i, j)].powi(2)) / reps as f64).sqrt();
                assert!(
                    (cov[(i, j)] - c[(i, j)]).abs() < 3.5 * se,
                    "cov[{i},{j}] = {} vs {}",
                    cov[(i, j)],
                    c[(i, j)]
                );
            }
        }
    }

    #[test]
    fn expected_loglik_analytic_values() {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(
            expected_loglik_term(1.0, 1.0, 0.0, 1.0),
            -half_log_2pi,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            expected_loglik_term(2.0, 1.0, 1.0, 1.0),
            -half_log_2pi - 1.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn expected_loglik_matches_monte_carlo() {
        // E_{z}[log N(y | z, sigma2)] with z ~ N(mean, var).
        let (y, mean, var, sigma2): (f64, f64, f64, f64) = (0.4, 0.9, 0.35, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let reps = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..reps {
            let n: f64 = StandardNormal.sample(&mut rng);
            let z = mean + var.sqrt() * n;
            let l = crate::math::normal_logpdf(y, z, sigma2);
            sum += l;
            sumsq += l * l;
        }
        let mc = sum / reps as f64;
        let se = ((sumsq / reps as f64 - mc * mc) / reps as f64).sqrt();
        let exact = expected_loglik_term(y, mean, var, sigma2);
        assert!((mc - exact).abs() < 3.0 * se, "mc {mc} vs exact {exact} (se {se})");
    }

    #[test]
    fn expected_loglik_shape_properties() {
        // Concave in mean, strictly decreasing in var.
        let f = |m: f64| expected_loglik_term(0.3, m, 0.2, 0.5);
        for m in [-1.0, 0.0, 0.4, 2.0] {
            let second = f(m + 0.1) + f(m - 0.1) - 2.0 * f(m);
            assert!(second < 0.0);
        }
        let mut prev = expected_loglik_term(0.3, 0.1, 0.0, 0.5);
        for k in 1..10 {
            let v = expected_loglik_term(0.3, 0.1, k as f64 * 0.3, 0.5);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn log_prior_standard_normal_at_zero() {
        let state = ModelState {
            xi: DVector::zeros(2),
            zeta: DVector::zeros(2),
            log_sigma2_eps: 0.0,
            log_lambda: vec![0.0],
        };
        let priors = Priors::default();
        let whitened = log_prior(&state, &priors) - priors.log_prior_theta(0.0, &[0.0]);
        assert_relative_eq!(whitened, -4.0 * 0.91893853320467274, max_relative = 1e-10);
    }

    #[test]
    fn log_prior_quadratic_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xi = DVector::from_fn(3, |_, _| rng.random::<f64>());
        let v = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
        let base = ModelState {
            xi: xi.clone(),
            zeta: DVector::zeros(2),
            log_sigma2_eps: 0.3,
            log_lambda: vec![-0.2],
        };
        let shifted = ModelState { xi: &xi + &v, ..base.clone() };
        let priors = Priors::default();
        let delta = log_prior(&shifted, &priors) - log_prior(&base, &priors);
        let expected = -0.5 * ((&xi + &v).norm_squared() - xi.norm_squared());
        assert_relative_eq!(delta, expected, max_relative = 1e-10);
    }

    #[test]
    fn log_prior_hyperparameter_density_integrates_to_one() {
        // Quadrature oracle for the 1-parameter slice: integrate the prior
        // density of log sigma2 over a wide grid (Simpson's rule).
        let priors = Priors::default();
        let (lo, hi, steps) = (-30.0, 30.0, 20_000usize);
        let h = (hi - lo) / steps as f64;
        let f = |t: f64| priors.log_sigma2_eps.logpdf(t).exp();
        let mut integral = f(lo) + f(hi);
        for k in 1..steps {
            let t = lo + k as f64 * h;
            integral += if k % 2 == 1 { 4.0 * f(t) } else { 2.0 * f(t) };
        }
        integral *= h / 3.0;
        assert_relative_eq!(integral, 1.0, max_relative = 1e-8);
    }

    #[test]
    fn whitened_target_invariant_under_inducing_relabeling() {
        // Permuting inducing points together with (xi, zeta) leaves the
        // whitened prior and the unwhitened values' set unchanged.
        let inducing = grid_inputs(4);
        let perm = [2usize, 0, 3, 1];
        let inducing_p = DMatrix::from_fn(4, 1, |i, j| inducing[(perm[i], j)]);
        let fixed = FixedHypers { tau2_z: 1.0, mu_u: -1.0, tau2_u: 1.0 };
        let zeta = DVector::from_row_slice(&[0.4, -0.3, 0.8, 0.1]);
        let (u, _) = unwhiten_u(&zeta, &[0.3f64.ln()], &fixed, &inducing).unwrap();
        // Reconstruct whitened coordinates for the permuted ordering from the
        // same unwhitened u, then check the whitened prior density matches.
        let u_p = DVector::from_fn(4, |i, _| u[perm[i]]);
        let lambda = [0.3f64.ln()];
        let spec = KernelSpec::squared_exp(1.0, vec![0.3]).unwrap();
        let c_p = kernels::gram(&spec, &inducing_p, &inducing_p, None, None).unwrap().values;
        let chol_p = kernels::jittered_cholesky(&c_p).unwrap();
        let centered = u_p.add_scalar(-fixed.mu_u);
        let zeta_p = chol_p.solve_lower(&centered);
        let (u_round, _) = unwhiten_u(&zeta_p, &lambda, &fixed, &inducing_p).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(u_round[i], u[perm[i]], epsilon = 1e-9);
        }
        assert_abs_diff_eq!(zeta_p.norm_squared(), zeta.norm_squared(), epsilon = 1e-9);
    }
}
