//! Doubly stochastic block-Poisson estimator of the exponentiated expected
//! log-likelihood: control variates, difference estimators, subsampled
//! averages, block bookkeeping, and the signed log estimate.
//!
//! The estimator is
//!
//!   E_hat = exp(sum_n nu_bar_n) * prod_k exp((a+kappa)/kappa)
//!           * prod_h (dhat_B^{h,k} - a)/kappa,
//!
//! with H_k ~ Pois(1) terms per block and dhat_B the subsampled difference
//! estimator. The auxiliary randomness (per-term subsample indices and
//! uniforms) is stored explicitly so the same draw re-evaluates under new
//! parameter states, which is what makes the correlated pseudo-marginal
//! scheme valid. nu_bar_n is the exact expectation of the subtracted
//! first-order Taylor polynomial; for the two-level model the expansion
//! variable exp(u_n) is log-normal, so nu_bar picks up the mean correction
//! (exp(c_n + w_n^2/2) - exp(c_n)) l'(c_n) that keeps the estimator unbiased.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Distribution;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{self, JitteredCholesky};
use crate::math;
use crate::model::{expected_loglik_term, ModelState, SparseModel};
use crate::quadrature;

/// Estimator tuning parameters (a, kappa, B, d_bar, gamma_max).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TuningParams {
    pub a: f64,
    pub kappa: usize,
    pub batch: usize,
    pub d_bar: f64,
    pub gamma_max: f64,
}

impl TuningParams {
    pub fn new(a: f64, kappa: usize, batch: usize, d_bar: f64, gamma_max: f64) -> Result<Self> {
        if kappa == 0 || batch == 0 {
            return Err(Error::InvalidParameter("kappa and B must be >= 1".into()));
        }
        Ok(TuningParams { a, kappa, batch, d_bar, gamma_max })
    }
}

/// One Poisson term: a size-B subsample with its uniforms and their
/// pre-inverted standard-normal values (uniforms are clamped to
/// [1e-12, 1-1e-12] before inversion).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTerm {
    pub indices: Vec<usize>,
    pub chis: Vec<f64>,
    pub z_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub terms: Vec<BlockTerm>,
}

/// Auxiliary randomness of the estimator: per-block Poisson counts and
/// per-term subsamples, organized into refresh groups. Regeneration is
/// driven by counter-based RNG streams keyed by (seed, block id, epoch), so
/// refreshes are reproducible and blocks are independent.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVariateStore {
    pub blocks: Vec<Block>,
    pub group_of: Vec<usize>,
    pub n_groups: usize,
    pub n_data: usize,
    pub batch: usize,
    seed: u64,
    epochs: Vec<u64>,
}

pub const CHI_CLAMP: f64 = 1e-12;

fn draw_open_unit(rng: &mut impl rand::Rng) -> f64 {
    loop {
        let x: f64 = rng.random();
        if x > 0.0 && x < 1.0 {
            return x;
        }
    }
}

fn fill_block(seed: u64, block_id: usize, epoch: u64, n_data: usize, batch: usize) -> Block {
    let mut rng = math::stream_rng(seed, block_id as u64, epoch);
    let h = rand_distr::Poisson::new(1.0).unwrap().sample(&mut rng) as usize;
    let mut terms = Vec::with_capacity(h);
    for _ in 0..h {
        let mut indices = Vec::with_capacity(batch);
        let mut chis = Vec::with_capacity(batch);
        let mut z_std = Vec::with_capacity(batch);
        for _ in 0..batch {
            indices.push(rng.random_range(0..n_data));
            let chi = draw_open_unit(&mut rng);
            chis.push(chi);
            z_std.push(math::standard_normal_quantile(chi.clamp(CHI_CLAMP, 1.0 - CHI_CLAMP)));
        }
        terms.push(BlockTerm { indices, chis, z_std });
    }
    Block { terms }
}

impl BlockVariateStore {
    /// Fresh store with `kappa` blocks mapped round-robin onto `n_groups`
    /// refresh groups.
    pub fn init(kappa: usize, batch: usize, n_data: usize, n_groups: usize, seed: u64) -> Result<Self> {
        if kappa == 0 || batch == 0 || n_data == 0 {
            return Err(Error::InvalidParameter("kappa, B and N must be >= 1".into()));
        }
        if n_groups == 0 || n_groups > kappa {
            return Err(Error::InvalidParameter(format!(
                "group count {n_groups} must lie in 1..=kappa ({kappa})"
            )));
        }
        let group_of: Vec<usize> = (0..kappa).map(|k| k % n_groups).collect();
        let epochs = vec![0u64; kappa];
        let blocks = (0..kappa).map(|k| fill_block(seed, k, 0, n_data, batch)).collect();
        Ok(BlockVariateStore { blocks, group_of, n_groups, n_data, batch, seed, epochs })
    }

    /// New store with every block in group `g` redrawn; all other blocks are
    /// bit-identical to `self`.
    pub fn refresh_group(&self, g: usize) -> Result<Self> {
        if g >= self.n_groups {
            return Err(Error::InvalidParameter(format!(
                "refresh group {g} out of range 0..{}",
                self.n_groups
            )));
        }
        let mut next = self.clone();
        for k in 0..self.blocks.len() {
            if self.group_of[k] == g {
                next.epochs[k] = self.epochs[k] + 1;
                next.blocks[k] = fill_block(self.seed, k, next.epochs[k], self.n_data, self.batch);
            }
        }
        Ok(next)
    }

    pub fn kappa(&self) -> usize {
        self.blocks.len()
    }

    /// Total number of Poisson terms, sum_k H_k.
    pub fn total_terms(&self) -> usize {
        self.blocks.iter().map(|b| b.terms.len()).sum()
    }

    #[cfg(test)]
    pub(crate) fn with_blocks(mut self, blocks: Vec<Block>) -> Self {
        self.blocks = blocks;
        self
    }
}

/// Signed logarithm of the block-Poisson estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedLogEstimate {
    pub log_abs: f64,
    pub sign: i8,
}

/// Everything derived from one parameter state that the estimator needs.
/// Center rows and their solves are cached so re-deriving after a
/// noise-variance or whitened-inducing update only recomputes the cheap
/// layers, mirroring the per-block recomputation of the sampler.
#[derive(Debug, Clone)]
pub struct StateDerived {
    pub state: ModelState,
    pub u_tilde: DVector<f64>,
    pub chol_s: JitteredCholesky,
    /// Conditional mean of u_n given the inducing values.
    pub c: DVector<f64>,
    /// Conditional variance of u_n.
    pub w2: DVector<f64>,
    pub chol_ns: JitteredCholesky,
    pub z_tilde: DVector<f64>,
    /// C_ns^{-1} z_tilde.
    pub v: DVector<f64>,
    k0: DMatrix<f64>,
    dk0: DMatrix<f64>,
    mean0: DVector<f64>,
    var0: Option<DVector<f64>>,
    dk_v: DVector<f64>,
    q: Option<DVector<f64>>,
    /// l(y_n | c_n, ...), the Taylor-center log-likelihood (l1 under the
    /// reduced-cost variant).
    pub cv_center: DVector<f64>,
    /// d l / d ell at the center.
    pub lprime_ell: DVector<f64>,
    /// nu_bar_n = E[nu_n(u_n)], the per-point control variate entering the
    /// estimator.
    pub nu_bar: DVector<f64>,
}

/// Estimator evaluation context. `reduced_cv` switches to the cheaper
/// control variates built from the squared-residual part of the
/// log-likelihood only.
pub struct Evaluator<'a> {
    pub model: &'a SparseModel,
    pub reduced_cv: bool,
    rows_evaluated: AtomicU64,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a SparseModel) -> Self {
        Evaluator { model, reduced_cv: false, rows_evaluated: AtomicU64::new(0) }
    }

    pub fn with_reduced_cv(model: &'a SparseModel, reduced_cv: bool) -> Self {
        Evaluator { model, reduced_cv, rows_evaluated: AtomicU64::new(0) }
    }

    /// Number of size-M non-stationary kernel rows evaluated at data points
    /// since construction (instrumentation for the complexity contract).
    pub fn rows_evaluated(&self) -> u64 {
        self.rows_evaluated.load(Ordering::Relaxed)
    }

    pub fn reset_row_counter(&self) {
        self.rows_evaluated.store(0, Ordering::Relaxed);
    }

    fn data_row(&self, n: usize) -> Vec<f64> {
        self.model.data.x.row(n).iter().copied().collect()
    }

    fn inducing_rows(&self) -> Vec<Vec<f64>> {
        (0..self.model.m())
            .map(|j| self.model.inducing.row(j).iter().copied().collect())
            .collect()
    }

    /// Full derivation from scratch (zeta or lambda changed).
    pub fn derive_full(&self, state: &ModelState) -> Result<StateDerived> {
        let (u_tilde, chol_s, c, w2) = quadrature::second_level_conditionals(
            self.model,
            &state.zeta,
            &state.log_lambda,
        )?;
        let (z_tilde, chol_ns) = crate::model::unwhiten_z(
            &state.xi,
            &u_tilde,
            self.model.fixed.tau2_z,
            &self.model.inducing,
        )?;
        let v = chol_ns.solve(&z_tilde);

        let n = self.model.n();
        let m = self.model.m();
        let d = self.model.dim();
        let tau2 = self.model.fixed.tau2_z;
        let ell_ind: Vec<f64> = u_tilde.iter().map(|u| u.exp()).collect();
        let xt = self.inducing_rows();

        struct PointRow {
            k0: Vec<f64>,
            dk0: Vec<f64>,
            var0: f64,
            q: f64,
        }
        let reduced = self.reduced_cv;
        let per_point: Vec<PointRow> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = self.data_row(i);
                let ell = c[i].exp();
                let mut k0 = vec![0.0; m];
                let mut dk0 = vec![0.0; m];
                for j in 0..m {
                    k0[j] = kernels::nonstat_iso_unchecked(&xi, &xt[j], ell, ell_ind[j], tau2, d);
                    dk0[j] = kernels::nonstat_iso_dlog_ell_unchecked(
                        &xi,
                        &xt[j],
                        ell,
                        ell_ind[j],
                        tau2,
                        d,
                    );
                }
                self.rows_evaluated.fetch_add(1, Ordering::Relaxed);
                let (var0, q) = if reduced {
                    (0.0, 0.0)
                } else {
                    let kv = DVector::from_column_slice(&k0);
                    let s0 = chol_ns.solve_lower(&kv);
                    let var0 = (tau2 - s0.norm_squared()).max(0.0);
                    let cinv_k = chol_ns.solve(&kv);
                    let q = DVector::from_column_slice(&dk0).dot(&cinv_k);
                    (var0, q)
                };
                PointRow { k0, dk0, var0, q }
            })
            .collect();

        let mut k0 = DMatrix::zeros(n, m);
        let mut dk0 = DMatrix::zeros(n, m);
        let mut var0 = DVector::zeros(n);
        let mut q = DVector::zeros(n);
        for (i, row) in per_point.into_iter().enumerate() {
            for j in 0..m {
                k0[(i, j)] = row.k0[j];
                dk0[(i, j)] = row.dk0[j];
            }
            var0[i] = row.var0;
            q[i] = row.q;
        }
        let mean0 = &k0 * &v;
        let dk_v = &dk0 * &v;

        let mut derived = StateDerived {
            state: state.clone(),
            u_tilde,
            chol_s,
            c,
            w2,
            chol_ns,
            z_tilde,
            v,
            k0,
            dk0,
            mean0,
            var0: if reduced { None } else { Some(var0) },
            dk_v,
            q: if reduced { None } else { Some(q) },
            cv_center: DVector::zeros(n),
            lprime_ell: DVector::zeros(n),
            nu_bar: DVector::zeros(n),
        };
        self.refresh_cv_values(&mut derived);
        Ok(derived)
    }

    /// Re-derive after a noise-variance move: geometry and rows are reused,
    /// only the control-variate values change.
    pub fn derive_new_sigma(&self, prev: &StateDerived, log_sigma2: f64) -> StateDerived {
        let mut next = prev.clone();
        next.state.log_sigma2_eps = log_sigma2;
        self.refresh_cv_values(&mut next);
        next
    }

    /// Re-derive after a whitened-inducing-value move: the second level and
    /// the center rows are unchanged, predictive means are recomputed.
    pub fn derive_new_xi(&self, prev: &StateDerived, xi: &DVector<f64>) -> StateDerived {
        let mut next = prev.clone();
        next.state.xi = xi.clone();
        next.z_tilde = &prev.chol_ns.l * xi;
        next.v = prev.chol_ns.solve(&next.z_tilde);
        next.mean0 = &next.k0 * &next.v;
        next.dk_v = &next.dk0 * &next.v;
        self.refresh_cv_values(&mut next);
        next
    }

    fn refresh_cv_values(&self, sd: &mut StateDerived) {
        let sigma2 = sd.state.sigma2_eps();
        let n = self.model.n();
        let half_log = 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
        for i in 0..n {
            let resid = self.model.data.y[i] - sd.mean0[i];
            let (center, lprime_u) = if self.reduced_cv {
                let center = -half_log - resid * resid / (2.0 * sigma2);
                let lprime_u = resid * sd.dk_v[i] / sigma2;
                (center, lprime_u)
            } else {
                let var0 = sd.var0.as_ref().unwrap()[i];
                let center = expected_loglik_term(self.model.data.y[i], sd.mean0[i], var0, sigma2);
                let lprime_u = (resid * sd.dk_v[i] + sd.q.as_ref().unwrap()[i]) / sigma2;
                (center, lprime_u)
            };
            let ell_c = sd.c[i].exp();
            let lprime_ell = lprime_u / ell_c;
            sd.cv_center[i] = center;
            sd.lprime_ell[i] = lprime_ell;
            let ell_mean = (sd.c[i] + 0.5 * sd.w2[i]).exp();
            sd.nu_bar[i] = center + (ell_mean - ell_c) * lprime_ell;
        }
    }

    /// The control variate at the Taylor center, l(y_n | E[u_n], ...).
    pub fn control_variate(&self, sd: &StateDerived, n: usize) -> f64 {
        sd.cv_center[n]
    }

    /// nu_bar_n = E[nu_n(u_n)], the value entering the estimator.
    pub fn control_variate_mean(&self, sd: &StateDerived, n: usize) -> f64 {
        sd.nu_bar[n]
    }

    /// Full log-likelihood at a sampled u, l(y_n | u, z_tilde, theta).
    pub(crate) fn loglik_at(&self, sd: &StateDerived, n: usize, u: f64) -> f64 {
        let sigma2 = sd.state.sigma2_eps();
        let tau2 = self.model.fixed.tau2_z;
        let m = self.model.m();
        let d = self.model.dim();
        let ell = u.exp();
        let xi = self.data_row(n);
        let mut row = DVector::zeros(m);
        for j in 0..m {
            let xt: Vec<f64> = self.model.inducing.row(j).iter().copied().collect();
            row[j] = kernels::nonstat_iso_unchecked(&xi, &xt, ell, sd.u_tilde[j].exp(), tau2, d);
        }
        self.rows_evaluated.fetch_add(1, Ordering::Relaxed);
        let mean = row.dot(&sd.v);
        let s = sd.chol_ns.solve_lower(&row);
        let var = (tau2 - s.norm_squared()).max(0.0);
        expected_loglik_term(self.model.data.y[n], mean, var, sigma2)
    }

    fn difference_term(&self, sd: &StateDerived, n: usize, z_std: f64) -> f64 {
        let u = sd.c[n] + sd.w2[n].max(0.0).sqrt() * z_std;
        let l_u = self.loglik_at(sd, n, u);
        let nu_u = sd.cv_center[n] + (u.exp() - sd.c[n].exp()) * sd.lprime_ell[n];
        l_u - nu_u
    }

    /// Unbiased per-point difference estimator evaluated with
    /// u_n = Phi^{-1}(chi) w_n + c_n.
    pub fn difference_estimate(&self, sd: &StateDerived, n: usize, chi: f64) -> Result<f64> {
        if !(chi > 0.0 && chi < 1.0) {
            return Err(Error::InvalidParameter(format!("uniform {chi} outside (0,1)")));
        }
        if n >= self.model.n() {
            return Err(Error::InvalidParameter(format!("data index {n} out of range")));
        }
        let z = math::standard_normal_quantile(chi.clamp(CHI_CLAMP, 1.0 - CHI_CLAMP));
        Ok(self.difference_term(sd, n, z))
    }

    /// Subsampled difference estimator, (N/B) sum_b dhat_{alpha_b}.
    pub fn dhat_b(&self, sd: &StateDerived, indices: &[usize], chis: &[f64]) -> Result<f64> {
        if indices.len() != chis.len() || indices.is_empty() {
            return Err(Error::DimensionMismatch(
                "indices and uniforms must have equal nonzero length".into(),
            ));
        }
        let n = self.model.n() as f64;
        let b = indices.len() as f64;
        let mut total = 0.0;
        for (&idx, &chi) in indices.iter().zip(chis) {
            total += self.difference_estimate(sd, idx, chi)?;
        }
        Ok(n / b * total)
    }

    fn dhat_b_term(&self, sd: &StateDerived, term: &BlockTerm) -> f64 {
        let n = self.model.n() as f64;
        let b = term.indices.len() as f64;
        let sum: f64 = term
            .indices
            .iter()
            .zip(&term.z_std)
            .map(|(&idx, &z)| self.difference_term(sd, idx, z))
            .sum();
        n / b * sum
    }

    /// The signed block-Poisson log estimate for one state and one variate
    /// store.
    pub fn log_estimate(
        &self,
        sd: &StateDerived,
        store: &BlockVariateStore,
        tuning: &TuningParams,
    ) -> Result<SignedLogEstimate> {
        if store.kappa() != tuning.kappa || store.batch != tuning.batch {
            return Err(Error::Config(format!(
                "store (kappa={}, B={}) inconsistent with tuning (kappa={}, B={})",
                store.kappa(),
                store.batch,
                tuning.kappa,
                tuning.batch
            )));
        }
        let nu_sum = tree_sum(sd.nu_bar.as_slice());
        if !nu_sum.is_finite() {
            let bad = sd.nu_bar.iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::NonFinite(format!("control variate at data point {bad}")));
        }
        let kappa = tuning.kappa as f64;
        let terms: Vec<(usize, &BlockTerm)> = store
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(k, blk)| blk.terms.iter().map(move |t| (k, t)))
            .collect();
        let dhats: Vec<f64> =
            terms.par_iter().map(|(_, term)| self.dhat_b_term(sd, term)).collect();
        let mut negatives = 0usize;
        let mut log_terms = Vec::with_capacity(dhats.len());
        for ((k, _), dhat) in terms.iter().zip(&dhats) {
            let centered = dhat - tuning.a;
            if !centered.is_finite() {
                return Err(Error::NonFinite(format!("difference estimator in block {k}")));
            }
            if centered < 0.0 {
                negatives += 1;
            }
            log_terms.push(centered.abs().ln() - kappa.ln());
        }
        let log_abs = nu_sum + tuning.a + kappa + tree_sum(&log_terms);
        Ok(SignedLogEstimate { log_abs, sign: if negatives % 2 == 1 { -1 } else { 1 } })
    }
}

/// Deterministic pairwise tree reduction.
pub fn tree_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let mid = n / 2;
            tree_sum(&values[..mid]) + tree_sum(&values[mid..])
        }
    }
}
