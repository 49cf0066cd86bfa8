//! Expectation–conditional-maximization driver for the penalized fit.
//!
//! Alternates an expectation step — posterior slab responsibilities for every
//! coefficient block, turned into adaptive group-lasso rates — with two
//! conditional maximization steps: the first updates the mixing weights and
//! the per-cluster latent scores in closed form, the second solves a weighted
//! group lasso for the fixed-effect coefficients, another for the stacked
//! Cholesky triangle, and refreshes the noise variance. The monitored log
//! posterior is non-decreasing along the iterates; both coefficient solves
//! are warm-started from the previous iterate so they begin at (or beyond)
//! their previous optimum.

use std::ops::Range;

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::basis::BSplineBasis;
use crate::error::{Error, Result};
use crate::group_lasso::{self, GroupLassoMoments};
use crate::linalg::solve_spd;
use crate::model::{BlockLayout, CholeskyLayout, ModelData};
use crate::ssgl::{self, SsglConfig};

/// Smallest admissible noise variance; every update clamps here.
pub const SIGMA2_FLOOR: f64 = 1e-10;
/// Mixing weights are kept this far inside (0, 1).
pub const PROB_CLAMP: f64 = 1e-12;
/// Group-lasso rate given to excluded blocks: large enough that the
/// thresholding step zeroes them against any finite data, small enough that
/// every product with a coefficient norm stays finite.
const EXCLUSION_WEIGHT: f64 = 1e300;

/// Full configuration of one penalized fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcmConfig {
    pub ssgl: SsglConfig,
    /// Relative squared-change threshold for the fixed-effect coefficients.
    pub eps1: f64,
    /// Same threshold for the Cholesky triangle.
    pub eps2: f64,
    pub max_iter: usize,
    /// Coefficient-change tolerance of the inner group-lasso solves.
    pub inner_tol: f64,
    pub inner_max_sweeps: usize,
    /// Scale each random-effect spike rate by the square root of its block
    /// length, so blocks of growing size face comparable per-entry shrinkage.
    pub scale_random_spike: bool,
}

impl EcmConfig {
    pub fn with_defaults(ssgl: SsglConfig) -> Self {
        Self {
            ssgl,
            eps1: 1e-5,
            eps2: 1e-5,
            max_iter: 500,
            inner_tol: 1e-7,
            inner_max_sweeps: 20_000,
            scale_random_spike: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ssgl.validate()?;
        for (name, v) in [
            ("eps1", self.eps1),
            ("eps2", self.eps2),
            ("inner_tol", self.inner_tol),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.max_iter == 0 || self.inner_max_sweeps == 0 {
            return Err(Error::Parameter(
                "iteration caps must be at least one".into(),
            ));
        }
        Ok(())
    }
}

/// One point in parameter space: everything the model estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    /// Stacked fixed-effect basis coefficients, one block per covariate.
    pub gamma: Array1<f64>,
    /// Stacked lower-triangle entries of the random-effect Cholesky factor.
    pub ltilde: Array1<f64>,
    /// Per-cluster latent scores.
    pub b: Vec<Array1<f64>>,
    /// Fixed-effect slab mixing weight.
    pub theta: f64,
    /// Random-effect slab mixing weight.
    pub theta_star: f64,
    /// Noise variance.
    pub sigma2: f64,
}

impl ParameterState {
    /// Verifies that every component matches the model's layouts.
    pub fn check_shapes(&self, data: &ModelData) -> Result<()> {
        if self.gamma.len() != data.fixed.total() {
            return Err(Error::InvalidDimension(format!(
                "gamma has {} entries, fixed layout needs {}",
                self.gamma.len(),
                data.fixed.total()
            )));
        }
        if self.ltilde.len() != data.chol.len() {
            return Err(Error::InvalidDimension(format!(
                "ltilde has {} entries, triangle layout needs {}",
                self.ltilde.len(),
                data.chol.len()
            )));
        }
        if self.b.len() != data.n_clusters() {
            return Err(Error::InvalidDimension(format!(
                "{} score vectors for {} clusters",
                self.b.len(),
                data.n_clusters()
            )));
        }
        for (i, b) in self.b.iter().enumerate() {
            if b.len() != data.chol.total_dim() {
                return Err(Error::InvalidDimension(format!(
                    "score vector {i} has {} entries, layout needs {}",
                    b.len(),
                    data.chol.total_dim()
                )));
            }
        }
        Ok(())
    }
}

/// Expectation-step output: slab responsibilities and the adaptive rates they
/// induce.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepState {
    pub p_fixed: Vec<f64>,
    pub p_random: Vec<f64>,
    /// Adaptive fixed-effect rates `spike_k (1 - p_k) + slab p_k`.
    pub lambda_star: Vec<f64>,
    /// Adaptive random-effect rates.
    pub nu_star: Vec<f64>,
}

/// Convergence information from the two inner solves of one iteration.
#[derive(Debug, Clone, Copy)]
pub struct CmStepDiagnostics {
    pub gamma_sweeps: usize,
    pub gamma_converged: bool,
    pub ltilde_sweeps: usize,
    pub ltilde_converged: bool,
}

/// Starting point: ridge regression for the fixed effects, residual variance
/// for the noise, a small positive diagonal for the Cholesky triangle, zero
/// scores, and one half for both mixing weights.
pub fn initialize(data: &ModelData, _cfg: &EcmConfig) -> Result<ParameterState> {
    let dim = data.fixed.total();
    let mut xtx = Array2::<f64>::zeros((dim, dim));
    let mut xty = Array1::<f64>::zeros(dim);
    for c in &data.clusters {
        xtx = xtx + c.x.t().dot(&c.x);
        xty = xty + c.x.t().dot(&c.y);
    }
    let ridge = 1e-4 * xtx.diag().sum() / dim as f64;
    let mut regularized = xtx;
    for i in 0..dim {
        regularized[[i, i]] += ridge;
    }
    let gamma = solve_spd(regularized.view(), xty.view())?;

    let mut rss = 0.0;
    for c in &data.clusters {
        let fitted = c.x.dot(&gamma);
        for (y, f) in c.y.iter().zip(fitted.iter()) {
            rss += (y - f) * (y - f);
        }
    }
    let sigma2 = (rss / data.n_obs() as f64).max(SIGMA2_FLOOR);

    // Seed the triangle's diagonal at unit scale. A diagonal far below one
    // starts every block deep in the spike and shrinks the scores towards
    // zero — and a zero triangle with zero scores is a fixed point the
    // updates cannot leave — while a diagonal at the residual scale starts
    // noise blocks so large that the spike can no longer reclaim them. Unit
    // scale sits between the two failure modes: genuine random effects grow
    // out of it, noise blocks shrink back into the spike.
    let diag_scale = 1.0;
    let ltilde = Array1::from_iter(
        data.chol
            .entries()
            .iter()
            .map(|&(row, col)| if row == col { diag_scale } else { 0.0 }),
    );
    let b = (0..data.n_clusters())
        .map(|_| Array1::zeros(data.chol.total_dim()))
        .collect();
    Ok(ParameterState {
        gamma,
        ltilde,
        b,
        theta: 0.5,
        theta_star: 0.5,
        sigma2,
    })
}

/// Expectation step under the configuration's own spike rates.
pub fn e_step(phi: &ParameterState, data: &ModelData, cfg: &SsglConfig) -> Result<EStepState> {
    let fixed = vec![cfg.lambda0; data.p()];
    let random = vec![cfg.nu0; data.q()];
    e_step_with_spikes(phi, data, cfg, &fixed, &random)
}

pub(crate) fn e_step_with_spikes(
    phi: &ParameterState,
    data: &ModelData,
    cfg: &SsglConfig,
    fixed_spikes: &[f64],
    random_spikes: &[f64],
) -> Result<EStepState> {
    phi.check_shapes(data)?;
    let mut p_fixed = Vec::with_capacity(data.p());
    let mut lambda_star = Vec::with_capacity(data.p());
    for k in 0..data.p() {
        let block = phi.gamma.slice(s![data.fixed.range(k)]);
        let p = ssgl::slab_prob(block, phi.theta, fixed_spikes[k], cfg.lambda1)?;
        lambda_star.push(ssgl::adaptive_weight(p, fixed_spikes[k], cfg.lambda1));
        p_fixed.push(p);
    }
    let mut p_random = Vec::with_capacity(data.q());
    let mut nu_star = Vec::with_capacity(data.q());
    for (r, range) in data.chol.blocks().iter().enumerate() {
        let block = phi.ltilde.slice(s![range.clone()]);
        let p = ssgl::slab_prob(block, phi.theta_star, random_spikes[r], cfg.nu1)?;
        nu_star.push(ssgl::adaptive_weight(p, random_spikes[r], cfg.nu1));
        p_random.push(p);
    }
    Ok(EStepState {
        p_fixed,
        p_random,
        lambda_star,
        nu_star,
    })
}

/// First conditional maximization: mixing weights in closed form, then each
/// cluster's latent scores from its ridge-type normal equations.
pub fn cm_step1(
    phi: &mut ParameterState,
    estep: &EStepState,
    data: &ModelData,
    cfg: &SsglConfig,
) -> Result<()> {
    phi.check_shapes(data)?;
    check_estep_shapes(estep, data)?;
    let p = data.p() as f64;
    let q = data.q() as f64;
    let sum_f: f64 = estep.p_fixed.iter().sum();
    let sum_r: f64 = estep.p_random.iter().sum();
    phi.theta =
        ((cfg.a0 - 1.0 + sum_f) / (cfg.a0 + cfg.b0 + p - 2.0)).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    phi.theta_star =
        ((cfg.a1 - 1.0 + sum_r) / (cfg.a1 + cfg.b1 + q - 2.0)).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);

    let l = data.chol.expand(phi.ltilde.view())?;
    let sigma2 = phi.sigma2.max(SIGMA2_FLOOR);
    let dim = data.chol.total_dim();
    for (i, c) in data.clusters.iter().enumerate() {
        let w = c.z.dot(&l);
        let mut normal = w.t().dot(&w);
        for j in 0..dim {
            normal[[j, j]] += sigma2;
        }
        let residual = &c.y - &c.x.dot(&phi.gamma);
        let rhs = w.t().dot(&residual);
        phi.b[i] = solve_spd(normal.view(), rhs.view())?;
    }
    Ok(())
}

/// Second conditional maximization: fixed-effect coefficients, Cholesky
/// triangle, then the noise variance. Public entry point; the driver reuses
/// precassembled stacked designs through the internal variant.
pub fn cm_step2(
    phi: &mut ParameterState,
    estep: &EStepState,
    data: &ModelData,
    cfg: &EcmConfig,
) -> Result<CmStepDiagnostics> {
    let stacked_x = data.stacked_x();
    let stacked_y = stack_responses(data);
    let gram_x = stacked_x.t().dot(&stacked_x);
    let exclusions = Exclusions::none(data);
    cm_step2_with_workspace(phi, estep, data, cfg, &stacked_x, &stacked_y, &gram_x, &exclusions)
}

/// Blocks pinned to zero for the whole fit, as membership masks.
#[derive(Debug, Clone)]
struct Exclusions {
    fixed: Vec<bool>,
    random: Vec<bool>,
}

impl Exclusions {
    fn none(data: &ModelData) -> Self {
        Self {
            fixed: vec![false; data.p()],
            random: vec![false; data.q()],
        }
    }

    fn from_indices(data: &ModelData, fixed: &[usize], random: &[usize]) -> Result<Self> {
        let mut masks = Self::none(data);
        for &k in fixed {
            *masks.fixed.get_mut(k).ok_or_else(|| {
                Error::InvalidDimension(format!(
                    "excluded fixed block {k} out of range ({} blocks)",
                    data.p()
                ))
            })? = true;
        }
        for &r in random {
            *masks.random.get_mut(r).ok_or_else(|| {
                Error::InvalidDimension(format!(
                    "excluded random block {r} out of range ({} blocks)",
                    data.q()
                ))
            })? = true;
        }
        Ok(masks)
    }

    /// Zeroes the excluded blocks of a parameter state in place.
    fn apply(&self, phi: &mut ParameterState, data: &ModelData) {
        for (k, range) in data.fixed.ranges().iter().enumerate() {
            if self.fixed[k] {
                phi.gamma.slice_mut(s![range.clone()]).fill(0.0);
            }
        }
        for (r, range) in data.chol.blocks().iter().enumerate() {
            if self.random[r] {
                phi.ltilde.slice_mut(s![range.clone()]).fill(0.0);
            }
        }
    }
}

fn stack_responses(data: &ModelData) -> Array1<f64> {
    let mut y = Array1::zeros(data.n_obs());
    for c in &data.clusters {
        y.slice_mut(s![c.rows.clone()]).assign(&c.y);
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn cm_step2_with_workspace(
    phi: &mut ParameterState,
    estep: &EStepState,
    data: &ModelData,
    cfg: &EcmConfig,
    stacked_x: &Array2<f64>,
    stacked_y: &Array1<f64>,
    gram_x: &Array2<f64>,
    exclusions: &Exclusions,
) -> Result<CmStepDiagnostics> {
    phi.check_shapes(data)?;
    check_estep_shapes(estep, data)?;
    let sigma2 = phi.sigma2.max(SIGMA2_FLOOR);
    let n = data.n_obs();

    // Fixed effects: regress the response net of the random part, with the
    // triangle still at its previous value. The design is fixed across
    // iterations, so only the moment vector is rebuilt here.
    let l_prev = data.chol.expand(phi.ltilde.view())?;
    let mut y_net = stacked_y.clone();
    for (i, c) in data.clusters.iter().enumerate() {
        let random_part = c.z.dot(&l_prev.dot(&phi.b[i]));
        let mut rows = y_net.slice_mut(s![c.rows.clone()]);
        rows -= &random_part;
    }
    let weights: Vec<f64> = estep
        .lambda_star
        .iter()
        .enumerate()
        .map(|(k, rate)| {
            if exclusions.fixed[k] {
                EXCLUSION_WEIGHT
            } else {
                2.0 * rate * sigma2
            }
        })
        .collect();
    let moments = GroupLassoMoments::new(
        stacked_x.t().dot(&y_net),
        gram_x.clone(),
        y_net.dot(&y_net),
        data.fixed.ranges(),
        weights,
    )?;
    let sol = group_lasso::solve_moments(
        &moments,
        Some(phi.gamma.view()),
        cfg.inner_tol,
        cfg.inner_max_sweeps,
    )?;
    let gamma_sweeps = sol.sweeps;
    let gamma_converged = sol.converged;
    phi.gamma = sol.coefficients;

    // Cholesky triangle: regress the response net of the fixed part on the
    // score-scaled design, entirely through moments assembled from the
    // cached per-cluster `Z^T Z`.
    let y_net = stacked_y - &stacked_x.dot(&phi.gamma);
    let weights: Vec<f64> = estep
        .nu_star
        .iter()
        .enumerate()
        .map(|(r, rate)| {
            if exclusions.random[r] {
                EXCLUSION_WEIGHT
            } else {
                2.0 * rate * sigma2
            }
        })
        .collect();
    let moments = GroupLassoMoments::new(
        triangle_moment_aty(phi, data, &y_net),
        triangle_moment_gram(phi, data),
        y_net.dot(&y_net),
        data.chol.blocks().to_vec(),
        weights,
    )?;
    let sol = group_lasso::solve_moments(
        &moments,
        Some(phi.ltilde.view()),
        cfg.inner_tol,
        cfg.inner_max_sweeps,
    )?;
    let ltilde_sweeps = sol.sweeps;
    let ltilde_converged = sol.converged;
    phi.ltilde = sol.coefficients;

    // Noise variance from the full residual under the fresh coefficients.
    let l_new = data.chol.expand(phi.ltilde.view())?;
    let mut rss = 0.0;
    for (i, c) in data.clusters.iter().enumerate() {
        let fitted = c.x.dot(&phi.gamma) + c.z.dot(&l_new.dot(&phi.b[i]));
        for (y, f) in c.y.iter().zip(fitted.iter()) {
            rss += (y - f) * (y - f);
        }
    }
    phi.sigma2 =
        ((rss + cfg.ssgl.d0) / (n as f64 + cfg.ssgl.c0 + 2.0)).max(SIGMA2_FLOOR);

    Ok(CmStepDiagnostics {
        gamma_sweeps,
        gamma_converged,
        ltilde_sweeps,
        ltilde_converged,
    })
}

/// Full Gram of the stacked triangle design, via the identity
/// `U_a^T U_b = sum_i b_i[col_a] b_i[col_b] (Z_i^T Z_i)[row_a, row_b]`.
///
/// Entries are stacked row-major over the triangle, so for a pair of factor
/// rows the Gram section is one `Z^T Z` entry times an outer product of
/// leading score segments; assembling section by section keeps the cost
/// quadratic in the triangle size per cluster and independent of the number
/// of observations.
fn triangle_moment_gram(phi: &ParameterState, data: &ModelData) -> Array2<f64> {
    let len = data.chol.len();
    let total = data.chol.total_dim();
    let mut gram = Array2::<f64>::zeros((len, len));
    let flat = gram.as_slice_mut().expect("fresh matrix is contiguous");
    for (i, c) in data.clusters.iter().enumerate() {
        let scores = phi.b[i].as_slice().expect("scores are contiguous");
        for ra in 0..total {
            let base_a = ra * (ra + 1) / 2;
            for rb in ra..total {
                let gz = c.gram_z[[ra, rb]];
                if gz == 0.0 {
                    continue;
                }
                let base_b = rb * (rb + 1) / 2;
                for (ca, &score_a) in scores.iter().enumerate().take(ra + 1) {
                    let coeff = gz * score_a;
                    if coeff == 0.0 {
                        continue;
                    }
                    let start = (base_a + ca) * len + base_b;
                    for (dest, &score_b) in
                        flat[start..start + rb + 1].iter_mut().zip(scores)
                    {
                        *dest += coeff * score_b;
                    }
                }
            }
        }
    }
    // The loop above fills the upper-triangular index region; mirror it.
    for ja in 0..len {
        for jb in (ja + 1)..len {
            flat[jb * len + ja] = flat[ja * len + jb];
        }
    }
    gram
}

/// `U^T y` for the stacked triangle design: column `(row, col)` of the design
/// is `b_i[col] z_i[:, row]` within cluster `i`, so the product reduces to
/// per-cluster `Z^T y` vectors.
fn triangle_moment_aty(
    phi: &ParameterState,
    data: &ModelData,
    y_net: &Array1<f64>,
) -> Array1<f64> {
    let mut aty = Array1::zeros(data.chol.len());
    for (i, c) in data.clusters.iter().enumerate() {
        let rows = y_net.slice(s![c.rows.clone()]);
        let zty = c.z.t().dot(&rows);
        let scores = &phi.b[i];
        for (j, &(row, col)) in data.chol.entries().iter().enumerate() {
            aty[j] += scores[col] * zty[row];
        }
    }
    aty
}

fn check_estep_shapes(estep: &EStepState, data: &ModelData) -> Result<()> {
    if estep.p_fixed.len() != data.p()
        || estep.lambda_star.len() != data.p()
        || estep.p_random.len() != data.q()
        || estep.nu_star.len() != data.q()
    {
        return Err(Error::InvalidDimension(format!(
            "expectation state sized for {} fixed / {} random groups, model has {} / {}",
            estep.p_fixed.len(),
            estep.p_random.len(),
            data.p(),
            data.q()
        )));
    }
    Ok(())
}

/// `||a - b||^2 / ||b||^2`, or the absolute squared change when `b` is zero.
fn relative_sq_change(current: &Array1<f64>, previous: &Array1<f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, p) in current.iter().zip(previous.iter()) {
        num += (c - p) * (c - p);
        den += p * p;
    }
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// A completed fit: final parameters, exact-zero selection sets, the implied
/// random-effect covariance, and the monitored objective trace.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub phi: ParameterState,
    /// Indices (0-based) of fixed covariates with a non-zero coefficient block.
    pub selected_fixed: Vec<usize>,
    /// Indices (0-based) of random covariates with a non-zero triangle block.
    pub selected_random: Vec<usize>,
    /// `L L^T` at the final triangle.
    pub d_hat: Array2<f64>,
    /// Monitored log posterior, starting value included.
    pub log_posterior_trace: Vec<f64>,
    /// Completed outer iterations.
    pub iterations: usize,
    pub converged: bool,
    /// Number of inner solves that hit their sweep cap.
    pub inner_failures: usize,
    pub fixed_bases: Vec<BSplineBasis>,
    pub random_bases: Vec<BSplineBasis>,
    pub config: EcmConfig,
}

impl FitResult {
    fn fixed_layout(&self) -> BlockLayout {
        BlockLayout::new(self.fixed_bases.iter().map(|b| b.num_basis()).collect())
            .expect("basis dimensions are positive")
    }

    fn random_layout(&self) -> CholeskyLayout {
        CholeskyLayout::new(self.random_bases.iter().map(|b| b.num_basis()).collect())
            .expect("basis dimensions are positive")
    }

    /// Estimated coefficient function of fixed covariate `k` on `grid`.
    pub fn beta_curve(&self, k: usize, grid: &[f64]) -> Result<Array1<f64>> {
        if k >= self.fixed_bases.len() {
            return Err(Error::InvalidDimension(format!(
                "fixed covariate {k} out of range ({} covariates)",
                self.fixed_bases.len()
            )));
        }
        let layout = self.fixed_layout();
        let block = self.phi.gamma.slice(s![layout.range(k)]);
        let basis = self.fixed_bases[k].evaluate_matrix(grid)?;
        Ok(basis.dot(&block))
    }

    /// All fixed-effect coefficient functions, one row per covariate.
    pub fn beta_curves(&self, grid: &[f64]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.fixed_bases.len(), grid.len()));
        for k in 0..self.fixed_bases.len() {
            out.row_mut(k).assign(&self.beta_curve(k, grid)?);
        }
        Ok(out)
    }

    /// Predicted random deviation of covariate `r` in `cluster`, on `grid`.
    pub fn random_curve(&self, cluster: usize, r: usize, grid: &[f64]) -> Result<Array1<f64>> {
        if cluster >= self.phi.b.len() {
            return Err(Error::InvalidDimension(format!(
                "cluster {cluster} out of range ({} clusters)",
                self.phi.b.len()
            )));
        }
        if r >= self.random_bases.len() {
            return Err(Error::InvalidDimension(format!(
                "random covariate {r} out of range ({} covariates)",
                self.random_bases.len()
            )));
        }
        let layout = self.random_layout();
        let l = layout.expand(self.phi.ltilde.view())?;
        let eta = l.dot(&self.phi.b[cluster]);
        let offset: usize = layout.dims()[..r].iter().sum();
        let dim = layout.dims()[r];
        let block = eta.slice(s![offset..offset + dim]);
        let basis = self.random_bases[r].evaluate_matrix(grid)?;
        Ok(basis.dot(&block))
    }
}

/// Runs the full algorithm from `init` (or the standard starting point).
///
/// The returned trace contains the objective at the starting point and after
/// each completed iteration; a non-finite value aborts with diagnostic
/// context rather than iterating on garbage.
pub fn run_ecm(
    data: &ModelData,
    cfg: &EcmConfig,
    init: Option<ParameterState>,
) -> Result<FitResult> {
    run_ecm_excluding(data, cfg, init, &[], &[])
}

/// Runs the algorithm with the listed fixed and random blocks pinned to
/// zero: they are zeroed at the starting point and barred from re-entering,
/// so the result is the penalized fit over the remaining blocks. Used to
/// score candidate models that drop individual blocks from a larger fit.
pub fn run_ecm_excluding(
    data: &ModelData,
    cfg: &EcmConfig,
    init: Option<ParameterState>,
    excluded_fixed: &[usize],
    excluded_random: &[usize],
) -> Result<FitResult> {
    cfg.validate()?;
    let exclusions = Exclusions::from_indices(data, excluded_fixed, excluded_random)?;
    let mut phi = match init {
        Some(state) => {
            state.check_shapes(data)?;
            state
        }
        None => initialize(data, cfg)?,
    };
    exclusions.apply(&mut phi, data);

    let fixed_spikes = vec![cfg.ssgl.lambda0; data.p()];
    let random_spikes =
        ssgl::effective_random_spikes(cfg.ssgl.nu0, &data.chol, cfg.scale_random_spike);
    let stacked_x = data.stacked_x();
    let stacked_y = stack_responses(data);
    let gram_x = stacked_x.t().dot(&stacked_x);

    let first = ssgl::log_posterior_with_spikes(&phi, data, &cfg.ssgl, &fixed_spikes, &random_spikes)?;
    if !first.is_finite() {
        return Err(Error::NonFinite {
            iteration: 0,
            detail: format!("log posterior at the starting point is {first}"),
        });
    }
    let mut trace = vec![first];
    let mut inner_failures = 0;
    let mut converged = false;
    let mut iterations = 0;

    for t in 1..=cfg.max_iter {
        let estep = e_step_with_spikes(&phi, data, &cfg.ssgl, &fixed_spikes, &random_spikes)?;
        cm_step1(&mut phi, &estep, data, &cfg.ssgl)?;
        let prev_gamma = phi.gamma.clone();
        let prev_ltilde = phi.ltilde.clone();
        let diag = cm_step2_with_workspace(
            &mut phi, &estep, data, cfg, &stacked_x, &stacked_y, &gram_x, &exclusions,
        )?;
        if !diag.gamma_converged {
            inner_failures += 1;
        }
        if !diag.ltilde_converged {
            inner_failures += 1;
        }

        let lp =
            ssgl::log_posterior_with_spikes(&phi, data, &cfg.ssgl, &fixed_spikes, &random_spikes)?;
        if !lp.is_finite() {
            return Err(Error::NonFinite {
                iteration: t,
                detail: format!(
                    "log posterior became {lp} (sigma2 = {}, theta = {}, theta_star = {})",
                    phi.sigma2, phi.theta, phi.theta_star
                ),
            });
        }
        trace.push(lp);
        iterations = t;

        let diff1 = relative_sq_change(&phi.gamma, &prev_gamma);
        let diff2 = relative_sq_change(&phi.ltilde, &prev_ltilde);
        if diff1 <= cfg.eps1 && diff2 <= cfg.eps2 {
            converged = true;
            break;
        }
    }

    let selected_fixed = nonzero_blocks(&phi.gamma, &data.fixed.ranges());
    let selected_random = nonzero_blocks(&phi.ltilde, data.chol.blocks());
    let l = data.chol.expand(phi.ltilde.view())?;
    let d_hat = l.dot(&l.t());

    Ok(FitResult {
        phi,
        selected_fixed,
        selected_random,
        d_hat,
        log_posterior_trace: trace,
        iterations,
        converged,
        inner_failures,
        fixed_bases: data.fixed_bases.clone(),
        random_bases: data.random_bases.clone(),
        config: cfg.clone(),
    })
}

fn nonzero_blocks(v: &Array1<f64>, ranges: &[Range<usize>]) -> Vec<usize> {
    ranges
        .iter()
        .enumerate()
        .filter(|(_, r)| v.slice(s![(*r).clone()]).iter().any(|x| *x != 0.0))
        .map(|(k, _)| k)
        .collect()
}

/// Self-contained, serializable record of a fit. Re-emitting a parsed report
/// reproduces the exact bytes, so reports can be stored, diffed, and reloaded
/// without drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config: EcmConfig,
    pub fixed_bases: Vec<BSplineBasis>,
    pub random_bases: Vec<BSplineBasis>,
    /// Fixed-effect coefficients, one block per covariate.
    pub gamma: Vec<Vec<f64>>,
    /// Triangle entries, one block per random covariate.
    pub ltilde: Vec<Vec<f64>>,
    /// Latent scores, one vector per cluster.
    pub scores: Vec<Vec<f64>>,
    pub theta: f64,
    pub theta_star: f64,
    pub sigma2: f64,
    pub selected_fixed: Vec<usize>,
    pub selected_random: Vec<usize>,
    /// Random-effect covariance, row major.
    pub d_matrix: Vec<Vec<f64>>,
    pub log_posterior_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub inner_failures: usize,
    /// Grid on which the coefficient curves below are tabulated.
    pub curve_grid: Vec<f64>,
    /// Fixed-effect coefficient functions on `curve_grid`, one per covariate.
    pub fixed_curves: Vec<Vec<f64>>,
}

impl FitReport {
    pub fn from_fit(fit: &FitResult, curve_grid: &[f64]) -> Result<Self> {
        let fixed_layout = fit.fixed_layout();
        let random_layout = fit.random_layout();
        let gamma = fixed_layout
            .ranges()
            .iter()
            .map(|r| fit.phi.gamma.slice(s![r.clone()]).to_vec())
            .collect();
        let ltilde = random_layout
            .blocks()
            .iter()
            .map(|r| fit.phi.ltilde.slice(s![r.clone()]).to_vec())
            .collect();
        let scores = fit.phi.b.iter().map(|b| b.to_vec()).collect();
        let d_matrix = fit
            .d_hat
            .rows()
            .into_iter()
            .map(|row| row.to_vec())
            .collect();
        let fixed_curves = (0..fit.fixed_bases.len())
            .map(|k| Ok(fit.beta_curve(k, curve_grid)?.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: fit.config.clone(),
            fixed_bases: fit.fixed_bases.clone(),
            random_bases: fit.random_bases.clone(),
            gamma,
            ltilde,
            scores,
            theta: fit.phi.theta,
            theta_star: fit.phi.theta_star,
            sigma2: fit.phi.sigma2,
            selected_fixed: fit.selected_fixed.clone(),
            selected_random: fit.selected_random.clone(),
            d_matrix,
            log_posterior_trace: fit.log_posterior_trace.clone(),
            iterations: fit.iterations,
            converged: fit.converged,
            inner_failures: fit.inner_failures,
            curve_grid: curve_grid.to_vec(),
            fixed_curves,
        })
    }

    /// Reassembles the in-memory fit this report was taken from.
    pub fn to_fit_result(&self) -> Result<FitResult> {
        let gamma = Array1::from_iter(self.gamma.iter().flatten().copied());
        let ltilde = Array1::from_iter(self.ltilde.iter().flatten().copied());
        let b = self
            .scores
            .iter()
            .map(|v| Array1::from_vec(v.clone()))
            .collect();
        let dim = self.d_matrix.len();
        let mut d_hat = Array2::zeros((dim, dim));
        for (i, row) in self.d_matrix.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::InvalidDimension(format!(
                    "covariance row {i} has {} entries, expected {dim}",
                    row.len()
                )));
            }
            for (j, v) in row.iter().enumerate() {
                d_hat[[i, j]] = *v;
            }
        }
        let fit = FitResult {
            phi: ParameterState {
                gamma,
                ltilde,
                b,
                theta: self.theta,
                theta_star: self.theta_star,
                sigma2: self.sigma2,
            },
            selected_fixed: self.selected_fixed.clone(),
            selected_random: self.selected_random.clone(),
            d_hat,
            log_posterior_trace: self.log_posterior_trace.clone(),
            iterations: self.iterations,
            converged: self.converged,
            inner_failures: self.inner_failures,
            fixed_bases: self.fixed_bases.clone(),
            random_bases: self.random_bases.clone(),
            config: self.config.clone(),
        };
        // The layout accessors double as shape validation.
        if fit.fixed_layout().total() != fit.phi.gamma.len() {
            return Err(Error::InvalidDimension(
                "coefficient blocks do not match the stored bases".into(),
            ));
        }
        if fit.random_layout().len() != fit.phi.ltilde.len() {
            return Err(Error::InvalidDimension(
                "triangle blocks do not match the stored bases".into(),
            ));
        }
        Ok(fit)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("cannot serialize fit report: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("cannot parse fit report: {e}")))
    }
}
