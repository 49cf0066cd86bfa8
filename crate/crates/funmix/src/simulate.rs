//! Seeded synthetic data generators.
//!
//! Two scenarios share five non-null coefficient functions and two non-null
//! random effects. Scenario A reuses the fixed-effect covariates as
//! random-effect covariates; scenario B draws an independent random-effect
//! design. The random-effect and noise scales are not free parameters: they
//! are solved from target signal-to-noise ratios after drawing unit-scale
//! effects, so every generated dataset realizes its ratios exactly.
//!
//! Randomness comes from per-(role, cluster, replicate) substreams of a
//! counter-based generator keyed by a 64-bit mix of the master seed. Growing
//! the cluster count, replicate count, or Monte Carlo index therefore
//! extends earlier draws instead of reshuffling them.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RawCluster, RawDataset};

/// Which generative design to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Eight covariates, random-effect design identical to the fixed design.
    A,
    /// Eleven fixed covariates, eight-column independent random-effect design.
    B,
}

impl Scenario {
    pub fn p(self) -> usize {
        match self {
            Scenario::A => 8,
            Scenario::B => 11,
        }
    }

    pub fn q(self) -> usize {
        8
    }
}

/// Indices (0-based) of the truly non-null fixed effects.
pub const TRUE_FIXED_SUPPORT: [usize; 5] = [0, 1, 2, 3, 4];
/// Indices (0-based) of the truly non-null random effects.
pub const TRUE_RANDOM_SUPPORT: [usize; 2] = [0, 3];

/// Full description of one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    /// Number of clusters.
    pub n: usize,
    /// Replicates per cluster.
    pub replicates: usize,
    /// Grid size; points are equispaced on [0, 1] including both endpoints.
    pub m: usize,
    /// Target ratio of fixed-effect to random-effect contribution spread.
    pub snr_b: f64,
    /// Target ratio of linear-predictor spread to noise scale; infinite
    /// means noise-free responses.
    pub snr_eps: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Spec with the standard grid size and signal-to-noise targets.
    pub fn new(scenario: Scenario, n: usize, replicates: usize, seed: u64) -> Self {
        Self {
            scenario,
            n,
            replicates,
            m: 10,
            snr_b: 0.5,
            snr_eps: 4.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Parameter(format!(
                "need at least two clusters, got {}",
                self.n
            )));
        }
        if self.replicates < 1 {
            return Err(Error::Parameter("need at least one replicate".into()));
        }
        if self.m < 2 {
            return Err(Error::Parameter(format!(
                "need at least two grid points, got {}",
                self.m
            )));
        }
        for (name, v) in [("snr_b", self.snr_b), ("snr_eps", self.snr_eps)] {
            if !(v > 0.0) {
                return Err(Error::Parameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// The equispaced grid on [0, 1].
    pub fn grid(&self) -> Vec<f64> {
        (0..self.m)
            .map(|t| t as f64 / (self.m - 1) as f64)
            .collect()
    }
}

fn normal_density(s: f64, mean: f64, sd: f64) -> f64 {
    let z = (s - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// True coefficient function of covariate `k` (0-based) at `s`.
pub fn true_beta(scenario: Scenario, k: usize, s: f64) -> Result<f64> {
    if k >= scenario.p() {
        return Err(Error::InvalidDimension(format!(
            "covariate {k} out of range for a {}-covariate scenario",
            scenario.p()
        )));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    Ok(match k {
        0 => 8.0 * (two_pi * s).sin(),
        1 => 2.0 * normal_density(s, 0.6, 0.15),
        2 => 2.5 * normal_density(s, 0.6, 0.15),
        3 => 3.0 * (two_pi * s).cos(),
        4 => 5.0 * (two_pi * s).sin() + 5.0 * (two_pi * s).cos(),
        _ => 0.0,
    })
}

/// Harmonic coefficients of one cluster's realized random effects, already
/// scaled to the calibrated effect size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEffects {
    /// Sine / cosine amplitudes of the first random effect.
    pub first: [f64; 2],
    /// Full-period sine / cosine and half-period sine / cosine amplitudes of
    /// the fourth random effect.
    pub fourth: [f64; 4],
}

impl ClusterEffects {
    /// Realized deviation curve of random covariate `r` at `s`.
    pub fn curve(&self, r: usize, s: f64) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        let pi = std::f64::consts::PI;
        match r {
            0 => self.first[0] * (two_pi * s).sin() + self.first[1] * (two_pi * s).cos(),
            3 => {
                self.fourth[0] * (two_pi * s).sin()
                    + self.fourth[1] * (two_pi * s).cos()
                    + self.fourth[2] * (pi * s).sin()
                    + self.fourth[3] * (pi * s).cos()
            }
            _ => 0.0,
        }
    }
}

/// Everything needed to score an estimate of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: Scenario,
    pub fixed_support: Vec<usize>,
    pub random_support: Vec<usize>,
    /// Calibrated random-effect scale.
    pub sigma_b: f64,
    /// Calibrated noise standard deviation (zero for infinite `snr_eps`).
    pub sigma_eps: f64,
    /// Realized per-cluster effects.
    pub effects: Vec<ClusterEffects>,
}

impl GroundTruth {
    pub fn beta(&self, k: usize, s: f64) -> Result<f64> {
        true_beta(self.scenario, k, s)
    }

    /// Realized random deviation of covariate `r` in `cluster` at `s`.
    pub fn u(&self, cluster: usize, r: usize, s: f64) -> f64 {
        self.effects[cluster].curve(r, s)
    }
}

/// Substream roles; each (role, cluster, replicate) triple keys an
/// independent generator.
#[derive(Clone, Copy)]
enum Role {
    FixedCovariates,
    RandomCovariates,
    Effects,
    Noise,
    Replication,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn substream(seed: u64, role: Role, cluster: u64, replicate: u64) -> ChaCha8Rng {
    let mut key = splitmix(seed);
    key = splitmix(key ^ (role as u64 + 1));
    key = splitmix(key ^ cluster);
    key = splitmix(key ^ replicate);
    ChaCha8Rng::seed_from_u64(key)
}

/// Seed of Monte Carlo replication `index` under `master`: independent
/// datasets that stay fixed when the replication count grows.
pub fn replication_seed(master: u64, index: usize) -> u64 {
    let mut key = splitmix(master);
    key = splitmix(key ^ (Role::Replication as u64 + 1));
    splitmix(key ^ index as u64)
}

fn population_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Generates one dataset plus its ground truth.
///
/// Covariates and unit-scale effects are drawn first; the effect scale is
/// then solved so the realized fixed-to-random spread ratio equals `snr_b`,
/// and the noise scale so the linear-predictor-to-noise ratio equals
/// `snr_eps`. The ratios are enforced, not merely targeted.
pub fn generate(spec: &ScenarioSpec) -> Result<(RawDataset, GroundTruth)> {
    spec.validate()?;
    let p = spec.scenario.p();
    let q = spec.scenario.q();
    let grid = spec.grid();
    let beta_tab: Vec<Vec<f64>> = (0..p)
        .map(|k| {
            grid.iter()
                .map(|&s| true_beta(spec.scenario, k, s))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    // Covariates and unit-scale effects.
    let mut xs: Vec<Array2<f64>> = Vec::with_capacity(spec.n);
    let mut zs: Vec<Array2<f64>> = Vec::with_capacity(spec.n);
    let mut unit_effects: Vec<ClusterEffects> = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut x = Array2::zeros((spec.replicates, p));
        for j in 0..spec.replicates {
            let mut rng = substream(spec.seed, Role::FixedCovariates, i as u64, j as u64);
            x[[j, 0]] = 1.0;
            for k in 1..p {
                let draw: f64 = rng.sample(StandardNormal);
                x[[j, k]] = 2.0 * draw;
            }
        }
        let z = match spec.scenario {
            Scenario::A => x.clone(),
            Scenario::B => {
                let mut z = Array2::zeros((spec.replicates, q));
                for j in 0..spec.replicates {
                    let mut rng =
                        substream(spec.seed, Role::RandomCovariates, i as u64, j as u64);
                    z[[j, 0]] = 1.0;
                    for r in 1..q {
                        let draw: f64 = rng.sample(StandardNormal);
                        z[[j, r]] = 2.0 * draw;
                    }
                }
                z
            }
        };
        let mut rng = substream(spec.seed, Role::Effects, i as u64, 0);
        let mut draw = || -> f64 { rng.sample(StandardNormal) };
        unit_effects.push(ClusterEffects {
            first: [3.0 * draw(), 1.5 * draw()],
            fourth: [1.5 * draw(), 0.75 * draw(), 0.5 * draw(), 0.25 * draw()],
        });
        xs.push(x);
        zs.push(z);
    }

    // Realized fixed and unit-scale random contributions over every
    // (cluster, replicate, grid point).
    let total = spec.n * spec.replicates * spec.m;
    let mut fixed_part = Vec::with_capacity(total);
    let mut unit_random_part = Vec::with_capacity(total);
    for i in 0..spec.n {
        for j in 0..spec.replicates {
            for (t, &s) in grid.iter().enumerate() {
                let mut f = 0.0;
                for k in 0..p {
                    f += xs[i][[j, k]] * beta_tab[k][t];
                }
                let mut r = 0.0;
                for &rr in &TRUE_RANDOM_SUPPORT {
                    r += zs[i][[j, rr]] * unit_effects[i].curve(rr, s);
                }
                fixed_part.push(f);
                unit_random_part.push(r);
            }
        }
    }
    let sd_fixed = population_sd(&fixed_part);
    let sd_unit_random = population_sd(&unit_random_part);
    if !(sd_fixed > 0.0) || !(sd_unit_random > 0.0) {
        return Err(Error::Numeric(format!(
            "degenerate contribution spread (fixed sd {sd_fixed}, random sd {sd_unit_random}); \
             cannot calibrate the effect scale"
        )));
    }
    let sigma_b = sd_fixed / (spec.snr_b * sd_unit_random);

    let linear_predictor: Vec<f64> = fixed_part
        .iter()
        .zip(&unit_random_part)
        .map(|(f, r)| f + sigma_b * r)
        .collect();
    let sigma_eps = if spec.snr_eps.is_infinite() {
        0.0
    } else {
        let sd_lp = population_sd(&linear_predictor);
        if !(sd_lp > 0.0) {
            return Err(Error::Numeric(
                "degenerate linear predictor spread; cannot calibrate the noise scale".into(),
            ));
        }
        sd_lp / spec.snr_eps
    };

    // Responses.
    let mut clusters = Vec::with_capacity(spec.n);
    let mut flat = linear_predictor.iter();
    for i in 0..spec.n {
        let mut responses = Array2::zeros((spec.replicates, spec.m));
        for j in 0..spec.replicates {
            let mut rng = substream(spec.seed, Role::Noise, i as u64, j as u64);
            for t in 0..spec.m {
                let lp = *flat.next().expect("linear predictor covers all rows");
                let noise: f64 = rng.sample(StandardNormal);
                responses[[j, t]] = lp + sigma_eps * noise;
            }
        }
        clusters.push(RawCluster {
            responses,
            x: xs[i].clone(),
            z: zs[i].clone(),
        });
    }

    let effects = unit_effects
        .into_iter()
        .map(|e| ClusterEffects {
            first: [sigma_b * e.first[0], sigma_b * e.first[1]],
            fourth: [
                sigma_b * e.fourth[0],
                sigma_b * e.fourth[1],
                sigma_b * e.fourth[2],
                sigma_b * e.fourth[3],
            ],
        })
        .collect();

    Ok((
        RawDataset {
            grid,
            clusters,
            p,
            q,
        },
        GroundTruth {
            scenario: spec.scenario,
            fixed_support: TRUE_FIXED_SUPPORT.to_vec(),
            random_support: TRUE_RANDOM_SUPPORT.to_vec(),
            sigma_b,
            sigma_eps,
            effects,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn coefficient_functions_match_their_formulas() {
        // Quarter period of the sine intercept.
        assert_abs_diff_eq!(true_beta(Scenario::A, 0, 0.25).unwrap(), 8.0, epsilon = 1e-12);
        // Cosine effect at the origin.
        assert_abs_diff_eq!(true_beta(Scenario::A, 3, 0.0).unwrap(), 3.0, epsilon = 1e-12);
        // Bump effect at its mode: twice the normal density peak.
        let want = 2.0 / (0.15 * (2.0 * std::f64::consts::PI).sqrt());
        assert_abs_diff_eq!(true_beta(Scenario::A, 1, 0.6).unwrap(), want, epsilon = 1e-12);
        assert_abs_diff_eq!(true_beta(Scenario::A, 1, 0.6).unwrap(), 5.3192, epsilon = 1e-3);
        // Combined harmonic at zero: only the cosines contribute.
        assert_abs_diff_eq!(true_beta(Scenario::A, 4, 0.0).unwrap(), 5.0, epsilon = 1e-12);
        // Null coefficients.
        for k in 5..8 {
            assert_eq!(true_beta(Scenario::A, k, 0.3).unwrap(), 0.0);
        }
        for k in 5..11 {
            assert_eq!(true_beta(Scenario::B, k, 0.3).unwrap(), 0.0);
        }
        assert!(true_beta(Scenario::A, 8, 0.1).is_err());
        assert!(true_beta(Scenario::B, 11, 0.1).is_err());
    }

    #[test]
    fn specs_are_validated() {
        let mut spec = ScenarioSpec::new(Scenario::A, 5, 2, 7);
        assert!(spec.validate().is_ok());
        assert_eq!(spec.m, 10);
        assert_eq!(spec.snr_b, 0.5);
        assert_eq!(spec.snr_eps, 4.0);
        spec.n = 1;
        assert!(spec.validate().is_err());
        spec.n = 5;
        spec.replicates = 0;
        assert!(spec.validate().is_err());
        spec.replicates = 2;
        spec.m = 1;
        assert!(spec.validate().is_err());
        spec.m = 10;
        spec.snr_b = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ScenarioSpec::new(Scenario::A, 4, 3, 42);
        let (data_a, truth_a) = generate(&spec).unwrap();
        let (data_b, truth_b) = generate(&spec).unwrap();
        assert_eq!(truth_a, truth_b);
        for (ca, cb) in data_a.clusters.iter().zip(&data_b.clusters) {
            assert_eq!(ca.responses, cb.responses);
            assert_eq!(ca.x, cb.x);
            assert_eq!(ca.z, cb.z);
        }
    }

    #[test]
    fn growing_the_design_extends_earlier_draws() {
        let small = ScenarioSpec::new(Scenario::B, 3, 2, 11);
        let (data_small, truth_small) = generate(&small).unwrap();

        let mut more_clusters = small.clone();
        more_clusters.n = 6;
        let (data_big, truth_big) = generate(&more_clusters).unwrap();
        for i in 0..3 {
            assert_eq!(data_small.clusters[i].x, data_big.clusters[i].x);
            assert_eq!(data_small.clusters[i].z, data_big.clusters[i].z);
            // Effect scales differ (calibration sees more data), but the
            // unit draws behind them must match: compare after unscaling.
            let a = &truth_small.effects[i];
            let b = &truth_big.effects[i];
            for (ea, eb) in a.first.iter().zip(b.first.iter()) {
                assert_abs_diff_eq!(
                    ea / truth_small.sigma_b,
                    eb / truth_big.sigma_b,
                    epsilon = 1e-12
                );
            }
        }

        let mut more_replicates = small.clone();
        more_replicates.replicates = 4;
        let (data_rep, _) = generate(&more_replicates).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..data_small.p {
                    assert_eq!(
                        data_small.clusters[i].x[[j, k]],
                        data_rep.clusters[i].x[[j, k]]
                    );
                }
            }
        }
    }

    #[test]
    fn scenario_a_reuses_the_fixed_design() {
        let spec = ScenarioSpec::new(Scenario::A, 3, 2, 5);
        let (data, _) = generate(&spec).unwrap();
        assert_eq!(data.p, 8);
        assert_eq!(data.q, 8);
        for c in &data.clusters {
            assert_eq!(c.x, c.z);
            for j in 0..spec.replicates {
                assert_eq!(c.x[[j, 0]], 1.0);
            }
        }
    }

    #[test]
    fn scenario_b_draws_an_independent_design() {
        let spec = ScenarioSpec::new(Scenario::B, 3, 2, 5);
        let (data, _) = generate(&spec).unwrap();
        assert_eq!(data.p, 11);
        assert_eq!(data.q, 8);
        for c in &data.clusters {
            for j in 0..spec.replicates {
                assert_eq!(c.x[[j, 0]], 1.0);
                assert_eq!(c.z[[j, 0]], 1.0);
                // The non-intercept columns come from different substreams.
                assert_ne!(c.x[[j, 1]], c.z[[j, 1]]);
            }
        }
    }

    #[test]
    fn null_random_effects_are_exactly_zero() {
        let spec = ScenarioSpec::new(Scenario::A, 3, 2, 9);
        let (_, truth) = generate(&spec).unwrap();
        for i in 0..3 {
            for r in [1, 2, 4, 5, 6, 7] {
                for s in [0.0, 0.3, 0.7, 1.0] {
                    assert_eq!(truth.u(i, r, s), 0.0);
                }
            }
        }
        assert_eq!(truth.fixed_support, vec![0, 1, 2, 3, 4]);
        assert_eq!(truth.random_support, vec![0, 3]);
    }

    #[test]
    fn signal_ratios_are_realized_exactly() {
        let spec = ScenarioSpec::new(Scenario::A, 6, 4, 21);
        let (data, truth) = generate(&spec).unwrap();

        // Recompute both contributions from the emitted dataset and truth.
        let mut fixed = Vec::new();
        let mut random = Vec::new();
        let mut lp = Vec::new();
        for (i, c) in data.clusters.iter().enumerate() {
            for j in 0..spec.replicates {
                for (t, &s) in data.grid.iter().enumerate() {
                    let mut f = 0.0;
                    for k in 0..data.p {
                        f += c.x[[j, k]] * true_beta(spec.scenario, k, s).unwrap();
                    }
                    let mut r = 0.0;
                    for rr in 0..data.q {
                        r += c.z[[j, rr]] * truth.u(i, rr, s);
                    }
                    let _ = t;
                    fixed.push(f);
                    random.push(r);
                    lp.push(f + r);
                }
            }
        }
        let snr_b = population_sd(&fixed) / population_sd(&random);
        assert_abs_diff_eq!(snr_b, spec.snr_b, epsilon = 0.01 * spec.snr_b);
        let snr_eps = population_sd(&lp) / truth.sigma_eps;
        assert_abs_diff_eq!(snr_eps, spec.snr_eps, epsilon = 0.01 * spec.snr_eps);
    }

    #[test]
    fn infinite_noise_ratio_returns_the_linear_predictor() {
        let mut spec = ScenarioSpec::new(Scenario::A, 3, 2, 33);
        spec.snr_eps = f64::INFINITY;
        let (data, truth) = generate(&spec).unwrap();
        assert_eq!(truth.sigma_eps, 0.0);
        for (i, c) in data.clusters.iter().enumerate() {
            for j in 0..spec.replicates {
                for (t, &s) in data.grid.iter().enumerate() {
                    let mut lp = 0.0;
                    for k in 0..data.p {
                        lp += c.x[[j, k]] * true_beta(spec.scenario, k, s).unwrap();
                    }
                    for rr in 0..data.q {
                        lp += c.z[[j, rr]] * truth.u(i, rr, s);
                    }
                    assert_abs_diff_eq!(
                        c.responses[[j, t]],
                        lp,
                        epsilon = 1e-9 * lp.abs().max(1.0)
                    );
                }
            }
        }
    }

    #[test]
    fn replication_seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..10).map(|b| replication_seed(7, b)).collect();
        let b: Vec<u64> = (0..10).map(|b| replication_seed(7, b)).collect();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
        assert_ne!(replication_seed(7, 0), replication_seed(8, 0));
    }

    #[test]
    fn generated_data_assemble_cleanly() {
        let spec = ScenarioSpec::new(Scenario::A, 3, 2, 55);
        let (data, _) = generate(&spec).unwrap();
        data.validate().unwrap();
        let assembled = crate::model::assemble_with_dims(&data, 5, 4).unwrap();
        assert_eq!(assembled.n_obs(), 3 * 2 * 10);
        assert_eq!(assembled.p(), 8);
        assert_eq!(assembled.q(), 8);
    }
}
