//! Run configuration: a TOML file of sections merged with command-line
//! flags, flags winning. Unknown keys are rejected, and every numeric
//! constraint of the underlying types is enforced before any work starts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use funmix::ecm::EcmConfig;
use funmix::model::{DEFAULT_FIXED_BASIS_DIM, DEFAULT_RANDOM_BASIS_DIM};
use funmix::simulate::{Scenario, ScenarioSpec};
use funmix::ssgl::SsglConfig;
use funmix::tuning::{TuningGrid, DEFAULT_LAMBDA0_GRID, DEFAULT_NU0_GRID};
use funmix::{Error, Result};

/// Spike scales used when neither flags nor the file set them.
pub const DEFAULT_LAMBDA0: f64 = 20.0;
pub const DEFAULT_NU0: f64 = 10.0;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub basis: BasisSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub ecm: EcmSection,
    #[serde(default)]
    pub tuning: TuningSection,
    #[serde(default)]
    pub study: StudySection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset CSV consumed by `fit` and `tune`.
    pub dataset: Option<PathBuf>,
    /// Fit-report JSON consumed by `eval-curves`.
    pub fit: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: Option<Scenario>,
    pub clusters: Option<usize>,
    pub replicates: Option<usize>,
    pub grid_size: Option<usize>,
    pub snr_b: Option<f64>,
    pub snr_eps: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    /// One dimension for every fixed-effect coefficient.
    pub fixed_dim: Option<usize>,
    /// One dimension for every random-effect deviation.
    pub random_dim: Option<usize>,
    /// Per-coefficient dimensions; must match the covariate count.
    pub fixed_dims: Option<Vec<usize>>,
    pub random_dims: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub lambda0: Option<f64>,
    pub lambda1: Option<f64>,
    pub nu0: Option<f64>,
    pub nu1: Option<f64>,
    pub a0: Option<f64>,
    pub b0: Option<f64>,
    pub a1: Option<f64>,
    pub b1: Option<f64>,
    pub c0: Option<f64>,
    pub d0: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcmSection {
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    pub max_iter: Option<usize>,
    pub inner_tol: Option<f64>,
    pub inner_max_sweeps: Option<usize>,
    pub scale_random_spike: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSection {
    pub lambda0_grid: Option<Vec<f64>>,
    pub nu0_grid: Option<Vec<f64>>,
    /// `(fixed, random)` basis-dimension pairs to search over.
    pub basis_dims: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub replications: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub workers: Option<usize>,
}

/// Loads the file if given; an absent file means all defaults. Parse
/// diagnostics keep the TOML line/column context.
pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Data(format!("config {}: {e}", path.display())))
}

/// Flag-side value parser for `--scenario`.
pub fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    match s {
        "A" | "a" => Ok(Scenario::A),
        "B" | "b" => Ok(Scenario::B),
        _ => Err(format!("unknown scenario {s:?} (expected A or B)")),
    }
}

/// Scenario flags shared by `simulate` and `benchmark`.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct ScenarioOverrides {
    /// Generative scenario (A or B).
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Option<Scenario>,
    /// Number of clusters.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Replicates per cluster.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Observation grid size.
    #[arg(long)]
    pub grid_size: Option<usize>,
    /// Fixed-to-random contribution spread ratio.
    #[arg(long)]
    pub snr_b: Option<f64>,
    /// Linear-predictor-to-noise spread ratio ("inf" for noise-free data).
    #[arg(long)]
    pub snr_eps: Option<f64>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn resolve_scenario(cfg: &FileConfig, ov: &ScenarioOverrides) -> Result<ScenarioSpec> {
    let scenario = ov.scenario.or(cfg.scenario.kind).unwrap_or(Scenario::A);
    let clusters = ov.clusters.or(cfg.scenario.clusters).unwrap_or(25);
    let replicates = ov.replicates.or(cfg.scenario.replicates).unwrap_or(10);
    let seed = ov.seed.or(cfg.scenario.seed).unwrap_or(0);
    let mut spec = ScenarioSpec::new(scenario, clusters, replicates, seed);
    if let Some(m) = ov.grid_size.or(cfg.scenario.grid_size) {
        spec.m = m;
    }
    if let Some(v) = ov.snr_b.or(cfg.scenario.snr_b) {
        spec.snr_b = v;
    }
    if let Some(v) = ov.snr_eps.or(cfg.scenario.snr_eps) {
        spec.snr_eps = v;
    }
    spec.validate()?;
    Ok(spec)
}

/// Prior hyperparameters: defaults for the model's dimensions, spike scales
/// from flags or the file, every other field overridable from the file.
pub fn resolve_prior(
    cfg: &FileConfig,
    lambda0: Option<f64>,
    nu0: Option<f64>,
    p: usize,
    q: usize,
) -> SsglConfig {
    let mut ssgl = SsglConfig::defaults_for(
        p,
        q,
        lambda0.or(cfg.prior.lambda0).unwrap_or(DEFAULT_LAMBDA0),
        nu0.or(cfg.prior.nu0).unwrap_or(DEFAULT_NU0),
    );
    let s = &cfg.prior;
    if let Some(v) = s.lambda1 {
        ssgl.lambda1 = v;
    }
    if let Some(v) = s.nu1 {
        ssgl.nu1 = v;
    }
    if let Some(v) = s.a0 {
        ssgl.a0 = v;
    }
    if let Some(v) = s.b0 {
        ssgl.b0 = v;
    }
    if let Some(v) = s.a1 {
        ssgl.a1 = v;
    }
    if let Some(v) = s.b1 {
        ssgl.b1 = v;
    }
    if let Some(v) = s.c0 {
        ssgl.c0 = v;
    }
    if let Some(v) = s.d0 {
        ssgl.d0 = v;
    }
    ssgl
}

pub fn resolve_ecm(cfg: &FileConfig, ssgl: SsglConfig) -> Result<EcmConfig> {
    let mut e = EcmConfig::with_defaults(ssgl);
    let s = &cfg.ecm;
    if let Some(v) = s.eps1 {
        e.eps1 = v;
    }
    if let Some(v) = s.eps2 {
        e.eps2 = v;
    }
    if let Some(v) = s.max_iter {
        e.max_iter = v;
    }
    if let Some(v) = s.inner_tol {
        e.inner_tol = v;
    }
    if let Some(v) = s.inner_max_sweeps {
        e.inner_max_sweeps = v;
    }
    if let Some(v) = s.scale_random_spike {
        e.scale_random_spike = v;
    }
    e.validate()?;
    Ok(e)
}

pub fn resolve_tuning(cfg: &FileConfig) -> TuningGrid {
    TuningGrid {
        lambda0: cfg
            .tuning
            .lambda0_grid
            .clone()
            .unwrap_or_else(|| DEFAULT_LAMBDA0_GRID.to_vec()),
        nu0: cfg
            .tuning
            .nu0_grid
            .clone()
            .unwrap_or_else(|| DEFAULT_NU0_GRID.to_vec()),
        basis_dims: cfg.tuning.basis_dims.clone(),
    }
}

/// Per-coefficient basis dimensions for both sides. Each side resolves
/// independently: flag, then the per-coefficient list, then the global key,
/// then the built-in default.
pub fn resolve_basis_dims(
    cfg: &FileConfig,
    flag_fixed: Option<usize>,
    flag_random: Option<usize>,
    p: usize,
    q: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let side = |flag: Option<usize>,
                list: &Option<Vec<usize>>,
                global: Option<usize>,
                fallback: usize,
                count: usize,
                name: &str|
     -> Result<Vec<usize>> {
        if let Some(d) = flag {
            return Ok(vec![d; count]);
        }
        if let Some(list) = list {
            if list.len() != count {
                return Err(Error::InvalidDimension(format!(
                    "[basis] {name} lists {} dimensions for {count} covariates",
                    list.len()
                )));
            }
            return Ok(list.clone());
        }
        Ok(vec![global.unwrap_or(fallback); count])
    };
    let fixed = side(
        flag_fixed,
        &cfg.basis.fixed_dims,
        cfg.basis.fixed_dim,
        DEFAULT_FIXED_BASIS_DIM,
        p,
        "fixed_dims",
    )?;
    let random = side(
        flag_random,
        &cfg.basis.random_dims,
        cfg.basis.random_dim,
        DEFAULT_RANDOM_BASIS_DIM,
        q,
        "random_dims",
    )?;
    Ok((fixed, random))
}

/// Worker-thread count: flag, then the FUNMIX_WORKERS environment variable,
/// then the file; `None` leaves the pool at available parallelism.
pub fn resolve_workers(cfg: &FileConfig, flag: Option<usize>) -> Result<Option<usize>> {
    let chosen = if let Some(w) = flag {
        Some(w)
    } else if let Ok(text) = std::env::var("FUNMIX_WORKERS") {
        Some(text.parse::<usize>().map_err(|_| {
            Error::Parameter(format!("FUNMIX_WORKERS must be a positive integer, got {text:?}"))
        })?)
    } else {
        cfg.run.workers
    };
    if chosen == Some(0) {
        return Err(Error::Parameter("worker count must be positive".into()));
    }
    Ok(chosen)
}
