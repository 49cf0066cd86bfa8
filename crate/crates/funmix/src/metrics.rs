//! Selection accuracy, curve-estimation error, and the Monte Carlo driver.
//!
//! Rates are computed per replication and averaged, so a pooled rate is the
//! mean of the per-replication rates. A rate whose denominator is empty
//! (no true effects on that side, or no null effects) is reported as absent
//! rather than zero. Curve error is the integrated squared difference
//! between the estimated and true coefficient functions, trapezoid-quadrature
//! on a dense grid, averaged over replications.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecm::{EcmConfig, FitResult};
use crate::error::{Error, Result};
use crate::simulate::{generate, replication_seed, GroundTruth, ScenarioSpec};
use crate::tuning::{grid_search, TuningGrid};

/// Default quadrature grid size for curve-error integrals.
pub const DEFAULT_MISE_GRID: usize = 201;

/// True / false positive rates for both effect sides, averaged over
/// replications. `None` marks a rate whose denominator is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRates {
    /// Share of truly non-null fixed effects selected.
    pub tpf: Option<f64>,
    /// Share of truly null fixed effects selected.
    pub fpf: Option<f64>,
    /// Share of truly non-null random effects selected.
    pub tpr: Option<f64>,
    /// Share of truly null random effects selected.
    pub fpr: Option<f64>,
    /// Replications the averages cover.
    pub replications: usize,
}

/// One replication's selected index sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSets {
    pub fixed: Vec<usize>,
    pub random: Vec<usize>,
}

fn side_rates(
    selected: &[usize],
    support: &BTreeSet<usize>,
    universe: usize,
    side: &str,
) -> Result<(Option<f64>, Option<f64>)> {
    let selected: BTreeSet<usize> = selected.iter().copied().collect();
    if let Some(&k) = selected.iter().find(|&&k| k >= universe) {
        return Err(Error::InvalidDimension(format!(
            "selected {side} covariate {k} out of range ({universe} covariates)"
        )));
    }
    if let Some(&k) = support.iter().find(|&&k| k >= universe) {
        return Err(Error::InvalidDimension(format!(
            "true {side} covariate {k} out of range ({universe} covariates)"
        )));
    }
    let true_pos = selected.intersection(support).count();
    let false_pos = selected.len() - true_pos;
    let null_count = universe - support.len();
    let tp = (!support.is_empty()).then(|| true_pos as f64 / support.len() as f64);
    let fp = (null_count > 0).then(|| false_pos as f64 / null_count as f64);
    Ok((tp, fp))
}

fn mean_of(parts: &[Option<f64>]) -> Option<f64> {
    let values: Vec<f64> = parts.iter().copied().flatten().collect();
    (values.len() == parts.len() && !parts.is_empty())
        .then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Rates from bare index sets; the denominators come from the truth's
/// scenario dimensions and supports.
pub fn selection_rates_from_sets(
    sets: &[SelectedSets],
    truth: &GroundTruth,
) -> Result<SelectionRates> {
    if sets.is_empty() {
        return Err(Error::Parameter(
            "need at least one replication to compute selection rates".into(),
        ));
    }
    let fixed_support: BTreeSet<usize> = truth.fixed_support.iter().copied().collect();
    let random_support: BTreeSet<usize> = truth.random_support.iter().copied().collect();
    let p = truth.scenario.p();
    let q = truth.scenario.q();
    let mut tpf = Vec::with_capacity(sets.len());
    let mut fpf = Vec::with_capacity(sets.len());
    let mut tpr = Vec::with_capacity(sets.len());
    let mut fpr = Vec::with_capacity(sets.len());
    for set in sets {
        let (tp, fp) = side_rates(&set.fixed, &fixed_support, p, "fixed")?;
        tpf.push(tp);
        fpf.push(fp);
        let (tp, fp) = side_rates(&set.random, &random_support, q, "random")?;
        tpr.push(tp);
        fpr.push(fp);
    }
    Ok(SelectionRates {
        tpf: mean_of(&tpf),
        fpf: mean_of(&fpf),
        tpr: mean_of(&tpr),
        fpr: mean_of(&fpr),
        replications: sets.len(),
    })
}

/// Rates of a batch of fitted models against the generating truth.
pub fn selection_rates(fits: &[FitResult], truth: &GroundTruth) -> Result<SelectionRates> {
    let sets: Vec<SelectedSets> = fits
        .iter()
        .map(|f| SelectedSets {
            fixed: f.selected_fixed.clone(),
            random: f.selected_random.clone(),
        })
        .collect();
    selection_rates_from_sets(&sets, truth)
}

/// Mean integrated squared error of one coefficient's estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiseEntry {
    /// Fixed covariate index (0-based).
    pub coefficient: usize,
    pub value: f64,
}

/// Curve-error summary over a batch of replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiseReport {
    pub entries: Vec<MiseEntry>,
    pub grid_size: usize,
    pub replications: usize,
}

/// The non-intercept members of the true fixed support: the coefficients
/// whose estimation error the study tables report.
pub fn measured_coefficients(truth: &GroundTruth) -> Vec<usize> {
    truth
        .fixed_support
        .iter()
        .copied()
        .filter(|&k| k != 0)
        .collect()
}

fn trapezoid(values: &[f64], grid: &[f64]) -> f64 {
    values
        .windows(2)
        .zip(grid.windows(2))
        .map(|(v, s)| 0.5 * (v[0] + v[1]) * (s[1] - s[0]))
        .sum()
}

fn check_quadrature_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::InvalidDimension(
            "quadrature grid needs at least two points".into(),
        ));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data(
            "quadrature grid must be strictly increasing".into(),
        ));
    }
    if grid.len() < 10 {
        log::warn!(
            "quadrature grid has only {} points; curve-error integrals may be inaccurate",
            grid.len()
        );
    }
    Ok(())
}

/// Mean integrated squared error from already-evaluated curves.
///
/// `curves[b][j]` holds replication `b`'s estimate of coefficient
/// `coefficients[j]` evaluated on `grid`.
pub fn mise(
    curves: &[Vec<Vec<f64>>],
    coefficients: &[usize],
    truth: &GroundTruth,
    grid: &[f64],
) -> Result<MiseReport> {
    if curves.is_empty() {
        return Err(Error::Parameter(
            "need at least one replication to compute curve errors".into(),
        ));
    }
    check_quadrature_grid(grid)?;
    let truth_tab: Vec<Vec<f64>> = coefficients
        .iter()
        .map(|&k| grid.iter().map(|&s| truth.beta(k, s)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut sums = vec![0.0f64; coefficients.len()];
    for (b, rep) in curves.iter().enumerate() {
        if rep.len() != coefficients.len() {
            return Err(Error::InvalidDimension(format!(
                "replication {b} holds {} curves, expected {}",
                rep.len(),
                coefficients.len()
            )));
        }
        for (j, curve) in rep.iter().enumerate() {
            if curve.len() != grid.len() {
                return Err(Error::InvalidDimension(format!(
                    "replication {b} curve {j} has {} values for a {}-point grid",
                    curve.len(),
                    grid.len()
                )));
            }
            let sq: Vec<f64> = curve
                .iter()
                .zip(&truth_tab[j])
                .map(|(est, tr)| (est - tr) * (est - tr))
                .collect();
            sums[j] += trapezoid(&sq, grid);
        }
    }
    let b = curves.len();
    let entries = coefficients
        .iter()
        .zip(&sums)
        .map(|(&coefficient, &sum)| MiseEntry {
            coefficient,
            value: sum / b as f64,
        })
        .collect();
    Ok(MiseReport {
        entries,
        grid_size: grid.len(),
        replications: b,
    })
}

/// Evaluates each fit's coefficient curves on an equispaced grid and scores
/// them against the truth; the measured set is the truth's non-intercept
/// support.
pub fn mise_of_fits(
    fits: &[FitResult],
    truth: &GroundTruth,
    grid_size: usize,
) -> Result<MiseReport> {
    if grid_size < 2 {
        return Err(Error::InvalidDimension(
            "quadrature grid needs at least two points".into(),
        ));
    }
    let grid: Vec<f64> = (0..grid_size)
        .map(|t| t as f64 / (grid_size - 1) as f64)
        .collect();
    let coefficients = measured_coefficients(truth);
    let curves: Vec<Vec<Vec<f64>>> = fits
        .iter()
        .map(|fit| {
            coefficients
                .iter()
                .map(|&k| Ok(fit.beta_curve(k, &grid)?.to_vec()))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    mise(&curves, &coefficients, truth, &grid)
}

/// One successful Monte Carlo replication: the tuned fit's summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub replication: usize,
    pub seed: u64,
    /// Chosen spike scales and basis dimensions.
    pub lambda0: f64,
    pub nu0: f64,
    pub d_fixed: usize,
    pub d_random: usize,
    pub bic: f64,
    pub log_likelihood: f64,
    pub df: usize,
    pub selected_fixed: Vec<usize>,
    pub selected_random: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

/// A replication whose pipeline failed; excluded from the averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyFailure {
    pub replication: usize,
    pub seed: u64,
    pub message: String,
}

/// Aggregated output of a Monte Carlo study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub rates: SelectionRates,
    pub mise: MiseReport,
    pub records: Vec<StudyRecord>,
    pub failures: Vec<StudyFailure>,
    /// Replications attempted (successes plus failures).
    pub replications: usize,
}

/// Runs `replications` independent generate-tune-fit pipelines and
/// aggregates their selection and curve-error summaries.
///
/// Replication `b` uses the seed `replication_seed(spec.seed, b)`, so the
/// first replications stay identical when the count grows. Replications run
/// concurrently; failures are recorded and excluded from the averages.
pub fn monte_carlo_study(
    spec: &ScenarioSpec,
    replications: usize,
    grid: &TuningGrid,
    base: &EcmConfig,
) -> Result<StudyResult> {
    if replications == 0 {
        return Err(Error::Parameter("need at least one replication".into()));
    }
    spec.validate()?;
    base.validate()?;
    grid.validate(base)?;

    type RepOutcome = std::result::Result<(StudyRecord, FitResult, GroundTruth), StudyFailure>;
    let outcomes: Vec<RepOutcome> = (0..replications)
        .into_par_iter()
        .map(|b| {
            let mut rep_spec = spec.clone();
            rep_spec.seed = replication_seed(spec.seed, b);
            let run = || -> Result<(StudyRecord, FitResult, GroundTruth)> {
                let (raw, truth) = generate(&rep_spec)?;
                let tuned = grid_search(&raw, grid, base)?;
                let row = &tuned.best_row;
                let record = StudyRecord {
                    replication: b,
                    seed: rep_spec.seed,
                    lambda0: row.lambda0,
                    nu0: row.nu0,
                    d_fixed: row.d_fixed,
                    d_random: row.d_random,
                    bic: row.bic,
                    log_likelihood: row.log_likelihood,
                    df: row.df,
                    selected_fixed: tuned.best.selected_fixed.clone(),
                    selected_random: tuned.best.selected_random.clone(),
                    converged: row.converged,
                    iterations: row.iterations,
                };
                Ok((record, tuned.best, truth))
            };
            run().map_err(|e| StudyFailure {
                replication: b,
                seed: rep_spec.seed,
                message: e.to_string(),
            })
        })
        .collect();

    let mut records = Vec::new();
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    let mut truth = None;
    for outcome in outcomes {
        match outcome {
            Ok((record, fit, t)) => {
                records.push(record);
                fits.push(fit);
                // Supports and true curves are shared by every replication
                // of a scenario; any realization works for scoring.
                truth.get_or_insert(t);
            }
            Err(f) => failures.push(f),
        }
    }
    let Some(truth) = truth else {
        let detail: Vec<String> = failures
            .iter()
            .map(|f| format!("replication {} (seed {}): {}", f.replication, f.seed, f.message))
            .collect();
        return Err(Error::Numeric(format!(
            "all {replications} replications failed:\n{}",
            detail.join("\n")
        )));
    };
    let rates = selection_rates(&fits, &truth)?;
    let mise = mise_of_fits(&fits, &truth, DEFAULT_MISE_GRID)?;
    Ok(StudyResult {
        rates,
        mise,
        records,
        failures,
        replications,
    })
}
