//! The work behind each subcommand. All file writes happen here on the
//! coordinating thread, after any parallel work has finished.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use funmix::basis::BSplineBasis;
use funmix::ecm::{run_ecm, EcmConfig, FitReport};
use funmix::metrics::{monte_carlo_study, StudyResult};
use funmix::model::{
    assemble_with_dim_lists, format_float, read_dataset_csv, write_dataset_csv, RawDataset,
};
use funmix::simulate::{generate, ScenarioSpec};
use funmix::tuning::{grid_search, write_bic_table_csv, TuningGrid};
use funmix::{Error, Result};

use crate::config::{self, FileConfig, ScenarioOverrides};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Resolves and creates the output directory.
pub fn ensure_out_dir(cfg: &FileConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| cfg.output.directory.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .map_err(|e| Error::Data(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn to_pretty_json<T: Serialize>(value: &T, what: &str) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("cannot serialize {what}: {e}")))?;
    text.push('\n');
    Ok(text)
}

fn equispaced(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|t| lo + (hi - lo) * t as f64 / (n - 1) as f64)
        .collect()
}

fn read_dataset(cfg: &FileConfig, flag: Option<PathBuf>) -> Result<(PathBuf, RawDataset)> {
    let path = flag.or_else(|| cfg.data.dataset.clone()).ok_or_else(|| {
        Error::Parameter("no dataset given; pass --dataset or set [data] dataset".into())
    })?;
    let raw = read_dataset_csv(&path)?;
    Ok((path, raw))
}

fn option_cell(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

fn index_list(indices: &[usize]) -> String {
    if indices.is_empty() {
        "none".into()
    } else {
        indices
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Serialize)]
struct SimulateManifest<'a> {
    command: &'static str,
    version: &'static str,
    spec: &'a ScenarioSpec,
    outputs: Vec<String>,
}

pub fn simulate(cfg: &FileConfig, overrides: &ScenarioOverrides, out: &Path) -> Result<()> {
    let spec = config::resolve_scenario(cfg, overrides)?;
    let (data, truth) = generate(&spec)?;

    let dataset_path = out.join("dataset.csv");
    write_dataset_csv(&data, &dataset_path)?;
    let truth_path = out.join("truth.json");
    write_text(&truth_path, &to_pretty_json(&truth, "ground truth")?)?;
    let manifest = SimulateManifest {
        command: "simulate",
        version: VERSION,
        spec: &spec,
        outputs: vec![
            dataset_path.display().to_string(),
            truth_path.display().to_string(),
        ],
    };
    write_text(&out.join("manifest.json"), &to_pretty_json(&manifest, "manifest")?)?;

    println!(
        "wrote {} ({} clusters x {} replicates x {} points, {} x-columns, {} z-columns)",
        dataset_path.display(),
        spec.n,
        spec.replicates,
        spec.m,
        data.p,
        data.q
    );
    println!("wrote {}", truth_path.display());
    println!(
        "sigma_b = {:.6}, sigma_eps = {:.6}, snr_b = {}, snr_eps = {}",
        truth.sigma_b, truth.sigma_eps, spec.snr_b, spec.snr_eps
    );
    Ok(())
}

#[derive(Debug, clap::Args)]
pub struct FitArgs {
    /// Dataset CSV path.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Fixed-effect spike scale.
    #[arg(long)]
    pub lambda0: Option<f64>,
    /// Random-effect spike scale.
    #[arg(long)]
    pub nu0: Option<f64>,
    /// Basis dimension for every fixed-effect coefficient.
    #[arg(long)]
    pub fixed_dim: Option<usize>,
    /// Basis dimension for every random-effect deviation.
    #[arg(long)]
    pub random_dim: Option<usize>,
    /// Points of the curve grid stored with the fit.
    #[arg(long, default_value_t = 201)]
    pub curve_grid: usize,
}

fn curve_grid(raw: &RawDataset, points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::Parameter(
            "curve grid needs at least two points".into(),
        ));
    }
    let (lo, hi) = (raw.grid[0], raw.grid[raw.grid.len() - 1]);
    Ok(equispaced(points, lo, hi))
}

fn write_curves_csv(path: &Path, grid: &[f64], curves: &[Vec<f64>]) -> Result<()> {
    let mut text = String::from("s");
    for k in 0..curves.len() {
        write!(text, ",beta_{k}").expect("string write");
    }
    text.push('\n');
    for (t, &s) in grid.iter().enumerate() {
        text.push_str(&format_float(s));
        for curve in curves {
            text.push(',');
            text.push_str(&format_float(curve[t]));
        }
        text.push('\n');
    }
    write_text(path, &text)
}

fn fit_summary(report: &FitReport) -> String {
    format!(
        "converged = {} after {} iterations; sigma2 = {:.6}\nselected fixed effects: {}\nselected random effects: {}",
        report.converged,
        report.iterations,
        report.sigma2,
        index_list(&report.selected_fixed),
        index_list(&report.selected_random),
    )
}

pub fn fit(cfg: &FileConfig, args: &FitArgs, out: &Path) -> Result<()> {
    let (_, raw) = read_dataset(cfg, args.dataset.clone())?;
    let (d_fixed, d_random) =
        config::resolve_basis_dims(cfg, args.fixed_dim, args.random_dim, raw.p, raw.q)?;
    let data = assemble_with_dim_lists(&raw, &d_fixed, &d_random)?;
    let ssgl = config::resolve_prior(cfg, args.lambda0, args.nu0, raw.p, raw.q);
    let base = config::resolve_ecm(cfg, ssgl)?;

    let result = run_ecm(&data, &base, None)?;
    let grid = curve_grid(&raw, args.curve_grid)?;
    let report = FitReport::from_fit(&result, &grid)?;

    let fit_path = out.join("fit.json");
    write_text(&fit_path, &report.to_json()?)?;
    let curves_path = out.join("curves.csv");
    write_curves_csv(&curves_path, &grid, &report.fixed_curves)?;

    println!("{}", fit_summary(&report));
    println!("wrote {}", fit_path.display());
    println!("wrote {}", curves_path.display());
    Ok(())
}

#[derive(Debug, clap::Args)]
pub struct TuneArgs {
    /// Dataset CSV path.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Points of the curve grid stored with the best fit.
    #[arg(long, default_value_t = 201)]
    pub curve_grid: usize,
}

pub fn tune(cfg: &FileConfig, args: &TuneArgs, out: &Path) -> Result<()> {
    let (_, raw) = read_dataset(cfg, args.dataset.clone())?;
    let ssgl = config::resolve_prior(cfg, None, None, raw.p, raw.q);
    let base = config::resolve_ecm(cfg, ssgl)?;
    let grid = config::resolve_tuning(cfg);

    let tuned = grid_search(&raw, &grid, &base)?;

    let table_path = out.join("bic_table.csv");
    write_bic_table_csv(&tuned.table, &table_path)?;
    let curve_grid = curve_grid(&raw, args.curve_grid)?;
    let report = FitReport::from_fit(&tuned.best, &curve_grid)?;
    let best_path = out.join("best_fit.json");
    write_text(&best_path, &report.to_json()?)?;

    let row = &tuned.best_row;
    println!(
        "best point: lambda0 = {}, nu0 = {}, dims = ({}, {}), bic = {:.6}, df = {}",
        row.lambda0, row.nu0, row.d_fixed, row.d_random, row.bic, row.df
    );
    println!("{}", fit_summary(&report));
    println!(
        "scored {} grid points ({} failed)",
        tuned.table.len() + tuned.failures.len(),
        tuned.failures.len()
    );
    println!("wrote {}", table_path.display());
    println!("wrote {}", best_path.display());
    Ok(())
}

#[derive(Debug, clap::Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub scenario: ScenarioOverrides,
    /// Monte Carlo replications.
    #[arg(long)]
    pub replications: Option<usize>,
}

#[derive(Serialize)]
struct BenchmarkManifest<'a> {
    command: &'static str,
    version: &'static str,
    spec: &'a ScenarioSpec,
    replications: usize,
    tuning: &'a TuningGrid,
    ecm: &'a EcmConfig,
    study: &'a StudyResult,
}

fn selection_table(spec: &ScenarioSpec, study: &StudyResult) -> String {
    let mut text =
        String::from("scenario,clusters,replicates,grid_size,replications,failures,tpf,fpf,tpr,fpr\n");
    writeln!(
        text,
        "{:?},{},{},{},{},{},{},{},{},{}",
        spec.scenario,
        spec.n,
        spec.replicates,
        spec.m,
        study.replications,
        study.failures.len(),
        option_cell(study.rates.tpf),
        option_cell(study.rates.fpf),
        option_cell(study.rates.tpr),
        option_cell(study.rates.fpr),
    )
    .expect("string write");
    text
}

fn mise_table(study: &StudyResult) -> String {
    let mut text = String::from("coefficient,mise\n");
    for entry in &study.mise.entries {
        writeln!(text, "{},{}", entry.coefficient, format_float(entry.value))
            .expect("string write");
    }
    text
}

pub fn benchmark(cfg: &FileConfig, args: &BenchmarkArgs, out: &Path) -> Result<()> {
    let spec = config::resolve_scenario(cfg, &args.scenario)?;
    let replications = args
        .replications
        .or(cfg.study.replications)
        .unwrap_or(20);
    let ssgl = config::resolve_prior(cfg, None, None, spec.scenario.p(), spec.scenario.q());
    let base = config::resolve_ecm(cfg, ssgl)?;
    let grid = config::resolve_tuning(cfg);

    let study = monte_carlo_study(&spec, replications, &grid, &base)?;

    let rates_path = out.join("selection_rates.csv");
    let rates_csv = selection_table(&spec, &study);
    write_text(&rates_path, &rates_csv)?;
    let mise_path = out.join("mise.csv");
    let mise_csv = mise_table(&study);
    write_text(&mise_path, &mise_csv)?;
    let manifest = BenchmarkManifest {
        command: "benchmark",
        version: VERSION,
        spec: &spec,
        replications,
        tuning: &grid,
        ecm: &base,
        study: &study,
    };
    write_text(&out.join("manifest.json"), &to_pretty_json(&manifest, "manifest")?)?;

    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "selection rates over {} replications ({} failed): tpf = {}, fpf = {}, tpr = {}, fpr = {}",
        study.replications,
        study.failures.len(),
        fmt(study.rates.tpf),
        fmt(study.rates.fpf),
        fmt(study.rates.tpr),
        fmt(study.rates.fpr),
    );
    for entry in &study.mise.entries {
        println!("mise[beta_{}] = {:.6}", entry.coefficient, entry.value);
    }
    println!("wrote {}", rates_path.display());
    println!("wrote {}", mise_path.display());
    println!("wrote {}", out.join("manifest.json").display());
    Ok(())
}

#[derive(Debug, clap::Args)]
pub struct EvalCurvesArgs {
    /// Fit-report JSON path.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Evaluation grid size; omitted = the grid stored in the report.
    #[arg(long)]
    pub grid_size: Option<usize>,
    /// Also write each cluster's predicted random deviations.
    #[arg(long)]
    pub random: bool,
}

pub fn eval_curves(cfg: &FileConfig, args: &EvalCurvesArgs, out: &Path) -> Result<()> {
    let path = args
        .fit
        .clone()
        .or_else(|| cfg.data.fit.clone())
        .ok_or_else(|| {
            Error::Parameter("no fit report given; pass --fit or set [data] fit".into())
        })?;
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let report = FitReport::from_json(&text)?;
    let result = report.to_fit_result()?;

    let grid = match args.grid_size {
        None => report.curve_grid.clone(),
        Some(n) if n >= 2 => {
            let (lo, hi) = report.fixed_bases[0].domain();
            equispaced(n, lo, hi)
        }
        Some(_) => {
            return Err(Error::Parameter(
                "curve grid needs at least two points".into(),
            ))
        }
    };

    let curves: Vec<Vec<f64>> = (0..report.fixed_bases.len())
        .map(|k| Ok(result.beta_curve(k, &grid)?.to_vec()))
        .collect::<Result<_>>()?;
    let curves_path = out.join("curves.csv");
    write_curves_csv(&curves_path, &grid, &curves)?;
    println!("wrote {}", curves_path.display());

    if args.random {
        let mut text = String::from("cluster,effect,s,value\n");
        for i in 0..report.scores.len() {
            for r in 0..report.random_bases.len() {
                let curve = result.random_curve(i, r, &grid)?;
                for (t, &s) in grid.iter().enumerate() {
                    writeln!(
                        text,
                        "{i},{r},{},{}",
                        format_float(s),
                        format_float(curve[t])
                    )
                    .expect("string write");
                }
            }
        }
        let random_path = out.join("random_curves.csv");
        write_text(&random_path, &text)?;
        println!("wrote {}", random_path.display());
    }
    Ok(())
}

#[derive(Debug, clap::Args)]
pub struct BasisArgs {
    /// Number of cubic B-spline basis functions.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Evaluation grid size.
    #[arg(long, default_value_t = 201)]
    pub grid_size: usize,
    /// Domain lower end.
    #[arg(long, default_value_t = 0.0)]
    pub lo: f64,
    /// Domain upper end.
    #[arg(long, default_value_t = 1.0)]
    pub hi: f64,
}

pub fn basis(args: &BasisArgs, out: &Path) -> Result<()> {
    if args.grid_size < 2 {
        return Err(Error::Parameter(
            "evaluation grid needs at least two points".into(),
        ));
    }
    let basis = BSplineBasis::cubic(args.dim, args.lo, args.hi)?;
    let grid = equispaced(args.grid_size, args.lo, args.hi);
    let values = basis.evaluate_matrix(&grid)?;

    let mut text = String::from("s");
    for k in 0..args.dim {
        write!(text, ",b_{k}").expect("string write");
    }
    text.push('\n');
    for (t, &s) in grid.iter().enumerate() {
        text.push_str(&format_float(s));
        for k in 0..args.dim {
            text.push(',');
            text.push_str(&format_float(values[[t, k]]));
        }
        text.push('\n');
    }
    let path = out.join("basis.csv");
    write_text(&path, &text)?;
    println!(
        "wrote {} ({} functions on {} points over [{}, {}])",
        path.display(),
        args.dim,
        args.grid_size,
        args.lo,
        args.hi
    );
    Ok(())
}
