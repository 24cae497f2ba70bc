//! Experiment execution. Every runner returns its artifacts in memory; the
//! binary decides where they go.

use serde::Serialize;
use stoplab::paths::streams;
use stoplab::processes::{simulate_ensemble, ProcessSpec};
use stoplab::stopderiv::{covariance_matrix_at, DerivEstimate, EstimateSummary, Functional, VarianceVariant};
use stoplab::theorems::{
    check_characteristic, check_distinct_distributions, check_equal_characteristics, check_first_exit_mean, check_ftc,
    check_identity, check_levy_time_change, check_quadratic_variation, check_zero_drift, run_suite, summary_csv,
    CheckReport, Sizes,
};
use stoplab::condest::{Observable, SmoothFn};
use stoplab::stopping::RatePolicy;

use crate::config::{CheckTarget, Experiment, ExperimentConfig, TheoremId};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    /// Short result printed on standard output.
    pub stdout: String,
    /// False when a check failed.
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub format: Format,
    pub seed: Option<u64>,
    /// Keep wall-clock times in reports; off by default so artifacts are
    /// byte-identical across runs.
    pub timing: bool,
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

fn lab(field: &'static str) -> impl Fn(stoplab::LabError) -> CliError {
    move |e| CliError::from_lab(field, e)
}

pub fn run_config(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<Outcome> {
    let exp = cfg.validate()?;
    let seed = cfg.seed(opts.seed)?;
    let mut out = match exp {
        Experiment::Simulate => simulate(cfg, seed, opts.format)?,
        Experiment::Drift | Experiment::VarianceRate | Experiment::Characteristic | Experiment::Covariance => {
            estimate(cfg, exp, seed, opts.format)?
        }
        Experiment::Check(target) => {
            let report = check(cfg, target, seed)?;
            reports_outcome(vec![report], opts, "report")
        }
    };
    for a in &mut out.artifacts {
        a.name = format!("{}{}", cfg.output.prefix, a.name);
    }
    Ok(out)
}

fn simulate(cfg: &ExperimentConfig, seed: u64, format: Format) -> CliResult<Outcome> {
    let grid = cfg.grid()?;
    let ens = simulate_ensemble(cfg.process()?, &grid, seed, streams::OUTER, cfg.paths).map_err(lab("process"))?;
    let artifacts = match format {
        Format::Csv => ens
            .paths
            .iter()
            .enumerate()
            .map(|(i, p)| Artifact { name: format!("path_{i:04}.csv"), contents: p.to_csv() })
            .collect(),
        Format::Json => vec![Artifact { name: "paths.json".into(), contents: to_json(&ens.paths) }],
    };
    let stdout = format!("simulated {} path(s) of {} steps, seed {seed}\n", ens.paths.len(), grid.n_steps);
    Ok(Outcome { artifacts, stdout, passed: true })
}

#[derive(Serialize)]
struct EstimateRecord<'a> {
    experiment: &'a str,
    seed: u64,
    label: String,
    summary: EstimateSummary,
}

fn estimate(cfg: &ExperimentConfig, exp: Experiment, seed: u64, format: Format) -> CliResult<Outcome> {
    let est = cfg.estimator(seed)?;
    let obs = cfg.observable();
    let labelled: Vec<(String, DerivEstimate)> = match exp {
        Experiment::Drift => vec![("estimate".into(), est.estimate(&Functional::drift(obs)).map_err(lab("process"))?)],
        Experiment::VarianceRate => {
            let variant = cfg.variant.clone().unwrap_or(VarianceVariant::CondVar);
            vec![("estimate".into(), est.estimate(&Functional::variance(obs, variant)).map_err(lab("variant"))?)]
        }
        Experiment::Characteristic => {
            let f = cfg.function.clone().unwrap_or(SmoothFn::Square);
            let e = stoplab::stopderiv::characteristic_at(&est, f).map_err(lab("function"))?;
            vec![("estimate".into(), e)]
        }
        Experiment::Covariance => match cfg.pair {
            Some([x, y]) => {
                let f = Functional::CovarianceRate { x: Observable::coord(x), y: Observable::coord(y) };
                vec![(format!("estimate_{x}_{y}"), est.estimate(&f).map_err(lab("pair"))?)]
            }
            None => {
                let m = covariance_matrix_at(&est).map_err(lab("process"))?;
                let d = m.entries.len();
                let mut v = Vec::new();
                for i in 0..d {
                    for j in i..d {
                        v.push((format!("estimate_{i}_{j}"), m.entries[i][j].clone()));
                    }
                }
                v
            }
        },
        _ => unreachable!("estimate called with {exp:?}"),
    };
    let mut stdout = String::new();
    let mut artifacts = Vec::new();
    let mut records = Vec::new();
    for (label, e) in &labelled {
        stdout.push_str(&format!(
            "{label}: extrapolated {} (stderr {}), finest {}, converged {}\n",
            e.extrapolated,
            e.extrapolated_stderr,
            e.finest(),
            e.converged
        ));
        if format == Format::Csv {
            artifacts.push(Artifact { name: format!("{label}.csv"), contents: e.to_csv() });
        }
        records.push(EstimateRecord { experiment: &cfg.experiment, seed, label: label.clone(), summary: e.summary() });
    }
    artifacts.push(Artifact { name: "estimate.json".into(), contents: to_json(&records) });
    Ok(Outcome { artifacts, stdout, passed: true })
}

fn check(cfg: &ExperimentConfig, target: CheckTarget, seed: u64) -> CliResult<CheckReport> {
    let tol = cfg.tolerances();
    let theorem = match target {
        CheckTarget::Rule(r) => return check_identity(r, &cfg.sizes(), seed).map_err(lab("experiment")),
        CheckTarget::Theorem(t) => t,
    };
    let name = theorem.name();
    let grid = cfg.grid()?;
    let c = &cfg.check;
    let rate = || c.rate.clone().ok_or_else(|| CliError::config("check.rate", "required for this check"));
    let other = || c.other_process.clone().ok_or_else(|| CliError::config("check.other_process", "required for this check"));
    let r = match theorem {
        TheoremId::ZeroDrift => check_zero_drift(name, &cfg.estimator(seed)?, cfg.observable(), &cfg.anchors(), tol),
        TheoremId::Ftc => {
            let ProcessSpec::Ito { x0, drift, diffusion } = cfg.process()?.clone() else {
                return Err(CliError::config("process", "the FTC check needs an ito process"));
            };
            check_ftc(name, x0, drift, diffusion, &cfg.estimator(seed)?, &cfg.anchors(), tol)
        }
        TheoremId::QuadraticVariation => {
            check_quadratic_variation(name, cfg.process()?, &rate()?, &grid, c.samples, &cfg.estimator(seed)?, &cfg.anchors(), tol)
        }
        TheoremId::LevyTimeChange => {
            check_levy_time_change(name, cfg.process()?, &rate()?, &grid, c.samples, c.intervals, seed, RatePolicy::StrictlyPositive)
        }
        TheoremId::DistinctDistributions => {
            let t = c.t.unwrap_or(grid.horizon());
            check_distinct_distributions(name, cfg.process()?, &other()?, &grid, t, c.samples, seed, c.level)
        }
        TheoremId::EqualCharacteristics => check_equal_characteristics(name, &cfg.estimator(seed)?, &other()?, tol),
        TheoremId::CharacteristicOperator => {
            let target = c.target.ok_or_else(|| CliError::config("check.target", "required for this check"))?;
            let f = cfg.function.clone().unwrap_or(SmoothFn::Square);
            check_characteristic(name, &cfg.estimator(seed)?, f, target, tol)
        }
        TheoremId::FirstExitMean => {
            let radius = c.radius.ok_or_else(|| CliError::config("check.radius", "required for this check"))?;
            let target = c.target.unwrap_or(radius * radius);
            check_first_exit_mean(name, cfg.process()?, &grid, radius, c.samples, seed, target, tol.tol_rel.max(0.05))
        }
    };
    r.map_err(lab("check"))
}

fn reports_outcome(reports: Vec<CheckReport>, opts: &RunOptions, stem: &str) -> Outcome {
    let reports: Vec<CheckReport> =
        if opts.timing { reports } else { reports.into_iter().map(|r| r.without_timing()).collect() };
    let passed = reports.iter().all(|r| r.passed());
    let csv = summary_csv(&reports);
    let json = if reports.len() == 1 { to_json(&reports[0]) } else { to_json(&reports) };
    let stdout = match opts.format {
        Format::Csv => csv.clone(),
        Format::Json => json.clone(),
    };
    let artifacts = vec![
        Artifact { name: "summary.csv".into(), contents: csv },
        Artifact { name: format!("{stem}.json"), contents: json },
    ];
    Outcome { artifacts, stdout, passed }
}

/// Runs every rule and theorem check.
pub fn suite(sizes: &Sizes, seed: u64, opts: &RunOptions) -> CliResult<Outcome> {
    let reports = run_suite(sizes, seed).map_err(lab("suite"))?;
    Ok(reports_outcome(reports, opts, "reports"))
}
