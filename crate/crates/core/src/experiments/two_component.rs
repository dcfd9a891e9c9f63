//! One-dimensional two-component scenarios.
//!
//! Cell layouts:
//! * `asymmetric_two`: `[alpha_star, theta0]`
//! * `equal_two`: `[theta1_0, theta2_0]`
//! * `general_two`: `[sigma2_star, theta2_star, alpha_star, theta1_0, theta2_0, covariance_update]`

use ndarray::{array, Array2};

use crate::em::{fit, CovarianceMode, FitTrace, MeanTying};
use crate::error::Result;
use crate::metrics::{convergence_iteration, DiscreteMixture};
use crate::mixture::{sample, Dataset, MixtureModel};

use super::seeds::derive;
use super::{error_at, error_series, ExperimentConfig, JobOutput, RunKey, RunRow, Scenario};

const DATA_TAG: u64 = 1;
const INIT_TAG: u64 = 2;
/// Iterations at which `equal_two` records iterate snapshots.
pub const SNAPSHOTS: [usize; 5] = [1, 2, 3, 5, 9];
const THETA1_STAR: f64 = -1.0;

pub(super) fn keys(config: &ExperimentConfig) -> Vec<RunKey> {
    let cells: Vec<Vec<usize>> = match config.scenario {
        Scenario::AsymmetricTwo => product(&[config.alpha_grid().len(), config.theta0_grid().len()]),
        Scenario::EqualTwo => {
            let t = config.theta0_grid().len();
            product(&[t, t])
        }
        Scenario::GeneralTwo => {
            let t = config.theta0_grid().len();
            product(&[
                config.sigma2_grid().len(),
                config.theta2_grid().len(),
                config.alpha_grid().len(),
                t,
                t,
                config.covariance_variants().len(),
            ])
        }
        _ => unreachable!("not a two-component scenario"),
    };
    let mut keys = Vec::new();
    for cell in cells {
        for dataset in 0..config.datasets() {
            for &engine in &config.engines {
                keys.push(RunKey { scenario: config.scenario, engine, cell: cell.clone(), dataset, variant: 0 });
            }
        }
    }
    keys
}

/// Every index tuple of a grid with the given axis lengths, last axis fastest.
pub(super) fn product(lengths: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &len in lengths {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..len).map(move |i| {
                    let mut p = prefix.clone();
                    p.push(i);
                    p
                })
            })
            .collect();
    }
    out
}

/// Draws `n` points, or `⌈n/2⌉` points plus their reflections when `symmetric`.
pub(super) fn draw(truth: &MixtureModel<f64>, n: usize, seed: u64, symmetric: bool) -> Result<Dataset<f64>> {
    if symmetric {
        Ok(sample(truth, n.div_ceil(2), seed)?.with_reflections())
    } else {
        sample(truth, n, seed)
    }
}

/// Fits and scores one run; returns the trace and the standard metrics.
pub(super) fn fit_and_score(
    config: &ExperimentConfig,
    start: &MixtureModel<f64>,
    data: &Dataset<f64>,
    engine_config: &crate::em::EngineConfig<f64>,
    truth: &DiscreteMixture<f64>,
) -> Result<(FitTrace<f64>, Vec<f64>, Vec<(&'static str, f64)>)> {
    let trace = fit(start, data, engine_config)?;
    let errors = error_series(config, &trace, truth, config.error_mode)?;
    let metrics = vec![
        ("final_error", *errors.last().expect("nonempty")),
        ("error_it4", error_at(&errors, 4)),
        ("error_it200", error_at(&errors, 200)),
        ("convergence_iteration", convergence_iteration(&errors, config.convergence_factor)? as f64),
        ("iterations", trace.len() as f64),
        ("final_nll", trace.records.last().map(|r| r.nll).unwrap_or(trace.initial_nll)),
    ];
    Ok((trace, errors, metrics))
}

pub(super) fn finish(
    key: &RunKey,
    data_seed: u64,
    init_seed: u64,
    params: Vec<(&'static str, f64)>,
    metrics: Vec<(&'static str, f64)>,
    trace: FitTrace<f64>,
) -> JobOutput {
    let row = RunRow {
        key: key.clone(),
        data_seed,
        init_seed,
        params,
        metrics,
        termination: termination_label(&trace),
        trace_hash: trace.hash(),
    };
    JobOutput { row, trace, map: None }
}

/// Seed for per-run randomness, shared by all engines of a key.
pub(super) fn init_seed(config: &ExperimentConfig, key: &RunKey, tag: u64) -> u64 {
    let mut path = vec![config.scenario.id(), tag];
    path.extend(key.cell.iter().map(|&c| c as u64));
    path.push(key.dataset as u64);
    path.push(key.variant as u64);
    derive(config.seed, &path)
}

pub(super) fn termination_label(trace: &FitTrace<f64>) -> String {
    match &trace.termination {
        crate::em::Termination::MaxIterations => "max_iterations".into(),
        crate::em::Termination::TimeBudget => "time_budget".into(),
        crate::em::Termination::Converged => "converged".into(),
        crate::em::Termination::Degenerate { component, .. } => format!("degenerate_{component}"),
    }
}

/// oEM starts from uniform weights; the fixed-weight engines use the truth.
fn start_weight(key: &RunKey, alpha: f64) -> f64 {
    if key.engine == crate::em::Engine::Overparameterized {
        0.5
    } else {
        alpha
    }
}

fn one_d(weights: [f64; 2], means: [f64; 2], variance: f64) -> Result<MixtureModel<f64>> {
    MixtureModel::isotropic(array![weights[0], weights[1]], array![[means[0]], [means[1]]], variance)
}

fn atoms(weights: [f64; 2], means: [f64; 2]) -> Result<DiscreteMixture<f64>> {
    DiscreteMixture::new(Array2::from_shape_vec((2, 1), means.to_vec()).expect("2x1"), array![weights[0], weights[1]])
}

pub(super) fn run(config: &ExperimentConfig, key: &RunKey) -> Result<JobOutput> {
    let sid = config.scenario.id();
    let n = config.sample_size();
    let init_seed = init_seed(config, key, INIT_TAG);
    match config.scenario {
        Scenario::AsymmetricTwo => {
            let (alpha, theta0) = (config.alpha_grid()[key.cell[0]], config.theta0_grid()[key.cell[1]]);
            let data_seed = derive(config.seed, &[sid, DATA_TAG, key.cell[0] as u64, key.dataset as u64]);
            let truth = MixtureModel::symmetric_pair(1.0, alpha)?;
            let data = draw(&truth, n, data_seed, config.antithetic && alpha == 0.5)?;
            let start = MixtureModel::symmetric_pair(theta0, start_weight(key, alpha))?;
            let ecfg = config.engine_config(key.engine).with_tying(MeanTying::Antipodal);
            let (trace, _, mut metrics) =
                fit_and_score(config, &start, &data, &ecfg, &atoms([alpha, 1.0 - alpha], [1.0, -1.0])?)?;
            let last = trace.final_model();
            metrics.push(("final_theta", last.mean(0)[0]));
            metrics.push(("final_weight", last.weights()[0]));
            let params = vec![("alpha_star", alpha), ("theta0", theta0)];
            Ok(finish(key, data_seed, init_seed, params, metrics, trace))
        }
        Scenario::EqualTwo => {
            let grid = config.theta0_grid();
            let (t1, t2) = (grid[key.cell[0]], grid[key.cell[1]]);
            let data_seed = derive(config.seed, &[sid, DATA_TAG, key.dataset as u64]);
            let truth = one_d([0.5, 0.5], [-1.0, 1.0], 1.0)?;
            let data = draw(&truth, n, data_seed, config.antithetic)?;
            let start = one_d([0.5, 0.5], [t1, t2], 1.0)?;
            let ecfg = config.engine_config(key.engine);
            let (trace, errors, mut metrics) =
                fit_and_score(config, &start, &data, &ecfg, &atoms([0.5, 0.5], [-1.0, 1.0])?)?;
            for &t in &SNAPSHOTS {
                let m = trace.model_at(t.min(trace.len())).expect("in range");
                metrics.push((snapshot_name(t, 0), m.mean(0)[0]));
                metrics.push((snapshot_name(t, 1), m.mean(1)[0]));
            }
            let last = trace.final_model();
            metrics.push(("final_mu0", last.mean(0)[0]));
            metrics.push(("final_mu1", last.mean(1)[0]));
            metrics.push(("converged", f64::from(u8::from(*errors.last().expect("nonempty") < 0.1))));
            let params = vec![("theta1_0", t1), ("theta2_0", t2), ("diagonal", f64::from(u8::from(key.cell[0] == key.cell[1])))];
            Ok(finish(key, data_seed, init_seed, params, metrics, trace))
        }
        Scenario::GeneralTwo => {
            let grid = config.theta0_grid();
            let sigma2 = config.sigma2_grid()[key.cell[0]];
            let theta2 = config.theta2_grid()[key.cell[1]];
            let alpha = config.alpha_grid()[key.cell[2]];
            let (t1, t2) = (grid[key.cell[3]], grid[key.cell[4]]);
            let update = config.covariance_variants()[key.cell[5]];
            let data_seed = derive(
                config.seed,
                &[sid, DATA_TAG, key.cell[0] as u64, key.cell[1] as u64, key.cell[2] as u64, key.dataset as u64],
            );
            let truth = one_d([alpha, 1.0 - alpha], [THETA1_STAR, theta2], sigma2)?;
            let symmetric = config.antithetic && alpha == 0.5 && theta2 == -THETA1_STAR;
            let data = draw(&truth, n, data_seed, symmetric)?;
            let w0 = start_weight(key, alpha);
            let start = one_d([w0, 1.0 - w0], [t1, t2], sigma2)?;
            let mode = if update { CovarianceMode::Shared } else { CovarianceMode::Fixed };
            let ecfg = config.engine_config(key.engine).with_covariance(mode);
            let (trace, _, mut metrics) =
                fit_and_score(config, &start, &data, &ecfg, &atoms([alpha, 1.0 - alpha], [THETA1_STAR, theta2])?)?;
            let last = trace.final_model();
            metrics.push(("final_mu0", last.mean(0)[0]));
            metrics.push(("final_mu1", last.mean(1)[0]));
            metrics.push(("final_sigma2", last.covariances()[0][[0, 0]]));
            let params = vec![
                ("sigma2_star", sigma2),
                ("theta2_star", theta2),
                ("alpha_star", alpha),
                ("theta1_0", t1),
                ("theta2_0", t2),
                ("covariance_update", f64::from(u8::from(update))),
            ];
            Ok(finish(key, data_seed, init_seed, params, metrics, trace))
        }
        _ => unreachable!("not a two-component scenario"),
    }
}

fn snapshot_name(t: usize, component: usize) -> &'static str {
    const NAMES: [[&str; 2]; 5] = [
        ["it1_mu0", "it1_mu1"],
        ["it2_mu0", "it2_mu1"],
        ["it3_mu0", "it3_mu1"],
        ["it5_mu0", "it5_mu1"],
        ["it9_mu0", "it9_mu1"],
    ];
    let idx = SNAPSHOTS.iter().position(|&s| s == t).expect("known snapshot");
    NAMES[idx][component]
}
