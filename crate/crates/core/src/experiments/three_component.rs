//! Three-component scenarios.
//!
//! Cell layouts:
//! * `three_mixture`: `[mu, noise_variance, n]`; the variant indexes the
//!   overparameterized engine's initial weights (0 is uniform, then random
//!   simplex draws).
//! * `xu_comparison`: `[rho]`; the variant indexes random starts.

use ndarray::{array, Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::em::Engine;
use crate::error::Result;
use crate::metrics::DiscreteMixture;
use crate::mixture::{sample, MixtureModel};

use super::seeds::derive;
use super::two_component::{finish, fit_and_score, init_seed, product};
use super::{estimation_error, ErrorMode, ExperimentConfig, JobOutput, RunKey, Scenario};

const DATA_TAG: u64 = 1;
const INIT_TAG: u64 = 2;
const WEIGHT_TAG: u64 = 3;
const XU_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];
const XU_MEANS: [[f64; 2]; 3] = [[-3.0, 0.0], [0.0, 0.0], [2.0, 0.0]];

pub(super) fn keys(config: &ExperimentConfig) -> Vec<RunKey> {
    let (cells, oem_variants, other_variants) = match config.scenario {
        Scenario::ThreeMixture => (
            product(&[config.mu_grid().len(), config.noise_grid().len(), config.n_grid().len()]),
            config.weight_draws() + 1,
            1,
        ),
        Scenario::XuComparison => (product(&[config.rho_grid().len()]), config.random_starts(), config.random_starts()),
        _ => unreachable!("not a three-component scenario"),
    };
    let mut keys = Vec::new();
    for cell in cells {
        for dataset in 0..config.datasets() {
            for &engine in &config.engines {
                let variants = if engine == Engine::Overparameterized { oem_variants } else { other_variants };
                for variant in 0..variants {
                    keys.push(RunKey { scenario: config.scenario, engine, cell: cell.clone(), dataset, variant });
                }
            }
        }
    }
    keys
}

fn random_simplex(seed: u64, k: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    Array1::from_iter(draws.into_iter().map(|d| d / total))
}

pub(super) fn run(config: &ExperimentConfig, key: &RunKey) -> Result<JobOutput> {
    let sid = config.scenario.id();
    match config.scenario {
        Scenario::ThreeMixture => {
            let mu = config.mu_grid()[key.cell[0]];
            let noise = config.noise_grid()[key.cell[1]];
            let n = config.n_grid()[key.cell[2]];
            let data_seed = derive(config.seed, &[sid, DATA_TAG, key.cell[0] as u64, key.cell[2] as u64, key.dataset as u64]);
            let uniform = Array1::from_elem(3, 1.0 / 3.0);
            let truth_means = array![[-mu], [0.0], [mu]];
            let truth = MixtureModel::isotropic(uniform.clone(), truth_means.clone(), 1.0)?;
            let data = sample(&truth, n, data_seed)?;
            // Mean corruption is shared by every engine and weight draw.
            let mean_seed = derive(
                config.seed,
                &[sid, INIT_TAG, key.cell[0] as u64, key.cell[1] as u64, key.cell[2] as u64, key.dataset as u64],
            );
            let mut rng = ChaCha8Rng::seed_from_u64(mean_seed);
            let start_means = truth_means.mapv(|m| m + noise.sqrt() * rng.sample::<f64, _>(StandardNormal));
            let weights = if key.engine == Engine::Overparameterized && key.variant > 0 {
                random_simplex(init_seed(config, key, WEIGHT_TAG), 3)
            } else {
                uniform.clone()
            };
            let start = MixtureModel::isotropic(weights, start_means, 1.0)?;
            let atoms = DiscreteMixture::new(truth_means, uniform)?;
            let ecfg = config.engine_config(key.engine);
            let (trace, _, mut metrics) = fit_and_score(config, &start, &data, &ecfg, &atoms)?;
            append_mode_errors(config, key.engine, &atoms, trace.final_model(), &mut metrics)?;
            let params = vec![("mu", mu), ("noise_variance", noise), ("n", n as f64)];
            Ok(finish(key, data_seed, mean_seed, params, metrics, trace))
        }
        Scenario::XuComparison => {
            let rho = config.rho_grid()[key.cell[0]];
            let n = config.sample_size();
            let data_seed = derive(config.seed, &[sid, DATA_TAG, key.cell[0] as u64, key.dataset as u64]);
            let weights = Array1::from(XU_WEIGHTS.to_vec());
            let means = Array2::from_shape_fn((3, 2), |(k, j)| rho * XU_MEANS[k][j]);
            let truth = MixtureModel::isotropic(weights.clone(), means.clone(), 1.0)?;
            let data = sample(&truth, n, data_seed)?;
            // Random start: three distinct data points, shared by all engines.
            let seed = derive(config.seed, &[sid, INIT_TAG, key.cell[0] as u64, key.dataset as u64, key.variant as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picks = sample_indices(&mut rng, data.len(), 3).into_vec();
            let start_means = data.points().select(ndarray::Axis(0), &picks);
            let start_weights =
                if key.engine == Engine::Overparameterized { Array1::from_elem(3, 1.0 / 3.0) } else { weights.clone() };
            let start = MixtureModel::isotropic(start_weights, start_means, 1.0)?;
            let atoms = DiscreteMixture::new(means, weights)?;
            let ecfg = config.engine_config(key.engine);
            let (trace, _, mut metrics) = fit_and_score(config, &start, &data, &ecfg, &atoms)?;
            append_mode_errors(config, key.engine, &atoms, trace.final_model(), &mut metrics)?;
            Ok(finish(key, data_seed, seed, vec![("rho", rho)], metrics, trace))
        }
        _ => unreachable!("not a three-component scenario"),
    }
}

fn append_mode_errors(
    config: &ExperimentConfig,
    engine: Engine,
    atoms: &DiscreteMixture<f64>,
    model: &MixtureModel<f64>,
    metrics: &mut Vec<(&'static str, f64)>,
) -> Result<()> {
    metrics.push(("final_error_wasserstein", estimation_error(config, engine, atoms, model, ErrorMode::Wasserstein)?));
    metrics.push(("final_error_nearest_center", estimation_error(config, engine, atoms, model, ErrorMode::NearestCenter)?));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{run_experiment, Grids};

    #[test]
    fn simplex_draws_are_valid_and_seeded() {
        let w = random_simplex(5, 3);
        assert!((w.sum() - 1.0).abs() < 1e-15);
        assert!(w.iter().all(|&v| v > 0.0));
        assert_eq!(w, random_simplex(5, 3));
        assert_ne!(w, random_simplex(6, 3));
    }

    #[test]
    fn three_mixture_counts_weight_draws() {
        let cfg = ExperimentConfig {
            n_datasets: Some(2),
            iterations: Some(50),
            grids: Grids { mu: Some(vec![3.0]), noise_variance: Some(vec![0.0, 0.5]), ..Grids::default() },
            ..ExperimentConfig::new(Scenario::ThreeMixture)
        };
        let result = run_experiment(&cfg, Some(1)).unwrap();
        // Per cell and dataset: one vEM, one sEM, five oEM runs.
        assert_eq!(result.rows.len(), 2 * 2 * 7);
        let exact: Vec<f64> = result
            .rows
            .iter()
            .filter(|r| r.param("noise_variance") == Some(0.0) && r.key.engine != Engine::Overparameterized)
            .map(|r| r.metric("final_error").unwrap())
            .collect();
        assert!(exact.iter().all(|&e| e < 0.05), "{exact:?}");
    }

    #[test]
    fn xu_rows_carry_both_error_modes() {
        let cfg = ExperimentConfig {
            n_datasets: Some(1),
            n_samples: Some(300),
            iterations: Some(40),
            grids: Grids { rho: Some(vec![1.0]), random_starts: Some(2), ..Grids::default() },
            ..ExperimentConfig::new(Scenario::XuComparison)
        };
        let result = run_experiment(&cfg, Some(1)).unwrap();
        assert_eq!(result.rows.len(), 3 * 2);
        for r in &result.rows {
            assert!(r.metric("final_error_wasserstein").unwrap().is_finite());
            assert!(r.metric("final_error_nearest_center").unwrap() >= 0.0);
        }
    }
}
