//! Configuration-driven reproduction of the benchmark experiments.
//!
//! Every scenario enumerates [`RunKey`]s, runs each key independently (in a
//! rayon pool) and writes rows sorted by key, so outputs do not depend on
//! scheduling. A key alone is enough to rerun one run via [`replay`].

mod config;
mod output;
pub mod seeds;
pub mod segmentation;
mod three_component;
mod two_component;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::em::{Engine, FitTrace};
use crate::error::{Error, Result};
use crate::metrics::{nearest_center_error, w2_squared_entropic, w2_squared_exact, DiscreteMixture};
use crate::mixture::MixtureModel;

pub use config::{ErrorMode, ExperimentConfig, Grids, Scenario};
pub use output::{summarize, write_outputs, OutputFiles, SummaryRow};
pub use segmentation::{
    generate_segmentation_data, AtlasPrior, AtlasSpec, AveragedMap, CenterInit, CovarianceInit, Matching, ResponsibilityMap,
    SegmentationConfig, SegmentationSetup,
};

/// Address of a single run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunKey {
    pub scenario: Scenario,
    pub engine: Engine,
    /// Grid indices, in the scenario's documented order.
    pub cell: Vec<usize>,
    pub dataset: usize,
    /// Extra replicate index (initial-weight draw, random start, ...).
    pub variant: usize,
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell: Vec<String> = self.cell.iter().map(|c| c.to_string()).collect();
        write!(
            f,
            "{}/{}/{}/d{}/v{}",
            self.scenario.name(),
            self.engine.short_name(),
            cell.join("."),
            self.dataset,
            self.variant
        )
    }
}

impl FromStr for RunKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("malformed run key {s:?}"));
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() != 5 {
            return Err(bad());
        }
        let scenario = Scenario::parse(parts[0])?;
        let engine = Engine::parse(parts[1])?;
        let cell = if parts[2].is_empty() {
            Vec::new()
        } else {
            parts[2].split('.').map(|c| c.parse().map_err(|_| bad())).collect::<Result<_>>()?
        };
        let dataset = parts[3].strip_prefix('d').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let variant = parts[4].strip_prefix('v').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        Ok(Self { scenario, engine, cell, dataset, variant })
    }
}

/// One output row: identifiers, cell parameters and measured metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub key: RunKey,
    pub data_seed: u64,
    pub init_seed: u64,
    pub params: Vec<(&'static str, f64)>,
    pub metrics: Vec<(&'static str, f64)>,
    pub termination: String,
    pub trace_hash: String,
}

impl RunRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

/// A finished run: its row, its trace and any per-run map data.
#[derive(Debug, Clone)]
pub struct JobOutput {
    pub row: RunRow,
    pub trace: FitTrace<f64>,
    /// Segmentation only: per-component mean responsibility on a spatial grid.
    pub map: Option<segmentation::ResponsibilityMap>,
}

/// All rows of one experiment plus aggregated responsibility maps.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub rows: Vec<RunRow>,
    pub maps: Vec<segmentation::AveragedMap>,
}

impl ExperimentResult {
    pub fn rows_for(&self, engine: Engine) -> impl Iterator<Item = &RunRow> {
        self.rows.iter().filter(move |r| r.key.engine == engine)
    }
}

/// Every run key of the configured experiment.
pub fn run_keys(config: &ExperimentConfig) -> Result<Vec<RunKey>> {
    config.validate()?;
    let mut keys = match config.scenario {
        Scenario::AsymmetricTwo | Scenario::EqualTwo | Scenario::GeneralTwo => two_component::keys(config),
        Scenario::ThreeMixture | Scenario::XuComparison => three_component::keys(config),
        Scenario::Segmentation => segmentation::keys(config),
    };
    keys.sort();
    Ok(keys)
}

/// Runs exactly one key.
pub fn replay(config: &ExperimentConfig, key: &RunKey) -> Result<JobOutput> {
    config.validate()?;
    if key.scenario != config.scenario {
        return Err(Error::invalid("key", format!("key belongs to scenario {}", key.scenario.name())));
    }
    if !run_keys(config)?.contains(key) {
        return Err(Error::invalid("key", format!("{key} is not part of this configuration")));
    }
    run_job(config, key)
}

fn run_job(config: &ExperimentConfig, key: &RunKey) -> Result<JobOutput> {
    match key.scenario {
        Scenario::AsymmetricTwo | Scenario::EqualTwo | Scenario::GeneralTwo => two_component::run(config, key),
        Scenario::ThreeMixture | Scenario::XuComparison => three_component::run(config, key),
        Scenario::Segmentation => segmentation::run(config, key),
    }
}

/// Runs the whole experiment with `jobs` worker threads.
///
/// Segmentation defaults to one worker so the wall-clock budget race is fair.
pub fn run_experiment(config: &ExperimentConfig, jobs: Option<usize>) -> Result<ExperimentResult> {
    let keys = run_keys(config)?;
    let threads = jobs.unwrap_or(match config.scenario {
        Scenario::Segmentation => 1,
        _ => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid("jobs", e.to_string()))?;
    let outputs: Vec<(RunRow, Option<segmentation::ResponsibilityMap>)> = pool.install(|| {
        keys.par_iter()
            .map(|key| run_job(config, key).map(|out| (out.row, out.map)))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::with_capacity(outputs.len());
    let mut maps = Vec::new();
    for (row, map) in outputs {
        if let Some(m) = map {
            maps.push((row.key.clone(), m));
        }
        rows.push(row);
    }
    rows.sort_by(|a, b| a.key.cmp(&b.key));
    let maps = segmentation::average_maps(maps);
    Ok(ExperimentResult { config: config.clone(), rows, maps })
}

/// Estimation error of `model` against the true atoms, routed by engine.
///
/// Wasserstein mode uses the exact distance for engines with fixed weights and
/// the entropic approximation for the overparameterized engine, whose weights
/// drift and may collapse.
pub(crate) fn estimation_error(
    config: &ExperimentConfig,
    engine: Engine,
    truth: &DiscreteMixture<f64>,
    model: &MixtureModel<f64>,
    mode: ErrorMode,
) -> Result<f64> {
    match mode {
        ErrorMode::Wasserstein => {
            let estimate = DiscreteMixture::from_model(model);
            if engine == Engine::Overparameterized {
                w2_squared_entropic(truth, &estimate, config.entropic_regularization, config.entropic_iterations)
            } else {
                w2_squared_exact(truth, &estimate)
            }
        }
        ErrorMode::NearestCenter => nearest_center_error(truth, model.means()),
    }
}

/// Errors of the initial model and of every iterate.
pub(crate) fn error_series(
    config: &ExperimentConfig,
    trace: &FitTrace<f64>,
    truth: &DiscreteMixture<f64>,
    mode: ErrorMode,
) -> Result<Vec<f64>> {
    (0..=trace.len())
        .map(|t| estimation_error(config, trace.engine, truth, trace.model_at(t).expect("index in range"), mode))
        .collect()
}

/// `errors[t]`, or the last entry when the run stopped before `t`.
pub(crate) fn error_at(errors: &[f64], t: usize) -> f64 {
    errors[t.min(errors.len() - 1)]
}
