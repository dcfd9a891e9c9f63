use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::em::{Engine, EngineConfig, MeanTying};
use crate::error::{Error, Result};
use crate::sinkhorn::SinkhornSettings;

use super::segmentation::SegmentationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// `α* N(θ*, 1) + (1−α*) N(−θ*, 1)` with one unknown mean.
    AsymmetricTwo,
    /// Equal weights, truth `(−1, 1)`, two free means.
    EqualTwo,
    /// Two free means with unequal weights and a variance grid.
    GeneralTwo,
    /// Three equally weighted components at `(−μ, 0, μ)`.
    ThreeMixture,
    /// Scaled two-dimensional three-component benchmark.
    XuComparison,
    /// Synthetic six-dimensional pixel segmentation with an atlas prior.
    Segmentation,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::AsymmetricTwo,
        Scenario::EqualTwo,
        Scenario::GeneralTwo,
        Scenario::ThreeMixture,
        Scenario::XuComparison,
        Scenario::Segmentation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::AsymmetricTwo => "asymmetric_two",
            Scenario::EqualTwo => "equal_two",
            Scenario::GeneralTwo => "general_two",
            Scenario::ThreeMixture => "three_mixture",
            Scenario::XuComparison => "xu_comparison",
            Scenario::Segmentation => "segmentation",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::invalid("scenario", format!("unknown scenario {name:?}")))
    }

    pub(crate) fn id(self) -> u64 {
        self as u64 + 1
    }
}

/// How estimation error is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// Squared 2-Wasserstein distance between true and estimated mixing measures.
    #[default]
    Wasserstein,
    /// Mass-weighted squared distance from each true mean to its nearest estimate.
    NearestCenter,
}

/// Parameter grids. Unset grids take the scenario's default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grids {
    pub alpha_star: Option<Vec<f64>>,
    /// Initial values; for two free means, both axes.
    pub theta0: Option<Vec<f64>>,
    pub theta2_star: Option<Vec<f64>>,
    pub sigma2_star: Option<Vec<f64>>,
    pub mu: Option<Vec<f64>>,
    pub noise_variance: Option<Vec<f64>>,
    pub rho: Option<Vec<f64>>,
    /// Sample sizes; overrides `n_samples` when set.
    pub n: Option<Vec<usize>>,
    /// Random initial-weight draws for the overparameterized engine.
    pub weight_draws: Option<usize>,
    /// Random starts per dataset.
    pub random_starts: Option<usize>,
}

fn linspace(lo: f64, hi: f64, len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![lo];
    }
    (0..len).map(|i| lo + (hi - lo) * i as f64 / (len - 1) as f64).collect()
}

/// Largest `α*` used on default grids; `α* = 1` leaves one component empty.
pub const ALPHA_CAP: f64 = 0.995;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub engines: Vec<Engine>,
    pub seed: u64,
    pub n_samples: Option<usize>,
    pub n_datasets: Option<usize>,
    pub iterations: Option<usize>,
    /// `None` runs both covariance variants where a scenario has them.
    pub covariance_update: Option<bool>,
    pub error_mode: ErrorMode,
    pub output_dir: Option<PathBuf>,
    pub grids: Grids,
    /// Inner solver settings; `None` picks the scenario default.
    pub sinkhorn: Option<SinkhornSettings>,
    /// Stop a fit once no parameter moves more than this in one iteration.
    pub parameter_tolerance: Option<f64>,
    /// Draw half the sample and append its reflection when the true law is
    /// symmetric about the origin.
    pub antithetic: bool,
    pub entropic_regularization: f64,
    pub entropic_iterations: usize,
    pub convergence_factor: f64,
    pub segmentation: SegmentationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::AsymmetricTwo,
            engines: Engine::ALL.to_vec(),
            seed: 0,
            n_samples: None,
            n_datasets: None,
            iterations: None,
            covariance_update: None,
            error_mode: ErrorMode::Wasserstein,
            output_dir: None,
            grids: Grids::default(),
            sinkhorn: None,
            parameter_tolerance: Some(1e-12),
            antithetic: true,
            entropic_regularization: 0.1,
            entropic_iterations: 500,
            convergence_factor: 1.5,
            segmentation: SegmentationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self { scenario, ..Self::default() }
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("plain data serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.engines.is_empty() {
            return Err(Error::invalid("engines", "at least one engine is required"));
        }
        let mut engines = self.engines.clone();
        engines.sort();
        engines.dedup();
        if engines.len() != self.engines.len() {
            return Err(Error::invalid("engines", "duplicate engine"));
        }
        self.sinkhorn_settings().validate()?;
        if matches!(self.n_samples, Some(0)) || matches!(self.n_datasets, Some(0)) || matches!(self.iterations, Some(0)) {
            return Err(Error::invalid("n_samples", "counts must be positive"));
        }
        if !(self.entropic_regularization > 0.0) || self.entropic_iterations == 0 {
            return Err(Error::invalid("entropic_regularization", "must be positive"));
        }
        if !(self.convergence_factor > 0.0) {
            return Err(Error::invalid("convergence_factor", "must be positive"));
        }
        let g = &self.grids;
        for (name, grid) in [
            ("grids.alpha_star", &g.alpha_star),
            ("grids.theta0", &g.theta0),
            ("grids.theta2_star", &g.theta2_star),
            ("grids.sigma2_star", &g.sigma2_star),
            ("grids.mu", &g.mu),
            ("grids.noise_variance", &g.noise_variance),
            ("grids.rho", &g.rho),
        ] {
            if let Some(values) = grid {
                if values.is_empty() {
                    return Err(Error::invalid(name, "grid must not be empty"));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(name, "grid values must be finite"));
                }
            }
        }
        if let Some(a) = &g.alpha_star {
            if a.iter().any(|&v| !(0.0..1.0).contains(&v) || v == 0.0) {
                return Err(Error::invalid("grids.alpha_star", "values must lie in (0, 1)"));
            }
        }
        if let Some(s) = &g.sigma2_star {
            if s.iter().any(|&v| v <= 0.0) {
                return Err(Error::invalid("grids.sigma2_star", "variances must be positive"));
            }
        }
        if let Some(s) = &g.noise_variance {
            if s.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid("grids.noise_variance", "variances must be nonnegative"));
            }
        }
        if let Some(n) = &g.n {
            if n.is_empty() || n.contains(&0) {
                return Err(Error::invalid("grids.n", "sample sizes must be positive"));
            }
        }
        if matches!(g.random_starts, Some(0)) {
            return Err(Error::invalid("grids.random_starts", "must be positive"));
        }
        self.segmentation.validate()?;
        Ok(())
    }

    pub fn alpha_grid(&self) -> Vec<f64> {
        self.grids.alpha_star.clone().unwrap_or_else(|| match self.scenario {
            Scenario::GeneralTwo => linspace(0.5, 0.95, 10),
            _ => linspace(0.5, 1.0, 51).into_iter().map(|a| a.min(ALPHA_CAP)).collect(),
        })
    }

    pub fn theta0_grid(&self) -> Vec<f64> {
        self.grids.theta0.clone().unwrap_or_else(|| match self.scenario {
            Scenario::GeneralTwo => linspace(-2.0, 2.0, 6),
            _ => linspace(-2.0, 2.0, 26),
        })
    }

    pub fn theta2_grid(&self) -> Vec<f64> {
        self.grids.theta2_star.clone().unwrap_or_else(|| vec![-0.5, 0.0, 0.5, 1.0])
    }

    pub fn sigma2_grid(&self) -> Vec<f64> {
        self.grids.sigma2_star.clone().unwrap_or_else(|| vec![0.1, 0.25, 0.5, 1.0])
    }

    pub fn mu_grid(&self) -> Vec<f64> {
        self.grids.mu.clone().unwrap_or_else(|| vec![0.5, 1.0, 2.0, 3.0])
    }

    pub fn noise_grid(&self) -> Vec<f64> {
        self.grids.noise_variance.clone().unwrap_or_else(|| vec![0.0, 0.25, 0.5, 0.75, 1.0])
    }

    pub fn rho_grid(&self) -> Vec<f64> {
        self.grids.rho.clone().unwrap_or_else(|| vec![1.0, 0.75, 0.5, 0.25])
    }

    pub fn n_grid(&self) -> Vec<usize> {
        self.grids.n.clone().unwrap_or_else(|| vec![self.sample_size()])
    }

    pub fn weight_draws(&self) -> usize {
        self.grids.weight_draws.unwrap_or(4)
    }

    pub fn random_starts(&self) -> usize {
        self.grids.random_starts.unwrap_or(5)
    }

    pub fn sample_size(&self) -> usize {
        self.n_samples.unwrap_or(match self.scenario {
            Scenario::ThreeMixture => 500,
            Scenario::Segmentation => self.segmentation.n_pixels,
            _ => 1000,
        })
    }

    pub fn datasets(&self) -> usize {
        self.n_datasets.unwrap_or(match self.scenario {
            Scenario::EqualTwo => 1,
            Scenario::ThreeMixture | Scenario::XuComparison | Scenario::Segmentation => 20,
            _ => 10,
        })
    }

    pub fn max_iterations(&self) -> usize {
        self.iterations.unwrap_or(match self.scenario {
            Scenario::ThreeMixture | Scenario::XuComparison => 1000,
            Scenario::Segmentation => 100_000,
            _ => 2000,
        })
    }

    /// Warm-started with an early stop everywhere; segmentation keeps the
    /// 200-sweep cap so the inner solver does not dominate the time budget.
    pub fn sinkhorn_settings(&self) -> SinkhornSettings {
        self.sinkhorn.unwrap_or(SinkhornSettings {
            max_iterations: if self.scenario == Scenario::Segmentation { 200 } else { 1000 },
            marginal_tolerance: 1e-12,
            warm_start: true,
        })
    }

    pub fn covariance_variants(&self) -> Vec<bool> {
        match self.covariance_update {
            Some(flag) => vec![flag],
            None => vec![false, true],
        }
    }

    pub(crate) fn engine_config(&self, engine: Engine) -> EngineConfig<f64> {
        let mut cfg = EngineConfig::new(engine)
            .with_iterations(self.max_iterations())
            .with_sinkhorn(self.sinkhorn_settings())
            .with_tying(MeanTying::Free);
        cfg.parameter_tolerance = self.parameter_tolerance;
        cfg
    }

    /// Notes on how this harness departs from a literal reading of the protocol.
    pub fn deviations(&self) -> Vec<&'static str> {
        let mut notes = vec![
            "initial-value grid read as [-2, 2]",
            "alpha_star = 1 replaced by 0.995 on default grids",
            "fits stop early once parameters move less than parameter_tolerance",
        ];
        match self.scenario {
            Scenario::ThreeMixture => notes.push("default sample size 500"),
            Scenario::Segmentation => {
                notes.push("synthetic atlas replaces the real imaging data");
                notes.push("wall-clock budget makes trace lengths machine dependent");
            }
            _ => {}
        }
        if self.antithetic {
            notes.push("reflection-symmetric truths use antithetic (reflected) samples");
        }
        notes
    }
}
