//! The three EM iteration engines and the MAP mean update.
//!
//! All engines share one M-step; they differ only in how responsibilities are
//! formed and whether mixing weights move:
//!
//! | engine | E-step | weights |
//! |--------|--------|---------|
//! | vanilla | posterior under the fixed weights | fixed |
//! | overparameterized | posterior under the current weights | updated |
//! | sinkhorn | entropic transport plan, rescaled to columns summing to one | fixed |

use std::io::Write;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mixture::{nll_from_kernel, posterior_and_nll, Dataset, MixtureModel, Responsibilities};
use crate::scalar::Scalar;
use crate::sinkhorn::{sinkhorn_estep_from, SinkhornSettings};

/// Total responsibility below which a component counts as empty.
pub const DEGENERATE_MASS: f64 = 1e-12;
/// Floor applied to overparameterized-EM weights that collapse.
pub const COLLAPSED_WEIGHT: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Engine {
    #[serde(rename = "vem", alias = "vanilla")]
    Vanilla,
    #[serde(rename = "oem", alias = "overparameterized")]
    Overparameterized,
    #[serde(rename = "sem", alias = "sinkhorn")]
    Sinkhorn,
}

impl Engine {
    pub const ALL: [Engine; 3] = [Engine::Vanilla, Engine::Overparameterized, Engine::Sinkhorn];

    pub fn short_name(self) -> &'static str {
        match self {
            Engine::Vanilla => "vem",
            Engine::Overparameterized => "oem",
            Engine::Sinkhorn => "sem",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "vem" | "vanilla" => Ok(Engine::Vanilla),
            "oem" | "overparameterized" => Ok(Engine::Overparameterized),
            "sem" | "sinkhorn" => Ok(Engine::Sinkhorn),
            other => Err(Error::invalid("engine", format!("unknown engine {other:?}"))),
        }
    }
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

/// How the M-step treats covariances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// Keep the initial covariances.
    Fixed,
    /// Responsibility-weighted scatter per component.
    Full,
    /// One pooled covariance shared by every component.
    Shared,
}

/// Structural constraint on the component means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanTying {
    Free,
    /// Two components with means `θ` and `-θ`; the M-step solves for `θ`.
    Antipodal,
}

/// Prior on one component mean.
#[derive(Debug, Clone, PartialEq)]
pub enum ComponentPrior<T: Scalar> {
    /// Zero prior precision.
    Flat,
    Gaussian { mean: Array1<T>, covariance: Array2<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig<T: Scalar> {
    pub engine: Engine,
    pub covariance: CovarianceMode,
    pub covariance_floor: T,
    pub sinkhorn: SinkhornSettings,
    /// One prior per component; enables the MAP mean update.
    pub mean_prior: Option<Vec<ComponentPrior<T>>>,
    pub tying: MeanTying,
    pub max_iterations: usize,
    /// Cap on accumulated E+M wall time.
    pub time_budget_seconds: Option<f64>,
    /// Stop once no parameter moves by more than this amount in one step.
    pub parameter_tolerance: Option<f64>,
}

impl<T: Scalar> EngineConfig<T> {
    pub fn new(engine: Engine) -> Self {
        Self {
            engine,
            covariance: CovarianceMode::Fixed,
            covariance_floor: T::c(crate::mixture::DEFAULT_COVARIANCE_FLOOR),
            sinkhorn: SinkhornSettings::default(),
            mean_prior: None,
            tying: MeanTying::Free,
            max_iterations: 100,
            time_budget_seconds: None,
            parameter_tolerance: None,
        }
    }

    pub fn with_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn with_covariance(mut self, mode: CovarianceMode) -> Self {
        self.covariance = mode;
        self
    }

    pub fn with_tying(mut self, tying: MeanTying) -> Self {
        self.tying = tying;
        self
    }

    pub fn with_sinkhorn(mut self, settings: SinkhornSettings) -> Self {
        self.sinkhorn = settings;
        self
    }

    pub fn with_prior(mut self, prior: Vec<ComponentPrior<T>>) -> Self {
        self.mean_prior = Some(prior);
        self
    }

    pub fn with_time_budget(mut self, seconds: f64) -> Self {
        self.time_budget_seconds = Some(seconds);
        self
    }

    pub fn with_parameter_tolerance(mut self, tol: f64) -> Self {
        self.parameter_tolerance = Some(tol);
        self
    }

    /// Only the overparameterized engine moves the mixing weights.
    pub fn updates_weights(&self) -> bool {
        self.engine == Engine::Overparameterized
    }

    pub fn updates_covariances(&self) -> bool {
        self.covariance != CovarianceMode::Fixed
    }

    pub fn validate(&self, model: &MixtureModel<T>, data: &Dataset<T>) -> Result<()> {
        if model.dim() != data.dim() {
            return Err(Error::DimensionMismatch { expected: model.dim(), got: data.dim() });
        }
        self.sinkhorn.validate()?;
        if let Some(b) = self.time_budget_seconds {
            if !(b > 0.0) {
                return Err(Error::invalid("time_budget_seconds", "must be positive"));
            }
        }
        if self.tying == MeanTying::Antipodal {
            if model.components() != 2 {
                return Err(Error::invalid("tying", "antipodal means need exactly two components"));
            }
            if self.mean_prior.is_some() {
                return Err(Error::invalid("mean_prior", "not supported with tied means"));
            }
        }
        if let Some(prior) = &self.mean_prior {
            if prior.len() != model.components() {
                return Err(Error::invalid(
                    "mean_prior",
                    format!("expected {} entries, got {}", model.components(), prior.len()),
                ));
            }
            for p in prior {
                if let ComponentPrior::Gaussian { mean, covariance } = p {
                    if mean.len() != model.dim() || covariance.dim() != (model.dim(), model.dim()) {
                        return Err(Error::invalid("mean_prior", "shape does not match model dimension"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of one E-step.
pub(crate) struct EStep<T: Scalar> {
    pub responsibilities: Responsibilities<T>,
    pub nll: Option<T>,
    pub entropic_loss: Option<T>,
    pub row_potentials: Option<Array1<T>>,
}

pub(crate) fn e_step<T: Scalar>(
    model: &MixtureModel<T>,
    data: &Dataset<T>,
    config: &EngineConfig<T>,
    warm: Option<ArrayView1<T>>,
) -> Result<EStep<T>> {
    let kernel = model.log_joint_kernel(data)?;
    match config.engine {
        Engine::Vanilla | Engine::Overparameterized => {
            let (resp, nll) = posterior_and_nll(kernel)?;
            Ok(EStep { responsibilities: resp, nll: Some(nll), entropic_loss: None, row_potentials: None })
        }
        Engine::Sinkhorn => {
            let init = if config.sinkhorn.warm_start { warm } else { None };
            let coupling = sinkhorn_estep_from(kernel.view(), model.weights(), &config.sinkhorn, init)?;
            // Column potentials are the exact column normalizers, so the semi-dual
            // value reduces to `f·a + mean(g)`.
            let n = T::from_usize_lossy(data.len());
            let linear: T = coupling
                .row_potentials
                .iter()
                .zip(model.weights().iter())
                .map(|(&f, &a)| f * a)
                .sum();
            let entropic = linear + coupling.col_potentials.sum() / n;
            let matrix = coupling.plan.mapv(|p| p * n);
            Ok(EStep {
                responsibilities: Responsibilities { matrix },
                nll: None,
                entropic_loss: Some(entropic),
                row_potentials: Some(coupling.row_potentials),
            })
        }
    }
}

/// Responsibility-weighted counts and sums.
fn sufficient_statistics<T: Scalar>(resp: ArrayView2<T>, data: &Dataset<T>) -> (Array1<T>, Array2<T>) {
    let totals = resp.sum_axis(ndarray::Axis(1));
    let sums = resp.dot(&data.points());
    (totals, sums)
}

fn scatter<T: Scalar>(resp: ArrayView1<T>, data: &Dataset<T>, mean: ArrayView1<T>) -> Array2<T> {
    let d = data.dim();
    let mut s = Array2::<T>::zeros((d, d));
    let mut diff = vec![T::zero(); d];
    for (r, y) in resp.iter().zip(data.points().outer_iter()) {
        if *r == T::zero() {
            continue;
        }
        for j in 0..d {
            diff[j] = y[j] - mean[j];
        }
        for a in 0..d {
            let ra = *r * diff[a];
            for b in a..d {
                s[[a, b]] = s[[a, b]] + ra * diff[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            s[[a, b]] = s[[b, a]];
        }
    }
    s
}

/// MAP mean update under independent Gaussian priors on each component mean.
///
/// For component `k` with `N_k = Σ_i r_ki`, `s_k = Σ_i r_ki y_i`, precision
/// `P_k = Σ_k⁻¹` and prior `N(μᵃ_k, Σᵃ_k)`, returns
/// `(Σᵃ_k⁻¹ + N_k P_k)⁻¹ (Σᵃ_k⁻¹ μᵃ_k + P_k s_k)`. A flat prior gives the
/// weighted data mean; an empty component gives its prior mean.
pub fn map_m_step_means<T: Scalar>(
    responsibilities: &Responsibilities<T>,
    data: &Dataset<T>,
    covariances: &[Array2<T>],
    priors: &[ComponentPrior<T>],
) -> Result<Array2<T>> {
    let k = responsibilities.components();
    let d = data.dim();
    if responsibilities.len() != data.len() {
        return Err(Error::DimensionMismatch { expected: data.len(), got: responsibilities.len() });
    }
    if covariances.len() != k || priors.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: covariances.len().min(priors.len()) });
    }
    let (totals, sums) = sufficient_statistics(responsibilities.matrix.view(), data);
    let mut means = Array2::<T>::zeros((k, d));
    for c in 0..k {
        let n_k = totals[c];
        let s_k = sums.row(c);
        let mean = match &priors[c] {
            ComponentPrior::Flat => {
                if !(n_k > T::zero()) {
                    return Err(Error::DegenerateCluster { component: c, mass: n_k.as_f64() });
                }
                s_k.mapv(|v| v / n_k)
            }
            ComponentPrior::Gaussian { mean: prior_mean, covariance: prior_cov } => {
                if n_k == T::zero() {
                    prior_mean.clone()
                } else {
                    let prior_precision = linalg::inverse_spd(prior_cov.view())?;
                    let precision = linalg::inverse_spd(covariances[c].view())?;
                    let combined = &prior_precision + &(&precision * n_k);
                    let rhs = prior_precision.dot(prior_mean) + precision.dot(&s_k);
                    linalg::solve_spd(combined.view(), rhs.view())
                        .map_err(|_| Error::NotPositiveDefinite("combined precision"))?
                }
            }
        };
        means.row_mut(c).assign(&mean);
    }
    Ok(means)
}

/// Shared M-step given responsibilities.
pub(crate) fn m_step<T: Scalar>(
    model: &MixtureModel<T>,
    data: &Dataset<T>,
    resp: &Responsibilities<T>,
    config: &EngineConfig<T>,
) -> Result<MixtureModel<T>> {
    let k = model.components();
    let d = model.dim();
    let n = T::from_usize_lossy(data.len());
    let (totals, sums) = sufficient_statistics(resp.matrix.view(), data);
    let threshold = T::c(DEGENERATE_MASS);

    let mut empty = vec![false; k];
    for c in 0..k {
        if !(totals[c] >= threshold) {
            if config.updates_weights() {
                log::debug!("component {c} collapsed (mass {})", totals[c]);
                empty[c] = true;
            } else {
                return Err(Error::DegenerateCluster { component: c, mass: totals[c].as_f64() });
            }
        }
    }

    let mut means = model.means().to_owned();
    match config.tying {
        MeanTying::Antipodal => {
            let p0 = linalg::inverse_spd(model.covariances()[0].view())?;
            let p1 = linalg::inverse_spd(model.covariances()[1].view())?;
            let lhs = &(&p0 * totals[0]) + &(&p1 * totals[1]);
            let rhs = p0.dot(&sums.row(0)) - p1.dot(&sums.row(1));
            let theta = linalg::solve_spd(lhs.view(), rhs.view())?;
            means.row_mut(0).assign(&theta);
            means.row_mut(1).assign(&theta.mapv(|v| -v));
        }
        MeanTying::Free => {
            if let Some(prior) = &config.mean_prior {
                let map = map_m_step_means(resp, data, model.covariances(), prior)?;
                for c in (0..k).filter(|&c| !empty[c]) {
                    means.row_mut(c).assign(&map.row(c));
                }
            } else {
                for c in (0..k).filter(|&c| !empty[c]) {
                    let n_k = totals[c];
                    means.row_mut(c).assign(&sums.row(c).mapv(|v| v / n_k));
                }
            }
        }
    }

    let covariances = match config.covariance {
        CovarianceMode::Fixed => model.covariances().to_vec(),
        CovarianceMode::Full => (0..k)
            .map(|c| {
                if empty[c] {
                    model.covariances()[c].clone()
                } else {
                    let s = scatter(resp.matrix.row(c), data, means.row(c)) / totals[c];
                    linalg::floor_eigenvalues(s.view(), config.covariance_floor).0
                }
            })
            .collect(),
        CovarianceMode::Shared => {
            let mut pooled = Array2::<T>::zeros((d, d));
            for c in 0..k {
                pooled = pooled + scatter(resp.matrix.row(c), data, means.row(c));
            }
            let pooled = linalg::floor_eigenvalues((pooled / n).view(), config.covariance_floor).0;
            vec![pooled; k]
        }
    };

    let weights = if config.updates_weights() {
        let floor = T::c(COLLAPSED_WEIGHT);
        let mut w = totals.mapv(|t| (t / n).max(floor));
        let total = w.sum();
        w.mapv_inplace(|v| v / total);
        w
    } else {
        model.weights().to_owned()
    };

    Ok(MixtureModel::from_parts_unchecked(weights, means, covariances))
}

/// One E-step followed by one M-step.
pub fn em_step<T: Scalar>(
    model: &MixtureModel<T>,
    data: &Dataset<T>,
    config: &EngineConfig<T>,
) -> Result<MixtureModel<T>> {
    config.validate(model, data)?;
    let e = e_step(model, data, config, None)?;
    m_step(model, data, &e.responsibilities, config)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Termination {
    MaxIterations,
    TimeBudget,
    Converged,
    Degenerate { component: usize, mass: f64 },
}

impl Termination {
    pub fn is_degenerate(&self) -> bool {
        matches!(self, Termination::Degenerate { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord<T: Scalar> {
    /// 1-based iteration count; the model is the state after this many steps.
    pub iteration: usize,
    pub model: MixtureModel<T>,
    pub nll: T,
    pub entropic_loss: Option<T>,
    /// Accumulated E+M wall time.
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace<T: Scalar> {
    pub engine: Engine,
    pub initial_model: MixtureModel<T>,
    pub initial_nll: T,
    pub initial_entropic_loss: Option<T>,
    pub records: Vec<TraceRecord<T>>,
    pub termination: Termination,
}

impl<T: Scalar> FitTrace<T> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_model(&self) -> &MixtureModel<T> {
        self.records.last().map(|r| &r.model).unwrap_or(&self.initial_model)
    }

    pub fn nll_series(&self) -> Vec<T> {
        self.records.iter().map(|r| r.nll).collect()
    }

    pub fn entropic_series(&self) -> Vec<T> {
        self.records.iter().filter_map(|r| r.entropic_loss).collect()
    }

    /// Model after `iteration` steps (0 is the initial model).
    pub fn model_at(&self, iteration: usize) -> Option<&MixtureModel<T>> {
        if iteration == 0 {
            Some(&self.initial_model)
        } else {
            self.records.get(iteration - 1).map(|r| &r.model)
        }
    }

    /// Writes one row per iteration: `iter, nll, entropic_loss, time_ms` and
    /// the flattened weights, means and covariances. `time_ms` is omitted when
    /// `with_time` is false, which makes the output deterministic.
    pub fn write_csv<W: Write>(&self, writer: W, with_time: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let model = &self.initial_model;
        let (k, d) = (model.components(), model.dim());
        let mut header = vec!["iter".to_string(), "nll".into(), "entropic_loss".into()];
        if with_time {
            header.push("time_ms".into());
        }
        header.extend((0..k).map(|c| format!("w{c}")));
        for c in 0..k {
            header.extend((0..d).map(|j| format!("mu{c}_{j}")));
        }
        for c in 0..k {
            for a in 0..d {
                header.extend((0..d).map(|b| format!("cov{c}_{a}{b}")));
            }
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.iteration.to_string(),
                fmt_num(r.nll.as_f64()),
                r.entropic_loss.map(|v| fmt_num(v.as_f64())).unwrap_or_default(),
            ];
            if with_time {
                row.push(format!("{:.3}", r.elapsed_seconds * 1e3));
            }
            row.extend(flatten(&r.model).into_iter().map(fmt_num));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// SHA-256 of the time-free CSV rendering.
    pub fn hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, false).expect("writing to memory succeeds");
        hex::encode(Sha256::digest(&buf))
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:e}")
}

/// Weights, then means, then covariances (row-major).
pub fn flatten<T: Scalar>(model: &MixtureModel<T>) -> Vec<f64> {
    let mut out: Vec<f64> = model.weights().iter().map(|v| v.as_f64()).collect();
    out.extend(model.means().iter().map(|v| v.as_f64()));
    for c in model.covariances() {
        out.extend(c.iter().map(|v| v.as_f64()));
    }
    out
}

fn max_change<T: Scalar>(a: &MixtureModel<T>, b: &MixtureModel<T>) -> f64 {
    flatten(a)
        .into_iter()
        .zip(flatten(b))
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Iterates [`em_step`] until the iteration cap, the time budget or the
/// parameter tolerance stops it.
///
/// A degenerate cluster ends the trace with [`Termination::Degenerate`] rather
/// than an error.
pub fn fit<T: Scalar>(
    model0: &MixtureModel<T>,
    data: &Dataset<T>,
    config: &EngineConfig<T>,
) -> Result<FitTrace<T>> {
    config.validate(model0, data)?;
    let mut elapsed = 0.0;
    let clock = Instant::now();
    let mut estep = e_step(model0, data, config, None)?;
    elapsed += clock.elapsed().as_secs_f64();
    let initial_nll = match estep.nll {
        Some(v) => v,
        None => nll_from_kernel(model0.log_joint_kernel(data)?.view()),
    };
    let mut trace = FitTrace {
        engine: config.engine,
        initial_model: model0.clone(),
        initial_nll,
        initial_entropic_loss: estep.entropic_loss,
        records: Vec::new(),
        termination: Termination::MaxIterations,
    };
    let mut model = model0.clone();
    for iteration in 1..=config.max_iterations {
        let clock = Instant::now();
        let next = match m_step(&model, data, &estep.responsibilities, config) {
            Ok(m) => m,
            Err(Error::DegenerateCluster { component, mass }) => {
                trace.termination = Termination::Degenerate { component, mass };
                return Ok(trace);
            }
            Err(e) => return Err(e),
        };
        let warm = estep.row_potentials.take();
        estep = match e_step(&next, data, config, warm.as_ref().map(|w| w.view())) {
            Ok(e) => e,
            Err(Error::Underflow { point }) => {
                log::debug!("posterior underflow at point {point}");
                return Err(Error::Underflow { point });
            }
            Err(e) => return Err(e),
        };
        elapsed += clock.elapsed().as_secs_f64();
        let nll = match estep.nll {
            Some(v) => v,
            None => nll_from_kernel(next.log_joint_kernel(data)?.view()),
        };
        let change = max_change(&model, &next);
        trace.records.push(TraceRecord {
            iteration,
            model: next.clone(),
            nll,
            entropic_loss: estep.entropic_loss,
            elapsed_seconds: elapsed,
        });
        model = next;
        if let Some(tol) = config.parameter_tolerance {
            if change <= tol {
                trace.termination = Termination::Converged;
                return Ok(trace);
            }
        }
        if let Some(budget) = config.time_budget_seconds {
            if elapsed >= budget {
                trace.termination = Termination::TimeBudget;
                return Ok(trace);
            }
        }
    }
    Ok(trace)
}

#[derive(Serialize)]
struct TraceHeader<'a> {
    engine: Engine,
    covariance: CovarianceMode,
    tying: MeanTying,
    covariance_floor: f64,
    sinkhorn: SinkhornSettings,
    map_prior: bool,
    max_iterations: usize,
    time_budget_seconds: Option<f64>,
    parameter_tolerance: Option<f64>,
    seed: u64,
    iterations: usize,
    termination: &'a Termination,
}

impl<T: Scalar> FitTrace<T> {
    /// JSON header describing the run that produced this trace.
    pub fn header_json(&self, config: &EngineConfig<T>, seed: u64) -> String {
        let header = TraceHeader {
            engine: config.engine,
            covariance: config.covariance,
            tying: config.tying,
            covariance_floor: config.covariance_floor.as_f64(),
            sinkhorn: config.sinkhorn,
            map_prior: config.mean_prior.is_some(),
            max_iterations: config.max_iterations,
            time_budget_seconds: config.time_budget_seconds,
            parameter_tolerance: config.parameter_tolerance,
            seed,
            iterations: self.records.len(),
            termination: &self.termination,
        };
        serde_json::to_string_pretty(&header).expect("plain data serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{sample, vanilla_posterior};
    use crate::sinkhorn::sinkhorn_estep;
    use ndarray::array;

    fn sample_moments(data: &Dataset<f64>) -> (Array1<f64>, Array2<f64>) {
        let n = data.len() as f64;
        let mean = data.points().sum_axis(ndarray::Axis(0)) / n;
        let mut cov = Array2::zeros((data.dim(), data.dim()));
        for y in data.points().outer_iter() {
            let diff = &y - &mean;
            for a in 0..data.dim() {
                for b in 0..data.dim() {
                    cov[[a, b]] += diff[a] * diff[b] / n;
                }
            }
        }
        (mean, cov)
    }

    #[test]
    fn single_component_step_gives_sample_moments_for_every_engine() {
        let truth = MixtureModel::new(array![1.0], array![[1.0, -2.0]], vec![array![[2.0, 0.3], [0.3, 0.5]]]).unwrap();
        let data = sample(&truth, 300, 5).unwrap();
        let start = MixtureModel::isotropic(array![1.0], array![[0.0, 0.0]], 1.0).unwrap();
        let (mean, cov) = sample_moments(&data);
        for engine in Engine::ALL {
            let cfg = EngineConfig::new(engine).with_covariance(CovarianceMode::Full);
            let next = em_step(&start, &data, &cfg).unwrap();
            for j in 0..2 {
                assert!((next.mean(0)[j] - mean[j]).abs() < 1e-10, "{engine}");
            }
            for (x, y) in next.covariances()[0].iter().zip(cov.iter()) {
                assert!((x - y).abs() < 1e-10, "{engine}");
            }
        }
    }

    #[test]
    fn vanilla_step_preserves_symmetry() {
        let base = [0.3, 1.1, 2.4, 0.05, 1.7];
        let data: Dataset<f64> = Dataset::from_values(&base).unwrap().with_reflections();
        let start = MixtureModel::isotropic(array![0.5, 0.5], array![[-0.7], [0.7]], 1.0).unwrap();
        let next = em_step(&start, &data, &EngineConfig::new(Engine::Vanilla)).unwrap();
        assert!((next.mean(0)[0] + next.mean(1)[0]).abs() < 1e-10);
    }

    #[test]
    fn sinkhorn_step_matches_two_stage_oracle() {
        let truth = MixtureModel::symmetric_pair(1.0, 0.7).unwrap();
        let data = sample(&truth, 1000, 2024).unwrap();
        let start = MixtureModel::symmetric_pair(-2.0, 0.7).unwrap();
        let cfg = EngineConfig::new(Engine::Sinkhorn).with_tying(MeanTying::Antipodal);
        let next = em_step(&start, &data, &cfg).unwrap();

        let kernel = start.log_joint_kernel(&data).unwrap();
        let coupling = sinkhorn_estep(kernel.view(), start.weights(), &SinkhornSettings::default()).unwrap();
        let n = data.len() as f64;
        let mut theta = 0.0;
        for i in 0..data.len() {
            let y = data.point(i)[0];
            theta += (coupling.plan[[0, i]] - coupling.plan[[1, i]]) * n * y;
        }
        theta /= n;
        assert!((next.mean(0)[0] - theta).abs() < 1e-12);
        assert!((next.mean(1)[0] + theta).abs() < 1e-12);
    }

    #[test]
    fn tied_vanilla_update_is_mean_of_y_tanh() {
        let data: Dataset<f64> = Dataset::from_values(&[-1.2, 0.4, 0.9, 2.2, -0.1]).unwrap();
        let start = MixtureModel::symmetric_pair(0.6, 0.5).unwrap();
        let cfg = EngineConfig::new(Engine::Vanilla).with_tying(MeanTying::Antipodal);
        let next = em_step(&start, &data, &cfg).unwrap();
        let want: f64 = [-1.2_f64, 0.4, 0.9, 2.2, -0.1].iter().map(|y| y * (0.6 * y).tanh()).sum::<f64>() / 5.0;
        assert!((next.mean(0)[0] - want).abs() < 1e-13);
    }

    #[test]
    fn fixed_point_trace_has_one_record() {
        let data: Dataset<f64> = Dataset::from_values(&[0.2, -1.0, 1.5, 0.7]).unwrap();
        let start = MixtureModel::isotropic(array![1.0], array![[0.0]], 1.0).unwrap();
        let cfg = EngineConfig::new(Engine::Vanilla).with_covariance(CovarianceMode::Full);
        let fitted = em_step(&start, &data, &cfg).unwrap();
        let trace = fit(&fitted, &data, &cfg.clone().with_parameter_tolerance(1e-10)).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(trace.termination, Termination::Converged);
        assert!(max_change(trace.final_model(), &fitted) < 1e-10);
    }

    #[test]
    fn map_means_reduce_to_special_cases() {
        let data: Dataset<f64> = Dataset::new(array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]], 0).unwrap();
        let resp = Responsibilities { matrix: array![[0.2, 0.5, 0.9], [0.0, 0.0, 0.0]] };
        let covs = vec![Array2::eye(2), Array2::eye(2)];
        let priors = vec![
            ComponentPrior::Flat,
            ComponentPrior::Gaussian { mean: array![7.0, -3.0], covariance: Array2::eye(2) * 0.5 },
        ];
        let means = map_m_step_means(&resp, &data, &covs, &priors).unwrap();
        let total = 1.6;
        assert!((means[[0, 0]] - (0.2 + 1.5 + 0.45) / total).abs() < 1e-14);
        assert!((means[[0, 1]] - (0.4 - 0.5 + 0.45) / total).abs() < 1e-14);
        assert_eq!(means.row(1), array![7.0, -3.0]);
    }

    #[test]
    fn vanilla_rejects_empty_component_but_overparameterized_clamps() {
        let data: Dataset<f64> = Dataset::from_values(&[0.0, 0.1, -0.1]).unwrap();
        let start = MixtureModel::isotropic(array![0.5, 0.5], array![[0.0], [400.0]], 1.0).unwrap();
        let err = em_step(&start, &data, &EngineConfig::new(Engine::Vanilla)).unwrap_err();
        assert!(matches!(err, Error::DegenerateCluster { component: 1, .. }));
        let next = em_step(&start, &data, &EngineConfig::new(Engine::Overparameterized)).unwrap();
        assert!(next.weights()[1] >= 1e-10 * 0.999);
        assert!((next.weights().sum() - 1.0).abs() < 1e-12);
        assert_eq!(next.mean(1)[0], 400.0);

        let trace = fit(&start, &data, &EngineConfig::new(Engine::Vanilla)).unwrap();
        assert!(trace.termination.is_degenerate());
        assert!(trace.is_empty());
    }

    #[test]
    fn overparameterized_weights_are_mean_posteriors() {
        let data: Dataset<f64> = Dataset::from_values(&[-2.0, -1.5, 0.3, 1.0, 2.5]).unwrap();
        let start = MixtureModel::isotropic(array![0.3, 0.7], array![[-1.0], [1.0]], 1.0).unwrap();
        let next = em_step(&start, &data, &EngineConfig::new(Engine::Overparameterized)).unwrap();
        let post = vanilla_posterior(&start, &data).unwrap();
        let want = post.totals() / 5.0;
        for k in 0..2 {
            assert!((next.weights()[k] - want[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn shared_covariance_is_pooled() {
        let data: Dataset<f64> = Dataset::from_values(&[-2.0, -1.0, 1.0, 2.0]).unwrap();
        let start = MixtureModel::isotropic(array![0.5, 0.5], array![[-1.5], [1.5]], 0.01).unwrap();
        let cfg = EngineConfig::new(Engine::Vanilla).with_covariance(CovarianceMode::Shared);
        let next = em_step(&start, &data, &cfg).unwrap();
        assert!((next.covariances()[0][[0, 0]] - 0.25).abs() < 1e-9);
        assert_eq!(next.covariances()[0], next.covariances()[1]);
    }

    #[test]
    fn trace_serializes_with_and_without_time() {
        let data: Dataset<f64> = Dataset::from_values(&[-1.0, 0.5, 1.2]).unwrap();
        let start = MixtureModel::symmetric_pair(0.5, 0.5).unwrap();
        let cfg = EngineConfig::new(Engine::Sinkhorn).with_iterations(3);
        let trace = fit(&start, &data, &cfg).unwrap();
        let mut with = Vec::new();
        trace.write_csv(&mut with, true).unwrap();
        let text = String::from_utf8(with).unwrap();
        assert!(text.starts_with("iter,nll,entropic_loss,time_ms,w0,w1,mu0_0,mu1_0,cov0_00,cov1_00"));
        assert_eq!(text.lines().count(), 4);
        assert_eq!(trace.hash(), fit(&start, &data, &cfg).unwrap().hash());
        let header: serde_json::Value = serde_json::from_str(&trace.header_json(&cfg, 9)).unwrap();
        assert_eq!(header["engine"], "sem");
        assert_eq!(header["termination"]["reason"], "max_iterations");
    }
}
