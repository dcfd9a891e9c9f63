//! Population-limit dynamics of the symmetric two-component model
//! `q_θ = α* N(θ, 1) + (1 − α*) N(−θ, 1)` in one dimension.
//!
//! Expectations run against the true law `q_{θ*}` by quadrature, one Gaussian
//! component at a time. Two scalar functions drive everything:
//!
//! * `F(θ, α) = E[y · tanh(θy + ½ logit α)]`, the mean update;
//! * `G(θ, α) = E[σ(2θy + logit α)]`, the first-component responsibility mass.
//!
//! Derivatives follow the log-likelihood sign convention: `F(θ, α) − θ` is the
//! derivative of the expected log-likelihood, so the loss gradient is its
//! negative and stationary points are the fixed points of `θ ↦ F`.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::em::Engine;
use crate::error::{Error, Result};
use crate::quadrature::{gauss_hermite, gaussian_expectation, QuadratureRule};
use crate::scalar::{log_add_exp, sigmoid, Scalar};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// True parameters and numerical settings for the one-dimensional model.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec<T: Scalar> {
    pub theta_star: T,
    pub alpha_star: T,
    /// Node count of the Gauss–Hermite rule when that rule is selected.
    pub quadrature_nodes: usize,
    pub rule: QuadratureRule,
    pub alpha_root_tolerance: f64,
    hermite: Option<Arc<(Vec<f64>, Vec<f64>)>>,
}

impl<T: Scalar> PopulationSpec<T> {
    pub fn new(theta_star: T, alpha_star: T) -> Result<Self> {
        let spec = Self {
            theta_star,
            alpha_star,
            quadrature_nodes: 201,
            rule: QuadratureRule::default(),
            alpha_root_tolerance: 1e-12,
            hermite: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_rule(mut self, rule: QuadratureRule) -> Self {
        self.hermite = match rule {
            QuadratureRule::GaussHermite { nodes } => {
                self.quadrature_nodes = nodes;
                Some(Arc::new(gauss_hermite(nodes)))
            }
            QuadratureRule::Adaptive { .. } => None,
        };
        self.rule = rule;
        self
    }

    pub fn with_root_tolerance(mut self, tol: f64) -> Self {
        self.alpha_root_tolerance = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_star > T::zero()) || !self.theta_star.is_finite() {
            return Err(Error::invalid("theta_star", "must be a positive finite number"));
        }
        if !(self.alpha_star >= T::c(0.5) && self.alpha_star < T::one()) {
            return Err(Error::invalid("alpha_star", "must lie in [0.5, 1)"));
        }
        if !(self.alpha_root_tolerance > 0.0) {
            return Err(Error::invalid("alpha_root_tolerance", "must be positive"));
        }
        if let QuadratureRule::GaussHermite { nodes } = self.rule {
            if nodes == 0 {
                return Err(Error::invalid("quadrature_nodes", "must be positive"));
            }
        }
        Ok(())
    }

    /// `E[f(Y)]` under the true law.
    pub fn expectation<F: Fn(T) -> T>(&self, f: F, breaks: &[T]) -> T {
        let hermite = self.hermite.as_deref();
        let upper = gaussian_expectation(&f, self.theta_star, breaks, &self.rule, hermite);
        let lower = gaussian_expectation(&f, -self.theta_star, breaks, &self.rule, hermite);
        self.alpha_star * upper + (T::one() - self.alpha_star) * lower
    }
}

fn logit<T: Scalar>(alpha: T) -> T {
    (alpha / (T::one() - alpha)).ln()
}

/// Point where `σ(2θy + logit α)` crosses one half.
fn transition<T: Scalar>(theta: T, alpha: T) -> Vec<T> {
    let y0 = -logit(alpha) / (T::c(2.0) * theta);
    if y0.is_finite() {
        vec![y0]
    } else {
        Vec::new()
    }
}

/// `F(θ, α) = E[y (αe^{θy} − (1−α)e^{−θy}) / (αe^{θy} + (1−α)e^{−θy})]`.
pub fn big_f<T: Scalar>(spec: &PopulationSpec<T>, theta: T, alpha: T) -> T {
    let shift = logit(alpha) * T::c(0.5);
    spec.expectation(|y| y * (theta * y + shift).tanh(), &transition(theta, alpha))
}

/// `G(θ, α) = E[αe^{θy} / (αe^{θy} + (1−α)e^{−θy})]`.
pub fn big_g<T: Scalar>(spec: &PopulationSpec<T>, theta: T, alpha: T) -> T {
    let shift = logit(alpha);
    spec.expectation(|y| sigmoid(T::c(2.0) * theta * y + shift), &transition(theta, alpha))
}

/// The tilted weight `α(θ)`: the root of `G(θ, α) = α*` in `(0, 1)`, by bisection.
pub fn tilted_alpha<T: Scalar>(spec: &PopulationSpec<T>, theta: T) -> Result<T> {
    let target = spec.alpha_star;
    let tol = T::c(spec.alpha_root_tolerance);
    let (mut lo, mut hi) = (T::zero(), T::one());
    for _ in 0..400 {
        let mid = (lo + hi) * T::c(0.5);
        if hi - lo <= tol || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        let g = big_g(spec, theta, mid);
        if !g.is_finite() {
            return Err(Error::Bracket(format!("G({theta}, {mid}) is not finite")));
        }
        if g < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Bracket(format!("no convergence for θ = {theta}")))
}

/// One population step of Sinkhorn EM: `F(θ, α(θ))`.
pub fn sem_population_step<T: Scalar>(spec: &PopulationSpec<T>, theta: T) -> Result<T> {
    Ok(big_f(spec, theta, tilted_alpha(spec, theta)?))
}

/// One population step of vanilla EM: `F(θ, α*)`.
pub fn vem_population_step<T: Scalar>(spec: &PopulationSpec<T>, theta: T) -> T {
    big_f(spec, theta, spec.alpha_star)
}

/// Population iterates `θ⁰, θ¹, …, θ^steps` of the given engine.
///
/// Only the vanilla and Sinkhorn engines have a one-parameter population map.
pub fn population_iterates<T: Scalar>(
    spec: &PopulationSpec<T>,
    engine: Engine,
    theta0: T,
    steps: usize,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(theta0);
    let mut theta = theta0;
    for _ in 0..steps {
        theta = match engine {
            Engine::Vanilla => vem_population_step(spec, theta),
            Engine::Sinkhorn => sem_population_step(spec, theta)?,
            Engine::Overparameterized => {
                return Err(Error::invalid("engine", "no one-parameter population map for oem"))
            }
        };
        out.push(theta);
    }
    Ok(out)
}

/// `F(θ, α) − θ`: derivative of the expected log-likelihood at weight `α`.
pub fn population_nll_derivative<T: Scalar>(spec: &PopulationSpec<T>, theta: T, alpha: T) -> T {
    big_f(spec, theta, alpha) - theta
}

/// `F(θ, α(θ)) − θ`: derivative of the negated entropic loss, by the envelope
/// identity.
pub fn population_entropic_loss_derivative<T: Scalar>(spec: &PopulationSpec<T>, theta: T) -> Result<T> {
    Ok(big_f(spec, theta, tilted_alpha(spec, theta)?) - theta)
}

/// Expected negative log-likelihood of the model with weight `α` and mean `θ`.
pub fn population_nll<T: Scalar>(spec: &PopulationSpec<T>, theta: T, alpha: T) -> T {
    let (la, lb) = (alpha.ln(), (T::one() - alpha).ln());
    let mixed = spec.expectation(|y| log_add_exp(la + theta * y, lb - theta * y), &transition(theta, alpha));
    let ts = spec.theta_star;
    T::c(HALF_LN_2PI) + (T::one() + ts * ts) * T::c(0.5) + theta * theta * T::c(0.5) - mixed
}

fn kl_bernoulli<T: Scalar>(p: T, q: T) -> T {
    let term = |a: T, b: T| if a == T::zero() { T::zero() } else { a * (a / b).ln() };
    term(p, q) + term(T::one() - p, T::one() - q)
}

/// Population entropic loss `L(θ)` and negative log-likelihood `ℓ(θ)`.
///
/// `L(θ) = ℓ(θ, α(θ)) − KL(α* ‖ α(θ))`, the semi-dual value at the optimal
/// tilt, so `L ≥ ℓ` with equality at `θ*`.
pub fn population_losses<T: Scalar>(spec: &PopulationSpec<T>, theta: T) -> Result<(T, T)> {
    let alpha = tilted_alpha(spec, theta)?;
    let entropic = population_nll(spec, theta, alpha) - kl_bernoulli(spec.alpha_star, alpha);
    Ok((entropic, population_nll(spec, theta, spec.alpha_star)))
}

/// Second derivatives of both losses at `θ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curvatures<T> {
    pub entropic: T,
    pub nll: T,
}

fn richardson<T: Scalar, D: Fn(T) -> Result<T>>(d: D, theta: T, h: T) -> Result<T> {
    let central = |step: T| -> Result<T> { Ok((d(theta + step)? - d(theta - step)?) / (T::c(2.0) * step)) };
    let coarse = central(h)?;
    let fine = central(h * T::c(0.5))?;
    Ok((T::c(4.0) * fine - coarse) / T::c(3.0))
}

/// `L″(θ)` and `ℓ″(θ)` by Richardson-extrapolated central differences of the
/// analytic first derivatives with base step `h`.
pub fn loss_curvatures<T: Scalar>(spec: &PopulationSpec<T>, theta: T, h: T) -> Result<Curvatures<T>> {
    let tight = spec.clone().with_root_tolerance(spec.alpha_root_tolerance.min(1e-15));
    let entropic = richardson(|t| population_entropic_loss_derivative(&tight, t).map(|v| -v), theta, h)?;
    let nll = richardson(|t| Ok(-population_nll_derivative(spec, t, spec.alpha_star)), theta, h)?;
    Ok(Curvatures { entropic, nll })
}

/// Closed form of `L″(θ*) − ℓ″(θ*)`: `4 (E[y v(1−v)])² / E[v(1−v)]` with
/// `v = σ(2θ*y + logit α*)`.
pub fn curvature_gap_at_truth<T: Scalar>(spec: &PopulationSpec<T>) -> T {
    let (ts, a) = (spec.theta_star, spec.alpha_star);
    let shift = logit(a);
    let var = |y: T| {
        let v = sigmoid(T::c(2.0) * ts * y + shift);
        v * (T::one() - v)
    };
    let breaks = transition(ts, a);
    let cross = spec.expectation(|y| y * var(y), &breaks);
    let mass = spec.expectation(var, &breaks);
    T::c(4.0) * cross * cross / mass
}

/// One row of a θ sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridRow {
    pub theta: f64,
    pub entropic_loss: f64,
    pub nll: f64,
    pub entropic_derivative: f64,
    pub nll_derivative: f64,
    pub alpha: f64,
}

/// Losses, derivatives and tilt at every θ in `thetas`, in parallel.
pub fn grid_sweep<T: Scalar>(spec: &PopulationSpec<T>, thetas: &[T]) -> Result<Vec<GridRow>> {
    thetas
        .par_iter()
        .map(|&theta| {
            let alpha = tilted_alpha(spec, theta)?;
            let entropic = population_nll(spec, theta, alpha) - kl_bernoulli(spec.alpha_star, alpha);
            Ok(GridRow {
                theta: theta.as_f64(),
                entropic_loss: entropic.as_f64(),
                nll: population_nll(spec, theta, spec.alpha_star).as_f64(),
                entropic_derivative: (big_f(spec, theta, alpha) - theta).as_f64(),
                nll_derivative: population_nll_derivative(spec, theta, spec.alpha_star).as_f64(),
                alpha: alpha.as_f64(),
            })
        })
        .collect()
}

pub fn write_grid_csv<W: Write>(rows: &[GridRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
