//! Mixture-model estimation with Sinkhorn EM, vanilla EM and overparameterized EM.
//!
//! The numerical core is generic over the scalar type ([`Scalar`], implemented
//! for `f32` and `f64`); the aliases at the crate root fix it to `f64`, which is
//! what the experiment harness and command-line tool use.

pub mod em;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod metrics;
pub mod mixture;
pub mod population;
pub mod quadrature;
pub mod scalar;
pub mod sinkhorn;
pub mod theory;

pub use em::{em_step, fit, map_m_step_means, ComponentPrior, CovarianceMode, Engine, EngineConfig, FitTrace, MeanTying, Termination, TraceRecord};
pub use error::{Error, Result};
pub use metrics::{accuracy, convergence_iteration, mse, w2_squared_entropic, w2_squared_exact, DiscreteMixture};
pub use mixture::{log_density, negative_log_likelihood, sample, vanilla_posterior, Dataset, MixtureModel, Responsibilities};
pub use population::PopulationSpec;
pub use scalar::Scalar;
pub use sinkhorn::{empirical_entropic_loss, sinkhorn_estep, tilted_weights, Coupling, SinkhornSettings};

/// Double-precision mixture model.
pub type Mixture = MixtureModel<f64>;
/// Double-precision dataset.
pub type Data = Dataset<f64>;
/// Double-precision responsibilities.
pub type Resp = Responsibilities<f64>;
/// Double-precision transport coupling.
pub type Plan = Coupling<f64>;
/// Double-precision engine configuration.
pub type Config = EngineConfig<f64>;
/// Double-precision fit trace.
pub type Trace = FitTrace<f64>;
/// Double-precision population specification.
pub type Population = PopulationSpec<f64>;
/// Double-precision discrete mixture of atoms.
pub type Atoms = DiscreteMixture<f64>;
