//! Probabilistic domain characterization.
//!
//! A conditional rational-quadratic spline flow learns the posterior of
//! physical weather parameters given an observation. On top of it sit the
//! calibration diagnostics ([`eval`]), the bag-of-observations domain
//! estimator ([`domain`]) and the simplex mixture fit that relates a target
//! domain to source domains ([`mixture`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the common `f64` instantiation.

pub mod domain;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod mixture;
pub mod neural;
pub mod npe;
pub mod param_space;
pub mod scalar;
pub mod simulator;
pub mod spline;

pub use domain::{characterize, domain_sample, temporal_weights, BagEntry, ObservationBag};
pub use error::{Error, Result};
pub use eval::{ConditionalDensity, Density};
pub use flow::FlowConfig;
pub use mixture::{fit_weights, noise_sweep, simplex_qp, SweepConfig};
pub use npe::TrainConfig;
pub use param_space::{ParamDim, ParamSpace, Standardizer};
pub use scalar::Scalar;
pub use simulator::{Dataset, Observation, Record, Simulator, Split, SplitFractions};

/// Flow over `f64`, the precision used by the pipeline and the CLI.
pub type Flow = flow::ConditionalFlow<f64>;
pub type FlowF32 = flow::ConditionalFlow<f32>;
pub type Pairs = npe::PairSet<f64>;
pub type PairsF32 = npe::PairSet<f32>;
pub type Domain<'a> = domain::DomainCharacterization<'a, f64>;
pub type Posterior<'a> = eval::Posterior<'a, f64>;
pub type Net = neural::DenseNet<f64>;
pub type Spline = spline::RqSpline<f64>;
