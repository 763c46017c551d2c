//! Dispersion-domain detection for mobile molecular-communication links.
//!
//! The crate is organised bottom-up:
//!
//! * [`physics`]: diffusion kernel, finite-memory ISI superposition and the
//!   gain/background intensity composition.
//! * [`mobility`]: active-Brownian-particle transmitter trajectories.
//! * [`counting`]: conditionally-Poisson count sampling and packet assembly.
//! * [`profiling`]: template learning, window selection and the per-symbol
//!   scale-and-offset Poisson profile fit.
//! * [`detector`]: the profiled excess-dispersion statistic, activity gate,
//!   quantile calibration and the per-symbol decision rule.
//! * [`baselines`]: windowed-mean detector, genie-aided oracle LRT,
//!   gain/background-profiling GLRT and the two-pass DFE wrapper.
//! * [`analysis`]: Gaussian working model, HAC long-run variance, ROC/BER
//!   approximations, separability metrics and oracle diagnostics.
//! * [`harness`]: configuration, experiment sweeps and machine-readable output.
//!
//! The numerical core ([`physics`], [`profiling`], [`detector`], [`analysis`])
//! is generic over the scalar type through [`Real`]; the simulation layers run
//! in `f64`. Concrete `f64` aliases are re-exported at the crate root.

pub mod analysis;
pub mod baselines;
pub mod counting;
pub mod detector;
mod error;
pub mod harness;
pub mod mobility;
pub mod physics;
pub mod profiling;
pub mod rng;
mod scalar;

pub use error::{Error, Result};
pub use scalar::{lit, Real};

/// Binary symbol value, `0` or `1`.
pub type Bit = u8;

pub type ChannelParams = physics::ChannelParams<f64>;
pub type GainModel = physics::GainModel<f64>;
pub type Template = profiling::Template<f64>;
pub type ProfileFit = profiling::ProfileFit<f64>;
pub type GateConfig = detector::GateConfig<f64>;
pub type DispersionThreshold = detector::DispersionThreshold<f64>;
pub type DetectorVerdict = detector::DetectorVerdict<f64>;
pub type GaussianWorkingModel = analysis::GaussianWorkingModel<f64>;
pub type LrvEstimate = analysis::LrvEstimate<f64>;
pub type SeparabilityReport = analysis::SeparabilityReport<f64>;

pub use counting::{PacketRecord, SymbolFrame};
pub use mobility::{MobilityParams, SeparationSeries, SymbolAnchoring};
