//! Koopman bilinear models of control-affine systems.
//!
//! A pair of networks lifts the state into coordinates where the dynamics are
//! bilinear, `dz/dt = A z + sum_i B_i z u_i`. Training alternates a
//! closed-form least-squares solve for `G = [A, B_1, .., B_m]` (from an
//! integral form of the dynamics over short windows) with gradient steps on
//! the autoencoder. Single-level discrete-time baselines are included for
//! comparison.
//!
//! Everything numerical is generic over [`Real`] (`f32` or `f64`); the
//! aliases at the bottom fix `f64`.

pub mod autoencoder;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod kbf;
pub mod numerics;
pub mod scalar;
pub mod systems;
pub mod training;

pub use autoencoder::{Architecture, AutoencoderParams};
pub use dataset::{SamplingSpec, TrajectorySet, WindowBatch};
pub use error::{Error, Result};
pub use kbf::{KbfModel, PredictionMode};
pub use numerics::{QuadratureOrder, QuadratureRule};
pub use scalar::Real;
pub use systems::{
    ControlAffineSystem, DoublePendulumSystem, ParabolicSystem, PendulumVariant, SystemKind,
};
pub use training::{Method, TrainConfig, TrainReport};

pub type Model = KbfModel<f64>;
pub type Dataset = TrajectorySet<f64>;
pub type Windows = WindowBatch<f64>;
pub type Autoencoder = AutoencoderParams<f64>;
