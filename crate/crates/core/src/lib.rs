//! Event-level uncertainty quantification for deep inelastic scattering.
//!
//! The crate regresses the DIS kinematic triplet `(x, Q², y)` from fifteen
//! detector-level features with a bicephalous Bayesian network whose dense
//! layers carry multiplicative-normalizing-flow posteriors. Each prediction
//! comes with a heteroskedastic aleatoric and an epistemic uncertainty.
//!
//! Around the network live the pieces needed to exercise it end to end: a
//! reverse-mode autodiff engine, DIS kinematics with the electron,
//! double-angle and Jacquet-Blondel reconstructions, a synthetic event
//! generator with detector smearing and initial-state radiation, the
//! training loop, posterior sampling and the closure/cut analyses.
//!
//! Numerical code is generic over [`Real`]; the `*64` aliases below fix the
//! precision used by the file formats and the CLI.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod generator;
pub mod inference;
pub mod kinematics;
pub mod mnf;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod selftest;
pub mod trainer;

pub use scalar::Real;

/// Crate version embedded in every artifact header.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph64 = autodiff::Graph<f64>;
pub type MnfDenseLayer64 = mnf::MnfDenseLayer<f64>;
pub type CouplingFlow64 = mnf::CouplingFlow<f64>;
pub type EluqNetwork64 = model::EluqNetwork<f64>;
pub type DnnBaseline64 = model::DnnBaseline<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type EluqNetwork32 = model::EluqNetwork<f32>;
