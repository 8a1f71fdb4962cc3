//! Sampling toolkit for two-dimensional U(1) lattice gauge theory.
//!
//! The crate is organised bottom-up:
//!
//! * [`lattice`] holds the periodic geometry, link-angle configurations, the
//!   Wilson action with its analytic force, and the topological charge.
//! * [`statistics`] turns chains and importance weights into numbers
//!   (ESS, integrated autocorrelation time, tunneling rate, bootstrap errors).
//! * [`hmc`] is plain Hamiltonian Monte Carlo on the link angles.
//! * [`autodiff`] is a small define-by-run reverse-mode engine over `f64`
//!   tensors, including a periodic 2D convolution.
//! * [`flow`] builds normalizing flows out of gauge-equivariant plaquette
//!   coupling layers.
//! * [`training`] minimises the reverse KL divergence of a flow against the
//!   Boltzmann weight and moves trained weights between lattice volumes.
//! * [`fthmc`] runs HMC in the latent space of a flow and measures on the
//!   pushed-forward configurations.
//! * [`io`] reads and writes the ensemble, observable, train-log and
//!   checkpoint formats.

pub mod autodiff;
pub mod error;
pub mod flow;
pub mod fthmc;
pub mod hmc;
pub mod io;
pub mod lattice;
pub mod rng;
pub mod statistics;
pub mod training;

pub use error::{Error, Result};
pub use lattice::{Coupling, GaugeConfig, Geometry};
