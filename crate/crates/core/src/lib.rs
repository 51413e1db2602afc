//! Numerical laboratory for the two-dimensional directed polymer in random
//! environment near its critical disorder window.

pub mod disorder;
pub mod engine;
pub mod error;
pub mod kernels;
pub mod lattice;
pub mod mc;
pub mod moments;
pub mod proxy;
pub mod quad;
pub mod rng;
pub mod stats;

pub use disorder::{
    critical_sigma2, solve_beta, theta_of, CriticalPoint, DisorderModel, Family, Theta,
};
pub use error::{Error, Result};
pub use kernels::{KernelTable, RenewalLaw};
pub use lattice::{MassFunction, Site};
