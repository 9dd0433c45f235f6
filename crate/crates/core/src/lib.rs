//! Desk-scale simulation and analysis of adiabatically prepared Ising-critical
//! states in Rydberg atom arrays.
//!
//! The crate follows the full pipeline: lattice geometry and disorder, the
//! matrix-free Rydberg Hamiltonian over a bitstring basis, ground states and
//! gap profiles, gap-adaptive ramp synthesis, unitary / stochastic-trajectory /
//! dense Lindblad evolution, snapshot measurement with detection errors and
//! blockade post-selection, lattice field correlators, and the fitting and
//! bootstrap machinery used to extract scaling dimensions and decoherence
//! length scales.
//!
//! Unit convention everywhere: ħ = 1, angular frequencies in rad/μs, times in
//! μs, lengths in units of the lattice spacing. A frequency quoted as
//! "2π × 1.6 MHz" is stored as `units::mhz(1.6)`.

pub mod analysis;
pub mod dynamics;
mod error;
pub mod hamiltonian;
pub mod lattice;
pub mod linalg;
pub mod measurement;
pub mod observables;
pub mod spectrum;
pub mod units;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
