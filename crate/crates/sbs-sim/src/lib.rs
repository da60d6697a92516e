//! Simulation and analysis toolkit for trapped-ion continuous-variable
//! experiments built around the spin-dependent beam-splitter (SBS)
//! interaction.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`qstate`] — truncated Hilbert-space core: operators, states, the
//!   two-mode Wigner transform and quantum-information functionals;
//! - [`hamiltonian`] — exact time-dependent Raman Hamiltonians (no
//!   Lamb–Dicke approximation) and the composite drives built from them;
//! - [`evolve`] — unitary and Lindblad time evolution, noise-phase
//!   ensemble averaging and the rotational-smearing channel;
//! - [`protocols`] — executable experiment sequences: Fock/ECS state
//!   preparation with heralding, displaced joint-parity Wigner scans,
//!   parity filtering, Ramsey and thermometry scans;
//! - [`analysis`] — analytic references, the model-based density-matrix
//!   estimator with bootstrap, CHSH maximization, Fock-population fits and
//!   the staged error budget;
//! - [`cli`] — configuration ingestion, seeded experiment execution and
//!   data emission for the `sbs-sim` binary.
//!
//! Basis ordering everywhere: spin is the slowest index, then mode 1, then
//! mode 2 (and so on for more modes). All assembled Hamiltonians are in the
//! interaction picture; mode frequencies only enter through drive phase
//! functions.

pub mod analysis;
pub mod cli;
pub mod evolve;
pub mod hamiltonian;
pub mod linalg;
pub mod protocols;
pub mod qstate;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("Fock index {index} out of truncation range for mode {mode} (dim {dim})")]
    FockOutOfRange { mode: usize, index: usize, dim: usize },
    #[error("invalid Hilbert space: {0}")]
    InvalidSpace(String),
    #[error("operator/state space mismatch: {0}")]
    SpaceMismatch(String),
    #[error("state norm vanishes ({0:.3e}); cannot normalize")]
    ZeroNorm(f64),
    #[error("density matrix invalid: {0}")]
    InvalidDensity(String),
    #[error("truncation too severe: {0}")]
    Truncation(String),
    #[error("integrator failed to converge: {0}")]
    IntegratorFailure(String),
    #[error("herald acceptance probability {0:.3e} too small")]
    HeraldProbability(f64),
    #[error("fit did not converge: {0}")]
    FitFailure(String),
    #[error("ill-conditioned basis (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension cap exceeded: total dim {total} > cap {cap}")]
    DimensionCap { total: usize, cap: usize },
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
