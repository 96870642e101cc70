//! Orbital magnetic susceptibility of a Bloch electron gas in a smooth
//! periodic potential, at zero magnetic field and fixed particle density.
//!
//! The crate computes, for a periodic Schrödinger operator H = ½p² + V on the
//! unit cube (units ħ = m = e = c = 1, spinless):
//!
//! * Bloch bands E_j(k) and momentum matrix elements π̂_{i,j}(α;k) of the fiber
//!   Hamiltonian h(k) = ½(−i∇+k)² + V in a truncated plane-wave basis
//!   ([`fiber`]);
//! * the integrated density of states, grand-canonical density and Fermi
//!   statistical kernels on uniform Brillouin-zone grids ([`bz`]);
//! * the chemical potential at fixed density and the zero-temperature Fermi
//!   energy (gap midpoint for filled bands, IDS inverse for metals)
//!   ([`fermi`]);
//! * contour integrals of the Fermi log-kernel against rational functions of
//!   band energies, in closed form via residues ([`residue`]);
//! * the finite-temperature susceptibility χ(β,ρ₀) and its zero-temperature
//!   semiconductor/metal limits, including the Fermi-surface integral by the
//!   linear-tetrahedron method ([`chi`], [`surface`]);
//! * low-density asymptotics: effective masses, the Fermi-energy power law and
//!   the Landau-Peierls slope χ_M/k_F → −(m₁m₂m₃)^{1/3}/(24π² m₁m₂)
//!   ([`asym`]).
//!
//! All susceptibility values are reported in units where the prefactor (e/c)²
//! equals 1; the spinless normalization is used throughout (the textbook
//! spinful value is twice larger).

pub mod asym;
pub mod bz;
pub mod cache;
pub mod chi;
pub mod error;
pub mod fermi;
pub mod fiber;
pub mod linalg;
pub mod potential;
pub mod residue;
pub mod surface;

pub use error::{Error, Result};
