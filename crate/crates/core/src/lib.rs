//! Numerical homogenization of periodic lattice energies with stiff and soft
//! bonds.
//!
//! The crate models a periodic labelled lattice whose hard phases carry
//! order-one bond energies while the remaining (weak) interactions enter at a
//! higher order in the lattice spacing. It provides:
//!
//! - connectivity analysis of the labelled lattice (infinite components,
//!   islands, winding groups) and the interpolation/extension operators that
//!   relate lattice fields to macroscopic functions (`lattice`),
//! - bond/site energy densities with p-growth and the scaled lattice energies
//!   (`energy`),
//! - a constrained convex minimizer used by every cell problem and time step
//!   (`solver`),
//! - cell problems for the interaction density, homogenized densities,
//!   island constants and the two-scale interaction density (`cell`),
//! - assembly and evaluation of the effective (homogenized) functionals and
//!   desk-scale convergence-of-minima experiments (`gamma`),
//! - implicit-Euler gradient flows at the lattice and effective level with
//!   two-scale comparison diagnostics (`dynamics`),
//! - plain-text experiment configuration (`config`) shared with the CLI.

pub mod cell;
pub mod config;
pub mod dynamics;
pub mod energy;
pub mod field;
pub mod gamma;
pub mod lattice;
pub mod presets;
pub mod solver;
pub mod util;

pub use energy::{BondDensity, ComparisonG, EnergyBreakdown, EnergyModel, MacroFn, SiteDensity};
pub use field::DiscreteField;
pub use lattice::{
    build_phases, bond_sets, PeriodicLatticeModel, PhaseDecomposition, SiteClass, Wrap,
};
pub use util::IBox;
