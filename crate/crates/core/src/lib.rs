//! Numerical toolkit for the Master equation of linear-quadratic mean field
//! type control (MFC) and mean field games (MFG) with common noise.
//!
//! The crate is organised bottom-up:
//!
//! - [`riccati`]: backward RK4 integration of matrix Riccati flows on a uniform grid.
//! - [`lq_model`]: LQ problem data, Hamiltonian, and the closed-form quadratic
//!   solutions `V(m,t)` / `U(x,m,t)` assembled from Riccati families.
//! - [`master_residual`]: term-by-term evaluation of the Master equations on the
//!   quadratic ansatz, measure-derivative checks and the symmetry test.
//! - [`mckean_vlasov`]: particle systems sharing a common noise, the conditional
//!   mean SDE, the backward component `r`, the scalar `s`, and Monte Carlo costs.
//! - [`finite_nash`]: empirical measures, the N-player system residual and the
//!   empirical-measure derivative identities.
//! - [`systemic_risk`]: the interbank lending model.
//! - [`cli`]: config parsing and the experiment runner behind the `mfgkit` binary.
//!
//! Data-parallel loops go through [`exec::Exec`]; with the `parallel` feature
//! disabled every policy runs sequentially and produces identical output.

pub mod cli;
pub mod error;
pub mod exec;
pub mod finite_nash;
pub mod fixtures;
pub mod linalg;
pub mod lq_model;
pub mod master_residual;
pub mod mckean_vlasov;
pub mod riccati;
pub mod rng;
pub mod systemic_risk;
pub mod table;

pub use error::{Error, Result};
pub use exec::Exec;
pub use linalg::{Mat, Vector};
