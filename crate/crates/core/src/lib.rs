//! Identification of globally incrementally stable linear and polynomial
//! state-space models from input/output data.
//!
//! The library fits implicit models e(x_{t+1}) = f(x_t, u_t), y_t = g(x_t, u_t)
//! by minimizing a Lagrangian-relaxation upper bound on linearized simulation
//! error over a convex set of certified-stable models, using a path-following
//! log-det barrier method whose Newton iterations cost O(T) in the data length.

pub mod datagen;
pub mod error;
pub mod fitters;
pub mod io;
pub mod ipm;
pub mod lagrangian;
pub mod linalg;
pub mod models;
pub mod polyalg;
pub mod scaling;
pub mod stability;

pub use error::{Error, Result};
