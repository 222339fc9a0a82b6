//! Optimal-transport conditional flow matching through its proximal form.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: interpolation curves `alpha_t`, `beta_t` and the log-time rescaling.
//! - [`transport`]: exact quadratic-cost assignment with Kantorovich duals and W2.
//! - [`potential`]: convex potentials, their proximal operators and Moreau envelopes.
//! - [`field`]: the exact proximal vector field, conditional fields and their checks.
//! - [`neural`]: a small MLP vector field trained with minibatch OT-CFM.
//! - [`flow`]: fixed-step ODE integration, variational flow Jacobians, pushforwards.
//! - [`lyapunov`]: Jacobian spectra and terminal Lyapunov exponents.
//! - [`datasets`]: seeded target generators and the MNIST IDX reader.

pub mod datasets;
pub mod error;
pub mod field;
pub mod flow;
pub mod linalg;
pub mod lyapunov;
pub mod neural;
pub mod potential;
pub mod rng;
pub mod schedule;
pub mod transport;

pub use error::{Error, Result};
pub use field::{FieldSpec, VectorField};
pub use potential::{Potential, ProxResult};
pub use schedule::Schedule;
pub use transport::{Coupling, PointCloud};
