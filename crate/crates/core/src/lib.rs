//! Contact-implicit trajectory optimization and model-predictive control for a
//! planar quadruped.
//!
//! The pipeline, bottom to top:
//!
//! - [`model`]: planar rigid-body dynamics (mass matrix, bias forces, foot
//!   kinematics and contact Jacobians) with analytical partial derivatives.
//! - [`contact`]: hard-contact impulse solver. Each contact point solves a
//!   small maximum-dissipation problem subject to a velocity-level
//!   non-penetration condition and a Coulomb cone; points are coupled through
//!   nonlinear Gauss-Seidel sweeps. The active-set system assembled after a
//!   solve yields impulse sensitivities, either strict or relaxed by a
//!   diagonal smoothing term.
//! - [`stepper`]: velocity-based semi-implicit time stepping with contact
//!   detection, penetration drift compensation, and step Jacobians that chain
//!   the impulse sensitivities through the dynamics.
//! - [`cost`]: regulating / foot-slip / air-time / symmetry cost terms with
//!   Gauss-Newton Hessian blocks.
//! - [`solver`]: feasibility-driven multiple-shooting DDP with box-limited
//!   feedforwards, plus a classic single-shooting mode.
//! - [`ocp`]: glue that exposes the robot stepper + cost stack as a shooting
//!   problem.
//! - [`mpc`]: receding-horizon loop around the solver with warm starting, a
//!   joint-space PD layer, and a fixed-rate plant simulation.
//!
//! All numerical code is generic over the scalar type via [`Real`]; the
//! aliases at the crate root pin the common `f64` instantiation.

pub mod contact;
pub mod cost;
pub mod model;
pub mod mpc;
pub mod ocp;
pub mod solver;
pub mod stepper;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Scalar type for all core math: `f32` or `f64`.
///
/// The bound is deliberately small: field arithmetic plus lossless-enough
/// conversion from `f64` for constants and to `f64` for logging.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Lifts an `f64` constant into `Self`.
    #[inline]
    fn val(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant")
    }

    /// Converts `self` to `f64` for metrics and logs.
    #[inline]
    fn lossy_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl<T> Real for T where T: RealField + Copy + FromPrimitive + ToPrimitive {}

/// Default scalar used by the CLI harness and most tests.
pub type Scalar = f64;

/// Planar quadruped model at the default scalar.
pub type RobotModel64 = model::RobotModel<Scalar>;
/// Generalized state at the default scalar.
pub type GeneralizedState64 = model::GeneralizedState<Scalar>;
/// Contact solution at the default scalar.
pub type ContactSolution64 = contact::ContactSolution<Scalar>;
/// Trajectory at the default scalar.
pub type Trajectory64 = solver::Trajectory<Scalar>;
