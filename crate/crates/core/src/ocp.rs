//! Contact trajectory optimization problem: the planar model stepped under
//! hard contact, scored by the cost stack, exposed to the solver.
//!
//! The forward step is always the strict contact solve; the relaxation
//! `rho` only softens the impulse sensitivities inside the step
//! linearization, which is what lets the optimizer see how impulses react
//! to configuration changes near mode boundaries.

use nalgebra::{DMatrix, DVector};

use crate::cost::{CostEval, CostStack};
use crate::model::{GeneralizedState, RobotModel};
use crate::solver::{ShootingProblem, StepLinearization};
use crate::stepper::{step, step_jacobians, StepOptions, StepResult};
use crate::Real;

/// Packs a generalized state into the solver's flat layout `[q; q̇]`.
pub fn pack_state<T: Real>(state: &GeneralizedState<T>) -> DVector<T> {
    state.to_vector()
}

/// Unpacks the solver's flat layout back into a generalized state.
pub fn unpack_state<T: Real>(x: &DVector<T>) -> GeneralizedState<T> {
    GeneralizedState::from_vector(x)
}

#[derive(Debug, Clone)]
pub struct OcProblem<T: Real> {
    model: RobotModel<T>,
    pub cost: CostStack<T>,
    options: StepOptions<T>,
    horizon: usize,
    rho: T,
}

impl<T: Real> OcProblem<T> {
    /// `rho >= 0` relaxes the impulse sensitivities; 0 is the strict
    /// closed form.
    pub fn new(model: RobotModel<T>, cost: CostStack<T>, dt: T, horizon: usize, rho: T) -> Self {
        assert!(dt > T::zero(), "knot duration must be positive");
        assert!(horizon >= 1, "horizon must be at least one knot");
        assert!(rho >= T::zero(), "relaxation must be non-negative");
        Self {
            model,
            cost,
            options: StepOptions::new(dt),
            horizon,
            rho,
        }
    }

    pub fn model(&self) -> &RobotModel<T> {
        &self.model
    }

    pub fn dt(&self) -> T {
        self.options.dt
    }

    pub fn rho(&self) -> T {
        self.rho
    }

    pub fn options(&self) -> &StepOptions<T> {
        &self.options
    }

    /// Disables the penetration-recovery bias in the forward step.
    pub fn set_stabilization(&mut self, on: bool) {
        self.options.stabilization = on;
    }

    /// Full contact detail of one step, for logging and analysis.
    pub fn step_result(&self, x: &DVector<T>, u: &DVector<T>) -> StepResult<T> {
        step(&self.model, &unpack_state(x), u, &self.options).expect("step failed")
    }

    /// Foot heights at every knot of a planned trajectory, indexed
    /// `[knot][foot]`; the swing scan for the air-time schedule runs on
    /// this.
    pub fn planned_foot_gaps(&self, states: &[DVector<T>]) -> Vec<Vec<T>> {
        states
            .iter()
            .map(|x| {
                let state = unpack_state(x);
                (0..self.model.n_feet())
                    .map(|k| self.model.foot_height(&state.q, k))
                    .collect()
            })
            .collect()
    }
}

impl<T: Real> ShootingProblem<T> for OcProblem<T> {
    fn nx(&self) -> usize {
        2 * self.model.nv()
    }

    fn nu(&self) -> usize {
        self.model.nu()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    // A state extreme enough to break the stepper (singular mass matrix,
    // contact solve failure) poisons the output with NaN instead of
    // panicking; the solver's finite-value guards then reject the
    // candidate or fail the solve, and the MPC layer falls back.
    fn step(&self, _knot: usize, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        match step(&self.model, &unpack_state(x), u, &self.options) {
            Ok(result) => pack_state(&result.state),
            Err(_) => DVector::from_element(x.len(), T::val(f64::NAN)),
        }
    }

    fn linearize(&self, _knot: usize, x: &DVector<T>, u: &DVector<T>) -> StepLinearization<T> {
        let state = unpack_state(x);
        let nx = x.len();
        let nan = || T::val(f64::NAN);
        let Ok(result) = step(&self.model, &state, u, &self.options) else {
            return StepLinearization {
                next: DVector::from_element(nx, nan()),
                fx: DMatrix::from_element(nx, nx, nan()),
                fu: DMatrix::from_element(nx, u.len(), nan()),
            };
        };
        match step_jacobians(&self.model, &state, u, &self.options, &result, self.rho) {
            Ok(jac) => StepLinearization {
                next: pack_state(&result.state),
                fx: jac.fx,
                fu: jac.fu,
            },
            Err(_) => StepLinearization {
                next: pack_state(&result.state),
                fx: DMatrix::from_element(nx, nx, nan()),
                fu: DMatrix::from_element(nx, u.len(), nan()),
            },
        }
    }

    fn running_cost(&self, knot: usize, x: &DVector<T>, u: &DVector<T>) -> CostEval<T> {
        self.cost.running(&self.model, knot, &unpack_state(x), u)
    }

    fn terminal_cost(&self, x: &DVector<T>) -> CostEval<T> {
        self.cost.terminal(&unpack_state(x))
    }

    fn control_bounds(&self) -> Option<(DVector<T>, DVector<T>)> {
        let limit = self.model.torque_limit();
        let nu = self.model.nu();
        Some((
            DVector::from_element(nu, -limit),
            DVector::from_element(nu, limit),
        ))
    }
}

/// Convenience: identity-weight cost stack toward the nominal stance.
pub fn stance_regulation_problem<T: Real>(
    model: RobotModel<T>,
    dt: T,
    horizon: usize,
    rho: T,
) -> OcProblem<T> {
    let weights = crate::cost::CostWeights::defaults(model.nv(), model.nu());
    let reference = model.nominal_stance();
    let cost = CostStack::new(&model, weights, reference, horizon);
    OcProblem::new(model, cost, dt, horizon, rho)
}
