//! Velocity-based semi-implicit time stepping with hard contact impulses.
//!
//! One step at a configuration `q`, velocity `q̇`, torque `u`:
//!
//! 1. Unconstrained momentum update: `q̇_free = M⁻¹((B u - h) dt + M q̇)`.
//! 2. Contact detection: a foot is a candidate when it is already at or
//!    below the ground (`φ ≤ 0`) or the free velocity would carry it there
//!    within the step (`φ + dt Jⁿ q̇_free ≤ 0`).
//! 3. Impulse solve on the candidates' Delassus system. The biased free
//!    velocity gets `φ/dt` added on each normal row (when stabilization is
//!    on), which makes the impulse place the foot exactly onto the surface
//!    at the end of the step: existing penetration is removed and touchdown
//!    does not overshoot.
//! 4. `q̇⁺ = q̇_free + M⁻¹ Jᵀ λ`, then the implicit position update
//!    `q⁺ = q + dt q̇⁺`.
//!
//! [`step_jacobians`] differentiates the whole map, holding the contact
//! modes of a completed step frozen: the smooth dynamics partials come from
//! the model, the impulse sensitivities from the reduced active-set system,
//! chained together analytically. The relaxation `ρ` only enters here; the
//! forward step is always the hard-contact solve.

use nalgebra::{DMatrix, DVector, Vector2};
use thiserror::Error;

use crate::contact::{
    assemble_delassus, solve_all_contacts, ContactError, ContactMode, ContactSolution,
    CoupledContactProblem, SolveOptions,
};
use crate::model::{GeneralizedState, ModelError, RobotModel};
use crate::Real;

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Contact(#[from] ContactError),
}

/// Step configuration.
#[derive(Debug, Clone)]
pub struct StepOptions<T: Real> {
    pub dt: T,
    /// Penetration drift compensation: bias the normal constraint by `φ/dt`
    /// so contact impulses also remove position error. Disabling it leaves a
    /// pure velocity-level constraint that freezes existing penetration.
    pub stabilization: bool,
    pub contact: SolveOptions<T>,
}

impl<T: Real> StepOptions<T> {
    pub fn new(dt: T) -> Self {
        Self {
            dt,
            stabilization: true,
            contact: SolveOptions::default(),
        }
    }
}

/// Outcome of one time step.
#[derive(Debug, Clone)]
pub struct StepResult<T: Real> {
    pub state: GeneralizedState<T>,
    /// Contact impulse per foot (zero for feet that were not candidates).
    pub impulses: Vec<Vector2<T>>,
    /// Contact mode per foot (`Separating` for non-candidates).
    pub modes: Vec<ContactMode>,
    /// Pre-step gap per foot.
    pub gaps: Vec<T>,
    /// Feet that entered the impulse solve, in model order.
    pub candidates: Vec<usize>,
    /// The coupled solve over the candidates, when there were any.
    pub contact: Option<ContactSolution<T>>,
    /// False when the Gauss-Seidel sweep limit was hit.
    pub contact_converged: bool,
}

/// Derivatives of the step map `x⁺ = f(x, u)`, `x = [q; q̇]`.
#[derive(Debug, Clone)]
pub struct StepJacobians<T: Real> {
    /// `∂x⁺/∂x`, `2nv x 2nv`.
    pub fx: DMatrix<T>,
    /// `∂x⁺/∂u`, `2nv x nu`.
    pub fu: DMatrix<T>,
    /// True when the impulse sensitivity system needed extra regularization.
    pub regularized: bool,
}

fn free_velocity<T: Real>(
    model: &RobotModel<T>,
    state: &GeneralizedState<T>,
    u: &DVector<T>,
    dt: T,
) -> Result<(DVector<T>, DMatrix<T>), StepError> {
    let mass = model.mass_matrix(&state.q);
    let h = model.bias_forces(&state.q, &state.qdot);
    let mut w = &mass * &state.qdot - h * dt;
    for i in 0..model.nu() {
        w[crate::model::JOINT_0 + i] += u[i] * dt;
    }
    let minv = mass
        .cholesky()
        .ok_or(ModelError::SingularMassMatrix)?
        .inverse();
    let qdot_free = &minv * w;
    Ok((qdot_free, minv))
}

/// Feet that must enter the impulse solve for this step.
pub fn detect_contacts<T: Real>(
    model: &RobotModel<T>,
    state: &GeneralizedState<T>,
    u: &DVector<T>,
    dt: T,
) -> Result<Vec<usize>, StepError> {
    let (qdot_free, _) = free_velocity(model, state, u, dt)?;
    Ok(candidate_feet(model, &state.q, &qdot_free, dt))
}

fn candidate_feet<T: Real>(
    model: &RobotModel<T>,
    q: &DVector<T>,
    qdot_free: &DVector<T>,
    dt: T,
) -> Vec<usize> {
    (0..model.n_feet())
        .filter(|&k| {
            let phi = model.foot_height(q, k);
            if phi <= T::zero() {
                return true;
            }
            let jac = model.contact_jacobian(q, k);
            let vn = (jac * qdot_free)[1];
            phi + vn * dt <= T::zero()
        })
        .collect()
}

/// Advances the state by one step.
pub fn step<T: Real>(
    model: &RobotModel<T>,
    state: &GeneralizedState<T>,
    u: &DVector<T>,
    opts: &StepOptions<T>,
) -> Result<StepResult<T>, StepError> {
    let dt = opts.dt;
    let nv = model.nv();
    let (qdot_free, minv) = free_velocity(model, state, u, dt)?;
    let candidates = candidate_feet(model, &state.q, &qdot_free, dt);

    let gaps: Vec<T> = (0..model.n_feet())
        .map(|k| model.foot_height(&state.q, k))
        .collect();

    let mut impulses = vec![Vector2::zeros(); model.n_feet()];
    let mut modes = vec![ContactMode::Separating; model.n_feet()];
    let mut contact = None;
    let mut contact_converged = true;
    let mut qdot_next = qdot_free.clone();

    if !candidates.is_empty() {
        let nc = candidates.len();
        // Stacked candidate Jacobian, 2 rows per foot.
        let mut jac = DMatrix::zeros(2 * nc, nv);
        for (i, &k) in candidates.iter().enumerate() {
            jac.rows_mut(2 * i, 2).copy_from(&model.contact_jacobian(&state.q, k));
        }
        let w = &jac * &minv * jac.transpose();
        let mut c = &jac * &qdot_free;
        if opts.stabilization {
            for (i, &k) in candidates.iter().enumerate() {
                c[2 * i + 1] += gaps[k] / dt;
            }
        }
        let problem = CoupledContactProblem {
            w,
            c,
            dims: vec![2; nc],
            friction: model.friction(),
        };
        let solution = solve_all_contacts(&problem, &opts.contact)?;
        contact_converged = solution.converged;

        let lambda = solution.stacked_impulse();
        qdot_next += &minv * (jac.transpose() * &lambda);
        for (i, &k) in candidates.iter().enumerate() {
            impulses[k] = Vector2::new(lambda[2 * i], lambda[2 * i + 1]);
            modes[k] = solution.modes[i];
        }
        contact = Some(solution);
    }

    let q_next = &state.q + &qdot_next * dt;
    Ok(StepResult {
        state: GeneralizedState::new(q_next, qdot_next),
        impulses,
        modes,
        gaps,
        candidates,
        contact,
        contact_converged,
    })
}

/// Differentiates a completed step, freezing its contact modes. `rho = 0`
/// gives the strict active-set derivative; `rho > 0` relaxes the impulse
/// sensitivities.
pub fn step_jacobians<T: Real>(
    model: &RobotModel<T>,
    state: &GeneralizedState<T>,
    u: &DVector<T>,
    opts: &StepOptions<T>,
    result: &StepResult<T>,
    rho: T,
) -> Result<StepJacobians<T>, StepError> {
    let dt = opts.dt;
    let nv = model.nv();
    let nu = model.nu();
    let parts = model.forward_dynamics_partials(&state.q, &state.qdot, u, &result.impulses, dt)?;

    // Frozen-impulse pieces: q̇⁺ = q̇ + dt q̈(q, q̇, u, λ).
    let mut dqd_dq = &parts.dqdd_dq * dt;
    let mut dqd_dqd = &parts.dqdd_dqdot * dt + DMatrix::identity(nv, nv);
    let mut dqd_du = &parts.dqdd_du * dt;
    let mut regularized = false;

    if let Some(solution) = &result.contact {
        let candidates = &result.candidates;
        let nc = candidates.len();
        let minv = &parts.mass_matrix_inv;

        // Rebuild the coupled problem exactly as the forward step did, so
        // the reduced system matches the solved one.
        let mut jac = DMatrix::zeros(2 * nc, nv);
        for (i, &k) in candidates.iter().enumerate() {
            jac.rows_mut(2 * i, 2).copy_from(&model.contact_jacobian(&state.q, k));
        }
        let w_full = &jac * minv * jac.transpose();
        let mut c_full = &jac * free_velocity(model, state, u, dt)?.0;
        if opts.stabilization {
            for (i, &k) in candidates.iter().enumerate() {
                c_full[2 * i + 1] += result.gaps[k] / dt;
            }
        }
        let sys = assemble_delassus(&w_full, &c_full, solution);

        if sys.layout.reduced_dim > 0 {
            let solver = sys.sensitivity_solver(rho)?;
            regularized = solver.regularized;

            // Reduced constraint rows R (rows of J) and injection columns Cᵀ
            // (columns of Jᵀ, boundary-direction combined for sliding).
            let r_mat = sys.layout.select_rows(&jac);
            let inj = sys.layout.injector();
            let ct = jac.transpose() * &inj;

            let r_minv = &r_mat * minv;
            // w = M q̇ + (B u - h) dt, the momentum the free velocity solves.
            let mut w_vec = &parts.mass_matrix * &state.qdot
                - model.bias_forces(&state.q, &state.qdot) * dt;
            for i in 0..nu {
                w_vec[crate::model::JOINT_0 + i] += u[i] * dt;
            }

            // ∂λ/∂q, column by column.
            let jt_cols = jac.transpose();
            let mut dlam_dq = DMatrix::zeros(2 * nc, nv);
            for m in 0..nv {
                // ∂J/∂q_m stacked over candidates.
                let mut djac = DMatrix::zeros(2 * nc, nv);
                for (i, &k) in candidates.iter().enumerate() {
                    djac.rows_mut(2 * i, 2)
                        .copy_from(&parts.foot_jacobian_partials[k][m]);
                }
                let dr = sys.layout.select_rows(&djac);
                let dct = djac.transpose() * &inj;
                // ∂M⁻¹ = -M⁻¹ ∂M M⁻¹, applied without forming it.
                let minv_dm_minv = minv * &parts.dmass_dq[m] * minv;

                let da = &dr * minv * &ct - &r_mat * &minv_dm_minv * &ct + &r_minv * &dct;

                let dw_vec = &parts.dmass_dq[m] * &state.qdot - parts.dbias_dq.column(m) * dt;
                let mut db = &dr * (minv * &w_vec) - &r_mat * (&minv_dm_minv * &w_vec)
                    + &r_minv * dw_vec;
                if opts.stabilization {
                    // Drift bias rows depend on q through ∂φ_k/∂q_m.
                    let mut dbias = DVector::zeros(2 * nc);
                    for (i, &k) in candidates.iter().enumerate() {
                        dbias[2 * i + 1] = parts.dphi_dq[k][m] / dt;
                    }
                    db += sys.layout.select_entries(&dbias);
                }
                dlam_dq.set_column(m, &solver.impulse_gradient(&da, &db));
            }

            // ∂λ/∂q̇: A does not depend on q̇; ∂w/∂q̇ = M - dt ∂h/∂q̇.
            let da_zero = DMatrix::zeros(sys.layout.reduced_dim, sys.layout.reduced_dim);
            let mut dlam_dqd = DMatrix::zeros(2 * nc, nv);
            let dw_dqd = &parts.mass_matrix - &parts.dbias_dqdot * dt;
            let db_dqd = &r_minv * dw_dqd;
            for m in 0..nv {
                let db = db_dqd.column(m).into_owned();
                dlam_dqd.set_column(m, &solver.impulse_gradient(&da_zero, &db));
            }

            // ∂λ/∂u: ∂w/∂u = B dt.
            let mut dlam_du = DMatrix::zeros(2 * nc, nu);
            let db_du = &r_minv * model.input_matrix() * dt;
            for i in 0..nu {
                let db = db_du.column(i).into_owned();
                dlam_du.set_column(i, &solver.impulse_gradient(&da_zero, &db));
            }

            let minv_jt = minv * &jt_cols;
            dqd_dq += &minv_jt * dlam_dq;
            dqd_dqd += &minv_jt * dlam_dqd;
            dqd_du += &minv_jt * dlam_du;
        }
    }

    // q⁺ = q + dt q̇⁺.
    let eye = DMatrix::identity(nv, nv);
    let dq_dq = &eye + &dqd_dq * dt;
    let dq_dqd = &dqd_dqd * dt;
    let dq_du = &dqd_du * dt;

    let mut fx = DMatrix::zeros(2 * nv, 2 * nv);
    fx.view_mut((0, 0), (nv, nv)).copy_from(&dq_dq);
    fx.view_mut((0, nv), (nv, nv)).copy_from(&dq_dqd);
    fx.view_mut((nv, 0), (nv, nv)).copy_from(&dqd_dq);
    fx.view_mut((nv, nv), (nv, nv)).copy_from(&dqd_dqd);

    let mut fu = DMatrix::zeros(2 * nv, nu);
    fu.view_mut((0, 0), (nv, nu)).copy_from(&dq_du);
    fu.view_mut((nv, 0), (nv, nu)).copy_from(&dqd_du);

    Ok(StepJacobians {
        fx,
        fu,
        regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelParams, BASE_X, BASE_Z};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DT: f64 = 0.025;

    fn quadruped() -> RobotModel<f64> {
        RobotModel::planar_quadruped(ModelParams::default()).unwrap()
    }

    fn state(q: Vec<f64>, qd: Vec<f64>) -> GeneralizedState<f64> {
        GeneralizedState::new(DVector::from_vec(q), DVector::from_vec(qd))
    }

    #[test]
    fn ballistic_flight_matches_closed_form() {
        let model = RobotModel::single_body(2.0, 0.5, false);
        let opts = StepOptions::new(DT);
        let u = DVector::zeros(0);
        let mut s = state(vec![0.0, 1.0, 0.1], vec![0.3, 0.2, -0.4]);
        let mut z_expected = 1.0;
        let mut vz = 0.2;
        for i in 1..=100 {
            s = step(&model, &s, &u, &opts).unwrap().state;
            vz -= 9.81 * DT;
            z_expected += vz * DT;
            assert_relative_eq!(s.q[BASE_X], 0.3 * DT * i as f64, max_relative = 1e-12);
            assert_relative_eq!(s.q[BASE_Z], z_expected, max_relative = 1e-10);
            assert_relative_eq!(s.q[2], 0.1 - 0.4 * DT * i as f64, max_relative = 1e-12);
        }
    }

    #[test]
    fn free_body_jacobians_are_the_double_integrator() {
        let model = RobotModel::single_body(1.5, 0.3, false);
        let opts = StepOptions::new(DT);
        let u = DVector::zeros(0);
        let s = state(vec![0.0, 2.0, 0.0], vec![0.1, 0.0, 0.0]);
        let result = step(&model, &s, &u, &opts).unwrap();
        let jacs = step_jacobians(&model, &s, &u, &opts, &result, 0.0).unwrap();

        let mut expected = DMatrix::identity(6, 6);
        for i in 0..3 {
            expected[(i, 3 + i)] = DT;
        }
        assert_abs_diff_eq!(jacs.fx, expected, epsilon = 1e-14);
        assert_eq!(jacs.fu.ncols(), 0);
    }

    #[test]
    fn dropped_body_lands_exactly_on_the_surface() {
        let model = RobotModel::single_body(1.0, 0.1, true);
        let opts = StepOptions::new(DT);
        let u = DVector::zeros(0);
        let mut s = state(vec![0.0, 0.05, 0.0], vec![0.0, 0.0, 0.0]);
        let mut touched = false;
        for _ in 0..40 {
            let r = step(&model, &s, &u, &opts).unwrap();
            s = r.state;
            if r.candidates.is_empty() {
                continue;
            }
            touched = true;
            // Stabilized impulse places the body exactly on the ground.
            assert_abs_diff_eq!(s.q[BASE_Z], 0.0, epsilon = 1e-12);
            assert_eq!(r.modes[0], ContactMode::Clamping);
        }
        assert!(touched);
        // Resting: the impulse balances gravity every step.
        let r = step(&model, &s, &u, &opts).unwrap();
        assert_relative_eq!(r.impulses[0][1], 9.81 * DT, max_relative = 1e-10);
        assert_abs_diff_eq!(r.state.qdot[BASE_Z], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sliding_block_decelerates_at_coulomb_rate() {
        let model = RobotModel::single_body(1.0, 0.1, true);
        let mu = model.friction();
        let opts = StepOptions::new(DT);
        let u = DVector::zeros(0);
        let mut s = state(vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]);
        let mut v = 1.0;
        loop {
            let r = step(&model, &s, &u, &opts).unwrap();
            s = r.state;
            if v > mu * 9.81 * DT {
                v -= mu * 9.81 * DT;
                assert_eq!(r.modes[0], ContactMode::Sliding);
                assert_relative_eq!(s.qdot[BASE_X], v, max_relative = 1e-10);
            } else {
                // Friction can hold the remaining velocity: full stop.
                assert_eq!(r.modes[0], ContactMode::Clamping);
                assert_abs_diff_eq!(s.qdot[BASE_X], 0.0, epsilon = 1e-12);
                break;
            }
        }
    }

    #[test]
    fn stabilization_removes_penetration_and_its_absence_freezes_it() {
        let model = RobotModel::single_body(1.0, 0.1, true);
        let u = DVector::zeros(0);
        let start = state(vec![0.0, -0.006, 0.0], vec![0.0, 0.0, 0.0]);

        let mut corrected = StepOptions::new(DT);
        corrected.stabilization = true;
        let r = step(&model, &start, &u, &corrected).unwrap();
        assert_abs_diff_eq!(r.state.q[BASE_Z], 0.0, epsilon = 1e-12);

        let mut frozen = StepOptions::new(DT);
        frozen.stabilization = false;
        let mut s = start;
        for _ in 0..10 {
            s = step(&model, &s, &u, &frozen).unwrap().state;
            assert_abs_diff_eq!(s.q[BASE_Z], -0.006, epsilon = 1e-12);
        }
    }

    #[test]
    fn quadruped_stance_step_keeps_feet_planted() {
        let model = quadruped();
        let opts = StepOptions::new(DT);
        let u = DVector::zeros(4);
        let stance = model.nominal_stance();
        let r = step(&model, &stance, &u, &opts).unwrap();
        assert_eq!(r.candidates, vec![0, 1]);
        assert!(r.contact_converged);
        for k in 0..2 {
            assert_eq!(r.modes[k], ContactMode::Clamping);
            assert!(r.impulses[k][1] > 0.0);
            // The velocity-level constraint (at the pre-step configuration,
            // where the Jacobian was evaluated) is exact; the position drifts
            // only by the update's second-order curvature (the joints buckle
            // under zero torque, so q̇ is not small here).
            let v = model.foot_velocity(&stance.q, &r.state.qdot, k);
            assert_abs_diff_eq!(v.norm(), 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(model.foot_height(&r.state.q, k), 0.0, epsilon = 5e-4);
        }
        // Vertical momentum balance. The base rows of M q̇ are the system's
        // linear momentum, so p_z⁺ = Σ λⁿ - m g dt (p_z was zero). The total
        // impulse is less than the weight impulse here because the
        // unactuated linkage buckles and the center of mass accelerates down.
        let total_mass = 2.5 + 4.0 * 0.25;
        let total_n: f64 = r.impulses.iter().map(|l| l[1]).sum();
        assert!(total_n > 0.0 && total_n < total_mass * 9.81 * DT);
        let p_after = model.mass_matrix(&stance.q) * &r.state.qdot;
        assert_relative_eq!(
            p_after[BASE_Z],
            total_n - total_mass * 9.81 * DT,
            max_relative = 1e-9
        );
    }

    /// Central-difference check of the full step map. Directions whose
    /// perturbation flips any contact mode are skipped (the map is only
    /// piecewise smooth); the test demands that most directions are clean.
    fn check_jacobians(
        model: &RobotModel<f64>,
        s: &GeneralizedState<f64>,
        u: &DVector<f64>,
        opts: &StepOptions<f64>,
        tol: f64,
    ) {
        let nv = model.nv();
        let nu = model.nu();
        let eps = 1e-7;
        let result = step(model, s, u, opts).unwrap();
        let jacs = step_jacobians(model, s, u, opts, &result, 0.0).unwrap();

        let stack = |r: &StepResult<f64>| {
            let mut x = DVector::zeros(2 * nv);
            x.rows_mut(0, nv).copy_from(&r.state.q);
            x.rows_mut(nv, nv).copy_from(&r.state.qdot);
            x
        };

        let mut clean = 0;
        let mut skipped = 0;
        for j in 0..2 * nv + nu {
            let perturb = |sign: f64| {
                let mut q = s.q.clone();
                let mut qd = s.qdot.clone();
                let mut uu = u.clone();
                if j < nv {
                    q[j] += sign * eps;
                } else if j < 2 * nv {
                    qd[j - nv] += sign * eps;
                } else {
                    uu[j - 2 * nv] += sign * eps;
                }
                step(model, &GeneralizedState::new(q, qd), &uu, opts).unwrap()
            };
            let plus = perturb(1.0);
            let minus = perturb(-1.0);
            if plus.modes != result.modes || minus.modes != result.modes {
                skipped += 1;
                continue;
            }
            clean += 1;
            let fd = (stack(&plus) - stack(&minus)) / (2.0 * eps);
            for i in 0..2 * nv {
                let analytic = if j < 2 * nv {
                    jacs.fx[(i, j)]
                } else {
                    jacs.fu[(i, j - 2 * nv)]
                };
                assert_relative_eq!(analytic, fd[i], max_relative = tol, epsilon = tol);
            }
        }
        assert!(
            clean >= (2 * nv + nu) - 2,
            "too many mode-unstable directions: {skipped}"
        );
    }

    #[test]
    fn step_jacobians_match_finite_differences_in_flight() {
        let model = quadruped();
        let opts = StepOptions::new(DT);
        let mut stance = model.nominal_stance();
        stance.q[BASE_Z] += 0.3;
        stance.qdot[BASE_X] = 0.5;
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5, 1.5]);
        check_jacobians(&model, &stance, &u, &opts, 1e-6);
    }

    #[test]
    fn step_jacobians_match_finite_differences_in_stance() {
        let model = quadruped();
        let opts = StepOptions::new(DT);
        let mut s = model.nominal_stance();
        // Slight penetration keeps both contacts safely active; nonzero
        // torques shift the support enough to unload a foot, so stay at zero.
        s.q[BASE_Z] -= 0.002;
        let u = DVector::zeros(4);
        let result = step(&model, &s, &u, &opts).unwrap();
        assert!(result.modes.iter().all(|m| *m == ContactMode::Clamping));
        check_jacobians(&model, &s, &u, &opts, 1e-4);
    }

    #[test]
    fn step_jacobians_match_finite_differences_while_sliding() {
        let model = quadruped();
        let opts = StepOptions::new(DT);
        let mut s = model.nominal_stance();
        s.q[BASE_Z] -= 0.002;
        s.qdot[BASE_X] = 2.0;
        let u = DVector::zeros(4);
        let result = step(&model, &s, &u, &opts).unwrap();
        assert!(
            result.modes.iter().any(|m| *m == ContactMode::Sliding),
            "expected sliding contact, got {:?}",
            result.modes
        );
        check_jacobians(&model, &s, &u, &opts, 1e-4);
    }

    #[test]
    fn relaxation_changes_only_the_derivatives() {
        let model = quadruped();
        let opts = StepOptions::new(DT);
        let mut s = model.nominal_stance();
        s.q[BASE_Z] -= 0.002;
        let u = DVector::zeros(4);
        let r1 = step(&model, &s, &u, &opts).unwrap();
        let r2 = step(&model, &s, &u, &opts).unwrap();
        assert_eq!(r1.state, r2.state);

        let strict = step_jacobians(&model, &s, &u, &opts, &r1, 0.0).unwrap();
        let relaxed = step_jacobians(&model, &s, &u, &opts, &r1, 1.0).unwrap();
        let diff = (&strict.fx - &relaxed.fx).abs().max();
        assert!(diff > 1e-6, "relaxation had no effect on sensitivities");
    }

    #[test]
    fn relaxed_jacobians_stay_finite_and_bounded() {
        let model = quadruped();
        let opts = StepOptions::new(DT);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let mut s = model.nominal_stance();
            for i in 0..model.nv() {
                s.q[i] += rng.gen_range(-0.05..0.05);
                s.qdot[i] = rng.gen_range(-0.5..0.5);
            }
            let u = DVector::from_fn(model.nu(), |_, _| rng.gen_range(-5.0..5.0));
            let result = step(&model, &s, &u, &opts).unwrap();
            for rho in [0.0, 0.1, 1.0, 10.0] {
                let jacs = step_jacobians(&model, &s, &u, &opts, &result, rho).unwrap();
                assert!(jacs.fx.iter().all(|v| v.is_finite()));
                assert!(jacs.fu.iter().all(|v| v.is_finite()));
            }
        }
    }
}
