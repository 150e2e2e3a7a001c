//! Feasibility-aware multiple-shooting trajectory optimizer.
//!
//! The solver works on a generic discrete problem (step map, per-knot cost,
//! optional control bounds) over a horizon of `N` knots. The decision
//! variables are both the state and control sequences, so an infeasible
//! warm start is allowed: defects `f̄₀ = x̃₀ - x₀`, `f̄ᵢ₊₁ = f(xᵢ,uᵢ) - xᵢ₊₁`
//! are carried explicitly, deflect the gradient in the backward pass, and
//! contract by exactly `1-α` in every accepted forward pass. A single
//! shooting mode closes all defects up front and runs the classic
//! always-feasible recursion, which is what divergence comparisons run
//! against.
//!
//! Curvature is Gauss-Newton throughout (the step linearization is exact,
//! costs supply PSD blocks) with additive Levenberg-style regularization on
//! the control Hessian and the terminal value, scaled up on rejected
//! iterations and down on accepted full steps.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::cost::CostEval;
use crate::Real;

/// Discrete optimal-control problem as seen by the solver.
pub trait ShootingProblem<T: Real> {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    /// Number of running knots `N`; trajectories hold `N+1` states.
    fn horizon(&self) -> usize;

    /// One step of the dynamics.
    fn step(&self, knot: usize, x: &DVector<T>, u: &DVector<T>) -> DVector<T>;

    /// Step together with its state and control Jacobians.
    fn linearize(&self, knot: usize, x: &DVector<T>, u: &DVector<T>) -> StepLinearization<T>;

    fn running_cost(&self, knot: usize, x: &DVector<T>, u: &DVector<T>) -> CostEval<T>;
    fn terminal_cost(&self, x: &DVector<T>) -> CostEval<T>;

    /// Value-only cost paths for rollouts; override when the full
    /// derivative evaluation is noticeably more expensive.
    fn running_cost_value(&self, knot: usize, x: &DVector<T>, u: &DVector<T>) -> T {
        self.running_cost(knot, x, u).value
    }
    fn terminal_cost_value(&self, x: &DVector<T>) -> T {
        self.terminal_cost(x).value
    }

    /// Elementwise control bounds, if any.
    fn control_bounds(&self) -> Option<(DVector<T>, DVector<T>)> {
        None
    }
}

/// Next state with Jacobians of the step map.
#[derive(Debug, Clone)]
pub struct StepLinearization<T: Real> {
    pub next: DVector<T>,
    pub fx: DMatrix<T>,
    pub fu: DMatrix<T>,
}

/// State and control sequences over one horizon.
#[derive(Debug, Clone)]
pub struct Trajectory<T: Real> {
    /// `N+1` states.
    pub states: Vec<DVector<T>>,
    /// `N` controls.
    pub controls: Vec<DVector<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn new(states: Vec<DVector<T>>, controls: Vec<DVector<T>>) -> Self {
        assert_eq!(states.len(), controls.len() + 1);
        Self { states, controls }
    }

    /// Constant-state, zero-control guess.
    pub fn constant(x: &DVector<T>, nu: usize, horizon: usize) -> Self {
        Self {
            states: vec![x.clone(); horizon + 1],
            controls: vec![DVector::zeros(nu); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

/// Whether defects are carried or closed up front.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShootingMode {
    /// Defect-carrying solve; accepts an inconsistent warm start.
    Multiple,
    /// Re-rolls the warm-start controls from the initial state, then runs
    /// with all defects pinned to zero.
    Single,
}

#[derive(Debug, Clone)]
pub struct SolverSettings<T: Real> {
    pub max_iterations: usize,
    /// Converged when the accepted cost change falls below this and the
    /// defects are within `gap_tolerance`.
    pub cost_tolerance: T,
    pub gap_tolerance: T,
    pub reg_init: T,
    pub reg_factor: T,
    pub reg_min: T,
    pub reg_max: T,
    /// Number of step lengths tried: `α = 2⁰, 2⁻¹, …`.
    pub line_search_steps: usize,
    /// Required fraction of the predicted decrease.
    pub accept_ratio: T,
    /// Tolerated multiple of a predicted increase while closing defects.
    pub negative_accept_ratio: T,
    /// Candidate rollouts whose state exceeds this are rejected.
    pub divergence_limit: T,
}

impl<T: Real> Default for SolverSettings<T> {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            cost_tolerance: T::val(1e-6),
            gap_tolerance: T::val(1e-9),
            reg_init: T::val(1e-9),
            reg_factor: T::val(10.0),
            reg_min: T::val(1e-9),
            reg_max: T::val(1e9),
            line_search_steps: 11,
            accept_ratio: T::val(0.1),
            negative_accept_ratio: T::val(2.0),
            divergence_limit: T::val(1e8),
        }
    }
}

/// One line-search iteration of the solve.
#[derive(Debug, Clone)]
pub struct IterationRecord<T: Real> {
    pub cost: T,
    pub gap_norm: T,
    pub alpha: T,
    pub reg: T,
    /// Model-predicted cost change at the tried step (negative = decrease).
    pub expected_change: T,
    pub actual_change: T,
    pub accepted: bool,
    /// `max_i ‖f̄ᵢ' - (1-α) f̄ᵢ‖∞` for the accepted step.
    pub gap_contraction_error: T,
}

#[derive(Debug, Clone)]
pub struct SolveResult<T: Real> {
    pub trajectory: Trajectory<T>,
    pub gaps: Vec<DVector<T>>,
    pub cost: T,
    pub gap_norm: T,
    pub iterations: usize,
    pub converged: bool,
    /// At least one step was accepted.
    pub improved: bool,
    /// Every candidate of some iteration blew up; the result is the last
    /// accepted iterate.
    pub diverged: bool,
    pub records: Vec<IterationRecord<T>>,
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("trajectory shape mismatch: {0}")]
    Dimension(String),
    #[error("initial rollout diverged at knot {knot}")]
    DivergedRollout { knot: usize },
    #[error("non-finite cost at start of solve")]
    NonFiniteCost,
    #[error("control curvature not positive definite at knot {knot} despite maximum regularization")]
    IndefiniteCurvature { knot: usize },
}

/// Defects of a trajectory against an initial state and the dynamics:
/// entry 0 is `x̃₀ - x₀`, entry `i+1` is `f(xᵢ,uᵢ) - xᵢ₊₁`.
pub fn compute_gaps<T: Real, P: ShootingProblem<T>>(
    problem: &P,
    x0: &DVector<T>,
    traj: &Trajectory<T>,
) -> Vec<DVector<T>> {
    let n = traj.horizon();
    let mut gaps = Vec::with_capacity(n + 1);
    gaps.push(x0 - &traj.states[0]);
    for i in 0..n {
        let next = problem.step(i, &traj.states[i], &traj.controls[i]);
        gaps.push(next - &traj.states[i + 1]);
    }
    gaps
}

fn gap_inf_norm<T: Real>(gaps: &[DVector<T>]) -> T {
    let mut m = T::zero();
    for g in gaps {
        for v in g.iter() {
            m = m.max(v.abs());
        }
    }
    m
}

fn total_cost<T: Real, P: ShootingProblem<T>>(problem: &P, traj: &Trajectory<T>) -> T {
    let mut c = T::zero();
    for i in 0..traj.horizon() {
        c += problem.running_cost_value(i, &traj.states[i], &traj.controls[i]);
    }
    c + problem.terminal_cost_value(&traj.states[traj.horizon()])
}

struct BackwardPass<T: Real> {
    k: Vec<DVector<T>>,
    big_k: Vec<DMatrix<T>>,
    vx: Vec<DVector<T>>,
    vxx: Vec<DMatrix<T>>,
    /// `Σ kᵀQᵤ` and `Σ kᵀQᵤᵤk`: the defect-free parts of the expected
    /// improvement model.
    d1_ctrl: T,
    d2_ctrl: T,
}

fn backward_pass<T: Real, P: ShootingProblem<T>>(
    problem: &P,
    traj: &Trajectory<T>,
    gaps: &[DVector<T>],
    reg: T,
    bounds: &Option<(DVector<T>, DVector<T>)>,
) -> Result<BackwardPass<T>, usize> {
    let n = traj.horizon();
    let nx = problem.nx();
    let nu = problem.nu();

    let mut pass = BackwardPass {
        k: vec![DVector::zeros(nu); n],
        big_k: vec![DMatrix::zeros(nu, nx); n],
        vx: vec![DVector::zeros(nx); n + 1],
        vxx: vec![DMatrix::zeros(nx, nx); n + 1],
        d1_ctrl: T::zero(),
        d2_ctrl: T::zero(),
    };

    let terminal = problem.terminal_cost(&traj.states[n]);
    pass.vx[n] = terminal.lx;
    pass.vxx[n] = terminal.lxx + DMatrix::identity(nx, nx) * reg;

    for i in (0..n).rev() {
        let lin = problem.linearize(i, &traj.states[i], &traj.controls[i]);
        let cost = problem.running_cost(i, &traj.states[i], &traj.controls[i]);

        // Defects deflect the gradient of the value function ahead.
        let vx_next = &pass.vx[i + 1] + &pass.vxx[i + 1] * &gaps[i + 1];
        let vxx_next = &pass.vxx[i + 1];

        let fx_t = lin.fx.transpose();
        let fu_t = lin.fu.transpose();
        let vxx_fx = vxx_next * &lin.fx;
        let q_x = &cost.lx + &fx_t * &vx_next;
        let q_u = &cost.lu + &fu_t * &vx_next;
        let q_xx = &cost.lxx + &fx_t * &vxx_fx;
        let q_ux = &cost.lux + &fu_t * &vxx_fx;
        let mut q_uu = &cost.luu + &fu_t * (vxx_next * &lin.fu);
        for d in 0..nu {
            q_uu[(d, d)] += reg;
        }

        let chol = match q_uu.clone().cholesky() {
            Some(c) => c,
            None => return Err(i),
        };
        let mut k = -chol.solve(&q_u);
        let mut big_k = -chol.solve(&q_ux);

        // Project the step onto the control box: clamped coordinates stop
        // reacting to state feedback.
        if let Some((lo, hi)) = bounds {
            let u = &traj.controls[i];
            for j in 0..nu {
                let target = u[j] + k[j];
                if target < lo[j] {
                    k[j] = lo[j] - u[j];
                    big_k.row_mut(j).fill(T::zero());
                } else if target > hi[j] {
                    k[j] = hi[j] - u[j];
                    big_k.row_mut(j).fill(T::zero());
                }
            }
        }

        pass.d1_ctrl += k.dot(&q_u);
        pass.d2_ctrl += (&q_uu * &k).dot(&k);

        let k_t = big_k.transpose();
        pass.vx[i] = &q_x + &k_t * (&q_uu * &k + &q_u) + q_ux.transpose() * &k;
        let vxx = &q_xx + &k_t * (&q_uu * &big_k) + &k_t * &q_ux + q_ux.transpose() * &big_k;
        pass.vxx[i] = (&vxx + vxx.transpose()) * T::val(0.5);

        pass.k[i] = k;
        pass.big_k[i] = big_k;
    }
    Ok(pass)
}

// TEMP scratch-probe hook, removed before release.
#[doc(hidden)]
pub fn debug_direction<T: Real, P: ShootingProblem<T>>(
    problem: &P,
    x0: &DVector<T>,
    traj: &Trajectory<T>,
    reg: T,
    bounds: &Option<(DVector<T>, DVector<T>)>,
    alpha: T,
) -> Option<(Vec<DVector<T>>, Trajectory<T>, T, T, T)> {
    let gaps = compute_gaps(problem, x0, traj);
    let pass = backward_pass(problem, traj, &gaps, reg, bounds).ok()?;
    let cand = try_step(
        problem,
        x0,
        traj,
        &gaps,
        &pass,
        alpha,
        ShootingMode::Multiple,
        bounds,
        T::val(1e6),
    )?;
    Some((pass.k.clone(), cand.traj, cand.cost, cand.d1, cand.d2))
}

struct Candidate<T: Real> {
    traj: Trajectory<T>,
    gaps: Vec<DVector<T>>,
    cost: T,
    /// Full expected-improvement coefficients including defect terms.
    d1: T,
    d2: T,
}

#[allow(clippy::too_many_arguments)]
fn try_step<T: Real, P: ShootingProblem<T>>(
    problem: &P,
    x0: &DVector<T>,
    traj: &Trajectory<T>,
    gaps: &[DVector<T>],
    pass: &BackwardPass<T>,
    alpha: T,
    mode: ShootingMode,
    bounds: &Option<(DVector<T>, DVector<T>)>,
    limit: T,
) -> Option<Candidate<T>> {
    let n = traj.horizon();
    let keep = alpha - T::one();

    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    let mut new_gaps = Vec::with_capacity(n + 1);
    let mut d1 = pass.d1_ctrl;
    let mut d2 = pass.d2_ctrl;
    let two = T::val(2.0);

    let x_start = match mode {
        ShootingMode::Multiple => x0 + &gaps[0] * keep,
        ShootingMode::Single => x0.clone(),
    };
    new_gaps.push(x0 - &x_start);
    states.push(x_start);

    for i in 0..n {
        let dx = &states[i] - &traj.states[i];
        let gap = &gaps[i];
        d1 += gap.dot(&pass.vx[i]) - gap.dot(&(&pass.vxx[i] * &dx));
        d2 += two * gap.dot(&(&pass.vxx[i] * &dx)) - gap.dot(&(&pass.vxx[i] * gap));

        let mut u = &traj.controls[i] + &pass.k[i] * alpha + &pass.big_k[i] * &dx;
        if let Some((lo, hi)) = bounds {
            for j in 0..u.len() {
                u[j] = u[j].max(lo[j]).min(hi[j]);
            }
        }
        let fval = problem.step(i, &states[i], &u);
        if !fval.iter().all(|v| v.is_finite()) || fval.amax() > limit {
            return None;
        }
        let next = match mode {
            ShootingMode::Multiple => &fval + &gaps[i + 1] * keep,
            ShootingMode::Single => fval.clone(),
        };
        new_gaps.push(&fval - &next);
        states.push(next);
        controls.push(u);
    }

    let dx_n = &states[n] - &traj.states[n];
    let gap_n = &gaps[n];
    d1 += gap_n.dot(&pass.vx[n]) - gap_n.dot(&(&pass.vxx[n] * &dx_n));
    d2 += two * gap_n.dot(&(&pass.vxx[n] * &dx_n)) - gap_n.dot(&(&pass.vxx[n] * gap_n));

    let cand = Trajectory::new(states, controls);
    let cost = total_cost(problem, &cand);
    if !cost.is_finite() {
        return None;
    }
    Some(Candidate {
        traj: cand,
        gaps: new_gaps,
        cost,
        d1,
        d2,
    })
}

/// Optimizes the trajectory from `init` toward a local minimum of the
/// problem's cost, treating `x0` as the fixed measured initial state.
pub fn solve<T: Real, P: ShootingProblem<T>>(
    problem: &P,
    x0: &DVector<T>,
    init: Trajectory<T>,
    mode: ShootingMode,
    settings: &SolverSettings<T>,
) -> Result<SolveResult<T>, SolverError> {
    let n = problem.horizon();
    if init.horizon() != n {
        return Err(SolverError::Dimension(format!(
            "horizon {} != problem horizon {n}",
            init.horizon()
        )));
    }
    if x0.len() != problem.nx() {
        return Err(SolverError::Dimension(format!(
            "initial state length {} != nx {}",
            x0.len(),
            problem.nx()
        )));
    }
    for (i, x) in init.states.iter().enumerate() {
        if x.len() != problem.nx() {
            return Err(SolverError::Dimension(format!("state {i} has length {}", x.len())));
        }
    }
    for (i, u) in init.controls.iter().enumerate() {
        if u.len() != problem.nu() {
            return Err(SolverError::Dimension(format!(
                "control {i} has length {}",
                u.len()
            )));
        }
    }

    let mut traj = init;
    if mode == ShootingMode::Single {
        // Close every defect up front by rolling the warm-start controls
        // out from the measured state.
        traj.states[0] = x0.clone();
        for i in 0..n {
            let next = problem.step(i, &traj.states[i], &traj.controls[i]);
            if !next.iter().all(|v| v.is_finite()) || next.amax() > settings.divergence_limit {
                return Err(SolverError::DivergedRollout { knot: i });
            }
            traj.states[i + 1] = next;
        }
    }

    let mut gaps = compute_gaps(problem, x0, &traj);
    let mut cost = total_cost(problem, &traj);
    if !cost.is_finite() {
        return Err(SolverError::NonFiniteCost);
    }

    let bounds = problem.control_bounds();
    let mut reg = settings.reg_init;
    let mut records = Vec::new();
    let mut converged = false;
    let mut improved = false;
    let mut diverged = false;

    for _ in 0..settings.max_iterations {
        let pass = loop {
            match backward_pass(problem, &traj, &gaps, reg, &bounds) {
                Ok(p) => break p,
                Err(knot) => {
                    if reg >= settings.reg_max {
                        return Err(SolverError::IndefiniteCurvature { knot });
                    }
                    reg = (reg * settings.reg_factor).min(settings.reg_max);
                }
            }
        };

        let gap_norm = gap_inf_norm(&gaps);
        let feasible = gap_norm < settings.gap_tolerance;
        // Nothing left to gain from the control terms and no defects to
        // close: done without spending a line search.
        let predicted_drop = -(pass.d1_ctrl + pass.d2_ctrl * T::val(0.5));
        if feasible && predicted_drop.abs() < settings.cost_tolerance {
            converged = true;
            break;
        }

        let mut accepted = false;
        let mut all_diverged = true;
        let mut alpha = T::one();
        for _ in 0..settings.line_search_steps {
            let cand = match try_step(
                problem, x0, &traj, &gaps, &pass, alpha, mode, &bounds,
                settings.divergence_limit,
            ) {
                Some(c) => c,
                None => {
                    alpha *= T::val(0.5);
                    continue;
                }
            };
            all_diverged = false;

            let expected_change = alpha * cand.d1 + alpha * alpha * cand.d2 * T::val(0.5);
            let expected_drop = -expected_change;
            let actual_drop = cost - cand.cost;
            let ok = if expected_drop >= T::zero() {
                actual_drop >= settings.accept_ratio * expected_drop
            } else {
                actual_drop >= settings.negative_accept_ratio * expected_drop
            };

            if ok {
                let mut contraction_err = T::zero();
                let shrink = T::one() - alpha;
                for (new, old) in cand.gaps.iter().zip(gaps.iter()) {
                    let residual = new - old * shrink;
                    contraction_err = contraction_err.max(residual.amax());
                }
                let new_gap_norm = gap_inf_norm(&cand.gaps);
                records.push(IterationRecord {
                    cost: cand.cost,
                    gap_norm: new_gap_norm,
                    alpha,
                    reg,
                    expected_change,
                    actual_change: -actual_drop,
                    accepted: true,
                    gap_contraction_error: contraction_err,
                });
                let small = actual_drop.abs() < settings.cost_tolerance;
                traj = cand.traj;
                gaps = cand.gaps;
                cost = cand.cost;
                improved = true;
                accepted = true;
                if alpha == T::one() {
                    reg = (reg / settings.reg_factor).max(settings.reg_min);
                }
                if small && new_gap_norm < settings.gap_tolerance {
                    converged = true;
                }
                break;
            }
            alpha *= T::val(0.5);
        }

        if !accepted {
            records.push(IterationRecord {
                cost,
                gap_norm,
                alpha: T::zero(),
                reg,
                expected_change: T::zero(),
                actual_change: T::zero(),
                accepted: false,
                gap_contraction_error: T::zero(),
            });
            if all_diverged {
                diverged = true;
                break;
            }
            if reg >= settings.reg_max {
                break;
            }
            reg = (reg * settings.reg_factor).min(settings.reg_max);
        }
        if converged {
            break;
        }
    }

    let gap_norm = gap_inf_norm(&gaps);
    Ok(SolveResult {
        iterations: records.len(),
        trajectory: traj,
        gaps,
        cost,
        gap_norm,
        converged,
        improved,
        diverged,
        records,
    })
}
