//! Receding-horizon control loop.
//!
//! Each cycle shifts the previous plan by one knot (last control zeroed,
//! terminal state extended by a zero-torque step), re-arms the air-time
//! schedule from the shifted plan, re-solves with a small iteration cap from
//! the measured state (the measurement enters as the first defect, never by
//! overwriting the plan), and hands the first feed-forward torque plus the
//! next knot's joint references to a PD layer running at the plant rate.
//!
//! The closed loop steps the plant at a finer timestep than the solve
//! period, holds the PD references over each cycle, and supports deliberate
//! plant discrepancies: an initial state offset, a foot-length mismatch
//! against the controller's model, and a scheduled friction change.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector2};
use thiserror::Error;

use crate::contact::ContactMode;
use crate::cost::{update_airtime_schedule, CostStack, CostWeights};
use crate::model::{
    GeneralizedState, ModelError, ModelParams, RobotModel, BASE_PITCH, BASE_X, BASE_Z, JOINT_0,
};
use crate::ocp::{pack_state, OcProblem};
use crate::solver::{
    compute_gaps, solve, IterationRecord, ShootingMode, ShootingProblem, SolverError,
    SolverSettings, Trajectory,
};
use crate::stepper::{step, StepOptions};
use crate::Real;

/// Joint-space PD gains used by the command layer.
#[derive(Debug, Clone, Copy)]
pub struct PdGains<T: Real> {
    pub kp: T,
    pub kd: T,
}

impl<T: Real> Default for PdGains<T> {
    fn default() -> Self {
        Self {
            kp: T::val(50.0),
            kd: T::val(1.0),
        }
    }
}

/// High-level objective of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskSpec<T: Real> {
    /// Hold the nominal stance.
    Stand,
    /// Regulate the base toward `height` above the stance height.
    JumpUp { height: T },
    /// Track a forward base velocity; the position reference is refreshed
    /// one horizon ahead of the measured base every cycle.
    MoveForward { speed: T },
    /// Hold stance with a pitched base.
    PitchTarget { pitch: T },
}

/// Reference state the cost regulates toward for a task.
fn task_reference<T: Real>(
    model: &RobotModel<T>,
    task: TaskSpec<T>,
    measured: &GeneralizedState<T>,
    lookahead: T,
) -> GeneralizedState<T> {
    let mut r = model.nominal_stance();
    match task {
        TaskSpec::Stand => {}
        TaskSpec::JumpUp { height } => r.q[BASE_Z] += height,
        TaskSpec::PitchTarget { pitch } => r.q[BASE_PITCH] = pitch,
        TaskSpec::MoveForward { speed } => {
            r.q[BASE_X] = measured.q[BASE_X] + speed * lookahead;
            r.qdot[BASE_X] = speed;
        }
    }
    r
}

#[derive(Debug, Clone)]
pub struct MpcSettings<T: Real> {
    /// Knots per solve.
    pub horizon: usize,
    /// Knot duration, also the re-solve period.
    pub dt: T,
    /// Impulse-sensitivity relaxation passed to the problem linearization.
    pub rho: T,
    /// Solver iteration cap per cycle.
    pub max_iterations: usize,
    pub mode: ShootingMode,
    pub gains: PdGains<T>,
    /// Base solver settings; the iteration cap above overrides its
    /// `max_iterations` on every cycle.
    pub solver: SolverSettings<T>,
}

impl<T: Real> Default for MpcSettings<T> {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: T::val(0.025),
            rho: T::val(0.25),
            max_iterations: 4,
            mode: ShootingMode::Multiple,
            gains: PdGains::default(),
            solver: SolverSettings::default(),
        }
    }
}

/// Deliberate controller/plant discrepancies.
#[derive(Debug, Clone)]
pub struct PerturbationSpec<T: Real> {
    /// Added to the plant's initial packed state; empty means none.
    pub initial_state_offset: DVector<T>,
    /// Added to the plant's lower-leg lengths: the plant's feet sit this
    /// far below where the controller's model believes them to be.
    pub foot_height_mismatch: T,
    /// `(time, friction)` switch points applied to the plant.
    pub friction_schedule: Vec<(T, T)>,
}

impl<T: Real> Default for PerturbationSpec<T> {
    fn default() -> Self {
        Self {
            initial_state_offset: DVector::zeros(0),
            foot_height_mismatch: T::zero(),
            friction_schedule: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClosedLoopConfig<T: Real> {
    pub duration: T,
    /// Plant integration step; the MPC period `settings.dt` must be an
    /// integer multiple of it.
    pub control_dt: T,
    pub task: TaskSpec<T>,
    pub settings: MpcSettings<T>,
    pub perturbation: PerturbationSpec<T>,
    /// Penetration-recovery bias in the plant stepper.
    pub plant_stabilization: bool,
    pub seed: u64,
}

impl<T: Real> ClosedLoopConfig<T> {
    pub fn new(task: TaskSpec<T>, duration: T) -> Self {
        Self {
            duration,
            control_dt: T::val(1e-3),
            task,
            settings: MpcSettings::default(),
            perturbation: PerturbationSpec::default(),
            plant_stabilization: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum MpcError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("initialization solve failed: {0}")]
    Solver(#[from] SolverError),
    #[error("standing initialization did not converge (cost {cost}, gap {gap})")]
    StandingNotConverged { cost: f64, gap: f64 },
    #[error("MPC period {mpc} s is not an integer multiple of the plant step {plant} s")]
    PeriodMismatch { mpc: f64, plant: f64 },
    #[error("initial state offset has length {got}, expected {expected}")]
    OffsetDimension { got: usize, expected: usize },
}

/// Why a closed-loop run stopped early. Solver trouble is not fatal (the
/// cycle falls back to the shifted plan); only the plant leaving its sanity
/// envelope ends a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureReason {
    NonFiniteState,
    /// Plant state left the plausible envelope.
    StateExploded,
    /// Base dropped or rolled past recovery.
    Fell,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FailureReason::NonFiniteState => "non-finite plant state",
            FailureReason::StateExploded => "plant state exploded",
            FailureReason::Fell => "robot fell",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct FailureRecord<T: Real> {
    pub t: T,
    pub cycle: usize,
    pub reason: FailureReason,
}

/// Per-cycle solve outcome.
#[derive(Debug, Clone)]
pub struct CycleRecord<T: Real> {
    pub t: T,
    pub cycle: usize,
    pub cost: T,
    pub gap_norm: T,
    pub initial_gap_norm: T,
    pub iterations: usize,
    pub fell_back: bool,
    /// The cycle's solve errored outright or lost every forward-pass
    /// candidate at some iteration.
    pub solve_failed: bool,
    pub warm_start_consistent: bool,
    pub gap_provenance_ok: bool,
    pub records: Vec<IterationRecord<T>>,
    /// Wall-clock solve time; everything else in the log is deterministic.
    pub solve_wall_ms: f64,
}

/// Per-plant-step sample.
#[derive(Debug, Clone)]
pub struct SampleRecord<T: Real> {
    pub t: T,
    pub state: GeneralizedState<T>,
    pub u_cmd: DVector<T>,
    pub u_ff: DVector<T>,
    /// Post-step foot heights.
    pub foot_gaps: Vec<T>,
    /// Contact impulses `[tangential, normal]` per foot over this step.
    pub foot_impulses: Vec<Vector2<T>>,
    pub foot_modes: Vec<ContactMode>,
    pub cycle: usize,
}

#[derive(Debug, Clone)]
pub struct ExecutionLog<T: Real> {
    pub samples: Vec<SampleRecord<T>>,
    pub cycles: Vec<CycleRecord<T>>,
    pub failure: Option<FailureRecord<T>>,
    pub seed: u64,
}

/// Output of one MPC cycle: the feed-forward torque and the next knot's
/// joint references for the PD layer, plus solve statistics.
#[derive(Debug, Clone)]
pub struct MpcOutput<T: Real> {
    pub u_ff: DVector<T>,
    pub joint_pos_ref: DVector<T>,
    pub joint_vel_ref: DVector<T>,
    pub cost: T,
    pub gap_norm: T,
    pub initial_gap_norm: T,
    pub iterations: usize,
    pub fell_back: bool,
    pub solve_failed: bool,
    pub warm_start_consistent: bool,
    pub gap_provenance_ok: bool,
    pub records: Vec<IterationRecord<T>>,
    pub solve_wall_ms: f64,
}

/// A torque vector satisfying the static force balance `Bu + Jᵀf = h(q, 0)`
/// at the given configuration, from the least-norm solution of the stacked
/// system. Returns zeros if the balance has no solution (feet off the
/// ground, no legs).
fn statics_torque<T: Real>(model: &RobotModel<T>, q: &DVector<T>) -> DVector<T> {
    let nv = model.nv();
    let nu = model.nu();
    let n_feet = model.n_feet();
    let h = model.bias_forces(q, &DVector::zeros(nv));
    let mut a = DMatrix::zeros(nv, nu + 2 * n_feet);
    a.view_mut((0, 0), (nv, nu)).copy_from(&model.input_matrix());
    for k in 0..n_feet {
        let jt = model.contact_jacobian(q, k).transpose();
        a.view_mut((0, nu + 2 * k), (nv, 2)).copy_from(&jt);
    }
    match a.svd(true, true).solve(&h, T::val(1e-10)) {
        Ok(sol) => sol.rows(0, nu).clone_owned(),
        Err(_) => DVector::zeros(nu),
    }
}

/// Solves a short trajectory-optimization problem that holds the nominal
/// stance; the result seeds every closed-loop run.
pub fn make_standing_trajectory<T: Real>(
    model: &RobotModel<T>,
    weights: &CostWeights<T>,
    dt: T,
    horizon: usize,
    solver_settings: &SolverSettings<T>,
) -> Result<Trajectory<T>, MpcError> {
    let reference = model.nominal_stance();
    let cost = CostStack::new(model, weights.clone(), reference.clone(), horizon);
    let problem = OcProblem::new(model.clone(), cost, dt, horizon, T::zero());
    let x0 = pack_state(&reference);
    // Warm-starting at force balance keeps the solve in the stationary
    // basin; a zero-torque rollout starts with the robot buckling.
    let u0 = statics_torque(model, &reference.q);
    let mut init = Trajectory::constant(&x0, model.nu(), horizon);
    for c in init.controls.iter_mut() {
        c.copy_from(&u0);
    }
    // Initialization runs offline; polish well past the online tolerances
    // so the loop starts from a genuinely stationary plan.
    let mut settings = solver_settings.clone();
    settings.max_iterations = settings.max_iterations.max(200);
    settings.cost_tolerance = settings.cost_tolerance.min(T::val(1e-12));
    let result = solve(&problem, &x0, init, ShootingMode::Multiple, &settings)?;
    if !result.converged {
        return Err(MpcError::StandingNotConverged {
            cost: result.cost.lossy_f64(),
            gap: result.gap_norm.lossy_f64(),
        });
    }
    Ok(result.trajectory)
}

/// Shifts a plan one knot toward now: states and controls move left, the
/// last control is zero, and the terminal state is extended by a
/// zero-torque step. The measured state is *not* written into the plan; it
/// enters the next solve as the initial defect.
pub fn warm_start_shift<T: Real, P: ShootingProblem<T>>(
    problem: &P,
    plan: &Trajectory<T>,
) -> Trajectory<T> {
    let n = plan.horizon();
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    for i in 1..=n {
        states.push(plan.states[i].clone());
    }
    for i in 1..n {
        controls.push(plan.controls[i].clone());
    }
    controls.push(DVector::zeros(problem.nu()));
    let last = problem.step(n - 1, &states[n - 1], &controls[n - 1]);
    // If the extension step breaks (a wild enough tail state can), hold
    // the last knot instead; the defect it leaves is the solver's to
    // close, and a finite warm start keeps the fallback commands sane.
    if last.iter().all(|v| v.is_finite()) {
        states.push(last);
    } else {
        states.push(states[n - 1].clone());
    }
    Trajectory::new(states, controls)
}

/// Feed-forward plus joint PD, clamped to the torque box. With perfect
/// tracking the command reduces to the feed-forward torque.
pub fn pd_command<T: Real>(
    gains: &PdGains<T>,
    torque_limit: T,
    u_ff: &DVector<T>,
    joint_pos_ref: &DVector<T>,
    joint_vel_ref: &DVector<T>,
    state: &GeneralizedState<T>,
) -> DVector<T> {
    let nu = u_ff.len();
    let mut u = DVector::zeros(nu);
    for j in 0..nu {
        let p_err = joint_pos_ref[j] - state.q[JOINT_0 + j];
        let v_err = joint_vel_ref[j] - state.qdot[JOINT_0 + j];
        let cmd = u_ff[j] + gains.kp * p_err + gains.kd * v_err;
        u[j] = cmd.max(-torque_limit).min(torque_limit);
    }
    u
}

pub struct MpcController<T: Real> {
    problem: OcProblem<T>,
    task: TaskSpec<T>,
    settings: MpcSettings<T>,
    plan: Trajectory<T>,
    cycle: usize,
}

impl<T: Real> MpcController<T> {
    pub fn new(
        model: RobotModel<T>,
        weights: CostWeights<T>,
        task: TaskSpec<T>,
        settings: MpcSettings<T>,
    ) -> Result<Self, MpcError> {
        let plan =
            make_standing_trajectory(&model, &weights, settings.dt, settings.horizon, &settings.solver)?;
        let lookahead = settings.dt * T::val(settings.horizon as f64);
        let reference = task_reference(&model, task, &model.nominal_stance(), lookahead);
        let cost = CostStack::new(&model, weights, reference, settings.horizon);
        let problem = OcProblem::new(model, cost, settings.dt, settings.horizon, settings.rho);
        Ok(Self {
            problem,
            task,
            settings,
            plan,
            cycle: 0,
        })
    }

    pub fn problem(&self) -> &OcProblem<T> {
        &self.problem
    }

    pub fn plan(&self) -> &Trajectory<T> {
        &self.plan
    }

    pub fn cycle(&self) -> usize {
        self.cycle
    }

    /// One receding-horizon cycle from the measured state. Never fails: a
    /// broken solve falls back to the shifted previous plan and is flagged.
    pub fn mpc_step(&mut self, measured: &GeneralizedState<T>) -> MpcOutput<T> {
        let started = Instant::now();
        let n = self.problem.horizon();
        let shifted = warm_start_shift(&self.problem, &self.plan);

        // Structural shift invariants, checked rather than assumed.
        let mut warm_ok = true;
        for i in 0..n {
            warm_ok &= shifted.states[i] == self.plan.states[i + 1];
        }
        for i in 0..n - 1 {
            warm_ok &= shifted.controls[i] == self.plan.controls[i + 1];
        }
        warm_ok &= shifted.controls[n - 1].iter().all(|v| *v == T::zero());

        // Only the measurement defect may be nonzero at cycle start.
        let x0 = pack_state(measured);
        let init_gaps = compute_gaps(&self.problem, &x0, &shifted);
        let initial_gap_norm = init_gaps[0].amax();
        let tail = init_gaps[1..]
            .iter()
            .fold(T::zero(), |m, g| m.max(g.amax()));
        let provenance_ok = tail <= T::val(1e-8);

        let planned = self.problem.planned_foot_gaps(&shifted.states);
        let trigger = self.problem.cost.weights.air_time_trigger;
        update_airtime_schedule(&mut self.problem.cost.schedule, &planned, trigger);

        if let TaskSpec::MoveForward { .. } = self.task {
            let lookahead = self.settings.dt * T::val(n as f64);
            self.problem.cost.reference =
                task_reference(self.problem.model(), self.task, measured, lookahead);
        }

        let mut solver_settings = self.settings.solver.clone();
        solver_settings.max_iterations = self.settings.max_iterations;
        let result = solve(
            &self.problem,
            &x0,
            shifted.clone(),
            self.settings.mode,
            &solver_settings,
        );
        let solve_wall_ms = started.elapsed().as_secs_f64() * 1e3;

        let (fell_back, solve_failed, cost, gap_norm, iterations, records) = match result {
            Ok(r) => {
                let usable = r.improved || r.converged;
                self.plan = if usable { r.trajectory } else { shifted };
                (!usable, r.diverged, r.cost, r.gap_norm, r.iterations, r.records)
            }
            Err(_) => {
                // Keep flying on the shifted plan; the next measurement gives
                // the solver a fresh start.
                let cost = (0..n)
                    .map(|i| {
                        self.problem
                            .running_cost(i, &shifted.states[i], &shifted.controls[i])
                            .value
                    })
                    .fold(T::zero(), |a, b| a + b)
                    + self.problem.terminal_cost(&shifted.states[n]).value;
                self.plan = shifted;
                (true, true, cost, initial_gap_norm.max(tail), 0, Vec::new())
            }
        };
        self.cycle += 1;

        let nv = self.problem.model().nv();
        let nu = self.problem.nu();
        let next = &self.plan.states[1];
        let joint_pos_ref = DVector::from_fn(nu, |j, _| next[JOINT_0 + j]);
        let joint_vel_ref = DVector::from_fn(nu, |j, _| next[nv + JOINT_0 + j]);

        MpcOutput {
            u_ff: self.plan.controls[0].clone(),
            joint_pos_ref,
            joint_vel_ref,
            cost,
            gap_norm,
            initial_gap_norm,
            iterations,
            fell_back,
            solve_failed,
            warm_start_consistent: warm_ok,
            gap_provenance_ok: provenance_ok,
            records,
            solve_wall_ms,
        }
    }
}

/// Plant-state sanity envelope; leaving it terminates a run.
const EXPLODE_VELOCITY: f64 = 1e3;
const EXPLODE_POSITION: f64 = 1e2;
const FALL_BASE_HEIGHT: f64 = 0.08;
const FALL_PITCH: f64 = 2.5;

fn plant_failure<T: Real>(state: &GeneralizedState<T>) -> Option<FailureReason> {
    if !state.is_finite() {
        return Some(FailureReason::NonFiniteState);
    }
    if state.qdot.amax() > T::val(EXPLODE_VELOCITY) || state.q.amax() > T::val(EXPLODE_POSITION) {
        return Some(FailureReason::StateExploded);
    }
    if state.q[BASE_Z] < T::val(FALL_BASE_HEIGHT) || state.q[BASE_PITCH].abs() > T::val(FALL_PITCH)
    {
        return Some(FailureReason::Fell);
    }
    None
}

/// Runs the full control loop against a fine-stepped plant built from
/// `params` with the configured discrepancies applied.
pub fn run_closed_loop<T: Real>(
    params: &ModelParams<T>,
    weights: CostWeights<T>,
    config: &ClosedLoopConfig<T>,
) -> Result<ExecutionLog<T>, MpcError> {
    let period = config.settings.dt.lossy_f64();
    let plant_dt = config.control_dt.lossy_f64();
    let ratio = period / plant_dt;
    let steps_per_cycle = ratio.round() as usize;
    if steps_per_cycle == 0 || (ratio - steps_per_cycle as f64).abs() > 1e-9 {
        return Err(MpcError::PeriodMismatch {
            mpc: period,
            plant: plant_dt,
        });
    }

    let controller_model = RobotModel::planar_quadruped(params.clone())?;
    let nv = controller_model.nv();
    let torque_limit = controller_model.torque_limit();
    let mut controller =
        MpcController::new(controller_model, weights, config.task, config.settings.clone())?;

    let mut plant_params = params.clone();
    for leg in &mut plant_params.legs {
        leg.lower_length += config.perturbation.foot_height_mismatch;
    }
    let mut plant_model = RobotModel::planar_quadruped(plant_params.clone())?;
    let mut active_friction = plant_params.friction;
    let mut plant_opts = StepOptions::new(config.control_dt);
    plant_opts.stabilization = config.plant_stabilization;

    // The plant starts where the controller believes the stance is, plus
    // the injected offset.
    let mut state = controller.problem().model().nominal_stance();
    let offset = &config.perturbation.initial_state_offset;
    if !offset.is_empty() {
        if offset.len() != 2 * nv {
            return Err(MpcError::OffsetDimension {
                got: offset.len(),
                expected: 2 * nv,
            });
        }
        for i in 0..nv {
            state.q[i] += offset[i];
            state.qdot[i] += offset[nv + i];
        }
    }

    let n_cycles = (config.duration.lossy_f64() / period).round() as usize;
    let mut log = ExecutionLog {
        samples: Vec::new(),
        cycles: Vec::new(),
        failure: None,
        seed: config.seed,
    };
    let mut schedule_idx = 0;

    'cycles: for cycle in 0..n_cycles {
        let t_cycle = T::val(cycle as f64) * config.settings.dt;

        while schedule_idx < config.perturbation.friction_schedule.len()
            && config.perturbation.friction_schedule[schedule_idx].0
                <= t_cycle + T::val(1e-12)
        {
            let mu = config.perturbation.friction_schedule[schedule_idx].1;
            if mu != active_friction {
                plant_params.friction = mu;
                plant_model = RobotModel::planar_quadruped(plant_params.clone())?;
                active_friction = mu;
            }
            schedule_idx += 1;
        }

        let out = controller.mpc_step(&state);
        log.cycles.push(CycleRecord {
            t: t_cycle,
            cycle,
            cost: out.cost,
            gap_norm: out.gap_norm,
            initial_gap_norm: out.initial_gap_norm,
            iterations: out.iterations,
            fell_back: out.fell_back,
            solve_failed: out.solve_failed,
            warm_start_consistent: out.warm_start_consistent,
            gap_provenance_ok: out.gap_provenance_ok,
            records: out.records.clone(),
            solve_wall_ms: out.solve_wall_ms,
        });

        for k in 0..steps_per_cycle {
            let u_cmd = pd_command(
                &config.settings.gains,
                torque_limit,
                &out.u_ff,
                &out.joint_pos_ref,
                &out.joint_vel_ref,
                &state,
            );
            let result = match step(&plant_model, &state, &u_cmd, &plant_opts) {
                Ok(r) => r,
                Err(_) => {
                    log.failure = Some(FailureRecord {
                        t: t_cycle,
                        cycle,
                        reason: FailureReason::NonFiniteState,
                    });
                    break 'cycles;
                }
            };
            state = result.state;
            let t = t_cycle + T::val((k + 1) as f64) * config.control_dt;

            log.samples.push(SampleRecord {
                t,
                state: state.clone(),
                u_cmd,
                u_ff: out.u_ff.clone(),
                foot_gaps: (0..plant_model.n_feet())
                    .map(|f| plant_model.foot_height(&state.q, f))
                    .collect(),
                foot_impulses: result.impulses.clone(),
                foot_modes: result.modes.clone(),
                cycle,
            });

            if let Some(reason) = plant_failure(&state) {
                log.failure = Some(FailureRecord { t, cycle, reason });
                break 'cycles;
            }
        }
    }
    Ok(log)
}
