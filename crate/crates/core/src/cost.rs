//! Running and terminal cost terms with Gauss-Newton curvature.
//!
//! Four terms, summed per knot:
//!
//! - regulating: diagonal quadratic on state deviation and control effort;
//!   the terminal knot scales the state part by `terminal_scale` and has no
//!   control term.
//! - foot slip: `c_f Σ_k S(c_1 φ_k) (vᵗ_k)²` with a logistic `S`; the sigmoid
//!   gates the tangential foot speed by proximity to the ground (0.5 at
//!   touchdown, vanishing once the foot is lifted), discouraging slip without
//!   hard-switching on the contact state.
//! - air time: `c_a φ_k²` at scheduled (foot, knot) pairs; the schedule is
//!   armed for legs whose planned swing lasts too long, pulling them back to
//!   the ground.
//! - symmetry: `c_s ‖C₂ u‖²` penalizing front/hind torque differences.
//!
//! Gradients are exact everywhere. Hessians are exact for the quadratic
//! terms and Gauss-Newton (`2 ∂r ∂rᵀ` of the term's residual) for the two
//! kinematic terms, which keeps every block PSD by construction.

use nalgebra::{DMatrix, DVector};

use crate::model::{GeneralizedState, RobotModel};
use crate::Real;

/// Diagonal weights and term parameters.
#[derive(Debug, Clone)]
pub struct CostWeights<T: Real> {
    /// State deviation weights, length `2 nv` (positions then velocities).
    pub state: DVector<T>,
    /// Control effort weights, length `nu`.
    pub control: DVector<T>,
    /// Terminal multiplier on the state weights.
    pub terminal_scale: T,
    /// Foot-slip weight `c_f`; 0 disables the term.
    pub foot: T,
    /// Sigmoid sharpness `c_1` (negative: cost fades as the foot lifts).
    pub foot_sharpness: T,
    /// Air-time weight `c_a`; 0 disables the term.
    pub air_time: T,
    /// Swing-length trigger `i_t` in knots.
    pub air_time_trigger: usize,
    /// Torque-symmetry weight `c_s`; 0 disables the term.
    pub symmetry: T,
}

impl<T: Real> CostWeights<T> {
    /// Default weights for the planar quadruped: base position 1, height 10,
    /// pitch 10, joint angles 0.1, all velocities and controls 5e-4.
    pub fn defaults(nv: usize, nu: usize) -> Self {
        let mut state = DVector::from_element(2 * nv, T::val(5e-4));
        if nv >= 3 {
            state[0] = T::one();
            state[1] = T::val(10.0);
            state[2] = T::val(10.0);
            for i in 3..nv {
                state[i] = T::val(0.1);
            }
        }
        Self {
            state,
            control: DVector::from_element(nu, T::val(5e-4)),
            terminal_scale: T::val(10.0),
            foot: T::one(),
            foot_sharpness: T::val(-30.0),
            air_time: T::val(2e3),
            air_time_trigger: 12,
            symmetry: T::val(1e-2),
        }
    }
}

/// Value, gradient, and curvature blocks of a cost at one knot.
#[derive(Debug, Clone)]
pub struct CostEval<T: Real> {
    pub value: T,
    pub lx: DVector<T>,
    pub lu: DVector<T>,
    pub lxx: DMatrix<T>,
    pub luu: DMatrix<T>,
    /// `∂²l/∂u∂x`, `nu x nx`.
    pub lux: DMatrix<T>,
}

impl<T: Real> CostEval<T> {
    pub fn zeros(nx: usize, nu: usize) -> Self {
        Self {
            value: T::zero(),
            lx: DVector::zeros(nx),
            lu: DVector::zeros(nu),
            lxx: DMatrix::zeros(nx, nx),
            luu: DMatrix::zeros(nu, nu),
            lux: DMatrix::zeros(nu, nx),
        }
    }

    fn add(&mut self, other: &CostEval<T>) {
        self.value += other.value;
        self.lx += &other.lx;
        self.lu += &other.lu;
        self.lxx += &other.lxx;
        self.luu += &other.luu;
        self.lux += &other.lux;
    }
}

/// Per-foot, per-knot air-time activation flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AirTimeSchedule {
    /// `active[foot][knot]` over the running knots `0..n_knots`.
    active: Vec<Vec<bool>>,
}

impl AirTimeSchedule {
    pub fn inactive(n_feet: usize, n_knots: usize) -> Self {
        Self {
            active: vec![vec![false; n_knots]; n_feet],
        }
    }

    pub fn n_feet(&self) -> usize {
        self.active.len()
    }

    pub fn n_knots(&self) -> usize {
        self.active.first().map_or(0, Vec::len)
    }

    pub fn is_active(&self, foot: usize, knot: usize) -> bool {
        self.active
            .get(foot)
            .and_then(|row| row.get(knot))
            .copied()
            .unwrap_or(false)
    }

    pub fn any_active(&self) -> bool {
        self.active.iter().flatten().any(|&a| a)
    }

    /// Moves every activation one knot closer to now, dropping what falls
    /// off the front. Called once per MPC cycle before re-triggering.
    pub fn shift_toward_now(&mut self) {
        for row in &mut self.active {
            if !row.is_empty() {
                row.remove(0);
                row.push(false);
            }
        }
    }
}

/// Foot height threshold that counts as "in swing" for the schedule scan.
pub const SWING_GAP_THRESHOLD: f64 = 1e-4;

/// Shifts the previous schedule and arms `trigger..trigger+4` for every foot
/// whose longest consecutive swing run in the planned gaps exceeds `trigger`
/// knots. `planned_gaps[i][k]` is foot `k`'s height at knot `i` of the
/// initial trajectory for the upcoming solve.
pub fn update_airtime_schedule<T: Real>(
    schedule: &mut AirTimeSchedule,
    planned_gaps: &[Vec<T>],
    trigger: usize,
) {
    schedule.shift_toward_now();
    let n_knots = schedule.n_knots();
    let threshold = T::val(SWING_GAP_THRESHOLD);
    for foot in 0..schedule.n_feet() {
        let mut longest = 0usize;
        let mut run = 0usize;
        for knot_gaps in planned_gaps {
            if knot_gaps[foot] > threshold {
                run += 1;
                longest = longest.max(run);
            } else {
                run = 0;
            }
        }
        if longest > trigger {
            for i in trigger..(trigger + 4).min(n_knots) {
                schedule.active[foot][i] = true;
            }
        }
    }
}

/// Quadratic state/control regulation toward a fixed reference.
pub fn regulating_cost<T: Real>(
    weights: &CostWeights<T>,
    reference: &GeneralizedState<T>,
    state: &GeneralizedState<T>,
    u: Option<&DVector<T>>,
) -> CostEval<T> {
    let nv = state.dim();
    let nx = 2 * nv;
    let nu = weights.control.len();
    let mut eval = CostEval::zeros(nx, nu);

    let scale = if u.is_none() {
        weights.terminal_scale
    } else {
        T::one()
    };
    let two = T::val(2.0);
    for i in 0..nx {
        let d = if i < nv {
            state.q[i] - reference.q[i]
        } else {
            state.qdot[i - nv] - reference.qdot[i - nv]
        };
        let w = scale * weights.state[i];
        eval.value += w * d * d;
        eval.lx[i] = two * w * d;
        eval.lxx[(i, i)] = two * w;
    }
    if let Some(u) = u {
        for i in 0..nu {
            let w = weights.control[i];
            eval.value += w * u[i] * u[i];
            eval.lu[i] = two * w * u[i];
            eval.luu[(i, i)] = two * w;
        }
    }
    eval
}

/// Numerically stable logistic function.
fn sigmoid<T: Real>(y: T) -> T {
    if y >= T::zero() {
        T::one() / (T::one() + (-y).exp())
    } else {
        let e = y.exp();
        e / (T::one() + e)
    }
}

/// Sigmoid-gated tangential foot speed penalty.
pub fn foot_cost<T: Real>(
    model: &RobotModel<T>,
    weights: &CostWeights<T>,
    state: &GeneralizedState<T>,
) -> CostEval<T> {
    let nv = model.nv();
    let nx = 2 * nv;
    let nu = model.nu();
    let mut eval = CostEval::zeros(nx, nu);
    if weights.foot.is_zero() {
        return eval;
    }
    let c1 = weights.foot_sharpness;
    let two = T::val(2.0);
    let half = T::val(0.5);

    for k in 0..model.n_feet() {
        let phi = model.foot_height(&state.q, k);
        let jac = model.contact_jacobian(&state.q, k);
        let vt = (jac.row(0) * &state.qdot)[0];
        let s = sigmoid(c1 * phi);
        let a = (weights.foot * s).sqrt();

        // Residual r = a(q) vᵗ; cost = r², gradient 2 r ∂r (exact),
        // curvature 2 ∂r ∂rᵀ (Gauss-Newton).
        let r = a * vt;
        eval.value += r * r;

        let djac = model.foot_jacobian_partials(&state.q, k);
        // ∂a/∂q_m = a (c₁/2)(1-s) ∂φ/∂q_m -- no division by a needed.
        let a_fac = a * c1 * half * (T::one() - s);
        let mut dr = DVector::zeros(nx);
        for m in 0..nv {
            let dvt = (djac[m].row(0) * &state.qdot)[0];
            dr[m] = a_fac * jac[(1, m)] * vt + a * dvt;
            dr[nv + m] = a * jac[(0, m)];
        }

        for i in 0..nx {
            eval.lx[i] += two * r * dr[i];
        }
        // Rank-one PSD update.
        eval.lxx.ger(two, &dr, &dr, T::one());
    }
    eval
}

/// Squared foot height at the scheduled (foot, knot) pairs.
pub fn airtime_cost<T: Real>(
    model: &RobotModel<T>,
    weights: &CostWeights<T>,
    schedule: &AirTimeSchedule,
    knot: usize,
    state: &GeneralizedState<T>,
) -> CostEval<T> {
    let nv = model.nv();
    let nx = 2 * nv;
    let mut eval = CostEval::zeros(nx, model.nu());
    if weights.air_time.is_zero() {
        return eval;
    }
    let two = T::val(2.0);
    for k in 0..model.n_feet() {
        if !schedule.is_active(k, knot) {
            continue;
        }
        let phi = model.foot_height(&state.q, k);
        let jac = model.contact_jacobian(&state.q, k);
        eval.value += weights.air_time * phi * phi;
        // Residual √c_a φ: exact gradient, Gauss-Newton curvature in the
        // position block only (φ does not depend on q̇).
        let mut dphi = DVector::zeros(nx);
        for m in 0..nv {
            dphi[m] = jac[(1, m)];
        }
        for i in 0..nv {
            eval.lx[i] += two * weights.air_time * phi * dphi[i];
        }
        eval.lxx.ger(two * weights.air_time, &dphi, &dphi, T::one());
    }
    eval
}

/// Pairing matrix penalizing front/hind torque differences: row `j` is
/// `u_j - u_{j + nu/2}`. Empty for models without a front/hind split.
pub fn pairing_matrix<T: Real>(nu: usize) -> DMatrix<T> {
    if nu < 2 || nu % 2 != 0 {
        return DMatrix::zeros(0, nu);
    }
    let half = nu / 2;
    let mut c2 = DMatrix::zeros(half, nu);
    for j in 0..half {
        c2[(j, j)] = T::one();
        c2[(j, j + half)] = -T::one();
    }
    c2
}

/// Quadratic torque-symmetry penalty `c_s ‖C₂ u‖²` with exact curvature.
pub fn symmetric_cost<T: Real>(
    weights: &CostWeights<T>,
    c2: &DMatrix<T>,
    nx: usize,
    u: &DVector<T>,
) -> CostEval<T> {
    let nu = u.len();
    let mut eval = CostEval::zeros(nx, nu);
    if weights.symmetry.is_zero() || c2.nrows() == 0 {
        return eval;
    }
    let r = c2 * u;
    let two = T::val(2.0);
    eval.value = weights.symmetry * r.dot(&r);
    eval.lu = c2.transpose() * &r * (two * weights.symmetry);
    eval.luu = c2.transpose() * c2 * (two * weights.symmetry);
    eval
}

/// The full per-knot cost stack used by the optimal-control problem.
#[derive(Debug, Clone)]
pub struct CostStack<T: Real> {
    pub weights: CostWeights<T>,
    pub reference: GeneralizedState<T>,
    pub schedule: AirTimeSchedule,
    c2: DMatrix<T>,
}

impl<T: Real> CostStack<T> {
    pub fn new(
        model: &RobotModel<T>,
        weights: CostWeights<T>,
        reference: GeneralizedState<T>,
        n_knots: usize,
    ) -> Self {
        assert_eq!(weights.state.len(), 2 * model.nv());
        assert_eq!(weights.control.len(), model.nu());
        assert_eq!(reference.dim(), model.nv());
        Self {
            weights,
            reference,
            schedule: AirTimeSchedule::inactive(model.n_feet(), n_knots),
            c2: pairing_matrix(model.nu()),
        }
    }

    /// Sum of all running terms at one knot.
    pub fn running(
        &self,
        model: &RobotModel<T>,
        knot: usize,
        state: &GeneralizedState<T>,
        u: &DVector<T>,
    ) -> CostEval<T> {
        let mut eval = regulating_cost(&self.weights, &self.reference, state, Some(u));
        eval.add(&foot_cost(model, &self.weights, state));
        eval.add(&airtime_cost(model, &self.weights, &self.schedule, knot, state));
        eval.add(&symmetric_cost(&self.weights, &self.c2, 2 * model.nv(), u));
        eval
    }

    /// Terminal knot: scaled regulating term only, no control part.
    pub fn terminal(&self, state: &GeneralizedState<T>) -> CostEval<T> {
        regulating_cost(&self.weights, &self.reference, state, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelParams, BASE_PITCH, BASE_Z};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quadruped() -> RobotModel<f64> {
        RobotModel::planar_quadruped(ModelParams::default()).unwrap()
    }

    fn random_state(model: &RobotModel<f64>, rng: &mut ChaCha8Rng) -> GeneralizedState<f64> {
        let stance = model.nominal_stance();
        GeneralizedState::new(
            DVector::from_fn(model.nv(), |i, _| stance.q[i] + rng.gen_range(-0.4..0.4)),
            DVector::from_fn(model.nv(), |_, _| rng.gen_range(-1.5..1.5)),
        )
    }

    fn stack(model: &RobotModel<f64>) -> CostStack<f64> {
        CostStack::new(
            model,
            CostWeights::defaults(model.nv(), model.nu()),
            model.nominal_stance(),
            20,
        )
    }

    #[test]
    fn regulating_vanishes_at_the_reference() {
        let model = quadruped();
        let s = stack(&model);
        let u = DVector::zeros(4);
        let eval = regulating_cost(&s.weights, &s.reference, &s.reference, Some(&u));
        assert_eq!(eval.value, 0.0);
        assert_eq!(eval.lx.norm(), 0.0);
        assert_eq!(eval.lu.norm(), 0.0);
    }

    #[test]
    fn regulating_pitch_error_value() {
        let model = quadruped();
        let s = stack(&model);
        let mut state = model.nominal_stance();
        state.q[BASE_PITCH] += 0.5;
        let u = DVector::zeros(4);
        let eval = regulating_cost(&s.weights, &s.reference, &state, Some(&u));
        // Single active term: weight 10, deviation 0.5.
        assert_relative_eq!(eval.value, 2.5, max_relative = 1e-14);
    }

    #[test]
    fn terminal_scales_the_state_weights_and_ignores_controls() {
        let model = quadruped();
        let s = stack(&model);
        let mut state = model.nominal_stance();
        state.q[BASE_PITCH] += 0.5;
        let terminal = s.terminal(&state);
        assert_relative_eq!(terminal.value, 25.0, max_relative = 1e-14);
        assert_eq!(terminal.lu.norm(), 0.0);
        assert_eq!(terminal.luu.norm(), 0.0);
    }

    #[test]
    fn foot_cost_frozen_values() {
        let model = quadruped();
        let s = stack(&model);
        // Nominal stance: both feet at φ = 0. Give the base 1 m/s: both feet
        // then have vᵗ = 1, and S(0) = 0.5 each.
        let mut state = model.nominal_stance();
        state.qdot[0] = 1.0;
        let eval = foot_cost(&model, &s.weights, &state);
        assert_relative_eq!(eval.value, 2.0 * 0.5, max_relative = 1e-12);

        // Lifted 0.3 m: the sigmoid collapses to 1/(1+e⁹) per foot.
        state.q[BASE_Z] += 0.3;
        let eval = foot_cost(&model, &s.weights, &state);
        let expected = 2.0 / (1.0 + 9.0f64.exp());
        assert_relative_eq!(eval.value, expected, max_relative = 1e-10);
    }

    #[test]
    fn foot_cost_vanishes_for_stationary_feet() {
        let model = quadruped();
        let s = stack(&model);
        let eval = foot_cost(&model, &s.weights, &model.nominal_stance());
        assert_eq!(eval.value, 0.0);
    }

    #[test]
    fn foot_cost_decreases_as_the_foot_lifts() {
        let model = quadruped();
        let s = stack(&model);
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let mut state = model.nominal_stance();
            state.q[BASE_Z] += 0.02 * i as f64;
            state.qdot[0] = 1.0;
            let v = foot_cost(&model, &s.weights, &state).value;
            assert!(v < prev, "foot cost not strictly decreasing in φ");
            prev = v;
        }
    }

    #[test]
    fn airtime_cost_frozen_value() {
        let model = quadruped();
        let mut s = stack(&model);
        let mut state = model.nominal_stance();
        state.q[BASE_Z] += 0.05;
        // Inactive schedule: zero.
        assert_eq!(
            airtime_cost(&model, &s.weights, &s.schedule, 3, &state).value,
            0.0
        );
        // One foot active at this knot: 2e3 · 0.05² = 5.
        s.schedule.active[0][3] = true;
        let eval = airtime_cost(&model, &s.weights, &s.schedule, 3, &state);
        assert_relative_eq!(eval.value, 5.0, max_relative = 1e-12);
        // Other knots unaffected.
        assert_eq!(
            airtime_cost(&model, &s.weights, &s.schedule, 4, &state).value,
            0.0
        );
    }

    #[test]
    fn symmetric_cost_frozen_value() {
        let model = quadruped();
        let s = stack(&model);
        let c2 = pairing_matrix::<f64>(4);
        // Front knee 10, hind knee 6: single pair difference of 4.
        let u = DVector::from_vec(vec![0.0, 10.0, 0.0, 6.0]);
        let eval = symmetric_cost(&s.weights, &c2, 14, &u);
        assert_relative_eq!(eval.value, 0.16, max_relative = 1e-14);

        // Mirrored torques lie in the kernel.
        let u = DVector::from_vec(vec![3.0, -7.0, 3.0, -7.0]);
        assert_eq!(symmetric_cost(&s.weights, &c2, 14, &u).value, 0.0);
    }

    #[test]
    fn symmetric_gradient_is_exact() {
        let c2 = pairing_matrix::<f64>(4);
        let model = quadruped();
        let s = stack(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let eps = 1e-6;
        for _ in 0..20 {
            let u = DVector::from_fn(4, |_, _| rng.gen_range(-10.0..10.0));
            let eval = symmetric_cost(&s.weights, &c2, 14, &u);
            for i in 0..4 {
                let mut up = u.clone();
                let mut um = u.clone();
                up[i] += eps;
                um[i] -= eps;
                let fd = (symmetric_cost(&s.weights, &c2, 14, &up).value
                    - symmetric_cost(&s.weights, &c2, 14, &um).value)
                    / (2.0 * eps);
                assert_relative_eq!(eval.lu[i], fd, max_relative = 1e-8, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn total_gradients_match_finite_differences() {
        let model = quadruped();
        let mut s = stack(&model);
        // Arm part of the schedule so the air-time branch is exercised.
        s.schedule.active[0][2] = true;
        s.schedule.active[1][2] = true;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let eps = 1e-6;
        let nv = model.nv();
        for _ in 0..40 {
            let state = random_state(&model, &mut rng);
            let u = DVector::from_fn(4, |_, _| rng.gen_range(-8.0..8.0));
            let eval = s.running(&model, 2, &state, &u);

            for m in 0..2 * nv {
                let perturb = |sign: f64| {
                    let mut st = state.clone();
                    if m < nv {
                        st.q[m] += sign * eps;
                    } else {
                        st.qdot[m - nv] += sign * eps;
                    }
                    s.running(&model, 2, &st, &u).value
                };
                let fd = (perturb(1.0) - perturb(-1.0)) / (2.0 * eps);
                assert_relative_eq!(eval.lx[m], fd, max_relative = 1e-5, epsilon = 1e-7);
            }
            for i in 0..4 {
                let mut up = u.clone();
                let mut um = u.clone();
                up[i] += eps;
                um[i] -= eps;
                let fd = (s.running(&model, 2, &state, &up).value
                    - s.running(&model, 2, &state, &um).value)
                    / (2.0 * eps);
                assert_relative_eq!(eval.lu[i], fd, max_relative = 1e-5, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn gauss_newton_blocks_match_residual_jacobians() {
        // Rebuild each kinematic term's residuals test-side from the public
        // kinematics, differentiate them by finite differences, and compare
        // 2 JᵀJ against the returned curvature blocks.
        let model = quadruped();
        let mut s = stack(&model);
        s.schedule.active[1][0] = true;
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let eps = 1e-6;
        let nv = model.nv();
        let nx = 2 * nv;
        let c1 = s.weights.foot_sharpness;
        let cf = s.weights.foot;
        let ca = s.weights.air_time;

        let residuals = |st: &GeneralizedState<f64>| -> DVector<f64> {
            let mut r = DVector::zeros(3);
            for k in 0..2 {
                let phi = model.foot_height(&st.q, k);
                let vt = model.foot_velocity(&st.q, &st.qdot, k)[0];
                let sig = 1.0 / (1.0 + (-(c1 * phi)).exp());
                r[k] = (cf * sig).sqrt() * vt;
            }
            r[2] = ca.sqrt() * model.foot_height(&st.q, 1);
            r
        };

        for _ in 0..10 {
            let state = random_state(&model, &mut rng);
            let mut jr = DMatrix::zeros(3, nx);
            for m in 0..nx {
                let perturb = |sign: f64| {
                    let mut st = state.clone();
                    if m < nv {
                        st.q[m] += sign * eps;
                    } else {
                        st.qdot[m - nv] += sign * eps;
                    }
                    residuals(&st)
                };
                let col = (perturb(1.0) - perturb(-1.0)) / (2.0 * eps);
                jr.set_column(m, &col);
            }
            let expected = jr.transpose() * &jr * 2.0;

            let mut lxx = foot_cost(&model, &s.weights, &state).lxx;
            lxx += airtime_cost(&model, &s.weights, &s.schedule, 0, &state).lxx;
            assert_abs_diff_eq!(lxx, expected, epsilon = 1e-5);
        }
    }

    #[test]
    fn curvature_blocks_are_psd() {
        let model = quadruped();
        let mut s = stack(&model);
        s.schedule.active[0][1] = true;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..100 {
            let state = random_state(&model, &mut rng);
            let u = DVector::from_fn(4, |_, _| rng.gen_range(-10.0..10.0));
            let eval = s.running(&model, 1, &state, &u);
            assert!(eval.value >= 0.0 || eval.value.abs() < 1e-12);
            let jitter = DMatrix::identity(14, 14) * 1e-12;
            assert!((eval.lxx.clone() + jitter).cholesky().is_some());
            let jitter_u = DMatrix::identity(4, 4) * 1e-12;
            assert!((eval.luu.clone() + jitter_u).cholesky().is_some());
        }
    }

    #[test]
    fn terminal_ignores_every_non_regulating_term() {
        let model = quadruped();
        let mut s = stack(&model);
        for row in &mut s.schedule.active {
            row.iter_mut().for_each(|a| *a = true);
        }
        let mut state = model.nominal_stance();
        state.q[BASE_Z] += 0.2;
        state.qdot[0] = 1.0;
        let terminal = s.terminal(&state);
        let reg = regulating_cost(&s.weights, &s.reference, &state, None);
        assert_eq!(terminal.value, reg.value);
    }

    #[test]
    fn schedule_shift_moves_activations_toward_now() {
        let mut schedule = AirTimeSchedule::inactive(2, 20);
        schedule.active[1][5] = true;
        schedule.shift_toward_now();
        assert!(schedule.is_active(1, 4));
        assert!(!schedule.is_active(1, 5));
        // Falls off the front edge.
        for _ in 0..4 {
            schedule.shift_toward_now();
        }
        assert!(schedule.is_active(1, 0));
        schedule.shift_toward_now();
        assert!(!schedule.any_active());
    }

    #[test]
    fn schedule_triggers_on_long_planned_swings() {
        let mut schedule = AirTimeSchedule::inactive(2, 20);
        // Foot 0 grounded, foot 1 airborne the whole horizon.
        let gaps: Vec<Vec<f64>> = (0..21).map(|_| vec![0.0, 0.15]).collect();
        update_airtime_schedule(&mut schedule, &gaps, 12);
        for i in 0..20 {
            assert!(!schedule.is_active(0, i));
            assert_eq!(schedule.is_active(1, i), (12..16).contains(&i), "knot {i}");
        }
    }

    #[test]
    fn schedule_ignores_interrupted_swings() {
        let mut schedule = AirTimeSchedule::inactive(1, 20);
        // Two 8-knot runs separated by a touchdown never exceed the trigger.
        let gaps: Vec<Vec<f64>> = (0..21)
            .map(|i| vec![if i == 10 { 0.0 } else { 0.2 }])
            .collect();
        update_airtime_schedule(&mut schedule, &gaps, 12);
        assert!(!schedule.any_active());
    }

    #[test]
    fn schedule_update_merges_with_shifted_previous() {
        let mut schedule = AirTimeSchedule::inactive(1, 20);
        schedule.active[0][12] = true;
        let gaps: Vec<Vec<f64>> = (0..21).map(|_| vec![0.3]).collect();
        update_airtime_schedule(&mut schedule, &gaps, 12);
        // Previous activation shifted to 11, new window 12..16 merged in.
        assert!(schedule.is_active(0, 11));
        for i in 12..16 {
            assert!(schedule.is_active(0, i));
        }
        assert!(!schedule.is_active(0, 16));
    }
}
