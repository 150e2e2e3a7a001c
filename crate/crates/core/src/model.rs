//! Planar rigid-body model of a point-footed quadruped.
//!
//! Generalized coordinates are `q = [x, z, pitch, joints...]` with the same
//! layout for velocities. The default robot has two legs in the sagittal
//! plane (front and hind), each a hip + knee serial chain ending in a point
//! foot, so `dim q = 3 + 4 = 7`.
//!
//! Everything downstream needs smooth kinematic quantities and their exact
//! derivatives, so each point of interest (link centers of mass, feet) is
//! represented as a chain of planar rotation segments. A segment's world
//! vector is `R(a) r` with `a` the sum of a fixed subset of configuration
//! angles; first and second derivatives of such chains are closed-form
//! (`d/da R(a) r = S R(a) r`, `d²/da² R(a) r = -R(a) r`, `S` the quarter-turn
//! matrix), which keeps the mass matrix, bias, Jacobian, and all their
//! partials analytical rather than finite-differenced.
//!
//! Conventions: gravity acts along -z with magnitude `gravity`; contact
//! frames are world-aligned with rows ordered `[tangential (x), normal (z)]`;
//! the bias vector `h(q, q̇)` collects Coriolis, centrifugal, and gravity
//! terms so the equations of motion read `M(q) q̈ + h(q, q̇) = B u + Jᵀ λ/dt`.
//! The hind leg measures its joint angles mirrored about the vertical:
//! equal front/hind joint vectors describe a mirror-symmetric pose, and a
//! symmetric stance needs equal (not opposite) front/hind torques, which is
//! what the torque-pairing cost assumes.

use nalgebra::{DMatrix, DVector, Vector2};
use thiserror::Error;

use crate::Real;

/// Index of the base x translation in `q`.
pub const BASE_X: usize = 0;
/// Index of the base height in `q`.
pub const BASE_Z: usize = 1;
/// Index of the base pitch in `q`.
pub const BASE_PITCH: usize = 2;
/// Index of the first joint angle in `q`.
pub const JOINT_0: usize = 3;

/// Quarter-turn of a planar vector: `S v = (-v_z, v_x)`.
#[inline]
fn perp<T: Real>(v: &Vector2<T>) -> Vector2<T> {
    Vector2::new(-v[1], v[0])
}

#[inline]
fn rot<T: Real>(angle: T, v: &Vector2<T>) -> Vector2<T> {
    let (s, c) = angle.sin_cos();
    Vector2::new(c * v[0] - s * v[1], s * v[0] + c * v[1])
}

/// One leg of the planar quadruped.
#[derive(Debug, Clone)]
pub struct LegParams<T: Real> {
    /// Hip attachment point in the base frame: m.
    pub hip_offset: Vector2<T>,
    /// Upper (hip-to-knee) link length: m.
    pub upper_length: T,
    /// Lower (knee-to-foot) link length: m.
    pub lower_length: T,
    /// Upper link mass: kg. Center of mass sits at mid-link.
    pub upper_mass: T,
    /// Lower link mass: kg. Center of mass sits at mid-link.
    pub lower_mass: T,
    /// Upper link rotational inertia about its center of mass: kg·m².
    pub upper_inertia: T,
    /// Lower link rotational inertia about its center of mass: kg·m².
    pub lower_inertia: T,
    /// Hip angle in the nominal stance: rad. Zero points the link straight
    /// down; positive swings the foot outward (forward for the front leg,
    /// rearward for the mirrored hind leg).
    pub stance_hip: T,
    /// Knee angle in the nominal stance: rad, relative to the upper link.
    pub stance_knee: T,
}

/// Full parameter set for [`RobotModel::planar_quadruped`].
#[derive(Debug, Clone)]
pub struct ModelParams<T: Real> {
    /// Base body mass: kg.
    pub base_mass: T,
    /// Base rotational inertia about its center of mass: kg·m².
    pub base_inertia: T,
    /// Legs in order `[front, hind]`.
    pub legs: Vec<LegParams<T>>,
    /// Gravitational acceleration magnitude: m/s², acting along -z.
    pub gravity: T,
    /// Coulomb friction coefficient shared by all contacts.
    pub friction: T,
    /// Symmetric actuator torque limit per joint: N·m.
    pub torque_limit: T,
}

impl<T: Real> Default for ModelParams<T> {
    /// Desk-scale planar quadruped: 2.5 kg base, 0.25 kg / 0.18 m links, feet
    /// directly below the hips in the nominal stance. Joint angles use
    /// mirrored per-leg conventions, so the equal stance values describe a
    /// mirror-symmetric pose. Sized so that holding the stance takes well
    /// under 1 N·m per joint: gravity-compensation torque grows with
    /// mass, link length, and crouch depth, and a heavy or deeply crouched
    /// build makes torque effort dominate posture regulation.
    fn default() -> Self {
        let leg = |side: f64| LegParams {
            hip_offset: Vector2::new(T::val(side * 0.2), T::zero()),
            upper_length: T::val(0.18),
            lower_length: T::val(0.18),
            upper_mass: T::val(0.25),
            lower_mass: T::val(0.25),
            upper_inertia: T::val(0.0007),
            lower_inertia: T::val(0.0007),
            stance_hip: T::val(0.2),
            stance_knee: T::val(-0.4),
        };
        Self {
            base_mass: T::val(2.5),
            base_inertia: T::val(0.04),
            legs: vec![leg(1.0), leg(-1.0)],
            gravity: T::val(9.81),
            friction: T::val(0.8),
            torque_limit: T::val(15.0),
        }
    }
}

/// Configuration and velocity of the full system.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedState<T: Real> {
    pub q: DVector<T>,
    pub qdot: DVector<T>,
}

impl<T: Real> GeneralizedState<T> {
    pub fn new(q: DVector<T>, qdot: DVector<T>) -> Self {
        assert_eq!(q.len(), qdot.len(), "q and q̇ must have equal dimension");
        Self { q, qdot }
    }

    /// Splits a stacked state vector `x = [q; q̇]`.
    pub fn from_vector(x: &DVector<T>) -> Self {
        assert_eq!(x.len() % 2, 0, "stacked state must have even length");
        let n = x.len() / 2;
        Self {
            q: DVector::from_fn(n, |i, _| x[i]),
            qdot: DVector::from_fn(n, |i, _| x[n + i]),
        }
    }

    /// Stacks into `x = [q; q̇]`.
    pub fn to_vector(&self) -> DVector<T> {
        let n = self.q.len();
        DVector::from_fn(2 * n, |i, _| if i < n { self.q[i] } else { self.qdot[i - n] })
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().all(|v| v.is_finite()) && self.qdot.iter().all(|v| v.is_finite())
    }
}

/// One rotation segment of a kinematic chain: world vector
/// `R(Σ s·q[dof]) · local`, each dof entering with a fixed sign `s`. The
/// signs realize mirrored joint conventions (the hind leg measures its
/// angles reflected about the vertical, so equal joint vectors describe
/// mirror-symmetric poses).
#[derive(Debug, Clone)]
struct Segment<T: Real> {
    dofs: Vec<(usize, T)>,
    local: Vector2<T>,
}

impl<T: Real> Segment<T> {
    fn angle(&self, q: &DVector<T>) -> T {
        self.dofs.iter().fold(T::zero(), |a, &(i, s)| a + s * q[i])
    }

    fn rate(&self, qdot: &DVector<T>) -> T {
        self.dofs.iter().fold(T::zero(), |a, &(i, s)| a + s * qdot[i])
    }

    fn world(&self, q: &DVector<T>) -> Vector2<T> {
        rot(self.angle(q), &self.local)
    }
}

/// A point carried by the base: world position `(q_x, q_z) + Σ segment vectors`.
#[derive(Debug, Clone)]
struct Chain<T: Real> {
    segments: Vec<Segment<T>>,
}

impl<T: Real> Chain<T> {
    fn position(&self, q: &DVector<T>) -> Vector2<T> {
        let mut p = Vector2::new(q[BASE_X], q[BASE_Z]);
        for seg in &self.segments {
            p += seg.world(q);
        }
        p
    }

    /// 2 x nv Jacobian of the chain point.
    fn jacobian(&self, q: &DVector<T>, nv: usize) -> DMatrix<T> {
        let mut jac = DMatrix::zeros(2, nv);
        jac[(0, BASE_X)] = T::one();
        jac[(1, BASE_Z)] = T::one();
        for seg in &self.segments {
            let sv = perp(&seg.world(q));
            for &(d, s) in &seg.dofs {
                jac[(0, d)] += s * sv[0];
                jac[(1, d)] += s * sv[1];
            }
        }
        jac
    }

    /// All second derivatives `∂J/∂q_m`, m = 0..nv. Only rotation dofs couple,
    /// and each segment contributes the rank-one pattern `-v · s_j s_m`.
    fn jacobian_partials(&self, q: &DVector<T>, nv: usize) -> Vec<DMatrix<T>> {
        let mut out = vec![DMatrix::zeros(2, nv); nv];
        for seg in &self.segments {
            let v = seg.world(q);
            for &(m, sm) in &seg.dofs {
                for &(j, sj) in &seg.dofs {
                    let w = sm * sj;
                    out[m][(0, j)] -= w * v[0];
                    out[m][(1, j)] -= w * v[1];
                }
            }
        }
        out
    }

    fn velocity(&self, q: &DVector<T>, qdot: &DVector<T>) -> Vector2<T> {
        let mut v = Vector2::new(qdot[BASE_X], qdot[BASE_Z]);
        for seg in &self.segments {
            v += perp(&seg.world(q)) * seg.rate(qdot);
        }
        v
    }

    /// Point acceleration with q̈ = 0 (the velocity-product term): `Σ -ȧ² R(a) r`.
    fn velocity_product_accel(&self, q: &DVector<T>, qdot: &DVector<T>) -> Vector2<T> {
        let mut a = Vector2::zeros();
        for seg in &self.segments {
            let rate = seg.rate(qdot);
            a -= seg.world(q) * (rate * rate);
        }
        a
    }

    /// Partials of the velocity-product acceleration w.r.t. q and q̇.
    fn velocity_product_partials(
        &self,
        q: &DVector<T>,
        qdot: &DVector<T>,
        nv: usize,
    ) -> (DMatrix<T>, DMatrix<T>) {
        let mut dq = DMatrix::zeros(2, nv);
        let mut dqd = DMatrix::zeros(2, nv);
        for seg in &self.segments {
            let v = seg.world(q);
            let sv = perp(&v);
            let rate = seg.rate(qdot);
            let r2 = rate * rate;
            let two_rate = rate + rate;
            for &(m, s) in &seg.dofs {
                dq[(0, m)] -= s * r2 * sv[0];
                dq[(1, m)] -= s * r2 * sv[1];
                dqd[(0, m)] -= s * two_rate * v[0];
                dqd[(1, m)] -= s * two_rate * v[1];
            }
        }
        (dq, dqd)
    }
}

/// One rigid link: inertia about its center of mass plus the chain locating it.
#[derive(Debug, Clone)]
struct Link<T: Real> {
    mass: T,
    inertia: T,
    com: Chain<T>,
    /// Configuration indices whose signed sum is the link's absolute angle.
    angle_dofs: Vec<(usize, T)>,
}

/// Partial derivatives of the forward dynamics under frozen contact impulses,
/// plus the shared kinematic pieces the step-Jacobian assembly reuses.
#[derive(Debug, Clone)]
pub struct DynamicsPartials<T: Real> {
    /// `∂q̈/∂q` with λ held fixed (includes the mass-matrix and kinematic
    /// Hessian contributions, excludes the `∂λ/∂q` chain term).
    pub dqdd_dq: DMatrix<T>,
    /// `∂q̈/∂q̇` with λ held fixed.
    pub dqdd_dqdot: DMatrix<T>,
    /// `∂q̈/∂u`; always exactly `M⁻¹ B`.
    pub dqdd_du: DMatrix<T>,
    /// `M⁻¹ (∂Jᵀ/∂q) λ / dt`, column m holding the q_m-derivative.
    pub kinematic_hessian_term: DMatrix<T>,
    /// Per-foot gradient of the gap function (the normal Jacobian row).
    pub dphi_dq: Vec<DVector<T>>,
    /// Per-foot, per-coordinate contact-Jacobian derivatives `∂J_k/∂q_m`.
    pub foot_jacobian_partials: Vec<Vec<DMatrix<T>>>,
    /// Mass matrix at the evaluation point.
    pub mass_matrix: DMatrix<T>,
    /// Its inverse (dense; the system is small).
    pub mass_matrix_inv: DMatrix<T>,
    /// `∂M/∂q_m` for every coordinate.
    pub dmass_dq: Vec<DMatrix<T>>,
    /// `∂h/∂q`.
    pub dbias_dq: DMatrix<T>,
    /// `∂h/∂q̇`.
    pub dbias_dqdot: DMatrix<T>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("mass must be positive, got {0}")]
    NonPositiveMass(f64),
    #[error("inertia must be positive, got {0}")]
    NonPositiveInertia(f64),
    #[error("link length must be positive, got {0}")]
    NonPositiveLength(f64),
    #[error("friction coefficient must be non-negative, got {0}")]
    NegativeFriction(f64),
    #[error("torque limit must be positive, got {0}")]
    NonPositiveTorqueLimit(f64),
    #[error("gravity must be non-negative, got {0}")]
    NegativeGravity(f64),
    #[error("planar quadruped needs exactly 2 legs, got {0}")]
    WrongLegCount(usize),
    #[error("mass matrix is not positive definite at the queried configuration")]
    SingularMassMatrix,
}

/// Planar quadruped (or reduced test body) with analytical dynamics.
#[derive(Debug, Clone)]
pub struct RobotModel<T: Real> {
    params: ModelParams<T>,
    links: Vec<Link<T>>,
    feet: Vec<Chain<T>>,
    nv: usize,
    nu: usize,
    stance_q: DVector<T>,
}

impl<T: Real> RobotModel<T> {
    /// Builds the two-legged planar model. The nominal stance height is
    /// calibrated so the front foot (and, for symmetric parameters, both
    /// feet) touches the ground exactly: `φ = 0`.
    pub fn planar_quadruped(params: ModelParams<T>) -> Result<Self, ModelError> {
        if params.legs.len() != 2 {
            return Err(ModelError::WrongLegCount(params.legs.len()));
        }
        validate_params(&params)?;

        let nv = 3 + 2 * params.legs.len();
        let nu = 2 * params.legs.len();
        let half = T::val(0.5);

        let mut links = vec![Link {
            mass: params.base_mass,
            inertia: params.base_inertia,
            com: Chain { segments: vec![] },
            angle_dofs: vec![(BASE_PITCH, T::one())],
        }];
        let mut feet = Vec::new();

        for (leg_idx, leg) in params.legs.iter().enumerate() {
            let hip_dof = JOINT_0 + 2 * leg_idx;
            let knee_dof = hip_dof + 1;
            // The hind leg measures its joint angles mirrored about the
            // vertical, so equal joint vectors describe mirror-symmetric
            // poses and symmetric statics produce equal torque values.
            let sign = if leg_idx == 0 { T::one() } else { -T::one() };
            let one = T::one();
            let hip_seg = Segment {
                dofs: vec![(BASE_PITCH, one)],
                local: leg.hip_offset,
            };
            let upper = |len: T| Segment {
                dofs: vec![(BASE_PITCH, one), (hip_dof, sign)],
                local: Vector2::new(T::zero(), -len),
            };
            let lower = |len: T| Segment {
                dofs: vec![(BASE_PITCH, one), (hip_dof, sign), (knee_dof, sign)],
                local: Vector2::new(T::zero(), -len),
            };

            links.push(Link {
                mass: leg.upper_mass,
                inertia: leg.upper_inertia,
                com: Chain {
                    segments: vec![hip_seg.clone(), upper(leg.upper_length * half)],
                },
                angle_dofs: vec![(BASE_PITCH, one), (hip_dof, sign)],
            });
            links.push(Link {
                mass: leg.lower_mass,
                inertia: leg.lower_inertia,
                com: Chain {
                    segments: vec![
                        hip_seg.clone(),
                        upper(leg.upper_length),
                        lower(leg.lower_length * half),
                    ],
                },
                angle_dofs: vec![(BASE_PITCH, one), (hip_dof, sign), (knee_dof, sign)],
            });
            feet.push(Chain {
                segments: vec![hip_seg, upper(leg.upper_length), lower(leg.lower_length)],
            });
        }

        let mut model = Self {
            params,
            links,
            feet,
            nv,
            nu,
            stance_q: DVector::zeros(nv),
        };

        // Stance calibration: joints at their stance angles, base height set
        // so foot 0 sits exactly on the ground plane.
        let mut q = DVector::zeros(nv);
        for (leg_idx, leg) in model.params.legs.iter().enumerate() {
            q[JOINT_0 + 2 * leg_idx] = leg.stance_hip;
            q[JOINT_0 + 2 * leg_idx + 1] = leg.stance_knee;
        }
        let drop = model.feet[0].position(&q)[1];
        q[BASE_Z] = -drop;
        model.stance_q = q;
        Ok(model)
    }

    /// Reduced model used by unit tests: a single floating body with no
    /// joints, optionally carrying one contact point at its origin.
    pub fn single_body(mass: T, inertia: T, contact_at_origin: bool) -> Self {
        let params = ModelParams {
            base_mass: mass,
            base_inertia: inertia,
            legs: vec![],
            ..ModelParams::default()
        };
        let links = vec![Link {
            mass,
            inertia,
            com: Chain { segments: vec![] },
            angle_dofs: vec![(BASE_PITCH, T::one())],
        }];
        let feet = if contact_at_origin {
            vec![Chain { segments: vec![] }]
        } else {
            vec![]
        };
        Self {
            params,
            links,
            feet,
            nv: 3,
            nu: 0,
            stance_q: DVector::zeros(3),
        }
    }

    pub fn nv(&self) -> usize {
        self.nv
    }

    pub fn nq(&self) -> usize {
        self.nv
    }

    /// Number of actuated joints (= control dimension).
    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn n_feet(&self) -> usize {
        self.feet.len()
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn friction(&self) -> T {
        self.params.friction
    }

    pub fn gravity(&self) -> T {
        self.params.gravity
    }

    pub fn torque_limit(&self) -> T {
        self.params.torque_limit
    }

    /// Nominal stance: feet on the ground, zero velocity.
    pub fn nominal_stance(&self) -> GeneralizedState<T> {
        GeneralizedState::new(self.stance_q.clone(), DVector::zeros(self.nv))
    }

    /// Joint positions extracted from a configuration vector.
    pub fn joint_positions(&self, q: &DVector<T>) -> DVector<T> {
        DVector::from_fn(self.nu, |i, _| q[JOINT_0 + i])
    }

    /// Mass matrix `M(q)`: composite rigid-body sum of per-link Jacobian
    /// contributions, `Σ mᵢ J_cᵢᵀ J_cᵢ + Iᵢ sᵢ sᵢᵀ`.
    pub fn mass_matrix(&self, q: &DVector<T>) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.nv, self.nv);
        for link in &self.links {
            let jac = link.com.jacobian(q, self.nv);
            m.gemm_tr(link.mass, &jac, &jac, T::one());
            for &(a, sa) in &link.angle_dofs {
                for &(b, sb) in &link.angle_dofs {
                    m[(a, b)] += link.inertia * sa * sb;
                }
            }
        }
        m
    }

    /// All `∂M/∂q_m`. The angular contribution is configuration-independent.
    pub fn mass_matrix_partials(&self, q: &DVector<T>) -> Vec<DMatrix<T>> {
        let mut out = vec![DMatrix::zeros(self.nv, self.nv); self.nv];
        for link in &self.links {
            let jac = link.com.jacobian(q, self.nv);
            let djac = link.com.jacobian_partials(q, self.nv);
            for m in 0..self.nv {
                if djac[m].iter().all(|v| v.is_zero()) {
                    continue;
                }
                // m (J'ᵀ J + Jᵀ J')
                let mut term = DMatrix::zeros(self.nv, self.nv);
                term.gemm_tr(link.mass, &djac[m], &jac, T::zero());
                let term_t = term.transpose();
                out[m] += term + term_t;
            }
        }
        out
    }

    /// Bias forces `h(q, q̇)`: Coriolis/centrifugal plus gravity, sign such
    /// that `M q̈ + h = B u + Jᵀ λ/dt`.
    pub fn bias_forces(&self, q: &DVector<T>, qdot: &DVector<T>) -> DVector<T> {
        let mut h = DVector::zeros(self.nv);
        let g = self.params.gravity;
        for link in &self.links {
            let jac = link.com.jacobian(q, self.nv);
            let mut accel = link.com.velocity_product_accel(q, qdot);
            accel[1] += g;
            // h += m Jᵀ (a_vp + g e_z); planar links have no gyroscopic term.
            h.gemv_tr(link.mass, &jac, &accel, T::one());
        }
        h
    }

    /// `∂h/∂q` and `∂h/∂q̇`.
    pub fn bias_partials(&self, q: &DVector<T>, qdot: &DVector<T>) -> (DMatrix<T>, DMatrix<T>) {
        let mut dh_dq = DMatrix::zeros(self.nv, self.nv);
        let mut dh_dqd = DMatrix::zeros(self.nv, self.nv);
        let g = self.params.gravity;
        for link in &self.links {
            let jac = link.com.jacobian(q, self.nv);
            let djac = link.com.jacobian_partials(q, self.nv);
            let mut accel = link.com.velocity_product_accel(q, qdot);
            accel[1] += g;
            let (da_dq, da_dqd) = link.com.velocity_product_partials(q, qdot, self.nv);
            // ∂h/∂q_m = m (J'_mᵀ (a + g e_z) + Jᵀ ∂a/∂q_m)
            for m in 0..self.nv {
                for r in 0..self.nv {
                    let mut acc = T::zero();
                    for c in 0..2 {
                        acc += djac[m][(c, r)] * accel[c] + jac[(c, r)] * da_dq[(c, m)];
                    }
                    dh_dq[(r, m)] += link.mass * acc;
                }
            }
            dh_dqd.gemm_tr(link.mass, &jac, &da_dqd, T::one());
        }
        (dh_dq, dh_dqd)
    }

    /// World position of foot `k`: `(tangential, height)`.
    pub fn foot_position(&self, q: &DVector<T>, foot: usize) -> Vector2<T> {
        self.feet[foot].position(q)
    }

    /// Gap function `φ_k(q)`: world height of foot `k` above the ground plane.
    pub fn foot_height(&self, q: &DVector<T>, foot: usize) -> T {
        self.feet[foot].position(q)[1]
    }

    /// World velocity of foot `k`: `(tangential, normal)`.
    pub fn foot_velocity(&self, q: &DVector<T>, qdot: &DVector<T>, foot: usize) -> Vector2<T> {
        self.feet[foot].velocity(q, qdot)
    }

    /// Contact Jacobian of foot `k`, rows `[tangential; normal]` in the
    /// world-aligned contact frame. The normal row is `∂φ_k/∂q`.
    pub fn contact_jacobian(&self, q: &DVector<T>, foot: usize) -> DMatrix<T> {
        self.feet[foot].jacobian(q, self.nv)
    }

    /// `∂J_k/∂q_m` for every coordinate m.
    pub fn foot_jacobian_partials(&self, q: &DVector<T>, foot: usize) -> Vec<DMatrix<T>> {
        self.feet[foot].jacobian_partials(q, self.nv)
    }

    /// Input matrix `B` mapping joint torques into generalized forces.
    pub fn input_matrix(&self) -> DMatrix<T> {
        let mut b = DMatrix::zeros(self.nv, self.nu);
        for i in 0..self.nu {
            b[(JOINT_0 + i, i)] = T::one();
        }
        b
    }

    /// Potential energy `U(q) = Σ mᵢ g z_i`.
    pub fn potential_energy(&self, q: &DVector<T>) -> T {
        let g = self.params.gravity;
        self.links
            .iter()
            .fold(T::zero(), |acc, link| acc + link.mass * g * link.com.position(q)[1])
    }

    /// Analytical partials of the frozen-impulse forward dynamics
    /// `q̈ = M⁻¹(-h + B u + Σ J_kᵀ λ_k / dt)`.
    ///
    /// `foot_impulses` holds one contact-frame impulse per foot (zeros for
    /// inactive feet). The `∂λ/∂ξ` chain term is *not* included here; the
    /// time stepper adds it from the contact-system sensitivities.
    pub fn forward_dynamics_partials(
        &self,
        q: &DVector<T>,
        qdot: &DVector<T>,
        u: &DVector<T>,
        foot_impulses: &[Vector2<T>],
        dt: T,
    ) -> Result<DynamicsPartials<T>, ModelError> {
        assert_eq!(foot_impulses.len(), self.feet.len());
        assert!(dt > T::zero(), "dt must be positive");
        let nv = self.nv;

        let mass = self.mass_matrix(q);
        let minv = mass
            .clone()
            .cholesky()
            .ok_or(ModelError::SingularMassMatrix)?
            .inverse();
        let dmass = self.mass_matrix_partials(q);
        let (dh_dq, dh_dqd) = self.bias_partials(q, qdot);
        let h = self.bias_forces(q, qdot);

        // rhs = -h + B u + Σ J_kᵀ λ_k / dt
        let mut rhs = -h;
        for i in 0..self.nu {
            rhs[JOINT_0 + i] += u[i];
        }
        let inv_dt = T::one() / dt;
        let mut foot_jac_partials = Vec::with_capacity(self.feet.len());
        let mut dphi = Vec::with_capacity(self.feet.len());
        for (k, foot) in self.feet.iter().enumerate() {
            let jac = foot.jacobian(q, nv);
            rhs.gemv_tr(inv_dt, &jac, &Vector2::new(foot_impulses[k][0], foot_impulses[k][1]), T::one());
            dphi.push(jac.row(1).transpose());
            foot_jac_partials.push(foot.jacobian_partials(q, nv));
        }

        // G[:, m] = Σ_k (∂J_k/∂q_m)ᵀ λ_k
        let mut hess_cols = DMatrix::zeros(nv, nv);
        for (k, parts) in foot_jac_partials.iter().enumerate() {
            let lam = &foot_impulses[k];
            if lam[0].is_zero() && lam[1].is_zero() {
                continue;
            }
            for m in 0..nv {
                for r in 0..nv {
                    hess_cols[(r, m)] += parts[m][(0, r)] * lam[0] + parts[m][(1, r)] * lam[1];
                }
            }
        }
        let kinematic_hessian_term = &minv * &hess_cols * inv_dt;

        // ∂q̈/∂q_m = M⁻¹ (-∂M/∂q_m q̈ - ∂h/∂q_m + (∂Jᵀ/∂q_m) λ/dt)
        // where q̈ = M⁻¹ rhs and the ∂M⁻¹ identity has been folded in.
        let qdd = &minv * &rhs;
        let mut dqdd_dq = DMatrix::zeros(nv, nv);
        for m in 0..nv {
            let mut col = &dmass[m] * &qdd;
            col = -col;
            for r in 0..nv {
                col[r] -= dh_dq[(r, m)] - hess_cols[(r, m)] * inv_dt;
            }
            let solved = &minv * col;
            dqdd_dq.set_column(m, &solved);
        }

        let dqdd_dqdot = -(&minv * &dh_dqd);
        let dqdd_du = &minv * self.input_matrix();

        Ok(DynamicsPartials {
            dqdd_dq,
            dqdd_dqdot,
            dqdd_du,
            kinematic_hessian_term,
            dphi_dq: dphi,
            foot_jacobian_partials: foot_jac_partials,
            mass_matrix: mass,
            mass_matrix_inv: minv,
            dmass_dq: dmass,
            dbias_dq: dh_dq,
            dbias_dqdot: dh_dqd,
        })
    }
}

fn validate_params<T: Real>(p: &ModelParams<T>) -> Result<(), ModelError> {
    let pos = |v: T| v > T::zero();
    if !pos(p.base_mass) {
        return Err(ModelError::NonPositiveMass(p.base_mass.lossy_f64()));
    }
    if !pos(p.base_inertia) {
        return Err(ModelError::NonPositiveInertia(p.base_inertia.lossy_f64()));
    }
    if p.friction < T::zero() {
        return Err(ModelError::NegativeFriction(p.friction.lossy_f64()));
    }
    if !pos(p.torque_limit) {
        return Err(ModelError::NonPositiveTorqueLimit(p.torque_limit.lossy_f64()));
    }
    if p.gravity < T::zero() {
        return Err(ModelError::NegativeGravity(p.gravity.lossy_f64()));
    }
    for leg in &p.legs {
        if !pos(leg.upper_mass) || !pos(leg.lower_mass) {
            return Err(ModelError::NonPositiveMass(leg.upper_mass.min(leg.lower_mass).lossy_f64()));
        }
        if !pos(leg.upper_inertia) || !pos(leg.lower_inertia) {
            return Err(ModelError::NonPositiveInertia(
                leg.upper_inertia.min(leg.lower_inertia).lossy_f64(),
            ));
        }
        if !pos(leg.upper_length) || !pos(leg.lower_length) {
            return Err(ModelError::NonPositiveLength(
                leg.upper_length.min(leg.lower_length).lossy_f64(),
            ));
        }
    }
    Ok(())
}
