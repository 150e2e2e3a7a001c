//! Hard-contact impulse solver in velocity space.
//!
//! Everything here lives in contact-frame velocity coordinates. A contact
//! point with `d` dimensions (d = 2 planar, d = 3 spatial) has an impulse
//! `λ = [tangential..., normal]` (the normal component is always last), an
//! apparent inverse inertia `W` (the point's block of the Delassus operator),
//! and a biased free velocity `c` (the velocity the point would have after
//! the step with zero impulse, plus any penetration-correction bias on the
//! normal row). The post-impulse velocity is `v = c + W λ`.
//!
//! Per point, the solve is a maximum-dissipation problem: find the impulse in
//! the friction cone that zeroes the approach velocity and leaves as little
//! kinetic energy as possible. Three modes partition the solution:
//!
//! - `Separating`: the point is already leaving (`cⁿ ≥ 0`), zero impulse.
//! - `Clamping`: the impulse `λ = -W⁻¹ c` that zeroes the whole contact-frame
//!   velocity lies inside the cone (static friction holds).
//! - `Sliding`: the cone cannot hold the point still; the impulse sits on the
//!   cone boundary, still zeroing the normal velocity, oriented to dissipate
//!   the most kinetic energy.
//!
//! Multiple points couple through the off-diagonal Delassus blocks and are
//! resolved by nonlinear Gauss-Seidel sweeps over the per-point solver.
//!
//! After a solve, the active constraint rows form a small linear system
//! `A λ_r + b = 0` in the reduced impulses (full impulses for clamping
//! points, normal-only for sliding points with the boundary direction
//! frozen). Differentiating that system gives impulse sensitivities; a
//! diagonal relaxation `ρ D` smooths them across mode boundaries, which is
//! what makes the impulses usable inside a gradient-based trajectory
//! optimizer. `ρ = 0` recovers the strict derivative.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::Real;

/// Active-set mode of one contact point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactMode {
    Separating,
    Clamping,
    Sliding,
}

impl ContactMode {
    /// Stable scalar encoding used by log writers.
    pub fn as_index(self) -> usize {
        match self {
            ContactMode::Separating => 0,
            ContactMode::Clamping => 1,
            ContactMode::Sliding => 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum ContactError {
    #[error("apparent inverse inertia block is singular")]
    SingularPointSystem,
    #[error("no feasible impulse on the friction cone boundary")]
    NoSlidingSolution,
    #[error("active-set system is singular even after regularization")]
    SingularActiveSet,
    #[error("contact problem dimensions are inconsistent: {0}")]
    Dimension(String),
}

/// One contact point's velocity-space problem.
#[derive(Debug, Clone)]
pub struct ContactPointProblem<T: Real> {
    /// Apparent inverse inertia, d x d, symmetric positive definite.
    pub w: DMatrix<T>,
    /// Biased free velocity `[tangential..., normal]`.
    pub c: DVector<T>,
    /// Coulomb friction coefficient, >= 0.
    pub friction: T,
}

/// Solution of one point's problem.
#[derive(Debug, Clone)]
pub struct PointSolution<T: Real> {
    pub impulse: DVector<T>,
    pub mode: ContactMode,
    /// Post-impulse biased velocity `c + W λ`.
    pub velocity: DVector<T>,
}

const SLIDING_GRID: usize = 64;
const SLIDING_BISECT_TOL: f64 = 1e-10;
const SLIDING_BISECT_MAX_ITERS: usize = 80;

/// Solves a single contact point. `d` is inferred from the problem size and
/// must be 2 or 3.
pub fn solve_contact_point<T: Real>(
    problem: &ContactPointProblem<T>,
) -> Result<PointSolution<T>, ContactError> {
    let d = problem.c.len();
    if !(d == 2 || d == 3) || problem.w.nrows() != d || problem.w.ncols() != d {
        return Err(ContactError::Dimension(format!(
            "point problem must be 2 or 3 dimensional, got W {}x{}, c {}",
            problem.w.nrows(),
            problem.w.ncols(),
            problem.c.len()
        )));
    }
    let n = d - 1;
    let mu = problem.friction;

    // Already separating (ties included): no impulse.
    if problem.c[n] >= T::zero() {
        return Ok(PointSolution {
            impulse: DVector::zeros(d),
            mode: ContactMode::Separating,
            velocity: problem.c.clone(),
        });
    }

    // Clamping: zero the full contact-frame velocity, keep if inside the cone.
    let lu = problem.w.clone().lu();
    let stick = lu
        .solve(&(-problem.c.clone()))
        .ok_or(ContactError::SingularPointSystem)?;
    let tangential_norm = stick.rows(0, n).norm();
    if tangential_norm <= mu * stick[n] {
        return Ok(PointSolution {
            velocity: DVector::zeros(d),
            impulse: stick,
            mode: ContactMode::Clamping,
        });
    }

    // Sliding: impulse on the cone boundary, normal velocity zeroed, oriented
    // for maximum dissipation.
    let impulse = match d {
        2 => solve_sliding_planar(problem)?,
        _ => solve_sliding_spatial(problem, &lu)?,
    };
    let velocity = &problem.c + &problem.w * &impulse;
    Ok(PointSolution {
        impulse,
        mode: ContactMode::Sliding,
        velocity,
    })
}

/// Residual kinetic-energy objective `vᵀ W⁻¹ v` written as `vᵀ (W⁻¹c + λ)`,
/// which avoids forming `W⁻¹` beyond one presolved vector.
fn dissipation_objective<T: Real>(
    w: &DMatrix<T>,
    c: &DVector<T>,
    winv_c: &DVector<T>,
    lambda: &DVector<T>,
) -> T {
    let v = c + w * lambda;
    v.dot(&(winv_c + lambda))
}

/// Planar sliding: the cone boundary is two rays `λ = λⁿ (s μ, 1)`, s = ±1.
fn solve_sliding_planar<T: Real>(
    problem: &ContactPointProblem<T>,
) -> Result<DVector<T>, ContactError> {
    let w = &problem.w;
    let c = &problem.c;
    let mu = problem.friction;
    let winv_c = w
        .clone()
        .lu()
        .solve(c)
        .ok_or(ContactError::SingularPointSystem)?;

    let mut best: Option<(T, DVector<T>)> = None;
    for s in [-T::one(), T::one()] {
        let denom = w[(1, 1)] + s * mu * w[(1, 0)];
        if denom <= T::zero() {
            continue;
        }
        let ln = -c[1] / denom;
        if ln < T::zero() {
            continue;
        }
        let lambda = DVector::from_vec(vec![s * mu * ln, ln]);
        let g = dissipation_objective(w, c, &winv_c, &lambda);
        if best.as_ref().map_or(true, |(gb, _)| g < *gb) {
            best = Some((g, lambda));
        }
    }
    best.map(|(_, l)| l).ok_or(ContactError::NoSlidingSolution)
}

/// Spatial sliding: boundary directions `E(θ) = (μ cos θ, μ sin θ, 1)` with
/// `λⁿ(θ) = -cⁿ / d(θ)` from the zeroed normal velocity. A coarse grid finds
/// the basin, then bisection on the objective derivative polishes θ.
fn solve_sliding_spatial<T: Real>(
    problem: &ContactPointProblem<T>,
    w_lu: &nalgebra::LU<T, nalgebra::Dyn, nalgebra::Dyn>,
) -> Result<DVector<T>, ContactError> {
    let w = &problem.w;
    let c = &problem.c;
    let mu = problem.friction;
    let winv_c = w_lu
        .solve(c)
        .ok_or(ContactError::SingularPointSystem)?;
    let two_pi = T::two_pi();

    let denom_at = |theta: T| -> T {
        w[(2, 2)] + mu * (w[(2, 0)] * theta.cos() + w[(2, 1)] * theta.sin())
    };
    let lambda_at = |theta: T| -> Option<DVector<T>> {
        let den = denom_at(theta);
        if den <= T::zero() {
            return None;
        }
        let ln = -c[2] / den;
        if ln < T::zero() {
            return None;
        }
        Some(DVector::from_vec(vec![
            mu * theta.cos() * ln,
            mu * theta.sin() * ln,
            ln,
        ]))
    };
    // g'(θ) = 2 vᵀ λ'(θ), using W⁻¹W = I to cancel the inverse inertia.
    let slope_at = |theta: T| -> Option<T> {
        let den = denom_at(theta);
        if den <= T::zero() {
            return None;
        }
        let ln = -c[2] / den;
        let dden = mu * (-w[(2, 0)] * theta.sin() + w[(2, 1)] * theta.cos());
        let dln = c[2] * dden / (den * den);
        let e = DVector::from_vec(vec![mu * theta.cos(), mu * theta.sin(), T::one()]);
        let de = DVector::from_vec(vec![-mu * theta.sin(), mu * theta.cos(), T::zero()]);
        let lambda = &e * ln;
        let dlambda = de * ln + e * dln;
        let v = c + w * lambda;
        Some((T::one() + T::one()) * v.dot(&dlambda))
    };

    // Coarse scan.
    let mut best: Option<(T, T)> = None; // (objective, theta)
    let step = two_pi / T::from_usize(SLIDING_GRID).unwrap();
    for i in 0..SLIDING_GRID {
        let theta = step * T::from_usize(i).unwrap();
        if let Some(lambda) = lambda_at(theta) {
            let g = dissipation_objective(w, c, &winv_c, &lambda);
            if best.as_ref().map_or(true, |(gb, _)| g < *gb) {
                best = Some((g, theta));
            }
        }
    }
    let (_, theta0) = best.ok_or(ContactError::NoSlidingSolution)?;

    // Bisection on g' inside the bracketing grid cell pair.
    let mut lo = theta0 - step;
    let mut hi = theta0 + step;
    let tol = T::val(SLIDING_BISECT_TOL);
    let refined = match (slope_at(lo), slope_at(hi)) {
        (Some(slo), Some(shi)) if slo < T::zero() && shi > T::zero() => {
            let mut iters = 0;
            while hi - lo > tol && iters < SLIDING_BISECT_MAX_ITERS {
                let mid = (lo + hi) * T::val(0.5);
                match slope_at(mid) {
                    Some(sm) if sm < T::zero() => lo = mid,
                    Some(_) => hi = mid,
                    // Infeasible midpoint: the basin is narrower than the
                    // bracket; shrink toward the grid minimizer.
                    None => {
                        if mid < theta0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                }
                iters += 1;
            }
            (lo + hi) * T::val(0.5)
        }
        // No clean sign change (flat objective or feasibility boundary in
        // the bracket): keep the grid minimizer.
        _ => theta0,
    };

    let candidate = lambda_at(refined);
    let fallback = lambda_at(theta0);
    match (candidate, fallback) {
        (Some(a), Some(b)) => {
            let ga = dissipation_objective(w, c, &winv_c, &a);
            let gb = dissipation_objective(w, c, &winv_c, &b);
            Ok(if ga <= gb { a } else { b })
        }
        (Some(a), None) => Ok(a),
        (None, Some(b)) => Ok(b),
        (None, None) => Err(ContactError::NoSlidingSolution),
    }
}

/// Several contact points coupled through a full Delassus operator.
#[derive(Debug, Clone)]
pub struct CoupledContactProblem<T: Real> {
    /// Stacked Delassus operator over all candidate points.
    pub w: DMatrix<T>,
    /// Stacked biased free velocities.
    pub c: DVector<T>,
    /// Per-point dimensions (2 or 3 each); blocks are stacked in order.
    pub dims: Vec<usize>,
    pub friction: T,
}

impl<T: Real> CoupledContactProblem<T> {
    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.dims.len());
        let mut acc = 0;
        for d in &self.dims {
            off.push(acc);
            acc += d;
        }
        off
    }
}

/// Gauss-Seidel iteration limits.
#[derive(Debug, Clone)]
pub struct SolveOptions<T: Real> {
    pub max_sweeps: usize,
    pub tol: T,
}

impl<T: Real> Default for SolveOptions<T> {
    fn default() -> Self {
        Self {
            max_sweeps: 50,
            tol: T::val(1e-10),
        }
    }
}

/// Converged (or best-effort) impulses for a coupled problem.
#[derive(Debug, Clone)]
pub struct ContactSolution<T: Real> {
    pub impulses: Vec<DVector<T>>,
    pub modes: Vec<ContactMode>,
    /// Post-impulse biased velocities per point.
    pub velocities: Vec<DVector<T>>,
    /// False when the sweep limit was hit before the impulses settled. The
    /// impulses are still the last iterate; callers decide how to react.
    pub converged: bool,
    pub sweeps: usize,
}

impl<T: Real> ContactSolution<T> {
    pub fn stacked_impulse(&self) -> DVector<T> {
        let total: usize = self.impulses.iter().map(|l| l.len()).sum();
        let mut out = DVector::zeros(total);
        let mut off = 0;
        for l in &self.impulses {
            out.rows_mut(off, l.len()).copy_from(l);
            off += l.len();
        }
        out
    }
}

/// Gauss-Seidel over the per-point maximum-dissipation solver.
pub fn solve_all_contacts<T: Real>(
    problem: &CoupledContactProblem<T>,
    opts: &SolveOptions<T>,
) -> Result<ContactSolution<T>, ContactError> {
    let total = problem.total_dim();
    if problem.w.nrows() != total || problem.w.ncols() != total || problem.c.len() != total {
        return Err(ContactError::Dimension(format!(
            "W is {}x{}, c is {}, dims sum to {total}",
            problem.w.nrows(),
            problem.w.ncols(),
            problem.c.len()
        )));
    }
    let n_points = problem.dims.len();
    let offsets = problem.offsets();

    let mut lambda = DVector::zeros(total);
    let mut modes = vec![ContactMode::Separating; n_points];
    let mut converged = false;
    let mut sweeps = 0;

    while sweeps < opts.max_sweeps.max(1) && !converged {
        let mut delta = T::zero();
        for k in 0..n_points {
            let d = problem.dims[k];
            let off = offsets[k];

            // Bias this point's free velocity with every other point's impulse.
            let mut c_k = problem.c.rows(off, d).into_owned();
            for j in 0..n_points {
                if j == k {
                    continue;
                }
                let dj = problem.dims[j];
                c_k += problem.w.view((off, offsets[j]), (d, dj)) * lambda.rows(offsets[j], dj);
            }

            let point = ContactPointProblem {
                w: problem.w.view((off, off), (d, d)).into_owned(),
                c: c_k,
                friction: problem.friction,
            };
            let sol = solve_contact_point(&point)?;
            for i in 0..d {
                delta = delta.max((sol.impulse[i] - lambda[off + i]).abs());
                lambda[off + i] = sol.impulse[i];
            }
            modes[k] = sol.mode;
        }
        sweeps += 1;
        if delta <= opts.tol {
            converged = true;
        }
    }

    // Final velocities from the stacked impulse, for consistency.
    let v = &problem.c + &problem.w * &lambda;
    let mut impulses = Vec::with_capacity(n_points);
    let mut velocities = Vec::with_capacity(n_points);
    for k in 0..n_points {
        impulses.push(lambda.rows(offsets[k], problem.dims[k]).into_owned());
        velocities.push(v.rows(offsets[k], problem.dims[k]).into_owned());
    }

    Ok(ContactSolution {
        impulses,
        modes,
        velocities,
        converged,
        sweeps,
    })
}

/// How one point enters the reduced active-set system.
#[derive(Debug, Clone)]
pub enum PointRole<T: Real> {
    /// Not in the active set; zero impulse, zero sensitivity.
    Inactive,
    /// All `d` velocity rows constrained, all `d` impulse components free.
    Clamping { dim: usize },
    /// Normal row constrained only; impulse frozen to `λ = e λⁿ` with `e`
    /// the cone boundary direction at the solution (normal component 1).
    Sliding { e: DVector<T> },
}

/// Row-selection / impulse-injection layout of the reduced system.
#[derive(Debug, Clone)]
pub struct ActiveSetLayout<T: Real> {
    pub roles: Vec<PointRole<T>>,
    /// Per-point dimensions of the full problem.
    pub dims: Vec<usize>,
    /// Reduced dimension (rows of A).
    pub reduced_dim: usize,
}

impl<T: Real> ActiveSetLayout<T> {
    pub fn from_solution(solution: &ContactSolution<T>) -> Self {
        let grazing = T::val(1e-6);
        let dims: Vec<usize> = solution.impulses.iter().map(|l| l.len()).collect();
        let roles: Vec<PointRole<T>> = solution
            .modes
            .iter()
            .zip(&solution.impulses)
            .map(|(mode, lambda)| {
                let d = lambda.len();
                let ln = lambda[d - 1];
                match mode {
                    ContactMode::Separating => PointRole::Inactive,
                    // A vanishing normal impulse carries no usable constraint;
                    // treat the point as inactive rather than divide by λⁿ.
                    _ if ln <= grazing => PointRole::Inactive,
                    ContactMode::Clamping => PointRole::Clamping { dim: d },
                    ContactMode::Sliding => PointRole::Sliding { e: lambda / ln },
                }
            })
            .collect();
        let reduced_dim = roles
            .iter()
            .map(|r| match r {
                PointRole::Inactive => 0,
                PointRole::Clamping { dim } => *dim,
                PointRole::Sliding { .. } => 1,
            })
            .sum();
        Self {
            roles,
            dims,
            reduced_dim,
        }
    }

    fn point_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.dims.len());
        let mut acc = 0;
        for d in &self.dims {
            off.push(acc);
            acc += d;
        }
        off
    }

    /// Selects the constrained velocity rows out of a full-stacked matrix:
    /// all rows for clamping points, the normal row for sliding points.
    pub fn select_rows(&self, full: &DMatrix<T>) -> DMatrix<T> {
        let offsets = self.point_offsets();
        let mut out = DMatrix::zeros(self.reduced_dim, full.ncols());
        let mut r = 0;
        for (k, role) in self.roles.iter().enumerate() {
            let off = offsets[k];
            let d = self.dims[k];
            match role {
                PointRole::Inactive => {}
                PointRole::Clamping { .. } => {
                    out.rows_mut(r, d).copy_from(&full.rows(off, d));
                    r += d;
                }
                PointRole::Sliding { .. } => {
                    out.row_mut(r).copy_from(&full.row(off + d - 1));
                    r += 1;
                }
            }
        }
        out
    }

    /// Selects the constrained entries out of a full-stacked vector.
    pub fn select_entries(&self, full: &DVector<T>) -> DVector<T> {
        let offsets = self.point_offsets();
        let mut out = DVector::zeros(self.reduced_dim);
        let mut r = 0;
        for (k, role) in self.roles.iter().enumerate() {
            let off = offsets[k];
            let d = self.dims[k];
            match role {
                PointRole::Inactive => {}
                PointRole::Clamping { .. } => {
                    for i in 0..d {
                        out[r + i] = full[off + i];
                    }
                    r += d;
                }
                PointRole::Sliding { .. } => {
                    out[r] = full[off + d - 1];
                    r += 1;
                }
            }
        }
        out
    }

    /// Injection matrix mapping reduced impulses to full stacked impulses
    /// (identity block for clamping, frozen boundary column for sliding).
    pub fn injector(&self) -> DMatrix<T> {
        let total: usize = self.dims.iter().sum();
        let offsets = self.point_offsets();
        let mut inj = DMatrix::zeros(total, self.reduced_dim);
        let mut r = 0;
        for (k, role) in self.roles.iter().enumerate() {
            let off = offsets[k];
            let d = self.dims[k];
            match role {
                PointRole::Inactive => {}
                PointRole::Clamping { .. } => {
                    for i in 0..d {
                        inj[(off + i, r + i)] = T::one();
                    }
                    r += d;
                }
                PointRole::Sliding { e } => {
                    for i in 0..d {
                        inj[(off + i, r)] = e[i];
                    }
                    r += 1;
                }
            }
        }
        inj
    }

    /// Expands a reduced impulse into per-point full impulses.
    pub fn expand(&self, reduced: &DVector<T>) -> Vec<DVector<T>> {
        let mut out = Vec::with_capacity(self.dims.len());
        let mut r = 0;
        for (k, role) in self.roles.iter().enumerate() {
            let d = self.dims[k];
            match role {
                PointRole::Inactive => out.push(DVector::zeros(d)),
                PointRole::Clamping { .. } => {
                    out.push(reduced.rows(r, d).into_owned());
                    r += d;
                }
                PointRole::Sliding { e } => {
                    out.push(e * reduced[r]);
                    r += 1;
                }
            }
        }
        out
    }

    /// Reduced indices that carry a normal impulse component, with the point
    /// they belong to. Clamping points contribute their last row; sliding
    /// points their single row.
    fn normal_rows(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut r = 0;
        for (k, role) in self.roles.iter().enumerate() {
            match role {
                PointRole::Inactive => {}
                PointRole::Clamping { dim } => {
                    out.push((r + dim - 1, k));
                    r += dim;
                }
                PointRole::Sliding { .. } => {
                    out.push((r, k));
                    r += 1;
                }
            }
        }
        out
    }
}

/// Reduced active-set system `A λ_r + b = 0` at a contact solution.
#[derive(Debug, Clone)]
pub struct DelassusSystem<T: Real> {
    pub a: DMatrix<T>,
    pub b: DVector<T>,
    pub reduced_impulse: DVector<T>,
    pub layout: ActiveSetLayout<T>,
}

/// Builds the reduced system from the full Delassus operator and biased free
/// velocity the coupled solve ran on. With sliding points the operator is
/// generally nonsymmetric (rows select constraints, columns inject frozen
/// boundary directions).
pub fn assemble_delassus<T: Real>(
    w: &DMatrix<T>,
    c: &DVector<T>,
    solution: &ContactSolution<T>,
) -> DelassusSystem<T> {
    let layout = ActiveSetLayout::from_solution(solution);
    let inj = layout.injector();
    let a = layout.select_rows(&(w * &inj));
    let b = layout.select_entries(c);
    let full = solution.stacked_impulse();
    // Reduced impulse read back from the solve: full components for clamping
    // points, the normal component for sliding points.
    let reduced_impulse = {
        let mut out = DVector::zeros(layout.reduced_dim);
        let offsets = layout.point_offsets();
        let mut r = 0;
        for (k, role) in layout.roles.iter().enumerate() {
            let off = offsets[k];
            let d = layout.dims[k];
            match role {
                PointRole::Inactive => {}
                PointRole::Clamping { .. } => {
                    for i in 0..d {
                        out[r + i] = full[off + i];
                    }
                    r += d;
                }
                PointRole::Sliding { .. } => {
                    out[r] = full[off + d - 1];
                    r += 1;
                }
            }
        }
        out
    };
    DelassusSystem {
        a,
        b,
        reduced_impulse,
        layout,
    }
}

impl<T: Real> DelassusSystem<T> {
    /// `‖A λ_r + b‖∞`: zero at an exact active-set solution.
    pub fn residual_inf(&self) -> T {
        if self.layout.reduced_dim == 0 {
            return T::zero();
        }
        (&self.a * &self.reduced_impulse + &self.b)
            .iter()
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Factors `A + ρ D` for impulse sensitivities. `ρ = 0` gives the strict
    /// derivative of the active-set system; `ρ > 0` relaxes the inverse with
    /// a diagonal weighted by inverse squared normal impulses, smoothing
    /// sensitivities near contact activation/deactivation boundaries.
    pub fn sensitivity_solver(&self, rho: T) -> Result<SensitivitySolver<T>, ContactError> {
        let n = self.layout.reduced_dim;
        let floor = T::val(1e-6);
        let mut m = self.a.clone();
        if rho > T::zero() {
            for (row, point) in self.layout.normal_rows() {
                let _ = point;
                let ln = self.reduced_impulse[row].max(floor);
                m[(row, row)] += rho / (ln * ln);
            }
        }

        let mut regularized = false;
        let mut lu = m.clone().lu();
        if n > 0 && !lu.is_invertible() {
            let tik = T::val(1e-10);
            for i in 0..n {
                m[(i, i)] += tik;
            }
            lu = m.lu();
            regularized = true;
            if !lu.is_invertible() {
                return Err(ContactError::SingularActiveSet);
            }
        }

        // Grazing points keep their active-set rows for the solve but their
        // sensitivities are zeroed: the derivative is one-sided there.
        let grazing = self
            .layout
            .normal_rows()
            .iter()
            .filter(|(row, _)| self.reduced_impulse[*row] < floor)
            .map(|(_, point)| *point)
            .collect();

        Ok(SensitivitySolver {
            lu,
            layout: self.layout.clone(),
            reduced_impulse: self.reduced_impulse.clone(),
            grazing_points: grazing,
            regularized,
        })
    }
}

/// Factored sensitivity system reusable across many parameters.
pub struct SensitivitySolver<T: Real> {
    lu: nalgebra::LU<T, nalgebra::Dyn, nalgebra::Dyn>,
    layout: ActiveSetLayout<T>,
    reduced_impulse: DVector<T>,
    grazing_points: Vec<usize>,
    /// True when the active-set matrix needed extra diagonal regularization.
    pub regularized: bool,
}

impl<T: Real> SensitivitySolver<T> {
    pub fn layout(&self) -> &ActiveSetLayout<T> {
        &self.layout
    }

    /// Full stacked impulse sensitivity for one parameter ξ, given the
    /// reduced-system derivatives `∂A/∂ξ` and `∂b/∂ξ`:
    /// `∂λ_r/∂ξ = -(A + ρD)⁻¹ (∂A λ_r + ∂b)`, expanded through the frozen
    /// injection. Pass `∂A = 0` (e.g. for velocity/control parameters) via a
    /// zero matrix.
    pub fn impulse_gradient(&self, da: &DMatrix<T>, db: &DVector<T>) -> DVector<T> {
        let total: usize = self.layout.dims.iter().sum();
        if self.layout.reduced_dim == 0 {
            return DVector::zeros(total);
        }
        let rhs = -(da * &self.reduced_impulse + db);
        let dl_reduced = self
            .lu
            .solve(&rhs)
            .expect("factorization verified invertible at construction");
        let mut per_point = self.layout.expand(&dl_reduced);
        for &k in &self.grazing_points {
            per_point[k].fill(T::zero());
        }
        let mut out = DVector::zeros(total);
        let mut off = 0;
        for l in &per_point {
            out.rows_mut(off, l.len()).copy_from(l);
            off += l.len();
        }
        out
    }
}
