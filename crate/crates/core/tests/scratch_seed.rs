use cimpc::contact::ContactMode;
use cimpc::cost::{CostStack, CostWeights};
use cimpc::model::{ModelParams, RobotModel, BASE_Z};
use cimpc::mpc::make_standing_trajectory;
use cimpc::ocp::{pack_state, unpack_state, OcProblem};
use cimpc::solver::{solve, ShootingMode, ShootingProblem, SolverSettings};
use nalgebra::DVector;

fn rollout_cost(problem: &OcProblem<f64>, x0: &DVector<f64>, controls: &[DVector<f64>]) -> (f64, Vec<DVector<f64>>, usize, f64) {
    let mut states = vec![x0.clone()];
    let mut cost = 0.0;
    let mut airborne_knots = 0;
    let mut zmax = f64::NEG_INFINITY;
    for (i, u) in controls.iter().enumerate() {
        cost += problem.running_cost(i, states.last().unwrap(), u).value;
        let next = problem.step(i, states.last().unwrap(), u);
        let s = unpack_state(&next);
        zmax = zmax.max(s.q[BASE_Z]);
        states.push(next);
    }
    cost += problem.terminal_cost(states.last().unwrap()).value;
    // Count knots whose step had both feet separating.
    let opts = cimpc::stepper::StepOptions::new(0.025);
    for i in 0..controls.len() {
        let st = unpack_state(&states[i]);
        let r = cimpc::stepper::step(problem.model(), &st, &controls[i], &opts).unwrap();
        if r.modes.iter().all(|m| *m == ContactMode::Separating) {
            airborne_knots += 1;
        }
    }
    (cost, states, airborne_knots, zmax)
}

#[test]
fn probe_seeded_jump() {
    let model = RobotModel::planar_quadruped(ModelParams::<f64>::default()).unwrap();
    let weights = CostWeights::defaults(model.nv(), model.nu());
    let settings = SolverSettings::default();
    let horizon = 16;
    let dt = 0.025;

    let standing = make_standing_trajectory(&model, &weights, dt, horizon, &settings).unwrap();
    let x0 = pack_state(&model.nominal_stance());
    let height = 0.3;
    let mut reference = model.nominal_stance();
    reference.q[BASE_Z] += height;
    let cost = CostStack::new(&model, weights.clone(), reference, horizon);
    let problem = OcProblem::new(model.clone(), cost, dt, horizon, 0.25);

    let hold_cost: f64 = (0..horizon)
        .map(|i| problem.running_cost(i, &standing.states[i], &standing.controls[i]).value)
        .sum::<f64>()
        + problem.terminal_cost(&standing.states[horizon]).value;
    println!("hold cost {hold_cost:.4}");

    let stance = model.nominal_stance();
    for push in [0.5, 1.0, 2.0, 3.0, 6.0, 10.0] {
        for n_push in [1usize, 2, 3] {
            // Press with extra knee torque for the first knots, then track the
            // stance joints with a soft PD so the light legs do not flail.
            let mut controls: Vec<DVector<f64>> = Vec::with_capacity(horizon);
            let mut states = vec![x0.clone()];
            let opts = cimpc::stepper::StepOptions::new(dt);
            let mut broke = None;
            for i in 0..horizon {
                let s = unpack_state(states.last().unwrap());
                let mut u = DVector::zeros(4);
                for j in 0..4 {
                    let err = stance.q[3 + j] - s.q[3 + j];
                    u[j] = (0.5 * err - 0.02 * s.qdot[3 + j]).clamp(-15.0, 15.0);
                }
                if i < n_push {
                    u[0] += standing.controls[i][0];
                    u[2] += standing.controls[i][2];
                    u[1] += standing.controls[i][1] + push;
                    u[3] += standing.controls[i][3] + push;
                }
                match cimpc::stepper::step(problem.model(), &s, &u, &opts) {
                    Ok(r) => states.push(pack_state(&r.state)),
                    Err(e) => {
                        broke = Some((i, format!("{e}"), s.q.clone(), s.qdot.clone()));
                        break;
                    }
                }
                controls.push(u);
            }
            if let Some((i, e, q, qd)) = broke {
                println!(
                    "push {push:>4} x{n_push}: stepper error at knot {i}: {e}\n  q  {:?}\n  qd {:?}",
                    q.as_slice(), qd.as_slice()
                );
                continue;
            }
            let states_tail = states;
            let (raw_cost, states, air, zmax) = rollout_cost(&problem, &x0, &controls);
            drop(states_tail);
            let sane = states.iter().all(|x| x.iter().all(|v| v.is_finite()))
                && states
                    .iter()
                    .all(|x| x.amax() < 50.0);
            if !sane {
                println!(
                    "push {push:>4} x{n_push}: seed cost {raw_cost:>9.4} air {air:>2} zmax {zmax:.3} -> rollout insane, skipped"
                );
                continue;
            }
            let init = cimpc::solver::Trajectory::new(states, controls);
            let mut s = settings.clone();
            s.max_iterations = 300;
            s.cost_tolerance = 1e-12;
            match solve(&problem, &x0, init, ShootingMode::Multiple, &s) {
                Ok(r) => {
                    let (final_cost, _, air2, zmax2) =
                        rollout_cost(&problem, &x0, &r.trajectory.controls);
                    println!(
                        "push {push:>4} x{n_push}: seed cost {raw_cost:>9.4} air {air:>2} zmax {zmax:.3} -> solved {final_cost:>9.4} air {air2:>2} zmax {zmax2:.3} iters {}",
                        r.iterations
                    );
                }
                Err(e) => println!(
                    "push {push:>4} x{n_push}: seed cost {raw_cost:>9.4} air {air:>2} zmax {zmax:.3} -> solver error {e}"
                ),
            }
        }
    }
}
