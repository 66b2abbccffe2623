//! Single-trial simulation: the full per-step filter pipeline plus metric
//! collection.

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::training::TrainedModels;
use super::world::{spawn_scenario, Agent, Behavior, World};
use super::{FilterMode, ScenarioConfig, SimError};
use crate::bounds::{
    build_ellipsoid, to_polytope, zeta_from_polytope, ConfidenceEllipsoid, UncertaintyPolytope,
    ZetaBounds,
};
use crate::cbf::{
    a_max_compute, cbc_coefficients, h_value, BarrierParams, StackedDisturbance,
};
use crate::dynamics::{
    extract_agent_disturbance, extract_robot_disturbance, step_agent, step_robot, AgentState,
    ConstantVelocity, Disturbance, DragIntegrator, RobotDynamics,
};
use crate::mvg::{DisturbancePosterior, MvgModel};
use crate::robustqp::{assemble, effective_u_max, solve, AgentBlock, QpStatus};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// One realized disturbance measured against the posterior that predicted
/// it: the chi-square statistic `q = (d−μ)ᵀΣ⁻¹(d−μ)` and the whitened
/// velocity-block residual for scatter plots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub q: f64,
    pub whitened_v: [f64; 2],
}

/// Everything recorded about one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub schema_version: u32,
    pub seed: u64,
    pub mode: FilterMode,
    pub n_agents: usize,
    pub steps: usize,
    pub collided: bool,
    /// Minimum robot–agent center separation over the trial, meters.
    pub min_separation: f64,
    /// Margin metric: equal to the minimum separation; reported over
    /// non-collided trials only in summaries.
    pub distance_to_collision: f64,
    pub reached_goal: bool,
    /// Steps where braking replaced the filter output (QP infeasible or
    /// degenerate geometry).
    pub fallback_events: usize,
    /// Fallbacks caused by degenerate geometry or a failed braking
    /// assumption (vs. an infeasible QP); subset of `fallback_events`.
    pub fallback_degenerate: usize,
    /// Braking fallbacks inside the avoider agents' own filters (not the
    /// robot's); tracked separately so `fallback_events` stays a robot
    /// metric.
    pub agent_fallback_events: usize,
    /// Robust mode only: certified steps (QP optimal, disturbance inside
    /// its uncertainty set) and barrier-condition violations among them.
    pub certified_steps: usize,
    pub certified_violations: usize,
    /// Robust mode only: agent-steps with a containment verdict, and how
    /// many fell outside their uncertainty set.
    pub d_checked: usize,
    pub d_outside: usize,
    pub calibration: Vec<CalibrationSample>,
    pub robot_path: Vec<[f64; 2]>,
}

/// Velocity-preserving double-integrator view an avoider agent has of
/// itself: `p⁺ = p + dt v`, `v⁺ = v + dt a`.
struct AvoiderDyn {
    dt: f64,
    u_max: f64,
}

impl RobotDynamics for AvoiderDyn {
    fn drift(&self, x: &AgentState) -> AgentState {
        AgentState { p: x.p + self.dt * x.v, v: x.v, z: x.z.clone() }
    }
    fn gain_v(&self, _x: &AgentState) -> Matrix2<f64> {
        Matrix2::identity() * self.dt
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn u_max(&self) -> f64 {
        self.u_max
    }
}

fn clamp_norm(v: Vector2<f64>, limit: f64) -> Vector2<f64> {
    let n = v.norm();
    if n > limit {
        v * (limit / n)
    } else {
        v
    }
}

fn pd_control(
    k_p: f64,
    k_d: f64,
    state: &AgentState,
    goal: &Vector2<f64>,
    limit: f64,
) -> Vector2<f64> {
    clamp_norm(k_p * (goal - state.p) - k_d * state.v, limit)
}

fn brake(state: &AgentState, limit: f64) -> Vector2<f64> {
    let n = state.v.norm();
    if n > 1e-9 {
        -state.v * (limit / n)
    } else {
        Vector2::zeros()
    }
}

/// Certainty-equivalent constraint blocks of one controlled body against a
/// set of neighbors. Returns `None` when any neighbor's geometry is
/// degenerate (caller brakes).
fn nominal_blocks<D: RobotDynamics>(
    dyn_: &D,
    cv: &ConstantVelocity,
    state: &AgentState,
    neighbors: &[&AgentState],
    params: &BarrierParams,
    eta_recovery: f64,
    u_eff: f64,
) -> Option<Vec<AgentBlock>> {
    let zero = ZetaBounds { zeta_p: 0.0, zeta_v: 0.0 };
    let mut blocks = Vec::with_capacity(neighbors.len());
    for other in neighbors {
        let a_max = a_max_compute(dyn_, cv, state, other, 0.0, 0.0, u_eff, params).ok()?;
        let h_now = h_value(&(state.p - other.p), &(state.v - other.v), a_max, params).ok()?;
        let pair = BarrierParams {
            eta: if h_now >= 0.0 { params.eta } else { eta_recovery },
            ..*params
        };
        let coeffs =
            cbc_coefficients(dyn_, cv, state, other, &zero, &zero, a_max, u_eff, &pair).ok()?;
        blocks.push(AgentBlock { coeffs, polytope: None });
    }
    Some(blocks)
}

/// Acceleration each agent applies this step (noise excluded), honoring its
/// behavior. `robot` participates as an obstacle for avoiders when present.
pub(crate) fn agent_accels(
    cfg: &ScenarioConfig,
    agents: &[Agent],
    robot: Option<&AgentState>,
    fallbacks: &mut usize,
) -> Vec<Vector2<f64>> {
    let cv = ConstantVelocity { dt: cfg.dt };
    let a_eff = effective_u_max(cfg.agent_a_max, cfg.ball_facets);
    agents
        .iter()
        .enumerate()
        .map(|(i, ag)| {
            let u_des = pd_control(cfg.k_p, cfg.k_d, &ag.state, &ag.goal, a_eff);
            match ag.behavior {
                Behavior::Blind => u_des,
                Behavior::Avoider { eta, d_s } => {
                    let params = BarrierParams { d_s, eta, a_max_floor: 0.0 };
                    let radius = cfg.activation_radius_factor * d_s;
                    let dyn_ = AvoiderDyn { dt: cfg.dt, u_max: cfg.agent_a_max };
                    let mut neighbors: Vec<&AgentState> = agents
                        .iter()
                        .enumerate()
                        .filter(|(j, o)| {
                            *j != i && (o.state.p - ag.state.p).norm() <= radius
                        })
                        .map(|(_, o)| &o.state)
                        .collect();
                    if let Some(r) = robot {
                        if (r.p - ag.state.p).norm() <= radius {
                            neighbors.push(r);
                        }
                    }
                    if neighbors.is_empty() {
                        return u_des;
                    }
                    let Some(blocks) =
                        nominal_blocks(&dyn_, &cv, &ag.state, &neighbors, &params, eta, a_eff)
                    else {
                        *fallbacks += 1;
                        return brake(&ag.state, a_eff);
                    };
                    match assemble(u_des, blocks, cfg.agent_a_max, cfg.ball_facets)
                        .and_then(|p| solve(&p))
                    {
                        Ok(sol) if sol.status == QpStatus::Optimal => sol.u,
                        _ => {
                            *fallbacks += 1;
                            brake(&ag.state, a_eff)
                        }
                    }
                }
            }
        })
        .collect()
}

/// Per-active-agent data the robust filter produced this step, kept for the
/// post-step certification checks.
struct ActiveInfo {
    idx: usize,
    polytope: UncertaintyPolytope,
    zeta_robot: ZetaBounds,
    zeta_agent: ZetaBounds,
    a_max: f64,
    eta: f64,
    h_now: f64,
    post_agent: DisturbancePosterior,
}

pub(crate) fn chi_square_statistic(
    post: &DisturbancePosterior,
    d: &Disturbance,
) -> Option<CalibrationSample> {
    let cov = post.cov();
    let r = d.as_vector4() - post.mean;
    let chol = cov.cholesky()?;
    let q = r.dot(&chol.solve(&r));
    // whitened velocity block: Σ_vv^{-1/2} (d_v − μ_v)
    let cvv = cov.fixed_view::<2, 2>(2, 2).clone_owned();
    let rv = Vector2::new(r[2], r[3]);
    let eig = cvv.symmetric_eigen();
    let mut w = Vector2::zeros();
    for i in 0..2 {
        let lam = eig.eigenvalues[i];
        if lam <= 0.0 {
            return None;
        }
        let v = eig.eigenvectors.column(i);
        w += v * (v.dot(&rv) / lam.sqrt());
    }
    Some(CalibrationSample { q, whitened_v: [w.x, w.y] })
}

/// Runs one trial from a fresh random world.
pub fn run_trial(
    cfg: &ScenarioConfig,
    models: Option<&TrainedModels>,
) -> Result<TrialRecord, SimError> {
    let mut rng_world = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_world.set_stream(0);
    let world = spawn_scenario(cfg, &mut rng_world)?;
    run_trial_on(cfg, world, models, rng_world)
}

/// Runs one trial on a given world. `rng_world` drives all agent-side
/// randomness and must be derived from the trial seed for paired-mode
/// comparisons; robot-side noise uses an independent stream of the same
/// seed so its draws never perturb the agents' sequence.
pub fn run_trial_on(
    cfg: &ScenarioConfig,
    mut world: World,
    models: Option<&TrainedModels>,
    mut rng_world: ChaCha8Rng,
) -> Result<TrialRecord, SimError> {
    cfg.validate()?;
    let robust = cfg.filter_mode == FilterMode::Robust;
    if robust && models.is_none() {
        return Err(SimError::MissingModels);
    }
    let mut rng_robot = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_robot.set_stream(1);

    let dyn_ = DragIntegrator::new(cfg.dt, cfg.u_max);
    let cv = ConstantVelocity { dt: cfg.dt };
    let u_eff = effective_u_max(cfg.u_max, cfg.ball_facets);
    let radius = cfg.activation_radius();
    let normal = rand_distr::StandardNormal;

    // online disturbance models: shared trained hyperparameters, fresh
    // per-source windows
    let (mut robot_model, mut agent_models): (Option<MvgModel>, Vec<MvgModel>) = if robust {
        let m = models.unwrap();
        let mut rm = m.robot.clone();
        rm.capacity = cfg.window_capacity;
        rm.clear_window();
        let ams = world
            .agents
            .iter()
            .map(|_| {
                let mut am = m.agent.clone();
                am.capacity = cfg.window_capacity;
                am.clear_window();
                am
            })
            .collect();
        (Some(rm), ams)
    } else {
        (None, Vec::new())
    };

    let mut rec = TrialRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        seed: cfg.seed,
        mode: cfg.filter_mode,
        n_agents: world.agents.len(),
        steps: 0,
        collided: false,
        min_separation: f64::INFINITY,
        distance_to_collision: f64::INFINITY,
        reached_goal: false,
        fallback_events: 0,
        fallback_degenerate: 0,
        agent_fallback_events: 0,
        certified_steps: 0,
        certified_violations: 0,
        d_checked: 0,
        d_outside: 0,
        calibration: Vec::new(),
        robot_path: vec![[world.robot.p.x, world.robot.p.y]],
    };
    for ag in &world.agents {
        rec.min_separation = rec.min_separation.min((world.robot.p - ag.state.p).norm());
    }

    for _ in 0..cfg.horizon {
        rec.steps += 1;
        let active: Vec<usize> = world
            .agents
            .iter()
            .enumerate()
            .filter(|(_, a)| (a.state.p - world.robot.p).norm() <= radius)
            .map(|(i, _)| i)
            .collect();

        // --- robot control ---
        let u_des = pd_control(cfg.robot_k_p, cfg.robot_k_d, &world.robot, &world.goal, u_eff);
        let mut infos: Vec<ActiveInfo> = Vec::new();
        let mut qp_optimal = false;
        let u = match cfg.filter_mode {
            FilterMode::None => u_des,
            FilterMode::Nominal => {
                if active.is_empty() {
                    u_des
                } else {
                    let neighbors: Vec<&AgentState> =
                        active.iter().map(|&i| &world.agents[i].state).collect();
                    match nominal_blocks(
                        &dyn_,
                        &cv,
                        &world.robot,
                        &neighbors,
                        &cfg.barrier,
                        cfg.eta_recovery,
                        u_eff,
                    ) {
                        Some(blocks) => match assemble(u_des, blocks, cfg.u_max, cfg.ball_facets)
                            .and_then(|p| solve(&p))
                        {
                            Ok(sol) if sol.status == QpStatus::Optimal => sol.u,
                            _ => {
                                rec.fallback_events += 1;
                                brake(&world.robot, u_eff)
                            }
                        },
                        None => {
                            rec.fallback_events += 1;
                            rec.fallback_degenerate += 1;
                            brake(&world.robot, u_eff)
                        }
                    }
                }
            }
            FilterMode::Robust => {
                if active.is_empty() {
                    u_des
                } else {
                    match robust_step(
                        cfg,
                        &dyn_,
                        &cv,
                        &world,
                        &active,
                        robot_model.as_ref().unwrap(),
                        &agent_models,
                        u_eff,
                    ) {
                        Some((blocks, step_infos)) => {
                            let blocks2 = if log::log_enabled!(log::Level::Trace) {
                                Some(blocks.clone())
                            } else {
                                None
                            };
                            match assemble(u_des, blocks, cfg.u_max, cfg.ball_facets)
                                .and_then(|p| solve(&p))
                            {
                                Ok(sol) if sol.status == QpStatus::Optimal => {
                                    infos = step_infos;
                                    qp_optimal = true;
                                    sol.u
                                }
                                other => {
                                    log::debug!(
                                        "robust QP fallback at step {}: {:?}",
                                        rec.steps,
                                        other.map(|s| s.status)
                                    );
                                    if let Some(bs) = &blocks2 {
                                        for (b, info) in bs.iter().zip(&step_infos) {
                                            let wc0 = crate::robustqp::primal_worst_case(
                                                &Vector2::zeros(),
                                                b,
                                            );
                                            let e = (world.agents[info.idx].state.p
                                                - world.robot.p)
                                                .normalize();
                                            let wcb = crate::robustqp::primal_worst_case(
                                                &(-e * u_eff),
                                                b,
                                            );
                                            log::trace!(
                                                "  block {}: h={:.3} margin(u=0)={:.4} margin(away)={:.4} |H3|={:.4}",
                                                info.idx,
                                                info.h_now,
                                                b.coeffs.k_c - wc0,
                                                b.coeffs.k_c - wcb,
                                                b.coeffs.h3.norm()
                                            );
                                        }
                                    }
                                    rec.fallback_events += 1;
                                    brake(&world.robot, u_eff)
                                }
                            }
                        }
                        None => {
                            rec.fallback_events += 1;
                            rec.fallback_degenerate += 1;
                            brake(&world.robot, u_eff)
                        }
                    }
                }
            }
        };

        // --- agent controls + process noise (agent randomness first and in
        // fixed order, so the sequence is identical across filter modes) ---
        let accels =
            agent_accels(cfg, &world.agents, Some(&world.robot), &mut rec.agent_fallback_events);
        let agent_noise: Vec<Vector2<f64>> = world
            .agents
            .iter()
            .map(|_| {
                Vector2::new(
                    cfg.process_noise * rng_world.sample::<f64, _>(normal),
                    cfg.process_noise * rng_world.sample::<f64, _>(normal),
                )
            })
            .collect();
        let robot_noise = Vector2::new(
            cfg.robot_noise * rng_robot.sample::<f64, _>(normal),
            cfg.robot_noise * rng_robot.sample::<f64, _>(normal),
        );

        // --- step the world ---
        let d_robot = Disturbance::new(Vector2::zeros(), cfg.dt * robot_noise);
        let robot_prev = world.robot.clone();
        world.robot = step_robot(&dyn_, &world.robot, &u, &d_robot)?;
        let mut agent_prev = Vec::with_capacity(world.agents.len());
        for (i, ag) in world.agents.iter_mut().enumerate() {
            agent_prev.push(ag.state.clone());
            let d = Disturbance::new(Vector2::zeros(), cfg.dt * (accels[i] + agent_noise[i]));
            ag.state = step_agent(&cv, &ag.state, &d)?;
        }
        rec.robot_path.push([world.robot.p.x, world.robot.p.y]);

        // --- observe disturbances, calibrate, certify ---
        let d_robot_obs = extract_robot_disturbance(&dyn_, &robot_prev, &world.robot, &u)?;
        if robust {
            for info in &infos {
                let i = info.idx;
                // coverage statistics are recorded once the source's sliding
                // window is warm; cold-start posteriors are dominated by the
                // prior and systematically overconfident about maneuvers
                let warm = agent_models[i].window_len() >= cfg.window_capacity;
                let d_agent_obs =
                    extract_agent_disturbance(&cv, &agent_prev[i], &world.agents[i].state)?;
                if warm {
                    if let Some(s) = chi_square_statistic(&info.post_agent, &d_agent_obs) {
                        rec.calibration.push(s);
                    }
                }
                if qp_optimal {
                    let d8 = StackedDisturbance::from_column_slice(&[
                        d_robot_obs.d_p.x,
                        d_robot_obs.d_p.y,
                        d_robot_obs.d_v.x,
                        d_robot_obs.d_v.y,
                        d_agent_obs.d_p.x,
                        d_agent_obs.d_p.y,
                        d_agent_obs.d_v.x,
                        d_agent_obs.d_v.y,
                    ]);
                    let dvec = nalgebra::DVector::from_column_slice(d8.as_slice());
                    let inside = info.polytope.contains(&dvec, 1e-9)
                        && d_robot_obs.d_p.norm() <= info.zeta_robot.zeta_p + 1e-12
                        && d_robot_obs.d_v.norm() <= info.zeta_robot.zeta_v + 1e-12
                        && d_agent_obs.d_p.norm() <= info.zeta_agent.zeta_p + 1e-12
                        && d_agent_obs.d_v.norm() <= info.zeta_agent.zeta_v + 1e-12;
                    if warm {
                        rec.d_checked += 1;
                        if !inside {
                            rec.d_outside += 1;
                        }
                    }
                    if inside {
                        rec.certified_steps += 1;
                        let params = BarrierParams {
                            d_s: cfg.barrier.d_s,
                            eta: info.eta,
                            a_max_floor: cfg.barrier.a_max_floor,
                        };
                        let h_next = h_value(
                            &(world.robot.p - world.agents[i].state.p),
                            &(world.robot.v - world.agents[i].state.v),
                            info.a_max,
                            &params,
                        )?;
                        if h_next < (1.0 - info.eta) * info.h_now - 1e-6 {
                            rec.certified_violations += 1;
                        }
                    }
                }
            }
            if let Some(rm) = robot_model.as_mut() {
                rm.observe(robot_prev.clone(), &d_robot_obs);
            }
            for (i, am) in agent_models.iter_mut().enumerate() {
                let d = extract_agent_disturbance(&cv, &agent_prev[i], &world.agents[i].state)?;
                am.observe(agent_prev[i].clone(), &d);
            }
        }

        // --- termination ---
        let mut min_sep = f64::INFINITY;
        for ag in &world.agents {
            min_sep = min_sep.min((world.robot.p - ag.state.p).norm());
        }
        log::trace!(
            "step {}: min_sep={:.3} active={} |v|={:.2} |u|={:.2} qp_ok={} p=({:.2},{:.2})",
            rec.steps,
            min_sep,
            active.len(),
            world.robot.v.norm(),
            u.norm(),
            qp_optimal,
            world.robot.p.x,
            world.robot.p.y
        );
        rec.min_separation = rec.min_separation.min(min_sep);
        if min_sep < cfg.barrier.d_s {
            rec.collided = true;
            break;
        }
        if (world.robot.p - world.goal).norm() < cfg.goal_radius {
            rec.reached_goal = true;
            break;
        }
    }

    rec.distance_to_collision = rec.min_separation;
    Ok(rec)
}

/// Builds the robust blocks for all active agents. `None` when any
/// posterior or geometry step degenerates (caller brakes).
#[allow(clippy::too_many_arguments)]
fn robust_step(
    cfg: &ScenarioConfig,
    dyn_: &DragIntegrator,
    cv: &ConstantVelocity,
    world: &World,
    active: &[usize],
    robot_model: &MvgModel,
    agent_models: &[MvgModel],
    u_eff: f64,
) -> Option<(Vec<AgentBlock>, Vec<ActiveInfo>)> {
    let post_robot = robot_model.posterior(&world.robot).ok()?;
    let mut blocks = Vec::with_capacity(active.len());
    let mut infos = Vec::with_capacity(active.len());
    for &i in active {
        let x_h = &world.agents[i].state;
        let post_agent = agent_models[i].posterior(x_h).ok()?;
        let ell8 = build_ellipsoid(&post_robot, &post_agent, cfg.delta).ok()?;
        let polytope = to_polytope(&ell8);
        let er = ConfidenceEllipsoid::from_posterior(&post_robot, ell8.k_delta, cfg.delta);
        let ea = ConfidenceEllipsoid::from_posterior(&post_agent, ell8.k_delta, cfg.delta);
        let zeta_robot = zeta_from_polytope(&er);
        let zeta_agent = zeta_from_polytope(&ea);
        let a_max = match a_max_compute(
            dyn_,
            cv,
            &world.robot,
            x_h,
            zeta_robot.zeta_v,
            zeta_agent.zeta_v,
            u_eff,
            &cfg.barrier,
        ) {
            Ok(a) => a,
            Err(e) => {
                log::debug!(
                    "braking assumption failed for agent {i}: {e:?} zr=({:.3},{:.3}) za=({:.3},{:.3})",
                    zeta_robot.zeta_p,
                    zeta_robot.zeta_v,
                    zeta_agent.zeta_p,
                    zeta_agent.zeta_v
                );
                return None;
            }
        };
        let h_now = h_value(
            &(world.robot.p - x_h.p),
            &(world.robot.v - x_h.v),
            a_max,
            &cfg.barrier,
        )
        .ok()?;
        // decay budget while safe, gentler recovery rate once h < 0
        let eta = if h_now >= 0.0 { cfg.barrier.eta } else { cfg.eta_recovery };
        let pair = BarrierParams { eta, ..cfg.barrier };
        let coeffs = match cbc_coefficients(
            dyn_,
            cv,
            &world.robot,
            x_h,
            &zeta_robot,
            &zeta_agent,
            a_max,
            u_eff,
            &pair,
        ) {
            Ok(c) => c,
            Err(e) => {
                log::debug!(
                    "coefficient geometry failed for agent {i}: {e:?} sep={:.3} a_max={a_max:.3}",
                    (world.robot.p - x_h.p).norm()
                );
                return None;
            }
        };
        blocks.push(AgentBlock { coeffs, polytope: Some(polytope.clone()) });
        infos.push(ActiveInfo {
            idx: i,
            polytope,
            zeta_robot,
            zeta_agent,
            a_max,
            eta,
            h_now,
            post_agent,
        });
    }
    Some((blocks, infos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mvg::KernelParams;
    use nalgebra::Matrix4;

    fn quiet_models() -> TrainedModels {
        // modest hand-set hyperparameters; tests here exercise plumbing,
        // not calibration quality
        let kernel = KernelParams { sigma: 0.02, length: 2.0 };
        let m = MvgModel::new(kernel, 0.01, Matrix4::identity(), 50);
        TrainedModels { robot: m.clone(), agent: m }
    }

    fn still_world(robot_p: (f64, f64), goal: (f64, f64), agents: Vec<Agent>) -> World {
        World {
            robot: AgentState::from_parts(robot_p.0, robot_p.1, 0.0, 0.0),
            goal: Vector2::new(goal.0, goal.1),
            agents,
        }
    }

    fn blind_agent(p: (f64, f64), goal: (f64, f64)) -> Agent {
        Agent {
            state: AgentState::from_parts(p.0, p.1, 0.0, 0.0),
            goal: Vector2::new(goal.0, goal.1),
            behavior: Behavior::Blind,
        }
    }

    #[test]
    fn unfiltered_head_on_agent_collides() {
        let cfg = ScenarioConfig {
            filter_mode: FilterMode::None,
            process_noise: 0.0,
            robot_noise: 0.0,
            ..ScenarioConfig::default()
        };
        // robot and a blind agent swap positions along the x axis
        let world = still_world(
            (-4.0, 0.0),
            (4.0, 0.0),
            vec![blind_agent((4.0, 0.0), (-4.0, 0.0))],
        );
        let rng = ChaCha8Rng::seed_from_u64(0);
        let rec = run_trial_on(&cfg, world, None, rng).unwrap();
        assert!(rec.collided);
        assert!(rec.min_separation < cfg.barrier.d_s);
    }

    #[test]
    fn robust_filter_avoids_head_on_agent() {
        let cfg = ScenarioConfig {
            filter_mode: FilterMode::Robust,
            process_noise: 0.05,
            ..ScenarioConfig::default()
        };
        let world = still_world(
            (-4.0, 0.0),
            (4.0, 0.0),
            vec![blind_agent((4.0, 0.0), (-4.0, 0.0))],
        );
        let rng = ChaCha8Rng::seed_from_u64(0);
        let models = quiet_models();
        let rec = run_trial_on(&cfg, world, Some(&models), rng).unwrap();
        assert!(!rec.collided, "min separation {}", rec.min_separation);
    }

    #[test]
    fn distant_agents_leave_filter_inactive() {
        // agents parked far outside the activation radius: robust and
        // unfiltered runs must produce the identical robot path
        let mk_world = || {
            still_world(
                (0.0, 0.0),
                (3.0, 0.0),
                vec![
                    blind_agent((9.0, 9.0), (9.0, 9.0)),
                    blind_agent((-9.0, 9.0), (-9.0, 9.0)),
                    blind_agent((9.0, -9.0), (9.0, -9.0)),
                ],
            )
        };
        let base = ScenarioConfig { process_noise: 0.0, ..ScenarioConfig::default() };
        let cfg_none = ScenarioConfig { filter_mode: FilterMode::None, ..base.clone() };
        let cfg_rob = ScenarioConfig { filter_mode: FilterMode::Robust, ..base };
        let models = quiet_models();
        let r1 =
            run_trial_on(&cfg_none, mk_world(), None, ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r2 =
            run_trial_on(&cfg_rob, mk_world(), Some(&models), ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        assert_eq!(r1.robot_path, r2.robot_path);
        assert!(r1.reached_goal && r2.reached_goal);
    }

    #[test]
    fn fixed_seed_trial_is_reproducible() {
        let cfg = ScenarioConfig {
            filter_mode: FilterMode::Nominal,
            seed: 42,
            horizon: 150,
            ..ScenarioConfig::default()
        };
        let r1 = run_trial(&cfg, None).unwrap();
        let r2 = run_trial(&cfg, None).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn robust_mode_without_models_is_rejected() {
        let cfg = ScenarioConfig { filter_mode: FilterMode::Robust, ..Default::default() };
        assert!(matches!(run_trial(&cfg, None), Err(SimError::MissingModels)));
    }

    #[test]
    fn chi_square_statistic_identity_posterior() {
        let post = DisturbancePosterior {
            mean: nalgebra::Vector4::zeros(),
            sigma_hat: 1.0,
            omega: Matrix4::identity(),
        };
        let d = Disturbance::new(Vector2::new(0.3, 0.0), Vector2::new(0.0, 0.4));
        let s = chi_square_statistic(&post, &d).unwrap();
        assert!((s.q - 0.25).abs() < 1e-12);
        assert!((s.whitened_v[0] - 0.0).abs() < 1e-12);
        assert!((s.whitened_v[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn certified_steps_have_no_barrier_violations() {
        // short robust campaign slice; the acceptance suite covers this at
        // scale, this is the smoke version
        let models = quiet_models();
        for seed in 0..5 {
            let cfg = ScenarioConfig {
                filter_mode: FilterMode::Robust,
                seed,
                horizon: 200,
                ..ScenarioConfig::default()
            };
            let rec = run_trial(&cfg, Some(&models)).unwrap();
            assert_eq!(
                rec.certified_violations, 0,
                "seed {seed}: {} violations in {} certified steps",
                rec.certified_violations, rec.certified_steps
            );
        }
    }
}
