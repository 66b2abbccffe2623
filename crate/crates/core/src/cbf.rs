//! Barrier mathematics for pairwise collision avoidance.
//!
//! The barrier `h(Δp, Δv) = ΔpᵀΔv/‖Δp‖ + √(a_max(‖Δp‖ − D_s))` is
//! nonnegative exactly when the robot can still brake to a stop before the
//! separation drops below `D_s`, given a guaranteed relative deceleration
//! authority `a_max`. Safety over one step is the control barrier condition
//! `h(next) + (η−1) h(now) ≥ 0`.
//!
//! Because the next state depends on bounded-but-unknown disturbances, the
//! condition is enforced through an affine lower bound
//! `CBC ≥ k_c − H1 d − uᵀ H2 d − H3 u` valid for every disturbance vector
//! `d = [d_p, d_v, d_p^h, d_v^h]` inside its norm caps and every `‖u‖ ≤
//! u_max`. The construction splits the barrier numerator term by term:
//! each summand is divided by the worst-case separation for its sign, and
//! the residual from using a single common denominator is absorbed into a
//! constant penalty inside `k_c`.

use nalgebra::{Matrix2, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::ZetaBounds;
use crate::dynamics::{step_agent, step_robot, AgentModel, AgentState, Disturbance, RobotDynamics};

/// Stacked disturbance `[d_p, d_v, d_p^h, d_v^h]`.
pub type StackedDisturbance = SVector<f64, 8>;

#[derive(Debug, Error)]
pub enum CbfError {
    #[error("agents coincident: relative position is zero")]
    Coincident,
    #[error("deceleration authority non-positive (a_max = {a_max}); braking authority assumption violated")]
    AssumptionViolated { a_max: f64 },
    #[error("geometry infeasible for the robust bound: {0}")]
    InfeasibleGeometry(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
}

/// Barrier shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierParams {
    /// Collision margin `D_s`, meters.
    pub d_s: f64,
    /// Decay rate `η ∈ [0, 1]`; 1 is the most permissive.
    pub eta: f64,
    /// Offline-calibrated lower bound on the per-step deceleration
    /// authority, m/s².
    pub a_max_floor: f64,
}

impl BarrierParams {
    pub fn validate(&self) -> Result<(), CbfError> {
        if !(self.d_s > 0.0) || !(0.0..=1.0).contains(&self.eta) || !self.a_max_floor.is_finite() {
            return Err(CbfError::NonFinite("barrier params"));
        }
        Ok(())
    }
}

/// Affine-in-(u, d) lower bound on the control barrier condition:
/// `CBC ≥ k_c − h1·d − uᵀ(h2 d) − h3·u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbcCoefficients {
    pub k_c: f64,
    pub h1: SVector<f64, 8>,
    pub h2: SMatrix<f64, 2, 8>,
    pub h3: Vector2<f64>,
}

impl CbcCoefficients {
    /// Evaluates the lower bound at a concrete control and disturbance.
    pub fn bound(&self, u: &Vector2<f64>, d: &StackedDisturbance) -> f64 {
        self.k_c - self.h1.dot(d) - u.dot(&(self.h2 * d)) - self.h3.dot(u)
    }

    pub fn is_finite(&self) -> bool {
        self.k_c.is_finite()
            && self.h1.iter().all(|c| c.is_finite())
            && self.h2.iter().all(|c| c.is_finite())
            && self.h3.iter().all(|c| c.is_finite())
    }
}

/// Barrier value for a relative state. Inside the collision margin
/// (`‖Δp‖ < D_s`) the square root is extended with negative sign so that
/// near-misses get a finite, strictly negative penalty; the control path
/// never consumes that branch.
pub fn h_value(
    delta_p: &Vector2<f64>,
    delta_v: &Vector2<f64>,
    a_max: f64,
    params: &BarrierParams,
) -> Result<f64, CbfError> {
    let dist = delta_p.norm();
    if dist == 0.0 {
        return Err(CbfError::Coincident);
    }
    let radial = delta_p.dot(delta_v) / dist;
    let margin = dist - params.d_s;
    let brake = (a_max * margin.abs()).sqrt();
    Ok(if margin >= 0.0 { radial + brake } else { radial - brake })
}

/// Exact one-step control barrier condition `h(x⁺) + (η−1) h(x)` under a
/// concrete control and stacked disturbance. Ground truth for the affine
/// bound.
pub fn cbc_exact<D: RobotDynamics, M: AgentModel>(
    dyn_: &D,
    model_h: &M,
    x: &AgentState,
    x_h: &AgentState,
    u: &Vector2<f64>,
    d: &StackedDisturbance,
    a_max: f64,
    params: &BarrierParams,
) -> Result<f64, CbfError> {
    params.validate()?;
    let d_robot = Disturbance::new(Vector2::new(d[0], d[1]), Vector2::new(d[2], d[3]));
    let d_agent = Disturbance::new(Vector2::new(d[4], d[5]), Vector2::new(d[6], d[7]));
    let x_next = step_robot(dyn_, x, u, &d_robot)?;
    let xh_next = step_agent(model_h, x_h, &d_agent)?;
    let h_next = h_value(&(x_next.p - xh_next.p), &(x_next.v - xh_next.v), a_max, params)?;
    let h_now = h_value(&(x.p - x_h.p), &(x.v - x_h.v), a_max, params)?;
    Ok(h_next + (params.eta - 1.0) * h_now)
}

fn singular_values(m: &Matrix2<f64>) -> (f64, f64) {
    let sv = m.svd(false, false).singular_values;
    (sv.min(), sv.max())
}

/// Guaranteed relative deceleration authority at the current pair state:
/// `σ_min(g_v) u_max` minus the worst-case drift of the relative velocity,
/// `‖f_v(x) − f_v^h(x_h) − Δv_t‖ + ζ_v + ζ_v^h`. The result is floored at
/// the configured `a_max_floor`; a non-positive raw value means the robot
/// cannot guarantee any deceleration and the caller must fall back to
/// braking.
pub fn a_max_compute<D: RobotDynamics, M: AgentModel>(
    dyn_: &D,
    model_h: &M,
    x: &AgentState,
    x_h: &AgentState,
    zeta_v: f64,
    zeta_v_h: f64,
    u_max_eff: f64,
    params: &BarrierParams,
) -> Result<f64, CbfError> {
    params.validate()?;
    if !x.is_finite() || !x_h.is_finite() {
        return Err(CbfError::NonFinite("state"));
    }
    let f_v = dyn_.drift(x).v;
    let f_v_h = model_h.predict(x_h).v;
    let dv_t = x.v - x_h.v;
    let ub_beta = (f_v - f_v_h - dv_t).norm() + zeta_v + zeta_v_h;
    let (sig_min, _) = singular_values(&dyn_.gain_v(x));
    let raw = sig_min * u_max_eff - ub_beta;
    if raw <= 0.0 {
        return Err(CbfError::AssumptionViolated { a_max: raw });
    }
    Ok(raw.max(params.a_max_floor))
}

/// Builds the affine lower-bound coefficients for one robot–agent pair.
///
/// Notation: `Δf_p = f_p(x) − f_p^h(x_h)`, `Δf_v = f_v(x) − f_v^h(x_h)`
/// are the nominal next-step relative position/velocity, `ζΣ_p = ζ_p +
/// ζ_p^h`, `ζΣ_v = ζ_v + ζ_v^h`, and the separation brackets are
/// `den⁻ = ‖Δf_p‖ − ζΣ_p`, `den⁺ = ‖Δf_p‖ + ζΣ_p`.
pub fn cbc_coefficients<D: RobotDynamics, M: AgentModel>(
    dyn_: &D,
    model_h: &M,
    x: &AgentState,
    x_h: &AgentState,
    zeta_robot: &ZetaBounds,
    zeta_agent: &ZetaBounds,
    a_max: f64,
    u_max_eff: f64,
    params: &BarrierParams,
) -> Result<CbcCoefficients, CbfError> {
    params.validate()?;
    if !(a_max > 0.0) {
        return Err(CbfError::AssumptionViolated { a_max });
    }
    let f = dyn_.drift(x);
    let f_h = model_h.predict(x_h);
    let dfp = f.p - f_h.p;
    let dfv = f.v - f_h.v;
    let g_v = dyn_.gain_v(x);

    let zsp = zeta_robot.zeta_p + zeta_agent.zeta_p;
    let zsv = zeta_robot.zeta_v + zeta_agent.zeta_v;
    let sep = dfp.norm();
    let den_minus = sep - zsp;
    let den_plus = sep + zsp;
    if den_minus <= 0.0 {
        return Err(CbfError::InfeasibleGeometry(
            "uncertainty covers the nominal next-step separation",
        ));
    }
    if den_minus - params.d_s < 0.0 {
        return Err(CbfError::InfeasibleGeometry(
            "worst-case next-step separation inside the collision margin",
        ));
    }
    let dp_t = x.p - x_h.p;
    if dp_t.norm() < params.d_s {
        return Err(CbfError::InfeasibleGeometry(
            "current separation inside the collision margin",
        ));
    }

    // Linear coefficients, all over the worst-case (smallest) separation.
    let mut h1 = SVector::<f64, 8>::zeros();
    let mut h2 = SMatrix::<f64, 2, 8>::zeros();
    for i in 0..2 {
        h1[i] = -dfv[i] / den_minus; // d_p block
        h1[2 + i] = -dfp[i] / den_minus; // d_v block
        h1[4 + i] = dfv[i] / den_minus; // d_p^h block
        h1[6 + i] = dfp[i] / den_minus; // d_v^h block
        for j in 0..2 {
            // uᵀ H2 d couples the control with the positional disturbances
            h2[(j, i)] = -g_v[(i, j)] / den_minus;
            h2[(j, 4 + i)] = g_v[(i, j)] / den_minus;
        }
    }
    let h3 = -(g_v.transpose() * dfp) / den_minus;

    // Constant part. The nominal radial term takes the worse of the two
    // separation brackets directly (its sign is unknown a priori).
    let radial_nom = dfp.dot(&dfv);
    let radial = (radial_nom / den_minus).min(radial_nom / den_plus);
    let brake = (a_max * (den_minus - params.d_s)).sqrt();
    let h_now = h_value(&dp_t, &(x.v - x_h.v), a_max, params)?;
    // cross-term of the two disturbance differences
    let z_cross = zsp * zsv;
    // penalty for pinning the sign-indefinite terms to den⁻: each term T
    // obeys T/‖Δp⁺‖ ≥ T/den⁻ − |T|·(1/den⁻ − 1/den⁺)
    let (_, g_sig_max) = singular_values(&g_v);
    let spread = 1.0 / den_minus - 1.0 / den_plus;
    let pen = spread
        * ((g_v.transpose() * dfp).norm() * u_max_eff
            + dfv.norm() * zsp
            + sep * zsv
            + g_sig_max * u_max_eff * zsp);

    let k_c = radial + brake + (params.eta - 1.0) * h_now - z_cross / den_minus - pen;

    let coeffs = CbcCoefficients { k_c, h1, h2, h3 };
    if !coeffs.is_finite() {
        return Err(CbfError::NonFinite("coefficients"));
    }
    Ok(coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ConstantVelocity, DragIntegrator};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(d_s: f64, eta: f64) -> BarrierParams {
        BarrierParams { d_s, eta, a_max_floor: 0.0 }
    }

    /// Drift-preserving robot with constant isotropic gain, for fixed-point
    /// and closed-form cases.
    struct IdentityDyn {
        gain: f64,
        u_max: f64,
    }

    impl RobotDynamics for IdentityDyn {
        fn drift(&self, x: &AgentState) -> AgentState {
            x.clone()
        }
        fn gain_v(&self, _x: &AgentState) -> Matrix2<f64> {
            Matrix2::identity() * self.gain
        }
        fn dt(&self) -> f64 {
            0.1
        }
        fn u_max(&self) -> f64 {
            self.u_max
        }
    }

    struct IdentityModel;
    impl AgentModel for IdentityModel {
        fn predict(&self, x: &AgentState) -> AgentState {
            x.clone()
        }
    }

    #[test]
    fn h_zero_on_safe_set_boundary() {
        let h = h_value(
            &Vector2::new(2.0, 0.0),
            &Vector2::new(-1.0, 0.0),
            1.0,
            &params(1.0, 0.5),
        )
        .unwrap();
        assert_relative_eq!(h, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn h_zero_at_margin_with_zero_closing_speed() {
        let h = h_value(&Vector2::new(0.0, 1.0), &Vector2::zeros(), 2.5, &params(1.0, 0.5))
            .unwrap();
        assert_relative_eq!(h, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn h_positive_for_receding_separated_agents() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let dp = Vector2::new(rng.gen_range(1.5..5.0), rng.gen_range(-2.0..2.0));
            // velocity with positive radial component
            let dv = dp * rng.gen_range(0.1..2.0)
                + Vector2::new(-dp.y, dp.x) * rng.gen_range(-1.0..1.0);
            let h = h_value(&dp, &dv, 1.0, &params(1.0, 0.5)).unwrap();
            assert!(h > 0.0);
        }
    }

    #[test]
    fn h_rejects_coincident_agents() {
        assert!(matches!(
            h_value(&Vector2::zeros(), &Vector2::new(1.0, 0.0), 1.0, &params(1.0, 0.5)),
            Err(CbfError::Coincident)
        ));
    }

    #[test]
    fn h_is_negative_inside_margin_with_zero_velocity() {
        let h = h_value(&Vector2::new(0.5, 0.0), &Vector2::zeros(), 1.0, &params(1.0, 0.5))
            .unwrap();
        assert!(h < 0.0);
    }

    proptest! {
        /// h ≥ 0 exactly when −ΔpᵀΔv/‖Δp‖ ≤ √(a_max(‖Δp‖ − D_s)).
        #[test]
        fn h_sign_matches_defining_inequality(
            px in 1.05..5.0_f64, py in -3.0..3.0_f64,
            vx in -3.0..3.0_f64, vy in -3.0..3.0_f64,
            a_max in 0.1..5.0_f64,
        ) {
            let p = params(1.0, 0.5);
            let dp = Vector2::new(px, py);
            let dv = Vector2::new(vx, vy);
            let h = h_value(&dp, &dv, a_max, &p).unwrap();
            let lhs = -dp.dot(&dv) / dp.norm();
            let rhs = (a_max * (dp.norm() - p.d_s)).sqrt();
            prop_assert_eq!(h >= 0.0, lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn cbc_fixed_point_equals_eta_h() {
        let dyn_ = IdentityDyn { gain: 1.0, u_max: 5.0 };
        let p = params(1.0, 0.4);
        let x = AgentState::from_parts(0.0, 0.0, 0.5, 0.0);
        let x_h = AgentState::from_parts(3.0, 0.0, 0.0, 0.0);
        let cbc = cbc_exact(
            &dyn_,
            &IdentityModel,
            &x,
            &x_h,
            &Vector2::zeros(),
            &StackedDisturbance::zeros(),
            1.0,
            &p,
        )
        .unwrap();
        let h = h_value(&(x.p - x_h.p), &(x.v - x_h.v), 1.0, &p).unwrap();
        assert_relative_eq!(cbc, p.eta * h, epsilon = 1e-12);
    }

    #[test]
    fn cbc_with_eta_one_is_next_h() {
        let dyn_ = DragIntegrator::new(0.1, 3.0);
        let model = ConstantVelocity { dt: 0.1 };
        let p = params(1.0, 1.0);
        let x = AgentState::from_parts(0.0, 0.0, 1.0, 0.2);
        let x_h = AgentState::from_parts(4.0, 1.0, -0.5, 0.0);
        let u = Vector2::new(0.3, -0.2);
        let d = StackedDisturbance::from_fn(|i, _| 0.01 * (i as f64 - 3.5));
        let cbc = cbc_exact(&dyn_, &model, &x, &x_h, &u, &d, 1.2, &p).unwrap();

        let d_r = Disturbance::new(Vector2::new(d[0], d[1]), Vector2::new(d[2], d[3]));
        let d_a = Disturbance::new(Vector2::new(d[4], d[5]), Vector2::new(d[6], d[7]));
        let xn = step_robot(&dyn_, &x, &u, &d_r).unwrap();
        let xhn = step_agent(&model, &x_h, &d_a).unwrap();
        let hn = h_value(&(xn.p - xhn.p), &(xn.v - xhn.v), 1.2, &p).unwrap();
        assert_relative_eq!(cbc, hn, epsilon = 1e-12);
    }

    fn rand_pair(rng: &mut impl Rng, min_sep: f64) -> (AgentState, AgentState) {
        loop {
            let x = AgentState::from_parts(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            );
            let x_h = AgentState::from_parts(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            );
            if (x.p - x_h.p).norm() >= min_sep {
                return (x, x_h);
            }
        }
    }

    #[test]
    fn cbc_matches_compositional_oracle() {
        // independent recomposition: step both agents explicitly, evaluate
        // h from raw components
        let dyn_ = DragIntegrator::new(0.1, 3.0);
        let model = ConstantVelocity { dt: 0.1 };
        let p = params(1.0, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (x, x_h) = rand_pair(&mut rng, 2.0);
            let u = Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let d = StackedDisturbance::from_fn(|_, _| rng.gen_range(-0.05..0.05));
            let cbc = cbc_exact(&dyn_, &model, &x, &x_h, &u, &d, 1.0, &p).unwrap();

            let s = 1.0 + 0.2 / (1.0 + x.v.norm_squared());
            let p_next = x.p + 0.1 * x.v + Vector2::new(d[0], d[1]);
            let v_next = x.v * (1.0 - 0.01) + 0.1 * s * u + Vector2::new(d[2], d[3]);
            let ph_next = x_h.p + 0.1 * x_h.v + Vector2::new(d[4], d[5]);
            let vh_next = x_h.v + Vector2::new(d[6], d[7]);
            let dp = p_next - ph_next;
            let dv = v_next - vh_next;
            let hn = dp.dot(&dv) / dp.norm()
                + (1.0_f64 * (dp.norm() - 1.0)).abs().sqrt()
                    * if dp.norm() >= 1.0 { 1.0 } else { -1.0 };
            let dp0 = x.p - x_h.p;
            let dv0 = x.v - x_h.v;
            let h0 = dp0.dot(&dv0) / dp0.norm()
                + (dp0.norm() - 1.0).abs().sqrt() * if dp0.norm() >= 1.0 { 1.0 } else { -1.0 };
            assert_relative_eq!(cbc, hn + (0.6 - 1.0) * h0, epsilon = 1e-12);
        }
    }

    /// Velocity-preserving drift with constant gain `dt·I`, matching a
    /// constant-velocity model of the other agent.
    struct MatchedDyn {
        dt: f64,
        u_max: f64,
    }

    impl RobotDynamics for MatchedDyn {
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

    #[test]
    fn a_max_closed_form_matched_models() {
        let dyn_ = MatchedDyn { dt: 0.1, u_max: 10.0 };
        let model = ConstantVelocity { dt: 0.1 };
        let x = AgentState::from_parts(0.0, 0.0, 1.0, -0.5);
        let x_h = AgentState::from_parts(3.0, 0.0, 0.5, 0.5);
        // drift keeps both velocities, so the relative-velocity drift is 0
        let a = a_max_compute(&dyn_, &model, &x, &x_h, 0.0, 0.0, 10.0, &params(1.0, 0.5))
            .unwrap();
        assert_relative_eq!(a, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn a_max_violated_by_large_velocity_uncertainty() {
        let dyn_ = MatchedDyn { dt: 0.1, u_max: 10.0 };
        let model = ConstantVelocity { dt: 0.1 };
        let x = AgentState::from_parts(0.0, 0.0, 1.0, 0.0);
        let x_h = AgentState::from_parts(3.0, 0.0, 0.0, 0.0);
        let r = a_max_compute(&dyn_, &model, &x, &x_h, 2.0, 0.5, 10.0, &params(1.0, 0.5));
        assert!(matches!(r, Err(CbfError::AssumptionViolated { .. })));
    }

    #[test]
    fn a_max_matches_direction_sampling_oracle() {
        // Lemma-style oracle: the guaranteed deceleration along the worst
        // direction is min over unit n of
        //   max_{‖u‖≤u_max} −nᵀ g_v u − max_{bounded d} nᵀ β_v(d).
        let dyn_ = DragIntegrator::new(0.1, 3.0);
        let model = ConstantVelocity { dt: 0.1 };
        let p = params(1.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 1000 {
            let (x, x_h) = rand_pair(&mut rng, 1.5);
            let zv = rng.gen_range(0.0..0.1);
            let zvh = rng.gen_range(0.0..0.1);
            let a = match a_max_compute(&dyn_, &model, &x, &x_h, zv, zvh, 3.0, &p) {
                Ok(a) => a,
                Err(_) => continue,
            };
            let g = dyn_.gain_v(&x);
            let beta_nom = dyn_.drift(&x).v - model.predict(&x_h).v - (x.v - x_h.v);
            let mut worst = f64::INFINITY;
            for k in 0..4000 {
                let th = 2.0 * std::f64::consts::PI * k as f64 / 4000.0;
                let n = Vector2::new(th.cos(), th.sin());
                // isotropic gain: best braking along −n is σ(g)·u_max
                let push = (g.transpose() * n).norm() * 3.0;
                let drift = n.dot(&beta_nom) + zv + zvh;
                worst = worst.min(push - drift);
            }
            assert!((a - worst).abs() < 1e-6, "a_max {a} vs oracle {worst}");
            checked += 1;
        }
    }

    #[test]
    fn a_max_monotone_in_velocity_uncertainty() {
        let dyn_ = DragIntegrator::new(0.1, 3.0);
        let model = ConstantVelocity { dt: 0.1 };
        let p = params(1.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let (x, x_h) = rand_pair(&mut rng, 1.5);
            let z1: f64 = rng.gen_range(0.0..0.1);
            let z2 = rng.gen_range(0.0..z1.max(1e-9));
            let a1 = a_max_compute(&dyn_, &model, &x, &x_h, z1, 0.0, 3.0, &p);
            let a2 = a_max_compute(&dyn_, &model, &x, &x_h, z2, 0.0, 3.0, &p);
            if let (Ok(a1), Ok(a2)) = (a1, a2) {
                assert!(a2 >= a1 - 1e-12);
            }
        }
    }

    #[test]
    fn coefficients_direct_substitution_case() {
        // ζ ≡ 0, Δf_p = (1,0), Δf_v = 0, g_v = I
        let dyn_ = IdentityDyn { gain: 1.0, u_max: 5.0 };
        let p = params(0.5, 0.5);
        let x = AgentState::from_parts(0.0, 0.0, 0.3, 0.0);
        let x_h = AgentState::from_parts(-1.0, 0.0, 0.3, 0.0);
        let z = ZetaBounds { zeta_p: 0.0, zeta_v: 0.0 };
        let c = cbc_coefficients(&dyn_, &IdentityModel, &x, &x_h, &z, &z, 1.0, 5.0, &p)
            .unwrap();
        assert_relative_eq!(c.h3[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(c.h3[1], 0.0, epsilon = 1e-12);
        let h1_expect = [0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        for (i, e) in h1_expect.iter().enumerate() {
            assert_relative_eq!(c.h1[i], *e, epsilon = 1e-12);
        }
        // H2 row-blocks: [−I | 0 | +I | 0]
        for i in 0..2 {
            for j in 0..2 {
                let id = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(c.h2[(i, j)], -id, epsilon = 1e-12);
                assert_relative_eq!(c.h2[(i, 2 + j)], 0.0, epsilon = 1e-12);
                assert_relative_eq!(c.h2[(i, 4 + j)], id, epsilon = 1e-12);
                assert_relative_eq!(c.h2[(i, 6 + j)], 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn k_c_closed_form_sqrt_only_case() {
        // ζ ≡ 0, η = 1, Δf_v = 0, ‖Δf_p‖ = 1, a_max = 1, D_s = 0.75 → k_c = 0.5
        let dyn_ = IdentityDyn { gain: 1.0, u_max: 5.0 };
        let p = params(0.75, 1.0);
        let x = AgentState::from_parts(1.0, 0.0, 0.1, 0.0);
        let x_h = AgentState::from_parts(0.0, 0.0, 0.1, 0.0);
        let z = ZetaBounds { zeta_p: 0.0, zeta_v: 0.0 };
        let c = cbc_coefficients(&dyn_, &IdentityModel, &x, &x_h, &z, &z, 1.0, 5.0, &p)
            .unwrap();
        assert_relative_eq!(c.k_c, 0.5, epsilon = 1e-12);
    }

    fn rand_zeta(rng: &mut impl Rng, cap: f64) -> ZetaBounds {
        ZetaBounds { zeta_p: rng.gen_range(0.0..cap), zeta_v: rng.gen_range(0.0..cap) }
    }

    fn rand_in_disk(rng: &mut impl Rng, r: f64) -> Vector2<f64> {
        loop {
            let v = Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if v.norm() <= 1.0 {
                return v * r;
            }
        }
    }

    #[test]
    fn bound_valid_over_sampled_disturbances_and_controls() {
        // load-bearing test: the affine bound never exceeds the exact CBC
        // anywhere in the admissible (u, d) region
        let dyn_ = DragIntegrator::new(0.1, 3.0);
        let model = ConstantVelocity { dt: 0.1 };
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut checked = 0usize;
        while checked < 10_000 {
            let p = params(rng.gen_range(0.5..1.2), rng.gen_range(0.2..1.0));
            let (x, x_h) = rand_pair(&mut rng, p.d_s + 0.8);
            let zr = rand_zeta(&mut rng, 0.15);
            let za = rand_zeta(&mut rng, 0.15);
            let a_max = match a_max_compute(
                &dyn_, &model, &x, &x_h, zr.zeta_v, za.zeta_v, 3.0, &p,
            ) {
                Ok(a) => a,
                Err(_) => continue,
            };
            let c = match cbc_coefficients(&dyn_, &model, &x, &x_h, &zr, &za, a_max, 3.0, &p)
            {
                Ok(c) => c,
                Err(_) => continue,
            };
            let u = rand_in_disk(&mut rng, 3.0);
            let dpr = rand_in_disk(&mut rng, zr.zeta_p);
            let dvr = rand_in_disk(&mut rng, zr.zeta_v);
            let dpa = rand_in_disk(&mut rng, za.zeta_p);
            let dva = rand_in_disk(&mut rng, za.zeta_v);
            let d = StackedDisturbance::from_column_slice(&[
                dpr.x, dpr.y, dvr.x, dvr.y, dpa.x, dpa.y, dva.x, dva.y,
            ]);
            let exact = cbc_exact(&dyn_, &model, &x, &x_h, &u, &d, a_max, &p).unwrap();
            let bound = c.bound(&u, &d);
            assert!(
                exact >= bound - 1e-9,
                "bound violated: exact {exact} < bound {bound} (gap {})",
                bound - exact
            );
            checked += 1;
        }
    }

    #[test]
    fn bound_never_exceeds_exact_with_zero_uncertainty() {
        let dyn_ = DragIntegrator::new(0.1, 3.0);
        let model = ConstantVelocity { dt: 0.1 };
        let z = ZetaBounds { zeta_p: 0.0, zeta_v: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut checked = 0usize;
        while checked < 2000 {
            let p = params(rng.gen_range(0.5..1.2), rng.gen_range(0.2..1.0));
            let (x, x_h) = rand_pair(&mut rng, p.d_s + 0.5);
            let a_max =
                match a_max_compute(&dyn_, &model, &x, &x_h, 0.0, 0.0, 3.0, &p) {
                    Ok(a) => a,
                    Err(_) => continue,
                };
            let c = match cbc_coefficients(&dyn_, &model, &x, &x_h, &z, &z, a_max, 3.0, &p) {
                Ok(c) => c,
                Err(_) => continue,
            };
            let u = rand_in_disk(&mut rng, 3.0);
            let d = StackedDisturbance::zeros();
            let exact = cbc_exact(&dyn_, &model, &x, &x_h, &u, &d, a_max, &p).unwrap();
            assert!(exact >= c.bound(&u, &d) - 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn geometry_preconditions_are_enforced() {
        let dyn_ = DragIntegrator::new(0.1, 3.0);
        let model = ConstantVelocity { dt: 0.1 };
        let p = params(1.0, 0.5);
        // uncertainty swallowing the separation
        let x = AgentState::from_parts(0.0, 0.0, 0.0, 0.0);
        let x_h = AgentState::from_parts(1.2, 0.0, 0.0, 0.0);
        let big = ZetaBounds { zeta_p: 2.0, zeta_v: 0.0 };
        let z0 = ZetaBounds { zeta_p: 0.0, zeta_v: 0.0 };
        assert!(matches!(
            cbc_coefficients(&dyn_, &model, &x, &x_h, &big, &z0, 1.0, 3.0, &p),
            Err(CbfError::InfeasibleGeometry(_))
        ));
        // current separation already inside the margin
        let x_h2 = AgentState::from_parts(0.5, 0.0, 0.0, 0.0);
        assert!(matches!(
            cbc_coefficients(&dyn_, &model, &x, &x_h2, &z0, &z0, 1.0, 3.0, &p),
            Err(CbfError::InfeasibleGeometry(_))
        ));
        // non-positive a_max
        assert!(matches!(
            cbc_coefficients(&dyn_, &model, &x, &x_h, &z0, &z0, 0.0, 3.0, &p),
            Err(CbfError::AssumptionViolated { .. })
        ));
    }
}
