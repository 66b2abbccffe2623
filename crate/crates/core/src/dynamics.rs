//! Domain types for agent states, dynamics models, and one-step transitions.
//!
//! The robot follows discrete-time control-affine dynamics
//! `x_{t+1} = f(x_t) + g(x_t) u + d(x_t)` with a relative-degree-2 structure:
//! the input gain on the positional block is identically zero. Other agents
//! evolve as `x_{t+1} = f_i(x_t) + d_i(x_t)` where all of their (unknown)
//! control behavior is folded into the disturbance `d_i`.

use nalgebra::{Matrix2, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Position/velocity/extra state of one agent at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    /// Position, meters.
    pub p: Vector2<f64>,
    /// Velocity, m/s.
    pub v: Vector2<f64>,
    /// Extra states, dimensionless. Empty for the shipped planar dynamics.
    pub z: Vec<f64>,
}

impl AgentState {
    pub fn new(p: Vector2<f64>, v: Vector2<f64>) -> Self {
        Self { p, v, z: Vec::new() }
    }

    pub fn from_parts(px: f64, py: f64, vx: f64, vy: f64) -> Self {
        Self::new(Vector2::new(px, py), Vector2::new(vx, vy))
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).chain(self.z.iter()).all(|c| c.is_finite())
    }

    /// Stacked (p, v) vector used as the kernel input.
    pub fn as_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.p.x, self.p.y, self.v.x, self.v.y)
    }
}

/// Additive disturbance on the positional and velocity blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    /// Positional disturbance, meters.
    pub d_p: Vector2<f64>,
    /// Velocity disturbance, m/s.
    pub d_v: Vector2<f64>,
}

impl Disturbance {
    pub const ZERO: Disturbance = Disturbance {
        d_p: Vector2::new(0.0, 0.0),
        d_v: Vector2::new(0.0, 0.0),
    };

    pub fn new(d_p: Vector2<f64>, d_v: Vector2<f64>) -> Self {
        Self { d_p, d_v }
    }

    pub fn is_finite(&self) -> bool {
        self.d_p.iter().chain(self.d_v.iter()).all(|c| c.is_finite())
    }

    /// Stacked `[d_p, d_v]` 4-vector.
    pub fn as_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.d_p.x, self.d_p.y, self.d_v.x, self.d_v.y)
    }

    pub fn from_vector4(d: &Vector4<f64>) -> Self {
        Self::new(Vector2::new(d[0], d[1]), Vector2::new(d[2], d[3]))
    }

    pub fn norm_inf(&self) -> f64 {
        self.as_vector4().amax()
    }
}

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("control norm {norm} exceeds bound {bound}")]
    ControlBound { norm: f64, bound: f64 },
}

/// Known robot dynamics: drift `f`, velocity input gain `g_v`, step length
/// and control bound. The positional gain `g_p` is identically zero by
/// construction (relative degree 2), so it never appears explicitly.
pub trait RobotDynamics {
    /// Drift map `f(x)`, the next state under zero input and zero disturbance.
    fn drift(&self, x: &AgentState) -> AgentState;
    /// Velocity-block input gain `g_v(x)`.
    fn gain_v(&self, x: &AgentState) -> Matrix2<f64>;
    /// Step length, seconds.
    fn dt(&self) -> f64;
    /// Control 2-norm bound.
    fn u_max(&self) -> f64;
}

/// Robot's nominal model of another agent's autonomous dynamics.
pub trait AgentModel {
    /// Nominal next state `f_i(x)`. Must be deterministic.
    fn predict(&self, x: &AgentState) -> AgentState;
}

/// Shipped robot dynamics: damped double integrator with a velocity-dependent
/// input gain `g_v(x) = dt * s(x) * I`, `s(x) = 1 + 0.2 / (1 + ||v||^2)`.
/// `s` ranges over [1, 1.2], so `g_v` is invertible everywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DragIntegrator {
    pub dt: f64,
    pub u_max: f64,
    pub c_drag: f64,
}

impl DragIntegrator {
    pub fn new(dt: f64, u_max: f64) -> Self {
        Self { dt, u_max, c_drag: 0.1 }
    }
}

impl RobotDynamics for DragIntegrator {
    fn drift(&self, x: &AgentState) -> AgentState {
        AgentState {
            p: x.p + self.dt * x.v,
            v: x.v - self.c_drag * self.dt * x.v,
            z: x.z.clone(),
        }
    }

    fn gain_v(&self, x: &AgentState) -> Matrix2<f64> {
        let s = 1.0 + 0.2 / (1.0 + x.v.norm_squared());
        Matrix2::identity() * (self.dt * s)
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn u_max(&self) -> f64 {
        self.u_max
    }
}

/// Constant-velocity nominal model of other agents: `p' = p + dt v`, `v' = v`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantVelocity {
    pub dt: f64,
}

impl AgentModel for ConstantVelocity {
    fn predict(&self, x: &AgentState) -> AgentState {
        AgentState {
            p: x.p + self.dt * x.v,
            v: x.v,
            z: x.z.clone(),
        }
    }
}

/// One robot step: `f(x) + g(x) u + d`.
pub fn step_robot<D: RobotDynamics>(
    dyn_: &D,
    x: &AgentState,
    u: &Vector2<f64>,
    d: &Disturbance,
) -> Result<AgentState, DynamicsError> {
    if !x.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    if !u.iter().all(|c| c.is_finite()) {
        return Err(DynamicsError::NonFinite("control"));
    }
    if !d.is_finite() {
        return Err(DynamicsError::NonFinite("disturbance"));
    }
    let norm = u.norm();
    if norm > dyn_.u_max() + 1e-9 {
        return Err(DynamicsError::ControlBound { norm, bound: dyn_.u_max() });
    }
    let f = dyn_.drift(x);
    Ok(AgentState {
        p: f.p + d.d_p,
        v: f.v + dyn_.gain_v(x) * u + d.d_v,
        z: f.z,
    })
}

/// One agent step: `f_i(x) + d`.
pub fn step_agent<M: AgentModel>(
    model: &M,
    x: &AgentState,
    d: &Disturbance,
) -> Result<AgentState, DynamicsError> {
    if !x.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    if !d.is_finite() {
        return Err(DynamicsError::NonFinite("disturbance"));
    }
    let f = model.predict(x);
    Ok(AgentState {
        p: f.p + d.d_p,
        v: f.v + d.d_v,
        z: f.z,
    })
}

/// Exact disturbance residual of an observed robot transition:
/// `d = x_next - f(x) - g(x) u`.
pub fn extract_robot_disturbance<D: RobotDynamics>(
    dyn_: &D,
    x: &AgentState,
    x_next: &AgentState,
    u: &Vector2<f64>,
) -> Result<Disturbance, DynamicsError> {
    if !x.is_finite() || !x_next.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    if !u.iter().all(|c| c.is_finite()) {
        return Err(DynamicsError::NonFinite("control"));
    }
    let f = dyn_.drift(x);
    Ok(Disturbance {
        d_p: x_next.p - f.p,
        d_v: x_next.v - f.v - dyn_.gain_v(x) * u,
    })
}

/// Exact disturbance residual of an observed agent transition:
/// `d = x_next - f_i(x)`.
pub fn extract_agent_disturbance<M: AgentModel>(
    model: &M,
    x: &AgentState,
    x_next: &AgentState,
) -> Result<Disturbance, DynamicsError> {
    if !x.is_finite() || !x_next.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    let f = model.predict(x);
    Ok(Disturbance {
        d_p: x_next.p - f.p,
        d_v: x_next.v - f.v,
    })
}
