//! Randomized multi-agent environment and Monte-Carlo harness.
//!
//! A goal-seeking robot navigates among 3–12 heterogeneous agents: roughly
//! half travel blindly to random goals under a PD law with process noise,
//! the rest run their own nominal collision filter with randomized barrier
//! parameters. The robot's safety filter runs in one of three modes —
//! `robust` (full learned-uncertainty QP), `nominal` (certainty-equivalent
//! QP), or `none` (raw PD) — and campaigns compare modes over paired seeds.

mod campaign;
mod training;
mod trial;
mod world;

pub use campaign::{run_campaign, CampaignResult, ModeSummary, SUMMARY_SCHEMA_VERSION};
pub use training::{
    collect_training_data, recalibrate_models, ModelsFile, RecalReport, TrainedModels,
    TrainingData,
};
pub use trial::{run_trial, run_trial_on, CalibrationSample, TrialRecord, RECORD_SCHEMA_VERSION};
pub use world::{spawn_scenario, Agent, Behavior, World};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::BarrierParams;

/// Gaussian mass within ±2σ in one dimension; the 2σ ellipsoid is the
/// chi-square quantile of this mass.
pub const TWO_SIGMA_MASS: f64 = 0.954_499_736_103_642;
/// Gaussian mass within ±3σ in one dimension.
pub const THREE_SIGMA_MASS: f64 = 0.997_300_203_936_740;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("could not place agents after {0} rejection attempts (arena too small)")]
    SpawnFailed(usize),
    #[error("robust filter mode requires trained models")]
    MissingModels,
    #[error("invalid scenario config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Bounds(#[from] crate::bounds::BoundsError),
    #[error(transparent)]
    Mvg(#[from] crate::mvg::MvgError),
    #[error(transparent)]
    Qp(#[from] crate::robustqp::QpError),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
    #[error(transparent)]
    Cbf(#[from] crate::cbf::CbfError),
}

/// Robot safety-filter variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    /// Learned-uncertainty robust QP.
    Robust,
    /// Certainty-equivalent QP (zero-width uncertainty set).
    Nominal,
    /// Unfiltered desired control.
    None,
}

impl std::fmt::Display for FilterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FilterMode::Robust => write!(f, "robust"),
            FilterMode::Nominal => write!(f, "nominal"),
            FilterMode::None => write!(f, "none"),
        }
    }
}

impl std::str::FromStr for FilterMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "robust" => Ok(FilterMode::Robust),
            "nominal" => Ok(FilterMode::Nominal),
            "none" => Ok(FilterMode::None),
            other => Err(format!("unknown filter mode '{other}'")),
        }
    }
}

/// Full scenario parameterization; one value per trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Inclusive range the agent count is drawn from.
    pub n_agents_range: (usize, usize),
    /// Square arena half-width, meters.
    pub arena_half_width: f64,
    /// Fraction of agents that ignore everyone else (rounded half up).
    pub blind_fraction: f64,
    pub dt: f64,
    pub horizon: usize,
    /// Confidence parameter δ of the disturbance sets.
    pub delta: f64,
    pub barrier: BarrierParams,
    /// Barrier decay rate used while a pair's barrier value is negative
    /// (recovery). Invariance of the safe set only constrains the rate used
    /// at h ≥ 0 (`barrier.eta`); a gentler recovery rate keeps the one-step
    /// condition achievable under bounded control authority.
    pub eta_recovery: f64,
    /// Robot acceleration 2-norm bound, m/s².
    pub u_max: f64,
    /// Agent acceleration 2-norm bound, m/s². Kept below `u_max` so the
    /// robot retains enough relative authority for the braking guarantee.
    pub agent_a_max: f64,
    pub goal_radius: f64,
    /// Constraint activation radius as a multiple of `D_s`.
    pub activation_radius_factor: f64,
    /// Facets of the inscribed control polygon.
    pub ball_facets: usize,
    /// Sliding-window capacity of the online disturbance models.
    pub window_capacity: usize,
    /// Std of agent acceleration process noise, m/s².
    pub process_noise: f64,
    /// Std of the robot's own acceleration disturbance, m/s².
    pub robot_noise: f64,
    /// Agents' goal-seeking PD gains.
    pub k_p: f64,
    pub k_d: f64,
    /// Robot's goal-seeking PD gains; softer than the agents' so desired
    /// cruise speeds stay within the filter's reach.
    pub robot_k_p: f64,
    pub robot_k_d: f64,
    pub seed: u64,
    pub filter_mode: FilterMode,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_agents_range: (3, 12),
            arena_half_width: 16.0,
            blind_fraction: 0.5,
            dt: 0.1,
            horizon: 400,
            delta: 0.05,
            barrier: BarrierParams { d_s: 1.0, eta: 0.5, a_max_floor: 0.0 },
            eta_recovery: 0.05,
            u_max: 6.0,
            agent_a_max: 1.0,
            goal_radius: 0.5,
            activation_radius_factor: 6.0,
            ball_facets: 16,
            window_capacity: 25,
            process_noise: 0.2,
            robot_noise: 0.1,
            k_p: 1.0,
            k_d: 1.4,
            robot_k_p: 0.5,
            robot_k_d: 1.5,
            seed: 0,
            filter_mode: FilterMode::Robust,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_agents_range.0 < 1 || self.n_agents_range.0 > self.n_agents_range.1 {
            return Err(SimError::BadConfig("agent count range empty".into()));
        }
        if !(0.0..=1.0).contains(&self.blind_fraction) {
            return Err(SimError::BadConfig("blind fraction outside [0,1]".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(SimError::BadConfig("delta outside (0,1)".into()));
        }
        if self.dt <= 0.0 || self.horizon == 0 || self.u_max <= 0.0 {
            return Err(SimError::BadConfig("nonpositive dt/horizon/u_max".into()));
        }
        if self.agent_a_max <= 0.0 {
            return Err(SimError::BadConfig("nonpositive agent_a_max".into()));
        }
        self.barrier
            .validate()
            .map_err(|e| SimError::BadConfig(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.eta_recovery) {
            return Err(SimError::BadConfig("eta_recovery outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn activation_radius(&self) -> f64 {
        self.activation_radius_factor * self.barrier.d_s
    }
}
