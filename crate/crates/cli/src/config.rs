//! Run configuration: a TOML file provides base values, command-line flags
//! override individual fields, and the fully resolved result is snapshotted
//! next to every command's outputs.

use std::path::{Path, PathBuf};

use robust_cbf::mvg::TrainConfig;
use robust_cbf::sim::ScenarioConfig;
use serde::{Deserialize, Serialize};

use crate::AppError;

/// Environment variable naming the directory all relative output paths are
/// resolved against.
pub const OUTPUT_ROOT_ENV: &str = "RCBF_OUT";

/// Default number of synthetic training episodes.
pub const DEFAULT_EPISODES: usize = 12;
/// Default hyperparameter-fit seed (decoupled from the scenario seed so
/// changing one does not silently change the other).
pub const DEFAULT_TRAIN_SEED: u64 = 1;

/// Optional overrides for [`ScenarioConfig`]; unset fields keep defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioPatch {
    pub n_agents_range: Option<(usize, usize)>,
    pub arena_half_width: Option<f64>,
    pub blind_fraction: Option<f64>,
    pub dt: Option<f64>,
    pub horizon: Option<usize>,
    pub delta: Option<f64>,
    pub d_s: Option<f64>,
    pub eta: Option<f64>,
    pub a_max_floor: Option<f64>,
    pub eta_recovery: Option<f64>,
    pub u_max: Option<f64>,
    pub agent_a_max: Option<f64>,
    pub goal_radius: Option<f64>,
    pub activation_radius_factor: Option<f64>,
    pub ball_facets: Option<usize>,
    pub window_capacity: Option<usize>,
    pub process_noise: Option<f64>,
    pub robot_noise: Option<f64>,
    pub k_p: Option<f64>,
    pub k_d: Option<f64>,
    pub robot_k_p: Option<f64>,
    pub robot_k_d: Option<f64>,
    pub seed: Option<u64>,
}

impl ScenarioPatch {
    pub fn apply(&self, cfg: &mut ScenarioConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            n_agents_range,
            arena_half_width,
            blind_fraction,
            dt,
            horizon,
            delta,
            eta_recovery,
            u_max,
            agent_a_max,
            goal_radius,
            activation_radius_factor,
            ball_facets,
            window_capacity,
            process_noise,
            robot_noise,
            k_p,
            k_d,
            robot_k_p,
            robot_k_d,
            seed
        );
        if let Some(v) = self.d_s {
            cfg.barrier.d_s = v;
        }
        if let Some(v) = self.eta {
            cfg.barrier.eta = v;
        }
        if let Some(v) = self.a_max_floor {
            cfg.barrier.a_max_floor = v;
        }
    }
}

/// Optional overrides for the training pipeline.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPatch {
    pub episodes: Option<usize>,
    pub learning_rate: Option<f64>,
    pub steps: Option<usize>,
    pub restarts: Option<usize>,
    pub holdout_fraction: Option<f64>,
    pub seed: Option<u64>,
}

/// Top-level layout of a config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub scenario: Option<ScenarioPatch>,
    pub train: Option<TrainPatch>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, AppError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    AppError::usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text).map_err(|e| {
                    AppError::usage(format!("cannot parse config {}: {e}", p.display()))
                })
            }
        }
    }
}

/// Fully resolved training-pipeline parameters.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedTrain {
    pub episodes: usize,
    #[serde(flatten)]
    pub train: TrainConfig,
}

/// Builds the resolved scenario from file + flag overrides (flags win).
pub fn resolve_scenario(
    file: &FileConfig,
    flag_seed: Option<u64>,
) -> Result<ScenarioConfig, AppError> {
    let mut cfg = ScenarioConfig::default();
    if let Some(p) = &file.scenario {
        p.apply(&mut cfg);
    }
    if let Some(s) = flag_seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| AppError::usage(e.to_string()))?;
    Ok(cfg)
}

/// Builds the resolved training parameters from file + flag overrides.
pub fn resolve_train(
    file: &FileConfig,
    episodes: Option<usize>,
    steps: Option<usize>,
    restarts: Option<usize>,
) -> ResolvedTrain {
    let patch = file.train.clone().unwrap_or_default();
    let mut tc = TrainConfig { seed: DEFAULT_TRAIN_SEED, ..TrainConfig::default() };
    if let Some(v) = patch.learning_rate {
        tc.learning_rate = v;
    }
    if let Some(v) = patch.steps {
        tc.steps = v;
    }
    if let Some(v) = patch.restarts {
        tc.restarts = v;
    }
    if let Some(v) = patch.holdout_fraction {
        tc.holdout_fraction = v;
    }
    if let Some(v) = patch.seed {
        tc.seed = v;
    }
    if let Some(v) = steps {
        tc.steps = v;
    }
    if let Some(v) = restarts {
        tc.restarts = v;
    }
    let episodes = episodes.or(patch.episodes).unwrap_or(DEFAULT_EPISODES);
    ResolvedTrain { episodes, train: tc }
}

/// Resolves an output directory against the `RCBF_OUT` root (absolute paths
/// pass through) and creates it.
pub fn prepare_out_dir(out: &Path) -> Result<PathBuf, AppError> {
    let resolved = if out.is_absolute() {
        out.to_path_buf()
    } else {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(out),
            None => out.to_path_buf(),
        }
    };
    std::fs::create_dir_all(&resolved)
        .map_err(|e| AppError::usage(format!("cannot create {}: {e}", resolved.display())))?;
    Ok(resolved)
}

/// Writes the resolved-config snapshot every command leaves next to its
/// outputs.
pub fn write_snapshot<T: Serialize>(dir: &Path, snapshot: &T) -> Result<(), AppError> {
    let text = toml::to_string_pretty(snapshot)
        .map_err(|e| AppError::numeric(format!("cannot serialize config snapshot: {e}")))?;
    std::fs::write(dir.join("resolved_config.toml"), text)
        .map_err(|e| AppError::usage(format!("cannot write snapshot: {e}")))
}
