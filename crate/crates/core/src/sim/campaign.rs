//! Monte-Carlo campaign runner: paired-seed trials across filter modes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::training::TrainedModels;
use super::trial::{run_trial, TrialRecord};
use super::{FilterMode, ScenarioConfig, SimError, THREE_SIGMA_MASS, TWO_SIGMA_MASS};
use crate::bounds::chi2_quantile;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// JSON has no NaN literal; statistics that may be undefined (e.g.
/// calibration fractions outside robust mode) round-trip as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Aggregate statistics of one mode over a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub schema_version: u32,
    pub mode: FilterMode,
    pub n_trials: usize,
    pub collisions: usize,
    pub collision_rate: f64,
    /// Mean/std of the distance-to-collision margin over non-collided
    /// trials; NaN if every trial collided.
    #[serde(with = "nan_as_null")]
    pub distance_to_collision_mean: f64,
    #[serde(with = "nan_as_null")]
    pub distance_to_collision_std: f64,
    pub reached_goal_rate: f64,
    /// Fallback (braking) events per executed step.
    pub fallback_rate: f64,
    /// Fractions of realized disturbances inside the 2σ / 3σ ellipsoids
    /// (robust mode only; NaN otherwise).
    #[serde(with = "nan_as_null")]
    pub calibration_2s: f64,
    #[serde(with = "nan_as_null")]
    pub calibration_3s: f64,
    pub calibration_samples: usize,
    pub certified_steps: usize,
    pub certified_violations: usize,
    /// Fraction of containment-checked agent-steps whose realized
    /// disturbance fell outside its uncertainty set.
    #[serde(with = "nan_as_null")]
    pub d_outside_fraction: f64,
    pub seeds: Vec<u64>,
}

/// All per-trial records plus one summary per mode.
#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<ModeSummary>,
}

/// Chi-square thresholds (4 degrees of freedom) matching the 1-D Gaussian
/// 2σ and 3σ probability masses.
pub(crate) fn sigma_thresholds() -> (f64, f64) {
    (
        chi2_quantile(TWO_SIGMA_MASS, 4).expect("valid mass"),
        chi2_quantile(THREE_SIGMA_MASS, 4).expect("valid mass"),
    )
}

/// Summarizes records of one mode.
pub fn summarize(mode: FilterMode, records: &[&TrialRecord]) -> ModeSummary {
    let n = records.len();
    let collisions = records.iter().filter(|r| r.collided).count();
    let survivors: Vec<f64> = records
        .iter()
        .filter(|r| !r.collided)
        .map(|r| r.distance_to_collision)
        .collect();
    let dtc_mean = if survivors.is_empty() {
        f64::NAN
    } else {
        survivors.iter().sum::<f64>() / survivors.len() as f64
    };
    let dtc_std = if survivors.len() < 2 {
        f64::NAN
    } else {
        (survivors.iter().map(|d| (d - dtc_mean).powi(2)).sum::<f64>()
            / (survivors.len() - 1) as f64)
            .sqrt()
    };
    let steps: usize = records.iter().map(|r| r.steps).sum();
    let fallbacks: usize = records.iter().map(|r| r.fallback_events).sum();
    let (t2, t3) = sigma_thresholds();
    let mut calib_n = 0usize;
    let (mut in2, mut in3) = (0usize, 0usize);
    for r in records {
        for s in &r.calibration {
            calib_n += 1;
            if s.q <= t2 {
                in2 += 1;
            }
            if s.q <= t3 {
                in3 += 1;
            }
        }
    }
    let d_checked: usize = records.iter().map(|r| r.d_checked).sum();
    let d_outside: usize = records.iter().map(|r| r.d_outside).sum();

    ModeSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        mode,
        n_trials: n,
        collisions,
        collision_rate: collisions as f64 / n.max(1) as f64,
        distance_to_collision_mean: dtc_mean,
        distance_to_collision_std: dtc_std,
        reached_goal_rate: records.iter().filter(|r| r.reached_goal).count() as f64
            / n.max(1) as f64,
        fallback_rate: fallbacks as f64 / steps.max(1) as f64,
        calibration_2s: if calib_n == 0 { f64::NAN } else { in2 as f64 / calib_n as f64 },
        calibration_3s: if calib_n == 0 { f64::NAN } else { in3 as f64 / calib_n as f64 },
        calibration_samples: calib_n,
        certified_steps: records.iter().map(|r| r.certified_steps).sum(),
        certified_violations: records.iter().map(|r| r.certified_violations).sum(),
        d_outside_fraction: if d_checked == 0 {
            f64::NAN
        } else {
            d_outside as f64 / d_checked as f64
        },
        seeds: records.iter().map(|r| r.seed).collect(),
    }
}

/// Runs `n_trials` per mode over paired seeds (`cfg.seed + trial index`)
/// in parallel. All world randomness is seed-derived, so every mode sees
/// the same scenarios and the same agent noise sequences.
pub fn run_campaign(
    cfg: &ScenarioConfig,
    n_trials: usize,
    modes: &[FilterMode],
    models: Option<&TrainedModels>,
) -> Result<CampaignResult, SimError> {
    if n_trials == 0 {
        return Err(SimError::BadConfig("n_trials must be ≥ 1".into()));
    }
    let jobs: Vec<(FilterMode, u64)> = modes
        .iter()
        .flat_map(|&m| (0..n_trials).map(move |i| (m, cfg.seed.wrapping_add(i as u64))))
        .collect();
    let records: Result<Vec<TrialRecord>, SimError> = jobs
        .par_iter()
        .map(|&(mode, seed)| {
            let mut c = cfg.clone();
            c.filter_mode = mode;
            c.seed = seed;
            run_trial(&c, models)
        })
        .collect();
    let records = records?;
    let summaries = modes
        .iter()
        .map(|&m| {
            let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.mode == m).collect();
            summarize(m, &rs)
        })
        .collect();
    Ok(CampaignResult { records, summaries })
}
