//! `rcbf calibrate`: coverage report over previously written trial records
//! — empirical 2σ/3σ containment fractions with Wilson 95% intervals, plus
//! the whitened scatter data behind them.

use std::io::Write;
use std::path::PathBuf;

use robust_cbf::bounds::chi2_quantile;
use robust_cbf::sim::{TrialRecord, THREE_SIGMA_MASS, TWO_SIGMA_MASS};
use serde::Serialize;

use crate::config::prepare_out_dir;
use crate::AppError;

#[derive(Debug, clap::Args)]
pub struct CalibrateArgs {
    /// records.jsonl produced by `rcbf run`
    #[arg(long)]
    pub records: PathBuf,
    /// Output directory (default: directory containing the records)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// 95% Wilson score interval for a binomial fraction.
pub fn wilson_interval(hits: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64; // Φ⁻¹(0.975)
    let nf = n as f64;
    let p = hits as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let center = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Serialize)]
struct LevelReport {
    threshold: f64,
    hits: usize,
    fraction: f64,
    wilson_low: f64,
    wilson_high: f64,
}

#[derive(Serialize)]
struct CalibrationReport {
    n_records: usize,
    n_samples: usize,
    two_sigma: LevelReport,
    three_sigma: LevelReport,
}

fn level(qs: &[f64], threshold: f64) -> LevelReport {
    let hits = qs.iter().filter(|&&q| q <= threshold).count();
    let (lo, hi) = wilson_interval(hits, qs.len());
    LevelReport {
        threshold,
        hits,
        fraction: hits as f64 / qs.len().max(1) as f64,
        wilson_low: lo,
        wilson_high: hi,
    }
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<(), AppError> {
    let text = std::fs::read_to_string(&args.records).map_err(|e| {
        AppError::usage(format!("cannot read records {}: {e}", args.records.display()))
    })?;
    let mut records: Vec<TrialRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line).map_err(|e| {
            AppError::usage(format!("bad record on line {}: {e}", i + 1))
        })?);
    }
    if records.is_empty() {
        return Err(AppError::usage("records file contains no trials"));
    }
    let samples: Vec<&robust_cbf::sim::CalibrationSample> =
        records.iter().flat_map(|r| r.calibration.iter()).collect();
    if samples.is_empty() {
        return Err(AppError::usage(
            "records carry no calibration samples (was this a robust-mode run?)",
        ));
    }

    let out = args.out.clone().unwrap_or_else(|| {
        args.records
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."))
    });
    let out_dir = prepare_out_dir(&out)?;

    let t2 = chi2_quantile(TWO_SIGMA_MASS, 4).map_err(|e| AppError::numeric(e.to_string()))?;
    let t3 = chi2_quantile(THREE_SIGMA_MASS, 4).map_err(|e| AppError::numeric(e.to_string()))?;
    let qs: Vec<f64> = samples.iter().map(|s| s.q).collect();
    let report = CalibrationReport {
        n_records: records.len(),
        n_samples: qs.len(),
        two_sigma: level(&qs, t2),
        three_sigma: level(&qs, t3),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| AppError::numeric(format!("cannot serialize report: {e}")))?;
    std::fs::write(out_dir.join("calibration.json"), &json)
        .map_err(|e| AppError::usage(format!("cannot write report: {e}")))?;

    // one row per record, for drill-down plots
    let mut per = std::fs::File::create(out_dir.join("calibration_per_trial.csv"))
        .map_err(|e| AppError::usage(format!("cannot write per-trial table: {e}")))?;
    writeln!(per, "seed,samples,frac_2s,frac_3s")
        .map_err(|e| AppError::usage(e.to_string()))?;
    for r in &records {
        let n = r.calibration.len();
        let h2 = r.calibration.iter().filter(|s| s.q <= t2).count();
        let h3 = r.calibration.iter().filter(|s| s.q <= t3).count();
        writeln!(
            per,
            "{},{},{},{}",
            r.seed,
            n,
            h2 as f64 / n.max(1) as f64,
            h3 as f64 / n.max(1) as f64
        )
        .map_err(|e| AppError::usage(e.to_string()))?;
    }

    // normalized scatter: whitened disturbances, one row per sample
    let mut sc = std::fs::File::create(out_dir.join("calibration_scatter.csv"))
        .map_err(|e| AppError::usage(format!("cannot write scatter: {e}")))?;
    writeln!(sc, "q,wx,wy").map_err(|e| AppError::usage(e.to_string()))?;
    for s in &samples {
        writeln!(sc, "{},{},{}", s.q, s.whitened_v[0], s.whitened_v[1])
            .map_err(|e| AppError::usage(e.to_string()))?;
    }

    println!("{json}");
    Ok(())
}
