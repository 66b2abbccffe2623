//! `rcbf run`: execute a Monte-Carlo campaign in one filter mode, writing
//! per-trial records (JSON lines), a summary, and plot data.

use std::io::Write;
use std::path::{Path, PathBuf};

use robust_cbf::sim::{
    run_campaign, FilterMode, ModelsFile, ScenarioConfig, TrialRecord,
};
use serde::Serialize;

use crate::config::{prepare_out_dir, write_snapshot, FileConfig};
use crate::AppError;

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// TOML config file; flags override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (relative paths resolve against $RCBF_OUT)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Filter mode to run
    #[arg(long)]
    pub mode: FilterMode,
    /// Number of trials (seeds seed, seed+1, …)
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    /// Trained model bundle (required in robust mode)
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Base scenario seed override
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker thread cap (default: all cores)
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Serialize)]
struct RunSnapshot<'a> {
    command: &'a str,
    mode: FilterMode,
    trials: usize,
    models: Option<&'a Path>,
    scenario: &'a ScenarioConfig,
}

fn write_plot_data(dir: &Path, records: &[TrialRecord]) -> std::io::Result<()> {
    // robot trajectory traces, one row per executed step
    let mut traj = std::fs::File::create(dir.join("trajectories.csv"))?;
    writeln!(traj, "seed,step,x,y")?;
    for r in records {
        for (i, p) in r.robot_path.iter().enumerate() {
            writeln!(traj, "{},{},{},{}", r.seed, i, p[0], p[1])?;
        }
    }
    // whitened disturbance scatter with its chi-square statistic; in these
    // coordinates the 2σ/3σ ellipsoid cross-sections are origin-centered
    // circles of radius 2 and 3
    let mut sc = std::fs::File::create(dir.join("scatter.csv"))?;
    writeln!(sc, "seed,q,wx,wy")?;
    for r in records {
        for s in &r.calibration {
            writeln!(sc, "{},{},{},{}", r.seed, s.q, s.whitened_v[0], s.whitened_v[1])?;
        }
    }
    let mut el = std::fs::File::create(dir.join("ellipses.csv"))?;
    writeln!(el, "theta,x_2s,y_2s,x_3s,y_3s")?;
    for k in 0..=128 {
        let th = 2.0 * std::f64::consts::PI * (k as f64) / 128.0;
        let (s, c) = th.sin_cos();
        writeln!(el, "{th},{},{},{},{}", 2.0 * c, 2.0 * s, 3.0 * c, 3.0 * s)?;
    }
    Ok(())
}

pub fn cmd_run(args: &RunArgs) -> Result<(), AppError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut cfg = crate::config::resolve_scenario(&file, args.seed)?;
    cfg.filter_mode = args.mode;
    if args.trials == 0 {
        return Err(AppError::usage("--trials must be ≥ 1"));
    }
    if let Some(jobs) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| AppError::usage(format!("cannot configure --jobs: {e}")))?;
    }

    let models = match &args.models {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                AppError::usage(format!("cannot read models {}: {e}", path.display()))
            })?;
            let bundle = ModelsFile::from_json(&text).map_err(|e| {
                AppError::usage(format!("cannot parse models {}: {e}", path.display()))
            })?;
            Some(bundle.into_models())
        }
        None => None,
    };
    if args.mode == FilterMode::Robust && models.is_none() {
        return Err(AppError::usage("robust mode requires --models"));
    }

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("run-{}", args.mode)));
    let out_dir = prepare_out_dir(&out)?;
    write_snapshot(
        &out_dir,
        &RunSnapshot {
            command: "run",
            mode: args.mode,
            trials: args.trials,
            models: args.models.as_deref(),
            scenario: &cfg,
        },
    )?;

    let result = run_campaign(&cfg, args.trials, &[args.mode], models.as_ref())
        .map_err(|e| AppError::numeric(e.to_string()))?;

    let mut records = std::fs::File::create(out_dir.join("records.jsonl"))
        .map_err(|e| AppError::usage(format!("cannot write records: {e}")))?;
    for r in &result.records {
        let line = serde_json::to_string(r)
            .map_err(|e| AppError::numeric(format!("cannot serialize record: {e}")))?;
        writeln!(records, "{line}")
            .map_err(|e| AppError::usage(format!("cannot write records: {e}")))?;
    }
    let summary = &result.summaries[0];
    let summary_json = serde_json::to_string_pretty(summary)
        .map_err(|e| AppError::numeric(format!("cannot serialize summary: {e}")))?;
    std::fs::write(out_dir.join("summary.json"), summary_json)
        .map_err(|e| AppError::usage(format!("cannot write summary: {e}")))?;
    write_plot_data(&out_dir, &result.records)
        .map_err(|e| AppError::usage(format!("cannot write plot data: {e}")))?;

    println!(
        "{} trials ({} mode): collision rate {:.4}, goal rate {:.4} → {}",
        summary.n_trials,
        summary.mode,
        summary.collision_rate,
        summary.reached_goal_rate,
        out_dir.display()
    );
    Ok(())
}
