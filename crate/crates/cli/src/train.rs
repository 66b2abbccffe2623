//! `rcbf train`: synthesize (or load) a training dataset, fit both
//! disturbance-model classes, recalibrate their predictive variance, and
//! write the model bundle plus diagnostics.

use std::io::Write;
use std::path::{Path, PathBuf};

use robust_cbf::mvg::{train, TrainOutcome};
use robust_cbf::sim::{
    collect_training_data, recalibrate_models, ModelsFile, RecalReport, ScenarioConfig,
    TrainedModels, TrainingData,
};
use serde::Serialize;

use crate::config::{prepare_out_dir, write_snapshot, FileConfig, ResolvedTrain};
use crate::AppError;

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// TOML config file; flags override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (relative paths resolve against $RCBF_OUT)
    #[arg(long, default_value = "train-out")]
    pub out: PathBuf,
    /// JSON dataset to train on; omit to synthesize one
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthesize the dataset when --data is missing or absent, and save it
    /// next to the models
    #[arg(long)]
    pub generate: bool,
    /// Synthetic training episodes
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Optimizer steps per restart
    #[arg(long)]
    pub steps: Option<usize>,
    /// Random restarts
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Scenario seed override
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct TrainSnapshot<'a> {
    command: &'a str,
    scenario: &'a ScenarioConfig,
    train: &'a ResolvedTrain,
}

#[derive(Serialize)]
struct ClassReport<'a> {
    holdout_nll: f64,
    recalibration: RecalReport,
    restarts: &'a [robust_cbf::mvg::RestartReport],
}

#[derive(Serialize)]
struct TrainingReport<'a> {
    robot: ClassReport<'a>,
    agent: ClassReport<'a>,
}

fn load_or_generate(
    args: &TrainArgs,
    cfg: &ScenarioConfig,
    resolved: &ResolvedTrain,
    out_dir: &Path,
) -> Result<TrainingData, AppError> {
    if let Some(path) = &args.data {
        match std::fs::read_to_string(path) {
            Ok(text) => {
                return serde_json::from_str(&text).map_err(|e| {
                    AppError::usage(format!("cannot parse dataset {}: {e}", path.display()))
                });
            }
            Err(e) if !args.generate => {
                return Err(AppError::usage(format!(
                    "cannot read dataset {}: {e} (pass --generate to synthesize one)",
                    path.display()
                )));
            }
            Err(_) => {}
        }
    }
    let data = collect_training_data(cfg, resolved.episodes)
        .map_err(|e| AppError::numeric(e.to_string()))?;
    if args.generate {
        let path = args
            .data
            .clone()
            .unwrap_or_else(|| out_dir.join("training_data.json"));
        let text = serde_json::to_string(&data)
            .map_err(|e| AppError::numeric(format!("cannot serialize dataset: {e}")))?;
        std::fs::write(&path, text).map_err(|e| {
            AppError::usage(format!("cannot write dataset {}: {e}", path.display()))
        })?;
    }
    Ok(data)
}

fn check_divergence(class: &str, outcome: &TrainOutcome) -> Result<(), AppError> {
    if !outcome.holdout_nll.is_finite() || outcome.reports.iter().all(|r| r.diverged) {
        return Err(AppError::numeric(format!(
            "{class} model training diverged (holdout NLL {})",
            outcome.holdout_nll
        )));
    }
    Ok(())
}

fn write_nll_curves(dir: &Path, robot: &TrainOutcome, agent: &TrainOutcome) -> std::io::Result<()> {
    let mut f = std::fs::File::create(dir.join("nll_curves.csv"))?;
    writeln!(f, "class,restart,step,holdout_nll")?;
    for (class, out) in [("robot", robot), ("agent", agent)] {
        for r in &out.reports {
            for (i, v) in r.nll_curve.iter().enumerate() {
                writeln!(f, "{class},{},{},{v}", r.restart, i * 50)?;
            }
        }
    }
    let mut t = std::fs::File::create(dir.join("restart_table.csv"))?;
    writeln!(t, "class,restart,initial_nll,final_nll,holdout_nll,diverged")?;
    for (class, out) in [("robot", robot), ("agent", agent)] {
        for r in &out.reports {
            writeln!(
                t,
                "{class},{},{},{},{},{}",
                r.restart, r.initial_nll, r.final_nll, r.holdout_nll, r.diverged
            )?;
        }
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), AppError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let cfg = crate::config::resolve_scenario(&file, args.seed)?;
    let resolved =
        crate::config::resolve_train(&file, args.episodes, args.steps, args.restarts);
    let out_dir = prepare_out_dir(&args.out)?;
    write_snapshot(
        &out_dir,
        &TrainSnapshot { command: "train", scenario: &cfg, train: &resolved },
    )?;

    let data = load_or_generate(args, &cfg, &resolved, &out_dir)?;
    let robot_out =
        train(&data.robot, &resolved.train).map_err(|e| AppError::numeric(e.to_string()))?;
    let agent_out =
        train(&data.agent, &resolved.train).map_err(|e| AppError::numeric(e.to_string()))?;
    check_divergence("robot", &robot_out)?;
    check_divergence("agent", &agent_out)?;

    let mut models =
        TrainedModels { robot: robot_out.model.clone(), agent: agent_out.model.clone() };
    let (recal_robot, recal_agent) = recalibrate_models(&cfg, &mut models, resolved.episodes)
        .map_err(|e| AppError::numeric(e.to_string()))?;

    let bundle = ModelsFile::new(models);
    let json = bundle
        .to_json()
        .map_err(|e| AppError::numeric(format!("cannot serialize models: {e}")))?;
    std::fs::write(out_dir.join("models.json"), json)
        .map_err(|e| AppError::usage(format!("cannot write models: {e}")))?;

    let report = TrainingReport {
        robot: ClassReport {
            holdout_nll: robot_out.holdout_nll,
            recalibration: recal_robot,
            restarts: &robot_out.reports,
        },
        agent: ClassReport {
            holdout_nll: agent_out.holdout_nll,
            recalibration: recal_agent,
            restarts: &agent_out.reports,
        },
    };
    let report_json = serde_json::to_string_pretty(&report)
        .map_err(|e| AppError::numeric(format!("cannot serialize report: {e}")))?;
    std::fs::write(out_dir.join("training_report.json"), report_json)
        .map_err(|e| AppError::usage(format!("cannot write report: {e}")))?;
    write_nll_curves(&out_dir, &robot_out, &agent_out)
        .map_err(|e| AppError::usage(format!("cannot write curves: {e}")))?;

    println!(
        "trained models written to {} (robot holdout NLL {:.2}, agent holdout NLL {:.2})",
        out_dir.display(),
        robot_out.holdout_nll,
        agent_out.holdout_nll
    );
    Ok(())
}
