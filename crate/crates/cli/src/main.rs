use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vdsk::app::{self, RunDir, Stage};
use vdsk::config::RunConfig;
use vdsk::Error;

/// Desk-scale text-to-video diffusion on a synthetic sprite corpus.
#[derive(Parser)]
#[command(name = "vdsk", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (`key = value` lines, `config_version = 1`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory for checkpoints, logs and outputs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Extra `key=value` assignments applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus as .vclip files plus manifest.tsv.
    Datagen,
    /// Train one stage, resuming from its checkpoint if present.
    Train {
        #[arg(long)]
        stage: String,
    },
    /// Text-to-video sampling.
    Sample,
    /// Continue given frames of an input clip.
    Predict,
    /// Edge-controlled sampling.
    Control,
    /// Same as `train --stage subject`.
    FinetuneSubject,
    /// Conditional accuracy over the prompt grid.
    Eval,
}

fn load_config(cli: &Cli) -> vdsk::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (i, kv) in cli.set.iter().enumerate() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(i + 1, k.trim(), v.trim())
            .map_err(|e| Error::Config(format!("--set {kv}: {e}")))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

enum Plan {
    Datagen(app::DatagenPlan),
    Train(app::TrainPlan),
    Sample(app::SamplePlan),
    Predict(app::PredictPlan),
    Control(app::ControlPlan),
    Eval(app::EvalPlan),
}

fn plan(cli: &Cli, cfg: &RunConfig) -> vdsk::Result<Plan> {
    let run = RunDir::new(&cli.out);
    Ok(match &cli.command {
        Command::Datagen => Plan::Datagen(app::plan_datagen(cfg, &run)?),
        Command::Train { stage } => Plan::Train(app::plan_train(cfg, &run, Stage::parse(stage)?)?),
        Command::FinetuneSubject => Plan::Train(app::plan_train(cfg, &run, Stage::Subject)?),
        Command::Sample => Plan::Sample(app::plan_sample(cfg, &run)?),
        Command::Predict => Plan::Predict(app::plan_predict(cfg, &run)?),
        Command::Control => Plan::Control(app::plan_control(cfg, &run)?),
        Command::Eval => Plan::Eval(app::plan_eval(cfg, &run)?),
    })
}

fn execute(plan: Plan) -> vdsk::Result<app::Outcome> {
    match plan {
        Plan::Datagen(p) => app::exec_datagen(p),
        Plan::Train(p) => app::exec_train(p).map(|r| app::report_outcome(&r)),
        Plan::Sample(p) => app::exec_sample(p),
        Plan::Predict(p) => app::exec_predict(p),
        Plan::Control(p) => app::exec_control(p),
        Plan::Eval(p) => app::exec_eval(p),
    }
}

/// 2 for anything caught while planning, 3 for missing stages, 4 otherwise.
fn exit_code(err: &Error, planning: bool) -> u8 {
    match err {
        Error::Dependency { .. } => 3,
        _ if planning => 2,
        Error::Config(_) => 2,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let planned = load_config(&cli).and_then(|cfg| plan(&cli, &cfg));
    let plan = match planned {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e, true));
        }
    };
    match execute(plan) {
        Ok(outcome) => {
            for line in outcome.messages {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e, false))
        }
    }
}
