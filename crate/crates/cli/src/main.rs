use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tflow_core::training::Mode;
use tflow_core::workbench::{Protocol, Run, RunConfig, Stage};
use tflow_core::TflowError;

#[derive(Parser, Debug)]
#[command(name = "tflow", version, about = "Train and evaluate per-query LoRA message passing between agents")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the sender capture mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Continue training from the last checkpoint and skip completed stages.
    #[arg(long, global = true)]
    resume: bool,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain and freeze the backbone.
    Pretrain,
    /// Train the generator.
    Train,
    /// Answer one query.
    Infer {
        #[arg(long)]
        query: String,
        #[arg(long, default_value = "")]
        context: String,
        #[arg(long, value_enum, default_value = "tflow")]
        protocol: ProtocolArg,
    },
    /// Evaluate every configured protocol on the eval split.
    Eval,
    /// Run one analysis, or all of them.
    Analyze {
        #[arg(value_enum, default_value = "all")]
        kind: AnalysisKind,
    },
    /// Run one ablation.
    Ablate {
        #[arg(value_enum)]
        kind: AblationKind,
    },
    /// Run every stage in order.
    Run,
    /// Print the resolved configuration.
    Config,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Isolation,
    Faithful,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ProtocolArg {
    Tflow,
    Single,
    Textmas,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AnalysisKind {
    All,
    Fingerprints,
    Hidden,
    Layers,
    Cost,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AblationKind {
    Mismatch,
    StaticLora,
    DivSweep,
}

fn load_config(common: &Common) -> tflow_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(mode) = common.mode {
        cfg.train.mode = match mode {
            ModeArg::Isolation => Mode::Isolation,
            ModeArg::Faithful => Mode::Faithful,
        };
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn print_json(value: serde_json::Value) -> tflow_core::Result<()> {
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn print_artifacts(run: &Run, paths: &[String]) {
    for p in paths {
        println!("{}", run.path(p).display());
    }
}

fn execute(cli: Cli) -> tflow_core::Result<()> {
    let cfg = load_config(&cli.common)?;
    if let Command::Config = cli.command {
        return print_json(serde_json::to_value(&cfg)?);
    }
    let resume = cli.common.resume;
    let mut run = Run::open(&cfg, resume)?;
    match cli.command {
        Command::Pretrain => run.run_stage(Stage::Pretrain, resume)?,
        Command::Train => run.run_stage(Stage::Train, resume)?,
        Command::Eval => {
            run.run_stage(Stage::Eval, resume)?;
            print!("{}", std::fs::read_to_string(run.path("summary.json"))?);
        }
        Command::Infer { query, context, protocol } => {
            let protocol = match protocol {
                ProtocolArg::Tflow => Protocol::Tflow,
                ProtocolArg::Single => Protocol::Single,
                ProtocolArg::Textmas => Protocol::Textmas,
            };
            run.ensure(if protocol == Protocol::Tflow { Stage::Train } else { Stage::Pretrain })?;
            print_json(serde_json::to_value(run.infer(&query, &context, protocol)?)?)?;
        }
        Command::Analyze { kind } => {
            if let AnalysisKind::All = kind {
                run.run_stage(Stage::Analyze, resume)?;
                let rec = run.manifest.record(Stage::Analyze).cloned();
                let paths: Vec<String> = rec.map(|r| r.artifacts.into_keys().collect()).unwrap_or_default();
                print_artifacts(&run, &paths);
            } else {
                run.ensure(Stage::Train)?;
                let paths = match kind {
                    AnalysisKind::Fingerprints => run.analyze_fingerprints()?,
                    AnalysisKind::Hidden => run.analyze_hidden()?,
                    AnalysisKind::Layers => run.analyze_layers()?,
                    AnalysisKind::Cost => run.analyze_cost()?,
                    AnalysisKind::All => unreachable!(),
                };
                print_artifacts(&run, &paths);
            }
        }
        Command::Ablate { kind } => {
            let paths = match kind {
                AblationKind::Mismatch => {
                    run.ensure(Stage::Train)?;
                    run.analyze_mismatch()?
                }
                AblationKind::StaticLora => {
                    run.ensure(Stage::Pretrain)?;
                    run.analyze_static_lora()?
                }
                AblationKind::DivSweep => {
                    run.ensure(Stage::Pretrain)?;
                    run.analyze_div_sweep()?
                }
            };
            print_artifacts(&run, &paths);
        }
        Command::Run => {
            for stage in Stage::ALL {
                run.run_stage(stage, resume)?;
            }
            print_json(serde_json::to_value(&run.manifest)?)?;
        }
        Command::Config => unreachable!(),
    }
    Ok(())
}

fn exit_code(err: &TflowError) -> u8 {
    if err.is_config() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
