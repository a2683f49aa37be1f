//! `amnesia`: staged experiment driver.
//!
//! Exit codes: 0 on success, 1 for user or configuration errors, 2 when an
//! internal invariant breaks.

mod fetch;

use std::path::PathBuf;
use std::process::ExitCode;

use amnesia::data::DatasetName;
use amnesia::eval::rows_to_csv;
use amnesia::experiment::{resolve_data_root, Arm, Experiment, ExperimentConfig, Overrides, Stage, Surrogate, DATA_ROOT_ENV};
use amnesia::train::Method;
use amnesia::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "amnesia", version, about = "Selective forgetting before class-incremental learning on a conditional VAE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Recompute outputs even if they are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Cap the number of training examples per class.
    #[arg(long, global = true)]
    subset_per_class: Option<usize>,
    /// Dataset root directory.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_dataset)]
    dataset: Option<DatasetName>,
    /// Class to forget.
    #[arg(long, global = true)]
    c_f: Option<usize>,
    /// Class to learn.
    #[arg(long, global = true)]
    c_new: Option<usize>,
    /// white-noise or embed-new.
    #[arg(long, global = true, value_parser = parse_surrogate)]
    surrogate: Option<Surrogate>,
    /// finetune or ewc.
    #[arg(long, global = true, value_parser = parse_method)]
    method: Option<Method>,
    /// Learn the new class straight from the pretrained model.
    #[arg(long, global = true)]
    no_forgetting: bool,
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model on every class except c_new.
    Pretrain,
    /// Make the pretrained model forget c_f.
    Forget,
    /// Teach c_new to the pretrained or forgotten model.
    Learn,
    /// Score a stage's checkpoints with the external classifier.
    Eval {
        #[arg(long, default_value = "learn", value_parser = parse_stage)]
        stage: Stage,
    },
    /// Improvement matrices over the configured pairs.
    Matrix,
    /// Render a sample grid, one row per class.
    Grid {
        /// Checkpoint to render; defaults to the configured stage output.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "learn", value_parser = parse_stage)]
        stage: Stage,
        /// PNG path; defaults to `<out>/grid-<checkpoint stem>.png`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Every arm for every configured pair and seed, then reports and matrices.
    Sweep,
    /// Download and verify the datasets into the data root.
    FetchData {
        /// mnist, fashion-mnist or all.
        #[arg(long = "which", default_value = "all")]
        which: String,
        /// Use a local copy of the package tarball instead of downloading.
        #[arg(long)]
        tarball: Option<PathBuf>,
    },
}

fn parse_dataset(s: &str) -> Result<DatasetName, String> {
    DatasetName::parse(s).map_err(|e| e.to_string())
}

fn parse_surrogate(s: &str) -> Result<Surrogate, String> {
    Surrogate::parse(s).map_err(|e| e.to_string())
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).map_err(|e| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "finetune" => Ok(Method::FineTune),
        "ewc" => Ok(Method::Ewc),
        _ => Err(format!("unknown method `{s}` (finetune, ewc)")),
    }
}

fn build_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut config = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    config.apply(&Overrides {
        seed: c.seed,
        out: c.out.clone(),
        subset_per_class: c.subset_per_class,
        data_root: c.data_root.clone(),
        dataset: c.dataset,
        c_f: c.c_f,
        c_new: c.c_new,
        surrogate: c.surrogate,
        method: c.method,
        use_forgetting: c.no_forgetting.then_some(false),
    });
    Ok(config)
}

fn print_outcomes(outcomes: &[amnesia::experiment::StageOutcome]) {
    for o in outcomes {
        let state = if o.skipped { "up to date" } else { "written" };
        println!("{state}\t{}", o.path.display());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = build_config(&cli.common)?;
    if let Command::FetchData { which, tarball } = &cli.command {
        let root = resolve_data_root(&config);
        let names = match which.as_str() {
            "all" => vec![DatasetName::Mnist, DatasetName::FashionMnist],
            s => vec![DatasetName::parse(s)?],
        };
        if tarball.is_some() && names.len() > 1 {
            return Err(Error::Config {
                field: "tarball".into(),
                message: "a local tarball needs --which mnist or --which fashion-mnist".into(),
            });
        }
        for name in names {
            let n = fetch::fetch(name, &root, tarball.as_deref())?;
            println!("{name}\t{n} examples\t{}", name.dir(&root).display());
        }
        return Ok(());
    }
    let exp = Experiment::new(config, cli.common.force)?.verbose(!cli.common.quiet);
    match cli.command {
        Command::Pretrain => print_outcomes(&exp.cmd_pretrain()?),
        Command::Forget => print_outcomes(&exp.cmd_forget()?),
        Command::Learn => print_outcomes(&exp.cmd_learn()?),
        Command::Eval { stage } => print!("{}", rows_to_csv(&exp.cmd_eval(stage)?)?),
        Command::Matrix => {
            for (path, _) in exp.cmd_matrix()? {
                println!("{}", path.display());
            }
        }
        Command::Grid {
            checkpoint,
            stage,
            output,
        } => {
            let c = exp.config();
            let seed = c.seeds[0];
            let checkpoint = match checkpoint {
                Some(p) => p,
                None => {
                    let arm = match stage {
                        Stage::Pretrain => Arm::pretrained(),
                        Stage::Forget => Arm::forgotten(c.surrogate),
                        Stage::Learn => Arm::learned(c.method, c.use_forgetting.then_some(c.surrogate)),
                    };
                    exp.arm_path(c.c_f, c.c_new, arm, seed)?
                }
            };
            if !checkpoint.is_file() {
                return Err(Error::MissingPrerequisite {
                    path: checkpoint,
                    hint: "run the stage that produces this checkpoint first".into(),
                });
            }
            let output = output.unwrap_or_else(|| {
                let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
                c.out.join(format!("grid-{stem}.png"))
            });
            let cls = exp.classifier()?;
            let summary = exp.grid(&checkpoint, seed, &output, Some(&cls))?;
            println!("{}", output.display());
            println!("class,pixel_std,reference_pixel_std,metric");
            for r in &summary.rows {
                println!("{},{:.4},{:.4},{:.4}", r.class, r.pixel_std, r.reference_pixel_std, r.metric);
            }
        }
        Command::Sweep => println!("{}", exp.cmd_sweep()?.display()),
        Command::FetchData { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
