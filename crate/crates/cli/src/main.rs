use std::path::PathBuf;
use std::process::ExitCode;

use ciod_core::config::ExperimentConfig;
use ciod_core::harness::{self, EvaluateOptions, Sweep, TrainOptions};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ciod", about = "Class-incremental detection with generative replay on a toy world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config files, applied in order on top of the defaults.
    #[arg(long = "config", short = 'c')]
    configs: Vec<PathBuf>,
    /// Dotted-key overrides, e.g. `--set refiner.quota=inf`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for `--set schedule=...`.
    #[arg(long)]
    schedule: Option<String>,
    /// Shorthand for `--set seeds=[...]`; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Shorthand for `--set out_dir=...`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> ciod_core::Result<ExperimentConfig> {
        let mut sets = self.sets.clone();
        if let Some(s) = &self.schedule {
            sets.push(format!("schedule=\"{s}\""));
        }
        if !self.seeds.is_empty() {
            let list: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
            sets.push(format!("seeds=[{}]", list.join(",")));
        }
        if let Some(o) = &self.out {
            sets.push(format!("out_dir={}", toml_string(&o.display().to_string())));
        }
        ExperimentConfig::from_layers(&self.configs, &sets)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and eval splits of the toy world.
    SynthWorld(ConfigArgs),
    /// Train every phase of the schedule for every seed.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Disable pseudo labeling, replay and distillation.
        #[arg(long)]
        fine_tune_baseline: bool,
        /// Write per-phase AP trajectory plots.
        #[arg(long)]
        plots: bool,
    },
    /// Evaluate a checkpoint on a dataset file.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Phase whose class split defines old and new classes.
        #[arg(long)]
        phase: Option<usize>,
        #[arg(long)]
        old: bool,
        #[arg(long)]
        new: bool,
        /// Metrics file to write.
        #[arg(long, default_value = "evaluation.json")]
        output: PathBuf,
    },
    /// Sweep one config key, or the component chain, over all seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// `components` or `key=v1,v2,...`.
        #[arg(long)]
        sweep: String,
    },
    /// Run the replay refiner of one phase against a checkpoint.
    RefineOnly {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        phase: usize,
    },
}

fn run(cli: Cli) -> ciod_core::Result<()> {
    match cli.command {
        Command::SynthWorld(args) => {
            let cfg = args.resolve()?;
            let m = harness::cmd_synth_world(&cfg)?;
            println!(
                "world: {} train / {} eval images, {} classes -> {}",
                m.train_images,
                m.eval_images,
                m.num_classes,
                harness::world_paths(&cfg).dir.display()
            );
        }
        Command::Train {
            config,
            fine_tune_baseline,
            plots,
        } => {
            let cfg = config.resolve()?;
            let runs = harness::cmd_train(
                &cfg,
                &TrainOptions {
                    fine_tune_baseline,
                    plots,
                },
            )?;
            for run in &runs {
                for p in &run.phases {
                    let m = &p.metrics;
                    println!(
                        "seed {} phase {}: AP {:.1} old {} new {:.1} fpp {}",
                        run.seed,
                        m.phase,
                        m.all.ap,
                        m.old.as_ref().map_or("-".into(), |o| format!("{:.1}", o.ap)),
                        m.new.ap,
                        m.fpp.map_or("-".into(), |f| format!("{f:.1}"))
                    );
                }
            }
            println!("outputs in {}", harness::train_dir(&cfg).display());
        }
        Command::Evaluate {
            config,
            checkpoint,
            dataset,
            phase,
            old,
            new,
            output,
        } => {
            let cfg = config.resolve()?;
            let f = harness::cmd_evaluate(&cfg, &checkpoint, &dataset, &EvaluateOptions { phase, old, new }, &output)?;
            println!("phase {} AP {:.1} -> {}", f.phase, f.all.ap, output.display());
        }
        Command::Ablate { config, sweep } => {
            let cfg = config.resolve()?;
            let sweep = Sweep::parse(&sweep)?;
            let outcome = harness::cmd_ablate(&cfg, &sweep)?;
            print!("{}", outcome.table.to_markdown());
            println!("outputs in {}", harness::ablation_dir(&cfg, &sweep).display());
        }
        Command::RefineOnly {
            config,
            checkpoint,
            phase,
        } => {
            let cfg = config.resolve()?;
            for r in harness::cmd_refine_only(&cfg, &checkpoint, phase)? {
                println!(
                    "{} requests, {} accepted images, unsatisfied {:?}",
                    r.requests, r.accepted_images, r.unsatisfied
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
