use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rmoe::config::ExperimentConfig;
use rmoe::experts::Specialization;
use rmoe::pipeline::{clean_accuracy, Pipeline};
use rmoe::tree::BranchPoint;
use rmoe::Result;

/// Mixture of distortion-specialized experts.
#[derive(Parser)]
#[command(name = "rmoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set gate.lambda=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shorthand for `--set output_dir=DIR`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as IDX files under <output_dir>/data.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train experts (all four unless --policy is given).
    TrainExpert {
        #[command(flatten)]
        common: Common,
        /// clean, noise, blur or all.
        #[arg(long)]
        policy: Option<Specialization>,
    },
    /// Solve for the optimal weights per distortion level.
    BuildWeights {
        #[command(flatten)]
        common: Common,
    },
    /// Train the gating network on the weight table.
    TrainGate {
        #[command(flatten)]
        common: Common,
    },
    /// Train tree ensembles and write the parameter-count report.
    BuildTree {
        #[command(flatten)]
        common: Common,
        /// direction@layer; replaces the configured list. Repeatable.
        #[arg(long = "branch-point")]
        branch_points: Vec<BranchPoint>,
    },
    /// Evaluate experts, baselines and the mixture; write report.csv and curves.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Maximize one unit's activation of a trained expert.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "clean")]
        policy: Specialization,
        #[arg(long, default_value = "FC8")]
        layer: String,
        #[arg(long, default_value_t = 0)]
        unit: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 4.0)]
        step_size: f64,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SynthData { common }
            | Command::TrainExpert { common, .. }
            | Command::BuildWeights { common }
            | Command::TrainGate { common }
            | Command::BuildTree { common, .. }
            | Command::Evaluate { common }
            | Command::Visualize { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut overrides = common.set.clone();
    if let Some(dir) = &common.output_dir {
        overrides.push(format!("output_dir={}", toml_string(&dir.to_string_lossy())));
    }
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    ExperimentConfig::load(common.config.as_deref(), &overrides)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn run(p: &Pipeline, command: Command) -> Result<String> {
    Ok(match command {
        Command::SynthData { .. } => {
            let (ds, images, labels) = p.synth_data()?;
            format!(
                "wrote {} images to {} and {}",
                ds.len(),
                images.display(),
                labels.display()
            )
        }
        Command::TrainExpert { policy, .. } => {
            let splits = p.splits()?;
            let which = match policy {
                Some(s) => vec![s],
                None => vec![
                    Specialization::Clean,
                    Specialization::Noise,
                    Specialization::Blur,
                    Specialization::All,
                ],
            };
            let mut parts = Vec::new();
            for s in which {
                let m = p.train_expert(s, &splits)?;
                parts.push(format!(
                    "{s}: clean accuracy {:.4} -> {}",
                    clean_accuracy(&m, &splits.test)?,
                    p.expert_path(s).display()
                ));
            }
            parts.join("; ")
        }
        Command::BuildWeights { .. } => {
            let t = p.build_weights(&p.splits()?)?;
            format!(
                "weight table over {} kinds written to {}",
                t.kinds().len(),
                p.weights_path().display()
            )
        }
        Command::TrainGate { .. } => {
            let g = p.train_gate(&p.splits()?)?;
            let epochs = g.history.as_ref().map_or(0, |h| h.train_loss.len());
            format!("gate trained for {epochs} epochs -> {}", p.gate_path().display())
        }
        Command::BuildTree { branch_points, .. } => {
            let points = if branch_points.is_empty() {
                p.config.tree.parsed()?
            } else {
                branch_points
            };
            let rows = p.build_trees(&points, &p.splits()?)?;
            let desc: Vec<String> = rows
                .iter()
                .map(|r| format!("{}@{} avg AUC {:.4}", r.direction, r.branch_point, r.auc_avg))
                .collect();
            format!("{} -> {}", desc.join(", "), p.tree_report_path().display())
        }
        Command::Evaluate { .. } => {
            let report = p.evaluate(&p.splits()?)?;
            let mix = report.row("M_mix").expect("mixture is evaluated");
            format!(
                "M_mix avg AUC {:.4} (noise {:.4}, blur {:.4}) -> {}",
                mix.avg_auc,
                mix.noise_auc,
                mix.blur_auc,
                p.report_path().display()
            )
        }
        Command::Visualize {
            policy,
            layer,
            unit,
            steps,
            step_size,
            ..
        } => {
            let (vis, image, _) = p.visualize(policy, &layer, unit, steps, step_size)?;
            let first = vis.trajectory[0];
            let last = *vis.trajectory.last().expect("trajectory has the start");
            format!(
                "{policy} {layer}[{unit}] activation {first:.4} -> {last:.4}{} -> {}",
                if vis.turned_off { " (unit stays off)" } else { "" },
                image.display()
            )
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pipeline = match load_config(cli.command.common()).and_then(Pipeline::new) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&pipeline, cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
