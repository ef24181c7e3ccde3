use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use log::info;
use maskstrike::attack::Variant;
use maskstrike_runner::config::ExperimentConfig;
use maskstrike_runner::experiment::{caption_eval, evaluate, generate_data, run_experiment, train_detector};
use maskstrike_runner::report::{markdown_table, render_report};

#[derive(Parser)]
#[command(name = "maskstrike", version, about = "Class-confined adversarial attacks on object detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "MASKSTRIKE_OUT")]
    output: Option<PathBuf>,
    /// Detector weights file.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Any configuration value as a dotted key, e.g. `attack.learning_rate=4000`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the evaluation scenes into <output>/data.
    GenerateData,
    /// Train the bundled detector and save its weights.
    TrainDetector,
    /// Run the attacks, write per-attack records and aggregate tables.
    Attack {
        /// Comma-separated variants to run (default: all).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Worker threads (0 = one per core).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Recompute the aggregate metric tables from the records.
    Evaluate,
    /// Compute caption-drift metrics from the records.
    CaptionEval,
    /// Render tables, histograms and example triptychs.
    Report,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for s in &c.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(o) = &c.output {
        cfg.output_dir = o.clone();
    }
    if let Some(w) = &c.weights {
        cfg.weights = Some(w.clone());
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenerateData => {
            generate_data(&cfg)?;
        }
        Command::TrainDetector => {
            let det = train_detector(&cfg)?;
            if let Some(m) = det.training_meta() {
                info!("held-out mAP {:.4} after {} epochs", m.heldout_map, m.epochs);
            }
        }
        Command::Attack { variants, workers } => {
            if !variants.is_empty() {
                cfg.attack.variants = variants.iter().map(|v| Variant::parse(v.trim())).collect::<Result<_, _>>()?;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let m = run_experiment(&cfg)?;
            info!("{} records over {} scenes in {}", m.records, m.scenes, cfg.output_dir.display());
            print!("{}", std::fs::read_to_string(cfg.output_dir.join(&m.metrics_csv))?);
        }
        Command::Evaluate => {
            let (report, _) = evaluate(&cfg.output_dir)?;
            print!("{}", markdown_table(&report.csv_header(), &report.csv_rows()));
        }
        Command::CaptionEval => {
            let report = caption_eval(&cfg.output_dir)?;
            let header: Vec<String> = maskstrike::downstream::CaptionReport::csv_header()
                .into_iter()
                .map(String::from)
                .collect();
            print!("{}", markdown_table(&header, &report.csv_rows()));
        }
        Command::Report => {
            let out = render_report(&cfg.output_dir)?;
            info!("{} files in {}", out.files.len(), out.dir.display());
        }
    }
    Ok(())
}
