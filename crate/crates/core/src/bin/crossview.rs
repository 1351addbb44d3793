use clap::{Parser, Subcommand};
use crossview::config::ExperimentConfig;
use crossview::eval::Direction;
use crossview::pipeline::{
    generate_captions, prepare, render_reports, run_ablate, run_evaluate, run_train,
    synthesize_weather, Sweep,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "crossview",
    about = "Desk-scale cross-view geo-localization pipeline",
    version
)]
struct Cli {
    /// Experiment configuration file (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy drone/satellite dataset on disk.
    Prepare {
        /// Rebuild even if an existing tree does not match the config.
        #[arg(long)]
        force: bool,
        /// Override the number of training locations.
        #[arg(long)]
        locations: Option<usize>,
    },
    /// Render every drone image under the 10-condition weather suite.
    SynthesizeWeather,
    /// Run the mock captioner over the corpus.
    GenerateCaptions {
        /// Prompt depth (0, 2, 4, or 6 staged steps).
        #[arg(long, default_value_t = 6)]
        steps: u8,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a retrieval report.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Retrieval direction: d2s or s2d.
        #[arg(long)]
        direction: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep fusion modes or caption depths across seeds.
    Ablate {
        /// Sweep to run: fusion or cot.
        #[arg(long)]
        sweep: String,
        #[arg(long)]
        out: PathBuf,
        /// Seeds for the sweep; defaults to seed, seed+1, seed+2.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Render stored retrieval reports as aligned tables.
    Report {
        /// Directory containing report JSON files.
        #[arg(long)]
        results: PathBuf,
    },
}

fn load_config(cli: &Cli) -> crossview::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> crossview::Result<()> {
    match &cli.command {
        Command::Prepare { force, locations } => {
            let mut cfg = load_config(&cli)?;
            if let Some(n) = locations {
                cfg.locations = *n;
            }
            cfg.validate()?;
            if prepare(&cfg, *force)? {
                println!(
                    "prepared {} train + {} test locations under {}",
                    cfg.locations,
                    cfg.test_locations,
                    cfg.data_root.display()
                );
            } else {
                println!("already prepared; nothing to do");
            }
        }
        Command::SynthesizeWeather => {
            let cfg = load_config(&cli)?;
            let n = synthesize_weather(&cfg)?;
            println!("wrote {n} weather variants");
        }
        Command::GenerateCaptions { steps } => {
            let cfg = load_config(&cli)?;
            let path = generate_captions(&cfg, *steps)?;
            println!("captions written to {}", path.display());
        }
        Command::Train { out, resume } => {
            let cfg = load_config(&cli)?;
            let outcome = run_train(&cfg, out, resume.as_deref())?;
            let last = outcome.history.last();
            println!(
                "trained {} epochs ({} steps); final checkpoint {}",
                outcome.completed_epochs,
                outcome.history.len(),
                outcome.final_checkpoint.display()
            );
            if let Some(log) = last {
                println!("{}", log.render());
            }
        }
        Command::Evaluate {
            ckpt,
            direction,
            out,
        } => {
            let cfg = load_config(&cli)?;
            let direction = Direction::parse(direction)?;
            let report = run_evaluate(&cfg, ckpt, direction, out.as_deref())?;
            print!("{}", report.render_table());
        }
        Command::Ablate { sweep, out, seeds } => {
            let cfg = load_config(&cli)?;
            let sweep = Sweep::parse(sweep)?;
            let seeds = if seeds.is_empty() {
                vec![cfg.seed, cfg.seed + 1, cfg.seed + 2]
            } else {
                seeds.clone()
            };
            let table = run_ablate(&cfg, sweep, &seeds, out)?;
            print!("{}", table.render());
        }
        Command::Report { results } => {
            print!("{}", render_reports(results)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
