use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use headlens::pipeline::{validate_config_with_edits, ConfigEdits, Pipeline, Stage};
use headlens::tasks::DatasetId;

/// Locate causal and format-invariant attention heads, build steering
/// vectors from them and measure their effects.
#[derive(Parser)]
#[command(name = "headlens", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,

    /// Experiment config (JSON).
    #[arg(long, global = true, default_value = "headlens.json")]
    config: PathBuf,

    /// Set a config field, e.g. `steering.alpha=2` or `k_grid.0=3`. Repeatable.
    #[arg(long = "stage-override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Leave a dataset out of the AIE average, e.g. `antonym/MC`. Repeatable.
    #[arg(long = "exclude-dataset", value_name = "ID", global = true)]
    exclude: Vec<DatasetId>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Run missing upstream stages first instead of failing.
    #[arg(long, global = true)]
    upstream: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Check the config and print one line per problem.
    Validate,
    /// Build prompt datasets and capture last-token head outputs.
    Capture,
    /// Average indirect effect of every head, within and across formats.
    Aie,
    /// Concept and question-type RSA of every head and of the summed top-K heads.
    Rsa,
    /// Top-K heads by AIE and by Concept-RSA, and their overlap.
    Select,
    /// Function and concept vectors for every dataset and K.
    Vectors,
    /// Steering sweeps on ambiguous prompts.
    Steer,
    /// Heatmaps, overlap tables and layer curves.
    Report,
}

impl Verb {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Verb::Validate => return None,
            Verb::Capture => Stage::Capture,
            Verb::Aie => Stage::Aie,
            Verb::Rsa => Stage::Rsa,
            Verb::Select => Stage::Select,
            Verb::Vectors => Stage::Vectors,
            Verb::Steer => Stage::Steer,
            Verb::Report => Stage::Report,
        })
    }
}

fn run(cli: Cli) -> headlens::Result<bool> {
    let edits = ConfigEdits {
        overrides: cli.overrides,
        exclude: cli.exclude,
    };
    let Some(stage) = cli.verb.stage() else {
        let diags = validate_config_with_edits(&cli.config, &edits)?;
        for d in &diags {
            println!("{d}");
        }
        if diags.is_empty() {
            println!("{}: ok", cli.config.display());
        }
        return Ok(diags.is_empty());
    };
    let pipeline = Pipeline::from_file(&cli.config, &edits)?;
    let dir = if cli.upstream {
        pipeline.run_with_upstream(stage)?
    } else {
        pipeline.run_stage(stage)?
    };
    println!("{}", dir.display());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
