//! `kcgen`: run the KC generation and knowledge-tracing pipeline.
//!
//! One TOML config drives everything; each pipeline stage is a
//! subcommand writing artifacts into the configured run directory and
//! recording them in `manifest.json`. Exit codes: 0 success, 2 validation
//! (bad config, bad data, bad arguments), 3 missing prerequisite stage,
//! 4 provider/transport failure, 5 numerical failure.

mod config;
mod manifest;
mod plot;
mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use kcgen_core::data::io::save_dataset;
use kcgen_core::data::synth::{generate, SynthConfig};
use kcgen_core::{Error, Result};

use config::RunConfig;
use plot::PlotKind;
use stages::Stage;

#[derive(Parser)]
#[command(name = "kcgen", version, about = "Knowledge component generation and tracing")]
struct Cli {
    /// Path to the TOML run configuration.
    #[arg(long, global = true, default_value = "kcgen.toml")]
    config: PathBuf,
    /// Print the fully resolved configuration (defaults filled in,
    /// paths made absolute) and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the dataset and write its canonical copy plus the
    /// train/validation/test splits.
    Ingest,
    /// Generate initial knowledge components per problem.
    GenKcs,
    /// Cluster KC descriptions at the configured abstraction level.
    Cluster,
    /// Name each cluster with the configured provider.
    Label,
    /// Build the problem-by-KC Q-matrix from the labeled clusters.
    Qmatrix,
    /// Cluster and label the KC set at several abstraction levels and
    /// build the ontology forest over them.
    Ontology,
    /// Train the knowledge-tracing model on the train partition.
    Train,
    /// Score the trained model and the baselines on the test partition.
    Evaluate,
    /// Label per-KC errors, build learning curves, and fit PFA.
    Curves,
    /// Summarize the finished run as markdown.
    Report,
    /// Write tabular plot data from finished run artifacts.
    EmitPlotData {
        #[arg(long, value_enum)]
        kind: PlotArg,
        /// KC labels for learning-curves (comma separated). Default: the
        /// first three KCs with curves.
        #[arg(long, value_delimiter = ',')]
        kcs: Option<Vec<String>>,
        /// Student id for mastery-heatmap. Default: the first student in
        /// mastery.csv.
        #[arg(long)]
        student: Option<String>,
    },
    /// Generate a synthetic dataset (problems.csv + interactions.csv).
    Synth {
        #[arg(long, value_enum)]
        preset: SynthPreset,
        /// Directory to write the dataset into.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlotArg {
    LearningCurves,
    LossCurves,
    MasteryHeatmap,
}

impl From<PlotArg> for PlotKind {
    fn from(arg: PlotArg) -> PlotKind {
        match arg {
            PlotArg::LearningCurves => PlotKind::LearningCurves,
            PlotArg::LossCurves => PlotKind::LossCurves,
            PlotArg::MasteryHeatmap => PlotKind::MasteryHeatmap,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SynthPreset {
    /// 20 students x 10 problems, noise-free correctness.
    TinyOverfit,
    /// 246 students x 50 problems, noisy correctness.
    CodeworkoutShaped,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.print_config {
        let config = RunConfig::load(&cli.config)?;
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::domain(
            "no subcommand given; run `kcgen --help` for the stage list",
        ));
    };
    match command {
        Command::Synth { preset, out, seed } => synth(preset, &out, seed),
        Command::EmitPlotData { kind, kcs, student } => {
            let config = RunConfig::load(&cli.config)?;
            plot::emit_plot_data(&config, kind.into(), kcs.as_deref(), student.as_deref())
        }
        stage => {
            let config = RunConfig::load(&cli.config)?;
            stages::run_stage(&config, stage_of(&stage))
        }
    }
}

fn stage_of(command: &Command) -> Stage {
    match command {
        Command::Ingest => Stage::Ingest,
        Command::GenKcs => Stage::GenKcs,
        Command::Cluster => Stage::Cluster,
        Command::Label => Stage::Label,
        Command::Qmatrix => Stage::Qmatrix,
        Command::Ontology => Stage::Ontology,
        Command::Train => Stage::Train,
        Command::Evaluate => Stage::Evaluate,
        Command::Curves => Stage::Curves,
        Command::Report => Stage::Report,
        Command::EmitPlotData { .. } | Command::Synth { .. } => {
            unreachable!("handled before stage dispatch")
        }
    }
}

fn synth(preset: SynthPreset, out: &std::path::Path, seed: u64) -> Result<()> {
    let synth_config = match preset {
        SynthPreset::TinyOverfit => SynthConfig::tiny_overfit(seed),
        SynthPreset::CodeworkoutShaped => SynthConfig::codeworkout_shaped(seed),
    };
    let dataset = generate(&synth_config)?;
    save_dataset(&dataset, out)?;
    log::info!(
        "wrote {} problems, {} students, {} submissions to {}",
        dataset.problems.len(),
        dataset.sequences.len(),
        dataset.submission_count(),
        out.display()
    );
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Prerequisite { .. } => 3,
        Error::Transport(_) | Error::StructuredOutput { .. } => 4,
        Error::Numerical(_) => 5,
        _ => 2,
    }
}
