use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rydcrit_cli::{execute, Command, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "rydcrit", version, about = "Rydberg-array criticality simulator and analysis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Scan the many-body gap across the configured detuning window.
    GapScan(Common),
    /// Gap scan followed by ramp synthesis.
    Ramp(Common),
    /// Prepare states along the ramp and draw measurement snapshots.
    Prepare(Common),
    /// Sweep-rate scan of the susceptibility peak.
    Kz(Common),
    /// Correlators and fits, from fresh shots or a snapshot file.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Snapshot file written by a previous `prepare` run.
        #[arg(long)]
        snapshots: Option<PathBuf>,
    },
    /// Every stage in sequence.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// Config file path, or `bundled:NAME`.
    #[arg(long)]
    config: String,
    /// Master seed; overrides the one in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker thread cap.
    #[arg(long)]
    jobs: Option<usize>,
    /// Also write long-format plot data.
    #[arg(long)]
    plot_data: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, common, snapshots) = match cli.command {
        Sub::GapScan(c) => (Command::GapScan, c, None),
        Sub::Ramp(c) => (Command::Ramp, c, None),
        Sub::Prepare(c) => (Command::Prepare, c, None),
        Sub::Kz(c) => (Command::Kz, c, None),
        Sub::Analyze { common, snapshots } => (Command::Analyze, common, snapshots),
        Sub::Pipeline(c) => (Command::Pipeline, c, None),
    };

    if let Some(jobs) = common.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("could not size worker pool: {e}");
        }
    }

    let result = ExperimentConfig::load(&common.config).and_then(|cfg| {
        let opts = RunOptions {
            out_dir: common.out,
            seed: common.seed,
            plot_data: common.plot_data,
            snapshots,
        };
        execute(command, &cfg, &opts)
    });

    match result {
        Ok(manifest) => {
            log::info!(
                "{}: wrote {} files in {:.1} s",
                manifest.config_name,
                manifest.files.len(),
                manifest.wall_time_s
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            // Wrapped errors already render their sources inline.
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
