//! Command-line front end: synthetic log generation, log replay with
//! sensor toggles, trajectory evaluation, and vocabulary training.
//!
//! All functionality lives in the library; this binary only parses
//! arguments and forwards.

use clap::{Parser, Subcommand, ValueEnum};
use fathom::eval::{self, RunConfig, RunSettings};
use fathom::loop_closure::Vocabulary;
use fathom::pipeline::InitMode;
use fathom::sim::{MeasurementLog, NoiseSpec, Scenario};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fathom", version, about = "Sonar-visual-inertial-depth state estimation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioKind {
    /// Circular orbit inside a cylindrical room.
    Orbit,
    /// Straight run through a narrow tunnel with sparse features.
    Tunnel,
    /// Rounded-square loop that revisits its start.
    Square,
    /// Three-axis excitation pattern suited to initialization studies.
    Excited,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseKind {
    Zero,
    Nominal,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic measurement log.
    Simulate {
        /// Output log path.
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "orbit")]
        scenario: ScenarioKind,
        /// Duration in seconds.
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        #[arg(long, value_enum, default_value = "nominal")]
        noise: NoiseKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Replay a log through the estimator and report the aligned error.
    Run {
        /// Input log path.
        log: PathBuf,
        /// Directory for trajectory CSVs and the report.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_sonar: bool,
        #[arg(long)]
        no_depth: bool,
        #[arg(long)]
        no_loop: bool,
        /// Similarity (scaled) alignment instead of rigid.
        #[arg(long)]
        with_scale: bool,
        /// Seed the estimator from the ground-truth channel instead of the
        /// two-step initialization.
        #[arg(long)]
        init_from_truth: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run this many times (seed incremented) and report the best RMSE.
        #[arg(long, default_value_t = 1)]
        best_of: usize,
        /// TOML file overriding rig/estimator settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Align an estimated trajectory CSV against a ground-truth CSV and
    /// report the RMSE.
    Eval {
        estimate: PathBuf,
        truth: PathBuf,
        #[arg(long)]
        with_scale: bool,
    },
    /// Train a bag-of-binary-words vocabulary from a log's descriptors and
    /// save it.
    Vocab {
        log: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Branching factor of the clustering tree.
        #[arg(long, default_value_t = 10)]
        branching: u32,
        /// Tree depth.
        #[arg(long, default_value_t = 2)]
        depth: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), eval::RunError> {
    match cli.command {
        Command::Simulate { out, scenario, duration, noise, seed } => {
            let noise = match noise {
                NoiseKind::Zero => NoiseSpec::zero(seed),
                NoiseKind::Nominal => NoiseSpec::nominal(seed),
            };
            let scenario = build_scenario(scenario, duration, noise, seed);
            let log = scenario.generate();
            log.write(&out)?;
            println!("log={}", out.display());
            println!("records={}", log.records.len());
            Ok(())
        }
        Command::Run {
            log,
            out,
            no_sonar,
            no_depth,
            no_loop,
            with_scale,
            init_from_truth,
            seed,
            best_of,
            config,
        } => {
            let settings = match config {
                Some(path) => RunSettings::load(&path)?,
                None => RunSettings::default(),
            };
            let run_config = RunConfig {
                log_path: log,
                output_dir: out,
                use_sonar: !no_sonar,
                use_depth: !no_depth,
                use_loop: !no_loop,
                with_scale,
                init_mode: if init_from_truth { InitMode::GroundTruth } else { InitMode::TwoStep },
                seed,
                best_of,
                settings,
            };
            let report = eval::run(&run_config)?;
            print!("{}", report.to_key_values());
            Ok(())
        }
        Command::Eval { estimate, truth, with_scale } => {
            let est = eval::read_trajectory_csv(&estimate)?;
            let tru = eval::read_trajectory_csv(&truth)?;
            let alignment = eval::umeyama_align(&est, &tru, with_scale)?;
            let aligned = eval::apply_alignment(&est, &alignment);
            let rmse = eval::compute_ate_rmse(&aligned, &tru)?;
            let per_axis = eval::per_axis_rmse(&aligned, &tru)?;
            println!("ate_rmse={rmse:.9}");
            println!("rmse_x={:.9}", per_axis.x);
            println!("rmse_y={:.9}", per_axis.y);
            println!("rmse_z={:.9}", per_axis.z);
            println!("alignment_scale={:.9}", alignment.scale);
            Ok(())
        }
        Command::Vocab { log, out, branching, depth, seed } => {
            let log = MeasurementLog::read(&log)?;
            let mut corpus = Vec::new();
            for record in &log.records {
                if let fathom::sim::LogRecord::Camera { feature, .. } = record {
                    corpus.push(feature.descriptor);
                }
            }
            let vocab = Vocabulary::build(&corpus, branching, depth, seed)
                .map_err(|e| eval::RunError::Config(e.to_string()))?;
            vocab.save(&out).map_err(|e| eval::RunError::Config(e.to_string()))?;
            println!("vocabulary={}", out.display());
            println!("descriptors={}", corpus.len());
            println!("words={}", vocab.word_count());
            Ok(())
        }
    }
}

fn build_scenario(kind: ScenarioKind, duration: f64, noise: NoiseSpec, seed: u64) -> Scenario {
    let world_seed = seed.wrapping_add(1);
    match kind {
        ScenarioKind::Orbit => fathom::sim::presets::orbit(duration, noise, world_seed),
        ScenarioKind::Tunnel => fathom::sim::presets::tunnel_sparse(duration, noise, world_seed),
        ScenarioKind::Square => fathom::sim::presets::square_loop(duration, noise, world_seed),
        ScenarioKind::Excited => fathom::sim::presets::excited(duration, noise, world_seed),
    }
}
