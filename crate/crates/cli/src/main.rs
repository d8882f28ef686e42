//! `gimbalcal`: simulate, calibrate, validate, track and report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gimbalcal::calibration::{
    calibrate_encoderless, calibrate_with_encoders, validate, CalibrationMode, CalibrationResult,
};
use gimbalcal::io::{self, ModelTrajectory, RunConfig, SequenceFile};
use gimbalcal::simulator::{
    default_truth_model, evaluate_study, reprojection_summary, synthesize_dataset_with, synthesize_tracking_sequence,
    SimulationConfig, StudyTables, TrackingScenario,
};
use gimbalcal::tracker::{track_sequence, RigExtrinsics, TrackerRig};
use gimbalcal::Error;

#[derive(Parser, Debug)]
#[command(name = "gimbalcal", version, about = "Dynamic camera cluster calibration and joint-angle tracking")]
struct Cli {
    /// Random seed for simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    serial: bool,

    /// TOML configuration: a simulation config for `simulate`, solver
    /// settings for the other commands.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output file or directory (see each command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Calibration,
    Validation,
    Tracking,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Encoderless,
    Encoders,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset (dataset.json, truth.json, init.json,
    /// rejections.json) or a tracking sequence (sequence.json) into the
    /// `--out` directory.
    Simulate {
        #[arg(long, value_enum, default_value = "calibration")]
        preset: Preset,
    },
    /// Estimate the kinematic chain. Writes the result JSON to `--out`
    /// (default: result.json beside the dataset) and a per-set CSV beside it.
    Calibrate {
        dataset: PathBuf,
        /// Initial model and joint angles (default: init.json beside the dataset).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "encoderless")]
        mode: Mode,
    },
    /// Estimate joint angles of a dataset with a calibrated chain held fixed.
    Validate {
        dataset: PathBuf,
        /// Calibration result providing the chain.
        #[arg(long)]
        result: PathBuf,
        /// Initial joint angles (default: init.json beside the dataset).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Track joint angles through a sequence. Writes per-frame estimates to
    /// `--out` (default: track.csv beside the sequence) and an RMSE CSV.
    Track {
        sequence: PathBuf,
        #[arg(long)]
        result: PathBuf,
    },
    /// Tables from a study directory holding calibration/ and validation/
    /// each with truth.json and result.json.
    Report { study: PathBuf },
}

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Failure {
    Input = 1,
    Generation = 2,
    Solver = 3,
}

struct CommandError {
    failure: Failure,
    message: String,
}

impl CommandError {
    fn input(message: impl Into<String>) -> Self {
        CommandError {
            failure: Failure::Input,
            message: message.into(),
        }
    }
}

fn classify(e: &Error) -> Failure {
    match e {
        Error::CalibrationNotConverged(_)
        | Error::NotConverged { .. }
        | Error::NonFiniteResidual { .. }
        | Error::NonFiniteEvaluation { .. } => Failure::Solver,
        Error::AllSetsRejected { .. } | Error::DegenerateConfiguration(_) | Error::PnpNotConverged { .. } => {
            Failure::Generation
        }
        _ => Failure::Input,
    }
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        CommandError {
            failure: classify(&e),
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), CommandError>;

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    sibling(path, &format!("{stem}{suffix}"))
}

fn run_config(cli: &Cli) -> Result<RunConfig, CommandError> {
    let mut cfg: RunConfig = match &cli.config {
        Some(p) => io::load_toml(p)?,
        None => RunConfig::default(),
    };
    if cli.serial {
        cfg.calibration.solve.parallel = false;
        cfg.tracker.parallel = false;
    }
    cfg.calibration.solve.validate()?;
    cfg.tracker.validate()?;
    Ok(cfg)
}

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CommandError::input(format!("{}: no such file", path.display())))
    }
}

fn cmd_simulate(cli: &Cli, preset: Preset) -> CmdResult {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("sim"));
    if let Preset::Tracking = preset {
        let mut scenario: TrackingScenario = match &cli.config {
            Some(p) => io::load_toml(p)?,
            None => TrackingScenario::default_with_model(default_truth_model(), 0),
        };
        if let Some(seed) = cli.seed {
            scenario.rng_seed = seed;
        }
        let seq = synthesize_tracking_sequence(&scenario).map_err(|e| CommandError {
            failure: if matches!(e, Error::Config(_)) { Failure::Input } else { Failure::Generation },
            message: e.to_string(),
        })?;
        let file = SequenceFile {
            intrinsics_s: scenario.intrinsics_s,
            intrinsics_d: scenario.intrinsics_d,
            t_s_i: scenario.t_s_i,
            landmarks: seq.landmarks,
            initial: seq.truth[0].clone(),
            frames: seq.frames,
        };
        let path = out.join("sequence.json");
        io::save_sequence(&path, &file)?;
        println!("wrote {} ({} frames)", path.display(), file.frames.len());
        return Ok(());
    }
    let mut config = match &cli.config {
        Some(p) => io::load_toml::<SimulationConfig>(p)?,
        None => match preset {
            Preset::Validation => SimulationConfig::validation_default(0),
            _ => SimulationConfig::calibration_default(0),
        },
    };
    if let Some(seed) = cli.seed {
        config.rng_seed = seed;
    }
    config.validate()?;
    let bundle = synthesize_dataset_with(&config, !cli.serial).map_err(|e| CommandError {
        failure: Failure::Generation,
        message: e.to_string(),
    })?;
    io::save_dataset(&out.join("dataset.json"), &bundle.dataset)?;
    io::save_model_trajectory(
        &out.join("truth.json"),
        &ModelTrajectory {
            model: bundle.truth_model.clone(),
            joint_angles: bundle.truth_angles.clone(),
        },
    )?;
    io::save_model_trajectory(
        &out.join("init.json"),
        &ModelTrajectory {
            model: bundle.init_model.clone(),
            joint_angles: bundle.init_angles.clone(),
        },
    )?;
    io::save_rejections(&out.join("rejections.json"), &bundle.rejections)?;
    println!(
        "wrote {} sets to {} ({} configurations rejected)",
        bundle.dataset.sets.len(),
        out.display(),
        bundle.rejections.len()
    );
    Ok(())
}

fn print_summary(label: &str, result: &CalibrationResult) {
    let s = reprojection_summary(result);
    println!(
        "{label}: {} images, mean reprojection error {:.6} px (std {:.6} px), per-point mean {:.6} px",
        s.n_images, s.mean_px, s.std_px, result.stats.mean_px
    );
    println!(
        "  solver: {} after {} iterations, cost {:.6e} -> {:.6e}",
        result.report.termination.as_str(),
        result.report.iterations,
        result.report.initial_cost,
        result.report.final_cost
    );
}

/// Writes the result and its CSV, even for a non-converged run.
fn finish_calibration(
    label: &str,
    outcome: gimbalcal::Result<CalibrationResult>,
    dataset: &gimbalcal::measurement::Dataset,
    out: &Path,
) -> CmdResult {
    let (result, failed) = match outcome {
        Ok(r) => (r, None),
        Err(Error::CalibrationNotConverged(r)) => {
            let message = format!("solver did not converge after {} iterations", r.report.iterations);
            (*r, Some(message))
        }
        Err(e) => return Err(e.into()),
    };
    io::save_result(out, &result)?;
    let per_set: Vec<usize> = dataset.sets.iter().map(|s| s.len()).collect();
    io::write_atomic(
        &with_suffix(out, "_stats.csv"),
        io::stats_csv(&result.stats, &per_set).as_bytes(),
    )?;
    print_summary(label, &result);
    println!("wrote {}", out.display());
    match failed {
        Some(message) => Err(CommandError {
            failure: Failure::Solver,
            message,
        }),
        None => Ok(()),
    }
}

fn cmd_calibrate(cli: &Cli, dataset_path: &Path, init: Option<&Path>, mode: Mode) -> CmdResult {
    let cfg = run_config(cli)?;
    let init_path = init.map_or_else(|| sibling(dataset_path, "init.json"), Path::to_path_buf);
    require_file(dataset_path)?;
    require_file(&init_path)?;
    let dataset = io::load_dataset(dataset_path)?;
    let init = io::load_model_trajectory(&init_path)?;
    let out = cli.out.clone().unwrap_or_else(|| sibling(dataset_path, "result.json"));
    let outcome = match mode {
        Mode::Encoderless => calibrate_encoderless(&dataset, &init.model, &init.joint_angles, &cfg.calibration),
        Mode::Encoders => {
            if !dataset.has_known_angles() {
                return Err(CommandError::input(format!(
                    "{}: encoders mode needs known joint angles in every set",
                    dataset_path.display()
                )));
            }
            calibrate_with_encoders(&dataset, &init.model, &cfg.calibration)
        }
    };
    finish_calibration("calibration", outcome, &dataset, &out)
}

fn cmd_validate(cli: &Cli, dataset_path: &Path, result_path: &Path, init: Option<&Path>) -> CmdResult {
    let cfg = run_config(cli)?;
    let init_path = init.map_or_else(|| sibling(dataset_path, "init.json"), Path::to_path_buf);
    for p in [dataset_path, result_path, init_path.as_path()] {
        require_file(p)?;
    }
    let dataset = io::load_dataset(dataset_path)?;
    let calibration = io::load_result(result_path)?;
    if calibration.estimate.mode == CalibrationMode::Validation {
        log::warn!("{} is itself a validation result", result_path.display());
    }
    let init = io::load_model_trajectory(&init_path)?;
    let out = cli.out.clone().unwrap_or_else(|| sibling(dataset_path, "result.json"));
    let outcome = validate(&dataset, &calibration.estimate.model, &init.joint_angles, &cfg.calibration);
    finish_calibration("validation", outcome, &dataset, &out)
}

fn cmd_track(cli: &Cli, sequence_path: &Path, result_path: &Path) -> CmdResult {
    let cfg = run_config(cli)?;
    require_file(sequence_path)?;
    require_file(result_path)?;
    let seq = io::load_sequence(sequence_path)?;
    let calibration = io::load_result(result_path)?;
    let rig = TrackerRig {
        extrinsics: RigExtrinsics::new(calibration.estimate.model, seq.t_s_i.to_transform())?,
        intrinsics_s: seq.intrinsics_s,
        intrinsics_d: seq.intrinsics_d,
    };
    let (estimates, report) = track_sequence(&rig, &seq.frames, &seq.initial, &cfg.tracker)?;
    let out = cli.out.clone().unwrap_or_else(|| sibling(sequence_path, "track.csv"));
    io::write_atomic(&out, io::track_csv(&seq.frames, &estimates, &report)?.as_bytes())?;
    io::write_atomic(&with_suffix(&out, "_rmse.csv"), io::rmse_csv(&report).as_bytes())?;
    println!(
        "tracked {} frames ({} failed)",
        estimates.len(),
        report.failures.len()
    );
    if let Some(rmse) = &report.per_joint_rmse {
        for (j, r) in rmse.iter().enumerate() {
            println!("  joint {} RMSE {:.6e} rad", j + 1, r);
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

const STUDY_FILES: [&str; 4] = [
    "calibration/truth.json",
    "calibration/result.json",
    "validation/truth.json",
    "validation/result.json",
];

fn cmd_report(cli: &Cli, study: &Path) -> CmdResult {
    let missing: Vec<String> = STUDY_FILES
        .iter()
        .map(|f| study.join(f))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CommandError::input(format!("missing study files: {}", missing.join(", "))));
    }
    let cal_truth = io::load_model_trajectory(&study.join(STUDY_FILES[0]))?;
    let cal = io::load_result(&study.join(STUDY_FILES[1]))?;
    let val_truth = io::load_model_trajectory(&study.join(STUDY_FILES[2]))?;
    let val = io::load_result(&study.join(STUDY_FILES[3]))?;
    if cal_truth.model != val_truth.model {
        return Err(CommandError::input("calibration and validation truth models differ"));
    }
    let eval = evaluate_study(
        &cal.estimate,
        &cal_truth.joint_angles,
        &val.estimate,
        &val_truth.joint_angles,
        &cal_truth.model,
    )?;
    let tables = StudyTables::build(reprojection_summary(&cal), reprojection_summary(&val), &eval);
    let out = cli.out.clone().unwrap_or_else(|| study.to_path_buf());
    for p in io::write_tables(&out, &tables)? {
        println!("wrote {}", p.display());
    }
    print!("{}", io::summary_text(&tables));
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Simulate { preset } => cmd_simulate(cli, *preset),
        Command::Calibrate { dataset, init, mode } => cmd_calibrate(cli, dataset, init.as_deref(), *mode),
        Command::Validate { dataset, result, init } => cmd_validate(cli, dataset, result, init.as_deref()),
        Command::Track { sequence, result } => cmd_track(cli, sequence, result),
        Command::Report { study } => cmd_report(cli, study),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.failure as u8)
        }
    }
}
