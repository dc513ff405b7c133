use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use swarmloc::figures::{reproduce, Figure, Reproduction};
use swarmloc::pipeline::{localize, write_states, Mode, PipelineOptions};
use swarmloc::sensor::{fit_power_law, read_calibration_csv};
use swarmloc::sim::{read_trace, run, write_trace, Scenario};
use swarmloc::Error;

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "swarmloc",
    version,
    about = "Relative localization for simulated robot swarms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its JSON-lines trace.
    Simulate {
        /// Scenario JSON file.
        #[arg(long)]
        scenario: PathBuf,
        /// Trace output (one header line, then one line per timestep).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Localize the swarm in a trace and report aligned errors.
    #[command(after_help = "\
CSV columns (one row per sensor tick):
  t              time in s
  mean_error_cm  mean over robots of the aligned position error
  robot_<i>_cm   aligned position error of robot i

The JSON report carries the same numbers plus max and heading errors,
direct-estimation runs (objective, runtime, convergence) and the number of
skipped filter updates.")]
    Localize {
        /// Trace produced by `simulate`.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Full)]
        mode: ModeArg,
        /// Error series CSV.
        #[arg(long)]
        out: PathBuf,
        /// JSON report; defaults to the CSV path with a .json extension.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Per-timestep filter states as JSON lines (ukf and full modes).
        #[arg(long)]
        states: Option<PathBuf>,
        /// Seed for the direct solver's restarts; defaults to the trace's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the power-law range model to (range_cm, magnitude) samples.
    Calibrate {
        /// CSV with header `range_cm,magnitude`.
        #[arg(long)]
        samples: PathBuf,
        /// Samples closer than this (cm) are excluded from the fit.
        #[arg(long, default_value_t = 0.0)]
        saturation: f64,
        /// Output JSON; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a preset experiment and check it against its thresholds.
    Reproduce {
        #[arg(long, value_enum)]
        figure: FigureArg,
        /// Directory for the position table, error series and summary.
        #[arg(long)]
        out: PathBuf,
        /// First seed; multi-seed presets use consecutive seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Direct,
    Ukf,
    Full,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Direct => Mode::Direct,
            ModeArg::Ukf => Mode::Ukf,
            ModeArg::Full => Mode::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FigureArg {
    Fig6a,
    Fig6b,
    Fig6c,
    Fig10,
}

impl From<FigureArg> for Figure {
    fn from(f: FigureArg) -> Self {
        match f {
            FigureArg::Fig6a => Figure::Fig6a,
            FigureArg::Fig6b => Figure::Fig6b,
            FigureArg::Fig6c => Figure::Fig6c,
            FigureArg::Fig10 => Figure::Fig10,
        }
    }
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite(_)
            | Error::InvalidInput(_)
            | Error::InfeasibleScenario(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => EXIT_INPUT,
            Error::Degenerate(_)
            | Error::Calibration(_)
            | Error::AlignmentUndefined(_)
            | Error::Divergence { .. }
            | Error::Initialization(_) => EXIT_NUMERICAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

fn simulate(scenario: &Path, out: &Path, seed: Option<u64>) -> CmdResult {
    let text = fs::read_to_string(scenario)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", scenario.display())))?;
    let mut s = Scenario::from_json(&text)
        .map_err(|e| Failure::input(format!("{}: {e}", scenario.display())))?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let trace = run(&s)?;
    write_trace(&trace, create(out)?)?;
    println!("{} timesteps, {} robots", trace.n_steps(), trace.n_robots());
    Ok(())
}

fn localize_cmd(
    trace_path: &Path,
    mode: Mode,
    out: &Path,
    json: Option<PathBuf>,
    states: Option<PathBuf>,
    seed: Option<u64>,
) -> CmdResult {
    let trace = read_trace(open(trace_path)?)
        .map_err(|e| Failure::input(format!("{}: {e}", trace_path.display())))?;
    let mut opts = PipelineOptions::new(mode);
    opts.record_states = states.is_some();
    opts.seed = seed;
    let loc = localize(&trace, &opts)?;
    let report = &loc.report;
    report.write_csv(create(out)?)?;
    let json = json.unwrap_or_else(|| out.with_extension("json"));
    report.write_json(create(&json)?)?;
    if let Some(path) = states {
        write_states(&loc.states, create(&path)?)?;
    }
    println!(
        "{} sensor ticks, time-averaged error {:.3} cm, final error {:.3} cm",
        report.samples.len(),
        report.time_averaged_error(),
        report.samples.last().map_or(f64::NAN, |s| s.mean_error)
    );
    Ok(())
}

fn calibrate(samples: &Path, saturation: f64, out: Option<PathBuf>) -> CmdResult {
    let data = read_calibration_csv(open(samples)?)
        .map_err(|e| Failure::input(format!("{}: {e}", samples.display())))?;
    let fit = fit_power_law(&data, saturation)?;
    let value = serde_json::json!({
        "amplitude": fit.calibration.amplitude,
        "exponent": fit.calibration.exponent,
        "n_samples_used": fit.n_samples_used,
        "rms_log_residual": fit.rms_log_residual,
    });
    let text = serde_json::to_string_pretty(&value).map_err(Error::from)?;
    match out {
        Some(path) => {
            let mut w = create(&path)?;
            writeln!(w, "{text}").map_err(Error::from)?;
            w.flush().map_err(Error::from)?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn write_reproduction(r: &Reproduction, dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let name = r.figure.name();

    let mut w = BufWriter::new(File::create(dir.join(format!("{name}_positions.csv")))?);
    writeln!(w, "robot,true_x,true_y,est_x,est_y,error_cm")?;
    for (i, (t, e)) in r.positions.iter().enumerate() {
        writeln!(
            w,
            "{i},{},{},{},{},{}",
            t.x,
            t.y,
            e.x,
            e.y,
            t.distance_to(e)
        )?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join(format!("{name}_errors.csv")))?);
    writeln!(w, "t,mean_error_cm,max_error_cm")?;
    for s in &r.series {
        writeln!(w, "{},{},{}", s.t, s.mean_error, s.max_error)?;
    }
    w.flush()?;

    let w = BufWriter::new(File::create(dir.join(format!("{name}_summary.json")))?);
    serde_json::to_writer_pretty(w, r)?;
    Ok(())
}

fn reproduce_cmd(figure: Figure, out: &Path, seed: u64) -> CmdResult {
    let r = reproduce(figure, seed)?;
    write_reproduction(&r, out)?;
    let verdict = match (r.passed, r.expected_failure) {
        (true, false) => "PASS",
        (true, true) => "PASS (failure mode reproduced)",
        (false, false) => "FAIL",
        (false, true) => "FAIL (failure mode not reproduced)",
    };
    println!("{figure}: {verdict}");
    for line in &r.summary {
        println!("  {line}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            scenario,
            out,
            seed,
        } => simulate(&scenario, &out, seed),
        Command::Localize {
            trace,
            mode,
            out,
            json,
            states,
            seed,
        } => localize_cmd(&trace, mode.into(), &out, json, states, seed),
        Command::Calibrate {
            samples,
            saturation,
            out,
        } => calibrate(&samples, saturation, out),
        Command::Reproduce { figure, out, seed } => reproduce_cmd(figure.into(), &out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::debug!("exit code {}", f.code);
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
