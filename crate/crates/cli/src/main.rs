use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gridmarkov::case_io::{load_case, to_canonical_json};
use gridmarkov::experiment::{Experiment, ExperimentManifest};
use gridmarkov::gmrf::{Channel, GraphMode};
use gridmarkov::grid_model::build_susceptance_matrix;
use gridmarkov::{BusId, Error};

const EXIT_PIPELINE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_TUNING: u8 = 3;

/// Repetitions used by `--full`.
const FULL_REPS: usize = 1000;

#[derive(Parser)]
#[command(name = "gridmarkov", version, about = "Detect stealthy false-data injection from bus phase-angle statistics")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment manifest (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Overrides the manifest seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the manifest output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the repetitions of sweeps and anomaly runs.
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Uses 1000 repetitions for sweeps and anomaly runs.
    #[arg(long, global = true, conflicts_with = "reps")]
    full: bool,
    /// Overrides the measurement channel.
    #[arg(long, global = true, value_enum)]
    channel: Option<ChannelArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    Angle,
    Voltage,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    FirstNeighbor,
    ExactTwoHop,
}

#[derive(Subcommand)]
enum Command {
    /// Parses a case (`ieee14`, `ieee30`, MATPOWER or canonical JSON) and prints canonical JSON.
    Parse { case: String },
    /// Prints the Markov graph predicted from the topology.
    PredictGraph {
        /// Case to use instead of the manifest's.
        case: Option<String>,
        #[arg(long, value_enum, default_value = "first-neighbor")]
        mode: ModeArg,
    },
    /// Tunes the threshold and calibrates the alarm tolerance.
    Tune,
    /// Draws samples, optionally with a trailing attack, into samples.csv.
    Simulate {
        #[arg(long, default_value_t = 500)]
        samples: usize,
        /// Comma-separated attacked bus ids.
        #[arg(long, value_delimiter = ',')]
        attacked: Vec<BusId>,
        #[arg(long, default_value_t = 2.1)]
        size: f64,
        /// Number of corrupted trailing samples (defaults to all).
        #[arg(long)]
        duration: Option<usize>,
    },
    /// Runs the attack sweep and writes the detection-rate table and curve.
    Sweep,
    /// Runs the anomaly-score experiment and writes scores and a bar plot.
    Anomaly {
        /// Comma-separated attacked bus ids.
        #[arg(long, value_delimiter = ',')]
        attacked: Option<Vec<BusId>>,
        /// Comma-separated attack sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<f64>>,
    },
    /// Runs the detector on a samples CSV.
    Detect { samples: PathBuf },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } | Error::Schema { .. } | Error::Validation(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::TuningFailed { .. } => EXIT_TUNING,
        _ => EXIT_PIPELINE,
    }
}

fn manifest(common: &Common) -> Result<ExperimentManifest, Failure> {
    let mut m = match &common.manifest {
        Some(path) => ExperimentManifest::load(path).map_err(|e| match e {
            Error::Io(io) => Failure::Usage(format!("cannot read manifest {}: {io}", path.display())),
            other => Failure::Run(other),
        })?,
        None => ExperimentManifest::default(),
    };
    if let Some(seed) = common.seed {
        m.seed = seed;
    }
    if let Some(out) = &common.out {
        m.out = out.clone();
    }
    let reps = if common.full { Some(FULL_REPS) } else { common.reps };
    if let Some(reps) = reps {
        m.sweep.reps = reps;
        m.anomaly.reps = reps;
    }
    if let Some(c) = common.channel {
        m.channel = match c {
            ChannelArg::Angle => Channel::Angle,
            ChannelArg::Voltage => Channel::Voltage,
        };
    }
    Ok(m)
}

fn experiment(m: ExperimentManifest) -> Result<Experiment, Failure> {
    Experiment::new(m).map_err(|e| match e {
        Error::Io(io) => Failure::Usage(format!("cannot read case: {io}")),
        other => Failure::Run(other),
    })
}

fn read_case(spec: &str) -> Result<gridmarkov::GridCase, Failure> {
    load_case(spec).map_err(|e| match e {
        Error::Io(io) => Failure::Usage(format!("cannot read case {spec}: {io}")),
        other => Failure::Run(other),
    })
}

fn write_or_print(out: Option<&Path>, name: &str, text: &str) -> Result<(), Failure> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(Error::from)?;
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(Error::from)?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    match cli.command {
        Command::Parse { case } => {
            let case = read_case(&case)?;
            write_or_print(common.out.as_deref(), "case.json", &(to_canonical_json(&case) + "\n"))
        }
        Command::PredictGraph { case, mode } => {
            let spec = match case {
                Some(c) => c,
                None => manifest(common)?.case,
            };
            let case = read_case(&spec)?;
            let b = build_susceptance_matrix(&case);
            let mode = match mode {
                ModeArg::FirstNeighbor => GraphMode::FirstNeighbor,
                ModeArg::ExactTwoHop => GraphMode::ExactTwoHop,
            };
            let edges = gridmarkov::gmrf::predicted_markov_graph(&b, mode);
            let report = serde_json::json!({ "var_ids": b.var_ids(), "edges": edges });
            let text = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
            write_or_print(common.out.as_deref(), "predicted_graph.json", &text)
        }
        Command::Tune => {
            let exp = experiment(manifest(common)?)?;
            let t = exp.cmd_tune()?;
            println!(
                "xi {:.6}  eta {}  edit distance {}  tolerance {}  clean alarm rate {:.4}  alpha {:.4}",
                t.xi, t.eta, t.tuned_edit_distance, t.tolerance, t.clean_alarm_rate, t.alpha
            );
            Ok(())
        }
        Command::Simulate { samples, attacked, size, duration } => {
            let exp = experiment(manifest(common)?)?;
            let attack = (!attacked.is_empty()).then(|| (attacked.as_slice(), size, duration.unwrap_or(samples)));
            let path = exp.cmd_simulate(samples, attack)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Sweep => {
            let exp = experiment(manifest(common)?)?;
            let result = exp.cmd_sweep()?;
            println!("attack_size  corrupted  detection_rate");
            for p in &result.curve {
                println!("{:>11}  {:>9}  {:>14.4}", p.attack_size, p.corrupted, p.detection_rate);
            }
            Ok(())
        }
        Command::Anomaly { attacked, sizes } => {
            let mut m = manifest(common)?;
            if let Some(a) = attacked {
                m.anomaly.attacked = a;
            }
            if let Some(s) = sizes {
                m.anomaly.sizes = s;
            }
            let exp = experiment(m)?;
            let ids = exp.var_ids();
            for s in exp.cmd_anomaly()? {
                let scores: Vec<String> =
                    ids.iter().zip(&s.mean_scores).map(|(id, v)| format!("{id}:{v:.3}")).collect();
                println!(
                    "size {}  top-k rate {:.3}  exact flag rate {:.3}  {}",
                    s.attack_size,
                    s.top_rate,
                    s.exact_rate,
                    scores.join(" ")
                );
            }
            Ok(())
        }
        Command::Detect { samples } => {
            if !samples.exists() {
                return Err(Failure::Usage(format!("samples file {} does not exist", samples.display())));
            }
            let exp = experiment(manifest(common)?)?;
            let r = exp.cmd_detect(&samples)?;
            println!(
                "{}  edit distance {}  tolerance {}  n {}",
                if r.alarm { "ALARM" } else { "clean" },
                r.edit_distance,
                r.tolerance,
                r.n
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
