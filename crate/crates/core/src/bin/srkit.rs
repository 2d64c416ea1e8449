use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use srkit::experiments::{run_experiment, write_run, ExperimentSpec};
use srkit::rounding::{quant_grid, round_nearest, round_stochastic, sr_up_probability, Address, RoundRng};
use srkit::sweep::{bound_csv, bound_sweep, write_sweep, BoundSweepSpec};
use srkit::verify::{run_suite, Fault, Suite, VerifyOptions};
use srkit::Error;

/// BF16 stochastic-rounding toolkit.
///
/// Exit status: 0 when every check passes or the run completes, 1 on a
/// failed check or run, 2 on a usage or configuration error.
#[derive(Parser, Debug)]
#[command(name = "srkit", version)]
struct Cli {
    /// JSON config for `bound` and `experiment`.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed; overrides the config's seed.
    #[arg(long, global = true, env = "SRKIT_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Progress on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Show both roundings of one value.
    ///
    /// VALUE is a decimal number or a hex bit pattern: `0x` with up to 4
    /// digits is a bf16 pattern, more digits a binary32 pattern.
    Round {
        #[arg(allow_hyphen_values = true)]
        value: String,
        #[arg(long, value_enum, default_value_t = Mode::Both)]
        mode: Mode,
        /// Stochastic draws for the empirical up-frequency.
        #[arg(long, default_value_t = 10_000)]
        count: u64,
    },
    /// Run a property suite and print a JSON report.
    Verify {
        #[arg(value_enum)]
        suite: SuiteArg,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Sweep the SR and NR bounds over one constant (needs --config).
    ///
    /// Writes bounds.csv and manifest.json under --out, or the CSV to stdout.
    Bound,
    /// Run an experiment spec (needs --config); writes metrics.csv and
    /// manifest.json under --out (default `out`).
    Experiment,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Nearest,
    Sr,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    Rounding,
    Optimizer,
    Lemmas,
    Bounds,
    Replica,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    XiSign,
}

enum Failure {
    Check(String),
    Config(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig { .. } | Error::Json(_) => Failure::Config(e.to_string()),
            e => Failure::Check(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let res = match &cli.cmd {
        Cmd::Round { value, mode, count } => cmd_round(&cli, value, *mode, *count),
        Cmd::Verify { suite, inject_fault } => cmd_verify(&cli, *suite, *inject_fault),
        Cmd::Bound => cmd_bound(&cli),
        Cmd::Experiment => cmd_experiment(&cli),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn parse_value(s: &str) -> Option<f32> {
    let t = s.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, t),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        let bits = u32::from_str_radix(hex, 16).ok()?;
        match hex.len() {
            1..=4 => f32::from_bits(bits << 16),
            5..=8 => f32::from_bits(bits),
            _ => return None,
        }
    } else {
        body.parse::<f32>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn bf16_hex(x: f32) -> String {
    format!("0x{:04X}", x.to_bits() >> 16)
}

fn cmd_round(cli: &Cli, value: &str, mode: Mode, count: u64) -> Result<(), Failure> {
    let x = parse_value(value).ok_or_else(|| Failure::Config(format!("cannot parse `{value}` as a number or hex pattern")))?;
    if !x.is_finite() {
        return Err(Failure::Config(format!("`{value}` is not finite")));
    }
    let g = quant_grid(x)?;
    println!("{:<14}{x}", "input");
    println!("{:<14}0x{:08X}", "bits", x.to_bits());
    let (fl, ce) = (g.floor as f32, g.ceil as f32);
    println!("{:<14}{} ({})", "floor", fl, bf16_hex(fl));
    println!("{:<14}{} ({})", "ceil", ce, bf16_hex(ce));
    if g.is_exact() {
        println!("{:<14}{:e} (floor == ceil)", "delta", g.resolution);
    } else {
        println!("{:<14}{:e}", "delta", g.resolution);
    }
    if matches!(mode, Mode::Nearest | Mode::Both) {
        let n = round_nearest(x);
        println!("{:<14}{} (0x{:04X})", "nearest", n.to_f32(), n.to_bits());
    }
    if matches!(mode, Mode::Sr | Mode::Both) {
        let seed = cli.seed.unwrap_or(0);
        let rng = RoundRng::new(seed);
        let mut up = 0u64;
        for k in 0..count {
            let q = round_stochastic(x, &rng, Address::new(0, 0, k))?;
            if !g.is_exact() && q.to_f32() as f64 == g.ceil {
                up += 1;
            }
        }
        println!("{:<14}{}", "sr_p_up", sr_up_probability(x));
        if count > 0 {
            println!(
                "{:<14}{} ({count} draws, seed {seed})",
                "sr_empirical",
                up as f64 / count as f64
            );
        }
    }
    Ok(())
}

fn cmd_verify(cli: &Cli, suite: SuiteArg, fault: Option<FaultArg>) -> Result<(), Failure> {
    let suites: Vec<Suite> = match suite {
        SuiteArg::Rounding => vec![Suite::Rounding],
        SuiteArg::Optimizer => vec![Suite::Optimizer],
        SuiteArg::Lemmas => vec![Suite::Lemmas],
        SuiteArg::Bounds => vec![Suite::Bounds],
        SuiteArg::Replica => vec![Suite::Replica],
        SuiteArg::All => Suite::ALL.to_vec(),
    };
    let opts = VerifyOptions {
        seed: cli.seed.unwrap_or(0),
        fault: fault.map(|FaultArg::XiSign| Fault::XiSign),
    };
    let mut failures = 0;
    for s in suites {
        if cli.verbose {
            eprintln!("running {s}");
        }
        let report = run_suite(s, &opts);
        failures += report.failures;
        let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
        println!("{text}");
        if let Some(out) = &cli.out {
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            srkit::experiments::write_atomic(&out.join(format!("verify_{s}.json")), text.as_bytes())?;
        }
    }
    if failures > 0 {
        return Err(Failure::Check(format!("{failures} check(s) failed")));
    }
    Ok(())
}

fn read_config<T: DeserializeOwned>(cli: &Cli) -> Result<T, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::Config("--config is required".into()))?;
    let bytes = std::fs::read(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn cmd_bound(cli: &Cli) -> Result<(), Failure> {
    let spec: BoundSweepSpec = read_config(cli)?;
    let rows = bound_sweep(&spec)?;
    match &cli.out {
        Some(out) => {
            write_sweep(out, &spec, &rows)?;
            if cli.verbose {
                eprintln!("wrote {} rows to {}", rows.len(), out.display());
            }
        }
        None => {
            let csv = bound_csv(spec.axis, &rows)?;
            print!("{}", String::from_utf8_lossy(&csv));
        }
    }
    Ok(())
}

fn cmd_experiment(cli: &Cli) -> Result<(), Failure> {
    let mut spec: ExperimentSpec = read_config(cli)?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    check_writable(&out)?;
    if cli.verbose {
        eprintln!("running {} with seed {}", spec.kind_name(), spec.seed);
    }
    let run = run_experiment(&spec)?;
    write_run(&out, &spec, &run)?;
    println!("{}", serde_json::to_string_pretty(&run.summary).map_err(Error::from)?);
    Ok(())
}

fn check_writable(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
    let probe = dir.join(".srkit-probe");
    std::fs::write(&probe, b"").map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
    let _ = std::fs::remove_file(probe);
    Ok(())
}
