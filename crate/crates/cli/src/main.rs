mod commands;
mod config;
mod report;

use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{de::DeserializeOwned, Serialize};

use commands::Ctx;
use config::{defaults_json, ConfCheckConfig, ElCheckConfig, EvalConfig, ProfileConfig, SecondVarConfig, VarCheckConfig};
use report::{Check, Report, Timing};

const USAGE: u8 = 1;
const COMPUTE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "foliwill",
    version,
    about = "Willmore-type functionals on foliated hypersurfaces: profiles, evaluation and verification suites",
    after_help = "Exit codes: 0 all checks pass, 1 usage error, 2 computation/precondition error or failed check."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file, or '-' for stdin; omitted keys take the defaults listed below.
    #[arg(long)]
    config: Option<String>,
    /// Directory for the JSON report, CSV tables and plots.
    #[arg(long, default_value = "foliwill-out")]
    out_dir: PathBuf,
    /// Progress and per-case detail on stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the critical profile ODE for each p and compare with the closed form; writes CSV and SVG.
    Profile(Common),
    /// Evaluate a functional on a catalog surface by tensor-product quadrature.
    Eval(Common),
    /// Euler-Lagrange residuals at grid nodes.
    Elcheck(Common),
    /// Variation-formula suite against central differences, plus integral identities on periodic patches.
    Varcheck(Common),
    /// Conformal invariance of the Q_r density under inversion or scaling.
    Confcheck(Common),
    /// Second variation on a critical hypersurface of revolution for leaf harmonics.
    Secondvar(Common),
}

fn cli() -> clap::Command {
    let defaults = [
        ("profile", defaults_json::<ProfileConfig>()),
        ("eval", defaults_json::<EvalConfig>()),
        ("elcheck", defaults_json::<ElCheckConfig>()),
        ("varcheck", defaults_json::<VarCheckConfig>()),
        ("confcheck", defaults_json::<ConfCheckConfig>()),
        ("secondvar", defaults_json::<SecondVarConfig>()),
    ];
    defaults.into_iter().fold(Cli::command(), |cmd, (name, json)| {
        cmd.mut_subcommand(name, |sub| sub.after_help(format!("Default config:\n{json}")))
    })
}

enum Failure {
    Usage(anyhow::Error),
    Compute(anyhow::Error),
}

fn read_config(src: &Option<String>) -> Result<Option<String>> {
    match src.as_deref() {
        None => Ok(None),
        Some("-") => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).context("reading config from stdin")?;
            Ok(Some(s))
        }
        Some(path) => Ok(Some(std::fs::read_to_string(path).with_context(|| format!("reading config {path}"))?)),
    }
}

fn run<T: DeserializeOwned + Serialize + Default>(
    name: &str,
    common: &Common,
    body: fn(&T, &Ctx) -> Result<Vec<Check>>,
) -> std::result::Result<bool, Failure> {
    let start = Instant::now();
    let text = read_config(&common.config).map_err(Failure::Usage)?;
    let cfg: T = config::parse(text.as_deref()).context("invalid config").map_err(Failure::Usage)?;
    commands::ensure_dir(&common.out_dir).map_err(Failure::Compute)?;
    let ctx = Ctx { out_dir: common.out_dir.clone(), verbose: common.verbose };
    let results = body(&cfg, &ctx).map_err(Failure::Compute)?;
    let report = Report {
        command: name.to_string(),
        params: serde_json::to_value(&cfg).map_err(|e| Failure::Compute(e.into()))?,
        results,
        timing: Timing { total_s: start.elapsed().as_secs_f64() },
    };
    report.write(&common.out_dir).map_err(Failure::Compute)?;
    for c in report.results.iter().filter(|c| !c.pass) {
        eprintln!("FAIL {}: {:e} (tolerance {:?})", c.name, c.value, c.tolerance);
    }
    println!("{name}: {} in {:.3} s", if report.pass() { "PASS" } else { "FAIL" }, report.timing.total_s);
    Ok(report.pass())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let parsed = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(USAGE);
        }
    };
    let outcome = match &parsed.command {
        Command::Profile(c) => run("profile", c, commands::profile),
        Command::Eval(c) => run("eval", c, commands::eval),
        Command::Elcheck(c) => run("elcheck", c, commands::elcheck),
        Command::Varcheck(c) => run("varcheck", c, commands::varcheck),
        Command::Confcheck(c) => run("confcheck", c, commands::confcheck),
        Command::Secondvar(c) => run("secondvar", c, commands::secondvar),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(COMPUTE),
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(USAGE)
        }
        Err(Failure::Compute(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(COMPUTE)
        }
    }
}
