use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hjmfdr::Error;
use hjmfdr_cli::run::SVENSSON_CONFIG;
use hjmfdr_cli::{run, Command, Failure, RunConfig};

/// Finite-dimensional realizations of HJM forward-rate models.
#[derive(Parser)]
#[command(name = "hjmfdr", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a key: `section.key=value` (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (same as `--set output.directory=DIR`).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lie algebra rank analysis (analysis.json).
    Analyze(Common),
    /// Affine realization (realization.json, lambdas.csv, deltas.csv).
    Construct(Common),
    /// Monte Carlo paths (path CSVs, simulation.json).
    Simulate(Common),
    /// Invariance, tangency and realization checks (verification.json).
    Verify(Common),
    /// The Svensson model end to end; uses the bundled config by default.
    DemoSvensson(Common),
}

fn load(common: &Common, bundled: Option<&str>) -> Result<RunConfig, Failure> {
    let text = match (&common.config, bundled) {
        (Some(p), _) => std::fs::read_to_string(p).map_err(|e| Failure {
            op: format!("read config {}", p.display()),
            error: Error::Config(e.to_string()),
        })?,
        (None, Some(b)) => b.to_string(),
        (None, None) => {
            return Err(Failure { op: "config".into(), error: Error::Config("--config is required".into()) })
        }
    };
    let mut overrides = common.set.clone();
    if let Some(o) = &common.out {
        overrides.push(format!("output.directory={}", o.display()));
    }
    RunConfig::parse_with_overrides(&text, &overrides).map_err(|error| Failure { op: "config".into(), error })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common, bundled) = match &cli.command {
        Cmd::Analyze(c) => (Command::Analyze, c, None),
        Cmd::Construct(c) => (Command::Construct, c, None),
        Cmd::Simulate(c) => (Command::Simulate, c, None),
        Cmd::Verify(c) => (Command::Verify, c, None),
        Cmd::DemoSvensson(c) => (Command::DemoSvensson, c, Some(SVENSSON_CONFIG)),
    };
    let result = load(common, bundled).and_then(|cfg| run(command, &cfg));
    match result {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            for line in &out.summary {
                let _ = writeln!(stdout, "{line}");
            }
            for p in &out.written {
                let _ = writeln!(stdout, "wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
