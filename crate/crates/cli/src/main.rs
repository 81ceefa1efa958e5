use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use mortar_iga::driver::{configure_threads, error_status, execute, Command, RunOptions, Status};
use mortar_iga::mortar::QuadratureMode;
use mortar_iga::scenario::Overrides;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    PatchTest,
    MortarConvergence,
    BeamCantilever,
    EmbeddedBeam,
    DualBasisDump,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::PatchTest => Command::PatchTest,
            Cmd::MortarConvergence => Command::MortarConvergence,
            Cmd::BeamCantilever => Command::BeamCantilever,
            Cmd::EmbeddedBeam => Command::EmbeddedBeam,
            Cmd::DualBasisDump => Command::DualBasisDump,
        }
    }
}

/// Runs mortar-coupled isogeometric analysis scenarios.
///
/// Exit status: 0 pass, 1 threshold failure, 2 configuration error,
/// 3 solver failure.
#[derive(Debug, Parser)]
#[command(name = "mortar-iga", version)]
struct Cli {
    command: Cmd,
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Number of refinement levels to run.
    #[arg(long)]
    refinement_levels: Option<usize>,
    /// `merged` or `sample:<m>`.
    #[arg(long)]
    quadrature: Option<String>,
    /// Worker threads for assembly.
    #[arg(long)]
    threads: Option<usize>,
}

fn fail(status: Status, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("mortar-iga: {msg}");
    ExitCode::from(status.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = Command::from(cli.command);
    let quadrature = match cli.quadrature.as_deref().map(str::parse::<QuadratureMode>).transpose() {
        Ok(q) => q,
        Err(e) => return fail(error_status(&e), e),
    };
    if let Some(n) = cli.threads {
        if let Err(e) = configure_threads(n) {
            return fail(error_status(&e), e);
        }
    }
    let opts = RunOptions {
        scenario: cli.scenario,
        out: cli.out,
        overrides: Overrides { refinement_levels: cli.refinement_levels, quadrature },
    };
    let (status, result) = execute(command, &opts);
    match result {
        Ok(out) => {
            for c in &out.report.checks {
                println!("{} {}: {:e} {} {:e}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.relation, c.limit);
            }
            println!("{command}: {:?}, outputs in {}", status, opts.out.display());
            ExitCode::from(status.exit_code() as u8)
        }
        Err(e) => fail(status, e),
    }
}
