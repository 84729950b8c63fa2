//! Library side of the `autodyn` command-line tool.

pub mod args;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod manifest;

use std::ffi::OsString;
use std::time::Instant;

use clap::Parser;

use args::{Cli, Command};

pub const EXIT_INPUT: i32 = 1;
pub const EXIT_MODEL: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad files or flags.
    Input(String),
    /// Estimation failed.
    Model(String),
    Internal(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Model(m) => write!(f, "model error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<autodyn::Error> for CliError {
    fn from(e: autodyn::Error) -> Self {
        use autodyn::Error as E;
        match e {
            E::Io(_) | E::Csv(_) | E::Json(_) | E::Data(_) | E::InvalidArgument(_) | E::InvalidBasis(_) | E::TimeOutOfRange(_) => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Model(e.to_string()),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Model(_) | CliError::Internal(_) => EXIT_MODEL,
        }
    }
}

fn parse(argv: &[OsString]) -> Result<Cli, clap::Error> {
    Cli::try_parse_from(argv)
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let mut cli = match parse(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(path) = cli.config.clone() {
        let spliced = match config::splice(&argv, cli.command.name(), &path) {
            Ok(a) => a,
            Err(e) => {
                eprintln!("autodyn: {e}");
                return e.exit_code();
            }
        };
        cli = match parse(&spliced) {
            Ok(c) => c,
            Err(e) => {
                let _ = e.print();
                return EXIT_INPUT;
            }
        };
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("autodyn: cannot start thread pool: {e}");
            return EXIT_MODEL;
        }
    };
    let start = Instant::now();
    let result = pool.install(|| match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit_cmd(a),
        Command::Select(a) => commands::select(a),
        Command::TwoStage(a) => commands::two_stage_cmd(a),
        Command::Compare(a) => commands::compare(a),
    });
    let finished = result.and_then(|(code, out)| {
        let wall = cli.record_timing.then(|| start.elapsed().as_secs_f64());
        out.finish(wall).map(|_| code)
    });
    match finished {
        Ok(code) => {
            if code == commands::EXIT_NOT_CONVERGED {
                eprintln!("autodyn: fit did not converge; results written");
            }
            code
        }
        Err(e) => {
            eprintln!("autodyn: {e}");
            e.exit_code()
        }
    }
}
