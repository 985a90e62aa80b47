//! Front end for the `tilecl` binary: configuration, the verification suite, memory sweeps
//! and a single-run demo.

pub mod bench;
pub mod config;
pub mod demo;
pub mod verify;

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::Path;

use tilecl::features::read_features;
use tilecl::{Faults, Matrix};

pub use config::{Cli, Command, Dtype, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tilecl::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("failed properties: {}", .0.join(", "))]
    PropertyFailure(Vec<String>),
}

impl CliError {
    /// 1 property failure, 2 configuration error, 3 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::PropertyFailure(_) => 1,
            CliError::Io(_) | CliError::Core(tilecl::Error::Io(_) | tilecl::Error::Format(_)) => 3,
            CliError::Config(_) | CliError::Core(_) => 2,
        }
    }
}

pub type Features = (Matrix<f64>, Matrix<f64>);

/// Reads `--features-file` and makes the configuration's batch size and dimension agree
/// with it.
pub fn load_features(cfg: &mut RunConfig) -> Result<Option<Features>, CliError> {
    let Some(path) = &cfg.features_file else {
        return Ok(None);
    };
    let (images, texts) = read_features(BufReader::new(File::open(path)?))?;
    cfg.batch_size = images.rows();
    cfg.dim = images.cols();
    Ok(Some((images, texts)))
}

/// Writes `text` to `--output` when given, otherwise to standard output.
pub fn emit(output: Option<&Path>, text: &str) -> Result<(), CliError> {
    match output {
        Some(path) => {
            let mut f = File::create(path)?;
            f.write_all(text.as_bytes())?;
        }
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(&cli.flags)?;
    let features = load_features(&mut cfg)?;
    match &cli.command {
        Command::Verify { inject_fault } => {
            let faults: Faults = inject_fault.iter().copied().collect();
            let report = verify::cmd_verify(&cfg, faults, features)?;
            if cfg.output.is_some() {
                print!("{report}");
            }
            emit(cfg.output.as_deref(), &report.to_string())?;
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::PropertyFailure(report.failed().iter().map(|s| s.to_string()).collect()))
            }
        }
        Command::Bench {
            batch_sizes,
            strategies,
            gnuplot,
        } => {
            let csv = bench::cmd_bench(&cfg, batch_sizes, strategies)?;
            emit(cfg.output.as_deref(), &csv)?;
            if let Some(script) = gnuplot {
                let data = cfg.output.as_deref().ok_or_else(|| {
                    CliError::Config("--gnuplot needs --output so the script can read the CSV".into())
                })?;
                std::fs::write(script, bench::gnuplot_script(data))?;
            }
            Ok(())
        }
        Command::Demo => {
            let text = demo::cmd_demo(&cfg, features)?;
            emit(cfg.output.as_deref(), &text)
        }
    }
}
