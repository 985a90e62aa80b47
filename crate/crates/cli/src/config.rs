use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use tilecl::{Fault, StrategyKind};

use crate::CliError;

pub const DEFAULT_CEILING: u64 = 2 << 30;
/// Inverse of the usual 0.07 initial temperature.
pub const DEFAULT_SCALE: f64 = 1.0 / 0.07;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

fn strategy_arg(s: &str) -> Result<StrategyKind, String> {
    s.parse().map_err(|e: tilecl::Error| e.to_string())
}

fn fault_arg(s: &str) -> Result<Fault, String> {
    s.parse().map_err(|e: tilecl::Error| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "tilecl", version, about = "Tiled contrastive loss: verify, benchmark, demo")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the property suite against the dense reference.
    Verify {
        /// Deliberately break one kernel to check that the suite notices (repeatable).
        #[arg(long = "inject-fault", value_parser = fault_arg)]
        inject_fault: Vec<Fault>,
    },
    /// Sweep batch sizes and emit measured memory as CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "2048,4096,8192")]
        batch_sizes: Vec<usize>,
        /// Strategies to sweep (default: all four).
        #[arg(long, value_delimiter = ',', value_parser = strategy_arg)]
        strategies: Vec<StrategyKind>,
        /// Also write a gnuplot script plotting the CSV (needs --output).
        #[arg(long)]
        gnuplot: Option<PathBuf>,
    },
    /// One forward and backward run with a readable summary.
    Demo,
}

#[derive(Debug, Default, Args)]
pub struct Flags {
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub tile_rows: Option<usize>,
    #[arg(long, global = true)]
    pub tile_cols: Option<usize>,
    /// Row blocks processed concurrently inside a worker.
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// vanilla | local | cross | inf
    #[arg(long, global = true, value_parser = strategy_arg)]
    pub strategy: Option<StrategyKind>,
    #[arg(long, global = true)]
    pub scale: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub dtype: Option<Dtype>,
    #[arg(long, global = true)]
    pub bidirectional: bool,
    #[arg(long, global = true)]
    pub backbone_bytes: Option<u64>,
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    /// Per-worker ceiling on tracked loss-buffer bytes.
    #[arg(long, global = true)]
    pub mem_ceiling_bytes: Option<u64>,
    /// Binary feature file ("TLSE" header) used instead of synthetic features.
    #[arg(long, global = true)]
    pub features_file: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// TOML file with any of the options above; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

/// Same keys as the long flags, with underscores.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub batch_size: Option<usize>,
    pub dim: Option<usize>,
    pub workers: Option<usize>,
    pub tile_rows: Option<usize>,
    pub tile_cols: Option<usize>,
    pub parallelism: Option<usize>,
    pub strategy: Option<String>,
    pub scale: Option<f64>,
    pub seed: Option<u64>,
    pub dtype: Option<Dtype>,
    pub bidirectional: Option<bool>,
    pub backbone_bytes: Option<u64>,
    pub repeats: Option<usize>,
    pub mem_ceiling_bytes: Option<u64>,
    pub features_file: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)?;
        Self::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

impl FromStr for ConfigFile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        toml::from_str(s).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub batch_size: usize,
    pub dim: usize,
    pub workers: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub parallelism: usize,
    pub strategy: StrategyKind,
    pub scale: f64,
    pub seed: u64,
    pub dtype: Dtype,
    pub bidirectional: bool,
    pub backbone_bytes: u64,
    pub repeats: usize,
    pub mem_ceiling_bytes: u64,
    pub features_file: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            dim: 32,
            workers: 4,
            tile_rows: 32,
            tile_cols: 32,
            parallelism: 1,
            strategy: StrategyKind::MultiLevel,
            scale: DEFAULT_SCALE,
            seed: 0,
            dtype: Dtype::F64,
            bidirectional: false,
            backbone_bytes: 0,
            repeats: 1,
            mem_ceiling_bytes: DEFAULT_CEILING,
            features_file: None,
            output: None,
        }
    }
}

impl RunConfig {
    /// Flags over config file over defaults.
    pub fn resolve(flags: &Flags) -> Result<Self, CliError> {
        let file = match &flags.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        Self::merge(flags, file)
    }

    pub fn merge(flags: &Flags, file: ConfigFile) -> Result<Self, CliError> {
        let d = Self::default();
        let file_strategy = file.strategy.as_deref().map(str::parse::<StrategyKind>).transpose()?;
        Ok(Self {
            batch_size: flags.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
            dim: flags.dim.or(file.dim).unwrap_or(d.dim),
            workers: flags.workers.or(file.workers).unwrap_or(d.workers),
            tile_rows: flags.tile_rows.or(file.tile_rows).unwrap_or(d.tile_rows),
            tile_cols: flags.tile_cols.or(file.tile_cols).unwrap_or(d.tile_cols),
            parallelism: flags.parallelism.or(file.parallelism).unwrap_or(d.parallelism),
            strategy: flags.strategy.or(file_strategy).unwrap_or(d.strategy),
            scale: flags.scale.or(file.scale).unwrap_or(d.scale),
            seed: flags.seed.or(file.seed).unwrap_or(d.seed),
            dtype: flags.dtype.or(file.dtype).unwrap_or(d.dtype),
            bidirectional: flags.bidirectional || file.bidirectional.unwrap_or(d.bidirectional),
            backbone_bytes: flags.backbone_bytes.or(file.backbone_bytes).unwrap_or(d.backbone_bytes),
            repeats: flags.repeats.or(file.repeats).unwrap_or(d.repeats),
            mem_ceiling_bytes: flags.mem_ceiling_bytes.or(file.mem_ceiling_bytes).unwrap_or(d.mem_ceiling_bytes),
            features_file: flags.features_file.clone().or(file.features_file),
            output: flags.output.clone().or(file.output),
        })
    }

    /// Checks counts and scale; `ring` additionally requires `b` to split evenly over the
    /// workers (every ring run and every distributed strategy needs it).
    pub fn validate(&self, ring: bool) -> Result<(), CliError> {
        let counts = [
            ("batch-size", self.batch_size),
            ("dim", self.dim),
            ("workers", self.workers),
            ("tile-rows", self.tile_rows),
            ("tile-cols", self.tile_cols),
            ("parallelism", self.parallelism),
            ("repeats", self.repeats),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::Config(format!("--{name} must be at least 1")));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(CliError::Config(format!("--scale must be positive and finite, got {}", self.scale)));
        }
        if ring && !self.batch_size.is_multiple_of(self.workers) {
            return Err(CliError::Config(format!(
                "batch size {} is not divisible by worker count {}",
                self.batch_size, self.workers
            )));
        }
        Ok(())
    }

    pub fn shard_size(&self) -> usize {
        self.batch_size / self.workers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let flags = Flags {
            batch_size: Some(16),
            ..Flags::default()
        };
        let file: ConfigFile = "batch_size = 64\ndim = 3\nstrategy = \"cross\"\nbidirectional = true"
            .parse()
            .unwrap();
        let cfg = RunConfig::merge(&flags, file).unwrap();
        assert_eq!((cfg.batch_size, cfg.dim, cfg.strategy), (16, 3, StrategyKind::CrossTile));
        assert!(cfg.bidirectional);
        assert_eq!(cfg.workers, 4);
    }

    #[test]
    fn unknown_keys_and_strategies_are_rejected() {
        assert!("batchsize = 3".parse::<ConfigFile>().is_err());
        let file: ConfigFile = "strategy = \"clip\"".parse().unwrap();
        assert!(matches!(RunConfig::merge(&Flags::default(), file), Err(CliError::Core(_))));
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig {
            batch_size: 7,
            workers: 2,
            ..RunConfig::default()
        };
        assert!(cfg.validate(false).is_ok());
        let err = cfg.validate(true).unwrap_err().to_string();
        assert!(err.contains('7') && err.contains('2'), "{err}");
        cfg.batch_size = 8;
        cfg.scale = 0.0;
        assert!(cfg.validate(true).is_err());
    }
}
