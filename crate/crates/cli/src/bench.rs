use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use tilecl::memory_model::{measure_run, MeasureConfig, CSV_HEADER};
use tilecl::{Error, MemoryReport, StrategyKind};

use crate::{CliError, RunConfig};

/// Extra columns appended to the memory report's CSV layout.
pub const BENCH_HEADER_SUFFIX: &str = ",elapsed_ms,status";

pub fn header() -> String {
    format!("{CSV_HEADER}{BENCH_HEADER_SUFFIX}")
}

fn measure_config(cfg: &RunConfig, strategy: StrategyKind, b: usize) -> MeasureConfig {
    let mut m = MeasureConfig::new(
        strategy,
        b,
        cfg.workers,
        cfg.dim,
        cfg.tile_rows,
        cfg.tile_cols,
        cfg.dtype.width(),
        cfg.seed,
    );
    m.parallelism = cfg.parallelism;
    m.scale = cfg.scale;
    m.loss_ceiling = Some(cfg.mem_ceiling_bytes);
    m.backbone_bytes = cfg.backbone_bytes;
    m
}

/// One sweep point: the report of the fastest of `repeats` runs, or `None` when the run hit
/// the memory ceiling.
pub fn bench_point(cfg: &RunConfig, strategy: StrategyKind, b: usize) -> Result<(Option<MemoryReport>, f64), CliError> {
    let m = measure_config(cfg, strategy, b);
    let mut best = f64::INFINITY;
    let mut report = None;
    for _ in 0..cfg.repeats {
        let start = Instant::now();
        let outcome = measure_run(&m);
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
        match outcome {
            Ok(r) => report = Some(r),
            Err(Error::OutOfMemory { .. }) => return Ok((None, best)),
            Err(e) => return Err(e.into()),
        }
    }
    Ok((report, best))
}

/// Validates the whole sweep before measuring anything, then emits one CSV row per
/// `(strategy, b)`.
pub fn cmd_bench(cfg: &RunConfig, batch_sizes: &[usize], strategies: &[StrategyKind]) -> Result<String, CliError> {
    cfg.validate(false)?;
    if batch_sizes.is_empty() {
        return Err(CliError::Config("--batch-sizes is empty".into()));
    }
    if batch_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Config(format!("--batch-sizes must be strictly ascending, got {batch_sizes:?}")));
    }
    let strategies = if strategies.is_empty() { &StrategyKind::ALL[..] } else { strategies };
    for &s in strategies {
        for &b in batch_sizes {
            if b == 0 || (s.is_distributed() && b % cfg.workers != 0) {
                return Err(CliError::Config(format!(
                    "batch size {b} is not divisible by worker count {} (strategy {s})",
                    cfg.workers
                )));
            }
        }
    }

    let mut out = header();
    out.push('\n');
    for &s in strategies {
        for &b in batch_sizes {
            let (report, elapsed) = bench_point(cfg, s, b)?;
            match report {
                Some(r) => writeln!(out, "{},{elapsed:.3},ok", r.csv_row()),
                None => writeln!(
                    out,
                    "{s},{b},{},{},{},{},{},,,,{elapsed:.3},oom",
                    cfg.workers,
                    cfg.dim,
                    cfg.tile_rows,
                    cfg.tile_cols,
                    cfg.dtype.width()
                ),
            }
            .expect("writing to a String");
        }
    }
    Ok(out)
}

/// Gnuplot script drawing per-worker loss-buffer peak against batch size, log-log, one
/// line per strategy, from a CSV written by [`cmd_bench`].
pub fn gnuplot_script(csv: &Path) -> String {
    let file = csv.display();
    let mut s = String::from(
        "set datafile separator ','\nset logscale xy 2\nset key top left\nset xlabel 'batch size'\nset ylabel 'loss buffer peak per worker (bytes)'\n",
    );
    let plots: Vec<String> = StrategyKind::ALL
        .iter()
        .map(|k| {
            format!(
                "'{file}' using (strcol(1) eq '{k}' && strcol(12) eq 'ok' ? $2 : NaN):9 with linespoints title '{k}'"
            )
        })
        .collect();
    s.push_str("plot ");
    s.push_str(&plots.join(", \\\n     "));
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        RunConfig {
            dim: 4,
            workers: 2,
            tile_rows: 4,
            tile_cols: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn one_row_per_strategy_and_batch() {
        let csv = cmd_bench(&cfg(), &[16, 32, 64], &[]).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], header());
        assert_eq!(lines.len(), 1 + 12);
        let cols = lines[0].split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == cols));
        assert!(lines[1..].iter().all(|l| l.ends_with(",ok")));
    }

    #[test]
    fn ceiling_produces_oom_rows_without_aborting() {
        let mut c = cfg();
        c.mem_ceiling_bytes = 40 * 40 * 8;
        let csv = cmd_bench(&c, &[16, 64], &[StrategyKind::Vanilla, StrategyKind::MultiLevel]).unwrap();
        let status: Vec<_> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
        assert_eq!(status, ["ok", "oom", "ok", "ok"]);
        assert_eq!(csv.lines().nth(2).unwrap().split(',').count(), header().split(',').count());
    }

    #[test]
    fn sweep_is_validated_up_front() {
        assert!(matches!(cmd_bench(&cfg(), &[16, 15], &[]), Err(CliError::Config(_))));
        assert!(matches!(cmd_bench(&cfg(), &[16, 33], &[StrategyKind::CrossTile]), Err(CliError::Config(_))));
        assert!(cmd_bench(&cfg(), &[7], &[StrategyKind::Vanilla]).is_ok());
    }

    #[test]
    fn gnuplot_mentions_every_strategy() {
        let s = gnuplot_script(Path::new("out.csv"));
        assert!(StrategyKind::ALL.iter().all(|k| s.contains(&format!("title '{k}'"))));
    }
}
