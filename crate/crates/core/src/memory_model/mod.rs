//! Memory complexity of the four loss strategies, analytic and measured.
//!
//! | strategy     | live similarity elements per worker |
//! |--------------|-------------------------------------|
//! | `Vanilla`    | `b^2`                               |
//! | `LocalLoss`  | `b^2 / n`                           |
//! | `CrossTile`  | `b^2 / n^2`                         |
//! | `MultiLevel` | `b / n + p * t_r * t_c`             |

pub mod tracker;

mod measure;
mod report;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use measure::{measure_run, MeasureConfig};
pub use report::{MemoryReport, WorkerMemory, CSV_HEADER};
pub use tracker::{Category, MemoryTracker};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    /// Every device materializes the full `b x b` similarity matrix.
    Vanilla,
    /// Each device computes its own rows against all gathered texts.
    LocalLoss,
    /// Ring over devices, one shard-by-shard block at a time.
    CrossTile,
    /// Ring over devices plus in-device tiling with a streaming LSE.
    MultiLevel,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Vanilla,
        StrategyKind::LocalLoss,
        StrategyKind::CrossTile,
        StrategyKind::MultiLevel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Vanilla => "vanilla",
            StrategyKind::LocalLoss => "local",
            StrategyKind::CrossTile => "cross",
            StrategyKind::MultiLevel => "inf",
        }
    }

    pub fn is_distributed(self) -> bool {
        self != StrategyKind::Vanilla
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}` (vanilla|local|cross|inf)")))
    }
}

/// Analytic loss-buffer elements, split into the part resident for the whole pass and the
/// transient tile working set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossElements {
    /// Buffers whose size grows with the batch: the similarity matrix or block for the
    /// quadratic strategies, the per-row LSE vector for `MultiLevel`.
    pub resident: u64,
    /// `p * t_r * t_c` for `MultiLevel`, zero otherwise.
    pub tiles: u64,
}

impl LossElements {
    pub fn total(&self) -> u64 {
        self.resident + self.tiles
    }
}

/// Peak live similarity-related elements per worker, split by role. Tile sizes and the
/// parallelism degree are clamped to what a shard can actually hold.
pub fn analytic_loss_breakdown(
    strategy: StrategyKind,
    b: usize,
    n: usize,
    t_r: usize,
    t_c: usize,
    parallelism: usize,
) -> Result<LossElements> {
    if b == 0 || n == 0 {
        return Err(Error::Config("batch size and worker count must be at least 1".into()));
    }
    if strategy.is_distributed() && !b.is_multiple_of(n) {
        return Err(Error::Config(format!(
            "batch size {b} is not divisible by worker count {n}"
        )));
    }
    let (b64, n64) = (b as u64, n as u64);
    Ok(match strategy {
        StrategyKind::Vanilla => LossElements { resident: b64 * b64, tiles: 0 },
        StrategyKind::LocalLoss => LossElements { resident: b64 * b64 / n64, tiles: 0 },
        StrategyKind::CrossTile => LossElements { resident: (b64 / n64) * (b64 / n64), tiles: 0 },
        StrategyKind::MultiLevel => {
            if t_r == 0 || t_c == 0 {
                return Err(Error::Config("tile sizes must be at least 1".into()));
            }
            let b_s = b / n;
            let (tr, tc) = (t_r.min(b_s), t_c.min(b_s));
            let p = parallelism.max(1).min(b_s.div_ceil(tr));
            LossElements {
                resident: b_s as u64,
                tiles: (p * tr * tc) as u64,
            }
        }
    })
}

/// Total of [`analytic_loss_breakdown`].
pub fn analytic_loss_elements(
    strategy: StrategyKind,
    b: usize,
    n: usize,
    t_r: usize,
    t_c: usize,
    parallelism: usize,
) -> Result<u64> {
    analytic_loss_breakdown(strategy, b, n, t_r, t_c, parallelism).map(|e| e.total())
}

/// `data + max(loss, backbone)`.
pub fn peak_total(data_bytes: u64, loss_bytes: u64, backbone_bytes: u64) -> u64 {
    data_bytes + loss_bytes.max(backbone_bytes)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_ignores_workers() {
        for n in [1, 3, 8] {
            assert_eq!(analytic_loss_elements(StrategyKind::Vanilla, 1024, n, 1, 1, 1).unwrap(), 1 << 20);
        }
    }

    #[test]
    fn ladder() {
        let e = |k| analytic_loss_elements(k, 64, 4, 4, 2, 1).unwrap();
        assert_eq!(e(StrategyKind::LocalLoss), 64 * 64 / 4);
        assert_eq!(e(StrategyKind::CrossTile), 16 * 16);
        assert_eq!(e(StrategyKind::MultiLevel), 16 + 8);
    }

    #[test]
    fn batch_doubling_ratios() {
        let ratio = |k| {
            let lo = analytic_loss_breakdown(k, 32 * 1024, 8, 32, 32, 1).unwrap();
            let hi = analytic_loss_breakdown(k, 64 * 1024, 8, 32, 32, 1).unwrap();
            (hi.resident as f64 / lo.resident as f64, hi.total() as f64 / lo.total() as f64)
        };
        assert_eq!(ratio(StrategyKind::MultiLevel).0, 2.0);
        assert_eq!(ratio(StrategyKind::LocalLoss), (4.0, 4.0));
        assert!(ratio(StrategyKind::MultiLevel).1 < 2.0);
    }

    #[test]
    fn tiles_and_parallelism_are_clamped_to_the_shard() {
        assert_eq!(analytic_loss_elements(StrategyKind::MultiLevel, 8, 2, 64, 3, 1).unwrap(), 4 + 4 * 3);
        assert_eq!(analytic_loss_elements(StrategyKind::MultiLevel, 16, 1, 4, 4, 99).unwrap(), 16 + 4 * 16);
    }

    #[test]
    fn divisibility_for_distributed_strategies() {
        assert!(matches!(
            analytic_loss_elements(StrategyKind::CrossTile, 7, 2, 1, 1, 1),
            Err(Error::Config(_))
        ));
        assert!(analytic_loss_elements(StrategyKind::Vanilla, 7, 2, 1, 1, 1).is_ok());
    }

    #[test]
    fn peak_total_examples() {
        assert_eq!(peak_total(0, 5, 3), 5);
        assert_eq!(peak_total(2, 3, 7), 9);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<_> = [2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x * x)).collect();
        assert!((log_log_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("clip".parse::<StrategyKind>().is_err());
    }
}
