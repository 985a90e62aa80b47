//! Tile-based contrastive loss.
//!
//! The image-to-text contrastive loss `L = (1/b) sum_i (log sum_j exp(x_ij) - x_ii)` is
//! computed without materializing the `b x b` similarity matrix: [`core_tiles`] streams
//! per-tile log-sum-exp values into a running accumulator and recomputes tiles in the
//! backward pass, [`ring_engine`] spreads rows over a simulated ring of workers that pass text
//! shards (and, backward, gradient caches) to their neighbours, and [`memory_model`]
//! measures what each strategy keeps alive. [`oracle`] is the dense reference.

pub mod core_tiles;
pub mod error;
pub mod faults;
pub mod features;
pub mod matrix;
pub mod memory_model;
pub mod oracle;
pub mod real;
pub mod ring_engine;

pub use core_tiles::{GradPair, LseAccumulator, TileConfig};
pub use error::{Error, Result};
pub use faults::{Fault, Faults};
pub use matrix::{FeatureMatrix, Matrix, MatrixView};
pub use memory_model::{MemoryReport, MemoryTracker, StrategyKind};
pub use real::Real;
pub use ring_engine::{RingConfig, Scheduler};
