use crate::core_tiles::TileConfig;
use crate::error::{Error, Result};
use crate::features::generate_features;
use crate::matrix::Matrix;
use crate::oracle::dense_block;
use crate::real::Real;
use crate::ring_engine::{backward_ring, forward_ring, partition_tracked, RingConfig, ShardAssignment};

use super::report::{MemoryReport, WorkerMemory};
use super::tracker::{Category, MemoryTracker};
use super::{analytic_loss_elements, StrategyKind};

#[derive(Clone, Debug, PartialEq)]
pub struct MeasureConfig {
    pub strategy: StrategyKind,
    pub b: usize,
    pub n: usize,
    pub c: usize,
    pub t_r: usize,
    pub t_c: usize,
    /// Row blocks processed concurrently inside a worker (`MultiLevel` only).
    pub parallelism: usize,
    /// 4 for `f32`, 8 for `f64`.
    pub dtype_width: usize,
    pub seed: u64,
    pub scale: f64,
    /// Per-worker ceiling on live loss-buffer bytes.
    pub loss_ceiling: Option<u64>,
    pub backbone_bytes: u64,
}

impl MeasureConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        strategy: StrategyKind,
        b: usize,
        n: usize,
        c: usize,
        t_r: usize,
        t_c: usize,
        dtype_width: usize,
        seed: u64,
    ) -> Self {
        Self {
            strategy,
            b,
            n,
            c,
            t_r,
            t_c,
            parallelism: 1,
            dtype_width,
            seed,
            scale: 1.0,
            loss_ceiling: None,
            backbone_bytes: 0,
        }
    }
}

/// Runs forward and backward of `cfg.strategy` on synthetic features under per-worker
/// trackers and reports the measured peaks.
pub fn measure_run(cfg: &MeasureConfig) -> Result<MemoryReport> {
    let analytic = analytic_loss_elements(cfg.strategy, cfg.b, cfg.n, cfg.t_r, cfg.t_c, cfg.parallelism)?;
    match cfg.dtype_width {
        4 => run::<f32>(cfg, analytic),
        8 => run::<f64>(cfg, analytic),
        w => Err(Error::Config(format!("dtype width must be 4 or 8 bytes, got {w}"))),
    }
}

fn run<T: Real>(cfg: &MeasureConfig, analytic: u64) -> Result<MemoryReport> {
    let (images, texts) = generate_features::<T>(cfg.seed, cfg.b, cfg.c)?;
    let scale = T::of(cfg.scale);
    let root = MemoryTracker::new();
    let workers = if cfg.strategy.is_distributed() { cfg.n } else { 1 };
    let trackers: Vec<MemoryTracker> = (0..workers)
        .map(|_| root.child_with_loss_ceiling(cfg.loss_ceiling))
        .collect();

    let loss = match cfg.strategy {
        StrategyKind::Vanilla => {
            let t = &trackers[0];
            let _data = t.scope(Category::Data);
            let imgs = Matrix::from_view(images.view())?;
            let txts = Matrix::from_view(texts.view())?;
            let (loss, grads) = crate::oracle::naive_loss_and_grads(&imgs, &txts, scale)?;
            drop(grads);
            loss
        }
        StrategyKind::LocalLoss => local_loss(&images, &texts, &trackers, scale)?,
        StrategyKind::CrossTile | StrategyKind::MultiLevel => {
            let shard = ShardAssignment::new(cfg.b, cfg.n)?.shard_size;
            let tiles = if cfg.strategy == StrategyKind::CrossTile {
                TileConfig::new(shard, shard)?
            } else {
                TileConfig::new(cfg.t_r, cfg.t_c)?.with_parallelism(cfg.parallelism)
            };
            let ring = RingConfig::new(tiles, cfg.scale)?;
            let mut ws = partition_tracked(&images, &texts, &trackers)?;
            let fwd = forward_ring(&mut ws, &ring)?;
            let grads = backward_ring(&mut ws, &ring)?;
            drop(grads);
            fwd.loss
        }
    };

    for t in trackers.iter().chain(std::iter::once(&root)) {
        t.check()?;
    }
    let peaks = |t: &MemoryTracker| WorkerMemory {
        data_bytes: t.peak(Category::Data),
        loss_buffer_bytes: t.peak(Category::Loss),
        gradient_temp_bytes: t.peak(Category::Gradient),
    };
    let per_worker: Vec<WorkerMemory> = trackers.iter().map(peaks).collect();
    let max_of = |f: fn(&WorkerMemory) -> u64| per_worker.iter().map(f).max().unwrap_or(0);
    Ok(MemoryReport {
        strategy: cfg.strategy,
        b: cfg.b,
        n: cfg.n,
        c: cfg.c,
        t_r: cfg.t_r,
        t_c: cfg.t_c,
        dtype_width: T::WIDTH,
        data_bytes: max_of(|m| m.data_bytes),
        loss_buffer_bytes: max_of(|m| m.loss_buffer_bytes),
        gradient_temp_bytes: max_of(|m| m.gradient_temp_bytes),
        aggregate: peaks(&root),
        per_worker,
        analytic_loss_elements: analytic,
        backbone_bytes: cfg.backbone_bytes,
        loss: loss.to_f64_lossy(),
    })
}

/// Each worker gathers every text and materializes its `b_s x b` block of the similarity
/// matrix; text gradients are then reduced across workers.
fn local_loss<T: Real>(
    images: &Matrix<T>,
    texts: &Matrix<T>,
    trackers: &[MemoryTracker],
    scale: T,
) -> Result<T> {
    let n = trackers.len();
    let assignment = ShardAssignment::new(images.rows(), n)?;
    let mut gap = T::zero();
    let mut resident = Vec::with_capacity(n);
    for (w, t) in trackers.iter().enumerate() {
        let _data = t.scope(Category::Data);
        let shard = Matrix::from_view(images.view().slice_rows(assignment.rows(w))?)?;
        let gathered = Matrix::from_view(texts.view())?;
        let block = dense_block(shard.view(), gathered.view(), assignment.rows(w).start, scale)?;
        gap = gap + block.gap_sum;
        resident.push((shard, gathered));
    }
    Ok(gap / T::of(assignment.batch as f64))
}
