use std::fmt::Write as _;

use tilecl::features::generate_features;
use tilecl::memory_model::{measure_run, MeasureConfig};
use tilecl::oracle::{bidirectional_grads, naive_loss, naive_loss_and_grads};
use tilecl::ring_engine::run_ring;
use tilecl::{Error, GradPair, Matrix, Real, RingConfig, StrategyKind, TileConfig};

use crate::{CliError, Dtype, Features, RunConfig};

/// Numbers from one forward and backward run, widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoRun {
    pub loss: f64,
    pub loss_image_to_text: f64,
    pub loss_text_to_image: Option<f64>,
    pub lse: Vec<f64>,
    pub d_image_norm: f64,
    pub d_text_norm: f64,
}

fn norm<T: Real>(m: &Matrix<T>) -> f64 {
    m.as_slice().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

fn widen<T: Real>(loss: T, l_i: T, l_t: Option<T>, lse: &[T], grads: &GradPair<T>) -> DemoRun {
    DemoRun {
        loss: loss.to_f64_lossy(),
        loss_image_to_text: l_i.to_f64_lossy(),
        loss_text_to_image: l_t.map(Real::to_f64_lossy),
        lse: lse.iter().map(|v| v.to_f64_lossy()).collect(),
        d_image_norm: norm(&grads.d_image),
        d_text_norm: norm(&grads.d_text),
    }
}

/// Vanilla runs the dense reference; the distributed strategies run the ring, with
/// shard-sized tiles for `cross` and `local` and the configured tiles for `inf`.
pub fn demo_run<T: Real>(cfg: &RunConfig, images: &Matrix<T>, texts: &Matrix<T>) -> Result<DemoRun, CliError> {
    let scale = T::of(cfg.scale);
    if cfg.strategy == StrategyKind::Vanilla {
        let (l_i, grads) = naive_loss_and_grads(images, texts, scale)?;
        let lse = naive_loss(images, texts, scale)?.lse;
        if !cfg.bidirectional {
            return Ok(widen(l_i, l_i, None, &lse, &grads));
        }
        let l_t = naive_loss(texts, images, scale)?.loss;
        let grads = bidirectional_grads(images, texts, scale)?;
        return Ok(widen((l_i + l_t) * T::of(0.5), l_i, Some(l_t), &lse, &grads));
    }
    let tiles = if cfg.strategy == StrategyKind::MultiLevel {
        TileConfig::new(cfg.tile_rows, cfg.tile_cols)?.with_parallelism(cfg.parallelism)
    } else {
        TileConfig::new(cfg.shard_size(), cfg.shard_size())?
    };
    let run = run_ring(images, texts, cfg.workers, &RingConfig::new(tiles, cfg.scale)?, cfg.bidirectional)?;
    Ok(widen(run.loss, run.loss_image_to_text, run.loss_text_to_image, &run.lse, &run.grads))
}

pub fn cmd_demo(cfg: &RunConfig, features: Option<Features>) -> Result<String, CliError> {
    cfg.validate(cfg.strategy.is_distributed())?;
    let from_file = features.is_some();
    let (images, texts) = match features {
        Some(f) => f,
        None => generate_features::<f64>(cfg.seed, cfg.batch_size, cfg.dim)?,
    };
    let run = match cfg.dtype {
        Dtype::F64 => demo_run(cfg, &images, &texts)?,
        Dtype::F32 => {
            let cast = |m: &Matrix<f64>| Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) as f32);
            demo_run(cfg, &cast(&images)?, &cast(&texts)?)?
        }
    };

    let mut out = String::new();
    let w = &mut out;
    let n = if cfg.strategy.is_distributed() { cfg.workers } else { 1 };
    writeln!(
        w,
        "strategy {} | b={} c={} n={} tile={}x{} p={} scale={} dtype={:?} seed={}",
        cfg.strategy, cfg.batch_size, cfg.dim, n, cfg.tile_rows, cfg.tile_cols, cfg.parallelism, cfg.scale, cfg.dtype, cfg.seed
    )
    .unwrap();
    if let Some(l_t) = run.loss_text_to_image {
        writeln!(w, "loss image->text  {:.12}", run.loss_image_to_text).unwrap();
        writeln!(w, "loss text->image  {l_t:.12}").unwrap();
    }
    writeln!(w, "loss              {:.12}", run.loss).unwrap();
    writeln!(w, "|dL/dI|           {:.12}", run.d_image_norm).unwrap();
    writeln!(w, "|dL/dT|           {:.12}", run.d_text_norm).unwrap();
    writeln!(w, "{:<8} {:<12} {:>14} {:>14} {:>14}", "worker", "rows", "lse min", "lse mean", "lse max").unwrap();
    let shard = cfg.batch_size / n;
    for (k, chunk) in run.lse.chunks(shard).enumerate() {
        let min = chunk.iter().copied().fold(f64::INFINITY, f64::min);
        let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        let rows = format!("{}..{}", k * shard, (k + 1) * shard);
        writeln!(w, "{k:<8} {rows:<12} {min:>14.6} {mean:>14.6} {max:>14.6}").unwrap();
    }

    let mut m = MeasureConfig::new(
        cfg.strategy,
        cfg.batch_size,
        n,
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
    writeln!(w).unwrap();
    if from_file {
        writeln!(w, "memory (measured on synthetic features of the same shape)").unwrap();
    }
    match measure_run(&m) {
        Ok(report) => writeln!(w, "{report}").unwrap(),
        Err(e @ Error::OutOfMemory { .. }) => writeln!(w, "memory: {e}").unwrap(),
        Err(e) => return Err(e.into()),
    }
    Ok(out)
}
