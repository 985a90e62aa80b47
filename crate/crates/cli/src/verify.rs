//! Property suite behind `tilecl verify`: every check compares the tiled and ring engines
//! against the dense reference (or against themselves under a change that must not matter)
//! and reports the worst error seen.

use std::fmt;
use std::io::Cursor;
use std::thread;

use rand::prelude::*;
use tilecl::core_tiles::local_lse_forward;
use tilecl::features::{generate_features, read_features, write_features};
use tilecl::memory_model::{measure_run, MeasureConfig};
use tilecl::oracle::{
    bidirectional_grads, bidirectional_loss, finite_diff_grad, naive_grads, naive_loss,
    shifted_logits_loss_and_grads, unshifted_lse,
};
use tilecl::ring_engine::{check_schedule, coverage, forward_ring, partition, run_ring, DelayPlan, RingRun};
use tilecl::{Faults, Matrix, MemoryTracker, RingConfig, StrategyKind, TileConfig};
use tilecl::memory_model::Category;

use crate::{CliError, Features, RunConfig};

pub const LSE_EQUIVALENCE: &str = "lse-equivalence";
pub const RING_SCHEDULE: &str = "ring-schedule";
pub const STABILITY: &str = "stability";

const RANDOM_INSTANCES: usize = 12;
const STABLE_MAGNITUDE: f64 = 5000.0;

/// One feature pair plus the engine settings it is checked under.
pub struct Instance {
    pub seed: u64,
    pub from_file: bool,
    pub b: usize,
    pub c: usize,
    pub n: usize,
    pub t_r: usize,
    pub t_c: usize,
    pub scale: f64,
    pub images: Matrix<f64>,
    pub texts: Matrix<f64>,
}

impl Instance {
    fn generated(seed: u64, b: usize, c: usize, n: usize, t: (usize, usize), scale: f64) -> tilecl::Result<Self> {
        let (images, texts) = generate_features(seed, b, c)?;
        Ok(Self {
            seed,
            from_file: false,
            b,
            c,
            n,
            t_r: t.0,
            t_c: t.1,
            scale,
            images,
            texts,
        })
    }

    /// Parameters and a command line reproducing this instance.
    pub fn repro(&self) -> String {
        let source = if self.from_file {
            "--features-file <file>".to_string()
        } else {
            format!("--seed {} --batch-size {} --dim {}", self.seed, self.b, self.c)
        };
        format!(
            "seed={} b={} c={} n={} t_r={} t_c={} scale={} (rerun: tilecl verify {source} --workers {} --tile-rows {} --tile-cols {} --scale {})",
            self.seed, self.b, self.c, self.n, self.t_r, self.t_c, self.scale, self.n, self.t_r, self.t_c, self.scale
        )
    }

    fn tiles(&self, faults: Faults) -> tilecl::Result<TileConfig> {
        Ok(TileConfig::new(self.t_r, self.t_c)?.with_faults(faults))
    }

    fn ring(&self, tiles: TileConfig, n: usize, bidirectional: bool) -> tilecl::Result<RingRun<f64>> {
        run_ring(&self.images, &self.texts, n, &RingConfig::new(tiles, self.scale)?, bidirectional)
    }
}

/// The instance described by the configuration followed by small random ones.
pub fn instances(cfg: &RunConfig, features: Option<Features>) -> Result<Vec<Instance>, CliError> {
    let tiles = (cfg.tile_rows, cfg.tile_cols);
    let main = match features {
        Some((images, texts)) => Instance {
            seed: cfg.seed,
            from_file: true,
            b: images.rows(),
            c: images.cols(),
            n: cfg.workers,
            t_r: tiles.0,
            t_c: tiles.1,
            scale: cfg.scale,
            images,
            texts,
        },
        None => Instance::generated(cfg.seed, cfg.batch_size, cfg.dim, cfg.workers, tiles, cfg.scale)?,
    };
    let mut out = vec![main];
    let mut rng = StdRng::seed_from_u64(cfg.seed ^ 0x7e57_c0de);
    for _ in 0..RANDOM_INSTANCES {
        let n = *[1, 2, 3, 4].choose(&mut rng).unwrap();
        let b = n * rng.gen_range(1..=6);
        let c = *[1, 3, 8].choose(&mut rng).unwrap();
        let t = [1, 2, 3, 5, 16];
        let tiles = (*t.choose(&mut rng).unwrap(), *t.choose(&mut rng).unwrap());
        let scale = match rng.gen_range(0..3) {
            0 => cfg.scale,
            1 => 1.0,
            _ => rng.gen_range(0.5..40.0),
        };
        out.push(Instance::generated(rng.gen(), b, c, n, tiles, scale)?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PropertyResult {
    pub name: &'static str,
    pub max_error: f64,
    /// Human-readable acceptance bound.
    pub bound: String,
    pub checked: usize,
    pub failure: Option<String>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(PropertyResult::passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.results.iter().filter(|r| !r.passed()).map(|r| r.name).collect()
    }

    pub fn get(&self, name: &str) -> Option<&PropertyResult> {
        self.results.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(
                f,
                "{} {:<24} max error {:<10.3e} bound {:<12} ({} checked)",
                if r.passed() { "PASS" } else { "FAIL" },
                r.name,
                r.max_error,
                r.bound,
                r.checked
            )?;
            if let Some(why) = &r.failure {
                writeln!(f, "     {why}")?;
            }
        }
        let failed = self.failed();
        if failed.is_empty() {
            writeln!(f, "all {} properties passed", self.results.len())
        } else {
            writeln!(f, "{} of {} properties failed: {}", failed.len(), self.results.len(), failed.join(", "))
        }
    }
}

/// `max |a - r| / max |r|`; NaN or a non-finite difference counts as infinite error.
pub fn rel_err(a: &[f64], r: &[f64]) -> f64 {
    if a.len() != r.len() {
        return f64::INFINITY;
    }
    let num = a.iter().zip(r).map(|(x, y)| (x - y).abs()).fold(0.0, |m: f64, d| if d.is_nan() { f64::NAN } else { m.max(d) });
    if num == 0.0 {
        return 0.0;
    }
    if !num.is_finite() {
        return f64::INFINITY;
    }
    let den = r.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Gradient error against a finite-difference estimate. Below `FD_FLOOR` the reference
/// is treated as zero, so a gradient that vanishes identically is checked to an absolute
/// `tol * FD_FLOOR` instead of a relative error that has no meaning there.
pub fn fd_err(a: &tilecl::GradPair<f64>, fd: &tilecl::GradPair<f64>) -> f64 {
    let one = |x: &[f64], r: &[f64]| {
        let num = x.iter().zip(r).map(|(p, q)| (p - q).abs()).fold(0.0, |m: f64, d| if d.is_nan() { f64::INFINITY } else { m.max(d) });
        let peak = r.iter().map(|v| v.abs()).fold(0.0, f64::max);
        num / peak.max(FD_FLOOR)
    };
    one(a.d_image.as_slice(), fd.d_image.as_slice()).max(one(a.d_text.as_slice(), fd.d_text.as_slice()))
}

pub const FD_FLOOR: f64 = 1e-3;

fn rel_scalar(a: f64, r: f64) -> f64 {
    rel_err(&[a], &[r])
}

fn grads_err(a: &tilecl::GradPair<f64>, r: &tilecl::GradPair<f64>) -> f64 {
    rel_err(a.d_image.as_slice(), r.d_image.as_slice()).max(rel_err(a.d_text.as_slice(), r.d_text.as_slice()))
}

/// Runs `check` on each instance and keeps the worst error and the first failure.
fn over<'a>(
    name: &'static str,
    tol: f64,
    items: impl IntoIterator<Item = &'a Instance>,
    mut check: impl FnMut(&Instance) -> tilecl::Result<f64>,
) -> PropertyResult {
    let mut result = PropertyResult {
        name,
        max_error: 0.0,
        bound: format!("{tol:.0e}"),
        checked: 0,
        failure: None,
    };
    for inst in items {
        result.checked += 1;
        let err = match check(inst) {
            Ok(e) if e.is_nan() => f64::INFINITY,
            Ok(e) => e,
            Err(e) => {
                result.max_error = f64::INFINITY;
                result.failure.get_or_insert_with(|| format!("{e}; {}", inst.repro()));
                continue;
            }
        };
        result.max_error = result.max_error.max(err);
        if err > tol && result.failure.is_none() {
            result.failure = Some(format!("error {err:.3e} > {tol:.0e}; {}", inst.repro()));
        }
    }
    result
}

fn single(name: &'static str, bound: &str, outcome: Result<(f64, usize), String>) -> PropertyResult {
    match outcome {
        Ok((max_error, checked)) => PropertyResult {
            name,
            max_error,
            bound: bound.into(),
            checked,
            failure: None,
        },
        Err(why) => PropertyResult {
            name,
            max_error: f64::INFINITY,
            bound: bound.into(),
            checked: 1,
            failure: Some(why),
        },
    }
}

fn permuted_rows(m: &Matrix<f64>, order: &[usize]) -> tilecl::Result<Matrix<f64>> {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(order[r], c))
}

/// The scale at which the largest `|<I_i, T_j>|` of `inst` reaches [`STABLE_MAGNITUDE`].
pub fn stability_scale(images: &Matrix<f64>, texts: &Matrix<f64>) -> f64 {
    let mut peak = 0.0f64;
    for i in 0..images.rows() {
        for j in 0..texts.rows() {
            let d: f64 = images.row(i).iter().zip(texts.row(j)).map(|(a, b)| a * b).sum();
            peak = peak.max(d.abs());
        }
    }
    STABLE_MAGNITUDE / peak
}

/// Instances for the stability check. Random features keep most rows' positive pair away
/// from the row maximum, so the loss stays well above the rounding floor of logits this
/// large; with b = 1 or fully aligned pairs the loss itself would be pure cancellation.
fn stability_instances(cfg: &RunConfig, main: &Instance) -> tilecl::Result<Vec<Instance>> {
    let mut rng = StdRng::seed_from_u64(cfg.seed ^ 0x5ab1e);
    let mut out = Vec::new();
    for n in [1, 2, 4] {
        let t = [1, 3, 5, 16];
        let tiles = (*t.choose(&mut rng).unwrap(), *t.choose(&mut rng).unwrap());
        let mut inst = Instance::generated(rng.gen(), 16, 8, n, tiles, 1.0)?;
        inst.scale = stability_scale(&inst.images, &inst.texts);
        out.push(inst);
    }
    if main.b >= 8 {
        let mut inst = Instance {
            seed: main.seed,
            from_file: main.from_file,
            b: main.b,
            c: main.c,
            n: main.n,
            t_r: main.t_r,
            t_c: main.t_c,
            scale: 1.0,
            images: main.images.clone(),
            texts: main.texts.clone(),
        };
        inst.scale = stability_scale(&inst.images, &inst.texts);
        out.push(inst);
    }
    Ok(out)
}

fn divisor_workers(b: usize) -> Vec<usize> {
    [1, 2, 4, 8].into_iter().filter(|n| b.is_multiple_of(*n)).collect()
}

/// Runs the full suite. `faults` are threaded into every tiled and ring computation.
pub fn cmd_verify(cfg: &RunConfig, faults: Faults, features: Option<Features>) -> Result<VerifyReport, CliError> {
    cfg.validate(true)?;
    let all = instances(cfg, features)?;
    let small: Vec<&Instance> = all.iter().filter(|i| i.b <= 16).collect();
    let main = &all[0];
    let mut results = Vec::new();

    results.push(over(LSE_EQUIVALENCE, 1e-12, &all, |x| {
        let tiled = local_lse_forward(x.images.view(), x.texts.view(), &x.tiles(faults)?, x.scale)?;
        Ok(rel_err(tiled.values(), &naive_loss(&x.images, &x.texts, x.scale)?.lse))
    }));

    results.push(over("loss-equivalence", 1e-12, &all, |x| {
        let run = x.ring(x.tiles(faults)?, x.n, false)?;
        Ok(rel_scalar(run.loss, naive_loss(&x.images, &x.texts, x.scale)?.loss))
    }));

    results.push(over("gradient-equivalence", 1e-10, &all, |x| {
        let run = x.ring(x.tiles(faults)?, x.n, false)?;
        Ok(grads_err(&run.grads, &naive_grads(&x.images, &x.texts, x.scale)?))
    }));

    results.push(over("finite-difference", 1e-5, small.iter().copied(), |x| {
        let h = 1e-6;
        let fd_image = finite_diff_grad(&x.images, h, |m| naive_loss(m, &x.texts, x.scale).map_or(f64::NAN, |r| r.loss))?;
        let fd_text = finite_diff_grad(&x.texts, h, |m| naive_loss(&x.images, m, x.scale).map_or(f64::NAN, |r| r.loss))?;
        let fd = tilecl::GradPair {
            d_image: fd_image,
            d_text: fd_text,
        };
        let dense = naive_grads(&x.images, &x.texts, x.scale)?;
        let ring = x.ring(x.tiles(faults)?, x.n, false)?.grads;
        Ok(fd_err(&dense, &fd).max(fd_err(&ring, &fd)))
    }));

    results.push(over("tile-invariance", 1e-12, &all, |x| {
        let b_s = x.b / x.n;
        let base = x.ring(TileConfig::new(1, 1)?.with_faults(faults), x.n, false)?;
        let mut worst = 0.0f64;
        for (r, c) in [(2, 3), (x.t_r, x.t_c), (b_s, b_s), (b_s + 7, 1)] {
            let run = x.ring(TileConfig::new(r, c)?.with_faults(faults), x.n, false)?;
            worst = worst.max(rel_scalar(run.loss, base.loss)).max(grads_err(&run.grads, &base.grads));
        }
        Ok(worst)
    }));

    results.push(over("worker-invariance", 1e-12, &all, |x| {
        let tiles = x.tiles(faults)?;
        let base = x.ring(tiles, 1, false)?;
        let mut worst = 0.0f64;
        for n in divisor_workers(x.b) {
            let run = x.ring(tiles, n, false)?;
            worst = worst.max(rel_scalar(run.loss, base.loss)).max(grads_err(&run.grads, &base.grads));
        }
        Ok(worst)
    }));

    results.push(over("merge-order", 1e-12, &all, |x| {
        let tiles = x.tiles(faults)?;
        let reference = local_lse_forward(x.images.view(), x.texts.view(), &tiles, x.scale)?;
        let reversed: Vec<usize> = (0..x.b).rev().collect();
        let rotated: Vec<usize> = (0..x.b).map(|j| (j + x.b / 2 + 1) % x.b).collect();
        let mut worst = 0.0f64;
        for order in [reversed, rotated] {
            let texts = permuted_rows(&x.texts, &order)?;
            let lse = local_lse_forward(x.images.view(), texts.view(), &tiles, x.scale)?;
            worst = worst.max(rel_err(lse.values(), reference.values()));
        }
        Ok(worst)
    }));

    let stable_set = stability_instances(cfg, main)?;
    results.push(over(STABILITY, 1e-9, &stable_set, |x| {
        if unshifted_lse(&x.images, &x.texts, x.scale)?.iter().all(|v| v.is_finite()) {
            return Err(tilecl::Error::State("unshifted reference did not overflow".into()));
        }
        let (ref_loss, ref_grads) = shifted_logits_loss_and_grads(&x.images, &x.texts, x.scale)?;
        let run = x.ring(x.tiles(faults)?, x.n, false)?;
        Ok(rel_scalar(run.loss, ref_loss).max(grads_err(&run.grads, &ref_grads)))
    }));

    results.push(over("softmax-normalization", 1e-12, &all, |x| {
        let dense = naive_loss(&x.images, &x.texts, x.scale)?;
        let tiled = local_lse_forward(x.images.view(), x.texts.view(), &x.tiles(faults)?, x.scale)?;
        let mut worst = 0.0f64;
        for i in 0..x.b {
            for lse in [dense.lse[i], tiled.values()[i]] {
                let sum: f64 = dense.similarity.row(i).iter().map(|v| (v - lse).exp()).sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        Ok(worst)
    }));

    let mut nonneg = over("nonnegative-loss", 0.0, &all, |x| {
        let run = x.ring(x.tiles(faults)?, x.n, false)?;
        let dense = naive_loss(&x.images, &x.texts, x.scale)?.loss;
        Ok((-run.loss).max(-dense).max(0.0))
    });
    nonneg.bound = "loss >= 0".into();
    results.push(nonneg);

    results.push(single(RING_SCHEDULE, "exact", ring_schedule_check(main, faults)));

    results.push(over("delay-invariance", 0.0, all.iter().take(3), |x| {
        let tiles = x.tiles(faults)?;
        let plain = RingConfig::new(tiles, x.scale)?;
        let threaded = plain.clone().threaded(Some(DelayPlan {
            seed: x.seed,
            max_micros: 300,
        }));
        let a = run_ring(&x.images, &x.texts, x.n, &plain, false)?;
        let b = run_ring(&x.images, &x.texts, x.n, &threaded, false)?;
        let same = a.loss.to_bits() == b.loss.to_bits() && a.grads == b.grads;
        Ok(if same { 0.0 } else { (a.loss - b.loss).abs().max(f64::MIN_POSITIVE) })
    }));

    results.push(over("bidirectional-loss", 1e-12, &all, |x| {
        let run = x.ring(x.tiles(faults)?, x.n, true)?;
        Ok(rel_scalar(run.loss, bidirectional_loss(&x.images, &x.texts, x.scale)?))
    }));

    results.push(over("bidirectional-gradients", 1e-10, &all, |x| {
        let run = x.ring(x.tiles(faults)?, x.n, true)?;
        Ok(grads_err(&run.grads, &bidirectional_grads(&x.images, &x.texts, x.scale)?))
    }));

    results.push(over("f32-agreement", 1e-4, std::iter::once(main), |x| {
        let cast = |m: &Matrix<f64>| Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) as f32);
        let (images, texts) = (cast(&x.images)?, cast(&x.texts)?);
        let tiles = x.tiles(faults)?;
        let run = run_ring(&images, &texts, x.n, &RingConfig::new(tiles, x.scale)?, false)?;
        Ok(rel_scalar(run.loss as f64, naive_loss(&x.images, &x.texts, x.scale)?.loss))
    }));

    results.push(single("memory-analytic-ratio", "[0.80, 1.25]", memory_check()));
    results.push(single("tracker-soundness", "exact", tracker_check()));
    results.push(single("feature-format", "bitwise", feature_format_check(main)));

    Ok(VerifyReport { results })
}

fn ring_schedule_check(main: &Instance, faults: Faults) -> Result<(f64, usize), String> {
    for n in 1..=16 {
        check_schedule(n, faults)?;
    }
    let tiles = main.tiles(faults).map_err(|e| e.to_string())?;
    let cfg = RingConfig::new(tiles, main.scale).map_err(|e| e.to_string())?;
    let mut workers = partition(&main.images, &main.texts, main.n).map_err(|e| e.to_string())?;
    forward_ring(&mut workers, &cfg).map_err(|e| format!("{e}; {}", main.repro()))?;
    let counts = coverage(&workers);
    if let Some((w, row)) = counts.iter().enumerate().find(|(_, row)| row.iter().any(|&c| c != 1)) {
        return Err(format!("worker {w} visited text shards {row:?}; {}", main.repro()));
    }
    Ok((0.0, 16 + 1))
}

fn memory_check() -> Result<(f64, usize), String> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for strategy in StrategyKind::ALL {
        for b in [64, 128, 256] {
            let cfg = MeasureConfig::new(strategy, b, 4, 4, 8, 8, 8, 1);
            let report = measure_run(&cfg).map_err(|e| e.to_string())?;
            let ratio = report.analytic_ratio();
            checked += 1;
            worst = worst.max((ratio - 1.0).abs());
            if !(0.8..=1.25).contains(&ratio) {
                return Err(format!("{strategy} b={b} n=4 t=8: measured/analytic = {ratio:.3}"));
            }
        }
    }
    Ok((worst, checked))
}

fn tracker_check() -> Result<(f64, usize), String> {
    let root = MemoryTracker::new();
    let cats = [Category::Data, Category::Loss, Category::Gradient];
    let mut sampled = 0u64;
    thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|w| {
                let tracker = root.child();
                s.spawn(move || -> tilecl::Result<()> {
                    let cat = cats[w % 3];
                    let _scope = tracker.scope(cat);
                    let mut held = Vec::new();
                    for k in 1..=32 {
                        held.push(Matrix::<f64>::zeros(k, 8)?);
                        if k % 4 == 0 {
                            held.remove(0);
                        }
                    }
                    Ok(())
                })
            })
            .collect();
        while handles.iter().any(|h| !h.is_finished()) {
            sampled = sampled.max(root.live_total());
            thread::yield_now();
        }
        handles
            .into_iter().try_for_each(|h| h.join().map_err(|_| "allocation thread panicked".to_string())?.map_err(|e| e.to_string()))
    })?;
    let peak_sum: u64 = cats.iter().map(|&c| root.peak(c)).sum();
    if peak_sum < sampled {
        return Err(format!("sampled live total {sampled} exceeds summed category peaks {peak_sum}"));
    }
    if root.live_total() != 0 {
        return Err(format!("{} bytes still live after every buffer was dropped", root.live_total()));
    }
    if root.peak(Category::Gradient) == 0 || root.peak(Category::Loss) == 0 || root.peak(Category::Data) == 0 {
        return Err("a category saw no allocations".into());
    }
    root.check().map_err(|e| e.to_string())?;
    Ok((0.0, 4))
}

fn feature_format_check(main: &Instance) -> Result<(f64, usize), String> {
    let mut bytes = Vec::new();
    write_features(&mut bytes, &main.images, &main.texts).map_err(|e| e.to_string())?;
    let (images, texts) = read_features(Cursor::new(&bytes)).map_err(|e| e.to_string())?;
    if images != main.images || texts != main.texts {
        return Err("feature file round trip changed the matrices".into());
    }
    if read_features(Cursor::new(&bytes[..bytes.len() - 1])).is_ok() {
        return Err("truncated feature file was accepted".into());
    }
    Ok((0.0, 2))
}
