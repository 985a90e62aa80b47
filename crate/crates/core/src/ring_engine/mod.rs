//! Simulated multi-worker ring.
//!
//! Each worker owns one image shard and one text shard. In the forward pass text shards
//! travel around the ring while every worker folds the LSE of its image rows against the
//! shard it currently holds into its accumulator; after `n` rounds each accumulator holds the
//! global LSE of the worker's rows and every shard is back with its owner. The backward pass
//! repeats the rotation with a gradient cache riding along each text shard, so the cache that
//! arrives home after the last round holds the complete gradient of its owner's texts.
//!
//! Worker `w` sends to `w - 1` and receives from `w + 1` (mod `n`); with that direction the
//! shard held in round `j` is exactly [`ring_schedule`]`(w, j, n) = (w + j - 1) mod n`.

mod schedule;
mod worker;

use std::sync::mpsc::{self, RecvTimeoutError};
use std::time::Duration;

use rand::prelude::*;

use crate::core_tiles::{GradPair, TileConfig};
use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Matrix};
use crate::real::Real;

pub use schedule::{check_schedule, predecessor, ring_schedule, successor};
pub use worker::{partition, partition_tracked, PayloadKind, RingMessage, ShardAssignment, WorkerState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scheduler {
    /// All workers stepped in order on the calling thread.
    #[default]
    RoundRobin,
    /// One thread per worker, connected by channels.
    Threaded,
}

/// Random per-message send delays for the threaded scheduler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DelayPlan {
    pub seed: u64,
    pub max_micros: u64,
}

impl DelayPlan {
    fn delay(&self, worker: usize, round: usize, index: usize) -> Duration {
        let mut rng = StdRng::seed_from_u64(
            self.seed ^ ((worker as u64) << 40) ^ ((round as u64) << 8) ^ index as u64,
        );
        Duration::from_micros(rng.gen_range(0..=self.max_micros))
    }
}

#[derive(Clone, Debug)]
pub struct RingConfig {
    pub tiles: TileConfig,
    pub scale: f64,
    pub scheduler: Scheduler,
    pub delays: Option<DelayPlan>,
    /// How long a threaded worker waits for its round message before giving up.
    pub recv_timeout: Duration,
}

impl RingConfig {
    pub fn new(tiles: TileConfig, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive and finite, got {scale}")));
        }
        Ok(Self {
            tiles,
            scale,
            scheduler: Scheduler::RoundRobin,
            delays: None,
            recv_timeout: Duration::from_secs(60),
        })
    }

    pub fn threaded(mut self, delays: Option<DelayPlan>) -> Self {
        self.scheduler = Scheduler::Threaded;
        self.delays = delays;
        self
    }
}

pub struct ForwardOutput<T> {
    pub loss: T,
    /// Global LSE vector, concatenated in worker order.
    pub lse: Vec<T>,
}

type Step<'a, T> = dyn Fn(&mut WorkerState<T>, usize) -> Result<Vec<RingMessage<T>>> + Sync + 'a;

fn check_workers<T: Real>(workers: &[WorkerState<T>]) -> Result<usize> {
    let n = workers.len();
    if n == 0 {
        return Err(Error::Config("empty ring".into()));
    }
    for (i, w) in workers.iter().enumerate() {
        if w.worker_id != i || w.n_workers() != n {
            return Err(Error::Config(format!(
                "worker at position {i} has id {} in a ring of {}",
                w.worker_id,
                w.n_workers()
            )));
        }
    }
    Ok(n)
}

fn run_rounds<T: Real>(
    workers: &mut [WorkerState<T>],
    cfg: &RingConfig,
    kinds: &[PayloadKind],
    step: &Step<'_, T>,
) -> Result<()> {
    match cfg.scheduler {
        Scheduler::RoundRobin => run_round_robin(workers, kinds, step),
        Scheduler::Threaded => run_threaded(workers, cfg, kinds, step),
    }
}

fn run_round_robin<T: Real>(
    workers: &mut [WorkerState<T>],
    kinds: &[PayloadKind],
    step: &Step<'_, T>,
) -> Result<()> {
    let n = workers.len();
    for round in 1..=n {
        let mut outboxes = Vec::with_capacity(n);
        for w in workers.iter_mut() {
            outboxes.push(step(w, round)?);
        }
        for (src, outbox) in outboxes.into_iter().enumerate() {
            let dest = predecessor(src, n);
            if outbox.len() != kinds.len() {
                return Err(Error::Protocol {
                    round,
                    worker: dest,
                    detail: format!("expected {} messages, worker {src} sent {}", kinds.len(), outbox.len()),
                });
            }
            for (msg, &kind) in outbox.into_iter().zip(kinds) {
                workers[dest].accept(msg, round, kind)?;
            }
        }
    }
    Ok(())
}

struct WorkerFailure {
    error: Error,
    /// Failed only because a neighbour went away first.
    secondary: bool,
}

fn run_threaded<T: Real>(
    workers: &mut [WorkerState<T>],
    cfg: &RingConfig,
    kinds: &[PayloadKind],
    step: &Step<'_, T>,
) -> Result<()> {
    let n = workers.len();
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..n).map(|_| mpsc::channel::<RingMessage<T>>()).unzip();
    let results: Vec<std::result::Result<(), WorkerFailure>> = std::thread::scope(|s| {
        let handles: Vec<_> = workers
            .iter_mut()
            .zip(receivers)
            .enumerate()
            .map(|(w, (state, rx))| {
                let tx = senders[predecessor(w, n)].clone();
                s.spawn(move || -> std::result::Result<(), WorkerFailure> {
                    let primary = |error| WorkerFailure { error, secondary: false };
                    for round in 1..=n {
                        let outbox = step(state, round).map_err(primary)?;
                        for (i, msg) in outbox.into_iter().enumerate() {
                            if let Some(plan) = &cfg.delays {
                                std::thread::sleep(plan.delay(w, round, i));
                            }
                            tx.send(msg).map_err(|_| WorkerFailure {
                                error: Error::Protocol {
                                    round,
                                    worker: w,
                                    detail: "receiver left the ring".into(),
                                },
                                secondary: true,
                            })?;
                        }
                        for &kind in kinds {
                            let msg = rx.recv_timeout(cfg.recv_timeout).map_err(|e| WorkerFailure {
                                error: Error::Protocol {
                                    round,
                                    worker: w,
                                    detail: match e {
                                        RecvTimeoutError::Timeout => format!(
                                            "no {kind:?} message within {:?} of the round barrier",
                                            cfg.recv_timeout
                                        ),
                                        RecvTimeoutError::Disconnected => {
                                            "sender left the ring before delivering".into()
                                        }
                                    },
                                },
                                secondary: matches!(e, RecvTimeoutError::Disconnected),
                            })?;
                            state.accept(msg, round, kind).map_err(primary)?;
                        }
                    }
                    Ok(())
                })
            })
            .collect();
        drop(senders);
        handles
            .into_iter()
            .map(|h| h.join().expect("ring worker panicked"))
            .collect()
    });

    let mut failures: Vec<WorkerFailure> = results.into_iter().filter_map(|r| r.err()).collect();
    failures.sort_by_key(|f| f.secondary);
    match failures.into_iter().next() {
        Some(f) => Err(f.error),
        None => Ok(()),
    }
}

/// Runs the `n`-round forward rotation and returns the global loss and LSE vector.
pub fn forward_ring<T: Real>(workers: &mut [WorkerState<T>], cfg: &RingConfig) -> Result<ForwardOutput<T>> {
    let n = check_workers(workers)?;
    let step = |w: &mut WorkerState<T>, round| w.forward_step(round, cfg);
    run_rounds(workers, cfg, &[PayloadKind::TextFeatures], &step)?;
    let mut gap = T::zero();
    for w in workers.iter_mut() {
        gap = gap + w.finish_forward(cfg)?;
    }
    let batch = workers[0].assignment.batch;
    debug_assert_eq!(n * workers[0].assignment.shard_size, batch);
    let lse = workers
        .iter()
        .flat_map(|w| w.lse().expect("forward finished").values().to_vec())
        .collect();
    Ok(ForwardOutput {
        loss: gap / T::of(batch as f64),
        lse,
    })
}

/// Runs the `n`-round backward rotation; worker `i` ends with the full gradients of its own
/// image and text shards.
pub fn backward_ring<T: Real>(workers: &mut [WorkerState<T>], cfg: &RingConfig) -> Result<Vec<GradPair<T>>> {
    check_workers(workers)?;
    if let Some(w) = workers.iter().find(|w| w.lse().is_none()) {
        return Err(Error::State(format!(
            "worker {} has no global LSE: run forward_ring before backward_ring",
            w.worker_id
        )));
    }
    let step = |w: &mut WorkerState<T>, round| w.backward_step(round, cfg);
    run_rounds(
        workers,
        cfg,
        &[PayloadKind::TextFeatures, PayloadKind::TextGradients],
        &step,
    )?;
    workers.iter_mut().map(|w| w.finish_backward(cfg)).collect()
}

/// Stacks per-worker gradients back into batch order.
pub fn concat_grads<T: Real>(parts: &[GradPair<T>]) -> Result<GradPair<T>> {
    let stack = |pick: fn(&GradPair<T>) -> &Matrix<T>| -> Result<Matrix<T>> {
        let cols = parts.first().map_or(0, |p| pick(p).cols());
        let rows = parts.iter().map(|p| pick(p).rows()).sum();
        let data = parts.iter().flat_map(|p| pick(p).as_slice().to_vec()).collect();
        Matrix::from_vec(rows, cols, data)
    };
    Ok(GradPair {
        d_image: stack(|p| &p.d_image)?,
        d_text: stack(|p| &p.d_text)?,
    })
}

/// `counts[i][k]` = how often worker `i` processed text shard `k` in the last forward pass.
pub fn coverage<T: Real>(workers: &[WorkerState<T>]) -> Vec<Vec<u32>> {
    let n = workers.len();
    let mut counts = vec![vec![0u32; n]; n];
    for w in workers {
        for &k in w.visited() {
            if k < n {
                counts[w.worker_id][k] += 1;
            }
        }
    }
    counts
}

/// Result of a full forward and backward ring run.
#[derive(Debug)]
pub struct RingRun<T> {
    pub loss: T,
    pub loss_image_to_text: T,
    pub loss_text_to_image: Option<T>,
    /// Global LSE of the image-to-text pass.
    pub lse: Vec<T>,
    pub grads: GradPair<T>,
}

/// Partitions the batch over `n` workers and runs forward and backward. In bidirectional
/// mode a role-swapped pass is added; losses are averaged and the gradients are those of
/// the averaged loss.
pub fn run_ring<T: Real>(
    images: &FeatureMatrix<T>,
    texts: &FeatureMatrix<T>,
    n: usize,
    cfg: &RingConfig,
    bidirectional: bool,
) -> Result<RingRun<T>> {
    let one_way = |rows: &FeatureMatrix<T>, cols: &FeatureMatrix<T>| -> Result<(T, Vec<T>, GradPair<T>)> {
        let mut workers = partition(rows, cols, n)?;
        let fwd = forward_ring(&mut workers, cfg)?;
        let grads = concat_grads(&backward_ring(&mut workers, cfg)?)?;
        Ok((fwd.loss, fwd.lse, grads))
    };
    let (l_i, lse, g_i) = one_way(images, texts)?;
    if !bidirectional {
        return Ok(RingRun {
            loss: l_i,
            loss_image_to_text: l_i,
            loss_text_to_image: None,
            lse,
            grads: g_i,
        });
    }
    let (l_t, _, g_t) = one_way(texts, images)?;
    let half = T::of(0.5);
    let mix = |a: &Matrix<T>, b: &Matrix<T>| {
        Matrix::from_vec(
            a.rows(),
            a.cols(),
            a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| (x + y) * half).collect(),
        )
    };
    Ok(RingRun {
        loss: (l_i + l_t) * half,
        loss_image_to_text: l_i,
        loss_text_to_image: Some(l_t),
        lse,
        grads: GradPair {
            d_image: mix(&g_i.d_image, &g_t.d_text)?,
            d_text: mix(&g_i.d_text, &g_t.d_image)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_tiles::{local_lse_forward, tiled_loss_and_grads};
    use crate::features::generate_features;
    use crate::oracle;

    fn cfg(t: usize) -> RingConfig {
        RingConfig::new(TileConfig::new(t, t).unwrap(), 1.0).unwrap()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let s = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / s
    }

    #[test]
    fn single_worker_reduces_to_local_forward() {
        let (a, b) = generate_features::<f64>(1, 12, 4).unwrap();
        let mut ws = partition(&a, &b, 1).unwrap();
        let out = forward_ring(&mut ws, &cfg(5)).unwrap();
        let local = local_lse_forward(a.view(), b.view(), &TileConfig::new(5, 5).unwrap(), 1.0).unwrap();
        assert_eq!(out.lse, local.values());
        let grads = backward_ring(&mut ws, &cfg(5)).unwrap();
        let (_, single) = tiled_loss_and_grads(a.view(), b.view(), &TileConfig::new(5, 5).unwrap(), 1.0).unwrap();
        assert_eq!(grads[0], single);
    }

    #[test]
    fn worker_count_invariance() {
        let (a, b) = generate_features::<f64>(2, 64, 8).unwrap();
        let dense = oracle::naive_loss(&a, &b, 1.0).unwrap();
        let mut losses = Vec::new();
        for n in [2, 4, 8] {
            let mut ws = partition(&a, &b, n).unwrap();
            let out = forward_ring(&mut ws, &cfg(3)).unwrap();
            assert!(rel(&out.lse, &dense.lse) < 1e-12);
            losses.push(out.loss);
        }
        for l in &losses {
            assert!((l - dense.loss).abs() <= 1e-12 * dense.loss.abs());
        }
    }

    #[test]
    fn uniform_similarity_gives_log_b() {
        let a = Matrix::from_fn(16, 2, |_, k| if k == 0 { 1.0 } else { 0.0 }).unwrap();
        for n in [1, 4, 16] {
            let mut ws = partition(&a, &a, n).unwrap();
            let out = forward_ring(&mut ws, &cfg(3)).unwrap();
            assert!(out.lse.iter().all(|l| (l - (1.0 + 16f64.ln())).abs() < 1e-13));
        }
    }

    #[test]
    fn backward_matches_dense_oracle() {
        let (a, b) = generate_features::<f64>(3, 32, 6).unwrap();
        let want = oracle::naive_grads(&a, &b, 1.0).unwrap();
        let mut ws = partition(&a, &b, 4).unwrap();
        forward_ring(&mut ws, &cfg(3)).unwrap();
        let got = concat_grads(&backward_ring(&mut ws, &cfg(3)).unwrap()).unwrap();
        assert!(rel(got.d_image.as_slice(), want.d_image.as_slice()) < 1e-10);
        assert!(rel(got.d_text.as_slice(), want.d_text.as_slice()) < 1e-10);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let (a, b) = generate_features::<f64>(4, 8, 2).unwrap();
        let mut ws = partition(&a, &b, 2).unwrap();
        assert!(matches!(backward_ring(&mut ws, &cfg(2)), Err(Error::State(_))));
    }

    #[test]
    fn threaded_with_delays_matches_round_robin() {
        let (a, b) = generate_features::<f64>(5, 24, 4).unwrap();
        let rr = run_ring(&a, &b, 4, &cfg(4), false).unwrap();
        let plan = DelayPlan { seed: 9, max_micros: 300 };
        let th = run_ring(&a, &b, 4, &cfg(4).threaded(Some(plan)), false).unwrap();
        assert_eq!(rr.loss, th.loss);
        assert_eq!(rr.grads, th.grads);
    }

    #[test]
    fn every_pair_is_visited_once() {
        let (a, b) = generate_features::<f64>(6, 40, 3).unwrap();
        let mut ws = partition(&a, &b, 5).unwrap();
        forward_ring(&mut ws, &cfg(3)).unwrap();
        assert!(coverage(&ws).iter().flatten().all(|&c| c == 1));
    }

    #[test]
    fn schedule_fault_is_a_protocol_error() {
        let (a, b) = generate_features::<f64>(7, 8, 2).unwrap();
        let mut c = cfg(2);
        c.tiles.faults.schedule_off_by_one = true;
        let mut ws = partition(&a, &b, 4).unwrap();
        assert!(matches!(forward_ring(&mut ws, &c), Err(Error::Protocol { round: 1, .. })));
        let mut ws = partition(&a, &b, 4).unwrap();
        let err = forward_ring(&mut ws, &c.clone().threaded(None)).err().unwrap();
        assert!(matches!(err, Error::Protocol { round: 1, .. }), "{err}");
    }

    #[test]
    fn misordered_messages_are_rejected() {
        let (a, b) = generate_features::<f64>(8, 4, 2).unwrap();
        let mut ws = partition(&a, &b, 2).unwrap();
        let msg = RingMessage {
            payload_kind: PayloadKind::TextGradients,
            source: 1,
            shard: 1,
            round: 1,
            data: Matrix::zeros(2, 2).unwrap(),
        };
        let err = ws[0].accept(msg, 1, PayloadKind::TextFeatures).err().unwrap();
        assert!(matches!(err, Error::Protocol { worker: 0, round: 1, .. }));
        let late = RingMessage {
            payload_kind: PayloadKind::TextFeatures,
            source: 1,
            shard: 1,
            round: 2,
            data: Matrix::zeros(2, 2).unwrap(),
        };
        assert!(ws[0].accept(late, 1, PayloadKind::TextFeatures).is_err());
    }

    #[test]
    fn bidirectional_matches_oracle() {
        let (a, b) = generate_features::<f64>(9, 16, 4).unwrap();
        let run = run_ring(&a, &b, 4, &cfg(3), true).unwrap();
        let want = oracle::bidirectional_loss(&a, &b, 1.0).unwrap();
        assert!((run.loss - want).abs() <= 1e-12 * want);
        let g = oracle::bidirectional_grads(&a, &b, 1.0).unwrap();
        assert!(rel(run.grads.d_image.as_slice(), g.d_image.as_slice()) < 1e-10);
        assert!(rel(run.grads.d_text.as_slice(), g.d_text.as_slice()) < 1e-10);

        let sym = run_ring(&a, &a, 2, &cfg(3), true).unwrap();
        assert!((sym.loss_image_to_text - sym.loss_text_to_image.unwrap()).abs() < 1e-15);
    }
}
