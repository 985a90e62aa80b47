use std::ops::Range;

use crate::core_tiles::{
    assemble_full_gradients, local_lse_backward_into, local_lse_forward_into, positive_gap_sum,
    GradPair, LseAccumulator,
};
use crate::error::{ensure_same, Error, Result};
use crate::matrix::{FeatureMatrix, Matrix};
use crate::memory_model::tracker::{Category, MemoryTracker, ScopeGuard};
use crate::real::Real;

use super::schedule::{schedule_with, successor};
use super::RingConfig;

/// Contiguous equal-size row shards: worker `w` owns rows `w*b_s .. (w+1)*b_s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardAssignment {
    pub n_workers: usize,
    pub shard_size: usize,
    pub batch: usize,
}

impl ShardAssignment {
    pub fn new(batch: usize, n_workers: usize) -> Result<Self> {
        if n_workers == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        if batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !batch.is_multiple_of(n_workers) {
            return Err(Error::Config(format!(
                "batch size {batch} is not divisible by worker count {n_workers}"
            )));
        }
        Ok(Self {
            n_workers,
            shard_size: batch / n_workers,
            batch,
        })
    }

    pub fn rows(&self, worker: usize) -> Range<usize> {
        worker * self.shard_size..(worker + 1) * self.shard_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadKind {
    TextFeatures,
    TextGradients,
}

/// One point-to-point transfer along the ring.
#[derive(Debug)]
pub struct RingMessage<T> {
    pub payload_kind: PayloadKind,
    /// Sending worker.
    pub source: usize,
    /// Worker whose text shard the payload belongs to.
    pub shard: usize,
    pub round: usize,
    pub data: Matrix<T>,
}

/// One simulated device.
pub struct WorkerState<T> {
    pub worker_id: usize,
    pub assignment: ShardAssignment,
    pub image_shard: FeatureMatrix<T>,
    pub text_shard: FeatureMatrix<T>,
    in_transit_text: Option<FeatureMatrix<T>>,
    in_transit_owner: usize,
    lse: Option<LseAccumulator<T>>,
    forward_done: bool,
    d_image: Option<Matrix<T>>,
    d_text_cache: Option<Matrix<T>>,
    cache_owner: usize,
    visited: Vec<usize>,
    tracker: Option<MemoryTracker>,
}

impl<T: Real> WorkerState<T> {
    fn new(
        worker_id: usize,
        assignment: ShardAssignment,
        images: &Matrix<T>,
        texts: &Matrix<T>,
        tracker: Option<MemoryTracker>,
    ) -> Result<Self> {
        let _data = tracker.as_ref().map(|t| t.scope(Category::Data));
        let rows = assignment.rows(worker_id);
        let image_shard = Matrix::from_view(images.view().slice_rows(rows.clone())?)?;
        let text_shard = Matrix::from_view(texts.view().slice_rows(rows)?)?;
        let in_transit = text_shard.clone();
        Ok(Self {
            worker_id,
            assignment,
            image_shard,
            text_shard,
            in_transit_text: Some(in_transit),
            in_transit_owner: worker_id,
            lse: None,
            forward_done: false,
            d_image: None,
            d_text_cache: None,
            cache_owner: worker_id,
            visited: Vec::new(),
            tracker,
        })
    }

    pub fn n_workers(&self) -> usize {
        self.assignment.n_workers
    }

    /// Global LSE values of this worker's rows once the forward pass has completed.
    pub fn lse(&self) -> Option<&LseAccumulator<T>> {
        self.lse.as_ref().filter(|_| self.forward_done)
    }

    /// Owner of the text shard currently held.
    pub fn in_transit_owner(&self) -> usize {
        self.in_transit_owner
    }

    /// Text shards processed by the last forward pass, in round order.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }

    pub fn tracker(&self) -> Option<&MemoryTracker> {
        self.tracker.as_ref()
    }

    fn enter(&self, cat: Category) -> Option<ScopeGuard> {
        self.tracker.as_ref().map(|t| t.scope(cat))
    }

    fn protocol(&self, round: usize, detail: impl Into<String>) -> Error {
        Error::Protocol {
            round,
            worker: self.worker_id,
            detail: detail.into(),
        }
    }

    fn expect_holding(&self, round: usize, cfg: &RingConfig) -> Result<usize> {
        let k = schedule_with(cfg.tiles.faults, self.worker_id, round, self.n_workers())?;
        if self.in_transit_text.is_none() {
            return Err(self.protocol(round, "no text shard in memory"));
        }
        if self.in_transit_owner != k {
            return Err(self.protocol(
                round,
                format!("scheduled on text shard {k} but holds shard {}", self.in_transit_owner),
            ));
        }
        Ok(k)
    }

    fn text_message(&mut self, round: usize) -> Result<RingMessage<T>> {
        let data = self
            .in_transit_text
            .take()
            .ok_or_else(|| self.protocol(round, "text shard already sent"))?;
        Ok(RingMessage {
            payload_kind: PayloadKind::TextFeatures,
            source: self.worker_id,
            shard: self.in_transit_owner,
            round,
            data,
        })
    }

    pub(crate) fn forward_step(&mut self, round: usize, cfg: &RingConfig) -> Result<Vec<RingMessage<T>>> {
        let _data = self.enter(Category::Data);
        let k = self.expect_holding(round, cfg)?;
        if round == 1 {
            self.forward_done = false;
            self.visited.clear();
            self.lse = Some(LseAccumulator::new(self.assignment.shard_size)?);
        }
        let acc = self
            .lse
            .as_mut()
            .ok_or_else(|| Error::State(format!("worker {} has no LSE accumulator", self.worker_id)))?;
        let texts = self.in_transit_text.as_ref().expect("checked by expect_holding");
        local_lse_forward_into(acc, self.image_shard.view(), texts.view(), &cfg.tiles, T::of(cfg.scale))?;
        self.visited.push(k);
        Ok(vec![self.text_message(round)?])
    }

    /// Checks the shard came home and returns `sum_i (l_i - x_ii)` over this worker's rows.
    pub(crate) fn finish_forward(&mut self, cfg: &RingConfig) -> Result<T> {
        let n = self.n_workers();
        if self.in_transit_owner != self.worker_id || self.visited.len() != n {
            return Err(self.protocol(n, "text shard did not return home after the last round"));
        }
        self.forward_done = true;
        let lse = self.lse.as_ref().expect("set in round 1");
        positive_gap_sum(
            self.image_shard.view(),
            self.text_shard.view(),
            lse.values(),
            T::of(cfg.scale),
        )
    }

    pub(crate) fn backward_step(&mut self, round: usize, cfg: &RingConfig) -> Result<Vec<RingMessage<T>>> {
        if !self.forward_done {
            return Err(Error::State(format!(
                "worker {} has no global LSE: run forward_ring before backward_ring",
                self.worker_id
            )));
        }
        let _data = self.enter(Category::Data);
        let k = self.expect_holding(round, cfg)?;
        let (b_s, c) = (self.assignment.shard_size, self.image_shard.cols());
        if round == 1 {
            let _grad = self.enter(Category::Gradient);
            self.d_image = Some(Matrix::zeros(b_s, c)?);
            self.d_text_cache = Some(Matrix::zeros(b_s, c)?);
            self.cache_owner = self.worker_id;
        }
        if self.cache_owner != k {
            return Err(self.protocol(
                round,
                format!("gradient cache belongs to shard {} but text shard is {k}", self.cache_owner),
            ));
        }
        let (Some(d_image), Some(cache)) = (self.d_image.as_mut(), self.d_text_cache.as_mut()) else {
            return Err(self.protocol(round, "gradient buffers missing"));
        };
        let texts = self.in_transit_text.as_ref().expect("checked by expect_holding");
        let lse = self.lse.as_ref().expect("forward_done implies an accumulator");
        local_lse_backward_into(
            d_image,
            cache,
            self.image_shard.view(),
            texts.view(),
            lse.values(),
            &cfg.tiles,
            T::of(cfg.scale),
            None,
        )?;

        let text = self.text_message(round)?;
        let grads = RingMessage {
            payload_kind: PayloadKind::TextGradients,
            source: self.worker_id,
            shard: self.cache_owner,
            round,
            data: self
                .d_text_cache
                .take()
                .ok_or_else(|| self.protocol(round, "gradient cache already sent"))?,
        };
        Ok(vec![text, grads])
    }

    pub(crate) fn finish_backward(&mut self, cfg: &RingConfig) -> Result<GradPair<T>> {
        let n = self.n_workers();
        if self.in_transit_owner != self.worker_id || self.cache_owner != self.worker_id {
            return Err(self.protocol(
                n,
                format!(
                    "after the last round worker holds text {} and cache {}",
                    self.in_transit_owner, self.cache_owner
                ),
            ));
        }
        let partial = GradPair {
            d_image: self.d_image.take().ok_or_else(|| self.protocol(n, "missing d_image"))?,
            d_text: self
                .d_text_cache
                .take()
                .ok_or_else(|| self.protocol(n, "missing gradient cache"))?,
        };
        let _grad = self.enter(Category::Gradient);
        assemble_full_gradients(
            partial,
            self.image_shard.view(),
            self.text_shard.view(),
            T::of(cfg.scale),
            self.assignment.batch,
        )
    }

    /// Validates and installs a message received from the successor in `round`.
    pub(crate) fn accept(&mut self, mut msg: RingMessage<T>, round: usize, kind: PayloadKind) -> Result<()> {
        let from = successor(self.worker_id, self.n_workers());
        if msg.payload_kind != kind {
            return Err(self.protocol(
                round,
                format!("expected {kind:?}, received {:?} (message ordering violated)", msg.payload_kind),
            ));
        }
        if msg.round != round || msg.source != from {
            return Err(self.protocol(
                round,
                format!(
                    "expected round {round} from worker {from}, received round {} from worker {}",
                    msg.round, msg.source
                ),
            ));
        }
        match kind {
            PayloadKind::TextFeatures => {
                let _s = self.enter(Category::Data);
                msg.data.retrack();
                self.in_transit_text = Some(msg.data);
                self.in_transit_owner = msg.shard;
            }
            PayloadKind::TextGradients => {
                if msg.shard != self.in_transit_owner {
                    return Err(self.protocol(
                        round,
                        format!(
                            "gradient cache of shard {} arrived with text shard {}",
                            msg.shard, self.in_transit_owner
                        ),
                    ));
                }
                let _s = self.enter(Category::Gradient);
                msg.data.retrack();
                self.d_text_cache = Some(msg.data);
                self.cache_owner = msg.shard;
            }
        }
        Ok(())
    }
}

/// Splits a batch into `n` contiguous shards, one worker each.
pub fn partition<T: Real>(
    images: &FeatureMatrix<T>,
    texts: &FeatureMatrix<T>,
    n: usize,
) -> Result<Vec<WorkerState<T>>> {
    partition_inner(images, texts, n, None)
}

/// [`partition`] with one tracker per worker; shard copies are charged as data.
pub fn partition_tracked<T: Real>(
    images: &FeatureMatrix<T>,
    texts: &FeatureMatrix<T>,
    trackers: &[MemoryTracker],
) -> Result<Vec<WorkerState<T>>> {
    partition_inner(images, texts, trackers.len(), Some(trackers))
}

fn partition_inner<T: Real>(
    images: &FeatureMatrix<T>,
    texts: &FeatureMatrix<T>,
    n: usize,
    trackers: Option<&[MemoryTracker]>,
) -> Result<Vec<WorkerState<T>>> {
    ensure_same("partition batch", images.rows(), texts.rows())?;
    ensure_same("partition dim", images.cols(), texts.cols())?;
    let assignment = ShardAssignment::new(images.rows(), n)?;
    (0..n)
        .map(|w| {
            let tracker = trackers.map(|t| t[w].clone());
            WorkerState::new(w, assignment, images, texts, tracker)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(b: usize) -> Matrix<f64> {
        Matrix::from_fn(b, 2, |r, c| (r * 10 + c) as f64).unwrap()
    }

    #[test]
    fn single_worker_holds_everything() {
        let m = batch(8);
        let ws = partition(&m, &m, 1).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws[0].image_shard, m);
    }

    #[test]
    fn contiguous_shards() {
        let m = batch(8);
        let ws = partition(&m, &m, 4).unwrap();
        for (w, ws) in ws.iter().enumerate() {
            assert_eq!(ws.image_shard.rows(), 2);
            assert_eq!(ws.image_shard.get(0, 0), (w * 2 * 10) as f64);
            assert_eq!(ws.text_shard.get(1, 0), ((w * 2 + 1) * 10) as f64);
            assert_eq!(ws.in_transit_owner(), w);
        }
        let rebuilt: Vec<f64> = ws.iter().flat_map(|w| w.image_shard.as_slice().to_vec()).collect();
        assert_eq!(rebuilt, m.as_slice());
    }

    #[test]
    fn indivisible_batch_is_a_config_error() {
        let m = batch(7);
        let err = partition(&m, &m, 2).err().unwrap();
        assert!(matches!(&err, Error::Config(s) if s.contains('7') && s.contains('2')));
        assert!(matches!(partition(&m, &m, 0), Err(Error::Config(_))));
    }
}
