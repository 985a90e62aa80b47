//! Tile-level kernels for the image-to-text contrastive loss.
//!
//! The loss for row `i` is `l_i - x_ii`, where `x_ij = scale * <I_i, T_j>` and
//! `l_i = log sum_j exp(x_ij)`. Nothing here ever holds more than one `t_r x t_c`
//! similarity tile per concurrently processed row block: the forward pass folds each tile's
//! row-wise log-sum-exp into a running [`LseAccumulator`], and the backward pass recomputes
//! tiles from the features and the stored LSE vector.

use std::fmt;

use crate::error::{ensure_same, Error, Result};
use crate::faults::Faults;
use crate::matrix::{Buffer, Matrix, MatrixView};
use crate::memory_model::tracker::{scoped, Category, Context};
use crate::real::Real;

/// Tile geometry and row-block parallelism for the in-worker kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileConfig {
    /// Rows per tile (`t_r`).
    pub rows: usize,
    /// Columns per tile (`t_c`).
    pub cols: usize,
    /// Number of row blocks processed concurrently in the forward pass.
    pub parallelism: usize,
    pub faults: Faults,
}

impl TileConfig {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!(
                "tile sizes must be at least 1, got {rows}x{cols}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            parallelism: 1,
            faults: Faults::NONE,
        })
    }

    pub fn with_parallelism(mut self, p: usize) -> Self {
        self.parallelism = p.max(1);
        self
    }

    pub fn with_faults(mut self, faults: Faults) -> Self {
        self.faults = faults;
        self
    }
}

/// One block `X[row_offset.., col_offset..]` of the scaled similarity matrix.
#[derive(Clone, Debug)]
pub struct SimilarityTile<T> {
    pub row_offset: usize,
    pub col_offset: usize,
    values: Matrix<T>,
}

impl<T: Real> SimilarityTile<T> {
    pub fn t_r(&self) -> usize {
        self.values.rows()
    }

    pub fn t_c(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn get(&self, p: usize, q: usize) -> T {
        self.values.get(p, q)
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn axpy<T: Real>(dst: &mut [T], alpha: T, x: &[T]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d = *d + alpha * v;
    }
}

/// Computes `scale * images . texts^T` for two row blocks.
pub fn similarity_tile<T: Real>(
    images: MatrixView<'_, T>,
    texts: MatrixView<'_, T>,
    scale: T,
) -> Result<SimilarityTile<T>> {
    ensure_same("similarity_tile", images.cols(), texts.cols())?;
    let _loss = scoped(Category::Loss);
    let mut values = Matrix::zeros(images.rows(), texts.rows())?;
    for p in 0..images.rows() {
        let img = images.row(p);
        let out = values.row_mut(p);
        for (q, slot) in out.iter_mut().enumerate() {
            *slot = scale * dot(img, texts.row(q));
        }
    }
    Ok(SimilarityTile {
        row_offset: images.offset(),
        col_offset: texts.offset(),
        values,
    })
}

/// Per-row maxima of a tile.
#[derive(Debug)]
pub struct RowMaxVector<T>(Buffer<T>);

impl<T> RowMaxVector<T> {
    pub fn values(&self) -> &[T] {
        &self.0
    }
}

pub fn row_max<T: Real>(tile: &SimilarityTile<T>) -> Result<RowMaxVector<T>> {
    let _loss = scoped(Category::Loss);
    let mut out = Buffer::filled(tile.t_r(), T::neg_infinity())?;
    for (p, m) in out.iter_mut().enumerate() {
        *m = tile.values.row(p).iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    }
    Ok(RowMaxVector(out))
}

/// Row-wise log-sum-exp of a tile, shifted by the row max so that entries far beyond the
/// exponential overflow threshold stay finite. NaN entries propagate to the row result.
pub fn tile_lse<T: Real>(tile: &SimilarityTile<T>) -> Result<Buffer<T>> {
    tile_lse_with(tile, Faults::NONE)
}

pub(crate) fn tile_lse_with<T: Real>(tile: &SimilarityTile<T>, faults: Faults) -> Result<Buffer<T>> {
    if tile.t_c() == 0 {
        return Err(Error::Argument("tile_lse needs at least one column".into()));
    }
    let maxima = row_max(tile)?;
    let _loss = scoped(Category::Loss);
    let mut out = Buffer::zeros(tile.t_r())?;
    for (p, (slot, &m)) in out.iter_mut().zip(maxima.values()).enumerate() {
        let shift = if faults.no_max_shift { T::zero() } else { m };
        let sum: T = tile.values.row(p).iter().map(|&v| (v - shift).exp()).sum();
        *slot = shift + sum.ln();
    }
    Ok(out)
}

/// Folds `incoming` into a running log-sum-exp: `log(exp(acc) + exp(incoming))`.
///
/// Negative infinity is the identity, so merging into a fresh accumulator is plain assignment.
pub fn merge_lse<T: Real>(acc: T, incoming: T) -> T {
    merge_lse_with(acc, incoming, Faults::NONE)
}

pub(crate) fn merge_lse_with<T: Real>(acc: T, incoming: T, faults: Faults) -> T {
    if acc == T::neg_infinity() {
        return incoming;
    }
    if incoming == T::neg_infinity() {
        return acc;
    }
    let hi = acc.max(incoming);
    let correction = (-(acc - incoming).abs()).exp().ln_1p();
    if faults.merge_sign_flip {
        hi - correction
    } else {
        hi + correction
    }
}

/// Running per-row log-sum-exp. Fresh entries hold the merge identity (negative infinity).
#[derive(Clone)]
pub struct LseAccumulator<T> {
    values: Buffer<T>,
}

impl<T: Real> LseAccumulator<T> {
    pub fn new(len: usize) -> Result<Self> {
        let _loss = scoped(Category::Loss);
        Ok(Self {
            values: Buffer::filled(len, T::neg_infinity())?,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn is_identity(&self, i: usize) -> bool {
        self.values[i] == T::neg_infinity()
    }

    pub fn merge(&mut self, i: usize, incoming: T) {
        self.values[i] = merge_lse(self.values[i], incoming);
    }

    /// Merges a whole vector of partial LSE values (e.g. another worker's local result).
    pub fn merge_all(&mut self, incoming: &[T]) -> Result<()> {
        ensure_same("LseAccumulator::merge_all", self.len(), incoming.len())?;
        for (a, &v) in self.values.iter_mut().zip(incoming) {
            *a = merge_lse(*a, v);
        }
        Ok(())
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values.into_vec()
    }
}

impl<T: fmt::Debug> fmt::Debug for LseAccumulator<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("LseAccumulator").field(&self.values).finish()
    }
}

/// Streaming LSE of `images` against every row of `texts`, one tile at a time.
pub fn local_lse_forward<T: Real>(
    images: MatrixView<'_, T>,
    texts: MatrixView<'_, T>,
    cfg: &TileConfig,
    scale: T,
) -> Result<LseAccumulator<T>> {
    let mut acc = LseAccumulator::new(images.rows())?;
    local_lse_forward_into(&mut acc, images, texts, cfg, scale)?;
    Ok(acc)
}

/// Like [`local_lse_forward`], merging tile results directly into an existing accumulator.
pub fn local_lse_forward_into<T: Real>(
    acc: &mut LseAccumulator<T>,
    images: MatrixView<'_, T>,
    texts: MatrixView<'_, T>,
    cfg: &TileConfig,
    scale: T,
) -> Result<()> {
    ensure_same("local_lse_forward", images.cols(), texts.cols())?;
    ensure_same("local_lse_forward accumulator", acc.len(), images.rows())?;
    if texts.rows() == 0 {
        return Err(Error::Argument("local_lse_forward needs at least one text row".into()));
    }

    let blocks: Vec<_> = images.blocks(cfg.rows).zip(acc.values.chunks_mut(cfg.rows)).collect();
    let workers = cfg.parallelism.min(blocks.len()).max(1);
    if workers == 1 {
        for (block, out) in blocks {
            forward_row_block(out, block, texts, cfg, scale)?;
        }
        return Ok(());
    }

    let mut groups: Vec<Vec<_>> = (0..workers).map(|_| Vec::new()).collect();
    for (i, item) in blocks.into_iter().enumerate() {
        groups[i % workers].push(item);
    }
    let ctx = Context::current();
    std::thread::scope(|s| {
        let handles: Vec<_> = groups
            .into_iter()
            .map(|group| {
                let ctx = ctx.clone();
                s.spawn(move || -> Result<()> {
                    let _scope = ctx.as_ref().map(Context::enter);
                    for (block, out) in group {
                        forward_row_block(out, block, texts, cfg, scale)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter().try_for_each(|h| h.join().expect("row-block worker panicked"))
    })
}

fn forward_row_block<T: Real>(
    out: &mut [T],
    images: MatrixView<'_, T>,
    texts: MatrixView<'_, T>,
    cfg: &TileConfig,
    scale: T,
) -> Result<()> {
    for cols in texts.blocks(cfg.cols) {
        let tile = similarity_tile(images, cols, scale)?;
        let lse = tile_lse_with(&tile, cfg.faults)?;
        for (a, &l) in out.iter_mut().zip(lse.iter()) {
            *a = merge_lse_with(*a, l, cfg.faults);
        }
    }
    Ok(())
}

/// Gradients with respect to an image block and a text block.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair<T> {
    pub d_image: Matrix<T>,
    pub d_text: Matrix<T>,
}

impl<T: Real> GradPair<T> {
    pub fn zeros(image_rows: usize, text_rows: usize, dim: usize) -> Result<Self> {
        let _grad = scoped(Category::Gradient);
        Ok(Self {
            d_image: Matrix::zeros(image_rows, dim)?,
            d_text: Matrix::zeros(text_rows, dim)?,
        })
    }
}

/// Softmax-weighted feature sums for the LSE term of the loss, accumulated tile by tile.
///
/// `lse` must hold the global LSE of each image row (over every column of the full
/// similarity matrix), not a value local to `texts`.
pub fn local_lse_backward<T: Real>(
    images: MatrixView<'_, T>,
    texts: MatrixView<'_, T>,
    lse: &[T],
    cfg: &TileConfig,
    scale: T,
) -> Result<GradPair<T>> {
    let mut grads = GradPair::zeros(images.rows(), texts.rows(), images.cols())?;
    local_lse_backward_into(
        &mut grads.d_image,
        &mut grads.d_text,
        images,
        texts,
        lse,
        cfg,
        scale,
        None,
    )?;
    Ok(grads)
}

/// Accumulating form of [`local_lse_backward`]. When `weight_sums` is given, the softmax
/// weights `exp(x_ij - l_i)` of each image row are added into it as they are produced.
#[allow(clippy::too_many_arguments)]
pub fn local_lse_backward_into<T: Real>(
    d_image: &mut Matrix<T>,
    d_text: &mut Matrix<T>,
    images: MatrixView<'_, T>,
    texts: MatrixView<'_, T>,
    lse: &[T],
    cfg: &TileConfig,
    scale: T,
    mut weight_sums: Option<&mut [T]>,
) -> Result<()> {
    ensure_same("local_lse_backward", images.cols(), texts.cols())?;
    ensure_same("local_lse_backward lse", lse.len(), images.rows())?;
    ensure_same("local_lse_backward d_image", d_image.rows(), images.rows())?;
    ensure_same("local_lse_backward d_text", d_text.rows(), texts.rows())?;
    if let Some(w) = weight_sums.as_deref() {
        ensure_same("local_lse_backward weight sums", w.len(), images.rows())?;
    }

    for rows in images.blocks(cfg.rows) {
        let r0 = rows.offset() - images.offset();
        let l = &lse[r0..r0 + rows.rows()];
        for cols in texts.blocks(cfg.cols) {
            let c0 = cols.offset() - texts.offset();
            // recomputed, never stored from the forward pass
            let mut tile = similarity_tile(rows, cols, scale)?;
            for (p, &lp) in l.iter().enumerate() {
                let row = tile.values.row_mut(p);
                for v in row.iter_mut() {
                    *v = (*v - lp).exp();
                }
                if let Some(w) = weight_sums.as_deref_mut() {
                    w[r0 + p] = row.iter().fold(w[r0 + p], |s, &v| s + v);
                }
            }
            for p in 0..rows.rows() {
                let dst = d_image.row_mut(r0 + p);
                for q in 0..cols.rows() {
                    axpy(dst, tile.get(p, q) * scale, cols.row(q));
                }
            }
            for q in 0..cols.rows() {
                let dst = d_text.row_mut(c0 + q);
                for p in 0..rows.rows() {
                    axpy(dst, tile.get(p, q) * scale, rows.row(p));
                }
            }
        }
    }
    Ok(())
}

/// Positive-pair similarities `x_ii`.
pub fn diagonal<T: Real>(
    images: MatrixView<'_, T>,
    texts: MatrixView<'_, T>,
    scale: T,
) -> Result<Vec<T>> {
    ensure_same("diagonal rows", images.rows(), texts.rows())?;
    ensure_same("diagonal cols", images.cols(), texts.cols())?;
    Ok((0..images.rows())
        .map(|i| scale * dot(images.row(i), texts.row(i)))
        .collect())
}

/// `(1/b) * sum_i (l_i - x_ii)`.
pub fn loss_from_parts<T: Real>(diag: &[T], lse: &[T]) -> Result<T> {
    ensure_same("loss_from_parts", diag.len(), lse.len())?;
    if diag.is_empty() {
        return Err(Error::Argument("loss over an empty batch".into()));
    }
    let sum = lse.iter().zip(diag).fold(T::zero(), |s, (&l, &x)| s + (l - x));
    Ok(sum / T::of(diag.len() as f64))
}

/// `sum_i (l_i - x_ii)` without materializing the diagonal.
pub fn positive_gap_sum<T: Real>(
    images: MatrixView<'_, T>,
    texts: MatrixView<'_, T>,
    lse: &[T],
    scale: T,
) -> Result<T> {
    ensure_same("positive_gap_sum rows", images.rows(), texts.rows())?;
    ensure_same("positive_gap_sum lse", lse.len(), images.rows())?;
    ensure_same("positive_gap_sum cols", images.cols(), texts.cols())?;
    Ok(lse.iter().enumerate().fold(T::zero(), |s, (i, &l)| {
        s + (l - scale * dot(images.row(i), texts.row(i)))
    }))
}

/// Turns LSE-term partials into full loss gradients for a block whose positive partners
/// share row indices: `dI_i = (partial_i - scale*T_i) / b` and likewise for texts.
pub fn assemble_full_gradients<T: Real>(
    partial: GradPair<T>,
    images: MatrixView<'_, T>,
    texts: MatrixView<'_, T>,
    scale: T,
    batch: usize,
) -> Result<GradPair<T>> {
    ensure_same("assemble_full_gradients rows", images.rows(), texts.rows())?;
    ensure_same("assemble_full_gradients d_image", partial.d_image.rows(), images.rows())?;
    ensure_same("assemble_full_gradients d_text", partial.d_text.rows(), texts.rows())?;
    if batch == 0 {
        return Err(Error::Argument("global batch size must be positive".into()));
    }
    let inv_b = T::one() / T::of(batch as f64);
    let GradPair {
        mut d_image,
        mut d_text,
    } = partial;
    for i in 0..images.rows() {
        for (d, &t) in d_image.row_mut(i).iter_mut().zip(texts.row(i)) {
            *d = (*d - scale * t) * inv_b;
        }
        for (d, &v) in d_text.row_mut(i).iter_mut().zip(images.row(i)) {
            *d = (*d - scale * v) * inv_b;
        }
    }
    Ok(GradPair { d_image, d_text })
}

/// Single-worker tiled loss; also returns the global LSE vector.
pub fn tiled_loss<T: Real>(
    images: MatrixView<'_, T>,
    texts: MatrixView<'_, T>,
    cfg: &TileConfig,
    scale: T,
) -> Result<(T, LseAccumulator<T>)> {
    ensure_same("tiled_loss batch", images.rows(), texts.rows())?;
    let lse = local_lse_forward(images, texts, cfg, scale)?;
    let sum = positive_gap_sum(images, texts, lse.values(), scale)?;
    Ok((sum / T::of(images.rows() as f64), lse))
}

/// Single-worker tiled loss and full gradients.
pub fn tiled_loss_and_grads<T: Real>(
    images: MatrixView<'_, T>,
    texts: MatrixView<'_, T>,
    cfg: &TileConfig,
    scale: T,
) -> Result<(T, GradPair<T>)> {
    let (loss, lse) = tiled_loss(images, texts, cfg, scale)?;
    let partial = local_lse_backward(images, texts, lse.values(), cfg, scale)?;
    let grads = assemble_full_gradients(partial, images, texts, scale, images.rows())?;
    Ok((loss, grads))
}
