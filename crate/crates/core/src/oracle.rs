//! Brute-force references: the full `b x b` similarity matrix, closed-form dense gradients and
//! central finite differences. Deliberately quadratic in memory; the dense matrix is charged to
//! the loss-buffer category of whichever tracker is active.

use crate::core_tiles::GradPair;
use crate::error::{ensure_same, Error, Result};
use crate::matrix::{Buffer, Matrix, MatrixView};
use crate::memory_model::tracker::{scoped, Category};
use crate::real::Real;

/// Fully materialized forward pass.
#[derive(Debug)]
pub struct DenseLossResult<T> {
    pub loss: T,
    pub similarity: Matrix<T>,
    pub lse: Vec<T>,
}

fn inner<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for k in 0..a.len() {
        s = s + a[k] * b[k];
    }
    s
}

fn check_pair<T>(images: &Matrix<T>, texts: &Matrix<T>) -> Result<()> {
    ensure_same("oracle batch", images.rows(), texts.rows())?;
    ensure_same("oracle dim", images.cols(), texts.cols())?;
    if images.rows() == 0 {
        return Err(Error::Argument("oracle needs a non-empty batch".into()));
    }
    Ok(())
}

fn similarity_matrix<T: Real>(
    images: MatrixView<'_, T>,
    texts: MatrixView<'_, T>,
    scale: T,
) -> Result<Matrix<T>> {
    let _loss = scoped(Category::Loss);
    let mut x = Matrix::zeros(images.rows(), texts.rows())?;
    for i in 0..images.rows() {
        for j in 0..texts.rows() {
            x.set(i, j, scale * inner(images.row(i), texts.row(j)));
        }
    }
    Ok(x)
}

fn row_lse<T: Real>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let s = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
    m + s.ln()
}

/// Vanilla image-to-text contrastive loss over the full similarity matrix.
pub fn naive_loss<T: Real>(
    images: &Matrix<T>,
    texts: &Matrix<T>,
    scale: T,
) -> Result<DenseLossResult<T>> {
    check_pair(images, texts)?;
    let b = images.rows();
    let similarity = similarity_matrix(images.view(), texts.view(), scale)?;
    let lse: Vec<T> = (0..b).map(|i| row_lse(similarity.row(i))).collect();
    let mut sum = T::zero();
    for (i, &l) in lse.iter().enumerate() {
        sum = sum + (l - similarity.get(i, i));
    }
    Ok(DenseLossResult {
        loss: sum / T::of(b as f64),
        similarity,
        lse,
    })
}

/// Closed-form gradients of [`naive_loss`] with respect to both feature matrices.
pub fn naive_grads<T: Real>(images: &Matrix<T>, texts: &Matrix<T>, scale: T) -> Result<GradPair<T>> {
    naive_loss_and_grads(images, texts, scale).map(|(_, g)| g)
}

/// Loss and gradients sharing a single dense matrix (turned into softmax weights in place).
pub fn naive_loss_and_grads<T: Real>(
    images: &Matrix<T>,
    texts: &Matrix<T>,
    scale: T,
) -> Result<(T, GradPair<T>)> {
    check_pair(images, texts)?;
    let b = images.rows();
    let block = dense_block(images.view(), texts.view(), 0, scale)?;
    let inv_b = T::one() / T::of(b as f64);
    let mut grads = block.grads;
    for v in grads.d_image.as_mut_slice().iter_mut().chain(grads.d_text.as_mut_slice()) {
        *v = *v * inv_b;
    }
    Ok((block.gap_sum * inv_b, grads))
}

/// Dense result for a contiguous block of image rows against every text.
pub struct DenseBlock<T> {
    /// `sum_r (l_r - x_{r, offset + r})` over the block's rows.
    pub gap_sum: T,
    pub lse: Vec<T>,
    /// Gradients of `gap_sum`: `d_image` covers the block rows, `d_text` every text row.
    pub grads: GradPair<T>,
}

/// Image rows `images` (whose positive partners are texts `diag_offset..`) against all
/// `texts`, materializing the full `rows x texts.rows()` block.
pub fn dense_block<T: Real>(
    images: MatrixView<'_, T>,
    texts: MatrixView<'_, T>,
    diag_offset: usize,
    scale: T,
) -> Result<DenseBlock<T>> {
    ensure_same("dense_block dim", images.cols(), texts.cols())?;
    if diag_offset + images.rows() > texts.rows() {
        return Err(Error::Argument(format!(
            "positive partners {}..{} exceed {} texts",
            diag_offset,
            diag_offset + images.rows(),
            texts.rows()
        )));
    }
    let (rows, cols, dim) = (images.rows(), texts.rows(), images.cols());
    let mut x = similarity_matrix(images, texts, scale)?;
    let lse_buf = {
        let _loss = scoped(Category::Loss);
        Buffer::<T>::zeros(rows)?
    };
    let mut lse = lse_buf.into_vec();
    let mut gap_sum = T::zero();
    for (i, l) in lse.iter_mut().enumerate() {
        *l = row_lse(x.row(i));
        gap_sum = gap_sum + (*l - x.get(i, diag_offset + i));
        for v in x.row_mut(i) {
            *v = (*v - *l).exp();
        }
    }

    let mut grads = GradPair::zeros(rows, cols, dim)?;
    for i in 0..rows {
        for j in 0..cols {
            let w = x.get(i, j) * scale;
            for k in 0..dim {
                let di = grads.d_image.get(i, k) + w * texts.row(j)[k];
                grads.d_image.set(i, k, di);
                let dt = grads.d_text.get(j, k) + w * images.row(i)[k];
                grads.d_text.set(j, k, dt);
            }
        }
        for k in 0..dim {
            let di = grads.d_image.get(i, k) - scale * texts.row(diag_offset + i)[k];
            grads.d_image.set(i, k, di);
            let dt = grads.d_text.get(diag_offset + i, k) - scale * images.row(i)[k];
            grads.d_text.set(diag_offset + i, k, dt);
        }
    }
    Ok(DenseBlock {
        gap_sum,
        lse,
        grads,
    })
}

/// Symmetric loss `(L_I + L_T) / 2`, the text-to-image half computed with roles swapped.
pub fn bidirectional_loss<T: Real>(images: &Matrix<T>, texts: &Matrix<T>, scale: T) -> Result<T> {
    let l_i = naive_loss(images, texts, scale)?.loss;
    let l_t = naive_loss(texts, images, scale)?.loss;
    Ok((l_i + l_t) / T::of(2.0))
}

/// Gradients of [`bidirectional_loss`].
pub fn bidirectional_grads<T: Real>(
    images: &Matrix<T>,
    texts: &Matrix<T>,
    scale: T,
) -> Result<GradPair<T>> {
    let fwd = naive_grads(images, texts, scale)?;
    let rev = naive_grads(texts, images, scale)?;
    let half = T::of(0.5);
    let combine = |a: &Matrix<T>, b: &Matrix<T>| {
        Matrix::from_vec(
            a.rows(),
            a.cols(),
            a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| (x + y) * half).collect(),
        )
    };
    Ok(GradPair {
        d_image: combine(&fwd.d_image, &rev.d_text)?,
        d_text: combine(&fwd.d_text, &rev.d_image)?,
    })
}

/// Loss and gradients computed from logits shifted by their row max up front:
/// `x'_ij = x_ij - max_j x_ij`, then plain `log sum_j exp(x'_ij) - x'_ii` per row and softmax
/// weights `exp(x'_ij) / sum_j exp(x'_ij)`. Independent of the LSE helpers used elsewhere.
pub fn shifted_logits_loss_and_grads<T: Real>(
    images: &Matrix<T>,
    texts: &Matrix<T>,
    scale: T,
) -> Result<(T, GradPair<T>)> {
    check_pair(images, texts)?;
    let (b, dim) = (images.rows(), images.cols());
    let mut x = similarity_matrix(images.view(), texts.view(), scale)?;
    let mut gap = T::zero();
    for i in 0..b {
        let row = x.row_mut(i);
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        for v in row.iter_mut() {
            *v = *v - m;
        }
        let sum: T = row.iter().map(|v| v.exp()).sum();
        gap = gap + sum.ln() - row[i];
        for v in row.iter_mut() {
            *v = v.exp() / sum;
        }
    }
    let inv_b = T::one() / T::of(b as f64);
    let mut grads = GradPair::zeros(b, b, dim)?;
    for i in 0..b {
        for j in 0..b {
            let w = (x.get(i, j) - if i == j { T::one() } else { T::zero() }) * scale * inv_b;
            for k in 0..dim {
                let di = grads.d_image.get(i, k) + w * texts.get(j, k);
                grads.d_image.set(i, k, di);
                let dt = grads.d_text.get(j, k) + w * images.get(i, k);
                grads.d_text.set(j, k, dt);
            }
        }
    }
    Ok((gap * inv_b, grads))
}

/// `log sum_j exp(x_ij)` with no shift at all; overflows once similarities pass ~709 (f64).
pub fn unshifted_lse<T: Real>(images: &Matrix<T>, texts: &Matrix<T>, scale: T) -> Result<Vec<T>> {
    check_pair(images, texts)?;
    let x = similarity_matrix(images.view(), texts.view(), scale)?;
    Ok((0..x.rows())
        .map(|i| x.row(i).iter().map(|v| v.exp()).sum::<T>().ln())
        .collect())
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central-difference estimate of `d loss / d point[r][c]` for every entry of `point`.
pub fn finite_diff_grad(
    point: &Matrix<f64>,
    h: f64,
    mut loss: impl FnMut(&Matrix<f64>) -> f64,
) -> Result<Matrix<f64>> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = point.clone();
    let mut out = Matrix::zeros(point.rows(), point.cols())?;
    for r in 0..point.rows() {
        for c in 0..point.cols() {
            let x0 = point.get(r, c);
            let d = central_difference(
                |x| {
                    probe.set(r, c, x);
                    loss(&probe)
                },
                x0,
                h,
            );
            probe.set(r, c, x0);
            out.set(r, c, d);
        }
    }
    Ok(out)
}
