//! Row-major matrices backed by tracked buffers.

use std::fmt;
use std::ops::{Deref, DerefMut, Range};

use crate::error::{ensure_same, Error, Result};
use crate::memory_model::tracker::{self, Lease};

/// A heap buffer whose bytes are charged to the tracker active when it was created.
pub struct Buffer<T> {
    data: Vec<T>,
    lease: Option<Lease>,
}

impl<T: Copy + Default> Buffer<T> {
    pub fn zeros(len: usize) -> Result<Self> {
        Self::filled(len, T::default())
    }

    pub fn filled(len: usize, value: T) -> Result<Self> {
        // charge before allocating so a refused request never touches the heap
        let lease = tracker::charge_current(bytes_of::<T>(len), true)?;
        Ok(Self {
            data: vec![value; len],
            lease,
        })
    }
}

impl<T> Buffer<T> {
    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        let lease = tracker::charge_current(bytes_of::<T>(data.len()), true)?;
        Ok(Self { data, lease })
    }

    /// Re-attributes the buffer to the tracker and category active on this thread.
    pub fn retrack(&mut self) {
        self.lease = None;
        self.lease = tracker::charge_current(bytes_of::<T>(self.data.len()), false)
            .ok()
            .flatten();
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn is_tracked(&self) -> bool {
        self.lease.is_some()
    }
}

fn bytes_of<T>(len: usize) -> u64 {
    (len * std::mem::size_of::<T>()) as u64
}

impl<T: Clone> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        let lease = tracker::charge_current(bytes_of::<T>(self.data.len()), false)
            .ok()
            .flatten();
        Self {
            data: self.data.clone(),
            lease,
        }
    }
}

impl<T> Deref for Buffer<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for Buffer<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T: fmt::Debug> fmt::Debug for Buffer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.data.fmt(f)
    }
}

impl<T: PartialEq> PartialEq for Buffer<T> {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    buf: Buffer<T>,
}

/// Row-normalized embeddings, one sample per row.
pub type FeatureMatrix<T> = Matrix<T>;

impl<T: Copy + Default> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Ok(Self {
            rows,
            cols,
            buf: Buffer::zeros(rows * cols)?,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    /// Copies a view into an owned matrix charged to the current tracker.
    pub fn from_view(view: MatrixView<'_, T>) -> Result<Self> {
        Self::from_vec(view.rows, view.cols, view.data.to_vec())
    }
}

impl<T> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        ensure_same("matrix from_vec", rows * cols, data.len())?;
        Ok(Self {
            rows,
            cols,
            buf: Buffer::from_vec(data)?,
        })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self>
    where
        T: Clone,
    {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            ensure_same("matrix from_rows", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.buf[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.cols;
        &mut self.buf[r * cols..(r + 1) * cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.buf
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.buf
    }

    pub fn into_vec(self) -> Vec<T> {
        self.buf.into_vec()
    }

    pub fn retrack(&mut self) {
        self.buf.retrack();
    }

    pub fn view(&self) -> MatrixView<'_, T> {
        MatrixView {
            data: &self.buf,
            rows: self.rows,
            cols: self.cols,
            offset: 0,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> T
    where
        T: Copy,
    {
        self.buf[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.cols;
        self.buf[r * cols + c] = v;
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<_> = (0..self.rows).map(|r| self.row(r)).collect();
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("data", &rows)
            .finish()
    }
}

/// Borrowed contiguous block of rows. `offset` is the index of the first row in the
/// matrix the view was cut from.
#[derive(Clone, Copy, Debug)]
pub struct MatrixView<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    offset: usize,
}

impl<'a, T> MatrixView<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Result<Self> {
        ensure_same("matrix view", rows * cols, data.len())?;
        Ok(Self {
            data,
            rows,
            cols,
            offset: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn row(&self, r: usize) -> &'a [T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Sub-view of rows `range` (relative to this view).
    pub fn slice_rows(&self, range: Range<usize>) -> Result<MatrixView<'a, T>> {
        if range.start > range.end || range.end > self.rows {
            return Err(Error::Argument(format!(
                "row range {range:?} out of bounds for {} rows",
                self.rows
            )));
        }
        Ok(MatrixView {
            data: &self.data[range.start * self.cols..range.end * self.cols],
            rows: range.end - range.start,
            cols: self.cols,
            offset: self.offset + range.start,
        })
    }

    pub fn as_slice(&self) -> &'a [T] {
        self.data
    }

    /// Splits the view into consecutive blocks of at most `size` rows.
    pub fn blocks(&self, size: usize) -> impl Iterator<Item = MatrixView<'a, T>> + '_ {
        let size = size.max(1);
        (0..self.rows).step_by(size).map(move |start| {
            let end = (start + size).min(self.rows);
            MatrixView {
                data: &self.data[start * self.cols..end * self.cols],
                rows: end - start,
                cols: self.cols,
                offset: self.offset + start,
            }
        })
    }
}
