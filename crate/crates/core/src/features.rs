//! Synthetic feature generation and the raw binary feature-file format.
//!
//! File layout (little-endian): magic `TLSE`, `u32` batch size, `u32` dimension, then the
//! image matrix and the text matrix as row-major `f64` payloads.

use std::io::{Read, Write};

use rand::prelude::*;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"TLSE";

/// Deterministic unit-norm image and text features: isotropic Gaussian rows, L2-normalized.
pub fn generate_features<T: Real>(seed: u64, batch: usize, dim: usize) -> Result<(Matrix<T>, Matrix<T>)> {
    if batch == 0 || dim == 0 {
        return Err(Error::Config(format!(
            "batch size and dimension must be at least 1, got {batch}x{dim}"
        )));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let images = normalized_rows(&mut rng, batch, dim)?;
    let texts = normalized_rows(&mut rng, batch, dim)?;
    Ok((images, texts))
}

fn normalized_rows<T: Real>(rng: &mut StdRng, rows: usize, dim: usize) -> Result<Matrix<T>> {
    let mut data = Vec::with_capacity(rows * dim);
    let mut row = vec![0.0f64; dim];
    for _ in 0..rows {
        loop {
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                data.extend(row.iter().map(|v| T::of(v / norm)));
                break;
            }
        }
    }
    Matrix::from_vec(rows, dim, data)
}

pub fn write_features(mut out: impl Write, images: &Matrix<f64>, texts: &Matrix<f64>) -> Result<()> {
    if images.rows() != texts.rows() || images.cols() != texts.cols() {
        return Err(Error::Shape {
            op: "write_features",
            left: images.rows() * images.cols(),
            right: texts.rows() * texts.cols(),
        });
    }
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} does not fit in u32")))
    };
    out.write_all(MAGIC)?;
    out.write_all(&to_u32(images.rows())?.to_le_bytes())?;
    out.write_all(&to_u32(images.cols())?.to_le_bytes())?;
    for m in [images, texts] {
        for v in m.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_features(mut input: impl Read) -> Result<(Matrix<f64>, Matrix<f64>)> {
    let mut header = [0u8; 12];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &header[..4])));
    }
    let b = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if b == 0 || c == 0 {
        return Err(Error::Format(format!("empty feature matrices ({b}x{c})")));
    }
    let mut read_matrix = |what: &str| -> Result<Matrix<f64>> {
        let mut bytes = vec![0u8; b * c * 8];
        input
            .read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("truncated {what} payload")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
            .collect::<Vec<_>>();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite entry in {what} payload")));
        }
        Matrix::from_vec(b, c, data)
    };
    let images = read_matrix("image")?;
    let texts = read_matrix("text")?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok((images, texts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let (a, b) = generate_features::<f64>(5, 16, 8).unwrap();
        let (c, d) = generate_features::<f64>(5, 16, 8).unwrap();
        assert_eq!((a.as_slice(), b.as_slice()), (c.as_slice(), d.as_slice()));
        let (e, _) = generate_features::<f64>(6, 16, 8).unwrap();
        assert_ne!(a.as_slice(), e.as_slice());
        assert_ne!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn rows_are_unit_norm() {
        let (a, b) = generate_features::<f64>(1, 64, 3).unwrap();
        for m in [&a, &b] {
            for r in 0..m.rows() {
                let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
        let (f, _) = generate_features::<f32>(1, 8, 1).unwrap();
        assert!(f.as_slice().iter().all(|v| v.abs() == 1.0));
    }

    #[test]
    fn empty_shapes_are_config_errors() {
        assert!(matches!(generate_features::<f64>(0, 0, 4), Err(Error::Config(_))));
    }

    #[test]
    fn file_layout_is_exact() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![-0.5, 0.25]]).unwrap();
        let mut bytes = Vec::new();
        write_features(&mut bytes, &a, &b).unwrap();
        assert_eq!(bytes.len(), 12 + 4 * 8);
        assert_eq!(&bytes[..12], b"TLSE\x01\x00\x00\x00\x02\x00\x00\x00");
        assert_eq!(&bytes[12..20], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[36..44], &0.25f64.to_le_bytes());
        let (c, d) = read_features(bytes.as_slice()).unwrap();
        assert_eq!((c, d), (a, b));
    }

    #[test]
    fn malformed_files_are_rejected() {
        let a = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let mut bytes = Vec::new();
        write_features(&mut bytes, &a, &a).unwrap();
        assert!(matches!(read_features(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_features(bad.as_slice()), Err(Error::Format(_))));
        bytes.push(0);
        assert!(matches!(read_features(bytes.as_slice()), Err(Error::Format(_))));
    }
}
