//! Binary visual-embedding files.
//!
//! Layout, all little-endian: magic `SPVT`, version u16, matrix count u32,
//! then per matrix a u32 row count, u32 column count, and rows x cols IEEE-754
//! f32 values in row-major order. Values are widened to f64 on load.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::numerics::RealMatrix;

pub const MAGIC: [u8; 4] = *b"SPVT";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum EmbeddingsError {
    #[error("cannot access embeddings file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"SPVT\", got {got:?}")]
    BadMagic { got: [u8; 4] },
    #[error("unsupported version {got}, expected {VERSION}")]
    BadVersion { got: u16 },
    #[error("truncated file: expected at least {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("non-finite value in matrix {matrix} at ({row}, {col})")]
    NonFinite {
        matrix: usize,
        row: usize,
        col: usize,
    },
}

/// Serialize matrices into the binary layout. Values are stored as f32; pass
/// f32-representable data if bit-exact round-trips matter.
pub fn encode_embeddings(matrices: &[RealMatrix]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(matrices.len() as u32).to_le_bytes());
    for m in matrices {
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for &v in m.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_embeddings(path: &Path, matrices: &[RealMatrix]) -> Result<(), EmbeddingsError> {
    std::fs::write(path, encode_embeddings(matrices)).map_err(|source| EmbeddingsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], EmbeddingsError> {
        if self.offset + len > self.bytes.len() {
            return Err(EmbeddingsError::Truncated {
                expected: self.offset + len,
                actual: self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(slice)
    }

    fn u16_le(&mut self) -> Result<u16, EmbeddingsError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32_le(&mut self) -> Result<u32, EmbeddingsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<RealMatrix>, EmbeddingsError> {
    let mut cursor = Cursor { bytes, offset: 0 };
    let magic: [u8; 4] = cursor.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(EmbeddingsError::BadMagic { got: magic });
    }
    let version = cursor.u16_le()?;
    if version != VERSION {
        return Err(EmbeddingsError::BadVersion { got: version });
    }
    let count = cursor.u32_le()? as usize;
    let mut matrices = Vec::with_capacity(count);
    for index in 0..count {
        let rows = cursor.u32_le()? as usize;
        let cols = cursor.u32_le()? as usize;
        let payload = cursor.take(rows * cols * 4)?;
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in payload.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        let matrix = RealMatrix::from_vec(rows, cols, data).expect("length matches header");
        if let Some((row, col)) = matrix.find_non_finite() {
            return Err(EmbeddingsError::NonFinite {
                matrix: index,
                row,
                col,
            });
        }
        matrices.push(matrix);
    }
    Ok(matrices)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<RealMatrix>, EmbeddingsError> {
    let bytes = std::fs::read(path).map_err(|source| EmbeddingsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_embeddings(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64;

    fn f32_matrix(seed: u64, rows: usize, cols: usize) -> RealMatrix {
        let mut rng = XorShift64::new(seed);
        let data = (0..rows * cols)
            .map(|_| (rng.next_symmetric(1.0) as f32) as f64)
            .collect();
        RealMatrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let matrices = vec![f32_matrix(1, 6, 4), f32_matrix(2, 3, 4)];
        let bytes = encode_embeddings(&matrices);
        let back = decode_embeddings(&bytes).unwrap();
        assert_eq!(matrices, back);
    }

    #[test]
    fn truncated_file_names_byte_counts() {
        let matrices = vec![f32_matrix(3, 4, 4)];
        let mut bytes = encode_embeddings(&matrices);
        let full = bytes.len();
        bytes.truncate(full - 5);
        let err = decode_embeddings(&bytes).unwrap_err();
        match err {
            EmbeddingsError::Truncated { expected, actual } => {
                assert_eq!(expected, full);
                assert_eq!(actual, full - 5);
            }
            other => panic!("expected truncation, got {other}"),
        }
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = encode_embeddings(&[f32_matrix(4, 2, 2)]);
        bytes[0] = b'X';
        assert!(matches!(
            decode_embeddings(&bytes),
            Err(EmbeddingsError::BadMagic { .. })
        ));
    }

    #[test]
    fn nan_payload_is_rejected() {
        let mut m = f32_matrix(5, 2, 3);
        m.set(1, 2, f64::NAN);
        let bytes = encode_embeddings(&[m]);
        let err = decode_embeddings(&bytes).unwrap_err();
        match err {
            EmbeddingsError::NonFinite { matrix, row, col } => {
                assert_eq!((matrix, row, col), (0, 1, 2));
            }
            other => panic!("expected non-finite, got {other}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = encode_embeddings(&[f32_matrix(6, 2, 2)]);
        bytes[4] = 9;
        assert!(matches!(
            decode_embeddings(&bytes),
            Err(EmbeddingsError::BadVersion { got: 9 })
        ));
    }
}
