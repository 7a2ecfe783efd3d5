//! Packed ±1 hash codes and the code file format.
//!
//! Codes are stored one row per object, bit-packed into 64-bit words
//! (bit value 1 ↔ code entry +1). Hamming distance is XOR + popcount
//! over the packed words, which equals `¼‖h_i − h_j‖²` on the ±1
//! vectors.
//!
//! File format: 8-byte header — 2-byte magic `"DH"`, `c` as u16
//! little-endian, `n` as u32 little-endian — followed by `n` rows of
//! `ceil(c/8)` bytes each (LSB-first within each byte, padding bits
//! zero).

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{DmhError, Result};
use crate::Mat;

const CODE_MAGIC: [u8; 2] = *b"DH";

/// A set of `n` binary codes of `c` bits each, bit-packed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSet {
    n: usize,
    c: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl CodeSet {
    /// Pack a ±1 matrix (rows = objects, columns = bits).
    pub fn from_signs(h: &Mat) -> Result<Self> {
        if let Some(bad) = h.iter().find(|v| **v != 1.0 && **v != -1.0) {
            return Err(DmhError::Data(format!(
                "code matrix entries must be exactly +1 or -1, found {bad}"
            )));
        }
        let (n, c) = h.dim();
        let words_per_row = c.div_ceil(64).max(1);
        let mut words = vec![0u64; n * words_per_row];
        for (i, row) in h.outer_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    words[i * words_per_row + j / 64] |= 1 << (j % 64);
                }
            }
        }
        Ok(CodeSet { n, c, words_per_row, words })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn row_words(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    pub fn bit(&self, i: usize, j: usize) -> bool {
        self.words[i * self.words_per_row + j / 64] >> (j % 64) & 1 == 1
    }

    /// Hamming distance between row `i` of `self` and row `j` of `other`.
    pub fn hamming(&self, i: usize, other: &CodeSet, j: usize) -> u32 {
        self.row_words(i)
            .iter()
            .zip(other.row_words(j))
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    /// Unpack back to a ±1 matrix.
    pub fn to_signs(&self) -> Mat {
        Array2::from_shape_fn((self.n, self.c), |(i, j)| if self.bit(i, j) { 1.0 } else { -1.0 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c_u16 = u16::try_from(self.c)
            .map_err(|_| DmhError::Data(format!("code length {} exceeds file format limit", self.c)))?;
        let n_u32 = u32::try_from(self.n)
            .map_err(|_| DmhError::Data(format!("code count {} exceeds file format limit", self.n)))?;
        let row_bytes = self.c.div_ceil(8);
        let mut out = Vec::with_capacity(8 + self.n * row_bytes);
        out.extend_from_slice(&CODE_MAGIC);
        out.extend_from_slice(&c_u16.to_le_bytes());
        out.extend_from_slice(&n_u32.to_le_bytes());
        for i in 0..self.n {
            let le: Vec<u8> = self.row_words(i).iter().flat_map(|w| w.to_le_bytes()).collect();
            out.extend_from_slice(&le[..row_bytes]);
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 8 {
            return Err(DmhError::Data(format!("{}: too short for a code file header", path.display())));
        }
        if bytes[0..2] != CODE_MAGIC {
            return Err(DmhError::Data(format!("{}: bad magic, not a code file", path.display())));
        }
        let c = u16::from_le_bytes([bytes[2], bytes[3]]) as usize;
        let n = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        if c == 0 {
            return Err(DmhError::Data("code file declares zero bits per code".into()));
        }
        let row_bytes = c.div_ceil(8);
        let expected = 8 + n * row_bytes;
        if bytes.len() != expected {
            return Err(DmhError::Data(format!(
                "{}: expected {expected} bytes for n={n}, c={c}, found {}",
                path.display(),
                bytes.len()
            )));
        }
        let words_per_row = c.div_ceil(64).max(1);
        let mut words = vec![0u64; n * words_per_row];
        for i in 0..n {
            let row = &bytes[8 + i * row_bytes..8 + (i + 1) * row_bytes];
            let mut le = vec![0u8; words_per_row * 8];
            le[..row_bytes].copy_from_slice(row);
            for (w, chunk) in words[i * words_per_row..].iter_mut().zip(le.chunks_exact(8)) {
                *w = u64::from_le_bytes(chunk.try_into().unwrap());
            }
            // Padding bits beyond c must be zero; reject silent corruption.
            if c % 8 != 0 && row[row_bytes - 1] >> (c % 8) != 0 {
                return Err(DmhError::Data(format!(
                    "{}: nonzero padding bits in row {i}",
                    path.display()
                )));
            }
        }
        Ok(CodeSet { n, c, words_per_row, words })
    }
}
