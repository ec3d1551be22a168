//! Sampled look-up tables.
//!
//! A table indexes `n` pixel values (each in `0..=255`) on a uniform grid with
//! spacing `2^q`, i.e. `2^(8-q) + 1` levels per axis running `0, 2^q, ..., 256`.
//! Each grid point stores `m` uint8 values. Storage is dense and row-major with
//! the last index axis varying fastest and the value channel innermost.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LutError {
    #[error("sampling exponent q={0} out of range 0..=8")]
    BadInterval(u8),
    #[error("index dimension n={0} unsupported (expected 3 or 4)")]
    BadDimension(u8),
    #[error("values per entry must be at least 1")]
    EmptyEntry,
    #[error("table size for q={q}, n={n}, m={m} overflows u64")]
    Overflow { q: u32, n: u32, m: u64 },
    #[error("payload holds {actual} bytes, expected {expected}")]
    PayloadLength { expected: usize, actual: usize },
}

/// Byte size of a table sampled with interval `2^q` over `n` index axes with
/// `m` values per entry: `(2^(8-q) + 1)^n * m`.
pub fn lut_size_bytes(q: u32, n: u32, m: u64) -> Result<u64, LutError> {
    let overflow = LutError::Overflow { q, n, m };
    if q > 8 {
        return Err(LutError::BadInterval(q.min(255) as u8));
    }
    if n == 0 {
        return Err(LutError::BadDimension(0));
    }
    if m == 0 {
        return Err(LutError::EmptyEntry);
    }
    let levels = (1u64 << (8 - q)) + 1;
    levels
        .checked_pow(n)
        .and_then(|e| e.checked_mul(m))
        .ok_or(overflow)
}

/// Uniform sampling of the 8-bit index axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SamplingGrid {
    q: u8,
}

impl Default for SamplingGrid {
    fn default() -> Self {
        Self { q: 4 }
    }
}

impl SamplingGrid {
    pub fn new(q: u8) -> Result<Self, LutError> {
        if q > 8 {
            return Err(LutError::BadInterval(q));
        }
        Ok(Self { q })
    }

    #[inline]
    pub fn q(&self) -> u8 {
        self.q
    }

    /// Grid spacing `W = 2^q`, also the interpolation denominator.
    #[inline]
    pub fn spacing(&self) -> u32 {
        1 << self.q
    }

    #[inline]
    pub fn levels(&self) -> usize {
        (1usize << (8 - self.q)) + 1
    }

    /// Grid value of level `i`; the top level is 256.
    #[inline]
    pub fn value(&self, i: usize) -> u32 {
        (i as u32) << self.q
    }

    /// Cell index and fractional offset of a query value.
    #[inline]
    pub fn locate(&self, x: u8) -> (usize, u32) {
        (((x as u32) >> self.q) as usize, (x as u32) & (self.spacing() - 1))
    }
}

/// A dense sampled table with `n` index axes and `m` values per entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LutTable {
    n: u8,
    m: u16,
    grid: SamplingGrid,
    values: Vec<u8>,
}

impl LutTable {
    pub fn new(n: u8, m: u16, grid: SamplingGrid, values: Vec<u8>) -> Result<Self, LutError> {
        if !(3..=4).contains(&n) {
            return Err(LutError::BadDimension(n));
        }
        if m == 0 {
            return Err(LutError::EmptyEntry);
        }
        let expected = lut_size_bytes(grid.q() as u32, n as u32, m as u64)? as usize;
        if values.len() != expected {
            return Err(LutError::PayloadLength {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self { n, m, grid, values })
    }

    pub fn filled(n: u8, m: u16, grid: SamplingGrid, value: u8) -> Result<Self, LutError> {
        if !(3..=4).contains(&n) {
            return Err(LutError::BadDimension(n));
        }
        if m == 0 {
            return Err(LutError::EmptyEntry);
        }
        let len = lut_size_bytes(grid.q() as u32, n as u32, m as u64)? as usize;
        Self::new(n, m, grid, vec![value; len])
    }

    #[inline]
    pub fn n(&self) -> u8 {
        self.n
    }

    #[inline]
    pub fn m(&self) -> u16 {
        self.m
    }

    #[inline]
    pub fn grid(&self) -> SamplingGrid {
        self.grid
    }

    #[inline]
    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<u8> {
        self.values
    }

    /// Number of grid points.
    pub fn entries(&self) -> usize {
        self.grid.levels().pow(self.n as u32)
    }

    /// Flat entry index of a grid coordinate (level indices, last axis fastest).
    #[inline]
    pub fn entry_index(&self, levels: &[usize]) -> usize {
        debug_assert_eq!(levels.len(), self.n as usize);
        let l = self.grid.levels();
        levels.iter().fold(0, |acc, &i| acc * l + i)
    }

    /// Stride (in entries) of each index axis.
    pub fn axis_strides(&self) -> [usize; 4] {
        let l = self.grid.levels();
        let n = self.n as usize;
        let mut strides = [0usize; 4];
        let mut s = 1;
        for d in (0..n).rev() {
            strides[d] = s;
            s *= l;
        }
        strides
    }

    /// The `m` stored values of an entry.
    #[inline]
    pub fn entry(&self, index: usize) -> &[u8] {
        let m = self.m as usize;
        &self.values[index * m..(index + 1) * m]
    }
}
