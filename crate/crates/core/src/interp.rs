//! Exact simplex interpolation over a sampled grid.
//!
//! A query splits into a cell index and a fraction per axis. Sorting the
//! fractions in descending order picks one of the `n!` simplices of the cell;
//! its `n + 1` vertices are walked from the cell origin by stepping one axis at
//! a time, and the barycentric weights are differences of consecutive sorted
//! fractions. All weights are integers summing to `W = 2^q`, so results are
//! returned as numerators over `W` with no rounding.

use crate::lut::LutTable;

/// Vertices and weights of the simplex containing one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Simplex {
    /// Number of vertices, `n + 1`.
    pub len: usize,
    /// Flat entry indices of the vertices, walk order.
    pub vertex: [usize; 5],
    /// Integer weights aligned with `vertex`; they sum to `den`.
    pub weight: [u32; 5],
    /// Axis stepped between vertex `k` and `k + 1`.
    pub axis: [u8; 4],
    pub den: u32,
}

impl Simplex {
    /// Locates the simplex for query `x` (one byte per index axis).
    #[inline]
    pub fn locate(table: &LutTable, x: &[u8]) -> Simplex {
        let n = table.n() as usize;
        debug_assert_eq!(x.len(), n);
        let grid = table.grid();
        let strides = table.axis_strides();
        let den = grid.spacing();

        let mut frac = [0u32; 4];
        let mut base = 0usize;
        for d in 0..n {
            let (cell, f) = grid.locate(x[d]);
            base += cell * strides[d];
            frac[d] = f;
        }

        // Descending by fraction, ascending axis on ties (stable insertion).
        let mut axis = [0u8, 1, 2, 3];
        for i in 1..n {
            let mut j = i;
            while j > 0 && frac[axis[j] as usize] > frac[axis[j - 1] as usize] {
                axis.swap(j, j - 1);
                j -= 1;
            }
        }

        let mut vertex = [0usize; 5];
        let mut weight = [0u32; 5];
        vertex[0] = base;
        let mut prev = den;
        for k in 0..n {
            let f = frac[axis[k] as usize];
            weight[k] = prev - f;
            prev = f;
            vertex[k + 1] = vertex[k] + strides[axis[k] as usize];
        }
        weight[n] = prev;
        debug_assert_eq!(weight[..=n].iter().sum::<u32>(), den);

        Simplex {
            len: n + 1,
            vertex,
            weight,
            axis,
            den,
        }
    }

    /// Adds `scale * sum_k weight_k * value_k` into `out` for every value
    /// channel of the table.
    #[inline]
    pub fn accumulate(&self, table: &LutTable, scale: u32, out: &mut [u32]) {
        let m = table.m() as usize;
        debug_assert_eq!(out.len(), m);
        let values = table.values();
        for k in 0..self.len {
            let w = self.weight[k] * scale;
            if w == 0 {
                continue;
            }
            let entry = &values[self.vertex[k] * m..self.vertex[k] * m + m];
            for (o, &v) in out.iter_mut().zip(entry) {
                *o += w * v as u32;
            }
        }
    }
}

/// Interpolated value channels as numerators over a shared denominator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interpolated {
    pub num: Vec<u32>,
    pub den: u32,
}

impl Interpolated {
    pub fn as_f64(&self) -> Vec<f64> {
        self.num.iter().map(|&v| v as f64 / self.den as f64).collect()
    }
}

fn interp(table: &LutTable, x: &[u8]) -> Interpolated {
    let s = Simplex::locate(table, x);
    let mut num = vec![0u32; table.m() as usize];
    s.accumulate(table, 1, &mut num);
    Interpolated { num, den: s.den }
}

/// 4D simplex interpolation. Panics if the table is not 4-dimensional.
pub fn simplex_interp_4d(table: &LutTable, x: [u8; 4]) -> Interpolated {
    assert_eq!(table.n(), 4, "simplex_interp_4d needs a 4D table");
    interp(table, &x)
}

/// 3D tetrahedral interpolation. Panics if the table is not 3-dimensional.
pub fn tetrahedral_interp_3d(table: &LutTable, x: [u8; 3]) -> Interpolated {
    assert_eq!(table.n(), 3, "tetrahedral_interp_3d needs a 3D table");
    interp(table, &x)
}
