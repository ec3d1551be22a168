//! Building tables by exhaustive traversal of the sampled input grid, and
//! checking tables produced elsewhere before they enter a pipeline.

use std::fmt;

use rayon::prelude::*;

use crate::format::{read_lut, LutFile, Role};
use crate::image::round_half_up_clamp_f64;
use crate::lut::{LutError, LutTable, SamplingGrid};
use crate::pattern::Pattern;

/// All `levels^n` grid tuples in row-major order (last axis fastest).
/// Values run `0, 2^q, ..., 256`.
pub fn enumerate_grid(n: u8, q: u8) -> Result<GridTuples, LutError> {
    let grid = SamplingGrid::new(q)?;
    if !(3..=4).contains(&n) {
        return Err(LutError::BadDimension(n));
    }
    Ok(GridTuples {
        grid,
        n: n as usize,
        next: 0,
        total: grid.levels().pow(n as u32),
    })
}

#[derive(Debug, Clone)]
pub struct GridTuples {
    grid: SamplingGrid,
    n: usize,
    next: usize,
    total: usize,
}

impl Iterator for GridTuples {
    type Item = Vec<u32>;

    fn next(&mut self) -> Option<Vec<u32>> {
        if self.next >= self.total {
            return None;
        }
        let t = grid_tuple(self.grid, self.n, self.next);
        self.next += 1;
        Some(t)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.total - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for GridTuples {}

fn grid_tuple(grid: SamplingGrid, n: usize, mut flat: usize) -> Vec<u32> {
    let l = grid.levels();
    let mut t = vec![0u32; n];
    for d in (0..n).rev() {
        t[d] = grid.value(flat % l);
        flat /= l;
    }
    t
}

/// Caches `f` on every grid tuple. `f` sees pixel values, with the top grid
/// level 256 presented as 255; its outputs are clamped and rounded half up.
pub fn cache_function<F>(n: u8, m: u16, q: u8, f: F) -> Result<LutTable, LutError>
where
    F: Fn(&[u8]) -> Vec<f64> + Sync,
{
    let grid = SamplingGrid::new(q)?;
    let mut table = LutTable::filled(n, m, grid, 0)?;
    let m = m as usize;
    table
        .values_mut()
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(flat, out)| {
            let input: Vec<u8> = grid_tuple(grid, n as usize, flat)
                .into_iter()
                .map(|v| v.min(255) as u8)
                .collect();
            let values = f(&input);
            assert_eq!(values.len(), m, "cached function returned {} values, expected {m}", values.len());
            for (o, v) in out.iter_mut().zip(values) {
                *o = round_half_up_clamp_f64(v);
            }
        });
    Ok(table)
}

/// Functions the command line can cache without a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinFunction {
    /// Every output value repeats the anchor pixel.
    CopyAnchor,
    /// Mean of the four indexed pixels.
    Mean,
    /// Bilinear upsampling from the anchor and its right, lower and diagonal
    /// neighbours, in pattern order.
    Bilinear,
    /// Channel table returning `(r, g, b)`.
    IdentityRgb,
    /// Channel table returning `(g, b, r)`.
    RotateRgb,
}

impl BuiltinFunction {
    pub const ALL: [BuiltinFunction; 5] = [
        BuiltinFunction::CopyAnchor,
        BuiltinFunction::Mean,
        BuiltinFunction::Bilinear,
        BuiltinFunction::IdentityRgb,
        BuiltinFunction::RotateRgb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinFunction::CopyAnchor => "copy-anchor",
            BuiltinFunction::Mean => "mean",
            BuiltinFunction::Bilinear => "bilinear",
            BuiltinFunction::IdentityRgb => "identity-rgb",
            BuiltinFunction::RotateRgb => "rotate-rgb",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn is_channel(self) -> bool {
        matches!(self, BuiltinFunction::IdentityRgb | BuiltinFunction::RotateRgb)
    }

    /// Evaluates the function on pixel inputs for upscale `r`.
    pub fn eval(self, x: &[u8], r: usize) -> Vec<f64> {
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        match self {
            BuiltinFunction::CopyAnchor => vec![x[0]; r * r],
            BuiltinFunction::Mean => vec![x.iter().sum::<f64>() / x.len() as f64; r * r],
            BuiltinFunction::Bilinear => {
                let mut out = Vec::with_capacity(r * r);
                for a in 0..r {
                    for b in 0..r {
                        let (v, u) = (a as f64 / r as f64, b as f64 / r as f64);
                        out.push(
                            (1.0 - v) * (1.0 - u) * x[0]
                                + (1.0 - v) * u * x[1]
                                + v * (1.0 - u) * x[2]
                                + v * u * x[3],
                        );
                    }
                }
                out
            }
            BuiltinFunction::IdentityRgb => x[..3].to_vec(),
            BuiltinFunction::RotateRgb => vec![x[1], x[2], x[0]],
        }
    }

    /// Caches the function into a ready-to-write file.
    pub fn build(self, q: u8, pattern: Option<Pattern>, r: u8, role: Role) -> Result<LutFile, LutError> {
        let (n, m) = if self.is_channel() {
            (3, 3)
        } else {
            (4, (r as u16) * (r as u16))
        };
        let table = cache_function(n, m, q, |x| self.eval(x, r as usize))?;
        let (role, pattern, upscale) = if self.is_channel() {
            (Role::Channel, None, 1)
        } else {
            (role, Some(pattern.unwrap_or_else(Pattern::s)), r)
        };
        Ok(LutFile {
            role,
            upscale,
            pattern,
            table,
        })
    }
}

/// What a pipeline slot expects from an imported table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImportExpectation {
    pub role: Role,
    pub q: u8,
    pub n: u8,
    pub m: u16,
    pub upscale: u8,
    pub pattern: Option<Pattern>,
    /// Whether a constant payload is acceptable.
    pub allow_constant: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks an exported stream against the slot it is meant to fill, listing
/// every disagreement.
pub fn validate_import(bytes: &[u8], expected: &ImportExpectation) -> Result<LutFile, Vec<Diagnostic>> {
    let file = read_lut(bytes).map_err(|e| {
        vec![Diagnostic {
            field: "stream",
            message: e.to_string(),
        }]
    })?;
    let mut diags = Vec::new();
    let mut check = |field: &'static str, got: String, want: String| {
        if got != want {
            diags.push(Diagnostic {
                field,
                message: format!("file has {got}, expected {want}"),
            });
        }
    };
    let h = file.header();
    check("role", format!("{:?}", h.role), format!("{:?}", expected.role));
    check("q", h.q.to_string(), expected.q.to_string());
    check("n", h.n.to_string(), expected.n.to_string());
    check("m", h.m.to_string(), expected.m.to_string());
    check("r", h.upscale.to_string(), expected.upscale.to_string());
    let pat = |p: Option<Pattern>| p.map_or("none".to_string(), |p| p.to_string());
    check("pattern", pat(h.pattern), pat(expected.pattern));
    if !expected.allow_constant {
        let v = file.table.values();
        if v.iter().all(|&b| b == v[0]) {
            diags.push(Diagnostic {
                field: "payload",
                message: format!("constant payload (every byte is {})", v[0]),
            });
        }
    }
    if diags.is_empty() {
        Ok(file)
    } else {
        Err(diags)
    }
}
