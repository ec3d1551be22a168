//! A slow, literal evaluator for checking the engine.
//!
//! Every rotation is performed on the image itself, every block output is
//! pixel-shuffled into a full-size buffer and rotated back, and interpolation
//! is done from scratch in floating point over integer numerators. Nothing
//! here is shared with the engine beyond the table and pattern types.

use std::collections::HashMap;

use crate::engine::{Pipeline, SpatialBlock, Stage, StageLayout};
use crate::image::ImagePlane;
use crate::lut::LutTable;

/// Where table values come from: the stored bytes, or float overrides keyed
/// by table identity.
#[derive(Default)]
struct Src<'a> {
    over: HashMap<*const LutTable, &'a [f64]>,
}

impl Src<'_> {
    fn val(&self, t: &LutTable, i: usize) -> f64 {
        match self.over.get(&(t as *const LutTable)) {
            Some(v) => v[i],
            None => t.values()[i] as f64,
        }
    }
}

/// A float raster, planar like [`ImagePlane`].
#[derive(Debug, Clone, PartialEq)]
struct Buf {
    w: usize,
    h: usize,
    c: usize,
    v: Vec<f64>,
}

impl Buf {
    fn zeros(w: usize, h: usize, c: usize) -> Self {
        Buf {
            w,
            h,
            c,
            v: vec![0.0; w * h * c],
        }
    }

    fn at(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.v[(c * self.h + y) * self.w + x]
    }

    fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    /// Counter-clockwise quarter turns, same convention as images.
    fn rot90(&self, k: u8) -> Buf {
        let mut cur = self.clone();
        for _ in 0..(k & 3) {
            let mut next = Buf::zeros(cur.h, cur.w, cur.c);
            for c in 0..cur.c {
                for y in 0..next.h {
                    for x in 0..next.w {
                        *next.at(c, y, x) = cur.get(c, x, cur.w - 1 - y);
                    }
                }
            }
            cur = next;
        }
        cur
    }

    fn add_scaled(&mut self, other: &Buf, k: f64) {
        assert_eq!((self.w, self.h, self.c), (other.w, other.h, other.c));
        for (a, b) in self.v.iter_mut().zip(&other.v) {
            *a += k * b;
        }
    }

    fn round(&self, den: f64) -> ImagePlane {
        let data = self
            .v
            .iter()
            .map(|&n| (n / den + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect();
        ImagePlane::new(self.w, self.h, self.c, data).unwrap()
    }
}

/// Interpolated numerators (over `W`) of all value channels at `x`.
///
/// Vertex `k` of the simplex sets an axis to the upper grid level exactly when
/// its fraction is among the `k` largest; tied axes get zero weight on the
/// vertices where they differ, so tie order cannot change the result.
pub fn interpolate(table: &LutTable, x: &[u8]) -> Vec<f64> {
    interp_src(table, x, &Src::default())
}

fn interp_src(table: &LutTable, x: &[u8], src: &Src<'_>) -> Vec<f64> {
    let n = table.n() as usize;
    let w = 1u32 << table.grid().q();
    let levels = (256 / w + 1) as usize;
    let cell: Vec<usize> = x.iter().map(|&v| (v as u32 / w) as usize).collect();
    let frac: Vec<u32> = x.iter().map(|&v| v as u32 % w).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| frac[b].cmp(&frac[a]));
    let m = table.m() as usize;
    let mut out = vec![0.0; m];
    let mut upper = vec![false; n];
    for k in 0..=n {
        let hi = if k == 0 { w } else { frac[order[k - 1]] };
        let lo = if k == n { 0 } else { frac[order[k]] };
        let weight = (hi - lo) as f64;
        let mut flat = 0usize;
        for d in 0..n {
            flat = flat * levels + cell[d] + upper[d] as usize;
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o += weight * src.val(table, flat * m + j);
        }
        if k < n {
            upper[order[k]] = true;
        }
    }
    out
}

/// One unrotated block pass. Output numerators are over the block's `W`.
fn block_once(img: &ImagePlane, block: &SpatialBlock, src: &Src<'_>) -> Buf {
    let r = block.upscale;
    let co = block.out_channels;
    let (w, h, c) = img.dims();
    let mut out = Buf::zeros(w * r, h * r, c * co);
    for ch in 0..c {
        let lut = if block.luts.len() == 1 { &block.luts[0] } else { &block.luts[ch] };
        for y in 0..h {
            for x in 0..w {
                let taps: Vec<u8> = block
                    .pattern
                    .offsets()
                    .iter()
                    .map(|&(dy, dx)| img.get_clamped(ch, y as isize + dy as isize, x as isize + dx as isize))
                    .collect();
                let v = interp_src(lut, &taps, src);
                for o in 0..co {
                    for a in 0..r {
                        for b in 0..r {
                            *out.at(ch * co + o, y * r + a, x * r + b) = v[(o * r + a) * r + b];
                        }
                    }
                }
            }
        }
    }
    out
}

fn spacing(block: &SpatialBlock) -> f64 {
    (1u32 << block.luts[0].grid().q()) as f64
}

/// Sum over the four rotations, numerators over `W`.
fn ensemble(img: &ImagePlane, block: &SpatialBlock, src: &Src<'_>) -> Buf {
    let mut acc: Option<Buf> = None;
    for k in 0..4u8 {
        let back = block_once(&img.rot90(k), block, src).rot90(4 - k);
        match &mut acc {
            None => acc = Some(back),
            Some(a) => a.add_scaled(&back, 1.0),
        }
    }
    acc.unwrap()
}

fn subsample(img: &ImagePlane, py: usize, px: usize) -> ImagePlane {
    ImagePlane::from_fn(img.width() / 2, img.height() / 2, 1, |_, y, x| img.get(0, 2 * y + py, 2 * x + px)).unwrap()
}

/// Returns `(numerators, denominator)` of the spatial part of a stage.
fn spatial_stage(stage: &Stage, img: &ImagePlane, src: &Src<'_>) -> (Buf, f64) {
    let wmax = stage.blocks.iter().map(spacing).fold(0.0, f64::max);
    let nb = stage.blocks.len() as f64;
    match stage.layout {
        StageLayout::Dense => {
            let mut acc: Option<Buf> = None;
            for b in &stage.blocks {
                let e = ensemble(img, b, src);
                match &mut acc {
                    None => {
                        let mut z = e.clone();
                        z.v.iter_mut().for_each(|v| *v = 0.0);
                        z.add_scaled(&e, wmax / spacing(b));
                        acc = Some(z);
                    }
                    Some(a) => a.add_scaled(&e, wmax / spacing(b)),
                }
            }
            (acc.unwrap(), 4.0 * nb * wmax)
        }
        StageLayout::BayerCell => {
            let b0 = &stage.blocks[0];
            let (r, co) = (b0.upscale, b0.out_channels);
            let (w2, h2) = (img.width() / 2, img.height() / 2);
            let mut acc = Buf::zeros(w2 * r, h2 * r, co);
            for b in &stage.blocks {
                let k = wmax / spacing(b);
                for y in 0..h2 {
                    for x in 0..w2 {
                        let taps: Vec<u8> = b
                            .pattern
                            .offsets()
                            .iter()
                            .map(|&(dy, dx)| img.get_clamped(0, (2 * y) as isize + dy as isize, (2 * x) as isize + dx as isize))
                            .collect();
                        let v = interp_src(&b.luts[0], &taps, src);
                        for o in 0..co {
                            for a in 0..r {
                                for bb in 0..r {
                                    *acc.at(o, y * r + a, x * r + bb) += k * v[(o * r + a) * r + bb];
                                }
                            }
                        }
                    }
                }
            }
            (acc, nb * wmax)
        }
        StageLayout::BayerSplit => {
            let mut acc = Buf::zeros(img.width(), img.height(), 3);
            let sites = [((0, 0), 0, 2.0), ((0, 1), 1, 1.0), ((1, 0), 1, 1.0), ((1, 1), 2, 2.0)];
            for (b, &((py, px), plane, weight)) in stage.blocks.iter().zip(&sites) {
                let e = ensemble(&subsample(img, py, px), b, src);
                let k = weight * wmax / spacing(b);
                for y in 0..img.height() {
                    for x in 0..img.width() {
                        *acc.at(plane, y, x) += k * e.get(0, y / 2, x / 2);
                    }
                }
            }
            (acc, 8.0 * wmax)
        }
    }
}

fn channel_stage(table: &LutTable, img: &ImagePlane, src: &Src<'_>) -> (Buf, f64) {
    let mut out = Buf::zeros(img.width(), img.height(), 3);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = [img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)];
            if table.m() == 3 {
                let v = interp_src(table, &px, src);
                for c in 0..3 {
                    *out.at(c, y, x) = v[c];
                }
            } else {
                for c in 0..3 {
                    let v = interp_src(table, &[px[c], px[(c + 1) % 3], px[(c + 2) % 3]], src);
                    *out.at(c, y, x) = v[0];
                }
            }
        }
    }
    (out, (1u32 << table.grid().q()) as f64)
}

fn run_src(pipeline: &Pipeline, img: &ImagePlane, src: &Src<'_>) -> (Buf, f64) {
    let mut cur = img.clone();
    let n = pipeline.stages().len();
    let mut last = None;
    for (i, stage) in pipeline.stages().iter().enumerate() {
        let mut result = None;
        if !stage.blocks.is_empty() {
            result = Some(spatial_stage(stage, &cur, src));
        }
        if let Some(cb) = &stage.channel {
            if let Some((b, d)) = result.take() {
                cur = b.round(d);
            }
            result = Some(channel_stage(&cb.lut, &cur, src));
        }
        let (b, d) = result.unwrap();
        if i + 1 == n {
            last = Some((b, d));
        } else {
            cur = b.round(d);
        }
    }
    last.unwrap()
}

/// Runs a pipeline the slow way. Panics on inputs the engine would reject.
pub fn run_pipeline(pipeline: &Pipeline, img: &ImagePlane) -> ImagePlane {
    let (b, d) = run_src(pipeline, img, &Src::default());
    b.round(d)
}

/// Final-stage output before rounding, with every table's values replaced by
/// `values` (in [`Pipeline::tables`] order). Intermediate stages still round.
pub fn evaluate_f64(pipeline: &Pipeline, img: &ImagePlane, values: &[Vec<f64>]) -> Vec<f64> {
    let tables = pipeline.tables();
    assert_eq!(tables.len(), values.len());
    let src = Src {
        over: tables
            .iter()
            .zip(values)
            .map(|(t, v)| {
                assert_eq!(t.values().len(), v.len());
                (&***t as *const LutTable, &v[..])
            })
            .collect(),
    };
    let (b, d) = run_src(pipeline, img, &src);
    b.v.iter().map(|v| v / d).collect()
}
