//! Execution of LUT blocks and staged pipelines.
//!
//! A stage gathers pixels by pattern, interpolates every parallel block under
//! the four-rotation ensemble and sums the results into exact integer
//! numerators over one shared denominator `4 * N * W`. The single division
//! happens when a stage is requantized to 8 bits, either to index the next
//! stage or to produce the final image.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::image::{ImagePlane, RationalPlane};
use crate::interp::Simplex;
use crate::lut::LutTable;
use crate::pattern::Pattern;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("stage {stage}: {msg}")]
    Stage { stage: usize, msg: String },
    #[error("pipeline has no stages")]
    Empty,
    #[error("input has {got} channels, pipeline expects {want}")]
    Channels { got: usize, want: String },
    #[error("input {w}x{h} incompatible with stage {stage}: {msg}")]
    Geometry {
        stage: usize,
        w: usize,
        h: usize,
        msg: String,
    },
    #[error("branches disagree in geometry")]
    BranchGeometry,
}

/// A 4D spatial block: pattern gather, simplex lookup, pixel shuffle.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialBlock {
    pub pattern: Pattern,
    pub upscale: usize,
    pub out_channels: usize,
    /// One table shared by every input channel, or one per channel.
    pub luts: Vec<Arc<LutTable>>,
}

impl SpatialBlock {
    pub fn new(pattern: Pattern, upscale: usize, lut: Arc<LutTable>) -> Self {
        let out_channels = lut.m() as usize / (upscale * upscale);
        Self {
            pattern,
            upscale,
            out_channels,
            luts: vec![lut],
        }
    }

    pub fn values_per_entry(&self) -> usize {
        self.upscale * self.upscale * self.out_channels
    }

    #[inline]
    fn lut_for(&self, channel: usize) -> &LutTable {
        if self.luts.len() == 1 {
            &self.luts[0]
        } else {
            &self.luts[channel]
        }
    }
}

/// A 3D channel block over `(R, G, B)`.
///
/// With `m = 3` the table maps each pixel's triple to a new triple. With
/// `m = 1` one table is shared by the three outputs: channel `c` reads
/// `(x_c, x_{c+1}, x_{c+2})` with indices taken mod 3.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBlock {
    pub lut: Arc<LutTable>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageLayout {
    /// Stride-1 gathers on every channel with the rotation ensemble.
    Dense,
    /// Bayer front end: anchors on every RGGB cell (stride 2), no rotation,
    /// one mosaic channel in and `out_channels` planes out.
    BayerCell,
    /// Four same-colour sub-lattices (R, G1, G2, B) each run through their own
    /// block with the rotation ensemble; results are replicated back to full
    /// resolution and the two greens are averaged.
    BayerSplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub layout: StageLayout,
    pub blocks: Vec<SpatialBlock>,
    pub channel: Option<ChannelBlock>,
}

impl Stage {
    pub fn dense(blocks: Vec<SpatialBlock>) -> Self {
        Self {
            layout: StageLayout::Dense,
            blocks,
            channel: None,
        }
    }

    /// Output-to-input linear scale of the spatial part.
    pub fn scale(&self) -> usize {
        match self.layout {
            StageLayout::Dense => self.blocks.first().map_or(1, |b| b.upscale),
            StageLayout::BayerCell => self.blocks.first().map_or(2, |b| b.upscale) / 2,
            StageLayout::BayerSplit => 1,
        }
    }
}

/// A validated, executable pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    stages: Vec<Stage>,
}

impl Pipeline {
    pub fn new(stages: Vec<Stage>) -> Result<Self, EngineError> {
        if stages.is_empty() {
            return Err(EngineError::Empty);
        }
        let last_spatial = stages.iter().rposition(|s| !s.blocks.is_empty());
        for (i, s) in stages.iter().enumerate() {
            let err = |msg: String| Err(EngineError::Stage { stage: i, msg });
            if s.blocks.is_empty() && s.channel.is_none() {
                return err("stage has no blocks".into());
            }
            if let Some(b0) = s.blocks.first() {
                for b in &s.blocks {
                    if b.upscale == 0 || b.out_channels == 0 {
                        return err("upscale and output channels must be positive".into());
                    }
                    if b.upscale != b0.upscale || b.out_channels != b0.out_channels {
                        return err("parallel blocks disagree in upscale or output channels".into());
                    }
                    if b.luts.len() != 1 && b.luts.len() != 3 {
                        return err(format!("block {} has {} tables (expected 1 or 3)", b.pattern.id(), b.luts.len()));
                    }
                    for t in &b.luts {
                        if t.n() != 4 {
                            return err(format!("block {} needs a 4D table, got n={}", b.pattern.id(), t.n()));
                        }
                        if t.m() as usize != b.values_per_entry() {
                            return err(format!(
                                "block {}: table has m={}, expected r^2*c_out={}",
                                b.pattern.id(),
                                t.m(),
                                b.values_per_entry()
                            ));
                        }
                    }
                }
                match s.layout {
                    StageLayout::Dense => {
                        if b0.upscale > 1 && Some(i) != last_spatial {
                            return err("only the final spatial stage may upscale".into());
                        }
                    }
                    StageLayout::BayerCell => {
                        if i != 0 || b0.upscale != 2 {
                            return err("the Bayer cell front end must be the first stage with r=2".into());
                        }
                    }
                    StageLayout::BayerSplit => {
                        if i != 0 || s.blocks.len() != 4 || b0.upscale != 1 || b0.out_channels != 1 {
                            return err("the Bayer split front end must be the first stage with 4 blocks, r=1, one output".into());
                        }
                    }
                }
            } else if s.layout != StageLayout::Dense {
                return err("a Bayer front end needs spatial blocks".into());
            }
            if let Some(c) = &s.channel {
                if c.lut.n() != 3 || !(c.lut.m() == 1 || c.lut.m() == 3) {
                    return err(format!("channel block needs n=3 and m in {{1,3}}, got n={} m={}", c.lut.n(), c.lut.m()));
                }
            }
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Every table in slot order: stage by stage, each block's tables, then
    /// the stage's channel table.
    pub fn tables(&self) -> Vec<&Arc<LutTable>> {
        let mut out = Vec::new();
        for s in &self.stages {
            for b in &s.blocks {
                out.extend(b.luts.iter());
            }
            if let Some(c) = &s.channel {
                out.push(&c.lut);
            }
        }
        out
    }

    /// The same structure with every table replaced, in [`Pipeline::tables`]
    /// order. Shapes must match.
    pub fn with_tables(&self, tables: Vec<Arc<LutTable>>) -> Pipeline {
        assert_eq!(tables.len(), self.tables().len(), "table count");
        let mut it = tables.into_iter();
        let mut stages = self.stages.clone();
        for s in &mut stages {
            for b in &mut s.blocks {
                for t in &mut b.luts {
                    let new = it.next().unwrap();
                    assert_eq!((new.n(), new.m(), new.grid()), (t.n(), t.m(), t.grid()), "table shape");
                    *t = new;
                }
            }
            if let Some(c) = &mut s.channel {
                let new = it.next().unwrap();
                assert_eq!((new.n(), new.m(), new.grid()), (c.lut.n(), c.lut.m(), c.lut.grid()), "table shape");
                c.lut = new;
            }
        }
        Pipeline { stages }
    }

    /// Overall output/input linear scale.
    pub fn scale(&self) -> usize {
        self.stages.iter().map(Stage::scale).product()
    }

    /// Channel count the first stage consumes, if it is fixed.
    pub fn input_channels(&self) -> Option<usize> {
        let s0 = &self.stages[0];
        match s0.layout {
            StageLayout::BayerCell | StageLayout::BayerSplit => Some(1),
            StageLayout::Dense => {
                if s0.blocks.is_empty() || s0.blocks.iter().any(|b| b.luts.len() == 3) {
                    Some(3)
                } else if s0.blocks[0].out_channels > 1 {
                    Some(1)
                } else {
                    None
                }
            }
        }
    }

    /// Runs every stage, requantizing between stages.
    pub fn run(&self, img: &ImagePlane) -> Result<ImagePlane, EngineError> {
        Ok(self.run_rational(img)?.requantize())
    }

    /// Like [`Pipeline::run`] but returns the final stage before rounding.
    pub fn run_rational(&self, img: &ImagePlane) -> Result<RationalPlane, EngineError> {
        let mut cur: Option<ImagePlane> = None;
        let mut last = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let input = cur.as_ref().unwrap_or(img);
            let out = run_stage(i, stage, input)?;
            if i + 1 < self.stages.len() {
                cur = Some(out.requantize());
            } else {
                last = Some(out);
            }
        }
        Ok(last.expect("non-empty pipeline"))
    }
}

/// Maps a subpixel `(a, b)` of an `r x r` output cell produced in an image
/// rotated `k` quarter turns counter-clockwise back to the unrotated cell.
#[inline]
pub fn rotate_subpixel(a: usize, b: usize, r: usize, k: u8) -> (usize, usize) {
    match k & 3 {
        0 => (a, b),
        1 => (b, r - 1 - a),
        2 => (r - 1 - a, r - 1 - b),
        _ => (r - 1 - b, a),
    }
}

/// Where value `j` of an entry lands relative to the anchor's output cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Target {
    pub plane: usize,
    pub dy: usize,
    pub dx: usize,
}

/// One (block, rotation) pass of a stage.
#[derive(Debug, Clone)]
pub(crate) struct Branch<'a> {
    pub block: usize,
    pub spatial: &'a SpatialBlock,
    pub offsets: [(isize, isize); 4],
    /// Gather spacing between pattern taps.
    pub dilation: isize,
    /// Input position of anchor (0, 0).
    pub phase: (usize, usize),
    pub scale: u32,
    /// Targets of each value channel `j`, relative to the anchor's cell.
    pub targets: Vec<Vec<Target>>,
    /// Plane offset per input channel is `channel * plane_step`.
    pub plane_step: usize,
}

/// Geometry and branch list of a spatial stage for one input size.
#[derive(Debug, Clone)]
pub(crate) struct StagePlan<'a> {
    pub in_w: usize,
    pub in_h: usize,
    pub out_w: usize,
    pub out_h: usize,
    pub out_c: usize,
    pub anchor_rows: usize,
    pub anchor_cols: usize,
    /// Anchor-to-input stride.
    pub stride: usize,
    /// Output rows and columns owned by one anchor.
    pub cell: usize,
    /// Input channels queried per anchor (1 for Bayer layouts).
    pub query_channels: usize,
    pub den: u32,
    pub branches: Vec<Branch<'a>>,
}

/// One interpolation site of a stage.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Query<'a> {
    pub branch: usize,
    pub channel: usize,
    pub ax: usize,
    pub lut: &'a LutTable,
    pub x: [u8; 4],
    /// Flat input indices of the gathered taps.
    pub pos: [usize; 4],
}

impl<'a> StagePlan<'a> {
    pub fn new(index: usize, stage: &'a Stage, w: usize, h: usize, c: usize) -> Result<Self, EngineError> {
        let geo = |msg: &str| EngineError::Geometry {
            stage: index,
            w,
            h,
            msg: msg.to_string(),
        };
        let blocks = &stage.blocks;
        let n = blocks.len() as u32;
        let wmax = blocks.iter().flat_map(|b| &b.luts).map(|t| t.grid().spacing()).max().unwrap_or(1);
        let b0 = &blocks[0];
        let (r, c_out) = (b0.upscale, b0.out_channels);
        if w == 0 || h == 0 {
            return Err(geo("empty image"));
        }
        if blocks.iter().any(|b| b.luts.len() == 3) && c != 3 {
            return Err(EngineError::Channels {
                got: c,
                want: "3 (per-channel tables)".into(),
            });
        }
        let scale_of = |b: &SpatialBlock| -> u32 {
            let wb = b.luts.iter().map(|t| t.grid().spacing()).max().unwrap_or(1);
            debug_assert!(b.luts.iter().all(|t| t.grid().spacing() == wb));
            wmax / wb
        };
        let shuffle_targets = |k: u8, plane_base: usize| -> Vec<Vec<Target>> {
            let mut t = vec![Vec::new(); r * r * c_out];
            for co in 0..c_out {
                for a in 0..r {
                    for bb in 0..r {
                        let (dy, dx) = rotate_subpixel(a, bb, r, k);
                        t[(co * r + a) * r + bb].push(Target {
                            plane: plane_base + co,
                            dy,
                            dx,
                        });
                    }
                }
            }
            t
        };
        let mut branches = Vec::new();
        let plan = match stage.layout {
            StageLayout::Dense => {
                if c_out > 1 && c != 1 {
                    return Err(EngineError::Channels {
                        got: c,
                        want: "1 (multi-output blocks)".into(),
                    });
                }
                for (bi, b) in blocks.iter().enumerate() {
                    for k in 0..4u8 {
                        branches.push(Branch {
                            block: bi,
                            spatial: b,
                            offsets: b.pattern.rotated_offsets(k),
                            dilation: 1,
                            phase: (0, 0),
                            scale: scale_of(b),
                            targets: shuffle_targets(k, 0),
                            plane_step: c_out,
                        });
                    }
                }
                StagePlan {
                    in_w: w,
                    in_h: h,
                    out_w: w * r,
                    out_h: h * r,
                    out_c: c * c_out,
                    anchor_rows: h,
                    anchor_cols: w,
                    stride: 1,
                    cell: r,
                    query_channels: c,
                    den: 4 * n * wmax,
                    branches,
                }
            }
            StageLayout::BayerCell => {
                if c != 1 {
                    return Err(EngineError::Channels {
                        got: c,
                        want: "1 (Bayer mosaic)".into(),
                    });
                }
                if w % 2 != 0 || h % 2 != 0 {
                    return Err(geo("Bayer mosaic needs even width and height"));
                }
                for (bi, b) in blocks.iter().enumerate() {
                    branches.push(Branch {
                        block: bi,
                        spatial: b,
                        offsets: b.pattern.rotated_offsets(0),
                        dilation: 1,
                        phase: (0, 0),
                        scale: scale_of(b),
                        targets: shuffle_targets(0, 0),
                        plane_step: 0,
                    });
                }
                StagePlan {
                    in_w: w,
                    in_h: h,
                    out_w: w / 2 * r,
                    out_h: h / 2 * r,
                    out_c: c_out,
                    anchor_rows: h / 2,
                    anchor_cols: w / 2,
                    stride: 2,
                    cell: r,
                    query_channels: 1,
                    den: n * wmax,
                    branches,
                }
            }
            StageLayout::BayerSplit => {
                if c != 1 {
                    return Err(EngineError::Channels {
                        got: c,
                        want: "1 (Bayer mosaic)".into(),
                    });
                }
                if w % 2 != 0 || h % 2 != 0 {
                    return Err(geo("Bayer mosaic needs even width and height"));
                }
                // R, G1, G2, B sites of the RGGB cell and their output planes.
                let phases = [(0, 0), (0, 1), (1, 0), (1, 1)];
                let planes = [0, 1, 1, 2];
                let weights = [2, 1, 1, 2];
                for (bi, b) in blocks.iter().enumerate() {
                    for k in 0..4u8 {
                        let cell: Vec<Target> = (0..4)
                            .map(|s| Target {
                                plane: planes[bi],
                                dy: s / 2,
                                dx: s % 2,
                            })
                            .collect();
                        branches.push(Branch {
                            block: bi,
                            spatial: b,
                            offsets: b.pattern.rotated_offsets(k),
                            dilation: 2,
                            phase: phases[bi],
                            scale: scale_of(b) * weights[bi],
                            targets: vec![cell],
                            plane_step: 0,
                        });
                    }
                }
                StagePlan {
                    in_w: w,
                    in_h: h,
                    out_w: w,
                    out_h: h,
                    out_c: 3,
                    anchor_rows: h / 2,
                    anchor_cols: w / 2,
                    stride: 2,
                    cell: 2,
                    query_channels: 1,
                    den: 8 * wmax,
                    branches,
                }
            }
        };
        Ok(plan)
    }

    /// Visits every query whose anchor sits on anchor row `ay`, in a fixed
    /// order: channel, column, branch.
    #[inline]
    pub fn for_each_query_in_row(&self, img: &[u8], ay: usize, mut f: impl FnMut(&Query<'a>)) {
        let (w, h) = (self.in_w as isize, self.in_h as isize);
        for ch in 0..self.query_channels {
            let plane = ch * self.in_w * self.in_h;
            for ax in 0..self.anchor_cols {
                for (bi, br) in self.branches.iter().enumerate() {
                    let (py, px) = (br.phase.0 as isize, br.phase.1 as isize);
                    let s = self.stride as isize;
                    let base_y = ay as isize * s + py;
                    let base_x = ax as isize * s + px;
                    // Same-phase clamping keeps sub-lattice gathers on their colour.
                    let (lo_y, lo_x) = if br.dilation == 1 { (0, 0) } else { (py, px) };
                    let hi_y = if br.dilation == 1 { h - 1 } else { h - 2 + py };
                    let hi_x = if br.dilation == 1 { w - 1 } else { w - 2 + px };
                    let mut pos = [0usize; 4];
                    let mut x = [0u8; 4];
                    for (t, &(oy, ox)) in br.offsets.iter().enumerate() {
                        let yy = (base_y + oy * br.dilation).clamp(lo_y, hi_y) as usize;
                        let xx = (base_x + ox * br.dilation).clamp(lo_x, hi_x) as usize;
                        pos[t] = plane + yy * self.in_w + xx;
                        x[t] = img[pos[t]];
                    }
                    f(&Query {
                        branch: bi,
                        channel: ch,
                        ax,
                        lut: br.spatial.lut_for(ch),
                        x,
                        pos,
                    });
                }
            }
        }
    }

    /// Executes the plan into exact numerators.
    pub fn execute(&self, img: &[u8]) -> RationalPlane {
        let band = self.cell;
        let (out_w, out_h) = (self.out_w, self.out_h);
        let bands: Vec<Vec<u32>> = (0..self.anchor_rows)
            .into_par_iter()
            .map(|ay| {
                // Local band: out_c planes x `band` rows x out_w.
                let mut local = vec![0u32; self.out_c * band * out_w];
                let mut tmp = [0u32; 64];
                self.for_each_query_in_row(img, ay, |q| {
                    let br = &self.branches[q.branch];
                    let m = q.lut.m() as usize;
                    let tmp = &mut tmp[..m];
                    tmp.iter_mut().for_each(|v| *v = 0);
                    Simplex::locate(q.lut, &q.x).accumulate(q.lut, br.scale, tmp);
                    for (j, targets) in br.targets.iter().enumerate() {
                        for t in targets {
                            let plane = q.channel * br.plane_step + t.plane;
                            let idx = (plane * band + t.dy) * out_w + q.ax * self.cell + t.dx;
                            local[idx] += tmp[j];
                        }
                    }
                });
                local
            })
            .collect();
        let mut num = vec![0u32; self.out_c * out_h * out_w];
        for (ay, local) in bands.into_iter().enumerate() {
            for p in 0..self.out_c {
                for dy in 0..band {
                    let src = &local[(p * band + dy) * out_w..(p * band + dy + 1) * out_w];
                    let row = ay * band + dy;
                    num[(p * out_h + row) * out_w..(p * out_h + row + 1) * out_w].copy_from_slice(src);
                }
            }
        }
        RationalPlane::from_parts(out_w, out_h, self.out_c, self.den, num)
    }
}

fn run_stage(index: usize, stage: &Stage, img: &ImagePlane) -> Result<RationalPlane, EngineError> {
    let spatial = if stage.blocks.is_empty() {
        None
    } else {
        let plan = StagePlan::new(index, stage, img.width(), img.height(), img.channels())?;
        Some(plan.execute(img.data()))
    };
    match &stage.channel {
        None => Ok(spatial.expect("validated stage")),
        Some(cb) => {
            let indexed = match spatial {
                Some(s) => s.requantize(),
                None => img.clone(),
            };
            apply_channel_block(&indexed, cb).map_err(|e| match e {
                EngineError::Channels { got, want } => EngineError::Stage {
                    stage: index,
                    msg: format!("channel block needs {want} channels, got {got}"),
                },
                other => other,
            })
        }
    }
}

fn single_block_stage(block: &SpatialBlock) -> Stage {
    Stage::dense(vec![block.clone()])
}

/// Applies one spatial block without the rotation ensemble. The result has
/// denominator `W`.
pub fn apply_block(img: &ImagePlane, block: &SpatialBlock) -> Result<RationalPlane, EngineError> {
    let stage = single_block_stage(block);
    let mut plan = StagePlan::new(0, &stage, img.width(), img.height(), img.channels())?;
    plan.branches.retain(|b| b.offsets == block.pattern.rotated_offsets(0));
    plan.den /= 4;
    Ok(plan.execute(img.data()))
}

/// Averages the block over the four quarter-turn rotations of the input. The
/// result has denominator `4 W`.
pub fn rotation_ensemble(img: &ImagePlane, block: &SpatialBlock) -> Result<RationalPlane, EngineError> {
    let stage = single_block_stage(block);
    let plan = StagePlan::new(0, &stage, img.width(), img.height(), img.channels())?;
    Ok(plan.execute(img.data()))
}

/// Averages parallel branch outputs; the sum stays exact and the denominator
/// grows by the branch count.
pub fn fuse_parallel(branches: &[RationalPlane]) -> Result<RationalPlane, EngineError> {
    let first = branches.first().ok_or(EngineError::BranchGeometry)?;
    if branches.iter().any(|b| b.dims() != first.dims()) {
        return Err(EngineError::BranchGeometry);
    }
    let den = branches.iter().map(RationalPlane::den).fold(1u32, lcm);
    let mut num = vec![0u32; first.numerators().len()];
    for b in branches {
        let k = den / b.den();
        for (o, &v) in num.iter_mut().zip(b.numerators()) {
            *o += v * k;
        }
    }
    let (w, h, c) = first.dims();
    Ok(RationalPlane::from_parts(w, h, c, den * branches.len() as u32, num))
}

fn lcm(a: u32, b: u32) -> u32 {
    fn gcd(a: u32, b: u32) -> u32 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Rounds a rational plane half up and clamps to 8 bits.
pub fn requantize(img: &RationalPlane) -> ImagePlane {
    img.requantize()
}

/// Per-pixel 3D lookup across colour channels. Denominator `W`.
pub fn apply_channel_block(img: &ImagePlane, block: &ChannelBlock) -> Result<RationalPlane, EngineError> {
    if img.channels() != 3 {
        return Err(EngineError::Channels {
            got: img.channels(),
            want: "3".into(),
        });
    }
    let lut = &*block.lut;
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let den = lut.grid().spacing();
    let data = img.data();
    let shared = lut.m() == 1;
    let mut num = vec![0u32; 3 * n];
    let (r, rest) = num.split_at_mut(n);
    let (g, b) = rest.split_at_mut(n);
    r.par_iter_mut()
        .zip(g.par_iter_mut())
        .zip(b.par_iter_mut())
        .enumerate()
        .for_each(|(i, ((r, g), b))| {
            let px = [data[i], data[n + i], data[2 * n + i]];
            if shared {
                for (c, out) in [r, g, b].into_iter().enumerate() {
                    let x = [px[c], px[(c + 1) % 3], px[(c + 2) % 3]];
                    let mut v = [0u32; 1];
                    Simplex::locate(lut, &x).accumulate(lut, 1, &mut v);
                    *out = v[0];
                }
            } else {
                let mut v = [0u32; 3];
                Simplex::locate(lut, &px).accumulate(lut, 1, &mut v);
                *r = v[0];
                *g = v[1];
                *b = v[2];
            }
        });
    Ok(RationalPlane::from_parts(w, h, 3, den, num))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lut::SamplingGrid;
    use crate::transfer::{cache_function, BuiltinFunction};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lut(m: u16, q: u8, rng: &mut ChaCha8Rng) -> Arc<LutTable> {
        let mut t = LutTable::filled(4, m, SamplingGrid::new(q).unwrap(), 0).unwrap();
        rng.fill(t.values_mut());
        Arc::new(t)
    }

    fn random_image(w: usize, h: usize, c: usize, rng: &mut ChaCha8Rng) -> ImagePlane {
        let mut data = vec![0u8; w * h * c];
        rng.fill(&mut data[..]);
        ImagePlane::new(w, h, c, data).unwrap()
    }

    /// Inputs at most 240 stay out of the top grid cell, whose upper vertex
    /// stores 255 for level 256.
    fn low_image(w: usize, h: usize, c: usize, rng: &mut ChaCha8Rng) -> ImagePlane {
        ImagePlane::from_fn(w, h, c, |_, _, _| rng.random_range(0..=240)).unwrap()
    }

    fn copy_anchor(r: u8) -> Arc<LutTable> {
        Arc::new(
            BuiltinFunction::CopyAnchor
                .build(4, None, r, crate::format::Role::SpatialOutput)
                .unwrap()
                .table,
        )
    }

    #[test]
    fn constant_lut_gives_constant_upscaled_output() {
        let lut = Arc::new(LutTable::filled(4, 9, SamplingGrid::default(), 42).unwrap());
        let block = SpatialBlock::new(Pattern::s(), 3, lut);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(7, 5, 1, &mut rng);
        let out = apply_block(&img, &block).unwrap().requantize();
        assert_eq!(out.dims(), (21, 15, 1));
        assert!(out.data().iter().all(|&v| v == 42));
    }

    #[test]
    fn copy_anchor_is_identity_for_every_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = low_image(13, 9, 1, &mut rng);
        for id in Pattern::BUILTIN_IDS {
            let block = SpatialBlock::new(Pattern::builtin(id).unwrap(), 1, copy_anchor(1));
            assert_eq!(apply_block(&img, &block).unwrap().requantize(), img, "{id}");
            assert_eq!(rotation_ensemble(&img, &block).unwrap().requantize(), img, "{id}");
        }
        // With upscaling each anchor becomes an r x r cell of itself.
        let block = SpatialBlock::new(Pattern::s(), 2, copy_anchor(2));
        let up = rotation_ensemble(&img, &block).unwrap().requantize();
        for y in 0..18 {
            for x in 0..26 {
                assert_eq!(up.get(0, y, x), img.get(0, y / 2, x / 2));
            }
        }
    }

    #[test]
    fn top_cell_copy_anchor_error() {
        // 249 sits 9/16 of the way from 240 to the clamped 255: 248.4375.
        let block = SpatialBlock::new(Pattern::s(), 1, copy_anchor(1));
        let img = ImagePlane::filled(3, 3, 1, 249).unwrap();
        let out = apply_block(&img, &block).unwrap();
        assert_eq!((out.get(0, 1, 1), out.den()), (3975, 16));
        assert_eq!(out.requantize().get(0, 1, 1), 248);
    }

    #[test]
    fn block_is_local_to_its_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lut = random_lut(1, 4, &mut rng);
        let block = SpatialBlock::new(Pattern::builtin('Y').unwrap(), 1, lut);
        let img = random_image(9, 9, 1, &mut rng);
        let base = apply_block(&img, &block).unwrap();
        let (ay, ax) = (3, 3);
        for y in 0..9 {
            for x in 0..9 {
                let inside = block
                    .pattern
                    .offsets()
                    .iter()
                    .any(|&(dy, dx)| (ay + dy as usize, ax + dx as usize) == (y, x));
                if inside {
                    continue;
                }
                let mut p = img.clone();
                p.set(0, y, x, p.get(0, y, x) ^ 0xA5);
                let out = apply_block(&p, &block).unwrap();
                assert_eq!(out.get(0, ay, ax), base.get(0, ay, ax));
            }
        }
    }

    #[test]
    fn ensemble_equals_literal_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(6, 4, 1, &mut rng);
        for r in [1usize, 2, 3] {
            let block = SpatialBlock::new(Pattern::builtin('D').unwrap(), r, random_lut((r * r) as u16, 4, &mut rng));
            let fast = rotation_ensemble(&img, &block).unwrap();
            // Literal: rotate, apply the unrotated block, rotate the numerators back.
            let mut acc = vec![0u32; fast.numerators().len()];
            for k in 0..4u8 {
                let out = apply_block(&img.rot90(k), &block).unwrap();
                let (ow, oh) = (out.width(), out.height());
                // Undo k counter-clockwise turns by rotating 4-k more.
                let mut plane = ImagePlane::filled(ow, oh, 1, 0).unwrap();
                let mut hi = plane.clone();
                for (i, &v) in out.numerators().iter().enumerate() {
                    plane.data_mut()[i] = (v % 256) as u8;
                    hi.data_mut()[i] = (v / 256) as u8;
                }
                let (lo, hi) = (plane.rot90(4 - k), hi.rot90(4 - k));
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += lo.data()[i] as u32 + 256 * hi.data()[i] as u32;
                }
            }
            assert_eq!(fast.numerators(), &acc[..], "r={r}");
            assert_eq!(fast.den(), 4 * 16);
        }
    }

    #[test]
    fn ensemble_is_rotation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(8, 5, 1, &mut rng);
        for r in [1usize, 2] {
            let block = SpatialBlock::new(Pattern::builtin('Y').unwrap(), r, random_lut((r * r) as u16, 4, &mut rng));
            let a = rotation_ensemble(&img.rot90(1), &block).unwrap().requantize();
            let b = rotation_ensemble(&img, &block).unwrap().requantize().rot90(1);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn s_ensemble_receptive_field_is_3x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let block = SpatialBlock::new(Pattern::s(), 1, random_lut(1, 4, &mut rng));
        let img = random_image(11, 11, 1, &mut rng);
        let base = rotation_ensemble(&img, &block).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for y in 0..11 {
            for x in 0..11 {
                let mut p = img.clone();
                p.set(0, y, x, p.get(0, y, x).wrapping_add(97));
                if rotation_ensemble(&p, &block).unwrap().get(0, 5, 5) != base.get(0, 5, 5) {
                    seen.insert((y as isize - 5, x as isize - 5));
                }
            }
        }
        assert!(seen.iter().all(|&(dy, dx)| dy.abs() <= 1 && dx.abs() <= 1));
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn fuse_parallel_examples() {
        let zeros = RationalPlane::from_parts(2, 1, 1, 1, vec![0, 0]);
        let full = RationalPlane::from_parts(2, 1, 1, 1, vec![255, 255]);
        let fused = fuse_parallel(&[zeros.clone(), full.clone()]).unwrap();
        assert_eq!(fused.value(0, 0, 0), 127.5);
        assert_eq!(fused.requantize().data(), &[128, 128]);
        let same = fuse_parallel(&[full.clone(), full.clone(), full.clone()]).unwrap();
        assert_eq!(same.requantize(), full.requantize());
        let odd = RationalPlane::from_parts(3, 1, 1, 1, vec![0, 0, 0]);
        assert_eq!(fuse_parallel(&[zeros, odd]), Err(EngineError::BranchGeometry));
    }

    #[test]
    fn channel_block_examples() {
        let ident = ChannelBlock {
            lut: Arc::new(BuiltinFunction::IdentityRgb.build(4, None, 1, crate::format::Role::Channel).unwrap().table),
        };
        let swap = ChannelBlock {
            lut: Arc::new(BuiltinFunction::RotateRgb.build(4, None, 1, crate::format::Role::Channel).unwrap().table),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(16, 16, 3, &mut rng);
        let out = apply_channel_block(&img, &ident).unwrap().requantize();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!(a.abs_diff(*b) <= 1);
        }
        let rot = apply_channel_block(&img, &swap).unwrap().requantize();
        for c in 0..3 {
            for (a, b) in rot.plane(c).iter().zip(img.plane((c + 1) % 3)) {
                assert!(a.abs_diff(*b) <= 1);
            }
        }
        let gray = ImagePlane::from_fn(4, 4, 3, |_, y, x| (y * 40 + x * 3) as u8).unwrap();
        let g = apply_channel_block(&gray, &ident).unwrap().requantize();
        assert_eq!(g.plane(0), g.plane(1));
        assert_eq!(g.plane(1), g.plane(2));
        assert!(apply_channel_block(&img.channel(0), &ident).is_err());
    }

    #[test]
    fn shared_channel_table_is_cyclic() {
        // m = 1 table returning its second index: channel c reads x_{c+1}.
        let t = cache_function(3, 1, 4, |x| vec![x[1] as f64]).unwrap();
        let cb = ChannelBlock { lut: Arc::new(t) };
        let img = ImagePlane::from_fn(3, 1, 3, |c, _, x| (c * 80 + x * 16) as u8).unwrap();
        let out = apply_channel_block(&img, &cb).unwrap().requantize();
        for c in 0..3 {
            assert_eq!(out.plane(c), img.plane((c + 1) % 3));
        }
    }

    #[test]
    fn pipeline_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let up = SpatialBlock::new(Pattern::s(), 2, random_lut(4, 4, &mut rng));
        let flat = SpatialBlock::new(Pattern::s(), 1, random_lut(1, 4, &mut rng));
        assert!(Pipeline::new(vec![Stage::dense(vec![up.clone()]), Stage::dense(vec![flat.clone()])]).is_err());
        assert!(Pipeline::new(vec![Stage::dense(vec![flat.clone()]), Stage::dense(vec![up.clone()])]).is_ok());
        assert!(Pipeline::new(vec![Stage::dense(vec![flat.clone(), up.clone()])]).is_err());
        assert_eq!(Pipeline::new(vec![]), Err(EngineError::Empty));
        let mut wrong_m = flat.clone();
        wrong_m.upscale = 2;
        assert!(Pipeline::new(vec![Stage::dense(vec![wrong_m])]).is_err());
    }

    #[test]
    fn cascaded_copy_anchor_is_identity() {
        let b = SpatialBlock::new(Pattern::s(), 1, copy_anchor(1));
        let p = Pipeline::new(vec![Stage::dense(vec![b.clone()]), Stage::dense(vec![b])]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = low_image(10, 7, 1, &mut rng);
        assert_eq!(p.run(&img).unwrap(), img);
        let color = low_image(5, 6, 3, &mut rng);
        assert_eq!(p.run(&color).unwrap(), color);
    }

    #[test]
    fn stage_equals_fused_ensembles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_image(9, 6, 1, &mut rng);
        let blocks: Vec<_> = ['S', 'D', 'Y']
            .iter()
            .map(|&id| SpatialBlock::new(Pattern::builtin(id).unwrap(), 2, random_lut(4, 4, &mut rng)))
            .collect();
        let stage = Stage::dense(blocks.clone());
        let plan = StagePlan::new(0, &stage, 9, 6, 1).unwrap();
        let direct = plan.execute(img.data());
        let parts: Vec<_> = blocks.iter().map(|b| rotation_ensemble(&img, b).unwrap()).collect();
        assert_eq!(fuse_parallel(&parts).unwrap(), direct);
    }

    proptest! {
        #[test]
        fn fuse_is_permutation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let planes: Vec<_> = (0..4).map(|i| {
                let num = (0..6).map(|_| rng.random_range(0..1000)).collect();
                RationalPlane::from_parts(3, 2, 1, [1, 2, 4, 16][i], num)
            }).collect();
            let mut rev = planes.clone();
            rev.reverse();
            prop_assert_eq!(fuse_parallel(&planes).unwrap(), fuse_parallel(&rev).unwrap());
        }
    }
}
