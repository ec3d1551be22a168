//! Gradient descent directly on table values.
//!
//! The forward pass runs the engine on materialized tables (shadow values
//! rounded half up and clamped) and records, for every interpolation, the
//! simplex it used and where its taps came from. Given the simplex, a stage's
//! output is linear in the table values, so the backward pass distributes each
//! upstream gradient over the touched vertices by weight. Requantization
//! between stages passes gradients through unchanged, and the derivative of an
//! interpolation with respect to its inputs is the difference of consecutive
//! simplex vertices.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::engine::{EngineError, Pipeline, StageLayout, StagePlan};
use crate::image::{round_half_up_clamp_f64, ImagePlane, RationalPlane};
use crate::interp::Simplex;
use crate::lut::LutTable;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("pair {index}: {msg}")]
    Geometry { index: usize, msg: String },
    #[error("loss became {loss} at iteration {iter}")]
    NonFinite { iter: usize, loss: f64 },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// One recorded spatial interpolation.
#[derive(Debug, Clone, Copy)]
struct SpatialRecord {
    table: u32,
    branch: u16,
    channel: u8,
    ay: u32,
    ax: u32,
    simplex: Simplex,
    pos: [u32; 4],
}

#[derive(Debug, Clone)]
struct BranchInfo {
    scale: u32,
    plane_step: usize,
    /// Per value channel: `(plane, dy, dx)` relative to the anchor cell.
    targets: Vec<Vec<(usize, usize, usize)>>,
}

#[derive(Debug, Clone)]
struct SpatialTape {
    in_len: usize,
    out_w: usize,
    out_h: usize,
    cell: usize,
    den: u32,
    branches: Vec<BranchInfo>,
    records: Vec<SpatialRecord>,
}

#[derive(Debug, Clone, Copy)]
struct ChannelRecord {
    simplex: Simplex,
    pos: [u32; 3],
    /// Output index of each value channel.
    out: [u32; 3],
}

#[derive(Debug, Clone)]
struct ChannelTape {
    table: u32,
    len: usize,
    den: u32,
    records: Vec<ChannelRecord>,
}

#[derive(Debug, Clone)]
enum Part {
    Spatial(SpatialTape),
    Channel(ChannelTape),
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    parts: Vec<Part>,
    output: RationalPlane,
}

impl Tape {
    /// Final-stage output before rounding.
    pub fn output(&self) -> &RationalPlane {
        &self.output
    }

    /// Number of recorded interpolations.
    pub fn queries(&self) -> usize {
        self.parts
            .iter()
            .map(|p| match p {
                Part::Spatial(s) => s.records.len(),
                Part::Channel(c) => c.records.len(),
            })
            .sum()
    }

    /// Normalized weights of every recorded query.
    pub fn weights(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        self.parts.iter().flat_map(|p| -> Box<dyn Iterator<Item = Vec<f64>>> {
            let norm = |s: &Simplex| s.weight[..s.len].iter().map(|&w| w as f64 / s.den as f64).collect();
            match p {
                Part::Spatial(t) => Box::new(t.records.iter().map(move |r| norm(&r.simplex))),
                Part::Channel(t) => Box::new(t.records.iter().map(move |r| norm(&r.simplex))),
            }
        })
    }
}

/// First table index of each block and each channel block, per stage.
fn table_bases(p: &Pipeline) -> Vec<(Vec<usize>, Option<usize>)> {
    let mut k = 0;
    p.stages()
        .iter()
        .map(|s| {
            let blocks = s
                .blocks
                .iter()
                .map(|b| {
                    let base = k;
                    k += b.luts.len();
                    base
                })
                .collect();
            let channel = s.channel.as_ref().map(|_| {
                k += 1;
                k - 1
            });
            (blocks, channel)
        })
        .collect()
}

/// Runs the pipeline and records the tape. The output equals
/// [`Pipeline::run_rational`].
pub fn forward_with_tape(p: &Pipeline, img: &ImagePlane) -> Result<Tape, EngineError> {
    let bases = table_bases(p);
    let tables = p.tables();
    let mut parts = Vec::new();
    let mut cur = img.clone();
    let mut output = None;
    let last = p.stages().len() - 1;
    for (si, stage) in p.stages().iter().enumerate() {
        let mut out: Option<RationalPlane> = None;
        if !stage.blocks.is_empty() {
            let plan = StagePlan::new(si, stage, cur.width(), cur.height(), cur.channels())?;
            let data = cur.data();
            let rows: Vec<Vec<SpatialRecord>> = (0..plan.anchor_rows)
                .into_par_iter()
                .map(|ay| {
                    let mut v = Vec::new();
                    plan.for_each_query_in_row(data, ay, |q| {
                        let br = &plan.branches[q.branch];
                        let table = bases[si].0[br.block] + if br.spatial.luts.len() == 3 { q.channel } else { 0 };
                        v.push(SpatialRecord {
                            table: table as u32,
                            branch: q.branch as u16,
                            channel: q.channel as u8,
                            ay: ay as u32,
                            ax: q.ax as u32,
                            simplex: Simplex::locate(q.lut, &q.x),
                            pos: q.pos.map(|i| i as u32),
                        });
                    });
                    v
                })
                .collect();
            let records: Vec<SpatialRecord> = rows.into_iter().flatten().collect();
            // Output from the recorded simplices, in the engine's own arithmetic.
            let mut num = vec![0u32; plan.out_c * plan.out_h * plan.out_w];
            let mut tmp = [0u32; 64];
            for r in &records {
                let br = &plan.branches[r.branch as usize];
                let lut = &tables[r.table as usize];
                let tmp = &mut tmp[..lut.m() as usize];
                tmp.fill(0);
                r.simplex.accumulate(lut, br.scale, tmp);
                for (j, targets) in br.targets.iter().enumerate() {
                    for t in targets {
                        let plane = r.channel as usize * br.plane_step + t.plane;
                        let y = r.ay as usize * plan.cell + t.dy;
                        let x = r.ax as usize * plan.cell + t.dx;
                        num[(plane * plan.out_h + y) * plan.out_w + x] += tmp[j];
                    }
                }
            }
            let rational = RationalPlane::from_parts(plan.out_w, plan.out_h, plan.out_c, plan.den, num);
            parts.push(Part::Spatial(SpatialTape {
                in_len: data.len(),
                out_w: plan.out_w,
                out_h: plan.out_h,
                cell: plan.cell,
                den: plan.den,
                branches: plan
                    .branches
                    .iter()
                    .map(|b| BranchInfo {
                        scale: b.scale,
                        plane_step: b.plane_step,
                        targets: b.targets.iter().map(|ts| ts.iter().map(|t| (t.plane, t.dy, t.dx)).collect()).collect(),
                    })
                    .collect(),
                records,
            }));
            out = Some(rational);
        }
        if let Some(cb) = &stage.channel {
            if let Some(o) = out.take() {
                cur = o.requantize();
            }
            let rational = crate::engine::apply_channel_block(&cur, cb)?;
            let lut = &*cb.lut;
            let n = cur.width() * cur.height();
            let data = cur.data();
            let mut records = Vec::with_capacity(n * if lut.m() == 1 { 3 } else { 1 });
            for i in 0..n {
                let pos = [i, n + i, 2 * n + i];
                if lut.m() == 3 {
                    let x = pos.map(|j| data[j]);
                    records.push(ChannelRecord {
                        simplex: Simplex::locate(lut, &x),
                        pos: pos.map(|j| j as u32),
                        out: pos.map(|j| j as u32),
                    });
                } else {
                    for c in 0..3 {
                        let pc = [pos[c], pos[(c + 1) % 3], pos[(c + 2) % 3]];
                        records.push(ChannelRecord {
                            simplex: Simplex::locate(lut, &pc.map(|j| data[j])),
                            pos: pc.map(|j| j as u32),
                            out: [pos[c] as u32; 3],
                        });
                    }
                }
            }
            parts.push(Part::Channel(ChannelTape {
                table: bases[si].1.unwrap() as u32,
                len: data.len(),
                den: lut.grid().spacing(),
                records,
            }));
            out = Some(rational);
        }
        let o = out.expect("validated stage");
        if si == last {
            output = Some(o);
        } else {
            cur = o.requantize();
        }
    }
    Ok(Tape {
        parts,
        output: output.unwrap(),
    })
}

/// Gradients per table value, in [`Pipeline::tables`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tables: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(p: &Pipeline) -> Self {
        Self {
            tables: p.tables().iter().map(|t| vec![0.0; t.values().len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.tables.iter_mut().zip(&other.tables) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> f64 {
        self.tables.iter().flatten().sum()
    }
}

/// Derivative of `sum_j g_j * interp_j` with respect to each index axis.
fn input_slopes(table: &LutTable, s: &Simplex, g: &[f64]) -> [f64; 4] {
    let m = table.m() as usize;
    let v = table.values();
    let mut out = [0.0; 4];
    for k in 0..s.len - 1 {
        let (a, b) = (s.vertex[k] * m, s.vertex[k + 1] * m);
        let mut d = 0.0;
        for (j, gj) in g.iter().enumerate() {
            d += gj * (v[b + j] as f64 - v[a + j] as f64);
        }
        out[s.axis[k] as usize] += d;
    }
    out
}

/// Accumulates `dL/dvalue` into `grads` given `dL/doutput` for the tape's
/// final stage output.
pub fn backward(p: &Pipeline, tape: &Tape, g_out: &[f64], grads: &mut Gradients) {
    assert_eq!(g_out.len(), tape.output.numerators().len());
    let tables = p.tables();
    let mut g = g_out.to_vec();
    for (pi, part) in tape.parts.iter().enumerate().rev() {
        let need_input = pi > 0;
        match part {
            Part::Spatial(t) => {
                let mut g_in = vec![0.0; if need_input { t.in_len } else { 0 }];
                let mut gj = [0.0f64; 64];
                for r in &t.records {
                    let br = &t.branches[r.branch as usize];
                    let table = &tables[r.table as usize];
                    let m = table.m() as usize;
                    let c = br.scale as f64 / t.den as f64;
                    for (j, targets) in br.targets.iter().enumerate() {
                        let mut sum = 0.0;
                        for &(plane, dy, dx) in targets {
                            let plane = r.channel as usize * br.plane_step + plane;
                            let y = r.ay as usize * t.cell + dy;
                            let x = r.ax as usize * t.cell + dx;
                            sum += g[(plane * t.out_h + y) * t.out_w + x];
                        }
                        gj[j] = sum * c;
                    }
                    let dst = &mut grads.tables[r.table as usize];
                    let s = &r.simplex;
                    for k in 0..s.len {
                        let w = s.weight[k] as f64;
                        if w == 0.0 {
                            continue;
                        }
                        let base = s.vertex[k] * m;
                        for j in 0..m {
                            dst[base + j] += gj[j] * w;
                        }
                    }
                    if need_input {
                        let slopes = input_slopes(table, s, &gj[..m]);
                        for (a, &pos) in r.pos.iter().enumerate() {
                            g_in[pos as usize] += slopes[a];
                        }
                    }
                }
                g = g_in;
            }
            Part::Channel(t) => {
                let table = &tables[t.table as usize];
                let m = table.m() as usize;
                let c = 1.0 / t.den as f64;
                let mut g_in = vec![0.0; t.len];
                for r in &t.records {
                    let mut gj = [0.0; 3];
                    for j in 0..m {
                        gj[j] = g[r.out[j] as usize] * c;
                    }
                    let dst = &mut grads.tables[t.table as usize];
                    let s = &r.simplex;
                    for k in 0..s.len {
                        let w = s.weight[k] as f64;
                        for j in 0..m {
                            dst[s.vertex[k] * m + j] += gj[j] * w;
                        }
                    }
                    let slopes = input_slopes(table, s, &gj[..m]);
                    for (a, &pos) in r.pos.iter().enumerate() {
                        g_in[pos as usize] += slopes[a];
                    }
                }
                g = g_in;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Default step size, in pixel levels per iteration.
pub const DEFAULT_LR: f64 = 0.5;

/// Floating-point shadow of every table value plus optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneState {
    pub shadow: Vec<Vec<f64>>,
    m1: Vec<Vec<f64>>,
    m2: Vec<Vec<f64>>,
    pub step: u64,
    pub adam: AdamConfig,
}

impl FinetuneState {
    pub fn new(p: &Pipeline, adam: AdamConfig) -> Self {
        let shadow: Vec<Vec<f64>> = p.tables().iter().map(|t| t.values().iter().map(|&v| v as f64).collect()).collect();
        let zeros: Vec<Vec<f64>> = shadow.iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            shadow,
            m1: zeros.clone(),
            m2: zeros,
            step: 0,
            adam,
        }
    }

    /// `template` with every table replaced by the rounded, clamped shadow.
    pub fn materialize(&self, template: &Pipeline) -> Pipeline {
        let tables = template
            .tables()
            .iter()
            .zip(&self.shadow)
            .map(|(t, s)| {
                let values = s.iter().map(|&v| round_half_up_clamp_f64(v)).collect();
                Arc::new(LutTable::new(t.n(), t.m(), t.grid(), values).expect("same shape"))
            })
            .collect();
        template.with_tables(tables)
    }

    /// One Adam update. Shadows are kept within `[0, 255]`.
    pub fn apply(&mut self, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.adam;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((s, m1), m2), g) in self.shadow.iter_mut().zip(&mut self.m1).zip(&mut self.m2).zip(&grads.tables) {
            s.par_iter_mut()
                .zip(m1.par_iter_mut())
                .zip(m2.par_iter_mut())
                .zip(g.par_iter())
                .for_each(|(((s, m1), m2), &g)| {
                    *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                    *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                    let step = lr * (*m1 / c1) / ((*m2 / c2).sqrt() + eps);
                    *s = (*s - step).clamp(0.0, 255.0);
                });
        }
    }
}

/// A low-quality input and its target.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub lq: ImagePlane,
    pub hq: ImagePlane,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub iters: usize,
    pub batch: usize,
    /// Side of the square input patch.
    pub patch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            batch: 8,
            patch: 48,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub pipeline: Pipeline,
    pub state: FinetuneState,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
}

/// Loss and its gradient for one patch; the gradient is scaled by `norm`.
fn patch_loss(p: &Pipeline, lq: &ImagePlane, hq: &ImagePlane, norm: f64) -> Result<(f64, Gradients), EngineError> {
    let tape = forward_with_tape(p, lq)?;
    let out = tape.output();
    let den = out.den() as f64;
    let mut sse = 0.0;
    let g: Vec<f64> = out
        .numerators()
        .iter()
        .zip(hq.data())
        .map(|(&n, &t)| {
            let e = n as f64 / den - t as f64;
            sse += e * e;
            2.0 * e * norm
        })
        .collect();
    let mut grads = Gradients::zeros(p);
    backward(p, &tape, &g, &mut grads);
    Ok((sse, grads))
}

fn check_pairs(p: &Pipeline, data: &[Pair]) -> Result<(), FinetuneError> {
    if data.is_empty() {
        return Err(FinetuneError::EmptyDataset);
    }
    let s = p.scale();
    for (index, pair) in data.iter().enumerate() {
        let (w, h, _) = pair.lq.dims();
        let probe_w = w.min(4) & !1;
        let probe_h = h.min(4) & !1;
        let geo = |msg: String| FinetuneError::Geometry { index, msg };
        if probe_w == 0 || probe_h == 0 {
            return Err(geo(format!("input {w}x{h} is too small")));
        }
        let probe = p.run_rational(&pair.lq.crop(0, 0, probe_w, probe_h)).map_err(|e| geo(e.to_string()))?;
        let want = (w * s, h * s, probe.channels());
        if pair.hq.dims() != want {
            return Err(geo(format!("target is {:?}, pipeline produces {:?}", pair.hq.dims(), want)));
        }
    }
    Ok(())
}

/// Mean squared error of the unrounded output over a whole dataset.
pub fn dataset_mse(p: &Pipeline, data: &[Pair]) -> Result<f64, EngineError> {
    let parts: Vec<(f64, usize)> = data
        .par_iter()
        .map(|pair| {
            let out = p.run_rational(&pair.lq)?;
            let den = out.den() as f64;
            let sse = out
                .numerators()
                .iter()
                .zip(pair.hq.data())
                .map(|(&n, &t)| (n as f64 / den - t as f64).powi(2))
                .sum::<f64>();
            Ok((sse, out.numerators().len()))
        })
        .collect::<Result<_, EngineError>>()?;
    let (sse, n) = parts.iter().fold((0.0, 0), |(a, b), &(s, n)| (a + s, b + n));
    Ok(sse / n as f64)
}

/// Runs `cfg.iters` Adam updates on random patches. `on_iter` sees each
/// batch loss as it is computed.
pub fn finetune(
    p: &Pipeline,
    data: &[Pair],
    cfg: &FinetuneConfig,
    mut on_iter: impl FnMut(usize, f64),
) -> Result<FinetuneOutcome, FinetuneError> {
    check_pairs(p, data)?;
    let scale = p.scale();
    let even = p.stages()[0].layout != StageLayout::Dense;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = FinetuneState::new(p, cfg.adam);
    let mut current = p.clone();
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let mut crops = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch.max(1) {
            let pair = &data[rng.random_range(0..data.len())];
            let (w, h, _) = pair.lq.dims();
            let mut pw = cfg.patch.min(w);
            let mut ph = cfg.patch.min(h);
            if even {
                pw &= !1;
                ph &= !1;
            }
            let mut x0 = rng.random_range(0..=w - pw);
            let mut y0 = rng.random_range(0..=h - ph);
            if even {
                x0 &= !1;
                y0 &= !1;
            }
            let lq = pair.lq.crop(x0, y0, pw, ph);
            let hq = pair.hq.crop(x0 * scale, y0 * scale, pw * scale, ph * scale);
            crops.push((lq, hq));
        }
        let count: usize = crops.iter().map(|(_, hq)| hq.data().len()).sum();
        let norm = 1.0 / count as f64;
        let results: Vec<(f64, Gradients)> = crops
            .par_iter()
            .map(|(lq, hq)| patch_loss(&current, lq, hq, norm))
            .collect::<Result<_, EngineError>>()?;
        // Fixed-order reduction.
        let mut total = Gradients::zeros(&current);
        let mut sse = 0.0;
        for (s, g) in &results {
            sse += s;
            total.add(g);
        }
        let loss = sse / count as f64;
        if !loss.is_finite() {
            return Err(FinetuneError::NonFinite { iter, loss });
        }
        on_iter(iter, loss);
        losses.push(loss);
        state.apply(&total);
        current = state.materialize(p);
    }
    Ok(FinetuneOutcome {
        pipeline: current,
        state,
        losses,
    })
}

/// Writes the loss trace as `iter,loss` CSV.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> io::Result<()> {
    let mut s = String::from("iter,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    fs::write(path, s)
}
