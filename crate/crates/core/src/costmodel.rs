//! Operation counting and energy estimation.
//!
//! Counting conventions, per stage:
//!
//! * a 4D query costs 13 int8 adds (4 fraction extractions, 5 comparators of
//!   the sorting network, 4 weight differences); a 3D channel query costs 9;
//! * each value of a query costs one int32 mult per simplex vertex and one
//!   int32 add per vertex after the first;
//! * every contribution past the first to an output sample costs one int32
//!   add, which covers the rotation ensemble and branch fusion;
//! * rounding each output sample costs one int32 add (power-of-two
//!   rescaling and shifts are free).

use std::fmt::Write as _;

use crate::engine::StageLayout;
use crate::pipelines::{ColorMode, PipelineSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Int8,
    Int32,
    Float16,
    Float32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Mult,
}

pub const DTYPES: [DType; 4] = [DType::Int8, DType::Int32, DType::Float16, DType::Float32];
pub const OPS: [Op; 2] = [Op::Add, Op::Mult];

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::Int8 => "int8",
            DType::Int32 => "int32",
            DType::Float16 => "float16",
            DType::Float32 => "float32",
        }
    }
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Mult => "mult",
        }
    }
}

fn slot(d: DType, o: Op) -> usize {
    (d as usize) * 2 + o as usize
}

/// Picojoules per operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTable {
    costs: [f64; 8],
}

impl Default for EnergyTable {
    fn default() -> Self {
        Self {
            costs: [0.03, 0.2, 0.1, 3.1, 0.4, 1.1, 0.9, 3.7],
        }
    }
}

impl EnergyTable {
    pub fn cost(&self, d: DType, o: Op) -> f64 {
        self.costs[slot(d, o)]
    }

    pub fn set(&mut self, d: DType, o: Op, pj: f64) {
        self.costs[slot(d, o)] = pj;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    counts: [u64; 8],
}

impl OpCounts {
    pub fn get(&self, d: DType, o: Op) -> u64 {
        self.counts[slot(d, o)]
    }

    pub fn add(&mut self, d: DType, o: Op, n: u64) {
        self.counts[slot(d, o)] += n;
    }

    pub fn scaled(&self, k: u64) -> OpCounts {
        OpCounts {
            counts: self.counts.map(|c| c * k),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

impl std::ops::AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: Self) {
        for (a, b) in self.counts.iter_mut().zip(rhs.counts) {
            *a += b;
        }
    }
}

/// Counts of `queries` interpolations of a `dim`-input table with `values`
/// outputs each.
fn queries(dim: u64, queries: u64, values: u64) -> OpCounts {
    let int8 = match dim {
        4 => 13,
        _ => 9,
    };
    let vertices = dim + 1;
    let mut c = OpCounts::default();
    c.add(DType::Int8, Op::Add, queries * int8);
    c.add(DType::Int32, Op::Mult, queries * values * vertices);
    c.add(DType::Int32, Op::Add, queries * values * (vertices - 1));
    c
}

/// Input channels of the pipeline described by `spec`.
pub fn spec_input_channels(spec: &PipelineSpec) -> usize {
    match spec.stages.first() {
        None => 1,
        Some(s) if s.layout != StageLayout::Dense => 1,
        Some(s) if s.per_channel => 3,
        Some(s) if s.out_channels > 1 => 1,
        Some(_) => match spec.color_mode {
            ColorMode::Grayscale => 1,
            _ => 3,
        },
    }
}

/// Operation counts for running `spec` on a `width x height` input.
pub fn count_ops(spec: &PipelineSpec, width: usize, height: usize) -> OpCounts {
    let mut total = OpCounts::default();
    let (mut w, mut h, mut c) = (width as u64, height as u64, spec_input_channels(spec) as u64);
    for s in &spec.stages {
        let n = s.blocks.len() as u64;
        let r = s.upscale as u64;
        let v = s.values_per_entry() as u64;
        if n > 0 {
            // (anchors, branches per anchor, contributions per value, output dims)
            let (anchors, branches, targets, ow, oh, oc) = match s.layout {
                StageLayout::Dense => (w * h * c, 4 * n, 1, w * r, h * r, c * s.out_channels as u64),
                StageLayout::BayerCell => (w / 2 * (h / 2), n, 1, w / 2 * r, h / 2 * r, s.out_channels as u64),
                StageLayout::BayerSplit => (w / 2 * (h / 2), 4 * n, 4, w, h, 3),
            };
            let q = anchors * branches;
            total += queries(4, q, v);
            let out = ow * oh * oc;
            total.add(DType::Int32, Op::Add, q * v * targets - out);
            total.add(DType::Int32, Op::Add, out);
            (w, h, c) = (ow, oh, oc);
        }
        if let Some(m) = s.channel {
            let px = w * h;
            total += if m == 1 { queries(3, 3 * px, 1) } else { queries(3, px, 3) };
            total.add(DType::Int32, Op::Add, 3 * px);
            c = 3;
        }
    }
    total
}

pub fn estimate_energy(counts: &OpCounts, table: &EnergyTable) -> f64 {
    let mut e = 0.0;
    for d in DTYPES {
        for o in OPS {
            e += counts.get(d, o) as f64 * table.cost(d, o);
        }
    }
    e
}

/// One report row per (dtype, op) pair plus a total line.
pub fn report_csv(counts: &OpCounts, table: &EnergyTable) -> String {
    let mut s = String::from("dtype,op,count,pj_per_op,energy_pj\n");
    for d in DTYPES {
        for o in OPS {
            let n = counts.get(d, o);
            let pj = table.cost(d, o);
            let _ = writeln!(s, "{},{},{},{},{}", d.name(), o.name(), n, pj, n as f64 * pj);
        }
    }
    let _ = writeln!(s, "total,,{},,{}", counts.total(), estimate_energy(counts, table));
    s
}

fn human(x: f64) -> String {
    let units = [(1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "K")];
    for (f, u) in units {
        if x.abs() >= f {
            return format!("{:.1}{u}", x / f);
        }
    }
    format!("{x:.1}")
}

pub fn report_table(counts: &OpCounts, table: &EnergyTable) -> String {
    let mut s = format!("{:<8} {:<5} {:>10} {:>12}\n", "dtype", "op", "count", "energy(pJ)");
    for d in DTYPES {
        for o in OPS {
            let n = counts.get(d, o);
            if n > 0 {
                let _ = writeln!(s, "{:<8} {:<5} {:>10} {:>12}", d.name(), o.name(), human(n as f64), human(n as f64 * table.cost(d, o)));
            }
        }
    }
    let _ = writeln!(s, "{:<14} {:>10} {:>12}", "total", human(counts.total() as f64), human(estimate_energy(counts, table)));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipelines::PRESETS;

    fn spec(name: &str, scale: usize) -> PipelineSpec {
        PipelineSpec::preset(name, scale).unwrap()
    }

    fn energy(name: &str, scale: usize, w: usize, h: usize) -> f64 {
        estimate_energy(&count_ops(&spec(name, scale), w, h), &EnergyTable::default())
    }

    #[test]
    fn energy_table_defaults() {
        let t = EnergyTable::default();
        let want = [
            (DType::Int8, 0.03, 0.2),
            (DType::Int32, 0.1, 3.1),
            (DType::Float16, 0.4, 1.1),
            (DType::Float32, 0.9, 3.7),
        ];
        for (d, a, m) in want {
            assert_eq!(t.cost(d, Op::Add), a);
            assert_eq!(t.cost(d, Op::Mult), m);
        }
        assert_eq!(estimate_energy(&OpCounts::default(), &t), 0.0);
        let mut one = OpCounts::default();
        one.add(DType::Int8, Op::Add, 1);
        assert_eq!(estimate_energy(&one, &t), 0.03);
        let c = count_ops(&spec("MuLUT-SDY", 2), 20, 10);
        assert!((estimate_energy(&c.scaled(7), &t) - 7.0 * estimate_energy(&c, &t)).abs() < 1e-6);
    }

    #[test]
    fn empty_and_linear() {
        let mut s = spec("SR-LUT", 2);
        s.stages.clear();
        assert_eq!(count_ops(&s, 64, 64), OpCounts::default());
        for name in PRESETS {
            let scale = if name.ends_with("-C") || name.starts_with("Baseline") { 1 } else { 2 };
            let s = spec(name, scale);
            assert_eq!(count_ops(&s, 32, 16).scaled(2), count_ops(&s, 32, 32), "{name}");
            assert!(count_ops(&s, 32, 16).total() > 0);
        }
    }

    #[test]
    fn sr_lut_closed_form() {
        // One block, four rotations, four values per query at x2.
        let c = count_ops(&spec("SR-LUT", 2), 10, 10);
        let px = 100;
        assert_eq!(c.get(DType::Int8, Op::Add), px * 4 * 13);
        assert_eq!(c.get(DType::Int32, Op::Mult), px * 4 * 4 * 5);
        assert_eq!(c.get(DType::Int32, Op::Add), px * (4 * 4 * 4 + 4 * 3 + 4));
        assert_eq!(c.get(DType::Float32, Op::Add), 0);
    }

    #[test]
    fn monotone_in_stages_and_branches() {
        let e = |n: &str| energy(n, 4, 64, 64);
        assert!(e("MuLUT-S-X2") < e("MuLUT-S-X3"));
        assert!(e("MuLUT-S-X3") < e("MuLUT-S-X4"));
        assert!(e("SR-LUT") < e("MuLUT-SDY"));
        assert!(e("MuLUT-SDY") < e("MuLUT-SDYEHO"));
        assert!(e("MuLUT-SDY-X2") < e("MuLUT-SDYEHO-X2"));
        let mut more = spec("MuLUT-SDY-X2-C", 1);
        let base = estimate_energy(&count_ops(&more, 64, 64), &EnergyTable::default());
        let extra = more.stages[1].blocks[0];
        more.stages[1].blocks.push(extra);
        assert!(estimate_energy(&count_ops(&more, 64, 64), &EnergyTable::default()) > base);
        assert!(energy("MuLUT-SDY-X2-C", 1, 64, 64) < energy("MuLUT-SDYEHO-X2-C", 1, 64, 64));
    }

    #[test]
    fn reports() {
        let c = count_ops(&spec("SR-LUT", 2), 640, 360);
        let csv = report_csv(&c, &EnergyTable::default());
        assert_eq!(csv.lines().count(), 10);
        assert!(csv.starts_with("dtype,op,count,pj_per_op,energy_pj\nint8,add,"));
        let t = report_table(&c, &EnergyTable::default());
        assert!(t.contains("total"));
    }
}
