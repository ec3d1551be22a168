//! Declarative pipeline descriptions: presets, a line-oriented config format,
//! and binding of table slots to files or generated tables.
//!
//! ```text
//! # comments start with '#'
//! name = MuLUT-SDY-X2
//! task = sr
//! scale = 2
//! color_mode = grayscale
//! q = 4
//!
//! [stage]
//! blocks = S D Y
//! luts = s1_S.mlut s1_D.mlut s1_Y.mlut
//!
//! [stage]
//! blocks = S D Y
//! upscale = 2
//! ```
//!
//! Stage keys: `blocks` (pattern ids, optionally ending in `channel`),
//! `upscale`, `luts`, and the optional `layout` (`dense`, `bayer-cell`,
//! `bayer-split`), `out_channels`, `per_channel` and `channel_m`. When `luts`
//! is given it lists one path per table slot in slot order, resolved relative
//! to the config file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::engine::{ChannelBlock, EngineError, Pipeline, SpatialBlock, Stage, StageLayout};
use crate::format::{read_header, LutFile, Role};
use crate::image::ImagePlane;
use crate::lut::{lut_size_bytes, LutTable, SamplingGrid};
use crate::pattern::Pattern;
use crate::transfer::{validate_import, Diagnostic, ImportExpectation};

pub const PRESETS: [&str; 13] = [
    "SR-LUT",
    "MuLUT-SDY",
    "MuLUT-SDYEHO",
    "MuLUT-SDY-X2",
    "MuLUT-SDYEHO-X2",
    "MuLUT-S-X2",
    "MuLUT-S-X3",
    "MuLUT-S-X4",
    "MuLUT-SDY-X2-C",
    "MuLUT-SDYEHO-X2-C",
    "Baseline-A",
    "Baseline-B",
    "MuLUT-S",
];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("preset {preset} does not support scale {scale}")]
    InvalidScale { preset: String, scale: usize },
    #[error("line {line}: {field}: {message}")]
    Config {
        line: usize,
        field: String,
        message: String,
    },
    #[error("invalid pipeline: {0}")]
    Invalid(String),
    #[error("{}: {}", path.display(), join(diags))]
    Lut { path: PathBuf, diags: Vec<Diagnostic> },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn join(d: &[Diagnostic]) -> String {
    d.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Sr,
    Denoise,
    Deblock,
    Demosaic,
    Custom,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Sr => "sr",
            Task::Denoise => "denoise",
            Task::Deblock => "deblock",
            Task::Demosaic => "demosaic",
            Task::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        [Task::Sr, Task::Denoise, Task::Deblock, Task::Demosaic, Task::Custom]
            .into_iter()
            .find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMode {
    Grayscale,
    PerChannel,
    PerChannelLut,
}

impl ColorMode {
    pub fn name(self) -> &'static str {
        match self {
            ColorMode::Grayscale => "grayscale",
            ColorMode::PerChannel => "per-channel",
            ColorMode::PerChannelLut => "per-channel+channel-LUT",
        }
    }

    pub fn parse(s: &str) -> Option<ColorMode> {
        [ColorMode::Grayscale, ColorMode::PerChannel, ColorMode::PerChannelLut]
            .into_iter()
            .find(|t| t.name() == s)
    }
}

fn layout_name(l: StageLayout) -> &'static str {
    match l {
        StageLayout::Dense => "dense",
        StageLayout::BayerCell => "bayer-cell",
        StageLayout::BayerSplit => "bayer-split",
    }
}

fn parse_layout(s: &str) -> Option<StageLayout> {
    [StageLayout::Dense, StageLayout::BayerCell, StageLayout::BayerSplit]
        .into_iter()
        .find(|&l| layout_name(l) == s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub layout: StageLayout,
    pub blocks: Vec<Pattern>,
    pub upscale: usize,
    pub out_channels: usize,
    /// One table per colour channel for every block.
    pub per_channel: bool,
    /// Values per entry of the trailing channel block, if any.
    pub channel: Option<u16>,
    pub luts: Vec<PathBuf>,
}

impl StageSpec {
    pub fn dense(ids: &str, upscale: usize) -> Self {
        Self {
            layout: StageLayout::Dense,
            blocks: ids.chars().map(|c| Pattern::builtin(c).expect("builtin id")).collect(),
            upscale,
            out_channels: 1,
            per_channel: false,
            channel: None,
            luts: Vec::new(),
        }
    }

    fn tables_per_block(&self) -> usize {
        if self.per_channel {
            3
        } else {
            1
        }
    }

    pub fn values_per_entry(&self) -> u16 {
        (self.upscale * self.upscale * self.out_channels) as u16
    }

    pub fn slot_count(&self) -> usize {
        self.blocks.len() * self.tables_per_block() + self.channel.is_some() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSpec {
    pub name: Option<String>,
    pub task: Task,
    pub scale: usize,
    pub color_mode: ColorMode,
    pub q: u8,
    pub stages: Vec<StageSpec>,
}

/// One table position of a pipeline, in config order.
#[derive(Debug, Clone, PartialEq)]
pub struct LutSlot {
    pub stage: usize,
    /// Block index within the stage, `None` for the channel block.
    pub block: Option<usize>,
    /// Colour channel of a per-channel table.
    pub channel: Option<usize>,
    pub expect: ImportExpectation,
}

impl LutSlot {
    pub fn file_name(&self) -> String {
        let chan = ["r", "g", "b"];
        match (self.block, self.expect.pattern) {
            (Some(b), Some(p)) => match self.channel {
                Some(c) => format!("s{}_{}{}_{}.mlut", self.stage + 1, b, p.id(), chan[c]),
                None => format!("s{}_{}{}.mlut", self.stage + 1, b, p.id()),
            },
            _ => format!("s{}_channel.mlut", self.stage + 1),
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        let e = &self.expect;
        lut_size_bytes(e.q as u32, e.n as u32, e.m as u64).expect("validated slot")
    }
}

impl PipelineSpec {
    fn new(name: &str, task: Task, scale: usize, color_mode: ColorMode, stages: Vec<StageSpec>) -> Self {
        Self {
            name: Some(name.to_string()),
            task,
            scale,
            color_mode,
            q: 4,
            stages,
        }
    }

    /// Builds a named preset. Super-resolution presets accept `scale` 2..=4;
    /// scale 1 gives the same structure for denoising. Demosaic presets and
    /// colour denoising keep the resolution and take `scale` 1.
    pub fn preset(name: &str, scale: usize) -> Result<Self, PipelineError> {
        let bad_scale = || PipelineError::InvalidScale {
            preset: name.to_string(),
            scale,
        };
        let cascade = |ids: &str, stages: usize| -> Result<Self, PipelineError> {
            if !(1..=4).contains(&scale) {
                return Err(bad_scale());
            }
            let mut v: Vec<StageSpec> = (0..stages).map(|_| StageSpec::dense(ids, 1)).collect();
            v.last_mut().unwrap().upscale = scale;
            let task = if scale > 1 { Task::Sr } else { Task::Denoise };
            Ok(Self::new(name, task, scale, ColorMode::Grayscale, v))
        };
        match name {
            "SR-LUT" | "MuLUT-S" => cascade("S", 1),
            "MuLUT-SDY" => cascade("SDY", 1),
            "MuLUT-SDYEHO" => cascade("SDYEHO", 1),
            "MuLUT-SDY-X2" => cascade("SDY", 2),
            "MuLUT-SDYEHO-X2" => cascade("SDYEHO", 2),
            "MuLUT-S-X2" => cascade("S", 2),
            "MuLUT-S-X3" => cascade("S", 3),
            "MuLUT-S-X4" => cascade("S", 4),
            "MuLUT-SDY-X2-C" | "Baseline-A" | "Baseline-B" | "MuLUT-SDYEHO-X2-C" if scale != 1 => Err(bad_scale()),
            "MuLUT-SDY-X2-C" => {
                let mut cell = StageSpec::dense("S", 2);
                cell.layout = StageLayout::BayerCell;
                cell.out_channels = 3;
                let mut s2 = StageSpec::dense("SDY", 1);
                s2.per_channel = true;
                s2.channel = Some(1);
                Ok(Self::new(name, Task::Demosaic, 1, ColorMode::PerChannelLut, vec![cell, s2]))
            }
            "MuLUT-SDYEHO-X2-C" => {
                let mut s1 = StageSpec::dense("SDYEHO", 1);
                s1.per_channel = true;
                s1.channel = Some(3);
                let mut s2 = StageSpec::dense("SDYEHO", 1);
                s2.per_channel = true;
                Ok(Self::new(name, Task::Denoise, 1, ColorMode::PerChannelLut, vec![s1, s2]))
            }
            "Baseline-A" => {
                let mut split = StageSpec::dense("SSSS", 1);
                split.layout = StageLayout::BayerSplit;
                Ok(Self::new(name, Task::Demosaic, 1, ColorMode::PerChannel, vec![split]))
            }
            "Baseline-B" => {
                let mut cell = StageSpec::dense("S", 2);
                cell.layout = StageLayout::BayerCell;
                cell.out_channels = 3;
                Ok(Self::new(name, Task::Demosaic, 1, ColorMode::PerChannel, vec![cell]))
            }
            _ => Err(PipelineError::UnknownPreset(name.to_string())),
        }
    }

    /// The same structure sampled with interval `2^q`.
    pub fn with_q(mut self, q: u8) -> Self {
        self.q = q;
        self
    }

    /// Overall output/input linear scale implied by the stages.
    pub fn stage_scale(&self) -> usize {
        self.stages
            .iter()
            .map(|s| match s.layout {
                StageLayout::Dense => s.upscale,
                StageLayout::BayerCell => s.upscale / 2,
                StageLayout::BayerSplit => 1,
            })
            .product()
    }

    /// Checks structural invariants; errors carry the stage index.
    pub fn validate(&self) -> Result<(), (Option<usize>, String)> {
        if self.stages.is_empty() {
            return Err((None, "at least one [stage] is required".into()));
        }
        if self.q > 8 {
            return Err((None, format!("q={} out of range 0..=8", self.q)));
        }
        let last_spatial = self.stages.iter().rposition(|s| !s.blocks.is_empty());
        let mut has_channel = false;
        for (i, s) in self.stages.iter().enumerate() {
            let fail = |m: String| Err((Some(i), m));
            if s.blocks.is_empty() && s.channel.is_none() {
                return fail("stage has no blocks".into());
            }
            if s.upscale == 0 || s.out_channels == 0 {
                return fail("upscale and out_channels must be positive".into());
            }
            if s.layout == StageLayout::Dense && s.upscale > 1 && Some(i) != last_spatial {
                return fail(format!("upscale={} on a stage that is not the final spatial stage", s.upscale));
            }
            if s.values_per_entry() as usize > 64 {
                return fail("more than 64 values per entry".into());
            }
            match s.layout {
                StageLayout::Dense if s.out_channels != 1 && i != 0 => {
                    return fail("only a first stage over a single-channel input may emit several channels".into());
                }
                StageLayout::BayerCell if i != 0 || s.upscale != 2 || s.per_channel => {
                    return fail("bayer-cell must be the first stage with upscale=2 and shared tables".into());
                }
                StageLayout::BayerSplit if i != 0 || s.blocks.len() != 4 || s.upscale != 1 || s.out_channels != 1 || s.per_channel => {
                    return fail("bayer-split must be the first stage with 4 blocks, upscale=1, one output".into());
                }
                StageLayout::BayerCell | StageLayout::BayerSplit if self.task != Task::Demosaic => {
                    return fail("Bayer layouts need task = demosaic".into());
                }
                _ => {}
            }
            if let Some(m) = s.channel {
                has_channel = true;
                if m != 1 && m != 3 {
                    return fail(format!("channel_m={m} (expected 1 or 3)"));
                }
            }
            if s.per_channel && self.color_mode == ColorMode::Grayscale {
                return fail("per_channel tables need a colour mode".into());
            }
            if !s.luts.is_empty() && s.luts.len() != s.slot_count() {
                return fail(format!("{} lut paths for {} table slots", s.luts.len(), s.slot_count()));
            }
        }
        if has_channel != (self.color_mode == ColorMode::PerChannelLut) {
            return Err((None, format!("color_mode {} disagrees with the channel blocks present", self.color_mode.name())));
        }
        if self.stage_scale() != self.scale {
            return Err((None, format!("scale={} but the stages give {}", self.scale, self.stage_scale())));
        }
        Ok(())
    }

    /// Every table slot in config order.
    pub fn slots(&self) -> Vec<LutSlot> {
        let last_spatial = self.stages.iter().rposition(|s| !s.blocks.is_empty());
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let role = if Some(i) == last_spatial {
                Role::SpatialOutput
            } else {
                Role::SpatialIntermediate
            };
            for (b, p) in s.blocks.iter().enumerate() {
                for c in 0..s.tables_per_block() {
                    out.push(LutSlot {
                        stage: i,
                        block: Some(b),
                        channel: s.per_channel.then_some(c),
                        expect: ImportExpectation {
                            role,
                            q: self.q,
                            n: 4,
                            m: s.values_per_entry(),
                            upscale: s.upscale as u8,
                            pattern: Some(*p),
                            allow_constant: true,
                        },
                    });
                }
            }
            if let Some(m) = s.channel {
                out.push(LutSlot {
                    stage: i,
                    block: None,
                    channel: None,
                    expect: ImportExpectation {
                        role: Role::Channel,
                        q: self.q,
                        n: 3,
                        m,
                        upscale: 1,
                        pattern: None,
                        allow_constant: true,
                    },
                });
            }
        }
        out
    }

    /// Total table payload in bytes.
    pub fn payload_bytes(&self) -> u64 {
        self.slots().iter().map(LutSlot::payload_bytes).sum()
    }

    /// Side of the square input window that can influence one output cell,
    /// for pipelines of dense stages.
    pub fn receptive_field(&self) -> Option<usize> {
        let mut radius = 0;
        for s in &self.stages {
            if s.layout != StageLayout::Dense {
                return None;
            }
            radius += s.blocks.iter().map(Pattern::reach).max().unwrap_or(0);
        }
        Some(2 * radius + 1)
    }

    /// Builds an executable pipeline, filling slot `k` with `tables(k, slot)`.
    pub fn bind_with(&self, mut tables: impl FnMut(usize, &LutSlot) -> Result<LutFile, PipelineError>) -> Result<Pipeline, PipelineError> {
        self.validate().map_err(|(i, m)| match i {
            Some(i) => PipelineError::Invalid(format!("stage {}: {m}", i + 1)),
            None => PipelineError::Invalid(m),
        })?;
        let mut slots = self.slots().into_iter().enumerate();
        let mut stages = Vec::new();
        for s in &self.stages {
            let mut blocks = Vec::new();
            for _ in &s.blocks {
                let mut luts = Vec::new();
                let mut pattern = None;
                for _ in 0..s.tables_per_block() {
                    let (k, slot) = slots.next().expect("slot count");
                    let f = tables(k, &slot)?;
                    pattern = f.pattern;
                    luts.push(Arc::new(f.table));
                }
                blocks.push(SpatialBlock {
                    pattern: pattern.expect("spatial table"),
                    upscale: s.upscale,
                    out_channels: s.out_channels,
                    luts,
                });
            }
            let channel = match s.channel {
                Some(_) => {
                    let (k, slot) = slots.next().expect("slot count");
                    Some(ChannelBlock {
                        lut: Arc::new(tables(k, &slot)?.table),
                    })
                }
                None => None,
            };
            stages.push(Stage {
                layout: s.layout,
                blocks,
                channel,
            });
        }
        Ok(Pipeline::new(stages)?)
    }

    /// Binds tables from the `luts` paths, resolved against `base`.
    pub fn bind(&self, base: &Path) -> Result<Pipeline, PipelineError> {
        let paths: Vec<PathBuf> = self.stages.iter().flat_map(|s| s.luts.iter().map(|p| base.join(p))).collect();
        if paths.len() != self.slots().len() {
            return Err(PipelineError::Invalid(format!(
                "{} lut paths for {} table slots",
                paths.len(),
                self.slots().len()
            )));
        }
        self.bind_with(|k, slot| load_slot(&paths[k], slot))
    }

    /// Binds uniformly random tables.
    pub fn bind_random<R: Rng>(&self, rng: &mut R) -> Result<Pipeline, PipelineError> {
        self.bind_with(|_, slot| Ok(random_file(slot, rng)))
    }

    pub fn to_config(&self) -> String {
        let mut s = String::new();
        if let Some(n) = &self.name {
            s += &format!("name = {n}\n");
        }
        s += &format!("task = {}\n", self.task.name());
        s += &format!("scale = {}\n", self.scale);
        s += &format!("color_mode = {}\n", self.color_mode.name());
        s += &format!("q = {}\n", self.q);
        for st in &self.stages {
            s += "\n[stage]\n";
            if st.layout != StageLayout::Dense {
                s += &format!("layout = {}\n", layout_name(st.layout));
            }
            let mut ids: Vec<String> = st.blocks.iter().map(|p| p.id().to_string()).collect();
            if st.channel.is_some() {
                ids.push("channel".into());
            }
            s += &format!("blocks = {}\n", ids.join(" "));
            s += &format!("upscale = {}\n", st.upscale);
            if st.out_channels != 1 {
                s += &format!("out_channels = {}\n", st.out_channels);
            }
            if st.per_channel {
                s += "per_channel = true\n";
            }
            if let Some(m) = st.channel {
                s += &format!("channel_m = {m}\n");
            }
            if !st.luts.is_empty() {
                let p: Vec<String> = st.luts.iter().map(|p| p.display().to_string()).collect();
                s += &format!("luts = {}\n", p.join(" "));
            }
        }
        s
    }
}

impl fmt::Display for PipelineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_config())
    }
}

fn load_slot(path: &Path, slot: &LutSlot) -> Result<LutFile, PipelineError> {
    let bytes = fs::read(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut expect = slot.expect;
    // A block is identified by its pattern id; the offsets come from the file.
    if let (Some(want), Ok(f)) = (expect.pattern, crate::format::LutHeader::decode(&bytes)) {
        if let Some(p) = f.pattern.filter(|p| p.id() == want.id()) {
            expect.pattern = Some(p);
        }
    }
    validate_import(&bytes, &expect).map_err(|diags| PipelineError::Lut {
        path: path.to_path_buf(),
        diags,
    })
}

/// Writes every table of `p` into `dir` under its slot file name, then a
/// config named `config_name` that references them. Returns the config path.
pub fn save_bound(spec: &PipelineSpec, p: &Pipeline, dir: &Path, config_name: &str) -> Result<PathBuf, PipelineError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let slots = spec.slots();
    let tables = p.tables();
    if slots.len() != tables.len() {
        return Err(PipelineError::Invalid(format!("{} tables for {} slots", tables.len(), slots.len())));
    }
    let mut out = spec.clone();
    out.stages.iter_mut().for_each(|s| s.luts.clear());
    for (slot, table) in slots.iter().zip(tables) {
        let pattern = slot.block.map(|b| p.stages()[slot.stage].blocks[b].pattern);
        let file = LutFile {
            role: slot.expect.role,
            upscale: slot.expect.upscale,
            pattern,
            table: (**table).clone(),
        };
        let path = dir.join(slot.file_name());
        file.save(&path).map_err(io(&path))?;
        out.stages[slot.stage].luts.push(PathBuf::from(slot.file_name()));
    }
    let cfg = dir.join(config_name);
    fs::write(&cfg, out.to_config()).map_err(io(&cfg))?;
    Ok(cfg)
}

/// A table of uniform random bytes shaped for `slot`.
pub fn random_file<R: Rng>(slot: &LutSlot, rng: &mut R) -> LutFile {
    let e = &slot.expect;
    let mut t = LutTable::filled(e.n, e.m, SamplingGrid::new(e.q).expect("validated q"), 0).expect("validated slot");
    rng.fill(t.values_mut());
    LutFile {
        role: e.role,
        upscale: e.upscale,
        pattern: e.pattern,
        table: t,
    }
}

fn cfg_err(line: usize, field: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

/// Parses and validates a config document. LUT paths are resolved against
/// `base`; each referenced file must exist and its header must match its slot.
pub fn parse_config(text: &str, base: &Path) -> Result<PipelineSpec, PipelineError> {
    let mut spec = PipelineSpec {
        name: None,
        task: Task::Custom,
        scale: 0,
        color_mode: ColorMode::Grayscale,
        q: 4,
        stages: Vec::new(),
    };
    let mut seen_scale = false;
    let mut stage_lines = Vec::new();
    let mut lut_lines = Vec::new();
    let mut seen_blocks = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content == "[stage]" {
            spec.stages.push(StageSpec {
                layout: StageLayout::Dense,
                blocks: Vec::new(),
                upscale: 1,
                out_channels: 1,
                per_channel: false,
                channel: None,
                luts: Vec::new(),
            });
            stage_lines.push(line);
            lut_lines.push(line);
            seen_blocks.push(false);
            continue;
        }
        if content.starts_with('[') {
            return Err(cfg_err(line, "section", format!("unknown section {content}")));
        }
        let (key, value) = content
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| cfg_err(line, "syntax", "expected `key = value`"))?;
        let num = |field: &str| -> Result<usize, PipelineError> {
            value
                .parse::<usize>()
                .map_err(|_| cfg_err(line, field, format!("expected a non-negative integer, got {value:?}")))
        };
        match spec.stages.last_mut() {
            None => match key {
                "name" => spec.name = Some(value.to_string()),
                "task" => spec.task = Task::parse(value).ok_or_else(|| cfg_err(line, key, format!("unknown task {value:?}")))?,
                "scale" => {
                    spec.scale = num(key)?;
                    seen_scale = true;
                }
                "color_mode" => {
                    spec.color_mode = ColorMode::parse(value).ok_or_else(|| cfg_err(line, key, format!("unknown color mode {value:?}")))?
                }
                "q" => {
                    let q = num(key)?;
                    if q > 8 {
                        return Err(cfg_err(line, key, format!("q={q} out of range 0..=8")));
                    }
                    spec.q = q as u8;
                }
                _ => return Err(cfg_err(line, key, "unknown top-level key")),
            },
            Some(st) => match key {
                "blocks" => {
                    let toks: Vec<&str> = value.split_whitespace().collect();
                    for (i, t) in toks.iter().enumerate() {
                        if *t == "channel" {
                            if i + 1 != toks.len() {
                                return Err(cfg_err(line, key, "channel must be the last block of a stage"));
                            }
                            st.channel.get_or_insert(3);
                        } else {
                            let mut cs = t.chars();
                            let p = match (cs.next(), cs.next()) {
                                (Some(c), None) => Pattern::builtin(c).ok(),
                                _ => None,
                            };
                            st.blocks.push(p.ok_or_else(|| cfg_err(line, key, format!("unknown pattern {t:?}")))?);
                        }
                    }
                    *seen_blocks.last_mut().unwrap() = true;
                }
                "upscale" => st.upscale = num(key)?,
                "out_channels" => st.out_channels = num(key)?,
                "channel_m" => {
                    if st.channel.is_none() {
                        return Err(cfg_err(line, key, "stage has no channel block (list `channel` in blocks first)"));
                    }
                    st.channel = Some(num(key)? as u16);
                }
                "per_channel" => {
                    st.per_channel = match value {
                        "true" => true,
                        "false" => false,
                        _ => return Err(cfg_err(line, key, "expected true or false")),
                    }
                }
                "layout" => st.layout = parse_layout(value).ok_or_else(|| cfg_err(line, key, format!("unknown layout {value:?}")))?,
                "luts" => {
                    st.luts = value.split_whitespace().map(PathBuf::from).collect();
                    *lut_lines.last_mut().unwrap() = line;
                }
                _ => return Err(cfg_err(line, key, "unknown stage key")),
            },
        }
    }
    if !seen_scale {
        return Err(cfg_err(text.lines().count().max(1), "scale", "missing required key"));
    }
    for (i, seen) in seen_blocks.iter().enumerate() {
        if !seen {
            return Err(cfg_err(stage_lines[i], "blocks", "stage without a blocks key"));
        }
    }
    spec.validate().map_err(|(stage, message)| match stage {
        Some(i) => cfg_err(stage_lines[i], "stage", format!("stage {}: {message}", i + 1)),
        None => cfg_err(1, "pipeline", message),
    })?;
    // Table references: existence first, then header agreement.
    let slots = spec.slots();
    let mut k = 0;
    for (i, st) in spec.stages.iter_mut().enumerate() {
        for path in &st.luts {
            let slot = &slots[k];
            k += 1;
            let full = base.join(path);
            if !full.is_file() {
                return Err(cfg_err(lut_lines[i], "luts", format!("dangling reference {}", full.display())));
            }
            let (h, payload) = read_header(&full).map_err(|e| cfg_err(lut_lines[i], "luts", format!("{}: {e}", full.display())))?;
            let mut want = slot.expect;
            if let (Some(p), Some(w)) = (h.pattern, want.pattern) {
                if p.id() == w.id() {
                    want.pattern = Some(p);
                }
            }
            let got = ImportExpectation {
                role: h.role,
                q: h.q,
                n: h.n,
                m: h.m,
                upscale: h.upscale,
                pattern: h.pattern,
                allow_constant: true,
            };
            let mut diffs = Vec::new();
            let fields: [(&str, String, String); 6] = [
                ("role", format!("{:?}", got.role), format!("{:?}", want.role)),
                ("q", got.q.to_string(), want.q.to_string()),
                ("n", got.n.to_string(), want.n.to_string()),
                ("m", got.m.to_string(), want.m.to_string()),
                ("r", got.upscale.to_string(), want.upscale.to_string()),
                (
                    "pattern",
                    got.pattern.map_or("none".into(), |p| p.to_string()),
                    want.pattern.map_or("none".into(), |p| p.to_string()),
                ),
            ];
            for (f, g, w) in fields {
                if g != w {
                    diffs.push(format!("{f}: file has {g}, expected {w}"));
                }
            }
            if payload != h.payload_len() {
                diffs.push(format!("payload: file has {payload} bytes, header declares {}", h.payload_len()));
            }
            if !diffs.is_empty() {
                return Err(cfg_err(lut_lines[i], "luts", format!("{}: {}", full.display(), diffs.join("; "))));
            }
            // Record the file's own offsets for this block.
            if let (Some(b), Some(p)) = (slot.block, h.pattern) {
                st.blocks[b] = p;
            }
        }
    }
    Ok(spec)
}

/// Reads and parses a config file; table paths resolve next to it.
pub fn load_config(path: &Path) -> Result<PipelineSpec, PipelineError> {
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}

/// The four samples of every 2x2 RGGB cell of a mosaic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BayerCells {
    /// Cells per row and per column.
    pub width: usize,
    pub height: usize,
    /// `[R, G1, G2, B]` per cell, row-major.
    pub cells: Vec<[u8; 4]>,
}

/// Splits a single-channel RGGB mosaic into the cells the demosaic front
/// stage reads: the S pattern anchored on every R site, stride 2.
pub fn demosaic_frontend(img: &ImagePlane) -> Result<BayerCells, PipelineError> {
    if img.channels() != 1 {
        return Err(PipelineError::Invalid(format!("mosaic must have one channel, got {}", img.channels())));
    }
    if img.width() % 2 != 0 || img.height() % 2 != 0 {
        return Err(PipelineError::Invalid(format!(
            "mosaic {}x{} has odd dimensions",
            img.width(),
            img.height()
        )));
    }
    let (w, h) = (img.width() / 2, img.height() / 2);
    let mut cells = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let s = Pattern::s();
            cells.push(s.offsets().map(|(dy, dx)| img.get(0, 2 * y + dy as usize, 2 * x + dx as usize)));
        }
    }
    Ok(BayerCells { width: w, height: h, cells })
}
