use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mulut_core::costmodel::{count_ops, estimate_energy, report_csv, report_table, EnergyTable};
use mulut_core::evalkit::{self, Degradation};
use mulut_core::finetune::{self, AdamConfig, FinetuneConfig, Pair, DEFAULT_LR};
use mulut_core::format::{read_lut, Role};
use mulut_core::netpbm::{self, PnmError};
use mulut_core::pipelines::{load_config, save_bound, PipelineError, PipelineSpec, PRESETS};
use mulut_core::transfer::{validate_import, BuiltinFunction, ImportExpectation};
use mulut_core::{ImagePlane, Pattern, Pipeline};

#[derive(Parser)]
#[command(name = "mulut", version, about = "Multi-LUT image restoration")]
struct Cli {
    /// Worker threads (defaults to the number of logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a pipeline on PGM/PPM images.
    Run(RunArgs),
    /// Cache a builtin function into a MULUT1 file, or validate one.
    Convert(ConvertArgs),
    /// Finetune the tables of a pipeline on image pairs.
    Finetune(FinetuneArgs),
    /// Compare image pairs.
    Eval(EvalArgs),
    /// Produce a degraded copy of an image.
    Degrade(DegradeArgs),
    /// Estimate operation counts and energy.
    Cost(CostArgs),
    /// List presets with their table sizes and receptive fields.
    Presets,
}

#[derive(Args)]
struct Source {
    /// Pipeline config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Preset name.
    #[arg(long, required_unless_present = "config")]
    preset: Option<String>,
    /// Preset scale.
    #[arg(long, default_value_t = 1)]
    scale: usize,
    /// Sampling interval exponent of preset tables.
    #[arg(long, default_value_t = 4)]
    q: u8,
}

impl Source {
    fn spec(&self) -> Result<(PipelineSpec, PathBuf), Failure> {
        match (&self.config, &self.preset) {
            (Some(path), _) => {
                let spec = load_config(path)?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                Ok((spec, base))
            }
            (None, Some(name)) => Ok((PipelineSpec::preset(name, self.scale)?.with_q(self.q), PathBuf::new())),
            (None, None) => Err(Failure::Invalid("one of --config or --preset is required".into())),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    /// Directory holding preset tables under their slot file names.
    #[arg(long)]
    lut_dir: Option<PathBuf>,
    /// Fill preset tables with seeded random bytes.
    #[arg(long)]
    random_luts: bool,
    #[arg(long, env = "MULUT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Output file, or directory when several inputs are given.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    /// Builtin function to cache.
    #[arg(long, conflicts_with = "validate", required_unless_present = "validate")]
    function: Option<String>,
    /// File to check.
    #[arg(long)]
    validate: Option<PathBuf>,
    #[arg(long)]
    q: Option<u8>,
    /// Builtin pattern id.
    #[arg(long)]
    pattern: Option<char>,
    /// Upscaling factor of a spatial table.
    #[arg(long)]
    scale: Option<u8>,
    #[arg(long, value_enum)]
    role: Option<RoleArg>,
    /// Values per entry expected when validating.
    #[arg(long)]
    m: Option<u16>,
    /// Reject a payload where every byte is equal.
    #[arg(long)]
    reject_constant: bool,
    #[arg(long, required_unless_present = "validate")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Intermediate,
    Output,
    Channel,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::Intermediate => Role::SpatialIntermediate,
            RoleArg::Output => Role::SpatialOutput,
            RoleArg::Channel => Role::Channel,
        }
    }
}

#[derive(Args)]
struct FinetuneArgs {
    /// Pipeline config with table files.
    #[arg(long)]
    config: PathBuf,
    /// Low-quality and target directories, comma separated.
    #[arg(long, value_parser = parse_dirs)]
    data: (PathBuf, PathBuf),
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 48)]
    patch: usize,
    #[arg(long, env = "MULUT_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory for tables, config and loss trace.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Psnr,
    Cpsnr,
    Ssim,
    Psnrb,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    metric: Metric,
    /// Compare BT.601 luma instead of the raw channels.
    #[arg(long)]
    y_channel: bool,
    /// Block size for PSNR-B.
    #[arg(long, default_value_t = 8)]
    block: usize,
    /// Reference and test images, alternating.
    #[arg(required = true, num_args = 2..)]
    images: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Bicubic,
    Awgn,
    BayerRggb,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1)]
    scale: usize,
    #[arg(long, env = "MULUT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    source: Source,
    /// Output size as WxH.
    #[arg(long, value_parser = parse_size)]
    size: (usize, usize),
    /// Print CSV instead of a table.
    #[arg(long)]
    csv: bool,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    let h = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

fn parse_dirs(s: &str) -> Result<(PathBuf, PathBuf), String> {
    let (a, b) = s.split_once(',').ok_or("expected LQ_DIR,HQ_DIR")?;
    Ok((a.into(), b.into()))
}

#[derive(Debug)]
enum Failure {
    Io(String),
    Invalid(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Invalid(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Io(m) | Failure::Invalid(m) => f.write_str(m),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Io { .. } => Failure::Io(e.to_string()),
            other => Failure::Invalid(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn read_image(path: &Path) -> Result<ImagePlane, Failure> {
    netpbm::read(path).map_err(|e| match e {
        PnmError::Io(e) => Failure::Io(format!("{}: {e}", path.display())),
        other => Failure::Invalid(format!("{}: {other}", path.display())),
    })
}

fn write_image(path: &Path, img: &ImagePlane) -> Result<(), Failure> {
    netpbm::write(path, img).map_err(|e| match e {
        PnmError::Io(e) => Failure::Io(format!("{}: {e}", path.display())),
        other => Failure::Invalid(format!("{}: {other}", path.display())),
    })
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn bind(args: &RunArgs) -> Result<Pipeline, Failure> {
    let (spec, base) = args.source.spec()?;
    if args.source.config.is_some() {
        return Ok(spec.bind(&base)?);
    }
    if let Some(dir) = &args.lut_dir {
        let mut spec = spec;
        for slot in spec.slots() {
            spec.stages[slot.stage].luts.push(PathBuf::from(slot.file_name()));
        }
        return Ok(spec.bind(dir)?);
    }
    if args.random_luts {
        return Ok(spec.bind_random(&mut ChaCha8Rng::seed_from_u64(args.seed))?);
    }
    Err(Failure::Invalid("a preset needs --lut-dir or --random-luts".into()))
}

fn extension(img: &ImagePlane) -> &'static str {
    if img.channels() == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let p = bind(&args)?;
    let many = args.input.len() > 1 || args.output.is_dir();
    if many {
        fs::create_dir_all(&args.output).map_err(io_err(&args.output))?;
    }
    for input in &args.input {
        let img = read_image(input)?;
        let out = p.run(&img).map_err(|e| Failure::Invalid(format!("{}: {e}", input.display())))?;
        let path = if many {
            let stem = input.file_stem().unwrap_or_default();
            args.output.join(stem).with_extension(extension(&out))
        } else {
            args.output.clone()
        };
        write_image(&path, &out)?;
    }
    Ok(())
}

fn convert(args: ConvertArgs) -> Result<(), Failure> {
    let pattern = args
        .pattern
        .map(Pattern::builtin)
        .transpose()
        .map_err(invalid)?;
    if let Some(path) = &args.validate {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let file = read_lut(&bytes).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
        let h = file.header();
        let expect = ImportExpectation {
            role: args.role.map(Role::from).unwrap_or(h.role),
            q: args.q.unwrap_or(h.q),
            n: h.n,
            m: args.m.unwrap_or(h.m),
            upscale: args.scale.unwrap_or(h.upscale),
            // Only the pattern id is compared for builtin ids.
            pattern: match (pattern, h.pattern) {
                (Some(p), Some(f)) if p.id() == f.id() => Some(f),
                (Some(p), _) => Some(p),
                (None, f) => f,
            },
            allow_constant: !args.reject_constant,
        };
        validate_import(&bytes, &expect).map_err(|d| {
            let lines: Vec<String> = d.iter().map(|d| format!("  {d}")).collect();
            Failure::Invalid(format!("{}:\n{}", path.display(), lines.join("\n")))
        })?;
        println!(
            "ok: role={:?} q={} n={} m={} r={} pattern={} payload={} bytes",
            h.role,
            h.q,
            h.n,
            h.m,
            h.upscale,
            h.pattern.map_or("-".to_string(), |p| p.id().to_string()),
            h.payload_len()
        );
        return Ok(());
    }
    let name = args.function.as_deref().unwrap_or_default();
    let f = BuiltinFunction::parse(name).ok_or_else(|| {
        let all: Vec<&str> = BuiltinFunction::ALL.iter().map(|f| f.name()).collect();
        Failure::Invalid(format!("unknown function {name:?}; known: {}", all.join(", ")))
    })?;
    let role = args.role.map(Role::from).unwrap_or(Role::SpatialOutput);
    let file = f
        .build(args.q.unwrap_or(4), pattern, args.scale.unwrap_or(1), role)
        .map_err(invalid)?;
    let out = args.out.expect("required by clap");
    file.save(&out).map_err(io_err(&out))?;
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    v.sort();
    Ok(v)
}

fn finetune_cmd(args: FinetuneArgs) -> Result<(), Failure> {
    let spec = load_config(&args.config)?;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let p = spec.bind(&base)?;
    let (lq_dir, hq_dir) = &args.data;
    let mut data = Vec::new();
    for lq in image_files(lq_dir)? {
        let hq = hq_dir.join(lq.file_name().expect("listed file"));
        data.push(Pair {
            lq: read_image(&lq)?,
            hq: read_image(&hq)?,
        });
    }
    let cfg = FinetuneConfig {
        iters: args.iters,
        batch: args.batch,
        patch: args.patch,
        seed: args.seed,
        adam: AdamConfig {
            lr: args.lr,
            ..AdamConfig::default()
        },
    };
    let before = finetune::dataset_mse(&p, &data).map_err(invalid)?;
    let outcome = finetune::finetune(&p, &data, &cfg, |_, _| {}).map_err(invalid)?;
    let after = finetune::dataset_mse(&outcome.pipeline, &data).map_err(invalid)?;
    let cfg_path = save_bound(&spec, &outcome.pipeline, &args.out, "pipeline.cfg")?;
    let csv = args.out.join("loss.csv");
    finetune::write_loss_csv(&csv, &outcome.losses).map_err(io_err(&csv))?;
    println!("dataset mse {before:.4} -> {after:.4}");
    println!("wrote {} and {}", cfg_path.display(), csv.display());
    Ok(())
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    if args.images.len() % 2 != 0 {
        return Err(Failure::Invalid("images must come in reference/test pairs".into()));
    }
    let mut values = Vec::new();
    for pair in args.images.chunks(2) {
        let (mut a, mut b) = (read_image(&pair[0])?, read_image(&pair[1])?);
        if args.y_channel {
            a = evalkit::y_channel(&a).map_err(invalid)?;
            b = evalkit::y_channel(&b).map_err(invalid)?;
        }
        let v = match args.metric {
            Metric::Psnr => evalkit::psnr(&a, &b),
            Metric::Cpsnr => evalkit::cpsnr(&a, &b),
            Metric::Ssim => evalkit::ssim(&a, &b),
            Metric::Psnrb => evalkit::psnr_b(&a, &b, args.block),
        }
        .map_err(|e| Failure::Invalid(format!("{} vs {}: {e}", pair[0].display(), pair[1].display())))?;
        values.push(v);
    }
    if values.len() == 1 {
        println!("{}", fmt_value(values[0]));
    } else {
        for (pair, v) in args.images.chunks(2).zip(&values) {
            println!("{} {} {}", pair[0].display(), pair[1].display(), fmt_value(*v));
        }
        println!("mean {}", fmt_value(values.iter().sum::<f64>() / values.len() as f64));
    }
    Ok(())
}

fn degrade(args: DegradeArgs) -> Result<(), Failure> {
    let img = read_image(&args.input)?;
    let kind = match args.kind {
        Kind::Bicubic if args.scale == 0 => return Err(Failure::Invalid("--scale must be at least 1".into())),
        Kind::Bicubic => Degradation::Bicubic { scale: args.scale },
        Kind::Awgn if !(args.sigma >= 0.0 && args.sigma.is_finite()) => {
            return Err(Failure::Invalid("--sigma must be finite and non-negative".into()))
        }
        Kind::Awgn => Degradation::Awgn {
            sigma: args.sigma,
            seed: args.seed,
        },
        Kind::BayerRggb => Degradation::BayerRggb,
    };
    let out = evalkit::degrade(&img, kind).map_err(invalid)?;
    write_image(&args.output, &out)
}

fn cost(args: CostArgs) -> Result<(), Failure> {
    let (spec, _) = args.source.spec()?;
    spec.validate().map_err(|(_, m)| Failure::Invalid(m))?;
    let s = spec.stage_scale();
    let (w, h) = args.size;
    if w % s != 0 || h % s != 0 {
        return Err(Failure::Invalid(format!("size {w}x{h} is not a multiple of scale {s}")));
    }
    let counts = count_ops(&spec, w / s, h / s);
    let table = EnergyTable::default();
    if args.csv {
        print!("{}", report_csv(&counts, &table));
    } else {
        print!("{}", report_table(&counts, &table));
        println!("energy {:.1} pJ", estimate_energy(&counts, &table));
    }
    Ok(())
}

fn presets() {
    let mut s = format!("{:<20} {:>6} {:>14} {:>4}\n", "preset", "scale", "payload(B)", "RF");
    for name in PRESETS {
        for scale in 1..=4 {
            if let Ok(spec) = PipelineSpec::preset(name, scale) {
                let rf = spec.receptive_field().map_or("-".to_string(), |r| r.to_string());
                s += &format!("{name:<20} {scale:>6} {:>14} {rf:>4}\n", spec.payload_bytes());
            }
        }
    }
    let _ = std::io::Write::write_all(&mut std::io::stdout().lock(), s.as_bytes());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Convert(a) => convert(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Degrade(a) => degrade(a),
        Command::Cost(a) => cost(a),
        Command::Presets => {
            presets();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
