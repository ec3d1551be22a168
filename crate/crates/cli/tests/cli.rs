use std::path::Path;
use std::process::{Command, Output};

use mulut_core::pipelines::{save_bound, PipelineSpec};
use mulut_core::{netpbm, ImagePlane};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mulut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mulut")).args(args).env_remove("MULUT_SEED").output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn random_image(w: usize, h: usize, c: usize, seed: u64) -> ImagePlane {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    ImagePlane::from_fn(w, h, c, |_, _, _| r.random()).unwrap()
}

#[test]
fn eval_identical_is_inf() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.pgm");
    netpbm::write(&a, &random_image(16, 16, 1, 1)).unwrap();
    let o = mulut(&["eval", "--metric", "psnr", p(&a), p(&a)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "inf");
    let o = mulut(&["eval", "--metric", "ssim", p(&a), p(&a)]);
    assert_eq!(stdout(&o).trim(), "1.000000");
}

#[test]
fn eval_y_channel_and_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ppm");
    let b = dir.path().join("b.ppm");
    netpbm::write(&a, &ImagePlane::filled(12, 12, 3, 100).unwrap()).unwrap();
    netpbm::write(&b, &ImagePlane::filled(12, 12, 3, 101).unwrap()).unwrap();
    let o = mulut(&["eval", "--metric", "cpsnr", p(&a), p(&b), p(&a), p(&a)]);
    assert!(o.status.success());
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].ends_with("48.130804"));
    assert!(lines[1].ends_with("inf"));
    assert_eq!(lines[2], "mean inf");
    let o = mulut(&["eval", "--metric", "psnr", "--y-channel", p(&a), p(&b)]);
    assert!(o.status.success());
    // Luma moves by 219/255 per level and rounds to one level here.
    assert_eq!(stdout(&o).trim(), "48.130804");
}

#[test]
fn convert_writes_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s.mlut");
    let o = mulut(&["convert", "--function", "copy-anchor", "--q", "4", "--pattern", "S", "--out", p(&s)]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(std::fs::metadata(&s).unwrap().len(), 83_585);
    let o = mulut(&["convert", "--validate", p(&s)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("payload=83521"));
    let o = mulut(&["convert", "--validate", p(&s), "--q", "3", "--pattern", "D"]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("q: file has 4, expected 3") && err.contains("pattern"), "{err}");
    let mut bytes = std::fs::read(&s).unwrap();
    bytes.pop();
    let cut = dir.path().join("cut.mlut");
    std::fs::write(&cut, &bytes).unwrap();
    assert_eq!(mulut(&["convert", "--validate", p(&cut)]).status.code(), Some(3));
    assert_eq!(mulut(&["convert", "--validate", p(&dir.path().join("none.mlut"))]).status.code(), Some(1));
    assert_eq!(mulut(&["convert", "--function", "nope", "--out", p(&s)]).status.code(), Some(3));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(mulut(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mulut(&["eval", "--metric", "psnr"]).status.code(), Some(2));
    assert_eq!(mulut(&["cost", "--preset", "SR-LUT", "--size", "12"]).status.code(), Some(2));
    assert_eq!(mulut(&["degrade", "--kind", "blur", "--input", "a", "--output", "b"]).status.code(), Some(2));
}

#[test]
fn cost_report() {
    let o = mulut(&["cost", "--preset", "SR-LUT", "--size", "1280x720"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let pj: f64 = out.lines().last().unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(pj > 0.0);
    let o = mulut(&["cost", "--preset", "MuLUT-SDY-X2", "--scale", "2", "--size", "1280x720", "--csv"]);
    assert!(stdout(&o).starts_with("dtype,op,count,pj_per_op,energy_pj"));
    assert_eq!(mulut(&["cost", "--preset", "SR-LUT", "--scale", "4", "--size", "1281x720"]).status.code(), Some(3));
    assert_eq!(mulut(&["cost", "--preset", "Nope", "--size", "8x8"]).status.code(), Some(3));
}

#[test]
fn degrade_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.ppm");
    netpbm::write(&input, &random_image(20, 14, 3, 2)).unwrap();
    let run = |kind: &str, extra: &[&str], out: &str| {
        let out = dir.path().join(out);
        let mut args = vec!["degrade", "--kind", kind, "--input", p(&input), "--output", p(&out)];
        args.extend_from_slice(extra);
        let o = mulut(&args);
        assert!(o.status.success(), "{o:?}");
        std::fs::read(out).unwrap()
    };
    let a = run("awgn", &["--sigma", "15", "--seed", "4"], "a.ppm");
    let b = run("awgn", &["--sigma", "15", "--seed", "4"], "b.ppm");
    let c = run("awgn", &["--sigma", "15", "--seed", "5"], "c.ppm");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let down = netpbm::decode(&run("bicubic", &["--scale", "4"], "d.ppm")).unwrap();
    assert_eq!(down.dims(), (5, 3, 3));
    let mosaic = netpbm::decode(&run("bayer-rggb", &[], "m.pgm")).unwrap();
    assert_eq!(mosaic.dims(), (20, 14, 1));
}

#[test]
fn run_with_lut_dir_and_many_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PipelineSpec::preset("MuLUT-SDY-X2", 2).unwrap();
    let pipeline = spec.bind_random(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let luts = dir.path().join("luts");
    save_bound(&spec, &pipeline, &luts, "pipeline.cfg").unwrap();
    let inputs: Vec<_> = (0..2)
        .map(|i| {
            let path = dir.path().join(format!("img{i}.pgm"));
            netpbm::write(&path, &random_image(10 + i, 9, 1, 10 + i as u64)).unwrap();
            path
        })
        .collect();
    let out = dir.path().join("out");
    let o = mulut(&[
        "run", "--preset", "MuLUT-SDY-X2", "--scale", "2", "--lut-dir", p(&luts), "--input", p(&inputs[0]), p(&inputs[1]), "--output", p(&out),
    ]);
    assert!(o.status.success(), "{o:?}");
    for (i, input) in inputs.iter().enumerate() {
        let got = netpbm::read(&out.join(format!("img{i}.pgm"))).unwrap();
        assert_eq!(got, pipeline.run(&netpbm::read(input).unwrap()).unwrap());
    }
    // Tables of the wrong shape are a validation failure.
    let o = mulut(&["run", "--preset", "MuLUT-SDY-X2", "--scale", "3", "--lut-dir", p(&luts), "--input", p(&inputs[0]), "--output", p(&out.join("x.pgm"))]);
    assert_eq!(o.status.code(), Some(3));
    let o = mulut(&["run", "--preset", "SR-LUT", "--input", p(&inputs[0]), "--output", p(&out.join("x.pgm"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn run_random_luts_follows_env_seed() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.pgm");
    netpbm::write(&input, &random_image(8, 8, 1, 4)).unwrap();
    let go = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        let o = Command::new(env!("CARGO_BIN_EXE_mulut"))
            .args(["run", "--preset", "SR-LUT", "--scale", "2", "--random-luts", "--input", p(&input), "--output", p(&out)])
            .env("MULUT_SEED", seed)
            .output()
            .unwrap();
        assert!(o.status.success());
        std::fs::read(out).unwrap()
    };
    assert_eq!(go("9", "a.pgm"), go("9", "b.pgm"));
    assert_ne!(go("9", "a.pgm"), go("10", "c.pgm"));
}

#[test]
fn finetune_writes_tables_config_and_losses() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PipelineSpec::preset("MuLUT-SDY", 1).unwrap().with_q(6);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let teacher = spec.bind_random(&mut r).unwrap();
    let student = spec.bind_random(&mut r).unwrap();
    let cfg = save_bound(&spec, &student, &dir.path().join("start"), "pipeline.cfg").unwrap();
    let (lq, hq) = (dir.path().join("lq"), dir.path().join("hq"));
    std::fs::create_dir_all(&lq).unwrap();
    std::fs::create_dir_all(&hq).unwrap();
    for i in 0..3 {
        let img = random_image(16, 16, 1, 20 + i);
        netpbm::write(&lq.join(format!("{i}.pgm")), &img).unwrap();
        netpbm::write(&hq.join(format!("{i}.pgm")), &teacher.run(&img).unwrap()).unwrap();
    }
    let out = dir.path().join("tuned");
    let data = format!("{},{}", p(&lq), p(&hq));
    let o = mulut(&["finetune", "--config", p(&cfg), "--data", &data, "--iters", "30", "--batch", "2", "--patch", "16", "--seed", "1", "--out", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
    let losses: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(losses.last().unwrap() < &losses[0]);
    // The written config binds, and the tuned tables differ from the start.
    let tuned = mulut_core::pipelines::load_config(&out.join("pipeline.cfg")).unwrap().bind(&out).unwrap();
    assert_ne!(tuned.tables(), student.tables());
    let o = mulut(&["finetune", "--config", p(&cfg), "--data", &format!("{},{}", p(&lq), p(&dir.path().join("none"))), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
}
