use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csd_core::data::{load_image, save_image};
use csd_core::Image;

fn csd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csd"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn csd")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = csd(args, cwd);
    assert!(
        out.status.success(),
        "csd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn synth(dir: &Path, name: &str, count: &str) -> PathBuf {
    ok(&["synth", "--out", name, "--count", count, "--seed", "7", "--size", "32"], dir);
    dir.join(name)
}

/// Loss columns without the wall-clock column.
fn loss_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

const LITE: &[&str] = &["--set", "model.preset=litecsdnet", "--set", "train.batch_size=4"];

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", "data/pairs.txt", "--out", out];
    args.extend_from_slice(LITE);
    args.extend_from_slice(extra);
    csd(&args, dir)
}

#[test]
fn synth_is_deterministic_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), "a", "4");
    let b = synth(tmp.path(), "b", "4");
    let manifest = fs::read_to_string(a.join("pairs.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    for rel in ["pairs.txt", "low/0003.ppm", "normal/0000.ppm", "illum/0002.pgm", "resolved.cfg"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
    let low = load_image(a.join("low/0001.ppm")).unwrap();
    assert_eq!((low.height() % 16, low.width() % 16), (0, 0));
}

#[test]
fn synth_from_a_base_directory() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("bases")).unwrap();
    let base = Image::from_fn(16, 16, 3, |y, x, c| ((y + x + c) % 7) as f32 / 7.0).unwrap();
    save_image(tmp.path().join("bases/scene.ppm"), &base).unwrap();
    ok(&["synth", "--base", "bases", "--out", "d", "--count", "3"], tmp.path());
    let normal = load_image(tmp.path().join("d/normal/0002.ppm")).unwrap();
    assert!(normal.max_abs_diff(&base) <= 1.0 / 510.0);
}

#[test]
fn train_resume_and_inference() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "data", "8");
    let out = train(dir, "full", &["--set", "train.iterations=6", "--set", "train.checkpoint_every=3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for rel in ["full/final.csdc", "full/losses.csv", "full/resolved.cfg", "full/checkpoints/ckpt_000003.csdc"] {
        assert!(dir.join(rel).is_file(), "{rel}");
    }
    let resolved = fs::read_to_string(dir.join("full/resolved.cfg")).unwrap();
    assert!(resolved.contains("train.iterations = 6"), "{resolved}");

    let out = train(dir, "resumed", &["--resume", "full/checkpoints/ckpt_000003.csdc"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let full = loss_rows(&dir.join("full/losses.csv"));
    assert_eq!(loss_rows(&dir.join("resumed/losses.csv")), full[3..].to_vec());

    // A 30x47 input is padded internally and cropped back.
    let odd = Image::from_fn(30, 47, 3, |y, x, c| ((y * 3 + x + c) % 11) as f32 / 20.0).unwrap();
    fs::create_dir(dir.join("odd")).unwrap();
    save_image(dir.join("odd/shot.ppm"), &odd).unwrap();
    ok(&["enhance", "--ckpt", "full/final.csdc", "--in", "odd", "--out", "e1"], dir);
    ok(&["enhance", "--ckpt", "full/final.csdc", "--in", "odd/shot.ppm", "--out", "e2"], dir);
    let enhanced = fs::read(dir.join("e1/shot.ppm")).unwrap();
    assert_eq!(enhanced, fs::read(dir.join("e2/shot.ppm")).unwrap());
    let img = load_image(dir.join("e1/shot.ppm")).unwrap();
    assert_eq!((img.height(), img.width(), img.channels()), (30, 47, 3));

    ok(&["decompose", "--ckpt", "full/final.csdc", "--in", "odd", "--out", "dec"], dir);
    assert_eq!(fs::read(dir.join("dec/shot_enhanced.ppm")).unwrap(), enhanced);
    let illum = load_image(dir.join("dec/shot_illumination.pgm")).unwrap();
    let recon = load_image(dir.join("dec/shot_reconstruction.ppm")).unwrap();
    let expected = Image::from_fn(30, 47, 3, |y, x, c| img.get(y, x, c) * illum.get(y, x, 0)).unwrap();
    assert!(recon.max_abs_diff(&expected) <= 3.0 / 255.0);
    assert!(dir.join("dec/shot_reflectance.ppm").is_file());

    let out = ok(&["evaluate", "--ckpt", "full/final.csdc", "--data", "data/pairs.txt", "--out", "ev"], dir);
    assert!(String::from_utf8_lossy(&out.stdout).contains("8 scored"));
    let metrics = fs::read_to_string(dir.join("ev/metrics.csv")).unwrap();
    assert!(metrics.starts_with("id,psnr_db,ssim\n") && metrics.contains("\nmean,"));
}

#[test]
fn gan_training_needs_unpaired_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "data", "4");
    let out = csd(&["train", "--mode", "gan", "--data", "data/pairs.txt", "--data", "data/normal.txt", "--out", "g"], dir);
    assert_eq!(code(&out), 2);
    let out = csd(&["train", "--data", "data/low.txt", "--out", "p"], dir);
    assert_eq!(code(&out), 2);

    let args = [
        "train", "--mode", "gan", "--data", "data/low.txt", "--data", "data/normal.txt", "--out", "g",
        "--set", "model.preset=csdgan", "--set", "model.channel_plan=8,8,8,8,8,8,8,8,8",
        "--set", "disc.patch_size=16", "--set", "train.iterations=3", "--set", "train.batch_size=2",
    ];
    ok(&args, dir);
    let csv = fs::read_to_string(dir.join("g/losses.csv")).unwrap();
    assert!(csv.starts_with("iteration,adversarial,perceptual,smooth,critic,total,wall_ms\n"), "{csv}");
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "data", "4");
    assert_eq!(code(&csd(&["train", "--bogus"], dir)), 1);
    assert_eq!(code(&csd(&["params", "--set", "model.colour=red"], dir)), 1);
    fs::write(dir.join("bad.cfg"), "seed = 1\nnot a setting\n").unwrap();
    assert_eq!(code(&csd(&["params", "--config", "bad.cfg"], dir)), 1);
    assert_eq!(code(&csd(&["enhance", "--ckpt", "missing.csdc", "--in", "data/low", "--out", "x"], dir)), 2);
    assert_eq!(code(&csd(&["--help"], dir)), 0);

    let out = train(dir, "nan", &["--set", "train.iterations=20", "--set", "optim.lr=1e30"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    assert!(dir.join("nan/losses.csv").is_file());
}

#[test]
fn constant_input_gives_a_zero_guidance_map() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    save_image(dir.join("flat.ppm"), &Image::filled(8, 8, 3, 0.4).unwrap()).unwrap();
    ok(&["guidance", "--in", "flat.ppm", "--out", "g"], dir);
    let map = load_image(dir.join("g/flat_guidance.pgm")).unwrap();
    assert_eq!(map.channels(), 1);
    assert!(map.data().iter().all(|&v| v == 0.0));
}

#[test]
fn ablation_is_reproducible_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "data", "4");
    let run = |out: &str, threads: &str| {
        let args = [
            "ablate", "--data", "data/pairs.txt", "--out", out, "--variants", "a,d,f", "--guidance", "on,off",
            "--set", "model.preset=litecsdnet", "--set", "train.iterations=2",
        ];
        let status = Command::new(env!("CARGO_BIN_EXE_csd"))
            .args(args)
            .current_dir(dir)
            .env("CSD_THREADS", threads)
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success());
        fs::read_to_string(dir.join(out).join("ablation.csv")).unwrap()
    };
    let serial = run("one", "1");
    assert_eq!(serial.lines().count(), 7);
    assert!(serial.starts_with("variant,guidance,params,final_loss,psnr_db,ssim,status\n"));
    assert!(serial.lines().skip(1).all(|l| l.ends_with(",ok")), "{serial}");
    assert_eq!(run("four", "4"), serial);
    assert!(dir.join("one/arc_d_off/metrics.csv").is_file());
}

#[test]
fn params_report_lists_presets_with_references() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["params", "--set", "model.preset=litecsdnet", "--out", "p"], tmp.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("17.2948") && stdout.contains("0.0301"), "{stdout}");
    let totals = fs::read_to_string(tmp.path().join("p/totals.csv")).unwrap();
    let count = |name: &str| -> f64 {
        let line = totals.lines().find(|l| l.starts_with(&format!("{name},"))).unwrap();
        line.split(',').nth(1).unwrap().parse().unwrap()
    };
    assert_eq!(count("config"), count("litecsdnet"));
    assert!(count("litecsdnet") < 0.01 * count("csdnet"));
    let layers = fs::read_to_string(tmp.path().join("p/layers.csv")).unwrap();
    let summed: f64 = layers.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert_eq!(summed, count("config"));
}
