use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "iterations = 4\ndepth = 2\nchannels = 4\nskip_channels = 2\ninput_channels = 4\nmax_side = 32\nhint_iterations = 2\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dipstack"));
    c.env_remove("DIPSTACK_SEED");
    c
}

fn write_png(path: &Path, w: u32, h: u32, shift: u32) {
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        let inside = (x as i32 - 12).pow(2) + (y as i32 - 10).pow(2) < 40;
        if inside {
            image::Rgb([220, 90, 40])
        } else {
            image::Rgb([((x + shift) * 9 % 256) as u8, (y * 7 % 256) as u8, 120])
        }
    });
    img.save(path).unwrap();
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        write_png(&dir.path().join("a.png"), 24, 20, 0);
        let frames = dir.path().join("frames");
        fs::create_dir(&frames).unwrap();
        for i in 0..2 {
            write_png(&frames.join(format!("f{i}.png")), 24, 20, 3 * i);
        }
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, task: &str, input: &str, out: &str, extra: &[&str]) -> Output {
        bin()
            .arg(task)
            .arg("--input")
            .arg(self.path(input))
            .arg("--out")
            .arg(self.path(out))
            .arg("--config")
            .arg(self.path("tiny.toml"))
            .args(extra)
            .output()
            .unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn segment_exports_all_files() {
    let f = Fixture::new();
    let o = f.run("segment", "a.png", "out", &["--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = f.path("out");
    for name in ["y1.png", "y2.png", "mask.png", "reconstruction.png", "loss_curve.csv", "manifest.json"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let m = manifest(&out);
    assert_eq!(m["seed"], 7);
    assert_eq!(m["task"], "segment");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 5);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 1);
    let csv = fs::read_to_string(out.join("loss_curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn reruns_are_byte_identical() {
    let f = Fixture::new();
    assert_eq!(code(&f.run("segment", "a.png", "r1", &["--seed", "3"])), 0);
    assert_eq!(code(&f.run("segment", "a.png", "r2", &["--seed", "3"])), 0);
    for name in ["y1.png", "y2.png", "mask.png", "reconstruction.png", "loss_curve.csv"] {
        assert_eq!(fs::read(f.path("r1").join(name)).unwrap(), fs::read(f.path("r2").join(name)).unwrap(), "{name}");
    }
    assert_eq!(manifest(&f.path("r1"))["outputs"], manifest(&f.path("r2"))["outputs"]);
}

#[test]
fn seed_falls_back_to_environment() {
    let f = Fixture::new();
    let o = bin()
        .env("DIPSTACK_SEED", "11")
        .args(["segment", "--input"])
        .arg(f.path("a.png"))
        .arg("--out")
        .arg(f.path("env"))
        .arg("--config")
        .arg(f.path("tiny.toml"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(manifest(&f.path("env"))["seed"], 11);
}

#[test]
fn invalid_environment_seed_is_a_config_error() {
    let f = Fixture::new();
    let o = bin()
        .env("DIPSTACK_SEED", "seven")
        .args(["segment", "--input"])
        .arg(f.path("a.png"))
        .arg("--config")
        .arg(f.path("tiny.toml"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn mask_is_sixteen_bit() {
    let f = Fixture::new();
    assert_eq!(code(&f.run("segment", "a.png", "out", &[])), 0);
    let mask = image::open(f.path("out").join("mask.png")).unwrap();
    assert_eq!(mask.color(), image::ColorType::L16);
    let y1 = image::open(f.path("out").join("y1.png")).unwrap();
    assert_eq!(y1.color(), image::ColorType::Rgb8);
    assert_eq!((y1.width(), y1.height()), (24, 20));
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    assert_eq!(code(&f.run("segment", "missing.png", "o", &[])), 3);
    assert_eq!(code(&f.run("segment", "a.png", "o", &["--alpha", "-1"])), 2);
    assert_eq!(code(&f.run("watermark", "a.png", "o", &[])), 2);
    assert_eq!(code(&f.run("watermark", "a.png", "o", &["--bbox", "20,0,10,10"])), 2);
    fs::write(f.path("bad.toml"), "iterations = 2\nunknown_key = 1\n").unwrap();
    let o = bin()
        .args(["segment", "--input"])
        .arg(f.path("a.png"))
        .arg("--config")
        .arg(f.path("bad.toml"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let o = bin().args(["segment"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn errors_map_to_exit_codes() {
    use dipstack::Error;
    assert_eq!(dipstack_cli::exit_code(&Ok(())), 0);
    assert_eq!(dipstack_cli::exit_code(&Err(Error::config("x"))), 2);
    assert_eq!(dipstack_cli::exit_code(&Err(Error::io("p", "x"))), 3);
    let abort = Error::Numerical { iteration: 3, message: "nan".into(), history: Vec::new() };
    assert_eq!(dipstack_cli::exit_code(&Err(abort)), 4);
}

#[test]
fn watermark_with_bbox_and_dehaze_run() {
    let f = Fixture::new();
    let o = f.run("watermark", "a.png", "wm", &["--bbox", "4,4,10,8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = f.run("dehaze", "a.png", "dh", &["--iters", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(f.path("dh").join("airlight.png").is_file());
    assert_eq!(manifest(&f.path("dh"))["iterations"], 3);
}

#[test]
fn video_tasks_write_frame_directories() {
    let f = Fixture::new();
    let o = f.run("segment-video", "frames", "sv", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..2 {
        assert!(f.path("sv").join(format!("frame_{i:03}")).join("mask.png").is_file());
    }
    let o = f.run("transparency", "a.png", "tm", &["--input2", &f.path("frames/f1.png").to_string_lossy()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest(&f.path("tm"))["task"], "transparency_two_mixtures");
}

#[test]
fn batch_mode_isolates_jobs() {
    let f = Fixture::new();
    let o = f.run("segment", "frames", "batch", &["--jobs", "2", "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s0 = manifest(&f.path("batch/f0"))["seed"].clone();
    let s1 = manifest(&f.path("batch/f1"))["seed"].clone();
    assert_ne!(s0, s1);
    // the same job list with one worker gives the same per-job outputs
    let o = f.run("segment", "frames", "serial", &["--jobs", "1", "--seed", "5"]);
    assert_eq!(code(&o), 0);
    for job in ["f0", "f1"] {
        let a = fs::read(f.path("batch").join(job).join("mask.png")).unwrap();
        let b = fs::read(f.path("serial").join(job).join("mask.png")).unwrap();
        assert_eq!(a, b, "{job}");
    }
    assert_eq!(code(&f.run("segment", "a.png", "x", &["--jobs", "2"])), 2);
}

#[test]
fn diagnose_writes_reports() {
    let f = Fixture::new();
    fs::write(f.path("diag.toml"), format!("{TINY}diagnose_size = 16\ndiagnose_mode = \"split_lr\"\n")).unwrap();
    let o = bin()
        .args(["diagnose", "--input"])
        .arg(f.path("frames"))
        .arg("--out")
        .arg(f.path("diag"))
        .arg("--config")
        .arg(f.path("diag.toml"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("diag/split_lr/report.json")).unwrap()).unwrap();
    assert_eq!(report["samples"], 2);
    assert!(f.path("diag/split_lr/pair_000.csv").is_file());
    assert!(!f.path("diag/superimpose").exists());
}
