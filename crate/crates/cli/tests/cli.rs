use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pwtp::config::RunConfig;
use pwtp::io;
use pwtp::numeric::Rng;
use pwtp::pwtp::PwtpParams;
use pwtp::recognizer::HeadParams;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

fn pwtp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwtp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `gen-data` with the quick config into `dir/data`.
fn quick_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let o = pwtp(&[
        "gen-data",
        "--config",
        path(&config("quick.cfg")),
        "--out",
        path(&data),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    data
}

#[test]
fn gradcheck_small_config_passes() {
    let o = pwtp(&["gradcheck", "--config", path(&config("small.cfg"))]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let line = out
        .lines()
        .find(|l| l.starts_with("max_rel_error="))
        .unwrap();
    let err: f64 = line["max_rel_error=".len()..].parse().unwrap();
    assert!(err < 1e-4, "{out}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(pwtp(&[]).status.code(), Some(2));
    assert_eq!(pwtp(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        pwtp(&["train-joint", "--out", "x", "--mode", "sometimes"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[pwtp]\nwidth = 3\n").unwrap();
    let o = pwtp(&[
        "gen-data",
        "--config",
        path(&bad),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    let missing = dir.path().join("none.pwtc");
    let o = pwtp(&["eval", "--checkpoint", path(&missing)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn constant_zero_logs_zero_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let data = quick_data(dir.path());
    let ckpt = dir.path().join("joint.pwtc");
    let o = pwtp(&[
        "train-joint",
        "--config",
        path(&config("quick.cfg")),
        "--data",
        path(&data),
        "--out",
        path(&ckpt),
        "--mode",
        "constant:0.0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,enopr,loss2,alpha"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 20);
    for row in rows {
        assert_eq!(row.rsplit(',').next(), Some("0"), "{row}");
    }
}

#[test]
fn runs_reproduce_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let data = quick_data(dir.path());
    let run = |name: &str, cmd: &str| {
        let ckpt = dir.path().join(name);
        let o = pwtp(&[
            cmd,
            "--config",
            path(&config("quick.cfg")),
            "--data",
            path(&data),
            "--out",
            path(&ckpt),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (
            fs::read(&ckpt).unwrap(),
            fs::read(ckpt.with_extension("csv")).unwrap(),
        )
    };
    let a = run("a.pwtc", "train-unsup");
    assert_eq!(a, run("b.pwtc", "train-unsup"));
    assert!(String::from_utf8_lossy(&a.1).starts_with("step,enopr,lr\n"));
    assert_eq!(run("c.pwtc", "train-joint"), run("d.pwtc", "train-joint"));
}

#[test]
fn extract_needs_only_the_projector() {
    let dir = tempfile::tempdir().unwrap();
    let data = quick_data(dir.path());
    let ckpt = dir.path().join("unsup.pwtc");
    let cfg = path(&config("quick.cfg")).to_string();
    let o = pwtp(&[
        "train-unsup",
        "--config",
        &cfg,
        "--data",
        path(&data),
        "--out",
        path(&ckpt),
    ]);
    assert!(o.status.success());

    // two segments of four frames from the first training clip
    let clip = &io::read_split(&data, "train").unwrap()[0].clip;
    let [s, t, h, w, c] = *clip.shape() else {
        unreachable!()
    };
    let frames = clip.clone().reshape(&[s * t, h, w, c]).unwrap();
    let frame_dir = dir.path().join("frames");
    io::write_frames(&frame_dir, &frames).unwrap();

    let out = dir.path().join("da");
    let o = pwtp(&[
        "extract",
        "--config",
        &cfg,
        "--checkpoint",
        path(&ckpt),
        "--frames",
        path(&frame_dir),
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for i in 1..=s {
        let img = io::decode_ppm(&fs::read(out.join(format!("da_{i:05}.ppm"))).unwrap()).unwrap();
        assert_eq!(img.shape(), [h, w, 3]);
    }

    let o = pwtp(&[
        "eval",
        "--config",
        &cfg,
        "--data",
        path(&data),
        "--checkpoint",
        path(&ckpt),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("theta2"));
}

#[test]
fn untrained_head_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("eval.cfg");
    let text = fs::read_to_string(config("quick.cfg")).unwrap() + "n_test = 80\n";
    let text = text.replace("n_test = 8\n", "");
    fs::write(&cfg_path, &text).unwrap();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let theta1 = PwtpParams::init(&cfg.pwtp, 3, &mut Rng::new(1)).unwrap();
    let theta2 = HeadParams::init(3, 4, &mut Rng::new(2)).unwrap();
    let ckpt = dir.path().join("init.pwtc");
    io::save_checkpoint(&ckpt, &theta1, Some(&theta2)).unwrap();
    let o = pwtp(&[
        "eval",
        "--config",
        path(&cfg_path),
        "--checkpoint",
        path(&ckpt),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let acc: f64 = out
        .trim()
        .strip_prefix("accuracy=")
        .unwrap()
        .parse()
        .unwrap();
    assert!((acc - 0.25).abs() <= 0.1, "{out}");
}
