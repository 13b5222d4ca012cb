use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use depthsr::dataio::{read_depth, write_depth, DatasetManifest, Degradation, ManifestEntry, Split};
use depthsr::metrics::EvalReport;
use depthsr::network::{save_model, CascadeModel, DcnnUnitConfig, ModelConfig};
use depthsr::synth::RectangleScene;
use depthsr::DepthMap;

fn dsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsr"))
        .args(args)
        .env("DSR_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dsr")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ramp(h: usize, w: usize) -> DepthMap<f64> {
    DepthMap::from_fn(h, w, |y, x| 20.0 + (y * 3 + x * 2) as f64)
}

fn small_model(dir: &Path, factor: usize) -> PathBuf {
    let cfg = ModelConfig {
        unit: DcnnUnitConfig { num_layers: 2, channels: 4, kernel: 3, residual: true, center_input: true },
        msf: None,
        ..ModelConfig::standard(factor).unwrap()
    };
    let path = dir.join(format!("zero{factor}.dsrf"));
    save_model(&CascadeModel::<f64>::zeros(cfg).unwrap(), &path).unwrap();
    path
}

#[test]
fn degrade_halves_size_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.pfm");
    write_depth(&gt, &ramp(64, 64)).unwrap();
    let before = std::fs::read(&gt).unwrap();

    let (a, b) = (dir.path().join("a.pfm"), dir.path().join("b.pfm"));
    for out in [&a, &b] {
        let o = dsr(&["degrade", "--in", p(&gt), "--factor", "2", "--noise-delta", "651", "--seed", "4", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read_depth(&a).unwrap().dims(), (32, 32));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a.pfm.config.toml").exists());
    assert_eq!(std::fs::read(&gt).unwrap(), before, "input must not change");

    let clean = dir.path().join("clean.pfm");
    assert_eq!(code(&dsr(&["degrade", "--in", p(&gt), "--factor", "2", "--out", p(&clean)])), 0);
    let noiseless = depthsr::resample::downsample(&read_depth(&gt).unwrap(), 2).unwrap();
    let back = read_depth(&clean).unwrap();
    for (x, y) in back.values().iter().zip(noiseless.values()) {
        assert_eq!(*x, *y as f32 as f64);
    }
}

#[test]
fn snapshot_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.pfm");
    write_depth(&gt, &ramp(16, 16)).unwrap();
    let first = dir.path().join("first.pfm");
    assert_eq!(code(&dsr(&["degrade", "--in", p(&gt), "--factor", "4", "--noise-delta", "100", "--seed", "9", "--out", p(&first)])), 0);
    let snapshot = std::fs::read_to_string(dir.path().join("first.pfm.config.toml")).unwrap();
    let cfg = dir.path().join("replay.toml");
    let second = dir.path().join("second.pfm");
    std::fs::write(&cfg, snapshot.replace("first.pfm", "second.pfm")).unwrap();
    assert_eq!(code(&dsr(&["degrade", "--config", p(&cfg)])), 0);
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.pfm");
    write_depth(&gt, &ramp(10, 10)).unwrap();
    let out = dir.path().join("o.pfm");
    // Not divisible: data error.
    assert_eq!(code(&dsr(&["degrade", "--in", p(&gt), "--factor", "4", "--out", p(&out)])), 2);
    // Missing input file: data error.
    assert_eq!(code(&dsr(&["degrade", "--in", "/nonexistent.pgm", "--factor", "2", "--out", p(&out)])), 2);
    // Missing required flag, unknown flag, unknown config key: usage errors.
    assert_eq!(code(&dsr(&["degrade", "--in", p(&gt), "--out", p(&out)])), 1);
    assert_eq!(code(&dsr(&["degrade", "--bogus"])), 1);
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "factor = 2\nunknown_key = 1\n").unwrap();
    assert_eq!(code(&dsr(&["degrade", "--config", p(&cfg), "--in", p(&gt), "--out", p(&out)])), 1);
    // Flags override the file.
    std::fs::write(&cfg, "factor = 4\n").unwrap();
    assert_eq!(code(&dsr(&["degrade", "--config", p(&cfg), "--factor", "2", "--in", p(&gt), "--out", p(&out)])), 0);
    assert_eq!(read_depth(&out).unwrap().dims(), (5, 5));
    // Fusion requested from a model without one: usage error.
    let model = small_model(dir.path(), 2);
    assert_eq!(code(&dsr(&["sr", "--model", p(&model), "--in", p(&gt), "--out", p(&out), "--msf"])), 1);
    // Bad thread count: usage error.
    let o = Command::new(env!("CARGO_BIN_EXE_dsr"))
        .args(["gradcheck", "--seeds", "1"])
        .env("DSR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn sr_with_zero_model_is_nearest_neighbor() {
    let dir = tempfile::tempdir().unwrap();
    let lr_path = dir.path().join("lr.pgm");
    let lr = DepthMap::from_fn(5, 7, |y, x| (10 + y * 20 + x * 3) as f64).with_value_range(0.0, 255.0).unwrap();
    write_depth(&lr_path, &lr).unwrap();
    for factor in [2usize, 4] {
        let model = small_model(dir.path(), factor);
        let out = dir.path().join(format!("hr{factor}.pgm"));
        let o = dsr(&["sr", "--model", p(&model), "--in", p(&lr_path), "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(read_depth(&out).unwrap().values(), lr.nearest_upsample(factor).values());
    }
}

#[test]
fn eval_identical_dirs_gives_zero_rmse() {
    let dir = tempfile::tempdir().unwrap();
    let gt_dir = dir.path().join("gt");
    std::fs::create_dir(&gt_dir).unwrap();
    let scene = RectangleScene { height: 24, width: 24, ..Default::default() };
    for (id, map) in scene.dataset(3, 1) {
        write_depth(&gt_dir.join(format!("{id}.pgm")), &map).unwrap();
    }
    let csv = dir.path().join("eval.csv");
    let o = dsr(&["eval", "--pred-dir", p(&gt_dir), "--gt-dir", p(&gt_dir), "--csv", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("id,rmse,ssim,bad_pct\n"));
    let report = EvalReport::read_csv(&csv).unwrap();
    assert_eq!(report.rows.len(), 3);
    for row in &report.rows {
        assert_eq!((row.rmse, row.ssim, row.bad_pct), (0.0, 1.0, 0.0));
    }
}

#[test]
fn refine_with_zero_lambda_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.pfm");
    let m = DepthMap::from_fn(9, 11, |y, x| ((y * 7 + x * 13) % 17) as f64 + 0.25);
    write_depth(&input, &m).unwrap();
    let out = dir.path().join("out.pfm");
    assert_eq!(code(&dsr(&["refine", "--in", p(&input), "--lambda", "0", "--out", p(&out)])), 0);
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&out).unwrap());
    let smooth = dir.path().join("smooth.pfm");
    assert_eq!(code(&dsr(&["refine", "--in", p(&input), "--out", p(&smooth)])), 0);
    assert_ne!(read_depth(&smooth).unwrap(), read_depth(&input).unwrap());
}

#[test]
fn gradcheck_passes() {
    let o = dsr(&["gradcheck", "--seed", "5", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("all 16 checks passed"));
}

#[test]
fn train_then_super_resolve() {
    let dir = tempfile::tempdir().unwrap();
    let scene = RectangleScene { height: 32, width: 32, ..Default::default() };
    let mut entries = Vec::new();
    for (id, map) in scene.dataset(4, 2) {
        let name = format!("{id}.pgm");
        write_depth(&dir.path().join(&name), &map).unwrap();
        entries.push(ManifestEntry { gt: name.into(), mask: None, split: Split::Train });
    }
    let manifest = dir.path().join("m.json");
    DatasetManifest::new(Degradation { factor: 2, noise: None }, entries).unwrap().save(&manifest).unwrap();
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, "layers = 2\nchannels = 4\nepochs = 2\nbatch_size = 4\npatch_size = 16\nlearning_rate = 0.01\n").unwrap();

    let (a, b) = (dir.path().join("a.dsrf"), dir.path().join("b.dsrf"));
    for out in [&a, &b] {
        let o = dsr(&["train", "--manifest", p(&manifest), "--factor", "2", "--config", p(&cfg), "--out-model", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a.dsrf.config.toml").exists());
    let summary = std::fs::read_to_string(dir.path().join("a.dsrf.train.json")).unwrap();
    assert!(summary.contains("loss_trace"));

    assert_eq!(code(&dsr(&["train", "--manifest", p(&manifest), "--factor", "4", "--out-model", p(&a)])), 1);

    let lr = dir.path().join("lr.pgm");
    assert_eq!(code(&dsr(&["degrade", "--in", p(&dir.path().join("rect000.pgm")), "--factor", "2", "--out", p(&lr)])), 0);
    let hr = dir.path().join("hr.pfm");
    let o = dsr(&["sr", "--model", p(&a), "--in", p(&lr), "--out", p(&hr), "--dfs"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_depth(&hr).unwrap().dims(), (32, 32));
}
