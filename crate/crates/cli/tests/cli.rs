use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{"epochs":2,"m":4,"patch":5,"samples":6,"batch_size":15,"augment":false,"grid_rows":4,"grid_cols":4,"k_neighbors":3}"#;

fn mfstf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfstf")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scene(dir: &TempDir) -> std::path::PathBuf {
    let cube = dir.path().join("scene.mfpc");
    let o = mfstf(&["gen", "--out", s(&cube), "--size", "32x32", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    cube
}

fn config(dir: &TempDir, text: &str) -> std::path::PathBuf {
    let p = dir.path().join("config.json");
    fs::write(&p, text).unwrap();
    p
}

/// "MFLB", u32 height, u32 width, u16 labels, all little endian.
fn mflb(h: u32, w: u32, labels: &[u16]) -> Vec<u8> {
    let mut bytes = b"MFLB".to_vec();
    bytes.extend(h.to_le_bytes());
    bytes.extend(w.to_le_bytes());
    for l in labels {
        bytes.extend(l.to_le_bytes());
    }
    bytes
}

#[test]
fn gen_rejects_one_band() {
    let dir = TempDir::new().unwrap();
    let o = mfstf(&["gen", "--out", s(&dir.path().join("x")), "--bands", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("2 bands"));
}

#[test]
fn gen_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for p in [&a, &b] {
        assert!(mfstf(&["gen", "--out", s(p), "--size", "16x20", "--seed", "9"]).status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn full_workflow() {
    let dir = TempDir::new().unwrap();
    let cube = scene(&dir);
    let cfg = config(&dir, TINY);
    let run = dir.path().join("run");
    let o = mfstf(&["train", "--data", s(&cube), "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model-black.mfst", "model-white.mfst", "train-black.log", "train-white.log"] {
        assert!(run.join(f).exists(), "{} missing", f);
    }
    let log = fs::read_to_string(run.join("train-black.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.starts_with("epoch=") && l.contains("alpha=")));

    let pred = dir.path().join("pred.mflb");
    let map = dir.path().join("pred.ppm");
    let o = mfstf(&[
        "predict",
        "--data",
        s(&cube),
        "--ckpt-black",
        s(&run.join("model-black.mfst")),
        "--ckpt-white",
        s(&run.join("model-white.mfst")),
        "--out",
        s(&pred),
        "--map",
        s(&map),
        "--grid",
        "4x4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read(&map).unwrap().starts_with(b"P6\n32 32\n255\n"));

    let json = dir.path().join("metrics.json");
    let o = mfstf(&["eval", "--pred", s(&pred), "--truth", s(&cube), "--json", s(&json)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for key in ["oa=", "aa=", "kappa=", "class_5="] {
        assert!(text.contains(key), "{} missing from {}", key, text);
    }
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    let oa = v["oa"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&oa));
}

#[test]
fn eval_against_itself_is_perfect() {
    let dir = TempDir::new().unwrap();
    let cube = scene(&dir);
    let o = mfstf(&["eval", "--pred", s(&cube), "--truth", s(&cube)]);
    // a cube is not a label raster
    assert_eq!(o.status.code(), Some(2));

    let raster = dir.path().join("r.mflb");
    fs::write(&raster, mflb(1, 3, &[1, 2, 2])).unwrap();
    let o = mfstf(&["eval", "--pred", s(&raster), "--truth", s(&raster)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("kappa=1.0000"));
}

#[test]
fn eval_with_no_labeled_pixels_fails() {
    let dir = TempDir::new().unwrap();
    let raster = dir.path().join("z.mflb");
    fs::write(&raster, mflb(1, 2, &[0, 0])).unwrap();
    let o = mfstf(&["eval", "--pred", s(&raster), "--truth", s(&raster), "--classes", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("labeled"), "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_a_schema_error() {
    let dir = TempDir::new().unwrap();
    let cube = scene(&dir);
    let cfg = config(&dir, r#"{"epochs":1,"learning_rte":0.1}"#);
    let o = mfstf(&["train", "--data", s(&cube), "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rte"));
}

#[test]
fn divergence_exits_three() {
    let dir = TempDir::new().unwrap();
    let cube = scene(&dir);
    let cfg = config(
        &dir,
        r#"{"epochs":3,"m":4,"patch":5,"samples":6,"batch_size":15,"augment":false,"grid_rows":4,"grid_cols":4,"k_neighbors":3,"learning_rate":1e300}"#,
    );
    let o = mfstf(&["train", "--data", s(&cube), "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn repeats_use_separate_directories() {
    let dir = TempDir::new().unwrap();
    let cube = scene(&dir);
    let cfg = config(&dir, TINY);
    let out = dir.path().join("rep");
    let o = mfstf(&[
        "train", "--data", s(&cube), "--config", s(&cfg), "--out", s(&out), "--part", "white", "--repeats", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = fs::read(out.join("run-0/model-white.mfst")).unwrap();
    let b = fs::read(out.join("run-1/model-white.mfst")).unwrap();
    assert_ne!(a, b);
    assert!(!out.join("run-0/model-black.mfst").exists());
}

#[test]
fn sweep_rejects_gamma_at_one_before_training() {
    // the data file need not exist: validation comes first
    let o = mfstf(&["sweep", "--data", "/nonexistent", "--param", "gamma", "--values", "2,1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));
}

#[test]
fn sweep_prints_a_row_per_value() {
    let dir = TempDir::new().unwrap();
    let cube = scene(&dir);
    let cfg = config(&dir, TINY);
    let o = mfstf(&[
        "sweep", "--data", s(&cube), "--config", s(&cfg), "--param", "lambda", "--values", "0,0.5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "lambda\toa\taa\tkappa");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("0.5\t"));
}

#[test]
fn gradcheck_flags_an_injected_fault() {
    let o = mfstf(&["gradcheck", "--fault", "relu"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("worst op"));
    assert!(stdout(&o).lines().any(|l| l.starts_with("relu") && l.ends_with("FAIL")));

    let o = mfstf(&["gradcheck", "--fault", "no_such_op"]);
    assert_eq!(o.status.code(), Some(2));
}
