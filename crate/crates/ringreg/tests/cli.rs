use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use ringreg_core::io::write_label_nifti;
use ringreg_core::{Dims, LabelVolume};
use serde_json::Value;

fn ringreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ringreg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ringreg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a 32³ fixture under `dir` and returns its prefix.
fn fixture(dir: &Path) -> PathBuf {
    let prefix = dir.join("fx");
    ok(&["synth", "--seed", "1", "--dims", "32,32,32", "--labels", "4", "-o", s(&prefix)]);
    prefix
}

fn register_args(fx: &Path, out: &Path) -> Vec<String> {
    let p = |suffix: &str| format!("{}{suffix}", fx.display());
    vec![
        "register".into(),
        "--fixed".into(),
        p("_fixed.nii"),
        "--moving".into(),
        p("_moving.nii"),
        "--fixed-labels".into(),
        p("_fixed_labels.nii"),
        "--moving-labels".into(),
        p("_moving_labels.nii"),
        "--scales".into(),
        "2:15,1:10".into(),
        "--affine-scales".into(),
        "2:10".into(),
        "-o".into(),
        s(out).into(),
    ]
}

fn run_register(fx: &Path, out: &Path, extra: &[&str]) -> Value {
    let mut args = register_args(fx, out);
    args.extend(extra.iter().map(|x| x.to_string()));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    summary(out)
}

fn summary(out: &Path) -> Value {
    let text = std::fs::read_to_string(format!("{}_summary.json", out.display())).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn files_with_prefix(dir: &Path, stem: &str) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name().to_string_lossy().starts_with(stem))
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_reproducible_and_readable() {
    let d = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        ok(&["synth", "--seed", "5", "--dims", "16,16,16", "--labels", "1", "-o", s(&d.path().join(run))]);
    }
    let a = files_with_prefix(d.path(), "a_");
    let b = files_with_prefix(d.path(), "b_");
    assert_eq!(a.len(), 6);
    for ((na, da), (nb, db)) in a.iter().zip(&b) {
        assert_eq!(na[1..], nb[1..]);
        assert!(da == db, "{na} differs");
    }
    let info = ok(&["info", s(&d.path().join("a_fixed.nii"))]);
    let text = String::from_utf8(info.stdout).unwrap();
    assert!(text.contains("dims: [16, 16, 16]"), "{text}");
    assert!(text.contains("float64"));
}

#[test]
fn default_fixture_is_quick_to_generate() {
    let d = tempfile::tempdir().unwrap();
    let t = Instant::now();
    ok(&["synth", "-o", s(&d.path().join("fx"))]);
    assert!(t.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn info_reports_truncation_offset() {
    let d = tempfile::tempdir().unwrap();
    let fx = fixture(d.path());
    let bytes = std::fs::read(format!("{}_fixed.nii", fx.display())).unwrap();
    let cut = d.path().join("cut.nii");
    std::fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
    let out = ringreg(&["info", s(&cut)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("offset {}", bytes.len() - 100)), "{err}");
    assert_eq!(ringreg(&["info", s(&d.path().join("missing.nii"))]).status.code(), Some(2));
}

#[test]
fn metrics_of_constructed_maps() {
    let d = tempfile::tempdir().unwrap();
    let dims = Dims::cube(8).unwrap();
    let block = |lo: usize, hi: usize| {
        let data = (0..dims.len()).map(|v| u16::from((lo..hi).contains(&(v / 64)))).collect();
        LabelVolume::from_vec(dims, data).unwrap()
    };
    let paths: Vec<PathBuf> = ["a.nii", "b.nii"].iter().map(|n| d.path().join(n)).collect();
    write_label_nifti(&block(0, 4), &paths[0]).unwrap();
    write_label_nifti(&block(4, 8), &paths[1]).unwrap();

    let same: Value = serde_json::from_slice(&ok(&["metrics", "--a", s(&paths[0]), "--b", s(&paths[0])]).stdout).unwrap();
    assert_eq!(same["dice"], 1.0);
    assert_eq!(same["inv_dice"], 1.0);
    assert_eq!(same["hd90"], 0.0);

    let apart: Value = serde_json::from_slice(&ok(&["metrics", "--a", s(&paths[0]), "--b", s(&paths[1])]).stdout).unwrap();
    assert_eq!(apart["dice"], 0.0);
    assert_eq!(apart["inv_dice"], 0.0);
    assert!(apart["hd90"].as_f64().unwrap() > 0.0);

    let out = ringreg(&["metrics", "--a", s(&paths[0]), "--b", s(&paths[1]), "--weight", "heavy"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn register_writes_outputs_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let fx = fixture(d.path());
    let first = run_register(&fx, &d.path().join("r1"), &[]);
    run_register(&fx, &d.path().join("r2"), &[]);
    let a = files_with_prefix(d.path(), "r1_");
    let b = files_with_prefix(d.path(), "r2_");
    let names: Vec<_> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "r1_affine_trace.csv",
            "r1_moved.nii",
            "r1_moved_labels.nii",
            "r1_summary.json",
            "r1_trace.csv",
            "r1_warp.json",
            "r1_warp.raw"
        ]
    );
    for ((na, da), (_, db)) in a.iter().zip(&b) {
        if na.ends_with("summary.json") {
            let strip = |x: &[u8]| String::from_utf8_lossy(x).replace("r1", "r2").replace("r2", "");
            assert_eq!(strip(da), strip(db));
        } else {
            assert!(da == db, "{na} differs between runs");
        }
    }

    let trace = std::fs::read_to_string(d.path().join("r1_trace.csv")).unwrap();
    assert!(trace.starts_with("scale_index,iteration,loss\n"));
    assert_eq!(trace.lines().count(), 1 + 15 + 10);
    let labels = &first["labels"];
    assert!(labels["dice"].as_f64().unwrap() > labels["baseline_dice"].as_f64().unwrap());
    assert!(first.get("timings").is_none());
    assert_eq!(first["config"]["scales"], "2:15,1:10");

    let fl = format!("{}_fixed_labels.nii", fx.display());
    let moved = d.path().join("r1_moved_labels.nii");
    let m: Value = serde_json::from_slice(&ok(&["metrics", "--a", &fl, "--b", s(&moved)]).stdout).unwrap();
    for key in ["dice", "inv_dice", "hd90"] {
        assert_eq!(m[key], labels[key], "{key}");
    }
}

#[test]
fn sharded_register_matches_single_worker() {
    let d = tempfile::tempdir().unwrap();
    let fx = fixture(d.path());
    let one = run_register(&fx, &d.path().join("h1"), &["--shards", "1"]);
    let four = run_register(&fx, &d.path().join("h4"), &["--shards", "4"]);
    let losses = |v: &Value| -> Vec<f64> {
        v["scales"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|s| [s["initial_loss"].as_f64().unwrap(), s["final_loss"].as_f64().unwrap()])
            .collect()
    };
    assert!(four["scales"].as_array().unwrap().iter().any(|s| s["shards"].as_u64().unwrap() > 1));
    for (a, b) in losses(&one).iter().zip(losses(&four)) {
        assert!((a - b).abs() <= 1e-6 * a.abs(), "{a} vs {b}");
    }
}

#[test]
fn config_file_is_layered_under_flags() {
    let d = tempfile::tempdir().unwrap();
    let fx = fixture(d.path());
    let cfg = d.path().join("run.toml");
    std::fs::write(&cfg, "lr = 0.25\nsigma_warp = 0.75\nscales = \"2:5\"\ntimings = true\n").unwrap();
    let out = d.path().join("c");
    let mut args = register_args(&fx, &out);
    args.extend(["--config".into(), s(&cfg).into(), "--lr".into(), "0.4".into()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let sum = summary(&out);
    assert_eq!(sum["config"]["lr"], 0.4);
    assert_eq!(sum["config"]["sigma_warp"], 0.75);
    assert_eq!(sum["config"]["scales"], "2:15,1:10");
    assert!(sum["timings"]["wall_seconds"].as_f64().unwrap() > 0.0);

    std::fs::write(&cfg, "learning_rate = 1\n").unwrap();
    let mut bad = register_args(&fx, &out);
    bad.extend(["--config".into(), s(&cfg).into()]);
    let res = ringreg(&bad.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("learning_rate"));
}

#[test]
fn error_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let fx = fixture(d.path());
    assert_eq!(ringreg(&["register", "--fixed", "x.nii"]).status.code(), Some(1));
    assert_eq!(ringreg(&["register", "--gp-sync", "sometimes"]).status.code(), Some(1));
    assert_eq!(ringreg(&["--version"]).status.code(), Some(0));

    let out = d.path().join("io");
    let mut args = register_args(&fx, &out);
    args[2] = s(&d.path().join("absent.nii")).into();
    assert_eq!(ringreg(&args.iter().map(String::as_str).collect::<Vec<_>>()).status.code(), Some(2));

    let mut bytes = std::fs::read(format!("{}_moving.nii", fx.display())).unwrap();
    let at = bytes.len() - 8 * 500;
    bytes[at..at + 8].copy_from_slice(&f64::NAN.to_le_bytes());
    let nan = d.path().join("nan.nii");
    std::fs::write(&nan, bytes).unwrap();
    let out = d.path().join("nanrun");
    let mut args = register_args(&fx, &out);
    args[4] = s(&nan).into();
    args[12] = "".into();
    let res = ringreg(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    let trace = std::fs::read_to_string(d.path().join("nanrun_trace.csv")).unwrap();
    assert_eq!(trace, "scale_index,iteration,loss\n0,0,NaN\n");
    assert!(!d.path().join("nanrun_summary.json").exists());
}
