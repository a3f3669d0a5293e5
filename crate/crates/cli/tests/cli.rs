use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coded_tof::formats::{read_pgm, read_ply};
use coded_tof::mask::{init_mask, MaskPattern};
use coded_tof::scene::{central_depth, parse_key_values, read_lightfield};
use coded_tof::tensor::{tns_read, tns_write};
use coded_tof::{MaskPatch, RngState, Tensor};
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coded-tof"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn manifest(path: impl AsRef<Path>) -> (String, std::collections::BTreeMap<String, String>) {
    let text = std::fs::read_to_string(path).unwrap();
    let kv = parse_key_values(&text).unwrap();
    (text, kv)
}

fn output_hashes(text: &str) -> Vec<String> {
    text.lines()
        .filter(|l| l.starts_with("# output"))
        .map(|l| l.rsplit(' ').next().unwrap().to_string())
        .collect()
}

fn make_scene(dir: &TempDir, name: &str, extra: &[&str]) -> String {
    let out = p(dir, name);
    let mut args = vec!["scene", "--size", "16", "--views", "3", "--seed", "1", "--out", &out];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn scene_writes_three_files_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = p(&dir, "s1");
    let b = p(&dir, "s2");
    let args = |out: &str| {
        vec![
            "scene", "--preset", "edge", "--fg", "1000", "--bg", "3000", "--size", "64", "--views", "9", "--seed",
            "1", "--out",
        ]
        .into_iter()
        .map(String::from)
        .chain([out.to_string()])
        .collect::<Vec<_>>()
    };
    for out in [&a, &b] {
        let v = args(out);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    }
    for suffix in [".amp.tns", ".dep.tns", ".meta", ".manifest.txt"] {
        assert!(Path::new(&format!("{a}{suffix}")).exists(), "{suffix}");
    }
    for suffix in [".amp.tns", ".dep.tns", ".meta"] {
        assert_eq!(
            std::fs::read(format!("{a}{suffix}")).unwrap(),
            std::fs::read(format!("{b}{suffix}")).unwrap()
        );
    }
    let (ta, kv) = manifest(format!("{a}.manifest.txt"));
    let (tb, _) = manifest(format!("{b}.manifest.txt"));
    assert_eq!(output_hashes(&ta), output_hashes(&tb));
    assert_eq!(output_hashes(&ta).len(), 3);
    assert!(ta.contains("# generator = chacha8"));
    assert_eq!(kv["seed"], "1");
    assert_eq!(read_lightfield(&a).unwrap().views(), (9, 9));
}

#[test]
fn usage_errors_exit_with_one() {
    let out = bin(&["scene", "--preset", "edge", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    let dir = tempfile::tempdir().unwrap();
    // randomized commands insist on a seed
    let out = bin(&["scene", "--out", &p(&dir, "x")]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(bin(&["scene", "--bogus", "1"]).status.code(), Some(1));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn manifest_replays_as_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = make_scene(&dir, "a", &["--preset", "disk", "--fg", "1200"]);
    let (_, kv) = manifest(format!("{a}.manifest.txt"));
    assert_eq!(kv["preset"], "disk");
    assert_eq!(kv["fg"], "1200");

    // replay with a different output prefix: flag beats the file
    let cfg = format!("{a}.manifest.txt");
    let b = p(&dir, "b");
    ok(&["--config", &cfg, "scene", "--out", &b]);
    for suffix in [".amp.tns", ".dep.tns"] {
        assert_eq!(
            std::fs::read(format!("{a}{suffix}")).unwrap(),
            std::fs::read(format!("{b}{suffix}")).unwrap()
        );
    }

    let bad = p(&dir, "bad.cfg");
    std::fs::write(&bad, "sizee = 3\n").unwrap();
    assert_eq!(bin(&["--config", &bad, "scene", "--seed", "1", "--out", &b]).status.code(), Some(1));
}

#[test]
fn simulate_flat_scene_recovers_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let s = make_scene(&dir, "flat", &["--preset", "flat", "--bg", "2200"]);
    let out = p(&dir, "sim");
    ok(&[
        "simulate", "--scene", &s, "--mask-pattern", "ones", "--mask-side", "4", "--noise", "off", "--seed", "0",
        "--out", &out,
    ]);
    let depth = tns_read(Path::new(&out).join("depth.tns")).unwrap();
    let gt = central_depth(&read_lightfield(&s).unwrap());
    for (&d, &g) in depth.data().iter().zip(gt.data()) {
        assert!(((d - g) / g).abs() <= 1e-6, "{d} vs {g}");
    }
    assert_eq!(tns_read(Path::new(&out).join("correlation.tns")).unwrap().dims(), &[4, 16, 16]);
    assert!(Path::new(&out).join("manifest.txt").exists());
}

#[test]
fn simulate_reports_circle_throughput_and_checks_views() {
    let dir = tempfile::tempdir().unwrap();
    let s = p(&dir, "s9");
    ok(&["scene", "--size", "16", "--views", "9", "--seed", "2", "--out", &s]);
    let out = ok(&[
        "simulate", "--scene", &s, "--mask-pattern", "circle:5", "--seed", "3", "--out", &p(&dir, "o"),
    ]);
    let want = 13.0 / 81.0;
    let line = out.lines().find(|l| l.contains("throughput")).unwrap();
    let value: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!((value - want).abs() < 1e-6, "{line}");
    assert!(line.contains("13.000 of 81"));

    // a 3x3-view mask over a 9x9-view scene
    let mask = p(&dir, "m.tns");
    init_mask(MaskPattern::Ones, 3, 3, 4, &mut RngState::new(0))
        .unwrap()
        .write(&mask)
        .unwrap();
    let bad = bin(&["simulate", "--scene", &s, "--mask", &mask, "--seed", "3", "--out", &p(&dir, "o2")]);
    assert_eq!(bad.status.code(), Some(2));
}

fn small_optimize(dir: &TempDir, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "optimize",
        "--suite-seed",
        "3",
        "--suite-size",
        "32",
        "--suite-count",
        "4",
        "--batch-size",
        "1",
        "--batches-per-epoch",
        "1",
        "--seed",
        "5",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    let _ = dir;
    bin(&args)
}

#[test]
fn optimize_respects_freeze_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = p(&dir, "a");
    let out = small_optimize(&dir, &a, &["--epochs", "50", "--checkpoint-every", "25"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mask = MaskPatch::read(Path::new(&a).join("mask.tns")).unwrap();
    let init = init_mask(MaskPattern::Circle(5), 9, 9, 12, &mut RngState::new(0)).unwrap();
    assert_eq!(mask, init);

    let (text, kv) = manifest(Path::new(&a).join("manifest.txt"));
    for (k, v) in [
        ("lr-refiner", "0.004"),
        ("lr-mask", "0.1"),
        ("w-l", "100"),
        ("w-c", "0.08"),
        ("delta", "1"),
        ("noise-a", "0.75"),
        ("noise-b", "1.25"),
        ("noise-mu", "0"),
        ("noise-sigma", "3"),
    ] {
        assert_eq!(kv[k], v, "{k}");
    }
    let log = std::fs::read_to_string(Path::new(&a).join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 51);
    assert!(Path::new(&a).join("checkpoints/epoch-0050.refiner.tnsw").exists());

    let b = p(&dir, "b");
    let out = small_optimize(&dir, &b, &["--epochs", "50", "--checkpoint-every", "25", "--threads", "3"]);
    assert!(out.status.success());
    let (text_b, _) = manifest(Path::new(&b).join("manifest.txt"));
    assert_eq!(output_hashes(&text), output_hashes(&text_b));
}

#[test]
fn optimize_divergence_exits_two_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let a = p(&dir, "d");
    let out = small_optimize(&dir, &a, &["--epochs", "5", "--lr-refiner", "1e300"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(Path::new(&a).join("dump/diverged_refiner.tnsw").exists());
}

#[test]
fn evaluate_self_test_and_fp_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let csv = p(&dir, "self.csv");
    ok(&["evaluate", "--suite-seed", "7", "--self-test", "--seed", "1", "--out", &csv]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("self-test,"));
    assert!(row.split(',').skip(1).all(|v| v.parse::<f64>().unwrap() == 0.0), "{row}");

    let ones = p(&dir, "ones.csv");
    ok(&[
        "evaluate", "--suite-seed", "7", "--mask-pattern", "ones", "--fp-protocol", "--seed", "1", "--out", &ones,
    ]);
    let fp = std::fs::read_to_string(format!("{ones}.fp.csv")).unwrap();
    let ones_row: Vec<&str> = fp.lines().find(|l| l.starts_with("ones,")).unwrap().split(',').collect();
    assert_eq!(ones_row[1].parse::<f64>().unwrap(), 1.0);
    let report = std::fs::read_to_string(&ones).unwrap();
    let aggregate = report.lines().last().unwrap();
    assert!(aggregate.starts_with("aggregate,"));

    // the pinhole beats circle:5, which beats the open aperture
    let pin = p(&dir, "pin.csv");
    ok(&[
        "evaluate", "--suite-seed", "7", "--mask-pattern", "circle:1", "--fp-protocol", "--seed", "1", "--out", &pin,
    ]);
    let fp = std::fs::read_to_string(format!("{pin}.fp.csv")).unwrap();
    assert_eq!(fp.lines().last().unwrap(), "ordering,,,,,PASS");
}

#[test]
fn export_ply_and_mask_mosaic() {
    let dir = tempfile::tempdir().unwrap();
    let depth = p(&dir, "d.tns");
    tns_write(&Tensor::new(vec![2, 2], vec![1000.0, 1001.0, 1002.0, 3000.0]).unwrap(), &depth).unwrap();
    let ply = p(&dir, "d.ply");
    ok(&["export", "--depth", &depth, "--ply", &ply]);
    let text = std::fs::read_to_string(&ply).unwrap();
    assert!(text.contains("element vertex 4"));
    assert_eq!(read_ply(&ply).unwrap().len(), 4);
    assert!(Path::new(&format!("{ply}.manifest.txt")).exists());

    let mask = p(&dir, "m.tns");
    init_mask(MaskPattern::Gaussian(0.3), 3, 3, 4, &mut RngState::new(9))
        .unwrap()
        .write(&mask)
        .unwrap();
    let pgm = p(&dir, "m.pgm");
    let tns = p(&dir, "mb.tns");
    ok(&["export", "--mask", &mask, "--binarize", "0.5", "--pgm", &pgm, "--tns", &tns]);
    let img = read_pgm(&pgm).unwrap();
    assert_eq!((img.width, img.height), (12, 12));
    assert!(img.pixels.iter().all(|&b| b == 0 || b == 255));
    assert!(MaskPatch::read(&tns).unwrap().values().data().iter().all(|&v| v == 0.0 || v == 1.0));

    assert_eq!(bin(&["export", "--pgm", &pgm]).status.code(), Some(1));
    let missing: PathBuf = dir.path().join("nope.tns");
    assert_eq!(
        bin(&["export", "--depth", missing.to_str().unwrap(), "--ply", &ply]).status.code(),
        Some(2)
    );
}
