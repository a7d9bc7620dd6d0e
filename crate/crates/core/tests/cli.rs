mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rddeval::dataset::{load_annotations, parse_detections, DetectionFormat, ParseMode};
use rddeval::metrics::ground_truth_index;
use rddeval::report::parse_curve;

use common::*;

fn rddeval(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rddeval"))
        .args(args)
        .env_remove(rddeval::cli::THREADS_ENV)
        .output()
        .expect("binary runs")
}

fn stdout_of(args: &[&str]) -> String {
    let out = rddeval(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn eval_identical_detections_is_perfect() {
    let g = golden_dir();
    let out = stdout_of(&[
        "eval",
        "--gt",
        p(&g.join("gt")),
        "--det",
        p(&g.join("identical.txt")),
    ]);
    assert!(out.contains("\nf1 1.0000\n"), "{out}");
}

#[test]
fn eval_golden_fixture() {
    let g = golden_dir();
    let out = stdout_of(&[
        "eval",
        "--gt",
        p(&g.join("gt")),
        "--det",
        p(&g.join("dets.txt")),
    ]);
    assert_eq!(
        out,
        "tp 4\nfp 3\nfn 2\nprecision 0.5714\nrecall 0.6667\nf1 0.6154\n"
    );
}

#[test]
fn eval_breakdowns() {
    let g = golden_dir();
    let out = stdout_of(&[
        "eval",
        "--gt",
        p(&g.join("gt")),
        "--det",
        p(&g.join("dets.txt")),
        "--per-class",
        "--per-country",
    ]);
    for row in ["D00", "D10", "D20", "D40", "Czech", "India", "Japan"] {
        assert!(
            out.lines().any(|l| l.starts_with(row)),
            "no {row} row in\n{out}"
        );
    }
}

#[test]
fn eval_kv_has_full_precision() {
    let g = golden_dir();
    let out = stdout_of(&[
        "eval",
        "--gt",
        p(&g.join("gt")),
        "--det",
        p(&g.join("dets.txt")),
        "--output",
        "kv",
    ]);
    assert!(out.starts_with("tp=4\nfp=3\nfn=2\n"));
    assert!(out.contains(&format!("\nprecision={}\n", 4.0 / 7.0)));
    assert!(out.contains("class.D00.tp="));
    assert!(out.contains("country.Japan.f1="));
}

#[test]
fn missing_det_flag_is_a_usage_error() {
    let g = golden_dir();
    let out = rddeval(&["eval", "--gt", p(&g.join("gt"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--det"));
}

#[test]
fn unreadable_input_is_a_data_error() {
    let g = golden_dir();
    let out = rddeval(&[
        "eval",
        "--gt",
        p(&g.join("gt")),
        "--det",
        "/no/such/file.txt",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn lenient_mode_warns_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let dets = dir.path().join("d.txt");
    fs::write(
        &dets,
        "Czech_000001 D00 0.9 10 10 110 110\nCzech_000001 D44 0.8 1 1 5 5\n",
    )
    .unwrap();
    let g = golden_dir();
    let out = rddeval(&["eval", "--gt", p(&g.join("gt")), "--det", p(&dets)]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.starts_with("WARN ") && err.contains("d.txt:2 "),
        "{err}"
    );

    let strict = rddeval(&[
        "eval",
        "--gt",
        p(&g.join("gt")),
        "--det",
        p(&dets),
        "--strict",
    ]);
    assert_eq!(strict.status.code(), Some(2));
}

#[test]
fn fuse_single_model_disjoint_boxes_reproduces_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = "img_a D00 0.9 0 0 10 10\nimg_a D00 0.5 20 20 30 30\nimg_b D40 0.7 5 5 9 9\n";
    let path = dir.path().join("solo.txt");
    fs::write(&path, input).unwrap();
    let out = stdout_of(&["fuse", "--det", p(&path), "--strategy", "union-nms"]);
    assert_eq!(out, input);
}

#[test]
fn fuse_three_identical_models_unanimous_consensus() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(golden_dir().join("identical.txt")).unwrap();
    let mut args = vec![
        "fuse".to_string(),
        "--strategy".into(),
        "consensus".into(),
        "--min-votes".into(),
        "3".into(),
    ];
    for m in ["a", "b", "c"] {
        let path = dir.path().join(format!("{m}.txt"));
        fs::write(&path, &text).unwrap();
        args.extend(["--det".into(), path.to_str().unwrap().to_string()]);
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = stdout_of(&args);
    assert_eq!(out.lines().count(), text.lines().count());
}

#[test]
fn fuse_weighted_two_models() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    fs::write(&a, "img D00 0.8 0 0 10 10\n").unwrap();
    fs::write(&b, "img D00 0.4 0 0 20 10\n").unwrap();
    let out_path = dir.path().join("fused.txt");
    let base = [
        "fuse",
        "--det",
        p(&a),
        "--det",
        p(&b),
        "--strategy",
        "weighted-fusion",
    ];

    let mut args = base.to_vec();
    args.extend(["--iou-cluster", "0.45", "--out", p(&out_path)]);
    assert!(stdout_of(&args).is_empty());
    let fused = parse_detections(
        &fs::read_to_string(&out_path).unwrap(),
        DetectionFormat::Scored,
        ParseMode::Strict,
    )
    .unwrap()
    .value;
    assert_eq!(fused.len(), 1);
    assert!((fused[0].bbox.xmax() - 40.0 / 3.0).abs() < 1e-9);
    assert!((fused[0].confidence - 0.6).abs() < 1e-12);

    // IoU exactly 0.5 does not cluster at the default threshold
    let two = stdout_of(&base);
    let confs: Vec<&str> = two.lines().map(|l| l.split(' ').nth(2).unwrap()).collect();
    assert_eq!(confs, ["0.4", "0.2"]);
}

#[test]
fn fuse_rejects_bad_configuration() {
    let g = golden_dir();
    let det = g.join("dets.txt");
    let out = rddeval(&[
        "fuse",
        "--det",
        p(&det),
        "--min-votes",
        "2",
        "--strategy",
        "consensus",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = rddeval(&["fuse", "--det", p(&det), "--det", p(&det)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fuse_reads_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    fs::write(&a, "img D00 0.8 0 0 10 10\n").unwrap();
    fs::write(&b, "img D00 0.4 0 0 20 10\n").unwrap();
    let cfg = dir.path().join("fusion.cfg");
    fs::write(
        &cfg,
        "# two-model check\nstrategy = weighted_fusion\niou_cluster_threshold = 0.45\n",
    )
    .unwrap();
    let out = stdout_of(&["fuse", "--det", p(&a), "--det", p(&b), "--config", p(&cfg)]);
    assert_eq!(out.lines().count(), 1);
    // flags override the file
    let out = stdout_of(&[
        "fuse",
        "--det",
        p(&a),
        "--det",
        p(&b),
        "--config",
        p(&cfg),
        "--iou-cluster",
        "0.5",
    ]);
    assert_eq!(out.lines().count(), 2);
}

#[test]
fn sweep_perfect_detections() {
    let g = golden_dir();
    let out = stdout_of(&[
        "sweep",
        "--gt",
        p(&g.join("gt")),
        "--det",
        p(&g.join("identical.txt")),
        "--grid",
        "0,0.5,0.9",
    ]);
    assert!(out.starts_with("best_threshold 0\n"), "{out}");
    assert!(out.ends_with("f1 1.0000\n"));
}

#[test]
fn sweep_everything_filtered() {
    let dir = tempfile::tempdir().unwrap();
    let dets = dir.path().join("low.txt");
    fs::write(&dets, "Czech_000001 D00 0.3 10 10 110 110\n").unwrap();
    let out = stdout_of(&[
        "sweep",
        "--gt",
        p(&golden_dir().join("gt")),
        "--det",
        p(&dets),
        "--grid",
        "0.5",
    ]);
    assert!(out.ends_with("f1 0.0000\n"), "{out}");
}

#[test]
fn sweep_curve_matches_reference_evaluator() {
    let g = golden_dir();
    let dir = tempfile::tempdir().unwrap();
    let curve_path = dir.path().join("curve.csv");
    stdout_of(&[
        "sweep",
        "--gt",
        p(&g.join("gt")),
        "--det",
        p(&g.join("dets.txt")),
        "--curve-out",
        p(&curve_path),
    ]);
    let curve = parse_curve(&fs::read_to_string(&curve_path).unwrap()).unwrap();
    assert_eq!(curve.len(), 20);

    let gt = ground_truth_index(
        &load_annotations(&g.join("gt"), ParseMode::Strict)
            .unwrap()
            .value,
    );
    let dets = parse_detections(
        &fs::read_to_string(g.join("dets.txt")).unwrap(),
        DetectionFormat::Scored,
        ParseMode::Strict,
    )
    .unwrap()
    .value;
    for point in curve {
        let (pr, rc, f1) = reference_f1(reference_counts(&gt, &dets, point.threshold, 0.5));
        assert_eq!(
            (point.precision, point.recall),
            (pr, rc),
            "at {}",
            point.threshold
        );
        assert!((point.f1 - f1).abs() < 1e-12, "at {}", point.threshold);
    }
}

#[test]
fn stats_on_golden_fixture() {
    let out = stdout_of(&["stats", "--gt", p(&golden_dir().join("gt"))]);
    assert!(out.starts_with("images 3\n"), "{out}");
    assert!(out.contains("boxes 6\n"));
    assert!(out.lines().any(|l| l.trim() == "D40      2"), "{out}");
}

#[test]
fn convert_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("sub.csv");
    let back = dir.path().join("back.txt");
    let src = golden_dir().join("dets.txt");
    stdout_of(&[
        "convert",
        "--in",
        p(&src),
        "--in-format",
        "scored",
        "--out",
        p(&sub),
        "--out-format",
        "submission",
    ]);
    let text = fs::read_to_string(&sub).unwrap();
    assert!(
        text.starts_with("Czech_000001.jpg,1 12 12 110 108 3 205 200 300 260 1 400 400 450 450\n"),
        "{text}"
    );
    stdout_of(&[
        "convert",
        "--in",
        p(&sub),
        "--in-format",
        "submission",
        "--out",
        p(&back),
        "--out-format",
        "scored",
    ]);
    let again = stdout_of(&[
        "convert",
        "--in",
        p(&back),
        "--in-format",
        "scored",
        "--out-format",
        "submission",
    ]);
    assert_eq!(again, text);
}

#[test]
fn convert_caps_predictions_per_image() {
    let src = golden_dir().join("dets.txt");
    let out = stdout_of(&[
        "convert",
        "--in",
        p(&src),
        "--in-format",
        "scored",
        "--out-format",
        "scored",
        "--conf",
        "0.6",
        "--max-per-image",
        "1",
    ]);
    assert_eq!(
        out,
        "Czech_000001 D00 0.9 12 12 110 108\nIndia_000002 D10 0.95 50 50 150 90\n"
    );
}

#[test]
fn thread_env_fallback() {
    let g = golden_dir();
    let (gt, det) = (g.join("gt"), g.join("dets.txt"));
    let args = ["eval", "--gt", p(&gt), "--det", p(&det)];
    let with_env = Command::new(env!("CARGO_BIN_EXE_rddeval"))
        .args(args)
        .env(rddeval::cli::THREADS_ENV, "3")
        .output()
        .unwrap();
    assert!(with_env.status.success());
    assert_eq!(
        String::from_utf8(with_env.stdout).unwrap(),
        stdout_of(&args)
    );
    let bad = Command::new(env!("CARGO_BIN_EXE_rddeval"))
        .args(args)
        .env(rddeval::cli::THREADS_ENV, "lots")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
