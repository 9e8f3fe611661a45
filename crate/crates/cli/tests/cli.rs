use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypercomplete")).args(args).output().unwrap()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "preset = tiny\nlearning_rate = 0.1\n").unwrap();
    let out = bin(&["--config", s(&cfg), "complete", "a.xyz", "b.xyz"]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("learning_rate") && err.contains("line 2"), "{err}");
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.xyz");
    let out = bin(&["--preset", "tiny", "complete", s(&missing), s(&dir.path().join("o.xyz"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("nowhere.xyz"));
}

#[test]
fn complete_writes_cloud_and_hyperpoints() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixtures().join("partial/cube/0000.xyz");
    let output = dir.path().join("done.xyz");
    let out = bin(&["--preset", "tiny", "complete", s(&input), s(&output), "--emit-hyperpoints", "--concat-input"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    // tiny: (8 + 8) centers × 4 grid points, plus the 256 input points
    assert!(stdout.contains("output 320 points") && stdout.contains("16 hyperpoints"), "{stdout}");
    assert_eq!(fs::read_to_string(&output).unwrap().lines().count(), 320);
    assert_eq!(fs::read_to_string(dir.path().join("done.hyperpoints.xyz")).unwrap().lines().count(), 16);
}

#[test]
fn checkpoint_shape_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = bin(&["--preset", "tiny", "toy-train", "--shapes", s(&fixtures()), "--out", s(&run), "--steps", "2"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let ckpt = run.join("model.ckpt");
    let input = fixtures().join("partial/plane/0001.xyz");
    let ok = bin(&["--preset", "tiny", "complete", s(&input), s(&dir.path().join("a.xyz")), "--checkpoint", s(&ckpt)]);
    assert!(ok.status.success(), "{}", text(&ok.stderr));
    let bad = bin(&["--preset", "toy", "complete", s(&input), s(&dir.path().join("b.xyz")), "--checkpoint", s(&ckpt)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(text(&bad.stderr).contains("HCPT1"));
}

#[test]
fn toy_train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let train = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = bin(&["--preset", "tiny", "--seed", "5", "toy-train", "--shapes", s(&fixtures()), "--out", s(&out_dir), "--steps", "4"]);
        assert!(out.status.success(), "{}", text(&out.stderr));
        (fs::read(out_dir.join("model.ckpt")).unwrap(), fs::read_to_string(out_dir.join("loss.csv")).unwrap())
    };
    let (a, la) = train("a");
    let (b, lb) = train("b");
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(la.starts_with("step,loss,reconstruction,expansion,cd_l2\n"));
    assert_eq!(la.lines().count(), 5);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "preset = tiny\nlr = 1e300\nsteps = 5\n").unwrap();
    let out = bin(&["--config", s(&cfg), "toy-train", "--shapes", s(&fixtures()), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stderr).contains("last finite step"));
}

#[test]
fn eval_reports_and_skips() {
    let dir = tempfile::tempdir().unwrap();
    let gt = fixtures().join("complete");
    let out_dir = dir.path().join("eval");
    let out = bin(&["eval", s(&gt), s(&gt), "--out", s(&out_dir), "--phi", "0.01"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["overall"]["count"], 8);
    assert_eq!(json["overall"]["cd_l1"], 0.0);
    assert_eq!(json["overall"]["f_score"], 1.0);
    assert_eq!(json["warnings"], 0);

    // predictions for one shape only
    let pred = dir.path().join("pred");
    fs::create_dir_all(pred.join("sphere")).unwrap();
    fs::copy(gt.join("sphere/0000.xyz"), pred.join("sphere/0000.xyz")).unwrap();
    let out = bin(&["eval", s(&pred), s(&gt), "--out", s(&out_dir)]);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["overall"]["count"], 1);
    assert_eq!(json["warnings"], 7);
    assert_eq!(json["skipped"][0]["reason"], "no prediction");
    let csv = fs::read_to_string(out_dir.join("per_shape.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn eval_hand_values() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("p"), dir.path().join("g"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    fs::write(pred.join("a.xyz"), "0 0 0\n").unwrap();
    fs::write(gt.join("a.xyz"), "1 0 0\n").unwrap();
    fs::write(pred.join("b.xyz"), "0 0 0\n1 0 0\n").unwrap();
    fs::write(gt.join("b.xyz"), "0 0 0\n").unwrap();
    fs::write(pred.join("c.xyz"), "0 0 0\n10 0 0\n").unwrap();
    fs::write(gt.join("c.xyz"), "0 0 0\n").unwrap();
    let out_dir = dir.path().join("e");
    assert!(bin(&["eval", s(&pred), s(&gt), "--out", s(&out_dir), "--phi", "1"]).status.success());
    let mut r = csv::Reader::from_path(out_dir.join("per_shape.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    let num = |row: usize, col: usize| rows[row][col].parse::<f64>().unwrap();
    assert_eq!(&rows[0][0], "a");
    assert_eq!((num(0, 2), num(0, 3)), (2.0, 2.0));
    assert_eq!(num(1, 2), 0.5);
    assert!((num(2, 4) - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn selftest_negative_control() {
    let out = bin(&["selftest", "--corrupt-scan"]);
    assert_eq!(out.status.code(), Some(3));
    let stdout = text(&out.stdout);
    let scan = stdout.lines().find(|l| l.starts_with("scan equivalence")).unwrap();
    assert!(scan.contains("FAIL"), "{stdout}");
    assert!(stdout.contains("check") && stdout.contains("tolerance") && stdout.contains("observed"));
    assert!(stdout.contains("parameters at C=384"));
    assert_eq!(stdout.lines().filter(|l| l.contains(" FAIL ")).count(), 1, "{stdout}");
}
