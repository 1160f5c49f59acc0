use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lgnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn lgnet")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lgnet(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_pipeline(dir: &Path) {
    ok(dir, &["gen-data", "--out", "d", "--train", "24", "--val", "12", "--test", "12", "--seed", "3"]);
    ok(dir, &["propose", "--data", "d", "--out", "p", "--top-k", "20"]);
    ok(dir, &["train-stage1", "--data", "d", "--out", "s1.lgn", "--epochs", "2", "--seed", "3"]);
    ok(
        dir,
        &[
            "train-stage2", "--data", "d", "--model", "s1.lgn", "--proposals", "p", "--out", "s2.lgn",
            "--epochs", "2", "--top-k", "20", "--seed", "3",
        ],
    );
}

#[test]
fn help_and_version_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(lgnet(tmp.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(lgnet(tmp.path(), &["--version"]).status.code(), Some(0));
    for sub in ["gen-data", "propose", "train-stage1", "train-stage2", "eval", "localize", "ablate", "plot"] {
        let out = lgnet(tmp.path(), &[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--seed") && text.contains("--config"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(lgnet(tmp.path(), &["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(lgnet(tmp.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(lgnet(tmp.path(), &["train-stage1", "--data", "x"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_two_and_name_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lgnet(tmp.path(), &["eval", "--model", "absent.lgn", "--data", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.lgn"));

    fs::write(tmp.path().join("bad.lgn"), b"XXXX\0\0\0\0").unwrap();
    let out = lgnet(tmp.path(), &["eval", "--model", "bad.lgn", "--data", "d"]);
    assert_eq!(out.status.code(), Some(2));

    let out = lgnet(tmp.path(), &["ablate", "--name", "nope", "--data", "d", "--proposals", "p"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_outputs_and_reproducibility() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_pipeline(a.path());
    tiny_pipeline(b.path());
    for f in ["d/train/labels.csv", "d/test/images/test_00003.ppm", "p/val/val_00001.proposals", "s1.lgn", "s2.lgn", "s2.lgn.log.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }

    let eval = ["eval", "--model", "s2.lgn", "--data", "d", "--proposals", "p", "--dump-affinity", "aff"];
    let ea = ok(a.path(), &eval);
    assert_eq!(ea, ok(b.path(), &eval));
    let lines: Vec<&str> = ea.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "mA\tAcc\tPrec\tRec\tF1");
    let vals: Vec<f64> = lines[1].split('\t').map(|v| v.parse().unwrap()).collect();
    assert_eq!(vals.len(), 5);
    assert!(vals.iter().all(|v| (0.0..=100.0).contains(v)));
    let csv = fs::read_to_string(a.path().join("aff/test_00000.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8);

    // Stage-2 models refuse to evaluate without proposals.
    assert_eq!(lgnet(a.path(), &["eval", "--model", "s2.lgn", "--data", "d"]).status.code(), Some(2));

    ok(a.path(), &["localize", "--model", "s2.lgn", "--data", "d", "--proposals", "p", "--out", "loc"]);
    let jsonl = fs::read_to_string(a.path().join("loc/localize.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 12 * 8);
    for l in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["box"].as_array().unwrap().len(), 4);
        assert!(v["top5"].as_array().unwrap().len() <= 5);
    }
    assert!(a.path().join("loc/overlays/test_00000.ppm").exists());

    ok(a.path(), &["plot", "--log", "s1.lgn.log.csv", "--out", "curve.svg"]);
    let svg = fs::read_to_string(a.path().join("curve.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<polyline").count(), 3);
}
