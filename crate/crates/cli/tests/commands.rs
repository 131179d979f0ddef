use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.conf");

fn ovd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovd")).args(args).output().expect("run ovd")
}

fn ok(args: &[&str]) -> String {
    let o = ovd(args);
    assert!(o.status.success(), "ovd {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p).unwrap().lines().map(String::from).collect()
}

/// Small desk dataset: `train` scenes, 4 eval scenes.
fn dataset(root: &Path, train: usize) -> PathBuf {
    let d = root.join("data");
    ok(&["--config", DESK, "generate", "--out", s(&d), "--scenes", &train.to_string(), "--eval-scenes", "4"]);
    d
}

#[test]
fn generate_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let args = |o: &Path| {
        ok(&["generate", "--out", s(o), "--scenes", "100", "--eval-scenes", "5", "--seed", "7", "--set", "data.width=96", "--set", "data.height=96"])
    };
    let a = args(&t.path().join("a"));
    let b = args(&t.path().join("b"));
    assert_eq!(a, b);
    for f in ["train/images/train_000042.png", "eval/annotations.json", "manifest.txt"] {
        assert_eq!(std::fs::read(t.path().join("a").join(f)).unwrap(), std::fs::read(t.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn novel_class_absent_from_train() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["generate", "--out", s(&d), "--scenes", "60", "--eval-scenes", "5", "--novel", "red triangle", "--set", "data.width=96", "--set", "data.height=96"]);
    let train = ovd_cli::coco::load_annotations(&d.join("train/annotations.json")).unwrap();
    let n = train.records.iter().flat_map(|r| &r.objects).filter(|o| o.class_name == "red triangle").count();
    assert_eq!(n, 0);
    assert_eq!(std::fs::read_to_string(d.join("novel.txt")).unwrap(), "red triangle\n");
}

#[test]
fn zero_scenes_is_a_valid_dataset() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["generate", "--out", s(&d), "--scenes", "0", "--eval-scenes", "0"]);
    let m = manifest(&d.join("manifest.txt"));
    assert_eq!(m[0], "status=complete");
    assert!(m.contains(&"train.scenes=0".to_string()));
    assert!(ovd_cli::coco::load_annotations(&d.join("train/annotations.json")).unwrap().records.is_empty());
}

#[test]
fn one_step_smoke_and_gate_ablation_wiring() {
    let t = tempfile::tempdir().unwrap();
    let d = dataset(t.path(), 1);
    let a = t.path().join("a");
    let b = t.path().join("b");
    ok(&["--config", DESK, "train", "--data", s(&d), "--out", s(&a), "--steps", "1"]);
    ok(&["--config", DESK, "train", "--data", s(&d), "--out", s(&b), "--steps", "1", "--disable-gate"]);
    let curve = std::fs::read_to_string(a.join("loss_curve.csv")).unwrap();
    let row: Vec<f64> = curve.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!(row.iter().all(|x| x.is_finite()));
    let (ma, mb) = (manifest(&a.join("manifest.txt")), manifest(&b.join("manifest.txt")));
    let diff: Vec<_> = ma.iter().zip(&mb).filter(|(x, y)| x != y).map(|(x, _)| x.split('=').next().unwrap()).collect();
    // Identical parameter count; only the gate flag, the hash and the trained
    // weights differ.
    for key in &diff {
        assert!(
            ["config_hash", "config.ablation.gate", "config.data.dir", "loss.epoch0", "loss.final", "checkpoint_sha256"].contains(key),
            "unexpected manifest difference in {key}"
        );
    }
    assert!(diff.contains(&"config.ablation.gate"));
    assert!(ma.iter().any(|l| l.starts_with("model.parameters=")));
    assert_eq!(
        ma.iter().find(|l| l.starts_with("model.parameters=")),
        mb.iter().find(|l| l.starts_with("model.parameters="))
    );
}

#[test]
fn crashed_run_leaves_manifest_incomplete() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("run");
    let o = ovd(&["train", "--data", s(&t.path().join("missing")), "--out", s(&out), "--steps", "1"]);
    assert!(!o.status.success());
    let m = manifest(&out.join("manifest.txt"));
    assert_eq!(m[0], "status=incomplete");
    assert!(m.iter().any(|l| l.starts_with("error=")));
}

#[test]
fn overfit_eval_zsd_rerun_and_infer() {
    let t = tempfile::tempdir().unwrap();
    let d = dataset(t.path(), 2);
    let run = t.path().join("run");
    ok(&["--config", DESK, "--deterministic", "train", "--data", s(&d), "--out", s(&run), "--steps", "300", "--log-every", "0"]);
    let ck = run.join("model.ckpt");

    let ev = t.path().join("ev");
    let rep = ok(&["--config", DESK, "eval", "--data", s(&d), "--checkpoint", s(&ck), "--out", s(&ev), "--split", "train", "--protocol", "closed"]);
    let ap: f64 = rep.lines().find_map(|l| l.strip_prefix("overall.all.ap50=")).unwrap().parse().unwrap();
    assert!(ap >= 0.95, "overfit AP50 {ap}");

    let z1 = t.path().join("z1");
    let z2 = t.path().join("z2");
    for z in [&z1, &z2] {
        ok(&["--config", DESK, "eval", "--data", s(&d), "--checkpoint", s(&ck), "--out", s(z), "--protocol", "zsd"]);
    }
    let report = std::fs::read_to_string(z1.join("report.txt")).unwrap();
    let classes: Vec<&str> = report
        .lines()
        .filter(|l| !l.starts_with("overall.") && !l.starts_with("novel.all") && !l.starts_with("protocol"))
        .collect();
    assert!(!classes.is_empty());
    assert!(classes.iter().all(|l| l.starts_with("novel.")), "{classes:?}");
    for f in ["report.txt", "summary.json", "per_class.csv"] {
        assert_eq!(std::fs::read(z1.join(f)).unwrap(), std::fs::read(z2.join(f)).unwrap(), "{f}");
    }

    let img = d.join("eval/images/eval_000000.png");
    let a = ok(&["infer", "--checkpoint", s(&ck), "--image", s(&img), "--classes", "red ring,cyan square"]);
    let b = ok(&["infer", "--checkpoint", s(&ck), "--image", s(&img), "--classes", "red ring,cyan square"]);
    assert_eq!(a, b);
    let scores: Vec<f64> = a.lines().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(scores.iter().all(|&x| x >= 0.5));

    let missing = ovd(&["infer", "--checkpoint", s(&ck), "--image", s(&t.path().join("nope.png")), "--classes", "x"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.png"));

    let vocab = t.path().join("v.txt");
    std::fs::write(&vocab, "red square\nblue square\n").unwrap();
    let bad = ovd(&["--config", DESK, "eval", "--data", s(&d), "--checkpoint", s(&ck), "--out", s(&t.path().join("bad")), "--vocab", s(&vocab), "--protocol", "closed"]);
    assert!(!bad.status.success());
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("vocabulary mismatch"), "{err}");
}

#[test]
fn tile_command_writes_tiles() {
    let t = tempfile::tempdir().unwrap();
    let d = dataset(t.path(), 3);
    let out = t.path().join("tiled");
    let msg = ok(&["tile", "--data", s(&d), "--split", "train", "--out", s(&out), "--tile", "40", "--stride", "24"]);
    assert_eq!(msg.trim(), "12 tiles");
    let l = ovd_cli::coco::load_annotations(&out.join("tiles/annotations.json")).unwrap();
    assert!(l.records.iter().all(|r| (r.width, r.height) == (40, 40)));
}

#[test]
fn unknown_config_key_is_an_error() {
    let o = ovd(&["--set", "model.width=3", "gradcheck", "--instances", "1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.width"));
}
