use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[data]
train_real = 8
train_fake = 8
test_real = 4
test_fake = 4
[train.stage0]
epochs = 1
[train.stage1]
epochs = 1
[train.stage2]
epochs = 1
[diffusion]
T = 5
";

fn forgeloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forgeloc")).args(args).output().expect("run forgeloc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn check_roundtrip_passes() {
    let o = forgeloc(&["check", "roundtrip"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().count() >= 3);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = forgeloc(&["synth", "--colour", "blue"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_reports_error() {
    let o = forgeloc(&["synth", "--config", "/nonexistent/cfg.toml", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn synth_is_byte_reproducible_and_gt_maps_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = forgeloc(&["--seed", "3", "synth", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 24);
    assert_eq!(ta, tb);

    let c = tmp.path().join("c");
    assert!(forgeloc(&["--seed", "4", "synth", "--config", s(&cfg), "--out", s(&c)]).status.success());
    assert_ne!(tree(&c), ta);

    let manifest = a.join("test_manifest.csv");
    let o = forgeloc(&["gt-maps", "--config", s(&cfg), "--data", s(&manifest), "--verify"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_detect_on_separable_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let scores = tmp.path().join("scores.csv");
    fs::write(&scores, "id,label,score\n0,real,0.1\n1,real,0.2\n2,fake,0.8\n3,fake,0.9\n").unwrap();
    let o = forgeloc(&["eval", "detect", "--scores", s(&scores)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("AUC 1.000000"), "{}", stdout(&o));

    fs::write(&scores, "id,label,score\n0,real,0.5\n1,fake,0.5\n").unwrap();
    assert!(stdout(&forgeloc(&["eval", "detect", "--scores", s(&scores)])).contains("AUC 0.500000"));

    fs::write(&scores, "id,label,score\n0,real,0.1\n1,real,0.2\n").unwrap();
    assert_eq!(forgeloc(&["eval", "detect", "--scores", s(&scores)]).status.code(), Some(1));
}

#[test]
fn staged_training_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    assert!(forgeloc(&["synth", "--config", s(&cfg), "--out", s(&data)]).status.success());
    let (train, test) = (data.join("train_manifest.csv"), data.join("test_manifest.csv"));
    let out = tmp.path().join("run");

    let o = forgeloc(&["train", "diffusion", "--config", s(&cfg), "--data", s(&train), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1), "diffusion stage needs a detector checkpoint");

    let run = |stage: &str, from: Option<&Path>| {
        let mut args = vec!["train", stage, "--config", s(&cfg), "--data", s(&train), "--out", s(&out)];
        if let Some(f) = from {
            args.extend(["--from", s(f)]);
        }
        let o = forgeloc(&args);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
        out.join(format!("{stage}.ckpt"))
    };
    let det = run("detector", None);
    let gen = run("diffusion", Some(&det));
    let full = run("fusion", Some(&gen));
    assert!(out.join("train_detector.csv").exists());
    assert!(out.join("timing_fusion.csv").exists());

    let maps = tmp.path().join("maps");
    let o = forgeloc(&["sample-maps", "--config", s(&cfg), "--data", s(&test), "--checkpoint", s(&gen), "--out", s(&maps)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let count = |ext: &str| fs::read_dir(&maps).unwrap().filter(|e| e.as_ref().unwrap().path().to_string_lossy().ends_with(ext)).count();
    assert_eq!(count("_map.dfft"), 8);
    assert_eq!(count("_map.pgm"), 8);

    let o = forgeloc(&["eval", "localize", "--config", s(&cfg), "--data", s(&test), "--maps", s(&maps)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ssim_mean"), "{}", stdout(&o));

    let scores = tmp.path().join("fused.csv");
    let o = forgeloc(&[
        "eval", "detect", "--scores", s(&scores), "--write", "--checkpoint", s(&full), "--data", s(&test), "--config", s(&cfg),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("AUC "));
}
