use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn egolane(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egolane"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("failed to spawn egolane")
}

fn ok(args: &[&str]) -> String {
    let out = egolane(args);
    assert!(
        out.status.success(),
        "egolane {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            files.extend(read_tree(&path));
        } else {
            files.push((
                path.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(&path).unwrap(),
            ));
        }
    }
    files.sort();
    files
}

const TINY: &str = r#"
seed = 1
batch_size = 8
base_lr = 1e-3
warmup_steps = 2
max_steps = 6
eval_every = 3
chunk_size = 4
input_width = 48
input_height = 32
channels = [4, 8]
strides = [2, 2]
heads = 2
head_dim = 4
ffn_hidden = 8
"#;

#[test]
fn gen_is_byte_identical_for_equal_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["gen", "--out", p(&a), "--count", "4", "--size", "48x32", "--seed", "3"]);
    ok(&["gen", "--out", p(&b), "--count", "4", "--size", "48x32", "--seed", "3"]);
    ok(&["gen", "--out", p(&c), "--count", "4", "--size", "48x32", "--seed", "4"]);
    assert_eq!(read_tree(&a), read_tree(&b));
    assert_ne!(read_tree(&a), read_tree(&c));
}

#[test]
fn gen_reads_a_ranges_file() {
    let dir = tempfile::tempdir().unwrap();
    let ranges = dir.path().join("ranges.toml");
    fs::write(&ranges, "n_left = [2, 2]\nn_right = [0, 0]\n").unwrap();
    let out = dir.path().join("d");
    let summary = ok(&[
        "gen",
        "--out",
        p(&out),
        "--count",
        "3",
        "--size",
        "24x16",
        "--ranges",
        p(&ranges),
    ]);
    let v: serde_json::Value = serde_json::from_str(summary.trim()).unwrap();
    assert_eq!(v["histogram"][2][0], 3);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(egolane(&["gen", "--count", "3"]).status.code(), Some(2));
    assert_eq!(
        egolane(&["gen", "--out", "x", "--count", "3", "--size", "3by2"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(egolane(&["eval", "--ablate", "bogus"]).status.code(), Some(2));
    assert_eq!(egolane(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn stage_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = egolane(&[
        "train",
        "--data",
        p(&dir.path().join("missing")),
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: train:"), "{err}");
    assert!(err.contains("manifest"), "{err}");

    let out = egolane(&["infer", "--image", p(&dir.path().join("none.png")), "--ckpt", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: infer:"));
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let cfg = root.join("tiny.toml");
    let ckpt = root.join("model.ckpt");
    fs::write(&cfg, TINY).unwrap();
    ok(&["gen", "--out", p(&data), "--count", "20", "--size", "48x32"]);

    let summary = ok(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ckpt)]);
    let v: serde_json::Value = serde_json::from_str(summary.trim()).unwrap();
    assert_eq!(v["steps"], 6);
    let log = fs::read_to_string(ckpt.with_extension("log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"step\"")).count(), 6);
    assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"eval\"")).count(), 2);

    let image = data.join("images/000000.png");
    let line = ok(&["infer", "--image", p(&image), "--ckpt", p(&ckpt)]);
    let re = regex_lite(&line);
    assert!(re, "unexpected infer output {line:?}");

    let eval_dir = root.join("eval");
    let summary = ok(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--out", p(&eval_dir)]);
    assert!(summary.contains("\"variant\":\"full\""));
    for f in ["f1.jsonl", "f1_table.md", "up_curve.jsonl", "up_curve.svg"] {
        assert!(eval_dir.join(f).is_file(), "missing {f}");
    }
    let mismatch = egolane(&[
        "eval",
        "--data",
        p(&data),
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&eval_dir),
        "--ablate",
        "vpl,attention",
    ]);
    assert_eq!(mismatch.status.code(), Some(1));

    let occ = root.join("occ");
    let out = ok(&[
        "sweep-occlusion",
        "--data",
        p(&data),
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&occ),
        "--ratios",
        "0,0.5,1",
    ]);
    assert_eq!(out.lines().count(), 3);
    assert!(occ.join("occlusion.svg").is_file());

    let trace = root.join("trace");
    let out = ok(&[
        "trace-lane-change",
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&trace),
        "--frames",
        "5",
    ]);
    assert_eq!(out.lines().count(), 5);
    assert!(trace.join("lane_change.svg").is_file());

    let att = root.join("att");
    let out = ok(&[
        "export-attention",
        "--image",
        p(&image),
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&att),
    ]);
    assert_eq!(out.lines().count(), 3);
    assert!(att.join("000000_mean.png").is_file());
}

#[test]
fn ablated_training_is_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let cfg = root.join("tiny.toml");
    let ckpt = root.join("base.ckpt");
    fs::write(&cfg, TINY.replace("max_steps = 6", "max_steps = 3")).unwrap();
    ok(&["gen", "--out", p(&data), "--count", "12", "--size", "48x32"]);
    ok(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&ckpt),
        "--ablate",
        "vpl,attention",
    ]);
    let summary = ok(&[
        "eval",
        "--data",
        p(&data),
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&root.join("e")),
        "--ablate",
        "vpl,attention",
    ]);
    assert!(summary.contains("\"variant\":\"baseline\""), "{summary}");
}

/// Matches `head=(left|right) lane=<int> u_left=<real> u_right=<real>`.
fn regex_lite(line: &str) -> bool {
    let fields: Vec<&str> = line.trim_end().split(' ').collect();
    if fields.len() != 4 {
        return false;
    }
    let kv: Vec<(&str, &str)> = fields.iter().filter_map(|f| f.split_once('=')).collect();
    kv.len() == 4
        && kv[0].0 == "head"
        && matches!(kv[0].1, "left" | "right")
        && kv[1].0 == "lane"
        && kv[1].1.parse::<usize>().is_ok()
        && kv[2].0 == "u_left"
        && kv[2].1.parse::<f64>().is_ok_and(|u| (0.0..=1.0).contains(&u))
        && kv[3].0 == "u_right"
        && kv[3].1.parse::<f64>().is_ok_and(|u| (0.0..=1.0).contains(&u))
}
