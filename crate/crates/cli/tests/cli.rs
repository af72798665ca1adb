use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempotrack_core::check::tiny_config;
use tempotrack_core::config::RunConfig;
use tempotrack_core::oracle;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tempotrack"))
}

fn ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "{cmd:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tree_digest(dir: &Path) -> String {
    let mut files: Vec<PathBuf> = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    hex::encode(h.finalize())
}

/// A config small enough that a few training steps take well under a second.
fn tiny_run_config(dir: &Path, lr: f64, pool: usize) -> PathBuf {
    let mut cfg = RunConfig {
        model: tiny_config(3),
        ..RunConfig::default()
    };
    cfg.train.steps = 6;
    cfg.train.clip_len = 2;
    cfg.train.clip_pool = pool;
    cfg.train.smooth_window = 2;
    cfg.train.lr = lr;
    let path = dir.join(format!("cfg_{lr}_{pool}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn gen_easy(dir: &Path, frames: usize) -> PathBuf {
    let out = dir.join("data");
    ok(bin()
        .args(["gen", "--preset", "easy", "--frames", &frames.to_string(), "--out"])
        .arg(&out));
    out
}

fn losses(csv: &Path) -> Vec<f64> {
    fs::read_to_string(csv)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let digest = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(bin()
            .args(["--seed", seed, "gen", "--preset", "occlusion", "--frames", "6", "--out"])
            .arg(&out));
        tree_digest(&out)
    };
    let a = digest("a", "7");
    assert_eq!(a, digest("b", "7"));
    assert_ne!(a, digest("c", "8"));
}

#[test]
fn gen_count_writes_numbered_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("many");
    ok(bin()
        .args(["gen", "--preset", "deform", "--frames", "3", "--count", "3", "--out"])
        .arg(&out));
    for i in 0..3 {
        assert!(out.join(format!("{i:03}")).join("anno.json").is_file());
    }
}

#[test]
fn malformed_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"width\": 64,").unwrap();
    let out = bin()
        .args(["gen", "--script"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin().arg("--config").arg(&bad).args(["check"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // parses, but the object leaves the frame
    let script = dir.path().join("script.json");
    fs::write(
        &script,
        r#"{"width": 32, "height": 32, "frames": 2, "seed": 1,
            "target": {"shape": "rect", "size": [8.0, 8.0], "color": [1.0, 0.0, 0.0],
                       "trajectory": [{"frame": 0, "x": -100.0, "y": 10.0}]}}"#,
    )
    .unwrap();
    let out = bin()
        .args(["gen", "--script"])
        .arg(&script)
        .arg("--out")
        .arg(dir.path().join("y"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_learning_rate_freezes_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_easy(dir.path(), 6);
    let run = |pool: usize| {
        let log = dir.path().join(format!("loss{pool}.csv"));
        ok(bin()
            .arg("--config")
            .arg(tiny_run_config(dir.path(), 0.0, pool))
            .args(["train-toy", "--data"])
            .arg(&data)
            .arg("--out")
            .arg(dir.path().join("w.bin"))
            .arg("--log")
            .arg(&log));
        losses(&log)
    };
    // a single clip: the whole curve is flat
    let l = run(1);
    assert_eq!(l.len(), 6);
    assert!(l.iter().all(|&v| v == l[0]), "{l:?}");
    // several clips cycled: every revisit repeats its first loss exactly
    let l = run(4);
    for &v in &l[4..] {
        assert!(l[..4].contains(&v), "{v} not among {:?}", &l[..4]);
    }
}

#[test]
fn training_is_reproducible_and_tracks_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_easy(dir.path(), 6);
    let cfg = tiny_run_config(dir.path(), 0.01, 4);
    let train = |tag: &str| {
        let log = dir.path().join(format!("{tag}.csv"));
        let w = dir.path().join(format!("{tag}.bin"));
        ok(bin()
            .arg("--config")
            .arg(&cfg)
            .args(["train-toy", "--data"])
            .arg(&data)
            .arg("--out")
            .arg(&w)
            .arg("--log")
            .arg(&log));
        (fs::read(&log).unwrap(), w)
    };
    let (csv_a, weights) = train("a");
    let (csv_b, _) = train("b");
    assert_eq!(csv_a, csv_b);

    let results = dir.path().join("track.jsonl");
    let dumps = dir.path().join("dumps");
    ok(bin()
        .arg("--config")
        .arg(&cfg)
        .arg("track")
        .arg("--weights")
        .arg(&weights)
        .arg("--seq")
        .arg(&data)
        .arg("--out")
        .arg(&results)
        .args(["--dump-attention", "--dump-masks", "--dump-dir"])
        .arg(&dumps));
    let lines = fs::read_to_string(&results).unwrap();
    assert_eq!(lines.lines().count(), 6);
    let pgms: Vec<_> = fs::read_dir(&dumps).unwrap().collect();
    assert!(!pgms.is_empty());

    let report = dir.path().join("report.json");
    let out = ok(bin()
        .args(["eval", "--results"])
        .arg(&results)
        .arg("--anno")
        .arg(&data)
        .arg("--out")
        .arg(&report));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let sr = summary["sr"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&sr));
    assert!(report.is_file());
}

#[test]
fn eval_scores_ground_truth_as_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_easy(dir.path(), 5);
    let anno: serde_json::Value = serde_json::from_slice(&fs::read(data.join("anno.json")).unwrap()).unwrap();
    let frames = anno["frames"].as_array().expect("frames array");
    let results = dir.path().join("gt.jsonl");
    let text: String = frames
        .iter()
        .enumerate()
        .map(|(i, f)| format!("{}\n", serde_json::json!({"frame": i, "box": f["bbox"], "score": 1.0})))
        .collect();
    fs::write(&results, text).unwrap();
    let out = ok(bin()
        .args(["eval", "--results"])
        .arg(&results)
        .arg("--anno")
        .arg(data.join("anno.json")));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // every threshold but the last (IoU > 1) is passed
    assert_eq!(summary["sr"].as_f64().unwrap(), oracle::success_rate(&[1.0; 5]));
    assert_eq!(summary["pr"].as_f64().unwrap(), 1.0);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
    }
}
