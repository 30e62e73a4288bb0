use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reco-lab"))
}

fn tiny_config(out: &Path) -> Value {
    json!({
        "seed": 3,
        "output_dir": out,
        "synth": { "height": 16, "width": 16, "num_classes": 4, "train_count": 8, "val_count": 3 },
        "partition": {
            "mode": "partial_dataset_full_labels",
            "min_images_per_class": 1,
            "min_distinct_classes": 2,
            "labelled_total": 3
        },
        "train": {
            "mode": "semi_supervised",
            "augmentation": "classmix",
            "loss": { "num_queries": 8, "num_keys": 16 },
            "embed_dim": 8,
            "optim": { "base_lr": 0.05, "total_iters": 20 },
            "checkpoint_every": 10
        }
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str], config: &Path) -> Output {
    let out = bin().args(args).arg("--config").arg(config).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn prepare(cfg: &Value, dir: &Path, name: &str) -> PathBuf {
    let path = write_config(dir, name, cfg);
    run(&["generate"], &path);
    run(&["partition"], &path);
    path
}

fn metric_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("iter"))
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn generate_is_byte_identical_and_creates_nested_dirs() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("deep/a");
    let b = tmp.path().join("deep/b");
    run(&["generate"], &write_config(tmp.path(), "a.json", &tiny_config(&a)));
    run(&["generate"], &write_config(tmp.path(), "b.json", &tiny_config(&b)));
    for rel in ["dataset/manifest.json", "dataset/train/train_00000.png", "dataset/val/val_00002_label.png"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn malformed_configs_exit_1_and_name_the_key() {
    let tmp = TempDir::new().unwrap();
    let cases = [
        (json!({ "synth": { "heigth": 16 } }), "synth.heigth"),
        (json!({ "train": { "loss": { "temperature": "hot" } } }), "train.loss.temperature"),
        (json!({ "train": { "ema_decay": 1.5 } }), "ema_decay"),
        (json!({ "partition": { "mode": "everything" } }), "partition"),
        (json!({ "bogus": true }), "bogus"),
    ];
    for (i, (cfg, key)) in cases.into_iter().enumerate() {
        let path = write_config(tmp.path(), &format!("bad{i}.json"), &cfg);
        let out = bin().arg("generate").arg("--config").arg(&path).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "case {i}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(key), "case {i}: `{err}` does not name {key}");
    }
    let out = bin()
        .args(["generate", "--config"])
        .arg(tmp.path().join("missing.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_without_dataset_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let path = write_config(tmp.path(), "c.json", &tiny_config(&tmp.path().join("none")));
    let out = bin().arg("train").arg("--config").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_replay_and_resume_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let ca = prepare(&tiny_config(&a), tmp.path(), "a.json");
    let cb = prepare(&tiny_config(&b), tmp.path(), "b.json");
    run(&["train", "--no-timestamp"], &ca);
    run(&["train", "--no-timestamp"], &cb);
    for rel in ["train/metrics.csv", "train/iter_000010.json", "train/final.json"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }

    let full_metrics = fs::read(a.join("train/metrics.csv")).unwrap();
    let full_final = fs::read(a.join("train/final.json")).unwrap();
    let ckpt = b.join("train/iter_000010.json");
    let out = bin()
        .args(["train", "--no-timestamp", "--config"])
        .arg(&cb)
        .arg("--resume")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(b.join("train/metrics.csv")).unwrap(), full_metrics);
    assert_eq!(fs::read(b.join("train/final.json")).unwrap(), full_final);

    // the timestamp line is the only difference when not suppressed
    run(&["train"], &ca);
    let stamped = fs::read_to_string(a.join("train/metrics.csv")).unwrap();
    let (first, rest) = stamped.split_once('\n').unwrap();
    assert!(first.starts_with("# started "));
    assert_eq!(rest.as_bytes(), &full_metrics[..]);
}

#[test]
fn supervised_log_is_finite_and_recomposes() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny_config(&tmp.path().join("s"));
    cfg["train"]["mode"] = json!("supervised");
    cfg["train"]["augmentation"] = json!("none");
    cfg["train"]["optim"]["total_iters"] = json!(100);
    let path = prepare(&cfg, tmp.path(), "s.json");
    run(&["train", "--no-timestamp"], &path);
    let rows = metric_rows(&tmp.path().join("s/train/metrics.csv"));
    assert_eq!(rows.len(), 100);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0] as usize, i);
        assert!(r.iter().all(|v| v.is_finite()));
        let (sup, unsup, eta, reco, total) = (r[2], r[3], r[4], r[5], r[6]);
        assert_eq!(unsup, 0.0);
        assert!((total - (sup + eta * unsup + reco)).abs() < 1e-12);
    }
}

#[test]
fn reco_switch_is_a_single_key() {
    let tmp = TempDir::new().unwrap();
    for (name, reco) in [("on", true), ("off", false)] {
        let mut cfg = tiny_config(&tmp.path().join(name));
        cfg["train"]["reco"] = json!(reco);
        let path = prepare(&cfg, tmp.path(), &format!("{name}.json"));
        run(&["train", "--no-timestamp"], &path);
        let rows = metric_rows(&tmp.path().join(name).join("train/metrics.csv"));
        assert_eq!(rows.len(), 20);
        let reco_sum: f64 = rows.iter().map(|r| r[5]).sum();
        assert_eq!(reco_sum > 0.0, reco);
    }
}

#[test]
fn eval_relate_exports_parse() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("e");
    let path = prepare(&tiny_config(&out_dir), tmp.path(), "e.json");
    run(&["train", "--no-timestamp"], &path);
    let out = run(&["eval", "--relate", "--split", "val"], &path);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mIoU"));
    let eval = out_dir.join("eval");

    let iou: Value = serde_json::from_str(&fs::read_to_string(eval.join("val_iou.json")).unwrap()).unwrap();
    assert_eq!(iou["per_class"].as_array().unwrap().len(), 4);
    assert!(fs::read_to_string(eval.join("val_iou.csv")).unwrap().starts_with("class,iou\n"));

    let csv = fs::read_to_string(eval.join("relation_graph.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').skip(1).collect()).collect();
    assert_eq!(rows.len(), 4);
    for i in 0..4 {
        assert_eq!(rows[i].len(), 4);
        assert_eq!(rows[i][i], "");
        for j in 0..4 {
            assert_eq!(rows[i][j], rows[j][i]);
            if !rows[i][j].is_empty() {
                rows[i][j].parse::<f64>().unwrap();
            }
        }
    }
    let dot = fs::read_to_string(eval.join("relation_graph.dot")).unwrap();
    assert!(dot.starts_with("graph relation {") && dot.trim_end().ends_with('}'));
    let nwk = fs::read_to_string(eval.join("dendrogram.nwk")).unwrap();
    let nwk = nwk.trim_end();
    assert!(nwk.ends_with(';'));
    assert_eq!(nwk.matches('(').count(), nwk.matches(')').count());
    let tree: Value = serde_json::from_str(&fs::read_to_string(eval.join("dendrogram.json")).unwrap()).unwrap();
    assert!(tree.get("merge").is_some());
}

#[test]
fn memorised_train_split_scores_high() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("m");
    let mut cfg = tiny_config(&out_dir);
    cfg["synth"]["train_count"] = json!(2);
    cfg["synth"]["val_count"] = json!(1);
    cfg["partition"] = json!({ "mode": "partial_labels_full_dataset", "label_budget": { "fraction": 1.0 } });
    cfg["train"] = json!({
        "mode": "supervised",
        "reco": false,
        "embed_dim": 8,
        "flip": false,
        "optim": { "base_lr": 0.05, "total_iters": 400 }
    });
    let path = prepare(&cfg, tmp.path(), "m.json");
    run(&["train", "--no-timestamp"], &path);
    run(&["eval", "--split", "train"], &path);
    let iou: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("eval/train_iou.json")).unwrap()).unwrap();
    let miou = iou["mean"].as_f64().unwrap();
    assert!(miou >= 0.95, "train mIoU {miou}");
}

#[test]
fn seed_and_out_flags_override_config() {
    let tmp = TempDir::new().unwrap();
    let path = write_config(tmp.path(), "c.json", &tiny_config(&tmp.path().join("ignored")));
    let out_a = tmp.path().join("x");
    let out_b = tmp.path().join("y");
    for (dir, seed) in [(&out_a, "1"), (&out_b, "2")] {
        let out = bin()
            .args(["generate", "--seed", seed, "--config"])
            .arg(&path)
            .arg("--out")
            .arg(dir)
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    assert!(!tmp.path().join("ignored").exists());
    let img = "dataset/train/train_00000.png";
    assert_ne!(fs::read(out_a.join(img)).unwrap(), fs::read(out_b.join(img)).unwrap());
}
