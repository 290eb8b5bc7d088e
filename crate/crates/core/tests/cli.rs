use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn plab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plab")).args(args).output().expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn aat_of(column: &str) -> f64 {
    let csv = fixture("grid_accuracy.csv");
    let o = plab(&["aat", "--csv", csv.to_str().unwrap(), "--column", column]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    stdout(&o).split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn aat_recomputes_every_printed_table_value() {
    let table = std::fs::read_to_string(fixture("grid_aat.csv")).unwrap();
    let mut checked = 0;
    for line in table.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let (column, printed, consistent) = (cells[0], cells[1].parse::<f64>().unwrap(), cells[2] == "true");
        let got = aat_of(column);
        if consistent {
            assert!((got - printed).abs() <= 5e-5, "{column}: {got} vs {printed}");
            checked += 1;
        } else {
            assert!((got - printed).abs() > 5e-5, "{column} is flagged inconsistent but matches");
        }
    }
    assert_eq!(checked, 26);
}

#[test]
fn aat_headline_columns() {
    assert!((aat_of("t2_baseline") - 0.5721).abs() <= 5e-5);
    assert!((aat_of("t1_a1e-3w20b0.9rms2trac") - 0.6396).abs() <= 5e-5);
    assert!((aat_of("t4_a1e-3w20b0.9rms") - 0.6041).abs() <= 5e-5);
}

#[test]
fn aat_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("acc.csv");
    std::fs::write(&p, "task,accuracy\n1,0.5\n2,1.5\n").unwrap();
    let o = plab(&["aat", "--csv", p.to_str().unwrap()]);
    assert!(!o.status.success());
    std::fs::write(&p, "task,accuracy\n1,0.5\n2,0.25\n").unwrap();
    let o = plab(&["aat", "--csv", p.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "accuracy\t0.3750");
    let o = plab(&["aat", "--csv", p.to_str().unwrap(), "--column", "missing"]);
    assert!(!o.status.success());
}

#[test]
fn verify_exits_zero() {
    let o = plab(&["verify"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("[PASS]")).count(), 5);
}

const TINY: &str = r#"{
  "name": "tiny",
  "model": {"kind": "vit", "image_side": 8, "patch_side": 4, "embed_dim": 8, "heads": 2,
            "blocks": 2, "ffn_hidden": 16, "tasks": 2, "classes_per_task": 2},
  "stream": {"generator": "synthetic_clusters", "total_classes": 4, "tasks": 2,
             "classes_per_task": 2, "train_per_class": 8, "eval_per_class": 16, "image_side": 8},
  "optimizer": OPT,
  "epochs_per_task": 1,
  "batch_size": 8,
  "seeds": [0, 1],
  "probe_size": 32
}"#;

fn write_config(dir: &Path, name: &str, opt: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, TINY.replace("OPT", opt)).unwrap();
    p
}

#[test]
fn run_compare_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sgd = write_config(d, "sgd.json", r#"{"kind": "sgd", "eta": 0.05}"#);
    let arrow = write_config(
        d,
        "arrow.json",
        r#"{"kind": "arrow", "alpha": 0.001, "beta": 0.9, "window": 2, "eta": 0.001, "warmup": "rms_like"}"#,
    );
    for (cfg, out) in [(&sgd, "run_sgd"), (&arrow, "run_arrow")] {
        let o = plab(&["run", "--config", cfg.to_str().unwrap(), "--out", d.join(out).to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["record.json", "seed0/metrics.csv", "seed0/report.json", "seed1/series_task_accuracy.csv"] {
        assert!(d.join("run_sgd").join(f).exists(), "missing {f}");
    }
    let header = std::fs::read_to_string(d.join("run_sgd/seed0/metrics.csv")).unwrap();
    assert!(header.starts_with("task,step,scope,component,metric,value\n"));

    let single = plab(&[
        "run",
        "--config",
        sgd.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        d.join("single").to_str().unwrap(),
    ]);
    assert!(single.status.success());
    assert!(d.join("single/seed7/report.json").exists() && !d.join("single/seed0").exists());

    let summary = d.join("summary.csv");
    let o = plab(&[
        "compare",
        "--in",
        d.join("run_sgd").to_str().unwrap(),
        d.join("run_arrow").to_str().unwrap(),
        "--out",
        summary.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&summary).unwrap();
    let aats: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(aats.len(), 2);
    assert!(aats[0] >= aats[1]);

    let grid = d.join("grid.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&arrow).unwrap()).unwrap();
    v["seeds"] = serde_json::json!([0]);
    v["grid"] = serde_json::json!({"alpha": [0.001, 0.01], "warmup": ["rms_like", "sgd"]});
    std::fs::write(&grid, v.to_string()).unwrap();
    let o = plab(&["grid", "--config", grid.to_str().unwrap(), "--out", d.join("grid").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["a1e-3w2b0.9rms", "a1e-3w2b0.9", "a1e-2w2b0.9rms", "a1e-2w2b0.9"] {
        assert!(d.join("grid").join(name).join("record.json").exists(), "{name}");
    }
    assert_eq!(std::fs::read_to_string(d.join("grid/summary.csv")).unwrap().lines().count(), 5);
}

#[test]
fn config_errors_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let text = TINY.replace("OPT", r#"{"kind": "sgd", "eta": 0.05}"#).replace("\"seeds\"", "\"extra\": 1, \"seeds\"");
    std::fs::write(&bad, text).unwrap();
    let o = plab(&["run", "--config", bad.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("extra"));
}
