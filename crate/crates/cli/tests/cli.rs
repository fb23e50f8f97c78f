use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "n_classes = 10\nn_base = 6\nn_way = 2\nsamples_per_class = 40\n\
base_epochs = 5\ninc_epochs = 5\npcu_epochs = 10\nseeds = 0..2\n";

const CHEAP: &str = "dim = 8\nsamples_per_class = 20\nbase_epochs = 1\ninc_epochs = 1\n\
pcu_epochs = 1\npcu_samples = 8\nseeds = 0\n";

fn ldc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldc"))
        .args(args)
        .current_dir(dir)
        .env("LDC_DETERMINISTIC", "1")
        .output()
        .unwrap()
}

fn config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn records(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn run_writes_one_record_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "small.conf", SMALL);
    let out = ldc(&["run", "--config", cfg.to_str().unwrap(), "--out", "res"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let recs = records(&dir.path().join("res/results.jsonl"));
    assert_eq!(recs.len(), 6);
    for r in &recs {
        assert_eq!(r["accuracies"].as_array().unwrap().len(), 3);
        assert!(r.get("wall_ms").is_none());
    }
    let timings = std::fs::read_to_string(dir.path().join("res/results.timings.log")).unwrap();
    assert_eq!(timings.lines().count(), 6);
    let table = std::fs::read_to_string(dir.path().join("res/accuracy.csv")).unwrap();
    assert!(table.starts_with("method,session_0,session_1,session_2,pd,pr\n"));
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "bad.conf", "n_clases = 10\n");
    let out = ldc(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_clases"));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "cheap.conf", CHEAP);
    std::fs::write(dir.path().join("taken"), "a file").unwrap();
    let out = ldc(&["run", "--config", cfg.to_str().unwrap(), "--out", "taken"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seed_override_replaces_config_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "cheap.conf", CHEAP);
    let out = ldc(&["run", "--config", cfg.to_str().unwrap(), "--seeds", "4,7", "--out", "o"], dir.path());
    assert!(out.status.success());
    let seeds: Vec<u64> = records(&dir.path().join("o/results.jsonl")).iter().map(|r| r["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, vec![4, 7, 4, 7, 4, 7]);
}

#[test]
fn divergence_ablation_has_one_row_per_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "cheap.conf", CHEAP);
    let out = ldc(&["ablate", "divergence", "--config", cfg.to_str().unwrap(), "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("o/ablation_divergence.csv"));
    let kinds: Vec<&str> = rows.iter().map(|r| r[4].as_str()).collect();
    assert_eq!(kinds, ["kl", "js", "hellinger", "w2"]);
}

#[test]
fn memory_ablation_separates_fixed_from_growing_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "cheap.conf", &CHEAP.replace("dim = 8", "dim = 16"));
    let out = ldc(&["ablate", "memory", "--config", cfg.to_str().unwrap(), "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("o/ablation_memory.csv"));
    let bytes = |method: &str| -> Vec<(usize, usize)> {
        rows.iter()
            .filter(|r| r[1] == method)
            .map(|r| (r[5].parse().unwrap(), r[10].parse().unwrap()))
            .collect()
    };
    let ldc_bytes = bytes("ldc");
    assert_eq!(ldc_bytes.len(), 4);
    assert!(ldc_bytes.windows(2).all(|w| w[0].1 == w[1].1));
    // one mean and one d x d covariance per class, after a 16-byte header
    for (n, b) in bytes("empirical_calib") {
        assert_eq!(b, 16 + n * (16 + 256) * 8);
    }
    assert!(bytes("prototype_only").iter().all(|&(_, b)| b == 0));
}

#[test]
fn project_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "cheap.conf", CHEAP);
    let run = |out: &str| {
        let o = ldc(&["project", "--config", cfg.to_str().unwrap(), "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(dir.path().join(out).join("projection.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert!(a.starts_with("set,class,pc1,pc2\n"));
    for set in ["real", "biased", "calibrated"] {
        assert!(a.lines().any(|l| l.starts_with(&format!("{set},"))), "missing {set}");
    }
}

fn write_embeddings(path: &Path, classes: usize, per_class: usize, dim: usize) {
    let mut text = String::from("label");
    for j in 0..dim {
        let _ = write!(text, ",f{j}");
    }
    text.push('\n');
    for c in 0..classes {
        for i in 0..per_class {
            let _ = write!(text, "{c}");
            for j in 0..dim {
                let centre = if j == c % dim { 4.0 } else { 0.0 } + c as f64 * 0.1;
                let wobble = ((i * 7 + j * 3 + c) % 11) as f64 / 11.0 - 0.5;
                let _ = write!(text, ",{}", centre + wobble);
            }
            text.push('\n');
        }
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn project_reads_embedding_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("alpha.csv");
    let b = dir.path().join("beta.csv");
    write_embeddings(&a, 3, 5, 4);
    write_embeddings(&b, 2, 6, 4);
    let out = ldc(&["project", "--input", "alpha.csv", "--input", "beta.csv", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("o/projection.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("alpha,")).count(), 15);
    assert_eq!(csv.lines().filter(|l| l.starts_with("beta,")).count(), 12);
}

#[test]
fn run_from_embedding_file() {
    let dir = tempfile::tempdir().unwrap();
    write_embeddings(&dir.path().join("emb.csv"), 10, 20, 8);
    let cfg = config(
        dir.path(),
        "file.conf",
        "embeddings = emb.csv\nn_base = 6\nn_way = 2\nk_shot = 3\nbase_epochs = 2\ninc_epochs = 2\npcu_epochs = 2\nseeds = 0\n",
    );
    let out = ldc(&["run", "--config", cfg.to_str().unwrap(), "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(records(&dir.path().join("o/results.jsonl")).len(), 3);

    let cfg = config(dir.path(), "big.conf", "embeddings = emb.csv\nn_base = 8\nn_way = 4\n");
    let out = ldc(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ldc(&["gradcheck"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!out.stdout.is_empty());
}
