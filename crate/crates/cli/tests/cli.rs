use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "[data]\nper_class = 30\n[train]\nbatch_size = 16\nepochs = 6\nsnapshot_epochs = [0, 2, 5]\n";

fn icone(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icone"))
        .args(args)
        .env("ICONE_OUTPUT_ROOT", root)
        .current_dir(root)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_is_deterministic() {
    let dir = setup();
    let root = dir.path();
    ok(&icone(root, &["generate", "--config", "tiny.toml", "--out", "a"]));
    ok(&icone(root, &["generate", "--config", "tiny.toml", "--out", "b"]));
    let a = fs::read(root.join("a/dataset.csv")).unwrap();
    let b = fs::read(root.join("b/dataset.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("instance_id,label,split,x0,x1\n"));
    assert_eq!(text.lines().count(), 1 + 5 * 30);
    ok(&icone(root, &["generate", "--config", "tiny.toml", "--seed", "3", "--out", "c"]));
    assert_ne!(fs::read(root.join("c/dataset.csv")).unwrap(), b);
}

#[test]
fn minority_factor_shrinks_last_classes() {
    let dir = setup();
    let root = dir.path();
    ok(&icone(root, &["generate", "--config", "tiny.toml", "--data.minority_factor", "3", "--out", "m"]));
    let text = fs::read_to_string(root.join("m/dataset.csv")).unwrap();
    let mut counts = [0usize; 5];
    for line in text.lines().skip(1) {
        counts[line.split(',').nth(1).unwrap().parse::<usize>().unwrap()] += 1;
    }
    assert_eq!(counts, [30, 30, 10, 10, 10]);
}

#[test]
fn train_writes_run_directory() {
    let dir = setup();
    let root = dir.path();
    let out = icone(root, &["train", "--config", "tiny.toml", "--out", "run"]);
    ok(&out);
    let run = root.join("run");
    for f in ["config.toml", "dataset.csv", "loss_curves.csv", "params.csv", "metrics.json", "metrics.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    for field in ["knn5_acc", "linear_acc", "silhouette", "l_align", "l_uniform", "eff_rank", "rankme", "lidar"] {
        assert!(json[field].as_f64().unwrap().is_finite(), "{field}");
    }
    let curves = fs::read_to_string(run.join("loss_curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,l_vv,l_vi,l_div,total\n"));
    assert_eq!(curves.lines().count(), 1 + 6);
    for e in ["000", "002", "005"] {
        let snap = fs::read_to_string(run.join(format!("snapshots/epoch_{e}.csv"))).unwrap();
        assert!(snap.starts_with("instance_id,label,z0,z1\n"));
        assert!(run.join(format!("snapshots/epoch_{e}_params.csv")).exists());
    }
    let params = fs::read_to_string(run.join("params.csv")).unwrap();
    assert!(params.starts_with("name,index,value\n"));
}

#[test]
fn class_variant_has_one_anchor_per_class() {
    let dir = setup();
    let root = dir.path();
    ok(&icone(root, &["train", "--config", "tiny.toml", "--variant", "icone_class", "--out", "cls"]));
    let params = fs::read_to_string(root.join("cls/params.csv")).unwrap();
    let table_values = params.lines().filter(|l| l.starts_with("table,")).count();
    assert_eq!(table_values, 5 * 2);
}

#[test]
fn eval_rescores_snapshot() {
    let dir = setup();
    let root = dir.path();
    ok(&icone(root, &["train", "--config", "tiny.toml", "--out", "run"]));
    ok(&icone(root, &["eval", "--run", "run", "--epoch", "5"]));
    let a: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("run/metrics.json")).unwrap()).unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("run/eval_epoch_005.json")).unwrap()).unwrap();
    // the last snapshot holds the final model
    assert!((a["knn5_acc"].as_f64().unwrap() - b["knn5_acc"].as_f64().unwrap()).abs() < 1e-9);
    assert_eq!(icone(root, &["eval", "--run", "run", "--epoch", "4"]).status.code(), Some(4));
}

#[test]
fn exit_codes() {
    let dir = setup();
    let root = dir.path();
    assert_eq!(icone(root, &["train", "--config", "tiny.toml", "--train.bogus", "1"]).status.code(), Some(2));
    assert_eq!(icone(root, &["train", "--config", "tiny.toml", "--batch-size", "0"]).status.code(), Some(2));
    assert_eq!(icone(root, &["train", "--config", "missing.toml"]).status.code(), Some(4));
    assert_eq!(icone(root, &["train", "--config", "tiny.toml", "--lr", "1e300"]).status.code(), Some(3));
}

#[test]
fn plot_emits_svgs() {
    let dir = setup();
    let root = dir.path();
    ok(&icone(root, &["train", "--config", "tiny.toml", "--out", "run"]));
    ok(&icone(root, &["plot", "--run", "run"]));
    let mut svgs: Vec<String> =
        fs::read_dir(root.join("run/plots")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    svgs.sort();
    assert_eq!(
        svgs,
        [
            "accuracy.svg",
            "align_uniform.svg",
            "loss_curves.svg",
            "snapshot_epoch_000.svg",
            "snapshot_epoch_002.svg",
            "snapshot_epoch_005.svg"
        ]
    );
    let svg = fs::read_to_string(root.join("run/plots/snapshot_epoch_005.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 150);
}

#[test]
fn plot_without_run_fails() {
    let dir = setup();
    let root = dir.path();
    fs::create_dir(root.join("empty")).unwrap();
    assert!(!icone(root, &["plot", "--run", "empty"]).status.success());
}

#[test]
fn ablate_tabulates_variants() {
    let dir = setup();
    let root = dir.path();
    ok(&icone(
        root,
        &[
            "ablate",
            "--config",
            "tiny.toml",
            "--seeds",
            "0,1",
            "--epochs",
            "3",
            "--train.snapshot_epochs",
            "0,2",
            "--out",
            "ab",
        ],
    ));
    let md = fs::read_to_string(root.join("ab/ablation.md")).unwrap();
    for label in ["Full IConE", "No L_div", "No L_vi", "No L_vv"] {
        assert!(md.contains(label));
    }
    assert!(md.contains("(2 seeds)"));
    let csv = fs::read_to_string(root.join("ab/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 2);
    assert!(root.join("ab/no_vi/seed_1/metrics.json").exists());
}
