//! End-to-end runs of the `jackpot` binary on small synthetic data.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jackpot::checkpoint::load_masks;
use jackpot::report::read_runs_csv;

const BASE: &str = r#"
[run]
arch = "mlp:16"
seed = 7

[data]
name = "synth"
synth_classes = 4
synth_dim = 12
synth_per_class = 60
synth_test_per_class = 25

[pretrain]
epochs = 3
batch_size = 32

[score]
criterion = "magnitude"
sparsity = 0.7

[search]
sparsity = 0.7
epochs = 2
warmup = "magnitude"

[search.optimizer]
batch_size = 32

[finetune]
sparsity = 0.7

[finetune.optimizer]
epochs = 2
batch_size = 32
"#;

fn jackpot(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_jackpot"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .env_remove("JACKPOT_DATA_DIR")
        .output()
        .unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    o
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn zero_epoch_search_keeps_the_warm_start_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = format!("{BASE}\n").replace("epochs = 2\nwarmup", "epochs = 0\nwarmup");
    ok(jackpot(tmp.path(), &cfg, &["pretrain"]));
    ok(jackpot(tmp.path(), &cfg, &["score"]));
    ok(jackpot(tmp.path(), &cfg, &["search"]));
    let out = tmp.path().join("out");
    let (names_a, scored) = load_masks(out.join("score-magnitude-p0.7.masks")).unwrap();
    let (names_b, searched) = load_masks(out.join("search-p0.7.masks")).unwrap();
    assert_eq!(names_a, names_b);
    assert_eq!(scored, searched);
    let runs = read_runs_csv(out.join("search_runs.csv")).unwrap();
    assert_eq!(runs[0].criterion, "jackpot");
    assert_eq!(runs[0].overlap_vs_init, Some(1.0));
    assert_eq!(runs[0].overlap_vs_magnitude, Some(1.0));
}

#[test]
fn identical_reruns_write_identical_bytes() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        for cmd in ["pretrain", "search", "finetune"] {
            ok(jackpot(d.path(), BASE, &[cmd]));
        }
    }
    let (a, b) = (files(&dirs[0].path().join("out")), files(&dirs[1].path().join("out")));
    let names = |v: &[PathBuf]| v.iter().map(|p| p.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    assert_eq!(names(&a), names(&b));
    assert!(a.len() >= 10, "{a:?}");
    for (x, y) in a.iter().zip(&b) {
        assert!(std::fs::read(x).unwrap() == std::fs::read(y).unwrap(), "{} differs", x.display());
    }
    // the manifest pins every other artifact
    let manifest = std::fs::read_to_string(dirs[0].path().join("out/search-manifest.json")).unwrap();
    assert!(manifest.contains("search-p0.7.masks") && manifest.contains("\"seed\": 7"), "{manifest}");
}

#[test]
fn sweep_writes_one_mask_and_row_per_sparsity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = format!("{BASE}\n[sweep]\nsparsities = [0.5, 0.8, 0.9]\n");
    ok(jackpot(tmp.path(), &cfg, &["pretrain"]));
    ok(jackpot(tmp.path(), &cfg, &["search"]));
    let out = tmp.path().join("out");
    let runs = read_runs_csv(out.join("search_runs.csv")).unwrap();
    assert_eq!(runs.iter().map(|r| r.sparsity).collect::<Vec<_>>(), vec![0.5, 0.8, 0.9]);
    for p in ["0.5", "0.8", "0.9"] {
        let (_, masks) = load_masks(out.join(format!("search-p{p}.masks"))).unwrap();
        let want: f64 = p.parse().unwrap();
        for m in &masks {
            assert_eq!(m.pruned_count(), (want * m.len() as f64 + 1e-9).floor() as usize);
        }
    }
    // wall_clock_s stays empty without timing
    assert!(runs.iter().all(|r| r.wall_clock_s.is_none()));
}

#[test]
fn experiment_suite_writes_its_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = format!("{BASE}\n[experiment]\nseeds = [0, 1]\nsparsities = [0.5]\n\n[experiment.search]\nepochs = 2\n");
    ok(jackpot(tmp.path(), &cfg, &["pretrain"]));
    let o = ok(jackpot(tmp.path(), &cfg, &["--threads", "2", "experiment", "existence"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("jackpot@0.5000"));
    let out = tmp.path().join("out");
    let runs = read_runs_csv(out.join("existence_runs.csv")).unwrap();
    // a dense row per seed, then magnitude, jackpot and random_init per cell
    assert_eq!(runs.len(), 2 + 2 * 3);
    for f in ["existence_trajectory.csv", "existence_aggregate.csv", "existence.json", "experiment-existence-manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    ok(jackpot(tmp.path(), &cfg, &["report", out.join("existence_runs.csv").to_str().unwrap(), "--group", "criterion"]));
    assert!(out.join("report_aggregate.csv").exists());
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = jackpot(tmp.path(), BASE, &["experiment", "lottery"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lottery"));
}

#[test]
fn unknown_config_key_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let o = jackpot(tmp.path(), &BASE.replace("batch_size = 32\n\n[score]", "batch_sise = 32\n\n[score]"), &["pretrain"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("batch_sise") && err.contains("line"), "{err}");
}

#[test]
fn derived_seed_cannot_be_set_per_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let o = jackpot(tmp.path(), &BASE.replace("warmup = \"magnitude\"", "warmup = \"magnitude\"\nseed = 3"), &["search"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_file_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = jackpot(tmp.path(), BASE, &["search"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("model.ckpt"), "{}", stderr(&o));
}

#[test]
fn mnist_without_a_data_directory_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = jackpot(tmp.path(), "[data]\nname = \"mnist\"\n", &["pretrain"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("JACKPOT_DATA_DIR"));
}

#[test]
fn corrupt_mask_file_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    ok(jackpot(tmp.path(), BASE, &["pretrain"]));
    std::fs::write(tmp.path().join("out/search-p0.7.masks"), b"not a checkpoint").unwrap();
    let o = jackpot(tmp.path(), BASE, &["finetune"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
