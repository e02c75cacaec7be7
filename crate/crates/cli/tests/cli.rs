use std::path::Path;
use std::process::{Command, Output};

use hybridlab::harness::eval::NiahGrid;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridlab")).args(args).current_dir(dir).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let o = run(args, dir);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

fn block_kinds(layout: &str) -> Vec<String> {
    layout.lines().filter_map(|l| l.strip_prefix("block ")).map(str::to_string).collect()
}

/// Data rows of a versioned CSV, header row excluded.
fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn plan_scatter_has_no_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["plan", "--depth", "13", "--ratio", "1:5", "--kind", "attn", "--pos", "scatter"], dir.path());
    let kinds = block_kinds(&stdout(&o));
    let attn: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i] == "attn").collect();
    assert_eq!(attn, [3, 8]);
    assert_eq!(kinds.len(), 13);
    assert!(!stderr(&o).contains("warning"), "{}", stderr(&o));
}

#[test]
fn plan_front_warns_but_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["plan", "--depth", "13", "--ratio", "1:5", "--pos", "front"], dir.path());
    assert!(stderr(&o).contains("front"), "{}", stderr(&o));
    let o = ok(&["plan", "--counts", "3:10", "--pos", "sandwich"], dir.path());
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn plan_all_mamba_and_layout_file() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["plan", "--depth", "6", "--ratio", "0:1", "--out", "m.layout"], dir.path());
    let text = std::fs::read_to_string(dir.path().join("m.layout")).unwrap();
    assert_eq!(block_kinds(&text), vec!["mamba"; 6]);
    let o = ok(&["cost", "--layout", "m.layout", "--format", "csv"], dir.path());
    assert_eq!(csv_rows(&stdout(&o))[0][0], "m");
}

#[test]
fn plan_hard_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["plan", "--depth", "2", "--ratio", "1:12"][..],
        &["plan", "--depth", "0", "--ratio", "1:1"],
        &["plan", "--depth", "4", "--ratio", "1:1", "--kind", "conv"],
        &["plan"],
    ] {
        let o = run(args, dir.path());
        assert!(!o.status.success(), "{args:?}");
        assert!(stderr(&o).contains("error"));
    }
}

#[test]
fn cost_reproduces_published_columns() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["cost", "--preset", "llama-1b", "--ctx", "8192", "--tokens", "60e9", "--format", "csv"], dir.path());
    let text = stdout(&o);
    assert!(text.starts_with("#hybridlab-csv-v1\n"));
    let row = &csv_rows(&text)[0];
    assert_eq!(row[6], "268435456");
    let flops: f64 = row[3].parse().unwrap();
    assert!((flops / 4.5e20 - 1.0).abs() < 0.03, "{flops}");
    let o = ok(&["cost", "--preset", "mamba-1b", "--ctx", "8192", "--format", "csv"], dir.path());
    let bytes: f64 = csv_rows(&stdout(&o))[0][6].parse().unwrap();
    assert!((bytes / (1 << 20) as f64 - 13.4).abs() <= 0.1);
}

#[test]
fn cost_table_uses_three_significant_figures() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["cost", "--preset", "llama-1b", "--ctx", "1024,8192"], dir.path());
    let text = stdout(&o);
    assert!(text.contains("4.47e20"), "{text}");
    assert!(text.contains(" 256 "));
    assert_eq!(text.lines().filter(|l| l.starts_with("llama-1b")).count(), 2);
}

#[test]
fn cost_sweep_emits_one_row_per_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["cost", "--sweep", "--format", "csv"], dir.path());
    let rows = csv_rows(&stdout(&o));
    let ids: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(ids, ["1:0=16+0", "1:1=7+7", "1:3=3+10", "1:5=2+11", "1:12=1+12", "0:1=0+13"]);
    let o = ok(&["cost", "--sweep", "1:1,1:7", "--format", "csv"], dir.path());
    assert_eq!(csv_rows(&stdout(&o)).len(), 2);
}

#[test]
fn golden_table2_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["cost", "--golden", "table2"], dir.path());
    assert!(!stdout(&o).contains("DRIFT"));
    assert!(!run(&["cost", "--golden", "table9"], dir.path()).status.success());
}

#[test]
fn verify_reports_and_catches_injected_faults() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["verify", "--ssm-cases", "20", "--decode-steps", "32"], dir.path());
    let text = stdout(&o);
    assert!(text.contains("7 of 7 suites passed"), "{text}");
    let n: usize = text.lines().last().unwrap().split(", ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!(n > 0);

    let o = ok(&["verify", "--suite", "ssm", "--ssm-cases", "10"], dir.path());
    let text = stdout(&o);
    let suites: Vec<&str> = text.lines().filter(|l| l.contains("properties") && !l.contains("suites")).collect();
    assert_eq!(suites.len(), 1);
    assert!(suites[0].starts_with("ssm"));

    let o = run(&["verify", "--chaos", "flip-sign", "--ssm-cases", "10", "--decode-steps", "8"], dir.path());
    assert!(!o.status.success());
    assert!(stdout(&o).contains("FAIL"));
    assert!(!run(&["verify", "--suite", "nope"], dir.path()).status.success());
}

#[test]
fn same_seed_gives_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let args = |name: &'static str, ckpt: &'static str| {
        ["train", "--preset", "toy-inter", "--steps", "15", "--seed", "11", "--out", ckpt, "--trace", name, "--log-every", "0"]
    };
    ok(&args("a.csv", "a.ckpt"), dir.path());
    ok(&args("b.csv", "b.ckpt"), dir.path());
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(std::fs::read(dir.path().join("a.ckpt")).unwrap(), std::fs::read(dir.path().join("b.ckpt")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains("# seed=11\n"));
    assert!(text.contains("# preset=toy-inter\n"));
    assert!(text.contains("# train.steps=15\n"));
    assert_eq!(csv_rows(&text).len(), 15);
    ok(&["train", "--preset", "toy-inter", "--steps", "15", "--seed", "12", "--out", "c.ckpt", "--trace", "c.csv"], dir.path());
    assert_ne!(std::fs::read(dir.path().join("c.csv")).unwrap(), std::fs::read(dir.path().join("b.csv")).unwrap());
}

#[test]
fn untrained_checkpoint_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["train", "--preset", "toy-intra", "--steps", "0", "--out", "u.ckpt"], dir.path());
    let o = ok(&["eval", "copy", "--checkpoint", "u.ckpt", "--n", "128"], dir.path());
    let acc: f64 = stdout(&o).split_whitespace().nth(1).unwrap().parse().unwrap();
    // 30 payload tokens: chance is 1/30; allow a wide sampling band
    assert!(acc < 0.1, "{acc}");

    ok(&["eval", "niah", "--checkpoint", "u.ckpt", "--trials", "10", "--out", "g.csv"], dir.path());
    let (grid, meta) = NiahGrid::from_csv(&std::fs::read_to_string(dir.path().join("g.csv")).unwrap()).unwrap();
    assert!(grid.mean_within(usize::MAX).unwrap() < 0.1);
    assert!(meta.iter().any(|(k, _)| k == "eval.chance"));
}

#[test]
fn trained_intra_hybrid_niah_grid() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["train", "--preset", "toy-intra", "--task", "needle", "--len", "64", "--steps", "600", "--out", "n.ckpt"],
        dir.path(),
    );
    let o = ok(
        &["eval", "niah", "--checkpoint", "n.ckpt", "--depths", "0,0.5,1", "--lengths", "32,64", "--trials", "20"],
        dir.path(),
    );
    let text = stdout(&o);
    let header = text.lines().find(|l| l.starts_with("length")).unwrap();
    assert_eq!(header, "length,0,0.5,1");
    let (grid, meta) = NiahGrid::from_csv(&text).unwrap();
    assert_eq!(grid.lengths, [32, 64]);
    assert!(grid.mean_within(64).unwrap() >= 0.9, "{:?}", grid.accuracy);
    // the checkpoint's configuration travels with the grid
    assert!(meta.contains(&("task.kind".into(), "needle".into())));
    assert!(meta.contains(&("preset".into(), "toy-intra".into())));
    assert_eq!(grid.to_csv(&meta), text);
}

#[test]
fn config_file_round_trips_and_rejects_typos() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["config", "--preset", "toy-swa", "--window", "6", "--seed", "2"], dir.path());
    std::fs::write(dir.path().join("run.toml"), stdout(&o)).unwrap();
    let again = ok(&["config", "--config", "run.toml"], dir.path());
    assert_eq!(stdout(&again), stdout(&o));
    // flags override the file
    let o = ok(&["config", "--config", "run.toml", "--sink", "3", "--seed", "9"], dir.path());
    assert!(stdout(&o).contains("sink = 3"));
    assert!(stdout(&o).contains("seed = 9"));

    std::fs::write(dir.path().join("bad.toml"), "[model]\nd_modle = 3\n").unwrap();
    let o = run(&["config", "--config", "bad.toml"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("d_modle"), "{}", stderr(&o));
}

#[test]
fn train_from_token_file_and_score_buckets() {
    let dir = tempfile::tempdir().unwrap();
    let tokens: Vec<String> = (0..400).map(|i| ((i * 7) % 32).to_string()).collect();
    std::fs::write(dir.path().join("toks.txt"), tokens.join(" ")).unwrap();
    ok(
        &["train", "--preset", "toy-mamba", "--task", "file", "--data", "toks.txt", "--len", "32", "--steps", "5", "--out", "f.ckpt"],
        dir.path(),
    );
    let o = ok(&["eval", "nll", "--checkpoint", "f.ckpt", "--data", "toks.txt", "--bucket", "100", "--train-len", "32"], dir.path());
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r[2].as_str()).collect::<Vec<_>>(), ["true"; 4]);
    assert!(!run(&["train", "--task", "file", "--out", "x.ckpt"], dir.path()).status.success());
}

#[test]
fn trace_predicted_and_measured_agree() {
    let dir = tempfile::tempdir().unwrap();
    let p = ok(&["trace", "--preset", "toy-inter", "--prompt", "8", "--gen", "8"], dir.path());
    let m = ok(&["trace", "--preset", "toy-inter", "--prompt", "8", "--gen", "8", "--measure"], dir.path());
    assert_eq!(csv_rows(&stdout(&p)), csv_rows(&stdout(&m)));
    assert_eq!(csv_rows(&stdout(&p)).len(), 16);
    // shape-only prediction works at full scale
    let o = ok(&["trace", "--preset", "mamba-1b", "--prompt", "4", "--gen", "4"], dir.path());
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows.first().unwrap()[2], rows.last().unwrap()[2]);
}
