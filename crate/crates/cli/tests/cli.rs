use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn palo(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_palo"))
        .args(args)
        .current_dir(dir)
        .env_remove("PALO_API_KEY")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Prior demos, labels and a checkpoint small enough for a test run.
fn small_model(dir: &Path) {
    ok(&palo(&["gen-demos", "--task", "prior", "--n", "6", "--out", "prior.jsonl"], dir));
    ok(&palo(&["augment", "--input", "prior.jsonl", "--out", "prior_l.jsonl"], dir));
    ok(&palo(
        &["train", "--data", "prior_l.jsonl", "--out", "model.json", "--steps", "300"],
        dir,
    ));
}

const SMALL_SPEC: &str = r#"
name = "small"
tasks = ["put_in", "pry_away", "salad", "pour", "sweep_mints", "sweep_skittles", "rotate_marker", "rotate_spoon"]
n_demos = 2
methods = ["palo", "ft", "nn", "zero_shot_l"]
episodes = 1
regret_episodes = 0
seeds = [0]
output_dir = "out"
m = 3
n_samples = 50

[prior]
prior_per_task = 4

[prior.train]
steps = 100

[finetune]
steps = 20
"#;

#[test]
fn missing_task_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = palo(&["gen-demos", "--n", "5", "--seed", "7"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--task"));
    let out = palo(&["gen-demos", "--task", "no_such_task"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_demos_is_deterministic() {
    let dir = TempDir::new().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        ok(&palo(
            &["gen-demos", "--task", "rotate_align", "--n", "5", "--seed", "7", "--out", name],
            dir.path(),
        ));
    }
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b.jsonl")).unwrap();
    assert_eq!(a, b);
    let data = palo::model::load_dataset(&dir.path().join("a.jsonl")).unwrap();
    assert_eq!(data.trajectories.len(), 5);
    assert_eq!(data.role, palo::model::Role::Target);
    assert!(!data.is_labeled());
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let out = palo(&["augment", "--input", "nope.jsonl", "--out", "x.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    std::fs::write(dir.path().join("bad.jsonl"), "{not json\n").unwrap();
    let out = palo(&["augment", "--input", "bad.jsonl", "--out", "x.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn adapt_reports_ablation_warns_and_surfaces_remote_failures() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_model(d);
    ok(&palo(&["gen-demos", "--task", "put_in", "--n", "3", "--out", "demos.jsonl"], d));
    let base = ["adapt", "--model", "model.json", "--demos", "demos.jsonl", "--task", "put_in"];

    let mut args = base.to_vec();
    args.extend(["--ablation", "fixed_times", "--n-samples", "1", "--out", "fixed.json"]);
    let out = palo(&args, d);
    ok(&out);
    assert!(stderr(&out).contains("--n-samples 1"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("fixed.json")).unwrap()).unwrap();
    assert_eq!(report["ablation"], "fixed_times");
    assert_eq!(report["config"]["ablation"], "fixed_times");

    // Deterministic once timings are zeroed.
    for name in ["a.json", "b.json"] {
        let mut args = base.to_vec();
        args.extend(["--n-samples", "200", "--zero-timings", "--out", name]);
        ok(&palo(&args, d));
    }
    assert_eq!(std::fs::read(d.join("a.json")).unwrap(), std::fs::read(d.join("b.json")).unwrap());

    let out = palo(&["rollout", "--model", "model.json", "--task", "put_in", "--result", "a.json", "--episodes", "2"], d);
    ok(&out);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["successes"].as_array().unwrap().len(), 2);

    let mut args = base.to_vec();
    args.extend(["--backend", "remote", "--out", "remote/report.json"]);
    let out = palo(&args, d);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("PALO_API_KEY"));

    // Replay of an empty transcript misses on the first request.
    std::fs::write(d.join("empty.jsonl"), "").unwrap();
    let mut args = base.to_vec();
    args.extend(["--backend", "remote", "--replay", "empty.jsonl", "--out", "remote/report.json"]);
    let out = palo(&args, d);
    assert_eq!(out.status.code(), Some(4));
    let err = stderr(&out);
    assert!(err.contains("transcript: "), "{err}");
    assert!(d.join("remote/put_in.transcript.jsonl").exists());

    let mut args = base.to_vec();
    args.extend(["--ablation", "bogus"]);
    assert_eq!(palo(&args, d).status.code(), Some(2));
}

#[test]
fn bench_emits_one_row_per_cell_and_resumes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.toml"), SMALL_SPEC).unwrap();
    ok(&palo(&["bench", "--spec", "spec.toml", "--zero-timings"], d));
    let csv_path = d.join("out/results.csv");
    let rows = palo::harness::read_rows(&csv_path).unwrap();
    assert_eq!(rows.len(), 8 * 4);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.success_rate) && r.adapt_secs == 0.0));
    let before = std::fs::read(&csv_path).unwrap();
    let stamp = std::fs::metadata(&csv_path).unwrap().modified().unwrap();

    let out = palo(&["bench", "--spec", "spec.toml", "--zero-timings"], d);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("already complete"));
    assert_eq!(std::fs::read(&csv_path).unwrap(), before);
    assert_eq!(std::fs::metadata(&csv_path).unwrap().modified().unwrap(), stamp);

    // A fresh run recomputes to the same bytes.
    ok(&palo(&["bench", "--spec", "spec.toml", "--zero-timings", "--fresh"], d));
    assert_eq!(std::fs::read(&csv_path).unwrap(), before);
}

#[test]
fn invalid_spec_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("spec.toml"), "seeds = []\n").unwrap();
    let out = palo(&["bench", "--spec", "spec.toml"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn scaling_writes_one_row_per_count() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let spec = SMALL_SPEC.replace(
        r#"tasks = ["put_in", "pry_away", "salad", "pour", "sweep_mints", "sweep_skittles", "rotate_marker", "rotate_spoon"]"#,
        r#"tasks = ["put_in"]"#,
    );
    std::fs::write(d.join("spec.toml"), spec).unwrap();
    ok(&palo(&["scaling", "--spec", "spec.toml", "--counts", "2,4", "--out", "scaling.csv"], d));
    let text = std::fs::read_to_string(d.join("scaling.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n_demos,palo_success,ft_success");
    assert_eq!(lines.len(), 3);
    let palo_col: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(palo_col[0], palo_col[1]);
}

const OVERLAP_HEADER: &str = "family,h,k,eps,samples,hits,tail,ci_lo,ci_hi,bound,violated";
const EXP_HEADER: &str = "h,k,n,ansatz_eps,ansatz_in_range,f_ansatz,grid_eps,f_grid_min,target,target_plugin,grid_meets_target,ansatz_meets_target";

#[test]
fn theory_csv_schema_is_stable() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let args = [
        "theory", "--out-dir", "t1", "--hs", "20,50", "--ks", "2,3", "--samples", "10000", "--ns", "100",
    ];
    ok(&palo(&args, d));
    let overlap = std::fs::read_to_string(d.join("t1/overlap.csv")).unwrap();
    let exp = std::fs::read_to_string(d.join("t1/exp.csv")).unwrap();
    assert_eq!(overlap.lines().next().unwrap(), OVERLAP_HEADER);
    assert_eq!(exp.lines().next().unwrap(), EXP_HEADER);
    assert_eq!(overlap.lines().count(), 1 + 2 * 2 * 4);
    assert_eq!(exp.lines().count(), 1 + 2 * 2);
    assert!(overlap.lines().nth(1).unwrap().starts_with("contiguous,20,2,0.0,10000,"));

    let mut again = args.to_vec();
    again[2] = "t2";
    ok(&palo(&again, d));
    assert_eq!(std::fs::read(d.join("t2/overlap.csv")).unwrap(), overlap.as_bytes());
    assert_eq!(std::fs::read(d.join("t2/exp.csv")).unwrap(), exp.as_bytes());

    let out = palo(&["theory", "--samples", "10"], d);
    assert_eq!(out.status.code(), Some(2));
}
