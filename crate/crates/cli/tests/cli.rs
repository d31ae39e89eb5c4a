use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kinemaforge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinemaforge"))
        .args(args)
        .current_dir(cwd)
        .env_remove("KINEMAFORGE_SEED")
        .env("RUST_LOG", "warn")
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

const FAST: [&str; 8] = [
    "--clusters",
    "8",
    "--set",
    "optimizer=direct",
    "--set",
    "max_iters=300",
    "--seed",
    "5",
];

fn synth(dir: &Path) {
    ok(&kinemaforge(
        &["synthgen", "--out", "data", "--dof", "1", "--frames", "5", "--points", "800", "--max-step", "0.3", "--noiseless", "--seed", "2"],
        dir,
    ));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = kinemaforge(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = kinemaforge(&[], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_configuration_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = kinemaforge(&["build", "--out", "b"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = kinemaforge(&["build", "--out", "b", "--sequence", "x", "--set", "nonsense=1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_pipeline_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = kinemaforge(&["build", "--out", "b", "--sequence", "nowhere"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn single_frame_sequence_fails_at_load() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("one")).unwrap();
    fs::write(dir.path().join("one/frame_0000.xyz"), "0 0 0\n1 0 0\n0 1 0\n").unwrap();
    let out = kinemaforge(&["build", "--out", "b", "--sequence", "one"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("load"), "{err}");
}

#[test]
fn synthgen_layout_and_seed_fallback() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let data = dir.path().join("data");
    assert_eq!(fs::read_to_string(data.join("sequences.txt")).unwrap(), "seq_000\n");
    for i in 0..5 {
        assert!(data.join(format!("seq_000/frame_{i:04}.xyz")).is_file());
    }
    assert!(data.join("seq_000/ground_truth.json").is_file());

    let out = Command::new(env!("CARGO_BIN_EXE_kinemaforge"))
        .args(["synthgen", "--out", "env", "--dof", "1", "--frames", "5", "--points", "800", "--max-step", "0.3", "--noiseless"])
        .current_dir(dir.path())
        .env("KINEMAFORGE_SEED", "2")
        .output()
        .unwrap();
    ok(&out);
    for f in ["frame_0004.xyz", "ground_truth.json"] {
        let a = fs::read(data.join("seq_000").join(f)).unwrap();
        let b = fs::read(dir.path().join("env/seq_000").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }

    let out = kinemaforge(&["synthgen", "--out", "bad", "--branching", "ring"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn multiple_sequences_share_the_first_frame() {
    let dir = tempfile::tempdir().unwrap();
    ok(&kinemaforge(
        &["synthgen", "--out", "data", "--dof", "2", "--frames", "3", "--points", "500", "--sequences", "2", "--seed", "4"],
        dir.path(),
    ));
    let manifest = fs::read_to_string(dir.path().join("data/sequences.txt")).unwrap();
    assert_eq!(manifest.lines().collect::<Vec<_>>(), ["seq_000", "seq_001"]);
}

#[test]
fn staged_run_then_eval_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let mut args = vec!["register", "--out", "b", "--manifest", "data/sequences.txt"];
    args.extend(FAST);
    ok(&kinemaforge(&args, d));
    assert!(d.join("b/report/track.json").is_file());
    assert!(!d.join("b/report/segmentation_report.json").exists());

    ok(&kinemaforge(&["segment", "--out", "b"], d));
    assert!(d.join("b/report/segmentation_report.json").is_file());
    assert!(!d.join("b/model.urdf").exists());

    ok(&kinemaforge(&["build", "--out", "b", "--from-stage", "topology"], d));
    let urdf = fs::read_to_string(d.join("b/model.urdf")).unwrap();
    assert!(urdf.contains("<robot name=\"robot\">"));
    assert!(d.join("b/report/topology.json").is_file());
    assert!(d.join("b/report/joints.json").is_file());

    let out = kinemaforge(&["eval", "--pred", "b", "--truth", "data/seq_000/ground_truth.json"], d);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("TED"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("b/eval_report.json")).unwrap()).unwrap();
    assert!(report.get("ted").is_some());

    ok(&kinemaforge(&["plot", "--report", "b/report", "--out", "plots"], d));
    let matrix = fs::read_to_string(d.join("plots/correlation_matrix.csv")).unwrap();
    let rows: Vec<&str> = matrix.lines().collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.split(',').count() == 8));
    let curve = fs::read_to_string(d.join("plots/silhouette.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("k,silhouette"));
    for line in lines {
        let (k, s) = line.split_once(',').unwrap();
        k.parse::<usize>().unwrap();
        let s: f64 = s.parse().unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    let out = kinemaforge(&["build", "--out", "b", "--from-stage", "nowhere"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    fs::write(
        d.join("run.cfg"),
        "# quick run\nsequence = data/seq_000\nclusters = 8\noptimizer = direct\nmax_iters = 300\nname = arm\nseed = 9\n",
    )
    .unwrap();
    ok(&kinemaforge(&["register", "--config", "run.cfg", "--out", "b", "--seed", "5"], d));
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("b/report/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["name"], "arm");
    assert_eq!(cfg["clusters"], 8);
}
