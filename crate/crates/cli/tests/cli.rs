use artik_core::dynamics::{preset, NoiseConfig};
use artik_core::ObservationSet;
use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn artik(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_artik")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = artik(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, scene: &str, seed: &str, extra: &[&str]) {
    let mut args = vec!["generate", "--scene", scene, "--seed", seed, "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn generate_round_trips_the_observations() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "cartpole", "3", &["--noise-p", "0.005", "--noise-r", "0.01", "--frames", "50"]);
    let text = std::fs::read_to_string(dir.path().join("trajectory.json")).unwrap();
    let got: ObservationSet = serde_json::from_str(&text).unwrap();
    let mut scene = preset("cartpole").unwrap().with_seed(3);
    scene.frames = 50;
    let (_, want) = scene.observe(&NoiseConfig { sigma_p: 0.005, sigma_r: 0.01, seed: 3 }).unwrap();
    assert_eq!(got, want);

    let truth: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ground_truth.json")).unwrap()).unwrap();
    assert_eq!(truth["config"]["frames"], 50);
    assert_eq!(truth["theta"].as_array().unwrap().len(), 4);
    assert_eq!(truth["states"].as_array().unwrap().len(), 50);
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        generate(d.path(), "double_pendulum", "5", &["--noise-p", "0.001"]);
        ok(&["--threads", "1", "infer", "--input", p(&d.path().join("trajectory.json")), "--noise-p", "0.001", "--out", p(d.path())]);
    }
    for f in ["trajectory.json", "ground_truth.json", "world_model.json", "joints.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn infer_prints_the_cartpole_chain() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "cartpole", "0", &[]);
    let out = ok(&["infer", "--input", p(&dir.path().join("trajectory.json")), "--out", p(dir.path())]);
    assert!(out.contains("world -[prismatic]-> body0 -[revolute]-> body1"), "{out}");
    assert_eq!(std::fs::read_to_string(dir.path().join("summary.txt")).unwrap(), out);
    let joints = std::fs::read_to_string(dir.path().join("joints.csv")).unwrap();
    assert_eq!(joints.lines().next().unwrap(), "t,world->body0,body0->body1");
    assert_eq!(joints.lines().count(), 201);
}

#[test]
fn double_pendulum_has_two_revolute_joints() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "double_pendulum", "1", &[]);
    let out = ok(&["infer", "--input", p(&dir.path().join("trajectory.json")), "--out", p(dir.path())]);
    assert_eq!(out.matches("[revolute]").count(), 2, "{out}");
    assert!(!out.contains("prismatic"));
}

#[test]
fn single_frame_input_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "cartpole", "0", &["--frames", "5"]);
    let path = dir.path().join("trajectory.json");
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for body in v["bodies"].as_array_mut().unwrap() {
        body["poses"].as_array_mut().unwrap().truncate(1);
    }
    v["controls"].as_array_mut().unwrap().truncate(1);
    std::fs::write(&path, v.to_string()).unwrap();
    let out = artik(&["infer", "--input", p(&path), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("world_model.json").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(artik(&["generate", "--scene", "hexapod", "--out", p(dir.path())]).status.code(), Some(1));
    assert_eq!(artik(&["infer", "--input", p(&dir.path().join("missing.json")), "--out", p(dir.path())]).status.code(), Some(1));
    assert_eq!(artik(&["fit-params", "--method", "newton"]).status.code(), Some(1));
    assert_eq!(artik(&["--help"]).status.code(), Some(0));
}

#[test]
fn fit_without_sidecar_has_no_nmae() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "cartpole", "2", &["--frames", "40"]);
    let traj = dir.path().join("trajectory.json");
    let model = dir.path().join("world_model.json");
    ok(&["infer", "--input", p(&traj), "--out", p(dir.path())]);
    let sidecar = dir.path().join("ground_truth.json");
    let fit = |out: &Path, truth: bool| -> Value {
        let mut args = vec!["fit-params", "--input", p(&traj), "--model", p(&model), "--particles", "2", "--steps", "3", "--out", p(out)];
        if truth {
            args.extend(["--truth", p(&sidecar)]);
        }
        ok(&args);
        serde_json::from_str(&std::fs::read_to_string(out.join("params.json")).unwrap()).unwrap()
    };
    let blind = fit(&dir.path().join("blind"), false);
    assert!(blind["nmae"].is_null());
    assert_eq!(blind["names"], serde_json::json!(["cart_mass", "pole_mass", "pole_inertia_y", "pole_damping"]));
    assert_eq!(blind["config"]["estimate"]["steps"], 3);
    let trace = std::fs::read_to_string(dir.path().join("blind/loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 5);
    let scored = fit(&dir.path().join("scored"), true);
    assert!(scored["nmae"].as_f64().unwrap() >= 0.0);
    assert_eq!(scored["theta"], blind["theta"]);
}

#[test]
fn control_rejects_mismatched_parameters() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "cartpole", "0", &["--frames", "5"]);
    let params = dir.path().join("params.json");
    std::fs::write(&params, r#"{"theta": [1.0, 0.2]}"#).unwrap();
    let out = artik(&["control", "--task", "balance", "--model", p(&dir.path().join("ground_truth.json")), "--params", p(&params), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("theta has 2 values"), "{err}");
    assert!(!dir.path().join("control.json").exists());
}

#[test]
fn plot_data_writes_one_row_per_body_and_frame() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "three_link", "0", &["--frames", "30"]);
    let traj = dir.path().join("trajectory.json");
    ok(&["infer", "--input", p(&traj), "--out", p(dir.path())]);
    let plots = dir.path().join("plots");
    ok(&["plot-data", "--input", p(&traj), "--model", p(&dir.path().join("world_model.json")), "--out", p(&plots)]);
    let poses = std::fs::read_to_string(plots.join("poses.csv")).unwrap();
    assert_eq!(poses.lines().count(), 1 + 30 * 3);
    let joints = std::fs::read_to_string(plots.join("joints.csv")).unwrap();
    assert_eq!(joints, std::fs::read_to_string(dir.path().join("joints.csv")).unwrap());
}

#[test]
fn eval_writes_a_summary_with_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["eval", "--seeds", "1", "--seed", "4", "--steps", "4", "--particles", "2", "--method", "adam", "--out", p(dir.path())]);
    assert_eq!(out.lines().count(), 3, "{out}");
    assert!(out.starts_with("PASS topology"), "{out}");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(v["config"]["seeds"], serde_json::json!([4]));
    assert_eq!(v["config"]["methods"], serde_json::json!(["adam"]));
    let runs = v["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert!(runs.iter().all(|r| r["topology"]["exact"] == true && r["fits"].as_array().unwrap().len() == 1));
    assert!(dir.path().join("noisy/seed4/loss_trace_adam.csv").exists());
}
