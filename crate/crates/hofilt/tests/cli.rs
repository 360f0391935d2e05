//! Black-box tests of the `hofilt` binary: output formats, exit codes,
//! determinism across thread counts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_hofilt")
}

fn models_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../models"))
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn hofilt")
}

fn bounded_model() -> String {
    models_dir().join("benchmark_bounded.json").display().to_string()
}

fn linear_model() -> String {
    models_dir().join("benchmark_linear.json").display().to_string()
}

fn write_tiny_config(dir: &Path, n_particles: usize, m_y: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "model": bounded_model(),
        "phi": "tanh(x1)",
        "orders": [1, 2],
        "n_list": [2, 4],
        "N": n_particles,
        "M_Y": m_y,
        "R": 32,
        "C": 10.0,
        "seeds": {"x_seed": 7, "y_seed": 13}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn coeffs_prints_the_table() {
    let out = run(&["coeffs", "--model", &bounded_model(), "--order", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("L^() h1 = tanh(x1)"));
    assert!(text.contains("L^(0) h1"));
    assert!(text.contains("L^(1) h1"));
    assert!(text.contains("L^() h0"));
    // order above the model's smoothness is a config error
    let out = run(&["coeffs", "--model", &bounded_model(), "--order", "9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn estimate_emits_a_json_record() {
    let out = run(&[
        "estimate",
        "--model",
        &bounded_model(),
        "--order",
        "2",
        "--n",
        "8",
        "--paths",
        "400",
        "--seed",
        "5",
        "--phi",
        "1",
        "--refinement",
        "16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let record: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(record["pi_phi"], 1.0);
    assert_eq!(record["n_particles"], 400);
    assert_eq!(record["order"], 2);
    assert!(record["rho_one"].as_f64().unwrap() > 0.0);
    assert!(record["partition"].as_array().unwrap().len() == 9);
    // the reference order serializes as "ref"
    let out = run(&[
        "estimate", "--model", &bounded_model(), "--order", "ref",
        "--n", "4", "--paths", "200", "--seed", "5", "--refinement", "8",
    ]);
    assert!(out.status.success());
    let record: serde_json::Value =
        serde_json::from_str(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(record["order"], "ref");
}

#[test]
fn estimate_breakdown_prints_interval_table() {
    let out = run(&[
        "estimate", "--model", &bounded_model(), "--order", "3",
        "--n", "4", "--paths", "100", "--seed", "5", "--refinement", "16",
        "--breakdown",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("# j  xi2(j)  mu(j)  Gamma(mu(j))  xi_bar(j)"));
    assert!(text.lines().filter(|l| l.starts_with(['0', '1', '2', '3'])).count() >= 4);
}

#[test]
fn mesh_and_overflow_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // delta0 tiny: order-2 estimate on a coarse mesh must exit 3
    let steep = serde_json::json!({
        "d_x": 1, "d_v": 1, "d_y": 1,
        "f": ["0"], "sigma": [["1"]], "h": ["x1"],
        "lh_bound": 50.0, "smoothness_order": 6,
        "x0": {"type": "point", "value": [0.0]}
    });
    let steep_path = dir.path().join("steep.json");
    std::fs::write(&steep_path, steep.to_string()).unwrap();
    let steep_str = steep_path.display().to_string();
    let out = run(&[
        "estimate", "--model", &steep_str, "--order", "2",
        "--n", "4", "--paths", "100", "--seed", "1", "--refinement", "8",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    // the override runs it anyway
    let out = run(&[
        "estimate", "--model", &steep_str, "--order", "2",
        "--n", "4", "--paths", "100", "--seed", "1", "--refinement", "8",
        "--allow-inadmissible",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // a huge constant sensor overflows the exponent: exit 4
    let hot = serde_json::json!({
        "d_x": 1, "d_v": 1, "d_y": 1,
        "f": ["0"], "sigma": [["1"]], "h": ["1e6"],
        "lh_bound": 0.0, "smoothness_order": 6,
        "x0": {"type": "point", "value": [0.0]}
    });
    let hot_path = dir.path().join("hot.json");
    std::fs::write(&hot_path, hot.to_string()).unwrap();
    let out = run(&[
        "estimate", "--model", &hot_path.display().to_string(), "--order", "1",
        "--n", "4", "--paths", "50", "--seed", "1", "--refinement", "8",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    // missing files are config errors
    let out = run(&["estimate", "--model", "/nonexistent.json", "--order", "1",
        "--n", "4", "--paths", "50", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn kalman_subcommand() {
    let out = run(&["kalman", "--model", &linear_model(), "--seed", "9", "--n", "16",
        "--refinement", "16"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record: serde_json::Value =
        serde_json::from_str(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert!(record["mean"].as_array().unwrap()[0].as_f64().unwrap().is_finite());
    assert!(record["covariance"][0][0].as_f64().unwrap() >= 0.0);
    assert!(record["log_evidence"].as_f64().unwrap().is_finite());
    // the bounded model is not linear
    let out = run(&["kalman", "--model", &bounded_model(), "--seed", "9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("path.bin");
    let dump_str = dump.display().to_string();
    let out = run(&[
        "simulate", "--model", &bounded_model(), "--dump", &dump_str,
        "--seed", "21", "--n", "2", "--refinement", "8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bundle = hofilt::simulate::load_bundle(std::fs::File::open(&dump).unwrap()).unwrap();
    assert_eq!(bundle.grid.n_steps(), 16);
    assert_eq!(bundle.measure, hofilt::simulate::Measure::P);
    let record: serde_json::Value =
        serde_json::from_str(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(record["n_steps"], 16);
}

#[test]
fn converge_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path(), 300, 2);
    let cfg_str = cfg.display().to_string();
    let out_a = dir.path().join("a.csv");
    let out_b = dir.path().join("b.csv");
    for (threads, out) in [("1", &out_a), ("4", &out_b)] {
        let res = run(&[
            "converge", "--config", &cfg_str, "--out", &out.display().to_string(),
            "--threads", threads,
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let a = std::fs::read(&out_a).unwrap();
    let b = std::fs::read(&out_b).unwrap();
    assert_eq!(a, b, "CSV differs across thread counts");
    assert!(std::str::from_utf8(&a)
        .unwrap()
        .starts_with("m,n,delta,rms_error,mc_se,N,M_Y,skipped,reason\n"));
}

#[test]
fn converge_seed_override_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path(), 200, 1);
    let cfg_str = cfg.display().to_string();
    let json_out = dir.path().join("r.json");
    let res = run(&[
        "converge", "--config", &cfg_str, "--format", "json",
        "--out", &json_out.display().to_string(), "--seed", "99",
    ]);
    assert!(res.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json_out).unwrap()).unwrap();
    assert_eq!(report["config"]["seeds"]["x_seed"], 99);
    assert_ne!(report["config"]["seeds"]["y_seed"], 99);
    assert!(report["config"]["model_sha256"].as_str().unwrap().len() == 64);
}
