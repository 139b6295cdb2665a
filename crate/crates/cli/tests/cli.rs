use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const PATH2: &str = r#"{
  "model": {
    "d": 1, "beta": 1.0, "z": 0.3, "lambda0": 0.6,
    "potentials": {"u1": 0.3, "u2": 0.2, "v0": 0.4, "rho_hc": 0.6},
    "decay": {"form": "nearest", "amp": 1.0},
    "m_tau": 8, "k_max": 8
  },
  "graph": {"kind": "path", "n": 2},
  "run": {"chains": 4, "burn_in": 200, "samples": 300, "thin": 5, "seed": 3, "nodes": 4},
  "volumes": {"lambda0": [0]},
  "rdmk": {"arguments": [{"x": [[0, [0.2]]], "y": [[0, [0.3]]]}], "replicas": 2}
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn fkloopgas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fkloopgas")).args(args).output().expect("binary runs")
}

fn run_in(dir: &TempDir, cmd: &str, config: &Path, out: &str, extra: &[&str]) -> Output {
    let out = dir.path().join(out);
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    fkloopgas(&args)
}

fn csv_body(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().filter(|l| !l.starts_with('#')).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn gate_with_theta_override_reports_margin() {
    let dir = tempfile::tempdir().unwrap();
    let text = PATH2.replacen("\"z\": 0.3", "\"z\": 0.1", 1).replacen("\"graph\"", "\"gate\": {\"theta\": 1.25}, \"graph\"", 1);
    let cfg = write_config(dir.path(), "gate.json", &text);
    let o = run_in(&dir, "gate", &cfg, "out", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let expected = 1.0 - 0.1 * 1.25f64.exp();
    assert!(stdout.contains(&format!("margin {expected:.6}")), "{stdout}");
    let rows = csv_body(&dir.path().join("out/gate.csv"));
    let margin = rows.iter().find(|r| r[0] == "margin").unwrap();
    assert!((margin[1].parse::<f64>().unwrap() - expected).abs() < 1e-12);
}

#[test]
fn failing_gate_blocks_gated_commands() {
    let dir = tempfile::tempdir().unwrap();
    let text = PATH2.replacen("\"graph\"", "\"gate\": {\"theta\": 3.0}, \"graph\"", 1);
    let cfg = write_config(dir.path(), "bad_gate.json", &text);
    assert_eq!(run_in(&dir, "xi", &cfg, "out", &[]).status.code(), Some(3));
    assert_eq!(run_in(&dir, "gate", &cfg, "out", &[]).status.code(), Some(3));
    // Ungated commands still run.
    assert!(run_in(&dir, "heat-kernel", &cfg, "out", &[]).status.success());
}

#[test]
fn validate_graph_on_square_ball() {
    let dir = tempfile::tempdir().unwrap();
    let text = PATH2.replacen(r#""graph": {"kind": "path", "n": 2}"#, r#""graph": {"kind": "lattice", "lattice": "square", "radius": 10}"#, 1);
    let cfg = write_config(dir.path(), "square.json", &text);
    let o = run_in(&dir, "validate-graph", &cfg, "out", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_body(&dir.path().join("out/validate_graph.csv"));
    let get = |q: &str| rows.iter().find(|r| r[0] == q).unwrap()[1].parse::<f64>().unwrap();
    assert_eq!(get("degree_bound"), 4.0);
    assert_eq!(get("vertices"), 221.0);
    assert_eq!(get("sup_sphere_ratio"), 4.0);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", &PATH2.replacen("\"beta\": 1.0", "\"beta\": -1.0", 1));
    assert_eq!(run_in(&dir, "gate", &bad, "out", &[]).status.code(), Some(2));
    let typo = write_config(dir.path(), "typo.json", &PATH2.replacen("\"thin\"", "\"thinning\"", 1));
    assert_eq!(run_in(&dir, "gate", &typo, "out", &[]).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(run_in(&dir, "gate", &missing, "out", &[]).status.code(), Some(2));
    // clap reports usage errors with status 2 as well.
    assert_eq!(fkloopgas(&["no-such-command", "--config", "x.json"]).status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "xi.json", PATH2);
    let a = run_in(&dir, "xi", &cfg, "a", &["--workers", "1"]);
    let b = run_in(&dir, "xi", &cfg, "b", &["--workers", "3"]);
    assert!(a.status.success() && b.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let read = |d: &str| fs::read(dir.path().join(d).join("xi.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    let c = run_in(&dir, "xi", &cfg, "c", &["--seed", "4"]);
    assert!(c.status.success());
    assert_ne!(read("a"), read("c"));
}

#[test]
fn rows_carry_seed_and_params_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "rdmk.json", PATH2);
    let o = run_in(&dir, "rdmk", &cfg, "out", &["--seed", "17"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("out/rdmk.csv")).unwrap();
    let first = text.lines().next().unwrap();
    let hash = first.rsplit("params_hash=").next().unwrap();
    assert_eq!(hash.len(), 64);
    let rows = csv_body(&dir.path().join("out/rdmk.csv"));
    assert_eq!(rows[0], ["quantity", "value", "stderr", "n", "seed", "params_hash"]);
    assert!(rows.len() > 2);
    for r in &rows[1..] {
        assert_eq!(r[4], "17");
        assert_eq!(r[5], hash);
    }
    let trace = rows.iter().find(|r| r[0] == "trace").unwrap();
    let (v, se) = (trace[1].parse::<f64>().unwrap(), trace[2].parse::<f64>().unwrap());
    assert!((v - 1.0).abs() < 5.0 * se + 1e-3, "trace {v} ± {se}");
    assert!(dir.path().join("out/plot_rdmk.py").exists());
}

#[test]
fn heat_kernel_errors_are_small() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "hk.json", &PATH2.replacen("\"graph\"", "\"heat_kernel\": {\"times\": [0.5, 2.0]}, \"graph\"", 1));
    assert!(run_in(&dir, "heat-kernel", &cfg, "out", &[]).status.success());
    let rows = csv_body(&dir.path().join("out/heat_kernel.csv"));
    let errors: Vec<f64> = rows.iter().filter(|r| r[0].contains("error") || r[0].contains("gap")).map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(errors.len(), 6);
    assert!(errors.iter().all(|e| *e < 1e-8), "{errors:?}");
}

#[test]
fn tail_bound_holds_on_a_small_run() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{
      "model": {"d": 1, "beta": 1.0, "z": 0.1, "lambda0": 2.0, "potentials": {},
                "decay": {"form": "zero"}, "m_tau": 2, "k_max": 4},
      "graph": {"kind": "lattice", "lattice": "square", "radius": 4},
      "tail": {"ns": [8, 55], "draws": 20000}
    }"#;
    let cfg = write_config(dir.path(), "tail.json", text);
    let o = run_in(&dir, "tail-bound", &cfg, "out", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_body(&dir.path().join("out/tail_bound.csv"));
    let oks: Vec<&Vec<String>> = rows.iter().filter(|r| r[0].starts_with("ok[")).collect();
    assert_eq!(oks.len(), 2);
    assert!(oks.iter().all(|r| r[1].parse::<f64>().unwrap() == 1.0));
}

#[test]
fn mw_upsilon_needs_a_lattice() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "path.json", PATH2);
    assert_eq!(run_in(&dir, "mw-upsilon", &cfg, "out", &[]).status.code(), Some(2));
}
