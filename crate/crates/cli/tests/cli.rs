use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmhctl::experiment::ExperimentConfig;
use mmhctl::mmh::Stage;

fn mmhctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmhctl")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mmhctl(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A small chain and a short batch so the pipeline runs in seconds.
fn quick_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig { runs: 1, ..Default::default() };
    cfg.chain.samples = 10;
    cfg.chain.burn_in = 50;
    cfg.chain.thin = 2;
    cfg.chain.stages = vec![Stage { measurements: 25, iterations: 300 }, Stage { measurements: 200, iterations: 300 }];
    cfg.acf.max_lag = 20;
    let path = dir.join("quick.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["simulate", "--seed", "11", "--out", s(&a)]);
    ok(&["simulate", "--seed", "11", "--out", s(&b)]);
    ok(&["simulate", "--seed", "12", "--out", s(&c)]);
    let da = fs::read(a.join("dataset.csv")).unwrap();
    assert_eq!(da, fs::read(b.join("dataset.csv")).unwrap());
    assert_eq!(fs::read(a.join("truth.csv")).unwrap(), fs::read(b.join("truth.csv")).unwrap());
    assert_ne!(da, fs::read(c.join("dataset.csv")).unwrap());

    let text = String::from_utf8(da).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t_min,y_mgdl"));
    let times: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(times.len(), 200);
    assert!(times.iter().all(|t| (-720.0..=0.0).contains(t)));
    assert!(fs::read_to_string(a.join("truth.csv")).unwrap().starts_with("p2,p3,n,G0,X0,I0\n"));
}

#[test]
fn pipeline_commands_chain_together() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let out = tmp.path().join("run");
    let o = s(&out);
    let c = s(&cfg);
    let dataset = ok(&["simulate", "--config", c, "--out", o]);
    let samples = ok(&["infer", "--config", c, "--out", o, "--dataset", dataset.trim()]);
    let rows = fs::read_to_string(samples.trim()).unwrap();
    assert!(rows.starts_with("p2,p3,n,G0,X0,I0,logpost\n"));
    assert_eq!(rows.lines().count(), 11);
    assert!(fs::read_to_string(out.join("acf.csv")).unwrap().starts_with("lag,p2,p3,n,G0,X0,I0\n"));
    let acc = fs::read_to_string(out.join("acceptance.csv")).unwrap();
    assert_eq!(acc.lines().count(), 4);
    assert!(acc.lines().last().unwrap().starts_with("production,200,"));

    let control = ok(&["plan", "--config", c, "--out", o, "--samples", samples.trim()]);
    let u = fs::read_to_string(control.trim()).unwrap();
    assert!(u.starts_with("t_min,u_mU_per_min\n"));
    assert_eq!(u.lines().count(), 73);
    let env = fs::read_to_string(out.join("envelope.csv")).unwrap();
    let header = env.lines().next().unwrap();
    assert!(header.starts_with("t_min,G_1,G_2,") && header.ends_with("G_10,mean,min,max"));
    assert_eq!(env.lines().count(), 722);

    let truth = out.join("truth.csv");
    let eval = ok(&["evaluate", "--config", c, "--out", o, "--control", control.trim(), "--truth", s(&truth)]);
    assert!(eval.contains("cost = ") && eval.contains("violation = "));
    assert!(fs::read_to_string(out.join("realized.csv")).unwrap().starts_with("t_min,G,X,I\n"));

    let nominal = ok(&["plan", "--config", c, "--out", o, "--dataset", dataset.trim()]);
    assert!(fs::read_to_string(out.join("ekf_trace.csv")).unwrap().starts_with("t,G_mean,X_mean,I_mean,P_GG,P_XX,P_II\n"));
    ok(&["evaluate", "--config", c, "--out", o, "--control", nominal.trim(), "--truth", s(&truth), "--method", "nominal"]);
}

#[test]
fn single_run_batch_scores_both_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let out = tmp.path().join("mc");
    let table = ok(&["monte-carlo", "--config", s(&cfg), "--out", s(&out)]);
    assert!(table.contains("| Nominal + EKF |"));
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    let rows: Vec<&str> = runs.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("0,mmh,") && rows[1].starts_with("0,nominal,"));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("runs = 1\n") && summary.contains("mmh.completed = 1\n"));
    assert_eq!(fs::read_to_string(out.join("failures.csv")).unwrap(), "run,stage,category,message\n");
}

#[test]
fn equilibrium_truth_has_zero_cost() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.meals.meals.clear();
    cfg.training_gain = 0.0;
    let cfg_path = tmp.path().join("flat.toml");
    fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let truth = tmp.path().join("truth.csv");
    fs::write(&truth, "p2,p3,n,G0,X0,I0\n0.014,1.7e-6,0.19,80,0,7\n").unwrap();
    let control = tmp.path().join("u.csv");
    let mut text = String::from("t_min,u_mU_per_min\n");
    for n in 0..72 {
        text.push_str(&format!("{},0\n", n * 5));
    }
    fs::write(&control, text).unwrap();
    let out = ok(&["evaluate", "--config", s(&cfg_path), "--out", s(tmp.path()), "--control", s(&control), "--truth", s(&truth)]);
    assert!(out.contains("cost = 0\n") && out.contains("violation = false\n"), "{out}");
}

#[test]
fn errors_are_categorized() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nruns = 0\n").unwrap();
    let out = mmhctl(&["simulate", "--config", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error [config]"));

    let out = mmhctl(&["infer", "--out", s(tmp.path()), "--dataset", s(&tmp.path().join("missing.csv"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));

    let control = tmp.path().join("short.csv");
    fs::write(&control, "t_min,u_mU_per_min\n0,1\n5,1\n").unwrap();
    let truth = tmp.path().join("truth.csv");
    fs::write(&truth, "p2,p3,n,G0,X0,I0\n0.014,1.7e-6,0.19,80,0,7\n").unwrap();
    let out = mmhctl(&["evaluate", "--out", s(tmp.path()), "--control", s(&control), "--truth", s(&truth)]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match the horizon"));

    let out = mmhctl(&["simulate", "--seed", "18446744073709551615", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_command_prints_round_trippable_toml() {
    let text = ok(&["config", "--full-scale", "--seed", "5"]);
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.runs, 100);
    assert_eq!(cfg.chain.samples, 100);
    assert_eq!(cfg.seed, 5);
}
