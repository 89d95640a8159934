use std::path::Path;
use std::process::{Command, Output};

use recapture::io::Report;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recapture"))
        .args(args)
        .env_remove("RECAPTURE_THREADS")
        .output()
        .expect("binary runs")
}

fn report(dir: &Path) -> Report {
    let s = std::fs::read_to_string(dir.join("report.json")).unwrap();
    Report::from_json(&s).unwrap()
}

fn strip_timestamp(s: &str) -> String {
    s.lines()
        .filter(|l| !l.trim_start().starts_with("\"generated_at\""))
        .collect::<Vec<_>>()
        .join("\n")
}

const SIM: &str = r#"
n_true = 300
tau = 10.0
alpha = 2.0
beta = [0.7]
phi = 0.5
c1 = 2
seed = 5

[[covariates]]
kind = "bernoulli"
name = "x"
p = 0.5

[baseline]
kind = "constant"
rate = 0.15
"#;

fn simulated(dir: &Path, seed: &str) -> std::path::PathBuf {
    let cfg = dir.join("sim.toml");
    std::fs::write(&cfg, SIM).unwrap();
    let out = dir.join("sim");
    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn counts_only_compare_gives_closed_form_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let counts = dir.path().join("counts.csv");
    std::fs::write(&counts, "captures,subjects\n1,50785\n2,1124\n3,60\n4,4\n").unwrap();
    let o = run(&[
        "compare",
        "--counts",
        counts.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let rows = report(dir.path()).comparison.unwrap().count_estimators;
    let get = |name: &str| rows.iter().find(|r| r.estimator == name).unwrap().n_hat;
    assert!((get("chao") / 1.199e6 - 1.0).abs() < 1e-3);
    assert!((get("m0") / 1.11e6 - 1.0).abs() < 1e-2);
    assert!(dir.path().join("report.txt").exists());
}

#[test]
fn simulate_then_fit_echoes_seed() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path(), "42");
    assert_eq!(report(&sim).simulation.unwrap().config.seed, 42);
    let out = dir.path().join("fit");
    let o = run(&[
        "fit",
        "--events",
        sim.join("events.csv").to_str().unwrap(),
        "--subjects",
        sim.join("subjects.csv").to_str().unwrap(),
        "--config",
        sim.join("config.toml").to_str().unwrap(),
        "--model",
        "hob",
        "--c1",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = report(&out);
    let echoed = r.inputs.config.unwrap().simulation.unwrap();
    assert_eq!(echoed.seed, 42);
    assert_eq!(echoed.n_true, 300);
    let fit = r.fit.unwrap();
    assert!(fit.converged);
    assert!(fit.population.unwrap().n_hat >= fit.n_observed as f64);
}

#[test]
fn truncation_before_first_event_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let ev = dir.path().join("events.csv");
    std::fs::write(&ev, "subject_id,time\na,1.5\nb,2.0\na,3.0\n").unwrap();
    let o = run(&[
        "fit",
        "--events",
        ev.to_str().unwrap(),
        "--tau",
        "5",
        "--truncate-at",
        "1.0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncat"));
}

#[test]
fn malformed_events_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ev = dir.path().join("events.csv");
    std::fs::write(&ev, "subject_id,time\na,1.5\nb,zero\n").unwrap();
    let o = run(&["fit", "--events", ev.to_str().unwrap(), "--tau", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn reruns_match_apart_from_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path(), "7");
    let mut texts = Vec::new();
    for (k, threads) in ["1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("grid{k}"));
        let o = run(&[
            "grid",
            "--threads",
            threads,
            "--events",
            sim.join("events.csv").to_str().unwrap(),
            "--subjects",
            sim.join("subjects.csv").to_str().unwrap(),
            "--config",
            sim.join("config.toml").to_str().unwrap(),
            "--model",
            "hob",
            "--c1",
            "1",
            "--c1",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        let json = std::fs::read_to_string(out.join("report.json")).unwrap();
        let round = report(&out).to_json().unwrap();
        assert_eq!(json, round);
        texts.push(strip_timestamp(&json).replace(&format!("\"threads\": {threads}"), ""));
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn behavior_flags_need_a_behavioral_model() {
    let dir = tempfile::tempdir().unwrap();
    let ev = dir.path().join("events.csv");
    std::fs::write(&ev, "subject_id,time\na,1.5\nb,2.0\na,3.0\n").unwrap();
    let o = run(&[
        "fit",
        "--events",
        ev.to_str().unwrap(),
        "--tau",
        "5",
        "--model",
        "ho",
        "--c1",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(1));
}
