use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn swarmloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swarmloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SCENARIO: &str = r#"{
  "n_robots": 5,
  "field_size": 160,
  "formation": "circle",
  "trajectory": "forward_arcs",
  "duration": 10,
  "seed": 7
}"#;

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn simulate(dir: &TempDir, scenario: &str) -> String {
    let sc = write(dir, "scenario.json", scenario);
    let trace = path(dir, "trace.jsonl");
    let o = swarmloc(&["simulate", "--scenario", &sc, "--out", &trace]);
    assert!(o.status.success(), "{}", stderr(&o));
    trace
}

#[test]
fn simulate_prints_summary_and_writes_trace() {
    let dir = TempDir::new().unwrap();
    let sc = write(&dir, "scenario.json", SCENARIO);
    let trace = path(&dir, "trace.jsonl");
    let o = swarmloc(&["simulate", "--scenario", &sc, "--out", &trace]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "301 timesteps, 5 robots");
    assert_eq!(fs::read_to_string(&trace).unwrap().lines().count(), 302);
}

#[test]
fn simulate_is_deterministic_and_seed_overrides() {
    let dir = TempDir::new().unwrap();
    let sc = write(&dir, "scenario.json", SCENARIO);
    let out = |name: &str, seed: Option<&str>| {
        let p = path(&dir, name);
        let mut args = vec!["simulate", "--scenario", &sc, "--out", &p];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        assert!(swarmloc(&args).status.success());
        fs::read(&p).unwrap()
    };
    assert_eq!(out("a.jsonl", None), out("b.jsonl", None));
    assert_ne!(out("a.jsonl", None), out("c.jsonl", Some("8")));
}

#[test]
fn missing_field_is_named() {
    let dir = TempDir::new().unwrap();
    let sc = write(&dir, "bad.json", &SCENARIO.replace("\"n_robots\": 5,", ""));
    let o = swarmloc(&[
        "simulate",
        "--scenario",
        &sc,
        "--out",
        &path(&dir, "t.jsonl"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_robots"), "{}", stderr(&o));
}

#[test]
fn zero_duration_is_rejected() {
    let dir = TempDir::new().unwrap();
    let sc = write(
        &dir,
        "bad.json",
        &SCENARIO.replace("\"duration\": 10", "\"duration\": 0"),
    );
    let o = swarmloc(&[
        "simulate",
        "--scenario",
        &sc,
        "--out",
        &path(&dir, "t.jsonl"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("duration"), "{}", stderr(&o));
}

#[test]
fn malformed_json_reports_location() {
    let dir = TempDir::new().unwrap();
    let sc = write(&dir, "bad.json", "{\n  \"n_robots\": 5,\n  oops\n}");
    let o = swarmloc(&[
        "simulate",
        "--scenario",
        &sc,
        "--out",
        &path(&dir, "t.jsonl"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

fn read_csv(p: &str) -> Vec<Vec<String>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn localize_full_writes_matching_csv_and_json() {
    let dir = TempDir::new().unwrap();
    let trace = simulate(&dir, SCENARIO);
    let csv = path(&dir, "errors.csv");
    let states = path(&dir, "states.jsonl");
    let o = swarmloc(&[
        "localize", "--trace", &trace, "--mode", "full", "--out", &csv, "--states", &states,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let rows = read_csv(&csv);
    assert_eq!(
        rows[0],
        [
            "t",
            "mean_error_cm",
            "robot_0_cm",
            "robot_1_cm",
            "robot_2_cm",
            "robot_3_cm",
            "robot_4_cm"
        ]
    );
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&csv).with_extension("json")).unwrap())
            .unwrap();
    let samples = json["samples"].as_array().unwrap();
    assert_eq!(samples.len(), rows.len() - 1);
    for (row, s) in rows[1..].iter().zip(samples) {
        let t: f64 = row[0].parse().unwrap();
        let m: f64 = row[1].parse().unwrap();
        assert_eq!(t.to_bits(), s["t"].as_f64().unwrap().to_bits());
        assert_eq!(m.to_bits(), s["mean_error"].as_f64().unwrap().to_bits());
    }

    let records: Vec<serde_json::Value> = fs::read_to_string(&states)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 5 * 301);
    assert_eq!(records[0]["cov"].as_array().unwrap().len(), 9);
}

#[test]
fn localize_direct_on_noise_free_static_swarm() {
    let dir = TempDir::new().unwrap();
    let scenario = r#"{
      "n_robots": 20, "field_size": 500, "formation": "random", "trajectory": "static",
      "duration": 1,
      "sensor": {"sigma_dist": 0, "sigma_angle": 0, "max_range": 1000}
    }"#;
    let trace = simulate(&dir, scenario);
    let csv = path(&dir, "direct.csv");
    let o = swarmloc(&[
        "localize", "--trace", &trace, "--mode", "direct", "--out", &csv,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for row in &read_csv(&csv)[1..] {
        let m: f64 = row[1].parse().unwrap();
        assert!(m < 1e-3, "{m}");
    }
}

#[test]
fn unobservable_trace_exits_3() {
    let dir = TempDir::new().unwrap();
    let trace = simulate(&dir, &SCENARIO.replace("\"seed\": 7", "\"seed\": 7, \"sensor\": {\"sigma_dist\": 15, \"sigma_angle\": 0.15, \"max_range\": 5}"));
    let o = swarmloc(&[
        "localize",
        "--trace",
        &trace,
        "--mode",
        "full",
        "--out",
        &path(&dir, "e.csv"),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("initialization"), "{}", stderr(&o));
}

#[test]
fn calibrate_exact_and_failing() {
    let dir = TempDir::new().unwrap();
    let mut text = String::from("range_cm,magnitude\n");
    for d in [2.0f64, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0] {
        // D = 400 M^-2  =>  M = sqrt(400 / D)
        text.push_str(&format!("{d},{}\n", (400.0 / d).sqrt()));
    }
    let csv = write(&dir, "cal.csv", &text);
    let out = path(&dir, "cal.json");
    let o = swarmloc(&[
        "calibrate",
        "--samples",
        &csv,
        "--saturation",
        "5",
        "--out",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!((v["exponent"].as_f64().unwrap() + 2.0).abs() < 1e-9);
    assert!((v["amplitude"].as_f64().unwrap() - 400.0).abs() < 1e-6);
    assert_eq!(v["n_samples_used"], 5);

    let short = write(&dir, "short.csv", "range_cm,magnitude\n10,5\n20,3\n");
    let o = swarmloc(&["calibrate", "--samples", &short]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn reproduce_fig6a_passes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("fig");
    let o = swarmloc(&[
        "reproduce",
        "--figure",
        "fig6a",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("fig6a: PASS"), "{}", stdout(&o));
    let rows = read_csv(out.join("fig6a_positions.csv").to_str().unwrap());
    assert_eq!(rows.len(), 21);
    assert!(out.join("fig6a_summary.json").exists());
}

#[test]
fn unknown_mode_is_an_input_error() {
    let o = swarmloc(&["localize", "--trace", "x", "--mode", "ekf", "--out", "y"]);
    assert_eq!(o.status.code(), Some(2));
}
