use std::path::Path;
use std::process::{Command, Output};

fn eivsub(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eivsub"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_response_observed_and_true_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim.csv");
    let res = eivsub(&["simulate", "--n", "50", "--p", "3", "--sigma-u2", "0.4", "--seed", "2", "--output", arg(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "y,w1,w2,w3,x1,x2,x3");
    assert_eq!(lines.count(), 50);

    let again = dir.path().join("again.csv");
    eivsub(&["simulate", "--n", "50", "--p", "3", "--sigma-u2", "0.4", "--seed", "2", "--output", arg(&again)]);
    assert_eq!(text, std::fs::read_to_string(&again).unwrap());
}

#[test]
fn estimate_on_a_csv_reports_every_coefficient() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("sim.csv");
    let report = dir.path().join("report.json");
    eivsub(&["simulate", "--n", "2000", "--p", "3", "--sigma-u2", "0.0", "--seed", "4", "--output", arg(&data)]);
    for method in ["FULL", "UNIF", "L-Opt", "A-Opt", "CLEPS", "IBOSS", "BLEV"] {
        let res = eivsub(&[
            "estimate", "--data", arg(&data), "--response", "y", "--covariates", "w1,w2,w3",
            "--sigma-u2", "0.1", "--method", method, "--r0", "100", "--r", "400", "--m", "5",
            "--output", arg(&report),
        ]);
        assert!(res.status.success(), "{method}: {}", String::from_utf8_lossy(&res.stderr));
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        let beta = json["beta"].as_array().unwrap();
        assert_eq!(beta.len(), 3, "{method}");
        for b in beta {
            assert!((b.as_f64().unwrap() - 1.0).abs() < 0.5, "{method}: {json}");
        }
    }
}

#[test]
fn probs_writes_one_probability_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("sim.csv");
    let out = dir.path().join("probs.csv");
    eivsub(&["simulate", "--n", "300", "--p", "2", "--sigma-u2", "0.2", "--seed", "1", "--output", arg(&data)]);
    let res = eivsub(&[
        "probs", "--data", arg(&data), "--response", "y", "--covariates", "w1,w2", "--design", "mV",
        "--r0", "50", "--output", arg(&out),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "index,prob");
    let probs: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(probs.len(), 300);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn missing_input_exits_with_code_two() {
    let res = eivsub(&["estimate", "--data", "/nonexistent/file.csv", "--response", "y", "--covariates", "a"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"methods": ["CLEPS"], "surprise": 1}"#).unwrap();
    let res = eivsub(&["bench", "--config", arg(&cfg)]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn collinear_design_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("flat.csv");
    let mut text = String::from("y,a,b\n");
    for i in 0..40 {
        text.push_str(&format!("{},{},{}\n", i % 7, i, i));
    }
    std::fs::write(&data, text).unwrap();
    let res = eivsub(&["estimate", "--data", arg(&data), "--response", "y", "--covariates", "a,b", "--method", "FULL"]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn bench_output_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"data": {"source": "simulate", "scenario": {"n": 2000, "p": 3, "sigma_u2": 0.4}},
            "methods": ["UNIF", "A-Opt", "CLEPS", "UL-Opt"], "r0": 100, "r_list": [200, 400],
            "m": 4, "replications": 12, "master_seed": 99}"#,
    )
    .unwrap();
    let outputs: Vec<String> = ["1", "3"]
        .iter()
        .map(|t| {
            let out = dir.path().join(format!("out{t}.csv"));
            let res = eivsub(&["--threads", t, "bench", "--config", arg(&cfg), "--output", arg(&out)]);
            assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
            std::fs::read_to_string(out).unwrap()
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0].lines().count(), 1 + 4 * 2);
}
