use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_choiceforest"));
    c.env_remove("CHOICEFOREST_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    assert_eq!(text.trim().lines().count(), 1, "stderr: {text}");
    serde_json::from_str(text.trim()).expect("stderr is JSON")
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn write_spec(dir: &TempDir) -> String {
    let path = p(dir, "spec.json");
    std::fs::write(&path, r#"{"type":"mnl","utilities":[0.8,0.1,-0.4,0.3]}"#).unwrap();
    path
}

fn simulate(dir: &TempDir, extra: &[&str], out: &str) -> String {
    let spec = write_spec(dir);
    let path = p(dir, out);
    let mut args = vec![
        "simulate",
        "--spec",
        &spec,
        "--transactions",
        "1500",
        "--seed",
        "7",
        "--output",
        &path,
    ];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    path
}

fn probs(v: &Value) -> Vec<f64> {
    v["probabilities"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

#[test]
fn fit_predict_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &[], "tx.csv");
    let model = p(&dir, "m.json");
    let summary = ok_json(&[
        "fit",
        "--input",
        &data,
        "--output",
        &model,
        "--trees",
        "40",
        "--leaf-min",
        "5",
    ]);
    assert_eq!(summary["transactions"], 1500);
    assert_eq!(summary["products"], 4);
    assert!(summary.get("seconds").is_none());

    let v = ok_json(&["predict", "--model", &model, "--assortment", "1,3"]);
    let pr = probs(&v);
    assert_eq!(pr.len(), 5);
    assert_eq!(pr[2], 0.0);
    assert_eq!(pr[4], 0.0);
    assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // product 1 has the highest utility of the offered pair
    assert!(pr[1] > pr[3]);

    let x = ok_json(&["predict", "--model", &model, "--x", "1,0,1,0"]);
    assert_eq!(probs(&x), pr);
}

#[test]
fn fit_output_is_byte_identical_across_threads() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &[], "tx.csv");
    let a = p(&dir, "a.json");
    let b = p(&dir, "b.json");
    ok_json(&[
        "--threads",
        "1",
        "fit",
        "--input",
        &data,
        "--output",
        &a,
        "--trees",
        "30",
    ]);
    let o = bin()
        .env("CHOICEFOREST_THREADS", "3")
        .args(["fit", "--input", &data, "--output", &b, "--trees", "30"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn timing_is_opt_in() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &[], "tx.csv");
    let model = p(&dir, "m.json");
    let s = ok_json(&[
        "fit", "--input", &data, "--output", &model, "--trees", "5", "--timing",
    ]);
    assert!(s["seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn importance_lists_every_dimension() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &[], "tx.csv");
    let model = p(&dir, "m.json");
    ok_json(&["fit", "--input", &data, "--output", &model, "--trees", "20"]);
    let v = ok_json(&["importance", "--model", &model, "--input", &data]);
    let rows = v["importance"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r["dim"], k + 1);
        assert!(r["mdi"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn price_data_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &["--format", "prices"], "p.csv");
    let head = std::fs::read_to_string(&data).unwrap();
    assert!(head.starts_with("chosen,price_1,price_2,price_3,price_4\n"));
    let model = p(&dir, "pm.json");
    ok_json(&[
        "fit", "--input", &data, "--format", "prices", "--link", "arctan", "--output", &model,
        "--trees", "20",
    ]);
    let v = ok_json(&["predict", "--model", &model, "--prices", "1,inf,2,0.5"]);
    let pr = probs(&v);
    assert_eq!(pr[2], 0.0);
    assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(v["offered"], serde_json::json!([1, 3, 4]));
}

#[test]
fn aggregated_data_fits() {
    let dir = TempDir::new().unwrap();
    let data = simulate(
        &dir,
        &["--format", "aggregated", "--level", "5", "--pool", "6"],
        "a.csv",
    );
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 1 + 1500 / 5);
    let model = p(&dir, "am.json");
    let s = ok_json(&[
        "fit",
        "--input",
        &data,
        "--format",
        "aggregated",
        "--output",
        &model,
        "--trees",
        "10",
    ]);
    assert_eq!(s["products"], 4);
}

#[test]
fn parse_errors_report_the_line() {
    let dir = TempDir::new().unwrap();
    let bad = p(&dir, "bad.csv");
    std::fs::write(&bad, "chosen,x1,x2\n1,1,0\n\n2,0,oops\n").unwrap();
    let out = run(&["fit", "--input", &bad, "--output", &p(&dir, "m.json")]);
    assert_eq!(out.status.code(), Some(1));
    let e = err_json(&out);
    assert_eq!(e["error"], "parse");
    assert_eq!(e["line"], 4);
}

#[test]
fn usage_errors_exit_two() {
    let out = run(&["fit", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(err_json(&out)["error"], "usage");

    let out = run(&["--threads", "0", "analyze", "gini", "--products", "3"]);
    assert_eq!(out.status.code(), Some(2));

    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("benchmark"));
}

#[test]
fn bad_product_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &[], "tx.csv");
    let model = p(&dir, "m.json");
    ok_json(&["fit", "--input", &data, "--output", &model, "--trees", "3"]);
    let out = run(&["predict", "--model", &model, "--assortment", "9"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(err_json(&out)["error"], "invalid-input");
    let missing = run(&[
        "predict",
        "--model",
        &p(&dir, "nope.json"),
        "--assortment",
        "1",
    ]);
    assert_eq!(err_json(&missing)["error"], "io");
}

#[test]
fn gini_curve_matches_closed_form() {
    let v = ok_json(&["analyze", "gini", "--products", "2"]);
    let g: Vec<f64> = v["theoretical"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    // exhaustive enumeration of the N=2 cube
    assert!((g[0] - 0.25).abs() < 1e-12);
    assert!((g[1] - 0.5).abs() < 1e-12);
}

#[test]
fn distance_and_pnn_reports() {
    let d = ok_json(&[
        "analyze",
        "distance",
        "--products",
        "5",
        "--family",
        "4",
        "--reps",
        "500",
        "--seed",
        "2",
    ]);
    let mean = d["mean"].as_f64().unwrap();
    assert!(mean > 0.0 && mean < 5.0);
    let hist: u64 = d["histogram"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap())
        .sum();
    assert_eq!(hist, 500);

    let dir = TempDir::new().unwrap();
    let data = p(&dir, "pnn.csv");
    std::fs::write(
        &data,
        "chosen,x1,x2,x3\n1,1,1,0\n2,0,1,1\n0,1,0,1\n3,0,0,1\n",
    )
    .unwrap();
    let r = ok_json(&[
        "analyze",
        "pnn",
        "--input",
        &data,
        "--assortment",
        "1,2,3",
        "--trees",
        "50",
    ]);
    let total: f64 = r["co_leaf"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["frequency"].as_f64().unwrap())
        .sum();
    assert!(total > 0.0);
    // bootstrap can drop a dominating assortment, so far occupants are rare
    // rather than impossible
    let near: f64 = r["co_leaf"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["pnn"] == true)
        .map(|c| c["frequency"].as_f64().unwrap())
        .sum();
    assert!(near > 0.5 * total, "{r}");
}

#[test]
fn benchmark_writes_report_and_table() {
    let dir = TempDir::new().unwrap();
    let cfg = p(&dir, "cfg.json");
    std::fs::write(
        &cfg,
        r#"{"n_products":4,"scenario":{"mode":"choice","generator":{"kind":"mnl"}},"pool_size":10,
            "transactions":300,"estimators":["rf","mnl"],"replications":2,"forest":{"n_trees":10,"leaf_min":5}}"#,
    )
    .unwrap();
    let table = p(&dir, "t.csv");
    let v = ok_json(&["benchmark", "--config", &cfg, "--table", &table]);
    assert!(v.is_object());
    let csv = std::fs::read_to_string(Path::new(&table)).unwrap();
    assert!(csv.lines().next().unwrap().contains("RF"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn simulate_is_seeded() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(&dir);
    let a = run(&[
        "simulate",
        "--spec",
        &spec,
        "--transactions",
        "50",
        "--seed",
        "4",
    ]);
    let b = run(&[
        "simulate",
        "--spec",
        &spec,
        "--transactions",
        "50",
        "--seed",
        "4",
    ]);
    let c = run(&[
        "simulate",
        "--spec",
        &spec,
        "--transactions",
        "50",
        "--seed",
        "5",
    ]);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn empty_assortment_predicts_no_purchase() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &[], "tx.csv");
    let model = p(&dir, "m.json");
    ok_json(&["fit", "--input", &data, "--output", &model, "--trees", "10"]);
    let v = ok_json(&["predict", "--model", &model, "--assortment", ""]);
    assert_eq!(probs(&v), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn saturated_model_reproduces_training_frequencies() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &["--pool", "1"], "tx.csv");
    let text = std::fs::read_to_string(&data).unwrap();
    let mut counts = [0.0; 5];
    let mut offered = String::new();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        counts[cells[0].parse::<usize>().unwrap()] += 1.0;
        offered = (1..=4)
            .filter(|&j| cells[j] == "1")
            .map(|j| j.to_string())
            .collect::<Vec<_>>()
            .join(",");
    }
    let model = p(&dir, "m.json");
    ok_json(&["fit", "--input", &data, "--output", &model, "--trees", "2000", "--leaf-min", "1"]);
    let pr = probs(&ok_json(&["predict", "--model", &model, "--assortment", &offered]));
    for (q, c) in pr.iter().zip(counts) {
        // each tree votes one in-bag draw, so 2000 votes leave ~0.011 noise
        assert!((q - c / 1500.0).abs() < 0.04, "{pr:?} vs {counts:?}");
    }
}

#[test]
fn model_file_round_trips() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &[], "tx.csv");
    let (a, b) = (p(&dir, "a.json"), p(&dir, "b.json"));
    ok_json(&["fit", "--input", &data, "--output", &a, "--trees", "25", "--seed", "9"]);
    ok_json(&["fit", "--input", &data, "--output", &b, "--trees", "25", "--seed", "9"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let first = ok_json(&["predict", "--model", &a, "--assortment", "2,3,4"]);
    let second = ok_json(&["predict", "--model", &b, "--assortment", "2,3,4"]);
    assert_eq!(first, second);
}

#[test]
fn aggregated_summary_counts_bookings() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &["--format", "aggregated", "--level", "7"], "a.csv");
    let bookings: u64 = std::fs::read_to_string(&data)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(4).map(|c| c.parse::<u64>().unwrap()).sum::<u64>())
        .sum();
    let s = ok_json(&[
        "fit", "--input", &data, "--format", "aggregated", "--output", &p(&dir, "m.json"), "--trees", "5",
    ]);
    assert_eq!(s["transactions"].as_u64().unwrap(), bookings);
}

#[test]
fn price_thresholds_live_in_the_link_range() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, &["--format", "prices"], "p.csv");
    let model = p(&dir, "m.json");
    ok_json(&["fit", "--input", &data, "--format", "prices", "--link", "exp", "--output", &model, "--trees", "10"]);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    fn walk(node: &Value, out: &mut Vec<f64>) {
        if let Some(t) = node.get("threshold") {
            out.push(t.as_f64().unwrap());
        }
        for v in node.as_object().into_iter().flat_map(|o| o.values()) {
            if v.is_object() {
                walk(v, out);
            }
        }
    }
    let mut thresholds = Vec::new();
    for tree in m["forest"]["trees"].as_array().unwrap() {
        walk(tree, &mut thresholds);
    }
    assert!(!thresholds.is_empty());
    assert!(thresholds.iter().all(|&t| t > 0.0 && t < 1.0));
}

#[test]
fn single_ranking_importance_decreases() {
    let dir = TempDir::new().unwrap();
    let spec = p(&dir, "rank.json");
    std::fs::write(
        &spec,
        r#"{"type":"rank","n_products":6,"rankings":[[1,2,3,4,5,6,0]],"weights":[1.0]}"#,
    )
    .unwrap();
    let data = p(&dir, "tx.csv");
    let o = run(&["simulate", "--spec", &spec, "--transactions", "5000", "--offer-prob", "0.5", "--output", &data]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let model = p(&dir, "m.json");
    ok_json(&["fit", "--input", &data, "--output", &model, "--trees", "100"]);
    let v = ok_json(&["importance", "--model", &model, "--input", &data]);
    let mdi: Vec<f64> = v["importance"].as_array().unwrap().iter().map(|r| r["mdi"].as_f64().unwrap()).collect();
    assert!(mdi.windows(2).all(|w| w[0] > w[1]), "{mdi:?}");
}

#[test]
fn ranking_recovery_is_near_complete_with_ample_data() {
    let v = ok_json(&["analyze", "ranking-recovery", "--transactions", "10000", "--reps", "100"]);
    assert!(v["mean"].as_f64().unwrap() >= 9.5, "{v}");
}

#[test]
fn benchmark_table_layout() {
    let dir = TempDir::new().unwrap();
    let cfg = p(&dir, "cfg.json");
    let cell = |pool: usize, t: usize| {
        format!(
            r#"{{"n_products":5,"scenario":{{"mode":"choice","generator":{{"kind":"rank","types":4}}}},"pool_size":{pool},
                "transactions":{t},"estimators":["rf","mnl","mc"],"replications":2,"forest":{{"n_trees":20}}}}"#
        )
    };
    std::fs::write(&cfg, format!("[{},{},{}]", cell(10, 300), cell(30, 300), cell(10, 600))).unwrap();
    let table = p(&dir, "t.csv");
    let v = ok_json(&["benchmark", "--config", &cfg, "--table", &table]);
    assert_eq!(v.as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert_eq!(lines[0].split(',').count(), 1 + 2 * 3, "{csv}");
    assert!(lines[1].starts_with("300,") && lines[2].starts_with("600,"), "{csv}");
}

#[test]
fn config_errors_name_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = p(&dir, "cfg.json");
    std::fs::write(
        &cfg,
        r#"{"scenario":{"mode":"choice","generator":{"kind":"mnl"}},"transactions":10,"estimators":["rf"],"replications":0}"#,
    )
    .unwrap();
    let out = run(&["benchmark", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let e = err_json(&out);
    assert!(e["message"].as_str().unwrap().contains("replications"), "{e}");
}
