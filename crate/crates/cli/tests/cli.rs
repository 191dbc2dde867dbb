use std::path::Path;
use std::process::{Command, Output};

fn ztpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ztpc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn kappa_command() {
    let v = stdout_json(&ztpc(&["theory", "kappa", "--beta", "1"]));
    assert!((v["sqrt_kappa"].as_f64().unwrap() - 2.5839).abs() < 1e-4);
    assert!(!ztpc(&["theory", "kappa", "--beta", "0"]).status.success());
}

#[test]
fn bound_command_flags_vacuous_results() {
    let v = stdout_json(&ztpc(&[
        "theory", "bound", "--kind", "ztp_nncp", "--dims", "100,100,100", "--rank", "5", "--beta", "1",
        "--alpha", "2.5", "--omega-size", "300000", "--warn-vacuous",
    ]));
    assert!(v["bound"].as_f64().unwrap() > 1.0);
    assert_eq!(v["vacuous"], true);
    assert_eq!(v["dimension_requirement_met"], true);
    let plain = stdout_json(&ztpc(&[
        "theory", "bound", "--kind", "poisson_cp", "--dims", "50,50,50", "--rank", "2", "--beta", "1",
        "--alpha", "2", "--omega-size", "1000",
    ]));
    assert!(plain.get("vacuous").is_none());
    assert_eq!(plain["dimension_requirement_met"], false);
}

#[test]
fn verify_kl_command() {
    let v = stdout_json(&ztpc(&[
        "theory", "verify-kl", "--beta", "0.1", "--alpha", "2.5", "--samples", "5000", "--seed", "3",
    ]));
    assert_eq!(v["poisson_violations"], 0);
    assert_eq!(v["ztp_violations"], 0);
    assert_eq!(v["samples"], 5003);
}

#[test]
fn generate_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = ztpc(&[
        "generate", "--dims", "6,5,4", "--rank", "2", "--beta", "1", "--alpha", "2.5", "--omega-frac", "0.5",
        "--seed", "9", "--out", path(&data),
    ]);
    let summary = stdout_json(&out);
    assert_eq!(summary["omega_size"], 60);
    for f in ["truth.json", "counts.tns", "omega.txt", "gamma.txt"] {
        assert!(data.join(f).exists(), "{f} missing");
    }

    let fit_json = dir.path().join("fit.json");
    let out = ztpc(&[
        "fit",
        "--method",
        "oracle",
        "--counts",
        path(&data.join("counts.tns")),
        "--omega",
        path(&data.join("omega.txt")),
        "--rank",
        "2",
        "--seed",
        "1",
        "--max-iters",
        "200",
        "--truth",
        path(&data.join("truth.json")),
        "--out",
        path(&fit_json),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("final_nll: ") && text.contains("rel_error: "));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&fit_json).unwrap()).unwrap();
    assert_eq!(doc["method"], "oracle");
    assert_eq!(doc["model"]["shape"], serde_json::json!([6, 5, 4]));
    assert!(doc["iterations"].as_u64().unwrap() <= 200);
    let printed: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("final_nll: "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(printed, doc["final_nll"].as_f64().unwrap());
}

#[test]
fn fit_rejects_unknown_method_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.tns");
    let out = dir.path().join("o.json");
    assert!(!ztpc(&["fit", "--method", "bogus", "--counts", path(&missing), "--rank", "1", "--out", path(&out)])
        .status
        .success());
    let r = ztpc(&["fit", "--method", "ztp", "--counts", path(&missing), "--rank", "1", "--out", path(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("none.tns"));
}

#[test]
fn experiment_writes_csv_and_script() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"order":3,"dims":6,"rank":2,"beta":1.0,"alpha":2.5,"omega_fractions":[0.5,1.0],
            "replicates":2,"methods":["poisson","oracle"],"seed":5}"#,
    )
    .unwrap();
    let csv = dir.path().join("r.csv");
    let out = ztpc(&["experiment", "--config", path(&cfg), "--out", path(&csv), "--workers", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,omega_fraction,mean_rel_error,std_rel_error,mean_iterations,flagged"
    );
    assert_eq!(lines.count(), 4);
    let script = std::fs::read_to_string(dir.path().join("r.gp")).unwrap();
    assert!(script.contains("'r.csv'"));

    // Same config, same bytes.
    let csv2 = dir.path().join("r2.csv");
    assert!(ztpc(&["experiment", "--config", path(&cfg), "--out", path(&csv2)]).status.success());
    assert_eq!(text, std::fs::read_to_string(&csv2).unwrap());
}

#[test]
fn experiment_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"order":3,"dims":6,"rank":2,"beta":1.0,"alpha":2.5,"omega_fractions":[1.0,0.5],
            "replicates":2,"seed":5}"#,
    )
    .unwrap();
    let out = ztpc(&["experiment", "--config", path(&cfg), "--out", path(&dir.path().join("r.csv"))]);
    assert!(!out.status.success());
}
