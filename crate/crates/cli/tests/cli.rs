use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
model = cnn_small
bits.w = 2
bits.a = 2
tr.enabled = true
steps = 8
batch_size = 16
data.synthetic.classes = 3
data.synthetic.per_class = 16
data.synthetic.test_per_class = 4
data.synthetic.dim = 16
";

fn qat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qat")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = qat(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("final test accuracy"));
    for f in ["metrics.csv", "epochs.csv", "checkpoint.bin", "config.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,layer,k,K,R,U,ess_latent,ess_quant,dist_tp,loss"));
}

#[test]
fn misspelled_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}tr.lamda = 0.002\n"));
    let o = qat(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 2);
    assert!(text(&o).contains("tr.lamda"), "{}", text(&o));
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}data.kind = mnist\ndata.path = /nonexistent/mnist\n"));
    let o = qat(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 2, "{}", text(&o));
}

#[test]
fn divergence_exits_3_with_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}tr.enabled = false\nlr.initial = 1e30\nlr.schedule = constant\n"));
    let out = dir.path().join("r");
    let o = qat(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 3, "{}", text(&o));
    assert!(out.join("metrics.csv").is_file());
}

fn summary_rows(out: &Path) -> Vec<String> {
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("lambda,final_test_acc,status"));
    lines.map(str::to_string).collect()
}

#[test]
fn sweep_single_lambda_gives_one_row_and_refuses_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("sweep");
    let o = qat(&["sweep", "--config", s(&cfg), "--out", s(&out), "--lambdas", "0.004"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let rows = summary_rows(&out);
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("0.004,"));

    let again = qat(&["sweep", "--config", s(&cfg), "--out", s(&out), "--lambdas", "0.004"]);
    assert_eq!(code(&again), 2);
    let forced = qat(&["sweep", "--config", s(&cfg), "--out", s(&out), "--lambdas", "0.004", "--force"]);
    assert_eq!(code(&forced), 0, "{}", text(&forced));
}

#[test]
fn sweep_default_grid_gives_ten_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("steps = 8", "steps = 2"));
    let out = dir.path().join("grid");
    let o = qat(&["sweep", "--config", s(&cfg), "--out", s(&out), "--parallel", "2"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let rows = summary_rows(&out);
    assert_eq!(rows.len(), 10);
    assert!(rows[0].starts_with("0.001,") && rows[9].starts_with("0.01,"), "{rows:?}");
}

#[test]
fn export_writes_four_charts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    assert_eq!(code(&qat(&["train", "--config", s(&cfg), "--out", s(&run)])), 0);
    let o = qat(&["export", s(&run), "--smooth", "0.99"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let svgs = std::fs::read_dir(run.join("plots"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svgs, 4);
    assert!(run.join("plots/series.csv").is_file());
}

#[test]
fn export_rejects_empty_csv_and_bad_smoothing() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    assert_ne!(code(&qat(&["export", s(&empty)])), 0);
    let header = dir.path().join("header.csv");
    std::fs::write(&header, "step,layer,k,K,R,U,ess_latent,ess_quant,dist_tp,loss\n").unwrap();
    assert_eq!(code(&qat(&["export", s(&header)])), 2);
    let row = dir.path().join("row.csv");
    std::fs::write(&row, "step,layer,k,K,R,U,ess_latent,ess_quant,dist_tp,loss\n1,conv2,0.1,0.001,0.007,0.01,0.001,0.01,0.2,1.0\n")
        .unwrap();
    assert_eq!(code(&qat(&["export", s(&row), "--smooth", "1.5"])), 2);
}

#[test]
fn oracle_passes_and_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let o = qat(&["oracle", "--report", s(&report)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["checks"].as_array().unwrap().len() > 20);
}

#[test]
fn injected_rounding_fault_fails_the_recount() {
    let o = qat(&["oracle", "--inject-fault", "rounding"]);
    assert_eq!(code(&o), 1);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let failed: Vec<&str> = v["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"transitions.random"), "{failed:?}");
}

#[test]
fn oracle_filter_runs_only_ess_checks() {
    let o = qat(&["oracle", "--filter", "ess"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let names: Vec<&str> = v["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert!(!names.is_empty() && names.iter().all(|n| n.starts_with("ess.")), "{names:?}");
}
