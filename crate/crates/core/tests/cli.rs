use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"scenario = "compare"
seed = 2

[data]
num_classes = 3
samples_per_class = 30
feature_dim = 4
num_clients = 3
alpha = 1.0

[model]
hidden = [8]

[fed]
rounds = 3
lr = 0.1
local_baseline_epochs = 2
"#;

fn fedmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmem")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_accepts_and_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.toml", SMALL);
    let o = fedmem(&["validate", &good]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("ok"));

    let missing = write(dir.path(), "missing.toml", &SMALL[..SMALL.find("[fed]").unwrap()]);
    let o = fedmem(&["validate", &missing]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("[fed]"), "{}", stderr(&o));

    let typo = write(dir.path(), "typo.toml", &SMALL.replace("alpha = 1.0", "alpah = 1.0"));
    let o = fedmem(&["validate", &typo]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 9"), "{}", stderr(&o));

    let o = fedmem(&["validate", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn run_honors_seed_and_out() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    let o = fedmem(&["run", &cfg, "--seed", "11", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=11\n") && manifest.contains("status=complete\n"));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "group,method,weighted_avg,unweighted_avg,bottom_decile,num_clients");
    let methods: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(methods, ["local", "fedavg", "fedavg_plus", "knn_per"]);
    let rounds = std::fs::read_to_string(out.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 4);
    let lambdas = std::fs::read_to_string(out.join("lambda_report.csv")).unwrap();
    assert!(lambdas.starts_with("client_id,n_m,lambda_star,val_acc,test_acc\n"));

    // a different seed changes the data and therefore the numbers
    let out2 = dir.path().join("out2");
    assert!(fedmem(&["run", &cfg, "--out", out2.to_str().unwrap()]).status.success());
    assert_ne!(std::fs::read(out.join("rounds.csv")).unwrap(), std::fs::read(out2.join("rounds.csv")).unwrap());
}

#[test]
fn failed_run_writes_a_failed_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &SMALL.replace("samples_per_class = 30", "samples_per_class = 1"));
    let out = dir.path().join("out");
    let o = fedmem(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("at least 3"), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("status=failed\n"));
}

#[test]
fn export_scenario_writes_client_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("scenario");
    let o = fedmem(&["export-scenario", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for m in 0..3 {
        let bytes = std::fs::read(out.join(format!("client_{m:04}.bin"))).unwrap();
        let (client, classes) = fedmem_core::data::decode_client(&bytes).unwrap();
        assert_eq!((client.client_id, classes), (m, 3));
    }
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("num_clients=3\n"));
}

#[test]
fn drift_timeline_switches_at_t0() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("scenario = \"compare\"", "scenario = \"drift\"").replace("samples_per_class = 30", "samples_per_class = 200")
        + "\n[drift]\nt0 = 3\nhorizon = 6\npolicies = [\"fixed\", \"fifo\"]\n";
    let cfg = write(dir.path(), "d.toml", &text);
    let out = dir.path().join("out");
    let o = fedmem(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let timeline = std::fs::read_to_string(out.join("timeline.csv")).unwrap();
    let mut lines = timeline.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,policy,distribution,weighted_avg,unweighted_avg,bottom_decile,mean_store_size"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 12);
    for r in &rows {
        let t: usize = r[0].parse().unwrap();
        assert_eq!(r[2], if t < 3 { "before" } else { "after" });
    }
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("drift_evaluation="));
}
