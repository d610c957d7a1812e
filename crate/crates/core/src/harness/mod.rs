//! Experiment harness: config loading, scenario dispatch and output files.

pub mod config;
pub mod report;
pub mod scenarios;

use std::path::{Path, PathBuf};

pub use config::{ExperimentConfig, Scenario};
pub use report::{metrics, Metrics, Report};

use crate::data::{export_scenario as write_scenario, label_entropy};
use crate::error::Result;

/// Runs the configured scenario without touching the filesystem.
pub fn run_scenario(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    match cfg.scenario {
        Scenario::Compare => scenarios::compare(cfg),
        Scenario::Unseen => scenarios::unseen(cfg),
        Scenario::CapacitySweep => scenarios::capacity_sweep(cfg),
        Scenario::KernelSweep => scenarios::kernel_sweep(cfg),
        Scenario::QualitySweep => scenarios::quality_sweep(cfg),
        Scenario::HwSplit => scenarios::hw_split(cfg),
        Scenario::Drift => scenarios::drift(cfg),
    }
}

fn manifest_head(cfg: &ExperimentConfig, status: &str) -> Vec<(String, String)> {
    vec![
        ("fedmem_version".into(), env!("CARGO_PKG_VERSION").into()),
        ("scenario".into(), cfg.scenario.name().into()),
        ("seed".into(), cfg.seed.to_string()),
        ("status".into(), status.into()),
    ]
}

/// Applies the command-line overrides.
pub fn apply_overrides(cfg: &mut ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
}

/// Runs the scenario and writes the CSV tables plus `manifest.txt` into
/// `cfg.output_dir`. On failure the manifest is still written, with
/// `status=failed` and the error message.
pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.txt");
    let outcome = run_scenario(cfg).and_then(|report| {
        let files = report.write_csvs(dir)?;
        Ok((report, files))
    });
    match outcome {
        Ok((report, files)) => {
            let mut m = manifest_head(cfg, "complete");
            m.push(("files".into(), files.join(",")));
            m.push(("metric_rows".into(), report.metrics.len().to_string()));
            if cfg.scenario == Scenario::Drift {
                m.push((
                    "drift_evaluation".into(),
                    "steps before t0 score the pre-shift test split; steps from t0 on score the post-shift test split"
                        .into(),
                ));
            }
            m.extend(cfg.flattened().into_iter().map(|(k, v)| (format!("config.{k}"), v)));
            report::write_manifest(&manifest_path, &m)?;
            Ok(report)
        }
        Err(e) => {
            let mut m = manifest_head(cfg, "failed");
            m.push(("error".into(), e.to_string()));
            m.extend(cfg.flattened().into_iter().map(|(k, v)| (format!("config.{k}"), v)));
            // the original error matters more than a failed manifest write
            let _ = report::write_manifest(&manifest_path, &m);
            Err(e)
        }
    }
}

/// Writes the partitioned client datasets of the configuration into
/// `dir`: one binary file per client plus `manifest.txt`.
pub fn export_scenario(cfg: &ExperimentConfig, dir: &Path) -> Result<usize> {
    cfg.validate()?;
    let data = cfg.data()?;
    let pool = scenarios::make_pool(cfg)?;
    let clients = scenarios::make_clients(cfg, &pool, None)?;
    let mut manifest = manifest_head(cfg, "complete");
    manifest.push(("num_classes".into(), data.num_classes.to_string()));
    manifest.push(("feature_dim".into(), data.feature_dim.to_string()));
    manifest.push(("alpha".into(), data.alpha.to_string()));
    manifest.push(("partitioner".into(), format!("{:?}", data.partitioner).to_lowercase()));
    for c in &clients {
        let all: Vec<_> = c.train.iter().chain(&c.val).chain(&c.test).cloned().collect();
        manifest.push((format!("client_{:04}.n_total", c.client_id), c.n_total().to_string()));
        manifest.push((
            format!("client_{:04}.label_entropy", c.client_id),
            report::fmt_f(label_entropy(&all, data.num_classes)),
        ));
    }
    write_scenario(dir, &clients, data.num_classes, &manifest)?;
    Ok(clients.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::decode_client;

    const CFG: &str = r#"
scenario = "compare"
seed = 5

[data]
num_classes = 3
samples_per_class = 30
feature_dim = 4
num_clients = 3
alpha = 0.5

[model]
hidden = [8]

[fed]
rounds = 3
lr = 0.1
local_baseline_epochs = 2
"#;

    #[test]
    fn run_writes_tables_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::parse(CFG).unwrap();
        apply_overrides(&mut cfg, None, Some(dir.path().to_path_buf()));
        let report = run(&cfg).unwrap();
        assert_eq!(report.metrics.len(), 4);
        assert_eq!(report.rounds.len(), 3);
        for f in ["metrics.csv", "rounds.csv", "lambda_report.csv", "timeline.csv", "manifest.txt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("status=complete\n"));
        assert!(manifest.contains("config.data.alpha=0.5\n"));
    }

    #[test]
    fn failure_is_recorded_in_manifest() {
        let dir = tempfile::tempdir().unwrap();
        // 2 samples per class over 3 clients leaves some client degenerate
        let text = CFG.replace("samples_per_class = 30", "samples_per_class = 2");
        let mut cfg = ExperimentConfig::parse(&text).unwrap();
        apply_overrides(&mut cfg, Some(9), Some(dir.path().to_path_buf()));
        assert!(run(&cfg).is_err());
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("status=failed\n") && manifest.contains("seed=9\n"), "{manifest}");
    }

    #[test]
    fn export_round_trips_clients() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::parse(CFG).unwrap();
        assert_eq!(export_scenario(&cfg, dir.path()).unwrap(), 3);
        let pool = scenarios::make_pool(&cfg).unwrap();
        let clients = scenarios::make_clients(&cfg, &pool, None).unwrap();
        let bytes = std::fs::read(dir.path().join("client_0001.bin")).unwrap();
        let (decoded, classes) = decode_client(&bytes).unwrap();
        assert_eq!(classes, 3);
        assert_eq!(decoded.train.len(), clients[1].train.len());
        assert_eq!(decoded.test.iter().map(|s| s.y).collect::<Vec<_>>(), clients[1].test.iter().map(|s| s.y).collect::<Vec<_>>());
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("num_clients=3"));
        assert!(manifest.contains("client_0000.label_entropy="));
    }
}
