//! Typed scenario results and their CSV / manifest rendering.

use std::path::Path;

use crate::error::{FedError, Result};
use crate::federation::RoundLog;

/// Population accuracy summary over a set of clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Accuracy averaged with weights `n_m`.
    pub weighted: f64,
    pub unweighted: f64,
    /// Accuracy of the client ranked `ceil(M / 10)` from the worst.
    pub bottom_decile: f64,
    pub num_clients: usize,
}

/// Summarizes `(n_m, accuracy)` pairs.
pub fn metrics(per_client: &[(usize, f64)]) -> Result<Metrics> {
    if per_client.is_empty() {
        return Err(FedError::Input("no clients to summarize".into()));
    }
    let n: usize = per_client.iter().map(|p| p.0).sum();
    let m = per_client.len();
    let weighted = if n == 0 {
        f64::NAN
    } else {
        per_client.iter().map(|&(w, a)| w as f64 * a).sum::<f64>() / n as f64
    };
    let unweighted = per_client.iter().map(|p| p.1).sum::<f64>() / m as f64;
    let mut accs: Vec<f64> = per_client.iter().map(|p| p.1).collect();
    accs.sort_by(f64::total_cmp);
    let rank = m.div_ceil(10);
    Ok(Metrics { weighted, unweighted, bottom_decile: accs[rank - 1], num_clients: m })
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub group: String,
    pub method: String,
    /// Sweep coordinates; the keys are the same for every row of a report.
    pub settings: Vec<(&'static str, String)>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRow {
    pub client_id: usize,
    /// Datastore size.
    pub n_m: usize,
    pub lambda_star: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    /// Label of the federated run the round belongs to.
    pub run: String,
    pub log: RoundLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineRow {
    pub t: usize,
    pub policy: String,
    /// `before` or `after` the shift.
    pub distribution: &'static str,
    pub metrics: Metrics,
    pub mean_store_size: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub scenario: String,
    pub metrics: Vec<MetricRow>,
    pub rounds: Vec<RoundRow>,
    pub lambdas: Vec<LambdaRow>,
    pub timeline: Vec<TimelineRow>,
}

pub fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

impl Report {
    /// First row matching group, method and every given setting.
    pub fn find(&self, group: &str, method: &str, settings: &[(&str, &str)]) -> Option<&Metrics> {
        self.metrics
            .iter()
            .find(|r| {
                r.group == group
                    && r.method == method
                    && settings
                        .iter()
                        .all(|(k, v)| r.settings.iter().any(|(rk, rv)| rk == k && rv == v))
            })
            .map(|r| &r.metrics)
    }

    pub fn metrics_table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let keys: Vec<&str> = self
            .metrics
            .first()
            .map(|r| r.settings.iter().map(|s| s.0).collect())
            .unwrap_or_default();
        let mut header = vec!["group".to_string(), "method".to_string()];
        header.extend(keys.iter().map(|k| k.to_string()));
        header.extend(
            ["weighted_avg", "unweighted_avg", "bottom_decile", "num_clients"].map(String::from),
        );
        let rows = self
            .metrics
            .iter()
            .map(|r| {
                let mut row = vec![r.group.clone(), r.method.clone()];
                row.extend(r.settings.iter().map(|s| s.1.clone()));
                row.extend([
                    fmt_f(r.metrics.weighted),
                    fmt_f(r.metrics.unweighted),
                    fmt_f(r.metrics.bottom_decile),
                    r.metrics.num_clients.to_string(),
                ]);
                row
            })
            .collect();
        (header, rows)
    }

    pub fn rounds_table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = ["round", "participant_count", "global_loss", "run"].map(String::from).to_vec();
        let rows = self
            .rounds
            .iter()
            .map(|r| {
                vec![
                    r.log.round.to_string(),
                    r.log.participants.len().to_string(),
                    fmt_f(r.log.global_loss),
                    r.run.clone(),
                ]
            })
            .collect();
        (header, rows)
    }

    pub fn lambda_table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = ["client_id", "n_m", "lambda_star", "val_acc", "test_acc"].map(String::from).to_vec();
        let rows = self
            .lambdas
            .iter()
            .map(|r| {
                vec![
                    r.client_id.to_string(),
                    r.n_m.to_string(),
                    fmt_f(r.lambda_star),
                    fmt_f(r.val_acc),
                    fmt_f(r.test_acc),
                ]
            })
            .collect();
        (header, rows)
    }

    pub fn timeline_table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = [
            "t",
            "policy",
            "distribution",
            "weighted_avg",
            "unweighted_avg",
            "bottom_decile",
            "mean_store_size",
        ]
        .map(String::from)
        .to_vec();
        let rows = self
            .timeline
            .iter()
            .map(|r| {
                vec![
                    r.t.to_string(),
                    r.policy.clone(),
                    r.distribution.to_string(),
                    fmt_f(r.metrics.weighted),
                    fmt_f(r.metrics.unweighted),
                    fmt_f(r.metrics.bottom_decile),
                    fmt_f(r.mean_store_size),
                ]
            })
            .collect();
        (header, rows)
    }

    /// Writes the four CSV tables into `dir`; returns the file names.
    pub fn write_csvs(&self, dir: &Path) -> Result<Vec<&'static str>> {
        std::fs::create_dir_all(dir)?;
        let tables = [
            ("metrics.csv", self.metrics_table()),
            ("rounds.csv", self.rounds_table()),
            ("lambda_report.csv", self.lambda_table()),
            ("timeline.csv", self.timeline_table()),
        ];
        let mut names = Vec::new();
        for (name, (header, rows)) in tables {
            write_csv(&dir.join(name), &header, &rows)?;
            names.push(name);
        }
        Ok(names)
    }
}

fn csv_err(e: csv::Error) -> FedError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FedError::Io(io),
        other => FedError::Format(format!("{other:?}")),
    }
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `key=value` lines, one per pair.
pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        let v = v.replace('\n', " ");
        text.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_summaries() {
        let m = metrics(&[(10, 1.0), (30, 0.5)]).unwrap();
        assert!((m.weighted - 0.625).abs() < 1e-15);
        assert!((m.unweighted - 0.75).abs() < 1e-15);
        // ceil(2 / 10) = 1: the worst client
        assert_eq!(m.bottom_decile, 0.5);

        let many: Vec<(usize, f64)> = (0..20).map(|i| (1, i as f64 / 20.0)).collect();
        // ceil(20 / 10) = 2: second worst
        assert_eq!(metrics(&many).unwrap().bottom_decile, 0.05);
        let eleven: Vec<(usize, f64)> = (0..11).rev().map(|i| (1, i as f64)).collect();
        assert_eq!(metrics(&eleven).unwrap().bottom_decile, 1.0);
        assert!(metrics(&[]).is_err());
    }

    #[test]
    fn tables_have_stable_headers() {
        let m = metrics(&[(1, 0.5)]).unwrap();
        let report = Report {
            scenario: "x".into(),
            metrics: vec![MetricRow {
                group: "all".into(),
                method: "fedavg".into(),
                settings: vec![("alpha", "0.1".into())],
                metrics: m,
            }],
            ..Default::default()
        };
        let (h, rows) = report.metrics_table();
        assert_eq!(
            h,
            ["group", "method", "alpha", "weighted_avg", "unweighted_avg", "bottom_decile", "num_clients"]
        );
        assert_eq!(rows[0][3], "0.500000");
        assert!(report.find("all", "fedavg", &[("alpha", "0.1")]).is_some());
        assert!(report.find("all", "fedavg", &[("alpha", "1")]).is_none());

        let dir = tempfile::tempdir().unwrap();
        let names = report.write_csvs(dir.path()).unwrap();
        assert_eq!(names.len(), 4);
        let text = std::fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
        assert_eq!(text, "round,participant_count,global_loss,run\n");
    }
}
