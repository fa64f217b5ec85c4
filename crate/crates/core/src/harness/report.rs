//! Summary tables over persisted run records: in-distribution performance,
//! held-out performance and environment leakage, one row per model label.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::runner::{load_records, RunRecord};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::training::Mode;

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRow {
    pub model: String,
    pub auroc: (f64, f64),
    pub auprc: (f64, f64),
    pub brier: (f64, f64),
    pub ece: (f64, f64),
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageRow {
    pub model: String,
    pub env_acc: (f64, f64),
    pub chance: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tables {
    pub in_distribution: Vec<SplitRow>,
    pub held_out: Vec<SplitRow>,
    pub leakage: Vec<LeakageRow>,
    pub failed_runs: usize,
}

fn label_rank(label: &str) -> (usize, String) {
    let rank = Mode::ALL
        .iter()
        .position(|m| m.as_str() == label)
        .unwrap_or(Mode::ALL.len());
    (rank, label.to_string())
}

fn split_row(model: &str, reports: &[&MetricsReport]) -> SplitRow {
    let col = |f: fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
    SplitRow {
        model: model.to_string(),
        auroc: col(|r| r.auroc),
        auprc: col(|r| r.auprc),
        brier: col(|r| r.brier),
        ece: col(|r| r.ece),
        seeds: reports.len(),
    }
}

/// Aggregate completed records by label. Rows follow the mode order
/// erm, adversarial_only, irm_only, full, then other labels alphabetically.
pub fn build_tables(records: &[RunRecord]) -> Result<Tables> {
    let done: Vec<&RunRecord> = records.iter().filter(|r| r.metrics.is_some()).collect();
    if done.is_empty() {
        return Err(Error::invalid("no completed run records to report"));
    }
    let mut labels: Vec<String> = done.iter().map(|r| r.spec.label.clone()).collect();
    labels.sort_by_key(|l| label_rank(l));
    labels.dedup();

    let mut tables = Tables {
        in_distribution: Vec::new(),
        held_out: Vec::new(),
        leakage: Vec::new(),
        failed_runs: records.len() - done.len(),
    };
    for label in &labels {
        let group: Vec<_> = done
            .iter()
            .filter(|r| &r.spec.label == label)
            .map(|r| r.metrics.as_ref().expect("completed"))
            .collect();
        let id: Vec<&MetricsReport> = group.iter().map(|m| &m.in_distribution).collect();
        let ood: Vec<&MetricsReport> = group.iter().map(|m| &m.held_out).collect();
        tables.in_distribution.push(split_row(label, &id));
        tables.held_out.push(split_row(label, &ood));
        let acc: Vec<f64> = group.iter().map(|m| m.leakage.env_accuracy).collect();
        tables.leakage.push(LeakageRow {
            model: label.clone(),
            env_acc: mean_std(&acc),
            chance: group[0].leakage.chance_level,
            seeds: group.len(),
        });
    }
    Ok(tables)
}

fn split_csv(rows: &[SplitRow], with_delta: bool) -> String {
    let erm = rows.iter().find(|r| r.model == "erm").map(|r| r.auroc.0);
    let delta = with_delta && erm.is_some();
    let mut s = String::from("model,auroc,auprc,brier,ece,auroc_std,auprc_std,brier_std,ece_std,seeds");
    if delta {
        s.push_str(",delta_auroc_vs_erm");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.model, r.auroc.0, r.auprc.0, r.brier.0, r.ece.0, r.auroc.1, r.auprc.1, r.brier.1, r.ece.1, r.seeds
        );
        if let (true, Some(base)) = (delta, erm) {
            let _ = write!(s, ",{}", r.auroc.0 - base);
        }
        s.push('\n');
    }
    s
}

fn split_text(title: &str, rows: &[SplitRow], with_delta: bool) -> String {
    let erm = rows.iter().find(|r| r.model == "erm").map(|r| r.auroc.0);
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let pm = |(m, sd): (f64, f64)| format!("{m:.3} ± {sd:.3}");
    let mut s = format!("{title}\n");
    let _ = write!(
        s,
        "{:<width$}  {:>13}  {:>13}  {:>13}  {:>13}",
        "Model", "AUROC", "AUPRC", "Brier ↓", "ECE ↓"
    );
    if with_delta && erm.is_some() {
        let _ = write!(s, "  {:>8}", "ΔAUROC");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{:<width$}  {:>13}  {:>13}  {:>13}  {:>13}",
            r.model,
            pm(r.auroc),
            pm(r.auprc),
            pm(r.brier),
            pm(r.ece)
        );
        if let (true, Some(base)) = (with_delta, erm) {
            let _ = write!(s, "  {:>+8.3}", r.auroc.0 - base);
        }
        s.push('\n');
    }
    s
}

fn leakage_csv(rows: &[LeakageRow]) -> String {
    let mut s = String::from("model,env_acc,env_acc_std,chance,seeds\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.model, r.env_acc.0, r.env_acc.1, r.chance, r.seeds);
    }
    s
}

fn leakage_text(rows: &[LeakageRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut s = String::from("Environment prediction accuracy from embeddings (lower is better)\n");
    let _ = writeln!(s, "{:<width$}  {:>16}  {:>7}", "Model", "Env. accuracy", "Chance");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>16}  {:>6.1}%",
            r.model,
            format!("{:.1}% ± {:.1}", 100.0 * r.env_acc.0, 100.0 * r.env_acc.1),
            100.0 * r.chance
        );
    }
    s
}

/// Render the three tables for every record under `run_dir`, writing
/// `table{1,2,3}_*.csv` and `.txt` into `run_dir`. Returns the written paths.
pub fn render_tables(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = load_records(run_dir)?;
    if records.is_empty() {
        return Err(Error::invalid(format!("no run records under {}", run_dir.display())));
    }
    let t = build_tables(&records)?;
    let files = [
        ("table1_in_distribution.csv", split_csv(&t.in_distribution, false)),
        (
            "table1_in_distribution.txt",
            split_text("In-distribution performance (mean over training environments)", &t.in_distribution, false),
        ),
        ("table2_held_out.csv", split_csv(&t.held_out, true)),
        (
            "table2_held_out.txt",
            split_text("Out-of-distribution performance on the held-out environment", &t.held_out, true),
        ),
        ("table3_leakage.csv", leakage_csv(&t.leakage)),
        ("table3_leakage.txt", leakage_text(&t.leakage)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = run_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn mode_labels_sort_first() {
        let mut l = vec!["full", "zzz", "erm", "irm_only", "adversarial_only", "full_l1_g1"];
        l.sort_by_key(|s| label_rank(s));
        assert_eq!(l, ["erm", "adversarial_only", "irm_only", "full", "full_l1_g1", "zzz"]);
    }
}
