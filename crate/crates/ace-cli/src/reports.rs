//! Report and CSV emission.
//!
//! All writers are deterministic: field order is fixed, floats use Rust's
//! shortest-roundtrip formatting, and nothing time- or path-dependent is
//! embedded, so identical runs produce byte-identical artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ace_core::harness::{CellHistory, OneVsAllOutcome, RunReport, SweepPoint};
use ace_core::ScoredSample;
use anyhow::{Context, Result};

/// Renders the loss-history CSV (`epoch,batch,concept_loss,ad_loss,total`).
pub fn loss_csv(records: &[ace_core::LossRecord]) -> String {
    let mut out = String::from("epoch,batch,concept_loss,ad_loss,total\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.batch, r.concept_loss, r.ad_loss, r.total
        );
    }
    out
}

/// Renders the score-dump CSV (`sample_id,normality_score,anomaly_label`,
/// then one column per concept probability).
pub fn scores_csv(scored: &[ScoredSample], n_concepts: usize) -> String {
    let mut out = String::from("sample_id,normality_score,anomaly_label");
    for c in 0..n_concepts {
        let _ = write!(out, ",concept_{c}");
    }
    out.push('\n');
    for s in scored {
        let _ = write!(out, "{},{},{}", s.sample_id, s.normality_score, s.anomaly_label);
        for p in &s.concept_probs {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
    }
    out
}

/// Renders the per-cell report CSV (`k_ind,seed,auc,concept_acc`).
pub fn cells_csv(report: &RunReport) -> String {
    let mut out = String::from("k_ind,seed,auc,concept_acc\n");
    for c in &report.cells {
        let _ = writeln!(out, "{},{},{},{}", c.k_ind, c.seed, c.auc, c.concept_acc);
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders the per-class summary CSV with a trailing grand-average row.
pub fn summary_csv(report: &RunReport) -> String {
    let mut out =
        String::from("k_ind,cells,auc_mean,auc_std,concept_acc_mean,concept_acc_std\n");
    for p in &report.per_class {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.k_ind,
            p.cells,
            p.auc_mean,
            opt(p.auc_std),
            p.concept_acc_mean,
            opt(p.concept_acc_std)
        );
    }
    let _ = writeln!(
        out,
        "average,{},{},,{},",
        report.cells.len(),
        report.average.auc,
        report.average.concept_acc
    );
    out
}

/// Writes the full artifact set of a one-vs-all run into `dir`:
/// `report.json`, `report.csv` (cells), `summary.csv` (per-class), and one
/// loss CSV per cell under `losses/`.
pub fn write_run_artifacts(outcome: &OneVsAllOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating report directory {}", dir.display()))?;
    let json = report_json(&outcome.report)?;
    fs::write(dir.join("report.json"), json).context("writing report.json")?;
    fs::write(dir.join("report.csv"), cells_csv(&outcome.report)).context("writing report.csv")?;
    fs::write(dir.join("summary.csv"), summary_csv(&outcome.report))
        .context("writing summary.csv")?;

    let losses = dir.join("losses");
    fs::create_dir_all(&losses).context("creating losses directory")?;
    for CellHistory { k_ind, seed, records } in &outcome.histories {
        let name = format!("k{k_ind}_s{seed}.csv");
        fs::write(losses.join(name), loss_csv(records)).context("writing loss CSV")?;
    }
    Ok(())
}

/// Serializes a report to pretty JSON bytes (trailing newline included).
pub fn report_json(report: &RunReport) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(report).context("serializing report")?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Reads `report.json` back from a report directory.
pub fn read_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join("report.json");
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Renders the sweep table CSV (`value,auc,concept_acc` per sweep point,
/// using each point's grand averages).
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("value,auc,concept_acc\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{}",
            p.value, p.outcome.report.average.auc, p.outcome.report.average.concept_acc
        );
    }
    out
}

/// Writes sweep artifacts: `sweep.csv` plus one report directory per point
/// (`point_<value>/`).
pub fn write_sweep_artifacts(points: &[SweepPoint], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating sweep directory {}", dir.display()))?;
    fs::write(dir.join("sweep.csv"), sweep_csv(points)).context("writing sweep.csv")?;
    for p in points {
        let sub = dir.join(format!("point_{}", p.value));
        write_run_artifacts(&p.outcome, &sub)?;
    }
    Ok(())
}

/// Renders a human-readable table of a report for terminal output.
pub fn format_report(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>6} {:>6} {:>10} {:>14}", "k_ind", "seed", "auc", "concept_acc");
    for c in &report.cells {
        let _ = writeln!(
            out,
            "{:>6} {:>6} {:>10.4} {:>14.4}",
            c.k_ind, c.seed, c.auc, c.concept_acc
        );
    }
    let _ = writeln!(out, "per-class means:");
    for p in &report.per_class {
        let std = p
            .auc_std
            .map(|s| format!(" ± {s:.4}"))
            .unwrap_or_default();
        let cstd = p
            .concept_acc_std
            .map(|s| format!(" ± {s:.4}"))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{:>6}        auc {:.4}{}  concept_acc {:.4}{}",
            p.k_ind, p.auc_mean, std, p.concept_acc_mean, cstd
        );
    }
    let _ = writeln!(
        out,
        "average       auc {:.4}  concept_acc {:.4}",
        report.average.auc, report.average.concept_acc
    );
    out
}
