//! Human-readable and CSV renderings of run results.

use dino_forge_core::engine::RunLog;
use dino_forge_core::metrics::MetricReport;

/// Aligned two-column text table for a metric report. Stable formatting so
/// the same report always renders the same bytes.
pub fn text_table(report: &MetricReport) -> String {
    let mut rows: Vec<(String, String)> = vec![
        ("samples".to_string(), report.samples.to_string()),
        ("threshold".to_string(), format!("{:.4}", report.threshold)),
        ("F2_CIW".to_string(), format!("{:.4}", report.f2_ciw)),
        ("F1_Normal".to_string(), format!("{:.4}", report.f1_normal)),
    ];
    if let Some(r) = report.rankme {
        rows.push(("RankMe".to_string(), format!("{r:.4}")));
    }
    for (code, f2) in report.class_codes.iter().zip(&report.per_class_f2) {
        rows.push((format!("F2[{code}]"), format!("{f2:.4}")));
    }
    let key_width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let val_width = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (key, val) in &rows {
        out.push_str(&format!("{key:<key_width$}  {val:>val_width$}\n"));
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-epoch training curves as CSV, one row per epoch record. Metrics a
/// mode does not produce stay as empty cells.
pub fn curves_csv(log: &RunLog) -> String {
    let mut out =
        String::from("epoch,mean_loss,lr,tau,rankme,val_f2_ciw,val_f1_normal,wall_time_s\n");
    for r in &log.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.mean_loss,
            r.lr,
            opt(r.tau),
            opt(r.rankme),
            opt(r.val_f2_ciw),
            opt(r.val_f1_normal),
            r.wall_time_s,
        ));
    }
    out
}
