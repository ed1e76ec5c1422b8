use std::path::Path;

use super::{CorrectionReport, SensitivityReport, SweepReport};
use crate::error::{Error, Result};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn rec(w: &mut csv::Writer<std::fs::File>, fields: &[String]) -> Result<()> {
    w.write_record(fields).map_err(|e| Error::Serde(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

const GROUP_COLUMNS: [&str; 9] = [
    "group",
    "images",
    "d_size",
    "n_pre",
    "n_post",
    "percent_corrected",
    "clean_acc_before",
    "clean_acc_after",
    "accuracy_drop",
];

fn group_rows(r: &CorrectionReport) -> Vec<Vec<String>> {
    r.groups
        .iter()
        .map(|g| {
            vec![
                g.group.as_str().to_string(),
                g.images.to_string(),
                g.correction.d_size.to_string(),
                g.correction.n_pre.to_string(),
                g.correction.n_post.to_string(),
                opt(g.correction.percent()),
                r.clean_accuracy_before().to_string(),
                r.clean_accuracy_after().to_string(),
                r.accuracy_drop().to_string(),
            ]
        })
        .collect()
}

/// One row per group per report. An undefined percentage is an empty field.
pub fn write_correction_csv(path: &Path, reports: &[CorrectionReport]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["method".to_string(), "config_id".to_string()];
    header.extend(GROUP_COLUMNS.iter().map(|s| s.to_string()));
    rec(&mut w, &header)?;
    for r in reports {
        for row in group_rows(r) {
            let mut fields = vec![r.method.clone(), r.config_id.clone()];
            fields.extend(row);
            rec(&mut w, &fields)?;
        }
    }
    finish(w, path)
}

/// Long-format sensitivity matrix: one row per (concept, class, style).
pub fn write_sensitivity_csv(path: &Path, report: &SensitivityReport) -> Result<()> {
    let mut w = writer(path)?;
    let header =
        ["concept", "class", "style", "images", "presence", "accuracy_clean", "accuracy_transformed", "drop_points"];
    rec(&mut w, &header.map(String::from))?;
    for r in &report.rows {
        rec(
            &mut w,
            &[
                r.concept.clone(),
                r.class.to_string(),
                r.style.clone(),
                r.images.to_string(),
                r.presence.to_string(),
                r.accuracy_clean.to_string(),
                r.accuracy_transformed.to_string(),
                r.drop().to_string(),
            ],
        )?;
    }
    finish(w, path)
}

/// One row per group per sweep cell; failed cells get a single row carrying the error.
pub fn write_sweep_csv(path: &Path, sweep: &SweepReport) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> =
        ["method", "layer", "exemplars", "use_mask", "rank_one", "threshold", "chosen_lr", "chosen_steps", "no_edit"]
            .map(String::from)
            .to_vec();
    header.extend(GROUP_COLUMNS.iter().map(|s| s.to_string()));
    header.push("error".into());
    rec(&mut w, &header)?;
    let flag = |v: Option<bool>| v.map_or(String::new(), |b| b.to_string());
    for c in &sweep.cells {
        let lead = vec![
            c.method.clone(),
            c.layer.to_string(),
            c.exemplars.to_string(),
            flag(c.use_mask),
            flag(c.rank_one),
            c.threshold.to_string(),
            c.chosen.as_ref().map_or(String::new(), |p| p.point.lr.to_string()),
            c.chosen.as_ref().map_or(String::new(), |p| p.point.steps.to_string()),
            (c.report.is_some() && c.chosen.is_none()).to_string(),
        ];
        match &c.report {
            Some(r) => {
                for row in group_rows(r) {
                    let mut fields = lead.clone();
                    fields.extend(row);
                    fields.push(String::new());
                    rec(&mut w, &fields)?;
                }
            }
            None => {
                let mut fields = lead.clone();
                fields.extend(std::iter::repeat_n(String::new(), GROUP_COLUMNS.len()));
                fields.push(c.error.clone().unwrap_or_default());
                rec(&mut w, &fields)?;
            }
        }
    }
    finish(w, path)
}
