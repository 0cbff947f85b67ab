//! Result tables: one row per (arm, loss), with per-cell deltas against the
//! untuned model.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{EvalReport, HarnessError, LongFormMetrics, Result};

/// Arm label of the untuned model's row.
pub const VANILLA: &str = "vanilla";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: String,
    /// Loss kind, or "-" for the untuned model.
    pub loss: String,
    pub report: EvalReport,
}

impl ReportRow {
    pub fn vanilla(report: EvalReport) -> Self {
        Self {
            arm: VANILLA.into(),
            loss: "-".into(),
            report,
        }
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

/// Rows in the given order; delta columns are against the vanilla row when
/// one is present.
pub fn write_report_csv<W: Write>(rows: &[ReportRow], w: W) -> Result<()> {
    let base = rows.iter().find(|r| r.arm == VANILLA).map(|r| r.report.values());
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["arm".to_string(), "loss".into()];
    header.extend(EvalReport::COLUMNS.iter().map(|c| c.to_string()));
    header.extend(EvalReport::COLUMNS.iter().map(|c| format!("delta_{c}")));
    wr.write_record(&header)?;
    for r in rows {
        let v = r.report.values();
        let mut rec = vec![r.arm.clone(), r.loss.clone()];
        rec.extend(v.iter().map(|&x| fmt(x)));
        rec.extend((0..v.len()).map(|i| base.map_or(String::new(), |b| fmt(v[i] - b[i]))));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_report_csv<R: Read>(r: R) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| HarnessError::Config(format!("report row has a bad value in column {i}")))
        };
        let lf = |i: usize| -> Result<LongFormMetrics> {
            Ok(LongFormMetrics {
                fs: num(i)?,
                nc: num(i + 1)?,
                ne: num(i + 2)?,
                empty: 0,
            })
        };
        out.push(ReportRow {
            arm: rec.get(0).unwrap_or_default().to_string(),
            loss: rec.get(1).unwrap_or_default().to_string(),
            report: EvalReport::new(lf(2)?, lf(5)?, num(8)?, num(9)?),
        });
    }
    Ok(out)
}

/// Fixed-width text table in percent, deltas in parentheses.
pub fn render_table(rows: &[ReportRow]) -> String {
    let base = rows.iter().find(|r| r.arm == VANILLA).map(|r| r.report.values());
    let cols = ["Bio FS", "NC", "NE", "Open FS", "NC", "NE", "FP Acc", "QA Acc", "AVG"];
    let mut s = format!("{:<8} {:<5}", "arm", "loss");
    for c in cols {
        let _ = write!(s, " {c:>15}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:<8} {:<5}", r.arm, r.loss);
        for (i, v) in r.report.values().iter().enumerate() {
            // nc/ne are counts; the others are fractions shown in percent
            let scale = if matches!(i, 1 | 2 | 4 | 5) { 1.0 } else { 100.0 };
            let cell = match base {
                Some(b) if r.arm != VANILLA => format!("{:.2}({:+.2})", v * scale, (v - b[i]) * scale),
                _ => format!("{:.2}", v * scale),
            };
            let _ = write!(s, " {cell:>15}");
        }
        s.push('\n');
    }
    s
}
