//! CSV artifacts.
//!
//! Per-step files use the header `step,loss,train_residual_norm,param_displacement`;
//! summaries use `metric,width,seed,alpha_emp,cond_number,final_loss,discrepancy`.
//! Floats are written with 17 significant digits. A diverged run ends with a
//! sentinel row whose loss is `inf`.

use std::fmt::Write as _;
use std::path::Path;

use ngd_core::dynamics::Trajectory;

use crate::error::{io_err, CliError, CliResult};

pub const STEP_HEADER: &str = "step,loss,train_residual_norm,param_displacement";
pub const SUMMARY_HEADER: &str = "metric,width,seed,alpha_emp,cond_number,final_loss,discrepancy";

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// One row of a per-step table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub loss: f64,
    pub train_residual_norm: f64,
    pub param_displacement: f64,
}

/// Rows of a trajectory; with `diverged_at`, records from that step on are
/// replaced by one sentinel row.
pub fn step_rows(traj: &Trajectory, diverged_at: Option<usize>) -> Vec<StepRow> {
    let cut = diverged_at.unwrap_or(usize::MAX);
    let mut rows: Vec<StepRow> = traj
        .records
        .iter()
        .take_while(|r| r.step < cut)
        .map(|r| StepRow {
            step: r.step,
            loss: r.loss,
            train_residual_norm: r.train_residual_norm,
            param_displacement: r.param_displacement,
        })
        .collect();
    if diverged_at.is_some() {
        let step = rows.last().map_or(0, |r| r.step + 1);
        rows.push(StepRow { step, loss: f64::INFINITY, train_residual_norm: f64::INFINITY, param_displacement: f64::NAN });
    }
    rows
}

pub fn render_steps(rows: &[StepRow]) -> String {
    let mut out = String::from(STEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.step,
            fmt_f64(r.loss),
            fmt_f64(r.train_residual_norm),
            fmt_f64(r.param_displacement)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub metric: String,
    /// Hidden width; infinite for analytic-kernel runs.
    pub width: f64,
    pub seed: u64,
    pub alpha_emp: f64,
    pub cond_number: f64,
    pub final_loss: f64,
    pub discrepancy: f64,
}

impl SummaryRow {
    pub fn new(metric: impl Into<String>, width: f64, seed: u64) -> Self {
        SummaryRow {
            metric: metric.into(),
            width,
            seed,
            alpha_emp: f64::NAN,
            cond_number: f64::NAN,
            final_loss: f64::NAN,
            discrepancy: f64::NAN,
        }
    }
}

pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let width = if r.width.is_finite() { format!("{}", r.width as u64) } else { r.width.to_string() };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.metric,
            width,
            r.seed,
            fmt_f64(r.alpha_emp),
            fmt_f64(r.cond_number),
            fmt_f64(r.final_loss),
            fmt_f64(r.discrepancy)
        );
    }
    out
}

/// A parsed CSV artifact.
#[derive(Debug, Clone, PartialEq)]
pub enum Table {
    Steps(Vec<StepRow>),
    Summary(Vec<SummaryRow>),
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, value: &str) -> CliResult<T> {
    value.trim().parse().map_err(|_| CliError::SchemaMismatch {
        path: path.to_path_buf(),
        reason: format!("line {line}: cannot parse {value:?}"),
    })
}

pub fn parse_table(path: &Path, text: &str) -> CliResult<Table> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header = lines.next().map(|(_, h)| h.trim()).unwrap_or("");
    let mismatch = |reason: String| CliError::SchemaMismatch { path: path.to_path_buf(), reason };
    match header {
        STEP_HEADER => {
            let mut rows = Vec::new();
            for (i, line) in lines {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 4 {
                    return Err(mismatch(format!("line {}: expected 4 fields", i + 1)));
                }
                rows.push(StepRow {
                    step: field(path, i + 1, f[0])?,
                    loss: field(path, i + 1, f[1])?,
                    train_residual_norm: field(path, i + 1, f[2])?,
                    param_displacement: field(path, i + 1, f[3])?,
                });
            }
            Ok(Table::Steps(rows))
        }
        SUMMARY_HEADER => {
            let mut rows = Vec::new();
            for (i, line) in lines {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 7 {
                    return Err(mismatch(format!("line {}: expected 7 fields", i + 1)));
                }
                rows.push(SummaryRow {
                    metric: f[0].to_string(),
                    width: field(path, i + 1, f[1])?,
                    seed: field(path, i + 1, f[2])?,
                    alpha_emp: field(path, i + 1, f[3])?,
                    cond_number: field(path, i + 1, f[4])?,
                    final_loss: field(path, i + 1, f[5])?,
                    discrepancy: field(path, i + 1, f[6])?,
                });
            }
            Ok(Table::Summary(rows))
        }
        other => Err(mismatch(format!("unrecognized header {other:?}"))),
    }
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_table(path, &text)
}

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn seventeen_significant_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, 6.02214076e23, -2.5e-300] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
            assert_eq!(mantissa.len(), 17);
        }
    }

    #[test]
    fn sentinel_replaces_the_diverged_step() {
        let mut t = Trajectory::new(0.1, 1, array![1.0]);
        for f in [0.0, -1.0, -100.0] {
            t.push(array![f], None, 0.5);
        }
        let rows = step_rows(&t, Some(2));
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].step, 2);
        assert!(rows[2].loss.is_infinite());
        let text = render_steps(&rows);
        match parse_table(Path::new("x"), &text).unwrap() {
            Table::Steps(back) => assert_eq!(render_steps(&back), text),
            _ => panic!("wrong table"),
        }
    }

    #[test]
    fn summary_round_trip() {
        let mut r = SummaryRow::new("exact", 512.0, 3);
        r.cond_number = 1.25;
        let inf = SummaryRow::new("gd", f64::INFINITY, 0);
        let text = render_summary(&[r.clone(), inf]);
        match parse_table(Path::new("s"), &text).unwrap() {
            Table::Summary(rows) => {
                assert_eq!(rows[0].metric, "exact");
                assert_eq!(rows[0].width, 512.0);
                assert_eq!(rows[0].cond_number, 1.25);
                assert!(rows[0].alpha_emp.is_nan());
                assert!(rows[1].width.is_infinite());
            }
            _ => panic!("wrong table"),
        }
    }

    #[test]
    fn unknown_header_is_a_schema_mismatch() {
        assert!(matches!(parse_table(Path::new("z"), "a,b\n1,2\n"), Err(CliError::SchemaMismatch { .. })));
        let bad = format!("{STEP_HEADER}\n1,2\n");
        assert!(matches!(parse_table(Path::new("z"), &bad), Err(CliError::SchemaMismatch { .. })));
    }
}
