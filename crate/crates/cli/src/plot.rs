//! Self-contained SVG line charts of CSV artifacts.
//!
//! A per-step table becomes loss against step on a log axis; the series stops
//! at a divergence sentinel, which is drawn as a cross at the last finite
//! point. A summary table becomes the condition number (or final loss, when
//! no condition numbers were recorded) against width, one series per metric,
//! on log-log axes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::CliResult;
use crate::output::{read_table, write_file, StepRow, SummaryRow, Table};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Last finite point before a divergence sentinel.
    pub diverged_at: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

pub fn steps_series(name: &str, rows: &[StepRow]) -> Series {
    let mut points = Vec::new();
    let mut diverged_at = None;
    for r in rows {
        if !r.loss.is_finite() {
            diverged_at = Some(points.last().copied().unwrap_or((r.step as f64, f64::NAN)));
            break;
        }
        points.push((r.step as f64, r.loss));
    }
    Series { name: name.to_string(), points, diverged_at }
}

pub fn steps_chart(title: &str, rows: &[StepRow]) -> Chart {
    Chart {
        title: title.to_string(),
        x_label: "step".into(),
        y_label: "loss".into(),
        log_x: false,
        log_y: true,
        series: vec![steps_series("loss", rows)],
    }
}

pub fn summary_chart(title: &str, rows: &[SummaryRow]) -> Chart {
    let use_cond = rows.iter().any(|r| r.cond_number.is_finite());
    let mut groups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let y = if use_cond { r.cond_number } else { r.final_loss };
        groups.entry(&r.metric).or_default().push((r.width, y));
    }
    let series = groups
        .into_iter()
        .map(|(name, mut points)| {
            points.retain(|(x, y)| x.is_finite() && y.is_finite());
            points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            Series { name: name.to_string(), points, diverged_at: None }
        })
        .collect();
    Chart {
        title: title.to_string(),
        x_label: "width".into(),
        y_label: if use_cond { "condition number".into() } else { "final loss".into() },
        log_x: true,
        log_y: true,
        series,
    }
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Axis {
        let vals: Vec<f64> = values.filter(|v| v.is_finite() && (!log || *v > 0.0)).map(|v| if log { v.log10() } else { v }).collect();
        let (mut lo, mut hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if log {
            lo = lo.floor();
            hi = hi.ceil();
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        Axis { lo, hi, log }
    }

    /// Fraction along the axis; non-positive values on a log axis sit at the floor.
    fn frac(&self, v: f64) -> f64 {
        let t = if self.log { if v > 0.0 { v.log10() } else { self.lo } } else { v };
        ((t - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let span = (self.hi - self.lo).round() as i64;
            let stride = ((span as f64) / 8.0).ceil().max(1.0) as i64;
            (0..=span)
                .step_by(stride as usize)
                .map(|k| {
                    let e = self.lo as i64 + k;
                    (10f64.powi(e as i32), format!("1e{e}"))
                })
                .collect()
        } else {
            (0..=5)
                .map(|k| {
                    let v = self.lo + (self.hi - self.lo) * k as f64 / 5.0;
                    (v, format!("{}", (v * 100.0).round() / 100.0))
                })
                .collect()
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_svg(chart: &Chart) -> String {
    let all = || chart.series.iter().flat_map(|s| s.points.iter().chain(s.diverged_at.iter()));
    let xa = Axis::fit(all().map(|p| p.0), chart.log_x);
    let ya = Axis::fit(all().map(|p| p.1), chart.log_y);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |v: f64| LEFT + xa.frac(v) * pw;
    let py = |v: f64| TOP + (1.0 - ya.frac(v)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="13">{}</text>"#, LEFT + pw / 2.0, escape(&chart.title));
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for (v, label) in xa.ticks() {
        let x = px(v);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, TOP + ph, TOP + ph + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#, TOP + ph + 16.0);
    }
    for (v, label) in ya.ticks() {
        let y = py(v);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"#, LEFT - 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#, LEFT - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 10.0, escape(&chart.x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&chart.y_label)
    );
    for (i, series) in chart.series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = series.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        if let Some((x, y)) = series.diverged_at {
            let (cx, cy) = (px(x), if y.is_finite() { py(y) } else { TOP });
            let _ = writeln!(
                s,
                r#"<path class="divergence" d="M{:.2},{:.2} L{:.2},{:.2} M{:.2},{:.2} L{:.2},{:.2}" stroke="{color}" stroke-width="2"/>"#,
                cx - 5.0,
                cy - 5.0,
                cx + 5.0,
                cy + 5.0,
                cx - 5.0,
                cy + 5.0,
                cx + 5.0,
                cy - 5.0
            );
        }
        let ly = TOP + 14.0 + 16.0 * i as f64;
        let lx = LEFT + pw + 10.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
        let label = if series.diverged_at.is_some() { format!("{} (diverged)", series.name) } else { series.name.clone() };
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 22.0, ly + 4.0, escape(&label));
    }
    s.push_str("</svg>\n");
    s
}

/// Renders one SVG per CSV into `out_dir`, named after the CSV stem.
pub fn emit_plots(csvs: &[PathBuf], out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    for path in csvs {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plot".into());
        let chart = match read_table(path)? {
            Table::Steps(rows) => steps_chart(&stem, &rows),
            Table::Summary(rows) => summary_chart(&stem, &rows),
        };
        let target = out_dir.join(format!("{stem}.svg"));
        write_file(&target, &render_svg(&chart))?;
        written.push(target);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(losses: &[f64]) -> Vec<StepRow> {
        losses
            .iter()
            .enumerate()
            .map(|(i, &l)| StepRow { step: i, loss: l, train_residual_norm: l.sqrt(), param_displacement: f64::NAN })
            .collect()
    }

    #[test]
    fn single_series_gives_one_polyline() {
        let svg = render_svg(&steps_chart("t", &rows(&[1.0, 0.1, 0.01])));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(!svg.contains("divergence"));
    }

    #[test]
    fn sentinel_truncates_with_marker() {
        let c = steps_chart("t", &rows(&[1.0, 10.0, f64::INFINITY]));
        assert_eq!(c.series[0].points.len(), 2);
        assert_eq!(c.series[0].diverged_at, Some((1.0, 10.0)));
        let svg = render_svg(&c);
        assert_eq!(svg.matches("class=\"divergence\"").count(), 1);
    }

    #[test]
    fn summary_groups_by_metric() {
        let mut a = SummaryRow::new("exact", 64.0, 0);
        a.cond_number = 1.0;
        let mut b = SummaryRow::new("gd", 64.0, 0);
        b.cond_number = 100.0;
        let mut c = SummaryRow::new("gd", 128.0, 0);
        c.cond_number = 90.0;
        let chart = summary_chart("s", &[a, b, c]);
        assert_eq!(chart.series.len(), 2);
        assert_eq!(chart.series[1].points.len(), 2);
    }
}
