//! CSV rows and SVG charts for measured constants and rates.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::estimates::{ConstantEstimate, RateFit, SweepReport};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const CSV_HEADER: [&str; 10] = [
    "inequality",
    "domain",
    "coef",
    "eps",
    "sigma",
    "ball_kind",
    "trials",
    "constant",
    "worst_trial_id",
    "config_hash",
];

pub fn fmt_float(x: f64) -> String {
    format!("{x:.12e}")
}

/// One CSV record; floats are preformatted, absent fields are empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CsvRow {
    pub inequality: String,
    pub domain: String,
    pub coef: String,
    pub eps: String,
    pub sigma: String,
    pub ball_kind: String,
    pub trials: usize,
    pub constant: String,
    pub worst_trial_id: String,
    pub config_hash: String,
}

impl CsvRow {
    pub fn new(est: &ConstantEstimate, domain: &str, coef: &str) -> Self {
        Self {
            inequality: est.inequality.clone(),
            domain: domain.to_string(),
            coef: coef.to_string(),
            eps: String::new(),
            sigma: String::new(),
            ball_kind: String::new(),
            trials: est.trials,
            constant: fmt_float(est.constant),
            worst_trial_id: est.worst_trial.clone(),
            config_hash: est.config_hash.clone(),
        }
    }

    /// A row marking a failed measurement: constant `nan`, message in the trial column.
    pub fn failed(inequality: &str, domain: &str, coef: &str, message: &str, hash: &str) -> Self {
        Self {
            inequality: inequality.to_string(),
            domain: domain.to_string(),
            coef: coef.to_string(),
            eps: String::new(),
            sigma: String::new(),
            ball_kind: String::new(),
            trials: 0,
            constant: "nan".into(),
            worst_trial_id: format!("FAILED: {message}"),
            config_hash: hash.to_string(),
        }
    }

    pub fn eps(mut self, eps: f64) -> Self {
        self.eps = fmt_float(eps);
        self
    }

    pub fn sigma(mut self, sigma: f64) -> Self {
        self.sigma = fmt_float(sigma);
        self
    }

    pub fn ball_kind(mut self, kind: &str) -> Self {
        self.ball_kind = kind.to_string();
        self
    }

    pub fn hash(mut self, hash: &str) -> Self {
        self.config_hash = hash.to_string();
        self
    }
}

/// One row per sweep cell in eps-major order; failed cells are marked.
pub fn sweep_rows(report: &SweepReport, hash: &str) -> Vec<CsvRow> {
    report
        .cells
        .iter()
        .map(|cell| {
            let row = match (&cell.estimate, &cell.error) {
                (Some(e), _) => CsvRow::new(e, &report.domain, &report.coef),
                (None, msg) => CsvRow::failed(
                    "dirichlet",
                    &report.domain,
                    &report.coef,
                    msg.as_deref().unwrap_or("unknown"),
                    hash,
                ),
            };
            row.eps(cell.eps).sigma(cell.sigma).hash(hash)
        })
        .collect()
}

/// Header plus rows.
pub fn write_csv<W: Write>(w: W, rows: &[CsvRow]) -> Result<(), ReportError> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(CSV_HEADER)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[CsvRow]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub const SVG_WIDTH: f64 = 800.0;
pub const SVG_HEIGHT: f64 = 600.0;
const MARGIN: f64 = 80.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Draw markers only, without a polyline.
    pub scatter: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
    pub note: Option<String>,
}

struct Axis {
    log: bool,
    lo: f64,
    hi: f64,
}

impl Axis {
    fn new(log: bool, values: impl Iterator<Item = f64>) -> Self {
        let tf = |v: f64| if log { v.log10() } else { v };
        let (mut lo, mut hi) = values
            .filter(|v| v.is_finite() && (!log || *v > 0.0))
            .map(tf)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        Self {
            log,
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn frac(&self, v: f64) -> f64 {
        let t = if self.log { v.log10() } else { v };
        (t - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let ticks: Vec<f64> = (self.lo.ceil() as i32..=self.hi.floor() as i32)
                .map(|k| 10f64.powi(k))
                .collect();
            if ticks.len() >= 2 {
                return ticks;
            }
            let (a, b) = (10f64.powf(self.lo), 10f64.powf(self.hi));
            return (1..=4).map(|k| a * (b / a).powf(k as f64 / 5.0)).collect();
        }
        (0..=4)
            .map(|k| self.lo + (self.hi - self.lo) * k as f64 / 4.0)
            .collect()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let xa = Axis::new(self.log_x, pts().map(|p| p.0));
        let ya = Axis::new(self.log_y, pts().map(|p| p.1));
        let (w, h) = (SVG_WIDTH - 2.0 * MARGIN, SVG_HEIGHT - 2.0 * MARGIN);
        let px = |v: f64| MARGIN + xa.frac(v) * w;
        let py = |v: f64| SVG_HEIGHT - MARGIN - ya.frac(v) * h;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="30" text-anchor="middle" font-size="16">{}</text>"#,
            SVG_WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN}" y="{MARGIN}" width="{w}" height="{h}" fill="none" stroke="black"/>"#
        );
        for t in xa.ticks() {
            let x = px(t);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.2}" y1="{MARGIN}" x2="{x:.2}" y2="{:.2}" stroke="#dddddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                SVG_HEIGHT - MARGIN,
                SVG_HEIGHT - MARGIN + 18.0,
                tick_label(t)
            );
        }
        for t in ya.ticks() {
            let y = py(t);
            let _ = writeln!(
                s,
                r##"<line x1="{MARGIN}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                SVG_WIDTH - MARGIN,
                MARGIN - 6.0,
                y + 4.0,
                tick_label(t)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            SVG_WIDTH / 2.0,
            SVG_HEIGHT - 30.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">{}</text>"#,
            SVG_HEIGHT / 2.0,
            SVG_HEIGHT / 2.0,
            escape(&self.y_label)
        );
        for (k, series) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let valid: Vec<(f64, f64)> = series
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite() && (!self.log_x || p.0 > 0.0) && (!self.log_y || p.1 > 0.0))
                .map(|p| (px(p.0), py(p.1)))
                .collect();
            if !series.scatter && valid.len() > 1 {
                let path: Vec<String> = valid.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    path.join(" ")
                );
            }
            for (x, y) in &valid {
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#);
            }
            let ly = MARGIN + 18.0 * (k as f64 + 1.0);
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{ly:.2}" fill="{color}">{}</text>"#,
                MARGIN + 10.0,
                escape(&series.label)
            );
        }
        if let Some(note) = &self.note {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                SVG_WIDTH - MARGIN - 10.0,
                MARGIN + 18.0,
                escape(note)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Log-log error against eps with the fitted line and slope annotation.
pub fn rate_chart(title: &str, fit: &RateFit) -> Chart {
    let line = fit
        .ladder
        .iter()
        .map(|e| (*e, (fit.intercept + fit.kappa * e.ln()).exp()))
        .collect();
    Chart {
        title: title.to_string(),
        x_label: "eps".into(),
        y_label: "error".into(),
        log_x: true,
        log_y: true,
        series: vec![
            Series {
                label: "measured".into(),
                points: fit.ladder.iter().cloned().zip(fit.errors.iter().cloned()).collect(),
                scatter: true,
            },
            Series {
                label: "fit".into(),
                points: line,
                scatter: false,
            },
        ],
        note: Some(format!("slope = {:.3}, residual = {:.3}", fit.kappa, fit.residual)),
    }
}

/// Measured constant against eps, one line per sigma.
pub fn sweep_chart(report: &SweepReport) -> Chart {
    let series = report
        .sigmas
        .iter()
        .enumerate()
        .map(|(k, sigma)| Series {
            label: format!("sigma = {sigma}"),
            points: report
                .eps
                .iter()
                .zip(report.sigma_row(k))
                .filter_map(|(e, c)| c.map(|c| (*e, c)))
                .collect(),
            scatter: false,
        })
        .collect();
    Chart {
        title: format!("{} / {}", report.domain, report.coef),
        x_label: "eps".into(),
        y_label: "constant".into(),
        log_x: true,
        log_y: false,
        series,
        note: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimates::{fit_rate, SweepCell};

    fn estimate(c: f64, worst: &str) -> ConstantEstimate {
        ConstantEstimate {
            inequality: "hardy".into(),
            constant: c,
            trials: 5,
            worst_trial: worst.into(),
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn csv_has_schema_and_quotes_commas() {
        let rows = vec![CsvRow::new(&estimate(0.25, "bubble(0.1,0.2;0.3)"), "square", "identity").ball_kind("interior")];
        let text = csv_string(&rows);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(
            lines.next().unwrap(),
            r#"hardy,square,identity,,,interior,5,2.500000000000e-1,"bubble(0.1,0.2;0.3)",abc"#
        );
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn empty_csv_keeps_header() {
        assert_eq!(csv_string(&[]), format!("{}\n", CSV_HEADER.join(",")));
    }

    #[test]
    fn failed_sweep_cells_are_marked() {
        let report = SweepReport {
            domain: "square".into(),
            coef: "identity".into(),
            eps: vec![0.5],
            sigmas: vec![0.0, 1.0],
            cells: vec![
                SweepCell {
                    eps: 0.5,
                    sigma: 0.0,
                    estimate: Some(estimate(1.0, "trig#0")),
                    error: None,
                },
                SweepCell {
                    eps: 0.5,
                    sigma: 1.0,
                    estimate: None,
                    error: Some("bad sigma".into()),
                },
            ],
        };
        let rows = sweep_rows(&report, "h1");
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].constant, "nan");
        assert!(rows[1].worst_trial_id.starts_with("FAILED"));
        assert!(rows.iter().all(|r| r.config_hash == "h1"));
        assert!(sweep_chart(&report).to_svg().contains("sigma = 0"));
    }

    #[test]
    fn svg_is_fixed_canvas() {
        let fit = fit_rate(&[0.25, 0.125, 0.0625], &[0.5, 0.25, 0.125]).unwrap();
        let svg = rate_chart("rate", &fit).to_svg();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(r#"width="800" height="600""#));
        assert!(svg.contains("slope = 1.000"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg, rate_chart("rate", &fit).to_svg());
    }
}
