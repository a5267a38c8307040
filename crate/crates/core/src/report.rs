//! Run summaries as CSV and loss/ratio curves as a standalone SVG.

use std::fmt::Write as _;

use crate::metrics::{MetricsLog, MetricsSummary};

/// Columns of [`summary_csv`].
pub const SUMMARY_HEADER: &str = "run,iterations,events,mit_s,mlt_s,mli,mat1_s,mat5_s,final_smoothed_loss";

/// Placeholder for metrics that have no value (no events, no accuracy gain).
pub const UNDEFINED: &str = "undefined";

fn cell(v: &Result<f64, &'static str>) -> String {
    match v {
        Ok(x) => format!("{x}"),
        Err(_) => UNDEFINED.to_string(),
    }
}

fn summary_row(name: &str, s: &MetricsSummary) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        name.replace(',', "_"),
        s.iterations,
        s.events,
        cell(&s.mit),
        cell(&s.mlt),
        cell(&s.mli),
        cell(&s.mat1),
        cell(&s.mat5),
        s.final_smoothed_loss
            .map_or_else(|| UNDEFINED.to_string(), |v| v.to_string()),
    )
}

/// One row per named run.
pub fn summary_csv(runs: &[(String, MetricsLog)]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for (name, log) in runs {
        out.push_str(&summary_row(name, &log.summary()));
        out.push('\n');
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
const WIDTH: f64 = 720.0;
const PANEL: f64 = 240.0;
const MARGIN: f64 = 56.0;

struct Panel {
    top: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Panel {
    fn point(&self, x: f64, y: f64) -> (f64, f64) {
        let px = MARGIN + (WIDTH - 2.0 * MARGIN) * x / self.x_max.max(1.0);
        let span = (self.y_max - self.y_min).max(1e-12);
        let py = self.top + PANEL - PANEL * (y - self.y_min) / span;
        (px, py)
    }

    fn frame(&self, svg: &mut String, title: &str) {
        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN}" y="{}" width="{}" height="{PANEL}" fill="none" stroke="#444"/>"##,
            self.top,
            WIDTH - 2.0 * MARGIN
        );
        let _ = writeln!(
            svg,
            r##"<text x="{MARGIN}" y="{}" font-size="13">{title}</text>"##,
            self.top - 8.0
        );
        for (v, anchor_y) in [(self.y_max, self.top + 4.0), (self.y_min, self.top + PANEL)] {
            let _ = writeln!(
                svg,
                r##"<text x="{}" y="{anchor_y}" font-size="10" text-anchor="end">{v:.4}</text>"##,
                MARGIN - 4.0
            );
        }
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{}" font-size="10" text-anchor="end">{}</text>"##,
            WIDTH - MARGIN,
            self.top + PANEL + 14.0,
            self.x_max
        );
    }

    fn polyline(&self, svg: &mut String, pts: &[(f64, f64)], color: &str) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (px, py) = self.point(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r##"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"##,
            coords.join(" ")
        );
    }
}

fn bounds(series: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = series
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

/// Smoothed loss (top panel) and mask ratio (bottom panel, when logged)
/// against step, one polyline per run.
pub fn curves_svg(runs: &[(String, MetricsLog)]) -> String {
    let has_ratio = runs.iter().any(|(_, l)| l.records.iter().any(|r| r.ratio.is_some()));
    let panels = if has_ratio { 2.0 } else { 1.0 };
    let legend_h = 18.0 * runs.len() as f64;
    let height = 30.0 + panels * (PANEL + 50.0) + legend_h;
    let x_max = runs
        .iter()
        .filter_map(|(_, l)| l.records.last().map(|r| r.step as f64))
        .fold(1.0, f64::max);
    let smoothed: Vec<Vec<(f64, f64)>> = runs
        .iter()
        .map(|(_, l)| l.records.iter().map(|r| r.step as f64).zip(l.smoothed()).collect())
        .collect();
    let (y_min, y_max) = bounds(smoothed.iter().flatten().map(|p| p.1));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"##
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="white"/>"##);
    let loss_panel = Panel {
        top: 30.0,
        x_max,
        y_min,
        y_max,
    };
    loss_panel.frame(&mut svg, "smoothed loss");
    for (i, pts) in smoothed.iter().enumerate() {
        loss_panel.polyline(&mut svg, pts, PALETTE[i % PALETTE.len()]);
    }
    let mut next_top = 30.0 + PANEL + 50.0;
    if has_ratio {
        let ratio_panel = Panel {
            top: next_top,
            x_max,
            y_min: 0.0,
            y_max: 1.0,
        };
        ratio_panel.frame(&mut svg, "mask ratio");
        for (i, (_, log)) in runs.iter().enumerate() {
            let pts: Vec<(f64, f64)> = log
                .records
                .iter()
                .filter_map(|r| r.ratio.map(|v| (r.step as f64, v)))
                .collect();
            ratio_panel.polyline(&mut svg, &pts, PALETTE[i % PALETTE.len()]);
        }
        next_top += PANEL + 50.0;
    }
    for (i, (name, _)) in runs.iter().enumerate() {
        let y = next_top + 18.0 * i as f64 - 20.0;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}" font-size="12">{}</text>"##,
            MARGIN + 24.0,
            MARGIN + 30.0,
            y + 4.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::IterationRecord;

    fn flat_log() -> MetricsLog {
        let mut log = MetricsLog::new(5);
        for s in 0..20 {
            log.push(IterationRecord::new(s, 0.1, 1.0)).unwrap();
        }
        log
    }

    #[test]
    fn no_events_reports_undefined() {
        let csv = summary_csv(&[("flat".into(), flat_log())]);
        let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[0], "flat");
        assert_eq!(row[2], "0");
        assert_eq!(row[4], UNDEFINED);
        assert_eq!(row[5], UNDEFINED);
        assert!((row[3].parse::<f64>().unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let mut log = flat_log();
        for r in &mut log.records {
            r.ratio = Some(0.75);
        }
        let svg = curves_svg(&[("a".into(), log.clone()), ("b<c".into(), flat_log())]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("b&lt;c"));
    }
}
