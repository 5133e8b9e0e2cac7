//! Hand-written SVG plots: a control chart of observed against conditional
//! demand and the fitted envelope with its change points.

use std::fmt::Write;

use songdemand_core::envelope::EnvelopeFit;
use songdemand_core::estimation::ControlChart;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

struct Frame {
    x_max: f64,
    y_max: f64,
}

impl Frame {
    fn new(weeks: usize, values: impl Iterator<Item = f64>) -> Self {
        let y_max = values.filter(|v| v.is_finite()).fold(1.0, f64::max) * 1.05;
        Self { x_max: (weeks.max(2) - 1) as f64, y_max }
    }

    fn x(&self, t: f64) -> f64 {
        MARGIN + t / self.x_max * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - v / self.y_max * (HEIGHT - 2.0 * MARGIN)
    }

    fn polyline(&self, points: impl Iterator<Item = (f64, f64)>) -> String {
        points
            .map(|(t, v)| format!("{:.2},{:.2}", self.x(t), self.y(v)))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(out: &mut String, title: &str, frame: &Frame) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">
<rect width="100%" height="100%" fill="white"/>
<text x="{MARGIN}" y="24" font-size="14">{}</text>
<line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}" stroke="black"/>
<text x="{r}" y="{lb}" text-anchor="end">week {:.0}</text>
<text x="{l}" y="{MARGIN}" text-anchor="end">{:.0}</text>
<text x="{l}" y="{b}" text-anchor="end">0</text>
"#,
        escape(title),
        frame.x_max,
        frame.y_max,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        lb = HEIGHT - MARGIN + 16.0,
        l = MARGIN - 4.0,
    );
}

fn dots(out: &mut String, frame: &Frame, observed: &[f64]) {
    for (t, v) in observed.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="black"/>"#,
            frame.x(t as f64),
            frame.y(*v)
        );
    }
}

/// Observed counts over the chart's band and mean.
pub fn control_chart_svg(title: &str, observed: &[f64], chart: &ControlChart) -> String {
    let frame = Frame::new(
        observed.len().max(chart.mean.len()),
        observed.iter().chain(&chart.upper).copied(),
    );
    let mut out = String::new();
    open(&mut out, title, &frame);
    let upper = chart.upper.iter().enumerate().map(|(t, v)| (t as f64, *v));
    let lower = chart.lower.iter().enumerate().rev().map(|(t, v)| (t as f64, *v));
    let _ = writeln!(
        out,
        r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##,
        frame.polyline(upper.chain(lower))
    );
    let _ = writeln!(
        out,
        r##"<polyline points="{}" fill="none" stroke="#08519c" stroke-width="1.5"/>"##,
        frame.polyline(chart.mean.iter().enumerate().map(|(t, v)| (t as f64, *v)))
    );
    for (t, v) in observed.iter().enumerate() {
        let outside = t < chart.lower.len() && (*v < chart.lower[t] || *v > chart.upper[t]);
        let colour = if outside { "#cb181d" } else { "black" };
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{colour}"/>"#,
            frame.x(t as f64),
            frame.y(*v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.0}" y="24" text-anchor="end">{:.0}% band</text>"#,
        WIDTH - MARGIN,
        chart.level * 100.0
    );
    out.push_str("</svg>\n");
    out
}

/// Observed counts, the fitted envelope and a marker at each change point.
pub fn envelope_svg(title: &str, observed: &[f64], fit: &EnvelopeFit) -> String {
    let weeks = observed.len().max(fit.changepoints.release + 1);
    let level: Vec<f64> = (0..weeks).map(|t| fit.level(t as f64)).collect();
    let frame = Frame::new(weeks, observed.iter().chain(&level).copied());
    let mut out = String::new();
    open(&mut out, title, &frame);
    let cp = fit.changepoints;
    for (name, tau) in [("A", cp.attack), ("S", cp.sustain), ("D", cp.decay), ("R", cp.release)] {
        let x = frame.x(tau as f64);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{MARGIN}" x2="{x:.2}" y2="{:.2}" stroke="#999" stroke-dasharray="4 3"/>
<text x="{x:.2}" y="{:.2}" text-anchor="middle">{name}={tau}</text>"##,
            HEIGHT - MARGIN,
            MARGIN - 6.0
        );
    }
    dots(&mut out, &frame, observed);
    let _ = writeln!(
        out,
        r##"<polyline points="{}" fill="none" stroke="#d94801" stroke-width="2"/>"##,
        frame.polyline(level.iter().enumerate().map(|(t, v)| (t as f64, *v)))
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use songdemand_core::envelope::{ChangePoints, NodeValues};

    #[test]
    fn envelope_plot_marks_every_knot() {
        let cp = ChangePoints::new(2, 4, 6, 9).unwrap();
        let fit = EnvelopeFit::new(cp, NodeValues { attack: 10.0, sustain: 8.0, decay: 3.0 });
        let svg = envelope_svg("s <1>", &[0.0, 4.0, 9.0, 9.0, 8.0, 6.0, 3.0, 2.0, 1.0, 0.0], &fit);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        for label in ["A=2", "S=4", "D=6", "R=9"] {
            assert!(svg.contains(label), "{label}");
        }
        assert!(svg.contains("s &lt;1&gt;"));
    }

    #[test]
    fn control_chart_flags_points_outside_the_band() {
        let chart = ControlChart {
            mean: vec![5.0, 5.0],
            lower: vec![2.0, 2.0],
            upper: vec![8.0, 8.0],
            level: 0.9,
        };
        let svg = control_chart_svg("c", &[5.0, 20.0], &chart);
        assert_eq!(svg.matches("#cb181d").count(), 1);
    }
}
