//! Minimal SVG charts.
//!
//! Every plotted value is written into a `data-value` attribute with the
//! same `f64` formatting the CSV writers use, so a chart can be checked
//! against its table by string comparison.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Numbers as drawn coordinates; two decimals keep files small and stable.
fn px(v: f64) -> String {
    format!("{v:.2}")
}

struct Frame {
    lo: f64,
    hi: f64,
}

impl Frame {
    fn new(values: impl Iterator<Item = f64>, include_zero: bool) -> Frame {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if include_zero {
            lo = lo.min(0.0);
            hi = hi.max(0.0);
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        let pad = 0.05 * (hi - lo);
        Frame {
            lo: if include_zero && lo == 0.0 { 0.0 } else { lo - pad },
            hi: hi + pad,
        }
    }

    fn y(&self, v: f64) -> f64 {
        let h = HEIGHT - TOP - BOTTOM;
        TOP + h * (self.hi - v) / (self.hi - self.lo)
    }
}

fn open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#,
        w = WIDTH,
        h = HEIGHT
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        px(WIDTH / 2.0),
        escape(title)
    );
}

fn axes(out: &mut String, frame: &Frame, y_label: &str) {
    let x_end = WIDTH - RIGHT;
    let y_end = HEIGHT - BOTTOM;
    let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{y_end}" stroke="black"/>"#);
    let base = frame.y(frame.lo.max(0.0).min(frame.hi));
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{b}" x2="{x_end}" y2="{b}" stroke="black"/>"#,
        b = px(base)
    );
    for i in 0..=4 {
        let v = frame.lo + (frame.hi - frame.lo) * f64::from(i) / 4.0;
        let y = px(frame.y(v));
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="black"/><text x="{}" y="{y}" text-anchor="end" dy="4">{}</text>"#,
            px(LEFT - 4.0),
            px(LEFT - 6.0),
            format!("{v:.3}")
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
        px((TOP + y_end) / 2.0),
        px((TOP + y_end) / 2.0),
        escape(y_label)
    );
}

fn legend(out: &mut String, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 16.0 * i as f64;
        let x = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            px(x),
            px(y),
            PALETTE[i % PALETTE.len()],
            px(x + 14.0),
            px(y + 9.0),
            escape(name)
        );
    }
}

/// Grouped bars, one group per category and one bar per series. Missing
/// values leave a gap.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<Option<f64>>)]) -> String {
    let mut out = String::new();
    open(&mut out, title);
    let frame = Frame::new(series.iter().flat_map(|(_, v)| v.iter().flatten().copied()), true);
    axes(&mut out, &frame, y_label);
    let plot_w = WIDTH - LEFT - RIGHT;
    let group_w = plot_w / categories.len().max(1) as f64;
    let bar_w = 0.8 * group_w / series.len().max(1) as f64;
    let zero = frame.y(0.0);
    for (ci, cat) in categories.iter().enumerate() {
        let gx = LEFT + group_w * ci as f64 + 0.1 * group_w;
        for (si, (name, values)) in series.iter().enumerate() {
            let Some(v) = values.get(ci).copied().flatten() else {
                continue;
            };
            let y = frame.y(v);
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}" data-series="{}" data-category="{}" data-value="{}"/>"#,
                px(gx + bar_w * si as f64),
                px(y.min(zero)),
                px(bar_w),
                px((y - zero).abs()),
                PALETTE[si % PALETTE.len()],
                escape(name),
                escape(cat),
                v
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            px(LEFT + group_w * (ci as f64 + 0.5)),
            px(HEIGHT - BOTTOM + 16.0),
            escape(cat)
        );
    }
    legend(&mut out, &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Polyline per series over shared `xs`, plus optional horizontal
/// reference lines.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    xs: &[f64],
    series: &[(String, Vec<f64>)],
    references: &[(String, f64)],
) -> String {
    let mut out = String::new();
    open(&mut out, title);
    let frame = Frame::new(
        series
            .iter()
            .flat_map(|(_, v)| v.iter().copied())
            .chain(references.iter().map(|r| r.1)),
        false,
    );
    axes(&mut out, &frame, y_label);
    let (x_lo, x_hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let x_of = |x: f64| LEFT + 10.0 + (plot_w - 20.0) * (x - x_lo) / span;
    for &x in xs {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            px(x_of(x)),
            px(HEIGHT - BOTTOM + 16.0),
            x
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        px(LEFT + plot_w / 2.0),
        px(HEIGHT - 18.0),
        escape(x_label)
    );
    let mut names = Vec::new();
    for (si, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let points: Vec<String> = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| format!("{},{}", px(x_of(x)), px(frame.y(y))))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        for (&x, &y) in xs.iter().zip(ys) {
            let _ = writeln!(
                out,
                r#"<circle cx="{}" cy="{}" r="3" fill="{color}" data-series="{}" data-x="{x}" data-value="{y}"/>"#,
                px(x_of(x)),
                px(frame.y(y)),
                escape(name)
            );
        }
        names.push(name.clone());
    }
    for (ri, (name, y)) in references.iter().enumerate() {
        let color = PALETTE[(series.len() + ri) % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<line x1="{LEFT}" y1="{yy}" x2="{}" y2="{yy}" stroke="{color}" stroke-dasharray="6 4" data-series="{}" data-value="{y}"/>"#,
            px(WIDTH - RIGHT),
            escape(name),
            yy = px(frame.y(*y))
        );
        names.push(name.clone());
    }
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// `data-value` attributes in document order.
pub fn data_values(svg: &str) -> Vec<String> {
    svg.split("data-value=\"")
        .skip(1)
        .filter_map(|rest| rest.split('"').next().map(str::to_string))
        .collect()
}
