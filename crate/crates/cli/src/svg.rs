//! Minimal SVG charts: a line chart and a grouped bar chart.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, y_max: f64, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/>"##,
            x0 + 1.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            x0 - 5.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn nice_max(v: f64) -> f64 {
    if !(v.is_finite() && v > 0.0) {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&m| m >= v)
        .unwrap_or(10.0 * mag)
}

/// One series per entry of `series`; `x` values are epoch numbers starting at
/// 1. Dashed vertical lines mark `boundaries` (epochs after which a stage
/// ends).
pub fn line_chart(title: &str, y_label: &str, series: &[(&str, Vec<f64>)], boundaries: &[usize]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(1);
    let y_max = nice_max(series.iter().flat_map(|(_, v)| v.iter().copied()).fold(0.0, f64::max));
    axes(&mut out, y_max, "epoch", y_label);
    let px = |i: usize| LEFT + (W - LEFT - RIGHT) * (i as f64 + 1.0) / (n as f64 + 1.0);
    let py = |v: f64| H - BOTTOM - (H - BOTTOM - TOP) * (v / y_max).clamp(0.0, 1.0);
    for &b in boundaries.iter().filter(|&&b| b < n) {
        let x = (px(b - 1) + px(b)) / 2.0;
        let _ = writeln!(
            out,
            r##"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="#888" stroke-dasharray="4 3"/>"##,
            H - BOTTOM,
            TOP
        );
    }
    let step = (n / 10).max(1);
    for i in (0..n).filter(|i| (i + 1) % step == 0 || *i == 0) {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            px(i),
            H - BOTTOM + 16.0,
            i + 1
        );
    }
    for (k, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", px(i), py(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = TOP + 16.0 * k as f64 + 8.0;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="12" height="3" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            LEFT + 10.0,
            ly,
            LEFT + 26.0,
            ly + 5.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: `groups[g].1[s]` is the value of series `s` in group `g`.
/// Missing values are left blank.
pub fn bar_chart(title: &str, y_label: &str, series: &[&str], groups: &[(String, Vec<Option<f64>>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let y_max = nice_max(
        groups
            .iter()
            .flat_map(|(_, v)| v.iter().flatten().copied())
            .fold(0.0, f64::max),
    );
    axes(&mut out, y_max, "", y_label);
    let slot = (W - LEFT - RIGHT) / groups.len().max(1) as f64;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    for (g, (label, values)) in groups.iter().enumerate() {
        let x0 = LEFT + slot * g as f64 + slot * 0.1;
        for (s, v) in values.iter().enumerate() {
            let Some(v) = v else { continue };
            let h = (H - BOTTOM - TOP) * (v / y_max).clamp(0.0, 1.0);
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"><title>{v}</title></rect>"#,
                x0 + bar * s as f64,
                H - BOTTOM - h,
                bar * 0.95,
                PALETTE[s % PALETTE.len()]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + slot * 0.4,
            H - BOTTOM + 16.0,
            escape(label)
        );
    }
    for (s, name) in series.iter().enumerate() {
        let x = W - RIGHT - 150.0;
        let y = TOP + 16.0 * s as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{y}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            PALETTE[s % PALETTE.len()],
            x + 16.0,
            y + 9.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}
