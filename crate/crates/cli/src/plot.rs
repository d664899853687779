//! Accuracy-per-round line chart as a standalone SVG.

use std::fmt::Write;

use crate::report::RunData;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 220.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const DASHES: [&str; 4] = ["", "6 3", "2 3", "8 3 2 3"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One line per run and tier: colour by run, dash pattern by tier.
pub fn accuracy_svg(runs: &[RunData]) -> String {
    let max_round = runs
        .iter()
        .flat_map(|r| r.records.iter().map(|rec| rec.round))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |round: f64| LEFT + round / max_round * plot_w;
    let y = |acc: f64| TOP + (1.0 - acc.clamp(0.0, 1.0)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/><text x="{2:.1}" y="{3:.1}" text-anchor="end">{acc:.1}</text>"##,
            y(acc),
            LEFT + plot_w,
            LEFT - 6.0,
            y(acc) + 4.0
        );
    }
    let ticks = 5.min(max_round as usize);
    for i in 0..=ticks {
        let round = (max_round * i as f64 / ticks as f64).round();
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{round}</text>"#,
            x(round),
            TOP + plot_h + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">round</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">test accuracy</text>"#,
        TOP + plot_h / 2.0
    );

    let mut legend = 0;
    for (r, run) in runs.iter().enumerate() {
        let color = COLORS[r % COLORS.len()];
        for (t, tier) in run.summary.tiers.iter().enumerate() {
            let dash = DASHES[t % DASHES.len()];
            let points: Vec<String> = run
                .records
                .iter()
                .filter_map(|rec| rec.accuracy.get(t).map(|a| format!("{:.1},{:.1}", x(rec.round as f64), y(*a))))
                .collect();
            if points.is_empty() {
                continue;
            }
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" stroke-dasharray="{dash}" points="{}"/>"#,
                points.join(" ")
            );
            let ly = TOP + 10.0 + legend as f64 * 16.0;
            let lx = LEFT + plot_w + 12.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="1.5" stroke-dasharray="{dash}"/><text x="{:.1}" y="{:.1}">{} / {}</text>"#,
                lx + 24.0,
                lx + 30.0,
                ly + 4.0,
                escape(&run.name),
                escape(tier)
            );
            legend += 1;
        }
    }
    svg.push_str("</svg>\n");
    svg
}
