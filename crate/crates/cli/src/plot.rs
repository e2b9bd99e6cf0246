//! Learning curves: eval accuracy against cumulative training FLOPs.

use std::fmt::Write;

use autoprog_core::train::MetricRecord;

fn bounds(records: &[MetricRecord]) -> (f64, f64) {
    let max_flops = records.iter().map(|r| r.cumulative_flops).fold(0.0, f64::max).max(1.0);
    let max_acc = records.iter().map(|r| r.eval_accuracy).fold(0.0, f64::max).max(1e-9);
    (max_flops, max_acc)
}

/// Character-grid chart; `*` marks a regular epoch, `s` a supernet epoch.
pub fn text_chart(records: &[MetricRecord], width: usize, height: usize) -> String {
    let (max_flops, max_acc) = bounds(records);
    let mut grid = vec![vec![' '; width]; height];
    for r in records {
        let x = ((r.cumulative_flops / max_flops) * (width - 1) as f64).round() as usize;
        let y = ((r.eval_accuracy / max_acc) * (height - 1) as f64).round() as usize;
        grid[height - 1 - y.min(height - 1)][x.min(width - 1)] = if r.phase == "supernet" { 's' } else { '*' };
    }
    let mut out = String::new();
    for (i, row) in grid.iter().enumerate() {
        let label = if i == 0 {
            format!("{max_acc:>6.3}")
        } else if i + 1 == height {
            format!("{:>6.3}", 0.0)
        } else {
            " ".repeat(6)
        };
        let _ = writeln!(out, "{label} |{}", row.iter().collect::<String>());
    }
    let _ = writeln!(out, "{} +{}", " ".repeat(6), "-".repeat(width));
    let _ = writeln!(out, "{}  0{:>w$.3e} FLOPs", " ".repeat(6), max_flops, w = width - 1);
    for r in records.windows(2).filter(|w| w[0].stage != w[1].stage) {
        let _ = writeln!(
            out,
            "stage {} from epoch {}: depth {} grid {}",
            r[1].stage, r[1].epoch, r[1].depth, r[1].grid
        );
    }
    out
}

pub fn svg_chart(records: &[MetricRecord]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let (max_flops, max_acc) = bounds(records);
    let px = |f: f64| pad + f / max_flops * (w - 2.0 * pad);
    let py = |a: f64| h - pad - a / max_acc * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for r in records.windows(2).filter(|w| w[0].stage != w[1].stage) {
        let x = px(r[0].cumulative_flops);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{pad}" x2="{x:.1}" y2="{}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
            h - pad
        );
    }
    let points: Vec<String> = records
        .iter()
        .map(|r| format!("{:.1},{:.1}", px(r.cumulative_flops), py(r.eval_accuracy)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        points.join(" ")
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">cumulative training FLOPs (max {:.3e})</text>"#,
        w / 2.0,
        h - 15.0,
        max_flops
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">eval accuracy (max {:.3})</text>"#,
        h / 2.0,
        h / 2.0,
        max_acc
    );
    s.push_str("</svg>\n");
    s
}
