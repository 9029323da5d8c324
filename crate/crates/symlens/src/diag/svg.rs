//! Standalone SVG rendering for sweep reports: median/IQR range plots and
//! heatmaps. Pure text output, no external assets, byte-deterministic.

use super::sweep::{HeatmapSummary, SweepSummary};
use super::SummaryStats;
use crate::Result;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub struct RenderOutcome {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<String>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn svg_header(out: &mut String, title: &str) {
    writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"##
    )
    .unwrap();
    writeln!(
        out,
        r##"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"##
    )
    .unwrap();
    writeln!(
        out,
        r##"<text x="{}" y="22" font-family="monospace" font-size="14" text-anchor="middle">{title}</text>"##,
        WIDTH / 2.0
    )
    .unwrap();
}

/// Median markers with Q1–Q3 range bars over categorical x positions.
fn range_plot(title: &str, ylabel: &str, labels: &[String], stats: &[Option<SummaryStats>]) -> Option<String> {
    let present: Vec<(usize, SummaryStats)> = stats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|v| (i, v)))
        .collect();
    if present.is_empty() {
        return None;
    }
    let lo = present.iter().map(|(_, s)| s.q1).fold(f64::INFINITY, f64::min);
    let hi = present
        .iter()
        .map(|(_, s)| s.q3)
        .fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if (hi - lo).abs() < 1e-300 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = (hi - lo) * 0.08;
        (lo - pad, hi + pad)
    };
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x_of = |i: usize| MARGIN_L + plot_w * (i as f64 + 0.5) / labels.len() as f64;
    let y_of = |v: f64| MARGIN_T + plot_h * (1.0 - (v - lo) / (hi - lo));

    let mut out = String::new();
    svg_header(&mut out, title);
    // frame and y ticks
    writeln!(
        out,
        r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
    )
    .unwrap();
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_of(v);
        writeln!(
            out,
            r##"<line x1="{MARGIN_L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##,
            MARGIN_L + plot_w
        )
        .unwrap();
        writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="10" text-anchor="end">{}</text>"##,
            MARGIN_L - 6.0,
            y + 3.5,
            fmt_tick(v)
        )
        .unwrap();
    }
    writeln!(
        out,
        r##"<text x="16" y="{:.2}" font-family="monospace" font-size="11" transform="rotate(-90 16 {:.2})" text-anchor="middle">{ylabel}</text>"##,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    )
    .unwrap();
    // x labels
    let label_step = (labels.len() / 16).max(1);
    for (i, label) in labels.iter().enumerate() {
        if i % label_step != 0 {
            continue;
        }
        writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="10" text-anchor="middle">{label}</text>"##,
            x_of(i),
            MARGIN_T + plot_h + 16.0
        )
        .unwrap();
    }
    // range bars then markers
    for (i, s) in &present {
        let x = x_of(*i);
        let (y1, y3) = (y_of(s.q1), y_of(s.q3));
        writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{y1:.2}" x2="{x:.2}" y2="{y3:.2}" stroke="#1d3557" stroke-width="1.5"/>"##
        )
        .unwrap();
        for y in [y1, y3] {
            writeln!(
                out,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#1d3557" stroke-width="1.5"/>"##,
                x - 4.0,
                x + 4.0
            )
            .unwrap();
        }
    }
    for (i, s) in &present {
        writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#e63946" stroke="#7a1722"/>"##,
            x_of(*i),
            y_of(s.median)
        )
        .unwrap();
    }
    writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="10" text-anchor="middle">markers: median, bars: Q1-Q3</text>"##,
        WIDTH / 2.0,
        HEIGHT - 8.0
    )
    .unwrap();
    out.push_str("</svg>\n");
    Some(out)
}

/// Three-stop linear color scale (dark blue → teal → yellow).
fn color_of(t: f64) -> String {
    let stops = [(45.0, 52.0, 112.0), (33.0, 145.0, 140.0), (253.0, 231.0, 37.0)];
    let t = t.clamp(0.0, 1.0);
    let (a, b, frac) = if t < 0.5 {
        (stops[0], stops[1], t * 2.0)
    } else {
        (stops[1], stops[2], (t - 0.5) * 2.0)
    };
    let lerp = |x: f64, y: f64| (x + (y - x) * frac).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2))
}

/// Heatmap over the 2D translation lattice; rows are `a` offsets, columns
/// `b` offsets. Linear color scale with the min/max spelled out (and a flag
/// when they coincide).
fn heatmap_plot(title: &str, offsets: &[usize], matrix: &[Vec<f64>]) -> Option<String> {
    let mut finite: Vec<f64> = matrix
        .iter()
        .flat_map(|row| row.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    if finite.is_empty() {
        return None;
    }
    finite.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (mn, mx) = (finite[0], finite[finite.len() - 1]);
    let flat = mx - mn <= 0.0;

    let k = offsets.len();
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let cell_w = plot_w / k as f64;
    let cell_h = plot_h / k as f64;
    let mut out = String::new();
    svg_header(&mut out, title);
    for (ai, row) in matrix.iter().enumerate() {
        for (bi, v) in row.iter().enumerate() {
            let x = MARGIN_L + bi as f64 * cell_w;
            let y = MARGIN_T + ai as f64 * cell_h;
            let fill = if !v.is_finite() {
                "#bbbbbb".to_string()
            } else if flat {
                color_of(0.5)
            } else {
                color_of((v - mn) / (mx - mn))
            };
            writeln!(
                out,
                r##"<rect x="{x:.2}" y="{y:.2}" width="{cell_w:.2}" height="{cell_h:.2}" fill="{fill}" stroke="white" stroke-width="0.5"/>"##
            )
            .unwrap();
        }
    }
    // axis labels: columns are b (vertical shift), rows are a (horizontal)
    let tick_step = (k / 16).max(1);
    for (bi, off) in offsets.iter().enumerate() {
        if bi % tick_step != 0 {
            continue;
        }
        writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="10" text-anchor="middle">{off}</text>"##,
            MARGIN_L + (bi as f64 + 0.5) * cell_w,
            MARGIN_T + plot_h + 14.0
        )
        .unwrap();
    }
    for (ai, off) in offsets.iter().enumerate() {
        if ai % tick_step != 0 {
            continue;
        }
        writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="10" text-anchor="end">{off}</text>"##,
            MARGIN_L - 6.0,
            MARGIN_T + (ai as f64 + 0.5) * cell_h + 3.5
        )
        .unwrap();
    }
    writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="10" text-anchor="middle">rows: a (x shift), cols: b (y shift)</text>"##,
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 24.0
    )
    .unwrap();
    let legend = if flat {
        format!("scale: min = max = {} (uniform)", fmt_tick(mn))
    } else {
        format!("scale: min = {}, max = {}", fmt_tick(mn), fmt_tick(mx))
    };
    writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="10" text-anchor="middle">{legend}</text>"##,
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 8.0
    )
    .unwrap();
    out.push_str("</svg>\n");
    Some(out)
}

/// Short x-axis labels: translation elements keep only their varying offset.
fn plot_labels(summary: &SweepSummary) -> Vec<String> {
    summary
        .elements
        .iter()
        .map(|e| match summary.group.as_str() {
            "th" => e
                .element
                .trim_start_matches("T(")
                .split(',')
                .next()
                .unwrap_or(&e.element)
                .to_string(),
            "tv" => e
                .element
                .trim_end_matches(')')
                .split(',')
                .nth(1)
                .unwrap_or(&e.element)
                .to_string(),
            _ => e.element.clone(),
        })
        .collect()
}

/// Render every figure the summary supports into `out_dir`.
pub fn render_summary(summary: &SweepSummary, out_dir: &Path) -> Result<RenderOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut skipped = Vec::new();
    let key = &summary.group;
    let labels = plot_labels(summary);

    let error_stats: Vec<Option<SummaryStats>> =
        summary.elements.iter().map(|e| e.error).collect();
    match range_plot(
        &format!("relative SMSE under {key} actions"),
        "SMSE(g.x)/SMSE(x)",
        &labels,
        &error_stats,
    ) {
        Some(svg) => {
            let path = out_dir.join(format!("error_{key}.svg"));
            std::fs::write(&path, svg.as_bytes())?;
            written.push(path);
        }
        None => skipped.push(format!("error_{key}.svg: empty series")),
    }

    let infl_stats: Vec<Option<SummaryStats>> =
        summary.elements.iter().map(|e| e.influence).collect();
    match range_plot(
        &format!("standardized influence under {key} actions"),
        "influence / baseline",
        &labels,
        &infl_stats,
    ) {
        Some(svg) => {
            let path = out_dir.join(format!("influence_{key}.svg"));
            std::fs::write(&path, svg.as_bytes())?;
            written.push(path);
        }
        None => skipped.push(format!("influence_{key}.svg: empty series")),
    }

    if let Some(HeatmapSummary {
        offsets,
        error_q3,
        influence_median,
        ..
    }) = &summary.heatmap
    {
        match heatmap_plot("Q3 relative SMSE over translations", offsets, error_q3) {
            Some(svg) => {
                let path = out_dir.join(format!("heatmap_error_{key}.svg"));
                std::fs::write(&path, svg.as_bytes())?;
                written.push(path);
            }
            None => skipped.push("heatmap_error: no finite cells".into()),
        }
        match heatmap_plot(
            "median standardized influence over translations",
            offsets,
            influence_median,
        ) {
            Some(svg) => {
                let path = out_dir.join(format!("heatmap_influence_{key}.svg"));
                std::fs::write(&path, svg.as_bytes())?;
                written.push(path);
            }
            None => skipped.push("heatmap_influence: no finite cells".into()),
        }
    }

    Ok(RenderOutcome { written, skipped })
}
