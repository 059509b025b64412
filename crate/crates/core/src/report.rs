//! CSV tables and SVG figures for evaluation results.
//!
//! Column layouts are fixed; `docs/report_formats.md` lists them.

use std::fmt::Write as _;

use crate::evaluate::{BinRow, Counts, DistanceBins, FpRow, Heatmap, N_COLUMN_BINS};
use crate::radarnet::EpochStat;

pub const SUMMARY_COLUMNS: &str = "detector,map,accuracy_tp_over_tp_fp_fn,tp,fp,fn";
pub const BINS_COLUMNS: &str = "detector,bin_lo_m,bin_hi_m,gt,tp_matched,tp_perbox";
pub const FP_COLUMNS: &str = "detector,threshold,tp,fp,note";

/// Per-detector headline numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSummary {
    pub name: String,
    pub map: f64,
    pub accuracy: f64,
    pub counts: Counts,
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

pub fn summary_csv(rows: &[DetectorSummary]) -> String {
    let mut out = format!("{SUMMARY_COLUMNS}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.name,
            num(r.map),
            num(r.accuracy),
            r.counts.tp,
            r.counts.fp,
            r.counts.fn_
        );
    }
    out
}

pub fn summary_text(rows: &[DetectorSummary]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(
            out,
            "{:<8} mAP {:6.2}%  accuracy {:6.2}%  TP {:5}  FP {:5}  FN {:5}",
            r.name,
            100.0 * r.map,
            100.0 * r.accuracy,
            r.counts.tp,
            r.counts.fp,
            r.counts.fn_
        );
    }
    out.push_str("accuracy = TP / (TP + FP + FN)\n");
    out.push_str("radar boxes span their slice bundle's columns at full image height\n");
    out
}

pub fn bins_csv(per_detector: &[(&str, &[BinRow])], bins: &DistanceBins) -> String {
    let mut out = format!("{BINS_COLUMNS}\n");
    for (name, rows) in per_detector {
        for (k, r) in rows.iter().enumerate() {
            let (lo, hi) = bins.edges(k);
            let _ = writeln!(
                out,
                "{name},{lo},{hi},{},{},{}",
                r.gt, r.tp_matched, r.tp_perbox
            );
        }
    }
    out
}

pub fn heatmap_columns() -> String {
    let mut cols = vec!["bin_lo_m".to_string(), "bin_hi_m".to_string()];
    cols.extend((1..=N_COLUMN_BINS).map(|i| format!("col_{i}")));
    cols.join(",")
}

/// Blank cells mean "undefined" (no ground truth).
pub fn heatmap_csv(m: &Heatmap, bins: &DistanceBins) -> String {
    let mut out = heatmap_columns();
    out.push('\n');
    for row in 0..m.n_rows {
        let (lo, hi) = bins.edges(row);
        let _ = write!(out, "{lo},{hi}");
        for col in 0..N_COLUMN_BINS {
            out.push(',');
            if let Some(v) = m.get(row, col) {
                out.push_str(&num(v));
            }
        }
        out.push('\n');
    }
    out
}

pub fn fp_csv(rows: &[FpRow]) -> String {
    let mut out = format!("{FP_COLUMNS}\n");
    for r in rows {
        let th = r.threshold.map(num).unwrap_or_default();
        let _ = writeln!(out, "{},{th},{},{},{}", r.detector, r.tp, r.fp, r.note);
    }
    out
}

const PALETTE: [&str; 4] = ["#9e9e9e", "#1f77b4", "#ff7f0e", "#2ca02c"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Grouped bars per distance bin: ground truth then each detector's matched count.
pub fn bins_svg(per_detector: &[(&str, &[BinRow])], bins: &DistanceBins) -> String {
    let (w, h, left, bottom, top) = (900.0, 420.0, 60.0, 50.0, 40.0);
    let series: Vec<(String, Vec<usize>)> = std::iter::once((
        "ground truth".to_string(),
        per_detector
            .first()
            .map_or_else(Vec::new, |(_, r)| r.iter().map(|b| b.gt).collect()),
    ))
    .chain(
        per_detector
            .iter()
            .map(|(n, r)| (n.to_string(), r.iter().map(|b| b.tp_matched).collect())),
    )
    .collect();
    let max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let plot_w = w - left - 20.0;
    let plot_h = h - top - bottom;
    let group = plot_w / bins.n_bins as f64;
    let bar = group * 0.8 / series.len().max(1) as f64;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    out.push_str(
        "\n<text x=\"60\" y=\"20\" font-size=\"14\">Detected vehicles by distance</text>\n",
    );
    for (si, (name, vals)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for (k, &v) in vals.iter().enumerate() {
            let bh = plot_h * v as f64 / max;
            let x = left + k as f64 * group + group * 0.1 + si as f64 * bar;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{:.2}" width="{bar:.2}" height="{bh:.2}" fill="{color}"/>"#,
                top + plot_h - bh
            );
        }
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="26" width="10" height="10" fill="{color}"/><text x="{:.2}" y="35">{}</text>"#,
            left + 300.0 + si as f64 * 130.0,
            left + 314.0 + si as f64 * 130.0,
            escape(name)
        );
    }
    for k in 0..bins.n_bins {
        let (lo, hi) = bins.edges(k);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{lo}-{hi} m</text>"#,
            left + (k as f64 + 0.5) * group,
            h - bottom + 18.0
        );
    }
    let _ = writeln!(
        out,
        r#"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    let _ = writeln!(out, r#"<text x="10" y="{:.2}">{max}</text>"#, top + 4.0);
    out.push_str("</svg>\n");
    out
}

fn color_for(v: f64, lo: f64, hi: f64, diverging: bool) -> String {
    let t = if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.5
    };
    let (r, g, b) = if diverging {
        // Blue for negative, white at zero, red for positive.
        if t < 0.5 {
            let u = t * 2.0;
            (u, u, 1.0)
        } else {
            let u = (1.0 - t) * 2.0;
            (1.0, u, u)
        }
    } else {
        (1.0 - t, 1.0 - 0.6 * t, 1.0 - 0.2 * t)
    };
    format!(
        "#{:02x}{:02x}{:02x}",
        (r * 255.0) as u8,
        (g * 255.0) as u8,
        (b * 255.0) as u8
    )
}

/// Distance rows by image-column cells; empty cells are drawn hatched grey.
pub fn heatmap_svg(title: &str, m: &Heatmap, bins: &DistanceBins, diverging: bool) -> String {
    let (cell_w, cell_h, left, top) = (50.0, 28.0, 80.0, 40.0);
    let w = left + cell_w * N_COLUMN_BINS as f64 + 20.0;
    let h = top + cell_h * m.n_rows as f64 + 40.0;
    let vals: Vec<f64> = m.values.iter().flatten().copied().collect();
    let (mut lo, mut hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if vals.is_empty() {
        (lo, hi) = (0.0, 1.0);
    }
    if diverging {
        let span = lo.abs().max(hi.abs()).max(1.0);
        (lo, hi) = (-span, span);
    }
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        out,
        "\n<text x=\"{left}\" y=\"20\" font-size=\"14\">{}</text>",
        escape(title)
    );
    // Nearest distances at the bottom, as in a forward view.
    for row in 0..m.n_rows {
        let y = top + cell_h * (m.n_rows - 1 - row) as f64;
        let (blo, bhi) = bins.edges(row);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{blo}-{bhi} m</text>"#,
            left - 6.0,
            y + cell_h * 0.65
        );
        for col in 0..N_COLUMN_BINS {
            let x = left + cell_w * col as f64;
            match m.get(row, col) {
                Some(v) => {
                    let _ = writeln!(
                        out,
                        r#"<rect x="{x:.2}" y="{y:.2}" width="{cell_w}" height="{cell_h}" fill="{}" stroke="white"/><text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                        color_for(v, lo, hi, diverging),
                        x + cell_w / 2.0,
                        y + cell_h * 0.65,
                        if v.fract() == 0.0 {
                            format!("{v}")
                        } else {
                            format!("{v:.2}")
                        }
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        r##"<rect x="{x:.2}" y="{y:.2}" width="{cell_w}" height="{cell_h}" fill="#eeeeee" stroke="white"/>"##
                    );
                }
            }
        }
    }
    for col in 0..N_COLUMN_BINS {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            left + cell_w * (col as f64 + 0.5),
            top + cell_h * m.n_rows as f64 + 14.0,
            col + 1
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Training loss per epoch as a polyline on a log scale.
pub fn loss_svg(history: &[EpochStat]) -> String {
    let (w, h, left, top, bottom) = (640.0, 360.0, 70.0, 40.0, 40.0);
    let plot_w = w - left - 20.0;
    let plot_h = h - top - bottom;
    let logs: Vec<f64> = history.iter().map(|e| e.loss.max(1e-12).log10()).collect();
    let (lo, hi) = logs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = history.len().max(2) - 1;
    let points: Vec<String> = logs
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            format!(
                "{:.2},{:.2}",
                left + plot_w * i as f64 / n as f64,
                top + plot_h * (hi - v) / span
            )
        })
        .collect();
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    out.push_str("\n<text x=\"70\" y=\"20\" font-size=\"14\">Radar network training loss</text>\n");
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
        PALETTE[1],
        points.join(" ")
    );
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        let _ = writeln!(
            out,
            r#"<text x="4" y="{top}">{:.4}</text>"#,
            if hi.is_finite() {
                10f64.powf(hi)
            } else {
                first.loss
            }
        );
        let _ = writeln!(
            out,
            r#"<text x="4" y="{:.2}">{:.4}</text>"#,
            top + plot_h,
            if lo.is_finite() {
                10f64.powf(lo)
            } else {
                last.loss
            }
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">epoch {}</text>"#,
            left + plot_w,
            h - 12.0,
            last.epoch
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_headers() {
        assert_eq!(
            summary_csv(&[]),
            "detector,map,accuracy_tp_over_tp_fp_fn,tp,fp,fn\n"
        );
        assert_eq!(
            bins_csv(&[], &DistanceBins::default()),
            "detector,bin_lo_m,bin_hi_m,gt,tp_matched,tp_perbox\n"
        );
        assert_eq!(fp_csv(&[]), "detector,threshold,tp,fp,note\n");
        assert_eq!(
            heatmap_columns(),
            "bin_lo_m,bin_hi_m,col_1,col_2,col_3,col_4,col_5,col_6,col_7,col_8,col_9,col_10,col_11,col_12,col_13,col_14,col_15,col_16"
        );
    }

    #[test]
    fn heatmap_csv_blanks_undefined_cells() {
        let mut values = vec![None; N_COLUMN_BINS];
        values[2] = Some(0.5);
        let m = Heatmap { n_rows: 1, values };
        let bins = DistanceBins {
            bin_width_m: 10.0,
            n_bins: 1,
        };
        let text = heatmap_csv(&m, &bins);
        let row = text.lines().nth(1).unwrap();
        assert_eq!(row, "0,10,,,0.500000,,,,,,,,,,,,,");
        assert!(heatmap_svg("t", &m, &bins, false).starts_with("<svg"));
        assert!(heatmap_svg("t", &m, &bins, true).ends_with("</svg>\n"));
    }

    #[test]
    fn bar_chart_has_one_bar_per_series_and_bin() {
        let rows = vec![
            BinRow {
                gt: 4,
                tp_matched: 2,
                tp_perbox: 3
            };
            10
        ];
        let svg = bins_svg(
            &[("camera", &rows), ("fused", &rows)],
            &DistanceBins::default(),
        );
        // 3 series x 10 bins of bars, plus 3 legend swatches.
        assert_eq!(svg.matches("<rect").count(), 33);
    }
}
