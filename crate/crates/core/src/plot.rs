//! Minimal SVG rendering for trajectories and metric bars.

use std::fmt::Write as _;

use crate::motion::{MotionSequence, RegionPartition};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn header(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(out: &mut String, values: &[f64], x0: f64, y0: f64, w: f64, h: f64, lo: f64, hi: f64, color: &str) {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = values.len().max(2) - 1;
    let pts: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = x0 + w * i as f64 / n as f64;
            let y = y0 + h - h * (v - lo) / span;
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        out,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\" points=\"{}\"/>",
        pts.join(" ")
    );
}

/// Two panels, upper-region and lower-region expression channels (pose
/// channels join the lower panel), one line per channel.
pub fn trajectory_svg(seq: &MotionSequence, partition: &RegionPartition) -> String {
    let (w, ph, pad) = (640.0, 180.0, 30.0);
    let x = seq.motion_tensor();
    let lower: Vec<usize> = partition
        .lower
        .iter()
        .copied()
        .chain(seq.expr_dim()..x.cols())
        .collect();
    let mut out = header(w, 2.0 * ph + 3.0 * pad);
    for (k, (title, dims)) in [("upper region", &partition.upper), ("lower region + pose", &lower)]
        .into_iter()
        .enumerate()
    {
        let y0 = pad + k as f64 * (ph + pad);
        let cols: Vec<Vec<f64>> = dims.iter().map(|&c| x.column(c)).collect();
        let (lo, hi) = cols
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let _ = writeln!(out, "<text x=\"{pad}\" y=\"{}\">{title}</text>", y0 - 6.0);
        let _ = writeln!(
            out,
            "<rect x=\"{pad}\" y=\"{y0}\" width=\"{}\" height=\"{ph}\" fill=\"none\" stroke=\"#ccc\"/>",
            w - 2.0 * pad
        );
        for (i, col) in cols.iter().enumerate() {
            polyline(
                &mut out,
                col,
                pad,
                y0,
                w - 2.0 * pad,
                ph,
                lo,
                hi,
                PALETTE[i % PALETTE.len()],
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// One panel per metric, one bar per series entry.
pub fn bar_chart_svg(title: &str, panels: &[(String, Vec<(String, f64)>)]) -> String {
    let (pw, ph, pad) = (220.0, 200.0, 36.0);
    let w = pad + panels.len() as f64 * (pw + pad);
    let mut out = header(w, ph + 3.0 * pad + 40.0);
    let _ = writeln!(
        out,
        "<text x=\"{pad}\" y=\"18\" font-size=\"13\">{}</text>",
        escape(title)
    );
    for (p, (name, bars)) in panels.iter().enumerate() {
        let x0 = pad + p as f64 * (pw + pad);
        let y0 = 2.0 * pad;
        let finite: Vec<f64> = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).collect();
        let hi = finite.iter().copied().fold(0.0f64, f64::max);
        let lo = finite.iter().copied().fold(0.0f64, f64::min);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let zero = y0 + ph * hi / span;
        let _ = writeln!(out, "<text x=\"{x0}\" y=\"{}\">{}</text>", y0 - 8.0, escape(name));
        let _ = writeln!(
            out,
            "<line x1=\"{x0}\" y1=\"{zero:.2}\" x2=\"{}\" y2=\"{zero:.2}\" stroke=\"#444\"/>",
            x0 + pw
        );
        let bw = pw / bars.len().max(1) as f64;
        for (i, (label, v)) in bars.iter().enumerate() {
            let bx = x0 + i as f64 * bw + 2.0;
            if v.is_finite() {
                let bh = ph * v.abs() / span;
                let by = if *v >= 0.0 { zero - bh } else { zero };
                let _ = writeln!(
                    out,
                    "<rect x=\"{bx:.2}\" y=\"{by:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"{}\"><title>{}: {v:.4}</title></rect>",
                    bw - 4.0,
                    PALETTE[i % PALETTE.len()],
                    escape(label)
                );
            }
            let _ = writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"9\" transform=\"rotate(40 {:.2} {:.2})\">{}</text>",
                bx,
                y0 + ph + 12.0,
                bx,
                y0 + ph + 12.0,
                escape(label)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
