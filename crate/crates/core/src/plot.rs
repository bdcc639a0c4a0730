//! Self-contained SVG figures of per-code diagnostics.

use std::fmt::Write as _;

use serde_json::json;

use crate::error::{Error, Result};
use crate::geometry::DiagnosticRow;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 40.0;
const BAR: f64 = 16.0;

/// Viridis-like ramp sampled at five anchors.
const RAMP: [(f64, [u8; 3]); 5] = [
    (0.0, [68, 1, 84]),
    (0.25, [59, 82, 139]),
    (0.5, [33, 145, 140]),
    (0.75, [94, 201, 98]),
    (1.0, [253, 231, 37]),
];

fn color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let k = RAMP.iter().position(|a| a.0 >= t).unwrap_or(RAMP.len() - 1).max(1);
    let (t0, c0) = RAMP[k - 1];
    let (t1, c1) = RAMP[k];
    let s = (t - t0) / (t1 - t0);
    let mix = |a: u8, b: u8| (a as f64 + s * (b as f64 - a as f64)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(c0[0], c1[0]), mix(c0[1], c1[1]), mix(c0[2], c1[2]))
}

fn finite_range(v: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    v.filter(|x| x.is_finite()).fold(None, |acc, x| match acc {
        None => Some((x, x)),
        Some((lo, hi)) => Some((lo.min(x), hi.max(x))),
    })
}

fn axis(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

fn header(out: &mut String, title: &str, meta: &serde_json::Value) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = SIZE + 2.0 * BAR + MARGIN,
        h = SIZE
    );
    let _ = writeln!(out, "<metadata>{meta}</metadata>");
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>"#,
        SIZE / 2.0
    );
}

/// Latent scatter of the first two code coordinates colored by `value`,
/// with the color scale spanning the data minimum and maximum.
pub fn latent_scatter(rows: &[DiagnosticRow], quantity: &str, value: impl Fn(&DiagnosticRow) -> f64) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::usage("nothing to plot"));
    }
    let vals: Vec<f64> = rows.iter().map(&value).collect();
    let (vmin, vmax) = finite_range(vals.iter().copied())
        .ok_or_else(|| Error::usage(format!("no finite values of {quantity}")))?;
    let x = |r: &DiagnosticRow| r.z[0];
    let y = |r: &DiagnosticRow| if r.z.len() > 1 { r.z[1] } else { 0.0 };
    let (x0, x1) = axis_of(rows.iter().map(x));
    let (y0, y1) = axis_of(rows.iter().map(y));
    let span = SIZE - 2.0 * MARGIN;
    let meta = json!({
        "quantity": quantity,
        "points": rows.len(),
        "color_min": vmin,
        "color_max": vmax,
    });
    let mut out = String::new();
    header(&mut out, &format!("latent codes colored by {quantity}"), &meta);
    let _ = writeln!(
        out,
        r#"<rect x="{m:.1}" y="{m:.1}" width="{s:.1}" height="{s:.1}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        s = span
    );
    for (r, v) in rows.iter().zip(&vals) {
        let px = MARGIN + (x(r) - x0) / (x1 - x0) * span;
        let py = SIZE - MARGIN - (y(r) - y0) / (y1 - y0) * span;
        let t = if vmax > vmin { (v - vmin) / (vmax - vmin) } else { 0.5 };
        let _ = writeln!(out, r#"<circle cx="{px:.2}" cy="{py:.2}" r="2.5" fill="{}"/>"#, color(t));
    }
    let bx = SIZE;
    let steps = 32;
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        let h = span / steps as f64;
        let by = SIZE - MARGIN - (i + 1) as f64 * h;
        let _ = writeln!(
            out,
            r#"<rect x="{bx:.1}" y="{by:.2}" width="{BAR:.1}" height="{:.2}" fill="{}"/>"#,
            h + 0.5,
            color(t)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10">{vmax:.4}</text>"#,
        bx,
        MARGIN - 4.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10">{vmin:.4}</text>"#,
        bx,
        SIZE - MARGIN + 12.0
    );
    out.push_str("</svg>\n");
    Ok(out)
}

fn axis_of(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = finite_range(v).unwrap_or((0.0, 1.0));
    axis(lo, hi)
}

/// Strips of `log10 κ_jac` and `log10 κ_pbm` with a dashed line at `κ = 1`
/// and a triangle at the mean of the finite values.
pub fn kappa_strips(rows: &[DiagnosticRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::usage("nothing to plot"));
    }
    let series: [(&str, Vec<f64>); 2] = [
        ("kappa_jac", rows.iter().map(|r| r.kappa_jac).collect()),
        ("kappa_pbm", rows.iter().map(|r| r.kappa_pbm).collect()),
    ];
    let hi = finite_range(series.iter().flat_map(|s| s.1.iter().copied()))
        .map_or(1.0, |(_, h)| h.max(1.0))
        .log10()
        .max(0.1)
        * 1.05;
    let span = SIZE - 2.0 * MARGIN;
    let px = |k: f64| MARGIN + k.max(1.0).log10() / hi * span;
    let mut meta = serde_json::Map::new();
    for (name, v) in &series {
        let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        let mean = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
        meta.insert(
            name.to_string(),
            json!({ "mean": mean, "infinite": v.len() - finite.len() }),
        );
    }
    meta.insert("log10_axis_max".into(), json!(hi));
    let mut out = String::new();
    header(&mut out, "condition numbers (log scale)", &serde_json::Value::Object(meta.clone()));
    let x1 = px(1.0);
    let _ = writeln!(
        out,
        r#"<line x1="{x1:.2}" y1="{:.1}" x2="{x1:.2}" y2="{:.1}" stroke="red" stroke-dasharray="4 3"/>"#,
        MARGIN,
        SIZE - MARGIN
    );
    for (row, (name, v)) in series.iter().enumerate() {
        let cy = MARGIN + (row as f64 + 0.5) * span / 2.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{name}</text>"#,
            MARGIN,
            cy - span / 4.0 + 14.0
        );
        for (i, k) in v.iter().enumerate().filter(|(_, k)| k.is_finite()) {
            // deterministic jitter from the row index
            let j = ((i as u64).wrapping_mul(2654435761) % 1000) as f64 / 1000.0 - 0.5;
            let _ = writeln!(
                out,
                r##"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="#3b528b" fill-opacity="0.5"/>"##,
                px(*k),
                cy + j * span / 5.0
            );
        }
        if let Some(mean) = meta[*name]["mean"].as_f64() {
            let mx = px(mean);
            let my = cy + span / 8.0;
            let _ = writeln!(
                out,
                r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="green"/>"#,
                mx,
                my - 6.0,
                mx - 5.0,
                my + 4.0,
                mx + 5.0,
                my + 4.0
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<line x1="{m:.1}" y1="{y:.1}" x2="{e:.1}" y2="{y:.1}" stroke="black"/>"#,
        m = MARGIN,
        e = SIZE - MARGIN,
        y = SIZE - MARGIN
    );
    for d in 0..=(hi.floor() as i32) {
        let x = MARGIN + d as f64 / hi * span;
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">1e{d}</text>"#,
            SIZE - MARGIN + 14.0
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}
