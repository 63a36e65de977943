//! Log-log scaling plots as standalone SVG (no timestamp metadata).

use std::fmt::Write;

use crate::audit::ScalingFit;

const W: f64 = 520.0;
const H: f64 = 380.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 40.0;
const MB: f64 = 55.0;

/// Moment estimates against `δ` with the fitted line and reference slopes
/// 1 and `p/2` drawn through the fit's centroid.
pub fn scaling_svg(fit: &ScalingFit) -> String {
    let pts: Vec<(f64, f64)> = fit
        .deltas
        .iter()
        .zip(&fit.values)
        .filter(|(_, v)| **v > 0.0)
        .map(|(d, v)| (d.log10(), v.log10()))
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let title = format!("{} p={}", fit.functional.name(), fit.p);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{title}</text>"#,
        W / 2.0
    );
    if pts.len() < 2 {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">no positive estimates</text>"#,
            W / 2.0,
            H / 2.0
        );
        s.push_str("</svg>\n");
        return s;
    }
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let cy = match (fit.slope, fit.intercept) {
        (Some(b), Some(a)) => (a + b * cx * std::f64::consts::LN_10) / std::f64::consts::LN_10,
        _ => pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64,
    };
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad_x = 0.05 * (x1 - x0).max(1e-3);
    let pad_y = 0.1 * (y1 - y0).max(1e-3);
    let (x0, x1, y0, y1) = (x0 - pad_x, x1 + pad_x, y0 - pad_y, y1 + pad_y);
    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);
    let _ = writeln!(
        s,
        r#"<rect x="{ML}" y="{MT}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - ML - MR,
        H - MT - MB
    );
    for k in (x0.ceil() as i64)..=(x1.floor() as i64) {
        let x = sx(k as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/>"#,
            H - MB,
            H - MB + 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">1e{k}</text>"#,
            H - MB + 18.0
        );
    }
    for k in (y0.ceil() as i64)..=(y1.floor() as i64) {
        let y = sy(k as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y:.2}" x2="{ML}" y2="{y:.2}" stroke="black"/>"#,
            ML - 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">1e{k}</text>"#,
            ML - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">delta</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">moment</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(
        s,
        r#"<clipPath id="plot"><rect x="{ML}" y="{MT}" width="{}" height="{}"/></clipPath>"#,
        W - ML - MR,
        H - MT - MB
    );
    let mut line = |slope: f64, style: &str, label: &str, row: usize| {
        let (ya, yb) = (cy + slope * (x0 - cx), cy + slope * (x1 - cx));
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" {style} clip-path="url(#plot)"/>"#,
            sx(x0),
            sy(ya),
            sx(x1),
            sy(yb)
        );
        let ly = MT + 16.0 + 16.0 * row as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" {style}/>"#,
            ML + 10.0,
            ML + 40.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{label}</text>"#,
            ML + 46.0,
            ly + 4.0
        );
    };
    if let Some(b) = fit.slope {
        line(
            b,
            r#"stroke="black" stroke-width="2""#,
            &format!("fit, slope {b:.3}"),
            0,
        );
    }
    line(
        1.0,
        r#"stroke="steelblue" stroke-dasharray="6 4""#,
        "slope 1",
        1,
    );
    line(
        fit.p / 2.0,
        r#"stroke="firebrick" stroke-dasharray="2 3""#,
        &format!("slope p/2 = {}", fit.p / 2.0),
        2,
    );
    for &(x, y) in &pts {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="black"/>"#,
            sx(x),
            sy(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::Functional;

    #[test]
    fn renders_points_and_lines() {
        let fit = ScalingFit {
            functional: Functional::SupIncX,
            p: 4.0,
            deltas: vec![0.001, 0.01, 0.1],
            values: vec![1e-3, 1e-2, 1e-1],
            stderrs: vec![0.0; 3],
            slope: Some(1.0),
            intercept: Some(0.0),
            r2: Some(1.0),
            slope_stderr: Some(0.0),
            target: Some(1.0),
            window: Some(0.25),
            skipped: None,
            pass: true,
            reason: None,
        };
        let svg = scaling_svg(&fit);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("slope p/2 = 2"));
        assert_eq!(svg, scaling_svg(&fit));
    }
}
