//! Static SVG scatter of robot positions over time.

use std::fmt::Write;

use phswarm_core::dynamics::JointState;

const SIZE: f64 = 640.0;
const MARGIN: f64 = 32.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// One polyline per robot through its planar positions (first two position
/// coordinates), a hollow circle at the start and a filled one at the end.
/// Goals, when given, are drawn as crosses.
pub fn trajectory_svg(trajectory: &[JointState], goals: Option<&JointState>, title: &str) -> String {
    let points = trajectory.iter().chain(goals).flat_map(|x| (0..x.n()).map(move |i| planar(x, i)));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    if !lo[0].is_finite() {
        lo = [-1.0, -1.0];
        hi = [1.0, 1.0];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let map = |p: [f64; 2]| (MARGIN + (p[0] - lo[0]) * scale, SIZE - MARGIN - (p[1] - lo[1]) * scale);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{MARGIN}" y="20" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    let n = trajectory.first().map_or(0, JointState::n);
    for i in 0..n {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = trajectory
            .iter()
            .map(|x| {
                let (a, b) = map(planar(x, i));
                format!("{a:.2},{b:.2}")
            })
            .collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let (sx, sy) = map(planar(&trajectory[0], i));
        let (ex, ey) = map(planar(trajectory.last().expect("non-empty"), i));
        let _ = writeln!(svg, r#"<circle cx="{sx:.2}" cy="{sy:.2}" r="4" fill="none" stroke="{colour}"/>"#);
        let _ = writeln!(svg, r#"<circle cx="{ex:.2}" cy="{ey:.2}" r="4" fill="{colour}"/>"#);
        if let Some(g) = goals.filter(|g| i < g.n()) {
            let (gx, gy) = map(planar(g, i));
            let _ = writeln!(
                svg,
                r#"<path d="M{:.2},{:.2}L{:.2},{:.2}M{:.2},{:.2}L{:.2},{:.2}" stroke="{colour}"/>"#,
                gx - 4.0,
                gy - 4.0,
                gx + 4.0,
                gy + 4.0,
                gx - 4.0,
                gy + 4.0,
                gx + 4.0,
                gy - 4.0
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn planar(x: &JointState, i: usize) -> [f64; 2] {
    let p = x.position(i);
    [p[0], p.get(1).copied().unwrap_or(0.0)]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_robot() {
        let a = JointState::new(2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = JointState::new(2, vec![0.5, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0]).unwrap();
        let svg = trajectory_svg(&[a.clone(), b], Some(&a), "a < b");
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a &lt; b"));
    }
}
