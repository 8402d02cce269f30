use std::fmt::Write as _;

use crate::geometry::RotatedRect;

fn polygon(out: &mut String, r: &RotatedRect, color: &str) {
    let pts: Vec<String> = r.corners.iter().map(|p| format!("{:.3},{:.3}", p.x, p.y)).collect();
    let _ = writeln!(
        out,
        r#"  <polygon points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
        pts.join(" ")
    );
}

/// SVG with ground truth in green and detections in red.
pub fn render_overlay(width: u32, height: u32, gt: &[RotatedRect], dets: &[RotatedRect]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"  <rect width="{width}" height="{height}" fill="white"/>"#);
    for r in gt {
        polygon(&mut s, r, "green");
    }
    for r in dets {
        polygon(&mut s, r, "red");
    }
    s.push_str("</svg>\n");
    s
}
