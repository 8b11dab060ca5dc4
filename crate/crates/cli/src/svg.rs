//! Top view of direction sets on the upper hemisphere.

use std::fmt::Write as _;

use qspace::sphere::{canonicalize_hemisphere, DirectionSet};

pub const DEFAULT_COLORS: [&str; 2] = ["#1f77b4", "#d62728"];

const SIZE: f64 = 400.0;
const RADIUS: f64 = 180.0;
const MARKER: f64 = 4.0;

pub struct PlotSet<'a> {
    pub dirs: &'a DirectionSet,
    pub color: &'a str,
    pub label: &'a str,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn valid_color(c: &str) -> bool {
    !c.is_empty() && c.chars().all(|ch| ch == '#' || ch.is_ascii_alphanumeric())
}

/// Orthographic projection of each direction's canonical vector onto the
/// xy-plane, inside the unit-circle outline. The first set is drawn as dots,
/// the second as squares.
pub fn plot_dirs_svg(sets: &[PlotSet]) -> Result<String, String> {
    if sets.is_empty() || sets.len() > 2 {
        return Err(format!("plot takes one or two direction sets, got {}", sets.len()));
    }
    if let Some(bad) = sets.iter().find(|s| !valid_color(s.color)) {
        return Err(format!("bad color '{}'", bad.color));
    }
    let c = SIZE / 2.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<circle cx="{c}" cy="{c}" r="{RADIUS}" fill="none" stroke="#444" stroke-width="1"/>"##
    );
    for (k, set) in sets.iter().enumerate() {
        let _ = writeln!(s, r#"<g fill="{}" stroke="none">"#, set.color);
        for v in set.dirs.to_cartesian() {
            let v = canonicalize_hemisphere(&v);
            // +y points up on the page
            let (x, y) = (c + RADIUS * v[0], c - RADIUS * v[1]);
            if k == 0 {
                let _ = writeln!(s, r#"<circle cx="{x:.3}" cy="{y:.3}" r="{MARKER}"/>"#);
            } else {
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.3}" y="{:.3}" width="{}" height="{}"/>"#,
                    x - MARKER,
                    y - MARKER,
                    2.0 * MARKER,
                    2.0 * MARKER
                );
            }
        }
        let _ = writeln!(s, "</g>");
        if !set.label.is_empty() {
            let _ = writeln!(
                s,
                r#"<text x="8" y="{}" font-family="sans-serif" font-size="12" fill="{}">{}</text>"#,
                16 + 16 * k,
                set.color,
                escape(set.label)
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use qspace::sphere::Direction;

    fn set(dirs: Vec<Direction>) -> DirectionSet {
        DirectionSet::new(dirs).unwrap()
    }

    #[test]
    fn pole_is_at_the_center() {
        let d = set(vec![Direction::new(0.0, 0.0)]);
        let svg = plot_dirs_svg(&[PlotSet { dirs: &d, color: "red", label: "" }]).unwrap();
        assert!(svg.contains(r#"<circle cx="200.000" cy="200.000" r="4"/>"#));
    }

    #[test]
    fn one_marker_per_direction() {
        let a = set((0..7).map(|k| Direction::new(0.2 + 0.2 * k as f64, 0.9 * k as f64)).collect());
        let b = set((0..5).map(|k| Direction::new(1.0, 1.2 * k as f64)).collect());
        let svg = plot_dirs_svg(&[
            PlotSet { dirs: &a, color: DEFAULT_COLORS[0], label: "fixed" },
            PlotSet { dirs: &b, color: DEFAULT_COLORS[1], label: "learned" },
        ])
        .unwrap();
        // the outline is the only other circle
        assert_eq!(svg.matches("<circle").count(), 8);
        assert_eq!(svg.matches("<rect x=").count(), 5);
    }

    #[test]
    fn lower_hemisphere_is_folded_up() {
        let up = set(vec![Direction::new(0.4, 1.0)]);
        let down = set(vec![Direction::new(std::f64::consts::PI - 0.4, 1.0 + std::f64::consts::PI)]);
        let p = |d: &DirectionSet| plot_dirs_svg(&[PlotSet { dirs: d, color: "red", label: "" }]).unwrap();
        assert_eq!(p(&up), p(&down));
    }

    #[test]
    fn output_is_deterministic() {
        let a = set((0..9).map(|k| Direction::new(0.1 * k as f64, 0.7 * k as f64)).collect());
        let p = || plot_dirs_svg(&[PlotSet { dirs: &a, color: "#00aa00", label: "a & b" }]).unwrap();
        assert_eq!(p(), p());
        assert!(p().contains("a &amp; b"));
    }

    #[test]
    fn rejects_bad_input() {
        let a = set(vec![Direction::new(0.1, 0.2)]);
        let one = PlotSet { dirs: &a, color: "red", label: "" };
        assert!(plot_dirs_svg(&[]).is_err());
        assert!(plot_dirs_svg(&[
            PlotSet { dirs: &a, color: "red", label: "" },
            PlotSet { dirs: &a, color: "red", label: "" },
            one,
        ])
        .is_err());
        assert!(plot_dirs_svg(&[PlotSet { dirs: &a, color: "x\"/><script", label: "" }]).is_err());
    }
}
