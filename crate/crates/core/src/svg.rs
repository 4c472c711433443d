//! Plain SVG renders for failing gap cases and projection profiles.

use std::fmt::Write as _;

use crate::config::KeyValues;
use crate::gaps::GapVerdict;
use crate::geometry::Point;
use crate::sets::DiscreteMeasure;

const SIZE: f64 = 600.0;
const PAD: f64 = 30.0;

struct View {
    lo: Point,
    hi: Point,
}

impl View {
    fn scale(&self) -> f64 {
        let w = (self.hi.x - self.lo.x).max(f64::MIN_POSITIVE);
        let h = (self.hi.y - self.lo.y).max(f64::MIN_POSITIVE);
        (SIZE - 2.0 * PAD) / w.max(h)
    }

    fn px(&self, p: Point) -> (f64, f64) {
        let s = self.scale();
        (PAD + (p.x - self.lo.x) * s, SIZE - PAD - (p.y - self.lo.y) * s)
    }

    fn contains(&self, p: Point) -> bool {
        p.x >= self.lo.x && p.x <= self.hi.x && p.y >= self.lo.y && p.y <= self.hi.y
    }

    fn clip(&self, lo: Point, hi: Point) -> Option<(Point, Point)> {
        let a = Point::new(lo.x.max(self.lo.x), lo.y.max(self.lo.y));
        let b = Point::new(hi.x.min(self.hi.x), hi.y.min(self.hi.y));
        (a.x < b.x && a.y < b.y).then_some((a, b))
    }

    fn rect(&self, out: &mut String, lo: Point, hi: Point, style: &str) {
        if let Some((lo, hi)) = self.clip(lo, hi) {
            let (x0, y1) = self.px(lo);
            let (x1, y0) = self.px(hi);
            let _ = writeln!(
                out,
                r#"<rect x="{x0:.3}" y="{y0:.3}" width="{:.3}" height="{:.3}" {style}/>"#,
                x1 - x0,
                y1 - y0
            );
        }
    }
}

fn open(out: &mut String, echo: &KeyValues, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    out.push_str("<!--\n");
    for (k, v) in echo.iter() {
        let _ = writeln!(out, "{k} = {v}");
    }
    out.push_str("-->\n");
    let _ = writeln!(out, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{PAD}" y="18" font-size="13" font-family="monospace">{}</text>"#, escape(title));
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// The rectangles `𝒢`, `ℬ`, `𝒜` and the gap `K` of one verdict, drawn in
/// its frame (`x` upper left, `y` lower right).
pub fn gap_case(v: &GapVerdict, mu: &DiscreteMeasure, echo: &KeyValues) -> String {
    let frame = v.frame;
    let x = frame.map(v.witness[0]);
    let y = frame.map(v.witness[1]);
    let height = x.y - y.y;
    let width = y.x - x.x;
    let margin = 0.25 * width.max(height);
    let view = View {
        lo: Point::new(x.x - margin, y.y - height / 2.0 - margin),
        hi: Point::new(y.x + margin, x.y + margin),
    };
    let mut out = String::new();
    open(&mut out, echo, &format!("cube {} root {}: {:?}", v.cube, v.root, v.status));
    view.rect(
        &mut out,
        Point::new(x.x, y.y - height / 2.0),
        Point::new(y.x, y.y + height / 2.0),
        r#"fill="none" stroke="gray" stroke-width="1""#,
    );
    if let Some(t) = &v.trace {
        let n = t.n as i64;
        let (sx0, _) = view.px(Point::new(x.x, y.y));
        let (sx1, _) = view.px(Point::new(y.x, y.y));
        for i in -n..=n {
            let (lo, _) = t.strip_rect(i);
            if view.contains(Point::new(view.lo.x, lo.y)) {
                let (_, py) = view.px(lo);
                let _ = writeln!(
                    out,
                    r#"<line x1="{sx0:.3}" y1="{py:.3}" x2="{sx1:.3}" y2="{py:.3}" stroke="lightgray" stroke-width="0.3"/>"#
                );
            }
        }
        if let (Some(i), Some(z)) = (v.leftist_index, v.z) {
            let s = t.strip_height();
            view.rect(
                &mut out,
                Point::new(x.x, y.y + (2 * i - 3) as f64 * s / 2.0),
                Point::new(z.x, y.y + (2 * i + 3) as f64 * s / 2.0),
                r#"fill="steelblue" fill-opacity="0.25" stroke="steelblue""#,
            );
        }
    }
    if let Some((lo, hi)) = v.a_rect {
        view.rect(&mut out, lo, hi, r#"fill="orange" fill-opacity="0.3" stroke="darkorange""#);
    }
    if let Some(k) = v.gap {
        let k = if frame.sx > 0.0 { k } else { (-k.1, -k.0) };
        let (x0, py) = view.px(Point::new(k.0.max(view.lo.x), view.lo.y));
        let (x1, _) = view.px(Point::new(k.1.min(view.hi.x), view.lo.y));
        let _ = writeln!(
            out,
            r#"<line x1="{x0:.3}" y1="{:.3}" x2="{x1:.3}" y2="{:.3}" stroke="green" stroke-width="4"/>"#,
            py - 4.0,
            py - 4.0
        );
    }
    for p in mu.points() {
        let q = frame.map(*p);
        if view.contains(q) {
            let (a, b) = view.px(q);
            let _ = writeln!(out, r#"<circle cx="{a:.3}" cy="{b:.3}" r="0.8" fill="black"/>"#);
        }
    }
    for (p, colour) in [(x, "red"), (y, "blue")].into_iter().chain(v.z.map(|z| (z, "darkorange"))) {
        let (a, b) = view.px(p);
        let _ = writeln!(out, r#"<circle cx="{a:.3}" cy="{b:.3}" r="4" fill="none" stroke="{colour}" stroke-width="2"/>"#);
    }
    out.push_str("</svg>\n");
    out
}

/// `θ ↦ |π_θ(E)|` over `[0, 1)` with its mean.
pub fn favard_plot(profile: &[(f64, f64)], echo: &KeyValues) -> String {
    let mut out = String::new();
    let top = profile.iter().map(|p| p.1).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mean = if profile.is_empty() { 0.0 } else { profile.iter().map(|p| p.1).sum::<f64>() / profile.len() as f64 };
    open(&mut out, echo, &format!("projection length, mean {mean:.6}"));
    let sx = SIZE - 2.0 * PAD;
    let sy = (SIZE - 2.0 * PAD) / top;
    let pts: Vec<String> = profile
        .iter()
        .map(|&(t, l)| format!("{:.3},{:.3}", PAD + t * sx, SIZE - PAD - l * sy))
        .collect();
    let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1"/>"#, pts.join(" "));
    let my = SIZE - PAD - mean * sy;
    let _ = writeln!(
        out,
        r#"<line x1="{PAD}" y1="{my:.3}" x2="{:.3}" y2="{my:.3}" stroke="red" stroke-dasharray="4 3"/>"#,
        SIZE - PAD
    );
    let side = SIZE - 2.0 * PAD;
    let _ = writeln!(out, r#"<rect x="{PAD}" y="{PAD}" width="{side}" height="{side}" fill="none" stroke="gray"/>"#);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaps::{Frame, VerdictStatus};
    use std::collections::BTreeMap;

    fn echo() -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("a", 16);
        kv
    }

    #[test]
    fn favard_plot_is_svg_with_params() {
        let profile: Vec<(f64, f64)> = (0..8).map(|i| (i as f64 / 8.0, 1.0 + i as f64)).collect();
        let s = favard_plot(&profile, &echo());
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("a = 16") && s.contains("<polyline"));
        assert!(s.contains("mean 4.500000"));
    }

    #[test]
    fn gap_case_draws_rectangles() {
        let v = GapVerdict {
            root: 0,
            cube: 3,
            level: 5,
            witness: [Point::new(0.0, 1.0), Point::new(1.0, 0.0)],
            frame: Frame { sx: 1.0, sy: 1.0 },
            leftist_index: None,
            z: Some(Point::new(0.5, 0.0)),
            gap: Some((0.3, 0.45)),
            a_rect: Some((Point::new(0.4, -0.2), Point::new(0.5, 0.2))),
            checks: BTreeMap::new(),
            measured: BTreeMap::new(),
            status: VerdictStatus::Fail("a_interior_empty".into()),
            trace: None,
        };
        let mu = DiscreteMeasure::new(vec![Point::new(0.45, 0.0)], vec![1.0], 0.0).unwrap();
        let s = gap_case(&v, &mu, &echo());
        assert!(s.contains("cube 3 root 0"));
        assert!(s.contains("darkorange") && s.contains("stroke=\"green\""));
        assert_eq!(s.matches("<circle").count(), 4);
    }
}
