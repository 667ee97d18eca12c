//! Plain SVG rendering of a scenario: observations green, ground truth blue,
//! predictions red.

use std::fmt::Write;

use camnet_core::scenario::{Scenario, OBS_STEPS};
use camnet_model::model::ScenarioSamples;

pub const OBSERVED: &str = "green";
pub const GROUND_TRUTH: &str = "blue";
pub const PREDICTED: &str = "red";

const SIZE: f64 = 800.0;
const MARGIN: f64 = 40.0;

type Point = (f64, f64);

struct Frame {
    min: Point,
    scale: f64,
}

impl Frame {
    fn fit(points: &[Point]) -> Frame {
        let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
        for p in points {
            lo = (lo.0.min(p.0), lo.1.min(p.1));
            hi = (hi.0.max(p.0), hi.1.max(p.1));
        }
        if points.is_empty() {
            lo = (0.0, 0.0);
            hi = (1.0, 1.0);
        }
        let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1.0);
        Frame { min: lo, scale: (SIZE - 2.0 * MARGIN) / span }
    }

    /// SVG y grows downwards, so northing is flipped.
    fn map(&self, p: Point) -> Point {
        (MARGIN + (p.0 - self.min.0) * self.scale, SIZE - MARGIN - (p.1 - self.min.1) * self.scale)
    }
}

fn polyline(out: &mut String, f: &Frame, pts: &[Point], colour: &str, width: f64) {
    if pts.len() < 2 {
        return;
    }
    let coords: Vec<String> = pts.iter().map(|p| f.map(*p)).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    writeln!(
        out,
        r#"<polyline fill="none" stroke="{colour}" stroke-width="{width}" points="{}"/>"#,
        coords.join(" ")
    )
    .unwrap();
}

/// Contiguous valid runs of an agent between `from` and `to` (exclusive).
fn runs(s: &Scenario, a: usize, from: usize, to: usize) -> Vec<Vec<Point>> {
    let ag = &s.agents[a];
    let mut out: Vec<Vec<Point>> = Vec::new();
    let mut cur = Vec::new();
    for k in from..to.min(ag.states.len()) {
        if ag.valid[k] {
            cur.push(ag.position(k));
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn render(s: &Scenario, pred: Option<&ScenarioSamples>) -> String {
    let last = OBS_STEPS - 1;
    let mut all: Vec<Point> = Vec::new();
    for (i, a) in s.agents.iter().enumerate() {
        all.extend((0..a.states.len()).filter(|&k| a.valid[k]).map(|k| s.agents[i].position(k)));
    }
    if let Some(p) = pred {
        all.extend(p.agents.iter().flat_map(|a| a.modes.iter().flatten().copied()));
    }
    let f = Frame::fit(&all);
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(out, "<title>{}</title>", s.id).unwrap();
    for (i, a) in s.agents.iter().enumerate() {
        let w = if a.focal { 2.5 } else { 1.5 };
        writeln!(out, r#"<g id="agent-{}">"#, a.station_id).unwrap();
        for r in runs(s, i, 0, OBS_STEPS) {
            polyline(&mut out, &f, &r, OBSERVED, w);
        }
        for r in runs(s, i, last, a.states.len()) {
            polyline(&mut out, &f, &r, GROUND_TRUTH, w);
        }
        if let Some(p) = pred.and_then(|p| p.agents.iter().find(|x| x.station_id == a.station_id)) {
            for m in &p.modes {
                let mut pts = vec![a.position(last)];
                pts.extend_from_slice(m);
                polyline(&mut out, &f, &pts, PREDICTED, 1.0);
            }
        }
        out.push_str("</g>\n");
    }
    for (i, (label, colour)) in [("observed", OBSERVED), ("ground truth", GROUND_TRUTH), ("predicted", PREDICTED)]
        .iter()
        .enumerate()
    {
        let y = 20.0 + 16.0 * i as f64;
        writeln!(
            out,
            r#"<text x="10" y="{y}" font-family="sans-serif" font-size="12" fill="{colour}">{label}</text>"#
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use camnet_core::synth;

    #[test]
    fn colours_and_shape() {
        let s = synth::linear_scenario("p", 10.0, 0.0);
        let svg = render(&s, None);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains(r#"stroke="green""#) && svg.contains(r#"stroke="blue""#));
        assert!(!svg.contains(r#"stroke="red""#));
    }

    #[test]
    fn north_is_up() {
        let f = Frame::fit(&[(0.0, 0.0), (0.0, 10.0)]);
        assert!(f.map((0.0, 10.0)).1 < f.map((0.0, 0.0)).1);
    }
}
