//! Static SVG figures of a scenario, its cell chain and a logged run.
//!
//! Output depends only on the inputs: coordinates are printed with a fixed
//! number of decimals and elements appear in a fixed order. Every layer is a
//! `<g>` with a stable `id` so figures can be inspected programmatically.

use crate::geometry::{Aabb, Point2};
use crate::scenario::{PlannedScenario, Scenario};
use crate::sim::{step_samples, TrajectoryLog};
use std::fmt::Write as _;
use std::path::Path;

/// Longest side of the drawing area in pixels.
pub const CANVAS_PX: f64 = 800.0;
const PAD_PX: f64 = 10.0;
/// Snapshots of each moving obstacle drawn along a run.
const MOVING_SNAPSHOTS: usize = 8;

/// Maps workspace metres to SVG pixels, y pointing up in the workspace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub workspace: Aabb,
    pub scale: f64,
}

impl Viewport {
    pub fn fit(workspace: Aabb) -> Self {
        let side = workspace.width().max(workspace.height()).max(1e-9);
        Self {
            workspace,
            scale: CANVAS_PX / side,
        }
    }

    pub fn width_px(&self) -> f64 {
        self.workspace.width() * self.scale + 2.0 * PAD_PX
    }

    pub fn height_px(&self) -> f64 {
        self.workspace.height() * self.scale + 2.0 * PAD_PX
    }

    pub fn to_px(&self, p: Point2) -> (f64, f64) {
        (
            PAD_PX + (p.x - self.workspace.min.x) * self.scale,
            PAD_PX + (self.workspace.max.y - p.y) * self.scale,
        )
    }

    pub fn from_px(&self, x: f64, y: f64) -> Point2 {
        Point2::new(
            self.workspace.min.x + (x - PAD_PX) / self.scale,
            self.workspace.max.y - (y - PAD_PX) / self.scale,
        )
    }
}

fn points_attr(vp: &Viewport, pts: &[Point2]) -> String {
    let mut s = String::new();
    for (i, p) in pts.iter().enumerate() {
        let (x, y) = vp.to_px(*p);
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:.3},{y:.3}");
    }
    s
}

fn polygon(out: &mut String, vp: &Viewport, pts: &[Point2], style: &str) {
    let _ = writeln!(
        out,
        "    <polygon points=\"{}\" {style}/>",
        points_attr(vp, pts)
    );
}

fn polyline(out: &mut String, vp: &Viewport, pts: &[Point2], style: &str) {
    let _ = writeln!(
        out,
        "    <polyline points=\"{}\" fill=\"none\" {style}/>",
        points_attr(vp, pts)
    );
}

fn circle(out: &mut String, vp: &Viewport, c: Point2, r_px: f64, style: &str) {
    let (x, y) = vp.to_px(c);
    let _ = writeln!(
        out,
        "    <circle cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"{r_px:.3}\" {style}/>"
    );
}

fn ellipse_outline(center: Point2, axes: [f64; 2], phi: f64) -> Vec<Point2> {
    (0..48)
        .map(|i| {
            let s = std::f64::consts::TAU * i as f64 / 48.0;
            center + Point2::new(axes[0] * s.cos(), axes[1] * s.sin()).rotated(phi)
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Draws whatever is available: the scenario always, the chain and global
/// path when `plan` is given, and the COM path, footsteps and moving-obstacle
/// traces when `log` is given.
pub fn render_svg(
    scenario: &Scenario,
    plan: Option<&PlannedScenario>,
    log: Option<&TrajectoryLog>,
) -> String {
    let vp = Viewport::fit(scenario.workspace);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.3} {h:.3}\">",
        w = vp.width_px(),
        h = vp.height_px()
    );
    let _ = writeln!(out, "  <title>{}</title>", escape(&scenario.name));

    let ws = scenario.workspace;
    let corners = [
        ws.min,
        Point2::new(ws.max.x, ws.min.y),
        ws.max,
        Point2::new(ws.min.x, ws.max.y),
    ];
    out.push_str("  <g id=\"workspace\">\n");
    polygon(
        &mut out,
        &vp,
        &corners,
        "fill=\"#ffffff\" stroke=\"#000000\" stroke-width=\"1.5\"",
    );
    out.push_str("  </g>\n");

    out.push_str("  <g id=\"cells\">\n");
    if let Some(p) = plan {
        for cell in &p.chain.cells {
            polygon(
                &mut out,
                &vp,
                &cell.vertices(),
                "fill=\"#4a90d9\" fill-opacity=\"0.12\" stroke=\"#4a90d9\" stroke-width=\"0.8\"",
            );
        }
    }
    out.push_str("  </g>\n");

    out.push_str("  <g id=\"inflated-obstacles\">\n");
    let map = plan.map_or_else(|| scenario.static_map(), |p| p.map.clone());
    for o in &map.obstacles {
        polygon(
            &mut out,
            &vp,
            o.vertices(),
            "fill=\"none\" stroke=\"#888888\" stroke-width=\"0.8\" stroke-dasharray=\"4 3\"",
        );
    }
    out.push_str("  </g>\n");

    out.push_str("  <g id=\"obstacles\">\n");
    for o in &scenario.static_obstacles {
        polygon(
            &mut out,
            &vp,
            o.vertices(),
            "fill=\"#555555\" stroke=\"none\"",
        );
    }
    out.push_str("  </g>\n");

    out.push_str("  <g id=\"moving-obstacles\">\n");
    let horizon_s = log.and_then(|l| l.steps.last()).map_or(0.0, |r| r.time_s);
    for o in &scenario.moving_obstacles {
        let trace: Vec<Point2> = (0..=64)
            .map(|i| o.center(horizon_s * i as f64 / 64.0))
            .collect();
        if horizon_s > 0.0 {
            polyline(
                &mut out,
                &vp,
                &trace,
                "stroke=\"#d0021b\" stroke-width=\"1\" stroke-dasharray=\"2 2\"",
            );
        }
        let snaps = if horizon_s > 0.0 { MOVING_SNAPSHOTS } else { 1 };
        for i in 0..snaps {
            let t = horizon_s * i as f64 / (snaps.max(2) - 1) as f64;
            let opacity = 0.2 + 0.6 * i as f64 / snaps.max(2) as f64;
            polygon(
                &mut out,
                &vp,
                &ellipse_outline(o.center(t), o.semi_axes, o.orientation(t)),
                &format!(
                    "fill=\"#d0021b\" fill-opacity=\"{:.3}\" stroke=\"#d0021b\" stroke-width=\"0.8\"",
                    opacity * 0.4
                ),
            );
        }
    }
    out.push_str("  </g>\n");

    out.push_str("  <g id=\"rrt-path\">\n");
    if let Some(p) = plan {
        polyline(
            &mut out,
            &vp,
            &p.path.points,
            "stroke=\"#f5a623\" stroke-width=\"1.5\"",
        );
    }
    out.push_str("  </g>\n");

    out.push_str("  <g id=\"waypoints\">\n");
    if let Some(p) = plan {
        for w in &p.chain.waypoints {
            circle(&mut out, &vp, *w, 3.0, "fill=\"#4a90d9\"");
        }
    }
    out.push_str("  </g>\n");

    out.push_str("  <g id=\"footsteps\">\n");
    if let Some(l) = log {
        for rec in &l.steps {
            if let Some(u) = rec.input {
                let colour = match rec.stance {
                    crate::lip::Stance::Left => "#7ed321",
                    crate::lip::Stance::Right => "#9013fe",
                };
                circle(
                    &mut out,
                    &vp,
                    rec.state.position() + u.offset(),
                    1.5,
                    &format!("fill=\"{colour}\""),
                );
            }
        }
    }
    out.push_str("  </g>\n");

    out.push_str("  <g id=\"com-path\">\n");
    if let Some(l) = log {
        let period = scenario.lip.step_duration_s;
        let mut pts = Vec::new();
        for rec in &l.steps {
            if rec.input.is_some() {
                pts.extend(
                    step_samples(rec, period, &scenario.lip)
                        .into_iter()
                        .map(|(_, p)| p),
                );
            } else {
                pts.push(rec.state.position());
            }
        }
        pts.dedup();
        if !pts.is_empty() {
            polyline(
                &mut out,
                &vp,
                &pts,
                "stroke=\"#000000\" stroke-width=\"1.2\"",
            );
        }
    }
    out.push_str("  </g>\n");

    out.push_str("  <g id=\"endpoints\">\n");
    circle(&mut out, &vp, scenario.start, 5.0, "fill=\"#417505\"");
    circle(&mut out, &vp, scenario.goal, 5.0, "fill=\"#d0021b\"");
    out.push_str("  </g>\n");
    out.push_str("</svg>\n");
    out
}

/// Renders and writes the figure to `path`.
pub fn save_svg(
    path: &Path,
    scenario: &Scenario,
    plan: Option<&PlannedScenario>,
    log: Option<&TrajectoryLog>,
) -> std::io::Result<()> {
    std::fs::write(path, render_svg(scenario, plan, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{run_closed_loop, SimOptions};

    fn group<'a, 'i>(doc: &'a roxmltree::Document<'i>, id: &str) -> roxmltree::Node<'a, 'i> {
        doc.descendants()
            .find(|n| n.attribute("id") == Some(id))
            .unwrap_or_else(|| panic!("missing group {id}"))
    }

    fn parse_points(s: &str) -> Vec<(f64, f64)> {
        s.split_whitespace()
            .map(|pair| {
                let (x, y) = pair.split_once(',').unwrap();
                (x.parse().unwrap(), y.parse().unwrap())
            })
            .collect()
    }

    /// Even-odd test on a pixel polygon, with points within `tol` pixels of
    /// an edge counting as inside.
    fn inside_px(poly: &[(f64, f64)], p: (f64, f64), tol: f64) -> bool {
        let mut inside = false;
        let n = poly.len();
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let (ex, ey) = (b.0 - a.0, b.1 - a.1);
            let len2 = ex * ex + ey * ey;
            let t = (((p.0 - a.0) * ex + (p.1 - a.1) * ey) / len2).clamp(0.0, 1.0);
            let (dx, dy) = (a.0 + t * ex - p.0, a.1 + t * ey - p.1);
            if dx * dx + dy * dy <= tol * tol {
                return true;
            }
            if (a.1 > p.1) != (b.1 > p.1) && p.0 < a.0 + (p.1 - a.1) / (b.1 - a.1) * ex {
                inside = !inside;
            }
        }
        inside
    }

    #[test]
    fn viewport_round_trip() {
        let vp = Viewport::fit(Aabb::new(Point2::new(-2.0, 1.0), Point2::new(8.0, 6.0)));
        assert_eq!(vp.to_px(Point2::new(-2.0, 6.0)), (PAD_PX, PAD_PX));
        let p = Point2::new(3.3, 2.7);
        let (x, y) = vp.to_px(p);
        assert!(vp.from_px(x, y).distance(p) < 1e-12);
        assert!((vp.width_px() - (CANVAS_PX + 2.0 * PAD_PX)).abs() < 1e-9);
    }

    #[test]
    fn scenario_only_figure() {
        let s = Scenario::moving_obstacle();
        let svg = render_svg(&s, None, None);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert_eq!(
            group(&doc, "obstacles")
                .children()
                .filter(|n| n.is_element())
                .count(),
            s.static_obstacles.len()
        );
        assert_eq!(
            group(&doc, "com-path")
                .children()
                .filter(|n| n.is_element())
                .count(),
            0
        );
        assert_eq!(
            group(&doc, "cells")
                .children()
                .filter(|n| n.is_element())
                .count(),
            0
        );
        assert_eq!(
            group(&doc, "moving-obstacles")
                .children()
                .filter(|n| n.is_element())
                .count(),
            1
        );
    }

    #[test]
    fn run_figure_is_valid_deterministic_and_path_stays_in_cells() {
        let s = Scenario::moving_obstacle();
        let plan = s.plan().unwrap();
        let log = run_closed_loop(&s, &plan.chain, &s.mpc, &SimOptions::default());
        let svg = render_svg(&s, Some(&plan), Some(&log));
        assert_eq!(svg, render_svg(&s, Some(&plan), Some(&log)));
        let doc = roxmltree::Document::parse(&svg).unwrap();

        let cells: Vec<Vec<(f64, f64)>> = group(&doc, "cells")
            .children()
            .filter(|n| n.has_tag_name("polygon"))
            .map(|n| parse_points(n.attribute("points").unwrap()))
            .collect();
        assert_eq!(cells.len(), plan.chain.len());
        assert_eq!(
            group(&doc, "waypoints")
                .children()
                .filter(|n| n.is_element())
                .count(),
            plan.chain.waypoints.len()
        );
        let steps = group(&doc, "footsteps")
            .children()
            .filter(|n| n.is_element())
            .count();
        assert_eq!(
            steps,
            log.steps.iter().filter(|r| r.input.is_some()).count()
        );

        let com = group(&doc, "com-path")
            .children()
            .find(|n| n.has_tag_name("polyline"))
            .unwrap();
        let pts = parse_points(com.attribute("points").unwrap());
        assert!(pts.len() > log.steps.len());
        // rasterize to whole pixels and allow one pixel of slack
        for p in pts {
            let px = (p.0.round(), p.1.round());
            assert!(
                cells.iter().any(|c| inside_px(c, px, 1.0)),
                "COM pixel {px:?} outside every drawn cell"
            );
        }
    }
}
