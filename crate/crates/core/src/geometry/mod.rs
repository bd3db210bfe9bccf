//! Planar geometry: points, convex polygons, half-space polytopes, the
//! Chebyshev-center LP, segment clipping and obstacle inflation.
//!
//! All membership tests use [`BOUNDARY_TOL`] against row-normalized
//! half-spaces, so a point on a face counts as inside.

mod lp;
mod polygon;
mod polytope;

pub use lp::{solve_lp, LpProblem, LpSolution, LpStatus};
pub use polygon::{
    clip_halfplane, closest_point_on_convex, convex_hull, inflate_obstacle, signed_area,
    ConvexPolygon,
};
pub use polytope::{chebyshev_center, poly_line_intersect, Chebyshev, HalfSpace, Polytope};

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};
use thiserror::Error;

/// Slack allowed when testing `r·p ≤ b` on unit-normal rows.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// Intersections whose inscribed disc is thinner than this are treated as empty.
pub const MIN_INSCRIBED_RADIUS: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("LP solver hit its pivot cap")]
    NumericalFailure,
    #[error("precondition violated: {0}")]
    PreconditionViolated(&'static str),
    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3-D cross product.
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Point2) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn lerp(self, o: Point2, t: f64) -> Point2 {
        self + (o - self) * t
    }

    /// Counter-clockwise rotation by `angle` radians.
    pub fn rotated(self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn perp(self) -> Point2 {
        Point2::new(-self.y, self.x)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// Axis-aligned rectangle `[min.x, max.x] × [min.y, max.y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point2,
    pub max: Point2,
}

impl Aabb {
    pub fn new(min: Point2, max: Point2) -> Self {
        Self { min, max }
    }

    pub fn square(half_width: f64) -> Self {
        Self::new(
            Point2::new(-half_width, -half_width),
            Point2::new(half_width, half_width),
        )
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.min.x - BOUNDARY_TOL
            && p.x <= self.max.x + BOUNDARY_TOL
            && p.y >= self.min.y - BOUNDARY_TOL
            && p.y <= self.max.y + BOUNDARY_TOL
    }

    pub fn overlaps(&self, o: &Aabb) -> bool {
        self.min.x <= o.max.x
            && o.min.x <= self.max.x
            && self.min.y <= o.max.y
            && o.min.y <= self.max.y
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        Aabb::new(
            self.min - Point2::new(margin, margin),
            self.max + Point2::new(margin, margin),
        )
    }

    pub fn of_points(points: &[Point2]) -> Aabb {
        let mut b = Aabb::new(
            Point2::new(f64::INFINITY, f64::INFINITY),
            Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        );
        for p in points {
            b.min.x = b.min.x.min(p.x);
            b.min.y = b.min.y.min(p.y);
            b.max.x = b.max.x.max(p.x);
            b.max.y = b.max.y.max(p.y);
        }
        b
    }

    /// The four box faces as a polytope.
    pub fn to_polytope(&self) -> Polytope {
        Polytope::from_box(self)
    }
}

/// Static part of the workspace. Obstacles are stored already inflated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticMap {
    pub workspace: Aabb,
    pub obstacles: Vec<ConvexPolygon>,
    pub inflation_radius: f64,
    #[serde(skip)]
    bounds: Vec<Aabb>,
}

impl StaticMap {
    /// Builds a map from already-inflated obstacles.
    pub fn new(workspace: Aabb, obstacles: Vec<ConvexPolygon>, inflation_radius: f64) -> Self {
        let bounds = obstacles.iter().map(|o| o.bounding_box()).collect();
        Self {
            workspace,
            obstacles,
            inflation_radius,
            bounds,
        }
    }

    /// Inflates raw obstacles by `radius` and shrinks the workspace walls by the same amount.
    pub fn from_raw(workspace: Aabb, raw: &[ConvexPolygon], radius: f64) -> Self {
        let workspace = workspace.expanded(-radius);
        let obstacles = raw
            .iter()
            .filter_map(|o| inflate_obstacle(o, radius).clip_to_box(&workspace))
            .collect();
        Self::new(workspace, obstacles, radius)
    }

    pub fn empty(workspace: Aabb) -> Self {
        Self::new(workspace, Vec::new(), 0.0)
    }

    fn bounds(&self) -> std::borrow::Cow<'_, [Aabb]> {
        if self.bounds.len() == self.obstacles.len() {
            std::borrow::Cow::Borrowed(&self.bounds)
        } else {
            std::borrow::Cow::Owned(self.obstacles.iter().map(|o| o.bounding_box()).collect())
        }
    }

    /// True when `p` lies inside the workspace and strictly outside every obstacle.
    pub fn is_free(&self, p: Point2) -> bool {
        self.workspace.contains(p) && !self.obstacles.iter().any(|o| o.contains_strict(p))
    }

    /// Index of an obstacle whose interior contains `p`.
    pub fn obstacle_containing(&self, p: Point2) -> Option<usize> {
        self.obstacles.iter().position(|o| o.contains_strict(p))
    }
}

/// True iff the closed segment `p1–p2` misses the interior of every obstacle.
///
/// Touching an obstacle boundary is allowed: inflated obstacles are already
/// conservative, and the sampling oracle cannot resolve measure-zero contact.
pub fn segment_collision_free(p1: Point2, p2: Point2, map: &StaticMap) -> bool {
    let seg = Aabb::of_points(&[p1, p2]);
    let bounds = map.bounds();
    map.obstacles
        .iter()
        .zip(bounds.iter())
        .filter(|(_, b)| b.overlaps(&seg))
        .all(|(o, _)| !o.intersects_segment_interior(p1, p2))
}
