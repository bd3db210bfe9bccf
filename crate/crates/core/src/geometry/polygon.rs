use super::{Aabb, GeometryError, Point2, BOUNDARY_TOL};
use serde::{Deserialize, Serialize};

const DEDUP_TOL: f64 = 1e-9;

/// Convex polygon with counter-clockwise, strictly convex vertex order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexPolygon {
    vertices: Vec<Point2>,
}

impl<'de> Deserialize<'de> for ConvexPolygon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            vertices: Vec<Point2>,
        }
        let raw = Raw::deserialize(d)?;
        ConvexPolygon::new(raw.vertices).map_err(serde::de::Error::custom)
    }
}

impl ConvexPolygon {
    /// Normalizes orientation, drops duplicate and collinear vertices, and
    /// rejects anything that is not strictly convex.
    pub fn new(vertices: Vec<Point2>) -> Result<Self, GeometryError> {
        if vertices.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::DegeneratePolygon("non-finite vertex"));
        }
        let mut v: Vec<Point2> = Vec::with_capacity(vertices.len());
        for p in vertices {
            if v.last().is_none_or(|q: &Point2| q.distance(p) > DEDUP_TOL) {
                v.push(p);
            }
        }
        while v.len() > 1 && v[0].distance(*v.last().unwrap()) <= DEDUP_TOL {
            v.pop();
        }
        if v.len() < 3 {
            return Err(GeometryError::DegeneratePolygon(
                "fewer than 3 distinct vertices",
            ));
        }
        if signed_area(&v) < 0.0 {
            v.reverse();
        }
        // Remove collinear vertices, then require every turn to be a left turn.
        let mut changed = true;
        while changed && v.len() >= 3 {
            changed = false;
            let n = v.len();
            for i in 0..n {
                let a = v[(i + n - 1) % n];
                let b = v[i];
                let c = v[(i + 1) % n];
                let turn = (b - a).cross(c - b);
                let scale = (b - a).norm() * (c - b).norm();
                if turn.abs() <= 1e-12 * scale.max(1e-300) {
                    v.remove(i);
                    changed = true;
                    break;
                }
            }
        }
        if v.len() < 3 {
            return Err(GeometryError::DegeneratePolygon("collinear vertices"));
        }
        let n = v.len();
        for i in 0..n {
            let a = v[i];
            let b = v[(i + 1) % n];
            let c = v[(i + 2) % n];
            if (b - a).cross(c - b) <= 0.0 {
                return Err(GeometryError::DegeneratePolygon("not convex"));
            }
        }
        Ok(Self { vertices: v })
    }

    /// Axis-aligned rectangle.
    pub fn rectangle(min: Point2, max: Point2) -> Result<Self, GeometryError> {
        Self::new(vec![
            min,
            Point2::new(max.x, min.y),
            max,
            Point2::new(min.x, max.y),
        ])
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Outward unit normal and offset for each edge: `n·p ≤ c` inside.
    pub fn halfspaces(&self) -> Vec<(Point2, f64)> {
        self.edges()
            .map(|(a, b)| {
                let d = b - a;
                let n = Point2::new(d.y, -d.x) * (1.0 / d.norm());
                (n, n.dot(a))
            })
            .collect()
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn centroid(&self) -> Point2 {
        let a = self.area();
        let mut c = Point2::default();
        for (p, q) in self.edges() {
            let w = p.cross(q);
            c = c + (p + q) * w;
        }
        c * (1.0 / (6.0 * a))
    }

    pub fn bounding_box(&self) -> Aabb {
        Aabb::of_points(&self.vertices)
    }

    /// Signed distance from `p` to the boundary, positive inside.
    pub fn interior_depth(&self, p: Point2) -> f64 {
        self.halfspaces()
            .iter()
            .map(|(n, c)| c - n.dot(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Closed containment.
    pub fn contains(&self, p: Point2) -> bool {
        self.interior_depth(p) >= -BOUNDARY_TOL
    }

    /// Interior containment, excluding a `BOUNDARY_TOL` band.
    pub fn contains_strict(&self, p: Point2) -> bool {
        self.interior_depth(p) > BOUNDARY_TOL
    }

    /// Euclidean distance from `p` to the polygon (zero inside).
    pub fn distance_to(&self, p: Point2) -> f64 {
        p.distance(closest_point_on_convex(&self.vertices, p))
    }

    /// True when the segment passes through the open interior.
    pub fn intersects_segment_interior(&self, p1: Point2, p2: Point2) -> bool {
        let d = p2 - p1;
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        for (n, c) in self.halfspaces() {
            // require n·(p1 + t d) < c - tol
            let slack = c - BOUNDARY_TOL - n.dot(p1);
            let rate = n.dot(d);
            if rate.abs() < 1e-15 {
                if slack <= 0.0 {
                    return false;
                }
            } else if rate > 0.0 {
                hi = hi.min(slack / rate);
            } else {
                lo = lo.max(slack / rate);
            }
            if lo >= hi {
                return false;
            }
        }
        lo < hi
    }

    /// Sutherland–Hodgman clip against a box; `None` if nothing with area remains.
    pub fn clip_to_box(&self, bx: &Aabb) -> Option<ConvexPolygon> {
        let planes = [
            (Point2::new(1.0, 0.0), bx.max.x),
            (Point2::new(-1.0, 0.0), -bx.min.x),
            (Point2::new(0.0, 1.0), bx.max.y),
            (Point2::new(0.0, -1.0), -bx.min.y),
        ];
        let mut pts = self.vertices.clone();
        for (n, c) in planes {
            pts = clip_halfplane(&pts, n, c);
            if pts.len() < 3 {
                return None;
            }
        }
        ConvexPolygon::new(pts).ok()
    }

    pub fn translated(&self, by: Point2) -> ConvexPolygon {
        ConvexPolygon {
            vertices: self.vertices.iter().map(|&p| p + by).collect(),
        }
    }
}

pub fn signed_area(v: &[Point2]) -> f64 {
    let n = v.len();
    0.5 * (0..n).map(|i| v[i].cross(v[(i + 1) % n])).sum::<f64>()
}

/// Keeps the part of a convex vertex loop with `n·p ≤ c`.
pub fn clip_halfplane(pts: &[Point2], n: Point2, c: f64) -> Vec<Point2> {
    let mut out = Vec::with_capacity(pts.len() + 1);
    let k = pts.len();
    for i in 0..k {
        let a = pts[i];
        let b = pts[(i + 1) % k];
        let da = n.dot(a) - c;
        let db = n.dot(b) - c;
        if da <= 0.0 {
            out.push(a);
        }
        if (da < 0.0 && db > 0.0) || (da > 0.0 && db < 0.0) {
            let t = da / (da - db);
            out.push(a.lerp(b, t));
        }
    }
    out
}

/// Closest point of a CCW convex vertex loop to `p` (returns `p` when inside).
pub fn closest_point_on_convex(vertices: &[Point2], p: Point2) -> Point2 {
    let n = vertices.len();
    let mut inside = true;
    let mut best = vertices[0];
    let mut best_d = f64::INFINITY;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        let e = b - a;
        if e.cross(p - a) < 0.0 {
            inside = false;
        }
        let t = ((p - a).dot(e) / e.dot(e)).clamp(0.0, 1.0);
        let q = a + e * t;
        let d = q.distance(p);
        if d < best_d {
            best_d = d;
            best = q;
        }
    }
    if inside {
        p
    } else {
        best
    }
}

/// Andrew's monotone chain; CCW hull without collinear points.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup_by(|a, b| a.distance(*b) <= DEDUP_TOL);
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point2>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                if (b - a).cross(p - b) <= 1e-12 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Outer polygonal approximation of the Minkowski sum with a disc.
///
/// Each edge is pushed out by `radius`. At a vertex the arc between the two
/// offset edges is replaced by the intersection of their tangent lines; when
/// that miter point would sit more than `2·radius` from the vertex, the arc is
/// instead circumscribed by three points from four evenly spaced tangents.
pub fn inflate_obstacle(poly: &ConvexPolygon, radius: f64) -> ConvexPolygon {
    if radius <= 0.0 {
        return poly.clone();
    }
    let hs = poly.halfspaces();
    let n = poly.len();
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        let v = poly.vertices[i];
        let n_in = hs[(i + n - 1) % n].0;
        let n_out = hs[i].0;
        let turn = n_in.cross(n_out).atan2(n_in.dot(n_out));
        let miter_scale = 1.0 / (0.5 * turn).cos();
        if miter_scale <= 2.0 {
            out.push(v + tangent_corner(n_in, n_out) * radius);
        } else {
            let dirs: Vec<Point2> = (0..4)
                .map(|k| n_in.rotated(turn * k as f64 / 3.0))
                .collect();
            for w in dirs.windows(2) {
                out.push(v + tangent_corner(w[0], w[1]) * radius);
            }
        }
    }
    ConvexPolygon::new(out).expect("offset of a convex polygon is convex")
}

/// Intersection of the unit-offset tangent lines with normals `a` and `b`.
fn tangent_corner(a: Point2, b: Point2) -> Point2 {
    (a + b) * (1.0 / (1.0 + a.dot(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square() -> ConvexPolygon {
        ConvexPolygon::rectangle(Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)).unwrap()
    }

    #[test]
    fn normalizes_orientation_and_duplicates() {
        let p = ConvexPolygon::new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(0.0, 1.0),
            Point2::new(0.0, 1.0),
            Point2::new(1.0, 1.0),
            Point2::new(1.0, 0.5),
            Point2::new(1.0, 0.0),
        ])
        .unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.area() > 0.0);
        assert!((p.area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonconvex() {
        let r = ConvexPolygon::new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(2.0, 0.0),
            Point2::new(1.0, 0.5),
            Point2::new(2.0, 2.0),
            Point2::new(0.0, 2.0),
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn zero_radius_is_identity() {
        let sq = unit_square();
        assert_eq!(inflate_obstacle(&sq, 0.0), sq);
    }

    #[test]
    fn square_faces_offset_by_radius() {
        let inflated = inflate_obstacle(&unit_square(), 0.5);
        assert!(inflated.contains(Point2::new(-0.5, 0.5)));
        assert!(!inflated.contains(Point2::new(-0.51, 0.5)));
        // right-angle corners use a single miter point
        assert_eq!(inflated.len(), 4);
        assert!(inflated.contains(Point2::new(-0.5, -0.5)));
    }

    #[test]
    fn sharp_vertex_uses_three_chord_points() {
        let tri = ConvexPolygon::new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(10.0, 0.0),
            Point2::new(10.0, 1.0),
        ])
        .unwrap();
        let inflated = inflate_obstacle(&tri, 0.3);
        // the acute vertex at the origin turns by more than 120°
        assert_eq!(inflated.len(), 3 + 1 + 1);
        for v in inflated.vertices() {
            let d = tri.distance_to(*v);
            assert!((0.3 - 1e-9..=0.3 * 2.0 + 1e-9).contains(&d));
        }
    }

    #[test]
    fn random_triangles_contain_minkowski_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pts: Vec<Point2> = (0..3)
                .map(|_| Point2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                .collect();
            let Ok(tri) = ConvexPolygon::new(pts) else {
                continue;
            };
            if tri.area() < 1e-3 {
                continue;
            }
            let inflated = inflate_obstacle(&tri, 0.3);
            for v in tri.vertices() {
                assert!(inflated.interior_depth(*v) >= 0.3 - 1e-9);
            }
            // every point of the exact sum lies inside
            for k in 0..360 {
                let dir = Point2::new(1.0, 0.0).rotated(k as f64 * std::f64::consts::PI / 180.0);
                for v in tri.vertices() {
                    assert!(inflated.contains(*v + dir * 0.3));
                }
            }
        }
    }

    #[test]
    fn hull_of_square_with_interior_points() {
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(0.5, 0.5),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
            Point2::new(0.5, 0.0),
        ];
        let h = convex_hull(&pts);
        assert_eq!(h.len(), 4);
        assert!(signed_area(&h) > 0.0);
    }

    #[test]
    fn clip_keeps_inside_part() {
        let big = ConvexPolygon::rectangle(Point2::new(-1.0, -1.0), Point2::new(2.0, 2.0)).unwrap();
        let c = big
            .clip_to_box(&Aabb::new(Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)))
            .unwrap();
        assert!((c.area() - 1.0).abs() < 1e-12);
        let far = unit_square().translated(Point2::new(5.0, 5.0));
        assert!(far
            .clip_to_box(&Aabb::new(Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)))
            .is_none());
    }

    #[test]
    fn closest_point_is_on_edge() {
        let sq = unit_square();
        let q = closest_point_on_convex(sq.vertices(), Point2::new(2.0, 0.5));
        assert!((q.x - 1.0).abs() < 1e-12 && (q.y - 0.5).abs() < 1e-12);
        let inside = Point2::new(0.3, 0.3);
        assert_eq!(closest_point_on_convex(sq.vertices(), inside), inside);
    }
}
