use super::polygon::{clip_halfplane, signed_area};
use super::{
    solve_lp, Aabb, GeometryError, LpProblem, LpStatus, Point2, BOUNDARY_TOL, MIN_INSCRIBED_RADIUS,
};
use serde::{Deserialize, Serialize};

/// `normal · y ≤ offset` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub normal: Point2,
    pub offset: f64,
}

impl HalfSpace {
    /// Normalizes `(normal, offset)`; `None` for a zero normal.
    pub fn new(normal: Point2, offset: f64) -> Option<Self> {
        let len = normal.norm();
        if !(len > 1e-300) || !offset.is_finite() {
            return None;
        }
        Some(Self {
            normal: normal * (1.0 / len),
            offset: offset / len,
        })
    }

    /// `offset − normal·p`: distance to the face, positive inside.
    pub fn slack(&self, p: Point2) -> f64 {
        self.offset - self.normal.dot(p)
    }
}

/// Intersection of finitely many closed half-spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    rows: Vec<HalfSpace>,
}

impl Polytope {
    /// Rows with zero normals are discarded.
    pub fn new(rows: impl IntoIterator<Item = (Point2, f64)>) -> Self {
        Self {
            rows: rows
                .into_iter()
                .filter_map(|(n, b)| HalfSpace::new(n, b))
                .collect(),
        }
    }

    pub fn from_halfspaces(rows: Vec<HalfSpace>) -> Self {
        Self { rows }
    }

    pub fn from_box(b: &Aabb) -> Self {
        Self::new([
            (Point2::new(1.0, 0.0), b.max.x),
            (Point2::new(-1.0, 0.0), -b.min.x),
            (Point2::new(0.0, 1.0), b.max.y),
            (Point2::new(0.0, -1.0), -b.min.y),
        ])
    }

    pub fn rows(&self) -> &[HalfSpace] {
        &self.rows
    }

    pub fn face_count(&self) -> usize {
        self.rows.len()
    }

    pub fn push(&mut self, h: HalfSpace) {
        self.rows.push(h);
    }

    /// Smallest face slack at `p`; nonnegative iff `p` is inside.
    pub fn min_slack(&self, p: Point2) -> f64 {
        self.rows
            .iter()
            .map(|h| h.slack(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, p: Point2) -> bool {
        self.rows
            .iter()
            .all(|h| h.normal.dot(p) <= h.offset + BOUNDARY_TOL)
    }

    /// Polytope whose rows are the union of both row sets.
    pub fn intersection(&self, other: &Polytope) -> Polytope {
        let mut rows = self.rows.clone();
        rows.extend_from_slice(&other.rows);
        Polytope { rows }
    }

    /// CCW vertex loop of the (bounded) region; empty if the region has no area.
    pub fn vertices(&self) -> Vec<Point2> {
        const BIG: f64 = 1e7;
        let mut pts = vec![
            Point2::new(-BIG, -BIG),
            Point2::new(BIG, -BIG),
            Point2::new(BIG, BIG),
            Point2::new(-BIG, BIG),
        ];
        for h in &self.rows {
            pts = clip_halfplane(&pts, h.normal, h.offset);
            if pts.is_empty() {
                return pts;
            }
        }
        pts.dedup_by(|a, b| a.distance(*b) < 1e-12);
        if pts.len() > 1 && pts[0].distance(*pts.last().unwrap()) < 1e-12 {
            pts.pop();
        }
        pts
    }

    pub fn area(&self) -> f64 {
        let v = self.vertices();
        if v.len() < 3 {
            0.0
        } else {
            signed_area(&v)
        }
    }

    pub fn bounding_box(&self) -> Option<Aabb> {
        let v = self.vertices();
        (!v.is_empty()).then(|| Aabb::of_points(&v))
    }
}

/// Center and radius of the largest disc inscribed in an intersection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chebyshev {
    pub center: Point2,
    pub radius: f64,
}

/// Chebyshev center of `h1 ∩ h2`.
///
/// Returns `Ok(None)` when the intersection is empty or its inscribed radius
/// is below [`MIN_INSCRIBED_RADIUS`].
pub fn chebyshev_center(h1: &Polytope, h2: &Polytope) -> Result<Option<Chebyshev>, GeometryError> {
    // variables (cx, cy, r): maximize r s.t. nᵀc + r ≤ b for unit normals, r ≥ 0
    let mut lp = LpProblem::maximize(vec![0.0, 0.0, 1.0]);
    for h in h1.rows().iter().chain(h2.rows()) {
        lp.push_le(vec![h.normal.x, h.normal.y, 1.0], h.offset);
    }
    lp.push_le(vec![0.0, 0.0, -1.0], 0.0);
    let sol = solve_lp(&lp);
    match sol.status {
        LpStatus::Optimal => {
            let radius = sol.x[2];
            if radius < MIN_INSCRIBED_RADIUS {
                Ok(None)
            } else {
                Ok(Some(Chebyshev {
                    center: Point2::new(sol.x[0], sol.x[1]),
                    radius,
                }))
            }
        }
        LpStatus::Infeasible => Ok(None),
        LpStatus::Unbounded | LpStatus::NumericalFailure => Err(GeometryError::NumericalFailure),
    }
}

/// First point where the segment `p1 → p2` leaves `h`.
pub fn poly_line_intersect(h: &Polytope, p1: Point2, p2: Point2) -> Result<Point2, GeometryError> {
    if !h.contains(p1) {
        return Err(GeometryError::PreconditionViolated(
            "start point outside polytope",
        ));
    }
    if h.contains(p2) {
        return Err(GeometryError::PreconditionViolated(
            "end point inside polytope",
        ));
    }
    let d = p2 - p1;
    let mut t_exit = 1.0f64;
    for row in h.rows() {
        let rate = row.normal.dot(d);
        if rate > 0.0 {
            let t = (row.offset - row.normal.dot(p1)) / rate;
            t_exit = t_exit.min(t.max(0.0));
        }
    }
    Ok(p1 + d * t_exit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn boxp(x0: f64, y0: f64, x1: f64, y1: f64) -> Polytope {
        Polytope::from_box(&Aabb::new(Point2::new(x0, y0), Point2::new(x1, y1)))
    }

    #[test]
    fn membership_examples() {
        let sq = boxp(0.0, 0.0, 1.0, 1.0);
        assert!(sq.contains(Point2::new(0.5, 0.5)));
        assert!(sq.contains(Point2::new(1.0, 0.5)));
        assert!(!sq.contains(Point2::new(1.1, 0.5)));
    }

    #[test]
    fn overlapping_squares_center() {
        let c = chebyshev_center(&boxp(0.0, 0.0, 2.0, 2.0), &boxp(1.0, 1.0, 3.0, 3.0))
            .unwrap()
            .unwrap();
        assert!((c.center.x - 1.5).abs() < 1e-9 && (c.center.y - 1.5).abs() < 1e-9);
        assert!((c.radius - 0.5).abs() < 1e-9);
    }

    #[test]
    fn disjoint_squares_have_no_center() {
        let c = chebyshev_center(&boxp(0.0, 0.0, 1.0, 1.0), &boxp(5.0, 5.0, 6.0, 6.0)).unwrap();
        assert!(c.is_none());
    }

    #[test]
    fn sliver_is_treated_as_empty() {
        let c = chebyshev_center(&boxp(0.0, 0.0, 1.0, 1.0), &boxp(0.9995, 0.0, 2.0, 1.0)).unwrap();
        assert!(c.is_none());
    }

    #[test]
    fn self_center_ball_is_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let h = random_polygon_polytope(&mut rng, Point2::default(), 2.0);
            let c = chebyshev_center(&h, &h).unwrap().unwrap();
            for k in 0..360 {
                let dir = Point2::new(1.0, 0.0).rotated(k as f64 * std::f64::consts::PI / 180.0);
                assert!(h.contains(c.center + dir * (c.radius - 1e-9)));
            }
        }
    }

    #[test]
    fn exit_points() {
        let sq = boxp(0.0, 0.0, 1.0, 1.0);
        let p = poly_line_intersect(&sq, Point2::new(0.5, 0.5), Point2::new(2.0, 0.5)).unwrap();
        assert!((p.x - 1.0).abs() < 1e-12 && (p.y - 0.5).abs() < 1e-12);
        let p = poly_line_intersect(&sq, Point2::new(0.5, 0.5), Point2::new(0.5, -3.0)).unwrap();
        assert!((p.x - 0.5).abs() < 1e-12 && p.y.abs() < 1e-12);
        assert!(poly_line_intersect(&sq, Point2::new(2.0, 2.0), Point2::new(3.0, 3.0)).is_err());
        assert!(poly_line_intersect(&sq, Point2::new(0.2, 0.2), Point2::new(0.3, 0.3)).is_err());
    }

    #[test]
    fn exit_point_matches_bisection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let h = random_polygon_polytope(&mut rng, Point2::default(), 1.0);
            let p1 = Point2::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            if !h.contains(p1) {
                continue;
            }
            let p2 = Point2::new(0.0, 0.0).lerp(
                Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                1.0,
            ) * 10.0;
            if h.contains(p2) {
                continue;
            }
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if h.contains(p1.lerp(p2, mid)) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let q = poly_line_intersect(&h, p1, p2).unwrap();
            assert!(q.distance(p1.lerp(p2, lo)) < 1e-6);
            assert!(h.min_slack(q).abs() < 1e-9);
        }
    }

    /// Dense grid estimate of the inscribed radius, refined around the best cell.
    fn grid_inscribed_radius(h: &Polytope) -> f64 {
        let Some(bb) = h.bounding_box() else {
            return 0.0;
        };
        let (mut lo, mut hi) = (bb.min, bb.max);
        let mut best = (f64::NEG_INFINITY, lo);
        for _ in 0..6 {
            let steps = 200;
            let dx = (hi.x - lo.x) / steps as f64;
            let dy = (hi.y - lo.y) / steps as f64;
            for i in 0..=steps {
                for j in 0..=steps {
                    let p = Point2::new(lo.x + dx * i as f64, lo.y + dy * j as f64);
                    let s = h.min_slack(p);
                    if s > best.0 {
                        best = (s, p);
                    }
                }
            }
            lo = best.1 - Point2::new(4.0 * dx, 4.0 * dy);
            hi = best.1 + Point2::new(4.0 * dx, 4.0 * dy);
        }
        best.0
    }

    pub(crate) fn random_polygon_polytope(
        rng: &mut ChaCha8Rng,
        center: Point2,
        scale: f64,
    ) -> Polytope {
        let k = 6;
        let phase: f64 = rng.gen_range(0.0..1.0);
        Polytope::new((0..k).map(|i| {
            let ang =
                (i as f64 + phase + rng.gen_range(-0.2..0.2)) * std::f64::consts::TAU / k as f64;
            let n = Point2::new(ang.cos(), ang.sin());
            (n, n.dot(center) + scale * rng.gen_range(0.6..1.2))
        }))
    }

    #[test]
    fn hexagon_pairs_match_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        while checked < 20 {
            let h1 = random_polygon_polytope(&mut rng, Point2::default(), 1.0);
            let off = Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let h2 = random_polygon_polytope(&mut rng, off, 1.0);
            let Some(c) = chebyshev_center(&h1, &h2).unwrap() else {
                continue;
            };
            let oracle = grid_inscribed_radius(&h1.intersection(&h2));
            assert!(
                (c.radius - oracle).abs() < 1e-3,
                "{} vs {}",
                c.radius,
                oracle
            );
            assert!(h1.contains(c.center) && h2.contains(c.center));
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn row_scaling_preserves_membership(
            scale in 0.01f64..100.0, px in -3.0f64..3.0, py in -3.0f64..3.0
        ) {
            let base = boxp(-1.0, -2.0, 1.5, 0.5);
            let scaled = Polytope::new(base.rows().iter().map(|h| (h.normal * scale, h.offset * scale)));
            let p = Point2::new(px, py);
            prop_assert_eq!(base.contains(p), scaled.contains(p));
        }

        #[test]
        fn exit_point_lies_on_segment_and_in_polytope(
            ang in 0.0f64..std::f64::consts::TAU, len in 1.0f64..20.0
        ) {
            let h = boxp(-1.0, -0.5, 2.0, 1.0);
            let p1 = Point2::new(0.1, 0.2);
            let p2 = p1 + Point2::new(ang.cos(), ang.sin()) * len;
            prop_assume!(!h.contains(p2));
            let q = poly_line_intersect(&h, p1, p2).unwrap();
            let t = (q - p1).dot(p2 - p1) / (p2 - p1).dot(p2 - p1);
            prop_assert!((0.0..=1.0).contains(&t));
            prop_assert!(h.contains(q));
            prop_assert!((p1.lerp(p2, t) - q).norm() < 1e-9);
        }
    }
}
