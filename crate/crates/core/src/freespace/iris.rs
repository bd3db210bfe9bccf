//! Planar IRIS: alternate separating hyperplanes and a maximum-volume
//! inscribed ellipse until the region stops growing.

use super::FreespaceError;
use crate::geometry::{closest_point_on_convex, HalfSpace, Point2, Polytope, StaticMap};
use nalgebra::{Matrix2, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};

/// Required clearance between the seed and every face of the result.
pub const SEED_CLEARANCE: f64 = 1e-6;
const MAX_OUTER_ITERATIONS: usize = 10;
const MIN_AREA_GROWTH: f64 = 0.02;
const MAX_NEWTON_ITERATIONS: usize = 50;
const NEWTON_GRAD_TOL: f64 = 1e-8;

/// `{C u + d : ‖u‖ ≤ 1}` with `C` symmetric positive definite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub c: [[f64; 2]; 2],
    pub center: Point2,
}

impl Ellipse {
    pub fn disc(center: Point2, radius: f64) -> Self {
        Self {
            c: [[radius, 0.0], [0.0, radius]],
            center,
        }
    }

    fn from_params(p: &SVector<f64, 5>) -> Self {
        Self {
            c: [[p[0], p[1]], [p[1], p[2]]],
            center: Point2::new(p[3], p[4]),
        }
    }

    fn params(&self) -> SVector<f64, 5> {
        SVector::<f64, 5>::from([
            self.c[0][0],
            self.c[0][1],
            self.c[1][1],
            self.center.x,
            self.center.y,
        ])
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.c[0][0], self.c[0][1], self.c[1][0], self.c[1][1])
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.matrix().determinant()
    }

    /// Boundary point at parameter angle `t`.
    pub fn boundary_point(&self, t: f64) -> Point2 {
        let v = self.matrix() * Vector2::new(t.cos(), t.sin());
        self.center + Point2::new(v.x, v.y)
    }

    /// `‖C a‖`: the support of the centered ellipse in direction `a`.
    fn support(&self, a: Point2) -> f64 {
        let v = self.matrix() * Vector2::new(a.x, a.y);
        v.norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrisSnapshot {
    pub ellipse: Ellipse,
    /// Obstacle-separating faces only; `polytope` also carries the workspace box.
    pub hyperplanes: Vec<HalfSpace>,
    pub polytope: Polytope,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SeedGrowthTrace {
    pub iterations: Vec<IrisSnapshot>,
}

/// Grows an obstacle-free polytope around `seed`.
pub fn generate_polytope(map: &StaticMap, seed: Point2) -> Result<Polytope, FreespaceError> {
    generate_polytope_traced(map, seed).map(|(p, _)| p)
}

pub fn generate_polytope_traced(
    map: &StaticMap,
    seed: Point2,
) -> Result<(Polytope, SeedGrowthTrace), FreespaceError> {
    if !seed.is_finite() || !map.is_free(seed) {
        return Err(FreespaceError::SeedInObstacle(seed));
    }
    let boxp = Polytope::from_box(&map.workspace);
    let mut ellipse = Ellipse::disc(seed, 1e-4);
    let mut trace = SeedGrowthTrace::default();
    let mut best: Option<Polytope> = None;

    for _ in 0..MAX_OUTER_ITERATIONS {
        let hyperplanes = separating_hyperplanes(map, &ellipse)?;
        let mut poly = boxp.clone();
        for h in &hyperplanes {
            poly.push(*h);
        }
        if poly.min_slack(seed) < SEED_CLEARANCE {
            break;
        }
        trace.iterations.push(IrisSnapshot {
            ellipse,
            hyperplanes,
            polytope: poly.clone(),
        });
        best = Some(poly.clone());
        let next = inscribed_ellipse(&poly, &ellipse);
        let grown = next.area() >= (1.0 + MIN_AREA_GROWTH) * ellipse.area();
        ellipse = next;
        if !grown {
            break;
        }
    }
    best.map(|p| (p, trace))
        .ok_or(FreespaceError::SeedInObstacle(seed))
}

/// One tangent plane per obstacle not already cut off, nearest obstacles
/// (in the ellipse metric) first.
fn separating_hyperplanes(map: &StaticMap, e: &Ellipse) -> Result<Vec<HalfSpace>, FreespaceError> {
    let c = e.matrix();
    let cinv = c.try_inverse().ok_or(FreespaceError::NumericalFailure)?;
    let to_unit = |v: Point2| {
        let w = cinv * Vector2::new(v.x - e.center.x, v.y - e.center.y);
        Point2::new(w.x, w.y)
    };
    let mut candidates: Vec<(f64, usize, Point2)> = map
        .obstacles
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let t: Vec<Point2> = o.vertices().iter().map(|&v| to_unit(v)).collect();
            let q = closest_point_on_convex(&t, Point2::default());
            (q.norm(), i, q)
        })
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut planes: Vec<HalfSpace> = Vec::new();
    for (dist, i, q) in candidates {
        let verts = map.obstacles[i].vertices();
        let separated = planes
            .iter()
            .any(|h| verts.iter().all(|&v| h.slack(v) <= 1e-12));
        if separated {
            continue;
        }
        if dist < 1e-12 {
            return Err(FreespaceError::NumericalFailure);
        }
        let x_star = {
            let v = c * Vector2::new(q.x, q.y);
            e.center + Point2::new(v.x, v.y)
        };
        let a = cinv * Vector2::new(q.x, q.y);
        let normal = Point2::new(a.x, a.y);
        let h =
            HalfSpace::new(normal, normal.dot(x_star)).ok_or(FreespaceError::NumericalFailure)?;
        planes.push(h);
    }
    Ok(planes)
}

/// Maximum-area ellipse inside `poly`, started from a scaled copy of `prev`.
pub fn inscribed_ellipse(poly: &Polytope, prev: &Ellipse) -> Ellipse {
    let rows = poly.rows();
    // Largest scaled copy of `prev` about its center that stays strictly inside.
    let mut kappa = f64::INFINITY;
    for h in rows {
        let room = h.slack(prev.center);
        kappa = kappa.min(room / prev.support(h.normal));
    }
    if !(kappa.is_finite() && kappa > 0.0) {
        return *prev;
    }
    let mut start = *prev;
    for r in &mut start.c {
        for v in r.iter_mut() {
            *v *= 0.95 * kappa;
        }
    }

    let mut x = start.params();
    let m = rows.len() as f64;
    let mut t = m.max(1.0);
    let mut iters = 0;
    'outer: loop {
        loop {
            if iters >= MAX_NEWTON_ITERATIONS {
                break 'outer;
            }
            iters += 1;
            let Some((f0, g, hess)) = barrier(rows, &x, t) else {
                break 'outer;
            };
            if g.norm() < NEWTON_GRAD_TOL {
                break;
            }
            let Some(dx) = newton_direction(&hess, &g) else {
                break 'outer;
            };
            let decrement = -g.dot(&dx);
            if decrement < 1e-10 {
                break;
            }
            let mut step = 1.0;
            let mut moved = false;
            while step > 1e-12 {
                let trial = x + dx * step;
                if let Some((f, _, _)) = barrier(rows, &trial, t) {
                    if f <= f0 - 0.25 * step * decrement {
                        x = trial;
                        moved = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if m / t < 1e-4 {
            break;
        }
        t *= 10.0;
    }
    Ellipse::from_params(&x)
}

fn newton_direction(h: &SMatrix<f64, 5, 5>, g: &SVector<f64, 5>) -> Option<SVector<f64, 5>> {
    let mut reg = 0.0;
    for _ in 0..8 {
        let mut hr = *h;
        for i in 0..5 {
            hr[(i, i)] += reg;
        }
        if let Some(ch) = hr.cholesky() {
            return Some(-ch.solve(g));
        }
        reg = if reg == 0.0 { 1e-10 } else { reg * 100.0 };
    }
    None
}

/// `−t·log det C − Σ log(bᵢ − aᵢ·d − ‖C aᵢ‖)` with gradient and Hessian over
/// `(c11, c12, c22, d1, d2)`; `None` outside the domain.
fn barrier(
    rows: &[HalfSpace],
    x: &SVector<f64, 5>,
    t: f64,
) -> Option<(f64, SVector<f64, 5>, SMatrix<f64, 5, 5>)> {
    let (c11, c12, c22) = (x[0], x[1], x[2]);
    let det = c11 * c22 - c12 * c12;
    if !(c11 > 0.0 && det > 0.0) {
        return None;
    }
    let mut f = -t * det.ln();
    let mut g = SVector::<f64, 5>::zeros();
    let mut h = SMatrix::<f64, 5, 5>::zeros();
    let dd = [c22, -2.0 * c12, c11];
    for i in 0..3 {
        g[i] -= t * dd[i] / det;
        for j in 0..3 {
            h[(i, j)] += t * dd[i] * dd[j] / (det * det);
        }
    }
    // ∂²det: c11·c22 and c22·c11 cross terms, −2 on c12.
    h[(0, 2)] -= t / det;
    h[(2, 0)] -= t / det;
    h[(1, 1)] += 2.0 * t / det;

    for row in rows {
        let (a1, a2) = (row.normal.x, row.normal.y);
        let v = [c11 * a1 + c12 * a2, c12 * a1 + c22 * a2];
        let nv = v[0].hypot(v[1]);
        let s = row.offset - a1 * x[3] - a2 * x[4] - nv;
        if !(s > 0.0) {
            return None;
        }
        f -= s.ln();
        // v = M c with M = [[a1, a2, 0], [0, a1, a2]].
        let m = [[a1, a2, 0.0], [0.0, a1, a2]];
        let mut ds = SVector::<f64, 5>::zeros();
        for k in 0..3 {
            ds[k] = -(m[0][k] * v[0] + m[1][k] * v[1]) / nv;
        }
        ds[3] = -a1;
        ds[4] = -a2;
        g -= ds / s;
        h += ds * ds.transpose() / (s * s);
        // −∇²s/s with ∇²‖v‖ = Mᵀ(I/‖v‖ − v vᵀ/‖v‖³)M on the C block.
        let proj = [
            [
                1.0 / nv - v[0] * v[0] / nv.powi(3),
                -v[0] * v[1] / nv.powi(3),
            ],
            [
                -v[0] * v[1] / nv.powi(3),
                1.0 / nv - v[1] * v[1] / nv.powi(3),
            ],
        ];
        for p in 0..3 {
            for q in 0..3 {
                let mut val = 0.0;
                for r in 0..2 {
                    for u in 0..2 {
                        val += m[r][p] * proj[r][u] * m[u][q];
                    }
                }
                h[(p, q)] += val / s;
            }
        }
    }
    Some((f, g, h))
}
