//! Natural cubic spline paths parameterized by chord length.

use nalgebra::Vector3;

use super::SimError;

/// Position, first and second derivative with respect to the spline parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub position: Vector3<f64>,
    pub d1: Vector3<f64>,
    pub d2: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplinePath {
    knots: Vec<f64>,
    points: Vec<Vector3<f64>>,
    second: Vec<Vector3<f64>>,
}

const GAUSS_NODES: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

impl SplinePath {
    /// Interpolates `points` with knots at cumulative chord length and zero
    /// curvature at both ends. A single point gives a stationary path.
    pub fn new(points: &[Vector3<f64>]) -> Result<Self, SimError> {
        if points.is_empty() {
            return Err(SimError::DegeneratePath("no waypoints".into()));
        }
        let mut knots = vec![0.0];
        for (i, w) in points.windows(2).enumerate() {
            let chord = (w[1] - w[0]).norm();
            if chord < 1e-9 {
                return Err(SimError::DegeneratePath(format!(
                    "waypoints {i} and {} coincide",
                    i + 1
                )));
            }
            knots.push(knots[i] + chord);
        }
        let n = points.len();
        let mut second = vec![Vector3::zeros(); n];
        if n > 2 {
            // Thomas algorithm for the interior second derivatives.
            let m = n - 2;
            let mut diag = vec![0.0; m];
            let mut upper = vec![0.0; m];
            let mut rhs = vec![Vector3::zeros(); m];
            for k in 0..m {
                let i = k + 1;
                let h0 = knots[i] - knots[i - 1];
                let h1 = knots[i + 1] - knots[i];
                diag[k] = 2.0 * (h0 + h1);
                upper[k] = h1;
                rhs[k] = 6.0 * ((points[i + 1] - points[i]) / h1 - (points[i] - points[i - 1]) / h0);
            }
            for k in 1..m {
                let lower = knots[k + 1] - knots[k];
                let f = lower / diag[k - 1];
                diag[k] -= f * upper[k - 1];
                let prev = rhs[k - 1];
                rhs[k] -= prev * f;
            }
            for k in (0..m).rev() {
                let mut v = rhs[k];
                if k + 1 < m {
                    v -= second[k + 2] * upper[k];
                }
                second[k + 1] = v / diag[k];
            }
        }
        Ok(Self {
            knots,
            points: points.to_vec(),
            second,
        })
    }

    /// Parameter range `[0, end]`; `end` is the total chord length.
    pub fn end(&self) -> f64 {
        *self.knots.last().expect("at least one knot")
    }

    pub fn eval(&self, u: f64) -> PathPoint {
        if self.points.len() == 1 {
            return PathPoint {
                position: self.points[0],
                d1: Vector3::zeros(),
                d2: Vector3::zeros(),
            };
        }
        let u = u.clamp(0.0, self.end());
        let i = (self.knots.partition_point(|k| *k <= u).max(1) - 1).min(self.points.len() - 2);
        let h = self.knots[i + 1] - self.knots[i];
        let a = (self.knots[i + 1] - u) / h;
        let b = (u - self.knots[i]) / h;
        let (p0, p1) = (self.points[i], self.points[i + 1]);
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        let position = p0 * a + p1 * b + (m0 * (a * a * a - a) + m1 * (b * b * b - b)) * (h * h / 6.0);
        let d1 = (p1 - p0) / h + (m1 * (3.0 * b * b - 1.0) - m0 * (3.0 * a * a - 1.0)) * (h / 6.0);
        let d2 = m0 * a + m1 * b;
        PathPoint { position, d1, d2 }
    }

    /// Arc length over the parameter interval `[u0, u1]`.
    pub fn arc_length(&self, u0: f64, u1: f64) -> f64 {
        if self.points.len() == 1 || u1 <= u0 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut bounds = vec![u0];
        bounds.extend(self.knots.iter().copied().filter(|k| *k > u0 && *k < u1));
        bounds.push(u1);
        for w in bounds.windows(2) {
            // Four sub-intervals per knot span keep the quadrature well below 1e-9.
            let sub = 4;
            let step = (w[1] - w[0]) / sub as f64;
            for s in 0..sub {
                let a = w[0] + s as f64 * step;
                let mid = a + 0.5 * step;
                for (x, wt) in GAUSS_NODES {
                    total += wt * 0.5 * step * self.eval(mid + 0.5 * step * x).d1.norm();
                }
            }
        }
        total
    }

    pub fn length(&self) -> f64 {
        self.arc_length(0.0, self.end())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_are_a_straight_line() {
        let p = SplinePath::new(&[Vector3::zeros(), Vector3::new(10.0, 0.0, 0.0)]).unwrap();
        assert!((p.length() - 10.0).abs() < 1e-12);
        let mid = p.eval(5.0);
        assert!((mid.position - Vector3::new(5.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((mid.d1.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolates_waypoints_with_continuous_derivatives() {
        let pts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(5.0, 2.0, 0.0),
            Vector3::new(9.0, -1.0, 1.0),
            Vector3::new(14.0, 3.0, 0.0),
        ];
        let p = SplinePath::new(&pts).unwrap();
        for (i, w) in pts.iter().enumerate() {
            assert!((p.eval(p.knots[i]).position - w).norm() < 1e-12);
        }
        for &k in &p.knots[1..3] {
            let a = p.eval(k - 1e-9);
            let b = p.eval(k + 1e-9);
            assert!((a.d1 - b.d1).norm() < 1e-6);
            assert!((a.d2 - b.d2).norm() < 1e-6);
        }
        assert!(p.eval(0.0).d2.norm() < 1e-12);
        assert!(p.eval(p.end()).d2.norm() < 1e-12);
    }

    #[test]
    fn coincident_waypoints_are_rejected() {
        let pts = [Vector3::zeros(), Vector3::zeros()];
        assert!(matches!(SplinePath::new(&pts), Err(SimError::DegeneratePath(_))));
    }

    #[test]
    fn quadrature_matches_fine_polyline() {
        let pts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(4.0, 3.0, 0.0),
            Vector3::new(8.0, -2.0, 0.0),
        ];
        let p = SplinePath::new(&pts).unwrap();
        let n = 200_000;
        let mut poly = 0.0;
        for i in 0..n {
            let a = p.eval(p.end() * i as f64 / n as f64).position;
            let b = p.eval(p.end() * (i + 1) as f64 / n as f64).position;
            poly += (b - a).norm();
        }
        assert!((p.length() - poly).abs() < 1e-6);
    }
}
