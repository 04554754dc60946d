//! Ellipse primitives: PCA ellipses of point clouds and direct
//! least-squares conic fitting (Fitzgibbon's ellipse-specific fit in the
//! numerically stable Halíř–Flusser form).

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use super::DetectError;

/// Semi-axis length in units of standard deviation.
pub const AXIS_SCALE: f64 = 2.0;

/// PCA ellipse of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterEllipse {
    pub mu: Vector2<f64>,
    /// Sample covariance with `1/(n-1)` normalisation.
    pub sigma: Matrix2<f64>,
    /// `[λ₁, λ₂]`, `λ₁ ≥ λ₂ ≥ 0`.
    pub eigenvalues: [f64; 2],
    /// Unit eigenvectors matching `eigenvalues`.
    pub eigenvectors: [Vector2<f64>; 2],
    pub semi_major: f64,
    pub semi_minor: f64,
    pub n_events: usize,
}

/// Eigen-decomposition of a symmetric 2x2 matrix, largest eigenvalue first.
pub(crate) fn sym_eigen2(m: &Matrix2<f64>) -> ([f64; 2], [Vector2<f64>; 2]) {
    let (a, b, c) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
    let mean = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (mean + rad, mean - rad);
    let v1 = if rad <= f64::EPSILON * mean.abs().max(1.0) {
        Vector2::new(1.0, 0.0)
    } else {
        let p = Vector2::new(b, l1 - a);
        let q = Vector2::new(l1 - c, b);
        if p.norm_squared() >= q.norm_squared() {
            p.normalize()
        } else {
            q.normalize()
        }
    };
    let v2 = Vector2::new(-v1.y, v1.x);
    ([l1, l2], [v1, v2])
}

/// PCA ellipse of `points` with unit weights.
pub fn fit_ellipse_pca(points: &[Vector2<f64>]) -> Result<ClusterEllipse, DetectError> {
    fit_ellipse_weighted(points.iter().map(|p| (*p, 1)))
}

/// PCA ellipse where each point stands for `weight` coincident samples.
pub fn fit_ellipse_weighted(
    points: impl IntoIterator<Item = (Vector2<f64>, usize)> + Clone,
) -> Result<ClusterEllipse, DetectError> {
    let mut n = 0usize;
    let mut sum = Vector2::zeros();
    for (p, w) in points.clone() {
        n += w;
        sum += p * w as f64;
    }
    if n < 3 {
        return Err(DetectError::TooFewPoints { needed: 3, got: n });
    }
    let mu = sum / n as f64;
    let mut sigma = Matrix2::zeros();
    for (p, w) in points {
        let d = p - mu;
        sigma += d * d.transpose() * w as f64;
    }
    sigma /= (n - 1) as f64;
    let (eigenvalues, eigenvectors) = sym_eigen2(&sigma);
    let l2 = eigenvalues[1].max(0.0);
    if eigenvalues[0] <= 0.0 || l2 <= 1e-12 * eigenvalues[0] {
        return Err(DetectError::Degenerate);
    }
    Ok(ClusterEllipse {
        mu,
        sigma,
        eigenvalues: [eigenvalues[0], l2],
        eigenvectors,
        semi_major: AXIS_SCALE * eigenvalues[0].sqrt(),
        semi_minor: AXIS_SCALE * l2.sqrt(),
        n_events: n,
    })
}

/// Homogeneous conic `xᵀ M x = 0` over pixel coordinates `x = (u, v, 1)`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Conic {
    pub m: Matrix3<f64>,
}

/// Geometric ellipse.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct EllipseParams {
    pub center: Vector2<f64>,
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Major-axis direction from +x, radians in `(-π/2, π/2]`.
    pub angle: f64,
}

impl Conic {
    /// `A u² + B uv + C v² + D u + E v + F = 0`.
    pub fn from_coeffs(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> Self {
        Self {
            m: Matrix3::new(a, b / 2.0, d / 2.0, b / 2.0, c, e / 2.0, d / 2.0, e / 2.0, f),
        }
    }

    pub fn coeffs(&self) -> [f64; 6] {
        let m = &self.m;
        [m[(0, 0)], 2.0 * m[(0, 1)], m[(1, 1)], 2.0 * m[(0, 2)], 2.0 * m[(1, 2)], m[(2, 2)]]
    }

    pub fn from_ellipse(e: &EllipseParams) -> Self {
        let (s, c) = e.angle.sin_cos();
        let r = Matrix2::new(c, -s, s, c);
        let d = Matrix2::new(1.0 / (e.semi_major * e.semi_major), 0.0, 0.0, 1.0 / (e.semi_minor * e.semi_minor));
        let q = r * d * r.transpose();
        let lin = -(q * e.center);
        let k = (e.center.transpose() * q * e.center)[0] - 1.0;
        Self {
            m: Matrix3::new(q[(0, 0)], q[(0, 1)], lin.x, q[(1, 0)], q[(1, 1)], lin.y, lin.x, lin.y, k),
        }
        .normalized()
    }

    /// Unit Frobenius norm with positive trace of the quadratic block.
    pub fn normalized(&self) -> Self {
        let mut m = self.m / self.m.norm();
        if m[(0, 0)] + m[(1, 1)] < 0.0 {
            m = -m;
        }
        Self { m }
    }

    /// Algebraic value `xᵀ M x` at pixel `(u, v)`.
    pub fn eval(&self, p: &Vector2<f64>) -> f64 {
        let x = Vector3::new(p.x, p.y, 1.0);
        x.dot(&(self.m * x))
    }

    pub fn is_ellipse(&self) -> bool {
        let [a, b, c, ..] = self.coeffs();
        4.0 * a * c - b * b > 0.0 && self.to_ellipse().is_some()
    }

    /// Geometric parameters, or `None` for anything but a real ellipse.
    pub fn to_ellipse(&self) -> Option<EllipseParams> {
        let q = Matrix2::new(self.m[(0, 0)], self.m[(0, 1)], self.m[(1, 0)], self.m[(1, 1)]);
        if q.determinant() <= 0.0 {
            return None;
        }
        let lin = Vector2::new(self.m[(0, 2)], self.m[(1, 2)]);
        let center = -(q.try_inverse()? * lin);
        let k = self.m[(2, 2)] + lin.dot(&center);
        // (x - c)ᵀ (q / -k) (x - c) = 1
        let qn = q / -k;
        let (ev, evec) = sym_eigen2(&qn);
        if ev[1] <= 0.0 {
            return None;
        }
        // the smaller eigenvalue is the major axis
        let major_dir = evec[1];
        let mut angle = major_dir.y.atan2(major_dir.x);
        if angle <= -std::f64::consts::FRAC_PI_2 {
            angle += std::f64::consts::PI;
        } else if angle > std::f64::consts::FRAC_PI_2 {
            angle -= std::f64::consts::PI;
        }
        Some(EllipseParams {
            center,
            semi_major: 1.0 / ev[1].sqrt(),
            semi_minor: 1.0 / ev[0].sqrt(),
            angle,
        })
    }

    /// Conic of the same curve after translating every point by `offset`.
    pub fn translated(&self, offset: &Vector2<f64>) -> Self {
        let t = Matrix3::new(1.0, 0.0, -offset.x, 0.0, 1.0, -offset.y, 0.0, 0.0, 1.0);
        Self {
            m: t.transpose() * self.m * t,
        }
        .normalized()
    }
}

/// Direct least-squares ellipse fit minimising algebraic distance subject to
/// `4AC − B² = 1`.
pub fn fit_conic_direct(points: &[Vector2<f64>]) -> Result<Conic, DetectError> {
    if points.len() < 6 {
        return Err(DetectError::TooFewPoints {
            needed: 6,
            got: points.len(),
        });
    }
    // condition: centre and scale to mean distance √2
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let spread = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    if spread <= 0.0 {
        return Err(DetectError::Degenerate);
    }
    let s = std::f64::consts::SQRT_2 / spread;

    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for p in points {
        let q = (p - mean) * s;
        let d1 = Vector3::new(q.x * q.x, q.x * q.y, q.y * q.y);
        let d2 = Vector3::new(q.x, q.y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
    }
    // collinear points make the linear scatter singular
    let sv = s3.singular_values();
    if sv.min() <= 1e-10 * sv.max() {
        return Err(DetectError::Degenerate);
    }
    let s3_inv = s3.try_inverse().ok_or(DetectError::Degenerate)?;
    let t = -(s3_inv * s2.transpose());
    let reduced = s1 + s2 * t;
    let c1_inv = Matrix3::new(0.0, 0.0, 0.5, 0.0, -1.0, 0.0, 0.5, 0.0, 0.0);
    let m = c1_inv * reduced;

    let mut best: Option<(f64, Vector3<f64>)> = None;
    for lambda in m.complex_eigenvalues().iter() {
        if lambda.im.abs() > 1e-9 * lambda.re.abs().max(1e-12) {
            continue;
        }
        let Some(v) = null_vector(&(m - Matrix3::identity() * lambda.re)) else {
            continue;
        };
        let constraint = 4.0 * v.x * v.z - v.y * v.y;
        if constraint <= 0.0 {
            continue;
        }
        let v = v / constraint.sqrt();
        let residual = (v.transpose() * reduced * v)[0];
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            best = Some((residual, v));
        }
    }
    let (_, a1) = best.ok_or(DetectError::NotAnEllipse)?;
    let a2 = t * a1;
    let local = Conic::from_coeffs(a1.x, a1.y, a1.z, a2.x, a2.y, a2.z);
    // undo the conditioning: x_local = S (x - mean)
    let h = Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0);
    let conic = Conic {
        m: h.transpose() * local.m * h,
    }
    .normalized();
    if !conic.m.iter().all(|v| v.is_finite()) || conic.to_ellipse().is_none() {
        return Err(DetectError::NotAnEllipse);
    }
    Ok(conic)
}

/// Unit vector spanning the null space of a rank-2 3x3 matrix.
fn null_vector(a: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let rows = [a.row(0).transpose(), a.row(1).transpose(), a.row(2).transpose()];
    let candidates = [rows[0].cross(&rows[1]), rows[0].cross(&rows[2]), rows[1].cross(&rows[2])];
    let v = candidates
        .into_iter()
        .max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))?;
    let norm = v.norm();
    (norm > 0.0 && norm.is_finite()).then(|| v / norm)
}
