//! Pinhole camera model, frame chain and disc pose from a projected ellipse.
//!
//! Camera frame: x right, y down, z along the optical axis. Body and world
//! frames are right-handed with z up.

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::detect::Conic;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("pixel span {span} px is at or below the minimum {min} px")]
    DepthUnavailable { span: f64, min: f64 },
    #[error("conic is not a real ellipse")]
    NotAnEllipse,
    #[error("backprojection cone has an invalid eigenvalue signature")]
    BadSignature,
    #[error("{0}")]
    InvalidParams(&'static str),
}

#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 500.0,
            fy: 500.0,
            cx: 319.5,
            cy: 239.5,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidParams("camera focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cy >= 0.0 && self.cx < self.width as f64 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidParams("camera principal point must lie inside the image"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Mean focal length, used where a single `f` is needed.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    /// Pixel of a camera-frame point, `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        (p.z > 0.0).then(|| Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// Rigid pose: maps local coordinates to the parent frame as
/// `p_parent = R(q) p_local + position`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self { position, orientation }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * p + self.position
    }

    pub fn inverse_transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse() * (p - self.position)
    }
}

/// Camera mounting on the observer body: `p_body = rotation · p_cam + translation`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Extrinsics {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Extrinsics {
    /// Camera looking straight down from below the body centre: image x along
    /// body +y, image y along body +x.
    fn default() -> Self {
        Self {
            rotation: Rotation3::from_matrix_unchecked(Matrix3::new(
                0.0, 1.0, 0.0, //
                1.0, 0.0, 0.0, //
                0.0, 0.0, -1.0,
            )),
            translation: Vector3::new(0.0, 0.0, -0.05),
        }
    }
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds from a row-major 3x3 rotation, checking orthonormality.
    pub fn from_rows(rows: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self, GeometryError> {
        let m = Matrix3::from_fn(|r, c| rows[r][c]);
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        if ortho > 1e-6 || (m.determinant() - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidParams("extrinsic rotation must be orthonormal with det +1"));
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(m),
            translation: Vector3::from(translation),
        })
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = self.rotation.matrix();
        std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
    }

    /// Camera orientation in the world given the observer body pose.
    pub fn camera_to_world_rotation(&self, observer: &Pose) -> Rotation3<f64> {
        observer.orientation.to_rotation_matrix() * self.rotation
    }
}

/// Range from the pixel span of a known physical length: `Z = f d / span`.
pub fn depth_from_span(pixel_span: f64, d: f64, f: f64, min_span: f64) -> Result<f64, GeometryError> {
    if pixel_span.is_nan() || pixel_span <= min_span {
        return Err(GeometryError::DepthUnavailable {
            span: pixel_span,
            min: min_span,
        });
    }
    Ok(f * d / pixel_span)
}

/// Camera-frame point at depth `z` on the ray through `pixel`.
pub fn backproject(pixel: &Vector2<f64>, z: f64, k: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new(z * (pixel.x - k.cx) / k.fx, z * (pixel.y - k.cy) / k.fy, z)
}

pub fn cam_to_world(p_c: &Vector3<f64>, ext: &Extrinsics, observer: &Pose) -> Vector3<f64> {
    observer.transform(&(ext.rotation * p_c + ext.translation))
}

pub fn world_to_cam(p_w: &Vector3<f64>, ext: &Extrinsics, observer: &Pose) -> Vector3<f64> {
    ext.rotation.inverse() * (observer.inverse_transform(p_w) - ext.translation)
}

/// One circle pose consistent with an observed ellipse, camera frame.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct DiscCandidate {
    /// Unit normal pointing towards the camera.
    pub normal: Vector3<f64>,
    pub center: Vector3<f64>,
}

/// Backprojects `conic` through `k` and recovers the two circle poses of
/// radius `disc_radius` that project onto it.
pub fn p1e_disc_normal(conic: &Conic, k: &CameraIntrinsics, disc_radius: f64) -> Result<[DiscCandidate; 2], GeometryError> {
    if !conic.is_ellipse() {
        return Err(GeometryError::NotAnEllipse);
    }
    let km = k.matrix();
    let q = km.transpose() * conic.m * km;
    let q = 0.5 * (q + q.transpose());
    let eig = SymmetricEigen::new(q);
    let mut vals = eig.eigenvalues;
    let mut vecs = eig.eigenvectors;
    if vals.iter().filter(|&&v| v > 0.0).count() == 1 {
        vals = -vals;
    }
    let scale = vals.amax();
    let pos = vals.iter().filter(|&&v| v > 1e-12 * scale).count();
    let neg = vals.iter().filter(|&&v| v < -1e-12 * scale).count();
    if pos != 2 || neg != 1 {
        return Err(GeometryError::BadSignature);
    }
    // order λ1 ≥ λ2 > 0 > λ3
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let (l1, l2, l3) = (vals[order[0]], vals[order[1]], vals[order[2]]);
    let basis = Matrix3::from_columns(&[
        vecs.column(order[0]).into_owned(),
        vecs.column(order[1]).into_owned(),
        vecs.column(order[2]).into_owned(),
    ]);
    vecs = basis;

    let span = l1 - l3;
    let a = ((l1 - l2) / span).max(0.0).sqrt();
    let c = ((l2 - l3) / span).max(0.0).sqrt();
    let solve = |sign: f64| -> DiscCandidate {
        let n = Vector3::new(sign * a, 0.0, c);
        // circle on the plane n·X = 1, as the intersection with a sphere
        // through the apex
        let c0 = -(span / (2.0 * l2)) * Vector3::new(sign * a, 0.0, -c);
        let off = n.dot(&c0) - 1.0;
        let center1 = c0 - off * n;
        let r1 = (c0.norm_squared() - off * off).max(0.0).sqrt();
        let mut center = vecs * (center1 * (disc_radius / r1));
        if center.z < 0.0 {
            center = -center;
        }
        let mut normal = (vecs * n).normalize();
        if normal.dot(&center) > 0.0 {
            normal = -normal;
        }
        DiscCandidate { normal, center }
    };
    Ok([solve(1.0), solve(-1.0)])
}

/// Candidate whose normal best agrees with `prior`.
pub fn disambiguate_normal(candidates: &[DiscCandidate], prior: &Vector3<f64>) -> Option<DiscCandidate> {
    candidates
        .iter()
        .copied()
        .reduce(|best, c| if c.normal.dot(prior) > best.normal.dot(prior) { c } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::fit_conic_direct;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn depth_examples() {
        assert_relative_eq!(depth_from_span(100.0, 0.5, 1000.0, 2.0).unwrap(), 5.0);
        assert_relative_eq!(depth_from_span(66.0, 0.33, 800.0, 2.0).unwrap(), 4.0, epsilon = 1e-12);
        assert!(depth_from_span(0.0, 0.5, 1000.0, 2.0).is_err());
        assert!(depth_from_span(2.0, 0.5, 1000.0, 2.0).is_err());
    }

    proptest! {
        #[test]
        fn depth_scale_consistent(span in 3.0f64..500.0, f in 100.0f64..2000.0, d in 0.05f64..2.0) {
            let a = depth_from_span(span, d, f, 2.0).unwrap();
            let b = depth_from_span(2.0 * span, d, 2.0 * f, 2.0).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * a);
        }
    }

    #[test]
    fn backproject_examples() {
        let k = CameraIntrinsics::default();
        assert_eq!(backproject(&Vector2::new(k.cx, k.cy), 3.0, &k), Vector3::new(0.0, 0.0, 3.0));
        assert_relative_eq!(backproject(&Vector2::new(k.cx + k.fx, k.cy), 1.0, &k), Vector3::new(1.0, 0.0, 1.0));
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(x in -2.0f64..2.0, y in -2.0f64..2.0, z in 0.5f64..20.0) {
            let k = CameraIntrinsics::default();
            let p = Vector3::new(x, y, z);
            let px = k.project(&p).unwrap();
            prop_assert!((backproject(&px, z, &k) - p).norm() < 1e-9);
        }

        #[test]
        fn frame_chain_round_trip(
            px in -5.0f64..5.0, py in -5.0f64..5.0, pz in -5.0f64..5.0,
            r in -PI..PI, p in -1.5f64..1.5, yw in -PI..PI,
            ox in -10.0f64..10.0, oz in 0.0f64..10.0,
        ) {
            let ext = Extrinsics::default();
            let obs = Pose::new(Vector3::new(ox, 1.0, oz), UnitQuaternion::from_euler_angles(r, p, yw));
            let pc = Vector3::new(px, py, pz);
            let back = world_to_cam(&cam_to_world(&pc, &ext, &obs), &ext, &obs);
            prop_assert!((back - pc).norm() < 1e-9);
        }
    }

    #[test]
    fn cam_to_world_examples() {
        let pc = Vector3::new(0.3, -0.2, 4.0);
        assert_eq!(cam_to_world(&pc, &Extrinsics::identity(), &Pose::identity()), pc);

        let down = Pose::new(Vector3::new(0.0, 0.0, 10.0), UnitQuaternion::from_euler_angles(PI, 0.0, 0.0));
        let pw = cam_to_world(&Vector3::new(0.0, 0.0, 5.0), &Extrinsics::identity(), &down);
        assert_relative_eq!(pw, Vector3::new(0.0, 0.0, 5.0), epsilon = 1e-12);

        let t = Vector3::new(1.0, 2.0, 3.0);
        let ext = Extrinsics::default();
        let body = ext.rotation * pc + ext.translation;
        let moved = cam_to_world(&pc, &ext, &Pose::new(t, UnitQuaternion::identity()));
        assert_relative_eq!(moved, body + t, epsilon = 1e-12);
    }

    #[test]
    fn default_extrinsics_look_down() {
        let ext = Extrinsics::default();
        let obs = Pose::new(Vector3::new(0.0, 0.0, 3.0), UnitQuaternion::identity());
        let below = cam_to_world(&Vector3::new(0.0, 0.0, 1.0), &ext, &obs);
        assert!(below.z < 3.0);
        // image right is body +y, image down is body +x
        let right = cam_to_world(&Vector3::new(1.0, 0.0, 1.0), &ext, &obs) - below;
        let down = cam_to_world(&Vector3::new(0.0, 1.0, 1.0), &ext, &obs) - below;
        assert_relative_eq!(right, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(down, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        assert!(Extrinsics::from_rows(ext.rows(), [0.0, 0.0, -0.05]).is_ok());
        assert!(Extrinsics::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]], [0.0; 3]).is_err());
    }

    /// Pixels of `n_pts` samples on a 3-D circle in the camera frame.
    fn render_circle(k: &CameraIntrinsics, center: &Vector3<f64>, normal: &Vector3<f64>, radius: f64, n_pts: usize) -> Vec<Vector2<f64>> {
        let helper = if normal.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let u = normal.cross(&helper).normalize();
        let v = normal.cross(&u);
        (0..n_pts)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / n_pts as f64;
                k.project(&(center + radius * (t.cos() * u + t.sin() * v))).unwrap()
            })
            .collect()
    }

    fn angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        a.normalize().dot(&b.normalize()).clamp(-1.0, 1.0).acos().to_degrees()
    }

    fn tilted_normal(tilt: f64, azimuth: f64) -> Vector3<f64> {
        // towards the camera is -z
        Vector3::new(tilt.sin() * azimuth.cos(), tilt.sin() * azimuth.sin(), -tilt.cos())
    }

    #[test]
    fn fronto_parallel_on_axis() {
        let k = CameraIntrinsics::default();
        let n = Vector3::new(0.0, 0.0, -1.0);
        let center = Vector3::new(0.0, 0.0, 3.0);
        let pts = render_circle(&k, &center, &n, 0.0635, 360);
        let cands = p1e_disc_normal(&fit_conic_direct(&pts).unwrap(), &k, 0.0635).unwrap();
        for c in cands {
            assert!(angle_deg(&c.normal, &n) < 0.01);
            assert!((c.center - center).norm() < 1e-3);
            assert!((c.normal.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tilted_twenty_degrees_about_x() {
        let k = CameraIntrinsics::default();
        let truth = tilted_normal(20f64.to_radians(), FRAC_PI_2);
        let center = Vector3::new(0.2, -0.1, 3.0);
        let pts = render_circle(&k, &center, &truth, 0.0635, 360);
        let cands = p1e_disc_normal(&fit_conic_direct(&pts).unwrap(), &k, 0.0635).unwrap();
        let best = cands.iter().map(|c| angle_deg(&c.normal, &truth)).fold(f64::INFINITY, f64::min);
        assert!(best < 1.0, "{best}");
        let chosen = disambiguate_normal(&cands, &truth).unwrap();
        assert!((chosen.center - center).norm() < 0.01 * center.norm());
    }

    #[test]
    fn two_lines_rejected() {
        let k = CameraIntrinsics::default();
        let c = Conic::from_coeffs(1.0, 0.0, -1.0, 0.0, 0.0, 0.0);
        assert_eq!(p1e_disc_normal(&c, &k, 0.1), Err(GeometryError::NotAnEllipse));
    }

    #[test]
    fn disambiguation_examples() {
        let up = Vector3::z();
        let c = |deg: f64| DiscCandidate {
            normal: Vector3::new(deg.to_radians().sin(), 0.0, deg.to_radians().cos()),
            center: Vector3::zeros(),
        };
        let same = disambiguate_normal(&[c(0.0), c(0.0)], &up).unwrap();
        assert_eq!(same.normal, c(0.0).normal);
        let prior = c(0.0).normal;
        assert_eq!(disambiguate_normal(&[c(-30.0), c(15.0)], &c(20.0).normal).unwrap().normal, c(15.0).normal);
        assert_eq!(disambiguate_normal(&[c(170.0), c(10.0)], &prior).unwrap().normal, c(10.0).normal);
        assert!(disambiguate_normal(&[], &up).is_none());
    }

    #[test]
    fn random_poses_noiseless_and_noisy() {
        let k = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let radius = 0.25;
        let mut noisy_err = Vec::new();
        for _ in 0..50 {
            let truth = tilted_normal(rng.random_range(0.0..45f64.to_radians()), rng.random_range(-PI..PI));
            let center = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(2.0..4.0));
            let pts = render_circle(&k, &center, &truth, radius, 360);
            let cands = p1e_disc_normal(&fit_conic_direct(&pts).unwrap(), &k, radius).unwrap();
            let best = disambiguate_normal(&cands, &truth).unwrap();
            assert!(angle_deg(&best.normal, &truth) < 0.1);
            for c in cands {
                assert!((c.normal.norm() - 1.0).abs() < 1e-9);
            }
            let noisy: Vec<_> = pts.iter().map(|p| p + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))).collect();
            let cands = p1e_disc_normal(&fit_conic_direct(&noisy).unwrap(), &k, radius).unwrap();
            noisy_err.push(angle_deg(&disambiguate_normal(&cands, &truth).unwrap().normal, &truth));
        }
        let worst = noisy_err.iter().copied().fold(0.0, f64::max);
        assert!(worst < 5.0, "{worst}");
    }
}
