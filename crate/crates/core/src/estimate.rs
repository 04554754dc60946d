//! Coupled position and thrust-axis filters.
//!
//! The position filter integrates `a = (T/m) b_z + g` with thrust from the
//! per-motor rates and is corrected by camera position fixes. The
//! orientation filter propagates the unit thrust axis `b_z` with the roll
//! rate implied by the left/right motor differential and is corrected by
//! propeller disc normals. Roll and pitch are read off `b_z`; yaw is not
//! observable.

use nalgebra::{Matrix3, Matrix6, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

/// 99% quantile of χ² with three degrees of freedom.
pub const CHI2_99_3DOF: f64 = 11.344866730144373;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("{0}")]
    InvalidParams(&'static str),
    #[error("attitude undefined for thrust axis with non-positive z")]
    AttitudeUndefined,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrotorParams {
    /// kg
    pub mass: f64,
    /// N/(rad/s)²
    pub c_f: f64,
    /// (rad/s)/(rad/s)²
    pub k_roll: f64,
    /// Gravitational acceleration magnitude; gravity is `(0, 0, -g)`.
    pub g: f64,
    /// Motor-to-motor diagonal (m).
    pub diagonal: f64,
    /// Propeller numbers (1..=4) on the body +y side.
    pub right_set: Vec<u8>,
    pub left_set: Vec<u8>,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            // hover at 166 Hz blade passage with two blades
            c_f: 9.81 / (4.0 * 521.5 * 521.5),
            k_roll: 1e-5,
            g: 9.81,
            diagonal: 0.25,
            right_set: vec![1, 4],
            left_set: vec![2, 3],
        }
    }
}

impl QuadrotorParams {
    pub fn validate(&self) -> Result<(), EstimateError> {
        if !(self.mass > 0.0 && self.c_f > 0.0) {
            return Err(EstimateError::InvalidParams("quad.mass and quad.c_f must be positive"));
        }
        if !(self.diagonal > 0.0 && self.g > 0.0) {
            return Err(EstimateError::InvalidParams("quad.diagonal and quad.g must be positive"));
        }
        let valid = |s: &[u8]| s.iter().all(|&i| (1..=4).contains(&i));
        if !valid(&self.right_set) || !valid(&self.left_set) {
            return Err(EstimateError::InvalidParams("motor sets must contain numbers 1..=4"));
        }
        if self.right_set.iter().any(|i| self.left_set.contains(i)) {
            return Err(EstimateError::InvalidParams("quad.right_set and quad.left_set must be disjoint"));
        }
        Ok(())
    }

    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.g)
    }

    /// Per-motor rate at which four equal motors balance gravity.
    pub fn hover_omega(&self) -> f64 {
        (self.mass * self.g / (4.0 * self.c_f)).sqrt()
    }
}

/// `T = c_f Σ Ω²`.
pub fn total_thrust(omega: &[f64; 4], c_f: f64) -> f64 {
    c_f * omega.iter().map(|w| w * w).sum::<f64>()
}

/// Body roll rate from the left/right squared-speed differential.
pub fn roll_rate_from_rpm(omega: &[f64; 4], k_roll: f64, right_set: &[u8], left_set: &[u8]) -> f64 {
    let sum = |set: &[u8]| set.iter().map(|&i| omega[i as usize - 1].powi(2)).sum::<f64>();
    k_roll * (sum(right_set) - sum(left_set))
}

/// Holds the last valid rate per motor.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct OmegaHold {
    last: [Option<f64>; 4],
}

impl OmegaHold {
    pub fn update(&mut self, omega: &[f64; 4], valid: &[bool; 4]) {
        for i in 0..4 {
            if valid[i] {
                self.last[i] = Some(omega[i]);
            }
        }
    }

    /// Rates once every motor has been observed at least once.
    pub fn get(&self) -> Option<[f64; 4]> {
        let mut out = [0.0; 4];
        for (o, l) in out.iter_mut().zip(&self.last) {
            *o = (*l)?;
        }
        Some(out)
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum UpdateOutcome {
    Applied,
    /// Innovation beyond the χ² gate; the state is unchanged.
    Rejected { mahalanobis_sq: f64 },
    /// First measurement, used to initialise the state.
    Initialized,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct PositionState {
    /// `[p, v]`, world frame.
    pub x: Vector6<f64>,
    pub p: Matrix6<f64>,
    /// Process noise rate (per second).
    pub q: Matrix6<f64>,
    /// Measurement covariance of the current fix, world frame.
    pub r_meas: Matrix3<f64>,
    pub gate_chi2: f64,
    /// Initial velocity variance at initialisation.
    pub init_vel_var: f64,
    pub initialized: bool,
}

impl PositionState {
    pub fn new(q_pos: f64, q_vel: f64, sigma_lat: f64, sigma_depth: f64) -> Self {
        let mut q = Matrix6::zeros();
        for i in 0..3 {
            q[(i, i)] = q_pos;
            q[(i + 3, i + 3)] = q_vel;
        }
        Self {
            x: Vector6::zeros(),
            p: Matrix6::identity(),
            q,
            r_meas: Matrix3::from_diagonal(&Vector3::new(sigma_lat.powi(2), sigma_lat.powi(2), sigma_depth.powi(2))),
            gate_chi2: CHI2_99_3DOF,
            init_vel_var: 1.0,
            initialized: false,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(3).into_owned()
    }
}

/// Lateral/depth measurement covariance expressed in the world frame, for a
/// camera with world orientation `cam_to_world`.
pub fn measurement_covariance(sigma_lat: f64, sigma_depth: f64, cam_to_world: &Matrix3<f64>) -> Matrix3<f64> {
    let d = Matrix3::from_diagonal(&Vector3::new(sigma_lat.powi(2), sigma_lat.powi(2), sigma_depth.powi(2)));
    let r = cam_to_world * d * cam_to_world.transpose();
    0.5 * (r + r.transpose())
}

/// Constant-acceleration prediction with `a = (T/m) b_z + g`.
pub fn position_predict(state: &PositionState, thrust: f64, b_z: &Vector3<f64>, quad: &QuadrotorParams, dt: f64) -> PositionState {
    let mut s = *state;
    if !s.initialized {
        return s;
    }
    let a = b_z * (thrust / quad.mass) + quad.gravity();
    let mut f = Matrix6::identity();
    for i in 0..3 {
        f[(i, i + 3)] = dt;
    }
    let mut u = Vector6::zeros();
    u.fixed_rows_mut::<3>(0).copy_from(&(a * (0.5 * dt * dt)));
    u.fixed_rows_mut::<3>(3).copy_from(&(a * dt));
    s.x = f * s.x + u;
    s.p = f * s.p * f.transpose() + s.q * dt;
    s.p = 0.5 * (s.p + s.p.transpose());
    s
}

/// Position fix with `H = [I 0]`, Joseph-form covariance.
pub fn position_update(state: &PositionState, z: &Vector3<f64>) -> (PositionState, UpdateOutcome) {
    let mut s = *state;
    if !s.initialized {
        s.x = Vector6::zeros();
        s.x.fixed_rows_mut::<3>(0).copy_from(z);
        s.p = Matrix6::zeros();
        s.p.fixed_view_mut::<3, 3>(0, 0).copy_from(&s.r_meas);
        for i in 3..6 {
            s.p[(i, i)] = s.init_vel_var;
        }
        s.initialized = true;
        return (s, UpdateOutcome::Initialized);
    }
    let innovation = z - s.position();
    let p_hh = s.p.fixed_view::<3, 3>(0, 0).into_owned();
    let cov = p_hh + s.r_meas;
    let Some(cov_inv) = cov.try_inverse() else {
        return (s, UpdateOutcome::Rejected { mahalanobis_sq: f64::INFINITY });
    };
    let d2 = (innovation.transpose() * cov_inv * innovation)[0];
    if d2 > s.gate_chi2 {
        return (s, UpdateOutcome::Rejected { mahalanobis_sq: d2 });
    }
    // K = P Hᵀ S⁻¹
    let p_h = s.p.fixed_view::<6, 3>(0, 0).into_owned();
    let k = p_h * cov_inv;
    s.x += k * innovation;
    let mut i_kh = Matrix6::identity();
    i_kh.fixed_view_mut::<6, 3>(0, 0).copy_from(&(Matrix6::identity().fixed_view::<6, 3>(0, 0) - k));
    s.p = i_kh * s.p * i_kh.transpose() + k * s.r_meas * k.transpose();
    s.p = 0.5 * (s.p + s.p.transpose());
    (s, UpdateOutcome::Applied)
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct OrientationState {
    /// Unit thrust axis, world frame.
    pub b_z: Vector3<f64>,
    pub p: Matrix3<f64>,
    /// Process noise rate (per second).
    pub q: Matrix3<f64>,
    /// `σ_m² I`.
    pub r: Matrix3<f64>,
    pub gate_chi2: f64,
    pub initialized: bool,
}

impl OrientationState {
    pub fn new(q_rate: f64, sigma_m: f64) -> Self {
        Self {
            b_z: Vector3::z(),
            p: Matrix3::identity() * sigma_m * sigma_m,
            q: Matrix3::identity() * q_rate,
            r: Matrix3::identity() * sigma_m * sigma_m,
            gate_chi2: CHI2_99_3DOF,
            initialized: false,
        }
    }

    /// Starts at the hover assumption, level with variance `p0` per axis, so
    /// that the first measurement is weighed rather than copied.
    pub fn level(q_rate: f64, sigma_m: f64, p0: f64) -> Self {
        Self {
            p: Matrix3::identity() * p0,
            initialized: true,
            ..Self::new(q_rate, sigma_m)
        }
    }

    /// Current thrust axis, or world up before the first measurement.
    pub fn thrust_axis(&self) -> Vector3<f64> {
        if self.initialized {
            self.b_z
        } else {
            Vector3::z()
        }
    }
}

/// Minimal rotation taking body z onto `b_z`.
pub fn yaw_free_rotation(b_z: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::rotation_between(&Vector3::z(), b_z)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI))
}

pub fn orientation_predict(state: &OrientationState, omega_body: &Vector3<f64>, dt: f64) -> OrientationState {
    let mut s = *state;
    if !s.initialized {
        return s;
    }
    let omega_w = yaw_free_rotation(&s.b_z) * omega_body;
    s.b_z = (s.b_z + omega_w.cross(&s.b_z) * dt).normalize();
    s.p += s.q * dt;
    s.p = 0.5 * (s.p + s.p.transpose());
    s
}

/// Disc-normal measurement with `H = I₃`.
pub fn orientation_update(state: &OrientationState, normal: &Vector3<f64>) -> (OrientationState, UpdateOutcome) {
    let mut s = *state;
    if !s.initialized {
        s.b_z = normal.normalize();
        s.p = s.r;
        s.initialized = true;
        return (s, UpdateOutcome::Initialized);
    }
    let innovation = normal - s.b_z;
    let cov = s.p + s.r;
    let Some(cov_inv) = cov.try_inverse() else {
        return (s, UpdateOutcome::Rejected { mahalanobis_sq: f64::INFINITY });
    };
    let d2 = (innovation.transpose() * cov_inv * innovation)[0];
    if d2 > s.gate_chi2 {
        return (s, UpdateOutcome::Rejected { mahalanobis_sq: d2 });
    }
    let k = s.p * cov_inv;
    s.b_z = (s.b_z + k * innovation).normalize();
    let i_k = Matrix3::identity() - k;
    s.p = i_k * s.p * i_k.transpose() + k * s.r * k.transpose();
    s.p = 0.5 * (s.p + s.p.transpose());
    (s, UpdateOutcome::Applied)
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Attitude {
    pub roll: f64,
    pub pitch: f64,
}

/// Yaw-free roll and pitch: `φ = asin(−b_y)`, `θ = atan2(b_x, b_z)`.
pub fn attitude_from_bz(b_z: &Vector3<f64>) -> Result<Attitude, EstimateError> {
    if b_z.z <= 0.0 {
        return Err(EstimateError::AttitudeUndefined);
    }
    Ok(Attitude {
        roll: (-b_z.y).clamp(-1.0, 1.0).asin(),
        pitch: b_z.x.atan2(b_z.z),
    })
}

/// Inverse of [`attitude_from_bz`].
pub fn bz_from_attitude(a: &Attitude) -> Vector3<f64> {
    let (sr, cr) = a.roll.sin_cos();
    let (sp, cp) = a.pitch.sin_cos();
    Vector3::new(cr * sp, -sr, cr * cp)
}
