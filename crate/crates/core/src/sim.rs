//! Synthetic ground truth: scripted quadrotor flights and the event stream a
//! downward-looking camera on a following observer would record of the
//! target's propellers.
//!
//! Blades are opaque sectors over a contrasting background. Every pixel
//! inside a disc is back-projected onto the disc plane once per step and
//! emits an event each time a blade edge sweeps across it: `+` for a
//! leading edge, `-` for a trailing edge.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::estimate::{total_thrust, QuadrotorParams};
use crate::events::{Event, Polarity};
use crate::geometry::{CameraIntrinsics, Extrinsics, Pose};

/// Blade-passage band the scripted motors stay within (Hz).
pub const BLADE_PASSAGE_BAND_HZ: (f64, f64) = (143.0, 197.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown flight profile '{0}' (expected hover, lateral_sweep, vertical_bob or aggressive)")]
    UnknownProfile(String),
    #[error("{0}")]
    InvalidParams(&'static str),
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SimState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub omega_body: Vector3<f64>,
    pub motor_omega: [f64; 4],
    pub t_us: u64,
}

impl SimState {
    pub fn at_rest() -> Self {
        Self {
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            omega_body: Vector3::zeros(),
            motor_omega: [0.0; 4],
            t_us: 0,
        }
    }

    pub fn thrust_axis(&self) -> Vector3<f64> {
        self.q * Vector3::z()
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// m
    pub prop_radius: f64,
    /// Inner radius without blades (m).
    pub hub_radius: f64,
    /// Set from the pipeline blade count.
    #[serde(skip)]
    pub n_blades: u32,
    /// Angular width of each blade (rad).
    pub blade_width: f64,
    /// Body-frame motor positions, numbered 1..=4 in order.
    pub motor_positions: [[f64; 3]; 4],
    pub events_per_edge_crossing: f64,
    /// events/s/pixel
    pub noise_rate: f64,
    /// Log-intensity contrast threshold, relative to a unit blade contrast.
    /// A pixel only partly covered by the disc sees a proportionally smaller
    /// step and stays silent below this fraction.
    pub contrast_threshold: f64,
    /// Set from the pipeline seed.
    #[serde(skip)]
    pub seed: u64,
    pub dt_us: u64,
    /// Angular-rate decay (1/s).
    pub beta: f64,
    /// Pitch-rate gain of the front/rear squared-speed differential.
    pub k_pitch: f64,
    /// Observer height above the target's start position (m).
    pub observer_height: f64,
    /// Time constant of the observer's lateral following (s).
    pub observer_lag_s: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let a = 0.25 / (2.0 * 2f64.sqrt());
        Self {
            prop_radius: 0.0635,
            hub_radius: 0.008,
            n_blades: 2,
            blade_width: 0.35,
            motor_positions: [[-a, a, 0.0], [-a, -a, 0.0], [a, -a, 0.0], [a, a, 0.0]],
            events_per_edge_crossing: 1.0,
            noise_rate: 0.1,
            contrast_threshold: 0.2,
            seed: 0,
            dt_us: 1000,
            beta: 10.0,
            k_pitch: 1e-5,
            observer_height: 2.0,
            observer_lag_s: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.prop_radius > 0.0) || !(self.hub_radius >= 0.0 && self.hub_radius < self.prop_radius) {
            return Err(SimError::InvalidParams("sim.prop_radius must be positive and exceed sim.hub_radius"));
        }
        if self.n_blades == 0 || !(self.blade_width > 0.0 && self.blade_width < TAU / self.n_blades as f64) {
            return Err(SimError::InvalidParams("sim.blade_width must lie in (0, 2π/n_blades)"));
        }
        if !(self.events_per_edge_crossing >= 0.0) || !(self.noise_rate >= 0.0) {
            return Err(SimError::InvalidParams("event rates must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.contrast_threshold) {
            return Err(SimError::InvalidParams("sim.contrast_threshold must lie in [0, 1]"));
        }
        if self.dt_us == 0 || self.dt_us > 1000 {
            return Err(SimError::InvalidParams("sim.dt_us must lie in 1..=1000"));
        }
        if !(self.beta >= 0.0) || !(self.observer_lag_s > 0.0) {
            return Err(SimError::InvalidParams("sim.beta must be non-negative and sim.observer_lag_s positive"));
        }
        let m = self.motor_positions.map(Vector3::from);
        let centroid: Vector3<f64> = m.iter().sum::<Vector3<f64>>() / 4.0;
        let r0 = m[0].xy().norm();
        if centroid.norm() > 1e-9 || m.iter().any(|p| (p.xy().norm() - r0).abs() > 1e-9) || r0 <= 0.0 {
            return Err(SimError::InvalidParams("sim.motor_positions must be symmetric about the body origin"));
        }
        Ok(())
    }

    /// Motor-to-motor diagonal.
    pub fn diagonal(&self) -> f64 {
        (Vector3::from(self.motor_positions[0]) - Vector3::from(self.motor_positions[2])).norm()
    }

    /// Motor rate range matching the blade-passage band.
    pub fn omega_band(&self) -> (f64, f64) {
        let k = TAU / self.n_blades as f64;
        (BLADE_PASSAGE_BAND_HZ.0 * k, BLADE_PASSAGE_BAND_HZ.1 * k)
    }
}

fn spin_direction(motor: usize) -> f64 {
    if motor % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// One RK4 step of
/// `ṗ = v`, `v̇ = (T/m) R(q) e_z + g`, `q̇ = ½ q ⊗ (0, ω)`, `ω̇ = −β (ω − ω_in)`.
///
/// `omega_in` is the rate the motor differentials drive towards; with
/// `omega_in = 0` the rates decay freely.
pub fn integrate_dynamics(state: &SimState, thrust: f64, omega_in: &Vector3<f64>, quad: &QuadrotorParams, beta: f64, dt: f64) -> SimState {
    #[derive(Copy, Clone)]
    struct D {
        p: Vector3<f64>,
        v: Vector3<f64>,
        q: Quaternion<f64>,
        w: Vector3<f64>,
    }
    let g = quad.gravity();
    let f = |s: &D| -> D {
        let rot = UnitQuaternion::new_normalize(s.q);
        D {
            p: s.v,
            v: rot * Vector3::z() * (thrust / quad.mass) + g,
            q: s.q * Quaternion::from_imag(s.w) * 0.5,
            w: -(s.w - omega_in) * beta,
        }
    };
    let add = |s: &D, k: &D, h: f64| D {
        p: s.p + k.p * h,
        v: s.v + k.v * h,
        q: s.q + k.q * h,
        w: s.w + k.w * h,
    };
    let s0 = D {
        p: state.p,
        v: state.v,
        q: *state.q.quaternion(),
        w: state.omega_body,
    };
    let k1 = f(&s0);
    let k2 = f(&add(&s0, &k1, dt / 2.0));
    let k3 = f(&add(&s0, &k2, dt / 2.0));
    let k4 = f(&add(&s0, &k3, dt));
    let comb = |a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>, d: Vector3<f64>| (a + b * 2.0 + c * 2.0 + d) * (dt / 6.0);
    SimState {
        p: s0.p + comb(k1.p, k2.p, k3.p, k4.p),
        v: s0.v + comb(k1.v, k2.v, k3.v, k4.v),
        q: UnitQuaternion::new_normalize(s0.q + (k1.q + k2.q * 2.0 + k3.q * 2.0 + k4.q) * (dt / 6.0)),
        omega_body: s0.w + comb(k1.w, k2.w, k3.w, k4.w),
        motor_omega: state.motor_omega,
        t_us: state.t_us + (dt * 1e6).round() as u64,
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum FlightProfile {
    Hover,
    LateralSweep,
    VerticalBob,
    Aggressive,
}

impl FlightProfile {
    pub const ALL: [FlightProfile; 4] = [Self::Hover, Self::LateralSweep, Self::VerticalBob, Self::Aggressive];

    pub fn name(self) -> &'static str {
        match self {
            Self::Hover => "hover",
            Self::LateralSweep => "lateral_sweep",
            Self::VerticalBob => "vertical_bob",
            Self::Aggressive => "aggressive",
        }
    }

    fn reference(self) -> Reference {
        let deg = PI / 180.0;
        let zero = Reference {
            roll_amp: 0.0,
            roll_period: 1.0,
            pitch_amp: 0.0,
            pitch_period: 1.0,
            thrust_amp: 0.0,
            thrust_period: 1.0,
        };
        match self {
            Self::Hover => zero,
            Self::LateralSweep => Reference {
                roll_amp: 12.0 * deg,
                roll_period: 4.0,
                ..zero
            },
            Self::VerticalBob => Reference {
                thrust_amp: 0.25,
                thrust_period: 3.0,
                ..zero
            },
            Self::Aggressive => Reference {
                roll_amp: 20.0 * deg,
                roll_period: 2.5,
                pitch_amp: 10.0 * deg,
                pitch_period: 3.3,
                thrust_amp: 0.12,
                thrust_period: 1.9,
            },
        }
    }
}

impl fmt::Display for FlightProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FlightProfile {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| SimError::UnknownProfile(s.to_string()))
    }
}

/// Sinusoidal roll, pitch and thrust references.
#[derive(Copy, Clone, Debug)]
struct Reference {
    roll_amp: f64,
    roll_period: f64,
    pitch_amp: f64,
    pitch_period: f64,
    thrust_amp: f64,
    thrust_period: f64,
}

/// Angle, rate and acceleration of `amp sin(2πt/period)`.
fn sine(amp: f64, period: f64, t: f64) -> (f64, f64, f64) {
    let w = TAU / period;
    let (s, c) = (w * t).sin_cos();
    (amp * s, amp * w * c, -amp * w * w * s)
}

/// Attitude gain of the station-keeping loop (1/s).
const K_ATTITUDE: f64 = 5.0;
/// Position loop natural frequency (rad/s) and damping.
const POSITION_WN: f64 = 0.8;
const POSITION_ZETA: f64 = 0.9;

/// Reference trajectory point: small-angle position orbit of the sinusoidal
/// attitude and thrust references.
struct RefPoint {
    roll: (f64, f64, f64),
    pitch: (f64, f64, f64),
    thrust_scale: f64,
    p: Vector3<f64>,
    v: Vector3<f64>,
}

fn reference_at(profile: FlightProfile, g: f64, t: f64) -> RefPoint {
    let r = profile.reference();
    let (wr, wp, wz) = (TAU / r.roll_period, TAU / r.pitch_period, TAU / r.thrust_period);
    let roll = sine(r.roll_amp, r.roll_period, t);
    let pitch = sine(r.pitch_amp, r.pitch_period, t);
    let (sz, cz) = (wz * t).sin_cos();
    RefPoint {
        roll,
        pitch,
        thrust_scale: 1.0 + r.thrust_amp * cz,
        p: Vector3::new(
            -g * r.pitch_amp / (wp * wp) * (wp * t).sin(),
            g * r.roll_amp / (wr * wr) * (wr * t).sin(),
            g * r.thrust_amp / (wz * wz) * (1.0 - cz),
        ),
        v: Vector3::new(
            -g * r.pitch_amp / wp * (wp * t).cos(),
            g * r.roll_amp / wr * (wr * t).cos(),
            g * r.thrust_amp / wz * sz,
        ),
    }
}

/// Motor speeds for a profile at time `t` given the current target state.
///
/// The sinusoidal references are flown by feed-forward (rate commands lead
/// the reference by `1/β` so the lagged body rate follows its derivative)
/// plus a gentle station-keeping loop that stops the open-loop orbit from
/// wandering. Squared speeds are mixed from the thrust, roll and pitch
/// demands and clamped to the band.
pub fn motor_command(profile: FlightProfile, t: f64, state: &SimState, quad: &QuadrotorParams, cfg: &GeneratorConfig) -> [f64; 4] {
    let r = reference_at(profile, quad.g, t);
    let b = state.thrust_axis();
    let roll_now = (-b.y).clamp(-1.0, 1.0).asin();
    let pitch_now = b.x.atan2(b.z);
    let kp = POSITION_WN * POSITION_WN;
    let kd = 2.0 * POSITION_ZETA * POSITION_WN;
    let a_corr = -(state.p - r.p) * kp - (state.v - r.v) * kd;
    let roll_target = r.roll.0 - a_corr.y / quad.g;
    let pitch_target = r.pitch.0 + a_corr.x / quad.g;

    let lead = if cfg.beta > 0.0 { 1.0 / cfg.beta } else { 0.0 };
    let w_x = r.roll.1 + r.roll.2 * lead + K_ATTITUDE * (roll_target - roll_now);
    let w_y = r.pitch.1 + r.pitch.2 * lead + K_ATTITUDE * (pitch_target - pitch_now);
    let thrust = quad.mass * (quad.g * r.thrust_scale + a_corr.z).max(0.0) / b.z.max(0.5);
    let base = thrust / (4.0 * quad.c_f);
    let d_roll = if quad.k_roll > 0.0 { w_x / quad.k_roll } else { 0.0 };
    let d_pitch = if cfg.k_pitch > 0.0 { w_y / cfg.k_pitch } else { 0.0 };
    let (lo, hi) = cfg.omega_band();
    std::array::from_fn(|i| {
        let sq = base + roll_sign(quad, i) * d_roll / 4.0 + pitch_sign(cfg, i) * d_pitch / 4.0;
        sq.max(0.0).sqrt().clamp(lo, hi)
    })
}

fn roll_sign(quad: &QuadrotorParams, i: usize) -> f64 {
    let n = i as u8 + 1;
    if quad.right_set.contains(&n) {
        1.0
    } else if quad.left_set.contains(&n) {
        -1.0
    } else {
        0.0
    }
}

/// Motors ahead of the body origin (negative x) raise pitch rate.
fn pitch_sign(cfg: &GeneratorConfig, i: usize) -> f64 {
    -cfg.motor_positions[i][0].signum()
}

/// Thrust and driven body rate produced by a set of motor speeds.
pub fn motor_effect(omega: &[f64; 4], quad: &QuadrotorParams, cfg: &GeneratorConfig) -> (f64, Vector3<f64>) {
    let sq = omega.map(|w| w * w);
    let w_x: f64 = (0..4).map(|i| roll_sign(quad, i) * sq[i]).sum::<f64>() * quad.k_roll;
    let w_y: f64 = (0..4).map(|i| pitch_sign(cfg, i) * sq[i]).sum::<f64>() * cfg.k_pitch;
    (total_thrust(omega, quad.c_f), Vector3::new(w_x, w_y, 0.0))
}

/// Initial state on the profile's periodic orbit.
fn initial_state(profile: FlightProfile, quad: &QuadrotorParams) -> SimState {
    let r = profile.reference();
    let (wr, wp) = (TAU / r.roll_period, TAU / r.pitch_period);
    SimState {
        v: Vector3::new(-quad.g * r.pitch_amp / wp, quad.g * r.roll_amp / wr, 0.0),
        omega_body: Vector3::new(r.roll_amp * wr, r.pitch_amp * wp, 0.0),
        ..SimState::at_rest()
    }
}

/// Dynamics-only flight: target state and observer pose at every step start.
pub struct Flight {
    profile: FlightProfile,
    quad: QuadrotorParams,
    cfg: GeneratorConfig,
    state: SimState,
    observer: Pose,
    step: u64,
    n_steps: u64,
}

impl Flight {
    pub fn new(profile: FlightProfile, quad: &QuadrotorParams, cfg: &GeneratorConfig, duration_us: u64) -> Result<Self, SimError> {
        cfg.validate()?;
        quad.validate().map_err(|_| SimError::InvalidParams("invalid quadrotor parameters"))?;
        let state = initial_state(profile, quad);
        Ok(Self {
            profile,
            quad: quad.clone(),
            cfg: cfg.clone(),
            observer: Pose::new(state.p + Vector3::new(0.0, 0.0, cfg.observer_height), UnitQuaternion::identity()),
            state,
            step: 0,
            n_steps: duration_us / cfg.dt_us,
        })
    }

    pub fn n_steps(&self) -> u64 {
        self.n_steps
    }
}

impl Iterator for Flight {
    type Item = (SimState, Pose);

    fn next(&mut self) -> Option<(SimState, Pose)> {
        if self.step >= self.n_steps {
            return None;
        }
        let dt = self.cfg.dt_us as f64 * 1e-6;
        let t_us = self.step * self.cfg.dt_us;
        self.state.t_us = t_us;
        self.state.motor_omega = motor_command(self.profile, t_us as f64 * 1e-6, &self.state, &self.quad, &self.cfg);
        let out = (self.state, self.observer);

        let (thrust, omega_in) = motor_effect(&self.state.motor_omega, &self.quad, &self.cfg);
        self.state = integrate_dynamics(&self.state, thrust, &omega_in, &self.quad, self.cfg.beta, dt);
        let gain = 1.0 - (-dt / self.cfg.observer_lag_s).exp();
        let lateral = (self.state.p.xy() - self.observer.position.xy()) * gain;
        self.observer.position.x += lateral.x;
        self.observer.position.y += lateral.y;
        self.step += 1;
        Some(out)
    }
}

/// Target states (with motor speeds) at every step of a scripted flight.
pub fn scripted_flight(profile: &str, quad: &QuadrotorParams, cfg: &GeneratorConfig, duration_us: u64) -> Result<Vec<SimState>, SimError> {
    let profile: FlightProfile = profile.parse()?;
    Ok(Flight::new(profile, quad, cfg, duration_us)?.map(|(s, _)| s).collect())
}

/// Camera pose in the world for an observer body pose.
pub fn camera_pose(observer: &Pose, ext: &Extrinsics) -> Pose {
    Pose::new(
        observer.transform(&ext.translation),
        observer.orientation * UnitQuaternion::from_rotation_matrix(&ext.rotation),
    )
}

/// Sub-rays per pixel side where a pixel straddles the disc rim or the hub.
const SUPERSAMPLE: usize = 4;

/// Blade phase per motor and fractional event charge per pixel. Each pixel
/// keeps its own charge, as a sensor pixel keeps its own reference level.
#[derive(Clone, Debug, PartialEq)]
pub struct RotorPhases {
    pub angle: [f64; 4],
    /// Row-major, `width * height` entries.
    pub charge: Vec<f64>,
}

impl RotorPhases {
    /// Phases with every pixel starting at the same `charge`.
    pub fn uniform(angle: [f64; 4], k: &CameraIntrinsics, charge: f64) -> Self {
        Self {
            angle,
            charge: vec![charge; k.width * k.height],
        }
    }

    pub fn random(rng: &mut impl Rng, n_blades: u32, k: &CameraIntrinsics) -> Self {
        let period = TAU / n_blades as f64;
        let angle = std::array::from_fn(|_| rng.random_range(0.0..period));
        let charge = (0..k.width * k.height).map(|_| rng.random_range(0.0..1.0)).collect();
        Self { angle, charge }
    }
}

/// Pixel bounding box of a motor's disc, clipped to the sensor.
pub fn disc_bbox(state: &SimState, motor: usize, camera: &Pose, k: &CameraIntrinsics, cfg: &GeneratorConfig) -> Option<crate::detect::BBox> {
    let center = state.p + state.q * Vector3::from(cfg.motor_positions[motor]);
    if camera.inverse_transform(&center).z <= cfg.prop_radius {
        return None;
    }
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    for j in 0..24 {
        let a = TAU * j as f64 / 24.0;
        let rim = center + state.q * Vector3::new(a.cos(), a.sin(), 0.0) * (cfg.prop_radius / (PI / 24.0).cos());
        let px = k.project(&camera.inverse_transform(&rim))?;
        lo = lo.inf(&px);
        hi = hi.sup(&px);
    }
    let x_min = (lo.x.floor() as i64).max(0);
    let y_min = (lo.y.floor() as i64).max(0);
    let x_max = (hi.x.ceil() as i64).min(k.width as i64 - 1);
    let y_max = (hi.y.ceil() as i64).min(k.height as i64 - 1);
    if x_min > x_max || y_min > y_max {
        return None;
    }
    Some(crate::detect::BBox {
        x_min: x_min as i32,
        y_min: y_min as i32,
        x_max: x_max as i32,
        y_max: y_max as i32,
    })
}

/// Appends the blade-edge events of all four propellers over
/// `[t0_us, t1_us)` and advances the blade phases. Motor speeds are held
/// constant over the interval and the target pose is taken at its start.
/// Output is unsorted.
#[allow(clippy::too_many_arguments)]
pub fn render_propeller_events(
    state: &SimState,
    phases: &mut RotorPhases,
    camera: &Pose,
    k: &CameraIntrinsics,
    cfg: &GeneratorConfig,
    t0_us: u64,
    t1_us: u64,
    out: &mut Vec<Event>,
) {
    let period = TAU / cfg.n_blades as f64;
    let dt = (t1_us - t0_us) as f64 * 1e-6;
    let normal = state.q * Vector3::z();
    let inv_q = state.q.inverse();
    for i in 0..4 {
        let omega = state.motor_omega[i];
        let th0 = phases.angle[i];
        let th1 = th0 + omega.max(0.0) * dt;
        phases.angle[i] = th1.rem_euclid(period);
        if omega <= 0.0 {
            continue;
        }
        let Some(bb) = disc_bbox(state, i, camera, k, cfg) else {
            continue;
        };
        let center = state.p + state.q * Vector3::from(cfg.motor_positions[i]);
        let spin = spin_direction(i);
        // disc-plane point hit by the ray through (u, v), in motor coordinates
        let hit = |u: f64, v: f64| -> Option<(Vector3<f64>, f64)> {
            let ray = camera.orientation * Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
            let denom = normal.dot(&ray);
            if denom.abs() < 1e-12 {
                return None;
            }
            let s = normal.dot(&(center - camera.position)) / denom;
            if s <= 0.0 {
                return None;
            }
            // footprint of one pixel on the disc plane
            let footprint = s * ray.norm() / (k.fx.min(k.fy) * (denom.abs() / ray.norm()));
            Some((inv_q * (camera.position + ray * s - center), footprint))
        };
        let inside = |r: f64| r <= cfg.prop_radius && r >= cfg.hub_radius;
        let x_min = (bb.x_min - 1).max(0);
        let y_min = (bb.y_min - 1).max(0);
        let x_max = (bb.x_max + 1).min(k.width as i32 - 1);
        let y_max = (bb.y_max + 1).min(k.height as i32 - 1);
        for y in y_min..=y_max {
            for x in x_min..=x_max {
                let Some((local, footprint)) = hit(x as f64, y as f64) else {
                    continue;
                };
                let r = local.xy().norm();
                let margin = footprint;
                let (coverage, at) = if r > cfg.hub_radius + margin && r < cfg.prop_radius - margin {
                    (1.0, local)
                } else if r < cfg.hub_radius - margin || r > cfg.prop_radius + margin {
                    continue;
                } else {
                    // pixel straddles a rim: supersample its area
                    let mut n = 0usize;
                    let mut acc = Vector3::zeros();
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let du = (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                            let dv = (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                            if let Some((l, _)) = hit(x as f64 + du, y as f64 + dv) {
                                if inside(l.xy().norm()) {
                                    n += 1;
                                    acc += l;
                                }
                            }
                        }
                    }
                    if n == 0 {
                        continue;
                    }
                    ((n as f64) / (SUPERSAMPLE * SUPERSAMPLE) as f64, acc / n as f64)
                };
                // unit blade contrast: partial coverage scales the log-intensity step
                if coverage < cfg.contrast_threshold {
                    continue;
                }
                let alpha = spin * at.y.atan2(at.x);
                for (edge, polarity) in [(alpha, Polarity::On), (alpha + cfg.blade_width, Polarity::Off)] {
                    let mut a = edge + ((th0 - edge) / period).ceil() * period;
                    if a < th0 {
                        a += period;
                    }
                    while a < th1 {
                        let t = t0_us + (((a - th0) / omega) * 1e6) as u64;
                        let t = t.min(t1_us - 1);
                        let q = &mut phases.charge[y as usize * k.width + x as usize];
                        *q += cfg.events_per_edge_crossing * coverage;
                        let n = q.floor();
                        *q -= n;
                        for _ in 0..n as u64 {
                            out.push(Event::new(t, x as u16, y as u16, polarity));
                        }
                        a += period;
                    }
                }
            }
        }
    }
}

/// Merges uniform Poisson noise over the sensor into time-sorted `events`.
pub fn add_background_noise(
    events: Vec<Event>,
    cfg: &GeneratorConfig,
    k: &CameraIntrinsics,
    t0_us: u64,
    t1_us: u64,
    rng: &mut impl Rng,
) -> Vec<Event> {
    let lambda = cfg.noise_rate * (k.width * k.height) as f64 * (t1_us - t0_us) as f64 * 1e-6;
    if !(lambda > 0.0) {
        return events;
    }
    let n = Poisson::new(lambda).map(|d| d.sample(rng) as usize).unwrap_or(0);
    let mut noise: Vec<Event> = (0..n)
        .map(|_| {
            let polarity = if rng.random_bool(0.5) {
                Polarity::On
            } else {
                Polarity::Off
            };
            Event::new(
                rng.random_range(t0_us..t1_us),
                rng.random_range(0..k.width) as u16,
                rng.random_range(0..k.height) as u16,
                polarity,
            )
        })
        .collect();
    noise.sort_by_key(|e| e.t);
    let mut merged = Vec::with_capacity(events.len() + noise.len());
    let (mut a, mut b) = (events.into_iter().peekable(), noise.into_iter().peekable());
    loop {
        let take_a = match (a.peek(), b.peek()) {
            (Some(x), Some(y)) => x.t <= y.t,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => break,
        };
        merged.extend(if take_a { a.next() } else { b.next() });
    }
    merged
}

/// One simulator step: state and observer at the step start plus the events
/// recorded during the step, time-sorted.
#[derive(Clone, Debug)]
pub struct SimStep {
    pub state: SimState,
    pub observer: Pose,
    pub events: Vec<Event>,
}

/// Streaming generator of the full synthetic sequence.
pub struct Generator {
    flight: Flight,
    cfg: GeneratorConfig,
    k: CameraIntrinsics,
    ext: Extrinsics,
    phases: RotorPhases,
    rng: ChaCha8Rng,
}

impl Generator {
    pub fn new(
        profile: FlightProfile,
        quad: &QuadrotorParams,
        cfg: &GeneratorConfig,
        k: &CameraIntrinsics,
        ext: &Extrinsics,
        duration_us: u64,
    ) -> Result<Self, SimError> {
        k.validate().map_err(|_| SimError::InvalidParams("invalid camera intrinsics"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let phases = RotorPhases::random(&mut rng, cfg.n_blades, k);
        Ok(Self {
            flight: Flight::new(profile, quad, cfg, duration_us)?,
            cfg: cfg.clone(),
            k: *k,
            ext: *ext,
            phases,
            rng,
        })
    }

    pub fn n_steps(&self) -> u64 {
        self.flight.n_steps()
    }
}

impl Iterator for Generator {
    type Item = SimStep;

    fn next(&mut self) -> Option<SimStep> {
        let (state, observer) = self.flight.next()?;
        let t0 = state.t_us;
        let t1 = t0 + self.cfg.dt_us;
        let camera = camera_pose(&observer, &self.ext);
        let mut events = Vec::new();
        render_propeller_events(&state, &mut self.phases, &camera, &self.k, &self.cfg, t0, t1, &mut events);
        events.sort_by_key(|e| e.t);
        let events = add_background_noise(events, &self.cfg, &self.k, t0, t1, &mut self.rng);
        Some(SimStep { state, observer, events })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpm::{estimate_frequency, RoiAccumulator, RpmParams};

    fn quad() -> QuadrotorParams {
        QuadrotorParams::default()
    }

    fn run(mut s: SimState, thrust: f64, omega_in: Vector3<f64>, steps: usize) -> SimState {
        for _ in 0..steps {
            s = integrate_dynamics(&s, thrust, &omega_in, &quad(), 10.0, 1e-3);
        }
        s
    }

    #[test]
    fn free_fall_matches_closed_form() {
        let s = run(SimState::at_rest(), 0.0, Vector3::zeros(), 1000);
        assert!((s.p.z - (-4.905)).abs() / 4.905 < 1e-6, "{}", s.p.z);
        assert!((s.v.z - (-9.81)).abs() / 9.81 < 1e-6);
        assert_eq!(s.t_us, 1_000_000);
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let q = quad();
        let s = run(SimState::at_rest(), q.mass * q.g, Vector3::zeros(), 1000);
        assert!(s.p.norm() < 1e-12);
    }

    #[test]
    fn rate_decay_matches_exponential() {
        let w0 = Vector3::new(1.0, -2.0, 0.5);
        let s = run(
            SimState {
                omega_body: w0,
                ..SimState::at_rest()
            },
            9.81,
            Vector3::zeros(),
            1000,
        );
        let expect = w0 * (-10.0f64).exp();
        for i in 0..3 {
            assert!((s.omega_body[i] - expect[i]).abs() / expect[i].abs() < 1e-6);
        }
        assert!((s.q.quaternion().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_rate_rotates_at_that_rate() {
        let w = Vector3::new(0.3, 0.0, 0.0);
        let s = run(
            SimState {
                omega_body: w,
                ..SimState::at_rest()
            },
            0.0,
            w,
            1000,
        );
        assert!((s.q.angle() - 0.3).abs() < 1e-9);
    }

    #[test]
    fn profile_parsing() {
        for p in FlightProfile::ALL {
            assert_eq!(p.name().parse::<FlightProfile>().unwrap(), p);
        }
        assert!(matches!("loop".parse::<FlightProfile>(), Err(SimError::UnknownProfile(_))));
        assert!(scripted_flight("loop", &quad(), &GeneratorConfig::default(), 1000).is_err());
    }

    #[test]
    fn hover_motors_constant_at_hover_value() {
        let q = quad();
        let states = scripted_flight("hover", &q, &GeneratorConfig::default(), 2_000_000).unwrap();
        for s in &states {
            for w in s.motor_omega {
                assert!((w - q.hover_omega()).abs() < 1e-9);
            }
        }
        let last = states.last().unwrap();
        assert!(last.p.norm() < 1e-9);
    }

    #[test]
    fn row_count_and_band_for_all_profiles() {
        let cfg = GeneratorConfig::default();
        let (lo, hi) = cfg.omega_band();
        for p in FlightProfile::ALL {
            let states = scripted_flight(p.name(), &quad(), &cfg, 30_000_000).unwrap();
            assert_eq!(states.len(), 30_000);
            for s in &states {
                assert!(s.motor_omega.iter().all(|w| (lo..=hi).contains(w)), "{p}");
                assert!((s.q.quaternion().norm() - 1.0).abs() < 1e-12);
            }
            // station keeping holds the orbit
            let drift = states.iter().map(|s| s.p.norm()).fold(0.0, f64::max);
            assert!(drift < 1.5, "{p} drifted {drift}");
        }
    }

    #[test]
    fn lateral_sweep_differential_alternates() {
        let q = quad();
        let states = scripted_flight("lateral_sweep", &q, &GeneratorConfig::default(), 12_000_000).unwrap();
        let diff: Vec<f64> = states
            .iter()
            .map(|s| crate::estimate::roll_rate_from_rpm(&s.motor_omega, 1.0, &q.right_set, &q.left_set))
            .collect();
        let changes = diff.windows(2).filter(|w| w[0].signum() != w[1].signum()).count();
        assert!((5..=7).contains(&changes), "{changes}");
        let roll_max = states
            .iter()
            .map(|s| crate::estimate::attitude_from_bz(&s.thrust_axis()).unwrap().roll.abs())
            .fold(0.0, f64::max);
        assert!((roll_max.to_degrees() - 12.0).abs() < 0.5, "{}", roll_max.to_degrees());
    }

    fn hover_setup(omega: f64) -> (SimState, Pose, CameraIntrinsics, GeneratorConfig) {
        let cfg = GeneratorConfig {
            noise_rate: 0.0,
            ..Default::default()
        };
        let state = SimState {
            motor_omega: [omega; 4],
            ..SimState::at_rest()
        };
        let observer = Pose::new(Vector3::new(0.0, 0.0, 3.0), UnitQuaternion::identity());
        (state, camera_pose(&observer, &Extrinsics::default()), CameraIntrinsics::default(), cfg)
    }

    fn render_static(omega: f64, duration_us: u64) -> (Vec<Event>, crate::detect::BBox) {
        let (state, cam, k, cfg) = hover_setup(omega);
        let mut phases = RotorPhases::uniform([0.1, 0.7, 1.3, 2.9], &k, 0.5);
        let mut out = Vec::new();
        for step in 0..duration_us / 1000 {
            let mut chunk = Vec::new();
            render_propeller_events(&state, &mut phases, &cam, &k, &cfg, step * 1000, step * 1000 + 1000, &mut chunk);
            chunk.sort_by_key(|e| e.t);
            out.extend(chunk);
        }
        (out, disc_bbox(&state, 0, &cam, &k, &cfg).unwrap())
    }

    fn roi_counts(events: &[Event], bbox: &crate::detect::BBox, duration_us: u64, bin_us: u64) -> Vec<f64> {
        let mut counts = vec![0.0; (duration_us / bin_us) as usize];
        for e in crate::rpm::extract_roi_events(events, bbox) {
            counts[(e.t / bin_us) as usize] += 1.0;
        }
        counts
    }

    /// Independent frequency measure: hysteresis up-crossings of the mean
    /// of the 1 ms moving average.
    fn zero_crossing_frequency(raw: &[f64], bin_us: u64) -> f64 {
        let counts: Vec<f64> = raw.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        let sd = (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / counts.len() as f64).sqrt();
        let (lo, hi) = (mean - 0.5 * sd, mean + 0.5 * sd);
        let mut below = false;
        let mut crossings = Vec::new();
        for (i, &c) in counts.iter().enumerate() {
            if c < lo {
                below = true;
            } else if c > hi && below {
                below = false;
                crossings.push(i as f64);
            }
        }
        let n = crossings.len();
        (n - 1) as f64 / ((crossings[n - 1] - crossings[0]) * bin_us as f64 * 1e-6)
    }

    #[test]
    fn hover_roi_signal_has_blade_passage_fundamental() {
        let omega = 521.5;
        let expect = 2.0 * omega / TAU;
        assert!((expect - 166.0).abs() < 0.05);
        let (events, bbox) = render_static(omega, 1_000_000);
        assert!(!events.is_empty());
        let counts = roi_counts(&events, &bbox, 1_000_000, 200);
        let zc = zero_crossing_frequency(&counts, 200);
        assert!((zc - expect).abs() < 0.01 * expect, "zero crossings {zc}");

        let params = RpmParams::default();
        let mut acc = RoiAccumulator::new(&params);
        let window: Vec<Event> = events.iter().filter(|e| e.t >= 400_000 && e.t < 500_000).copied().collect();
        acc.push_chunk(400_000, 500_000, &window, &bbox);
        let f = estimate_frequency(&acc.signal().unwrap(), &params).unwrap();
        assert!((f - expect).abs() < 0.5, "fft {f}");
    }

    #[test]
    fn doubling_speed_doubles_passage_frequency() {
        let (e1, bb) = render_static(300.0, 500_000);
        let (e2, _) = render_static(600.0, 500_000);
        let f1 = zero_crossing_frequency(&roi_counts(&e1, &bb, 500_000, 200), 200);
        let f2 = zero_crossing_frequency(&roi_counts(&e2, &bb, 500_000, 200), 200);
        assert!((f2 / f1 - 2.0).abs() < 0.02, "{f1} {f2}");
    }

    #[test]
    fn event_total_tracks_projected_disc_area() {
        // each crossing emits `events_per_edge_crossing` times the covered
        // fraction of the pixel, so the total follows the annulus area
        let omega = 521.5;
        let duration_us = 200_000;
        let (state, cam, k, mut cfg) = hover_setup(omega);
        let run = |cfg: &GeneratorConfig| {
            let mut phases = RotorPhases::uniform([0.0; 4], &k, 0.0);
            let mut out = Vec::new();
            for step in 0..duration_us / 1000 {
                render_propeller_events(&state, &mut phases, &cam, &k, cfg, step * 1000, step * 1000 + 1000, &mut out);
            }
            out
        };
        let depth = 3.0 - Extrinsics::default().translation.z.abs();
        let r_px = cfg.prop_radius * k.fx / depth;
        let hub_px = cfg.hub_radius * k.fx / depth;
        let area = PI * (r_px * r_px - hub_px * hub_px);
        let crossings = 2.0 * cfg.n_blades as f64 * omega * duration_us as f64 * 1e-6 / TAU;
        let expect = 4.0 * area * crossings * cfg.events_per_edge_crossing;

        cfg.contrast_threshold = 0.0;
        let soft = run(&cfg);
        assert!((soft.len() as f64 / expect - 1.0).abs() < 0.02, "{} vs {expect}", soft.len());

        cfg.contrast_threshold = 1.0;
        let hard = run(&cfg);
        let pixels = |ev: &[Event]| ev.iter().map(|e| (e.x, e.y)).collect::<std::collections::HashSet<_>>().len();
        assert!(pixels(&hard) < pixels(&soft));
        assert!((hard.len() as f64) < 0.95 * expect);
    }

    #[test]
    fn stopped_rotors_emit_nothing() {
        let (events, _) = render_static(0.0, 50_000);
        assert!(events.is_empty());
    }

    #[test]
    fn event_density_scales_with_charge_rate() {
        let (state, cam, k, mut cfg) = hover_setup(521.5);
        let mut counts = Vec::new();
        for epec in [0.5, 1.0, 2.0] {
            cfg.events_per_edge_crossing = epec;
            // starting at half a charge rounds each pixel's count to nearest
            let mut phases = RotorPhases::uniform([0.0; 4], &k, 0.5);
            let mut out = Vec::new();
            render_propeller_events(&state, &mut phases, &cam, &k, &cfg, 0, 200_000, &mut out);
            counts.push(out.len() as f64);
        }
        assert!((counts[1] / counts[0] - 2.0).abs() < 0.02, "{counts:?}");
        assert!((counts[2] / counts[1] - 2.0).abs() < 0.02, "{counts:?}");
    }

    #[test]
    fn noise_statistics() {
        let k = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg0 = GeneratorConfig {
            noise_rate: 0.0,
            ..Default::default()
        };
        let base = vec![Event::new(5, 1, 1, Polarity::On), Event::new(9, 2, 2, Polarity::Off)];
        assert_eq!(add_background_noise(base.clone(), &cfg0, &k, 0, 10_000, &mut rng), base);

        let cfg = GeneratorConfig {
            noise_rate: 0.1,
            ..Default::default()
        };
        let tau_us = 2_000_000;
        let out = add_background_noise(base.clone(), &cfg, &k, 0, tau_us, &mut rng);
        let expected = 0.1 * 640.0 * 480.0 * 2.0;
        let n = (out.len() - 2) as f64;
        assert!((n - expected).abs() < 5.0 * expected.sqrt(), "{n} vs {expected}");
        assert!(out.windows(2).all(|w| w[0].t <= w[1].t));
        assert!(out.iter().all(|e| (e.x as usize) < k.width && (e.y as usize) < k.height));
        assert!(base.iter().all(|b| out.contains(b)));
    }

    fn stream(seed: u64, profile: FlightProfile) -> Vec<Event> {
        let cfg = GeneratorConfig {
            seed,
            ..Default::default()
        };
        let g = Generator::new(profile, &quad(), &cfg, &CameraIntrinsics::default(), &Extrinsics::default(), 200_000).unwrap();
        g.flat_map(|s| s.events).collect()
    }

    #[test]
    fn generator_is_deterministic_sorted_and_in_bounds() {
        let a = stream(7, FlightProfile::Aggressive);
        assert_eq!(a, stream(7, FlightProfile::Aggressive));
        assert_ne!(a, stream(8, FlightProfile::Aggressive));
        assert!(a.windows(2).all(|w| w[0].t <= w[1].t));
        assert!(a.iter().all(|e| e.x < 640 && e.y < 480 && e.t < 200_000));
    }

    #[test]
    fn all_four_discs_visible_from_observer() {
        let cfg = GeneratorConfig::default();
        let k = CameraIntrinsics::default();
        for p in FlightProfile::ALL {
            let mut f = Flight::new(p, &quad(), &cfg, 30_000_000).unwrap();
            for (s, obs) in f.by_ref().step_by(50) {
                let cam = camera_pose(&obs, &Extrinsics::default());
                for m in 0..4 {
                    let bb = disc_bbox(&s, m, &cam, &k, &cfg).expect("disc in view");
                    assert!(bb.x_min > 0 && bb.y_min > 0 && bb.x_max < 639 && bb.y_max < 479, "{p} {bb:?}");
                }
            }
        }
    }

    #[test]
    fn motor_one_is_top_right_in_image() {
        let (state, cam, k, cfg) = hover_setup(500.0);
        let c: Vec<_> = (0..4)
            .map(|m| {
                let b = disc_bbox(&state, m, &cam, &k, &cfg).unwrap();
                ((b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2)
            })
            .collect();
        assert!(c[0].0 > 320 && c[0].1 < 240);
        assert!(c[1].0 < 320 && c[1].1 < 240);
        assert!(c[2].0 < 320 && c[2].1 > 240);
        assert!(c[3].0 > 320 && c[3].1 > 240);
    }
}
