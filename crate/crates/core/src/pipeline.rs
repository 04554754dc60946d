//! Per-chunk estimation: STC filter, detection, tracking, per-propeller
//! frequency, then the coupled position and orientation filters.
//!
//! [`front_end`] is pure and may run ahead on another thread;
//! [`Pipeline::step`] holds all filter state and must see chunks in order.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::detect::{detect_cc, detect_cluster, fit_conic_direct, outline_points, Detection, DetectorKind};
use crate::estimate::{
    attitude_from_bz, measurement_covariance, orientation_predict, orientation_update, position_predict, position_update,
    roll_rate_from_rpm, total_thrust, OmegaHold, OrientationState, PositionState, UpdateOutcome,
};
use crate::events::{accumulate_frame, stc_filter, EventChunk, EventError, EventFrame};
use crate::geometry::{backproject, cam_to_world, depth_from_span, disambiguate_normal, p1e_disc_normal, Pose};
use crate::rpm::{freq_to_omega, omega_to_rpm, rpm_kf_step, FrequencyEstimator, RoiAccumulator, RpmKfState};
use crate::track::Tracker;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Events(#[from] EventError),
    #[error("chunk at {t_start} µs arrived after {last} µs")]
    OutOfOrder { t_start: u64, last: u64 },
}

/// One output row per chunk, stamped at the chunk end.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateRecord {
    pub t_us: u64,
    /// Revolutions per minute, indexed by propeller number − 1.
    pub rpm: [f64; 4],
    pub rpm_valid: [bool; 4],
    /// World frame, m.
    pub position: Vector3<f64>,
    /// World frame, m/s.
    pub velocity: Vector3<f64>,
    pub b_z: Vector3<f64>,
    /// rad
    pub roll: f64,
    pub pitch: f64,
    pub position_valid: bool,
    pub attitude_valid: bool,
    pub position_rejected: bool,
    pub orientation_rejected: bool,
    /// Numbered propeller tracks detected in this chunk.
    pub live_tracks: u32,
}

/// Filtered events, their frame and the detections of one chunk.
#[derive(Clone, Debug)]
pub struct FrontEnd {
    pub filtered: EventChunk,
    pub frame: EventFrame,
    pub detections: Vec<Detection>,
}

pub fn front_end(chunk: &EventChunk, cfg: &PipelineConfig) -> Result<FrontEnd, PipelineError> {
    let filtered = stc_filter(chunk, &cfg.stc);
    let frame = accumulate_frame(&filtered, cfg.camera.width, cfg.camera.height)?;
    let detections = match cfg.detector {
        DetectorKind::Cc => detect_cc(&frame, &cfg.detect),
        DetectorKind::Cluster => detect_cluster(&filtered, &cfg.detect),
    };
    Ok(FrontEnd {
        filtered,
        frame,
        detections,
    })
}

/// Observer poses interpolated in time.
#[derive(Clone, Debug, PartialEq)]
pub struct ObserverTrack {
    samples: Vec<(u64, Pose)>,
}

impl ObserverTrack {
    /// `samples` must be time-sorted and non-empty.
    pub fn new(samples: Vec<(u64, Pose)>) -> Option<Self> {
        if samples.is_empty() || samples.windows(2).any(|w| w[1].0 < w[0].0) {
            return None;
        }
        Some(Self { samples })
    }

    pub fn start(&self) -> u64 {
        self.samples[0].0
    }

    /// End of the covered interval: last sample plus one sampling step.
    pub fn end(&self) -> u64 {
        let n = self.samples.len();
        let last = self.samples[n - 1].0;
        if n >= 2 {
            last + (last - self.samples[n - 2].0)
        } else {
            last + 1
        }
    }

    /// Pose at `t`, clamped to the first and last samples.
    pub fn pose_at(&self, t: u64) -> Pose {
        let s = &self.samples;
        let i = s.partition_point(|(ts, _)| *ts <= t);
        if i == 0 {
            return s[0].1;
        }
        if i == s.len() {
            return s[i - 1].1;
        }
        let (t0, p0) = s[i - 1];
        let (t1, p1) = s[i];
        let a = (t - t0) as f64 / (t1 - t0) as f64;
        Pose::new(p0.position.lerp(&p1.position, a), p0.orientation.slerp(&p1.orientation, a))
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    tracker: Tracker,
    roi: [RoiAccumulator; 4],
    estimator: FrequencyEstimator,
    rpm_kf: [RpmKfState; 4],
    /// Chunks since the last accepted frequency per propeller.
    rpm_age: [u32; 4],
    hold: OmegaHold,
    position: PositionState,
    orientation: OrientationState,
    last_t: Option<u64>,
}

impl Pipeline {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let f = &cfg.filter;
        let mut position = PositionState::new(f.q_pos, f.q_vel, f.sigma_lat, f.sigma_depth);
        position.gate_chi2 = f.gate_chi2;
        position.init_vel_var = f.init_vel_var;
        let mut orientation = OrientationState::level(f.q_ori, f.sigma_m, f.init_ori_var);
        orientation.gate_chi2 = f.gate_chi2;
        Self {
            cfg: cfg.clone(),
            tracker: Tracker::new(cfg.track),
            roi: std::array::from_fn(|_| RoiAccumulator::new(&cfg.rpm)),
            estimator: FrequencyEstimator::new(&cfg.rpm),
            rpm_kf: [RpmKfState::from_params(&cfg.rpm); 4],
            rpm_age: [u32::MAX; 4],
            hold: OmegaHold::default(),
            position,
            orientation,
            last_t: None,
        }
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    pub fn position_state(&self) -> &PositionState {
        &self.position
    }

    pub fn orientation_state(&self) -> &OrientationState {
        &self.orientation
    }

    /// Runs the front end and the estimator on one chunk.
    pub fn process_chunk(&mut self, chunk: &EventChunk, observer: &Pose) -> Result<EstimateRecord, PipelineError> {
        let fe = front_end(chunk, &self.cfg)?;
        self.step(chunk.t_start, chunk.t_end, &fe, observer)
    }

    /// Estimator half of the chunk step; `observer` is the pose at the chunk
    /// midpoint.
    pub fn step(&mut self, t_start: u64, t_end: u64, fe: &FrontEnd, observer: &Pose) -> Result<EstimateRecord, PipelineError> {
        if let Some(last) = self.last_t {
            if t_start < last {
                return Err(PipelineError::OutOfOrder { t_start, last });
            }
        }
        self.last_t = Some(t_end);
        let dt = (t_end - t_start).max(1) as f64 * 1e-6;
        let cfg = &self.cfg;

        let assignment = self.tracker.update(&fe.detections).clone();
        let mut live: [Option<&Detection>; 4] = [None; 4];
        for p in 1..=4u8 {
            if let Some(track) = self.tracker.prop_track(p) {
                if track.frames_missing == 0 {
                    live[p as usize - 1] = Some(&track.last_detection);
                }
            }
        }

        // per-propeller frequency
        let mut omega = [0.0; 4];
        let mut valid = [false; 4];
        for i in 0..4 {
            let measurement = match live[i] {
                Some(det) => {
                    self.roi[i].push_chunk(t_start, t_end, &fe.filtered.events, &det.bbox);
                    self.roi[i]
                        .signal()
                        .ok()
                        .and_then(|s| self.estimator.estimate(&s).ok())
                        .map(|f| freq_to_omega(f, cfg.n_blades))
                }
                None => {
                    self.roi[i].reset();
                    None
                }
            };
            let kf = rpm_kf_step(&self.rpm_kf[i], measurement, dt);
            self.rpm_age[i] = if measurement.is_some() && !kf.gated {
                0
            } else {
                self.rpm_age[i].saturating_add(1)
            };
            self.rpm_kf[i] = kf;
            omega[i] = kf.omega_hat;
            valid[i] = kf.initialized && self.rpm_age[i] <= cfg.track.max_missing;
        }
        self.hold.update(&omega, &valid);
        let held = self.hold.get();
        let quad = &cfg.quad;
        let thrust = held.map_or(quad.mass * quad.g, |w| total_thrust(&w, quad.c_f));
        let roll_rate = held.map_or(0.0, |w| roll_rate_from_rpm(&w, quad.k_roll, &quad.right_set, &quad.left_set));

        // orientation: predict with the roll differential, correct with disc normals
        let cam_rot = cfg.extrinsics.camera_to_world_rotation(observer);
        self.orientation = orientation_predict(&self.orientation, &Vector3::new(roll_rate, 0.0, 0.0), dt);
        let prior_cam = cam_rot.inverse() * self.orientation.thrust_axis();
        let mut normal_sum = Vector3::zeros();
        for det in live.iter().flatten() {
            let pts = outline_points(&fe.frame, cfg.detect.binarize_threshold, det);
            let Ok(conic) = fit_conic_direct(&pts) else { continue };
            let Ok(cands) = p1e_disc_normal(&conic, &cfg.camera, cfg.filter.disc_radius) else {
                continue;
            };
            if let Some(best) = disambiguate_normal(&cands, &prior_cam) {
                normal_sum += cam_rot * best.normal;
            }
        }
        let mut orientation_rejected = false;
        if normal_sum.norm() > 0.0 {
            let (next, outcome) = orientation_update(&self.orientation, &normal_sum.normalize());
            orientation_rejected = matches!(outcome, UpdateOutcome::Rejected { .. });
            self.orientation = next;
        }

        // position: predict with thrust along the current axis, correct with the quad centre
        let b_z = self.orientation.thrust_axis();
        self.position = position_predict(&self.position, thrust, &b_z, quad, dt);
        let mut position_rejected = false;
        let n_live = live.iter().flatten().count();
        if let (Some(center), true) = (assignment.quad_center, n_live >= 3) {
            let centroids: Vec<Option<Vector2<f64>>> = (1..=4u8).map(|p| self.tracker.prop_track(p).map(|t| t.position())).collect();
            if let Some(span) = diagonal_span(&centroids) {
                if let Ok(depth) = depth_from_span(span, quad.diagonal, cfg.camera.focal(), cfg.filter.min_span_px) {
                    let p_cam = backproject(&center, depth, &cfg.camera);
                    let z = cam_to_world(&p_cam, &cfg.extrinsics, observer);
                    self.position.r_meas = measurement_covariance(cfg.filter.sigma_lat, cfg.filter.sigma_depth, cam_rot.matrix());
                    let (next, outcome) = position_update(&self.position, &z);
                    position_rejected = matches!(outcome, UpdateOutcome::Rejected { .. });
                    self.position = next;
                }
            }
        }

        let attitude = attitude_from_bz(&b_z).ok();
        Ok(EstimateRecord {
            t_us: t_end,
            rpm: omega.map(omega_to_rpm),
            rpm_valid: valid,
            position: self.position.position(),
            velocity: self.position.velocity(),
            b_z,
            roll: attitude.map_or(0.0, |a| a.roll),
            pitch: attitude.map_or(0.0, |a| a.pitch),
            position_valid: self.position.initialized,
            attitude_valid: attitude.is_some(),
            position_rejected,
            orientation_rejected,
            live_tracks: n_live as u32,
        })
    }
}

/// Image length of the motor diagonal: the mean of the 1–3 and 2–4 spans
/// when all four propellers are numbered, otherwise the widest pair.
fn diagonal_span(centroids: &[Option<Vector2<f64>>]) -> Option<f64> {
    if let [Some(a), Some(b), Some(c), Some(d)] = centroids {
        return Some(((a - c).norm() + (b - d).norm()) / 2.0);
    }
    let known: Vec<_> = centroids.iter().flatten().collect();
    let mut best: Option<f64> = None;
    for i in 0..known.len() {
        for j in i + 1..known.len() {
            let d = (known[i] - known[j]).norm();
            best = Some(best.map_or(d, |b: f64| b.max(d)));
        }
    }
    best.filter(|_| known.len() >= 3)
}
