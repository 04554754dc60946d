//! Accuracy of RPM and state estimates against ground truth.

use std::fmt::Write as _;

use nalgebra::Vector3;
use thiserror::Error;

use crate::estimate::{attitude_from_bz, Attitude};
use crate::pipeline::EstimateRecord;
use crate::rpm::omega_to_rpm;
use crate::sim::SimState;

/// Maximum timestamp gap for pairing an estimate with ground truth.
pub const PAIR_TOLERANCE_US: u64 = 5_000;
/// Start of sequence excluded from evaluation.
pub const WARMUP_US: u64 = 300_000;
/// Width of the windowed-error bins.
pub const WINDOW_US: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{which} series is not time-sorted at index {index}")]
    Unsorted { which: &'static str, index: usize },
    #[error("estimate and ground-truth series do not overlap")]
    EmptyOverlap,
    #[error("no samples left after the warmup exclusion")]
    NoSamplesAfterWarmup,
}

/// Estimate/ground-truth index pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub pairs: Vec<(usize, usize)>,
    /// Estimates with no ground truth within tolerance.
    pub unpaired: usize,
}

fn check_sorted(t: &[u64], which: &'static str) -> Result<(), MetricsError> {
    match t.windows(2).position(|w| w[1] < w[0]) {
        Some(i) => Err(MetricsError::Unsorted { which, index: i + 1 }),
        None => Ok(()),
    }
}

/// Pairs every estimate with the nearest ground-truth sample within
/// `tolerance_us`; ties go to the earlier sample.
pub fn align_series(est_t: &[u64], gt_t: &[u64], tolerance_us: u64) -> Result<Alignment, MetricsError> {
    check_sorted(est_t, "estimate")?;
    check_sorted(gt_t, "ground-truth")?;
    let mut pairs = Vec::with_capacity(est_t.len());
    let mut j = 0;
    for (i, &t) in est_t.iter().enumerate() {
        if gt_t.is_empty() {
            break;
        }
        while j + 1 < gt_t.len() && gt_t[j + 1] <= t {
            j += 1;
        }
        let mut best = j;
        if j + 1 < gt_t.len() && gt_t[j + 1].abs_diff(t) < gt_t[j].abs_diff(t) {
            best = j + 1;
        }
        if gt_t[best].abs_diff(t) <= tolerance_us {
            pairs.push((i, best));
        }
    }
    if pairs.is_empty() {
        return Err(MetricsError::EmptyOverlap);
    }
    Ok(Alignment {
        unpaired: est_t.len() - pairs.len(),
        pairs,
    })
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ErrorStats {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Percent; samples with zero ground truth are skipped.
    pub mape: f64,
    /// `None` when either series is constant or too short.
    pub pearson: Option<f64>,
}

impl ErrorStats {
    pub const EMPTY: ErrorStats = ErrorStats {
        n: 0,
        mae: f64::NAN,
        rmse: f64::NAN,
        mape: f64::NAN,
        pearson: None,
    };
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    let scale = ma.abs().max(mb.abs()).max(1.0);
    let floor = (1e-12 * scale).powi(2) * n as f64;
    if saa <= floor || sbb <= floor {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn error_stats(est: &[f64], gt: &[f64]) -> ErrorStats {
    let n = est.len().min(gt.len());
    if n == 0 {
        return ErrorStats::EMPTY;
    }
    let (mut abs, mut sq, mut pct, mut n_pct) = (0.0, 0.0, 0.0, 0usize);
    for (e, g) in est.iter().zip(gt) {
        let d = (e - g).abs();
        abs += d;
        sq += d * d;
        if *g != 0.0 {
            pct += d / g.abs();
            n_pct += 1;
        }
    }
    let mae = abs / n as f64;
    // guard against rounding putting RMSE a hair below MAE
    let rmse = (sq / n as f64).sqrt().max(mae);
    ErrorStats {
        n,
        mae,
        rmse,
        mape: if n_pct > 0 { 100.0 * pct / n_pct as f64 } else { f64::NAN },
        pearson: pearson(&est[..n], &gt[..n]),
    }
}

/// One paired RPM sample; per-prop estimates are only scored when valid.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct RpmSample {
    pub t_us: u64,
    pub est: [f64; 4],
    pub valid: [bool; 4],
    pub gt: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowError {
    /// Window index `k` covering `[k, k+1)` s from the sequence start.
    pub k: u64,
    pub mean_abs: [Option<f64>; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpmMetrics {
    pub per_prop: [ErrorStats; 4],
    /// `best_permutation[p]` is the estimated prop scored against truth prop `p`.
    pub best_permutation: [usize; 4],
    pub best_per_prop: [ErrorStats; 4],
    pub windowed: Vec<WindowError>,
    pub n_samples: usize,
}

impl RpmMetrics {
    pub fn mean_mape(&self) -> f64 {
        mean_mape(&self.per_prop)
    }

    pub fn best_mean_mape(&self) -> f64 {
        mean_mape(&self.best_per_prop)
    }
}

fn mean_mape(s: &[ErrorStats; 4]) -> f64 {
    s.iter().map(|e| e.mape).sum::<f64>() / 4.0
}

fn permutations4() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    if (0..4).all(|i| p.contains(&i)) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

fn prop_stats(samples: &[&RpmSample], est_prop: usize, gt_prop: usize) -> ErrorStats {
    let (e, g): (Vec<f64>, Vec<f64>) = samples
        .iter()
        .filter(|s| s.valid[est_prop])
        .map(|s| (s.est[est_prop], s.gt[gt_prop]))
        .unzip();
    error_stats(&e, &g)
}

/// Per-prop errors over samples with `t ≥ t_start + warmup`, the windowed
/// error series and the best fixed relabeling of prop ids.
pub fn compute_rpm_metrics(samples: &[RpmSample], t_start_us: u64, warmup_us: u64) -> Result<RpmMetrics, MetricsError> {
    let kept: Vec<&RpmSample> = samples.iter().filter(|s| s.t_us >= t_start_us + warmup_us).collect();
    if kept.is_empty() {
        return Err(MetricsError::NoSamplesAfterWarmup);
    }
    let per_prop: [ErrorStats; 4] = std::array::from_fn(|p| prop_stats(&kept, p, p));

    let mut best = ([0, 1, 2, 3], per_prop, mean_mape(&per_prop));
    for perm in permutations4() {
        let stats: [ErrorStats; 4] = std::array::from_fn(|p| prop_stats(&kept, perm[p], p));
        let m = mean_mape(&stats);
        if m < best.2 {
            best = (perm, stats, m);
        }
    }

    let mut windowed: Vec<WindowError> = Vec::new();
    let mut sums = [(0.0, 0usize); 4];
    let mut current: Option<u64> = None;
    let flush = |k: u64, sums: &mut [(f64, usize); 4], out: &mut Vec<WindowError>| {
        out.push(WindowError {
            k,
            mean_abs: sums.map(|(s, n)| (n > 0).then(|| s / n as f64)),
        });
        *sums = [(0.0, 0); 4];
    };
    for s in &kept {
        let k = (s.t_us - t_start_us) / WINDOW_US;
        if current.is_some_and(|c| c != k) {
            flush(current.unwrap(), &mut sums, &mut windowed);
        }
        current = Some(k);
        for p in 0..4 {
            if s.valid[p] {
                sums[p].0 += (s.est[p] - s.gt[p]).abs();
                sums[p].1 += 1;
            }
        }
    }
    if let Some(k) = current {
        flush(k, &mut sums, &mut windowed);
    }

    Ok(RpmMetrics {
        per_prop,
        best_permutation: best.0,
        best_per_prop: best.1,
        windowed,
        n_samples: kept.len(),
    })
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct StateSample {
    pub t_us: u64,
    pub p_est: Vector3<f64>,
    pub v_est: Vector3<f64>,
    pub att_est: Attitude,
    pub p_gt: Vector3<f64>,
    pub v_gt: Vector3<f64>,
    pub att_gt: Attitude,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct StateMetrics {
    pub n: usize,
    /// m, per world axis
    pub position_rmse: [f64; 3],
    /// m/s, per world axis
    pub velocity_rmse: [f64; 3],
    pub roll_rmse_deg: f64,
    pub pitch_rmse_deg: f64,
}

fn rmse(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    (s / n as f64).sqrt()
}

pub fn compute_state_metrics(samples: &[StateSample], t_start_us: u64, warmup_us: u64) -> Result<StateMetrics, MetricsError> {
    let kept: Vec<&StateSample> = samples.iter().filter(|s| s.t_us >= t_start_us + warmup_us).collect();
    if kept.is_empty() {
        return Err(MetricsError::NoSamplesAfterWarmup);
    }
    Ok(StateMetrics {
        n: kept.len(),
        position_rmse: std::array::from_fn(|i| rmse(kept.iter().map(|s| s.p_est[i] - s.p_gt[i]))),
        velocity_rmse: std::array::from_fn(|i| rmse(kept.iter().map(|s| s.v_est[i] - s.v_gt[i]))),
        roll_rmse_deg: rmse(kept.iter().map(|s| s.att_est.roll - s.att_gt.roll)).to_degrees(),
        pitch_rmse_deg: rmse(kept.iter().map(|s| s.att_est.pitch - s.att_gt.pitch)).to_degrees(),
    })
}

/// Everything reported for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rpm: RpmMetrics,
    pub state: Option<StateMetrics>,
    pub n_estimates: usize,
    pub unpaired: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    /// `key = value` lines; RPM errors are in revolutions per minute.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_estimates = {}", self.n_estimates);
        let _ = writeln!(s, "n_unpaired = {}", self.unpaired);
        let _ = writeln!(s, "rpm.n_samples = {}", self.rpm.n_samples);
        for (label, stats) in [("rpm", &self.rpm.per_prop), ("rpm_best", &self.rpm.best_per_prop)] {
            for (p, e) in stats.iter().enumerate() {
                let pre = format!("{label}.prop{}", p + 1);
                let _ = writeln!(s, "{pre}.n = {}", e.n);
                let _ = writeln!(s, "{pre}.mae = {:.6}", e.mae);
                let _ = writeln!(s, "{pre}.rmse = {:.6}", e.rmse);
                let _ = writeln!(s, "{pre}.mape = {:.6}", e.mape);
                let _ = writeln!(s, "{pre}.pearson = {}", opt(e.pearson));
            }
        }
        let _ = writeln!(s, "rpm.mean_mape = {:.6}", self.rpm.mean_mape());
        let _ = writeln!(s, "rpm_best.mean_mape = {:.6}", self.rpm.best_mean_mape());
        let perm = self.rpm.best_permutation.map(|i| (i + 1).to_string()).join(",");
        let _ = writeln!(s, "rpm_best.permutation = {perm}");
        if let Some(st) = &self.state {
            let _ = writeln!(s, "state.n = {}", st.n);
            for (i, ax) in ["x", "y", "z"].iter().enumerate() {
                let _ = writeln!(s, "state.position_rmse.{ax} = {:.6}", st.position_rmse[i]);
            }
            for (i, ax) in ["x", "y", "z"].iter().enumerate() {
                let _ = writeln!(s, "state.velocity_rmse.{ax} = {:.6}", st.velocity_rmse[i]);
            }
            let _ = writeln!(s, "state.roll_rmse_deg = {:.6}", st.roll_rmse_deg);
            let _ = writeln!(s, "state.pitch_rmse_deg = {:.6}", st.pitch_rmse_deg);
        }
        s
    }

    /// Windowed error series as CSV: `k,e1,e2,e3,e4` (empty cell when a prop
    /// had no valid sample in the window).
    pub fn windowed_csv(&self) -> String {
        let mut s = String::from("k,e1,e2,e3,e4\n");
        for w in &self.rpm.windowed {
            let cells: Vec<String> = w.mean_abs.iter().map(|v| v.map_or(String::new(), |x| format!("{x:.6}"))).collect();
            let _ = writeln!(s, "{},{}", w.k, cells.join(","));
        }
        s
    }
}

/// Pairs estimate records with ground-truth states and scores them.
///
/// RPM is scored on every paired record (per-prop validity applies); the
/// state on records whose position and attitude are both valid. The
/// evaluation clock starts at the first ground-truth sample.
pub fn evaluate(records: &[EstimateRecord], truth: &[SimState], warmup_us: u64) -> Result<MetricsReport, MetricsError> {
    let est_t: Vec<u64> = records.iter().map(|r| r.t_us).collect();
    let gt_t: Vec<u64> = truth.iter().map(|s| s.t_us).collect();
    let alignment = align_series(&est_t, &gt_t, PAIR_TOLERANCE_US)?;
    let t_start = gt_t[0];
    let mut rpm = Vec::with_capacity(alignment.pairs.len());
    let mut state = Vec::new();
    for &(i, j) in &alignment.pairs {
        let (r, g) = (&records[i], &truth[j]);
        rpm.push(RpmSample {
            t_us: r.t_us,
            est: r.rpm,
            valid: r.rpm_valid,
            gt: g.motor_omega.map(omega_to_rpm),
        });
        if r.position_valid && r.attitude_valid {
            let Ok(att_gt) = attitude_from_bz(&g.thrust_axis()) else { continue };
            state.push(StateSample {
                t_us: r.t_us,
                p_est: r.position,
                v_est: r.velocity,
                att_est: Attitude { roll: r.roll, pitch: r.pitch },
                p_gt: g.p,
                v_gt: g.v,
                att_gt,
            });
        }
    }
    Ok(MetricsReport {
        rpm: compute_rpm_metrics(&rpm, t_start, warmup_us)?,
        state: compute_state_metrics(&state, t_start, warmup_us).ok(),
        n_estimates: records.len(),
        unpaired: alignment.unpaired,
    })
}
