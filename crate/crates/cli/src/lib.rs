//! The commands behind the `rotorsense` binary, usable as a library.
//!
//! * [`cmd_simulate`] writes a synthetic sequence: events, ground truth,
//!   observer poses, the resolved config and a manifest of hashes.
//! * [`cmd_estimate`] runs the estimator over an event file and writes one
//!   record per chunk.
//! * [`cmd_metrics`] scores estimates against ground truth and checks the
//!   thresholds from the config.
//! * [`selftest`] runs a short simulate/estimate/metrics loop in memory.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

use rotorsense::detect::DetectorKind;
use rotorsense::events::{Chunker, Event, EventChunk, EventError};
use rotorsense::io::{self as rio, EstimateWriter, EventFormat, EventReader, EventWriter};
use rotorsense::metrics::{evaluate, MetricsReport, WARMUP_US};
use rotorsense::pipeline::{front_end, FrontEnd, ObserverTrack};
use rotorsense::sim::Generator;
use rotorsense::{EstimateRecord, FlightProfile, Pipeline, PipelineConfig, SimState};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const OBSERVER_FILE: &str = "observer.csv";
pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const RUN_LOG_FILE: &str = "run.log";
pub const METRICS_FILE: &str = "metrics.txt";
pub const WINDOWED_FILE: &str = "windowed.csv";

/// Reads a config file, or the defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    PipelineConfig::parse(&text).with_context(|| format!("in {}", path.display()))
}

/// SHA-256 of the canonical flat config text.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_flat_text().as_bytes()))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulateSummary {
    pub events_path: PathBuf,
    pub n_events: u64,
    pub n_states: usize,
    pub config_sha256: String,
}

/// Writes a synthetic sequence into `out_dir`. The event file is
/// `events.bin` or `events.csv` depending on `format`.
pub fn cmd_simulate(
    cfg: &PipelineConfig,
    profile: FlightProfile,
    duration_us: u64,
    out_dir: &Path,
    format: EventFormat,
) -> Result<SimulateSummary> {
    create_dir(out_dir)?;
    let events_name = match format {
        EventFormat::Binary => "events.bin",
        EventFormat::Csv => "events.csv",
    };
    let events_path = out_dir.join(events_name);
    let gen = Generator::new(profile, &cfg.quad, &cfg.sim, &cfg.camera, &cfg.extrinsics, duration_us)?;
    let mut writer = EventWriter::create(&events_path)?;
    let mut states = Vec::with_capacity(gen.n_steps() as usize);
    let mut observer = Vec::with_capacity(gen.n_steps() as usize);
    let mut n_events = 0u64;
    for step in gen {
        writer.write_all(&step.events)?;
        n_events += step.events.len() as u64;
        observer.push((step.state.t_us, step.observer));
        states.push(step.state);
    }
    writer.finish()?;
    rio::write_ground_truth(&out_dir.join(GROUND_TRUTH_FILE), &states)?;
    rio::write_observer(&out_dir.join(OBSERVER_FILE), &observer)?;
    write_text(&out_dir.join(CONFIG_FILE), &cfg.to_flat_text())?;

    let config_sha256 = config_hash(cfg);
    let mut m = String::new();
    let _ = writeln!(m, "profile = {profile}");
    let _ = writeln!(m, "duration_us = {duration_us}");
    let _ = writeln!(m, "seed = {}", cfg.seed);
    let _ = writeln!(m, "config_sha256 = {config_sha256}");
    let _ = writeln!(m, "events_file = {events_name}");
    let _ = writeln!(m, "n_events = {n_events}");
    let _ = writeln!(m, "n_ground_truth_rows = {}", states.len());
    for name in [events_name, GROUND_TRUTH_FILE, OBSERVER_FILE] {
        let _ = writeln!(m, "sha256.{name} = {}", file_sha256(&out_dir.join(name))?);
    }
    write_text(&out_dir.join(MANIFEST_FILE), &m)?;
    Ok(SimulateSummary {
        events_path,
        n_events,
        n_states: states.len(),
        config_sha256,
    })
}

/// Wall-time statistics of one estimator run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunStats {
    pub detector: DetectorKind,
    pub n_chunks: usize,
    pub n_events: u64,
    /// Span of the processed timeline, µs.
    pub data_us: u64,
    pub wall: Duration,
    /// Front end plus estimator time of each chunk, µs.
    pub chunk_wall_us: Vec<u64>,
}

impl RunStats {
    /// Sequence time processed per second of wall time.
    pub fn realtime_factor(&self) -> f64 {
        self.data_us as f64 * 1e-6 / self.wall.as_secs_f64().max(1e-9)
    }

    fn percentile(&self, q: f64) -> u64 {
        if self.chunk_wall_us.is_empty() {
            return 0;
        }
        let mut v = self.chunk_wall_us.clone();
        v.sort_unstable();
        v[((v.len() - 1) as f64 * q).round() as usize]
    }

    /// One `key=value` line for the run log.
    pub fn log_line(&self) -> String {
        let n = self.chunk_wall_us.len().max(1) as f64;
        let mean = self.chunk_wall_us.iter().sum::<u64>() as f64 / n;
        format!(
            "detector={} chunks={} events={} data_s={:.3} wall_s={:.3} realtime={:.2} chunk_us.mean={:.0} chunk_us.p50={} chunk_us.p99={} chunk_us.max={}",
            self.detector,
            self.n_chunks,
            self.n_events,
            self.data_us as f64 * 1e-6,
            self.wall.as_secs_f64(),
            self.realtime_factor(),
            mean,
            self.percentile(0.5),
            self.percentile(0.99),
            self.chunk_wall_us.iter().max().copied().unwrap_or(0),
        )
    }
}

struct Prepared {
    t_start: u64,
    t_end: u64,
    n_events: usize,
    fe: FrontEnd,
    front_time: Duration,
}

/// Runs the estimator over a chunk stream. The front end (filter and
/// detection) runs one stage ahead on a worker thread; the filters advance
/// on the calling thread in chunk order. `sink` sees every record.
pub fn run_estimator<I, E>(
    cfg: &PipelineConfig,
    chunks: I,
    observer: &ObserverTrack,
    mut sink: impl FnMut(&EstimateRecord) -> Result<()>,
) -> Result<RunStats>
where
    I: Iterator<Item = Result<EventChunk, E>> + Send,
    E: std::error::Error + Send + Sync + 'static,
{
    let started = Instant::now();
    let mut pipeline = Pipeline::new(cfg);
    let mut stats = RunStats {
        detector: cfg.detector,
        n_chunks: 0,
        n_events: 0,
        data_us: 0,
        wall: Duration::ZERO,
        chunk_wall_us: Vec::new(),
    };
    let mut first_t = None;
    thread::scope(|s| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Prepared>>(8);
        s.spawn(move || {
            for chunk in chunks {
                let item = chunk.map_err(anyhow::Error::from).and_then(|c| {
                    let t = Instant::now();
                    let fe = front_end(&c, cfg)?;
                    Ok(Prepared {
                        t_start: c.t_start,
                        t_end: c.t_end,
                        n_events: c.len(),
                        fe,
                        front_time: t.elapsed(),
                    })
                });
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    break;
                }
            }
        });
        for item in rx {
            let p = item?;
            let t = Instant::now();
            let pose = observer.pose_at(p.t_start + (p.t_end - p.t_start) / 2);
            let record = pipeline.step(p.t_start, p.t_end, &p.fe, &pose)?;
            sink(&record)?;
            stats.n_chunks += 1;
            stats.n_events += p.n_events as u64;
            stats.chunk_wall_us.push((p.front_time + t.elapsed()).as_micros() as u64);
            first_t.get_or_insert(p.t_start);
            stats.data_us = p.t_end - first_t.unwrap();
        }
        Ok(())
    })?;
    stats.wall = started.elapsed();
    Ok(stats)
}

/// Reads an observer pose file into a track.
pub fn load_observer(path: &Path) -> Result<ObserverTrack> {
    let samples = rio::read_observer(path)?;
    ObserverTrack::new(samples).ok_or_else(|| anyhow!("{}: observer file must be non-empty and time-sorted", path.display()))
}

/// Chunks an event stream on the observer timeline.
pub fn chunk_stream<I, E>(events: I, cfg: &PipelineConfig, observer: &ObserverTrack) -> Result<Chunker<I>>
where
    I: Iterator<Item = Result<Event, E>>,
    E: From<EventError>,
{
    Ok(Chunker::new(events, cfg.chunk_us)?.with_timeline(observer.start(), observer.end()))
}

/// Estimates from an event file; writes `estimates.csv` and appends the
/// timing summary to `run.log` in `out_dir`.
pub fn cmd_estimate(cfg: &PipelineConfig, events_path: &Path, observer_path: &Path, out_dir: &Path) -> Result<RunStats> {
    create_dir(out_dir)?;
    let observer = load_observer(observer_path)?;
    let reader = EventReader::open(events_path)?;
    let chunks = chunk_stream(reader, cfg, &observer)?;
    let mut writer = EstimateWriter::create(&out_dir.join(ESTIMATES_FILE))?;
    let stats = run_estimator(cfg, chunks, &observer, |r| Ok(writer.write(r)?))?;
    writer.finish()?;
    let log_path = out_dir.join(RUN_LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    writeln!(log, "events={} config_sha256={} {}", events_path.display(), config_hash(cfg), stats.log_line())
        .with_context(|| format!("writing {}", log_path.display()))?;
    Ok(stats)
}

/// Lists every configured threshold the report violates.
pub fn threshold_violations(cfg: &PipelineConfig, report: &MetricsReport) -> Vec<String> {
    let th = &cfg.thresholds;
    let mut out = Vec::new();
    if let Some(max) = th.mape_max {
        for (p, e) in report.rpm.per_prop.iter().enumerate() {
            if !(e.mape <= max) {
                out.push(format!("rpm.prop{}.mape = {:.4} > {max}", p + 1, e.mape));
            }
        }
    }
    let state_limits = [
        th.position_rmse_lateral_max,
        th.position_rmse_depth_max,
        th.velocity_rmse_max,
        th.roll_rmse_deg_max,
        th.pitch_rmse_deg_max,
    ];
    let Some(st) = &report.state else {
        if state_limits.iter().any(Option::is_some) {
            out.push("state thresholds set but no valid state estimates".to_string());
        }
        return out;
    };
    let mut check = |name: &str, value: f64, max: Option<f64>| {
        if let Some(max) = max {
            if !(value <= max) {
                out.push(format!("{name} = {value:.4} > {max}"));
            }
        }
    };
    check("state.position_rmse.x", st.position_rmse[0], th.position_rmse_lateral_max);
    check("state.position_rmse.y", st.position_rmse[1], th.position_rmse_lateral_max);
    check("state.position_rmse.z", st.position_rmse[2], th.position_rmse_depth_max);
    for (i, ax) in ["x", "y", "z"].iter().enumerate() {
        check(&format!("state.velocity_rmse.{ax}"), st.velocity_rmse[i], th.velocity_rmse_max);
    }
    check("state.roll_rmse_deg", st.roll_rmse_deg, th.roll_rmse_deg_max);
    check("state.pitch_rmse_deg", st.pitch_rmse_deg, th.pitch_rmse_deg_max);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsOutcome {
    pub report: MetricsReport,
    pub violations: Vec<String>,
}

impl MetricsOutcome {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Scores an estimate file against a ground-truth file. With `out_dir`
/// the report and the windowed series are written there as well.
pub fn cmd_metrics(cfg: &PipelineConfig, estimates_path: &Path, truth_path: &Path, out_dir: Option<&Path>) -> Result<MetricsOutcome> {
    let records = rio::read_estimates(estimates_path)?;
    let truth = rio::read_ground_truth(truth_path)?;
    if truth.is_empty() {
        bail!("{}: no ground-truth rows", truth_path.display());
    }
    let report = evaluate(&records, &truth, WARMUP_US)?;
    let violations = threshold_violations(cfg, &report);
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write_text(&dir.join(METRICS_FILE), &report.to_key_values())?;
        write_text(&dir.join(WINDOWED_FILE), &report.windowed_csv())?;
    }
    Ok(MetricsOutcome { report, violations })
}

/// A sequence simulated in memory.
pub struct Sequence {
    pub events: Vec<Event>,
    pub truth: Vec<SimState>,
    pub observer: ObserverTrack,
}

pub fn simulate_in_memory(cfg: &PipelineConfig, profile: FlightProfile, duration_us: u64) -> Result<Sequence> {
    let gen = Generator::new(profile, &cfg.quad, &cfg.sim, &cfg.camera, &cfg.extrinsics, duration_us)?;
    let mut events = Vec::new();
    let mut truth = Vec::new();
    let mut obs = Vec::new();
    for step in gen {
        events.extend(step.events);
        obs.push((step.state.t_us, step.observer));
        truth.push(step.state);
    }
    let observer = ObserverTrack::new(obs).ok_or_else(|| anyhow!("empty sequence"))?;
    Ok(Sequence { events, truth, observer })
}

/// Estimates an in-memory sequence.
pub fn estimate_in_memory(cfg: &PipelineConfig, seq: &Sequence) -> Result<(Vec<EstimateRecord>, RunStats)> {
    let chunks = chunk_stream(seq.events.iter().map(|e| Ok::<_, EventError>(*e)), cfg, &seq.observer)?;
    let mut records = Vec::new();
    let stats = run_estimator(cfg, chunks, &seq.observer, |r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((records, stats))
}

/// Short end-to-end check: 3 s of hover and of lateral sweep with both
/// detectors. Returns the report lines and whether every check passed.
pub fn selftest(cfg: &PipelineConfig) -> Result<(Vec<String>, bool)> {
    let mut lines = Vec::new();
    let mut ok = true;
    for profile in [FlightProfile::Hover, FlightProfile::LateralSweep] {
        let seq = simulate_in_memory(cfg, profile, 3_000_000)?;
        let mut mapes = Vec::new();
        for detector in [DetectorKind::Cc, DetectorKind::Cluster] {
            let mut c = cfg.clone();
            c.detector = detector;
            let (records, stats) = estimate_in_memory(&c, &seq)?;
            let report = evaluate(&records, &seq.truth, WARMUP_US)?;
            let worst = report.rpm.per_prop.iter().map(|e| e.mape).fold(0.0, f64::max);
            let live = records.iter().filter(|r| r.live_tracks == 4).count() as f64 / records.len() as f64;
            let pass = worst <= 3.0 && live >= 0.95;
            ok &= pass;
            mapes.push(worst);
            lines.push(format!(
                "{} {profile} {detector}: worst MAPE {worst:.3}%, 4 live tracks in {:.1}% of chunks, {:.1}x realtime",
                if pass { "PASS" } else { "FAIL" },
                live * 100.0,
                stats.realtime_factor()
            ));
        }
    }
    Ok((lines, ok))
}
