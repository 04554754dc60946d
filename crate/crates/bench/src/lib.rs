//! Inputs shared by the benchmarks.

use rotorsense::events::{Chunker, EventError};
use rotorsense::pipeline::ObserverTrack;
use rotorsense::rpm::RoiSignal;
use rotorsense::sim::Generator;
use rotorsense::{EventChunk, FlightProfile, PipelineConfig};

/// Consecutive chunks of a simulated sequence with the observer track.
pub struct Fixture {
    pub cfg: PipelineConfig,
    pub chunks: Vec<EventChunk>,
    pub observer: ObserverTrack,
}

/// Simulates `duration_us` of `profile` and chunks it on the config grid.
pub fn fixture(profile: FlightProfile, duration_us: u64) -> Fixture {
    let cfg = PipelineConfig::default();
    let gen = Generator::new(profile, &cfg.quad, &cfg.sim, &cfg.camera, &cfg.extrinsics, duration_us).expect("valid default config");
    let mut events = Vec::new();
    let mut poses = Vec::new();
    for step in gen {
        events.extend(step.events);
        poses.push((step.state.t_us, step.observer));
    }
    let observer = ObserverTrack::new(poses).expect("non-empty sequence");
    let chunks = Chunker::new(events.into_iter().map(Ok::<_, EventError>), cfg.chunk_us)
        .expect("positive chunk length")
        .with_timeline(observer.start(), observer.end())
        .collect::<Result<Vec<_>, _>>()
        .expect("generator output is sorted");
    Fixture { cfg, chunks, observer }
}

/// Binned counts of an impulse train at `f` Hz over one default window.
pub fn impulse_signal(f: f64, cfg: &PipelineConfig) -> RoiSignal {
    let p = &cfg.rpm;
    let n = (p.window_us / p.bin_us) as usize;
    let bin_s = p.bin_us as f64 * 1e-6;
    let mut counts = vec![0u32; n];
    let mut t = 0.0;
    while t < n as f64 * bin_s {
        counts[(t / bin_s) as usize] += 1;
        t += 1.0 / f;
    }
    RoiSignal {
        bin_width_us: p.bin_us,
        window_length_us: p.window_us,
        counts,
    }
}
