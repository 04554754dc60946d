//! Event data model: ingestion into fixed-length chunks, spatio-temporal
//! contrast (STC) noise filtering and per-chunk count frames.
//!
//! Timestamps are integer microseconds everywhere in this module.

use thiserror::Error;

/// Sign of the log-intensity change that fired an event.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Off,
    On,
}

impl Polarity {
    /// `+1` for [`Polarity::On`], `-1` for [`Polarity::Off`].
    pub fn sign(self) -> i8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }

    /// Decodes the on-disk bit (`1` → on, `0` → off).
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Polarity::Off),
            1 => Some(Polarity::On),
            _ => None,
        }
    }

    pub fn to_bit(self) -> u8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => 0,
        }
    }
}

/// A single brightness change at pixel `(x, y)` at time `t` (µs).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }
}

/// Events falling in the half-open interval `[t_start, t_end)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventChunk {
    pub t_start: u64,
    pub t_end: u64,
    pub events: Vec<Event>,
}

impl EventChunk {
    pub fn new(t_start: u64, t_end: u64, events: Vec<Event>) -> Self {
        Self {
            t_start,
            t_end,
            events,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration_us(&self) -> u64 {
        self.t_end - self.t_start
    }

    /// Chunk midpoint in microseconds.
    pub fn t_mid(&self) -> u64 {
        self.t_start + (self.t_end - self.t_start) / 2
    }
}

/// Per-pixel event counts accumulated over one chunk. Row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EventFrame {
    width: usize,
    height: usize,
    counts: Vec<u32>,
}

impl EventFrame {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            counts: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.counts[y * self.width + x]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn increment(&mut self, x: usize, y: usize) {
        self.counts[y * self.width + x] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Support rule of the STC filter: an event survives when at least
/// `min_support` other events lie within Chebyshev distance `spatial_radius`
/// and within `temporal_window_us` of it.
#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StcFilterParams {
    pub spatial_radius: u16,
    pub temporal_window_us: u64,
    pub min_support: u32,
}

impl Default for StcFilterParams {
    fn default() -> Self {
        Self {
            spatial_radius: 1,
            temporal_window_us: 1_000,
            min_support: 2,
        }
    }
}

impl StcFilterParams {
    pub fn validate(&self) -> Result<(), EventError> {
        if self.spatial_radius < 1 {
            return Err(EventError::InvalidParams("stc spatial_radius must be >= 1"));
        }
        if self.temporal_window_us == 0 {
            return Err(EventError::InvalidParams("stc temporal_window_us must be > 0"));
        }
        if self.min_support < 1 {
            return Err(EventError::InvalidParams("stc min_support must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EventError {
    #[error("event stream not sorted: event {index} has t={t} < previous t={prev}")]
    Unsorted { index: usize, prev: u64, t: u64 },
    #[error("event {index} at t={t} precedes the chunk origin {origin}")]
    BeforeOrigin { index: usize, t: u64, origin: u64 },
    #[error("chunk length must be positive")]
    ZeroChunkLength,
    #[error("event {index} at ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: u16,
        y: u16,
        width: usize,
        height: usize,
    },
    #[error("{0}")]
    InvalidParams(&'static str),
}

/// Splits a time-sorted stream into consecutive chunks of `dt` µs starting at
/// the first event. The final chunk ends one microsecond after the last event
/// and may be shorter than `dt`; gaps produce empty chunks.
pub fn chunk_events(stream: &[Event], dt: u64) -> Result<Vec<EventChunk>, EventError> {
    Chunker::new(stream.iter().copied().map(Ok::<_, EventError>), dt)?.collect()
}

/// Streaming form of [`chunk_events`].
///
/// By default the chunk grid starts at the first event and ends one µs past
/// the last. [`Chunker::with_timeline`] pins the grid to an explicit
/// `[origin, end)` instead, so empty stretches at either end still yield
/// (empty) chunks.
pub struct Chunker<I> {
    source: I,
    dt: u64,
    origin: Option<u64>,
    end_hint: Option<u64>,
    next_start: Option<u64>,
    pending: Option<Event>,
    last_t: Option<u64>,
    index: usize,
    exhausted: bool,
    failed: bool,
}

impl<I, E> Chunker<I>
where
    I: Iterator<Item = Result<Event, E>>,
    E: From<EventError>,
{
    pub fn new(source: I, dt: u64) -> Result<Self, EventError> {
        if dt == 0 {
            return Err(EventError::ZeroChunkLength);
        }
        Ok(Self {
            source,
            dt,
            origin: None,
            end_hint: None,
            next_start: None,
            pending: None,
            last_t: None,
            index: 0,
            exhausted: false,
            failed: false,
        })
    }

    pub fn with_timeline(mut self, origin: u64, end: u64) -> Self {
        self.origin = Some(origin);
        self.end_hint = Some(end);
        self
    }

    fn pull(&mut self) -> Result<Option<Event>, E> {
        if self.exhausted {
            return Ok(None);
        }
        match self.source.next() {
            None => {
                self.exhausted = true;
                Ok(None)
            }
            Some(Err(e)) => Err(e),
            Some(Ok(ev)) => {
                let index = self.index;
                self.index += 1;
                if let Some(prev) = self.last_t {
                    if ev.t < prev {
                        return Err(EventError::Unsorted { index, prev, t: ev.t }.into());
                    }
                }
                if let Some(origin) = self.origin {
                    if ev.t < origin {
                        return Err(EventError::BeforeOrigin { index, t: ev.t, origin }.into());
                    }
                }
                self.last_t = Some(ev.t);
                Ok(Some(ev))
            }
        }
    }

    fn timeline_end(&self) -> u64 {
        let from_events = self.last_t.map_or(0, |t| t + 1);
        from_events.max(self.end_hint.unwrap_or(0))
    }

    fn step(&mut self) -> Result<Option<EventChunk>, E> {
        let start = match self.next_start {
            Some(s) => s,
            None => {
                self.pending = self.pull()?;
                let s = match (self.origin, self.pending) {
                    (Some(o), _) => o,
                    (None, Some(ev)) => ev.t,
                    (None, None) => return Ok(None),
                };
                self.next_start = Some(s);
                s
            }
        };
        if self.pending.is_none() && self.exhausted && start >= self.timeline_end() {
            return Ok(None);
        }
        let full_end = start + self.dt;
        let mut events = Vec::new();
        while let Some(ev) = self.pending {
            if ev.t >= full_end {
                break;
            }
            events.push(ev);
            self.pending = self.pull()?;
        }
        let t_end = if self.pending.is_none() && self.exhausted {
            full_end.min(self.timeline_end())
        } else {
            full_end
        };
        self.next_start = Some(full_end);
        Ok(Some(EventChunk::new(start, t_end, events)))
    }
}

impl<I, E> Iterator for Chunker<I>
where
    I: Iterator<Item = Result<Event, E>>,
    E: From<EventError>,
{
    type Item = Result<EventChunk, E>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.step() {
            Ok(Some(c)) => Some(Ok(c)),
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Spatio-temporal contrast filter over one chunk. Output order is preserved.
pub fn stc_filter(chunk: &EventChunk, params: &StcFilterParams) -> EventChunk {
    let events = &chunk.events;
    if events.is_empty() {
        return EventChunk::new(chunk.t_start, chunk.t_end, Vec::new());
    }
    let r = params.spatial_radius as i64;
    let (mut x0, mut y0, mut x1, mut y1) = (u16::MAX, u16::MAX, 0u16, 0u16);
    for e in events {
        x0 = x0.min(e.x);
        y0 = y0.min(e.y);
        x1 = x1.max(e.x);
        y1 = y1.max(e.y);
    }
    let w = (x1 - x0) as usize + 1;
    let h = (y1 - y0) as usize + 1;
    let mut grid = vec![0u32; w * h];
    let cell = |e: &Event| (e.y - y0) as usize * w + (e.x - x0) as usize;

    let window = params.temporal_window_us;
    let (mut lo, mut hi) = (0usize, 0usize);
    let mut kept = Vec::with_capacity(events.len());
    for e in events {
        while hi < events.len() && events[hi].t <= e.t.saturating_add(window) {
            grid[cell(&events[hi])] += 1;
            hi += 1;
        }
        while events[lo].t + window < e.t {
            grid[cell(&events[lo])] -= 1;
            lo += 1;
        }
        let cx = (e.x - x0) as i64;
        let cy = (e.y - y0) as i64;
        let xa = (cx - r).max(0) as usize;
        let xb = (cx + r).min(w as i64 - 1) as usize;
        let ya = (cy - r).max(0) as usize;
        let yb = (cy + r).min(h as i64 - 1) as usize;
        let mut support = 0u32;
        for yy in ya..=yb {
            let row = &grid[yy * w..yy * w + w];
            support += row[xa..=xb].iter().sum::<u32>();
        }
        // the event itself is inside its own window
        if support - 1 >= params.min_support {
            kept.push(*e);
        }
    }
    EventChunk::new(chunk.t_start, chunk.t_end, kept)
}

/// Accumulates the chunk into a `width` x `height` count frame.
pub fn accumulate_frame(
    chunk: &EventChunk,
    width: usize,
    height: usize,
) -> Result<EventFrame, EventError> {
    let mut frame = EventFrame::zeros(width, height);
    for (index, e) in chunk.events.iter().enumerate() {
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= width || y >= height {
            return Err(EventError::OutOfBounds {
                index,
                x: e.x,
                y: e.y,
                width,
                height,
            });
        }
        frame.increment(x, y);
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(t: u64, x: u16, y: u16) -> Event {
        Event::new(t, x, y, Polarity::On)
    }

    #[test]
    fn thirty_five_ms_in_ten_ms_chunks() {
        let stream: Vec<Event> = (0..35_000).step_by(100).map(|t| ev(t, 1, 1)).collect();
        let stream = {
            let mut s = stream;
            s.push(ev(34_999, 2, 2));
            s
        };
        let chunks = chunk_events(&stream, 10_000).unwrap();
        assert_eq!(chunks.len(), 4);
        assert_eq!(chunks[3].t_start, 30_000);
        assert_eq!(chunks[3].duration_us(), 5_000);
        for c in &chunks[..3] {
            assert_eq!(c.duration_us(), 10_000);
        }
    }

    #[test]
    fn empty_stream_gives_no_chunks() {
        assert!(chunk_events(&[], 10_000).unwrap().is_empty());
    }

    #[test]
    fn all_events_at_time_zero() {
        let stream = vec![ev(0, 1, 1), ev(0, 2, 2), ev(0, 3, 3)];
        let chunks = chunk_events(&stream, 10_000).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].events.len(), 3);
    }

    #[test]
    fn unsorted_stream_reports_first_inversion() {
        let stream = vec![ev(0, 0, 0), ev(10, 0, 0), ev(5, 0, 0), ev(1, 0, 0)];
        let err = chunk_events(&stream, 100).unwrap_err();
        assert_eq!(err, EventError::Unsorted { index: 2, prev: 10, t: 5 });
    }

    #[test]
    fn zero_dt_rejected() {
        assert_eq!(chunk_events(&[ev(0, 0, 0)], 0).unwrap_err(), EventError::ZeroChunkLength);
    }

    #[test]
    fn explicit_timeline_emits_empty_chunks() {
        let chunks: Vec<_> = Chunker::new(std::iter::empty::<Result<Event, EventError>>(), 10)
            .unwrap()
            .with_timeline(0, 35)
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(chunks.len(), 4);
        assert!(chunks.iter().all(|c| c.is_empty()));
        assert_eq!(chunks[3].t_end, 35);

        let stream = [ev(12, 0, 0)];
        let chunks: Vec<_> = Chunker::new(stream.iter().copied().map(Ok::<_, EventError>), 10)
            .unwrap()
            .with_timeline(0, 40)
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(chunks.len(), 4);
        assert_eq!(chunks[1].events.len(), 1);
    }

    #[test]
    fn isolated_event_removed() {
        let chunk = EventChunk::new(0, 10_000, vec![ev(500, 10, 10)]);
        let params = StcFilterParams {
            spatial_radius: 1,
            temporal_window_us: 1_000,
            min_support: 1,
        };
        assert!(stc_filter(&chunk, &params).is_empty());
    }

    #[test]
    fn co_located_burst_retained() {
        let events: Vec<Event> = (0..100).map(|i| ev(i * 5, 7, 7)).collect();
        let chunk = EventChunk::new(0, 10_000, events);
        let params = StcFilterParams {
            spatial_radius: 1,
            temporal_window_us: 1_000,
            min_support: 1,
        };
        assert_eq!(stc_filter(&chunk, &params).len(), 100);
    }

    /// Independent O(n²) support count.
    fn brute_force_keep(events: &[Event], p: &StcFilterParams) -> Vec<bool> {
        events
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let support = events
                    .iter()
                    .enumerate()
                    .filter(|(j, o)| {
                        *j != i
                            && (o.x as i32 - e.x as i32).abs() <= p.spatial_radius as i32
                            && (o.y as i32 - e.y as i32).abs() <= p.spatial_radius as i32
                            && o.t.abs_diff(e.t) <= p.temporal_window_us
                    })
                    .count();
                support >= p.min_support as usize
            })
            .collect()
    }

    #[test]
    fn noise_removed_blob_retained() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // 10 events/ms over 640x480 for one 10 ms chunk, plus a 500-event blob in 10x10
        let mut events: Vec<(Event, bool)> = (0..100)
            .map(|_| {
                (
                    ev(rng.random_range(0..10_000), rng.random_range(0..640), rng.random_range(0..480)),
                    false,
                )
            })
            .collect();
        for _ in 0..500 {
            events.push((
                ev(rng.random_range(0..10_000), 300 + rng.random_range(0..10), 200 + rng.random_range(0..10)),
                true,
            ));
        }
        events.sort_by_key(|(e, _)| e.t);
        let chunk = EventChunk::new(0, 10_000, events.iter().map(|(e, _)| *e).collect());
        // 5 events per blob pixel over the chunk: a 5x5 neighbourhood gives ample support
        let params = StcFilterParams {
            spatial_radius: 2,
            ..Default::default()
        };
        let oracle = brute_force_keep(&chunk.events, &params);
        let blob_kept = events.iter().zip(&oracle).filter(|((_, b), k)| *b && **k).count();
        let noise_kept = events.iter().zip(&oracle).filter(|((_, b), k)| !*b && **k).count();
        assert_eq!(blob_kept, 500);
        assert!(noise_kept <= 5, "oracle kept {noise_kept} noise events");

        let out = stc_filter(&chunk, &params);
        let expected: Vec<Event> = chunk
            .events
            .iter()
            .zip(&oracle)
            .filter(|(_, k)| **k)
            .map(|(e, _)| *e)
            .collect();
        assert_eq!(out.events, expected);
    }

    #[test]
    fn frame_counts() {
        let chunk = EventChunk::new(0, 10, vec![ev(1, 3, 2), ev(2, 3, 2), ev(3, 3, 2)]);
        let f = accumulate_frame(&chunk, 8, 4).unwrap();
        assert_eq!(f.get(3, 2), 3);
        assert_eq!(f.total(), 3);
        assert_eq!(f.counts().iter().filter(|&&c| c > 0).count(), 1);

        let empty = accumulate_frame(&EventChunk::new(0, 10, vec![]), 8, 4).unwrap();
        assert_eq!(empty.total(), 0);
    }

    #[test]
    fn frame_rejects_out_of_bounds() {
        let chunk = EventChunk::new(0, 10, vec![ev(1, 3, 2), ev(2, 8, 0)]);
        assert!(matches!(
            accumulate_frame(&chunk, 8, 4),
            Err(EventError::OutOfBounds { index: 1, .. })
        ));
    }

    fn sorted_stream() -> impl Strategy<Value = Vec<Event>> {
        prop::collection::vec((0u64..5_000, 0u16..32, 0u16..32, any::<bool>()), 0..300).prop_map(
            |mut v| {
                v.sort_by_key(|e| e.0);
                v.into_iter()
                    .map(|(t, x, y, p)| Event::new(t, x, y, if p { Polarity::On } else { Polarity::Off }))
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn chunking_is_lossless(stream in sorted_stream(), dt in 1u64..2_000) {
            let chunks = chunk_events(&stream, dt).unwrap();
            let flat: Vec<Event> = chunks.iter().flat_map(|c| c.events.iter().copied()).collect();
            prop_assert_eq!(&flat, &stream);
            for (i, c) in chunks.iter().enumerate() {
                prop_assert!(c.events.iter().all(|e| e.t >= c.t_start && e.t < c.t_end));
                if i + 1 < chunks.len() {
                    prop_assert_eq!(c.duration_us(), dt);
                    prop_assert_eq!(c.t_end, chunks[i + 1].t_start);
                }
            }
        }

        #[test]
        fn stc_output_is_ordered_subset(stream in sorted_stream(), r in 1u16..3, w in 1u64..500, s in 1u32..4) {
            let chunk = EventChunk::new(0, 5_000, stream);
            let params = StcFilterParams { spatial_radius: r, temporal_window_us: w, min_support: s };
            let out = stc_filter(&chunk, &params);
            let oracle = brute_force_keep(&chunk.events, &params);
            let expected: Vec<Event> = chunk.events.iter().zip(&oracle).filter(|(_, k)| **k).map(|(e, _)| *e).collect();
            prop_assert_eq!(out.events, expected);
        }

        #[test]
        fn frame_conserves_count(stream in sorted_stream()) {
            let chunk = EventChunk::new(0, 5_000, stream);
            let f = accumulate_frame(&chunk, 32, 32).unwrap();
            prop_assert_eq!(f.total(), chunk.len() as u64);
        }
    }
}
