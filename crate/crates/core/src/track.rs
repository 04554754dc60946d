//! Nearest-neighbour tracking of propeller detections and propeller
//! numbering.
//!
//! Propellers are numbered by image quadrant around the quadrotor centre
//! (image y points down): 1 top-right, 2 top-left, 3 bottom-left,
//! 4 bottom-right. Numbers stick to tracks once assigned.

use std::collections::BTreeMap;

use nalgebra::Vector2;

use crate::detect::Detection;

#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerParams {
    /// Maximum association distance (pixels).
    pub dist_threshold: f64,
    /// Tracks missing for more than this many consecutive chunks are dropped.
    pub max_missing: u32,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            dist_threshold: 15.0,
            max_missing: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u64,
    pub centroid: Vector2<f64>,
    /// Pixels per chunk.
    pub velocity: Vector2<f64>,
    pub age: u32,
    pub frames_missing: u32,
    pub last_detection: Detection,
}

impl Track {
    /// Expected position in the next chunk.
    pub fn predicted(&self) -> Vector2<f64> {
        predict_missing(self)
    }

    /// Best current position: the centroid when matched this chunk, else the
    /// coasting extrapolation.
    pub fn position(&self) -> Vector2<f64> {
        self.centroid + self.velocity * self.frames_missing as f64
    }
}

/// Constant-velocity extrapolation one chunk past the last miss.
pub fn predict_missing(track: &Track) -> Vector2<f64> {
    track.centroid + track.velocity * (track.frames_missing as f64 + 1.0)
}

/// Mean of exactly four centroids.
pub fn quad_center(centroids: &[Vector2<f64>]) -> Option<Vector2<f64>> {
    (centroids.len() == 4).then(|| centroids.iter().sum::<Vector2<f64>>() / 4.0)
}

/// Propeller number of a point relative to the centre.
pub fn quadrant(p: &Vector2<f64>, center: &Vector2<f64>) -> u8 {
    match (p.x >= center.x, p.y < center.y) {
        (true, true) => 1,
        (false, true) => 2,
        (false, false) => 3,
        (true, false) => 4,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PropAssignment {
    /// Track id to propeller number 1..=4.
    pub ids: BTreeMap<u64, u8>,
    pub quad_center: Option<Vector2<f64>>,
    /// Set when the quadrant rule could not produce a unique numbering.
    pub ambiguous: bool,
}

impl PropAssignment {
    pub fn track_of(&self, prop: u8) -> Option<u64> {
        self.ids.iter().find(|(_, &p)| p == prop).map(|(&t, _)| t)
    }

    pub fn is_complete(&self) -> bool {
        self.ids.len() == 4
    }
}

/// Quadrant numbering of four tracks; `None` when two share a quadrant.
pub fn assign_prop_ids(tracks: &[&Track], center: &Vector2<f64>) -> Option<BTreeMap<u64, u8>> {
    let mut seen = [false; 5];
    let mut out = BTreeMap::new();
    for t in tracks {
        let q = quadrant(&t.position(), center);
        if std::mem::replace(&mut seen[q as usize], true) {
            return None;
        }
        out.insert(t.id, q);
    }
    Some(out)
}

/// Greedy association of `detections` to `tracks`, ascending distance.
///
/// Returns `(track index, detection index)` pairs. Ties are broken by track
/// id and then detection coordinates, so the result does not depend on the
/// order of `detections`.
pub fn associate(tracks: &[Track], detections: &[Detection], dist_threshold: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (ti, t) in tracks.iter().enumerate() {
        let pred = predict_missing(t);
        for (di, d) in detections.iter().enumerate() {
            let dist = (d.centroid - pred).norm();
            if dist <= dist_threshold {
                pairs.push((dist, ti, di));
            }
        }
    }
    let key = |d: &Detection| (d.centroid.x, d.centroid.y, d.area);
    pairs.sort_by(|a, b| {
        let (ka, kb) = (key(&detections[a.2]), key(&detections[b.2]));
        a.0.total_cmp(&b.0)
            .then(tracks[a.1].id.cmp(&tracks[b.1].id))
            .then(ka.0.total_cmp(&kb.0))
            .then(ka.1.total_cmp(&kb.1))
            .then(ka.2.cmp(&kb.2))
    });
    let mut t_used = vec![false; tracks.len()];
    let mut d_used = vec![false; detections.len()];
    let mut out = Vec::new();
    for (_, ti, di) in pairs {
        if !t_used[ti] && !d_used[di] {
            t_used[ti] = true;
            d_used[di] = true;
            out.push((ti, di));
        }
    }
    out
}

/// Multi-target tracker with sticky propeller numbering.
#[derive(Clone, Debug)]
pub struct Tracker {
    params: TrackerParams,
    tracks: Vec<Track>,
    next_id: u64,
    assignment: PropAssignment,
}

impl Tracker {
    pub fn new(params: TrackerParams) -> Self {
        Self {
            params,
            tracks: Vec::new(),
            next_id: 1,
            assignment: PropAssignment::default(),
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn assignment(&self) -> &PropAssignment {
        &self.assignment
    }

    pub fn track(&self, id: u64) -> Option<&Track> {
        self.tracks.iter().find(|t| t.id == id)
    }

    /// Track currently numbered `prop` (1..=4).
    pub fn prop_track(&self, prop: u8) -> Option<&Track> {
        self.assignment.track_of(prop).and_then(|id| self.track(id))
    }

    /// Advances by one chunk.
    pub fn update(&mut self, detections: &[Detection]) -> &PropAssignment {
        let matches = associate(&self.tracks, detections, self.params.dist_threshold);
        let mut matched = vec![false; self.tracks.len()];
        let mut used = vec![false; detections.len()];
        for &(ti, di) in &matches {
            let t = &mut self.tracks[ti];
            let d = &detections[di];
            t.velocity = (d.centroid - t.centroid) / (t.frames_missing as f64 + 1.0);
            t.centroid = d.centroid;
            t.frames_missing = 0;
            t.age += 1;
            t.last_detection = d.clone();
            matched[ti] = true;
            used[di] = true;
        }
        for (t, m) in self.tracks.iter_mut().zip(&matched) {
            if !m {
                t.frames_missing += 1;
                t.age += 1;
            }
        }
        let max_missing = self.params.max_missing;
        self.tracks.retain(|t| t.frames_missing <= max_missing);

        // new tracks in a canonical order so ids do not depend on input order
        let mut fresh: Vec<&Detection> = detections.iter().zip(&used).filter(|(_, u)| !**u).map(|(d, _)| d).collect();
        fresh.sort_by(|a, b| a.centroid.x.total_cmp(&b.centroid.x).then(a.centroid.y.total_cmp(&b.centroid.y)));
        for d in fresh {
            self.tracks.push(Track {
                id: self.next_id,
                centroid: d.centroid,
                velocity: Vector2::zeros(),
                age: 1,
                frames_missing: 0,
                last_detection: d.clone(),
            });
            self.next_id += 1;
        }
        self.refresh_assignment();
        &self.assignment
    }

    fn refresh_assignment(&mut self) {
        let alive: Vec<u64> = self.tracks.iter().map(|t| t.id).collect();
        self.assignment.ids.retain(|id, _| alive.contains(id));
        self.assignment.ambiguous = false;

        if !self.assignment.is_complete() {
            let candidates: Vec<&Track> = self
                .tracks
                .iter()
                .filter(|t| t.frames_missing == 0 && !self.assignment.ids.contains_key(&t.id))
                .collect();
            if self.assignment.ids.len() + candidates.len() == 4 {
                let members: Vec<&Track> = self
                    .tracks
                    .iter()
                    .filter(|t| self.assignment.ids.contains_key(&t.id) || candidates.iter().any(|c| c.id == t.id))
                    .collect();
                let positions: Vec<_> = members.iter().map(|t| t.position()).collect();
                let center = quad_center(&positions).expect("four members");
                match assign_prop_ids(&members, &center) {
                    Some(fresh) => {
                        let free: Vec<u8> = (1..=4).filter(|p| !self.assignment.ids.values().any(|v| v == p)).collect();
                        let wanted: Vec<u8> = candidates.iter().map(|c| fresh[&c.id]).collect();
                        let mut sorted = wanted.clone();
                        sorted.sort_unstable();
                        if sorted == free {
                            for (c, p) in candidates.iter().zip(wanted) {
                                self.assignment.ids.insert(c.id, p);
                            }
                        } else {
                            self.assignment.ambiguous = true;
                        }
                    }
                    None => self.assignment.ambiguous = true,
                }
            }
        }

        let positions: Vec<Vector2<f64>> = if self.assignment.is_complete() {
            self.assignment.ids.keys().filter_map(|id| self.track(*id)).map(|t| t.position()).collect()
        } else {
            self.tracks.iter().map(|t| t.position()).collect()
        };
        self.assignment.quad_center = quad_center(&positions);
    }
}
