//! Propeller detection on event chunks.
//!
//! Two interchangeable detectors produce [`Detection`]s:
//! connected-component labelling on the binarised event frame ([`detect_cc`])
//! and hierarchical density clustering on raw event coordinates
//! ([`detect_cluster`]). Ellipse primitives used by the detectors and by the
//! orientation measurement live in [`ellipse`].

mod cc;
mod cluster;
pub mod ellipse;

pub use cc::{binarize, detect_cc, erode, label_components};
pub use cluster::{detect_cluster, hdbscan, HdbscanParams};
pub use ellipse::{fit_conic_direct, fit_ellipse_pca, ClusterEllipse, Conic, EllipseParams};

use nalgebra::Vector2;
use thiserror::Error;

use crate::events::EventFrame;

/// Which detector the pipeline runs.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Cc,
    Cluster,
}

impl std::str::FromStr for DetectorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cc" => Ok(DetectorKind::Cc),
            "cluster" => Ok(DetectorKind::Cluster),
            other => Err(format!("unknown detector '{other}' (expected cc or cluster)")),
        }
    }
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DetectorKind::Cc => "cc",
            DetectorKind::Cluster => "cluster",
        })
    }
}

/// Inclusive pixel bounding box.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x_min: i32,
    pub y_min: i32,
    pub x_max: i32,
    pub y_max: i32,
}

impl BBox {
    pub fn point(x: i32, y: i32) -> Self {
        Self {
            x_min: x,
            y_min: y,
            x_max: x,
            y_max: y,
        }
    }

    pub fn include(&mut self, x: i32, y: i32) {
        self.x_min = self.x_min.min(x);
        self.y_min = self.y_min.min(y);
        self.x_max = self.x_max.max(x);
        self.y_max = self.y_max.max(y);
    }

    pub fn width(&self) -> i32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> i32 {
        self.y_max - self.y_min + 1
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min as f64 && x <= self.x_max as f64 && y >= self.y_min as f64 && y <= self.y_max as f64
    }

    pub fn translated(&self, dx: i32, dy: i32) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }
}

/// One propeller blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub centroid: Vector2<f64>,
    pub bbox: BBox,
    /// Pixel count (CC) or event count (clustering).
    pub area: usize,
    pub ellipse: Option<ClusterEllipse>,
}

#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorParams {
    /// Minimum post-erosion component area (pixels).
    pub min_area: usize,
    pub erosion_radius: usize,
    /// A pixel is foreground when its count reaches this value.
    pub binarize_threshold: u32,
    pub cluster_min_size: usize,
    pub cluster_min_samples: usize,
    pub subsample_max: usize,
    /// Minimum semi-major axis of a cluster ellipse (pixels).
    pub min_major_axis: f64,
    /// Seed of the clustering subsampler; set from the pipeline seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            min_area: 20,
            erosion_radius: 1,
            binarize_threshold: 1,
            cluster_min_size: 40,
            cluster_min_samples: 10,
            subsample_max: 20_000,
            min_major_axis: 3.0,
            seed: 0,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), DetectError> {
        let checks = [
            (self.min_area > 0, "detect.min_area must be positive"),
            (self.binarize_threshold > 0, "detect.binarize_threshold must be positive"),
            (self.cluster_min_size > 1, "detect.cluster_min_size must be > 1"),
            (self.cluster_min_samples > 0, "detect.cluster_min_samples must be positive"),
            (self.subsample_max > 0, "detect.subsample_max must be positive"),
            (self.min_major_axis > 0.0, "detect.min_major_axis must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(DetectError::InvalidParams(msg));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("{0}")]
    InvalidParams(&'static str),
    #[error("too few points: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate point set")]
    Degenerate,
    #[error("conic is not an ellipse")]
    NotAnEllipse,
}

/// Sub-pixel outline of the blob behind `detection`, suitable for conic
/// fitting.
///
/// Foreground pixels inside the detection box that are 8-connected to the
/// pixel nearest the centroid form the blob. Every side shared between a
/// blob pixel and the exterior background contributes its midpoint, so
/// interior holes do not contribute.
pub fn outline_points(frame: &EventFrame, threshold: u32, detection: &Detection) -> Vec<Vector2<f64>> {
    let fw = frame.width() as i32;
    let fh = frame.height() as i32;
    let b = detection.bbox;
    let x0 = b.x_min.max(0);
    let y0 = b.y_min.max(0);
    let x1 = b.x_max.min(fw - 1);
    let y1 = b.y_max.min(fh - 1);
    if x1 < x0 || y1 < y0 {
        return Vec::new();
    }
    // local grid with a one-pixel background ring
    let w = (x1 - x0 + 3) as usize;
    let h = (y1 - y0 + 3) as usize;
    let idx = |lx: usize, ly: usize| ly * w + lx;
    let mut fg = vec![false; w * h];
    let mut seed = None;
    let mut best = f64::INFINITY;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if frame.get(x as usize, y as usize) >= threshold {
                let (lx, ly) = ((x - x0 + 1) as usize, (y - y0 + 1) as usize);
                fg[idx(lx, ly)] = true;
                let d = (x as f64 - detection.centroid.x).powi(2) + (y as f64 - detection.centroid.y).powi(2);
                if d < best {
                    best = d;
                    seed = Some((lx, ly));
                }
            }
        }
    }
    let Some(seed) = seed else {
        return Vec::new();
    };

    // foreground never touches the background ring, so the 8-neighbours of
    // a blob pixel and the 4-neighbours of an interior cell stay in the grid
    let neighbours8 = [-(w as isize) - 1, -(w as isize), -(w as isize) + 1, -1, 1, w as isize - 1, w as isize, w as isize + 1];
    let neighbours4 = [-(w as isize), -1, 1, w as isize];
    let mut blob = vec![false; w * h];
    let mut stack = vec![idx(seed.0, seed.1)];
    blob[stack[0]] = true;
    while let Some(i) = stack.pop() {
        for d in neighbours8 {
            let j = (i as isize + d) as usize;
            if fg[j] && !blob[j] {
                blob[j] = true;
                stack.push(j);
            }
        }
    }

    // exterior background: the ring plus everything 4-connected to it
    let mut exterior = vec![false; w * h];
    for ly in 0..h {
        for lx in 0..w {
            if lx == 0 || ly == 0 || lx == w - 1 || ly == h - 1 {
                exterior[idx(lx, ly)] = true;
            }
        }
    }
    stack.clear();
    for ly in 1..h - 1 {
        for lx in 1..w - 1 {
            let i = idx(lx, ly);
            if !blob[i] && (lx == 1 || ly == 1 || lx == w - 2 || ly == h - 2) {
                exterior[i] = true;
                stack.push(i);
            }
        }
    }
    while let Some(i) = stack.pop() {
        for d in neighbours4 {
            let j = (i as isize + d) as usize;
            if !blob[j] && !exterior[j] {
                exterior[j] = true;
                stack.push(j);
            }
        }
    }

    let mut pts = Vec::new();
    for ly in 1..h - 1 {
        for lx in 1..w - 1 {
            if !blob[idx(lx, ly)] {
                continue;
            }
            for (dx, dy) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
                let j = idx((lx as i32 + dx) as usize, (ly as i32 + dy) as usize);
                if exterior[j] {
                    pts.push(Vector2::new(
                        (lx as i32 - 1 + x0) as f64 + 0.5 * dx as f64,
                        (ly as i32 - 1 + y0) as f64 + 0.5 * dy as f64,
                    ));
                }
            }
        }
    }
    pts
}
