//! Relative state estimation of a quadrotor from the event stream of its
//! spinning propellers.
//!
//! The crate is organised along the processing chain:
//!
//! * [`events`] — event data model, chunking, STC noise filter, event frames
//! * [`detect`] — connected-component and density-clustering propeller detectors,
//!   PCA ellipses and direct conic fitting
//! * [`track`] — nearest-neighbour tracker and propeller numbering
//! * [`rpm`] — ROI binning, FFT frequency estimation and per-motor smoothing
//! * [`geometry`] — pinhole camera, depth from the motor diagonal, frame chain,
//!   disc normal recovery from a projected ellipse
//! * [`estimate`] — coupled position and thrust-axis Kalman filters
//! * [`sim`] — synthetic flights and event rendering used as ground truth
//! * [`metrics`] — error statistics against ground truth
//! * [`pipeline`] — per-chunk orchestration of all of the above
//!
//! [`config`] and [`io`] hold the configuration file and on-disk formats.

pub mod config;
pub mod detect;
pub mod estimate;
pub mod events;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod rpm;
pub mod sim;
pub mod track;

pub use config::PipelineConfig;
pub use detect::{ClusterEllipse, Conic, Detection, DetectorKind, DetectorParams};
pub use estimate::{Attitude, OrientationState, PositionState, QuadrotorParams};
pub use events::{Event, EventChunk, EventFrame, Polarity, StcFilterParams};
pub use geometry::{CameraIntrinsics, Extrinsics, Pose};
pub use metrics::MetricsReport;
pub use pipeline::{EstimateRecord, Pipeline};
pub use rpm::{RpmEstimate, RpmKfState};
pub use sim::{FlightProfile, GeneratorConfig, SimState};
pub use track::{PropAssignment, Track, Tracker};
