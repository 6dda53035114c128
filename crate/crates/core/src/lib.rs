//! Geometry, detection, tracking and evaluation primitives for roadside
//! phone-use violation detection.
//!
//! The crate is `no_std` (it needs `alloc`) and does no IO. Frame decoding,
//! persistence, the HTTP API and the command line live in the `phonewatch`
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod detect;
pub mod eval;
pub mod geometry;
pub mod track;

pub use detect::{ClassLabel, Detection, DetectorBackend, DetectorSpec, ScriptedBackend};
pub use geometry::{iou, BBox, DriverSide, FrameSize, Transform, TransformChain};
pub use track::{TrackId, Tracker, TrackerConfig};
