//! Markerless inside-out tracking at desk scale.
//!
//! This crate simulates and evaluates an inside-out tracking pipeline for
//! interventional imaging: a stereo camera rides on the tracked instrument,
//! localizes itself against a map of the room, and the resulting poses drive
//! freehand 3D ultrasound compounding. Everything runs on synthetic data with
//! exact ground truth, so every stage can be checked against an oracle.
//!
//! The pipeline is organized as one module per stage:
//!
//! - [`xform`] — SE(3) rigid transforms: composition, inversion, rotation
//!   metrics and interpolation. The currency of every other module.
//! - [`optics`] — pinhole cameras with radial distortion, stereo triangulation
//!   and planar intrinsic calibration.
//! - [`register`] — offline calibration solvers: Tsai–Lenz hand-eye (AX = XB),
//!   point-based rigid registration and stylus-based ultrasound calibration.
//! - [`vostereo`] — feature-based stereo visual odometry with a persistent
//!   landmark map, RANSAC pose estimation and keyframe-triggered mapping.
//! - [`orsim`] — the synthetic operating room: landmark scenes, ground-truth
//!   trajectories, stereo observation rendering, a simulated outside-in
//!   tracker and ultrasound frames of a ball phantom.
//! - [`usfuse`] — temporal stream synchronization, voxel-volume compounding
//!   of tracked ultrasound frames and sphere-fit quality assessment.
//! - [`bench`] — the evaluation protocol: chain all tracker outputs into a
//!   common frame and report translation RMS and rotation-axis deviation
//!   against ground truth.
//! - [`io`] — file formats shared with the command-line tools: pose-stream
//!   CSV, calibration problem files, volumes and experiment configuration.
//!
//! Units are millimetres and radians throughout; degrees appear only at I/O
//! boundaries. All randomness is seeded and all pipelines are deterministic:
//! the same inputs and seed produce bit-identical outputs.
//!
//! A narrative guide with runnable examples lives in the `book/` directory of
//! the repository; its code snippets are compiled and run as doc-tests of the
//! [`guide`] module.

pub mod bench;
pub mod io;
pub mod optics;
pub mod orsim;
pub mod register;
pub mod usfuse;
pub mod vostereo;
pub mod xform;

#[path = "guide_doctests.rs"]
pub mod guide;

pub use xform::{AxisAngle, RigidTransform};
