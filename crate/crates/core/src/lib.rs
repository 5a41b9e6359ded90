//! Monocular 3D vehicle pose and shape recovery.
//!
//! A vehicle is described at two scales: a gravity-aligned 3D bounding box
//! (yaw, bottom-center translation, log-scale extents) and a morphable
//! wireframe of 14 landmarks living in the box's normalized frame. Given 2D
//! pseudo-measurements (a detected box, landmark pixels, a crop depth and
//! orientation/size hypotheses) the [`refine`] module minimizes a weighted
//! sum of forward-projection and prior energies ([`energy`]) with a
//! Levenberg-Marquardt solver.
//!
//! Supporting pieces:
//! - [`geometry`]: pinhole projection, box corners, 2D/BEV/3D IoU.
//! - [`shape`]: the linear wireframe model and its EM learner.
//! - [`scene`]: synthetic scene generation, KITTI label I/O, config files.
//! - [`metrics`]: ALP, AP3D, BEV AP, 2D AP and AOS with difficulty buckets.
//! - [`commands`]: the `synth`, `shape-learn`, `fit`, `eval`, `ablate`
//!   pipelines behind the `mono3d` binary.

pub mod commands;
pub mod config;
pub mod energy;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod refine;
pub mod scene;
pub mod shape;

pub use error::{Error, Result};
