//! Extrinsic calibration of the virtual camera created by a planar mirror,
//! using 2D human joints seen directly and in the mirror.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below are the concrete types the pipeline and the CLI use.

pub mod baseline;
pub mod body_prior;
pub mod eight_point;
pub mod error;
pub mod geometry;
pub mod lbfgs;
pub mod metrics;
pub mod pipeline;
pub mod pose;
pub mod ransac;
pub mod refiner;
pub mod scalar;
pub mod synth;
pub mod tracks;
pub mod triangulation;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

pub type Intrinsics64 = geometry::Intrinsics<f64>;
pub type MirrorPlane64 = geometry::MirrorPlane<f64>;
pub type VirtualExtrinsics64 = geometry::VirtualExtrinsics<f64>;
pub type ReflectiveEssential64 = geometry::ReflectiveEssential<f64>;
pub type ReflectiveFundamental64 = geometry::ReflectiveFundamental<f64>;
pub type JointTracks64 = tracks::JointTracks<f64>;
pub type Joints3D64 = tracks::Joints3D<f64>;
