//! Hyper-primitive SLAM engine.
//!
//! The map element is a "hyper primitive": a 3D Gaussian (position, rotation,
//! anisotropic scale, opacity, spherical-harmonic color) optionally carrying a
//! 256-bit binary feature descriptor. Geometric features drive camera tracking
//! and sparse mapping; the same primitives are optimized photometrically
//! against a differentiable splatting renderer.

pub mod features;
pub mod image;
pub mod localization;
pub mod loop_closure;
pub mod map;
pub mod math;
pub mod photomap;
pub mod splat;

pub use image::Image;
pub use map::{HyperMap, HyperPrimitive, Keyframe, KeyframeId, PrimitiveId};
pub use math::{Intrinsics, Mat3, Pose, Quat, Real, Sim3, Vec2, Vec3};
