//! Pose tracking and sparse geometric mapping: robust motion-only bundle
//! adjustment, local bundle adjustment over the covisibility window,
//! keyframe selection and map-point creation.

mod bootstrap;
mod keyframing;
mod local_ba;
mod motion_ba;

pub use bootstrap::{initialize_two_view, BootstrapConfig, TwoViewInit};
pub use keyframing::{
    create_map_points, primitive_from_keypoint, select_keyframe, FrameStats, KeyframePolicy,
    MapPointConfig, SensorMode,
};
pub use local_ba::{local_ba, LocalBaSummary};
pub use motion_ba::{motion_only_ba, PoseObservation};

use nalgebra::{Matrix2x3, Matrix2x6};
use thiserror::Error;

use crate::math::{skew, Intrinsics, Pose, Real, Vec2, Vec3, Z_MIN};
use crate::splat::projection_jacobian;

/// Levenberg-Marquardt settings shared by both bundle adjusters.
#[derive(Debug, Clone, Copy)]
pub struct LMConfig {
    pub max_iterations: usize,
    pub initial_damping: Real,
    pub damping_up: Real,
    pub damping_down: Real,
    /// Huber knee in (whitened) pixels.
    pub huber_delta: Real,
    /// Relative cost decrease below which iteration stops.
    pub convergence_tol: Real,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 0.1,
            huber_delta: 5.99f64.sqrt(),
            convergence_tol: 1e-6,
        }
    }
}

/// One reprojection measurement in the local bundle adjustment graph.
#[derive(Debug, Clone, Copy)]
pub struct ReprojectionFactor {
    pub keyframe_id: crate::map::KeyframeId,
    pub keypoint_index: usize,
    pub primitive_id: crate::map::PrimitiveId,
    pub measured: Vec2,
    /// Inverse of the octave-dependent variance, `scale_factor^(-2*octave)`.
    pub info_weight: Real,
}

impl ReprojectionFactor {
    pub fn info_weight_for_octave(scale_factor: Real, octave: usize) -> Real {
        scale_factor.powi(-2 * octave as i32)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BaError {
    #[error("need at least {need} matches, got {got}")]
    TooFewMatches { got: usize, need: usize },
    #[error("optimization diverged to a non-finite cost")]
    Diverged,
    #[error("local window around keyframe {anchor} has no observations")]
    EmptyLocalWindow { anchor: crate::map::KeyframeId },
}

/// Huber robust cost of a squared residual: the cost and its derivative
/// w.r.t. the squared residual (the IRLS weight).
pub fn huber(r2: Real, delta: Real) -> (Real, Real) {
    debug_assert!(r2 >= 0.0 && delta > 0.0);
    if r2 <= delta * delta {
        (r2, 1.0)
    } else {
        let r = r2.sqrt();
        (2.0 * delta * r - delta * delta, delta / r)
    }
}

/// Reprojection residual `measured - pi(R p + t)`; `None` when the point is
/// at or behind the camera plane.
pub fn reprojection_residual(
    pose: &Pose,
    point: &Vec3,
    measured: &Vec2,
    k: &Intrinsics,
) -> Option<Vec2> {
    let q = pose.transform(point);
    if q.z <= Z_MIN {
        return None;
    }
    Some(Vec2::new(
        measured.x - (k.fx * q.x / q.z + k.cx),
        measured.y - (k.fy * q.y / q.z + k.cy),
    ))
}

/// Residual plus its Jacobians w.r.t. a left-multiplied pose twist
/// `(omega, v)` and the world point.
#[allow(clippy::type_complexity)]
pub fn reprojection_jacobians(
    pose: &Pose,
    point: &Vec3,
    measured: &Vec2,
    k: &Intrinsics,
) -> Option<(Vec2, Matrix2x6<Real>, Matrix2x3<Real>)> {
    let q = pose.transform(point);
    if q.z <= Z_MIN {
        return None;
    }
    let r = Vec2::new(
        measured.x - (k.fx * q.x / q.z + k.cx),
        measured.y - (k.fy * q.y / q.z + k.cy),
    );
    let j_pi = projection_jacobian(&q, k.fx, k.fy);
    // q(delta) = exp(delta) ∘ pose applied to p: dq/domega = -[q]x, dq/dv = I.
    let mut j_pose = Matrix2x6::zeros();
    let dq_domega = j_pi * skew(&q); // -dpi/dq * (-[q]x) = +j_pi [q]x
    let dq_dv = -j_pi;
    j_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&dq_domega);
    j_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&dq_dv);
    let j_point = -j_pi * pose.rotation_matrix();
    Some((r, j_pose, j_point))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Quat;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn huber_matches_hand_values() {
        let delta = 2.0;
        assert_eq!(huber(0.0, delta), (0.0, 1.0));
        // Both branches agree at the knee.
        let (c, w) = huber(delta * delta, delta);
        assert_relative_eq!(c, delta * delta, epsilon = 1e-12);
        assert_relative_eq!(w, 1.0, epsilon = 1e-12);
        // r2 = 4 delta^2: cost = 2*delta*2*delta - delta^2 = 3 delta^2.
        let (c, w) = huber(4.0 * delta * delta, delta);
        assert_relative_eq!(c, 3.0 * delta * delta, epsilon = 1e-12);
        assert_relative_eq!(w, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn info_weight_matches_octave_variance() {
        let w = ReprojectionFactor::info_weight_for_octave(1.2, 3);
        assert_relative_eq!(w, 1.0 / 1.2f64.powi(6), epsilon = 1e-12);
        assert_eq!(ReprojectionFactor::info_weight_for_octave(1.2, 0), 1.0);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let k = Intrinsics::new(120.0, 110.0, 64.0, 48.0, 128, 96);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let pose = Pose::new(
                Quat::from_scaled_axis(Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )),
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
            );
            let point = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let measured = Vec2::new(rng.random_range(0.0..128.0), rng.random_range(0.0..96.0));
            let q = pose.transform(&point);
            if q.z < 0.2 {
                continue; // keep clear of the camera plane for stable FD
            }
            let (_, j_pose, j_point) =
                reprojection_jacobians(&pose, &point, &measured, &k).unwrap();

            for axis in 0..6 {
                let mut tw = [0.0; 6];
                tw[axis] = h;
                let omega = Vec3::new(tw[0], tw[1], tw[2]);
                let v = Vec3::new(tw[3], tw[4], tw[5]);
                let rp = reprojection_residual(&pose.retract_left(&omega, &v), &point, &measured, &k)
                    .unwrap();
                let rm = reprojection_residual(
                    &pose.retract_left(&-omega, &-v),
                    &point,
                    &measured,
                    &k,
                )
                .unwrap();
                let fd = (rp - rm) / (2.0 * h);
                for row in 0..2 {
                    let a = j_pose[(row, axis)];
                    let denom = a.abs().max(fd[row].abs()).max(1e-6);
                    assert!(
                        (a - fd[row]).abs() / denom < 1e-4,
                        "pose jacobian ({row},{axis}): {a} vs {}",
                        fd[row]
                    );
                }
            }
            for axis in 0..3 {
                let mut dp = Vec3::zeros();
                dp[axis] = h;
                let rp = reprojection_residual(&pose, &(point + dp), &measured, &k).unwrap();
                let rm = reprojection_residual(&pose, &(point - dp), &measured, &k).unwrap();
                let fd = (rp - rm) / (2.0 * h);
                for row in 0..2 {
                    let a = j_point[(row, axis)];
                    let denom = a.abs().max(fd[row].abs()).max(1e-6);
                    assert!(
                        (a - fd[row]).abs() / denom < 1e-4,
                        "point jacobian ({row},{axis}): {a} vs {}",
                        fd[row]
                    );
                }
            }
            checked += 1;
        }
    }
}
