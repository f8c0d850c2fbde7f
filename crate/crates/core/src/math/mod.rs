//! Rigid-transform and pinhole-camera math shared by every subsystem.

mod align;
mod camera;
mod pose;

pub use align::{associate_by_timestamp, umeyama, umeyama_align, AlignError};
pub use camera::{
    backproject, project, triangulate, CameraError, Intrinsics, TriangulationConfig, Z_MIN,
};
pub use pose::{se3_exp, Pose, Sim3};

/// Scalar type used throughout the engine.
pub type Real = f64;
pub type Vec2 = nalgebra::Vector2<Real>;
pub type Vec3 = nalgebra::Vector3<Real>;
pub type Mat2 = nalgebra::Matrix2<Real>;
pub type Mat3 = nalgebra::Matrix3<Real>;
/// Unit quaternion, (w, x, y, z) wherever components are spelled out.
pub type Quat = nalgebra::UnitQuaternion<Real>;

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
///
/// Spelled out rather than delegated to nalgebra so the splatting backward
/// pass can use derivative formulas that match this exact expression.
pub fn quat_to_mat(w: Real, x: Real, y: Real, z: Real) -> Mat3 {
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn skew_matches_cross_product() {
        let a = Vec3::new(0.3, -1.2, 2.5);
        let b = Vec3::new(-0.7, 0.4, 1.1);
        assert_relative_eq!(skew(&a) * b, a.cross(&b), epsilon = 1e-12);
    }

    #[test]
    fn quat_to_mat_matches_nalgebra() {
        let q = Quat::from_euler_angles(0.3, -0.8, 1.4);
        let m = quat_to_mat(q.w, q.i, q.j, q.k);
        assert_relative_eq!(m, q.to_rotation_matrix().into_inner(), epsilon = 1e-12);
        assert_relative_eq!(m.transpose() * m, Mat3::identity(), epsilon = 1e-9);
    }
}
