use nalgebra::Matrix2x3;

use super::sh::sh_eval;
use super::RenderConfig;
use crate::map::{sigmoid, HyperPrimitive};
use crate::math::{quat_to_mat, Intrinsics, Mat2, Mat3, Pose, Quat, Real, Vec2, Vec3, Z_MIN};

/// 3D covariance of a primitive: `R * diag(exp(2 * log_scale)) * Rᵀ`.
pub fn build_cov3d(rotation: &Quat, log_scale: &Vec3) -> Mat3 {
    let r = quat_to_mat(rotation.w, rotation.i, rotation.j, rotation.k);
    let d = log_scale.map(|s| (2.0 * s).exp());
    r * Mat3::from_diagonal(&d) * r.transpose()
}

/// Derivatives of the rotation matrix w.r.t. the quaternion components
/// (w, x, y, z), matching [`quat_to_mat`].
pub fn quat_to_mat_grad(q: &Quat) -> [Mat3; 4] {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    [
        Mat3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0),
        Mat3::new(
            0.0,
            2.0 * y,
            2.0 * z,
            2.0 * y,
            -4.0 * x,
            -2.0 * w,
            2.0 * z,
            2.0 * w,
            -4.0 * x,
        ),
        Mat3::new(
            -4.0 * y,
            2.0 * x,
            2.0 * w,
            2.0 * x,
            0.0,
            2.0 * z,
            -2.0 * w,
            2.0 * z,
            -4.0 * y,
        ),
        Mat3::new(
            -4.0 * z,
            -2.0 * w,
            2.0 * x,
            2.0 * w,
            -4.0 * z,
            2.0 * y,
            2.0 * x,
            2.0 * y,
            0.0,
        ),
    ]
}

/// A primitive projected into one view, with the intermediates the backward
/// pass replays.
#[derive(Debug, Clone)]
pub struct ProjectedGaussian {
    pub mean2d: Vec2,
    pub cov2d: Mat2,
    /// Inverse of `cov2d`.
    pub conic: Mat2,
    pub depth: Real,
    /// SH-evaluated view-dependent color, clamped non-negative.
    pub color: [Real; 3],
    /// Pre-clamp color values; a negative entry gates that channel's SH
    /// gradient to zero.
    pub color_raw: [Real; 3],
    /// Opacity after the sigmoid.
    pub alpha_base: Real,
    /// Index into the primitive list handed to the renderer.
    pub index: usize,
    /// Binning radius in pixels (`cutoff_sigma` standard deviations).
    pub radius: Real,
    /// Camera-frame position.
    pub cam: Vec3,
    /// Unit direction from camera center to the primitive, world frame.
    pub view_dir: Vec3,
}

/// Perspective Jacobian at a camera-frame point.
pub fn projection_jacobian(cam: &Vec3, fx: Real, fy: Real) -> Matrix2x3<Real> {
    let z_inv = 1.0 / cam.z;
    let z_inv2 = z_inv * z_inv;
    Matrix2x3::new(
        fx * z_inv,
        0.0,
        -fx * cam.x * z_inv2,
        0.0,
        fy * z_inv,
        -fy * cam.y * z_inv2,
    )
}

/// Projects one primitive, returning `None` when it is culled (behind the
/// camera or its `cutoff_sigma` ellipse misses the image).
pub fn project_gaussian(
    prim: &HyperPrimitive,
    pose: &Pose,
    k: &Intrinsics,
    cfg: &RenderConfig,
) -> Option<ProjectedGaussian> {
    let cam = pose.transform(&prim.position);
    if cam.z <= cfg.z_near.max(Z_MIN) {
        return None;
    }
    // Outside ~1.3x the view frustum the first-order footprint linearization
    // is meaningless (off-axis Gaussians would smear across the image).
    let lim_x = 1.3 * 0.5 * k.width as Real / k.fx;
    let lim_y = 1.3 * 0.5 * k.height as Real / k.fy;
    if (cam.x / cam.z).abs() > lim_x || (cam.y / cam.z).abs() > lim_y {
        return None;
    }
    let mean2d = Vec2::new(k.fx * cam.x / cam.z + k.cx, k.fy * cam.y / cam.z + k.cy);

    let w = pose.rotation_matrix();
    let cov3d = build_cov3d(&prim.rotation, &prim.log_scale);
    let m = projection_jacobian(&cam, k.fx, k.fy) * w;
    let mut cov2d = m * cov3d * m.transpose();
    cov2d[(0, 0)] += cfg.cov_floor;
    cov2d[(1, 1)] += cfg.cov_floor;

    // Eigenvalues of the symmetric 2x2.
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = cfg.cutoff_sigma * lambda_max.sqrt();

    let (w_img, h_img) = (k.width as Real, k.height as Real);
    if mean2d.x + radius < 0.0
        || mean2d.x - radius > w_img - 1.0
        || mean2d.y + radius < 0.0
        || mean2d.y - radius > h_img - 1.0
    {
        return None;
    }

    if det <= 0.0 {
        return None; // numerically degenerate footprint
    }
    let conic = Mat2::new(
        cov2d[(1, 1)] / det,
        -cov2d[(0, 1)] / det,
        -cov2d[(1, 0)] / det,
        cov2d[(0, 0)] / det,
    );

    let offset = prim.position - pose.center();
    let norm = offset.norm();
    if norm < 1e-12 {
        return None;
    }
    let view_dir = offset / norm;
    let (color, color_raw) = sh_eval(&prim.sh, &view_dir).ok()?;

    Some(ProjectedGaussian {
        mean2d,
        cov2d,
        conic,
        depth: cam.z,
        color,
        color_raw,
        alpha_base: sigmoid(prim.opacity_logit),
        index: 0,
        radius,
        cam,
        view_dir,
    })
}
