use thiserror::Error;

use super::{Pose, Real, Vec3};

/// Minimum camera-frame depth accepted by projection.
pub const Z_MIN: Real = 1e-6;

/// Ideal pinhole intrinsics. Images are assumed rectified; the origin is the
/// top-left pixel corner, u points right, v points down, z points forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: Real,
    pub fy: Real,
    pub cx: Real,
    pub cy: Real,
    pub width: usize,
    pub height: usize,
    /// Raw-to-meters divisor for integer depth images (RGB-D input).
    pub depth_scale: Option<Real>,
}

impl Intrinsics {
    pub fn new(fx: Real, fy: Real, cx: Real, cy: Real, width: usize, height: usize) -> Self {
        assert!(fx > 0.0 && fy > 0.0);
        assert!(cx > 0.0 && (cx as usize) < width);
        assert!(cy > 0.0 && (cy as usize) < height);
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale: None,
        }
    }

    /// Intrinsics for rendering at pyramid level `level`: focal lengths and
    /// principal point divided by `2^level`, image dimensions ceil-halved
    /// `level` times.
    pub fn at_pyramid_level(&self, level: usize) -> Intrinsics {
        let f = (1u64 << level) as Real;
        let mut w = self.width;
        let mut h = self.height;
        for _ in 0..level {
            w = w.div_ceil(2);
            h = h.div_ceil(2);
        }
        Intrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: w,
            height: h,
            depth_scale: self.depth_scale,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("point projects behind the camera (z = {z})")]
    PointBehindCamera { z: Real },
    #[error("depth must be positive and finite (got {depth})")]
    InvalidDepth { depth: Real },
    #[error("ray parallax {angle_deg} deg is below the minimum {min_deg} deg")]
    DegenerateParallax { angle_deg: Real, min_deg: Real },
    #[error("triangulated point lies behind a camera")]
    CheiralityViolation,
    #[error("reprojection error {error_px} px exceeds the limit {max_px} px")]
    ReprojectionTooLarge { error_px: Real, max_px: Real },
}

/// Projects a world point into a camera: `(u, v, depth)` in pixels / meters.
pub fn project(p: &Vec3, pose: &Pose, k: &Intrinsics) -> Result<(Real, Real, Real), CameraError> {
    let cam = pose.transform(p);
    if cam.z <= Z_MIN {
        return Err(CameraError::PointBehindCamera { z: cam.z });
    }
    Ok((
        k.fx * cam.x / cam.z + k.cx,
        k.fy * cam.y / cam.z + k.cy,
        cam.z,
    ))
}

/// Lifts a pixel with known depth back to a world point; exact inverse of
/// [`project`] on valid inputs.
pub fn backproject(
    u: Real,
    v: Real,
    depth: Real,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<Vec3, CameraError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(CameraError::InvalidDepth { depth });
    }
    let cam = Vec3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
    Ok(pose.inverse().transform(&cam))
}

#[derive(Debug, Clone, Copy)]
pub struct TriangulationConfig {
    /// Minimum ray parallax in degrees.
    pub min_parallax_deg: Real,
    /// Maximum reprojection error (pixels) into either view.
    pub max_reproj_px: Real,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            min_parallax_deg: 1.0,
            max_reproj_px: 2.0,
        }
    }
}

/// Triangulates a point from two pixel observations as the midpoint of the
/// closest approach of the two back-projected rays.
pub fn triangulate(
    obs_a: (Real, Real),
    pose_a: &Pose,
    obs_b: (Real, Real),
    pose_b: &Pose,
    k: &Intrinsics,
    cfg: &TriangulationConfig,
) -> Result<Vec3, CameraError> {
    let origin_a = pose_a.center();
    let origin_b = pose_b.center();
    let dir = |obs: (Real, Real), pose: &Pose| -> Vec3 {
        let ray_cam = Vec3::new((obs.0 - k.cx) / k.fx, (obs.1 - k.cy) / k.fy, 1.0);
        (pose.rotation.inverse() * ray_cam).normalize()
    };
    let da = dir(obs_a, pose_a);
    let db = dir(obs_b, pose_b);

    let cos_angle = da.dot(&db).clamp(-1.0, 1.0);
    let angle_deg = cos_angle.acos().to_degrees();
    if angle_deg < cfg.min_parallax_deg {
        return Err(CameraError::DegenerateParallax {
            angle_deg,
            min_deg: cfg.min_parallax_deg,
        });
    }

    // Closest points on the two rays: solve the 2x2 normal equations for the
    // ray parameters s, t.
    let w = origin_a - origin_b;
    let a = da.dot(&da);
    let b = da.dot(&db);
    let c = db.dot(&db);
    let d = da.dot(&w);
    let e = db.dot(&w);
    let denom = a * c - b * b;
    if denom.abs() < 1e-15 {
        return Err(CameraError::DegenerateParallax {
            angle_deg,
            min_deg: cfg.min_parallax_deg,
        });
    }
    let s = (b * e - c * d) / denom;
    let t = (a * e - b * d) / denom;
    let point = 0.5 * ((origin_a + da * s) + (origin_b + db * t));

    for pose in [pose_a, pose_b] {
        if pose.transform(&point).z <= Z_MIN {
            return Err(CameraError::CheiralityViolation);
        }
    }
    for (obs, pose) in [(obs_a, pose_a), (obs_b, pose_b)] {
        let (u, v, _) = project(&point, pose, k)?;
        let err = ((u - obs.0).powi(2) + (v - obs.1).powi(2)).sqrt();
        if err > cfg.max_reproj_px {
            return Err(CameraError::ReprojectionTooLarge {
                error_px: err,
                max_px: cfg.max_reproj_px,
            });
        }
    }
    Ok(point)
}
