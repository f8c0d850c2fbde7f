use hyperslam_core::math::{Pose, Real};
use serde::{Deserialize, Serialize};

/// One camera-to-world trajectory sample, TUM field order.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: Real,
    pub tx: Real,
    pub ty: Real,
    pub tz: Real,
    pub qx: Real,
    pub qy: Real,
    pub qz: Real,
    pub qw: Real,
}

impl TrajectoryEntry {
    /// From a tracking pose (world-to-camera): stores the camera-in-world
    /// transform like the datasets do.
    pub fn from_tracking_pose(timestamp: Real, pose_cw: &Pose) -> Self {
        let wc = pose_cw.inverse();
        Self {
            timestamp,
            tx: wc.translation.x,
            ty: wc.translation.y,
            tz: wc.translation.z,
            qx: wc.rotation.i,
            qy: wc.rotation.j,
            qz: wc.rotation.k,
            qw: wc.rotation.w,
        }
    }
}

/// Run summary serialized to `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    /// Meters; absent when the dataset has no ground truth.
    pub ate_rmse: Option<Real>,
    pub ate_std: Option<Real>,
    /// Means over the evaluation keyframes.
    pub psnr: Real,
    pub ssim: Real,
    /// Not computed (needs a pretrained network).
    pub lpips: Option<Real>,
    pub tracking_fps: Real,
    pub rendering_fps: Real,
    pub model_size_bytes: u64,
    pub n_frames: usize,
    pub n_keyframes: usize,
    pub n_primitives: usize,
    pub tracking_lost: bool,
    pub trajectory: Vec<TrajectoryEntry>,
}

impl RunReport {
    /// Copy with wall-clock-dependent fields zeroed, for reproducibility
    /// comparisons.
    pub fn without_timings(&self) -> RunReport {
        RunReport {
            tracking_fps: 0.0,
            rendering_fps: 0.0,
            ..self.clone()
        }
    }
}
