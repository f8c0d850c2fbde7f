//! Trajectory and image-quality metrics.

use hyperslam_core::image::Image;
use hyperslam_core::math::{associate_by_timestamp, umeyama, AlignError, Real, Vec3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error(transparent)]
    Align(#[from] AlignError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    /// Similarity alignment (monocular: scale is arbitrary).
    Sim3,
    /// Rigid alignment with unit scale (metric sensors).
    Se3,
}

/// Absolute trajectory error after least-squares alignment: RMSE and the
/// population standard deviation of the translational residual norms.
/// Trajectories are (timestamp, camera center) pairs associated within
/// 0.02 s.
pub fn compute_ate(
    est: &[(Real, Vec3)],
    gt: &[(Real, Vec3)],
    align: AlignMode,
) -> Result<(Real, Real), MetricError> {
    let pairs = associate_by_timestamp(est, gt, 0.02);
    let sim = umeyama(&pairs, align == AlignMode::Sim3)?;
    let residuals: Vec<Real> = pairs
        .iter()
        .map(|(e, g)| (sim.transform(e) - g).norm())
        .collect();
    let n = residuals.len() as Real;
    let rmse = (residuals.iter().map(|r| r * r).sum::<Real>() / n).sqrt();
    let mean = residuals.iter().sum::<Real>() / n;
    let std = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<Real>() / n).sqrt();
    Ok((rmse, std))
}

/// PSNR in dB over [0, 1] images, capped at 99 dB (the zero-MSE sentinel).
pub fn compute_psnr(a: &Image, b: &Image) -> Result<Real, MetricError> {
    if a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels() {
        return Err(MetricError::DimensionMismatch {
            a: (a.width(), a.height(), a.channels()),
            b: (b.width(), b.height(), b.channels()),
        });
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<Real>()
        / a.data().len() as Real;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use hyperslam_core::math::{Pose, Quat, Sim3};

    fn line_trajectory(n: usize) -> Vec<(Real, Vec3)> {
        (0..n)
            .map(|i| {
                (
                    i as Real / 30.0,
                    Vec3::new(i as Real * 0.1, (i as Real * 0.05).sin(), 0.3),
                )
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let traj = line_trajectory(20);
        let (rmse, std) = compute_ate(&traj, &traj, AlignMode::Se3).unwrap();
        assert_relative_eq!(rmse, 0.0, epsilon = 1e-12);
        assert_relative_eq!(std, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_offset_absorbed_by_alignment() {
        let gt = line_trajectory(20);
        let est: Vec<_> = gt
            .iter()
            .map(|&(t, p)| (t, p + Vec3::new(1.0, 0.0, 0.0)))
            .collect();
        let (rmse, std) = compute_ate(&est, &gt, AlignMode::Se3).unwrap();
        assert!(rmse < 1e-9 && std < 1e-9);
    }

    #[test]
    fn alternating_noise_has_expected_rmse() {
        // +-1 cm alternating along-track on an x-axis line: the mean offset
        // is zero and a rigid alignment cannot absorb the alternation, so
        // every residual is exactly 1 cm.
        let gt: Vec<(Real, Vec3)> = (0..40)
            .map(|i| (i as Real, Vec3::new(i as Real, 0.0, 0.0)))
            .collect();
        let est: Vec<(Real, Vec3)> = gt
            .iter()
            .enumerate()
            .map(|(i, &(t, p))| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                (t, p + Vec3::new(sign * 0.01, 0.0, 0.0))
            })
            .collect();
        let (rmse, std) = compute_ate(&est, &gt, AlignMode::Se3).unwrap();
        assert_relative_eq!(rmse, 0.01, epsilon = 1e-6);
        // All residual norms are equal, so their spread vanishes.
        assert!(std < 1e-6);
    }

    #[test]
    fn ate_invariant_under_common_rigid_transform() {
        let gt = line_trajectory(25);
        let est: Vec<_> = gt
            .iter()
            .map(|&(t, p)| (t, p + Vec3::new(0.01 * (t * 7.0).sin(), 0.0, 0.0)))
            .collect();
        let (rmse0, std0) = compute_ate(&est, &gt, AlignMode::Se3).unwrap();
        let transform = Sim3::from_pose(&Pose::new(
            Quat::from_scaled_axis(Vec3::new(0.4, -0.2, 0.8)),
            Vec3::new(3.0, -1.0, 2.0),
        ));
        let est_t: Vec<_> = est
            .iter()
            .map(|&(t, p)| (t, transform.transform(&p)))
            .collect();
        let gt_t: Vec<_> = gt
            .iter()
            .map(|&(t, p)| (t, transform.transform(&p)))
            .collect();
        let (rmse1, std1) = compute_ate(&est_t, &gt_t, AlignMode::Se3).unwrap();
        assert_relative_eq!(rmse0, rmse1, epsilon = 1e-12);
        assert_relative_eq!(std0, std1, epsilon = 1e-12);
    }

    #[test]
    fn too_few_pairs_and_mono_scale() {
        let gt = line_trajectory(2);
        assert!(compute_ate(&gt, &gt, AlignMode::Se3).is_err());
        // Sim3 alignment absorbs a global scale, Se3 does not.
        let gt = line_trajectory(20);
        let est: Vec<_> = gt.iter().map(|&(t, p)| (t, p * 2.0)).collect();
        let (rmse_sim, _) = compute_ate(&est, &gt, AlignMode::Sim3).unwrap();
        let (rmse_se3, _) = compute_ate(&est, &gt, AlignMode::Se3).unwrap();
        assert!(rmse_sim < 1e-9);
        assert!(rmse_se3 > 0.1);
    }

    #[test]
    fn psnr_hand_values() {
        let a = Image::zeros(10, 10, 3);
        assert_eq!(compute_psnr(&a, &a).unwrap(), 99.0);
        let b = Image::from_fn(10, 10, 3, |_, _, _| 0.1);
        assert_relative_eq!(compute_psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
        let c = Image::from_fn(10, 10, 3, |_, _, _| 1.0);
        assert_relative_eq!(compute_psnr(&a, &c).unwrap(), 0.0, epsilon = 1e-9);
        let d = Image::zeros(10, 9, 3);
        assert!(compute_psnr(&a, &d).is_err());
    }
}
