use nalgebra::{Matrix6, Vector6};

use super::{huber, reprojection_jacobians, reprojection_residual, BaError, LMConfig};
use crate::math::{Intrinsics, Pose, Real, Vec2, Vec3};

/// A 2D-3D match for motion-only bundle adjustment; the 3D point stays
/// fixed.
#[derive(Debug, Clone, Copy)]
pub struct PoseObservation {
    pub measured: Vec2,
    pub point: Vec3,
    pub info_weight: Real,
}

const MIN_MATCHES: usize = 10;
/// Cost charged to an observation that projects behind the camera, so such
/// configurations always look worse than any in-front residual.
const BEHIND_COST: Real = 1e9;

fn total_cost(obs: &[PoseObservation], pose: &Pose, k: &Intrinsics, delta: Real) -> Real {
    obs.iter()
        .map(|o| match reprojection_residual(pose, &o.point, &o.measured, k) {
            Some(r) => huber(o.info_weight * r.norm_squared(), delta).0,
            None => BEHIND_COST,
        })
        .sum()
}

/// Re-classification rounds: optimize, gate matches by the chi-square
/// threshold, optimize again on the survivors. Huber alone only
/// downweights gross outliers; excluding them removes their residual bias.
const OUTLIER_ROUNDS: usize = 4;

/// Optimizes the 6-DoF pose minimizing the robust reprojection cost with
/// Levenberg-Marquardt on the SE(3) manifold (left-multiplied increments).
/// Returns the pose and a per-match inlier mask (final robust weight 1).
pub fn motion_only_ba(
    obs: &[PoseObservation],
    k: &Intrinsics,
    init: &Pose,
    cfg: &LMConfig,
) -> Result<(Pose, Vec<bool>), BaError> {
    if obs.len() < MIN_MATCHES {
        return Err(BaError::TooFewMatches {
            got: obs.len(),
            need: MIN_MATCHES,
        });
    }

    let mut pose = *init;
    let mut active: Vec<bool> = vec![true; obs.len()];
    for round in 0..OUTLIER_ROUNDS {
        let subset: Vec<PoseObservation> = obs
            .iter()
            .zip(active.iter())
            .filter(|(_, a)| **a)
            .map(|(o, _)| *o)
            .collect();
        if subset.len() < MIN_MATCHES {
            break;
        }
        pose = lm_loop(&subset, k, &pose, cfg)?;
        let mask = inlier_mask(obs, &pose, k, cfg.huber_delta);
        if mask == active && round > 0 {
            break;
        }
        active = mask;
    }
    Ok((pose, inlier_mask(obs, &pose, k, cfg.huber_delta)))
}

fn lm_loop(
    obs: &[PoseObservation],
    k: &Intrinsics,
    init: &Pose,
    cfg: &LMConfig,
) -> Result<Pose, BaError> {
    let mut pose = *init;
    let mut lambda = cfg.initial_damping;
    let mut cost = total_cost(obs, &pose, k, cfg.huber_delta);
    if !cost.is_finite() {
        return Err(BaError::Diverged);
    }

    for _ in 0..cfg.max_iterations {
        let mut h = Matrix6::<Real>::zeros();
        let mut g = Vector6::<Real>::zeros();
        for o in obs {
            let Some((r, j_pose, _)) = reprojection_jacobians(&pose, &o.point, &o.measured, k)
            else {
                continue;
            };
            let (_, huber_w) = huber(o.info_weight * r.norm_squared(), cfg.huber_delta);
            let w = o.info_weight * huber_w;
            h += j_pose.transpose() * j_pose * w;
            g += j_pose.transpose() * r * w;
        }

        let mut accepted = false;
        for _ in 0..10 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= cfg.damping_up;
                continue;
            };
            let step = -chol.solve(&g);
            let candidate = pose.retract_left(
                &Vec3::new(step[0], step[1], step[2]),
                &Vec3::new(step[3], step[4], step[5]),
            );
            let new_cost = total_cost(obs, &candidate, k, cfg.huber_delta);
            if !new_cost.is_finite() {
                return Err(BaError::Diverged);
            }
            if new_cost < cost {
                // Accepted LM steps never increase the robust cost.
                debug_assert!(new_cost <= cost);
                let improvement = (cost - new_cost) / cost.max(1e-300);
                pose = candidate;
                cost = new_cost;
                lambda = (lambda * cfg.damping_down).max(1e-12);
                accepted = true;
                if improvement < cfg.convergence_tol {
                    return Ok(pose);
                }
                break;
            }
            lambda *= cfg.damping_up;
        }
        if !accepted {
            break;
        }
    }
    Ok(pose)
}

fn inlier_mask(obs: &[PoseObservation], pose: &Pose, k: &Intrinsics, delta: Real) -> Vec<bool> {
    obs.iter()
        .map(|o| {
            reprojection_residual(pose, &o.point, &o.measured, k)
                .map(|r| o.info_weight * r.norm_squared() <= delta * delta)
                .unwrap_or(false)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{project, Quat};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_intrinsics() -> Intrinsics {
        Intrinsics::new(300.0, 300.0, 160.0, 120.0, 320, 240)
    }

    fn synthetic_scene(
        n: usize,
        pose: &Pose,
        k: &Intrinsics,
        rng: &mut ChaCha8Rng,
    ) -> Vec<PoseObservation> {
        let mut obs = Vec::new();
        while obs.len() < n {
            let p = Vec3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(2.0..6.0),
            );
            if let Ok((u, v, _)) = project(&p, pose, k) {
                if u >= 0.0 && u < 320.0 && v >= 0.0 && v < 240.0 {
                    obs.push(PoseObservation {
                        measured: Vec2::new(u, v),
                        point: p,
                        info_weight: 1.0,
                    });
                }
            }
        }
        obs
    }

    fn ground_truth_pose() -> Pose {
        Pose::new(
            Quat::from_scaled_axis(Vec3::new(0.1, -0.05, 0.02)),
            Vec3::new(0.2, -0.1, 0.3),
        )
    }

    fn pose_error(a: &Pose, b: &Pose) -> (Real, Real) {
        let dr = (a.rotation.inverse() * b.rotation).angle();
        let dt = (a.translation - b.translation).norm();
        (dr, dt)
    }

    #[test]
    fn exact_initialization_is_fixed_point() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = ground_truth_pose();
        let obs = synthetic_scene(100, &gt, &k, &mut rng);
        let cost = total_cost(&obs, &gt, &k, LMConfig::default().huber_delta);
        assert!(cost < 1e-18, "cost at optimum = {cost}");
        let (pose, inliers) = motion_only_ba(&obs, &k, &gt, &LMConfig::default()).unwrap();
        let (dr, dt) = pose_error(&pose, &gt);
        assert!(dr < 1e-10 && dt < 1e-10);
        assert!(inliers.iter().all(|b| *b));
    }

    #[test]
    fn recovers_perturbed_pose_noiseless() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = ground_truth_pose();
        let obs = synthetic_scene(100, &gt, &k, &mut rng);
        // 1 degree rotation, 5 cm translation perturbation.
        let init = Pose::new(
            Quat::from_scaled_axis(Vec3::new(1.0f64.to_radians(), 0.0, 0.0)) * gt.rotation,
            gt.translation + Vec3::new(0.03, -0.03, 0.02),
        );
        let cfg = LMConfig {
            max_iterations: 20,
            convergence_tol: 1e-12,
            ..LMConfig::default()
        };
        let (pose, _) = motion_only_ba(&obs, &k, &init, &cfg).unwrap();
        let (dr, dt) = pose_error(&pose, &gt);
        assert!(dr < 1e-4, "rotation error {dr}");
        assert!(dt < 1e-4, "translation error {dt}");
    }

    #[test]
    fn robust_to_outliers() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = ground_truth_pose();
        let mut obs = synthetic_scene(100, &gt, &k, &mut rng);
        // Replace 30% with uniform-random pixel measurements.
        let n_outliers = 30;
        for o in obs.iter_mut().take(n_outliers) {
            o.measured = Vec2::new(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
        }
        let init = Pose::new(
            Quat::from_scaled_axis(Vec3::new(0.0, 1.0f64.to_radians(), 0.0)) * gt.rotation,
            gt.translation + Vec3::new(-0.02, 0.04, 0.01),
        );
        let cfg = LMConfig {
            max_iterations: 30,
            convergence_tol: 1e-14,
            ..LMConfig::default()
        };
        let (pose, inliers) = motion_only_ba(&obs, &k, &init, &cfg).unwrap();
        let (dr, dt) = pose_error(&pose, &gt);
        assert!(dr < 1e-3, "rotation error {dr}");
        assert!(dt < 1e-3, "translation error {dt}");
        // Outliers flagged, inliers kept.
        for (i, flag) in inliers.iter().enumerate() {
            if i < n_outliers {
                assert!(!flag, "outlier {i} not flagged");
            } else {
                assert!(flag, "inlier {i} flagged as outlier");
            }
        }
    }

    #[test]
    fn too_few_matches_rejected() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = synthetic_scene(9, &Pose::identity(), &k, &mut rng);
        assert_eq!(
            motion_only_ba(&obs, &k, &Pose::identity(), &LMConfig::default()).unwrap_err(),
            BaError::TooFewMatches { got: 9, need: 10 }
        );
    }

    #[test]
    fn cost_never_increases() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = ground_truth_pose();
        let mut obs = synthetic_scene(80, &gt, &k, &mut rng);
        for o in obs.iter_mut() {
            o.measured += Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        let init = Pose::new(
            Quat::from_scaled_axis(Vec3::new(0.02, 0.02, -0.01)) * gt.rotation,
            gt.translation + Vec3::new(0.05, 0.0, -0.05),
        );
        let initial = total_cost(&obs, &init, &k, LMConfig::default().huber_delta);
        let (pose, _) = motion_only_ba(&obs, &k, &init, &LMConfig::default()).unwrap();
        let final_cost = total_cost(&obs, &pose, &k, LMConfig::default().huber_delta);
        assert!(final_cost <= initial);
    }
}
