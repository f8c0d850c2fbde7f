use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::TrainSchedule;
use crate::map::{HyperMap, HyperPrimitive, KeyframeId, PrimitiveId};
use crate::math::{backproject, Real, Vec3};
use crate::splat::build_cov3d;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Position sample from a primitive's own Gaussian.
fn sample_own_gaussian(p: &HyperPrimitive, rng: &mut impl Rng) -> Vec3 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = Vec3::new(
        normal.sample(rng),
        normal.sample(rng),
        normal.sample(rng),
    );
    // cov = R S^2 R^T, so R * S * n has the right distribution.
    let r = p.rotation.to_rotation_matrix().into_inner();
    let s = p.scale();
    p.position + r * Vec3::new(s.x * n.x, s.y * n.y, s.z * n.z)
}

/// Gradient-driven clone/split plus opacity and footprint pruning.
///
/// High-gradient primitives are cloned (small ones, shifted by a sample from
/// their own Gaussian) or split into two children at `scale / 1.6` (ones
/// larger than 1% of the scene extent). Primitives with near-zero opacity or
/// screen footprints beyond `max_screen_ratio` of the image dimension are
/// removed, along with any keyframe observations that referenced them.
/// Densification statistics reset afterwards.
pub fn densify_and_prune(
    map: &HyperMap,
    schedule: &TrainSchedule,
    scene_extent: Real,
    max_image_dim: usize,
    rng: &mut impl Rng,
) -> DensifyReport {
    // Lock order: keyframes before primitives (observation cleanup).
    let mut kfs = map.keyframes_mut();
    let mut prims = map.primitives_mut();
    let mut report = DensifyReport::default();

    let ids = prims.ids();
    let mut removed: Vec<PrimitiveId> = Vec::new();
    let mut spawned: Vec<HyperPrimitive> = Vec::new();

    for id in ids {
        let p = prims.get(id).unwrap().clone();
        let radius_limit = schedule.max_screen_ratio * max_image_dim as Real;
        if p.opacity() < schedule.opacity_prune_threshold
            || p.stats.max_screen_radius > radius_limit
        {
            prims.remove(id);
            removed.push(id);
            report.pruned += 1;
            continue;
        }
        if p.stats.count == 0 || p.stats.mean_grad() < schedule.densify_grad_threshold {
            prims.get_mut(id).unwrap().stats.reset();
            continue;
        }
        if p.scale().max() > 0.01 * scene_extent {
            // Split: two children sampled from the parent, scale / 1.6.
            for _ in 0..2 {
                let mut child = p.clone();
                child.position = sample_own_gaussian(&p, rng);
                child.log_scale = p.log_scale.map(|s| s - 1.6f64.ln());
                child.descriptor = None;
                child.stats.reset();
                spawned.push(child);
            }
            prims.remove(id);
            removed.push(id);
            report.split += 1;
        } else {
            // Clone: copy shifted by a sample from its own Gaussian.
            let mut clone = p.clone();
            clone.position = sample_own_gaussian(&p, rng);
            clone.descriptor = None;
            clone.stats.reset();
            spawned.push(clone);
            prims.get_mut(id).unwrap().stats.reset();
            report.cloned += 1;
        }
    }

    for prim in spawned {
        prims.insert(prim);
    }

    if !removed.is_empty() {
        let dangling: std::collections::BTreeSet<PrimitiveId> = removed.into_iter().collect();
        let kf_ids = kfs.ids();
        let mut touched = Vec::new();
        for kf_id in kf_ids {
            let kf = kfs.get_mut(kf_id).unwrap();
            let before = kf.observations.len();
            kf.observations.retain(|_, pid| !dangling.contains(pid));
            if kf.observations.len() != before {
                touched.push(kf_id);
            }
        }
        for kf_id in touched {
            kfs.recompute_covisibility(kf_id);
        }
    }

    report
}

#[derive(Debug, Clone, Copy)]
pub struct GeometryDensifyConfig {
    /// Neighbors used for monocular depth interpolation.
    pub knn: usize,
    /// Pixel radius within which an active keypoint must exist.
    pub radius_px: Real,
}

impl Default for GeometryDensifyConfig {
    fn default() -> Self {
        Self {
            knn: 4,
            radius_px: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthSource {
    /// Read depth from the keyframe's depth image.
    Rgbd,
    /// Inverse-distance interpolation from active keypoints' depths.
    Mono,
}

/// Creates temporary primitives at the keyframe's inactive keypoints (those
/// without a map observation). RGB-D mode backprojects the measured depth;
/// monocular mode interpolates depth from the nearest active keypoints.
/// Temporary primitives carry no descriptor and never join tracking.
pub fn geometry_densify(
    map: &HyperMap,
    kf_id: KeyframeId,
    mode: DepthSource,
    cfg: &GeometryDensifyConfig,
) -> Vec<PrimitiveId> {
    let kfs = map.keyframes();
    let mut prims = map.primitives_mut();
    let mut created = Vec::new();
    let Some(kf) = kfs.get(kf_id) else {
        return created;
    };

    let inactive: Vec<usize> = (0..kf.keypoints.len())
        .filter(|i| !kf.observations.contains_key(i))
        .collect();
    if inactive.is_empty() {
        return created;
    }

    // Depths of active keypoints in the camera frame (monocular mode).
    let active: Vec<(Real, Real, Real)> = match mode {
        DepthSource::Mono => kf
            .observations
            .iter()
            .filter_map(|(kp_idx, pid)| {
                let p = prims.get(*pid)?;
                let depth = kf.pose.transform(&p.position).z;
                if depth <= 0.0 {
                    return None;
                }
                let kp = &kf.keypoints[*kp_idx];
                Some((kp.u, kp.v, depth))
            })
            .collect(),
        DepthSource::Rgbd => Vec::new(),
    };

    for kp_idx in inactive {
        let kp = &kf.keypoints[kp_idx];
        let depth = match mode {
            DepthSource::Rgbd => match kf.depth_at_keypoint(kp_idx) {
                Some(d) => d,
                None => continue,
            },
            DepthSource::Mono => {
                let mut neighbors: Vec<(Real, Real)> = active
                    .iter()
                    .filter_map(|&(u, v, d)| {
                        let dist = ((u - kp.u).powi(2) + (v - kp.v).powi(2)).sqrt();
                        (dist <= cfg.radius_px).then_some((dist, d))
                    })
                    .collect();
                if neighbors.is_empty() {
                    continue;
                }
                neighbors.sort_by(|a, b| a.partial_cmp(b).unwrap());
                neighbors.truncate(cfg.knn);
                if neighbors[0].0 == 0.0 {
                    neighbors[0].1
                } else {
                    let mut wd = 0.0;
                    let mut wsum = 0.0;
                    for (dist, d) in neighbors {
                        let w = 1.0 / dist;
                        wd += w * d;
                        wsum += w;
                    }
                    wd / wsum
                }
            }
        };
        let Ok(position) = backproject(kp.u, kp.v, depth, &kf.pose, &kf.intrinsics) else {
            continue;
        };
        let mut prim =
            crate::localization::primitive_from_keypoint(kf, kp_idx, position, depth);
        prim.descriptor = None;
        prim.temporary = true;
        created.push(prims.insert(prim));
    }
    created
}

// Re-exported for densify sampling checks in tests.
#[allow(dead_code)]
fn cov3d_of(p: &HyperPrimitive) -> crate::math::Mat3 {
    build_cov3d(&p.rotation, &p.log_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Descriptor, Keypoint};
    use crate::image::Image;
    use crate::map::{logit, Keyframe};
    use crate::math::{Intrinsics, Pose};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn test_map() -> HyperMap {
        HyperMap::new(15)
    }

    fn keyframe_with_keypoints(kps: &[(Real, Real)], depth: Option<Image>) -> Keyframe {
        Keyframe {
            id: 0,
            timestamp: 0.0,
            pose: Pose::identity(),
            intrinsics: Intrinsics::new(100.0, 100.0, 64.0, 48.0, 128, 96),
            image: Image::from_fn(128, 96, 3, |_, _, _| 0.6),
            depth,
            keypoints: kps
                .iter()
                .map(|&(u, v)| Keypoint {
                    u,
                    v,
                    octave: 0,
                    response: 1.0,
                    angle: 0.0,
                })
                .collect(),
            descriptors: vec![Descriptor::zero(); kps.len()],
            observations: BTreeMap::new(),
            pyramid_cache: None,
        }
    }

    #[test]
    fn quiet_map_is_untouched() {
        let map = test_map();
        let ids: Vec<_> = {
            let mut prims = map.primitives_mut();
            (0..5)
                .map(|i| prims.insert(HyperPrimitive::new(Vec3::new(i as Real, 0.0, 2.0))))
                .collect()
        };
        let before: Vec<HyperPrimitive> = {
            let prims = map.primitives();
            ids.iter().map(|id| prims.get(*id).unwrap().clone()).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = densify_and_prune(&map, &TrainSchedule::default(), 2.0, 128, &mut rng);
        assert_eq!(report, DensifyReport::default());
        let prims = map.primitives();
        assert_eq!(prims.len(), 5);
        for (id, b) in ids.iter().zip(before.iter()) {
            assert_eq!(prims.get(*id).unwrap(), b);
        }
    }

    #[test]
    fn high_gradient_small_primitive_is_cloned() {
        let map = test_map();
        let id = {
            let mut prims = map.primitives_mut();
            let mut p = HyperPrimitive::new(Vec3::new(0.0, 0.0, 2.0));
            p.log_scale = Vec3::from_element((0.005f64).ln()); // small vs 1% of extent
            p.stats.grad_sum = 1.0;
            p.stats.count = 1;
            prims.insert(p)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let report = densify_and_prune(&map, &TrainSchedule::default(), 2.0, 128, &mut rng);
        assert_eq!(
            report,
            DensifyReport {
                cloned: 1,
                split: 0,
                pruned: 0
            }
        );
        let prims = map.primitives();
        assert_eq!(prims.len(), 2);
        // Original untouched except the stats reset.
        assert_eq!(prims.get(id).unwrap().stats.count, 0);
    }

    #[test]
    fn high_gradient_large_primitive_is_split() {
        let map = test_map();
        {
            let mut prims = map.primitives_mut();
            let mut p = HyperPrimitive::new(Vec3::new(0.0, 0.0, 2.0));
            p.log_scale = Vec3::from_element((0.5f64).ln()); // 25% of extent
            p.stats.grad_sum = 1.0;
            p.stats.count = 1;
            prims.insert(p);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let report = densify_and_prune(&map, &TrainSchedule::default(), 2.0, 128, &mut rng);
        assert_eq!(report.split, 1);
        let prims = map.primitives();
        assert_eq!(prims.len(), 2);
        for (_, p) in prims.iter() {
            assert!((p.scale().x - 0.5 / 1.6).abs() < 1e-12);
        }
    }

    #[test]
    fn transparent_primitive_is_pruned_and_observations_cleaned() {
        let map = test_map();
        let id = {
            let mut prims = map.primitives_mut();
            let mut p = HyperPrimitive::new(Vec3::new(0.0, 0.0, 2.0));
            p.opacity_logit = logit(0.001);
            prims.insert(p)
        };
        {
            let mut kfs = map.keyframes_mut();
            let mut kf = keyframe_with_keypoints(&[(10.0, 10.0)], None);
            kf.observations.insert(0, id);
            kfs.insert(kf);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let report = densify_and_prune(&map, &TrainSchedule::default(), 2.0, 128, &mut rng);
        assert_eq!(report.pruned, 1);
        assert!(map.primitives().is_empty());
        let kfs = map.keyframes();
        let (_, kf) = kfs.iter().next().unwrap();
        assert!(kf.observations.is_empty());
    }

    #[test]
    fn all_active_keypoints_yield_no_temporaries() {
        let map = test_map();
        let pid = {
            let mut prims = map.primitives_mut();
            prims.insert(HyperPrimitive::new(Vec3::new(0.0, 0.0, 2.0)))
        };
        let kf_id = {
            let mut kfs = map.keyframes_mut();
            let mut kf = keyframe_with_keypoints(&[(64.0, 48.0)], None);
            kf.observations.insert(0, pid);
            kfs.insert(kf)
        };
        let created = geometry_densify(
            &map,
            kf_id,
            DepthSource::Mono,
            &GeometryDensifyConfig::default(),
        );
        assert!(created.is_empty());
    }

    #[test]
    fn rgbd_inactive_keypoints_backproject_through_depth() {
        let map = test_map();
        let depth = Image::from_fn(128, 96, 1, |x, _, _| if x >= 60 { 2.5 } else { 0.0 });
        let kf_id = {
            let mut kfs = map.keyframes_mut();
            // Three inactive keypoints: two with valid depth, one at zero.
            let kf = keyframe_with_keypoints(&[(64.0, 48.0), (80.0, 20.0), (10.0, 10.0)], Some(depth));
            kfs.insert(kf)
        };
        let created = geometry_densify(
            &map,
            kf_id,
            DepthSource::Rgbd,
            &GeometryDensifyConfig::default(),
        );
        assert_eq!(created.len(), 2);
        let prims = map.primitives();
        let p = prims.get(created[0]).unwrap();
        assert!(p.temporary);
        assert!(p.descriptor.is_none());
        // backproject((64,48), 2.5) with centered intrinsics is (0, 0, 2.5).
        assert!((p.position - Vec3::new(0.0, 0.0, 2.5)).norm() < 1e-9);
    }

    #[test]
    fn mono_depth_interpolates_inverse_distance() {
        let map = test_map();
        let (p1, p2) = {
            let mut prims = map.primitives_mut();
            // Depths 1 m and 3 m on the optical axis direction.
            let a = prims.insert(HyperPrimitive::new(Vec3::new(-0.2, 0.0, 1.0)));
            let b = prims.insert(HyperPrimitive::new(Vec3::new(0.2, 0.0, 3.0)));
            (a, b)
        };
        let kf_id = {
            let mut kfs = map.keyframes_mut();
            // Inactive keypoint equidistant from the two active ones.
            let mut kf =
                keyframe_with_keypoints(&[(44.0, 48.0), (84.0, 48.0), (64.0, 48.0)], None);
            kf.observations.insert(0, p1);
            kf.observations.insert(1, p2);
            kfs.insert(kf)
        };
        let created = geometry_densify(
            &map,
            kf_id,
            DepthSource::Mono,
            &GeometryDensifyConfig::default(),
        );
        assert_eq!(created.len(), 1);
        let prims = map.primitives();
        let p = prims.get(created[0]).unwrap();
        assert!(p.temporary);
        assert!((p.position.z - 2.0).abs() < 1e-9, "depth {}", p.position.z);
    }

    #[test]
    fn mono_skips_isolated_keypoints() {
        let map = test_map();
        let pid = {
            let mut prims = map.primitives_mut();
            prims.insert(HyperPrimitive::new(Vec3::new(0.0, 0.0, 2.0)))
        };
        let kf_id = {
            let mut kfs = map.keyframes_mut();
            let mut kf = keyframe_with_keypoints(&[(5.0, 5.0), (120.0, 90.0)], None);
            kf.observations.insert(0, pid);
            kfs.insert(kf)
        };
        let created = geometry_densify(
            &map,
            kf_id,
            DepthSource::Mono,
            &GeometryDensifyConfig {
                knn: 4,
                radius_px: 50.0,
            },
        );
        assert!(created.is_empty());
    }

    use crate::math::Vec3;
}
