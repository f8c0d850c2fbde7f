use crate::features::match_descriptors;
use crate::map::{logit, HyperMap, HyperPrimitive, Keyframe, KeyframeId, PrimitiveId};
use crate::math::{backproject, triangulate, Real, TriangulationConfig, Vec3};
use crate::splat::SH_C0;

/// Keyframe selection thresholds.
#[derive(Debug, Clone, Copy)]
pub struct KeyframePolicy {
    /// Insert when tracked inliers fall below this count.
    pub min_inliers: usize,
    /// Insert when tracked inliers fall below this fraction of the
    /// reference keyframe's count.
    pub ref_ratio: Real,
    /// Insert after this many frames without a keyframe.
    pub max_frames: usize,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            min_inliers: 40,
            ref_ratio: 0.9,
            max_frames: 30,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FrameStats {
    pub inliers: usize,
    pub reference_inliers: usize,
    pub frames_since_keyframe: usize,
}

/// True when the tracked frame should become a keyframe.
pub fn select_keyframe(stats: &FrameStats, policy: &KeyframePolicy) -> bool {
    stats.inliers < policy.min_inliers
        || (stats.inliers as Real) < policy.ref_ratio * stats.reference_inliers as Real
        || stats.frames_since_keyframe >= policy.max_frames
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensorMode {
    Mono,
    Rgbd,
}

#[derive(Debug, Clone, Copy)]
pub struct MapPointConfig {
    pub max_hamming: u32,
    pub ratio: Real,
    pub triangulation: TriangulationConfig,
}

impl Default for MapPointConfig {
    fn default() -> Self {
        Self {
            max_hamming: 50,
            ratio: 0.75,
            triangulation: TriangulationConfig::default(),
        }
    }
}

/// Initializes a primitive at `position` from keypoint `kp_idx` of `kf`:
/// isotropic log-scale `ln(depth / fx)` (screen-space-constant footprint),
/// opacity 0.1, degree-0 SH encoding the pixel color, the keypoint's
/// descriptor attached.
pub fn primitive_from_keypoint(
    kf: &Keyframe,
    kp_idx: usize,
    position: Vec3,
    depth_in_cam: Real,
) -> HyperPrimitive {
    let kp = &kf.keypoints[kp_idx];
    let color = kf.color_at(kp.u, kp.v);
    let mut prim = HyperPrimitive::new(position);
    prim.log_scale = Vec3::from_element((depth_in_cam / kf.intrinsics.fx).max(1e-7).ln());
    prim.opacity_logit = logit(0.1);
    for ch in 0..3 {
        prim.sh[ch][0] = (color[ch] - 0.5) / SH_C0;
    }
    prim.descriptor = Some(kf.descriptors[kp_idx]);
    prim
}

/// Creates map points for the unmatched keypoints of a freshly inserted
/// keyframe: backprojected through the depth image in RGB-D mode,
/// triangulated against covisible (and the previous) keyframes in monocular
/// mode. Registers the observations and refreshes covisibility.
pub fn create_map_points(
    map: &HyperMap,
    new_kf: KeyframeId,
    mode: SensorMode,
    cfg: &MapPointConfig,
) -> Vec<PrimitiveId> {
    let mut kfs = map.keyframes_mut();
    let mut prims = map.primitives_mut();
    let mut created = Vec::new();

    if kfs.get(new_kf).is_none() {
        return created;
    };

    match mode {
        SensorMode::Rgbd => {
            let kf = kfs.get_mut(new_kf).unwrap();
            let unmatched: Vec<usize> = (0..kf.keypoints.len())
                .filter(|i| !kf.observations.contains_key(i))
                .collect();
            for kp_idx in unmatched {
                let Some(depth) = kf.depth_at_keypoint(kp_idx) else {
                    continue;
                };
                let kp = &kf.keypoints[kp_idx];
                let Ok(position) = backproject(kp.u, kp.v, depth, &kf.pose, &kf.intrinsics) else {
                    continue;
                };
                let prim = primitive_from_keypoint(kf, kp_idx, position, depth);
                let id = prims.insert(prim);
                kf.observations.insert(kp_idx, id);
                created.push(id);
            }
            kfs.recompute_covisibility(new_kf);
        }
        SensorMode::Mono => {
            // Candidate partners: covisible keyframes plus the most recent
            // previous keyframe (covisibility may not exist yet).
            let mut candidates: Vec<KeyframeId> =
                kfs.covisible(new_kf).into_iter().map(|(id, _)| id).collect();
            if let Some(prev) = kfs.iter().map(|(id, _)| id).filter(|id| *id < new_kf).max() {
                if !candidates.contains(&prev) {
                    candidates.push(prev);
                }
            }

            let mut touched = vec![new_kf];
            for cand in candidates {
                let (new_idx, new_desc) = {
                    let kf = kfs.get(new_kf).unwrap();
                    let idx: Vec<usize> = (0..kf.keypoints.len())
                        .filter(|i| !kf.observations.contains_key(i))
                        .collect();
                    let desc: Vec<_> = idx.iter().map(|i| kf.descriptors[*i]).collect();
                    (idx, desc)
                };
                if new_idx.is_empty() {
                    break;
                }
                let (cand_idx, cand_desc) = {
                    let kf = kfs.get(cand).unwrap();
                    let idx: Vec<usize> = (0..kf.keypoints.len())
                        .filter(|i| !kf.observations.contains_key(i))
                        .collect();
                    let desc: Vec<_> = idx.iter().map(|i| kf.descriptors[*i]).collect();
                    (idx, desc)
                };
                let matches = match_descriptors(&new_desc, &cand_desc, cfg.max_hamming, cfg.ratio);
                let mut any = false;
                for (ia, ib) in matches {
                    let (kp_new_idx, kp_cand_idx) = (new_idx[ia], cand_idx[ib]);
                    let (position, depth) = {
                        let kf_new = kfs.get(new_kf).unwrap();
                        let kf_cand = kfs.get(cand).unwrap();
                        let kp_new = &kf_new.keypoints[kp_new_idx];
                        let kp_cand = &kf_cand.keypoints[kp_cand_idx];
                        let Ok(p) = triangulate(
                            (kp_new.u, kp_new.v),
                            &kf_new.pose,
                            (kp_cand.u, kp_cand.v),
                            &kf_cand.pose,
                            &kf_new.intrinsics,
                            &cfg.triangulation,
                        ) else {
                            continue;
                        };
                        (p, kf_new.pose.transform(&p).z)
                    };
                    let prim = {
                        let kf_new = kfs.get(new_kf).unwrap();
                        primitive_from_keypoint(kf_new, kp_new_idx, position, depth)
                    };
                    let id = prims.insert(prim);
                    kfs.get_mut(new_kf)
                        .unwrap()
                        .observations
                        .insert(kp_new_idx, id);
                    kfs.get_mut(cand)
                        .unwrap()
                        .observations
                        .insert(kp_cand_idx, id);
                    created.push(id);
                    any = true;
                }
                if any {
                    touched.push(cand);
                }
            }
            for id in touched {
                kfs.recompute_covisibility(id);
            }
        }
    }
    created
}
