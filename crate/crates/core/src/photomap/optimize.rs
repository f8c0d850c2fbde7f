use super::loss::photometric_loss;
use super::pyramid::build_gaussian_pyramid;
use super::{gp_level, PhotomapError, TrainSchedule};
use crate::map::{HyperMap, KeyframeId, PrimitiveId};
use crate::math::{Quat, Real};
use crate::splat::{render, render_backward, RenderConfig};

#[derive(Debug, Clone, Copy)]
pub struct IterationOutcome {
    pub loss: Real,
    pub level: usize,
    pub visible: usize,
}

/// One photometric descent step for one keyframe: render the map at the
/// scheduled pyramid level, differentiate the loss and apply per-class SGD
/// updates. Snapshots primitives under a read lock and applies updates
/// under a short write lock, tolerating primitives added or removed in
/// between.
pub fn optimize_iteration(
    map: &HyperMap,
    kf_id: KeyframeId,
    iteration: usize,
    schedule: &TrainSchedule,
    scene_extent: Real,
    render_cfg: &RenderConfig,
) -> Result<IterationOutcome, PhotomapError> {
    let level = gp_level(iteration, schedule);

    // Keyframe data plus a cached pyramid (built on first use).
    let (pose, intrinsics, gt_level) = {
        let mut kfs = map.keyframes_mut();
        let kf = kfs
            .get_mut(kf_id)
            .ok_or(PhotomapError::MissingKeyframe(kf_id))?;
        if kf
            .pyramid_cache
            .as_ref()
            .map_or(true, |p| p.top_level() < schedule.top_level)
        {
            kf.pyramid_cache = Some(build_gaussian_pyramid(&kf.image, schedule.top_level)?);
        }
        let pyr = kf.pyramid_cache.as_ref().unwrap();
        (kf.pose, kf.intrinsics, pyr.level(level).clone())
    };

    let snapshot: Vec<(PrimitiveId, crate::map::HyperPrimitive)> = {
        let prims = map.primitives();
        prims.iter().map(|(id, p)| (id, p.clone())).collect()
    };
    let prim_list: Vec<crate::map::HyperPrimitive> =
        snapshot.iter().map(|(_, p)| p.clone()).collect();

    let k_level = intrinsics.at_pyramid_level(level);
    let out = render(&prim_list, &pose, &k_level, render_cfg);
    let (loss, dl_dimage) = photometric_loss(&out.image, &gt_level, schedule.lambda)?;
    let grads = render_backward(&out, &dl_dimage, &prim_list, &pose)?;

    // Projected radii for the oversize-prune statistic, level-0 pixels.
    let mut radius = vec![0.0; prim_list.len()];
    for pg in &out.projected {
        radius[pg.index] = pg.radius * (1u64 << level) as Real;
    }
    // Screen gradients are expressed in level-0 pixel units before they
    // feed the densification statistics.
    let grad_unit = 1.0 / (1u64 << level) as Real;

    let visible = out.visible_count;
    drop(out);

    {
        let mut prims = map.primitives_mut();
        for (i, (id, _)) in snapshot.iter().enumerate() {
            let Some(p) = prims.get_mut(*id) else {
                continue; // removed while rendering
            };
            p.position -= schedule.lr_position * scene_extent * grads.position[i];
            let q = nalgebra::Quaternion::new(
                p.rotation.w - schedule.lr_rotation * grads.rotation[i][0],
                p.rotation.i - schedule.lr_rotation * grads.rotation[i][1],
                p.rotation.j - schedule.lr_rotation * grads.rotation[i][2],
                p.rotation.k - schedule.lr_rotation * grads.rotation[i][3],
            );
            p.rotation = Quat::from_quaternion(q);
            p.log_scale -= schedule.lr_scale * grads.log_scale[i];
            p.clamp_scale();
            p.opacity_logit -= schedule.lr_opacity * grads.opacity_logit[i];
            for ch in 0..3 {
                p.sh[ch][0] -= schedule.lr_sh_dc * grads.sh[i][ch][0];
                for c in 1..crate::map::SH_COEFFS {
                    p.sh[ch][c] -= schedule.lr_sh_rest * grads.sh[i][ch][c];
                }
            }
            if grads.visible[i] {
                p.stats.grad_sum += grads.screen_grad[i] * grad_unit;
                p.stats.count += 1;
                p.stats.max_screen_radius = p.stats.max_screen_radius.max(radius[i]);
            }
        }
    }

    Ok(IterationOutcome {
        loss,
        level,
        visible,
    })
}
