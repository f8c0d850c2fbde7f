use hyperslam::dataset::{load_color, load_depth, load_tum_sequence};
use hyperslam_core::features::extract_features;
use hyperslam_core::localization::{motion_only_ba, LMConfig, PoseObservation};
use hyperslam_core::math::{backproject, project, Pose, Vec2};
use std::path::Path;

fn main() {
    let dir = Path::new("/tmp/ds_small");
    let frames = load_tum_sequence(dir).unwrap();
    let cfg = hyperslam::config::SystemConfig::from_file(&dir.join("config.ini")).unwrap();
    let k = cfg.intrinsics();

    let fa = &frames[0];
    let fb = &frames[1];
    let ia = load_color(&fa.color).unwrap();
    let ib = load_color(&fb.color).unwrap();
    let da = load_depth(fa.depth.as_ref().unwrap(), cfg.depth_scale).unwrap();
    let (kps_a, _) = extract_features(&ia.to_gray(), 1000, 8, 1.2).unwrap();
    let (kps_b, _) = extract_features(&ib.to_gray(), 1000, 8, 1.2).unwrap();
    let gt_a = fa.gt_pose.unwrap().inverse(); // world->cam
    let gt_b = fb.gt_pose.unwrap().inverse();
    // Relative pose: cam_a frame is the SLAM world.
    let rel_gt = gt_b.compose(&gt_a.inverse()); // maps cam_a coords -> cam_b

    // Map points in cam_a world from measured keypoints + sensor depth.
    let mut points = Vec::new();
    for kp in &kps_a {
        let x = (kp.u.round() as usize).min(239);
        let y = (kp.v.round() as usize).min(179);
        let d = da.get(x, y, 0);
        if d <= 0.0 { continue; }
        points.push((kp.u, kp.v, backproject(kp.u, kp.v, d, &Pose::identity(), &k).unwrap()));
    }
    println!("map points: {}", points.len());

    // Oracle A: perfect measurements (project through gt rel), perfect association.
    let obs_oracle: Vec<PoseObservation> = points.iter().filter_map(|&(_, _, p)| {
        let (u, v, _) = project(&p, &rel_gt, &k).ok()?;
        if !(0.0..240.0).contains(&u) || !(0.0..180.0).contains(&v) { return None; }
        Some(PoseObservation { measured: Vec2::new(u, v), point: p, info_weight: 1.0 })
    }).collect();
    let lm = LMConfig { max_iterations: 30, convergence_tol: 1e-14, ..LMConfig::default() };
    let (pose, _) = motion_only_ba(&obs_oracle, &k, &Pose::identity(), &lm).unwrap();
    let err = (pose.translation - rel_gt.translation).norm();
    println!("oracle measurements: n={} terr={:.5} rerr={:.5}", obs_oracle.len(), err,
             (pose.rotation.inverse() * rel_gt.rotation).angle());

    // Oracle B: real frame-b keypoints as measurements, GT association by projection <2px.
    let mut obs_real: Vec<PoseObservation> = Vec::new();
    for &(_, _, p) in &points {
        let Ok((u, v, _)) = project(&p, &rel_gt, &k) else { continue };
        let mut best = f64::MAX; let mut bj = usize::MAX;
        for (j, kb) in kps_b.iter().enumerate() {
            let d2 = (kb.u - u).powi(2) + (kb.v - v).powi(2);
            if d2 < best { best = d2; bj = j; }
        }
        if best.sqrt() < 2.0 {
            obs_real.push(PoseObservation { measured: Vec2::new(kps_b[bj].u, kps_b[bj].v), point: p, info_weight: 1.0 });
        }
    }
    let (pose, _) = motion_only_ba(&obs_real, &k, &Pose::identity(), &lm).unwrap();
    let err = (pose.translation - rel_gt.translation).norm();
    println!("real measurements:   n={} terr={:.5} rerr={:.5}", obs_real.len(), err,
             (pose.rotation.inverse() * rel_gt.rotation).angle());

    // Pipeline-like association: descriptor matching within a radius gate
    // around the predicted (identity) projections.
    let (kps_a2, descs_a) = extract_features(&ia.to_gray(), 1000, 8, 1.2).unwrap();
    let (_, descs_b) = extract_features(&ib.to_gray(), 1000, 8, 1.2).unwrap();
    assert_eq!(kps_a2.len(), kps_a.len());
    let mut cand = Vec::new(); // (pos, desc, octave, gt_proj)
    for (i, kp) in kps_a.iter().enumerate() {
        let x = (kp.u.round() as usize).min(239);
        let y = (kp.v.round() as usize).min(179);
        let d = da.get(x, y, 0);
        if d <= 0.0 { continue; }
        let p = backproject(kp.u, kp.v, d, &Pose::identity(), &k).unwrap();
        let proj = project(&p, &rel_gt, &k).ok();
        cand.push((p, descs_a[i], kp.octave, proj));
    }
    for radius in [20.0f64, 7.0] {
        let mut obs = Vec::new();
        let mut wrong = 0;
        let mut used = vec![false; cand.len()];
        let mut proposals: Vec<(u32, usize, usize)> = Vec::new();
        for (j, kb) in kps_b.iter().enumerate() {
            let mut best = u32::MAX; let mut second = u32::MAX; let mut bi = usize::MAX;
            for (i, (p, d, oct, _)) in cand.iter().enumerate() {
                if kb.octave.abs_diff(*oct) > 1 { continue; }
                let Ok((u, v, _)) = project(p, &Pose::identity(), &k) else { continue };
                let d2 = (u - kb.u).powi(2) + (v - kb.v).powi(2);
                if d2 > radius * radius { continue; }
                let dist = descs_b[j].hamming(d);
                if dist < best { second = best; best = dist; bi = i; }
                else if dist < second { second = dist; }
            }
            if bi == usize::MAX || best > 50 { continue; }
            if second != u32::MAX && best as f64 >= 0.75 * second as f64 { continue; }
            proposals.push((best, j, bi));
        }
        proposals.sort_unstable();
        let mut ok_flags: Vec<bool> = Vec::new();
        for (_, j, i) in proposals {
            if used[i] { continue; }
            used[i] = true;
            let kb = &kps_b[j];
            let mut good = false;
            if let Some((u, v, _)) = cand[i].3 {
                good = ((kb.u - u).powi(2) + (kb.v - v).powi(2)).sqrt() <= 2.5;
            }
            if !good { wrong += 1; }
            ok_flags.push(good);
            obs.push(PoseObservation { measured: Vec2::new(kb.u, kb.v), point: cand[i].0, info_weight: 1.0 });
        }
        let (pose, mask) = motion_only_ba(&obs, &k, &Pose::identity(), &lm).unwrap();
        let err = (pose.translation - rel_gt.translation).norm();
        println!("pipeline-assoc r={radius}: n={} wrong={} inliers={} terr={:.5}",
            obs.len(), wrong, mask.iter().filter(|m| **m).count(), err);
        let near = obs.iter().zip(ok_flags.iter()).filter(|(o, g)| **g && o.point.z < 3.4).count();
        let far = obs.iter().zip(ok_flags.iter()).filter(|(o, g)| **g && o.point.z >= 3.4).count();
        println!("  correct matches: {near} dots, {far} backdrop");
        let dots_obs: Vec<_> = obs.iter().zip(ok_flags.iter()).filter(|(o, g)| **g && o.point.z < 3.4).map(|(o, _)| *o).collect();
        if dots_obs.len() >= 10 {
            let (pose, _) = motion_only_ba(&dots_obs, &k, &Pose::identity(), &lm).unwrap();
            println!("  dots-only subset:    n={} terr={:.5}", dots_obs.len(),
                (pose.translation - rel_gt.translation).norm());
        }
        let far_obs: Vec<_> = obs.iter().zip(ok_flags.iter()).filter(|(o, g)| **g && o.point.z >= 3.4).map(|(o, _)| *o).collect();
        if far_obs.len() >= 10 {
            let (pose, _) = motion_only_ba(&far_obs, &k, &Pose::identity(), &lm).unwrap();
            println!("  backdrop-only:       n={} terr={:.5}", far_obs.len(),
                (pose.translation - rel_gt.translation).norm());
        }
        let good_obs: Vec<_> = obs.iter().zip(ok_flags.iter()).filter(|(_, g)| **g).map(|(o, _)| *o).collect();
        let (pose, _) = motion_only_ba(&good_obs, &k, &Pose::identity(), &lm).unwrap();
        println!("  correct-assoc subset: n={} terr={:.5}", good_obs.len(),
            (pose.translation - rel_gt.translation).norm());
        let bad_obs: Vec<_> = obs.iter().zip(ok_flags.iter()).filter(|(_, g)| !**g).map(|(o, _)| *o).collect();
        if bad_obs.len() >= 10 {
            let (pose, _) = motion_only_ba(&bad_obs, &k, &Pose::identity(), &lm).unwrap();
            println!("  wrong-assoc subset:  n={} terr={:.5}", bad_obs.len(),
                (pose.translation - rel_gt.translation).norm());
        }
    }

    // Stats: residual of real keypoints vs projected GT position.
    let mut res: Vec<f64> = Vec::new();
    for o in &obs_real {
        let (u, v, _) = project(&o.point, &rel_gt, &k).unwrap();
        res.push(((o.measured.x - u).powi(2) + (o.measured.y - v).powi(2)).sqrt());
    }
    res.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("keypoint-vs-GT-projection residual: p50={:.3} p90={:.3}px", res[res.len()/2], res[9*res.len()/10]);
}
