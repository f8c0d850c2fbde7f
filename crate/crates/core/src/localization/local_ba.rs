use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6x3, Vector3, Vector6};

use super::{huber, reprojection_jacobians, reprojection_residual, BaError, LMConfig};
use crate::map::{HyperMap, KeyframeId, PrimitiveId};
use crate::math::{Intrinsics, Pose, Real, Vec2, Vec3};

const BEHIND_COST: Real = 1e9;
/// Minimum ray parallax (degrees) across a point's observers before its
/// position is optimized. Below this the depth direction is so poorly
/// conditioned that adjustment only amplifies measurement noise (depth-born
/// points would lose their measured depth).
const MIN_POINT_PARALLAX_DEG: Real = 1.0;

#[derive(Debug, Clone)]
pub struct LocalBaSummary {
    pub initial_cost: Real,
    pub final_cost: Real,
    pub iterations: usize,
    pub optimized_keyframes: Vec<KeyframeId>,
    pub fixed_keyframes: Vec<KeyframeId>,
    pub optimized_points: usize,
    pub factors: usize,
}

#[derive(Clone, Copy)]
enum PoseRef {
    Optimized(usize),
    Fixed(usize),
}

/// Points need at least two observing keyframes to be solvable; single
/// observations leave the depth direction unconstrained, so such points
/// enter as fixed structure (their factors still constrain the poses).
#[derive(Clone, Copy)]
enum PointRef {
    Optimized(usize),
    Fixed(usize),
}

struct Factor {
    kf: PoseRef,
    point: PointRef,
    measured: Vec2,
    info: Real,
    intrinsics: usize,
}

struct Problem {
    factors: Vec<Factor>,
    intrinsics: Vec<Intrinsics>,
    fixed_poses: Vec<Pose>,
    fixed_points: Vec<Vec3>,
}

impl Problem {
    fn pose<'a>(&'a self, f: &Factor, opt: &'a [Pose]) -> &'a Pose {
        match f.kf {
            PoseRef::Optimized(i) => &opt[i],
            PoseRef::Fixed(i) => &self.fixed_poses[i],
        }
    }

    fn point<'a>(&'a self, f: &Factor, points: &'a [Vec3]) -> &'a Vec3 {
        match f.point {
            PointRef::Optimized(i) => &points[i],
            PointRef::Fixed(i) => &self.fixed_points[i],
        }
    }

    fn cost(&self, opt_poses: &[Pose], points: &[Vec3], delta: Real) -> Real {
        self.factors
            .iter()
            .map(|f| {
                let pose = self.pose(f, opt_poses);
                match reprojection_residual(
                    pose,
                    self.point(f, points),
                    &f.measured,
                    &self.intrinsics[f.intrinsics],
                ) {
                    Some(r) => huber(f.info * r.norm_squared(), delta).0,
                    None => BEHIND_COST,
                }
            })
            .sum()
    }
}

/// Local bundle adjustment: jointly refines the poses of the anchor
/// keyframe's covisibility window and the positions of the primitives they
/// observe. Keyframes outside the window that see those primitives
/// contribute fixed-pose factors; the map's first keyframe is always fixed
/// (gauge). Point blocks are eliminated with a Schur complement.
pub fn local_ba(
    map: &HyperMap,
    anchor: KeyframeId,
    scale_factor: Real,
    cfg: &LMConfig,
) -> Result<LocalBaSummary, BaError> {
    // Lock order: keyframes before primitives.
    let mut kfs = map.keyframes_mut();
    let mut prims = map.primitives_mut();

    if kfs.get(anchor).is_none() {
        return Err(BaError::EmptyLocalWindow { anchor });
    }

    let mut window: BTreeSet<KeyframeId> = BTreeSet::new();
    window.insert(anchor);
    for (id, _) in kfs.covisible(anchor) {
        window.insert(id);
    }

    let mut point_ids: BTreeSet<PrimitiveId> = BTreeSet::new();
    for &id in &window {
        for pid in kfs.get(id).unwrap().observations.values() {
            if prims.contains(*pid) {
                point_ids.insert(*pid);
            }
        }
    }
    if point_ids.is_empty() {
        return Err(BaError::EmptyLocalWindow { anchor });
    }

    let mut fixed_set: BTreeSet<KeyframeId> = BTreeSet::new();
    for (id, kf) in kfs.iter() {
        if window.contains(&id) {
            continue;
        }
        if kf.observations.values().any(|pid| point_ids.contains(pid)) {
            fixed_set.insert(id);
        }
    }
    // Gauge: the first keyframe of the map never moves.
    if let Some(first) = kfs.first_id() {
        if window.remove(&first) {
            fixed_set.insert(first);
        }
    }

    let optimized_ids: Vec<KeyframeId> = window.iter().copied().collect();
    let fixed_ids: Vec<KeyframeId> = fixed_set.iter().copied().collect();

    // Observer counts over every participating keyframe decide which
    // points are solvable.
    let mut observers: BTreeMap<PrimitiveId, usize> = BTreeMap::new();
    for id in optimized_ids.iter().chain(fixed_ids.iter()) {
        let mut seen: BTreeSet<PrimitiveId> = BTreeSet::new();
        for pid in kfs.get(*id).unwrap().observations.values() {
            if point_ids.contains(pid) && seen.insert(*pid) {
                *observers.entry(*pid).or_insert(0) += 1;
            }
        }
    }
    // Camera centers of every participating keyframe, for parallax checks.
    let centers: Vec<(KeyframeId, Vec3)> = optimized_ids
        .iter()
        .chain(fixed_ids.iter())
        .map(|id| (*id, kfs.get(*id).unwrap().pose.center()))
        .collect();
    let observer_ids = |pid: PrimitiveId| -> Vec<KeyframeId> {
        centers
            .iter()
            .filter(|(id, _)| {
                kfs.get(*id)
                    .map(|kf| kf.observations.values().any(|p| *p == pid))
                    .unwrap_or(false)
            })
            .map(|(id, _)| *id)
            .collect()
    };
    let min_parallax = MIN_POINT_PARALLAX_DEG.to_radians();
    let well_conditioned = |pid: PrimitiveId| -> bool {
        let position = prims.get(pid).unwrap().position;
        let ids = observer_ids(pid);
        let dirs: Vec<Vec3> = ids
            .iter()
            .filter_map(|id| {
                let c = centers.iter().find(|(cid, _)| cid == id)?.1;
                let d = position - c;
                (d.norm() > 1e-9).then(|| d.normalize())
            })
            .collect();
        for i in 0..dirs.len() {
            for j in i + 1..dirs.len() {
                if dirs[i].dot(&dirs[j]).clamp(-1.0, 1.0).acos() >= min_parallax {
                    return true;
                }
            }
        }
        false
    };
    let point_list: Vec<PrimitiveId> = point_ids
        .iter()
        .filter(|id| observers.get(id).copied().unwrap_or(0) >= 2 && well_conditioned(**id))
        .copied()
        .collect();
    let mut point_slot: BTreeMap<PrimitiveId, PointRef> = point_list
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, PointRef::Optimized(i)))
        .collect();
    let mut fixed_points: Vec<Vec3> = Vec::new();
    for id in &point_ids {
        if !point_slot.contains_key(id) {
            point_slot.insert(*id, PointRef::Fixed(fixed_points.len()));
            fixed_points.push(prims.get(*id).unwrap().position);
        }
    }

    let mut problem = Problem {
        factors: Vec::new(),
        intrinsics: Vec::new(),
        fixed_poses: Vec::new(),
        fixed_points,
    };
    let mut opt_poses: Vec<Pose> = Vec::new();

    let add_factors = |kf_id: KeyframeId, kf_ref: PoseRef, problem: &mut Problem| {
        let kf = kfs.get(kf_id).unwrap();
        let intrinsics_idx = problem.intrinsics.len();
        problem.intrinsics.push(kf.intrinsics);
        for (&kp_idx, pid) in &kf.observations {
            let Some(&slot) = point_slot.get(pid) else {
                continue;
            };
            let kp = &kf.keypoints[kp_idx];
            problem.factors.push(Factor {
                kf: kf_ref,
                point: slot,
                measured: Vec2::new(kp.u, kp.v),
                info: scale_factor.powi(-2 * kp.octave as i32),
                intrinsics: intrinsics_idx,
            });
        }
    };

    for (i, &id) in optimized_ids.iter().enumerate() {
        opt_poses.push(kfs.get(id).unwrap().pose);
        add_factors(id, PoseRef::Optimized(i), &mut problem);
    }
    for &id in &fixed_ids {
        let idx = problem.fixed_poses.len();
        problem.fixed_poses.push(kfs.get(id).unwrap().pose);
        add_factors(id, PoseRef::Fixed(idx), &mut problem);
    }
    if problem.factors.is_empty() {
        return Err(BaError::EmptyLocalWindow { anchor });
    }

    let mut points: Vec<Vec3> = point_list
        .iter()
        .map(|id| prims.get(*id).unwrap().position)
        .collect();

    let initial_cost = problem.cost(&opt_poses, &points, cfg.huber_delta);
    if !initial_cost.is_finite() {
        return Err(BaError::Diverged);
    }
    let mut cost = initial_cost;
    let mut lambda = cfg.initial_damping;
    let mut iterations = 0;

    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let m = opt_poses.len();
        let n = points.len();
        let mut h_pp = vec![Matrix6::<Real>::zeros(); m];
        let mut b_p = vec![Vector6::<Real>::zeros(); m];
        let mut h_ll = vec![Matrix3::<Real>::zeros(); n];
        let mut b_l = vec![Vector3::<Real>::zeros(); n];
        let mut w_blocks: BTreeMap<(usize, usize), Matrix6x3<Real>> = BTreeMap::new();
        let mut point_poses: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];

        for f in &problem.factors {
            let pose = problem.pose(f, &opt_poses);
            let Some((r, j_pose, j_point)) = reprojection_jacobians(
                pose,
                problem.point(f, &points),
                &f.measured,
                &problem.intrinsics[f.intrinsics],
            ) else {
                continue;
            };
            let (_, hw) = huber(f.info * r.norm_squared(), cfg.huber_delta);
            let w = f.info * hw;
            if let PointRef::Optimized(slot) = f.point {
                h_ll[slot] += j_point.transpose() * j_point * w;
                b_l[slot] += j_point.transpose() * r * w;
            }
            if let PoseRef::Optimized(i) = f.kf {
                h_pp[i] += j_pose.transpose() * j_pose * w;
                b_p[i] += j_pose.transpose() * r * w;
                if let PointRef::Optimized(slot) = f.point {
                    *w_blocks
                        .entry((i, slot))
                        .or_insert_with(Matrix6x3::zeros) += j_pose.transpose() * j_point * w;
                    point_poses[slot].insert(i);
                }
            }
        }

        let mut accepted = false;
        for _ in 0..8 {
            // Damped point blocks and their inverses.
            let h_ll_inv: Vec<Option<Matrix3<Real>>> = h_ll
                .iter()
                .map(|h| {
                    let mut d = *h;
                    for i in 0..3 {
                        d[(i, i)] += lambda * h[(i, i)].max(1e-12);
                    }
                    d.try_inverse()
                })
                .collect();

            // Schur complement on the pose blocks.
            let delta_p = if m > 0 {
                let mut s = DMatrix::<Real>::zeros(6 * m, 6 * m);
                let mut rhs = DVector::<Real>::zeros(6 * m);
                for i in 0..m {
                    let mut block = h_pp[i];
                    for d in 0..6 {
                        block[(d, d)] += lambda * h_pp[i][(d, d)].max(1e-12);
                    }
                    s.view_mut((6 * i, 6 * i), (6, 6)).copy_from(&block);
                    rhs.rows_mut(6 * i, 6).copy_from(&(-b_p[i]));
                }
                for (l, poses) in point_poses.iter().enumerate() {
                    let Some(inv) = h_ll_inv[l] else { continue };
                    for &p1 in poses {
                        let w1 = &w_blocks[&(p1, l)];
                        let w1_inv = w1 * inv;
                        let mut r = rhs.rows_mut(6 * p1, 6);
                        r += w1_inv * b_l[l];
                        for &p2 in poses {
                            let w2 = &w_blocks[&(p2, l)];
                            let mut blk = s.view_mut((6 * p1, 6 * p2), (6, 6));
                            blk -= w1_inv * w2.transpose();
                        }
                    }
                }
                match s.cholesky() {
                    Some(chol) => Some(chol.solve(&rhs)),
                    None => None,
                }
            } else {
                Some(DVector::zeros(0))
            };
            let Some(delta_p) = delta_p else {
                lambda *= cfg.damping_up;
                continue;
            };

            // Back-substitute the point updates.
            let mut new_points = points.clone();
            for l in 0..n {
                let Some(inv) = h_ll_inv[l] else { continue };
                let mut rhs_l = -b_l[l];
                for &p in &point_poses[l] {
                    let w_pl = &w_blocks[&(p, l)];
                    let dp = Vector6::<Real>::from_iterator(delta_p.rows(6 * p, 6).iter().copied());
                    rhs_l -= w_pl.transpose() * dp;
                }
                new_points[l] += inv * rhs_l;
            }
            let new_poses: Vec<Pose> = opt_poses
                .iter()
                .enumerate()
                .map(|(i, pose)| {
                    let d = delta_p.rows(6 * i, 6);
                    pose.retract_left(
                        &Vec3::new(d[0], d[1], d[2]),
                        &Vec3::new(d[3], d[4], d[5]),
                    )
                })
                .collect();

            let new_cost = problem.cost(&new_poses, &new_points, cfg.huber_delta);
            if !new_cost.is_finite() {
                return Err(BaError::Diverged);
            }
            if new_cost < cost {
                debug_assert!(new_cost <= cost);
                let improvement = (cost - new_cost) / cost.max(1e-300);
                opt_poses = new_poses;
                points = new_points;
                cost = new_cost;
                lambda = (lambda * cfg.damping_down).max(1e-12);
                accepted = true;
                if improvement < cfg.convergence_tol {
                    iterations += 1; // converged on this accepted step
                }
                break;
            }
            lambda *= cfg.damping_up;
        }
        if !accepted || cost == 0.0 {
            break;
        }
    }

    for (i, &id) in optimized_ids.iter().enumerate() {
        kfs.get_mut(id).unwrap().pose = opt_poses[i];
    }
    for (l, &pid) in point_list.iter().enumerate() {
        prims.get_mut(pid).unwrap().position = points[l];
    }

    Ok(LocalBaSummary {
        initial_cost,
        final_cost: cost,
        iterations,
        optimized_keyframes: optimized_ids,
        fixed_keyframes: fixed_ids,
        optimized_points: point_list.len(),
        factors: problem.factors.len(),
    })
}
