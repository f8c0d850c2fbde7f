//! Runtime orchestration: tracking, keyframing, sparse and photometric
//! mapping, loop closure and evaluation.
//!
//! `threads = 1` runs a fixed round-robin (track frame, M optimizer
//! iterations, loop check at keyframes) and is the bitwise-reproducible
//! reference semantics. More threads mirror the four components on workers;
//! {local BA, loop correction, photometric iteration} stay pairwise
//! exclusive on the primitives region through one operation mutex.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::Instant;

use hyperslam_core::features::{extract_features, match_descriptors, Descriptor, Keypoint};
use hyperslam_core::image::Image;
use hyperslam_core::localization::{
    create_map_points, initialize_two_view, local_ba, motion_only_ba, primitive_from_keypoint,
    select_keyframe, FrameStats, PoseObservation, SensorMode,
};
use hyperslam_core::loop_closure::{apply_correction, detect_loop};
use hyperslam_core::map::{HyperMap, HyperPrimitive, Keyframe, KeyframeId, PrimitiveId};
use hyperslam_core::math::{Intrinsics, Pose, Real, Vec2, Vec3};
use hyperslam_core::photomap::{
    densify_and_prune, geometry_densify, optimize_iteration, ssim, DepthSource, PhotomapError,
};
use hyperslam_core::splat::render;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::SystemConfig;
use crate::dataset::{load_color, load_depth, DatasetError, SequenceFrame};
use crate::metrics::{compute_ate, AlignMode};
use crate::report::{RunReport, TrajectoryEntry};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Photomap(#[from] PhotomapError),
    #[error("sequence is empty")]
    EmptySequence,
    #[error("monocular initialization never succeeded")]
    InitializationFailed,
    #[error("mode rgbd requires depth images")]
    MissingDepth,
}

/// A frame after decoding and feature extraction.
struct ProcessedFrame {
    timestamp: Real,
    color: Image,
    depth: Option<Image>,
    keypoints: Vec<Keypoint>,
    descriptors: Vec<Descriptor>,
}

/// Per-keyframe photometric training counters shared by the deterministic
/// loop and the photomap worker.
#[derive(Default)]
struct TrainState {
    kf_iters: BTreeMap<KeyframeId, usize>,
    total: usize,
}

fn scene_extent(map: &HyperMap) -> Real {
    let prims = map.primitives();
    if prims.is_empty() {
        return 1.0;
    }
    let mut lo = Vec3::from_element(Real::INFINITY);
    let mut hi = Vec3::from_element(Real::NEG_INFINITY);
    for (_, p) in prims.iter() {
        lo = lo.inf(&p.position);
        hi = hi.sup(&p.position);
    }
    ((hi - lo).norm() * 0.5).max(0.1)
}

/// One photometric step: alternate newest / uniform-random-past keyframe,
/// then densify on the configured interval.
fn photomap_step(
    map: &HyperMap,
    config: &SystemConfig,
    state: &mut TrainState,
    rng: &mut ChaCha8Rng,
) -> Result<(), PhotomapError> {
    let kf_ids = map.keyframes().ids();
    if kf_ids.is_empty() {
        return Ok(());
    }
    let pick = if state.total % 2 == 0 {
        *kf_ids.last().unwrap()
    } else {
        kf_ids[rng.random_range(0..kf_ids.len())]
    };
    let iter = *state.kf_iters.get(&pick).unwrap_or(&0);
    let extent = scene_extent(map);
    match optimize_iteration(
        map,
        pick,
        iter,
        &config.train_schedule(),
        extent,
        &config.render_config(),
    ) {
        Ok(_) => {}
        Err(PhotomapError::MissingKeyframe(_)) => return Ok(()),
        Err(e) => return Err(e),
    }
    state.kf_iters.insert(pick, iter + 1);
    state.total += 1;
    if state.total % config.densify_interval == 0 {
        let extent = scene_extent(map);
        densify_and_prune(
            map,
            &config.train_schedule(),
            extent,
            config.width.max(config.height),
            rng,
        );
    }
    Ok(())
}

struct Session<'m, 'c> {
    map: &'m HyperMap,
    config: &'c SystemConfig,
    mode: SensorMode,
    k: Intrinsics,
    rng: ChaCha8Rng,
    trajectory: Vec<(Real, Pose)>,
    last_pose: Pose,
    velocity: Pose,
    ref_kf: Option<KeyframeId>,
    frames_since_kf: usize,
    weak_frames: usize,
    tracking_lost: bool,
    mono_pending: Option<ProcessedFrame>,
    mono_pending_age: usize,
    track_seconds: Real,
    frames_processed: usize,
    gt_first: Option<Pose>,
    /// Last frame's successful associations: fresh descriptors for the
    /// motion-model matching stage.
    last_matches: Vec<(PrimitiveId, Descriptor, usize)>,
}

impl<'m, 'c> Session<'m, 'c> {
    fn new(map: &'m HyperMap, config: &'c SystemConfig, mode: SensorMode) -> Self {
        Self {
            map,
            config,
            mode,
            k: config.intrinsics(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            trajectory: Vec::new(),
            last_pose: Pose::identity(),
            velocity: Pose::identity(),
            ref_kf: None,
            frames_since_kf: 0,
            weak_frames: 0,
            tracking_lost: false,
            mono_pending: None,
            mono_pending_age: 0,
            track_seconds: 0.0,
            frames_processed: 0,
            gt_first: None,
            last_matches: Vec::new(),
        }
    }

    fn process(&self, frame: &SequenceFrame) -> Result<ProcessedFrame, PipelineError> {
        let color = load_color(&frame.color)?;
        let depth = match (self.mode, &frame.depth) {
            (SensorMode::Rgbd, Some(path)) => Some(load_depth(path, self.config.depth_scale)?),
            (SensorMode::Rgbd, None) => return Err(PipelineError::MissingDepth),
            (SensorMode::Mono, _) => None,
        };
        let gray = color.to_gray();
        let (keypoints, descriptors) = extract_features(
            &gray,
            self.config.n_features,
            self.config.n_octaves,
            self.config.scale_factor,
        )
        .unwrap_or_default();
        Ok(ProcessedFrame {
            timestamp: frame.timestamp,
            color,
            depth,
            keypoints,
            descriptors,
        })
    }

    fn make_keyframe(
        &self,
        pf: &ProcessedFrame,
        pose: Pose,
        observations: BTreeMap<usize, PrimitiveId>,
    ) -> Keyframe {
        Keyframe {
            id: 0,
            timestamp: pf.timestamp,
            pose,
            intrinsics: self.k,
            image: pf.color.clone(),
            depth: pf.depth.clone(),
            keypoints: pf.keypoints.clone(),
            descriptors: pf.descriptors.clone(),
            observations,
            pyramid_cache: None,
        }
    }

    /// Local-map 2D-3D tracking candidates: primitives observed by the
    /// reference keyframe and its covisibility neighbors, each tagged with
    /// the detection octave of an observing keypoint.
    fn tracking_candidates(&self) -> TrackingCandidates {
        let mut out = TrackingCandidates::default();
        let Some(ref_kf) = self.ref_kf else {
            return out;
        };
        let kfs = self.map.keyframes();
        let prims = self.map.primitives();
        let mut window = vec![ref_kf];
        window.extend(kfs.covisible(ref_kf).into_iter().map(|(id, _)| id));
        let mut seen = std::collections::BTreeSet::new();
        // Last frame's associations first: their descriptors are one frame
        // old, where keyframe-stored ones age with viewpoint change.
        for (pid, desc, octave) in &self.last_matches {
            let Some(p) = prims.get(*pid) else { continue };
            if !seen.insert(*pid) {
                continue;
            }
            out.ids.push(*pid);
            out.descriptors.push(*desc);
            out.positions.push(p.position);
            out.octaves.push(*octave);
        }
        for kf_id in window {
            let Some(kf) = kfs.get(kf_id) else { continue };
            for (kp_idx, pid) in &kf.observations {
                if !seen.insert(*pid) {
                    continue;
                }
                let Some(p) = prims.get(*pid) else { continue };
                let Some(d) = p.descriptor else { continue };
                out.ids.push(*pid);
                out.descriptors.push(d);
                out.positions.push(p.position);
                out.octaves.push(kf.keypoints[*kp_idx].octave);
            }
        }
        out
    }

    /// Motion-only tracking: returns (pose, inliers, keyframe observations).
    fn track(&mut self, pf: &ProcessedFrame) -> (Pose, usize, BTreeMap<usize, PrimitiveId>) {
        let predict = self.velocity.compose(&self.last_pose);
        let candidates = self.tracking_candidates();
        let matches = gated_match(
            &pf.keypoints,
            &pf.descriptors,
            &candidates,
            &predict,
            &self.k,
            TRACK_SEARCH_RADIUS,
            self.config.match_max_hamming,
            self.config.match_ratio,
        );
        if matches.len() < 10 {
            return (predict, 0, BTreeMap::new());
        }
        let obs: Vec<PoseObservation> = matches
            .iter()
            .map(|&(kp_idx, cand_idx)| {
                let kp = &pf.keypoints[kp_idx];
                PoseObservation {
                    measured: Vec2::new(kp.u, kp.v),
                    point: candidates.positions[cand_idx],
                    info_weight: self.config.scale_factor.powi(-2 * kp.octave as i32),
                }
            })
            .collect();
        let Ok((coarse, _)) = motion_only_ba(&obs, &self.k, &predict, &self.config.lm_config())
        else {
            return (predict, 0, BTreeMap::new());
        };

        // Re-associate tightly at the refined pose and solve again.
        let matches = gated_match(
            &pf.keypoints,
            &pf.descriptors,
            &candidates,
            &coarse,
            &self.k,
            TRACK_REFINE_RADIUS,
            self.config.match_max_hamming,
            self.config.match_ratio,
        );
        if matches.len() < 10 {
            return (coarse, 0, BTreeMap::new());
        }
        let obs: Vec<PoseObservation> = matches
            .iter()
            .map(|&(kp_idx, cand_idx)| {
                let kp = &pf.keypoints[kp_idx];
                PoseObservation {
                    measured: Vec2::new(kp.u, kp.v),
                    point: candidates.positions[cand_idx],
                    info_weight: self.config.scale_factor.powi(-2 * kp.octave as i32),
                }
            })
            .collect();
        match motion_only_ba(&obs, &self.k, &coarse, &self.config.lm_config()) {
            Ok((pose, mask)) => {
                let mut observations = BTreeMap::new();
                let mut inliers = 0;
                self.last_matches.clear();
                for (&(kp_idx, cand_idx), keep) in matches.iter().zip(mask.iter()) {
                    if *keep {
                        observations.insert(kp_idx, candidates.ids[cand_idx]);
                        self.last_matches.push((
                            candidates.ids[cand_idx],
                            pf.descriptors[kp_idx],
                            pf.keypoints[kp_idx].octave,
                        ));
                        inliers += 1;
                    }
                }
                (pose, inliers, observations)
            }
            Err(_) => (coarse, 0, BTreeMap::new()),
        }
    }

    /// Sparse mapping plus loop closure for one new keyframe (deterministic
    /// mode runs this inline; concurrent mode on the mapping worker).
    fn map_new_keyframe(&mut self, id: KeyframeId) {
        map_keyframe_chain(self.map, self.config, self.mode, id, &mut self.rng);
    }

    fn insert_keyframe(&mut self, kf: Keyframe) -> KeyframeId {
        let id = self.map.keyframes_mut().insert(kf);
        self.ref_kf = Some(id);
        self.frames_since_kf = 0;
        id
    }

    fn bootstrap_rgbd(&mut self, pf: &ProcessedFrame) -> KeyframeId {
        let kf = self.make_keyframe(pf, Pose::identity(), BTreeMap::new());
        self.trajectory.push((pf.timestamp, Pose::identity()));
        self.last_pose = Pose::identity();
        self.velocity = Pose::identity();
        self.insert_keyframe(kf)
    }

    /// Monocular two-view bootstrap; consumes the frame either way.
    fn try_bootstrap_mono(&mut self, pf: ProcessedFrame) -> Option<(KeyframeId, KeyframeId)> {
        let Some(anchor) = self.mono_pending.take() else {
            self.mono_pending = Some(pf);
            self.mono_pending_age = 0;
            return None;
        };
        let init = initialize_two_view(
            &anchor.keypoints,
            &anchor.descriptors,
            &pf.keypoints,
            &pf.descriptors,
            &self.k,
            &self.config.bootstrap_config(),
            &mut self.rng,
        );
        let Some(init) = init else {
            self.mono_pending_age += 1;
            if self.mono_pending_age > 30 {
                // Stale anchor: restart from the current frame.
                self.mono_pending = Some(pf);
                self.mono_pending_age = 0;
            } else {
                self.mono_pending = Some(anchor);
            }
            return None;
        };

        let kf0 = self.make_keyframe(&anchor, Pose::identity(), BTreeMap::new());
        let kf1 = self.make_keyframe(&pf, init.pose_b, BTreeMap::new());
        let (id0, id1) = {
            let mut kfs = self.map.keyframes_mut();
            (kfs.insert(kf0), kfs.insert(kf1))
        };
        {
            let mut kfs = self.map.keyframes_mut();
            let mut prims = self.map.primitives_mut();
            for &(ia, ib, p) in &init.points {
                let prim = primitive_from_keypoint(kfs.get(id0).unwrap(), ia, p, p.z);
                let pid = prims.insert(prim);
                kfs.get_mut(id0).unwrap().observations.insert(ia, pid);
                kfs.get_mut(id1).unwrap().observations.insert(ib, pid);
            }
            kfs.recompute_covisibility(id0);
            kfs.recompute_covisibility(id1);
        }
        self.ref_kf = Some(id1);
        self.frames_since_kf = 0;
        self.trajectory.push((anchor.timestamp, Pose::identity()));
        self.trajectory.push((pf.timestamp, init.pose_b));
        self.last_pose = init.pose_b;
        self.velocity = Pose::identity();
        Some((id0, id1))
    }

    /// Tracks one frame; returns the freshly inserted keyframe id, if any.
    fn step_frame(&mut self, frame: &SequenceFrame) -> Result<Option<KeyframeId>, PipelineError> {
        let started = Instant::now();
        let pf = self.process(frame)?;
        self.frames_processed += 1;
        if self.gt_first.is_none() {
            self.gt_first = frame.gt_pose;
        }

        if self.map.keyframes().is_empty() {
            let result = match self.mode {
                SensorMode::Rgbd => Some(self.bootstrap_rgbd(&pf)),
                SensorMode::Mono => self.try_bootstrap_mono(pf).map(|(_, id1)| id1),
            };
            self.track_seconds += started.elapsed().as_secs_f64();
            return Ok(result);
        }

        let (pose, inliers, observations) = self.track(&pf);
        if inliers < self.config.track_lost_floor {
            self.weak_frames += 1;
            if self.weak_frames > self.config.track_lost_frames {
                self.tracking_lost = true;
                self.track_seconds += started.elapsed().as_secs_f64();
                return Ok(None);
            }
        } else {
            self.weak_frames = 0;
        }
        self.trajectory.push((pf.timestamp, pose));
        self.velocity = pose.compose(&self.last_pose.inverse());
        self.last_pose = pose;
        self.frames_since_kf += 1;
        if std::env::var_os("HYPERSLAM_TRACE").is_some() {
            let rel_err = frame.gt_pose.and_then(|gt| {
                let first = self.trajectory.first()?;
                let est_rel = first.1.compose(&pose.inverse());
                // Ground-truth poses are camera-to-world.
                let gt0 = self.gt_first?;
                let gt_rel = gt0.inverse().compose(&gt);
                Some((est_rel.translation - gt_rel.translation).norm())
            });
            eprintln!(
                "frame t={:.3} kps={} inliers={} prims={} kfs={} rel_err={:.4}",
                pf.timestamp,
                pf.keypoints.len(),
                inliers,
                self.map.primitives().len(),
                self.map.keyframes().len(),
                rel_err.unwrap_or(-1.0)
            );
        }
        if self.gt_first.is_none() {
            self.gt_first = frame.gt_pose;
        }

        // Reference count: the reference keyframe's live observation count
        // (it grows when mapping creates its points).
        let reference_inliers = self
            .ref_kf
            .and_then(|id| self.map.keyframes().get(id).map(|kf| kf.observations.len()))
            .unwrap_or(1);
        let stats = FrameStats {
            inliers,
            reference_inliers,
            frames_since_keyframe: self.frames_since_kf,
        };
        // A fresh reference tracks well below 90% of its own observation
        // count, so the ratio rule alone would fire every frame; a minimum
        // gap sets the cadence, with starvation as the emergency override.
        let gap_ok = self.frames_since_kf >= 3 || inliers < self.config.kf_min_inliers;
        let mut new_kf = None;
        if inliers >= 10 && gap_ok && select_keyframe(&stats, &self.config.keyframe_policy()) {
            let kf = self.make_keyframe(&pf, pose, observations);
            new_kf = Some(self.insert_keyframe(kf));
        }
        self.track_seconds += started.elapsed().as_secs_f64();
        Ok(new_kf)
    }
}

/// Search radius (pixels at level 0) for the first projection-gated
/// association pass (prediction-error sized).
const TRACK_SEARCH_RADIUS: Real = 20.0;
/// Tighter radius for re-association at the refined pose; the wide first
/// pass admits neighbor mismatches that bias the solve toward the
/// prediction.
const TRACK_REFINE_RADIUS: Real = 7.0;

#[derive(Default)]
struct TrackingCandidates {
    ids: Vec<PrimitiveId>,
    descriptors: Vec<Descriptor>,
    positions: Vec<Vec3>,
    octaves: Vec<usize>,
}

/// Projection-gated descriptor association: every map candidate is
/// projected through the predicted pose and competes only for keypoints
/// within the search radius. Repetitive scenes defeat a global
/// nearest-neighbor ratio test; spatial gating restores discrimination.
/// Greedy one-to-one resolution by ascending Hamming distance.
#[allow(clippy::too_many_arguments)]
fn gated_match(
    keypoints: &[Keypoint],
    descriptors: &[Descriptor],
    candidates: &TrackingCandidates,
    predict: &Pose,
    k: &Intrinsics,
    radius: Real,
    max_hamming: u32,
    ratio: Real,
) -> Vec<(usize, usize)> {
    let cand_descs = &candidates.descriptors;
    let cand_positions = &candidates.positions;
    use hyperslam_core::math::project;

    // Bucket projected candidates on a radius-sized grid.
    let cell = radius.max(1.0);
    let mut grid: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    let mut projections: Vec<Option<(Real, Real)>> = vec![None; cand_positions.len()];
    for (idx, pos) in cand_positions.iter().enumerate() {
        let Ok((u, v, _)) = project(pos, predict, k) else {
            continue;
        };
        if u < -radius
            || v < -radius
            || u > k.width as Real + radius
            || v > k.height as Real + radius
        {
            continue;
        }
        projections[idx] = Some((u, v));
        grid.entry(((u / cell) as i64, (v / cell) as i64))
            .or_default()
            .push(idx);
    }

    let mut proposals: Vec<(u32, usize, usize)> = Vec::new();
    for (kp_idx, kp) in keypoints.iter().enumerate() {
        let (cx, cy) = ((kp.u / cell) as i64, (kp.v / cell) as i64);
        let mut best = u32::MAX;
        let mut second = u32::MAX;
        let mut best_idx = usize::MAX;
        for gy in cy - 1..=cy + 1 {
            for gx in cx - 1..=cx + 1 {
                let Some(bucket) = grid.get(&(gx, gy)) else {
                    continue;
                };
                for &cand in bucket {
                    // Octave gate: cross-scale duplicates of the same
                    // feature carry incompatible descriptors.
                    if kp.octave.abs_diff(candidates.octaves[cand]) > 1 {
                        continue;
                    }
                    let (u, v) = projections[cand].unwrap();
                    let d2 = (u - kp.u).powi(2) + (v - kp.v).powi(2);
                    if d2 > radius * radius {
                        continue;
                    }
                    let dist = descriptors[kp_idx].hamming(&cand_descs[cand]);
                    if dist < best {
                        second = best;
                        best = dist;
                        best_idx = cand;
                    } else if dist < second {
                        second = dist;
                    }
                }
            }
        }
        if best_idx == usize::MAX || best > max_hamming {
            continue;
        }
        if second != u32::MAX && (best as Real) >= ratio * (second as Real) {
            continue;
        }
        proposals.push((best, kp_idx, best_idx));
    }

    proposals.sort_unstable();
    let mut kp_used = vec![false; keypoints.len()];
    let mut cand_used = vec![false; cand_descs.len()];
    let mut matches = Vec::with_capacity(proposals.len());
    for (_, kp_idx, cand_idx) in proposals {
        if kp_used[kp_idx] || cand_used[cand_idx] {
            continue;
        }
        kp_used[kp_idx] = true;
        cand_used[cand_idx] = true;
        matches.push((kp_idx, cand_idx));
    }
    matches
}

/// The sparse-mapping chain run once per new keyframe.
fn map_keyframe_chain(
    map: &HyperMap,
    config: &SystemConfig,
    mode: SensorMode,
    id: KeyframeId,
    rng: &mut ChaCha8Rng,
) {
    create_map_points(map, id, mode, &config.map_point_config());
    if config.enable_geometry_densify {
        let source = match mode {
            SensorMode::Rgbd => DepthSource::Rgbd,
            SensorMode::Mono => DepthSource::Mono,
        };
        geometry_densify(map, id, source, &config.geometry_densify_config());
    }
    if std::env::var_os("HYPERSLAM_NO_LBA").is_none() {
        let _ = local_ba(map, id, config.scale_factor, &config.lm_config());
    }
    if config.enable_loop_closure {
        if let Some(candidate) = detect_loop(map, id, &config.loop_config(), rng) {
            apply_correction(map, &candidate);
        }
    }
}

/// Runs the full pipeline and returns the report plus the final map.
pub fn run_slam(
    frames: &[SequenceFrame],
    config: &SystemConfig,
    mode: SensorMode,
) -> Result<(RunReport, HyperMap), PipelineError> {
    if frames.is_empty() {
        return Err(PipelineError::EmptySequence);
    }
    let map = HyperMap::new(config.theta_covis);
    let (trajectory, stats) = if config.threads <= 1 {
        run_deterministic(&map, frames, config, mode)?
    } else {
        run_concurrent(&map, frames, config, mode)?
    };
    if map.keyframes().is_empty() {
        return Err(PipelineError::InitializationFailed);
    }

    // Final refinement over all keyframes.
    let mut train = TrainState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed_f1a1));
    for _ in 0..config.final_iters {
        photomap_step(&map, config, &mut train, &mut rng)?;
    }

    let report = evaluate(&map, frames, config, mode, trajectory, stats)?;
    Ok((report, map))
}

struct RunStats {
    track_seconds: Real,
    frames_processed: usize,
    tracking_lost: bool,
}

type RunState = (Vec<(Real, Pose)>, RunStats);

fn run_deterministic(
    map: &HyperMap,
    frames: &[SequenceFrame],
    config: &SystemConfig,
    mode: SensorMode,
) -> Result<RunState, PipelineError> {
    let mut session = Session::new(map, config, mode);
    let mut train = TrainState::default();
    let mut photo_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9));
    for frame in frames {
        if let Some(kf_id) = session.step_frame(frame)? {
            session.map_new_keyframe(kf_id);
        }
        if session.tracking_lost {
            break;
        }
        for _ in 0..config.optimizer_iters_per_frame {
            photomap_step(map, config, &mut train, &mut photo_rng)?;
        }
    }
    Ok((
        session.trajectory,
        RunStats {
            track_seconds: session.track_seconds,
            frames_processed: session.frames_processed,
            tracking_lost: session.tracking_lost,
        },
    ))
}

fn run_concurrent(
    map: &HyperMap,
    frames: &[SequenceFrame],
    config: &SystemConfig,
    mode: SensorMode,
) -> Result<RunState, PipelineError> {
    let op_mutex = Mutex::new(());
    let stop = AtomicBool::new(false);
    let (kf_tx, kf_rx) = mpsc::channel::<KeyframeId>();
    let (loop_tx, loop_rx) = mpsc::channel::<KeyframeId>();
    let photomap_error: Mutex<Option<PhotomapError>> = Mutex::new(None);

    let result = std::thread::scope(|scope| {
        // Workers capture the synchronization primitives by reference and
        // their channel endpoints by move.
        let op_mutex = &op_mutex;
        let stop = &stop;
        let photomap_error = &photomap_error;

        // Geometry mapping worker.
        let mapping = scope.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
            while let Ok(id) = kf_rx.recv() {
                create_map_points(map, id, mode, &config.map_point_config());
                if config.enable_geometry_densify {
                    let source = match mode {
                        SensorMode::Rgbd => DepthSource::Rgbd,
                        SensorMode::Mono => DepthSource::Mono,
                    };
                    geometry_densify(map, id, source, &config.geometry_densify_config());
                }
                {
                    let _guard = op_mutex.lock().unwrap();
                    let _ = local_ba(map, id, config.scale_factor, &config.lm_config());
                }
                let _ = rng.random::<u64>(); // keep worker streams decoupled
                if loop_tx.send(id).is_err() {
                    break;
                }
            }
            drop(loop_tx);
        });

        // Loop-closure worker.
        let looper = scope.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
            while let Ok(id) = loop_rx.recv() {
                if !config.enable_loop_closure {
                    continue;
                }
                if let Some(candidate) = detect_loop(map, id, &config.loop_config(), &mut rng) {
                    let _guard = op_mutex.lock().unwrap();
                    apply_correction(map, &candidate);
                }
            }
        });

        // Photorealistic mapping worker.
        let photo = scope.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));
            let mut train = TrainState::default();
            while !stop.load(Ordering::Relaxed) {
                if map.keyframes().is_empty() {
                    std::thread::yield_now();
                    continue;
                }
                let step = {
                    let _guard = op_mutex.lock().unwrap();
                    photomap_step(map, config, &mut train, &mut rng)
                };
                if let Err(e) = step {
                    *photomap_error.lock().unwrap() = Some(e);
                    break;
                }
            }
        });

        // Tracking runs on this thread.
        let mut session = Session::new(map, config, mode);
        let mut track_result: Result<(), PipelineError> = Ok(());
        for frame in frames {
            match session.step_frame(frame) {
                Ok(Some(kf_id)) => {
                    let _ = kf_tx.send(kf_id);
                }
                Ok(None) => {}
                Err(e) => {
                    track_result = Err(e);
                    break;
                }
            }
            if session.tracking_lost {
                break;
            }
        }
        drop(kf_tx);
        mapping.join().expect("mapping worker");
        looper.join().expect("loop worker");
        stop.store(true, Ordering::Relaxed);
        photo.join().expect("photomap worker");

        track_result.map(|()| {
            (
                session.trajectory,
                RunStats {
                    track_seconds: session.track_seconds,
                    frames_processed: session.frames_processed,
                    tracking_lost: session.tracking_lost,
                },
            )
        })
    })?;

    if let Some(e) = photomap_error.into_inner().unwrap() {
        return Err(e.into());
    }
    Ok(result)
}

fn evaluate(
    map: &HyperMap,
    frames: &[SequenceFrame],
    config: &SystemConfig,
    mode: SensorMode,
    trajectory: Vec<(Real, Pose)>,
    stats: RunStats,
) -> Result<RunReport, PipelineError> {
    let snapshot: Vec<HyperPrimitive> = {
        let prims = map.primitives();
        prims.iter().map(|(_, p)| p.clone()).collect()
    };
    let eval: Vec<(Pose, Image, Intrinsics)> = {
        let kfs = map.keyframes();
        kfs.iter()
            .map(|(_, kf)| (kf.pose, kf.image.clone(), kf.intrinsics))
            .collect()
    };
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let render_started = Instant::now();
    for (pose, gt, k) in &eval {
        let out = render(&snapshot, pose, k, &config.render_config());
        psnr_sum += crate::metrics::compute_psnr(&out.image, gt).expect("matching dimensions");
        ssim_sum += ssim(&out.image, gt).expect("matching dimensions");
    }
    let render_seconds = render_started.elapsed().as_secs_f64();
    let rendered = eval.len();
    let (psnr, ssim_mean) = if rendered > 0 {
        (psnr_sum / rendered as Real, ssim_sum / rendered as Real)
    } else {
        (0.0, 0.0)
    };

    let gt_traj: Vec<(Real, Vec3)> = frames
        .iter()
        .filter_map(|f| f.gt_pose.map(|p| (f.timestamp, p.translation)))
        .collect();
    let est_traj: Vec<(Real, Vec3)> = trajectory
        .iter()
        .map(|(t, pose)| (*t, pose.center()))
        .collect();
    let align = match mode {
        SensorMode::Mono => AlignMode::Sim3,
        SensorMode::Rgbd => AlignMode::Se3,
    };
    let (ate_rmse, ate_std) = match compute_ate(&est_traj, &gt_traj, align) {
        Ok((rmse, std)) => (Some(rmse), Some(std)),
        Err(_) => (None, None),
    };

    let (n_primitives, model_size_bytes) = {
        let prims = map.primitives();
        // 281 bytes per record plus the optional 32-byte descriptor.
        let size: u64 = 12
            + prims
                .iter()
                .map(|(_, p)| 281u64 + if p.descriptor.is_some() { 32 } else { 0 })
                .sum::<u64>();
        (prims.len(), size)
    };

    Ok(RunReport {
        ate_rmse,
        ate_std,
        psnr,
        ssim: ssim_mean,
        lpips: None,
        tracking_fps: if stats.track_seconds > 0.0 {
            stats.frames_processed as Real / stats.track_seconds
        } else {
            0.0
        },
        rendering_fps: if render_seconds > 0.0 {
            rendered as Real / render_seconds
        } else {
            0.0
        },
        model_size_bytes,
        n_frames: stats.frames_processed,
        n_keyframes: map.keyframes().len(),
        n_primitives,
        tracking_lost: stats.tracking_lost,
        trajectory: trajectory
            .iter()
            .map(|(t, pose)| TrajectoryEntry::from_tracking_pose(*t, pose))
            .collect(),
    })
}
