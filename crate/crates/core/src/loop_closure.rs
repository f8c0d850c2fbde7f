//! Loop detection by descriptor-set retrieval and Sim(3) map correction.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::features::match_descriptors;
use crate::map::{HyperMap, KeyframeId, PrimitiveId};
use crate::math::{umeyama, Real, Sim3, Vec3};

#[derive(Debug, Clone, Copy)]
pub struct LoopConfig {
    /// Minimum keyframe separation between loop ends.
    pub gap_min: usize,
    /// Minimum descriptor-set similarity to attempt verification.
    pub score_min: Real,
    /// Minimum Sim3 inliers for an accepted candidate.
    pub inlier_min: usize,
    /// 3D inlier residual at unit scale, meters.
    pub tau_sim3: Real,
    pub ransac_iterations: usize,
    pub match_max_hamming: u32,
    pub match_ratio: Real,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            gap_min: 30,
            score_min: 0.25,
            inlier_min: 20,
            tau_sim3: 0.05,
            ransac_iterations: 100,
            match_max_hamming: 50,
            match_ratio: 0.75,
        }
    }
}

/// An accepted loop hypothesis between two keyframes.
#[derive(Debug, Clone)]
pub struct LoopCandidate {
    pub query_kf: KeyframeId,
    pub match_kf: KeyframeId,
    /// (query keypoint index, matched keyframe's primitive id).
    pub matches: Vec<(usize, PrimitiveId)>,
    /// Similarity mapping query-side geometry onto the matched side.
    pub sim3: Sim3,
    pub inliers: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum LoopError {
    #[error("similarity estimation needs at least 3 pairs, got {got}")]
    TooFewPairs { got: usize },
    #[error("no consensus: best inlier count {best} below minimum {min}")]
    NoConsensus { best: usize, min: usize },
}

/// Scores past, non-covisible keyframes by the fraction of query
/// descriptors with a close Hamming match, then geometrically verifies the
/// best candidate with a Sim(3) fit over 3D-3D correspondences.
pub fn detect_loop(
    map: &HyperMap,
    query: KeyframeId,
    cfg: &LoopConfig,
    rng: &mut impl Rng,
) -> Option<LoopCandidate> {
    let kfs = map.keyframes();
    let prims = map.primitives();

    let ids = kfs.ids();
    if ids.len() < cfg.gap_min {
        return None;
    }
    let query_index = ids.iter().position(|id| *id == query)?;
    let query_kf = kfs.get(query)?;
    if query_kf.descriptors.is_empty() {
        return None;
    }
    let covisible: std::collections::BTreeSet<KeyframeId> =
        kfs.covisible(query).into_iter().map(|(id, _)| id).collect();

    let mut best: Option<(KeyframeId, Real)> = None;
    for (index, &cand_id) in ids.iter().enumerate() {
        if query_index.saturating_sub(index) < cfg.gap_min {
            continue;
        }
        if covisible.contains(&cand_id) {
            continue;
        }
        let cand = kfs.get(cand_id).unwrap();
        if cand.descriptors.is_empty() {
            continue;
        }
        let mut close = 0usize;
        for qd in &query_kf.descriptors {
            let min = cand
                .descriptors
                .iter()
                .map(|cd| qd.hamming(cd))
                .min()
                .unwrap();
            if min <= cfg.match_max_hamming {
                close += 1;
            }
        }
        let score = close as Real / query_kf.descriptors.len() as Real;
        if score >= cfg.score_min && best.map_or(true, |(_, s)| score > s) {
            best = Some((cand_id, score));
        }
    }
    let (match_id, _) = best?;
    let match_kf = kfs.get(match_id).unwrap();

    // 3D-3D correspondences through both keyframes' observed primitives.
    let matches_2d = match_descriptors(
        &query_kf.descriptors,
        &match_kf.descriptors,
        cfg.match_max_hamming,
        cfg.match_ratio,
    );
    let mut pairs: Vec<(Vec3, Vec3)> = Vec::new();
    let mut pair_meta: Vec<(usize, PrimitiveId)> = Vec::new();
    for (iq, im) in matches_2d {
        let (Some(pid_q), Some(pid_m)) = (
            query_kf.observations.get(&iq),
            match_kf.observations.get(&im),
        ) else {
            continue;
        };
        let (Some(pq), Some(pm)) = (prims.get(*pid_q), prims.get(*pid_m)) else {
            continue;
        };
        pairs.push((pq.position, pm.position));
        pair_meta.push((iq, *pid_m));
    }

    let (sim3, mask) = estimate_sim3(&pairs, cfg, rng).ok()?;
    let inliers = mask.iter().filter(|m| **m).count();
    let matches = pair_meta
        .into_iter()
        .zip(mask.iter())
        .filter(|(_, m)| **m)
        .map(|(meta, _)| meta)
        .collect();
    Some(LoopCandidate {
        query_kf: query,
        match_kf: match_id,
        matches,
        sim3,
        inliers,
    })
}

/// RANSAC over minimal 3-point closed-form similarity fits, refined by a
/// full least-squares fit over the consensus set. Maps the first element of
/// each pair onto the second.
pub fn estimate_sim3(
    pairs: &[(Vec3, Vec3)],
    cfg: &LoopConfig,
    rng: &mut impl Rng,
) -> Result<(Sim3, Vec<bool>), LoopError> {
    if pairs.len() < 3 {
        return Err(LoopError::TooFewPairs { got: pairs.len() });
    }
    let tau2 = cfg.tau_sim3 * cfg.tau_sim3;
    let classify = |sim: &Sim3| -> Vec<bool> {
        pairs
            .iter()
            .map(|(a, b)| (sim.transform(a) - b).norm_squared() < tau2)
            .collect()
    };

    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    let mut best: Option<(Sim3, Vec<bool>, usize)> = None;
    for _ in 0..cfg.ransac_iterations {
        indices.shuffle(rng);
        let sample = [pairs[indices[0]], pairs[indices[1]], pairs[indices[2]]];
        let Ok(sim) = umeyama(&sample, true) else {
            continue;
        };
        let mask = classify(&sim);
        let count = mask.iter().filter(|m| **m).count();
        if best.as_ref().map_or(true, |(_, _, c)| count > *c) {
            best = Some((sim, mask, count));
        }
    }
    let (mut sim, mut mask, mut best_count) = best.ok_or(LoopError::NoConsensus {
        best: 0,
        min: cfg.inlier_min,
    })?;
    if best_count < cfg.inlier_min.max(3) {
        return Err(LoopError::NoConsensus {
            best: best_count,
            min: cfg.inlier_min,
        });
    }

    // Refinement over the consensus set, re-classifying once.
    for _ in 0..2 {
        let inlier_pairs: Vec<(Vec3, Vec3)> = pairs
            .iter()
            .zip(mask.iter())
            .filter(|(_, m)| **m)
            .map(|(p, _)| *p)
            .collect();
        if let Ok(refined) = umeyama(&inlier_pairs, true) {
            let refined_mask = classify(&refined);
            let count = refined_mask.iter().filter(|m| **m).count();
            if count >= best_count {
                sim = refined;
                mask = refined_mask;
                best_count = count;
            }
        }
    }
    Ok((sim, mask))
}

/// Transforms the query keyframe's covisibility window and the primitives
/// it observes by the candidate similarity: positions mapped through the
/// Sim3, primitive scales multiplied by its scale, orientations rotated,
/// keyframe poses corrected so projections are preserved. Adds a
/// covisibility edge between the loop ends. Exactly invertible by applying
/// the inverse Sim3.
pub fn apply_correction(map: &HyperMap, candidate: &LoopCandidate) -> Vec<KeyframeId> {
    // Lock order: keyframes before primitives.
    let mut kfs = map.keyframes_mut();
    let mut prims = map.primitives_mut();

    let mut window: Vec<KeyframeId> = vec![candidate.query_kf];
    window.extend(kfs.covisible(candidate.query_kf).into_iter().map(|(id, _)| id));
    window.sort_unstable();
    window.dedup();

    let mut touched_prims: std::collections::BTreeSet<PrimitiveId> =
        std::collections::BTreeSet::new();
    for &kf_id in &window {
        if let Some(kf) = kfs.get(kf_id) {
            touched_prims.extend(kf.observations.values().copied());
        }
    }

    let sim = &candidate.sim3;
    let log_s = sim.scale.ln();
    for pid in touched_prims {
        if let Some(p) = prims.get_mut(pid) {
            p.position = sim.transform(&p.position);
            p.rotation = sim.rotation * p.rotation;
            p.log_scale += Vec3::from_element(log_s);
        }
    }
    for &kf_id in &window {
        if let Some(kf) = kfs.get_mut(kf_id) {
            kf.pose = sim.correct_pose(&kf.pose);
        }
    }

    kfs.add_edge(
        candidate.query_kf,
        candidate.match_kf,
        candidate.inliers.max(1),
    );
    window
}
