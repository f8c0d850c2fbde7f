use nalgebra::{DMatrix, Matrix3};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::features::{match_descriptors, Descriptor, Keypoint};
use crate::math::{triangulate, Intrinsics, Mat3, Pose, Quat, Real, TriangulationConfig, Vec3};

/// Monocular two-view initialization settings.
#[derive(Debug, Clone, Copy)]
pub struct BootstrapConfig {
    pub min_triangulated: usize,
    pub min_median_parallax_deg: Real,
    pub ransac_iterations: usize,
    /// Sampson gate in pixels.
    pub inlier_threshold_px: Real,
    pub match_max_hamming: u32,
    pub match_ratio: Real,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            min_triangulated: 50,
            min_median_parallax_deg: 1.0,
            ransac_iterations: 200,
            inlier_threshold_px: 1.5,
            match_max_hamming: 50,
            match_ratio: 0.75,
        }
    }
}

/// Result of a successful two-view initialization. The first camera is the
/// world origin; the second pose carries an arbitrary (normalized) scale.
#[derive(Debug, Clone)]
pub struct TwoViewInit {
    pub pose_b: Pose,
    /// (keypoint index in a, keypoint index in b, world point).
    pub points: Vec<(usize, usize, Vec3)>,
    pub median_parallax_deg: Real,
}

/// Attempts map bootstrap from two monocular frames: descriptor matching,
/// RANSAC eight-point essential-matrix estimation, cheirality-resolved
/// decomposition and triangulation. The reconstruction is rescaled so the
/// median triangulated depth in the first frame is 1.
pub fn initialize_two_view(
    kps_a: &[Keypoint],
    descs_a: &[Descriptor],
    kps_b: &[Keypoint],
    descs_b: &[Descriptor],
    k: &Intrinsics,
    cfg: &BootstrapConfig,
    rng: &mut impl Rng,
) -> Option<TwoViewInit> {
    let matches = match_descriptors(descs_a, descs_b, cfg.match_max_hamming, cfg.match_ratio);
    if matches.len() < cfg.min_triangulated.max(8) {
        return None;
    }

    // Normalized image coordinates.
    let norm = |kp: &Keypoint| -> (Real, Real) { ((kp.u - k.cx) / k.fx, (kp.v - k.cy) / k.fy) };
    let pairs: Vec<((Real, Real), (Real, Real))> = matches
        .iter()
        .map(|&(ia, ib)| (norm(&kps_a[ia]), norm(&kps_b[ib])))
        .collect();

    let gate = cfg.inlier_threshold_px / k.fx;
    let gate2 = gate * gate;
    let mut best: Option<(Mat3, Vec<bool>, usize)> = None;
    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..cfg.ransac_iterations {
        indices.shuffle(rng);
        let sample: Vec<_> = indices[..8].iter().map(|&i| pairs[i]).collect();
        let Some(e) = eight_point(&sample) else {
            continue;
        };
        let mask: Vec<bool> = pairs.iter().map(|p| sampson2(&e, p) < gate2).collect();
        let count = mask.iter().filter(|m| **m).count();
        if best.as_ref().map_or(true, |(_, _, c)| count > *c) {
            best = Some((e, mask, count));
        }
    }
    let (e, inlier_mask, inlier_count) = best?;
    if inlier_count < 8 {
        return None;
    }

    // Refit on all inliers.
    let inlier_pairs: Vec<_> = pairs
        .iter()
        .zip(inlier_mask.iter())
        .filter(|(_, m)| **m)
        .map(|(p, _)| *p)
        .collect();
    let e = eight_point(&inlier_pairs).unwrap_or(e);

    // Decompose into the four (R, t) candidates and pick by cheirality.
    let svd = e.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut u = u;
    let mut v_t = v_t;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t = u.column(2).into_owned();

    let tri_cfg = TriangulationConfig {
        min_parallax_deg: cfg.min_median_parallax_deg,
        max_reproj_px: 4.0 * cfg.inlier_threshold_px,
    };
    let mut best_solution: Option<(Pose, Vec<(usize, usize, Vec3)>)> = None;
    for rot in [r1, r2] {
        for sign in [1.0, -1.0] {
            let pose_b = Pose::new(
                Quat::from_rotation_matrix(&nalgebra::Rotation3::from_matrix(&rot)),
                sign * t,
            );
            let mut pts = Vec::new();
            for (&(ia, ib), keep) in matches.iter().zip(inlier_mask.iter()) {
                if !keep {
                    continue;
                }
                let kp_a = &kps_a[ia];
                let kp_b = &kps_b[ib];
                if let Ok(p) = triangulate(
                    (kp_a.u, kp_a.v),
                    &Pose::identity(),
                    (kp_b.u, kp_b.v),
                    &pose_b,
                    k,
                    &tri_cfg,
                ) {
                    pts.push((ia, ib, p));
                }
            }
            if best_solution.as_ref().map_or(true, |(_, b)| pts.len() > b.len()) {
                best_solution = Some((pose_b, pts));
            }
        }
    }
    let (pose_b, mut points) = best_solution?;
    if points.len() < cfg.min_triangulated {
        return None;
    }

    // Parallax between the two viewing rays per point.
    let center_b = pose_b.center();
    let mut parallaxes: Vec<Real> = points
        .iter()
        .map(|(_, _, p)| {
            let da = p.normalize();
            let db = (p - center_b).normalize();
            da.dot(&db).clamp(-1.0, 1.0).acos().to_degrees()
        })
        .collect();
    parallaxes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_parallax_deg = parallaxes[parallaxes.len() / 2];
    if median_parallax_deg < cfg.min_median_parallax_deg {
        return None;
    }

    // Fix the monocular gauge: median depth in frame a becomes 1.
    let mut depths: Vec<Real> = points.iter().map(|(_, _, p)| p.z).collect();
    depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_depth = depths[depths.len() / 2];
    if median_depth <= 0.0 {
        return None;
    }
    let s = 1.0 / median_depth;
    for (_, _, p) in points.iter_mut() {
        *p *= s;
    }
    let pose_b = Pose::new(pose_b.rotation, pose_b.translation * s);

    Some(TwoViewInit {
        pose_b,
        points,
        median_parallax_deg,
    })
}

/// Eight-point essential matrix from normalized-coordinate pairs (a in the
/// first view, b in the second), with the rank-2 constraint enforced.
fn eight_point(pairs: &[((Real, Real), (Real, Real))]) -> Option<Mat3> {
    if pairs.len() < 8 {
        return None;
    }
    let mut a = DMatrix::<Real>::zeros(pairs.len(), 9);
    for (row, &((xa, ya), (xb, yb))) in pairs.iter().enumerate() {
        // Constraint: x_b^T E x_a = 0.
        a[(row, 0)] = xb * xa;
        a[(row, 1)] = xb * ya;
        a[(row, 2)] = xb;
        a[(row, 3)] = yb * xa;
        a[(row, 4)] = yb * ya;
        a[(row, 5)] = yb;
        a[(row, 6)] = xa;
        a[(row, 7)] = ya;
        a[(row, 8)] = 1.0;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let e_vec = v_t.row(v_t.nrows() - 1);
    let e = Mat3::new(
        e_vec[0], e_vec[1], e_vec[2], e_vec[3], e_vec[4], e_vec[5], e_vec[6], e_vec[7], e_vec[8],
    );
    // Project onto the essential manifold.
    let svd = e.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let s = (svd.singular_values[0] + svd.singular_values[1]) * 0.5;
    Some(u * Matrix3::from_diagonal(&Vec3::new(s, s, 0.0)) * v_t)
}

/// Squared Sampson distance of a normalized-coordinate pair.
fn sampson2(e: &Mat3, &((xa, ya), (xb, yb)): &((Real, Real), (Real, Real))) -> Real {
    let pa = Vec3::new(xa, ya, 1.0);
    let pb = Vec3::new(xb, yb, 1.0);
    let epa = e * pa;
    let etb = e.transpose() * pb;
    let err = pb.dot(&epa);
    let denom = epa.x * epa.x + epa.y * epa.y + etb.x * etb.x + etb.y * etb.y;
    if denom <= 0.0 {
        return Real::INFINITY;
    }
    err * err / denom
}
