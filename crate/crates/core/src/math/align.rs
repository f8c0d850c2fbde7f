use thiserror::Error;

use super::{Mat3, Quat, Real, Sim3, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("alignment needs at least 3 associated pairs, got {got}")]
    TooFewPairs { got: usize },
}

/// Associates two timestamped position sequences by nearest timestamp within
/// `max_dt` seconds. Each ground-truth sample is consumed at most once.
pub fn associate_by_timestamp(
    est: &[(Real, Vec3)],
    gt: &[(Real, Vec3)],
    max_dt: Real,
) -> Vec<(Vec3, Vec3)> {
    let mut used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for &(t, p) in est {
        let mut best: Option<(usize, Real)> = None;
        for (j, &(tg, _)) in gt.iter().enumerate() {
            if used[j] {
                continue;
            }
            let dt = (t - tg).abs();
            if dt <= max_dt && best.map_or(true, |(_, d)| dt < d) {
                best = Some((j, dt));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            pairs.push((p, gt[j].1));
        }
    }
    pairs
}

/// Closed-form least-squares similarity (or rigid, when `with_scale` is
/// false) transform mapping the first element of every pair onto the second.
pub fn umeyama(pairs: &[(Vec3, Vec3)], with_scale: bool) -> Result<Sim3, AlignError> {
    if pairs.len() < 3 {
        return Err(AlignError::TooFewPairs { got: pairs.len() });
    }
    let n = pairs.len() as Real;
    let mean_src = pairs.iter().map(|p| p.0).sum::<Vec3>() / n;
    let mean_dst = pairs.iter().map(|p| p.1).sum::<Vec3>() / n;

    let mut cov = Mat3::zeros();
    let mut var_src = 0.0;
    for (src, dst) in pairs {
        let ds = src - mean_src;
        let dd = dst - mean_dst;
        cov += dd * ds.transpose();
        var_src += ds.norm_squared();
    }
    cov /= n;
    var_src /= n;

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut s = Mat3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = if with_scale && var_src > 1e-15 {
        (svd.singular_values.component_mul(&Vec3::new(s[(0, 0)], s[(1, 1)], s[(2, 2)]))).sum()
            / var_src
    } else {
        1.0
    };
    let rotation = Quat::from_rotation_matrix(&nalgebra::Rotation3::from_matrix(&r));
    let translation = mean_dst - scale * (rotation * mean_src);
    Ok(Sim3 {
        rotation,
        translation,
        scale,
    })
}

/// Associates trajectories by timestamp (0.02 s window) and aligns the
/// estimate onto the ground truth.
pub fn umeyama_align(
    est: &[(Real, Vec3)],
    gt: &[(Real, Vec3)],
    with_scale: bool,
) -> Result<Sim3, AlignError> {
    let pairs = associate_by_timestamp(est, gt, 0.02);
    umeyama(&pairs, with_scale)
}
