use nalgebra::Matrix2x3;
use rayon::prelude::*;

use super::forward::RenderOutput;
use super::project::{build_cov3d, projection_jacobian, quat_to_mat_grad, ProjectedGaussian};
use super::sh::{sh_basis, sh_basis_grad};
use super::{hash_primitives, SplatError};
use crate::image::Image;
use crate::map::{HyperPrimitive, SH_COEFFS};
use crate::math::{quat_to_mat, Mat2, Mat3, Pose, Real, Vec2, Vec3};

/// Gradients per input-list primitive; zero for culled primitives.
#[derive(Debug, Clone)]
pub struct SplatGradients {
    pub position: Vec<Vec3>,
    /// d/d(w, x, y, z) of the stored unit quaternion, including the
    /// normalization chain.
    pub rotation: Vec<[Real; 4]>,
    pub log_scale: Vec<Vec3>,
    pub opacity_logit: Vec<Real>,
    pub sh: Vec<[[Real; SH_COEFFS]; 3]>,
    /// Magnitude of the accumulated 2D-position gradient, for densification.
    pub screen_grad: Vec<Real>,
    pub visible: Vec<bool>,
}

impl SplatGradients {
    fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vec3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vec3::zeros(); n],
            opacity_logit: vec![0.0; n],
            sh: vec![[[0.0; SH_COEFFS]; 3]; n],
            screen_grad: vec![0.0; n],
            visible: vec![false; n],
        }
    }
}

/// Per-projected-gaussian gradients on 2D screen quantities, accumulated
/// over pixels.
#[derive(Debug, Clone, Copy)]
struct ScreenGrad {
    color: [Real; 3],
    mean2d: Vec2,
    /// Full-matrix gradient w.r.t. the conic (inverse 2D covariance).
    conic: Mat2,
    alpha_base: Real,
    touched: bool,
}

impl ScreenGrad {
    fn zero() -> Self {
        Self {
            color: [0.0; 3],
            mean2d: Vec2::zeros(),
            conic: Mat2::zeros(),
            alpha_base: 0.0,
            touched: false,
        }
    }
}

/// Reverse-mode gradients of the rendering equation w.r.t. all primitive
/// parameters. `prims` must be the exact list the forward pass rendered.
pub fn render_backward(
    out: &RenderOutput,
    dl_dimage: &Image,
    prims: &[HyperPrimitive],
    pose: &Pose,
) -> Result<SplatGradients, SplatError> {
    if prims.len() != out.prim_count || hash_primitives(prims) != out.prim_hash {
        return Err(SplatError::StaleRenderState);
    }
    assert_eq!(dl_dimage.width(), out.width);
    assert_eq!(dl_dimage.height(), out.height);
    assert_eq!(dl_dimage.channels(), 3);

    // Pass 1 (parallel over tiles): gradients on screen-space quantities.
    let tile_grads: Vec<Vec<(u32, ScreenGrad)>> = (0..out.tiles.len())
        .into_par_iter()
        .map(|t| backward_tile(out, dl_dimage, t))
        .collect();

    // Merge in fixed tile order for bitwise-stable accumulation.
    let mut screen: Vec<ScreenGrad> = vec![ScreenGrad::zero(); out.projected.len()];
    for tile in tile_grads {
        for (j, g) in tile {
            let acc = &mut screen[j as usize];
            for c in 0..3 {
                acc.color[c] += g.color[c];
            }
            acc.mean2d += g.mean2d;
            acc.conic += g.conic;
            acc.alpha_base += g.alpha_base;
            acc.touched |= g.touched;
        }
    }

    // Pass 2 (parallel over gaussians): chain to 3D parameters.
    let per_gaussian: Vec<(usize, PrimGrad)> = out
        .projected
        .par_iter()
        .zip(screen.par_iter())
        .filter(|(_, sg)| sg.touched)
        .map(|(pg, sg)| (pg.index, chain_to_params(pg, sg, prims, pose, out.fx, out.fy)))
        .collect();

    let mut grads = SplatGradients::zeros(prims.len());
    for pg in &out.projected {
        grads.visible[pg.index] = true;
    }
    for (index, g) in per_gaussian {
        grads.position[index] = g.position;
        grads.rotation[index] = g.rotation;
        grads.log_scale[index] = g.log_scale;
        grads.opacity_logit[index] = g.opacity_logit;
        grads.sh[index] = g.sh;
        grads.screen_grad[index] = g.screen_grad;
    }
    Ok(grads)
}

struct PrimGrad {
    position: Vec3,
    rotation: [Real; 4],
    log_scale: Vec3,
    opacity_logit: Real,
    sh: [[Real; SH_COEFFS]; 3],
    screen_grad: Real,
}

fn backward_tile(out: &RenderOutput, dl_dimage: &Image, t: usize) -> Vec<(u32, ScreenGrad)> {
    let cfg = &out.config;
    let ts = cfg.tile_size;
    let (tx, ty) = (t % out.tiles_x, t / out.tiles_x);
    let x0 = tx * ts;
    let y0 = ty * ts;
    let tw = ts.min(out.width - x0);
    let th = ts.min(out.height - y0);
    let list = &out.tiles[t];
    if list.is_empty() {
        return Vec::new();
    }
    let cutoff_e = 0.5 * cfg.cutoff_sigma * cfg.cutoff_sigma;

    let mut local: Vec<ScreenGrad> = vec![ScreenGrad::zero(); list.len()];
    // Replay scratch: (position in list, alpha, transmittance before).
    let mut walk: Vec<(usize, Real, Real)> = Vec::with_capacity(list.len());

    for ly in 0..th {
        for lx in 0..tw {
            let (x, y) = (x0 + lx, y0 + ly);
            let dl_pix = [
                dl_dimage.get(x, y, 0),
                dl_dimage.get(x, y, 1),
                dl_dimage.get(x, y, 2),
            ];
            if dl_pix == [0.0, 0.0, 0.0] {
                continue;
            }
            let walked = out.n_contrib[y * out.width + x] as usize;
            if walked == 0 {
                continue;
            }
            walk.clear();
            let px = x as Real;
            let py = y as Real;
            let mut t_acc: Real = 1.0;
            for (pos, &j) in list[..walked].iter().enumerate() {
                let g = &out.projected[j as usize];
                let dx = px - g.mean2d.x;
                let dy = py - g.mean2d.y;
                let e = 0.5
                    * (g.conic[(0, 0)] * dx * dx
                        + 2.0 * g.conic[(0, 1)] * dx * dy
                        + g.conic[(1, 1)] * dy * dy);
                if e > cutoff_e {
                    continue;
                }
                let alpha = (g.alpha_base * (-e).exp()).min(cfg.alpha_clamp);
                if alpha < cfg.alpha_skip {
                    continue;
                }
                walk.push((pos, alpha, t_acc));
                t_acc *= 1.0 - alpha;
                if t_acc < cfg.transmittance_stop {
                    break;
                }
            }

            // Back-to-front: suffix sum of composited color.
            let mut suffix = [0.0; 3];
            for &(pos, alpha, t_before) in walk.iter().rev() {
                let j = list[pos] as usize;
                let g = &out.projected[j];
                let w = alpha * t_before;
                let acc = &mut local[pos];
                acc.touched = true;

                let mut dl_dalpha = 0.0;
                for c in 0..3 {
                    acc.color[c] += dl_pix[c] * w;
                    dl_dalpha +=
                        dl_pix[c] * (t_before * g.color[c] - suffix[c] / (1.0 - alpha));
                    suffix[c] += w * g.color[c];
                }

                // Alpha clamped: no gradient flows into opacity/footprint.
                let dx = px - g.mean2d.x;
                let dy = py - g.mean2d.y;
                let e = 0.5
                    * (g.conic[(0, 0)] * dx * dx
                        + 2.0 * g.conic[(0, 1)] * dx * dy
                        + g.conic[(1, 1)] * dy * dy);
                let gauss = (-e).exp();
                if g.alpha_base * gauss > cfg.alpha_clamp {
                    continue;
                }
                acc.alpha_base += dl_dalpha * gauss;
                let dl_de = -dl_dalpha * alpha;
                let conic_d = g.conic * Vec2::new(dx, dy);
                acc.mean2d += -dl_de * conic_d;
                // e = 0.5 d^T A d: full-matrix gradient on the conic.
                acc.conic += dl_de
                    * 0.5
                    * Mat2::new(dx * dx, dx * dy, dy * dx, dy * dy);
            }
        }
    }

    local
        .into_iter()
        .enumerate()
        .filter(|(_, g)| g.touched)
        .map(|(pos, g)| (list[pos], g))
        .collect()
}

fn chain_to_params(
    pg: &ProjectedGaussian,
    sg: &ScreenGrad,
    prims: &[HyperPrimitive],
    pose: &Pose,
    fx: Real,
    fy: Real,
) -> PrimGrad {
    let prim = &prims[pg.index];
    let w_mat = pose.rotation_matrix();
    let cov3d = build_cov3d(&prim.rotation, &prim.log_scale);

    // conic = cov2d^-1: dL/dcov2d = -A dL/dA A (A symmetric).
    let g_cov2d: Mat2 = -(pg.conic * sg.conic * pg.conic);

    // cov2d = M cov3d M^T + floor I with M = J W.
    let j_pi = projection_jacobian(&pg.cam, fx, fy);
    let m: Matrix2x3<Real> = j_pi * w_mat;
    let g_cov3d: Mat3 = (m.transpose() * g_cov2d * m).into();
    let g_m: Matrix2x3<Real> = (g_cov2d + g_cov2d.transpose()) * m * cov3d;
    let g_j: Matrix2x3<Real> = g_m * w_mat.transpose();

    // mean2d = pi(cam) shares the same Jacobian matrix.
    let mut g_cam: Vec3 = j_pi.transpose() * sg.mean2d;
    let (cx, cy, cz) = (pg.cam.x, pg.cam.y, pg.cam.z);
    let z2 = cz * cz;
    let z3 = z2 * cz;
    g_cam.x += g_j[(0, 2)] * (-fx / z2);
    g_cam.y += g_j[(1, 2)] * (-fy / z2);
    g_cam.z += g_j[(0, 0)] * (-fx / z2)
        + g_j[(1, 1)] * (-fy / z2)
        + g_j[(0, 2)] * (2.0 * fx * cx / z3)
        + g_j[(1, 2)] * (2.0 * fy * cy / z3);

    // cam = W p + t.
    let mut g_position: Vec3 = w_mat.transpose() * g_cam;

    // Color via spherical harmonics and the view direction.
    let basis = sh_basis(&pg.view_dir);
    let basis_grad = sh_basis_grad(&pg.view_dir);
    let mut g_sh = [[0.0; SH_COEFFS]; 3];
    let mut g_dir = Vec3::zeros();
    for ch in 0..3 {
        if pg.color_raw[ch] < 0.0 {
            continue; // clamped to zero
        }
        let gc = sg.color[ch];
        if gc == 0.0 {
            continue;
        }
        for (coeff, (b, bg)) in basis.iter().zip(basis_grad.iter()).enumerate() {
            g_sh[ch][coeff] = gc * b;
            g_dir += gc * prim.sh[ch][coeff] * Vec3::new(bg[0], bg[1], bg[2]);
        }
    }
    // dir = (p - c) / |p - c|; |p - c| equals |cam|.
    let dist = pg.cam.norm();
    g_position += (g_dir - pg.view_dir * pg.view_dir.dot(&g_dir)) / dist;

    // cov3d = R D R^T with D = diag(exp(2 s)).
    let r_mat = quat_to_mat(prim.rotation.w, prim.rotation.i, prim.rotation.j, prim.rotation.k);
    let d_diag = prim.log_scale.map(|s| (2.0 * s).exp());
    let g_r = (g_cov3d + g_cov3d.transpose()) * r_mat * Mat3::from_diagonal(&d_diag);
    let rt_g_r = r_mat.transpose() * g_cov3d * r_mat;
    let g_log_scale = Vec3::new(
        rt_g_r[(0, 0)] * 2.0 * d_diag.x,
        rt_g_r[(1, 1)] * 2.0 * d_diag.y,
        rt_g_r[(2, 2)] * 2.0 * d_diag.z,
    );

    let quat_grads = quat_to_mat_grad(&prim.rotation);
    let mut g_q = [0.0; 4];
    for (p, qg) in quat_grads.iter().enumerate() {
        g_q[p] = g_r.component_mul(qg).sum();
    }
    // Through the normalization of the stored (unit) quaternion.
    let q_vec = [
        prim.rotation.w,
        prim.rotation.i,
        prim.rotation.j,
        prim.rotation.k,
    ];
    let dot: Real = (0..4).map(|i| q_vec[i] * g_q[i]).sum();
    for i in 0..4 {
        g_q[i] -= q_vec[i] * dot;
    }

    let g_opacity_logit = sg.alpha_base * pg.alpha_base * (1.0 - pg.alpha_base);

    PrimGrad {
        position: g_position,
        rotation: g_q,
        log_scale: g_log_scale,
        opacity_logit: g_opacity_logit,
        sh: g_sh,
        screen_grad: sg.mean2d.norm(),
    }
}


