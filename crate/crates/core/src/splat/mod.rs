//! Differentiable tile-based Gaussian splatting rasterizer.
//!
//! [`render`] composites primitives front-to-back per pixel and keeps the
//! per-tile contributor lists it used; [`render_backward`] replays them to
//! produce exact reverse-mode gradients for every primitive parameter. Both
//! passes parallelize over tiles and merge results in a fixed order, so
//! outputs are bitwise reproducible regardless of thread count.

mod backward;
mod forward;
mod project;
mod sh;

pub use backward::{render_backward, SplatGradients};
pub use forward::{render, RenderOutput};
pub use project::{
    build_cov3d, project_gaussian, projection_jacobian, quat_to_mat_grad, ProjectedGaussian,
};
pub use sh::{sh_basis, sh_basis_grad, sh_eval, ShError, SH_C0};

use thiserror::Error;

use crate::map::HyperPrimitive;
use crate::math::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Tile edge length in pixels.
    pub tile_size: usize,
    /// Conditioning floor added to the projected covariance diagonal, px^2.
    pub cov_floor: Real,
    /// Upper clamp on per-pixel alpha.
    pub alpha_clamp: Real,
    /// Contributions below this alpha are skipped.
    pub alpha_skip: Real,
    /// Compositing stops once transmittance falls below this.
    pub transmittance_stop: Real,
    /// Gaussians are evaluated (and binned) out to this many standard
    /// deviations; one cutoff in both places keeps tiling exact.
    pub cutoff_sigma: Real,
    /// Near-plane depth for rasterization: the perspective linearization of
    /// the footprint degenerates as z approaches 0.
    pub z_near: Real,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            cov_floor: 0.3,
            alpha_clamp: 0.99,
            alpha_skip: 1.0 / 255.0,
            transmittance_stop: 1e-4,
            cutoff_sigma: 3.0,
            z_near: 0.2,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SplatError {
    #[error("primitive list changed since the forward pass")]
    StaleRenderState,
}

/// FNV-1a over every parameter's bit pattern; used to detect a primitive
/// list that changed between the forward and backward passes.
pub(crate) fn hash_primitives(prims: &[HyperPrimitive]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |v: Real| {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for p in prims {
        for v in p.position.iter() {
            feed(*v);
        }
        feed(p.rotation.w);
        feed(p.rotation.i);
        feed(p.rotation.j);
        feed(p.rotation.k);
        for v in p.log_scale.iter() {
            feed(*v);
        }
        feed(p.opacity_logit);
        for ch in &p.sh {
            for v in ch {
                feed(*v);
            }
        }
    }
    hash
}
