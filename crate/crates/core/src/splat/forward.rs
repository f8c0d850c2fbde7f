use rayon::prelude::*;

use super::project::{project_gaussian, ProjectedGaussian};
use super::{hash_primitives, RenderConfig};
use crate::image::Image;
use crate::map::HyperPrimitive;
use crate::math::{Intrinsics, Pose, Real};

/// Composited image plus everything the backward pass needs to replay the
/// exact same compositing walk.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// HxWx3, black background.
    pub image: Image,
    /// HxWx1 remaining transmittance per pixel.
    pub final_transmittance: Image,
    /// Primitives that survived culling.
    pub visible_count: usize,
    /// Projected survivors, in input-list order.
    pub projected: Vec<ProjectedGaussian>,
    /// Per-tile contributor indices into `projected`, sorted by depth
    /// (ties by primitive index).
    pub(crate) tiles: Vec<Vec<u32>>,
    pub(crate) tiles_x: usize,
    /// Per pixel: number of leading tile-list entries the forward pass
    /// walked (composited or skipped) before stopping.
    pub(crate) n_contrib: Vec<u32>,
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) fx: Real,
    pub(crate) fy: Real,
    pub(crate) config: RenderConfig,
    pub(crate) prim_count: usize,
    pub(crate) prim_hash: u64,
}

impl RenderOutput {
    pub fn tile_contributors(&self, tx: usize, ty: usize) -> &[u32] {
        &self.tiles[ty * self.tiles_x + tx]
    }

    /// (tiles_x, tiles_y).
    pub fn tile_grid(&self) -> (usize, usize) {
        (self.tiles_x, self.tiles.len() / self.tiles_x)
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

struct TileRaster {
    color: Vec<[Real; 3]>,
    transmittance: Vec<Real>,
    contrib: Vec<u32>,
}

/// Renders primitives with front-to-back alpha compositing over 16x16 tiles
/// (tile size from `cfg`). Deterministic: depth ties break by primitive
/// index and tiles merge in fixed order.
pub fn render(
    prims: &[HyperPrimitive],
    pose: &Pose,
    k: &Intrinsics,
    cfg: &RenderConfig,
) -> RenderOutput {
    let mut projected: Vec<ProjectedGaussian> = prims
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            project_gaussian(p, pose, k, cfg).map(|mut pg| {
                pg.index = i;
                pg
            })
        })
        .collect();
    projected.sort_by(|a, b| a.index.cmp(&b.index));

    let (width, height) = (k.width, k.height);
    let ts = cfg.tile_size;
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);

    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (j, pg) in projected.iter().enumerate() {
        let x0 = ((pg.mean2d.x - pg.radius).floor().max(0.0) as usize).min(width - 1) / ts;
        let x1 = ((pg.mean2d.x + pg.radius).ceil().max(0.0) as usize).min(width - 1) / ts;
        let y0 = ((pg.mean2d.y - pg.radius).floor().max(0.0) as usize).min(height - 1) / ts;
        let y1 = ((pg.mean2d.y + pg.radius).ceil().max(0.0) as usize).min(height - 1) / ts;
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tiles[ty * tiles_x + tx].push(j as u32);
            }
        }
    }
    tiles.par_iter_mut().for_each(|list| {
        list.sort_by(|&a, &b| {
            let ga = &projected[a as usize];
            let gb = &projected[b as usize];
            ga.depth
                .partial_cmp(&gb.depth)
                .expect("finite depths")
                .then(ga.index.cmp(&gb.index))
        });
    });

    let rastered: Vec<TileRaster> = (0..tiles.len())
        .into_par_iter()
        .map(|t| raster_tile(&projected, &tiles[t], t, tiles_x, width, height, cfg))
        .collect();

    let mut image = Image::zeros(width, height, 3);
    let mut final_transmittance = Image::zeros(width, height, 1);
    let mut n_contrib = vec![0u32; width * height];
    for (t, raster) in rastered.iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let x0 = tx * ts;
        let y0 = ty * ts;
        let tw = ts.min(width - x0);
        let th = ts.min(height - y0);
        for ly in 0..th {
            for lx in 0..tw {
                let local = ly * tw + lx;
                let (x, y) = (x0 + lx, y0 + ly);
                for c in 0..3 {
                    image.set(x, y, c, raster.color[local][c]);
                }
                final_transmittance.set(x, y, 0, raster.transmittance[local]);
                n_contrib[y * width + x] = raster.contrib[local];
            }
        }
    }

    let visible_count = projected.len();
    RenderOutput {
        image,
        final_transmittance,
        visible_count,
        projected,
        tiles,
        tiles_x,
        n_contrib,
        width,
        height,
        fx: k.fx,
        fy: k.fy,
        config: *cfg,
        prim_count: prims.len(),
        prim_hash: hash_primitives(prims),
    }
}

fn raster_tile(
    projected: &[ProjectedGaussian],
    list: &[u32],
    tile: usize,
    tiles_x: usize,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> TileRaster {
    let ts = cfg.tile_size;
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let x0 = tx * ts;
    let y0 = ty * ts;
    let tw = ts.min(width - x0);
    let th = ts.min(height - y0);
    let cutoff_e = 0.5 * cfg.cutoff_sigma * cfg.cutoff_sigma;

    let mut out = TileRaster {
        color: vec![[0.0; 3]; tw * th],
        transmittance: vec![1.0; tw * th],
        contrib: vec![0; tw * th],
    };

    for ly in 0..th {
        for lx in 0..tw {
            let px = (x0 + lx) as Real;
            let py = (y0 + ly) as Real;
            let mut t_acc: Real = 1.0;
            let mut color = [0.0; 3];
            let mut walked = 0u32;
            for &j in list {
                walked += 1;
                let g = &projected[j as usize];
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
                let w = alpha * t_acc;
                for c in 0..3 {
                    color[c] += w * g.color[c];
                }
                t_acc *= 1.0 - alpha;
                if t_acc < cfg.transmittance_stop {
                    break;
                }
            }
            let local = ly * tw + lx;
            out.color[local] = color;
            out.transmittance[local] = t_acc;
            out.contrib[local] = walked;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{logit, HyperPrimitive};
    use crate::math::Vec3;
    use crate::splat::SH_C0;
    use approx::assert_relative_eq;

    fn test_intrinsics(width: usize, height: usize) -> Intrinsics {
        Intrinsics::new(
            100.0,
            100.0,
            width as Real / 2.0,
            height as Real / 2.0,
            width,
            height,
        )
    }

    /// Primitive whose degree-0 SH renders exactly `rgb`.
    pub(crate) fn colored_primitive(position: Vec3, rgb: [Real; 3], opacity: Real) -> HyperPrimitive {
        let mut p = HyperPrimitive::new(position);
        p.opacity_logit = logit(opacity);
        for c in 0..3 {
            p.sh[c][0] = (rgb[c] - 0.5) / SH_C0;
        }
        p
    }

    #[test]
    fn empty_scene_renders_black() {
        let k = test_intrinsics(64, 48);
        let out = render(&[], &Pose::identity(), &k, &RenderConfig::default());
        assert!(out.image.data().iter().all(|v| *v == 0.0));
        assert!(out.final_transmittance.data().iter().all(|v| *v == 1.0));
        assert_eq!(out.visible_count, 0);
    }

    #[test]
    fn single_splat_matches_closed_form() {
        let k = test_intrinsics(64, 64);
        let cfg = RenderConfig::default();
        let sigma = 0.7;
        let mut prim = colored_primitive(Vec3::new(0.0, 0.0, 1.0), [0.9, 0.2, 0.3], sigma);
        prim.log_scale = Vec3::from_element((0.03f64).ln());
        let out = render(&[prim.clone()], &Pose::identity(), &k, &cfg);

        // Center pixel: d = 0, alpha = sigma (u, v land exactly on (32, 32)).
        let alpha = sigma.min(cfg.alpha_clamp);
        assert_relative_eq!(out.image.get(32, 32, 0), alpha * 0.9, epsilon = 1e-9);
        assert_relative_eq!(out.image.get(32, 32, 1), alpha * 0.2, epsilon = 1e-9);

        // A neighbor decays with the Gaussian footprint.
        let pg = &out.projected[0];
        let dx = 33.0 - pg.mean2d.x;
        let expected_alpha = sigma * (-0.5 * pg.conic[(0, 0)] * dx * dx).exp();
        assert_relative_eq!(
            out.image.get(33, 32, 0),
            expected_alpha.min(cfg.alpha_clamp) * 0.9,
            epsilon = 1e-9
        );
        assert!(out.image.get(33, 32, 0) < out.image.get(32, 32, 0));
    }

    #[test]
    fn two_overlapping_gaussians_composite_front_to_back() {
        let k = test_intrinsics(64, 64);
        let cfg = RenderConfig::default();
        let mut front = colored_primitive(Vec3::new(0.0, 0.0, 1.0), [1.0, 1.0, 1.0], 0.5);
        let mut back = colored_primitive(Vec3::new(0.0, 0.0, 2.0), [0.0, 0.0, 0.0], 0.5);
        front.log_scale = Vec3::from_element((0.05f64).ln());
        back.log_scale = Vec3::from_element((0.1f64).ln());
        let out = render(&[back, front], &Pose::identity(), &k, &cfg);
        // Front contributes 0.5 * white, back 0.5 * 0.5 * black.
        for c in 0..3 {
            assert_relative_eq!(out.image.get(32, 32, c), 0.5 * 1.0, epsilon = 1e-9);
        }
        assert_relative_eq!(
            out.final_transmittance.get(32, 32, 0),
            0.25,
            epsilon = 1e-9
        );
    }

    #[test]
    fn compositing_conserves_energy() {
        use rand::{Rng, SeedableRng};
        let k = test_intrinsics(48, 40);
        let cfg = RenderConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let prims: Vec<HyperPrimitive> = (0..30)
                .map(|_| {
                    let mut p = colored_primitive(
                        Vec3::new(
                            rng.random_range(-0.3..0.3),
                            rng.random_range(-0.3..0.3),
                            rng.random_range(0.5..3.0),
                        ),
                        [1.0, 1.0, 1.0],
                        rng.random_range(0.05..0.95),
                    );
                    p.log_scale = Vec3::new(
                        rng.random_range(-4.0..-2.0),
                        rng.random_range(-4.0..-2.0),
                        rng.random_range(-4.0..-2.0),
                    );
                    p
                })
                .collect();
            let out = render(&prims, &Pose::identity(), &k, &cfg);
            // All-white scene: image red channel equals total opacity
            // coverage, so coverage + transmittance must be 1.
            for y in 0..40 {
                for x in 0..48 {
                    let coverage = out.image.get(x, y, 0);
                    let t = out.final_transmittance.get(x, y, 0);
                    let total = coverage + t;
                    assert!(
                        total <= 1.0 + 1e-6 && total >= 1.0 - 1e-4,
                        "conservation violated at ({x},{y}): {total}"
                    );
                    if t >= cfg.transmittance_stop {
                        assert!((total - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn tile_size_independence() {
        use rand::{Rng, SeedableRng};
        let k = test_intrinsics(80, 64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let prims: Vec<HyperPrimitive> = (0..60)
            .map(|_| {
                let mut p = colored_primitive(
                    Vec3::new(
                        rng.random_range(-0.4..0.4),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(0.5..4.0),
                    ),
                    [
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    ],
                    rng.random_range(0.1..0.9),
                );
                p.log_scale = Vec3::new(
                    rng.random_range(-4.5..-2.0),
                    rng.random_range(-4.5..-2.0),
                    rng.random_range(-4.5..-2.0),
                );
                p
            })
            .collect();
        let cfg16 = RenderConfig::default();
        let cfg_full = RenderConfig {
            tile_size: 1024,
            ..cfg16
        };
        let a = render(&prims, &Pose::identity(), &k, &cfg16);
        let b = render(&prims, &Pose::identity(), &k, &cfg_full);
        for (va, vb) in a.image.data().iter().zip(b.image.data().iter()) {
            assert!((va - vb).abs() < 1e-6, "tile mismatch: {va} vs {vb}");
        }
    }

    #[test]
    fn repeated_renders_are_bitwise_identical() {
        use rand::{Rng, SeedableRng};
        let k = test_intrinsics(64, 64);
        let cfg = RenderConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
        let prims: Vec<HyperPrimitive> = (0..40)
            .map(|i| {
                // Identical depths exercise the id tie-break.
                let depth = if i % 2 == 0 { 1.5 } else { 2.5 };
                let mut p = colored_primitive(
                    Vec3::new(
                        rng.random_range(-0.2..0.2),
                        rng.random_range(-0.2..0.2),
                        depth,
                    ),
                    [rng.random_range(0.0..1.0), 0.5, 0.5],
                    0.6,
                );
                p.log_scale = Vec3::from_element(-3.0);
                p
            })
            .collect();
        let a = render(&prims, &Pose::identity(), &k, &cfg);
        let b = render(&prims, &Pose::identity(), &k, &cfg);
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.final_transmittance.data(), b.final_transmittance.data());
    }

    #[test]
    fn raising_front_opacity_never_brightens_occluded() {
        let k = test_intrinsics(64, 64);
        let cfg = RenderConfig::default();
        let mut back = colored_primitive(Vec3::new(0.0, 0.0, 2.0), [1.0, 0.0, 0.0], 0.9);
        back.log_scale = Vec3::from_element(-2.5);
        for (lo, hi) in [(0.1, 0.3), (0.3, 0.6), (0.6, 0.9)] {
            let mut front_lo = colored_primitive(Vec3::new(0.0, 0.0, 1.0), [0.0, 0.0, 0.0], lo);
            let mut front_hi = colored_primitive(Vec3::new(0.0, 0.0, 1.0), [0.0, 0.0, 0.0], hi);
            front_lo.log_scale = Vec3::from_element(-3.0);
            front_hi.log_scale = Vec3::from_element(-3.0);
            let out_lo = render(
                &[back.clone(), front_lo],
                &Pose::identity(),
                &k,
                &cfg,
            );
            let out_hi = render(
                &[back.clone(), front_hi],
                &Pose::identity(),
                &k,
                &cfg,
            );
            // Red channel comes only from the occluded back primitive.
            for (lo_px, hi_px) in out_lo
                .image
                .data()
                .chunks(3)
                .zip(out_hi.image.data().chunks(3))
            {
                assert!(hi_px[0] <= lo_px[0] + 1e-12);
            }
        }
    }
}
