//! Synthetic acceptance fixtures: a primitive map, an orbit trajectory and
//! rendered ground-truth color + depth frames in a TUM-style layout.

use std::path::Path;

use hyperslam_core::image::Image;
use hyperslam_core::map::{logit, HyperPrimitive};
use hyperslam_core::math::{Intrinsics, Pose, Quat, Real, Vec3};
use hyperslam_core::splat::{render, RenderConfig, RenderOutput, SH_C0};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::io::{self, OutputError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot read scene spec {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("scene spec line {line}: `{text}`")]
    Malformed { line: usize, text: String },
    #[error("unknown scene key `{0}`")]
    UnknownKey(String),
    #[error(transparent)]
    Output(#[from] OutputError),
}

macro_rules! scene_spec {
    ($($field:ident : $ty:ty = $default:expr),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct SceneSpec {
            $(pub $field: $ty,)*
        }

        impl Default for SceneSpec {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl SceneSpec {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), SynthError> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.parse().map_err(|_| SynthError::Malformed {
                            line: 0,
                            text: format!("{key}={value}"),
                        })?;
                    })*
                    _ => return Err(SynthError::UnknownKey(key.to_string())),
                }
                Ok(())
            }
        }
    };
}

scene_spec! {
    n_primitives: usize = 500,
    n_frames: usize = 100,
    width: usize = 320,
    height: usize = 240,
    fx: Real = 250.0,
    fy: Real = 250.0,
    orbit_radius: Real = 2.4,
    scene_radius: Real = 1.0,
    orbit_degrees: Real = 120.0,
    vertical_wobble: Real = 0.12,
    depth_scale: Real = 5000.0,
    opacity: Real = 0.95,
    min_scale: Real = 0.010,
    max_scale: Real = 0.022,
    n_background: usize = 140,
    bg_min_scale: Real = 0.35,
    bg_max_scale: Real = 0.6,
    bg_opacity: Real = 0.92,
    seed: u64 = 7,
}

impl SceneSpec {
    pub fn from_file(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut spec = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| SynthError::Malformed {
                line: idx + 1,
                text: raw.to_string(),
            })?;
            spec.set(key.trim(), value.trim())?;
        }
        Ok(spec)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let mut k = Intrinsics::new(
            self.fx,
            self.fy,
            self.width as Real / 2.0,
            self.height as Real / 2.0,
            self.width,
            self.height,
        );
        k.depth_scale = Some(self.depth_scale);
        k
    }
}

/// World-to-camera pose looking from `center` at `target`.
pub fn look_at(center: Vec3, target: Vec3) -> Pose {
    let z = (target - center).normalize();
    let up = Vec3::new(0.0, 1.0, 0.0);
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let r_wc = hyperslam_core::math::Mat3::from_columns(&[x, y, z]);
    let rotation = Quat::from_rotation_matrix(&nalgebra::Rotation3::from_matrix(&r_wc.transpose()));
    Pose::new(rotation, -(rotation * center))
}

/// Dots-on-panels scene: opaque panel backings carry small contrasting
/// dots at the same depth, so detected corners behave like texture on real
/// surfaces (features floating over a parallaxing background would have
/// viewpoint-dependent apparent centers). An outer opaque-blob shell fills
/// the rest of the field of view. Returned poses are world-to-camera,
/// timestamps at 30 Hz.
pub fn generate_scene(spec: &SceneSpec) -> (Vec<HyperPrimitive>, Vec<(Real, Pose)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut prims = Vec::with_capacity(spec.n_primitives + spec.n_background + 64);

    let dots_per_panel = 25;
    let n_panels = spec.n_primitives.div_ceil(dots_per_panel);
    let mut dots_left = spec.n_primitives;
    let golden = std::f64::consts::PI * (3.0 - (5.0f64).sqrt());
    for panel in 0..n_panels {
        // Fibonacci-sphere directions with jitter: every viewing direction
        // sees a comparable amount of structure.
        let normal = {
            let frac = (panel as Real + 0.5) / n_panels as Real;
            let y = 1.0 - 2.0 * frac;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let theta = golden * panel as Real + rng.random_range(-0.2..0.2);
            Vec3::new(r * theta.cos(), y, r * theta.sin()).normalize()
        };
        let center = normal * spec.scene_radius * rng.random_range(0.65..1.0);
        let extent = rng.random_range(0.38..0.6) * spec.scene_radius;
        let rotation = Quat::rotation_between(&Vec3::z(), &normal)
            .unwrap_or_else(|| Quat::from_scaled_axis(Vec3::x() * std::f64::consts::PI));
        let tangent_u = rotation * Vec3::x();
        let tangent_v = rotation * Vec3::y();

        let mut backing = HyperPrimitive::new(center);
        backing.rotation = rotation;
        backing.log_scale = Vec3::new(extent.ln(), extent.ln(), (0.01f64).ln());
        backing.opacity_logit = logit(0.97);
        let base_color = [
            rng.random_range(0.25..0.65),
            rng.random_range(0.25..0.65),
            rng.random_range(0.25..0.65),
        ];
        for ch in 0..3 {
            backing.sh[ch][0] = (base_color[ch] - 0.5) / SH_C0;
        }
        prims.push(backing);

        for _ in 0..dots_per_panel.min(dots_left) {
            let offset = tangent_u * rng.random_range(-0.75..0.75) * extent
                + tangent_v * rng.random_range(-0.75..0.75) * extent
                + normal * 0.004;
            let mut dot = HyperPrimitive::new(center + offset);
            dot.rotation = Quat::from_scaled_axis(Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ));
            let scale = rng.random_range(spec.min_scale..spec.max_scale);
            dot.log_scale = Vec3::new(
                (scale * rng.random_range(0.8..1.25)).ln(),
                (scale * rng.random_range(0.8..1.25)).ln(),
                (scale * rng.random_range(0.8..1.25)).ln(),
            );
            dot.opacity_logit = logit(spec.opacity);
            for ch in 0..3 {
                // Contrast against the panel backing.
                let swing: Real = rng.random_range(0.25..0.45);
                let sign: Real = if base_color[ch] > 0.5 { -1.0 } else { 1.0 };
                dot.sh[ch][0] = ((base_color[ch] + sign * swing).clamp(0.03, 0.97) - 0.5) / SH_C0;
            }
            prims.push(dot);
            dots_left -= 1;
        }
    }

    // Soft background blobs on an outer shell: they give the images smooth
    // texture (stable descriptors and orientations) and valid depth.
    for _ in 0..spec.n_background {
        let dir = loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() > 1e-3 {
                break v.normalize();
            }
        };
        // The shell lies outside the camera orbit in a narrow depth band:
        // a backdrop of near-opaque blobs behaves like an opaque surface
        // (translucent overlaps would create viewpoint-dependent phantom
        // corners that poison geometric tracking).
        let radius = rng.random_range(1.55..1.75) * spec.orbit_radius;
        let mut prim = HyperPrimitive::new(dir * radius);
        prim.rotation = Quat::from_scaled_axis(Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ));
        let scale = rng.random_range(spec.bg_min_scale..spec.bg_max_scale);
        prim.log_scale = Vec3::new(
            (scale * rng.random_range(0.7..1.4)).ln(),
            (scale * rng.random_range(0.7..1.4)).ln(),
            (scale * rng.random_range(0.7..1.4)).ln(),
        );
        prim.opacity_logit = logit(spec.bg_opacity);
        for ch in 0..3 {
            prim.sh[ch][0] = (rng.random_range(0.2..0.8) - 0.5) / SH_C0;
        }
        prims.push(prim);
    }

    let total_angle = spec.orbit_degrees.to_radians();
    let poses = (0..spec.n_frames)
        .map(|i| {
            let theta = total_angle * i as Real / spec.n_frames as Real;
            let center = Vec3::new(
                spec.orbit_radius * theta.sin(),
                spec.vertical_wobble * (3.0 * theta).sin(),
                -spec.orbit_radius * theta.cos(),
            );
            (i as Real / 30.0, look_at(center, Vec3::zeros()))
        })
        .collect();
    (prims, poses)
}

/// Surface depth per pixel: the depth of the contributor at which the
/// accumulated coverage crosses one half (a sensor reports the front
/// surface, not an average across depth layers); 0 (invalid) where total
/// coverage stays below one half.
pub fn composite_depth(out: &RenderOutput, cfg: &RenderConfig) -> Image {
    let (width, height) = out.dimensions();
    let (tiles_x, _) = out.tile_grid();
    let cutoff_e = 0.5 * cfg.cutoff_sigma * cfg.cutoff_sigma;
    let mut depth = Image::zeros(width, height, 1);
    for py in 0..height {
        for px in 0..width {
            let list = out.tile_contributors(px / cfg.tile_size, py / cfg.tile_size);
            let _ = tiles_x;
            let mut t_acc: Real = 1.0;
            let mut wsum = 0.0;
            let mut surface = 0.0;
            for &j in list {
                let g = &out.projected[j as usize];
                let dx = px as Real - g.mean2d.x;
                let dy = py as Real - g.mean2d.y;
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
                wsum += alpha * t_acc;
                if surface == 0.0 && wsum >= 0.5 {
                    surface = g.depth;
                }
                t_acc *= 1.0 - alpha;
                if t_acc < cfg.transmittance_stop {
                    break;
                }
            }
            depth.set(px, py, 0, surface);
        }
    }
    depth
}

/// Renders and writes the full synthetic dataset (TUM-style manifests with
/// PPM color and 16-bit PGM depth), the ground-truth trajectory, a matching
/// `config.ini` and the generating map as `map_gt.hpm`.
pub fn write_synthetic_dataset(spec: &SceneSpec, out_dir: &Path) -> Result<(), SynthError> {
    let io_wrap = |source: std::io::Error| SynthError::Io {
        path: out_dir.display().to_string(),
        source,
    };
    std::fs::create_dir_all(out_dir.join("rgb")).map_err(io_wrap)?;
    std::fs::create_dir_all(out_dir.join("depth")).map_err(io_wrap)?;

    let (prims, poses) = generate_scene(spec);
    let k = spec.intrinsics();
    let render_cfg = RenderConfig::default();

    let mut rgb_manifest = String::new();
    let mut depth_manifest = String::new();
    let mut gt = String::new();
    for (i, (ts, pose)) in poses.iter().enumerate() {
        let out = render(&prims, pose, &k, &render_cfg);
        let color_rel = format!("rgb/frame_{i:06}.ppm");
        let depth_rel = format!("depth/frame_{i:06}.pgm");
        io::write_ppm(&out_dir.join(&color_rel), &out.image)?;
        let depth = composite_depth(&out, &render_cfg);
        io::write_pgm16(&out_dir.join(&depth_rel), &depth, spec.depth_scale)?;

        let ts_str = io::fmt_g9(*ts);
        rgb_manifest.push_str(&format!("{ts_str} {color_rel}\n"));
        depth_manifest.push_str(&format!("{ts_str} {depth_rel}\n"));
        let wc = pose.inverse();
        let fields = [
            wc.translation.x,
            wc.translation.y,
            wc.translation.z,
            wc.rotation.i,
            wc.rotation.j,
            wc.rotation.k,
            wc.rotation.w,
        ];
        gt.push_str(&ts_str);
        for f in fields {
            gt.push(' ');
            gt.push_str(&io::fmt_g9(f));
        }
        gt.push('\n');
    }
    std::fs::write(out_dir.join("rgb.txt"), rgb_manifest).map_err(io_wrap)?;
    std::fs::write(out_dir.join("depth.txt"), depth_manifest).map_err(io_wrap)?;
    std::fs::write(out_dir.join("groundtruth.txt"), gt).map_err(io_wrap)?;

    let config = format!(
        "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\ndepth_scale = {}\n",
        spec.fx,
        spec.fy,
        spec.width as Real / 2.0,
        spec.height as Real / 2.0,
        spec.width,
        spec.height,
        spec.depth_scale
    );
    std::fs::write(out_dir.join("config.ini"), config).map_err(io_wrap)?;
    io::write_map(&out_dir.join("map_gt.hpm"), &prims)?;
    Ok(())
}
