//! Flat key=value configuration exposing every tunable threshold. CLI flags
//! override file values.

use std::path::Path;

use hyperslam_core::localization::{BootstrapConfig, KeyframePolicy, LMConfig, MapPointConfig};
use hyperslam_core::loop_closure::LoopConfig;
use hyperslam_core::math::{Intrinsics, Real, TriangulationConfig};
use hyperslam_core::photomap::{GeometryDensifyConfig, TrainSchedule};
use hyperslam_core::splat::RenderConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected key=value, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
}

macro_rules! config_struct {
    ($($field:ident : $ty:ty = $default:expr),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct SystemConfig {
            $(pub $field: $ty,)*
        }

        impl Default for SystemConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl SystemConfig {
            /// Applies one `key=value` assignment.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.parse().map_err(|_| ConfigError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                        })?;
                    })*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// All keys, for diagnostics and docs.
            pub fn keys() -> &'static [&'static str] {
                &[$(stringify!($field)),*]
            }
        }
    };
}

config_struct! {
    // Camera intrinsics (ideal pinhole, rectified input).
    fx: Real = 250.0,
    fy: Real = 250.0,
    cx: Real = 160.0,
    cy: Real = 120.0,
    width: usize = 320,
    height: usize = 240,
    depth_scale: Real = 5000.0,

    // Feature extraction and matching.
    n_features: usize = 1000,
    n_octaves: usize = 8,
    scale_factor: Real = 1.2,
    match_max_hamming: u32 = 50,
    match_ratio: Real = 0.75,

    // Tracking and keyframing.
    huber_delta: Real = 2.447_856_619_860_675, // sqrt(5.99)
    lm_max_iterations: usize = 10,
    lm_initial_damping: Real = 1e-4,
    lm_damping_up: Real = 10.0,
    lm_damping_down: Real = 0.1,
    lm_convergence_tol: Real = 1e-6,
    kf_min_inliers: usize = 40,
    kf_ref_ratio: Real = 0.9,
    kf_max_frames: usize = 30,
    track_lost_floor: usize = 15,
    track_lost_frames: usize = 5,

    // Sparse mapping.
    eps_parallax_deg: Real = 1.0,
    tau_tri_px: Real = 2.0,
    theta_covis: usize = 15,

    // Monocular bootstrap.
    boot_min_points: usize = 50,
    boot_min_parallax_deg: Real = 1.0,
    boot_ransac_iterations: usize = 200,
    boot_inlier_px: Real = 1.5,

    // Rasterizer.
    tile_size: usize = 16,
    cov_floor: Real = 0.3,
    alpha_clamp: Real = 0.99,
    alpha_skip: Real = 0.003_921_568_627_450_98, // 1/255
    transmittance_stop: Real = 1e-4,
    cutoff_sigma: Real = 3.0,
    splat_z_near: Real = 0.2,

    // Photorealistic mapping.
    gp_top_level: usize = 2,
    iters_per_keyframe: usize = 30,
    lambda: Real = 0.2,
    lr_position: Real = 5e-3,
    lr_sh_dc: Real = 30.0,
    lr_sh_rest: Real = 1.5,
    lr_opacity: Real = 100.0,
    lr_scale: Real = 0.5,
    lr_rotation: Real = 0.05,
    densify_interval: usize = 100,
    densify_grad_threshold: Real = 1e-4,
    opacity_prune_threshold: Real = 0.005,
    max_screen_ratio: Real = 0.5,
    enable_geometry_densify: bool = true,
    mono_knn: usize = 4,
    mono_radius_px: Real = 100.0,
    optimizer_iters_per_frame: usize = 10,
    final_iters: usize = 1000,

    // Loop closure.
    enable_loop_closure: bool = true,
    gap_min: usize = 30,
    score_min: Real = 0.25,
    loop_inlier_min: usize = 20,
    tau_sim3: Real = 0.05,
    loop_ransac_iterations: usize = 100,

    // Run control.
    seed: u64 = 0,
    threads: usize = 1,
}

impl SystemConfig {
    /// Parses a `key=value` file; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        config.merge_file(path)?;
        Ok(config)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: idx + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let mut k = Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height);
        k.depth_scale = Some(self.depth_scale);
        k
    }

    pub fn lm_config(&self) -> LMConfig {
        LMConfig {
            max_iterations: self.lm_max_iterations,
            initial_damping: self.lm_initial_damping,
            damping_up: self.lm_damping_up,
            damping_down: self.lm_damping_down,
            huber_delta: self.huber_delta,
            convergence_tol: self.lm_convergence_tol,
        }
    }

    pub fn keyframe_policy(&self) -> KeyframePolicy {
        KeyframePolicy {
            min_inliers: self.kf_min_inliers,
            ref_ratio: self.kf_ref_ratio,
            max_frames: self.kf_max_frames,
        }
    }

    pub fn map_point_config(&self) -> MapPointConfig {
        MapPointConfig {
            max_hamming: self.match_max_hamming,
            ratio: self.match_ratio,
            triangulation: TriangulationConfig {
                min_parallax_deg: self.eps_parallax_deg,
                max_reproj_px: self.tau_tri_px,
            },
        }
    }

    pub fn bootstrap_config(&self) -> BootstrapConfig {
        BootstrapConfig {
            min_triangulated: self.boot_min_points,
            min_median_parallax_deg: self.boot_min_parallax_deg,
            ransac_iterations: self.boot_ransac_iterations,
            inlier_threshold_px: self.boot_inlier_px,
            match_max_hamming: self.match_max_hamming,
            match_ratio: self.match_ratio,
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            tile_size: self.tile_size,
            cov_floor: self.cov_floor,
            alpha_clamp: self.alpha_clamp,
            alpha_skip: self.alpha_skip,
            transmittance_stop: self.transmittance_stop,
            cutoff_sigma: self.cutoff_sigma,
            z_near: self.splat_z_near,
        }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        let mut s = TrainSchedule {
            top_level: self.gp_top_level,
            iters_per_level: 1,
            total_iters_per_keyframe: self.iters_per_keyframe,
            lambda: self.lambda,
            lr_position: self.lr_position,
            lr_sh_dc: self.lr_sh_dc,
            lr_sh_rest: self.lr_sh_rest,
            lr_opacity: self.lr_opacity,
            lr_scale: self.lr_scale,
            lr_rotation: self.lr_rotation,
            densify_interval: self.densify_interval,
            densify_grad_threshold: self.densify_grad_threshold,
            opacity_prune_threshold: self.opacity_prune_threshold,
            max_screen_ratio: self.max_screen_ratio,
        };
        s.rebalance_levels();
        s
    }

    pub fn geometry_densify_config(&self) -> GeometryDensifyConfig {
        GeometryDensifyConfig {
            knn: self.mono_knn,
            radius_px: self.mono_radius_px,
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            gap_min: self.gap_min,
            score_min: self.score_min,
            inlier_min: self.loop_inlier_min,
            tau_sim3: self.tau_sim3,
            ransac_iterations: self.loop_ransac_iterations,
            match_max_hamming: self.match_max_hamming,
            match_ratio: self.match_ratio,
        }
    }
}
