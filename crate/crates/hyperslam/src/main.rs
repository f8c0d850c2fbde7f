use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hyperslam_core::localization::SensorMode;
use hyperslam_core::splat::render;

use hyperslam::config::SystemConfig;
use hyperslam::io;
use hyperslam::synth::{write_synthetic_dataset, SceneSpec};
use hyperslam::system::run_slam;
use hyperslam::{dataset, PipelineError};

#[derive(Parser)]
#[command(name = "hyperslam", about = "Simultaneous localization and photorealistic mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tum,
    Replica,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mono,
    Rgbd,
    Stereo,
}

#[derive(Args)]
struct CommonConfig {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual overrides, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run SLAM over a dataset directory.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: CommonConfig,
    },
    /// Render a saved map along a trajectory.
    Render {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonConfig,
    },
    /// Generate a synthetic dataset (map, trajectory, rendered frames).
    Synth {
        /// Scene spec file (key=value); defaults apply when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn build_config(common: &CommonConfig, implied: Option<PathBuf>) -> Result<SystemConfig> {
    let mut config = SystemConfig::default();
    let path = common.config.clone().or(implied);
    if let Some(path) = path {
        config
            .merge_file(&path)
            .with_context(|| format!("loading config {}", path.display()))?;
    }
    for assignment in &common.set {
        let (key, value) = assignment
            .split_once('=')
            .with_context(|| format!("--set needs key=value, got `{assignment}`"))?;
        config.set(key.trim(), value.trim())?;
    }
    Ok(config)
}

fn cmd_run(
    dataset_dir: PathBuf,
    format: Format,
    mode: Mode,
    out: PathBuf,
    threads: Option<usize>,
    seed: Option<u64>,
    common: CommonConfig,
) -> Result<ExitCode> {
    let sensor = match mode {
        Mode::Mono => SensorMode::Mono,
        Mode::Rgbd => SensorMode::Rgbd,
        Mode::Stereo => bail!("stereo mode is not supported by this build"),
    };
    // A config shipped inside the dataset applies unless --config overrides.
    let implied = dataset_dir.join("config.ini");
    let mut config = build_config(&common, implied.exists().then_some(implied))?;
    if let Some(threads) = threads {
        config.threads = threads;
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if config.threads <= 1 {
        // Keep the renderer single-threaded too: fully deterministic runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }

    let frames = match format {
        Format::Tum | Format::Synthetic => dataset::load_tum_sequence(&dataset_dir)?,
        Format::Replica => dataset::load_replica_sequence(&dataset_dir)?,
    };
    eprintln!("loaded {} frames from {}", frames.len(), dataset_dir.display());

    match run_slam(&frames, &config, sensor) {
        Ok((report, map)) => {
            io::write_outputs(&report, &map, &config.render_config(), &out)?;
            eprintln!(
                "keyframes {} primitives {} psnr {:.2} dB ssim {:.3}{}",
                report.n_keyframes,
                report.n_primitives,
                report.psnr,
                report.ssim,
                report
                    .ate_rmse
                    .map(|r| format!(" ate {:.4} m", r))
                    .unwrap_or_default()
            );
            if report.tracking_lost {
                eprintln!("tracking lost: partial results written");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(PipelineError::InitializationFailed) => {
            eprintln!("tracking never initialized");
            Ok(ExitCode::from(2))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_render(map_path: PathBuf, pose_path: PathBuf, out: PathBuf, common: CommonConfig) -> Result<ExitCode> {
    let config = build_config(&common, None)?;
    let prims = io::read_map(&map_path)?;
    let trajectory = io::read_trajectory(&pose_path)?;
    std::fs::create_dir_all(&out)?;
    let k = config.intrinsics();
    let render_cfg = config.render_config();
    for (i, entry) in trajectory.iter().enumerate() {
        // Trajectory rows are camera-to-world; rendering wants the inverse.
        let wc = hyperslam_core::math::Pose::new(
            hyperslam_core::math::Quat::from_quaternion(nalgebra::Quaternion::new(
                entry.qw, entry.qx, entry.qy, entry.qz,
            )),
            hyperslam_core::math::Vec3::new(entry.tx, entry.ty, entry.tz),
        );
        let pose = wc.inverse();
        let outimg = render(&prims, &pose, &k, &render_cfg);
        io::write_ppm(&out.join(format!("{i:06}.ppm")), &outimg.image)?;
    }
    eprintln!("rendered {} views to {}", trajectory.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(scene: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<ExitCode> {
    let mut spec = match scene {
        Some(path) => SceneSpec::from_file(&path)?,
        None => SceneSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    write_synthetic_dataset(&spec, &out)?;
    eprintln!(
        "wrote {} frames of a {}-primitive scene to {}",
        spec.n_frames,
        spec.n_primitives,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            dataset,
            format,
            mode,
            out,
            threads,
            seed,
            common,
        } => cmd_run(dataset, format, mode, out, threads, seed, common),
        Command::Render {
            map,
            pose,
            out,
            common,
        } => cmd_render(map, pose, out, common),
        Command::Synth { scene, out, seed } => cmd_synth(scene, out, seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
