//! Dataset ingestion: TUM-style manifests and Replica-style directories.

use std::path::{Path, PathBuf};

use hyperslam_core::image::Image;
use hyperslam_core::math::{Pose, Quat, Real, Vec3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing manifest {0}")]
    MissingManifest(PathBuf),
    #[error("sequence in {0} is empty")]
    EmptySequence(PathBuf),
    #[error("{path}:{line}: malformed pose row (need {need} values)")]
    MalformedPose {
        path: PathBuf,
        line: usize,
        need: usize,
    },
    #[error("{path}:{line}: malformed manifest line")]
    MalformedLine { path: PathBuf, line: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
}

/// One input frame: color (by path), optional depth, optional ground-truth
/// camera-to-world pose.
#[derive(Debug, Clone)]
pub struct SequenceFrame {
    pub timestamp: Real,
    pub color: PathBuf,
    pub depth: Option<PathBuf>,
    /// Camera-to-world (dataset convention).
    pub gt_pose: Option<Pose>,
}

/// Maximum timestamp distance for cross-stream association, seconds.
pub const ASSOCIATION_WINDOW: Real = 0.02;

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

/// Parses "timestamp path" rows.
fn parse_stamped_paths(path: &Path) -> Result<Vec<(Real, PathBuf)>, DatasetError> {
    let mut out = Vec::new();
    for (line, text) in read_lines(path)? {
        let mut parts = text.split_whitespace();
        let (Some(ts), Some(rel)) = (parts.next(), parts.next()) else {
            return Err(DatasetError::MalformedLine {
                path: path.to_path_buf(),
                line,
            });
        };
        let ts: Real = ts.parse().map_err(|_| DatasetError::MalformedLine {
            path: path.to_path_buf(),
            line,
        })?;
        out.push((ts, path.parent().unwrap().join(rel)));
    }
    Ok(out)
}

/// Parses "timestamp tx ty tz qx qy qz qw" rows into camera-to-world poses.
pub fn parse_trajectory(path: &Path) -> Result<Vec<(Real, Pose)>, DatasetError> {
    let mut out = Vec::new();
    for (line, text) in read_lines(path)? {
        let values: Vec<Real> = text
            .split_whitespace()
            .map(|v| v.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| DatasetError::MalformedPose {
                path: path.to_path_buf(),
                line,
                need: 8,
            })?;
        if values.len() != 8 {
            return Err(DatasetError::MalformedPose {
                path: path.to_path_buf(),
                line,
                need: 8,
            });
        }
        let rotation = Quat::from_quaternion(nalgebra::Quaternion::new(
            values[7], values[4], values[5], values[6],
        ));
        out.push((
            values[0],
            Pose::new(rotation, Vec3::new(values[1], values[2], values[3])),
        ));
    }
    Ok(out)
}

fn associate<T: Clone>(items: &[(Real, T)], t: Real) -> Option<T> {
    items
        .iter()
        .map(|(ts, v)| ((ts - t).abs(), v))
        .filter(|(dt, _)| *dt <= ASSOCIATION_WINDOW)
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .map(|(_, v)| v.clone())
}

/// TUM-style directory: `rgb.txt` plus optional `depth.txt` and
/// `groundtruth.txt`, associated by nearest timestamp.
pub fn load_tum_sequence(dir: &Path) -> Result<Vec<SequenceFrame>, DatasetError> {
    let rgb_manifest = dir.join("rgb.txt");
    if !rgb_manifest.exists() {
        return Err(DatasetError::MissingManifest(rgb_manifest));
    }
    let rgb = parse_stamped_paths(&rgb_manifest)?;
    if rgb.is_empty() {
        return Err(DatasetError::EmptySequence(dir.to_path_buf()));
    }
    let depth = if dir.join("depth.txt").exists() {
        parse_stamped_paths(&dir.join("depth.txt"))?
    } else {
        Vec::new()
    };
    let gt = if dir.join("groundtruth.txt").exists() {
        parse_trajectory(&dir.join("groundtruth.txt"))?
    } else {
        Vec::new()
    };

    let frames = rgb
        .into_iter()
        .map(|(timestamp, color)| SequenceFrame {
            timestamp,
            color,
            depth: associate(&depth, timestamp),
            gt_pose: associate(&gt, timestamp),
        })
        .collect();
    Ok(frames)
}

/// Replica-style directory: `results/frameNNNNNN.jpg`,
/// `results/depthNNNNNN.png` and `traj.txt` rows of row-major 4x4
/// camera-to-world matrices, one per frame at 30 Hz.
pub fn load_replica_sequence(dir: &Path) -> Result<Vec<SequenceFrame>, DatasetError> {
    let traj_path = dir.join("traj.txt");
    if !traj_path.exists() {
        return Err(DatasetError::MissingManifest(traj_path));
    }
    let results = dir.join("results");

    let mut poses = Vec::new();
    for (line, text) in read_lines(&traj_path)? {
        let values: Vec<Real> = text
            .split_whitespace()
            .map(|v| v.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| DatasetError::MalformedPose {
                path: traj_path.clone(),
                line,
                need: 16,
            })?;
        if values.len() != 16 || values.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::MalformedPose {
                path: traj_path.clone(),
                line,
                need: 16,
            });
        }
        let rot = nalgebra::Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8],
            values[9], values[10],
        );
        let rotation = Quat::from_rotation_matrix(&nalgebra::Rotation3::from_matrix(&rot));
        poses.push(Pose::new(
            rotation,
            Vec3::new(values[3], values[7], values[11]),
        ));
    }

    let mut frames = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let color_jpg = results.join(format!("frame{i:06}.jpg"));
        let color_png = results.join(format!("frame{i:06}.png"));
        let color = if color_jpg.exists() {
            color_jpg
        } else if color_png.exists() {
            color_png
        } else {
            continue;
        };
        let depth = results.join(format!("depth{i:06}.png"));
        frames.push(SequenceFrame {
            timestamp: i as Real / 30.0,
            color,
            depth: depth.exists().then_some(depth),
            gt_pose: Some(*pose),
        });
    }
    if frames.is_empty() {
        return Err(DatasetError::EmptySequence(dir.to_path_buf()));
    }
    Ok(frames)
}

/// Decodes a color image into an HxWx3 buffer in [0, 1].
pub fn load_color(path: &Path) -> Result<Image, DatasetError> {
    let img = image::open(path)
        .map_err(|source| DatasetError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::zeros(w, h, 3);
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(x as usize, y as usize, c, pixel[c] as Real / 255.0);
        }
    }
    Ok(out)
}

/// Decodes a 16-bit depth image; raw values divide by `depth_scale` to give
/// meters, zeros stay invalid.
pub fn load_depth(path: &Path, depth_scale: Real) -> Result<Image, DatasetError> {
    let img = image::open(path)
        .map_err(|source| DatasetError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::zeros(w, h, 1);
    for (x, y, pixel) in img.enumerate_pixels() {
        out.set(x as usize, y as usize, 0, pixel[0] as Real / depth_scale);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn tum_sequence_associates_streams() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("rgb.txt"),
            "# rgb\n1.00 rgb/a.png\n2.00 rgb/b.png\n3.00 rgb/c.png\n",
        )
        .unwrap();
        fs::write(
            dir.path().join("depth.txt"),
            "1.005 depth/a.png\n2.50 depth/b.png\n",
        )
        .unwrap();
        fs::write(
            dir.path().join("groundtruth.txt"),
            "1.001 0 0 0 0 0 0 1\n2.0 1 0 0 0 0 0 1\n3.019 2 0 0 0 0 0 1\n",
        )
        .unwrap();
        let frames = load_tum_sequence(dir.path()).unwrap();
        assert_eq!(frames.len(), 3);
        // Frame 1: depth at 0.005 s offset associates; frame 2's nearest
        // depth is 0.5 s away and must not.
        assert!(frames[0].depth.is_some());
        assert!(frames[1].depth.is_none());
        assert!(frames[2].depth.is_none());
        assert!(frames.iter().all(|f| f.gt_pose.is_some()));
        assert_eq!(frames[1].gt_pose.unwrap().translation.x, 1.0);
    }

    #[test]
    fn tum_missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_tum_sequence(dir.path()),
            Err(DatasetError::MissingManifest(_))
        ));
    }

    #[test]
    fn replica_pose_rows_parse_or_reject() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("results")).unwrap();
        // Identity row and one translated row.
        fs::write(
            dir.path().join("traj.txt"),
            "1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1\n1 0 0 0.5 0 1 0 0 0 0 1 0 0 0 0 1\n",
        )
        .unwrap();
        for i in 0..2 {
            // Tiny valid PPM/PNG stand-ins.
            let img = image::RgbImage::new(4, 4);
            img.save(dir.path().join(format!("results/frame{i:06}.png")))
                .unwrap();
        }
        let frames = load_replica_sequence(dir.path()).unwrap();
        assert_eq!(frames.len(), 2);
        let p0 = frames[0].gt_pose.unwrap();
        assert_eq!(p0.translation, Vec3::zeros());
        assert_eq!(p0.rotation.angle(), 0.0);
        assert_eq!(frames[1].gt_pose.unwrap().translation.x, 0.5);

        // A 15-value row is malformed.
        fs::write(
            dir.path().join("traj.txt"),
            "1 0 0 0 0 1 0 0 0 0 1 0 0 0 0\n",
        )
        .unwrap();
        assert!(matches!(
            load_replica_sequence(dir.path()),
            Err(DatasetError::MalformedPose { need: 16, .. })
        ));
    }
}
