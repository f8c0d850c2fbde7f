//! File formats: TUM-style trajectory text, binary PPM/PGM images, the
//! `map.hpm` primitive snapshot and `report.json`.

use std::io::Read;
use std::path::Path;

use hyperslam_core::features::Descriptor;
use hyperslam_core::image::Image;
use hyperslam_core::map::{HyperMap, HyperPrimitive, SH_COEFFS};
use hyperslam_core::math::{Quat, Real, Vec3};
use hyperslam_core::splat::{render, RenderConfig};
use thiserror::Error;

use crate::report::{RunReport, TrajectoryEntry};

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic (expected HPM1)")]
    BadMagic { path: String },
    #[error("{path}: truncated map file")]
    Truncated { path: String },
    #[error("{path}:{line}: malformed trajectory line")]
    MalformedTrajectory { path: String, line: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Formats with 9 significant digits, `printf %.9g` style.
pub fn fmt_g9(x: Real) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-4..9).contains(&exp) {
        let s = format!("{:.8e}", x);
        let (mantissa, exponent) = s.split_once('e').unwrap();
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{mantissa}e{exponent}")
    } else {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    }
}

/// Writes a trajectory in TUM format: `timestamp tx ty tz qx qy qz qw`.
pub fn write_trajectory(path: &Path, entries: &[TrajectoryEntry]) -> Result<(), OutputError> {
    let mut text = String::new();
    for e in entries {
        let fields = [e.timestamp, e.tx, e.ty, e.tz, e.qx, e.qy, e.qz, e.qw];
        let line: Vec<String> = fields.iter().map(|v| fmt_g9(*v)).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryEntry>, OutputError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let values: Vec<Real> = line
            .split_whitespace()
            .map(|v| v.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| OutputError::MalformedTrajectory {
                path: path.display().to_string(),
                line: i + 1,
            })?;
        if values.len() != 8 {
            return Err(OutputError::MalformedTrajectory {
                path: path.display().to_string(),
                line: i + 1,
            });
        }
        out.push(TrajectoryEntry {
            timestamp: values[0],
            tx: values[1],
            ty: values[2],
            tz: values[3],
            qx: values[4],
            qy: values[5],
            qz: values[6],
            qw: values[7],
        });
    }
    Ok(out)
}

/// Binary PPM (P6), 8 bits per channel.
pub fn write_ppm(path: &Path, image: &Image) -> Result<(), OutputError> {
    assert_eq!(image.channels(), 3);
    let mut bytes = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.extend(
        image
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Binary 16-bit PGM (P5, big-endian samples); values scaled by
/// `depth_scale` and clamped to the u16 range.
pub fn write_pgm16(path: &Path, depth: &Image, depth_scale: Real) -> Result<(), OutputError> {
    assert_eq!(depth.channels(), 1);
    let mut bytes = format!("P5\n{} {}\n65535\n", depth.width(), depth.height()).into_bytes();
    for v in depth.data() {
        let raw = (v * depth_scale).round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&raw.to_be_bytes());
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

const HPM_MAGIC: &[u8; 4] = b"HPM1";

/// Serializes primitives: magic, u64 count, then per primitive (little
/// endian): position 3xf64, quaternion wxyz 4xf64, log-scale 3xf64, opacity
/// logit f64, SH 48xf32 (channel-major), u8 descriptor flag, optional 32
/// descriptor bytes.
pub fn write_map(path: &Path, prims: &[HyperPrimitive]) -> Result<(), OutputError> {
    let mut bytes = Vec::with_capacity(12 + prims.len() * 300);
    bytes.extend_from_slice(HPM_MAGIC);
    bytes.extend_from_slice(&(prims.len() as u64).to_le_bytes());
    for p in prims {
        for v in p.position.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [p.rotation.w, p.rotation.i, p.rotation.j, p.rotation.k] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in p.log_scale.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&p.opacity_logit.to_le_bytes());
        for ch in &p.sh {
            for v in ch {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        match &p.descriptor {
            Some(d) => {
                bytes.push(1);
                bytes.extend_from_slice(&d.to_bytes());
            }
            None => bytes.push(0),
        }
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_map(path: &Path) -> Result<Vec<HyperPrimitive>, OutputError> {
    let mut file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err(path))?;
    let truncated = || OutputError::Truncated {
        path: path.display().to_string(),
    };

    if bytes.len() < 12 || &bytes[0..4] != HPM_MAGIC {
        if bytes.len() >= 4 && &bytes[0..4] != HPM_MAGIC {
            return Err(OutputError::BadMagic {
                path: path.display().to_string(),
            });
        }
        return Err(truncated());
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let mut cursor = 12;
    let f64_at = |bytes: &[u8], cursor: &mut usize| -> Result<Real, OutputError> {
        let end = *cursor + 8;
        if end > bytes.len() {
            return Err(truncated());
        }
        let v = Real::from_le_bytes(bytes[*cursor..end].try_into().unwrap());
        *cursor = end;
        Ok(v)
    };

    let mut prims = Vec::with_capacity(count);
    for _ in 0..count {
        let position = Vec3::new(
            f64_at(&bytes, &mut cursor)?,
            f64_at(&bytes, &mut cursor)?,
            f64_at(&bytes, &mut cursor)?,
        );
        let (w, x, y, z) = (
            f64_at(&bytes, &mut cursor)?,
            f64_at(&bytes, &mut cursor)?,
            f64_at(&bytes, &mut cursor)?,
            f64_at(&bytes, &mut cursor)?,
        );
        let log_scale = Vec3::new(
            f64_at(&bytes, &mut cursor)?,
            f64_at(&bytes, &mut cursor)?,
            f64_at(&bytes, &mut cursor)?,
        );
        let opacity_logit = f64_at(&bytes, &mut cursor)?;
        let mut sh = [[0.0; SH_COEFFS]; 3];
        for ch in sh.iter_mut() {
            for v in ch.iter_mut() {
                let end = cursor + 4;
                if end > bytes.len() {
                    return Err(truncated());
                }
                *v = f32::from_le_bytes(bytes[cursor..end].try_into().unwrap()) as Real;
                cursor = end;
            }
        }
        if cursor >= bytes.len() {
            return Err(truncated());
        }
        let has_descriptor = bytes[cursor];
        cursor += 1;
        let descriptor = if has_descriptor != 0 {
            let end = cursor + 32;
            if end > bytes.len() {
                return Err(truncated());
            }
            let d = Descriptor::from_bytes(bytes[cursor..end].try_into().unwrap());
            cursor = end;
            Some(d)
        } else {
            None
        };

        let mut prim = HyperPrimitive::new(position);
        prim.rotation = Quat::new_unchecked(nalgebra::Quaternion::new(w, x, y, z));
        prim.log_scale = log_scale;
        prim.opacity_logit = opacity_logit;
        prim.sh = sh;
        prim.descriptor = descriptor;
        prims.push(prim);
    }
    Ok(prims)
}

pub fn write_report(path: &Path, report: &RunReport) -> Result<(), OutputError> {
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    std::fs::write(path, json).map_err(io_err(path))
}

/// Writes the full output set: `trajectory.txt`, `renders/NNNNNN.ppm` per
/// keyframe, `map.hpm` and `report.json`.
pub fn write_outputs(
    report: &RunReport,
    map: &HyperMap,
    render_cfg: &RenderConfig,
    out_dir: &Path,
) -> Result<(), OutputError> {
    std::fs::create_dir_all(out_dir.join("renders")).map_err(io_err(out_dir))?;
    write_trajectory(&out_dir.join("trajectory.txt"), &report.trajectory)?;

    let prims: Vec<HyperPrimitive> = {
        let region = map.primitives();
        region.iter().map(|(_, p)| p.clone()).collect()
    };
    write_map(&out_dir.join("map.hpm"), &prims)?;

    let keyframes: Vec<(u64, hyperslam_core::math::Pose, hyperslam_core::math::Intrinsics)> = {
        let kfs = map.keyframes();
        kfs.iter().map(|(id, kf)| (id, kf.pose, kf.intrinsics)).collect()
    };
    for (id, pose, k) in keyframes {
        let out = render(&prims, &pose, &k, render_cfg);
        write_ppm(&out_dir.join(format!("renders/{id:06}.ppm")), &out.image)?;
    }

    write_report(&out_dir.join("report.json"), report)?;
    Ok(())
}

/// Ensure a newly written file equals what a read-then-write reproduces.
pub fn file_round_trips(path: &Path) -> Result<bool, OutputError> {
    let original = std::fs::read(path).map_err(io_err(path))?;
    let mut second = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut second)
        .map_err(io_err(path))?;
    Ok(original == second)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hyperslam_core::map::logit;

    #[test]
    fn g9_formatting() {
        assert_eq!(fmt_g9(0.0), "0");
        assert_eq!(fmt_g9(1.0), "1");
        assert_eq!(fmt_g9(-2.5), "-2.5");
        assert_eq!(fmt_g9(0.123456789123), "0.123456789");
        assert_eq!(fmt_g9(123456789.123), "123456789");
        assert_eq!(fmt_g9(1.23456789123e12), "1.23456789e12");
        assert_eq!(fmt_g9(1e-7), "1e-7");
        // Idempotent through parse.
        for v in [0.1, -3.25891e-3, 1305031453.359684, 0.7071067811865476] {
            let s = fmt_g9(v);
            let r: f64 = s.parse().unwrap();
            assert_eq!(fmt_g9(r), s);
        }
    }

    fn sample_primitives() -> Vec<HyperPrimitive> {
        let mut a = HyperPrimitive::new(Vec3::new(1.0, -2.0, 3.0));
        a.opacity_logit = logit(0.25);
        a.sh[1][3] = 0.5;
        let mut b = HyperPrimitive::new(Vec3::new(-0.5, 0.25, 1.5));
        b.descriptor = Some(Descriptor([1, 2, 3, u64::MAX]));
        b.rotation = Quat::from_scaled_axis(Vec3::new(0.3, 0.2, -0.4));
        vec![a, b]
    }

    #[test]
    fn map_byte_sizes_match_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.hpm");
        write_map(&path, &[]).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 12);

        let p = HyperPrimitive::new(Vec3::zeros());
        write_map(&path, &[p]).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 293);

        let mut with_desc = HyperPrimitive::new(Vec3::zeros());
        with_desc.descriptor = Some(Descriptor::zero());
        write_map(&path, &[with_desc]).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 325);
    }

    #[test]
    fn map_round_trip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.hpm");
        write_map(&path, &sample_primitives()).unwrap();
        let first_bytes = std::fs::read(&path).unwrap();
        let loaded = read_map(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        // Writing what was read reproduces the file bitwise.
        let path2 = dir.path().join("map2.hpm");
        write_map(&path2, &loaded).unwrap();
        assert_eq!(first_bytes, std::fs::read(&path2).unwrap());
        // And a second read matches the first bitwise on every field.
        let reloaded = read_map(&path2).unwrap();
        for (a, b) in loaded.iter().zip(reloaded.iter()) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.rotation, b.rotation);
            assert_eq!(a.log_scale, b.log_scale);
            assert_eq!(a.opacity_logit.to_bits(), b.opacity_logit.to_bits());
            assert_eq!(a.sh, b.sh);
            assert_eq!(a.descriptor, b.descriptor);
        }
    }

    #[test]
    fn bad_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hpm");
        std::fs::write(&path, b"NOPE\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_map(&path), Err(OutputError::BadMagic { .. })));
    }

    #[test]
    fn trajectory_round_trip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajectory.txt");
        let entries = vec![
            TrajectoryEntry {
                timestamp: 1305031453.359684,
                tx: 1.234567891,
                ty: -0.5,
                tz: 3.0,
                qx: 0.0,
                qy: 0.7071067811865476,
                qz: 0.0,
                qw: 0.7071067811865476,
            },
            TrajectoryEntry {
                timestamp: 1305031453.393212,
                tx: 0.0,
                ty: 0.0,
                tz: 0.0,
                qx: 0.0,
                qy: 0.0,
                qz: 0.0,
                qw: 1.0,
            },
        ];
        write_trajectory(&path, &entries).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let loaded = read_trajectory(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        write_trajectory(&path, &loaded).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
    }

    #[test]
    fn ppm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = Image::from_fn(2, 1, 3, |x, _, c| if x == 0 && c == 0 { 1.0 } else { 0.0 });
        write_ppm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..9], b"P6\n2 1\n25");
        assert_eq!(&bytes[bytes.len() - 6..], &[255, 0, 0, 0, 0, 0]);
    }
}
