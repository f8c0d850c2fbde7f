use std::collections::HashMap;

use thiserror::Error;

use super::{brief, Descriptor, Keypoint};
use crate::image::Image;
use crate::math::Real;

/// Minimum image side accepted by the extractor (descriptor patch size).
pub const MIN_IMAGE_SIZE: usize = 31;
/// Keypoints closer than this to an octave border are discarded so the
/// orientation patch stays inside the image.
pub const DETECTION_BORDER: usize = 16;

const FAST_THRESHOLD: Real = 20.0 / 255.0;
const FAST_ARC: usize = 9;
const HARRIS_K: Real = 0.04;
const HARRIS_BLOCK: i32 = 3; // 7x7 window
const ORIENTATION_RADIUS: i32 = 15;
const GRID_CELL: usize = 32;

/// Bresenham circle of radius 3, clockwise from 12 o'clock.
const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("image {width}x{height} is smaller than the {min}px patch")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
}

/// FAST-style segment-test corner detection with Harris re-scoring over a
/// scale pyramid, grid-based suppression, orientation assignment and steered
/// 256-bit binary descriptors.
pub fn extract_features(
    gray: &Image,
    target_count: usize,
    n_octaves: usize,
    scale_factor: Real,
) -> Result<(Vec<Keypoint>, Vec<Descriptor>), FeatureError> {
    assert_eq!(gray.channels(), 1, "extractor expects a grayscale image");
    assert!(target_count >= 1);
    assert!(n_octaves >= 1 && scale_factor > 1.0);
    if gray.width().min(gray.height()) < MIN_IMAGE_SIZE {
        return Err(FeatureError::ImageTooSmall {
            width: gray.width(),
            height: gray.height(),
            min: MIN_IMAGE_SIZE,
        });
    }

    let mut candidates: Vec<Keypoint> = Vec::new();
    let mut octave_images: Vec<(Image, Real)> = Vec::new();
    let mut prev = gray.clone();
    for octave in 0..n_octaves {
        let scale = scale_factor.powi(octave as i32);
        let w = (gray.width() as Real / scale).round() as usize;
        let h = (gray.height() as Real / scale).round() as usize;
        if w.min(h) < MIN_IMAGE_SIZE {
            break;
        }
        // Cascade from the previous octave: successive small resizes alias
        // far less than one big downscale.
        let img = if octave == 0 { prev.clone() } else { prev.resize(w, h) };
        // Double binomial blur (sigma ~1.6): descriptor comparisons need
        // more smoothing than detection does.
        let smoothed = img.blur5().blur5();
        candidates.extend(detect_octave(&img, &smoothed, octave, scale));
        octave_images.push((smoothed, scale));
        prev = img;
    }

    let selected = grid_suppress(candidates, gray.width(), gray.height(), target_count);

    let mut keypoints = Vec::with_capacity(selected.len());
    let mut descriptors = Vec::with_capacity(selected.len());
    for kp in selected {
        let (smoothed, scale) = &octave_images[kp.octave];
        let x = (kp.u + 0.5) / scale - 0.5;
        let y = (kp.v + 0.5) / scale - 0.5;
        let descriptor = brief::describe(smoothed, x, y, kp.angle);
        keypoints.push(kp);
        descriptors.push(descriptor);
    }
    Ok((keypoints, descriptors))
}

fn detect_octave(img: &Image, smoothed: &Image, octave: usize, scale: Real) -> Vec<Keypoint> {
    let w = img.width();
    let h = img.height();
    let border = DETECTION_BORDER;
    if w <= 2 * border || h <= 2 * border {
        return Vec::new();
    }

    let mut scores: HashMap<(usize, usize), Real> = HashMap::new();
    for y in border..h - border {
        for x in border..w - border {
            if !fast_segment_test(img, x, y) {
                continue;
            }
            let response = harris_response(img, x, y);
            if response > 0.0 {
                scores.insert((x, y), response);
            }
        }
    }

    let mut keypoints = Vec::new();
    for (&(x, y), &response) in &scores {
        let mut is_max = true;
        'nms: for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let nb = ((x as i32 + dx) as usize, (y as i32 + dy) as usize);
                if let Some(&other) = scores.get(&nb) {
                    // Strictly greater neighbor wins; ties break by position.
                    if other > response || (other == response && nb < (x, y)) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
        }
        if is_max {
            let angle = orientation(smoothed, x, y);
            // Sub-pixel peak: independent parabola fits through the Harris
            // response along each axis.
            let refine = |minus: Real, center: Real, plus: Real| -> Real {
                let denom = minus - 2.0 * center + plus;
                if denom.abs() < 1e-12 {
                    0.0
                } else {
                    (0.5 * (minus - plus) / denom).clamp(-0.5, 0.5)
                }
            };
            let du = refine(
                harris_response(img, x - 1, y),
                response,
                harris_response(img, x + 1, y),
            );
            let dv = refine(
                harris_response(img, x, y - 1),
                response,
                harris_response(img, x, y + 1),
            );
            keypoints.push(Keypoint {
                // Pixel centers: level-0 coordinate of octave pixel x is
                // (x + 0.5) * scale - 0.5, matching the resize convention.
                u: (x as Real + du + 0.5) * scale - 0.5,
                v: (y as Real + dv + 0.5) * scale - 0.5,
                octave,
                response,
                angle,
            });
        }
    }
    keypoints
}

fn fast_segment_test(img: &Image, x: usize, y: usize) -> bool {
    let center = img.get(x, y, 0);
    let hi = center + FAST_THRESHOLD;
    let lo = center - FAST_THRESHOLD;

    let mut bright = [false; 16];
    let mut dark = [false; 16];
    for (i, &(dx, dy)) in CIRCLE.iter().enumerate() {
        let v = img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize, 0);
        bright[i] = v > hi;
        dark[i] = v < lo;
    }
    has_arc(&bright) || has_arc(&dark)
}

fn has_arc(flags: &[bool; 16]) -> bool {
    let mut run = 0;
    // Scan twice around the circle to handle wrap-around runs.
    for i in 0..32 {
        if flags[i % 16] {
            run += 1;
            if run >= FAST_ARC {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}

fn harris_response(img: &Image, x: usize, y: usize) -> Real {
    let mut a = 0.0;
    let mut b = 0.0;
    let mut c = 0.0;
    for dy in -HARRIS_BLOCK..=HARRIS_BLOCK {
        for dx in -HARRIS_BLOCK..=HARRIS_BLOCK {
            let px = x as isize + dx as isize;
            let py = y as isize + dy as isize;
            let ix = img.get_clamped(px + 1, py, 0) - img.get_clamped(px - 1, py, 0);
            let iy = img.get_clamped(px, py + 1, 0) - img.get_clamped(px, py - 1, 0);
            a += ix * ix;
            b += ix * iy;
            c += iy * iy;
        }
    }
    (a * c - b * b) - HARRIS_K * (a + c) * (a + c)
}

/// Intensity-centroid orientation over a circular patch.
fn orientation(smoothed: &Image, x: usize, y: usize) -> Real {
    let mut m10 = 0.0;
    let mut m01 = 0.0;
    let r = ORIENTATION_RADIUS;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let v = smoothed.get_clamped(x as isize + dx as isize, y as isize + dy as isize, 0);
            m10 += dx as Real * v;
            m01 += dy as Real * v;
        }
    }
    if m10 == 0.0 && m01 == 0.0 {
        0.0
    } else {
        m01.atan2(m10)
    }
}

/// Spatial bucketing: each 32px cell (level-0 coordinates) keeps at most its
/// share of the budget, then the survivors are capped globally by response.
fn grid_suppress(
    mut candidates: Vec<Keypoint>,
    width: usize,
    height: usize,
    target_count: usize,
) -> Vec<Keypoint> {
    let cells_x = width.div_ceil(GRID_CELL);
    let cells_y = height.div_ceil(GRID_CELL);
    let quota = (target_count.div_ceil(cells_x * cells_y)).max(1);

    let sort_key = |kp: &Keypoint| {
        (
            std::cmp::Reverse(ordered(kp.response)),
            ordered(kp.u),
            ordered(kp.v),
            kp.octave,
        )
    };
    candidates.sort_by_key(sort_key);

    let mut cell_counts: HashMap<(usize, usize), usize> = HashMap::new();
    let mut selected = Vec::new();
    for kp in candidates {
        let cell = (
            (kp.u as usize).min(width - 1) / GRID_CELL,
            (kp.v as usize).min(height - 1) / GRID_CELL,
        );
        let count = cell_counts.entry(cell).or_insert(0);
        if *count < quota {
            *count += 1;
            selected.push(kp);
        }
        if selected.len() == target_count {
            break;
        }
    }
    selected.sort_by_key(sort_key);
    selected
}

fn ordered(v: Real) -> i64 {
    // Total order for well-behaved (finite) float keys.
    let bits = v.to_bits() as i64;
    bits ^ (((bits >> 63) as u64) >> 1) as i64
}
