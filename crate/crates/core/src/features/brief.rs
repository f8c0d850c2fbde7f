use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Descriptor;
use crate::image::Image;
use crate::math::Real;

/// Half-extent of the descriptor sampling pattern, pixels.
pub const PATTERN_RADIUS: i32 = 13;

/// Intensity margin for pair comparisons. Near-equal samples (flat or
/// empty regions) would otherwise produce bits decided by numerical noise.
pub const COMPARISON_MARGIN: crate::math::Real = 2.0 / 255.0;

/// 256 point pairs inside the 27x27 patch, drawn once from an isotropic
/// Gaussian (the classic BRIEF construction) with a fixed seed.
fn pattern() -> &'static [((i32, i32), (i32, i32)); 256] {
    static PATTERN: OnceLock<[((i32, i32), (i32, i32)); 256]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0b51_ef00);
        let sample = |rng: &mut ChaCha8Rng| -> (i32, i32) {
            let sigma = PATTERN_RADIUS as Real / 2.0;
            loop {
                let x = (gauss(rng) * sigma).round() as i32;
                let y = (gauss(rng) * sigma).round() as i32;
                if x.abs() <= PATTERN_RADIUS && y.abs() <= PATTERN_RADIUS {
                    return (x, y);
                }
            }
        };
        let mut pairs = [((0, 0), (0, 0)); 256];
        for pair in pairs.iter_mut() {
            let p = sample(&mut rng);
            let mut q = sample(&mut rng);
            while q == p {
                q = sample(&mut rng);
            }
            *pair = (p, q);
        }
        pairs
    })
}

fn gauss(rng: &mut ChaCha8Rng) -> Real {
    // Box-Muller; two uniforms per call keeps the stream simple.
    let u1: Real = rng.random_range(1e-12..1.0);
    let u2: Real = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Orientation bins for pattern steering. Quantization keeps small angle
/// noise from rotating the pattern continuously.
const ANGLE_BINS: Real = 12.0;

/// Steered BRIEF descriptor at pixel (x, y) of a smoothed octave image.
/// The pair pattern is rotated by `angle` (quantized to 30-degree bins) so
/// the descriptor follows the keypoint orientation.
pub fn describe(smoothed: &Image, x: Real, y: Real, angle: Real) -> Descriptor {
    let step = std::f64::consts::TAU / ANGLE_BINS;
    let angle = (angle / step).round() * step;
    let (sin, cos) = angle.sin_cos();
    let mut descriptor = Descriptor::zero();
    for (i, &((x1, y1), (x2, y2))) in pattern().iter().enumerate() {
        let rotate = |px: i32, py: i32| -> (isize, isize) {
            let rx = cos * px as Real - sin * py as Real;
            let ry = sin * px as Real + cos * py as Real;
            ((x + rx).round() as isize, (y + ry).round() as isize)
        };
        let (ax, ay) = rotate(x1, y1);
        let (bx, by) = rotate(x2, y2);
        if smoothed.get_clamped(ax, ay, 0) + COMPARISON_MARGIN < smoothed.get_clamped(bx, by, 0) {
            descriptor.set_bit(i);
        }
    }
    descriptor
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_is_stable_and_in_range() {
        let p1 = pattern();
        let p2 = pattern();
        assert_eq!(p1, p2);
        for &((x1, y1), (x2, y2)) in p1.iter() {
            for v in [x1, y1, x2, y2] {
                assert!(v.abs() <= PATTERN_RADIUS);
            }
        }
    }

    #[test]
    fn descriptor_differs_between_structures() {
        let blob = Image::from_fn(64, 64, 1, |x, y, _| {
            let dx = x as Real - 32.0;
            let dy = y as Real - 20.0;
            (-(dx * dx + dy * dy) / 40.0).exp()
        });
        let gradient = Image::from_fn(64, 64, 1, |x, _, _| x as Real / 64.0);
        let d1 = describe(&blob.blur5(), 32.0, 32.0, 0.0);
        let d2 = describe(&gradient.blur5(), 32.0, 32.0, 0.0);
        assert!(d1.hamming(&d2) > 30);
    }
}
