//! Mean SSIM with an analytic gradient in window-correlation form.
//!
//! 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, computed per
//! channel at every pixel with clamped borders and averaged.

use super::PhotomapError;
use crate::image::Image;
use crate::math::Real;

const WINDOW: usize = 11;
const HALF: isize = 5;
const C1: Real = 0.01 * 0.01;
const C2: Real = 0.03 * 0.03;

fn window_weights() -> [Real; WINDOW] {
    let sigma = 1.5;
    let mut w = [0.0; WINDOW];
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as Real - HALF as Real;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

fn corr_h(src: &[Real], w: usize, h: usize, weights: &[Real; WINDOW], dst: &mut [Real]) {
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, wt) in weights.iter().enumerate() {
                let xi = (x as isize + i as isize - HALF).clamp(0, w as isize - 1) as usize;
                acc += wt * src[y * w + xi];
            }
            dst[y * w + x] = acc;
        }
    }
}

fn corr_v(src: &[Real], w: usize, h: usize, weights: &[Real; WINDOW], dst: &mut [Real]) {
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, wt) in weights.iter().enumerate() {
                let yi = (y as isize + i as isize - HALF).clamp(0, h as isize - 1) as usize;
                acc += wt * src[yi * w + x];
            }
            dst[y * w + x] = acc;
        }
    }
}

fn adj_h(src: &[Real], w: usize, h: usize, weights: &[Real; WINDOW], dst: &mut [Real]) {
    dst.fill(0.0);
    for y in 0..h {
        for x in 0..w {
            let v = src[y * w + x];
            for (i, wt) in weights.iter().enumerate() {
                let xi = (x as isize + i as isize - HALF).clamp(0, w as isize - 1) as usize;
                dst[y * w + xi] += wt * v;
            }
        }
    }
}

fn adj_v(src: &[Real], w: usize, h: usize, weights: &[Real; WINDOW], dst: &mut [Real]) {
    dst.fill(0.0);
    for y in 0..h {
        for x in 0..w {
            let v = src[y * w + x];
            for (i, wt) in weights.iter().enumerate() {
                let yi = (y as isize + i as isize - HALF).clamp(0, h as isize - 1) as usize;
                dst[yi * w + x] += wt * v;
            }
        }
    }
}

struct Corr {
    weights: [Real; WINDOW],
    width: usize,
    height: usize,
    scratch: Vec<Real>,
}

impl Corr {
    fn new(width: usize, height: usize) -> Self {
        Self {
            weights: window_weights(),
            width,
            height,
            scratch: vec![0.0; width * height],
        }
    }

    fn forward(&mut self, src: &[Real], dst: &mut [Real]) {
        corr_h(src, self.width, self.height, &self.weights, &mut self.scratch);
        corr_v(&self.scratch, self.width, self.height, &self.weights, dst);
    }

    /// Adjoint of `forward` (scatter with the same clamped indexing).
    fn adjoint(&mut self, src: &[Real], dst: &mut [Real]) {
        adj_v(src, self.width, self.height, &self.weights, &mut self.scratch);
        adj_h(&self.scratch, self.width, self.height, &self.weights, dst);
    }
}

fn check_dims(a: &Image, b: &Image) -> Result<(), PhotomapError> {
    if a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels() {
        return Err(PhotomapError::DimensionMismatch {
            a: (a.width(), a.height(), a.channels()),
            b: (b.width(), b.height(), b.channels()),
        });
    }
    Ok(())
}

/// Mean SSIM of two images with values in [0, 1].
pub fn ssim(a: &Image, b: &Image) -> Result<Real, PhotomapError> {
    ssim_with_grad(a, b).map(|(s, _)| s)
}

/// Mean SSIM plus its exact gradient w.r.t. the first image.
pub fn ssim_with_grad(x: &Image, y: &Image) -> Result<(Real, Image), PhotomapError> {
    check_dims(x, y)?;
    let (w, h, channels) = (x.width(), x.height(), x.channels());
    let n = w * h;
    let mut corr = Corr::new(w, h);

    let mut grad = Image::zeros(w, h, channels);
    let mut total = 0.0;

    let mut xp = vec![0.0; n];
    let mut yp = vec![0.0; n];
    let mut prod = vec![0.0; n];
    let mut mu_x = vec![0.0; n];
    let mut mu_y = vec![0.0; n];
    let mut ex2 = vec![0.0; n];
    let mut ey2 = vec![0.0; n];
    let mut exy = vec![0.0; n];
    let mut d_mu = vec![0.0; n];
    let mut d_ex2 = vec![0.0; n];
    let mut d_exy = vec![0.0; n];
    let mut adj = vec![0.0; n];

    let scale = 1.0 / (n * channels) as Real;
    for c in 0..channels {
        for i in 0..n {
            let (px, py) = (i % w, i / w);
            xp[i] = x.get(px, py, c);
            yp[i] = y.get(px, py, c);
        }
        for i in 0..n {
            prod[i] = xp[i] * xp[i];
        }
        corr.forward(&prod, &mut ex2);
        for i in 0..n {
            prod[i] = yp[i] * yp[i];
        }
        corr.forward(&prod, &mut ey2);
        for i in 0..n {
            prod[i] = xp[i] * yp[i];
        }
        corr.forward(&prod, &mut exy);
        corr.forward(&xp, &mut mu_x);
        corr.forward(&yp, &mut mu_y);

        for i in 0..n {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * (exy[i] - mx * my) + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = (ex2[i] - mx * mx) + (ey2[i] - my * my) + C2;
            let denom = b1 * b2;
            let s = a1 * a2 / denom;
            total += s;
            d_mu[i] = (2.0 * my * (a2 - a1)) / denom - 2.0 * mx * s * (1.0 / b1 - 1.0 / b2);
            d_ex2[i] = -s / b2;
            d_exy[i] = 2.0 * a1 / denom;
        }

        corr.adjoint(&d_mu, &mut adj);
        for i in 0..n {
            grad.data_mut()[i * channels + c] += adj[i] * scale;
        }
        corr.adjoint(&d_ex2, &mut adj);
        for i in 0..n {
            grad.data_mut()[i * channels + c] += 2.0 * xp[i] * adj[i] * scale;
        }
        corr.adjoint(&d_exy, &mut adj);
        for i in 0..n {
            grad.data_mut()[i * channels + c] += yp[i] * adj[i] * scale;
        }
    }

    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_images_score_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let img = Image::from_fn(24, 18, 3, |_, _, _| rng.random());
        assert_relative_eq!(ssim(&img, &img).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_images_score_one() {
        let a = Image::from_fn(16, 16, 3, |_, _, _| 0.5);
        let b = Image::from_fn(16, 16, 3, |_, _, _| 0.5);
        assert_relative_eq!(ssim(&a, &b).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn opposite_constants_match_closed_form() {
        let a = Image::from_fn(20, 20, 1, |_, _, _| 0.0);
        let b = Image::from_fn(20, 20, 1, |_, _, _| 1.0);
        assert_relative_eq!(ssim(&a, &b).unwrap(), C1 / (1.0 + C1), epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = Image::zeros(8, 8, 3);
        let b = Image::zeros(8, 9, 3);
        assert!(matches!(
            ssim(&a, &b),
            Err(PhotomapError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn correlation_adjoint_is_exact() {
        // <corr(x), y> must equal <x, adj(y)> for the gradient to be exact.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (13, 9);
        let x: Vec<Real> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<Real> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut corr = Corr::new(w, h);
        let mut fx = vec![0.0; w * h];
        let mut ay = vec![0.0; w * h];
        corr.forward(&x, &mut fx);
        corr.adjoint(&y, &mut ay);
        let lhs: Real = fx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: Real = x.iter().zip(ay.iter()).map(|(a, b)| a * b).sum();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Image::from_fn(16, 12, 3, |_, _, _| rng.random_range(0.05..0.95));
        let y = Image::from_fn(16, 12, 3, |_, _, _| rng.random_range(0.05..0.95));
        let (_, grad) = ssim_with_grad(&x, &y).unwrap();
        let h = 1e-6;
        for probe in 0..40 {
            let idx = (probe * 37) % x.data().len();
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            let fp = ssim(&xp, &y).unwrap();
            let fm = ssim(&xm, &y).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let a = grad.data()[idx];
            let denom = a.abs().max(fd.abs()).max(1e-9);
            assert!(
                (a - fd).abs() / denom < 1e-4,
                "idx {idx}: analytic {a} vs fd {fd}"
            );
        }
    }
}
