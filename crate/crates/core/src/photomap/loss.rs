use super::ssim::ssim_with_grad;
use super::PhotomapError;
use crate::image::Image;
use crate::math::Real;

/// Photometric loss `(1 - lambda) * L1 + lambda * (1 - SSIM)` and its exact
/// gradient w.r.t. the rendered image. The L1 subgradient at zero is zero.
pub fn photometric_loss(
    render: &Image,
    gt: &Image,
    lambda: Real,
) -> Result<(Real, Image), PhotomapError> {
    if render.width() != gt.width()
        || render.height() != gt.height()
        || render.channels() != gt.channels()
    {
        return Err(PhotomapError::DimensionMismatch {
            a: (render.width(), render.height(), render.channels()),
            b: (gt.width(), gt.height(), gt.channels()),
        });
    }

    let n = render.data().len() as Real;
    let mut l1 = 0.0;
    let mut grad = Image::zeros(render.width(), render.height(), render.channels());
    for (i, (r, g)) in render.data().iter().zip(gt.data().iter()).enumerate() {
        let d = r - g;
        l1 += d.abs();
        grad.data_mut()[i] = (1.0 - lambda) * d.signum() * ((d != 0.0) as u8 as Real) / n;
    }
    l1 /= n;

    if lambda == 0.0 {
        return Ok((l1, grad));
    }

    let (ssim_value, ssim_grad) = ssim_with_grad(render, gt)?;
    let loss = (1.0 - lambda) * l1 + lambda * (1.0 - ssim_value);
    for (g, sg) in grad.data_mut().iter_mut().zip(ssim_grad.data().iter()) {
        *g -= lambda * sg;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_images_have_zero_loss_and_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let img = Image::from_fn(20, 14, 3, |_, _, _| rng.random());
        for lambda in [0.0, 0.2, 1.0] {
            let (loss, grad) = photometric_loss(&img, &img, lambda).unwrap();
            assert_relative_eq!(loss, 0.0, epsilon = 1e-12);
            // SSIM's gradient terms cancel analytically at x == y; only
            // rounding noise remains.
            assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
        }
    }

    #[test]
    fn lambda_zero_is_mean_absolute_error() {
        let a = Image::from_fn(8, 8, 3, |x, _, _| x as Real / 10.0);
        let b = Image::from_fn(8, 8, 3, |x, _, _| x as Real / 10.0 + 0.05);
        let (loss, _) = photometric_loss(&a, &b, 0.0).unwrap();
        assert_relative_eq!(loss, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let render = Image::from_fn(32, 32, 3, |_, _, _| rng.random_range(0.05..0.95));
        let gt = Image::from_fn(32, 32, 3, |_, _, _| rng.random_range(0.05..0.95));
        let (_, grad) = photometric_loss(&render, &gt, 0.2).unwrap();
        let h = 1e-5;
        for probe in 0..60 {
            let idx = (probe * 53) % render.data().len();
            let mut rp = render.clone();
            let mut rm = render.clone();
            rp.data_mut()[idx] += h;
            rm.data_mut()[idx] -= h;
            let (fp, _) = photometric_loss(&rp, &gt, 0.2).unwrap();
            let (fm, _) = photometric_loss(&rm, &gt, 0.2).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let a = grad.data()[idx];
            let denom = a.abs().max(fd.abs()).max(1e-9);
            assert!(
                (a - fd).abs() / denom < 1e-3,
                "idx {idx}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = Image::zeros(8, 8, 3);
        let b = Image::zeros(9, 8, 3);
        assert!(matches!(
            photometric_loss(&a, &b, 0.2),
            Err(PhotomapError::DimensionMismatch { .. })
        ));
    }
}
