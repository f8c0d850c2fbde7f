//! Real spherical harmonics up to degree 3, in the basis ordering and with
//! the `+0.5` color offset used by the splatting renderer.

use thiserror::Error;

use crate::map::SH_COEFFS;
use crate::math::{Real, Vec3};

pub const SH_C0: Real = 0.282_094_791_773_878_14;
const SH_C1: Real = 0.488_602_511_902_919_9;
const SH_C2: [Real; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [Real; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

#[derive(Debug, Error, PartialEq)]
pub enum ShError {
    #[error("sh evaluation direction must be unit length (|dir| = {norm})")]
    NonUnitDirection { norm: Real },
}

/// Basis values for a unit direction.
pub fn sh_basis(dir: &Vec3) -> [Real; SH_COEFFS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Jacobian of every basis value w.r.t. the direction components.
pub fn sh_basis_grad(dir: &Vec3) -> [[Real; 3]; SH_COEFFS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        [0.0, 0.0, 0.0],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [SH_C2[0] * y, SH_C2[0] * x, 0.0],
        [0.0, SH_C2[1] * z, SH_C2[1] * y],
        [
            -2.0 * SH_C2[2] * x,
            -2.0 * SH_C2[2] * y,
            4.0 * SH_C2[2] * z,
        ],
        [SH_C2[3] * z, 0.0, SH_C2[3] * x],
        [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0],
        [
            SH_C3[0] * 6.0 * x * y,
            SH_C3[0] * (3.0 * xx - 3.0 * yy),
            0.0,
        ],
        [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y],
        [
            SH_C3[2] * (-2.0 * x * y),
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            SH_C3[2] * 8.0 * y * z,
        ],
        [
            SH_C3[3] * (-6.0 * x * z),
            SH_C3[3] * (-6.0 * y * z),
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ],
        [
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            SH_C3[4] * (-2.0 * x * y),
            SH_C3[4] * 8.0 * x * z,
        ],
        [
            SH_C3[5] * 2.0 * x * z,
            SH_C3[5] * (-2.0 * y * z),
            SH_C3[5] * (xx - yy),
        ],
        [
            SH_C3[6] * (3.0 * xx - 3.0 * yy),
            SH_C3[6] * (-6.0 * x * y),
            0.0,
        ],
    ]
}

/// Evaluates per-channel color for a view direction: basis-weighted sum of
/// the coefficients plus a 0.5 offset, clamped to be non-negative. Returns
/// both the clamped color and the pre-clamp values (the backward pass gates
/// gradients on the clamp).
pub fn sh_eval(
    sh: &[[Real; SH_COEFFS]; 3],
    dir: &Vec3,
) -> Result<([Real; 3], [Real; 3]), ShError> {
    let norm = dir.norm();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(ShError::NonUnitDirection { norm });
    }
    let basis = sh_basis(dir);
    let mut raw = [0.0; 3];
    for ch in 0..3 {
        let mut acc = 0.5;
        for (b, c) in basis.iter().zip(sh[ch].iter()) {
            acc += b * c;
        }
        raw[ch] = acc;
    }
    Ok((raw.map(|v: Real| v.max(0.0)), raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn degree_zero_is_isotropic() {
        let mut sh = [[0.0; SH_COEFFS]; 3];
        sh[0][0] = 0.8;
        sh[1][0] = -0.3;
        sh[2][0] = 0.1;
        for dir in [Vec3::z(), Vec3::x(), Vec3::new(0.6, 0.8, 0.0)] {
            let (color, _) = sh_eval(&sh, &dir).unwrap();
            assert_relative_eq!(color[0], 0.8 * SH_C0 + 0.5, epsilon = 1e-12);
            assert_relative_eq!(color[1], (-0.3f64 * SH_C0 + 0.5).max(0.0), epsilon = 1e-12);
            assert_relative_eq!(color[2], 0.1 * SH_C0 + 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn degree_one_z_asymmetry() {
        let mut sh = [[0.0; SH_COEFFS]; 3];
        let c1 = 0.2;
        sh[0][2] = c1;
        let (up, _) = sh_eval(&sh, &Vec3::z()).unwrap();
        let (down, _) = sh_eval(&sh, &(-Vec3::z())).unwrap();
        assert_relative_eq!(up[0] - down[0], 2.0 * 0.48860251 * c1, epsilon = 1e-7);
    }

    #[test]
    fn zero_direction_rejected() {
        let sh = [[0.0; SH_COEFFS]; 3];
        assert!(matches!(
            sh_eval(&sh, &Vec3::zeros()),
            Err(ShError::NonUnitDirection { .. })
        ));
    }

    #[test]
    fn basis_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let d = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let grad = sh_basis_grad(&d);
            let h = 1e-6;
            for axis in 0..3 {
                let mut dp = d;
                let mut dm = d;
                dp[axis] += h;
                dm[axis] -= h;
                let bp = sh_basis(&dp);
                let bm = sh_basis(&dm);
                for k in 0..SH_COEFFS {
                    let fd = (bp[k] - bm[k]) / (2.0 * h);
                    assert_relative_eq!(grad[k][axis], fd, epsilon = 1e-6, max_relative = 1e-6);
                }
            }
        }
    }
}
