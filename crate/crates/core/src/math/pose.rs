use super::{skew, Mat3, Quat, Real, Vec3};

/// Rigid transform mapping world coordinates to camera coordinates:
/// `p_cam = R * p_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Quat::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Left-multiplicative retraction: `exp([omega, v]) ∘ self`.
    pub fn retract_left(&self, omega: &Vec3, v: &Vec3) -> Pose {
        se3_exp(omega, v).compose(self)
    }
}

/// SE(3) exponential map. `omega` is the rotation part of the twist, `v`
/// the translation part.
pub fn se3_exp(omega: &Vec3, v: &Vec3) -> Pose {
    let theta2 = omega.norm_squared();
    let omega_hat = skew(omega);
    // V = I + a * [w]x + b * [w]x^2. The Taylor branch must extend far
    // enough that the closed form is past its 1 - cos(theta) cancellation.
    let (a, b) = if theta2 < 1e-6 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let v_mat = Mat3::identity() + omega_hat * a + omega_hat * omega_hat * b;
    Pose {
        rotation: Quat::from_scaled_axis(*omega),
        translation: v_mat * v,
    }
}

/// Similarity transform: `p' = s * (R * p) + t`. Reduces to [`Pose`] when
/// `scale == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub rotation: Quat,
    pub translation: Vec3,
    pub scale: Real,
}

impl Sim3 {
    pub fn new(rotation: Quat, translation: Vec3, scale: Real) -> Self {
        assert!(scale > 0.0, "Sim3 scale must be positive");
        Self {
            rotation,
            translation,
            scale,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Quat::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn from_pose(pose: &Pose) -> Self {
        Self {
            rotation: pose.rotation,
            translation: pose.translation,
            scale: 1.0,
        }
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
            scale: self.scale * other.scale,
        }
    }

    pub fn inverse(&self) -> Sim3 {
        let rot_inv = self.rotation.inverse();
        let s_inv = 1.0 / self.scale;
        Sim3 {
            rotation: rot_inv,
            translation: -(s_inv * (rot_inv * self.translation)),
            scale: s_inv,
        }
    }

    /// Corrects a world-to-camera pose for a map transformed by `self`, so
    /// that transformed points project to the same pixels as before
    /// (projection is invariant to a uniform scaling of camera coordinates).
    pub fn correct_pose(&self, pose: &Pose) -> Pose {
        let rotation = pose.rotation * self.rotation.inverse();
        let translation = self.scale * pose.translation - rotation * self.translation;
        Pose {
            rotation,
            translation,
        }
    }
}
