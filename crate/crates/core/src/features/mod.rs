//! Keypoint detection, 256-bit binary descriptors and descriptor matching.

mod brief;
mod detect;
mod matching;

pub use brief::describe as describe_patch;
pub use detect::{extract_features, FeatureError, DETECTION_BORDER, MIN_IMAGE_SIZE};
pub use matching::match_descriptors;

use crate::math::Real;

/// A detected corner. `u`/`v` are sub-pixel coordinates at pyramid level 0;
/// `octave` is the level the corner was found at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub u: Real,
    pub v: Real,
    pub octave: usize,
    pub response: Real,
    pub angle: Real,
}

/// 256-bit binary descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    pub const BITS: usize = 256;

    pub fn zero() -> Self {
        Descriptor([0; 4])
    }

    #[inline]
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        let mut d = 0;
        for i in 0..4 {
            d += (self.0[i] ^ other.0[i]).count_ones();
        }
        d
    }

    #[inline]
    pub fn set_bit(&mut self, i: usize) {
        self.0[i / 64] |= 1u64 << (i % 64);
    }

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        for (i, word) in self.0.iter().enumerate() {
            out[i * 8..(i + 1) * 8].copy_from_slice(&word.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Self {
        let mut words = [0u64; 4];
        for (i, word) in words.iter_mut().enumerate() {
            *word = u64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap());
        }
        Descriptor(words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hamming_identity_and_symmetry() {
        let a = Descriptor([0xDEAD, 0xBEEF, 0x1234, 0x5678]);
        let b = Descriptor([0xBEEF, 0xDEAD, 0x8765, 0x4321]);
        assert_eq!(a.hamming(&a), 0);
        assert_eq!(a.hamming(&b), b.hamming(&a));
    }

    #[test]
    fn bit_round_trip() {
        let mut d = Descriptor::zero();
        for i in [0, 63, 64, 127, 200, 255] {
            d.set_bit(i);
        }
        assert!(d.bit(0) && d.bit(63) && d.bit(64) && d.bit(255));
        assert!(!d.bit(1) && !d.bit(128));
        assert_eq!(d.hamming(&Descriptor::zero()), 6);
        assert_eq!(Descriptor::from_bytes(&d.to_bytes()), d);
    }
}
