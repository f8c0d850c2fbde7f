//! Map domain types and the shared map container.
//!
//! [`HyperMap`] keeps primitives and keyframes in two independently lockable
//! regions (many readers or one writer each). When both regions are needed,
//! lock keyframes before primitives.

use std::collections::{BTreeMap, BTreeSet};

use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::features::{Descriptor, Keypoint};
use crate::image::Image;
use crate::math::{Intrinsics, Pose, Quat, Real, Vec3};
use crate::photomap::GaussianPyramid;

pub type PrimitiveId = u64;
pub type KeyframeId = u64;

/// Spherical-harmonic coefficients per color channel (degree 3).
pub const SH_COEFFS: usize = 16;

#[inline]
pub fn sigmoid(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: Real) -> Real {
    (p / (1.0 - p)).ln()
}

/// Densification statistics accumulated across renders.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DensifyStats {
    /// Running sum of 2D-position gradient magnitudes.
    pub grad_sum: Real,
    /// Number of renders this primitive contributed to.
    pub count: u32,
    /// Largest projected 3-sigma radius seen, pixels.
    pub max_screen_radius: Real,
}

impl DensifyStats {
    pub fn mean_grad(&self) -> Real {
        if self.count == 0 {
            0.0
        } else {
            self.grad_sum / self.count as Real
        }
    }

    pub fn reset(&mut self) {
        *self = DensifyStats::default();
    }
}

/// One map element: a 3D Gaussian with optional binary feature descriptor.
///
/// Scale is stored as a log and opacity as a logit so unconstrained gradient
/// steps cannot leave the valid domain.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperPrimitive {
    pub position: Vec3,
    pub rotation: Quat,
    pub log_scale: Vec3,
    pub opacity_logit: Real,
    /// `sh[channel][coefficient]`.
    pub sh: [[Real; SH_COEFFS]; 3],
    /// Present iff the primitive was created from a tracked geometric feature.
    pub descriptor: Option<Descriptor>,
    /// Set by geometry-based densification.
    pub temporary: bool,
    pub stats: DensifyStats,
}

impl HyperPrimitive {
    pub fn new(position: Vec3) -> Self {
        Self {
            position,
            rotation: Quat::identity(),
            log_scale: Vec3::from_element((0.01f64).ln()),
            opacity_logit: logit(0.1),
            sh: [[0.0; SH_COEFFS]; 3],
            descriptor: None,
            temporary: false,
            stats: DensifyStats::default(),
        }
    }

    pub fn opacity(&self) -> Real {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(Real::exp)
    }

    /// Clamp log-scales into the supported range after a gradient step.
    pub fn clamp_scale(&mut self) {
        let lo = (1e-7f64).ln();
        let hi = (1e3f64).ln();
        self.log_scale = self.log_scale.map(|s| s.clamp(lo, hi));
    }
}

/// A selected frame retained as an optimization anchor.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub timestamp: Real,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    /// HxWx3 color, values in [0, 1].
    pub image: Image,
    /// HxWx1 depth in meters, 0 marks invalid pixels.
    pub depth: Option<Image>,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
    /// Keypoint index -> primitive id for the "active" 2D features.
    pub observations: BTreeMap<usize, PrimitiveId>,
    pub pyramid_cache: Option<GaussianPyramid>,
}

impl Keyframe {
    pub fn observed_primitives(&self) -> BTreeSet<PrimitiveId> {
        self.observations.values().copied().collect()
    }

    pub fn depth_at_keypoint(&self, index: usize) -> Option<Real> {
        let depth = self.depth.as_ref()?;
        let kp = &self.keypoints[index];
        let x = (kp.u.round() as usize).min(depth.width() - 1);
        let y = (kp.v.round() as usize).min(depth.height() - 1);
        let d = depth.get(x, y, 0);
        (d > 0.0).then_some(d)
    }

    pub fn color_at(&self, u: Real, v: Real) -> [Real; 3] {
        [
            self.image.sample_bilinear(u, v, 0),
            self.image.sample_bilinear(u, v, 1),
            self.image.sample_bilinear(u, v, 2),
        ]
    }
}

#[derive(Debug, Default)]
pub struct PrimitiveRegion {
    items: BTreeMap<PrimitiveId, HyperPrimitive>,
    next_id: PrimitiveId,
}

impl PrimitiveRegion {
    pub fn insert(&mut self, primitive: HyperPrimitive) -> PrimitiveId {
        let id = self.next_id;
        self.next_id += 1;
        self.items.insert(id, primitive);
        id
    }

    pub fn get(&self, id: PrimitiveId) -> Option<&HyperPrimitive> {
        self.items.get(&id)
    }

    pub fn get_mut(&mut self, id: PrimitiveId) -> Option<&mut HyperPrimitive> {
        self.items.get_mut(&id)
    }

    pub fn remove(&mut self, id: PrimitiveId) -> Option<HyperPrimitive> {
        self.items.remove(&id)
    }

    pub fn contains(&self, id: PrimitiveId) -> bool {
        self.items.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (PrimitiveId, &HyperPrimitive)> {
        self.items.iter().map(|(id, p)| (*id, p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (PrimitiveId, &mut HyperPrimitive)> {
        self.items.iter_mut().map(|(id, p)| (*id, p))
    }

    pub fn ids(&self) -> Vec<PrimitiveId> {
        self.items.keys().copied().collect()
    }
}

#[derive(Debug)]
pub struct KeyframeRegion {
    items: BTreeMap<KeyframeId, Keyframe>,
    covisibility: BTreeMap<KeyframeId, BTreeMap<KeyframeId, usize>>,
    next_id: KeyframeId,
    covis_threshold: usize,
}

impl KeyframeRegion {
    fn new(covis_threshold: usize) -> Self {
        Self {
            items: BTreeMap::new(),
            covisibility: BTreeMap::new(),
            next_id: 0,
            covis_threshold,
        }
    }

    /// Inserts a keyframe, assigns its id and wires covisibility edges.
    pub fn insert(&mut self, mut keyframe: Keyframe) -> KeyframeId {
        let id = self.next_id;
        self.next_id += 1;
        keyframe.id = id;
        self.items.insert(id, keyframe);
        self.covisibility.insert(id, BTreeMap::new());
        self.recompute_covisibility(id);
        id
    }

    pub fn get(&self, id: KeyframeId) -> Option<&Keyframe> {
        self.items.get(&id)
    }

    pub fn get_mut(&mut self, id: KeyframeId) -> Option<&mut Keyframe> {
        self.items.get_mut(&id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (KeyframeId, &Keyframe)> {
        self.items.iter().map(|(id, kf)| (*id, kf))
    }

    pub fn ids(&self) -> Vec<KeyframeId> {
        self.items.keys().copied().collect()
    }

    pub fn first_id(&self) -> Option<KeyframeId> {
        self.items.keys().next().copied()
    }

    pub fn last_id(&self) -> Option<KeyframeId> {
        self.items.keys().next_back().copied()
    }

    /// Covisibility neighbors of `id` with shared-observation counts.
    pub fn covisible(&self, id: KeyframeId) -> Vec<(KeyframeId, usize)> {
        self.covisibility
            .get(&id)
            .map(|edges| edges.iter().map(|(k, n)| (*k, *n)).collect())
            .unwrap_or_default()
    }

    /// Number of distinct primitives observed by both keyframes.
    pub fn shared_observations(&self, a: KeyframeId, b: KeyframeId) -> usize {
        match (self.items.get(&a), self.items.get(&b)) {
            (Some(ka), Some(kb)) => {
                let sa = ka.observed_primitives();
                let sb = kb.observed_primitives();
                sa.intersection(&sb).count()
            }
            _ => 0,
        }
    }

    /// Recomputes every edge incident to `id`. Call after the keyframe's
    /// observations change.
    pub fn recompute_covisibility(&mut self, id: KeyframeId) {
        if !self.items.contains_key(&id) {
            return;
        }
        let others = self.ids();
        for other in others {
            if other == id {
                continue;
            }
            let shared = self.shared_observations(id, other);
            if shared >= self.covis_threshold {
                self.covisibility.entry(id).or_default().insert(other, shared);
                self.covisibility.entry(other).or_default().insert(id, shared);
            } else {
                self.covisibility.entry(id).or_default().remove(&other);
                self.covisibility.entry(other).or_default().remove(&id);
            }
        }
    }

    /// Force an edge (used by loop closure to connect loop ends).
    pub fn add_edge(&mut self, a: KeyframeId, b: KeyframeId, count: usize) {
        if a == b {
            return;
        }
        self.covisibility.entry(a).or_default().insert(b, count);
        self.covisibility.entry(b).or_default().insert(a, count);
    }

    pub fn covis_threshold(&self) -> usize {
        self.covis_threshold
    }
}

/// Shared container of primitives, keyframes and the covisibility graph.
#[derive(Debug)]
pub struct HyperMap {
    primitives: RwLock<PrimitiveRegion>,
    keyframes: RwLock<KeyframeRegion>,
}

impl HyperMap {
    /// `covis_threshold` is the minimum number of shared observations for a
    /// covisibility edge.
    pub fn new(covis_threshold: usize) -> Self {
        Self {
            primitives: RwLock::new(PrimitiveRegion::default()),
            keyframes: RwLock::new(KeyframeRegion::new(covis_threshold)),
        }
    }

    pub fn primitives(&self) -> RwLockReadGuard<'_, PrimitiveRegion> {
        self.primitives.read()
    }

    pub fn primitives_mut(&self) -> RwLockWriteGuard<'_, PrimitiveRegion> {
        self.primitives.write()
    }

    pub fn keyframes(&self) -> RwLockReadGuard<'_, KeyframeRegion> {
        self.keyframes.read()
    }

    pub fn keyframes_mut(&self) -> RwLockWriteGuard<'_, KeyframeRegion> {
        self.keyframes.write()
    }
}

impl Default for HyperMap {
    fn default() -> Self {
        Self::new(15)
    }
}
