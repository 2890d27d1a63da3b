//! Training-time augmentation. The centrepiece is the misalignment transform,
//! which rigidly moves one modality relative to the other while the second
//! modality and all label maps stay put.

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{AugmentConfig, Channel};
use crate::error::{Error, Result};
use crate::types::{RigidTransform, Vec3};

/// Fixed-size training crop: `[CT, PET]` image channels plus label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Shape `(2, z, y, x)`.
    pub image: Array4<f32>,
    pub lesion: Array3<u8>,
    pub organs: Option<Array3<u8>>,
}

impl Patch {
    pub fn new(image: Array4<f32>, lesion: Array3<u8>, organs: Option<Array3<u8>>) -> Result<Self> {
        let p = Patch {
            image: image.as_standard_layout().into_owned(),
            lesion,
            organs,
        };
        p.check()?;
        Ok(p)
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    fn check(&self) -> Result<()> {
        let shape = self.spatial_shape();
        if self.image.shape()[0] != 2 {
            return Err(Error::ShapeMismatch(format!(
                "patch image needs 2 channels, got {}",
                self.image.shape()[0]
            )));
        }
        if self.lesion.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "lesion {:?} vs image {:?}",
                self.lesion.shape(),
                shape
            )));
        }
        if let Some(o) = &self.organs {
            if o.shape() != shape {
                return Err(Error::ShapeMismatch(format!("organs {:?} vs image {:?}", o.shape(), shape)));
            }
        }
        if self.image.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("patch image contains non-finite values".into()));
        }
        Ok(())
    }
}

fn symmetric_uniform<R: Rng + ?Sized>(rng: &mut R, max: f64) -> f64 {
    if max > 0.0 {
        rng.random_range(-max..=max)
    } else {
        0.0
    }
}

/// Draw a misalignment: every rotation angle uniform in `±max_rot_deg`, every
/// translation uniform in `±max_shift_vox[axis]`.
pub fn sample_misalignment<R: Rng + ?Sized>(rng: &mut R, max_rot_deg: f64, max_shift_vox: Vec3) -> RigidTransform {
    let mut t = RigidTransform::identity();
    for a in &mut t.rotation_deg {
        *a = symmetric_uniform(rng, max_rot_deg.abs());
    }
    for (s, &m) in t.translation_vox.iter_mut().zip(&max_shift_vox) {
        *s = symmetric_uniform(rng, m.abs());
    }
    t
}

/// Rigid map in voxel index space: `y = R (x - c) + c + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMap {
    pub rotation: [[f64; 3]; 3],
    pub center: Vec3,
    pub translation: Vec3,
}

impl RigidMap {
    /// Rotation about the centre of a grid of `shape`, then translation.
    pub fn from_transform(t: &RigidTransform, shape: [usize; 3]) -> Self {
        RigidMap {
            rotation: t.rotation_matrix(),
            center: shape.map(|n| (n as f64 - 1.0) / 2.0),
            translation: t.translation_vox,
        }
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let mut back = [0.0; 3];
        for i in 0..3 {
            back[i] = -(0..3).map(|k| rt[i][k] * t[k]).sum::<f64>();
        }
        RigidMap {
            rotation: rt,
            center: self.center,
            translation: back,
        }
    }

    fn is_pure_translation(&self) -> bool {
        (0..3).all(|i| (0..3).all(|j| self.rotation[i][j] == if i == j { 1.0 } else { 0.0 }))
    }

    /// Pre-image of output position `y`: `x = Rᵀ (y - c - t) + c`.
    fn source(&self, y: Vec3) -> Vec3 {
        let d = [
            y[0] - self.center[0] - self.translation[0],
            y[1] - self.center[1] - self.translation[1],
            y[2] - self.center[2] - self.translation[2],
        ];
        let r = self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2] + self.center[0],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2] + self.center[1],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2] + self.center[2],
        ]
    }
}

/// Resample one channel under `map` with trilinear interpolation. Positions
/// outside the field of view take `fill`.
pub fn warp_channel(channel: ArrayView3<f32>, map: &RigidMap, fill: f32) -> Array3<f32> {
    let (nz, ny, nx) = channel.dim();
    let dims = [nz as isize, ny as isize, nx as isize];
    let translation_only = map.is_pure_translation();
    let fetch = |z: isize, y: isize, x: isize| -> f64 {
        if z < 0 || y < 0 || x < 0 || z >= dims[0] || y >= dims[1] || x >= dims[2] {
            fill as f64
        } else {
            channel[[z as usize, y as usize, x as usize]] as f64
        }
    };
    Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
        let pos = [z as f64, y as f64, x as f64];
        let src = if translation_only {
            [
                pos[0] - map.translation[0],
                pos[1] - map.translation[1],
                pos[2] - map.translation[2],
            ]
        } else {
            map.source(pos)
        };
        if (0..3).any(|i| src[i] <= -1.0 || src[i] >= dims[i] as f64) {
            return fill;
        }
        let base = src.map(|v| v.floor());
        let frac = [src[0] - base[0], src[1] - base[1], src[2] - base[2]];
        let b = base.map(|v| v as isize);
        if frac == [0.0; 3] {
            return fetch(b[0], b[1], b[2]) as f32;
        }
        let mut acc = 0.0;
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[0] } else { frac[0] };
            if wz == 0.0 {
                continue;
            }
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                if wy == 0.0 {
                    continue;
                }
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[2] } else { frac[2] };
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wz * wy * wx * fetch(b[0] + dz, b[1] + dy, b[2] + dx);
                }
            }
        }
        acc as f32
    })
}

fn channel_min(channel: ArrayView3<f32>) -> f32 {
    channel.iter().copied().fold(f32::INFINITY, f32::min)
}

/// Move `moving` under `t` (rotation about the patch centre, then translation).
/// The other channel and both label maps are returned unchanged.
pub fn apply_misalignment(p: &Patch, t: &RigidTransform, moving: Channel) -> Patch {
    if t.is_identity() {
        return p.clone();
    }
    let map = RigidMap::from_transform(t, p.spatial_shape());
    apply_rigid_map(p, &map, moving)
}

/// [`apply_misalignment`] with an explicit voxel-space map.
pub fn apply_rigid_map(p: &Patch, map: &RigidMap, moving: Channel) -> Patch {
    let mut out = p.clone();
    let idx = moving.index();
    let channel = p.image.index_axis(Axis(0), idx);
    let warped = warp_channel(channel, map, channel_min(channel));
    out.image.index_axis_mut(Axis(0), idx).assign(&warped);
    out
}

/// Flip image and labels along the given spatial axes (0 = z, 1 = y, 2 = x).
pub fn mirror(p: &Patch, axes: &[usize]) -> Patch {
    let mut image = p.image.clone();
    let mut lesion = p.lesion.clone();
    let mut organs = p.organs.clone();
    for &a in axes {
        image.invert_axis(Axis(a + 1));
        lesion.invert_axis(Axis(a));
        if let Some(o) = organs.as_mut() {
            o.invert_axis(Axis(a));
        }
    }
    Patch {
        image: image.as_standard_layout().into_owned(),
        lesion: lesion.as_standard_layout().into_owned(),
        organs: organs.map(|o| o.as_standard_layout().into_owned()),
    }
}

/// Standard pipeline: per-axis mirroring, additive Gaussian noise, then
/// misalignment with the configured probability.
pub fn augment_patch<R: Rng + ?Sized>(p: &Patch, cfg: &AugmentConfig, rng: &mut R) -> Patch {
    let axes: Vec<usize> = (0..3)
        .filter(|_| cfg.mirror_prob > 0.0 && rng.random_bool(cfg.mirror_prob))
        .collect();
    let mut out = if axes.is_empty() { p.clone() } else { mirror(p, &axes) };

    if cfg.noise_prob > 0.0 && rng.random_bool(cfg.noise_prob) {
        let sigma = if cfg.noise_sigma_max > 0.0 {
            rng.random_range(0.0..=cfg.noise_sigma_max)
        } else {
            0.0
        };
        if sigma > 0.0 {
            let normal = Normal::new(0.0f32, sigma as f32).expect("finite sigma");
            out.image.mapv_inplace(|v| v + normal.sample(rng));
        }
    }

    let m = &cfg.misalign;
    if m.prob > 0.0 && rng.random_bool(m.prob) {
        let t = sample_misalignment(rng, m.max_rotation_deg, m.max_shift_vox);
        out = apply_misalignment(&out, &t, m.moving_channel);
    }
    out
}
