//! Volumes, label masks, synthetic phantoms and the paired weak/strong
//! augmentation that feeds both consistency branches.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{arg_err, Result};

/// Scalar 3-D image in `(D, H, W)` row-major order with voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f32>,
}

/// Integer class grid paired with a [`Volume`]; every value lies in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    dims: [usize; 3],
    spacing: [f64; 3],
    num_classes: u8,
    labels: Vec<u8>,
}

fn check_grid(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != len {
        return Err(arg_err!("dims {dims:?} need {n} voxels, got {len}"));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(arg_err!("spacing must be strictly positive, got {spacing:?}"));
    }
    Ok(())
}

#[inline]
pub(crate) fn flat_index(dims: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        check_grid(dims, spacing, voxels.len())?;
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(arg_err!("voxel {i} is not finite"));
        }
        Ok(Self { dims, spacing, voxels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[flat_index(self.dims, z, y, x)]
    }

    /// Zero-mean, unit-variance copy. Constant volumes are only centred.
    pub fn standardized(&self) -> Self {
        let n = self.voxels.len().max(1) as f64;
        let mean = self.voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.voxels.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
        let inv = if var > 0.0 { 1.0 / libm::sqrt(var) } else { 1.0 };
        let voxels = self.voxels.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect();
        Self { voxels, ..self.clone() }
    }
}

impl LabelMask {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], num_classes: u8, labels: Vec<u8>) -> Result<Self> {
        check_grid(dims, spacing, labels.len())?;
        if num_classes == 0 {
            return Err(arg_err!("a label mask needs at least one class"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(arg_err!("label {bad} outside [0, {num_classes})"));
        }
        Ok(Self { dims, spacing, num_classes, labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[flat_index(self.dims, z, y, x)]
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Intensity model of the synthetic phantoms.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PhantomConfig {
    /// Mean intensity of background, organ and tumor.
    pub class_means: [f64; 3],
    pub noise_std: f64,
    pub spacing: [f64; 3],
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { class_means: [0.2, 0.6, 0.9], noise_std: 0.1, spacing: [1.0; 3] }
    }
}

/// Phantom with default intensities; see [`generate_phantom_with`].
pub fn generate_phantom(seed: u64, shape: [usize; 3], k_classes: u8) -> Result<(Volume, LabelMask)> {
    generate_phantom_with(&PhantomConfig::default(), seed, shape, k_classes)
}

/// Random rotated ellipsoidal organ (class 1) with, for three classes, a
/// spherical tumor (class 2) kept well inside the organ.
pub fn generate_phantom_with(
    config: &PhantomConfig,
    seed: u64,
    shape: [usize; 3],
    k_classes: u8,
) -> Result<(Volume, LabelMask)> {
    if !(2..=3).contains(&k_classes) {
        return Err(arg_err!("phantoms support 2 or 3 classes, got {k_classes}"));
    }
    if shape.iter().any(|&s| s < 16) {
        return Err(arg_err!("every phantom axis must be at least 16, got {shape:?}"));
    }
    if !(config.noise_std >= 0.0 && config.noise_std.is_finite()) {
        return Err(arg_err!("noise_std must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_dim = *shape.iter().min().unwrap() as f64;
    let centre: [f64; 3] = core::array::from_fn(|a| rng.gen_range(0.4..0.6) * shape[a] as f64);
    let axes: [f64; 3] = core::array::from_fn(|_| rng.gen_range(0.25..0.35) * min_dim);
    let rot = random_rotation(&mut rng);

    // tumor in the organ's unit-ball coordinates
    let radius: f64 = rng.gen_range(0.3..0.4);
    let dir = unit_vector(&mut rng);
    let reach = rng.gen_range(0.0..(0.5 - radius));
    let tumor: [f64; 3] = core::array::from_fn(|a| dir[a] * reach);

    let n: usize = shape.iter().product();
    let mut labels = vec![0u8; n];
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let d = [z as f64 - centre[0], y as f64 - centre[1], x as f64 - centre[2]];
                // u = Rᵀ d / axes
                let u: [f64; 3] = core::array::from_fn(|i| {
                    (rot[0][i] * d[0] + rot[1][i] * d[1] + rot[2][i] * d[2]) / axes[i]
                });
                let r2: f64 = u.iter().map(|v| v * v).sum();
                if r2 > 1.0 {
                    continue;
                }
                let t2: f64 = u.iter().zip(&tumor).map(|(a, b)| (a - b) * (a - b)).sum();
                labels[flat_index(shape, z, y, x)] = if k_classes == 3 && t2 <= radius * radius { 2 } else { 1 };
            }
        }
    }
    let voxels = labels
        .iter()
        .map(|&l| {
            let e: f64 = StandardNormal.sample(&mut rng);
            (config.class_means[l as usize] + config.noise_std * e) as f32
        })
        .collect();
    Ok((
        Volume::new(shape, config.spacing, voxels)?,
        LabelMask::new(shape, config.spacing, k_classes, labels)?,
    ))
}

fn unit_vector<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = core::array::from_fn(|_| StandardNormal.sample(rng));
        let n = libm::sqrt(v.iter().map(|x| x * x).sum());
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

/// Rotation matrix of a uniformly random unit quaternion.
fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let v: [f64; 4] = core::array::from_fn(|_| StandardNormal.sample(rng));
        let n = libm::sqrt(v.iter().map(|x| x * x).sum());
        if n > 1e-9 {
            break v.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Magnitudes of the weak/strong augmentation pair.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AugmentConfig {
    /// Random crop offset; centre crop when false.
    pub random_crop: bool,
    /// Per-axis flip probability.
    pub flip_prob: f64,
    /// Strong view: additive Gaussian noise std.
    pub noise_std: f64,
    /// Strong view: gamma drawn as `exp(U(-r, r))`.
    pub gamma_range: f64,
    /// Strong view: cutout edge length as a fraction of the crop, per axis.
    pub cutout_max_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { random_crop: true, flip_prob: 0.5, noise_std: 0.1, gamma_range: 0.3, cutout_max_frac: 0.3 }
    }
}

impl AugmentConfig {
    /// Centre crop with no flips and no intensity perturbation.
    pub fn identity() -> Self {
        Self { random_crop: false, flip_prob: 0.0, noise_std: 0.0, gamma_range: 0.0, cutout_max_frac: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(arg_err!("flip_prob must lie in [0, 1]"));
        }
        for (name, v) in [("noise_std", self.noise_std), ("gamma_range", self.gamma_range)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(arg_err!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.cutout_max_frac) {
            return Err(arg_err!("cutout_max_frac must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Spatial transform shared by both views: crop then per-axis flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialRecord {
    pub source_dims: [usize; 3],
    pub offset: [usize; 3],
    pub crop: [usize; 3],
    pub flips: [bool; 3],
}

impl SpatialRecord {
    /// Source voxel that lands at `dst` in the augmented crop.
    pub fn source_coord(&self, dst: [usize; 3]) -> [usize; 3] {
        core::array::from_fn(|a| {
            let local = if self.flips[a] { self.crop[a] - 1 - dst[a] } else { dst[a] };
            self.offset[a] + local
        })
    }

    fn apply<T: Copy>(&self, src: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.crop.iter().product());
        for z in 0..self.crop[0] {
            for y in 0..self.crop[1] {
                for x in 0..self.crop[2] {
                    let [sz, sy, sx] = self.source_coord([z, y, x]);
                    out.push(src[flat_index(self.source_dims, sz, sy, sx)]);
                }
            }
        }
        out
    }
}

/// Two spatially aligned views of one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub weak: Volume,
    pub strong: Volume,
    pub mask_weak: Option<LabelMask>,
    pub spatial: SpatialRecord,
}

/// One random crop and flip set applied to both views and the mask; the
/// strong view additionally gets gamma jitter, Gaussian noise and a cutout.
pub fn augment_pair(
    volume: &Volume,
    mask: Option<&LabelMask>,
    crop: [usize; 3],
    config: &AugmentConfig,
    seed: u64,
) -> Result<AugmentedPair> {
    config.validate()?;
    let dims = volume.dims();
    if (0..3).any(|a| crop[a] == 0 || crop[a] > dims[a]) {
        return Err(arg_err!("crop {crop:?} does not fit volume {dims:?}"));
    }
    if let Some(m) = mask {
        if m.dims() != dims {
            return Err(arg_err!("mask dims {:?} differ from volume dims {dims:?}", m.dims()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset: [usize; 3] = core::array::from_fn(|a| {
        if config.random_crop {
            rng.gen_range(0..=dims[a] - crop[a])
        } else {
            (dims[a] - crop[a]) / 2
        }
    });
    let flips: [bool; 3] = core::array::from_fn(|_| rng.gen_bool(config.flip_prob));
    let spatial = SpatialRecord { source_dims: dims, offset, crop, flips };

    let weak_vox = spatial.apply(volume.voxels());
    let mut strong_vox = weak_vox.clone();
    if config.gamma_range > 0.0 {
        let gamma = libm::exp(rng.gen_range(-config.gamma_range..=config.gamma_range));
        let lo = strong_vox.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = strong_vox.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        if hi > lo {
            for v in &mut strong_vox {
                let t = (*v as f64 - lo) / (hi - lo);
                *v = (lo + (hi - lo) * libm::pow(t, gamma)) as f32;
            }
        }
    }
    if config.noise_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_std).expect("validated std");
        for v in &mut strong_vox {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    if config.cutout_max_frac > 0.0 {
        let size: [usize; 3] = core::array::from_fn(|a| {
            let max = ((config.cutout_max_frac * crop[a] as f64) as usize).max(1);
            rng.gen_range(1..=max)
        });
        let start: [usize; 3] = core::array::from_fn(|a| rng.gen_range(0..=crop[a] - size[a]));
        for z in start[0]..start[0] + size[0] {
            for y in start[1]..start[1] + size[1] {
                for x in start[2]..start[2] + size[2] {
                    strong_vox[flat_index(crop, z, y, x)] = 0.0;
                }
            }
        }
    }
    let spacing = volume.spacing();
    Ok(AugmentedPair {
        weak: Volume::new(crop, spacing, weak_vox)?,
        strong: Volume::new(crop, spacing, strong_vox)?,
        mask_weak: mask
            .map(|m| LabelMask::new(crop, m.spacing(), m.num_classes(), spatial.apply(m.labels())))
            .transpose()?,
        spatial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_rejects_bad_arguments() {
        assert!(generate_phantom(0, [32, 32, 32], 4).is_err());
        assert!(generate_phantom(0, [32, 15, 32], 3).is_err());
    }

    #[test]
    fn phantom_is_deterministic() {
        let a = generate_phantom(0, [20, 24, 16], 3).unwrap();
        let b = generate_phantom(0, [20, 24, 16], 3).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(1, [20, 24, 16], 3).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn tumor_is_enclosed_by_organ() {
        for seed in 0..5 {
            let (_, mask) = generate_phantom(seed, [32, 32, 32], 3).unwrap();
            let d = mask.dims();
            assert!(mask.count(2) > 0, "seed {seed}: no tumor");
            for z in 0..d[0] {
                for y in 0..d[1] {
                    for x in 0..d[2] {
                        if mask.get(z, y, x) != 2 {
                            continue;
                        }
                        for dz in -1i64..=1 {
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                                    assert!(nz >= 0 && ny >= 0 && nx >= 0);
                                    assert!(mask.get(nz as usize, ny as usize, nx as usize) != 0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn two_class_phantom_has_no_tumor() {
        let (_, mask) = generate_phantom(3, [16, 16, 16], 2).unwrap();
        assert_eq!(mask.count(2), 0);
        assert!(mask.count(1) > 0);
    }

    #[test]
    fn identity_augmentation_is_centre_crop() {
        let (vol, mask) = generate_phantom(0, [20, 18, 16], 3).unwrap();
        let pair = augment_pair(&vol, Some(&mask), [16, 16, 16], &AugmentConfig::identity(), 5).unwrap();
        assert_eq!(pair.weak, pair.strong);
        assert_eq!(pair.spatial.offset, [2, 1, 0]);
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(pair.weak.get(z, y, x), vol.get(z + 2, y + 1, x));
                    assert_eq!(pair.mask_weak.as_ref().unwrap().get(z, y, x), mask.get(z + 2, y + 1, x));
                }
            }
        }
    }

    #[test]
    fn crop_larger_than_volume_is_rejected() {
        let (vol, _) = generate_phantom(0, [16, 16, 16], 2).unwrap();
        let err = augment_pair(&vol, None, [32, 16, 16], &AugmentConfig::default(), 0);
        assert!(matches!(err, Err(crate::Error::Argument(_))));
    }

    #[test]
    fn strong_view_differs_only_in_intensity() {
        let (vol, mask) = generate_phantom(4, [24, 24, 24], 3).unwrap();
        let pair = augment_pair(&vol, Some(&mask), [16, 16, 16], &AugmentConfig::default(), 9).unwrap();
        assert_ne!(pair.weak, pair.strong);
        // weak view and mask follow the recorded spatial map exactly
        let m = pair.mask_weak.as_ref().unwrap();
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let [sz, sy, sx] = pair.spatial.source_coord([z, y, x]);
                    assert_eq!(pair.weak.get(z, y, x), vol.get(sz, sy, sx));
                    assert_eq!(m.get(z, y, x), mask.get(sz, sy, sx));
                }
            }
        }
    }

    #[test]
    fn standardized_volume_has_unit_moments() {
        let (vol, _) = generate_phantom(2, [16, 16, 16], 3).unwrap();
        let s = vol.standardized();
        let n = s.voxels().len() as f64;
        let mean = s.voxels().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = s.voxels().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4);
    }
}
