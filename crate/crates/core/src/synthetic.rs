//! Synthetic PET/CT cases: box-shaped organs inside a cylindrical body and
//! bright spherical PET lesions. Used by tests, demos and the `synth` command.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::{write_case, DatasetManifest};
use crate::rng::{derive_seed, rng_from};
use crate::trainer::{DatasetEntry, TrainCase};
use crate::types::{CaseRecord, LabelMap, Tracer, Vec3, Volume, ORGAN_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_cases: usize,
    pub shape: [usize; 3],
    pub spacing: Vec3,
    /// Probability that a case contains lesions.
    pub lesion_probability: f64,
    pub max_lesions: usize,
    /// Lesion radius range in voxels.
    pub lesion_radius: [f64; 2],
    pub organs_per_case: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_cases: 8,
            shape: [64, 64, 64],
            spacing: [3.0, 2.04, 2.04],
            lesion_probability: 0.75,
            max_lesions: 2,
            lesion_radius: [3.0, 6.0],
            organs_per_case: 5,
            seed: 0,
        }
    }
}

/// CT value and PET uptake of each organ class (index = class). Values are
/// spread out so that every class is separable from intensity alone.
const ORGAN_HU: [f32; ORGAN_CLASSES as usize] = [0.0, -700.0, -500.0, -350.0, -200.0, -100.0, 120.0, 220.0, 320.0, 420.0, 540.0, 680.0];
const ORGAN_SUV: [f32; ORGAN_CLASSES as usize] = [0.0, 0.4, 0.6, 0.8, 1.3, 1.6, 1.9, 2.2, 2.5, 2.8, 3.2, 3.6];
const BODY_HU: f32 = 20.0;
const LESION_SUV: [f32; 2] = [8.0, 14.0];

/// Elliptic cylinder along z.
fn inside_body(shape: [usize; 3], y: usize, x: usize) -> bool {
    let r = |i: usize, n: usize| (i as f64 - (n as f64 - 1.0) / 2.0) / (0.47 * n as f64);
    let (a, b) = (r(y, shape[1]), r(x, shape[2]));
    a * a + b * b <= 1.0
}

/// Generate case `index` of a synthetic dataset.
pub fn synthetic_case(cfg: &SyntheticConfig, index: usize) -> Result<CaseRecord> {
    let mut rng = rng_from(derive_seed(cfg.seed, &[0x5717, index as u64]));
    let shape = cfg.shape;
    let dims = (shape[0], shape[1], shape[2]);
    let tracer = if index % 2 == 0 { Tracer::Fdg } else { Tracer::Psma };
    let case_id = format!("{}_{index:03}", tracer.as_str().to_ascii_lowercase());

    let mut organs = Array3::<u8>::zeros(dims);
    for _ in 0..cfg.organs_per_case {
        let class = rng.random_range(1..ORGAN_CLASSES);
        let size = [0, 1, 2].map(|a| rng.random_range(shape[a] / 8..=shape[a] / 4).max(1));
        let start = [0, 1, 2].map(|a| rng.random_range(shape[a] / 5..=(shape[a] * 4 / 5).saturating_sub(size[a]).max(shape[a] / 5)));
        for z in start[0]..(start[0] + size[0]).min(shape[0]) {
            for y in start[1]..(start[1] + size[1]).min(shape[1]) {
                for x in start[2]..(start[2] + size[2]).min(shape[2]) {
                    if inside_body(shape, y, x) {
                        organs[[z, y, x]] = class;
                    }
                }
            }
        }
    }

    let mut lesion = Array3::<u8>::zeros(dims);
    let mut lesion_suv = Array3::<f32>::zeros(dims);
    if rng.random_bool(cfg.lesion_probability) {
        let n = rng.random_range(1..=cfg.max_lesions.max(1));
        for _ in 0..n {
            let r = rng.random_range(cfg.lesion_radius[0]..=cfg.lesion_radius[1]);
            let margin = r.ceil() as usize + 1;
            let c = [0, 1, 2].map(|a| {
                let lo = margin.max(shape[a] / 4);
                let hi = (shape[a] - margin).min(shape[a] * 3 / 4).max(lo);
                rng.random_range(lo..=hi) as f64
            });
            let suv = rng.random_range(LESION_SUV[0]..=LESION_SUV[1]);
            for ((z, y, x), v) in lesion.indexed_iter_mut() {
                let d2 = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
                if d2 <= r * r {
                    *v = 1;
                    lesion_suv[[z, y, x]] = suv;
                }
            }
        }
    }

    let ct_noise = Normal::new(0.0f32, 8.0).expect("valid");
    let pet_noise = Normal::new(0.0f32, 0.15).expect("valid");
    let mut ct = Array3::<f32>::zeros(dims);
    let mut pet = Array3::<f32>::zeros(dims);
    for ((z, y, x), v) in ct.indexed_iter_mut() {
        let body = inside_body(shape, y, x);
        let organ = organs[[z, y, x]] as usize;
        let (hu, suv) = if !body {
            (-1000.0, 0.05)
        } else if organ > 0 {
            (ORGAN_HU[organ], ORGAN_SUV[organ])
        } else {
            (BODY_HU, 1.0)
        };
        *v = hu + if body { ct_noise.sample(&mut rng) } else { 0.0 };
        let suv = if lesion[[z, y, x]] > 0 { lesion_suv[[z, y, x]] } else { suv };
        pet[[z, y, x]] = (suv * (1.0 + pet_noise.sample(&mut rng))).max(0.0);
    }

    let origin = [0.0; 3];
    Ok(CaseRecord {
        case_id,
        tracer,
        pet: Volume::new(pet, cfg.spacing, origin)?,
        ct: Volume::new(ct, cfg.spacing, origin)?,
        lesion: LabelMap::new(lesion, cfg.spacing, origin, 2)?,
        organs: Some(LabelMap::new(organs, cfg.spacing, origin, ORGAN_CLASSES)?),
    })
}

pub fn synthetic_dataset(cfg: &SyntheticConfig) -> Result<Vec<CaseRecord>> {
    (0..cfg.num_cases).map(|i| synthetic_case(cfg, i)).collect()
}

/// Write a synthetic dataset as NIfTI files plus `manifest.json` into `dir`.
pub fn write_synthetic_dataset(cfg: &SyntheticConfig, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut manifest = DatasetManifest::default();
    for case in synthetic_dataset(cfg)? {
        manifest.cases.push(write_case(&case, dir)?);
    }
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// Single-channel pretraining dataset: noisy box phantoms whose intensity
/// equals their label class.
pub fn synthetic_pretrain_entry(name: &str, num_cases: usize, num_classes: usize, shape: [usize; 3], seed: u64) -> Result<DatasetEntry> {
    let cases = (0..num_cases)
        .map(|i| {
            let mut rng = rng_from(derive_seed(seed, &[0x9e7, i as u64]));
            let dims = (shape[0], shape[1], shape[2]);
            let mut labels = Array3::<u8>::zeros(dims);
            for _ in 0..3 {
                let class = rng.random_range(1..num_classes) as u8;
                let size = [0, 1, 2].map(|a| rng.random_range(shape[a] / 6..=shape[a] / 3).max(1));
                let start = [0, 1, 2].map(|a| rng.random_range(0..=shape[a] - size[a]));
                labels
                    .slice_mut(ndarray::s![
                        start[0]..start[0] + size[0],
                        start[1]..start[1] + size[1],
                        start[2]..start[2] + size[2]
                    ])
                    .fill(class);
            }
            let noise = Normal::new(0.0f32, 0.2).expect("valid");
            let image = labels.mapv(|c| c as f32) + Array3::from_shape_fn(dims, |_| noise.sample(&mut rng));
            TrainCase::new(format!("{name}_{i:03}"), Tracer::Unknown, image.insert_axis(Axis(0)), labels, None)
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetEntry::new(name, cases, num_classes, "synthetic")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_are_valid_and_deterministic() {
        let cfg = SyntheticConfig {
            num_cases: 4,
            shape: [32, 32, 32],
            lesion_probability: 1.0,
            ..SyntheticConfig::default()
        };
        let cases = synthetic_dataset(&cfg).unwrap();
        assert_eq!(cases[0].case_id, "fdg_000");
        assert_eq!(cases[1].tracer, Tracer::Psma);
        for c in &cases {
            assert!(crate::types::validate_case(c).is_empty());
            assert!(c.has_lesion());
            let lesion_pet: f32 = c
                .pet
                .data()
                .iter()
                .zip(c.lesion.data())
                .filter(|(_, &l)| l > 0)
                .map(|(&p, _)| p)
                .fold(f32::INFINITY, f32::min);
            assert!(lesion_pet > 4.0);
        }
        let again = synthetic_case(&cfg, 2).unwrap();
        assert_eq!(again.pet.data(), cases[2].pet.data());
    }
}
