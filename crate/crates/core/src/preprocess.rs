//! Resampling onto the training grid and intensity normalization.

use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{Channel, NormalizationMode, PreprocessConfig};
use crate::error::{Error, Result};
use crate::types::{CaseRecord, Grid, LabelMap, Vec3, Volume};

/// Intensity below which a CT voxel counts as air.
pub const AIR_THRESHOLD_HU: f32 = -900.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    Nearest,
    Linear,
}

/// Grid covering the same field of view as `grid` at `target_spacing`.
///
/// Each axis gets `round(n * spacing / target)` voxels (at least one); the
/// origin (centre of voxel 0) is kept.
pub fn target_grid(grid: &Grid, target_spacing: Vec3) -> Result<Grid> {
    if target_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Geometry(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let mut shape = [0usize; 3];
    for i in 0..3 {
        shape[i] = ((grid.shape[i] as f64 * grid.spacing[i] / target_spacing[i]).round() as usize).max(1);
    }
    Grid::new(shape, target_spacing, grid.origin)
}

/// Continuous input index for every output index along one axis, clamped to
/// the input extent.
fn axis_coordinates(n_in: usize, s_in: f64, o_in: f64, n_out: usize, s_out: f64, o_out: f64) -> Vec<f64> {
    let last = (n_in - 1) as f64;
    (0..n_out)
        .map(|j| ((o_out + j as f64 * s_out - o_in) / s_in).clamp(0.0, last))
        .collect()
}

fn linear_axis(data: &Array3<f32>, axis: usize, coords: &[f64]) -> Array3<f32> {
    let mut shape = [data.dim().0, data.dim().1, data.dim().2];
    shape[axis] = coords.len();
    let n_in = data.len_of(Axis(axis));
    let mut out = Array3::<f32>::zeros(shape);
    for (j, &u) in coords.iter().enumerate() {
        let i0 = u.floor() as usize;
        let frac = u - i0 as f64;
        let i1 = (i0 + 1).min(n_in - 1);
        let a = data.index_axis(Axis(axis), i0);
        let mut dst = out.index_axis_mut(Axis(axis), j);
        if frac == 0.0 {
            dst.assign(&a);
        } else {
            let b = data.index_axis(Axis(axis), i1);
            ndarray::Zip::from(&mut dst)
                .and(&a)
                .and(&b)
                .for_each(|o, &va, &vb| {
                    *o = ((1.0 - frac) * va as f64 + frac * vb as f64) as f32;
                });
        }
    }
    out
}

fn nearest_axis<T: Copy + Default>(data: &Array3<T>, axis: usize, coords: &[f64]) -> Array3<T> {
    let mut shape = [data.dim().0, data.dim().1, data.dim().2];
    shape[axis] = coords.len();
    let mut out = Array3::<T>::default(shape);
    for (j, &u) in coords.iter().enumerate() {
        out.index_axis_mut(Axis(axis), j)
            .assign(&data.index_axis(Axis(axis), u.round() as usize));
    }
    out
}

fn resample_array<T, F>(data: &Array3<T>, from: &Grid, to: &Grid, mut pass: F) -> Array3<T>
where
    T: Clone,
    F: FnMut(&Array3<T>, usize, &[f64]) -> Array3<T>,
{
    let mut current = data.clone();
    for axis in 0..3 {
        let coords = axis_coordinates(
            from.shape[axis],
            from.spacing[axis],
            from.origin[axis],
            to.shape[axis],
            to.spacing[axis],
            to.origin[axis],
        );
        let identity = from.shape[axis] == to.shape[axis]
            && coords.iter().enumerate().all(|(j, &u)| u == j as f64);
        if !identity {
            current = pass(&current, axis, &coords);
        }
    }
    current
}

/// Sample `v` on an arbitrary axis-aligned grid (edge values outside the field of view).
pub fn resample_onto(v: &Volume, grid: &Grid, order: Interpolation) -> Result<Volume> {
    let from = v.grid();
    let data = match order {
        Interpolation::Linear => resample_array(v.data(), &from, grid, linear_axis),
        Interpolation::Nearest => resample_array(v.data(), &from, grid, nearest_axis),
    };
    Volume::from_grid(data, grid)
}

/// Resample a volume to `target_spacing` (see [`target_grid`] for the output shape).
pub fn resample(v: &Volume, target_spacing: Vec3, order: Interpolation) -> Result<Volume> {
    let grid = target_grid(&v.grid(), target_spacing)?;
    resample_onto(v, &grid, order)
}

/// Nearest-neighbour resampling of a label map onto `grid`.
pub fn resample_labels_onto(labels: &LabelMap, grid: &Grid) -> Result<LabelMap> {
    let data = resample_array(labels.data(), &labels.grid(), grid, nearest_axis);
    LabelMap::from_grid(data, grid, labels.num_classes())
}

pub fn resample_labels(labels: &LabelMap, target_spacing: Vec3) -> Result<LabelMap> {
    let grid = target_grid(&labels.grid(), target_spacing)?;
    resample_labels_onto(labels, &grid)
}

/// Dataset-level intensity statistics driving [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityFingerprint {
    pub channel: Channel,
    #[serde(rename = "p00_5")]
    pub percentile_00_5: f64,
    #[serde(rename = "p99_5")]
    pub percentile_99_5: f64,
    pub mean: f64,
    pub std: f64,
}

impl IntensityFingerprint {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.percentile_00_5, self.percentile_99_5, self.mean, self.std]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.percentile_00_5 > self.percentile_99_5 || !(self.std > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid fingerprint {self:?}")));
        }
        Ok(())
    }
}

/// One fingerprint per image channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelFingerprints {
    pub ct: IntensityFingerprint,
    pub pet: IntensityFingerprint,
}

impl ChannelFingerprints {
    pub fn compute(cases: &[CaseRecord]) -> Result<Self> {
        Ok(ChannelFingerprints {
            ct: compute_fingerprint(cases, Channel::Ct)?,
            pet: compute_fingerprint(cases, Channel::Pet)?,
        })
    }

    /// Persist as a JSON list of `{channel, p00_5, p99_5, mean, std}` records.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&[self.ct, self.pet])?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let list: Vec<IntensityFingerprint> = serde_json::from_str(&text)?;
        let find = |c: Channel| {
            list.iter()
                .find(|f| f.channel == c)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("{}: no {c:?} fingerprint", path.display())))
        };
        Ok(ChannelFingerprints {
            ct: find(Channel::Ct)?,
            pet: find(Channel::Pet)?,
        })
    }
}

/// Percentile `q` in `[0, 100]` of sorted values, linear interpolation
/// between order statistics.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Voxels used for fingerprint statistics: lesion ∪ organ mask when that is
/// non-empty, otherwise everything above the CT air threshold.
pub fn fingerprint_mask(case: &CaseRecord) -> Array3<bool> {
    let mut mask = case.lesion.foreground();
    if let Some(organs) = &case.organs {
        ndarray::Zip::from(&mut mask)
            .and(organs.data())
            .for_each(|m, &o| *m |= o > 0);
    }
    if mask.iter().any(|&m| m) {
        mask
    } else {
        case.ct.data().mapv(|v| v > AIR_THRESHOLD_HU)
    }
}

pub fn compute_fingerprint(cases: &[CaseRecord], channel: Channel) -> Result<IntensityFingerprint> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("fingerprint needs at least one case".into()));
    }
    let mut values = Vec::new();
    for case in cases {
        let mask = fingerprint_mask(case);
        let image = match channel {
            Channel::Ct => case.ct.data(),
            Channel::Pet => case.pet.data(),
        };
        if image.dim() != mask.dim() {
            return Err(Error::ShapeMismatch(format!(
                "case {}: image and label grids differ",
                case.case_id
            )));
        }
        values.extend(
            image
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v as f64),
        );
    }
    if values.is_empty() {
        return Err(Error::EmptyForeground(format!(
            "no foreground voxels in {} case(s) for {channel:?}",
            cases.len()
        )));
    }
    values.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&values, 0.5);
    let hi = percentile_sorted(&values, 99.5);
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.clamp(lo, hi)).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|v| (v.clamp(lo, hi) - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    Ok(IntensityFingerprint {
        channel,
        percentile_00_5: lo,
        percentile_99_5: hi,
        mean,
        std: if std > 1e-8 { std } else { 1.0 },
    })
}

/// `(clip(v, p00_5, p99_5) - mean) / std`.
pub fn normalize(v: &Volume, fp: &IntensityFingerprint) -> Result<Volume> {
    fp.validate()?;
    let data = v.data().mapv(|x| {
        ((x as f64).clamp(fp.percentile_00_5, fp.percentile_99_5) - fp.mean) as f32 / fp.std as f32
    });
    v.with_data(data)
}

/// Per-volume z-scoring over all voxels (population std, constant volumes map to 0).
pub fn zscore_normalize(v: &Volume) -> Result<Volume> {
    let n = v.data().len() as f64;
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
    v.with_data(v.data().mapv(|x| ((x as f64 - mean) / std) as f32))
}

/// Resample every channel onto the training grid and normalize intensities.
///
/// The CT grid is the reference; labels use nearest-neighbour resampling.
/// `fingerprints` is required in fingerprint mode and ignored in z-score mode.
pub fn preprocess_case(
    case: &CaseRecord,
    config: &PreprocessConfig,
    fingerprints: Option<&ChannelFingerprints>,
) -> Result<CaseRecord> {
    let grid = target_grid(&case.ct.grid(), config.target_spacing)?;
    let ct = resample_onto(&case.ct, &grid, Interpolation::Linear)?;
    let pet = resample_onto(&case.pet, &grid, Interpolation::Linear)?;
    let (ct, pet) = match config.normalization {
        NormalizationMode::Fingerprint => {
            let fp = fingerprints.ok_or_else(|| {
                Error::Config("fingerprint normalization requires channel fingerprints".into())
            })?;
            (normalize(&ct, &fp.ct)?, normalize(&pet, &fp.pet)?)
        }
        NormalizationMode::Zscore => (zscore_normalize(&ct)?, zscore_normalize(&pet)?),
    };
    let lesion = resample_labels_onto(&case.lesion, &grid)?;
    let organs = case
        .organs
        .as_ref()
        .map(|o| resample_labels_onto(o, &grid))
        .transpose()?;
    Ok(CaseRecord {
        case_id: case.case_id.clone(),
        tracer: case.tracer,
        pet,
        ct,
        lesion,
        organs,
    })
}

/// `[CT, PET]` channel stack of a case, shape `(2, z, y, x)`.
pub fn image_stack(case: &CaseRecord) -> Result<Array4<f32>> {
    if case.ct.shape() != case.pet.shape() {
        return Err(Error::ShapeMismatch(format!(
            "CT {:?} vs PET {:?}",
            case.ct.shape(),
            case.pet.shape()
        )));
    }
    let views = [case.ct.data().view(), case.pet.data().view()];
    Ok(ndarray::stack(Axis(0), &views).expect("equal shapes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Tracer;

    fn vol(data: Array3<f32>, spacing: Vec3) -> Volume {
        Volume::new(data, spacing, [0.0; 3]).unwrap()
    }

    #[test]
    fn identity_resampling() {
        let data = Array3::from_shape_fn((5, 6, 7), |(z, y, x)| (z * 7 + y * 3 + x) as f32 * 0.5);
        let v = vol(data.clone(), [3.0, 2.04, 2.04]);
        let out = resample(&v, [3.0, 2.04, 2.04], Interpolation::Linear).unwrap();
        assert_eq!(out.data(), &data);
    }

    #[test]
    fn constants_are_preserved() {
        let v = vol(Array3::from_elem((5, 6, 7), 4.25), [1.0, 1.5, 0.7]);
        for order in [Interpolation::Linear, Interpolation::Nearest] {
            let out = resample(&v, [3.0, 2.04, 2.04], order).unwrap();
            assert!(out.data().iter().all(|&x| (x - 4.25).abs() < 1e-6));
        }
    }

    #[test]
    fn linear_ramp_matches_one_dimensional_oracle() {
        // independent 1D linear interpolation: sample f at continuous index u
        fn oracle(samples: &[f64], u: f64) -> f64 {
            let u = u.clamp(0.0, (samples.len() - 1) as f64);
            let i = u.floor() as usize;
            if i + 1 >= samples.len() {
                return samples[i];
            }
            samples[i] * (1.0 - (u - i as f64)) + samples[i + 1] * (u - i as f64)
        }
        let n = 17;
        let ramp: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let v = vol(Array3::from_shape_fn((1, 1, n), |(_, _, x)| x as f32), [1.0, 1.0, 1.0]);
        for target in [2.0, 0.75, 1.6] {
            let out = resample(&v, [1.0, 1.0, target], Interpolation::Linear).unwrap();
            assert_eq!(out.shape()[2], ((n as f64) / target).round() as usize);
            for (j, &val) in out.data().iter().enumerate() {
                let expected = oracle(&ramp, j as f64 * target);
                assert!((val as f64 - expected).abs() < 1e-5, "target {target} j {j}");
            }
        }
    }

    #[test]
    fn coarse_case_doubles_in_shape() {
        let v = vol(Array3::zeros((5, 6, 7)), [6.0, 4.08, 4.08]);
        let out = resample(&v, [3.0, 2.04, 2.04], Interpolation::Linear).unwrap();
        assert_eq!(out.shape(), [10, 12, 14]);
        assert_eq!(out.spacing(), [3.0, 2.04, 2.04]);
    }

    #[test]
    fn resampling_is_idempotent_on_target_grid() {
        let data = Array3::from_shape_fn((6, 7, 8), |(z, y, x)| ((z * y) as f32).sin() + x as f32);
        let v = vol(data, [2.0, 1.3, 1.1]);
        let once = resample(&v, [3.0, 2.04, 2.04], Interpolation::Linear).unwrap();
        let twice = resample(&once, [3.0, 2.04, 2.04], Interpolation::Linear).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn non_positive_target_spacing_is_an_error() {
        let v = vol(Array3::zeros((2, 2, 2)), [1.0; 3]);
        assert!(resample(&v, [1.0, 0.0, 1.0], Interpolation::Linear).is_err());
    }

    #[test]
    fn nearest_never_invents_labels() {
        let data = Array3::from_shape_fn((5, 6, 7), |(z, y, x)| ((z + y + x) % 3 == 0) as u8);
        let l = LabelMap::new(data, [1.0, 1.7, 0.9], [0.0; 3], 2).unwrap();
        let out = resample_labels(&l, [3.0, 2.04, 2.04]).unwrap();
        assert!(out.data().iter().all(|&v| v <= 1));
    }

    #[test]
    fn percentiles_of_two_voxels() {
        let sorted = [0.0, 100.0];
        assert!((percentile_sorted(&sorted, 0.5) - 0.5).abs() < 1e-12);
        assert!((percentile_sorted(&sorted, 99.5) - 99.5).abs() < 1e-12);
    }

    fn case_from(ct: Array3<f32>, pet: Array3<f32>, lesion: Array3<u8>) -> CaseRecord {
        let g = Grid::new(
            [ct.dim().0, ct.dim().1, ct.dim().2],
            [3.0, 2.04, 2.04],
            [0.0; 3],
        )
        .unwrap();
        CaseRecord {
            case_id: "fdg_x".into(),
            tracer: Tracer::Fdg,
            ct: Volume::from_grid(ct, &g).unwrap(),
            pet: Volume::from_grid(pet, &g).unwrap(),
            lesion: LabelMap::from_grid(lesion, &g, 2).unwrap(),
            organs: None,
        }
    }

    #[test]
    fn degenerate_fingerprint_uses_unit_std() {
        let c = case_from(
            Array3::from_elem((3, 3, 3), 40.0),
            Array3::from_elem((3, 3, 3), 2.0),
            Array3::ones((3, 3, 3)),
        );
        let fp = compute_fingerprint(&[c], Channel::Ct).unwrap();
        assert_eq!((fp.percentile_00_5, fp.percentile_99_5, fp.mean, fp.std), (40.0, 40.0, 40.0, 1.0));
    }

    #[test]
    fn fingerprint_falls_back_to_air_threshold() {
        let ct = Array3::from_shape_fn((2, 2, 2), |(z, _, _)| if z == 0 { -1000.0 } else { 50.0 });
        let c = case_from(ct, Array3::zeros((2, 2, 2)), Array3::zeros((2, 2, 2)));
        let fp = compute_fingerprint(&[c], Channel::Ct).unwrap();
        assert_eq!(fp.mean, 50.0);
    }

    #[test]
    fn empty_foreground_is_an_error() {
        let c = case_from(
            Array3::from_elem((2, 2, 2), -1000.0),
            Array3::zeros((2, 2, 2)),
            Array3::zeros((2, 2, 2)),
        );
        assert!(matches!(
            compute_fingerprint(&[c], Channel::Pet),
            Err(Error::EmptyForeground(_))
        ));
    }

    #[test]
    fn clipped_uniform_mean_is_one_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let ct = Array3::from_shape_simple_fn((100, 100, 100), || rng.random::<f32>());
        let c = case_from(ct.clone(), ct, Array3::ones((100, 100, 100)));
        let fp = compute_fingerprint(&[c], Channel::Ct).unwrap();
        assert!((fp.mean - 0.5).abs() <= 0.01, "{}", fp.mean);
        assert!((fp.percentile_00_5 - 0.005).abs() < 1e-3);
        assert!((fp.percentile_99_5 - 0.995).abs() < 1e-3);
    }

    #[test]
    fn normalize_matches_formula() {
        let fp = IntensityFingerprint {
            channel: Channel::Ct,
            percentile_00_5: -100.0,
            percentile_99_5: 300.0,
            mean: 40.0,
            std: 80.0,
        };
        let data = Array3::from_shape_fn((4, 4, 4), |(z, y, x)| (z * 97 + y * 31 + x * 7) as f32 * 3.3 - 200.0);
        let v = vol(data.clone(), [1.0; 3]);
        let out = normalize(&v, &fp).unwrap();
        for (&i, &o) in data.iter().zip(out.data()) {
            let expected = ((i as f64).clamp(-100.0, 300.0) - 40.0) / 80.0;
            assert!((o as f64 - expected).abs() < 1e-6);
        }
        let floor = normalize(&vol(Array3::from_elem((1, 1, 1), -5000.0), [1.0; 3]), &fp).unwrap();
        assert_eq!(floor.data()[[0, 0, 0]], (-140.0f32) / 80.0);
        let centred = normalize(&vol(Array3::from_elem((2, 2, 2), 40.0), [1.0; 3]), &fp).unwrap();
        assert!(centred.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zscore_examples() {
        let two = vol(Array3::from_shape_vec((1, 1, 2), vec![0.0, 2.0]).unwrap(), [1.0; 3]);
        let out = zscore_normalize(&two).unwrap();
        assert_eq!(out.data().as_slice().unwrap(), &[-1.0, 1.0]);
        let flat = zscore_normalize(&vol(Array3::from_elem((3, 3, 3), 7.0), [1.0; 3])).unwrap();
        assert!(flat.data().iter().all(|&x| x == 0.0));
        let data = Array3::from_shape_fn((5, 5, 5), |(z, y, x)| (z * z + y * 3 + x) as f32);
        let out = zscore_normalize(&vol(data, [1.0; 3])).unwrap();
        let n = out.data().len() as f64;
        let mean = out.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let std = (out.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn preprocess_keeps_binary_lesions_and_aligned_geometry() {
        let lesion = Array3::from_shape_fn((4, 5, 6), |(z, y, x)| ((z + y + x) % 4 == 0) as u8);
        let c = case_from(
            Array3::from_elem((4, 5, 6), 10.0),
            Array3::from_elem((4, 5, 6), 1.0),
            lesion,
        );
        let fps = ChannelFingerprints::compute(std::slice::from_ref(&c)).unwrap();
        let cfg = PreprocessConfig {
            target_spacing: [1.5, 1.02, 1.02],
            ..PreprocessConfig::default()
        };
        let out = preprocess_case(&c, &cfg, Some(&fps)).unwrap();
        assert_eq!(out.ct.shape(), [8, 10, 12]);
        assert!(crate::types::validate_case(&out).is_empty());
        assert!(out.lesion.data().iter().all(|&v| v <= 1));

        let same = preprocess_case(&c, &PreprocessConfig::default(), Some(&fps)).unwrap();
        assert_eq!(same.ct.shape(), c.ct.shape());
    }
}
