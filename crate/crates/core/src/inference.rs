//! Sliding-window prediction, mirror test-time augmentation under a time
//! budget, and fold ensembling.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array3, Array4, Array5, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, InferenceConfig, PreprocessConfig};
use crate::error::{Error, Result};
use crate::io::{ingest_case, write_label_map, write_volume, DatasetManifest};
use crate::model::{Checkpoint, Network, LESION_HEAD};
use crate::preprocess::{image_stack, preprocess_case, resample_labels_onto};
use crate::types::{CaseRecord, LabelMap, Volume};

/// Tile start coordinates for a (padded) volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    /// Volume shape after padding up to the patch size.
    pub shape: [usize; 3],
    pub patch_size: [usize; 3],
    pub step_fraction: f64,
    /// Per-axis start positions.
    pub axis_starts: [Vec<usize>; 3],
}

impl TilePlan {
    /// All tile starts in `(z, y, x)` raster order.
    pub fn starts(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for &z in &self.axis_starts[0] {
            for &y in &self.axis_starts[1] {
                for &x in &self.axis_starts[2] {
                    out.push([z, y, x]);
                }
            }
        }
        out
    }

    pub fn num_tiles(&self) -> usize {
        self.axis_starts.iter().map(Vec::len).product()
    }
}

/// Starts along one axis: `ceil((n − p) / (step·p)) + 1` positions spread
/// evenly over `[0, n − p]` with integer division.
pub fn axis_starts(shape: usize, patch: usize, step_fraction: f64) -> Result<Vec<usize>> {
    if !(step_fraction > 0.0) || !step_fraction.is_finite() {
        return Err(Error::InvalidArgument(format!("tile step must be positive, got {step_fraction}")));
    }
    if patch == 0 || patch > shape {
        return Err(Error::InvalidArgument(format!("patch {patch} does not fit volume extent {shape}")));
    }
    let span = shape - patch;
    if span == 0 {
        return Ok(vec![0]);
    }
    let target_step = step_fraction * patch as f64;
    // more steps than integer positions would repeat starts
    let steps = ((span as f64 / target_step).ceil() as usize + 1).min(span + 1);
    Ok((0..steps).map(|i| i * span / (steps - 1)).collect())
}

/// Plan tiles over `shape`; axes shorter than the patch are padded to it.
pub fn plan_tiles(shape: [usize; 3], patch_size: [usize; 3], step_fraction: f64) -> Result<TilePlan> {
    let padded = [0, 1, 2].map(|a| shape[a].max(patch_size[a]));
    let axis = |a: usize| axis_starts(padded[a], patch_size[a], step_fraction);
    Ok(TilePlan {
        shape: padded,
        patch_size,
        step_fraction,
        axis_starts: [axis(0)?, axis(1)?, axis(2)?],
    })
}

/// Separable Gaussian centred at `(p − 1)/2` with `σ = sigma_scale·p` per
/// axis, scaled to a maximum of 1 and floored at 1e-8.
pub fn gaussian_weights(patch_size: [usize; 3], sigma_scale: f64) -> Array3<f32> {
    let axis = |p: usize| -> Vec<f64> {
        let c = (p as f64 - 1.0) / 2.0;
        let sigma = sigma_scale * p as f64;
        (0..p).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect()
    };
    let (wz, wy, wx) = (axis(patch_size[0]), axis(patch_size[1]), axis(patch_size[2]));
    let raw = Array3::from_shape_fn((patch_size[0], patch_size[1], patch_size[2]), |(z, y, x)| wz[z] * wy[y] * wx[x]);
    let max = raw.iter().cloned().fold(0.0f64, f64::max);
    raw.mapv(|v| (v / max).max(1e-8) as f32)
}

/// Anything that maps an image patch batch `(b, c, z, y, x)` to class
/// probabilities `(b, k, z, y, x)` of the same spatial size.
pub trait PatchPredictor {
    fn patch_size(&self) -> [usize; 3];
    fn predict(&self, batch: &Array5<f32>) -> Result<Array5<f32>>;
}

/// One head of a network used as a patch predictor.
pub struct NetworkPredictor<'a> {
    pub net: &'a Network,
    pub head: String,
    pub patch_size: [usize; 3],
}

impl<'a> NetworkPredictor<'a> {
    pub fn lesion(net: &'a Network, patch_size: [usize; 3]) -> Self {
        NetworkPredictor {
            net,
            head: LESION_HEAD.to_string(),
            patch_size,
        }
    }
}

impl PatchPredictor for NetworkPredictor<'_> {
    fn patch_size(&self) -> [usize; 3] {
        self.patch_size
    }

    fn predict(&self, batch: &Array5<f32>) -> Result<Array5<f32>> {
        self.net.predict_head(&self.head, batch)
    }
}

/// Pad `(c, z, y, x)` at the high end of each spatial axis by edge replication.
pub fn pad_edge(image: &Array4<f32>, shape: [usize; 3]) -> Array4<f32> {
    let (c, d, h, w) = image.dim();
    if [d, h, w] == shape {
        return image.clone();
    }
    Array4::from_shape_fn((c, shape[0], shape[1], shape[2]), |(ch, z, y, x)| {
        image[[ch, z.min(d - 1), y.min(h - 1), x.min(w - 1)]]
    })
}

/// Every subset of `axes` (spatial indices), starting with the empty one.
pub fn mirror_combinations(axes: &[usize]) -> Vec<Vec<usize>> {
    (0..1usize << axes.len())
        .map(|mask| axes.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &a)| a).collect())
        .collect()
}

fn flip(x: &Array5<f32>, axes: &[usize]) -> Array5<f32> {
    let mut v = x.view();
    for &a in axes {
        v.invert_axis(Axis(2 + a));
    }
    v.as_standard_layout().into_owned()
}

/// Gaussian-weighted sliding-window class probabilities for a `(c, z, y, x)`
/// image. Each tile is averaged over all mirror combinations of
/// `mirror_axes` before fusion.
pub fn sliding_window_predict(
    predictor: &dyn PatchPredictor,
    image: &Array4<f32>,
    step_fraction: f64,
    sigma_scale: f64,
    mirror_axes: &[usize],
) -> Result<Array4<f32>> {
    if let Some(&a) = mirror_axes.iter().find(|&&a| a > 2) {
        return Err(Error::InvalidArgument(format!("mirror axis {a} is not spatial")));
    }
    let (_, d, h, w) = image.dim();
    let patch = predictor.patch_size();
    let plan = plan_tiles([d, h, w], patch, step_fraction)?;
    let padded = pad_edge(image, plan.shape);
    let weights = gaussian_weights(patch, sigma_scale);
    let combos = mirror_combinations(mirror_axes);
    let mut acc: Option<Array4<f32>> = None;
    let mut norm = Array3::<f32>::zeros((plan.shape[0], plan.shape[1], plan.shape[2]));
    for [z, y, x] in plan.starts() {
        let window = s![.., z..z + patch[0], y..y + patch[1], x..x + patch[2]];
        let tile = padded.slice(window).to_owned().insert_axis(Axis(0));
        let mut mean: Option<Array4<f32>> = None;
        for combo in &combos {
            let out = predictor.predict(&flip(&tile, combo))?;
            if out.dim().0 != 1 || out.shape()[2..] != patch[..] {
                return Err(Error::ShapeMismatch(format!(
                    "predictor returned {:?} for patch {patch:?}",
                    out.shape()
                )));
            }
            let out = flip(&out, combo).index_axis_move(Axis(0), 0);
            mean = Some(match mean {
                Some(m) => m + out,
                None => out,
            });
        }
        let mut probs = mean.expect("at least the identity combination");
        let scale = 1.0 / combos.len() as f32;
        for mut c in probs.outer_iter_mut() {
            c.zip_mut_with(&weights, |v, &g| *v *= scale * g);
        }
        let acc = acc.get_or_insert_with(|| Array4::zeros((probs.dim().0, plan.shape[0], plan.shape[1], plan.shape[2])));
        if acc.dim().0 != probs.dim().0 {
            return Err(Error::ShapeMismatch("predictor changed its class count".into()));
        }
        let mut region = acc.slice_mut(window);
        region += &probs;
        let mut nregion = norm.slice_mut(s![z..z + patch[0], y..y + patch[1], x..x + patch[2]]);
        nregion += &weights;
    }
    let mut acc = acc.expect("at least one tile");
    for mut c in acc.outer_iter_mut() {
        c.zip_mut_with(&norm, |v, &n| *v /= n);
    }
    Ok(acc.slice(s![.., ..d, ..h, ..w]).to_owned())
}

/// Mirror axes for the folds after the first, plus how many folds are run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTAPlan {
    /// Mirror axes per kept fold; fold 0 never mirrors.
    pub fold_axes: Vec<Vec<usize>>,
    /// Estimated seconds per kept fold under the `t_first · 2^m` cost model.
    pub fold_seconds: Vec<f64>,
    pub num_mirror_axes: usize,
    pub folds_kept: usize,
}

/// Mirror axis priority: x, then y, then z.
pub const MIRROR_PRIORITY: [usize; 3] = [2, 1, 0];

pub fn axis_name(axis: usize) -> &'static str {
    ["z", "y", "x"][axis]
}

/// Pick the number of mirror axes for folds 2..n from the first fold's time.
/// A plan is admissible when its estimated total stays strictly below the
/// budget; if no mirroring fits, trailing folds are dropped (keeping ≥ 1).
pub fn schedule_tta(budget_s: f64, t_first_fold_s: f64, n_folds: usize, max_axes: usize) -> Result<TTAPlan> {
    if !(t_first_fold_s > 0.0) || n_folds == 0 {
        return Err(Error::InvalidArgument(format!(
            "need a positive first-fold time and at least one fold (got {t_first_fold_s}, {n_folds})"
        )));
    }
    let max_axes = max_axes.min(3);
    let cost = |m: usize, folds: usize| t_first_fold_s + (folds - 1) as f64 * t_first_fold_s * (1u32 << m) as f64;
    let (m, kept) = if n_folds == 1 {
        (0, 1)
    } else if cost(0, n_folds) < budget_s {
        ((0..=max_axes).rev().find(|&m| cost(m, n_folds) < budget_s).unwrap_or(0), n_folds)
    } else {
        (0, (1..n_folds).rev().find(|&k| cost(0, k) < budget_s).unwrap_or(1))
    };
    let axes: Vec<usize> = MIRROR_PRIORITY[..m].to_vec();
    let fold_axes: Vec<Vec<usize>> = (0..kept).map(|f| if f == 0 { Vec::new() } else { axes.clone() }).collect();
    let fold_seconds = fold_axes.iter().map(|a| t_first_fold_s * (1u32 << a.len()) as f64).collect();
    Ok(TTAPlan {
        fold_axes,
        fold_seconds,
        num_mirror_axes: m,
        folds_kept: kept,
    })
}

/// Per-case timing summary written next to each prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub t_first_fold_s: f64,
    pub chosen_axes: Vec<String>,
    pub total_s: f64,
    pub folds_used: usize,
}

/// Mean class probabilities over folds. Fold 0 runs unmirrored; its wall time
/// (or `config.first_fold_s`, when set) drives [`schedule_tta`] for the rest.
pub fn ensemble_probabilities(
    predictors: &[&dyn PatchPredictor],
    image: &Array4<f32>,
    config: &InferenceConfig,
) -> Result<(Array4<f32>, TimingRecord)> {
    if predictors.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one fold".into()));
    }
    let start = Instant::now();
    let mut sum = sliding_window_predict(predictors[0], image, config.step_fraction, config.sigma_scale, &[])?;
    let measured = start.elapsed().as_secs_f64().max(1e-9);
    let t_first = config.first_fold_s.unwrap_or(measured);
    let plan = schedule_tta(config.tta_budget_s, t_first, predictors.len(), config.max_mirror_axes)?;
    for (fold, axes) in plan.fold_axes.iter().enumerate().skip(1) {
        let p = sliding_window_predict(predictors[fold], image, config.step_fraction, config.sigma_scale, axes)?;
        if p.dim() != sum.dim() {
            return Err(Error::ShapeMismatch("folds disagree on class count".into()));
        }
        sum += &p;
    }
    sum.mapv_inplace(|v| v / plan.folds_kept as f32);
    let timing = TimingRecord {
        t_first_fold_s: t_first,
        chosen_axes: MIRROR_PRIORITY[..plan.num_mirror_axes].iter().map(|&a| axis_name(a).to_string()).collect(),
        total_s: start.elapsed().as_secs_f64(),
        folds_used: plan.folds_kept,
    };
    Ok((sum, timing))
}

/// Lesion where `p_lesion > p_background`; ties go to background.
pub fn lesion_mask(probs: &Array4<f32>) -> Array3<u8> {
    let bg = probs.index_axis(Axis(0), 0);
    let fg = probs.index_axis(Axis(0), 1);
    ndarray::Zip::from(&fg).and(&bg).map_collect(|&f, &b| (f > b) as u8)
}

/// Checkpoints restored as networks plus the settings they share.
pub struct Ensemble {
    pub nets: Vec<Network>,
    pub preprocess: PreprocessConfig,
    pub fingerprints: Option<crate::preprocess::ChannelFingerprints>,
    pub patch_size: [usize; 3],
}

impl Ensemble {
    pub fn from_checkpoints(checkpoints: &[Checkpoint], config: &ExperimentConfig) -> Result<Self> {
        let first = checkpoints
            .first()
            .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one checkpoint".into()))?;
        for (i, c) in checkpoints.iter().enumerate() {
            if c.spec != first.spec || c.in_channels != first.in_channels || c.heads != first.heads {
                return Err(Error::Checkpoint(format!("checkpoint {i} architecture differs from checkpoint 0")));
            }
            if c.meta.fingerprints != first.meta.fingerprints || c.meta.target_spacing != first.meta.target_spacing {
                return Err(Error::Checkpoint(format!("checkpoint {i} preprocessing differs from checkpoint 0")));
            }
            if !c.heads.iter().any(|h| h.name == LESION_HEAD && h.num_classes == 2) {
                return Err(Error::Checkpoint(format!("checkpoint {i} has no 2-class lesion head")));
            }
        }
        let mut preprocess = config.preprocess.clone();
        if let Some(sp) = first.meta.target_spacing {
            preprocess.target_spacing = sp;
        }
        let patch_size = first.meta.patch_size.unwrap_or(config.train.patch_size);
        first.spec.validate_patch(patch_size)?;
        Ok(Ensemble {
            nets: checkpoints.iter().map(Network::from_checkpoint).collect::<Result<_>>()?,
            preprocess,
            fingerprints: first.meta.fingerprints.clone(),
            patch_size,
        })
    }

    pub fn load(paths: &[PathBuf], config: &ExperimentConfig) -> Result<Self> {
        let ckpts = paths.iter().map(Checkpoint::load).collect::<Result<Vec<_>>>()?;
        Self::from_checkpoints(&ckpts, config)
    }
}

/// Prediction for one case on its original grid.
pub struct CasePrediction {
    pub mask: LabelMap,
    /// Fused lesion probability on the preprocessed grid.
    pub lesion_probability: Volume,
    pub timing: TimingRecord,
}

pub fn ensemble_predict(ensemble: &Ensemble, case: &CaseRecord, config: &InferenceConfig) -> Result<CasePrediction> {
    let pre = preprocess_case(case, &ensemble.preprocess, ensemble.fingerprints.as_ref())?;
    let image = image_stack(&pre)?;
    let predictors: Vec<NetworkPredictor> = ensemble
        .nets
        .iter()
        .map(|n| NetworkPredictor::lesion(n, ensemble.patch_size))
        .collect();
    let refs: Vec<&dyn PatchPredictor> = predictors.iter().map(|p| p as &dyn PatchPredictor).collect();
    let (probs, timing) = ensemble_probabilities(&refs, &image, config)?;
    let grid = pre.ct.grid();
    let mask = LabelMap::from_grid(lesion_mask(&probs), &grid, 2)?;
    let mask = resample_labels_onto(&mask, &case.ct.grid())?;
    let lesion_probability = Volume::from_grid(probs.index_axis(Axis(0), 1).to_owned(), &grid)?;
    Ok(CasePrediction {
        mask,
        lesion_probability,
        timing,
    })
}

/// Predict every manifest case into `out_dir` as `<id>_pred.nii.gz` and
/// `<id>_timing.json` (plus `<id>_prob.nii.gz` when `save_probabilities`).
pub fn predict_manifest(
    ensemble: &Ensemble,
    manifest: &DatasetManifest,
    config: &InferenceConfig,
    out_dir: impl AsRef<Path>,
    save_probabilities: bool,
) -> Result<Vec<(String, TimingRecord)>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Vec::new();
    for paths in &manifest.cases {
        let case = ingest_case(paths)?;
        let pred = ensemble_predict(ensemble, &case, config)?;
        write_label_map(&pred.mask, crate::evaluate::prediction_path(out_dir, &case.case_id))?;
        if save_probabilities {
            write_volume(&pred.lesion_probability, out_dir.join(format!("{}_prob.nii.gz", case.case_id)))?;
        }
        let tpath = out_dir.join(format!("{}_timing.json", case.case_id));
        std::fs::write(&tpath, serde_json::to_string_pretty(&pred.timing)?).map_err(|e| Error::io(&tpath, e))?;
        out.push((case.case_id.clone(), pred.timing));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant {
        patch: [usize; 3],
        p: f32,
    }

    impl PatchPredictor for Constant {
        fn patch_size(&self) -> [usize; 3] {
            self.patch
        }
        fn predict(&self, batch: &Array5<f32>) -> Result<Array5<f32>> {
            let (b, _, z, y, x) = batch.dim();
            let mut out = Array5::from_elem((b, 2, z, y, x), 1.0 - self.p);
            out.index_axis_mut(Axis(1), 1).fill(self.p);
            Ok(out)
        }
    }

    #[test]
    fn one_dimensional_starts() {
        assert_eq!(axis_starts(256, 192, 0.6).unwrap(), vec![0, 64]);
        assert_eq!(axis_starts(512, 192, 0.6).unwrap(), vec![0, 106, 213, 320]);
        assert_eq!(axis_starts(192, 192, 0.6).unwrap(), vec![0]);
        assert!(axis_starts(10, 4, 0.0).is_err());
    }

    #[test]
    fn small_volumes_are_padded() {
        let plan = plan_tiles([5, 20, 9], [8, 8, 8], 0.5).unwrap();
        assert_eq!(plan.shape, [8, 20, 9]);
        assert_eq!(plan.axis_starts[0], vec![0]);
        assert_eq!(*plan.axis_starts[1].last().unwrap(), 12);
    }

    #[test]
    fn gaussian_shape() {
        let w = gaussian_weights([8, 8, 8], 1.0 / 8.0);
        assert_eq!(w[[3, 3, 4]], 1.0);
        for i in 0..8 {
            assert_eq!(w[[i, 3, 3]], w[[7 - i, 3, 3]]);
        }
        let expected = (-(3.5f64.powi(2) - 0.25) / 2.0).exp();
        assert!(((w[[0, 3, 3]] / w[[3, 3, 3]]) as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn constant_predictions_survive_fusion() {
        let stub = Constant { patch: [4, 4, 4], p: 0.3 };
        let image = Array4::<f32>::zeros((2, 7, 9, 5));
        let out = sliding_window_predict(&stub, &image, 0.5, 0.125, &[2, 1]).unwrap();
        assert_eq!(out.dim(), (2, 7, 9, 5));
        assert!(out.index_axis(Axis(0), 1).iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn tta_worked_examples() {
        assert_eq!(schedule_tta(300.0, 20.0, 5, 2).unwrap().num_mirror_axes, 1);
        let p = schedule_tta(300.0, 10.0, 5, 2).unwrap();
        assert_eq!(p.num_mirror_axes, 2);
        assert_eq!(p.fold_axes[0], Vec::<usize>::new());
        assert_eq!(p.fold_axes[1], vec![2, 1]);
        let p = schedule_tta(300.0, 100.0, 5, 2).unwrap();
        assert_eq!((p.num_mirror_axes, p.folds_kept), (0, 2));
        assert_eq!(schedule_tta(1.0, 100.0, 5, 2).unwrap().folds_kept, 1);
        assert!(schedule_tta(300.0, 0.0, 5, 2).is_err());
    }

    #[test]
    fn ensemble_mean_threshold() {
        let a = Constant { patch: [4, 4, 4], p: 0.4 };
        let b = Constant { patch: [4, 4, 4], p: 0.8 };
        let image = Array4::<f32>::zeros((2, 4, 4, 4));
        let cfg = InferenceConfig {
            first_fold_s: Some(1.0),
            ..InferenceConfig::default()
        };
        let (probs, timing) = ensemble_probabilities(&[&a, &b], &image, &cfg).unwrap();
        assert!(probs.index_axis(Axis(0), 1).iter().all(|&v| (v - 0.6).abs() < 1e-6));
        assert!(lesion_mask(&probs).iter().all(|&v| v == 1));
        assert_eq!(timing.folds_used, 2);
        let tie = Constant { patch: [4, 4, 4], p: 0.5 };
        let (probs, _) = ensemble_probabilities(&[&tie], &image, &cfg).unwrap();
        assert!(lesion_mask(&probs).iter().all(|&v| v == 0));
    }
}
