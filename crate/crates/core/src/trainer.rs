//! Multi-dataset pretraining, fine-tuning, fold management and the
//! optimisation schedule.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use ndarray::{s, Array3, Array4, Array5, ArrayView3, ArrayView4, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_patch, Patch};
use crate::config::{AugmentConfig, ExperimentConfig, NormalizationMode, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluate::{dice_score, prediction_path, Connectivity, EvalReport};
use crate::inference::{ensemble_predict, lesion_mask, sliding_window_predict, Ensemble, NetworkPredictor};
use crate::io::{ingest_case, read_label_map, read_volume, write_label_map, DatasetManifest};
use crate::loss::{multitask_loss_with_grad, LossBreakdown, LossLogRecord, LossWeights};
use crate::model::{transfer_weights, Checkpoint, CheckpointMeta, HeadSpec, Network, NetworkSpec, LESION_HEAD, ORGAN_HEAD};
use crate::nn::{Grads, ParamStore};
use crate::preprocess::{
    image_stack, preprocess_case, resample_labels_onto, resample_onto, target_grid, zscore_normalize,
    ChannelFingerprints, Interpolation,
};
use crate::rng::{derive_seed, rng_from};
use crate::types::{CaseRecord, Tracer};

/// Environment variable capping the number of batch-preparation workers.
pub const NUM_WORKERS_ENV: &str = "PETSEG_NUM_WORKERS";

/// Worker count from `PETSEG_NUM_WORKERS`, else the available cores (max 4).
pub fn num_workers() -> usize {
    std::env::var(NUM_WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get().min(4)))
        .max(1)
}

/// A preprocessed case ready for patch sampling.
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub case_id: String,
    pub tracer: Tracer,
    /// `(channels, z, y, x)`.
    pub image: Array4<f32>,
    pub labels: Array3<u8>,
    pub organs: Option<Array3<u8>>,
    foreground: Vec<[usize; 3]>,
}

impl TrainCase {
    pub fn new(
        case_id: impl Into<String>,
        tracer: Tracer,
        image: Array4<f32>,
        labels: Array3<u8>,
        organs: Option<Array3<u8>>,
    ) -> Result<Self> {
        let case_id = case_id.into();
        let spatial = &image.shape()[1..];
        if labels.shape() != spatial || organs.as_ref().is_some_and(|o| o.shape() != spatial) {
            return Err(Error::ShapeMismatch(format!("case `{case_id}`: labels do not match image {spatial:?}")));
        }
        let foreground = labels
            .indexed_iter()
            .filter(|(_, &v)| v > 0)
            .map(|((z, y, x), _)| [z, y, x])
            .collect();
        Ok(TrainCase {
            case_id,
            tracer,
            image,
            labels,
            organs,
            foreground,
        })
    }

    /// From a preprocessed PET/CT case: image `[CT, PET]`, labels = lesion mask.
    pub fn from_record(case: &CaseRecord) -> Result<Self> {
        TrainCase::new(
            case.case_id.clone(),
            case.tracer,
            image_stack(case)?,
            case.lesion.data().clone(),
            case.organs.as_ref().map(|o| o.data().clone()),
        )
    }

    pub fn has_foreground(&self) -> bool {
        !self.foreground.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }
}

/// One pretraining dataset with its own segmentation head.
#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub name: String,
    pub cases: Vec<TrainCase>,
    pub num_classes: usize,
    pub modality: String,
}

impl DatasetEntry {
    pub fn new(name: impl Into<String>, cases: Vec<TrainCase>, num_classes: usize, modality: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if cases.is_empty() {
            return Err(Error::Config(format!("dataset `{name}` has no cases")));
        }
        if num_classes < 2 || num_classes > u8::MAX as usize {
            return Err(Error::Config(format!("dataset `{name}`: invalid class count {num_classes}")));
        }
        let channels = cases[0].image.shape()[0];
        for c in &cases {
            if c.image.shape()[0] != channels {
                return Err(Error::ShapeMismatch(format!("dataset `{name}` mixes channel counts")));
            }
            if c.labels.iter().any(|&v| v as usize >= num_classes) {
                return Err(Error::InvalidLabels(format!(
                    "dataset `{name}`, case `{}`: label ≥ {num_classes}",
                    c.case_id
                )));
            }
        }
        Ok(DatasetEntry {
            name,
            cases,
            num_classes,
            modality: modality.into(),
        })
    }

    pub fn channels(&self) -> usize {
        self.cases[0].image.shape()[0]
    }
}

/// Draws dataset indices with `P(i) ∝ 1/√n_i`.
#[derive(Debug, Clone)]
pub struct DatasetSampler {
    probabilities: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl DatasetSampler {
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Config("dataset sampler needs at least one non-empty dataset".into()));
        }
        let raw: Vec<f64> = sizes.iter().map(|&n| 1.0 / (n as f64).sqrt()).collect();
        let total: f64 = raw.iter().sum();
        let probabilities: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let dist = WeightedIndex::new(&probabilities).expect("positive weights");
        Ok(DatasetSampler { probabilities, dist })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }
}

pub fn make_dataset_sampler(entries: &[DatasetEntry]) -> Result<DatasetSampler> {
    DatasetSampler::from_sizes(&entries.iter().map(|e| e.cases.len()).collect::<Vec<_>>())
}

/// Stratification key of a case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldCase {
    pub case_id: String,
    pub tracer: Tracer,
    pub has_lesion: bool,
}

impl From<&CaseRecord> for FoldCase {
    fn from(c: &CaseRecord) -> Self {
        FoldCase {
            case_id: c.case_id.clone(),
            tracer: c.tracer,
            has_lesion: c.has_lesion(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Stratified k-fold split. Cases are grouped by (tracer, lesion presence),
/// shuffled within each group, and dealt round-robin with one counter that
/// runs across groups, so both per-stratum and total fold sizes differ by ≤ 1.
pub fn split_folds(cases: &[FoldCase], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if cases.len() < k {
        return Err(Error::Config(format!("{} cases cannot fill {k} folds", cases.len())));
    }
    let ids: BTreeSet<&str> = cases.iter().map(|c| c.case_id.as_str()).collect();
    if ids.len() != cases.len() {
        return Err(Error::Config("duplicate case ids in fold split".into()));
    }
    let mut strata: BTreeMap<(Tracer, bool), Vec<&str>> = BTreeMap::new();
    for c in cases {
        strata.entry((c.tracer, c.has_lesion)).or_default().push(&c.case_id);
    }
    let mut rng = rng_from(derive_seed(seed, &[0x5f01d]));
    let mut val: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut counter = 0usize;
    for members in strata.values_mut() {
        members.sort_unstable();
        members.shuffle(&mut rng);
        for id in members.iter() {
            val[counter % k].push(id.to_string());
            counter += 1;
        }
    }
    Ok(val
        .into_iter()
        .enumerate()
        .map(|(fold_id, mut v)| {
            v.sort();
            let held: BTreeSet<&str> = v.iter().map(String::as_str).collect();
            let train = ids.iter().filter(|id| !held.contains(**id)).map(|id| id.to_string()).collect();
            FoldSplit { fold_id, train, val: v }
        })
        .collect())
}

/// `lr₀ · (1 − step/total)^exponent`.
pub fn poly_lr(lr0: f64, step: u64, total: u64, exponent: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = 1.0 - (step.min(total) as f64 / total as f64);
    lr0 * frac.powf(exponent)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip_norm: f64,
}

impl From<&TrainConfig> for SgdConfig {
    fn from(t: &TrainConfig) -> Self {
        SgdConfig {
            momentum: t.momentum,
            nesterov: t.nesterov,
            weight_decay: t.weight_decay,
            grad_clip_norm: t.grad_clip_norm,
        }
    }
}

/// SGD with (Nesterov) momentum, decoupled from the network so parameters
/// that received no gradient in a step are left untouched.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Option<Vec<f32>>>,
}

impl Sgd {
    pub fn new(config: SgdConfig, num_params: usize) -> Self {
        Sgd {
            config,
            velocity: vec![None; num_params],
        }
    }

    /// Apply one update; returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) -> f64 {
        let norm = grads.norm();
        let c = &self.config;
        let clip = if c.grad_clip_norm > 0.0 && norm > c.grad_clip_norm {
            (c.grad_clip_norm / norm) as f32
        } else {
            1.0
        };
        let (mu, wd, lr) = (c.momentum as f32, c.weight_decay as f32, lr as f32);
        for (id, g) in grads.slots.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(id);
            let v = self.velocity[id].get_or_insert_with(|| vec![0.0; g.len()]);
            for ((w, vi), &gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                let d = gi * clip + wd * *w;
                *vi = mu * *vi + d;
                let update = if c.nesterov { d + mu * *vi } else { *vi };
                *w -= lr * update;
            }
        }
        norm
    }
}

/// A training batch: `(b, c, z, y, x)` images and per-head targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub image: Array5<f32>,
    pub targets: BTreeMap<String, Array4<u8>>,
    /// Case id of every sample.
    pub case_ids: Vec<String>,
}

/// How batches are cut from a set of cases.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    /// Fraction of each batch centred on a foreground voxel.
    pub foreground_fraction: f64,
    /// Head that receives `TrainCase::labels` as its target.
    pub label_head: String,
    /// Also emit the organ map as the `organs` target.
    pub with_organs: bool,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl BatchPlan {
    /// Number of trailing samples per batch that are forced to foreground:
    /// `max(1, round(batch·fraction))`, or 0 when the fraction is 0.
    pub fn forced_foreground(&self) -> usize {
        if self.foreground_fraction <= 0.0 {
            0
        } else {
            ((self.batch_size as f64 * self.foreground_fraction).round() as usize).clamp(1, self.batch_size)
        }
    }
}

fn crop_start<R: Rng + ?Sized>(rng: &mut R, shape: [usize; 3], patch: [usize; 3], centre: Option<[usize; 3]>) -> [usize; 3] {
    [0, 1, 2].map(|a| {
        let max = shape[a].saturating_sub(patch[a]);
        match centre {
            Some(c) => c[a].saturating_sub(patch[a] / 2).min(max),
            None => rng.random_range(0..=max),
        }
    })
}

fn crop3<T: Copy>(a: &ArrayView3<T>, start: [usize; 3], patch: [usize; 3]) -> Array3<T> {
    let (d, h, w) = a.dim();
    if start[0] + patch[0] <= d && start[1] + patch[1] <= h && start[2] + patch[2] <= w {
        return a
            .slice(s![start[0]..start[0] + patch[0], start[1]..start[1] + patch[1], start[2]..start[2] + patch[2]])
            .to_owned();
    }
    Array3::from_shape_fn((patch[0], patch[1], patch[2]), |(z, y, x)| {
        a[[(start[0] + z).min(d - 1), (start[1] + y).min(h - 1), (start[2] + x).min(w - 1)]]
    })
}

fn crop4(a: &ArrayView4<f32>, start: [usize; 3], patch: [usize; 3]) -> Array4<f32> {
    let views: Vec<Array3<f32>> = a.outer_iter().map(|c| crop3(&c, start, patch)).collect();
    let refs: Vec<ArrayView3<f32>> = views.iter().map(|v| v.view()).collect();
    ndarray::stack(Axis(0), &refs).expect("equal crops")
}

fn mirror_sample<R: Rng + ?Sized>(
    image: &mut Array4<f32>,
    labels: &mut Array3<u8>,
    organs: &mut Option<Array3<u8>>,
    prob: f64,
    rng: &mut R,
) {
    for a in 0..3 {
        if prob > 0.0 && rng.random_bool(prob) {
            image.invert_axis(Axis(a + 1));
            labels.invert_axis(Axis(a));
            if let Some(o) = organs.as_mut() {
                o.invert_axis(Axis(a));
            }
        }
    }
    *image = image.as_standard_layout().into_owned();
    *labels = labels.as_standard_layout().into_owned();
    if let Some(o) = organs.as_mut() {
        *o = o.as_standard_layout().into_owned();
    }
}

/// Deterministically build the batch for `step` from `cases`.
pub fn make_batch(cases: &[TrainCase], plan: &BatchPlan, step: u64) -> Result<Batch> {
    if cases.is_empty() {
        return Err(Error::Config("cannot sample a batch from zero cases".into()));
    }
    let fg_cases: Vec<usize> = (0..cases.len()).filter(|&i| cases[i].has_foreground()).collect();
    let first_forced = plan.batch_size - plan.forced_foreground();
    let p = plan.patch_size;
    let mut images = Vec::with_capacity(plan.batch_size);
    let mut labels = Vec::with_capacity(plan.batch_size);
    let mut organs = Vec::with_capacity(plan.batch_size);
    let mut case_ids = Vec::with_capacity(plan.batch_size);
    for i in 0..plan.batch_size {
        let mut rng = rng_from(derive_seed(plan.seed, &[step, i as u64]));
        let forced = i >= first_forced && !fg_cases.is_empty();
        let case = if forced {
            &cases[fg_cases[rng.random_range(0..fg_cases.len())]]
        } else {
            &cases[rng.random_range(0..cases.len())]
        };
        let centre = forced.then(|| case.foreground[rng.random_range(0..case.foreground.len())]);
        let start = crop_start(&mut rng, case.shape(), p, centre);
        let mut img = crop4(&case.image.view(), start, p);
        let mut lab = crop3(&case.labels.view(), start, p);
        let mut org = if plan.with_organs {
            let o = case
                .organs
                .as_ref()
                .ok_or_else(|| Error::Config(format!("case `{}` has no organ labels", case.case_id)))?;
            Some(crop3(&o.view(), start, p))
        } else {
            None
        };
        if img.shape()[0] == 2 {
            let patch = augment_patch(&Patch::new(img, lab, org)?, &plan.augment, &mut rng);
            img = patch.image;
            lab = patch.lesion;
            org = patch.organs;
        } else {
            mirror_sample(&mut img, &mut lab, &mut org, plan.augment.mirror_prob, &mut rng);
        }
        images.push(img);
        labels.push(lab);
        organs.push(org);
        case_ids.push(case.case_id.clone());
    }
    let stack4 = |v: &[Array4<f32>]| ndarray::stack(Axis(0), &v.iter().map(|a| a.view()).collect::<Vec<_>>());
    let stack3 = |v: &[Array3<u8>]| ndarray::stack(Axis(0), &v.iter().map(|a| a.view()).collect::<Vec<_>>());
    let image = stack4(&images).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let mut targets = BTreeMap::new();
    targets.insert(plan.label_head.clone(), stack3(&labels).map_err(|e| Error::ShapeMismatch(e.to_string()))?);
    if plan.with_organs {
        let o: Vec<Array3<u8>> = organs.into_iter().map(|o| o.expect("checked above")).collect();
        targets.insert(ORGAN_HEAD.to_string(), stack3(&o).map_err(|e| Error::ShapeMismatch(e.to_string()))?);
    }
    Ok(Batch {
        image,
        targets,
        case_ids,
    })
}

/// Produce items for `steps` on `workers` threads (bounded queue) and hand
/// them to `consume` in step order. Output is independent of `workers`.
pub fn run_pipelined<T: Send>(
    workers: usize,
    steps: Range<u64>,
    make: &(dyn Fn(u64) -> Result<T> + Sync),
    mut consume: impl FnMut(u64, T) -> Result<()>,
) -> Result<()> {
    if workers <= 1 || steps.end - steps.start <= 1 {
        for step in steps {
            consume(step, make(step)?)?;
        }
        return Ok(());
    }
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<(u64, Result<T>)>(2 * workers);
        for w in 0..workers as u64 {
            let tx = tx.clone();
            let range = steps.clone();
            scope.spawn(move || {
                for step in range.filter(|s| (s - steps.start) % workers as u64 == w) {
                    if tx.send((step, make(step))).is_err() {
                        return;
                    }
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut next = steps.start;
        for (step, item) in rx.iter() {
            pending.insert(step, item);
            while let Some(item) = pending.remove(&next) {
                consume(next, item?)?;
                next += 1;
            }
        }
        Ok(())
    })
}

/// Forward, loss and backward for one batch over `heads`.
pub fn compute_gradients(
    net: &Network,
    batch: &Batch,
    heads: &[&str],
    weights: &LossWeights,
    smooth: f64,
) -> Result<(LossBreakdown, Grads)> {
    let (logits, tape) = net.forward_train(&batch.image, heads)?;
    let targets: BTreeMap<String, Array4<u8>> = batch
        .targets
        .iter()
        .filter(|(k, _)| heads.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let (loss, dlogits) = multitask_loss_with_grad(&logits, &targets, weights, smooth)?;
    let grads = net.backward(tape, &dlogits)?;
    Ok((loss, grads))
}

fn open_log(path: Option<&Path>) -> Result<Option<std::io::BufWriter<std::fs::File>>> {
    path.map(|p| {
        std::fs::File::create(p)
            .map(std::io::BufWriter::new)
            .map_err(|e| Error::io(p, e))
    })
    .transpose()
}

fn write_log(log: &mut Option<std::io::BufWriter<std::fs::File>>, path: Option<&Path>, rec: &LossLogRecord) -> Result<()> {
    if let (Some(w), Some(p)) = (log.as_mut(), path) {
        writeln!(w, "{}", rec.to_json_line()).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Result of a pretraining run.
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Optimiser steps taken through each head.
    pub head_steps: BTreeMap<String, u64>,
    /// Sampled dataset index of every step.
    pub dataset_sequence: Vec<usize>,
    pub log: Vec<LossLogRecord>,
}

/// Multi-dataset pretraining. Each step samples one dataset, builds a batch
/// from it alone and back-propagates only through that dataset's head.
pub fn pretrain(config: &ExperimentConfig, entries: &[DatasetEntry], log_path: Option<&Path>) -> Result<PretrainOutcome> {
    config.validate()?;
    let pc = &config.pretrain;
    let sampler = make_dataset_sampler(entries)?;
    for e in entries {
        if e.channels() != pc.in_channels {
            return Err(Error::Config(format!(
                "dataset `{}` has {} channels but pretrain.in_channels = {}",
                e.name,
                e.channels(),
                pc.in_channels
            )));
        }
    }
    let spec = NetworkSpec::from_config(&config.model);
    spec.validate_patch(pc.patch_size)?;
    let heads: Vec<HeadSpec> = entries.iter().map(|e| HeadSpec::new(e.name.clone(), e.num_classes)).collect();
    let mut net = Network::build(&spec, &heads, pc.in_channels, derive_seed(config.seed, &[1]))?;
    let mut opt = Sgd::new(SgdConfig::from(&config.train), net.params().len());
    let total = (pc.epochs * pc.iterations_per_epoch) as u64;

    let mut rng = rng_from(derive_seed(config.seed, &[2]));
    let sequence: Vec<usize> = (0..total).map(|_| sampler.sample(&mut rng)).collect();
    let weights: Vec<LossWeights> = entries
        .iter()
        .map(|e| LossWeights::new([(e.name.clone(), 1.0)], spec.num_output_scales()))
        .collect::<Result<_>>()?;
    let plans: Vec<BatchPlan> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| BatchPlan {
            patch_size: pc.patch_size,
            batch_size: pc.batch_size,
            foreground_fraction: config.train.foreground_oversample,
            label_head: e.name.clone(),
            with_organs: false,
            augment: AugmentConfig {
                misalign: crate::config::MisalignConfig {
                    prob: 0.0,
                    ..config.augment.misalign.clone()
                },
                ..config.augment.clone()
            },
            seed: derive_seed(config.seed, &[3, i as u64]),
        })
        .collect();
    let head_ids: Vec<Vec<usize>> = entries
        .iter()
        .map(|e| {
            net.params()
                .iter()
                .enumerate()
                .filter(|(_, p)| Network::is_head_param(&p.name, &e.name))
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    let mut head_steps: BTreeMap<String, u64> = entries.iter().map(|e| (e.name.clone(), 0)).collect();
    let mut log_records = Vec::new();
    let mut log = open_log(log_path)?;
    let make = |step: u64| {
        let ds = sequence[step as usize];
        make_batch(&entries[ds].cases, &plans[ds], step)
    };
    run_pipelined(num_workers(), 0..total, &make, |step, batch| {
        let ds = sequence[step as usize];
        let name = entries[ds].name.as_str();
        let (loss, grads) = compute_gradients(&net, &batch, &[name], &weights[ds], config.loss.dice_smooth)?;
        for (other, ids) in head_ids.iter().enumerate() {
            if other != ds && ids.iter().any(|&id| grads.get(id).is_some_and(|g| g.iter().any(|&v| v != 0.0))) {
                return Err(Error::Network(format!("gradient leaked into head `{}`", entries[other].name)));
            }
        }
        let lr = poly_lr(pc.initial_lr, step, total, config.train.poly_exponent);
        let grad_norm = opt.step(net.params_mut(), &grads, lr);
        *head_steps.get_mut(name).expect("known head") += 1;
        let mut rec = LossLogRecord::new(step, &loss);
        rec.lr = Some(lr);
        rec.grad_norm = Some(grad_norm);
        write_log(&mut log, log_path, &rec)?;
        log_records.push(rec);
        Ok(())
    })?;
    if let (Some(mut w), Some(p)) = (log, log_path) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let meta = CheckpointMeta {
        target_spacing: Some(pc.target_spacing),
        patch_size: Some(pc.patch_size),
        head_steps: head_steps.clone(),
        ..CheckpointMeta::default()
    };
    Ok(PretrainOutcome {
        checkpoint: net.to_checkpoint(total, meta),
        head_steps,
        dataset_sequence: sequence,
        log: log_records,
    })
}

/// Result of one fine-tuning run.
pub struct FinetuneOutcome {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub best_val_dice: Option<f64>,
    /// `(epoch, mean validation lesion Dice)` for every validation round.
    pub val_history: Vec<(usize, f64)>,
    pub log: Vec<LossLogRecord>,
}

/// Options of [`finetune`] that are not part of the experiment config.
#[derive(Debug, Clone, Default)]
pub struct FinetuneOptions {
    pub fold: usize,
    pub log_path: Option<PathBuf>,
    /// Stored in both output checkpoints (fingerprints, spacing).
    pub meta: CheckpointMeta,
}

/// Sliding-window lesion Dice of `net` on each case (preprocessed grid).
pub fn lesion_dice_per_case(net: &Network, cases: &[TrainCase], patch: [usize; 3], config: &crate::config::InferenceConfig) -> Result<Vec<f64>> {
    let predictor = NetworkPredictor::lesion(net, patch);
    cases
        .iter()
        .map(|c| {
            let probs = sliding_window_predict(&predictor, &c.image, config.step_fraction, config.sigma_scale, &[])?;
            let pred = lesion_mask(&probs).mapv(|v| v > 0);
            dice_score(&pred.view(), &c.labels.mapv(|v| v > 0).view())
        })
        .collect()
}

/// Fine-tune lesion (and optionally organ) heads on `train`, validating on `val`.
pub fn finetune(
    config: &ExperimentConfig,
    pretrained: Option<&Checkpoint>,
    train: &[TrainCase],
    val: &[TrainCase],
    options: &FinetuneOptions,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    let tc = &config.train;
    let spec = NetworkSpec::from_config(&config.model);
    spec.validate_patch(tc.patch_size)?;
    let organ = config.model.organ_supervision;
    let heads = HeadSpec::finetune_heads(organ);
    let seed = derive_seed(config.seed, &[10, options.fold as u64]);
    let mut net = match pretrained {
        Some(ckpt) => transfer_weights(ckpt, &spec, &heads, 2, seed)?,
        None => Network::build(&spec, &heads, 2, seed)?,
    };
    if train.is_empty() {
        return Err(Error::Config("fine-tuning needs at least one training case".into()));
    }
    let mut head_weights = vec![(LESION_HEAD.to_string(), config.loss.lesion_weight)];
    if organ {
        head_weights.push((ORGAN_HEAD.to_string(), config.loss.organ_weight));
    }
    let weights = LossWeights::new(head_weights, spec.num_output_scales())?;
    let active: Vec<&str> = weights.heads.iter().filter(|(_, &w)| w > 0.0).map(|(k, _)| k.as_str()).collect();
    let plan = BatchPlan {
        patch_size: tc.patch_size,
        batch_size: tc.batch_size,
        foreground_fraction: tc.foreground_oversample,
        label_head: LESION_HEAD.to_string(),
        with_organs: organ && active.contains(&ORGAN_HEAD),
        augment: config.augment.clone(),
        seed: derive_seed(config.seed, &[11, options.fold as u64]),
    };
    let mut opt = Sgd::new(SgdConfig::from(tc), net.params().len());
    let total = (tc.epochs * tc.iterations_per_epoch) as u64;
    let mut meta = options.meta.clone();
    meta.fold = Some(options.fold);
    meta.patch_size = Some(tc.patch_size);

    let mut log_records = Vec::new();
    let log_path = options.log_path.as_deref();
    let mut log = open_log(log_path)?;
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut history = Vec::new();
    let iters = tc.iterations_per_epoch.max(1) as u64;
    let make = |step: u64| make_batch(train, &plan, step);
    run_pipelined(num_workers(), 0..total, &make, |step, batch| {
        let (loss, grads) = compute_gradients(&net, &batch, &active, &weights, config.loss.dice_smooth)?;
        let lr = poly_lr(tc.initial_lr, step, total, tc.poly_exponent);
        let grad_norm = opt.step(net.params_mut(), &grads, lr);
        let mut rec = LossLogRecord::new(step, &loss);
        rec.lr = Some(lr);
        rec.grad_norm = Some(grad_norm);
        write_log(&mut log, log_path, &rec)?;
        log_records.push(rec);
        let epoch_done = (step + 1) % iters == 0;
        let epoch = ((step + 1) / iters) as usize;
        if epoch_done && !val.is_empty() && tc.validate_every > 0 && epoch % tc.validate_every == 0 {
            let dices = lesion_dice_per_case(&net, val, tc.patch_size, &config.inference)?;
            let mean = dices.iter().sum::<f64>() / dices.len() as f64;
            history.push((epoch, mean));
            if best.as_ref().is_none_or(|(b, _)| mean > *b) {
                let mut m = meta.clone();
                m.best_val_dice = Some(mean);
                best = Some((mean, net.to_checkpoint(step + 1, m)));
            }
        }
        Ok(())
    })?;
    if let (Some(mut w), Some(p)) = (log, log_path) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let final_checkpoint = net.to_checkpoint(total, meta);
    let (best_val_dice, best_checkpoint) = match best {
        Some((d, c)) => (Some(d), c),
        None => (None, final_checkpoint.clone()),
    };
    Ok(FinetuneOutcome {
        final_checkpoint,
        best_checkpoint,
        best_val_dice,
        val_history: history,
        log: log_records,
    })
}

/// Output of [`train_all_folds`].
pub struct CrossValidation {
    pub splits: Vec<FoldSplit>,
    pub report: EvalReport,
    /// Final checkpoint path per fold.
    pub checkpoints: Vec<PathBuf>,
    pub prediction_dir: PathBuf,
    pub report_dir: PathBuf,
}

/// Dataset fingerprints (fingerprint mode) or `None` (z-score mode).
pub fn fingerprints_for(config: &ExperimentConfig, cases: &[CaseRecord]) -> Result<Option<ChannelFingerprints>> {
    match config.preprocess.normalization {
        NormalizationMode::Fingerprint => Ok(Some(ChannelFingerprints::compute(cases)?)),
        NormalizationMode::Zscore => Ok(None),
    }
}

/// K-fold fine-tuning with validation predictions on the original grids.
///
/// Writes into `out_dir`: `splits.json`, `fingerprints.json` (fingerprint
/// mode), `fold_<k>/{checkpoint_final,checkpoint_best}.ckpt`,
/// `fold_<k>/train_log.jsonl`, `predictions/<id>_pred.nii.gz` and the
/// report files under `report/`.
pub fn train_all_folds(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    pretrained: Option<&Checkpoint>,
    out_dir: impl AsRef<Path>,
) -> Result<CrossValidation> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let raw: Vec<CaseRecord> = manifest.cases.iter().map(ingest_case).collect::<Result<_>>()?;
    let fold_cases: Vec<FoldCase> = raw.iter().map(FoldCase::from).collect();
    let splits = split_folds(&fold_cases, config.train.folds, config.seed)?;
    let splits_path = out_dir.join("splits.json");
    std::fs::write(&splits_path, serde_json::to_string_pretty(&splits)?).map_err(|e| Error::io(&splits_path, e))?;

    let fingerprints = fingerprints_for(config, &raw)?;
    if let Some(fp) = &fingerprints {
        fp.save(out_dir.join("fingerprints.json"))?;
    }
    let prepared: BTreeMap<String, TrainCase> = raw
        .iter()
        .map(|c| {
            let pre = preprocess_case(c, &config.preprocess, fingerprints.as_ref())?;
            Ok((c.case_id.clone(), TrainCase::from_record(&pre)?))
        })
        .collect::<Result<_>>()?;
    let by_id: BTreeMap<&str, &CaseRecord> = raw.iter().map(|c| (c.case_id.as_str(), c)).collect();

    let prediction_dir = out_dir.join("predictions");
    std::fs::create_dir_all(&prediction_dir).map_err(|e| Error::io(&prediction_dir, e))?;
    let meta = CheckpointMeta {
        fingerprints: fingerprints.clone(),
        target_spacing: Some(config.preprocess.target_spacing),
        ..CheckpointMeta::default()
    };
    let mut checkpoints = Vec::new();
    let mut metrics = Vec::new();
    for split in &splits {
        let fold_dir = out_dir.join(format!("fold_{}", split.fold_id));
        std::fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;
        let pick = |ids: &[String]| ids.iter().map(|id| prepared[id].clone()).collect::<Vec<_>>();
        let options = FinetuneOptions {
            fold: split.fold_id,
            log_path: Some(fold_dir.join("train_log.jsonl")),
            meta: meta.clone(),
        };
        let outcome = finetune(config, pretrained, &pick(&split.train), &pick(&split.val), &options)?;
        let final_path = fold_dir.join("checkpoint_final.ckpt");
        outcome.final_checkpoint.save(&final_path)?;
        outcome.best_checkpoint.save(fold_dir.join("checkpoint_best.ckpt"))?;
        checkpoints.push(final_path);

        let ensemble = Ensemble::from_checkpoints(std::slice::from_ref(&outcome.final_checkpoint), config)?;
        for id in &split.val {
            let case = by_id[id.as_str()];
            let pred = ensemble_predict(&ensemble, case, &config.inference)?;
            write_label_map(&pred.mask, prediction_path(&prediction_dir, id))?;
            metrics.push(crate::evaluate::evaluate_case(
                id,
                case.tracer,
                &pred.mask.foreground().view(),
                &case.lesion.foreground().view(),
                case.lesion.spacing(),
                Connectivity::default(),
            )?);
        }
    }
    let report = EvalReport::from_cases(metrics, Connectivity::default())?;
    let report_dir = out_dir.join("report");
    report.write_all(&report_dir, "cross-validation")?;
    Ok(CrossValidation {
        splits,
        report,
        checkpoints,
        prediction_dir,
        report_dir,
    })
}

/// One pretraining dataset on disk: single-channel images with label maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainDatasetPaths {
    pub name: String,
    pub num_classes: usize,
    #[serde(default)]
    pub modality: String,
    pub cases: Vec<PretrainCasePaths>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainCasePaths {
    #[serde(default)]
    pub case_id: Option<String>,
    pub image: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainManifest {
    pub datasets: Vec<PretrainDatasetPaths>,
}

impl PretrainManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: PretrainManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut m.datasets {
            for c in &mut d.cases {
                for p in [&mut c.image, &mut c.labels] {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            }
        }
        Ok(m)
    }

    /// Write single-channel entries as NIfTI files under `dir/<name>/` and
    /// save the manifest as `dir/pretrain_manifest.json`.
    pub fn write_entries(entries: &[DatasetEntry], spacing: crate::types::Vec3, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let mut manifest = PretrainManifest::default();
        for e in entries {
            if e.channels() != 1 {
                return Err(Error::InvalidArgument(format!("dataset `{}` is not single-channel", e.name)));
            }
            let sub = dir.join(&e.name);
            std::fs::create_dir_all(&sub).map_err(|err| Error::io(&sub, err))?;
            let classes = e.num_classes as u8;
            let mut cases = Vec::with_capacity(e.cases.len());
            for c in &e.cases {
                let image = PathBuf::from(&e.name).join(format!("{}_image.nii.gz", c.case_id));
                let labels = PathBuf::from(&e.name).join(format!("{}_labels.nii.gz", c.case_id));
                let volume = crate::types::Volume::new(c.image.index_axis(Axis(0), 0).to_owned(), spacing, [0.0; 3])?;
                crate::io::write_volume(&volume, dir.join(&image))?;
                let map = crate::types::LabelMap::new(c.labels.clone(), spacing, [0.0; 3], classes)?;
                write_label_map(&map, dir.join(&labels))?;
                cases.push(PretrainCasePaths {
                    case_id: Some(c.case_id.clone()),
                    image,
                    labels,
                });
            }
            manifest.datasets.push(PretrainDatasetPaths {
                name: e.name.clone(),
                num_classes: e.num_classes,
                modality: e.modality.clone(),
                cases,
            });
        }
        let path = dir.join("pretrain_manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Load every dataset resampled to `spacing` and z-score normalised.
    pub fn load_entries(&self, spacing: crate::types::Vec3) -> Result<Vec<DatasetEntry>> {
        self.datasets
            .iter()
            .map(|d| {
                let classes = u8::try_from(d.num_classes)
                    .map_err(|_| Error::Config(format!("dataset `{}`: too many classes", d.name)))?;
                let cases = d
                    .cases
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let image = read_volume(&c.image)?;
                        let grid = target_grid(&image.grid(), spacing)?;
                        let image = zscore_normalize(&resample_onto(&image, &grid, Interpolation::Linear)?)?;
                        let labels = resample_labels_onto(&read_label_map(&c.labels, classes)?, &grid)?;
                        let id = c.case_id.clone().unwrap_or_else(|| format!("{}_{i:04}", d.name));
                        TrainCase::new(id, Tracer::Unknown, image.into_data().insert_axis(Axis(0)), labels.into_data(), None)
                    })
                    .collect::<Result<Vec<_>>>()?;
                DatasetEntry::new(d.name.clone(), cases, d.num_classes, d.modality.clone())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fold_case(id: &str, tracer: Tracer, lesion: bool) -> FoldCase {
        FoldCase {
            case_id: id.into(),
            tracer,
            has_lesion: lesion,
        }
    }

    #[test]
    fn sampler_probabilities() {
        let p = DatasetSampler::from_sizes(&[1, 4, 9]).unwrap();
        let expect = [6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0];
        for (a, b) in p.probabilities().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(DatasetSampler::from_sizes(&[7]).unwrap().probabilities(), &[1.0]);
        let eq = DatasetSampler::from_sizes(&[5, 5, 5, 5]).unwrap();
        assert!(eq.probabilities().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert!(DatasetSampler::from_sizes(&[]).is_err());
    }

    #[test]
    fn stratified_folds() {
        let mut cases = Vec::new();
        for i in 0..5 {
            cases.push(fold_case(&format!("fdg_{i}"), Tracer::Fdg, true));
            cases.push(fold_case(&format!("psma_{i}"), Tracer::Psma, false));
        }
        let folds = split_folds(&cases, 5, 3).unwrap();
        for f in &folds {
            assert_eq!(f.val.len(), 2);
            assert_eq!(f.val.iter().filter(|v| v.starts_with("fdg")).count(), 1);
            assert!(f.train.iter().all(|t| !f.val.contains(t)));
        }
        assert_eq!(folds, split_folds(&cases, 5, 3).unwrap());

        let seven: Vec<FoldCase> = (0..7).map(|i| fold_case(&format!("c{i}"), Tracer::Fdg, true)).collect();
        let mut sizes: Vec<usize> = split_folds(&seven, 5, 0).unwrap().iter().map(|f| f.val.len()).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
        assert!(split_folds(&seven[..3], 5, 0).is_err());
    }

    #[test]
    fn poly_schedule() {
        assert!((poly_lr(1e-3, 50, 100, 0.9) - 1e-3 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(poly_lr(1e-3, 100, 100, 0.9), 0.0);
        let lrs: Vec<f64> = (0..=100).map(|s| poly_lr(1e-2, s, 100, 0.9)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn pipelined_order_is_worker_independent() {
        let make = |s: u64| -> Result<u64> { Ok(s * s) };
        for workers in [1, 2, 3] {
            let mut seen = Vec::new();
            run_pipelined(workers, 3..11, &make, |s, v| {
                seen.push((s, v));
                Ok(())
            })
            .unwrap();
            assert_eq!(seen, (3..11).map(|s| (s, s * s)).collect::<Vec<_>>());
        }
        let failing = |s: u64| -> Result<u64> {
            if s == 5 {
                Err(Error::Config("boom".into()))
            } else {
                Ok(s)
            }
        };
        assert!(run_pipelined(2, 0..10, &failing, |_, _| Ok(())).is_err());
    }

    #[test]
    fn forced_foreground_counts() {
        let mut plan = BatchPlan {
            patch_size: [4, 4, 4],
            batch_size: 2,
            foreground_fraction: 1.0 / 3.0,
            label_head: LESION_HEAD.into(),
            with_organs: false,
            augment: AugmentConfig::disabled(),
            seed: 0,
        };
        assert_eq!(plan.forced_foreground(), 1);
        plan.batch_size = 24;
        assert_eq!(plan.forced_foreground(), 8);
        plan.foreground_fraction = 0.0;
        assert_eq!(plan.forced_foreground(), 0);
    }

    #[test]
    fn batches_are_deterministic_and_foreground_biased() {
        let mut labels = Array3::<u8>::zeros((12, 12, 12));
        labels[[9, 9, 9]] = 1;
        let image = Array4::from_shape_fn((2, 12, 12, 12), |(c, z, y, x)| (c + z + y + x) as f32);
        let case = TrainCase::new("fdg_a", Tracer::Fdg, image, labels, None).unwrap();
        let plan = BatchPlan {
            patch_size: [4, 4, 4],
            batch_size: 2,
            foreground_fraction: 1.0 / 3.0,
            label_head: LESION_HEAD.into(),
            with_organs: false,
            augment: AugmentConfig::default(),
            seed: 9,
        };
        let cases = [case];
        for step in 0..20 {
            let a = make_batch(&cases, &plan, step).unwrap();
            let b = make_batch(&cases, &plan, step).unwrap();
            assert_eq!(a.image, b.image);
            let t = &a.targets[LESION_HEAD];
            assert_eq!(t.index_axis(Axis(0), 1).iter().filter(|&&v| v > 0).count(), 1);
        }
        let wrong = BatchPlan {
            with_organs: true,
            ..plan
        };
        assert!(make_batch(&cases, &wrong, 0).is_err());
    }

    #[test]
    fn sgd_skips_parameters_without_gradient() {
        let mut store = ParamStore::default();
        store.add("a", vec![2], vec![1.0, 1.0]);
        store.add("b", vec![1], vec![5.0]);
        let mut grads = Grads::new(2);
        grads.slot(0, 2).copy_from_slice(&[1.0, -1.0]);
        let cfg = SgdConfig {
            momentum: 0.9,
            nesterov: false,
            weight_decay: 0.0,
            grad_clip_norm: 0.0,
        };
        let mut opt = Sgd::new(cfg, 2);
        opt.step(&mut store, &grads, 0.1);
        opt.step(&mut store, &grads, 0.1);
        assert_eq!(store.get(1).data, vec![5.0]);
        // v1 = g, v2 = 0.9 g + g → total step 0.1·(1 + 1.9) = 0.29
        assert!((store.get(0).data[0] - 0.71).abs() < 1e-6);
        assert!((store.get(0).data[1] - 1.29).abs() < 1e-6);
    }
}
