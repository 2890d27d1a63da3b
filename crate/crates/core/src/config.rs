//! Experiment configuration: one nested JSON document with dotted-key
//! overrides (`augment.misalign.prob=0.25`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::types::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationMode {
    /// Percentile clipping followed by z-scoring with dataset fingerprints.
    Fingerprint,
    /// Per-volume z-scoring.
    Zscore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Ct,
    Pet,
}

impl Channel {
    /// Index in the `[CT, PET]` image stack.
    pub fn index(self) -> usize {
        match self {
            Channel::Ct => 0,
            Channel::Pet => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Training grid spacing in mm, `(z, y, x)`.
    pub target_spacing: Vec3,
    pub normalization: NormalizationMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing: [3.0, 2.04, 2.04],
            normalization: NormalizationMode::Fingerprint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_stages: usize,
    pub features_per_stage: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub deep_supervision: bool,
    /// Adds the 12-class organ head next to the lesion head.
    pub organ_supervision: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_stages: 5,
            features_per_stage: vec![32, 64, 128, 256, 320],
            blocks_per_stage: vec![1, 3, 4, 6, 6],
            deep_supervision: true,
            organ_supervision: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub initial_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub poly_exponent: f64,
    pub grad_clip_norm: f64,
    /// Fraction of each batch forced to contain lesion voxels.
    pub foreground_oversample: f64,
    pub folds: usize,
    /// Validate every this many epochs (0 disables validation).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: [64, 64, 64],
            batch_size: 2,
            epochs: 25,
            iterations_per_epoch: 250,
            initial_lr: 1e-3,
            momentum: 0.99,
            nesterov: true,
            weight_decay: 3e-5,
            poly_exponent: 0.9,
            grad_clip_norm: 12.0,
            foreground_oversample: 1.0 / 3.0,
            folds: 5,
            validate_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub target_spacing: Vec3,
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub initial_lr: f64,
    pub in_channels: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            target_spacing: [1.0, 1.0, 1.0],
            patch_size: [64, 64, 64],
            batch_size: 2,
            epochs: 25,
            iterations_per_epoch: 250,
            initial_lr: 1e-2,
            in_channels: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lesion_weight: f64,
    pub organ_weight: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lesion_weight: 1.0,
            organ_weight: 1.0,
            dice_smooth: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MisalignConfig {
    pub prob: f64,
    pub max_rotation_deg: f64,
    /// Per-axis translation maxima in voxels, `(z, y, x)`.
    pub max_shift_vox: Vec3,
    pub moving_channel: Channel,
}

impl Default for MisalignConfig {
    fn default() -> Self {
        MisalignConfig {
            prob: 0.5,
            max_rotation_deg: 5.0,
            max_shift_vox: [0.0, 2.0, 2.0],
            moving_channel: Channel::Pet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub mirror_prob: f64,
    pub noise_prob: f64,
    pub noise_sigma_max: f64,
    pub misalign: MisalignConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mirror_prob: 0.5,
            noise_prob: 0.15,
            noise_sigma_max: 0.1,
            misalign: MisalignConfig::default(),
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn disabled() -> Self {
        AugmentConfig {
            mirror_prob: 0.0,
            noise_prob: 0.0,
            noise_sigma_max: 0.0,
            misalign: MisalignConfig {
                prob: 0.0,
                ..MisalignConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub step_fraction: f64,
    pub sigma_scale: f64,
    pub tta_budget_s: f64,
    pub max_mirror_axes: usize,
    /// Use this first-fold time for TTA scheduling instead of the measured one.
    pub first_fold_s: Option<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            step_fraction: 0.6,
            sigma_scale: 0.125,
            tta_budget_s: 300.0,
            max_mirror_axes: 2,
            first_fold_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub inference: InferenceConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.n_stages == 0 {
            return Err(Error::Config("model.n_stages must be positive".into()));
        }
        if m.features_per_stage.len() != m.n_stages || m.blocks_per_stage.len() != m.n_stages {
            return Err(Error::Config(format!(
                "model.features_per_stage and model.blocks_per_stage need {} entries",
                m.n_stages
            )));
        }
        if m.features_per_stage.iter().chain(&m.blocks_per_stage).any(|&v| v == 0) {
            return Err(Error::Config(
                "model feature and block counts must be positive".into(),
            ));
        }
        let factor = 1usize << (m.n_stages - 1);
        for (name, patch) in [
            ("train.patch_size", self.train.patch_size),
            ("pretrain.patch_size", self.pretrain.patch_size),
        ] {
            if patch.iter().any(|&p| p == 0 || p % factor != 0) {
                return Err(Error::Config(format!(
                    "{name} {patch:?} must be positive and divisible by {factor}"
                )));
            }
        }
        for (name, s) in [
            ("preprocess.target_spacing", self.preprocess.target_spacing),
            ("pretrain.target_spacing", self.pretrain.target_spacing),
        ] {
            if s.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.train.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.train.folds < 2 {
            return Err(Error::Config("train.folds must be at least 2".into()));
        }
        if !(self.inference.step_fraction > 0.0 && self.inference.step_fraction <= 1.0) {
            return Err(Error::Config("inference.step_fraction must be in (0, 1]".into()));
        }
        if self.inference.max_mirror_axes > 3 {
            return Err(Error::Config("inference.max_mirror_axes must be ≤ 3".into()));
        }
        if self.inference.first_fold_s.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("inference.first_fold_s must be positive".into()));
        }
        let probs = [
            ("augment.mirror_prob", self.augment.mirror_prob),
            ("augment.noise_prob", self.augment.noise_prob),
            ("augment.misalign.prob", self.augment.misalign.prob),
            ("train.foreground_oversample", self.train.foreground_oversample),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.loss.lesion_weight < 0.0
            || self.loss.organ_weight < 0.0
            || self.loss.lesion_weight + self.loss.organ_weight <= 0.0
        {
            return Err(Error::Config("loss weights must be ≥ 0 with a positive sum".into()));
        }
        if self.augment.misalign.max_rotation_deg < 0.0
            || self.augment.misalign.max_shift_vox.iter().any(|&s| s < 0.0)
        {
            return Err(Error::Config("misalignment maxima must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Defaults, then the optional JSON file, then `key=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(ExperimentConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge_known(&mut value, patch, "")?;
        }
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let config: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn merge_known(base: &mut Value, patch: Value, prefix: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(base), Value::Object(patch)) => {
            for (key, v) in patch {
                let path = if prefix.is_empty() {
                    key.clone()
                } else {
                    format!("{prefix}.{key}")
                };
                match base.get_mut(&key) {
                    Some(slot) => merge_known(slot, v, &path)?,
                    None => return Err(Error::Config(format!("unknown key `{path}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Apply one `dotted.key=value` override; the value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(value: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let mut slot = &mut *value;
    for part in key.trim().split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|obj| obj.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
    }
    let parsed =
        serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    if slot.is_object() && !parsed.is_object() {
        return Err(Error::Config(format!("`{key}` is a section, not a value")));
    }
    *slot = parsed;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        assert_eq!(ExperimentConfig::default().preprocess.target_spacing, [3.0, 2.04, 2.04]);
    }

    #[test]
    fn dotted_override_applies() {
        let c = ExperimentConfig::resolve(None, &["augment.misalign.prob=0.25".into()]).unwrap();
        assert_eq!(c.augment.misalign.prob, 0.25);
        let c = ExperimentConfig::resolve(None, &["augment.misalign.moving_channel=ct".into()])
            .unwrap();
        assert_eq!(c.augment.misalign.moving_channel, Channel::Ct);
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        let err = ExperimentConfig::resolve(None, &["augment.misalign.probability=0.2".into()])
            .unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn indivisible_patch_is_rejected() {
        let err = ExperimentConfig::resolve(None, &["train.patch_size=[64,64,60]".into()])
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn file_with_unknown_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"batch_size": 3, "bogus": 1}}"#).unwrap();
        assert!(ExperimentConfig::resolve(Some(&path), &[]).is_err());
        std::fs::write(&path, r#"{"train": {"batch_size": 3, "epochs": 1500}}"#).unwrap();
        let c = ExperimentConfig::resolve(Some(&path), &[]).unwrap();
        assert_eq!((c.train.batch_size, c.train.epochs), (3, 1500));
    }
}
