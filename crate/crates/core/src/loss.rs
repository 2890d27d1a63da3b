//! Dice + cross-entropy compound loss, deep-supervision and multitask weighting.
//!
//! Probability maps are `(batch, class, z, y, x)`, targets `(batch, z, y, x)`.
//! Sums accumulate in `f64` regardless of the element type.

use std::collections::BTreeMap;

use ndarray::{s, Array4, Array5, ArrayView4, ArrayView5, Axis, Zip};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to this before taking logs.
pub const CE_CLAMP: f64 = 1e-8;

fn check_shapes<T>(probs: &ArrayView5<T>, target: &ArrayView4<u8>) -> Result<usize> {
    let (b, c, z, y, x) = probs.dim();
    if target.dim() != (b, z, y, x) {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs target {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= c) {
        return Err(Error::InvalidLabels(format!("target value {bad} with {c} classes")));
    }
    Ok(c)
}

fn to_t<T: Float>(v: f64) -> T {
    T::from(v).expect("representable")
}

/// Per-class `(Σ p·g, Σ p, Σ g)` over batch and space.
fn dice_sums<T: Float>(probs: &ArrayView5<T>, target: &ArrayView4<u8>, classes: usize) -> Vec<[f64; 3]> {
    let mut sums = vec![[0.0f64; 3]; classes];
    for (b, sample) in probs.outer_iter().enumerate() {
        let t = target.index_axis(Axis(0), b);
        for (c, pc) in sample.outer_iter().enumerate() {
            let acc = &mut sums[c];
            Zip::from(&pc).and(&t).for_each(|&p, &g| {
                let p = p.to_f64().expect("finite");
                acc[1] += p;
                if g as usize == c {
                    acc[0] += p;
                    acc[2] += 1.0;
                }
            });
        }
    }
    sums
}

/// `1 − mean_c dice_c` over foreground classes with a non-zero denominator.
pub fn soft_dice_loss<T: Float>(probs: &ArrayView5<T>, target: &ArrayView4<u8>, smooth: f64) -> Result<f64> {
    let classes = check_shapes(probs, target)?;
    let sums = dice_sums(probs, target, classes);
    let dices: Vec<f64> = sums[1..]
        .iter()
        .filter(|[_, p, g]| p + g + smooth != 0.0)
        .map(|[i, p, g]| (2.0 * i + smooth) / (p + g + smooth))
        .collect();
    if dices.is_empty() {
        return Ok(0.0);
    }
    Ok(1.0 - dices.iter().sum::<f64>() / dices.len() as f64)
}

/// Soft Dice loss and its gradient with respect to the probabilities.
pub fn soft_dice_grad<T: Float>(probs: &ArrayView5<T>, target: &ArrayView4<u8>, smooth: f64) -> Result<(f64, Array5<T>)> {
    let classes = check_shapes(probs, target)?;
    let sums = dice_sums(probs, target, classes);
    let included: Vec<usize> = (1..classes)
        .filter(|&c| sums[c][1] + sums[c][2] + smooth != 0.0)
        .collect();
    let mut grad = Array5::<T>::zeros(probs.raw_dim());
    if included.is_empty() {
        return Ok((0.0, grad));
    }
    let k = included.len() as f64;
    let mut mean_dice = 0.0;
    for &c in &included {
        let [i, p, g] = sums[c];
        let den = p + g + smooth;
        let num = 2.0 * i + smooth;
        mean_dice += num / den / k;
        // d dice / d p(v) = (2 g(v) den − num) / den²
        let on = to_t::<T>(-(2.0 * den - num) / (den * den) / k);
        let off = to_t::<T>(num / (den * den) / k);
        for b in 0..probs.dim().0 {
            let t = target.index_axis(Axis(0), b);
            let mut gc = grad.slice_mut(s![b, c, .., .., ..]);
            Zip::from(&mut gc).and(&t).for_each(|d, &lab| {
                *d = if lab as usize == c { on } else { off };
            });
        }
    }
    Ok((1.0 - mean_dice, grad))
}

/// Mean over voxels of `−ln max(p_target, 1e-8)`.
pub fn cross_entropy_loss<T: Float>(probs: &ArrayView5<T>, target: &ArrayView4<u8>) -> Result<f64> {
    check_shapes(probs, target)?;
    let mut total = 0.0;
    for (b, sample) in probs.outer_iter().enumerate() {
        let t = target.index_axis(Axis(0), b);
        for ((z, y, x), &lab) in t.indexed_iter() {
            let p = sample[[lab as usize, z, y, x]].to_f64().expect("finite");
            total -= p.max(CE_CLAMP).ln();
        }
    }
    Ok(total / target.len().max(1) as f64)
}

/// Cross-entropy and its gradient with respect to the probabilities.
pub fn cross_entropy_grad<T: Float>(probs: &ArrayView5<T>, target: &ArrayView4<u8>) -> Result<(f64, Array5<T>)> {
    check_shapes(probs, target)?;
    let n = target.len().max(1) as f64;
    let mut grad = Array5::<T>::zeros(probs.raw_dim());
    let mut total = 0.0;
    for (b, sample) in probs.outer_iter().enumerate() {
        let t = target.index_axis(Axis(0), b);
        for ((z, y, x), &lab) in t.indexed_iter() {
            let c = lab as usize;
            let p = sample[[c, z, y, x]].to_f64().expect("finite");
            total -= p.max(CE_CLAMP).ln();
            if p > CE_CLAMP {
                grad[[b, c, z, y, x]] = to_t(-1.0 / (n * p));
            }
        }
    }
    Ok((total / n, grad))
}

/// Channel softmax of `(batch, class, z, y, x)` logits.
pub fn softmax<T: Float>(logits: &ArrayView5<T>) -> Array5<T> {
    let mut out = logits.to_owned();
    for mut sample in out.outer_iter_mut() {
        let max = sample.fold_axis(Axis(0), T::neg_infinity(), |&a, &b| a.max(b));
        for mut c in sample.outer_iter_mut() {
            Zip::from(&mut c).and(&max).for_each(|v, &m| *v = (*v - m).exp());
        }
        let sum = sample.sum_axis(Axis(0));
        for mut c in sample.outer_iter_mut() {
            Zip::from(&mut c).and(&sum).for_each(|v, &s| *v = *v / s);
        }
    }
    out
}

/// Pull a gradient w.r.t. softmax outputs back to the logits:
/// `dz_c = p_c (dp_c − Σ_k p_k dp_k)`.
pub fn softmax_backward<T: Float>(probs: &ArrayView5<T>, dprobs: &ArrayView5<T>) -> Array5<T> {
    assert_eq!(probs.shape(), dprobs.shape(), "softmax_backward shapes");
    let mut out = Array5::<T>::zeros(probs.raw_dim());
    for ((p, dp), mut o) in probs.outer_iter().zip(dprobs.outer_iter()).zip(out.outer_iter_mut()) {
        let mut dot = ndarray::Array3::<T>::zeros(p.index_axis(Axis(0), 0).raw_dim());
        for (pc, dc) in p.outer_iter().zip(dp.outer_iter()) {
            Zip::from(&mut dot).and(&pc).and(&dc).for_each(|s, &a, &b| *s = *s + a * b);
        }
        for ((pc, dc), mut oc) in p.outer_iter().zip(dp.outer_iter()).zip(o.outer_iter_mut()) {
            Zip::from(&mut oc)
                .and(&pc)
                .and(&dc)
                .and(&dot)
                .for_each(|g, &a, &b, &s| *g = a * (b - s));
        }
    }
    out
}

/// Dice and CE values of one head at one scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub dice: f64,
    pub ce: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.dice + self.ce
    }
}

/// Dice + CE on one probability map, with the gradient w.r.t. the logits.
pub fn dice_ce_with_grad<T: Float>(probs: &ArrayView5<T>, target: &ArrayView4<u8>, smooth: f64) -> Result<(LossTerms, Array5<T>)> {
    let (dice, mut dp) = soft_dice_grad(probs, target, smooth)?;
    let (ce, dce) = cross_entropy_grad(probs, target)?;
    dp.zip_mut_with(&dce, |a, &b| *a = *a + b);
    Ok((LossTerms { dice, ce }, softmax_backward(probs, &dp.view())))
}

/// Normalised head and deep-supervision scale weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub heads: BTreeMap<String, f64>,
    pub scales: Vec<f64>,
}

impl LossWeights {
    /// Normalises head weights to sum to one; scale weights are `∝ 2^-s`.
    pub fn new<S: Into<String>>(heads: impl IntoIterator<Item = (S, f64)>, num_scales: usize) -> Result<Self> {
        let heads: BTreeMap<String, f64> = heads.into_iter().map(|(k, v)| (k.into(), v)).collect();
        if heads.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("head loss weights must be finite and non-negative".into()));
        }
        let sum: f64 = heads.values().sum();
        if sum <= 0.0 {
            return Err(Error::Config("head loss weights must not all be zero".into()));
        }
        if num_scales == 0 {
            return Err(Error::Config("at least one loss scale is required".into()));
        }
        Ok(LossWeights {
            heads: heads.into_iter().map(|(k, v)| (k, v / sum)).collect(),
            scales: deep_supervision_weights(num_scales),
        })
    }

    pub fn head(&self, name: &str) -> Option<f64> {
        self.heads.get(name).copied()
    }
}

/// `w_s = 2^-s / Σ_k 2^-k` for `s` in `0..n`.
pub fn deep_supervision_weights(n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|s| 0.5f64.powi(s as i32)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Nearest-neighbour label downsampling by an integer factor (index `j·f`).
pub fn downsample_target(target: &ArrayView4<u8>, factor: usize) -> Array4<u8> {
    if factor == 1 {
        return target.to_owned();
    }
    let f = factor as isize;
    target.slice(s![.., ..;f, ..;f, ..;f]).to_owned()
}

/// Loss of one head: scale-weighted dice and CE.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadLoss {
    pub weight: f64,
    pub dice: f64,
    pub ce: f64,
}

impl HeadLoss {
    pub fn total(&self) -> f64 {
        self.dice + self.ce
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub heads: BTreeMap<String, HeadLoss>,
}

fn weighted_heads<'a, V>(maps: &'a BTreeMap<String, V>, weights: &LossWeights) -> Result<Vec<(&'a String, &'a V, f64)>> {
    maps.iter()
        .map(|(name, v)| {
            let w = weights
                .head(name)
                .ok_or_else(|| Error::Config(format!("no loss weight for head `{name}`")))?;
            Ok((name, v, w))
        })
        .collect()
}

/// Multitask deep-supervised loss over probability maps (full resolution first).
pub fn multitask_loss<T: Float>(
    outputs: &BTreeMap<String, Vec<Array5<T>>>,
    targets: &BTreeMap<String, Array4<u8>>,
    weights: &LossWeights,
    smooth: f64,
) -> Result<LossBreakdown> {
    let mut out = LossBreakdown::default();
    for (name, scales, w) in weighted_heads(outputs, weights)? {
        let target = targets.get(name).ok_or_else(|| Error::MissingTarget(name.clone()))?;
        let mut head = HeadLoss {
            weight: w,
            ..HeadLoss::default()
        };
        let sw = scale_weights(weights, scales.len())?;
        for (s, probs) in scales.iter().enumerate() {
            let t = downsample_target(&target.view(), 1 << s);
            head.dice += sw[s] * soft_dice_loss(&probs.view(), &t.view(), smooth)?;
            head.ce += sw[s] * cross_entropy_loss(&probs.view(), &t.view())?;
        }
        out.total += w * head.total();
        out.heads.insert(name.clone(), head);
    }
    Ok(out)
}

fn scale_weights(weights: &LossWeights, n: usize) -> Result<Vec<f64>> {
    if n == weights.scales.len() {
        Ok(weights.scales.clone())
    } else if n == 1 {
        Ok(vec![1.0])
    } else {
        Err(Error::ShapeMismatch(format!(
            "{n} output scales but {} scale weights",
            weights.scales.len()
        )))
    }
}

/// As [`multitask_loss`], taking logits and returning the gradient of the total
/// with respect to every logit map.
pub fn multitask_loss_with_grad(
    logits: &BTreeMap<String, Vec<Array5<f32>>>,
    targets: &BTreeMap<String, Array4<u8>>,
    weights: &LossWeights,
    smooth: f64,
) -> Result<(LossBreakdown, BTreeMap<String, Vec<Array5<f32>>>)> {
    let mut out = LossBreakdown::default();
    let mut grads = BTreeMap::new();
    for (name, scales, w) in weighted_heads(logits, weights)? {
        let target = targets.get(name).ok_or_else(|| Error::MissingTarget(name.clone()))?;
        let sw = scale_weights(weights, scales.len())?;
        let mut head = HeadLoss {
            weight: w,
            ..HeadLoss::default()
        };
        let mut head_grads = Vec::with_capacity(scales.len());
        for (s, z) in scales.iter().enumerate() {
            let t = downsample_target(&target.view(), 1 << s);
            let probs = softmax(&z.view());
            let (terms, mut dz) = dice_ce_with_grad(&probs.view(), &t.view(), smooth)?;
            head.dice += sw[s] * terms.dice;
            head.ce += sw[s] * terms.ce;
            let scale = (w * sw[s]) as f32;
            dz.mapv_inplace(|v| v * scale);
            head_grads.push(dz);
        }
        out.total += w * head.total();
        out.heads.insert(name.clone(), head);
        grads.insert(name.clone(), head_grads);
    }
    Ok((out, grads))
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLogRecord {
    pub step: u64,
    pub total: f64,
    pub lesion_dice: Option<f64>,
    pub lesion_ce: Option<f64>,
    pub organ_dice: Option<f64>,
    pub organ_ce: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Global gradient norm before clipping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
}

impl LossLogRecord {
    pub fn new(step: u64, b: &LossBreakdown) -> Self {
        let lesion = b.heads.get(crate::model::LESION_HEAD);
        let organ = b.heads.get(crate::model::ORGAN_HEAD);
        LossLogRecord {
            step,
            total: b.total,
            lesion_dice: lesion.map(|h| h.dice),
            lesion_ce: lesion.map(|h| h.ce),
            organ_dice: organ.map(|h| h.dice),
            organ_ce: organ.map(|h| h.ce),
            lr: None,
            grad_norm: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn one_hot(target: &Array4<u8>, classes: usize) -> Array5<f64> {
        let (b, z, y, x) = target.dim();
        Array5::from_shape_fn((b, classes, z, y, x), |(bb, c, k, j, i)| {
            (target[[bb, k, j, i]] as usize == c) as u8 as f64
        })
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let t = Array::from_shape_fn((1, 4, 4, 4), |(_, z, y, _)| ((z + y) % 3) as u8);
        let p = one_hot(&t, 3);
        assert_eq!(soft_dice_loss(&p.view(), &t.view(), 0.0).unwrap(), 0.0);
        assert!(cross_entropy_loss(&p.view(), &t.view()).unwrap() < 1e-7);
    }

    #[test]
    fn hand_computed_dice() {
        let mut t = Array4::<u8>::zeros((1, 1, 1, 8));
        t.slice_mut(s![.., .., .., 0..4]).fill(1);
        let mut pred = Array4::<u8>::zeros((1, 1, 1, 8));
        pred[[0, 0, 0, 0]] = 1;
        pred[[0, 0, 0, 1]] = 1;
        pred[[0, 0, 0, 6]] = 1;
        let p = one_hot(&pred, 2);
        let loss = soft_dice_loss(&p.view(), &t.view(), 0.0).unwrap();
        assert!((loss - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn empty_target_and_prediction_gives_zero() {
        let t = Array4::<u8>::zeros((2, 2, 2, 2));
        let p = one_hot(&t, 2);
        assert_eq!(soft_dice_loss(&p.view(), &t.view(), 0.0).unwrap(), 0.0);
        let (l, g) = soft_dice_grad(&p.view(), &t.view(), 0.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_cross_entropy() {
        for classes in [2usize, 12] {
            let t = Array::from_shape_fn((1, 2, 3, 4), |(_, z, y, x)| ((z + y + x) % classes) as u8);
            let p = Array5::from_elem((1, classes, 2, 3, 4), 1.0 / classes as f64);
            let ce = cross_entropy_loss(&p.view(), &t.view()).unwrap();
            assert!((ce - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let t = Array4::<u8>::zeros((1, 2, 2, 2));
        let p = Array5::<f64>::zeros((1, 2, 2, 2, 3));
        assert!(soft_dice_loss(&p.view(), &t.view(), 0.0).is_err());
        assert!(cross_entropy_loss(&p.view(), &t.view()).is_err());
    }

    #[test]
    fn scale_weights_halve_and_normalise() {
        let w = deep_supervision_weights(3);
        assert!((w[0] - 4.0 / 7.0).abs() < 1e-12 && (w[2] - 1.0 / 7.0).abs() < 1e-12);
        let lw = LossWeights::new([("lesion", 1.0), ("organs", 1.0)], 3).unwrap();
        assert!((lw.heads.values().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(LossWeights::new([("lesion", 0.0)], 1).is_err());
    }

    #[test]
    fn missing_target_is_reported() {
        let mut outputs = BTreeMap::new();
        outputs.insert("lesion".to_string(), vec![Array5::from_elem((1, 2, 2, 2, 2), 0.5f32)]);
        let w = LossWeights::new([("lesion", 1.0)], 1).unwrap();
        let err = multitask_loss(&outputs, &BTreeMap::new(), &w, 0.0).unwrap_err();
        assert!(matches!(err, Error::MissingTarget(h) if h == "lesion"));
    }

    #[test]
    fn log_record_is_one_json_line() {
        let mut b = LossBreakdown {
            total: 1.5,
            ..Default::default()
        };
        b.heads.insert("lesion".into(), HeadLoss { weight: 1.0, dice: 0.5, ce: 1.0 });
        let line = LossLogRecord::new(7, &b).to_json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["step"], 7);
        assert_eq!(v["lesion_dice"], 0.5);
        assert!(v["organ_dice"].is_null());
    }
}
