//! Residual-encoder 3D U-Net with named segmentation heads.
//!
//! The encoder stacks residual blocks (strided first block per stage), the
//! decoder upsamples with 2× transposed convolutions and concatenated skips,
//! and every head owns one 1×1×1 projection per supervised decoder scale.
//! Heads share the whole backbone, so dual-head fine-tuning (lesion + organs)
//! and per-dataset pretraining heads use the same machinery.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{concatenate, s, Array5, Axis};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, leaky_relu_backward, softmax_channels, Conv3d, ConvTranspose3d, Grads, InstanceNorm, NormCache,
    Param, ParamStore,
};
use crate::preprocess::ChannelFingerprints;
use crate::rng::{derive_seed, rng_from};
use crate::types::Vec3;

pub const LESION_HEAD: &str = "lesion";
pub const ORGAN_HEAD: &str = "organs";
const HEAD_PREFIX: &str = "heads.";
const STEM_WEIGHT: &str = "encoder.0.stem.0.weight";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Instance,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub n_stages: usize,
    pub features_per_stage: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub deep_supervision: bool,
    #[serde(default)]
    pub norm: NormKind,
}

impl NetworkSpec {
    /// Five-stage CPU-sized preset.
    pub fn desk_default() -> Self {
        NetworkSpec {
            n_stages: 5,
            features_per_stage: vec![32, 64, 128, 256, 320],
            blocks_per_stage: vec![1, 3, 4, 6, 6],
            deep_supervision: true,
            norm: NormKind::Instance,
        }
    }

    /// Six-stage large residual-encoder preset.
    pub fn full_default() -> Self {
        NetworkSpec {
            n_stages: 6,
            features_per_stage: vec![32, 64, 128, 256, 320, 320],
            blocks_per_stage: vec![1, 3, 4, 6, 6, 6],
            deep_supervision: true,
            norm: NormKind::Instance,
        }
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        NetworkSpec {
            n_stages: cfg.n_stages,
            features_per_stage: cfg.features_per_stage.clone(),
            blocks_per_stage: cfg.blocks_per_stage.clone(),
            deep_supervision: cfg.deep_supervision,
            norm: NormKind::Instance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stages < 2 {
            return Err(Error::Network("at least 2 stages are required".into()));
        }
        if self.features_per_stage.len() != self.n_stages || self.blocks_per_stage.len() != self.n_stages {
            return Err(Error::Network(format!(
                "features ({}) and blocks ({}) must both have {} entries",
                self.features_per_stage.len(),
                self.blocks_per_stage.len(),
                self.n_stages
            )));
        }
        if self.features_per_stage.iter().chain(&self.blocks_per_stage).any(|&v| v == 0) {
            return Err(Error::Network("feature and block counts must be positive".into()));
        }
        Ok(())
    }

    /// Total downsampling factor `2^(n_stages - 1)`.
    pub fn downsampling_factor(&self) -> usize {
        1 << (self.n_stages - 1)
    }

    pub fn validate_patch(&self, patch: [usize; 3]) -> Result<()> {
        let f = self.downsampling_factor();
        if patch.iter().any(|&p| p == 0 || p % f != 0) {
            return Err(Error::Network(format!(
                "patch {patch:?} is not divisible by the downsampling factor {f}"
            )));
        }
        Ok(())
    }

    /// Number of supervised output scales.
    pub fn num_output_scales(&self) -> usize {
        if self.deep_supervision {
            self.n_stages - 1
        } else {
            1
        }
    }

    fn same_backbone(&self, other: &NetworkSpec) -> bool {
        self.n_stages == other.n_stages
            && self.features_per_stage == other.features_per_stage
            && self.blocks_per_stage == other.blocks_per_stage
            && self.norm == other.norm
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub num_classes: usize,
}

impl HeadSpec {
    pub fn new(name: impl Into<String>, num_classes: usize) -> Self {
        HeadSpec {
            name: name.into(),
            num_classes,
        }
    }

    /// `lesion:2` plus, optionally, `organs:12`.
    pub fn finetune_heads(organ_supervision: bool) -> Vec<HeadSpec> {
        let mut heads = vec![HeadSpec::new(LESION_HEAD, 2)];
        if organ_supervision {
            heads.push(HeadSpec::new(ORGAN_HEAD, crate::types::ORGAN_CLASSES as usize));
        }
        heads
    }
}

fn check_heads(heads: &[HeadSpec]) -> Result<()> {
    for (i, h) in heads.iter().enumerate() {
        if h.num_classes < 2 {
            return Err(Error::Network(format!("head `{}` needs at least 2 classes", h.name)));
        }
        if h.name.is_empty() || h.name.contains('.') {
            return Err(Error::Network(format!("invalid head name `{}`", h.name)));
        }
        if heads[..i].iter().any(|o| o.name == h.name) {
            return Err(Error::Network(format!("duplicate head name `{}`", h.name)));
        }
    }
    Ok(())
}

/// Per-head class probability maps, one per output scale (full resolution first).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadOutputs {
    pub heads: BTreeMap<String, Vec<Array5<f32>>>,
}

impl HeadOutputs {
    pub fn get(&self, head: &str) -> Option<&[Array5<f32>]> {
        self.heads.get(head).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv3d),
    Norm(InstanceNorm),
    Act,
}

enum LayerCache {
    Conv(Array5<f32>),
    Norm(NormCache),
    Act(Array5<f32>),
}

fn run_layers(layers: &[Layer], store: &ParamStore, mut x: Array5<f32>, mut tape: Option<&mut Vec<LayerCache>>) -> Array5<f32> {
    for layer in layers {
        x = match layer {
            Layer::Conv(c) => {
                let y = c.forward(store, &x);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerCache::Conv(x));
                }
                y
            }
            Layer::Norm(n) => {
                let (y, cache) = n.forward(store, &x);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerCache::Norm(cache));
                }
                y
            }
            Layer::Act => {
                let y = leaky_relu(&x);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerCache::Act(y.clone()));
                }
                y
            }
        };
    }
    x
}

fn back_layers(
    layers: &[Layer],
    store: &ParamStore,
    grads: &mut Grads,
    caches: Vec<LayerCache>,
    mut dy: Array5<f32>,
    need_dx: bool,
) -> Option<Array5<f32>> {
    let n = layers.len();
    for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        dy = match (layer, cache) {
            (Layer::Conv(c), LayerCache::Conv(input)) => {
                match c.backward(store, grads, &input, &dy, need_dx || i > 0) {
                    Some(dx) => dx,
                    None => return None,
                }
            }
            (Layer::Norm(nm), LayerCache::Norm(cache)) => nm.backward(store, grads, &cache, &dy),
            (Layer::Act, LayerCache::Act(out)) => leaky_relu_backward(&out, &dy),
            _ => unreachable!("layer/cache mismatch"),
        };
    }
    debug_assert!(n > 0);
    Some(dy)
}

#[derive(Debug, Clone)]
enum Block {
    Plain(Vec<Layer>),
    Residual { main: Vec<Layer>, skip: Vec<Layer> },
}

struct BlockCache {
    main: Vec<LayerCache>,
    skip: Vec<LayerCache>,
    output: Option<Array5<f32>>,
}

impl Block {
    fn forward(&self, store: &ParamStore, x: Array5<f32>, tape: Option<&mut Vec<BlockCache>>) -> Array5<f32> {
        let mut cache = BlockCache {
            main: Vec::new(),
            skip: Vec::new(),
            output: None,
        };
        let record = tape.is_some();
        let y = match self {
            Block::Plain(layers) => run_layers(layers, store, x, record.then_some(&mut cache.main)),
            Block::Residual { main, skip } => {
                let shortcut = if skip.is_empty() {
                    x.clone()
                } else {
                    run_layers(skip, store, x.clone(), record.then_some(&mut cache.skip))
                };
                let m = run_layers(main, store, x, record.then_some(&mut cache.main));
                let y = leaky_relu(&(m + shortcut));
                if record {
                    cache.output = Some(y.clone());
                }
                y
            }
        };
        if let Some(t) = tape {
            t.push(cache);
        }
        y
    }

    fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: BlockCache, dy: Array5<f32>, need_dx: bool) -> Option<Array5<f32>> {
        match self {
            Block::Plain(layers) => back_layers(layers, store, grads, cache.main, dy, need_dx),
            Block::Residual { main, skip } => {
                let d = leaky_relu_backward(cache.output.as_ref().expect("recorded"), &dy);
                let d_main = back_layers(main, store, grads, cache.main, d.clone(), need_dx);
                let d_skip = if skip.is_empty() {
                    Some(d)
                } else {
                    back_layers(skip, store, grads, cache.skip, d, need_dx)
                };
                match (d_main, d_skip) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: ConvTranspose3d,
    block: Vec<Layer>,
    channels: usize,
}

struct DecoderCache {
    up_input: Array5<f32>,
    block: Vec<LayerCache>,
}

/// Everything the backward pass needs from one training forward pass.
pub struct Tape {
    encoder: Vec<Vec<BlockCache>>,
    decoder: Vec<DecoderCache>,
    decoder_out: Vec<Array5<f32>>,
    heads: Vec<String>,
}

/// Residual-encoder U-Net with named heads.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    in_channels: usize,
    head_specs: Vec<HeadSpec>,
    store: ParamStore,
    encoder: Vec<Vec<Block>>,
    decoder: Vec<DecoderStage>,
    heads: BTreeMap<String, Vec<Conv3d>>,
}

fn conv_norm_act<R: rand::Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    norm: NormKind,
    cin: usize,
    cout: usize,
    stride: usize,
    act: bool,
) -> Vec<Layer> {
    let use_norm = norm == NormKind::Instance;
    let mut layers = vec![Layer::Conv(Conv3d::new(store, rng, &format!("{name}.0"), cin, cout, 3, stride, !use_norm))];
    if use_norm {
        layers.push(Layer::Norm(InstanceNorm::new(store, &format!("{name}.1"), cout)));
    }
    if act {
        layers.push(Layer::Act);
    }
    layers
}

impl Network {
    /// Build a freshly initialised network. `seed` drives all initialisation.
    pub fn build(spec: &NetworkSpec, heads: &[HeadSpec], in_channels: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        check_heads(heads)?;
        if in_channels == 0 {
            return Err(Error::Network("in_channels must be positive".into()));
        }
        let mut rng = rng_from(derive_seed(seed, &[0x6e6e]));
        let mut store = ParamStore::default();
        let f = &spec.features_per_stage;
        let norm = spec.norm;

        let mut encoder = Vec::with_capacity(spec.n_stages);
        for stage in 0..spec.n_stages {
            let mut blocks = Vec::new();
            let mut cin = if stage == 0 { in_channels } else { f[stage - 1] };
            if stage == 0 {
                blocks.push(Block::Plain(conv_norm_act(&mut store, &mut rng, "encoder.0.stem", norm, cin, f[0], 1, true)));
                cin = f[0];
            }
            for b in 0..spec.blocks_per_stage[stage] {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let name = format!("encoder.{stage}.{b}");
                let mut main = conv_norm_act(&mut store, &mut rng, &format!("{name}.main.a"), norm, cin, f[stage], stride, true);
                main.extend(conv_norm_act(&mut store, &mut rng, &format!("{name}.main.b"), norm, f[stage], f[stage], 1, false));
                let skip = if stride != 1 || cin != f[stage] {
                    let use_norm = norm == NormKind::Instance;
                    let mut skip = vec![Layer::Conv(Conv3d::new(
                        &mut store,
                        &mut rng,
                        &format!("{name}.skip.0"),
                        cin,
                        f[stage],
                        1,
                        stride,
                        !use_norm,
                    ))];
                    if use_norm {
                        skip.push(Layer::Norm(InstanceNorm::new(&mut store, &format!("{name}.skip.1"), f[stage])));
                    }
                    skip
                } else {
                    Vec::new()
                };
                blocks.push(Block::Residual { main, skip });
                cin = f[stage];
            }
            encoder.push(blocks);
        }

        let mut decoder = Vec::with_capacity(spec.n_stages - 1);
        for stage in 0..spec.n_stages - 1 {
            let name = format!("decoder.{stage}");
            let up = ConvTranspose3d::new(&mut store, &mut rng, &format!("{name}.up"), f[stage + 1], f[stage]);
            let block = conv_norm_act(&mut store, &mut rng, &format!("{name}.conv"), norm, 2 * f[stage], f[stage], 1, true);
            decoder.push(DecoderStage {
                up,
                block,
                channels: f[stage],
            });
        }

        let mut net = Network {
            spec: spec.clone(),
            in_channels,
            head_specs: Vec::new(),
            store,
            encoder,
            decoder,
            heads: BTreeMap::new(),
        };
        for h in heads {
            net.add_head(h, &mut rng);
        }
        Ok(net)
    }

    fn add_head<R: rand::Rng>(&mut self, head: &HeadSpec, rng: &mut R) {
        let convs = (0..self.spec.num_output_scales())
            .map(|scale| {
                Conv3d::new(
                    &mut self.store,
                    rng,
                    &format!("{HEAD_PREFIX}{}.{scale}", head.name),
                    self.spec.features_per_stage[scale],
                    head.num_classes,
                    1,
                    1,
                    true,
                )
            })
            .collect();
        self.heads.insert(head.name.clone(), convs);
        self.head_specs.push(head.clone());
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn head_specs(&self) -> &[HeadSpec] {
        &self.head_specs
    }

    pub fn head_classes(&self, name: &str) -> Option<usize> {
        self.head_specs.iter().find(|h| h.name == name).map(|h| h.num_classes)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn is_backbone_param(name: &str) -> bool {
        !name.starts_with(HEAD_PREFIX)
    }

    /// Whether `name` belongs to head `head`.
    pub fn is_head_param(name: &str, head: &str) -> bool {
        name.strip_prefix(HEAD_PREFIX)
            .and_then(|rest| rest.strip_prefix(head))
            .is_some_and(|rest| rest.starts_with('.'))
    }

    /// FNV-1a digest over all backbone parameter bits.
    pub fn backbone_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in self.store.iter().filter(|p| Self::is_backbone_param(&p.name)) {
            for b in p.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in &p.data {
                h = (h ^ v.to_bits() as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    fn check_input(&self, x: &Array5<f32>) -> Result<()> {
        let (_, c, d, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        self.spec.validate_patch([d, h, w])
    }

    fn encode(&self, x: Array5<f32>, mut tape: Option<&mut Vec<Vec<BlockCache>>>) -> Vec<Array5<f32>> {
        let mut outs = Vec::with_capacity(self.spec.n_stages);
        let mut cur = x;
        for blocks in &self.encoder {
            let mut caches = Vec::new();
            for block in blocks {
                cur = block.forward(&self.store, cur, tape.is_some().then_some(&mut caches));
            }
            if let Some(t) = tape.as_deref_mut() {
                t.push(caches);
            }
            outs.push(cur.clone());
        }
        outs
    }

    /// Decoder outputs from coarse to fine, stopping at decoder stage `lowest`.
    fn decode(&self, skips: &[Array5<f32>], lowest: usize, mut tape: Option<&mut Vec<DecoderCache>>) -> Vec<Option<Array5<f32>>> {
        let n = self.spec.n_stages;
        let mut outs: Vec<Option<Array5<f32>>> = vec![None; n - 1];
        let mut prev = skips[n - 1].clone();
        for stage in (lowest..n - 1).rev() {
            let dec = &self.decoder[stage];
            let up = dec.up.forward(&self.store, &prev);
            let cat = concatenate(Axis(1), &[up.view(), skips[stage].view()]).expect("matching spatial dims");
            let mut block_cache = Vec::new();
            let out = run_layers(&dec.block, &self.store, cat, tape.is_some().then_some(&mut block_cache));
            if let Some(t) = tape.as_deref_mut() {
                t.push(DecoderCache {
                    up_input: prev,
                    block: block_cache,
                });
            }
            outs[stage] = Some(out.clone());
            prev = out;
        }
        if let Some(t) = tape {
            // recorded coarse-to-fine; store fine-to-coarse so index == stage
            t.reverse();
        }
        outs
    }

    fn head_logits(&self, head: &str, features: &Array5<f32>, scale: usize) -> Array5<f32> {
        self.heads[head][scale].forward(&self.store, features)
    }

    /// Inference forward pass: softmax probabilities for every head at every
    /// supervised scale.
    pub fn forward(&self, x: &Array5<f32>) -> Result<HeadOutputs> {
        self.check_input(x)?;
        let skips = self.encode(x.clone(), None);
        let dec = self.decode(&skips, 0, None);
        let mut out = HeadOutputs::default();
        for (name, _) in &self.heads {
            let maps = (0..self.spec.num_output_scales())
                .map(|s| softmax_channels(&self.head_logits(name, dec[s].as_ref().expect("decoded"), s)))
                .collect();
            out.heads.insert(name.clone(), maps);
        }
        Ok(out)
    }

    /// Output of the first convolution (before normalisation and activation).
    pub fn first_layer_response(&self, x: &Array5<f32>) -> Result<Array5<f32>> {
        self.check_input(x)?;
        match self.encoder.first().and_then(|b| b.first()) {
            Some(Block::Plain(layers)) | Some(Block::Residual { main: layers, .. }) => match layers.first() {
                Some(Layer::Conv(c)) => Ok(c.forward(&self.store, x)),
                _ => Err(Error::Network("first layer is not a convolution".into())),
            },
            None => Err(Error::Network("network has no encoder".into())),
        }
    }

    /// Full-resolution probabilities of one head only.
    pub fn predict_head(&self, head: &str, x: &Array5<f32>) -> Result<Array5<f32>> {
        self.check_input(x)?;
        if !self.heads.contains_key(head) {
            return Err(Error::Network(format!("no head named `{head}`")));
        }
        let skips = self.encode(x.clone(), None);
        let dec = self.decode(&skips, 0, None);
        Ok(softmax_channels(&self.head_logits(head, dec[0].as_ref().expect("decoded"), 0)))
    }

    /// Training forward pass over the selected heads. Returns logits per head
    /// and scale plus the tape for [`Network::backward`].
    pub fn forward_train(&self, x: &Array5<f32>, heads: &[&str]) -> Result<(BTreeMap<String, Vec<Array5<f32>>>, Tape)> {
        self.check_input(x)?;
        for h in heads {
            if !self.heads.contains_key(*h) {
                return Err(Error::Network(format!("no head named `{h}`")));
            }
        }
        let mut enc_tape = Vec::new();
        let skips = self.encode(x.clone(), Some(&mut enc_tape));
        let mut dec_tape = Vec::new();
        let dec = self.decode(&skips, 0, Some(&mut dec_tape));
        let decoder_out: Vec<Array5<f32>> = dec.into_iter().map(|d| d.expect("decoded")).collect();
        let mut logits = BTreeMap::new();
        for &h in heads {
            let maps = (0..self.spec.num_output_scales())
                .map(|s| self.head_logits(h, &decoder_out[s], s))
                .collect();
            logits.insert(h.to_string(), maps);
        }
        let tape = Tape {
            encoder: enc_tape,
            decoder: dec_tape,
            decoder_out,
            heads: heads.iter().map(|h| h.to_string()).collect(),
        };
        Ok((logits, tape))
    }

    /// Backpropagate logit gradients (same layout as `forward_train` output).
    /// Only parameters on the path of the supplied heads receive gradients.
    pub fn backward(&self, tape: Tape, dlogits: &BTreeMap<String, Vec<Array5<f32>>>) -> Result<Grads> {
        let mut grads = Grads::new(self.store.len());
        let n = self.spec.n_stages;
        let mut d_dec: Vec<Option<Array5<f32>>> = vec![None; n - 1];
        for (head, per_scale) in dlogits {
            if !tape.heads.iter().any(|h| h == head) {
                return Err(Error::Network(format!("head `{head}` was not part of the forward pass")));
            }
            for (s, d) in per_scale.iter().enumerate() {
                let conv = &self.heads[head][s];
                let dx = conv
                    .backward(&self.store, &mut grads, &tape.decoder_out[s], d, true)
                    .expect("input gradient requested");
                d_dec[s] = Some(match d_dec[s].take() {
                    Some(acc) => acc + dx,
                    None => dx,
                });
            }
        }

        let mut d_skip: Vec<Option<Array5<f32>>> = vec![None; n];
        let mut carry: Option<Array5<f32>> = None;
        for (stage, cache) in tape.decoder.into_iter().enumerate() {
            let dec = &self.decoder[stage];
            let d_out = match (d_dec[stage].take(), carry.take()) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => Array5::zeros(tape.decoder_out[stage].raw_dim()),
            };
            let d_cat = back_layers(&dec.block, &self.store, &mut grads, cache.block, d_out, true).expect("dx");
            let d_up = d_cat.slice(s![.., ..dec.channels, .., .., ..]).to_owned();
            d_skip[stage] = Some(d_cat.slice(s![.., dec.channels.., .., .., ..]).to_owned());
            carry = Some(dec.up.backward(&self.store, &mut grads, &cache.up_input, &d_up));
        }

        let mut d = carry.expect("at least one decoder stage");
        let mut enc_caches = tape.encoder;
        for stage in (0..n).rev() {
            if let Some(extra) = d_skip[stage].take() {
                d = d + extra;
            }
            let caches = enc_caches.pop().expect("stage cache");
            let blocks = &self.encoder[stage];
            for (i, (block, cache)) in blocks.iter().zip(caches).enumerate().rev() {
                let first_of_net = stage == 0 && i == 0;
                match block.backward(&self.store, &mut grads, cache, d, !first_of_net) {
                    Some(dx) => d = dx,
                    None => return Ok(grads),
                }
            }
        }
        Ok(grads)
    }

    /// Replace or add heads. Backbone and untouched heads keep their parameters
    /// bit-exactly; listed heads get fresh initialisation.
    pub fn attach_heads(&self, new_heads: &[HeadSpec], seed: u64) -> Result<Network> {
        check_heads(new_heads)?;
        let mut all: Vec<HeadSpec> = self
            .head_specs
            .iter()
            .filter(|h| !new_heads.iter().any(|n| n.name == h.name))
            .cloned()
            .collect();
        all.extend(new_heads.iter().cloned());
        let fresh = Network::build(&self.spec, &all, self.in_channels, seed)?;
        let mut out = fresh;
        let replaced = |name: &str| new_heads.iter().any(|h| Network::is_head_param(name, &h.name));
        for p in self.store.iter() {
            if replaced(&p.name) {
                continue;
            }
            let id = out.store.id_of(&p.name).expect("same architecture");
            out.store.get_mut(id).data.copy_from_slice(&p.data);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, step: u64, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            in_channels: self.in_channels,
            heads: self.head_specs.clone(),
            step,
            params: self.store.iter().cloned().collect(),
            meta,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Network> {
        let mut net = Network::build(&ckpt.spec, &ckpt.heads, ckpt.in_channels, 0)?;
        if ckpt.params.len() != net.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, architecture needs {}",
                ckpt.params.len(),
                net.store.len()
            )));
        }
        for p in &ckpt.params {
            let id = net
                .store
                .id_of(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", p.name)))?;
            let slot = net.store.get_mut(id);
            if slot.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    p.name, p.shape, slot.shape
                )));
            }
            slot.data.copy_from_slice(&p.data);
        }
        Ok(net)
    }
}

/// Build `target_spec` with `target_heads`, copying every backbone tensor of
/// `pretrained`. A first-layer input-channel mismatch is resolved by
/// replicating a single pretrained channel (scaled by `1/in_channels`) or by
/// summing pretrained channels into a single target channel.
pub fn transfer_weights(
    pretrained: &Checkpoint,
    target_spec: &NetworkSpec,
    target_heads: &[HeadSpec],
    in_channels: usize,
    seed: u64,
) -> Result<Network> {
    if !pretrained.spec.same_backbone(target_spec) {
        return Err(Error::Network(format!(
            "incompatible stage configuration: pretrained {:?} vs target {:?}",
            pretrained.spec, target_spec
        )));
    }
    let mut net = Network::build(target_spec, target_heads, in_channels, seed)?;
    let source: BTreeMap<&str, &Param> = pretrained.params.iter().map(|p| (p.name.as_str(), p)).collect();
    let ids: Vec<(usize, String)> = net
        .store
        .iter()
        .enumerate()
        .filter(|(_, p)| Network::is_backbone_param(&p.name))
        .map(|(i, p)| (i, p.name.clone()))
        .collect();
    for (id, name) in ids {
        let src = source
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("pretrained checkpoint lacks `{name}`")))?;
        let dst = net.store.get_mut(id);
        if name == STEM_WEIGHT && src.shape != dst.shape {
            adapt_stem(src, dst)?;
        } else if src.shape != dst.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` shape {:?} vs {:?}",
                src.shape, dst.shape
            )));
        } else {
            dst.data.copy_from_slice(&src.data);
        }
    }
    Ok(net)
}

fn adapt_stem(src: &Param, dst: &mut Param) -> Result<()> {
    let (out_c, src_c, dst_c) = (src.shape[0], src.shape[1], dst.shape[1]);
    if out_c != dst.shape[0] || src.shape[2..] != dst.shape[2..] {
        return Err(Error::Checkpoint("stem kernels differ beyond input channels".into()));
    }
    let k3: usize = src.shape[2..].iter().product();
    for o in 0..out_c {
        for c in 0..dst_c {
            for t in 0..k3 {
                let v = if src_c == 1 {
                    src.data[o * k3 + t] / dst_c as f32
                } else if dst_c == 1 {
                    (0..src_c).map(|sc| src.data[(o * src_c + sc) * k3 + t]).sum()
                } else {
                    return Err(Error::Checkpoint(format!(
                        "cannot map {src_c} pretrained input channels onto {dst_c}"
                    )));
                };
                dst.data[(o * dst_c + c) * k3 + t] = v;
            }
        }
    }
    Ok(())
}

/// Extra information stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub fingerprints: Option<ChannelFingerprints>,
    #[serde(default)]
    pub target_spacing: Option<Vec3>,
    #[serde(default)]
    pub patch_size: Option<[usize; 3]>,
    #[serde(default)]
    pub fold: Option<usize>,
    /// Optimiser steps taken per head (pretraining bookkeeping).
    #[serde(default)]
    pub head_steps: BTreeMap<String, u64>,
    #[serde(default)]
    pub best_val_dice: Option<f64>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PETSEGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    spec: NetworkSpec,
    in_channels: usize,
    heads: Vec<HeadSpec>,
    step: u64,
    tensors: Vec<(String, Vec<usize>)>,
    meta: CheckpointMeta,
}

/// Serialised network: spec, heads, step counter and all parameters.
///
/// On disk: 8-byte magic, u32 version, u64 header length, JSON header, then
/// the tensors as little-endian f32 in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub in_channels: usize,
    pub heads: Vec<HeadSpec>,
    pub step: u64,
    pub params: Vec<Param>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            in_channels: self.in_channels,
            heads: self.heads.clone(),
            step: self.step,
            tensors: self.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(20 + json.len() + 4 * self.params.iter().map(|p| p.data.len()).sum::<usize>());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in &self.params {
            for v in &p.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut offset = 20 + len;
        let mut params = Vec::with_capacity(header.tensors.len());
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += 4 * n;
            params.push(Param { name, shape, data });
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            spec: header.spec,
            in_channels: header.in_channels,
            heads: header.heads,
            step: header.step,
            params,
            meta: header.meta,
        })
    }

    pub fn backbone_params(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| Network::is_backbone_param(&p.name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(n_stages: usize, deep: bool) -> NetworkSpec {
        NetworkSpec {
            n_stages,
            features_per_stage: (0..n_stages).map(|i| 4 << i.min(2)).collect(),
            blocks_per_stage: vec![1; n_stages],
            deep_supervision: deep,
            norm: NormKind::Instance,
        }
    }

    fn input(c: usize, n: usize, seed: u64) -> Array5<f32> {
        let mut rng = rng_from(seed);
        Array5::from_shape_simple_fn((1, c, n, n, n), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn two_stage_single_head_shape() {
        let net = Network::build(&tiny(2, true), &[HeadSpec::new("lesion", 2)], 2, 0).unwrap();
        let out = net.forward(&input(2, 8, 1)).unwrap();
        assert_eq!(out.heads.len(), 1);
        assert_eq!(out.get("lesion").unwrap()[0].dim(), (1, 2, 8, 8, 8));
    }

    #[test]
    fn output_scales_halve() {
        let net = Network::build(&tiny(4, true), &HeadSpec::finetune_heads(true), 2, 0).unwrap();
        let out = net.forward(&input(2, 8, 2)).unwrap();
        let lesion = out.get("lesion").unwrap();
        let dims: Vec<usize> = lesion.iter().map(|a| a.dim().2).collect();
        assert_eq!(dims, vec![8, 4, 2]);
        assert_eq!(out.get("organs").unwrap()[0].dim().1, 12);
        let three = Network::build(&tiny(3, true), &HeadSpec::finetune_heads(false), 2, 0).unwrap();
        assert_eq!(three.forward(&input(2, 8, 2)).unwrap().get("lesion").unwrap().len(), 2);
        let flat = Network::build(&tiny(3, false), &HeadSpec::finetune_heads(false), 2, 0).unwrap();
        assert_eq!(flat.forward(&input(2, 8, 2)).unwrap().get("lesion").unwrap().len(), 1);
    }

    #[test]
    fn indivisible_patch_is_rejected() {
        let net = Network::build(&tiny(3, true), &HeadSpec::finetune_heads(false), 2, 0).unwrap();
        assert!(net.forward(&input(2, 6, 0)).is_err());
        assert!(net.forward(&input(1, 8, 0)).is_err());
    }

    #[test]
    fn duplicate_heads_are_rejected() {
        let heads = [HeadSpec::new("a", 2), HeadSpec::new("a", 3)];
        assert!(Network::build(&tiny(2, true), &heads, 1, 0).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_batch_independent() {
        let net = Network::build(&tiny(3, true), &HeadSpec::finetune_heads(true), 2, 3).unwrap();
        let one = input(2, 8, 4);
        let batch = concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
        let a = net.forward(&batch).unwrap();
        let b = net.forward(&batch).unwrap();
        assert_eq!(a, b);
        let l = &a.get("lesion").unwrap()[0];
        assert_eq!(l.index_axis(Axis(0), 0), l.index_axis(Axis(0), 1));
    }

    #[test]
    fn attach_heads_preserves_backbone() {
        let net = Network::build(&tiny(3, true), &[HeadSpec::new("lesion", 2)], 2, 3).unwrap();
        let before = net.backbone_checksum();
        let more = net.attach_heads(&[HeadSpec::new("organs", 12)], 9).unwrap();
        assert_eq!(more.backbone_checksum(), before);
        let out = more.forward(&input(2, 8, 1)).unwrap();
        assert!(out.get("organs").is_some() && out.get("lesion").is_some());
        // untouched head is carried over bit-exactly
        let id_old = net.params().id_of("heads.lesion.0.weight").unwrap();
        let id_new = more.params().id_of("heads.lesion.0.weight").unwrap();
        assert_eq!(net.params().get(id_old).data, more.params().get(id_new).data);
        assert!(more.attach_heads(&[HeadSpec::new("x", 2), HeadSpec::new("x", 2)], 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::build(&tiny(3, true), &HeadSpec::finetune_heads(true), 2, 5).unwrap();
        let meta = CheckpointMeta {
            target_spacing: Some([3.0, 2.04, 2.04]),
            ..CheckpointMeta::default()
        };
        let ckpt = net.to_checkpoint(42, meta);
        let path = dir.path().join("a.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let restored = Network::from_checkpoint(&back).unwrap();
        let x = input(2, 8, 6);
        assert_eq!(restored.forward(&x).unwrap(), net.forward(&x).unwrap());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn transfer_rejects_mismatched_stages() {
        let pre = Network::build(&tiny(3, true), &[HeadSpec::new("ds", 3)], 1, 0).unwrap();
        let ckpt = pre.to_checkpoint(0, CheckpointMeta::default());
        assert!(transfer_weights(&ckpt, &tiny(2, true), &HeadSpec::finetune_heads(true), 2, 0).is_err());
        let same = transfer_weights(&ckpt, &tiny(3, true), &HeadSpec::finetune_heads(true), 1, 0).unwrap();
        assert_eq!(same.backbone_checksum(), pre.backbone_checksum());
    }

    #[test]
    fn every_backbone_parameter_receives_gradient() {
        let net = Network::build(&tiny(3, true), &HeadSpec::finetune_heads(true), 2, 11).unwrap();
        let x = input(2, 16, 12);
        let (logits, tape) = net.forward_train(&x, &["lesion", "organs"]).unwrap();
        let mut rng = rng_from(13);
        let dl: BTreeMap<String, Vec<Array5<f32>>> = logits
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|a| a.mapv(|_| rng.random_range(-1.0..1.0))).collect()))
            .collect();
        let grads = net.backward(tape, &dl).unwrap();
        for (id, p) in net.params().iter().enumerate() {
            let g = grads.get(id).unwrap_or_else(|| panic!("no gradient for {}", p.name));
            let norm: f32 = g.iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "zero gradient for {}", p.name);
        }
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        for norm in [NormKind::None, NormKind::Instance] {
            let mut spec = tiny(2, true);
            spec.norm = norm;
            let mut net = Network::build(&spec, &HeadSpec::finetune_heads(true), 2, 21).unwrap();
            let x = input(2, 4, 22);
            let (logits, tape) = net.forward_train(&x, &["lesion", "organs"]).unwrap();
            let mut rng = rng_from(23);
            let dl: BTreeMap<String, Vec<Array5<f32>>> = logits
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|a| a.mapv(|_| rng.random_range(-1.0..1.0))).collect()))
                .collect();
            let grads = net.backward(tape, &dl).unwrap();
            let objective = |net: &Network| -> f64 {
                let (z, _) = net.forward_train(&x, &["lesion", "organs"]).unwrap();
                z.iter()
                    .flat_map(|(k, maps)| maps.iter().zip(&dl[k]))
                    .map(|(a, w)| a.iter().zip(w).map(|(&a, &w)| a as f64 * w as f64).sum::<f64>())
                    .sum()
            };
            let mut best = Vec::new();
            for id in 0..net.params().len() {
                let n = net.params().get(id).data.len();
                for _ in 0..2 {
                    let i = rng.random_range(0..n);
                    let an = grads.get(id).map_or(0.0, |g| g[i] as f64);
                    let orig = net.params().get(id).data[i];
                    // leaky-ReLU kinks can spoil isolated entries
                    let errs: Vec<f64> = [1e-3f32, 3e-4]
                        .iter()
                        .map(|&h| {
                            net.params_mut().get_mut(id).data[i] = orig + h;
                            let up = objective(&net);
                            net.params_mut().get_mut(id).data[i] = orig - h;
                            let down = objective(&net);
                            net.params_mut().get_mut(id).data[i] = orig;
                            let fd = (up - down) / (2.0 * h as f64);
                            (fd - an).abs() / (fd.abs().max(an.abs()) + 0.1)
                        })
                        .collect();
                    best.push(errs.iter().cloned().fold(f64::INFINITY, f64::min));
                }
            }
            let ok = best.iter().filter(|&&e| e < 2e-2).count();
            assert!(ok * 10 >= best.len() * 9, "{norm:?}: {ok}/{} entries agree: {best:?}", best.len());
        }
    }
}
