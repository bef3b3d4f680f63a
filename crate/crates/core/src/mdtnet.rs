//! The fusion ensemble: independently trained sub-models (cross-entropy
//! and focal), frozen, whose penultimate features are concatenated and
//! classified by a two-layer head.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment, sample_stream, AugmentConfig};
use crate::error::{Error, Result};
use crate::metrics::{cohens_kappa, Classifier, ConfusionMatrix};
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint};
use crate::nn::{
    argmax, class_weights, softmax, Adam, AdamConfig, Architecture, FusionHead, HasParams, LossSpec, SubModel,
    SubModelSpec, Tensor, INPUT_CHANNELS,
};
use crate::raster::{Grid, Pixel, RgbImage};
use crate::vesselgraph::Patch;

/// Pixel normalisation: `(v / 255 - MEAN) / STD`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// An image with its class label.
pub type Example<'a> = (&'a RgbImage, usize);

/// `[n, 3, h, w]` network input from equally sized images.
pub fn image_tensor(images: &[&RgbImage]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidConfig("no images".into()));
    };
    let (w, h) = first.dims();
    let mut data = Vec::with_capacity(images.len() * INPUT_CHANNELS * w * h);
    for img in images {
        if img.dims() != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                actual: img.dims(),
            });
        }
        for c in 0..INPUT_CHANNELS {
            data.extend(img.data().iter().map(|px| (px[c] as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD));
        }
    }
    Tensor::from_vec(&[images.len(), INPUT_CHANNELS, h, w], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub augment_enabled: bool,
    /// Multiply each loss term by `ln N_l / ln N`.
    pub class_weighting: bool,
    /// Mixed into the shuffling and augmentation streams.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            augment_enabled: true,
            class_weighting: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.adam.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.adam.lr)));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub label: String,
    pub class_weights: Option<Vec<f64>>,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (best validation score).
    pub best_epoch: usize,
    pub param_hash: String,
}

fn class_counts(labels: impl Iterator<Item = usize>, k: usize) -> Vec<u64> {
    let mut c = vec![0u64; k];
    for l in labels {
        c[l] += 1;
    }
    c
}

fn loss_weights(counts: &[u64], enabled: bool) -> Result<Option<Vec<f64>>> {
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    if enabled {
        Ok(Some(class_weights(counts)?.alpha))
    } else {
        Ok(None)
    }
}

/// `(kappa, accuracy)` of predictions; kappa is `None` when undefined.
fn score(preds: &[usize], labels: &[usize], k: usize) -> (Option<f64>, f64) {
    let mut cm = ConfusionMatrix::new((0..k).map(|i| i.to_string()).collect());
    for (&p, &l) in preds.iter().zip(labels) {
        cm.add(l, p);
    }
    let kappa = cohens_kappa(&cm).ok().flatten();
    (kappa, cm.accuracy().unwrap_or(0.0))
}

fn better(a: (Option<f64>, f64), b: (Option<f64>, f64)) -> bool {
    let ka = a.0.unwrap_or(f64::NEG_INFINITY);
    let kb = b.0.unwrap_or(f64::NEG_INFINITY);
    ka > kb || (ka == kb && a.1 > b.1)
}

const INFERENCE_BATCH: usize = 64;

/// Class probabilities `[n, classes]` for `images`.
pub fn predict_images(sub: &mut SubModel, images: &[&RgbImage]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(images.len() * sub.num_classes());
    for chunk in images.chunks(INFERENCE_BATCH) {
        let (logits, _) = sub.forward(&image_tensor(chunk)?)?;
        rows.extend_from_slice(softmax(&logits).data());
    }
    Tensor::from_vec(&[images.len(), sub.num_classes()], rows)
}

/// Penultimate features `[n, feature_dim]` for `images`.
pub fn extract_features(sub: &mut SubModel, images: &[&RgbImage]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(images.len() * sub.feature_dim());
    for chunk in images.chunks(INFERENCE_BATCH) {
        let (_, f) = sub.forward(&image_tensor(chunk)?)?;
        rows.extend_from_slice(f.data());
    }
    Tensor::from_vec(&[images.len(), sub.feature_dim()], rows)
}

fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    (0..probs.batch()).map(|i| argmax(probs.row(i))).collect()
}

/// Trains one sub-model with its own loss and keeps the parameters of the
/// epoch with the best validation kappa (ties: accuracy, then earliest).
/// Kept parameters are rounded to checkpoint precision.
pub fn train_submodel(
    spec: &SubModelSpec,
    num_classes: usize,
    train: &[Example<'_>],
    val: &[Example<'_>],
    cfg: &TrainConfig,
) -> Result<(SubModel, TrainLog)> {
    cfg.validate()?;
    let Some(first) = train.first() else {
        return Err(Error::InvalidConfig("training set is empty".into()));
    };
    let input_size = first.0.width();
    let counts = class_counts(train.iter().map(|e| e.1), num_classes);
    let mut spec = spec.clone();
    spec.loss.class_weights = loss_weights(&counts, cfg.class_weighting)?;
    let mut model = SubModel::new(spec.clone(), num_classes, input_size)?;
    let mut adam = Adam::new(cfg.adam);
    let stream_seed = cfg.seed ^ spec.rng_seed.rotate_left(17) ^ cfg.augment.rng_seed.rotate_left(41);
    let mut shuffle = ChaCha8Rng::seed_from_u64(stream_seed);
    let val_images: Vec<&RgbImage> = val.iter().map(|e| e.0).collect();
    let val_labels: Vec<usize> = val.iter().map(|e| e.1).collect();

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<((Option<f64>, f64), usize, Vec<(String, Tensor)>)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let augmented: Vec<RgbImage> = batch
                .iter()
                .map(|&i| {
                    let img = train[i].0;
                    if !cfg.augment_enabled {
                        return img.clone();
                    }
                    let patch = Patch {
                        origin: Pixel::new(0, 0),
                        labels: Grid::new(img.width(), img.height(), Default::default()),
                        rgb: img.clone(),
                    };
                    let mut rng = sample_stream(stream_seed, epoch as u64, i as u64);
                    augment(&patch, &cfg.augment, &mut rng).rgb
                })
                .collect();
            let refs: Vec<&RgbImage> = augmented.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].1).collect();
            let (logits, _) = model.forward(&image_tensor(&refs)?)?;
            let (loss, dlogits) = spec.loss.loss_and_grad(&logits, &labels)?;
            model.backward(&dlogits)?;
            adam.step_visit(|f| model.visit_params(f));
            loss_sum += loss * batch.len() as f64;
        }
        let (val_kappa, val_accuracy, s) = if val.is_empty() {
            (None, None, (None, epoch as f64))
        } else {
            let preds = argmax_rows(&predict_images(&mut model, &val_images)?);
            let s = score(&preds, &val_labels, num_classes);
            (s.0, Some(s.1), s)
        };
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_accuracy,
            val_kappa,
        });
        if best.as_ref().is_none_or(|b| better(s, b.0)) {
            best = Some((s, epoch, model.snapshot()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.restore(&params)?;
    model.round_to_f32();
    let log = TrainLog {
        label: spec.label(),
        class_weights: spec.loss.class_weights.clone(),
        epochs,
        best_epoch,
        param_hash: model.param_hash(),
    };
    Ok((model, log))
}

/// Trains every spec independently (in parallel); results keep spec order.
pub fn train_submodels(
    specs: &[SubModelSpec],
    num_classes: usize,
    train: &[Example<'_>],
    val: &[Example<'_>],
    cfg: &TrainConfig,
) -> Result<Vec<(SubModel, TrainLog)>> {
    specs
        .par_iter()
        .map(|s| train_submodel(s, num_classes, train, val, cfg))
        .collect()
}

/// Per-sub-model feature blocks for one image set, computed once so
/// several fusion variants can share them.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub blocks: Vec<Tensor>,
    pub rows: usize,
}

impl FeatureTable {
    pub fn compute(subs: &mut [SubModel], images: &[&RgbImage]) -> Result<Self> {
        let blocks = if images.is_empty() {
            subs.iter().map(|s| Tensor::zeros(&[0, s.feature_dim()])).collect()
        } else {
            subs.par_iter_mut()
                .map(|s| extract_features(s, images))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            blocks,
            rows: images.len(),
        })
    }

    /// Concatenation of the blocks listed in `take`, in that order.
    pub fn fused(&self, take: &[usize]) -> Result<Tensor> {
        let parts: Vec<Tensor> = take.iter().map(|&i| self.blocks[i].clone()).collect();
        if self.rows == 0 {
            let w = parts.iter().map(|p| p.item_len()).sum();
            return Ok(Tensor::zeros(&[0, w]));
        }
        concat_columns(&parts, self.rows)
    }
}

/// Concatenated penultimate features of `subs`, in slice order.
pub fn fuse_features(subs: &mut [SubModel], x: &Tensor) -> Result<Tensor> {
    let n = x.batch();
    let parts = subs
        .iter_mut()
        .map(|s| s.forward(x).map(|r| r.1))
        .collect::<Result<Vec<_>>>()?;
    concat_columns(&parts, n)
}

fn concat_columns(parts: &[Tensor], n: usize) -> Result<Tensor> {
    let width: usize = parts.iter().map(|p| p.item_len()).sum();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::from_vec(&[n, width], data)
}

/// Combined hash over several sub-models, in order.
pub fn combined_hash(subs: &mut [SubModel]) -> String {
    let mut h = Sha256::new();
    for s in subs.iter_mut() {
        h.update(s.param_hash().as_bytes());
    }
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub class_weighting: bool,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            epochs: 60,
            batch_size: 32,
            adam: AdamConfig::default(),
            class_weighting: true,
            seed: 0,
        }
    }
}

/// Trains a fusion head on precomputed features. `guard` runs before the
/// first and after every epoch; an error from it aborts training.
pub fn train_fusion_head(
    train_x: &Tensor,
    train_y: &[usize],
    val_x: &Tensor,
    val_y: &[usize],
    num_classes: usize,
    cfg: &FusionConfig,
    guard: &mut dyn FnMut() -> Result<()>,
) -> Result<(FusionHead, TrainLog)> {
    if train_x.batch() != train_y.len() || train_x.batch() == 0 {
        return Err(Error::ShapeMismatch {
            expected: vec![train_y.len(), train_x.item_len()],
            actual: train_x.shape().to_vec(),
        });
    }
    let width = train_x.item_len();
    let counts = class_counts(train_y.iter().copied(), num_classes);
    let loss = LossSpec {
        class_weights: loss_weights(&counts, cfg.class_weighting)?,
        ..LossSpec::cross_entropy()
    };
    let mut head = FusionHead::new(width, cfg.hidden, num_classes, cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf05e);
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<((Option<f64>, f64), usize, Vec<(String, Tensor)>)> = None;
    guard()?;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut data = Vec::with_capacity(batch.len() * width);
            for &i in batch {
                data.extend_from_slice(train_x.row(i));
            }
            let x = Tensor::from_vec(&[batch.len(), width], data)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let logits = head.forward(&x)?;
            let (l, d) = loss.loss_and_grad(&logits, &labels)?;
            head.backward(&d)?;
            adam.step_visit(|f| head.visit_params(f));
            loss_sum += l * batch.len() as f64;
        }
        guard()?;
        let s = if val_y.is_empty() {
            (None, epoch as f64)
        } else {
            let probs = softmax(&head.forward(val_x)?);
            score(&argmax_rows(&probs), val_y, num_classes)
        };
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_y.len() as f64,
            val_accuracy: (!val_y.is_empty()).then_some(s.1),
            val_kappa: s.0,
        });
        if best.as_ref().is_none_or(|b| better(s, b.0)) {
            best = Some((s, epoch, head.snapshot()));
        }
    }
    let (_, best_epoch, params) = best.ok_or_else(|| Error::InvalidConfig("fusion epochs must be positive".into()))?;
    head.restore(&params)?;
    head.round_to_f32();
    let log = TrainLog {
        label: "fusion".into(),
        class_weights: loss.class_weights,
        epochs,
        best_epoch,
        param_hash: head.param_hash(),
    };
    Ok((head, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MDTNetConfig {
    /// Cross-entropy sub-models, always fused.
    pub base_specs: Vec<SubModelSpec>,
    /// Focal sub-models; the first `n` are fused.
    pub focal_specs: Vec<SubModelSpec>,
    pub n: usize,
    pub num_classes: usize,
    pub fusion: FusionConfig,
}

impl MDTNetConfig {
    /// Three cross-entropy sub-models (one per architecture) and three
    /// focal convnet-C sub-models with γ = 1, 2, 3.
    pub fn standard(num_classes: usize, n: usize, seed: u64) -> Self {
        let base_specs = Architecture::ALL
            .iter()
            .enumerate()
            .map(|(i, &a)| SubModelSpec::new(a, LossSpec::cross_entropy(), seed.wrapping_add(1 + i as u64)))
            .collect();
        let focal_specs = [1.0, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &g)| SubModelSpec::new(Architecture::ConvnetC, LossSpec::focal(g), seed.wrapping_add(11 + i as u64)))
            .collect();
        Self {
            base_specs,
            focal_specs,
            n,
            num_classes,
            fusion: FusionConfig {
                seed: seed.wrapping_add(101),
                ..FusionConfig::default()
            },
        }
    }

    /// Fused sub-model specs, in concatenation order.
    pub fn included_specs(&self) -> Vec<&SubModelSpec> {
        self.base_specs.iter().chain(self.focal_specs.iter().take(self.n)).collect()
    }

    pub fn fusion_width(&self) -> usize {
        self.included_specs().iter().map(|s| s.feature_dim).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n > self.focal_specs.len() {
            return Err(Error::InvalidConfig(format!(
                "n = {} but only {} focal sub-models are configured",
                self.n,
                self.focal_specs.len()
            )));
        }
        if self.included_specs().is_empty() {
            return Err(Error::InvalidConfig("no sub-models to fuse".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        for s in &self.base_specs {
            if s.loss.kind != crate::nn::LossKind::CrossEntropy {
                return Err(Error::InvalidConfig(format!("base sub-model {} must use cross-entropy", s.label())));
            }
        }
        for s in &self.focal_specs {
            if !matches!(s.loss.kind, crate::nn::LossKind::Focal { .. }) {
                return Err(Error::InvalidConfig(format!("focal sub-model {} must use focal loss", s.label())));
            }
        }
        Ok(())
    }
}

/// Frozen sub-models plus the trained fusion head.
pub struct MDTNetModel {
    pub config: MDTNetConfig,
    pub sub_models: Vec<SubModel>,
    pub fusion: FusionHead,
    /// [`combined_hash`] of the sub-models when they were frozen.
    pub frozen_hash: String,
}

/// Stage two: freezes `subs` (which must match the included specs of
/// `cfg`, ignoring class weights), precomputes their features on unaugmented
/// images and trains the fusion head. The sub-model hash is checked before
/// training, after every epoch and at the end.
pub fn train_fusion(
    mut subs: Vec<SubModel>,
    cfg: &MDTNetConfig,
    train: &[Example<'_>],
    val: &[Example<'_>],
) -> Result<(MDTNetModel, TrainLog)> {
    cfg.validate()?;
    let included = cfg.included_specs();
    let same = |a: &SubModelSpec, b: &SubModelSpec| {
        a.architecture == b.architecture && a.loss.kind == b.loss.kind && a.feature_dim == b.feature_dim && a.rng_seed == b.rng_seed
    };
    if subs.len() != included.len() || subs.iter().zip(&included).any(|(s, spec)| !same(&s.spec, spec)) {
        return Err(Error::InvalidConfig(
            "sub-models do not match the configured specs in order".into(),
        ));
    }
    let frozen_hash = combined_hash(&mut subs);
    let all: Vec<usize> = (0..subs.len()).collect();
    let train_images: Vec<&RgbImage> = train.iter().map(|e| e.0).collect();
    let val_images: Vec<&RgbImage> = val.iter().map(|e| e.0).collect();
    let train_x = FeatureTable::compute(&mut subs, &train_images)?.fused(&all)?;
    let val_x = FeatureTable::compute(&mut subs, &val_images)?.fused(&all)?;
    let train_y: Vec<usize> = train.iter().map(|e| e.1).collect();
    let val_y: Vec<usize> = val.iter().map(|e| e.1).collect();
    let mut guard = || {
        let now = combined_hash(&mut subs);
        if now != frozen_hash {
            return Err(Error::FrozenParametersChanged {
                before: frozen_hash.clone(),
                after: now,
            });
        }
        Ok(())
    };
    let (fusion, log) = train_fusion_head(&train_x, &train_y, &val_x, &val_y, cfg.num_classes, &cfg.fusion, &mut guard)?;
    Ok((MDTNetModel::from_parts(cfg.clone(), subs, fusion)?, log))
}

impl MDTNetModel {
    /// Assembles a model from frozen sub-models and a trained head, checking
    /// that the widths agree.
    pub fn from_parts(config: MDTNetConfig, mut sub_models: Vec<SubModel>, fusion: FusionHead) -> Result<Self> {
        config.validate()?;
        let width: usize = sub_models.iter().map(|s| s.feature_dim()).sum();
        if sub_models.len() != config.included_specs().len() || width != fusion.inputs() {
            return Err(Error::InvalidConfig(format!(
                "{} sub-models with {width} features do not fit a fusion head over {} inputs",
                sub_models.len(),
                fusion.inputs()
            )));
        }
        let frozen_hash = combined_hash(&mut sub_models);
        Ok(Self {
            config,
            sub_models,
            fusion,
            frozen_hash,
        })
    }

    /// Class probabilities `[n, classes]` for a batch.
    pub fn predict_tensor(&mut self, x: &Tensor) -> Result<Tensor> {
        let f = fuse_features(&mut self.sub_models, x)?;
        Ok(softmax(&self.fusion.forward(&f)?))
    }

    /// `(label, probabilities)`; the label is the argmax with ties going to
    /// the lowest class index.
    pub fn predict(&mut self, image: &RgbImage) -> Result<(usize, Vec<f64>)> {
        let p = self.predict_tensor(&image_tensor(&[image])?)?;
        Ok((argmax(p.row(0)), p.row(0).to_vec()))
    }

    pub fn predict_images(&mut self, images: &[&RgbImage]) -> Result<Tensor> {
        let k = self.config.num_classes;
        let mut rows = Vec::with_capacity(images.len() * k);
        for chunk in images.chunks(INFERENCE_BATCH) {
            rows.extend_from_slice(self.predict_tensor(&image_tensor(chunk)?)?.data());
        }
        Tensor::from_vec(&[images.len(), k], rows)
    }

    /// Fails if any sub-model changed since it was frozen.
    pub fn check_frozen(&mut self) -> Result<()> {
        let now = combined_hash(&mut self.sub_models);
        if now != self.frozen_hash {
            return Err(Error::FrozenParametersChanged {
                before: self.frozen_hash.clone(),
                after: now,
            });
        }
        Ok(())
    }

    /// Grad-CAM of the fused prediction: the class score is backpropagated
    /// through the fusion head into each sub-model's last convolutional
    /// map, and the per-sub-model maps are summed before normalisation.
    pub fn grad_cam(&mut self, image: &RgbImage, class: usize) -> Result<Grid<f64>> {
        let x = image_tensor(&[image])?;
        let mut maps = Vec::with_capacity(self.sub_models.len());
        let mut feats = Vec::with_capacity(self.sub_models.len());
        for s in self.sub_models.iter_mut() {
            let f = s.forward_full(&x)?;
            feats.push(f.features);
            maps.push(f.feature_map);
        }
        let fused = concat_columns(&feats, 1)?;
        let logits = self.fusion.forward(&fused)?;
        let dfused = one_hot_grad(&logits, class)?;
        let dfeat = self.fusion.backward_input(&dfused);
        self.fusion.zero_grads();
        let mut total: Option<Grid<f64>> = None;
        let mut offset = 0;
        for (s, a) in self.sub_models.iter_mut().zip(&maps) {
            let d = s.feature_dim();
            let slice = Tensor::from_vec(&[1, d], dfeat.data()[offset..offset + d].to_vec())?;
            offset += d;
            let da = s.backward_features_to_map(&slice);
            s.zero_grads();
            let cam = upsample(&weighted_map(a, &da), image.width(), image.height());
            match total.as_mut() {
                None => total = Some(cam),
                Some(t) => {
                    for (v, c) in t.data_mut().iter_mut().zip(cam.data()) {
                        *v += c;
                    }
                }
            }
        }
        Ok(normalise(total.expect("at least one sub-model")))
    }

    /// Writes one checkpoint holding every sub-model, the head and the
    /// config; `provenance` is stored verbatim in the metadata.
    pub fn save(&mut self, path: &Path, provenance: &serde_json::Value) -> Result<()> {
        let mut tensors = Vec::new();
        for (i, s) in self.sub_models.iter_mut().enumerate() {
            tensors.extend(s.snapshot().into_iter().map(|(n, t)| (format!("sub{i}.{n}"), t)));
        }
        tensors.extend(self.fusion.snapshot());
        let meta = serde_json::json!({
            "type": "mdtnet",
            "config": self.config,
            "specs": self.sub_models.iter().map(|s| &s.spec).collect::<Vec<_>>(),
            "input_size": self.sub_models[0].input_size(),
            "frozen_hash": self.frozen_hash,
            "provenance": provenance,
        });
        let f = crate::error::create_file(path)?;
        write_checkpoint(BufWriter::new(f), &meta, &tensors)
    }

    /// Reads a checkpoint written by [`Self::save`] and returns the model
    /// with its stored provenance.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let (meta, tensors) = read_checkpoint(BufReader::new(f))?;
        if meta["type"] != "mdtnet" {
            return Err(Error::Checkpoint(format!("{} is not an ensemble checkpoint", path.display())));
        }
        let config: MDTNetConfig = serde_json::from_value(meta["config"].clone())?;
        let specs: Vec<SubModelSpec> = serde_json::from_value(meta["specs"].clone())?;
        let input_size = meta["input_size"].as_u64().unwrap_or(0) as usize;
        let mut sub_models = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let mut s = SubModel::new(spec, config.num_classes, input_size)?;
            let prefix = format!("sub{i}.");
            let own: Vec<(String, Tensor)> = tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|n| (n.to_string(), t.clone())))
                .collect();
            s.restore(&own)?;
            sub_models.push(s);
        }
        let mut fusion = FusionHead::new(config.fusion_width(), config.fusion.hidden, config.num_classes, 0);
        let own: Vec<(String, Tensor)> = tensors.iter().filter(|(n, _)| n.starts_with("fusion.")).cloned().collect();
        fusion.restore(&own)?;
        let frozen_hash = meta["frozen_hash"].as_str().unwrap_or_default().to_string();
        let mut model = Self {
            config,
            sub_models,
            fusion,
            frozen_hash,
        };
        model.check_frozen()?;
        Ok((model, meta["provenance"].clone()))
    }
}

impl Classifier for MDTNetModel {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn classify(&mut self, input: &Tensor) -> Result<(usize, Vec<f64>)> {
        let p = self.predict_tensor(input)?;
        Ok((argmax(p.row(0)), p.row(0).to_vec()))
    }
}

impl Classifier for SubModel {
    fn num_classes(&self) -> usize {
        SubModel::num_classes(self)
    }

    fn classify(&mut self, input: &Tensor) -> Result<(usize, Vec<f64>)> {
        let (logits, _) = self.forward(input)?;
        let p = softmax(&logits);
        Ok((argmax(p.row(0)), p.row(0).to_vec()))
    }
}

/// Saves a single sub-model (used for the crossing-validation classifier).
pub fn save_submodel(model: &mut SubModel, path: &Path, provenance: &serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({
        "provenance": provenance,
        "type": "sub_model",
        "spec": model.spec,
        "num_classes": model.num_classes(),
        "input_size": model.input_size(),
    });
    let tensors = model.snapshot();
    let f = crate::error::create_file(path)?;
    write_checkpoint(BufWriter::new(f), &meta, &tensors)
}

pub fn load_submodel(path: &Path) -> Result<(SubModel, serde_json::Value)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let (meta, tensors) = read_checkpoint(BufReader::new(f))?;
    if meta["type"] != "sub_model" {
        return Err(Error::Checkpoint(format!("{} is not a sub-model checkpoint", path.display())));
    }
    let spec: SubModelSpec = serde_json::from_value(meta["spec"].clone())?;
    let k = meta["num_classes"].as_u64().unwrap_or(0) as usize;
    let size = meta["input_size"].as_u64().unwrap_or(0) as usize;
    let mut s = SubModel::new(spec, k, size)?;
    s.restore(&tensors)?;
    Ok((s, meta["provenance"].clone()))
}

fn one_hot_grad(logits: &Tensor, class: usize) -> Result<Tensor> {
    let k = logits.item_len();
    if class >= k {
        return Err(Error::InvalidConfig(format!("class {class} out of range for {k} classes")));
    }
    let mut d = Tensor::zeros(&[1, k]);
    d.data_mut()[class] = 1.0;
    Ok(d)
}

/// `ReLU(Σ_c w_c A_c)` with `w_c` the spatial mean of the gradient.
fn weighted_map(a: &Tensor, da: &Tensor) -> Grid<f64> {
    let (c, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    let hw = h * w;
    let mut cam = vec![0.0; hw];
    for ch in 0..c {
        let g = &da.data()[ch * hw..(ch + 1) * hw];
        let weight = g.iter().sum::<f64>() / hw as f64;
        for (v, &x) in cam.iter_mut().zip(&a.data()[ch * hw..(ch + 1) * hw]) {
            *v += weight * x;
        }
    }
    Grid::from_vec(w, h, cam.into_iter().map(|v| v.max(0.0)).collect()).expect("h*w values")
}

/// Bilinear resize with pixel centres aligned.
fn upsample(map: &Grid<f64>, w: usize, h: usize) -> Grid<f64> {
    let (mw, mh) = map.dims();
    Grid::from_fn(w, h, |x, y| {
        let sx = ((x as f64 + 0.5) * mw as f64 / w as f64 - 0.5).clamp(0.0, (mw - 1) as f64);
        let sy = ((y as f64 + 0.5) * mh as f64 / h as f64 - 0.5).clamp(0.0, (mh - 1) as f64);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(mw - 1), (y0 + 1).min(mh - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let top = map.get(x0, y0) * (1.0 - fx) + map.get(x1, y0) * fx;
        let bottom = map.get(x0, y1) * (1.0 - fx) + map.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn normalise(mut g: Grid<f64>) -> Grid<f64> {
    let max = g.data().iter().cloned().fold(0.0, f64::max);
    for v in g.data_mut() {
        *v = if max > 0.0 { (*v / max).clamp(0.0, 1.0) } else { 0.0 };
    }
    g
}

/// Grad-CAM heat map of one sub-model for `class`, resized to the image and
/// scaled to `[0, 1]` (all zeros when no location supports the class).
pub fn grad_cam(model: &mut SubModel, image: &RgbImage, class: usize) -> Result<Grid<f64>> {
    let f = model.forward_full(&image_tensor(&[image])?)?;
    let d = one_hot_grad(&f.logits, class)?;
    let da = model.backward_to_map(&d);
    model.zero_grads();
    Ok(normalise(upsample(&weighted_map(&f.feature_map, &da), image.width(), image.height())))
}

/// Mean heat inside the `window × window` square centred on `center`
/// versus the mean outside it.
pub fn heat_inside_outside(heat: &Grid<f64>, center: Pixel, window: usize) -> (f64, f64) {
    let half = (window / 2) as i64;
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (x, y, &v) in heat.iter_xy() {
        let inside = (x as i64 - center.x).abs() <= half && (y as i64 - center.y).abs() <= half;
        if inside {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    (si / ni.max(1) as f64, so / no.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Class 1 iff the left half is brighter than the right half.
    fn toy_set(n: usize, seed: u64) -> Vec<(RgbImage, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let (l, r) = if label == 1 { (170.0, 90.0) } else { (90.0, 170.0) };
                let img = Grid::from_fn(16, 16, |x, _| {
                    let base = if x < 8 { l } else { r };
                    let v = (base + rng.gen_range(-30.0..30.0_f64)).clamp(0.0, 255.0) as u8;
                    [v, v, v]
                });
                (img, label)
            })
            .collect()
    }

    fn examples(set: &[(RgbImage, usize)]) -> Vec<Example<'_>> {
        set.iter().map(|(i, l)| (i, *l)).collect()
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            augment_enabled: false,
            ..TrainConfig::default()
        }
    }

    fn accuracy(sub: &mut SubModel, set: &[Example<'_>]) -> f64 {
        let imgs: Vec<&RgbImage> = set.iter().map(|e| e.0).collect();
        let p = predict_images(sub, &imgs).unwrap();
        set.iter().enumerate().filter(|(i, e)| argmax(p.row(*i)) == e.1).count() as f64 / set.len() as f64
    }

    #[test]
    fn separable_toy_is_learned_by_both_losses() {
        let train = toy_set(64, 1);
        let val = toy_set(32, 2);
        for loss in [LossSpec::cross_entropy(), LossSpec::focal(2.0)] {
            let spec = SubModelSpec::new(Architecture::ConvnetA, loss, 3);
            // 64 samples / batch 16 * 50 epochs = 200 steps.
            let (mut m, log) = train_submodel(&spec, 2, &examples(&train), &examples(&val), &toy_cfg()).unwrap();
            let acc = accuracy(&mut m, &examples(&val));
            assert!(acc >= 0.95, "{}: {acc}", log.label);
        }
    }

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let train = toy_set(32, 5);
        let cfg = TrainConfig {
            epochs: 2,
            augment_enabled: true,
            ..toy_cfg()
        };
        let spec = SubModelSpec::new(Architecture::ConvnetB, LossSpec::focal(1.0), 9);
        let (_, a) = train_submodel(&spec, 2, &examples(&train), &[], &cfg).unwrap();
        let (_, b) = train_submodel(&spec, 2, &examples(&train), &[], &cfg).unwrap();
        assert_eq!(a.param_hash, b.param_hash);
        assert_eq!(a.epochs, b.epochs);
    }

    #[test]
    fn empty_class_is_rejected() {
        let train: Vec<(RgbImage, usize)> = toy_set(8, 1).into_iter().filter(|e| e.1 == 0).collect();
        let spec = SubModelSpec::new(Architecture::ConvnetA, LossSpec::cross_entropy(), 0);
        let err = train_submodel(&spec, 2, &examples(&train), &[], &toy_cfg()).err().unwrap();
        assert!(matches!(err, Error::EmptyClass { class: 1 }));
    }

    fn untrained(arch: Architecture, seed: u64, dim: usize) -> SubModel {
        let mut spec = SubModelSpec::new(arch, LossSpec::cross_entropy(), seed);
        spec.feature_dim = dim;
        SubModel::new(spec, 4, 16).unwrap()
    }

    #[test]
    fn fused_width_is_sum_of_feature_dims() {
        let mut subs: Vec<SubModel> = Architecture::ALL.iter().map(|&a| untrained(a, 1, 64)).collect();
        let set = toy_set(3, 0);
        let x = image_tensor(&set.iter().map(|e| &e.0).collect::<Vec<_>>()).unwrap();
        let f = fuse_features(&mut subs, &x).unwrap();
        assert_eq!(f.shape(), &[3, 192]);
        assert!(f.is_finite());
    }

    #[test]
    fn permuting_sub_models_permutes_blocks() {
        let set = toy_set(4, 3);
        let x = image_tensor(&set.iter().map(|e| &e.0).collect::<Vec<_>>()).unwrap();
        let mut ab = vec![untrained(Architecture::ConvnetC, 1, 32), untrained(Architecture::ConvnetC, 2, 32)];
        let mut ba = vec![untrained(Architecture::ConvnetC, 2, 32), untrained(Architecture::ConvnetC, 1, 32)];
        let f1 = fuse_features(&mut ab, &x).unwrap();
        let f2 = fuse_features(&mut ba, &x).unwrap();
        for i in 0..4 {
            assert_eq!(f1.row(i)[..32], f2.row(i)[32..]);
            assert_eq!(f1.row(i)[32..], f2.row(i)[..32]);
        }
    }

    fn small_config(n: usize) -> MDTNetConfig {
        let mut cfg = MDTNetConfig::standard(2, n, 4);
        cfg.fusion.hidden = 16;
        cfg.fusion.epochs = 5;
        cfg.fusion.adam.lr = 1e-3;
        cfg
    }

    fn subs_for(cfg: &MDTNetConfig) -> Vec<SubModel> {
        cfg.included_specs()
            .into_iter()
            .map(|s| SubModel::new(s.clone(), cfg.num_classes, 16).unwrap())
            .collect()
    }

    #[test]
    fn fusion_training_leaves_sub_models_untouched() {
        let cfg = small_config(1);
        let mut subs = subs_for(&cfg);
        let before = combined_hash(&mut subs);
        let train = toy_set(32, 7);
        let val = toy_set(8, 8);
        let (mut model, log) = train_fusion(subs, &cfg, &examples(&train), &examples(&val)).unwrap();
        assert_eq!(combined_hash(&mut model.sub_models), before);
        assert_eq!(model.frozen_hash, before);
        assert_eq!(log.epochs.len(), 5);
        assert_eq!(model.fusion.inputs(), cfg.fusion_width());
        model.check_frozen().unwrap();
    }

    #[test]
    fn guard_failure_aborts_fusion_training() {
        let x = Tensor::zeros(&[4, 3]);
        let cfg = FusionConfig {
            epochs: 3,
            ..FusionConfig::default()
        };
        let mut calls = 0;
        let mut guard = || {
            calls += 1;
            if calls == 2 {
                Err(Error::FrozenParametersChanged {
                    before: "a".into(),
                    after: "b".into(),
                })
            } else {
                Ok(())
            }
        };
        let err = train_fusion_head(&x, &[0, 1, 0, 1], &x, &[], 2, &cfg, &mut guard).err().unwrap();
        assert!(matches!(err, Error::FrozenParametersChanged { .. }));
    }

    #[test]
    fn mismatched_sub_models_are_rejected() {
        let cfg = small_config(1);
        let subs = subs_for(&small_config(0));
        let train = toy_set(8, 1);
        assert!(train_fusion(subs, &cfg, &examples(&train), &[]).is_err());
        let mut bad = small_config(3);
        bad.n = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zeroed_head_predicts_first_class_with_uniform_probabilities() {
        let cfg = small_config(0);
        let subs = subs_for(&cfg);
        let fusion = FusionHead::new(cfg.fusion_width(), 16, 2, 0);
        let mut model = MDTNetModel::from_parts(cfg, subs, fusion).unwrap();
        model.fusion.visit_params(&mut |_, p| p.value.data_mut().fill(0.0));
        let set = toy_set(3, 9);
        for (img, _) in &set {
            let (label, p) = model.predict(img).unwrap();
            assert_eq!(label, 0);
            assert_eq!(p, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn probabilities_sum_to_one_at_both_arities() {
        for k in [2, 4] {
            let mut cfg = MDTNetConfig::standard(k, 3, 11);
            cfg.fusion.hidden = 8;
            let subs = subs_for(&cfg);
            let fusion = FusionHead::new(cfg.fusion_width(), 8, k, 1);
            let mut model = MDTNetModel::from_parts(cfg, subs, fusion).unwrap();
            for (img, _) in toy_set(5, k as u64) {
                let (label, p) = model.predict(&img).unwrap();
                assert_eq!(p.len(), k);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert_eq!(label, argmax(&p));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let cfg = small_config(1);
        let subs = subs_for(&cfg);
        let fusion = FusionHead::new(cfg.fusion_width(), 16, 2, 3);
        let mut model = MDTNetModel::from_parts(cfg, subs, fusion).unwrap();
        model.fusion.round_to_f32();
        for s in model.sub_models.iter_mut() {
            s.round_to_f32();
        }
        model.frozen_hash = combined_hash(&mut model.sub_models);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let prov = serde_json::json!({"seed": 3});
        model.save(&path, &prov).unwrap();
        let (mut back, p) = MDTNetModel::load(&path).unwrap();
        assert_eq!(p, prov);
        let img = &toy_set(1, 0)[0].0;
        assert_eq!(model.predict(img).unwrap(), back.predict(img).unwrap());
    }

    #[test]
    fn heat_maps_are_normalised_and_patch_sized() {
        let mut sub = untrained(Architecture::ConvnetA, 2, 32);
        let img = Grid::from_fn(16, 16, |x, y| if (x as i64 - 8).abs() < 3 && (y as i64 - 8).abs() < 3 { [220, 40, 40] } else { [90, 60, 40] });
        for class in 0..4 {
            let h = grad_cam(&mut sub, &img, class).unwrap();
            assert_eq!(h.dims(), (16, 16));
            assert!(h.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let max = h.data().iter().cloned().fold(0.0, f64::max);
            assert!(max == 1.0 || max == 0.0);
        }
        let cfg = small_config(1);
        let subs = subs_for(&cfg);
        let fusion = FusionHead::new(cfg.fusion_width(), 16, 2, 0);
        let mut model = MDTNetModel::from_parts(cfg, subs, fusion).unwrap();
        let h = model.grad_cam(&img, 1).unwrap();
        assert_eq!(h.dims(), (16, 16));
        assert!(h.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        model.check_frozen().unwrap();
    }

    #[test]
    fn inside_outside_means() {
        let h = Grid::from_fn(9, 9, |x, y| if (3..=5).contains(&x) && (3..=5).contains(&y) { 1.0 } else { 0.0 });
        assert_eq!(heat_inside_outside(&h, Pixel::new(4, 4), 3), (1.0, 0.0));
    }
}
