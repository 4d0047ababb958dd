//! The composed two-level system, its training loop and the flat ablation.
//!
//! Training works on one slice of parameters at a time (`TrainTarget`). Every
//! mini-batch builds one tape per sample in parallel; per-sample gradients are
//! then summed in sample order, so results do not depend on the worker count.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::data::{Sample, SCORE_HIGH, SCORE_LOW};
use crate::error::{Error, Result};
use crate::metrics::PredictionRecord;
use crate::models::{tape_loss, ExtractorConfig, HigherConfig, HigherModel, LowerConfig, LowerModel, WindowExtractor};
use crate::nn::{scoped, scoped_mut, BackboneConfig, ConvStage, Parameterized};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::rng::{label, stream, Stream};
use crate::tensor::{argmax, Tensor};
use crate::tiler::TilingSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRange {
    pub low: u8,
    pub high: u8,
}

impl ScoreRange {
    pub fn levels(&self) -> usize {
        (self.high - self.low) as usize + 1
    }
}

impl Default for ScoreRange {
    fn default() -> Self {
        ScoreRange { low: SCORE_LOW, high: SCORE_HIGH }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub tiling: TilingSpec,
    pub higher: HigherConfig,
    pub extractor: ExtractorConfig,
    pub lower: LowerConfig,
    pub score_range: ScoreRange,
}

impl ModelConfig {
    /// 32×32 inputs, 16-pixel windows at stride 8 (nine windows), small CNN backbones.
    pub fn desk(n_classes: usize, channels: usize) -> Self {
        let feature_dim = 32;
        ModelConfig {
            tiling: TilingSpec { image_size: 32, window: 16, stride: 8 },
            higher: HigherConfig {
                backbone: BackboneConfig::desk(channels, 128),
                head: vec![64, 32, 16],
                n_classes,
                dropout: 0.2,
            },
            extractor: ExtractorConfig { backbone: BackboneConfig::desk(channels, 128), dense: vec![64, feature_dim] },
            lower: LowerConfig {
                input_dim: feature_dim,
                encoder_hidden: 32,
                decoder_hidden: 32,
                attention_dim: 32,
                score_classes: ScoreRange::default().levels(),
            },
            score_range: ScoreRange::default(),
        }
    }

    /// Full-size layout: 224×224 RGB, 64-pixel windows at stride 32, wide heads.
    pub fn full(n_classes: usize) -> Self {
        let stages = |out: usize| {
            [32, 64, 128, 256, out].iter().map(|&filters| ConvStage { filters, kernel: 3, stride: 2 }).collect()
        };
        ModelConfig {
            tiling: TilingSpec { image_size: 224, window: 64, stride: 32 },
            higher: HigherConfig {
                backbone: BackboneConfig { in_channels: 3, stages: stages(1536), output_dim: 1536 },
                head: vec![1024, 512, 256],
                n_classes,
                dropout: 0.2,
            },
            extractor: ExtractorConfig {
                backbone: BackboneConfig { in_channels: 3, stages: stages(2048), output_dim: 2048 },
                dense: vec![1024, 512],
            },
            lower: LowerConfig {
                input_dim: 512,
                encoder_hidden: 256,
                decoder_hidden: 256,
                attention_dim: 256,
                score_classes: ScoreRange::default().levels(),
            },
            score_range: ScoreRange::default(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.higher.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.tiling.validate()?;
        self.higher.validate()?;
        self.extractor.backbone.validate()?;
        if self.lower.input_dim != self.extractor.feature_dim() {
            return Err(Error::InvalidConfig(format!(
                "lower input_dim {} differs from extractor feature size {}",
                self.lower.input_dim,
                self.extractor.feature_dim()
            )));
        }
        if self.score_range.low > self.score_range.high || self.lower.score_classes != self.score_range.levels() {
            return Err(Error::InvalidConfig(format!(
                "score classes {} do not cover scores {}..={}",
                self.lower.score_classes, self.score_range.low, self.score_range.high
            )));
        }
        if self.higher.backbone.in_channels != self.extractor.backbone.in_channels {
            return Err(Error::InvalidConfig("higher and extractor backbones disagree on channels".into()));
        }
        self.extractor.backbone.output_extent(self.tiling.window, self.tiling.window)?;
        self.higher.backbone.output_extent(self.tiling.image_size, self.tiling.image_size)?;
        Ok(())
    }
}

/// Initialization stream ids per component.
const INIT_HIGHER: u64 = 0;
const INIT_FX: u64 = 1;
const INIT_LOWER: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalModel {
    pub config: ModelConfig,
    pub higher: HigherModel,
    pub lowers: Vec<LowerModel>,
    /// Window extractor shared by every lower model.
    pub fx: WindowExtractor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub class_probs: Tensor,
    pub score: u8,
    pub score_probs: Tensor,
}

impl HierarchicalModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let higher = HigherModel::new(config.higher.clone(), &mut stream(seed, &[label::INIT, INIT_HIGHER]))?;
        let fx = WindowExtractor::new(config.extractor.clone(), &mut stream(seed, &[label::INIT, INIT_FX]))?;
        let lowers = (0..config.n_classes())
            .map(|i| LowerModel::new(config.lower.clone(), &mut stream(seed, &[label::INIT, INIT_LOWER + i as u64])))
            .collect::<Result<Vec<_>>>()?;
        Ok(HierarchicalModel { config, higher, lowers, fx })
    }

    pub fn n_classes(&self) -> usize {
        self.lowers.len()
    }

    pub fn class_probs(&self, image: &Tensor) -> Result<Tensor> {
        // eval-mode dropout never draws from the stream
        self.higher.forward(image, Mode::Eval, &mut stream(0, &[]))
    }

    pub fn score_probs(&self, class: usize, image: &Tensor) -> Result<Tensor> {
        let lower = self.lowers.get(class).ok_or(Error::IndexOutOfRange { index: class, len: self.lowers.len() })?;
        lower.forward(&self.fx, image, &self.config.tiling)
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let class_probs = self.class_probs(image)?;
        self.route(class_probs, image, None)
    }

    /// Scores `image` with the lower model picked by `class_probs`. When given,
    /// `log` records the index of every lower model invoked.
    pub fn route(&self, class_probs: Tensor, image: &Tensor, log: Option<&mut Vec<usize>>) -> Result<Prediction> {
        if class_probs.len() != self.lowers.len() {
            return Err(Error::DimensionMismatch {
                op: "route",
                detail: format!("{} class probabilities for {} lower models", class_probs.len(), self.lowers.len()),
            });
        }
        let class = argmax(class_probs.data());
        if let Some(log) = log {
            log.push(class);
        }
        let score_probs = self.score_probs(class, image)?;
        let score = self.config.score_range.low + argmax(score_probs.data()) as u8;
        Ok(Prediction { class, class_probs, score, score_probs })
    }

    /// End-to-end records (routed by the higher model) and stage records
    /// (each image scored by the lower model of its true class).
    pub fn evaluate(&self, samples: &[Sample]) -> Result<(Vec<PredictionRecord>, Vec<PredictionRecord>)> {
        let low = self.config.score_range.low;
        let pairs = samples
            .par_iter()
            .map(|s| {
                let p = self.predict(&s.image)?;
                let routed = PredictionRecord {
                    sample_id: s.id,
                    true_class: s.product_class,
                    predicted_class: p.class,
                    class_probs: p.class_probs.data().to_vec(),
                    true_score: s.score,
                    predicted_score: p.score,
                    score_probs: p.score_probs.data().to_vec(),
                };
                let stage_probs =
                    if p.class == s.product_class { p.score_probs } else { self.score_probs(s.product_class, &s.image)? };
                let stage = PredictionRecord {
                    predicted_class: s.product_class,
                    predicted_score: low + argmax(stage_probs.data()) as u8,
                    score_probs: stage_probs.into_data(),
                    ..routed.clone()
                };
                Ok((routed, stage))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(pairs.into_iter().unzip())
    }
}

/// Single-level ablation: one attention score model over every class, with its own extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatModel {
    pub config: ModelConfig,
    pub fx: WindowExtractor,
    pub lower: LowerModel,
}

impl FlatModel {
    /// Initialized exactly like the extractor and first lower model of a
    /// [`HierarchicalModel`] with the same seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let fx = WindowExtractor::new(config.extractor.clone(), &mut stream(seed, &[label::INIT, INIT_FX]))?;
        let lower = LowerModel::new(config.lower.clone(), &mut stream(seed, &[label::INIT, INIT_LOWER]))?;
        Ok(FlatModel { config, fx, lower })
    }

    pub fn score_probs(&self, image: &Tensor) -> Result<Tensor> {
        self.lower.forward(&self.fx, image, &self.config.tiling)
    }

    /// Score records; class fields carry the true class since nothing is routed.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<Vec<PredictionRecord>> {
        let n = self.config.n_classes();
        samples
            .par_iter()
            .map(|s| {
                let probs = self.score_probs(&s.image)?;
                Ok(PredictionRecord {
                    sample_id: s.id,
                    true_class: s.product_class,
                    predicted_class: s.product_class,
                    class_probs: Tensor::one_hot(s.product_class, n)?.into_data(),
                    true_score: s.score,
                    predicted_score: self.config.score_range.low + argmax(probs.data()) as u8,
                    score_probs: probs.into_data(),
                })
            })
            .collect()
    }
}

impl Parameterized for HierarchicalModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.higher.visit(&mut scoped("higher", f));
        self.fx.visit(&mut scoped("fx", f));
        for (i, l) in self.lowers.iter().enumerate() {
            l.visit(&mut scoped(&format!("lower{i}"), f));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.higher.visit_mut(&mut scoped_mut("higher", f));
        self.fx.visit_mut(&mut scoped_mut("fx", f));
        for (i, l) in self.lowers.iter_mut().enumerate() {
            l.visit_mut(&mut scoped_mut(&format!("lower{i}"), f));
        }
    }
}

impl Parameterized for FlatModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fx.visit(&mut scoped("fx", f));
        self.lower.visit(&mut scoped("lower", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fx.visit_mut(&mut scoped_mut("fx", f));
        self.lower.visit_mut(&mut scoped_mut("lower", f));
    }
}

pub fn predict_flat(flat: &FlatModel, image: &Tensor) -> Result<u8> {
    let probs = flat.score_probs(image)?;
    Ok(flat.config.score_range.low + argmax(probs.data()) as u8)
}

/// Product of the stage accuracies.
pub fn combine_accuracy(acc_higher: f64, mean_acc_lower: f64) -> Result<f64> {
    for a in [acc_higher, mean_acc_lower] {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::OutOfRange(a));
        }
    }
    Ok(acc_higher * mean_acc_lower)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainTarget {
    Higher,
    /// One lower model, trained on its class only.
    Lower(usize),
    /// Every lower model at once, each sample routed by its true class.
    Lowers,
    Flat,
}

impl fmt::Display for TrainTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainTarget::Higher => f.write_str("higher"),
            TrainTarget::Lower(i) => write!(f, "lower:{i}"),
            TrainTarget::Lowers => f.write_str("lowers"),
            TrainTarget::Flat => f.write_str("flat"),
        }
    }
}

impl FromStr for TrainTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "higher" => Ok(TrainTarget::Higher),
            "lowers" => Ok(TrainTarget::Lowers),
            "flat" => Ok(TrainTarget::Flat),
            other => other
                .strip_prefix("lower:")
                .and_then(|i| i.parse().ok())
                .map(TrainTarget::Lower)
                .ok_or_else(|| Error::UnknownKind(other.to_string())),
        }
    }
}

impl Serialize for TrainTarget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TrainTarget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamHyper,
    pub seed: u64,
    /// Keep the shared window extractor fixed while training lower models.
    pub freeze_fx: bool,
    pub target: TrainTarget,
    /// Stop once eval-mode training accuracy reaches this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_at_train_accuracy: Option<f64>,
}

impl TrainConfig {
    pub fn desk(target: TrainTarget) -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 40,
            adam: AdamHyper::default(),
            seed: 1,
            freeze_fx: false,
            target,
            stop_at_train_accuracy: None,
        }
    }

    pub fn full(target: TrainTarget) -> Self {
        TrainConfig { batch_size: 128, ..TrainConfig::desk(target) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub steps: u64,
    pub epochs_run: usize,
}

impl TrainTrace {
    /// `epoch,split,loss,accuracy` with six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6},{:.6}\n", r.epoch, r.split, r.loss, r.accuracy));
        }
        out
    }

    pub fn last(&self, split: &str) -> Option<&TraceRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

/// Tape output for one sample: the loss, the prediction and, aligned with the
/// trained parameter list, the bound variables (`None` where the sample does
/// not touch a parameter).
struct Step {
    loss: Var,
    probs: Var,
    target: usize,
    params: Vec<Option<Var>>,
}

fn check_labels(samples: &[&Sample], n_classes: usize, range: ScoreRange) -> Result<()> {
    for s in samples {
        if s.product_class >= n_classes {
            return Err(Error::LabelOutOfRange { label: s.product_class, len: n_classes });
        }
        if s.score < range.low || s.score > range.high {
            return Err(Error::LabelOutOfRange { label: s.score as usize, len: range.levels() });
        }
    }
    Ok(())
}

fn score_target(s: &Sample, range: ScoreRange) -> usize {
    (s.score - range.low) as usize
}

fn bound<I: IntoIterator<Item = Var>>(vars: I) -> impl Iterator<Item = Option<Var>> {
    vars.into_iter().map(Some)
}

/// Trains the part of the hierarchy selected by `config.target`.
pub fn fit(
    model: &mut HierarchicalModel,
    train: &[Sample],
    val: Option<&[Sample]>,
    config: &TrainConfig,
) -> Result<TrainTrace> {
    config.validate()?;
    let n = model.n_classes();
    let range = model.config.score_range;
    let spec = model.config.tiling;
    let trainable_fx = !config.freeze_fx;
    let select = |set: &[Sample]| -> Result<Vec<Sample>> {
        let refs: Vec<&Sample> = set.iter().collect();
        check_labels(&refs, n, range)?;
        Ok(match config.target {
            TrainTarget::Lower(i) => set.iter().filter(|s| s.product_class == i).cloned().collect(),
            _ => set.to_vec(),
        })
    };
    let train = select(train)?;
    let val = val.map(select).transpose()?;
    match config.target {
        TrainTarget::Higher => train_loop(
            model,
            &train,
            val.as_deref(),
            config,
            |m, tape, s, mode, rng| {
                let vars = m.higher.bind(tape, true);
                let x = tape.constant(s.image.clone());
                let probs = vars.forward(tape, x, mode, rng)?;
                let loss = tape_loss(tape, s.product_class, probs)?;
                Ok(Step { loss, probs, target: s.product_class, params: bound(vars.vars()).collect() })
            },
            |m| vec![&mut m.higher as &mut dyn Parameterized],
        ),
        TrainTarget::Lower(i) => {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            train_loop(
                model,
                &train,
                val.as_deref(),
                config,
                |m, tape, s, _, _| {
                    let fx = m.fx.bind(tape, trainable_fx);
                    let lower = m.lowers[i].bind(tape, true);
                    let probs = lower.forward(tape, &fx, &s.image, &spec, None)?;
                    let target = score_target(s, range);
                    let loss = tape_loss(tape, target, probs)?;
                    let mut params: Vec<Option<Var>> = Vec::new();
                    if trainable_fx {
                        params.extend(bound(fx.vars()));
                    }
                    params.extend(bound(lower.vars()));
                    Ok(Step { loss, probs, target, params })
                },
                |m| {
                    let mut parts: Vec<&mut dyn Parameterized> = Vec::new();
                    if trainable_fx {
                        parts.push(&mut m.fx);
                    }
                    parts.push(&mut m.lowers[i]);
                    parts
                },
            )
        }
        TrainTarget::Lowers => {
            let per_lower = model.lowers[0].param_names().len();
            train_loop(
                model,
                &train,
                val.as_deref(),
                config,
                |m, tape, s, _, _| {
                    let fx = m.fx.bind(tape, trainable_fx);
                    let lower = m.lowers[s.product_class].bind(tape, true);
                    let probs = lower.forward(tape, &fx, &s.image, &spec, None)?;
                    let target = score_target(s, range);
                    let loss = tape_loss(tape, target, probs)?;
                    let mut params: Vec<Option<Var>> = Vec::new();
                    if trainable_fx {
                        params.extend(bound(fx.vars()));
                    }
                    for j in 0..m.lowers.len() {
                        if j == s.product_class {
                            params.extend(bound(lower.vars()));
                        } else {
                            params.extend(std::iter::repeat_n(None, per_lower));
                        }
                    }
                    Ok(Step { loss, probs, target, params })
                },
                |m| {
                    let mut parts: Vec<&mut dyn Parameterized> = Vec::new();
                    if trainable_fx {
                        parts.push(&mut m.fx);
                    }
                    parts.extend(m.lowers.iter_mut().map(|l| l as &mut dyn Parameterized));
                    parts
                },
            )
        }
        TrainTarget::Flat => Err(Error::InvalidConfig("the flat target trains a FlatModel; use fit_flat".into())),
    }
}

/// Trains the flat ablation model on every class at once.
pub fn fit_flat(flat: &mut FlatModel, train: &[Sample], val: Option<&[Sample]>, config: &TrainConfig) -> Result<TrainTrace> {
    config.validate()?;
    let n = flat.config.n_classes();
    let range = flat.config.score_range;
    let spec = flat.config.tiling;
    let trainable_fx = !config.freeze_fx;
    for set in std::iter::once(train).chain(val) {
        check_labels(&set.iter().collect::<Vec<_>>(), n, range)?;
    }
    train_loop(
        flat,
        train,
        val,
        config,
        |m, tape, s, _, _| {
            let fx = m.fx.bind(tape, trainable_fx);
            let lower = m.lower.bind(tape, true);
            let probs = lower.forward(tape, &fx, &s.image, &spec, None)?;
            let target = score_target(s, range);
            let loss = tape_loss(tape, target, probs)?;
            let mut params: Vec<Option<Var>> = Vec::new();
            if trainable_fx {
                params.extend(bound(fx.vars()));
            }
            params.extend(bound(lower.vars()));
            Ok(Step { loss, probs, target, params })
        },
        |m| {
            let mut parts: Vec<&mut dyn Parameterized> = Vec::new();
            if trainable_fx {
                parts.push(&mut m.fx);
            }
            parts.push(&mut m.lower);
            parts
        },
    )
}

struct SampleGrad {
    loss: f64,
    correct: bool,
    grads: Vec<Option<Tensor>>,
}

fn sample_gradient<M, F>(model: &M, sample: &Sample, step: &F, rng: &mut Stream) -> Result<SampleGrad>
where
    F: Fn(&M, &mut Tape, &Sample, Mode, &mut Stream) -> Result<Step>,
{
    let mut tape = Tape::new();
    let out = step(model, &mut tape, sample, Mode::Train, rng)?;
    let grads = tape.backward(out.loss)?;
    Ok(SampleGrad {
        loss: tape.value(out.loss).item(),
        correct: argmax(tape.value(out.probs).data()) == out.target,
        grads: out.params.iter().map(|v| v.map(|v| grads.wrt(&tape, v))).collect(),
    })
}

/// Mean gradient over `batch`, in the trained parameter order. Missing
/// entries are zero. Also returns the summed loss and the number of hits.
fn batch_gradient<M, F>(
    model: &M,
    batch: &[&Sample],
    shapes: &[Vec<usize>],
    step: &F,
    rng_for: impl Fn(usize) -> Stream + Sync,
) -> Result<(Vec<Tensor>, f64, usize)>
where
    M: Sync,
    F: Fn(&M, &mut Tape, &Sample, Mode, &mut Stream) -> Result<Step> + Sync,
{
    let per_sample = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| sample_gradient(model, s, step, &mut rng_for(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut sum: Vec<Option<Tensor>> = vec![None; shapes.len()];
    let mut loss = 0.0;
    let mut hits = 0;
    for g in per_sample {
        loss += g.loss;
        hits += g.correct as usize;
        if g.grads.len() != shapes.len() {
            return Err(Error::DimensionMismatch {
                op: "fit",
                detail: format!("{} gradients for {} parameters", g.grads.len(), shapes.len()),
            });
        }
        for (acc, grad) in sum.iter_mut().zip(g.grads) {
            match (acc.as_mut(), grad) {
                (Some(a), Some(g)) => a.add_assign(&g)?,
                (None, Some(g)) => *acc = Some(g),
                (_, None) => {}
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let mean = sum
        .into_iter()
        .zip(shapes)
        .map(|(g, shape)| g.map_or_else(|| Tensor::zeros(shape), |g| g.scale(scale)))
        .collect();
    Ok((mean, loss, hits))
}

fn evaluate_split<M, F>(model: &M, samples: &[Sample], step: &F) -> Result<(f64, f64)>
where
    M: Sync,
    F: Fn(&M, &mut Tape, &Sample, Mode, &mut Stream) -> Result<Step> + Sync,
{
    let results = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let out = step(model, &mut tape, s, Mode::Eval, &mut stream(0, &[]))?;
            Ok((tape.value(out.loss).item(), argmax(tape.value(out.probs).data()) == out.target))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
    let acc = results.iter().filter(|r| r.1).count() as f64 / n;
    Ok((loss, acc))
}

fn flatten_params(parts: &[&mut dyn Parameterized]) -> Vec<Tensor> {
    parts.iter().flat_map(|p| p.param_tensors()).collect()
}

fn train_loop<M, F, P>(model: &mut M, train: &[Sample], val: Option<&[Sample]>, config: &TrainConfig, step: F, parts: P) -> Result<TrainTrace>
where
    M: Sync,
    F: Fn(&M, &mut Tape, &Sample, Mode, &mut Stream) -> Result<Step> + Sync,
    P: for<'a> Fn(&'a mut M) -> Vec<&'a mut dyn Parameterized>,
{
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let shapes: Vec<Vec<usize>> = flatten_params(&parts(model)).iter().map(|t| t.shape().to_vec()).collect();
    let mut state = AdamState::new(config.adam);
    let mut trace = TrainTrace::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.sort_unstable();
        order.shuffle(&mut stream(config.seed, &[label::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let first = b * config.batch_size;
            let (grads, loss, h) = batch_gradient(&*model, &batch, &shapes, &step, |i| {
                stream(config.seed, &[label::DROPOUT, epoch as u64, (first + i) as u64])
            })?;
            loss_sum += loss;
            hits += h;
            let mut p = parts(model);
            let mut tensors = flatten_params(&p);
            {
                let mut refs: Vec<&mut Tensor> = tensors.iter_mut().collect();
                adam_step(&mut refs, &grads, &mut state)?;
            }
            let mut it = tensors.into_iter();
            for part in p.iter_mut() {
                part.visit_mut(&mut |_, t| *t = it.next().expect("parameter count is fixed"));
            }
            trace.steps += 1;
        }
        let n = train.len() as f64;
        trace.rows.push(TraceRow { epoch, split: "train".into(), loss: loss_sum / n, accuracy: hits as f64 / n });
        if let Some(val) = val.filter(|v| !v.is_empty()) {
            let (loss, accuracy) = evaluate_split(&*model, val, &step)?;
            trace.rows.push(TraceRow { epoch, split: "val".into(), loss, accuracy });
        }
        trace.epochs_run = epoch + 1;
        if let Some(goal) = config.stop_at_train_accuracy {
            let (loss, accuracy) = evaluate_split(&*model, train, &step)?;
            trace.rows.push(TraceRow { epoch, split: "train_eval".into(), loss, accuracy });
            if accuracy >= goal {
                break;
            }
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GeneratorConfig};

    fn tiny_config(n: usize) -> ModelConfig {
        let mut c = ModelConfig::desk(n, 1);
        c.higher.backbone = BackboneConfig::desk(1, 16);
        c.higher.head = vec![8, 8, 8];
        c.extractor = ExtractorConfig { backbone: BackboneConfig::desk(1, 16), dense: vec![8] };
        c.lower = LowerConfig { input_dim: 8, encoder_hidden: 6, decoder_hidden: 6, attention_dim: 5, score_classes: 5 };
        c
    }

    fn samples(n: usize, per_score: usize) -> Vec<Sample> {
        let cfg = GeneratorConfig { n_classes: n, per_score, image_size: 32, channels: 1, augment: 0, seed: 4 };
        generate_synthetic(&cfg).unwrap().samples
    }

    #[test]
    fn combine_examples() {
        assert!((combine_accuracy(0.8967, 0.8023).unwrap() - 0.7194).abs() < 1e-4);
        assert_eq!(combine_accuracy(1.0, 0.37).unwrap(), 0.37);
        assert_eq!(combine_accuracy(0.0, 0.37).unwrap(), 0.0);
        assert!(matches!(combine_accuracy(1.2, 0.5), Err(Error::OutOfRange(_))));
        assert!(matches!(combine_accuracy(0.5, -0.1), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn presets_validate() {
        ModelConfig::desk(4, 1).validate().unwrap();
        ModelConfig::desk(23, 3).validate().unwrap();
        ModelConfig::full(23).validate().unwrap();
        let mut bad = ModelConfig::desk(4, 1);
        bad.lower.input_dim = 7;
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn target_round_trip() {
        for t in [TrainTarget::Higher, TrainTarget::Lower(3), TrainTarget::Lowers, TrainTarget::Flat] {
            assert_eq!(t.to_string().parse::<TrainTarget>().unwrap(), t);
        }
        assert!("lower:x".parse::<TrainTarget>().is_err());
        assert!("middle".parse::<TrainTarget>().is_err());
    }

    #[test]
    fn forged_class_probs_pick_lower() {
        let model = HierarchicalModel::new(tiny_config(3), 0).unwrap();
        let image = samples(3, 1)[0].image.clone();
        let mut log = Vec::new();
        for j in 0..3 {
            let p = model.route(Tensor::one_hot(j, 3).unwrap(), &image, Some(&mut log)).unwrap();
            assert_eq!(p.class, j);
            assert!((1..=5).contains(&p.score));
        }
        assert_eq!(log, vec![0, 1, 2]);
        let tie = Tensor::vector(vec![0.4, 0.4, 0.2]);
        assert_eq!(model.route(tie, &image, None).unwrap().class, 0);
    }

    #[test]
    fn flat_matches_first_lower_of_same_seed() {
        let cfg = tiny_config(2);
        let h = HierarchicalModel::new(cfg.clone(), 5).unwrap();
        let f = FlatModel::new(cfg, 5).unwrap();
        let image = samples(2, 1)[3].image.clone();
        let p = f.score_probs(&image).unwrap();
        assert_eq!(p, h.score_probs(0, &image).unwrap());
        assert_eq!(p.len(), 5);
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_count_and_errors() {
        let mut model = HierarchicalModel::new(tiny_config(2), 0).unwrap();
        let data: Vec<Sample> = samples(2, 7).into_iter().take(64).collect();
        let config = TrainConfig { epochs: 1, ..TrainConfig::desk(TrainTarget::Higher) };
        let trace = fit(&mut model, &data, None, &config).unwrap();
        assert_eq!(trace.steps, 4);
        assert!(matches!(fit(&mut model, &[], None, &config), Err(Error::EmptyDataset)));
        let mut bad = data[0].clone();
        bad.product_class = 9;
        assert!(matches!(fit(&mut model, &[bad], None, &config), Err(Error::LabelOutOfRange { .. })));
        let lower9 = TrainConfig { target: TrainTarget::Lower(9), ..config.clone() };
        assert!(matches!(fit(&mut model, &data, None, &lower9), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn training_is_deterministic() {
        let data = samples(2, 2);
        let config = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::desk(TrainTarget::Lowers) };
        let run = || {
            let mut m = HierarchicalModel::new(tiny_config(2), 3).unwrap();
            let trace = fit(&mut m, &data, Some(&data[..4]), &config).unwrap();
            (m, trace)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_ne!(a, HierarchicalModel::new(tiny_config(2), 3).unwrap());
    }

    #[test]
    fn single_lower_leaves_others_untouched() {
        let data = samples(3, 1);
        let mut m = HierarchicalModel::new(tiny_config(3), 1).unwrap();
        let before = m.clone();
        let config = TrainConfig { epochs: 1, freeze_fx: true, ..TrainConfig::desk(TrainTarget::Lower(1)) };
        fit(&mut m, &data, None, &config).unwrap();
        assert_eq!(m.fx, before.fx);
        assert_eq!(m.higher, before.higher);
        assert_eq!(m.lowers[0], before.lowers[0]);
        assert_eq!(m.lowers[2], before.lowers[2]);
        assert_ne!(m.lowers[1], before.lowers[1]);
    }

    #[test]
    fn full_batch_gradient_is_mean_of_per_sample() {
        let data = samples(2, 1);
        let m = HierarchicalModel::new(tiny_config(2), 2).unwrap();
        let spec = m.config.tiling;
        let step = |m: &HierarchicalModel, tape: &mut Tape, s: &Sample, _: Mode, _: &mut Stream| {
            let fx = m.fx.bind(tape, true);
            let lower = m.lowers[s.product_class].bind(tape, true);
            let probs = lower.forward(tape, &fx, &s.image, &spec, None)?;
            let target = score_target(s, ScoreRange::default());
            let loss = tape_loss(tape, target, probs)?;
            Ok(Step { loss, probs, target, params: bound(fx.vars()).collect() })
        };
        let shapes: Vec<Vec<usize>> = m.fx.param_tensors().iter().map(|t| t.shape().to_vec()).collect();
        let batch: Vec<&Sample> = data.iter().collect();
        let (mean, _, _) = batch_gradient(&m, &batch, &shapes, &step, |_| stream(0, &[])).unwrap();

        // oracle: independent tapes, plain accumulation
        let mut expected: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for s in &data {
            let mut tape = Tape::new();
            let fx = m.fx.bind(&mut tape, true);
            let lower = m.lowers[s.product_class].bind(&mut tape, true);
            let probs = lower.forward(&mut tape, &fx, &s.image, &spec, None).unwrap();
            let loss = tape_loss(&mut tape, (s.score - 1) as usize, probs).unwrap();
            let g = tape.backward(loss).unwrap();
            for (e, v) in expected.iter_mut().zip(fx.vars()) {
                *e = e.add(&g.wrt(&tape, v)).unwrap();
            }
        }
        for (e, got) in expected.iter().zip(&mean) {
            let e = e.scale(1.0 / data.len() as f64);
            assert!(e.max_abs_diff(got) < 1e-10);
        }
    }

    #[test]
    fn trace_csv_layout() {
        let trace = TrainTrace {
            rows: vec![TraceRow { epoch: 0, split: "train".into(), loss: 1.5, accuracy: 0.25 }],
            steps: 1,
            epochs_run: 1,
        };
        assert_eq!(trace.to_csv(), "epoch,split,loss,accuracy\n0,train,1.500000,0.250000\n");
    }
}
