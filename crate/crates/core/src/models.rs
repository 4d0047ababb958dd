//! The two model families.
//!
//! * [`HigherModel`]: backbone → dense head → softmax over product classes.
//! * [`WindowExtractor`] + [`LowerModel`]: per-window features, a bidirectional
//!   GRU encoder, additive attention and a GRU decoder whose final state feeds a
//!   softmax over review scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    glorot, scoped, scoped_mut, Activation, Backbone, BackboneConfig, BackboneVars, DenseLayer, DenseVars, GruCell,
    GruVars, Parameterized,
};
use crate::tensor::Tensor;
use crate::tiler::{tile, TilingSpec};

/// Dropout precedes this many of the final dense layers of the higher head.
pub const DROPOUT_LAYERS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HigherConfig {
    pub backbone: BackboneConfig,
    /// Hidden widths of the head; a final softmax layer of `n_classes` follows.
    pub head: Vec<usize>,
    pub n_classes: usize,
    pub dropout: f64,
}

impl HigherConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.n_classes == 0 || self.head.contains(&0) {
            return Err(Error::InvalidConfig("higher head widths and class count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidRate(self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HigherModel {
    pub config: HigherConfig,
    pub backbone: Backbone,
    pub head: Vec<DenseLayer>,
}

#[derive(Clone, Debug)]
pub struct HigherVars {
    backbone: BackboneVars,
    head: Vec<DenseVars>,
    dropout: f64,
}

impl HigherModel {
    pub fn new<R: Rng + ?Sized>(config: HigherConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone.clone(), rng)?;
        let mut head = Vec::new();
        let mut width = config.backbone.output_dim;
        for &h in &config.head {
            head.push(DenseLayer::new(width, h, Activation::Mish, rng)?);
            width = h;
        }
        head.push(DenseLayer::new(width, config.n_classes, Activation::Softmax, rng)?);
        Ok(HigherModel { config, backbone, head })
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HigherVars {
        HigherVars {
            backbone: self.backbone.bind(tape, trainable),
            head: self.head.iter().map(|l| l.bind(tape, trainable)).collect(),
            dropout: self.config.dropout,
        }
    }

    /// Class probabilities for one image.
    pub fn forward<R: Rng + ?Sized>(&self, image: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let out = vars.forward(&mut tape, x, mode, rng)?;
        Ok(tape.value(out).clone())
    }
}

impl HigherVars {
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, image: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let mut x = self.backbone.forward(tape, image)?;
        let first_dropped = self.head.len().saturating_sub(DROPOUT_LAYERS);
        for (i, layer) in self.head.iter().enumerate() {
            if i >= first_dropped {
                x = tape.dropout(x, self.dropout, mode, rng)?;
            }
            x = layer.forward(tape, x)?;
        }
        Ok(x)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.backbone.vars();
        v.extend(self.head.iter().flat_map(DenseVars::vars));
        v
    }
}

impl Parameterized for HigherModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit(&mut scoped("backbone", f));
        for (i, l) in self.head.iter().enumerate() {
            l.visit(&mut scoped(&format!("head{i}"), f));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_mut(&mut scoped_mut("backbone", f));
        for (i, l) in self.head.iter_mut().enumerate() {
            l.visit_mut(&mut scoped_mut(&format!("head{i}"), f));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub backbone: BackboneConfig,
    /// Mish dense layers after the backbone; the last width is the feature size.
    pub dense: Vec<usize>,
}

impl ExtractorConfig {
    pub fn feature_dim(&self) -> usize {
        self.dense.last().copied().unwrap_or(self.backbone.output_dim)
    }
}

/// Per-window feature network shared by every lower-level model.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowExtractor {
    pub config: ExtractorConfig,
    pub backbone: Backbone,
    pub dense: Vec<DenseLayer>,
}

#[derive(Clone, Debug)]
pub struct ExtractorVars {
    backbone: BackboneVars,
    dense: Vec<DenseVars>,
}

impl WindowExtractor {
    pub fn new<R: Rng + ?Sized>(config: ExtractorConfig, rng: &mut R) -> Result<Self> {
        config.backbone.validate()?;
        let backbone = Backbone::new(config.backbone.clone(), rng)?;
        let mut dense = Vec::new();
        let mut width = config.backbone.output_dim;
        for &d in &config.dense {
            dense.push(DenseLayer::new(width, d, Activation::Mish, rng)?);
            width = d;
        }
        Ok(WindowExtractor { config, backbone, dense })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ExtractorVars {
        ExtractorVars {
            backbone: self.backbone.bind(tape, trainable),
            dense: self.dense.iter().map(|l| l.bind(tape, trainable)).collect(),
        }
    }

    /// One feature vector per window, in tiling order.
    pub fn window_features(&self, image: &Tensor, spec: &TilingSpec) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let feats = vars.window_features(&mut tape, image, spec)?;
        Ok(feats.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

impl ExtractorVars {
    pub fn features(&self, tape: &mut Tape, window: Var) -> Result<Var> {
        let mut x = self.backbone.forward(tape, window)?;
        for layer in &self.dense {
            x = layer.forward(tape, x)?;
        }
        Ok(x)
    }

    pub fn window_features(&self, tape: &mut Tape, image: &Tensor, spec: &TilingSpec) -> Result<Vec<Var>> {
        tile(image, spec)?
            .into_iter()
            .map(|w| {
                let wv = tape.constant(w);
                self.features(tape, wv)
            })
            .collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.backbone.vars();
        v.extend(self.dense.iter().flat_map(DenseVars::vars));
        v
    }
}

impl Parameterized for WindowExtractor {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit(&mut scoped("backbone", f));
        for (i, l) in self.dense.iter().enumerate() {
            l.visit(&mut scoped(&format!("dense{i}"), f));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_mut(&mut scoped_mut("backbone", f));
        for (i, l) in self.dense.iter_mut().enumerate() {
            l.visit_mut(&mut scoped_mut(&format!("dense{i}"), f));
        }
    }
}

/// Additive alignment score `e = v · tanh(W_r r + W_a a + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub w_r: Tensor,
    pub w_a: Tensor,
    pub b: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AlignmentVars {
    w_r: Var,
    w_a: Var,
    b: Var,
    v: Var,
}

impl Alignment {
    pub fn new<R: Rng + ?Sized>(decoder_hidden: usize, annotation_dim: usize, width: usize, rng: &mut R) -> Self {
        Alignment {
            w_r: glorot(&[width, decoder_hidden], decoder_hidden, width, rng),
            w_a: glorot(&[width, annotation_dim], annotation_dim, width, rng),
            b: Tensor::zeros(&[width]),
            v: glorot(&[width], width, 1, rng),
        }
    }

    pub fn zeros(decoder_hidden: usize, annotation_dim: usize, width: usize) -> Self {
        Alignment {
            w_r: Tensor::zeros(&[width, decoder_hidden]),
            w_a: Tensor::zeros(&[width, annotation_dim]),
            b: Tensor::zeros(&[width]),
            v: Tensor::zeros(&[width]),
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> AlignmentVars {
        AlignmentVars {
            w_r: tape.leaf(self.w_r.clone(), trainable),
            w_a: tape.leaf(self.w_a.clone(), trainable),
            b: tape.leaf(self.b.clone(), trainable),
            v: tape.leaf(self.v.clone(), trainable),
        }
    }
}

impl Parameterized for Alignment {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w_r", &self.w_r);
        f("w_a", &self.w_a);
        f("b", &self.b);
        f("v", &self.v);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w_r", &mut self.w_r);
        f("w_a", &mut self.w_a);
        f("b", &mut self.b);
        f("v", &mut self.v);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowerConfig {
    pub input_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub attention_dim: usize,
    pub score_classes: usize,
}

/// Attention encoder–decoder mapping a window-feature sequence to score probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerModel {
    pub config: LowerConfig,
    pub encoder_fwd: GruCell,
    pub encoder_bwd: GruCell,
    pub alignment: Alignment,
    pub decoder: GruCell,
    pub head: DenseLayer,
}

#[derive(Clone, Debug)]
pub struct LowerVars {
    encoder_fwd: GruVars,
    encoder_bwd: GruVars,
    alignment: AlignmentVars,
    decoder: GruVars,
    head: DenseVars,
    decoder_hidden: usize,
    encoder_hidden: usize,
}

/// Per-step attention weights recorded by a decode pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    pub alphas: Vec<Tensor>,
}

impl DecodeTrace {
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }
}

/// Encoder states stacked as rows, plus the sequence-wide part of the alignment input.
pub struct Annotations {
    rows_t: Var,
    projected: Var,
    len: usize,
}

impl LowerModel {
    pub fn new<R: Rng + ?Sized>(config: LowerConfig, rng: &mut R) -> Result<Self> {
        let LowerConfig { input_dim, encoder_hidden, decoder_hidden, attention_dim, score_classes } = config;
        if attention_dim == 0 || score_classes == 0 {
            return Err(Error::InvalidConfig("attention width and score classes must be positive".into()));
        }
        Ok(LowerModel {
            encoder_fwd: GruCell::new(input_dim, encoder_hidden, rng)?,
            encoder_bwd: GruCell::new(input_dim, encoder_hidden, rng)?,
            alignment: Alignment::new(decoder_hidden, 2 * encoder_hidden, attention_dim, rng),
            decoder: GruCell::new(2 * encoder_hidden, decoder_hidden, rng)?,
            head: DenseLayer::new(decoder_hidden, score_classes, Activation::Softmax, rng)?,
            config,
        })
    }

    /// Every parameter zero: uniform attention and uniform score output.
    pub fn zeros(config: LowerConfig) -> Self {
        let LowerConfig { input_dim, encoder_hidden, decoder_hidden, attention_dim, score_classes } = config;
        LowerModel {
            encoder_fwd: GruCell::zeros(input_dim, encoder_hidden),
            encoder_bwd: GruCell::zeros(input_dim, encoder_hidden),
            alignment: Alignment::zeros(decoder_hidden, 2 * encoder_hidden, attention_dim),
            decoder: GruCell::zeros(2 * encoder_hidden, decoder_hidden),
            head: DenseLayer {
                w: Tensor::zeros(&[score_classes, decoder_hidden]),
                b: Tensor::zeros(&[score_classes]),
                activation: Activation::Softmax,
            },
            config,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LowerVars {
        LowerVars {
            encoder_fwd: self.encoder_fwd.bind(tape, trainable),
            encoder_bwd: self.encoder_bwd.bind(tape, trainable),
            alignment: self.alignment.bind(tape, trainable),
            decoder: self.decoder.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
            decoder_hidden: self.config.decoder_hidden,
            encoder_hidden: self.config.encoder_hidden,
        }
    }

    fn with_constants<T>(&self, f: impl FnOnce(&mut Tape, &LowerVars) -> Result<T>) -> Result<T> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        f(&mut tape, &vars)
    }

    /// Encoder states `[→a; ←a]` for each position.
    pub fn encode(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        self.with_constants(|tape, vars| {
            let inputs: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = vars.encode(tape, &inputs)?;
            Ok(out.into_iter().map(|v| tape.value(v).clone()).collect())
        })
    }

    /// Attention weights over `a_seq` and the resulting context for decoder state `r_prev`.
    pub fn attend(&self, r_prev: &Tensor, a_seq: &[Tensor]) -> Result<(Tensor, Tensor)> {
        self.with_constants(|tape, vars| {
            let rows: Vec<Var> = a_seq.iter().map(|a| tape.constant(a.clone())).collect();
            let ann = vars.annotate(tape, &rows)?;
            let r = tape.constant(r_prev.clone());
            let (alpha, ctx) = vars.attend(tape, r, &ann)?;
            Ok((tape.value(alpha).clone(), tape.value(ctx).clone()))
        })
    }

    pub fn decode(&self, a_seq: &[Tensor]) -> Result<Tensor> {
        self.decode_traced(a_seq).map(|(p, _)| p)
    }

    pub fn decode_traced(&self, a_seq: &[Tensor]) -> Result<(Tensor, DecodeTrace)> {
        self.with_constants(|tape, vars| {
            let rows: Vec<Var> = a_seq.iter().map(|a| tape.constant(a.clone())).collect();
            let mut trace = DecodeTrace::default();
            let out = vars.decode(tape, &rows, Some(&mut trace))?;
            Ok((tape.value(out).clone(), trace))
        })
    }

    /// Score probabilities for an image: window features → encode → decode.
    pub fn forward(&self, fx: &WindowExtractor, image: &Tensor, spec: &TilingSpec) -> Result<Tensor> {
        self.forward_traced(fx, image, spec).map(|(p, _)| p)
    }

    pub fn forward_traced(&self, fx: &WindowExtractor, image: &Tensor, spec: &TilingSpec) -> Result<(Tensor, DecodeTrace)> {
        let mut tape = Tape::new();
        let fx_vars = fx.bind(&mut tape, false);
        let vars = self.bind(&mut tape, false);
        let mut trace = DecodeTrace::default();
        let out = vars.forward(&mut tape, &fx_vars, image, spec, Some(&mut trace))?;
        Ok((tape.value(out).clone(), trace))
    }
}

impl LowerVars {
    pub fn encode(&self, tape: &mut Tape, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let zero = tape.constant(Tensor::zeros(&[self.encoder_hidden]));
        let mut forward = Vec::with_capacity(xs.len());
        let mut h = zero;
        for &x in xs {
            h = self.encoder_fwd.step(tape, x, h)?;
            forward.push(h);
        }
        let mut backward = vec![zero; xs.len()];
        let mut h = zero;
        for (t, &x) in xs.iter().enumerate().rev() {
            h = self.encoder_bwd.step(tape, x, h)?;
            backward[t] = h;
        }
        forward.into_iter().zip(backward).map(|(f, b)| tape.concat(&[f, b], 0)).collect()
    }

    pub fn annotate(&self, tape: &mut Tape, a_seq: &[Var]) -> Result<Annotations> {
        if a_seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        let rows = tape.stack(a_seq)?;
        let rows_t = tape.transpose(rows)?;
        let w_a_t = tape.transpose(self.alignment.w_a)?;
        let projected = tape.matmul(rows, w_a_t)?;
        Ok(Annotations { rows_t, projected, len: a_seq.len() })
    }

    /// `α = softmax_t'(f_A(r_prev, a_t'))`, `c = Σ α_t' a_t'`.
    pub fn attend(&self, tape: &mut Tape, r_prev: Var, ann: &Annotations) -> Result<(Var, Var)> {
        let query = tape.matvec(self.alignment.w_r, r_prev)?;
        let query = tape.add(query, self.alignment.b)?;
        let hidden = tape.add_row(ann.projected, query)?;
        let hidden = tape.tanh(hidden);
        let scores = tape.matvec(hidden, self.alignment.v)?;
        let alpha = tape.softmax(scores)?;
        debug_assert_eq!(tape.value(alpha).len(), ann.len);
        let context = tape.matvec(ann.rows_t, alpha)?;
        Ok((alpha, context))
    }

    /// Runs the decoder for as many steps as there are encoder states and
    /// returns the score distribution read from the final state.
    pub fn decode(&self, tape: &mut Tape, a_seq: &[Var], mut trace: Option<&mut DecodeTrace>) -> Result<Var> {
        let ann = self.annotate(tape, a_seq)?;
        let mut r = tape.constant(Tensor::zeros(&[self.decoder_hidden]));
        for _ in 0..ann.len {
            let (alpha, context) = self.attend(tape, r, &ann)?;
            if let Some(t) = trace.as_deref_mut() {
                t.alphas.push(tape.value(alpha).clone());
            }
            r = self.decoder.step(tape, context, r)?;
        }
        self.head.forward(tape, r)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        fx: &ExtractorVars,
        image: &Tensor,
        spec: &TilingSpec,
        trace: Option<&mut DecodeTrace>,
    ) -> Result<Var> {
        let xs = fx.window_features(tape, image, spec)?;
        let a_seq = self.encode(tape, &xs)?;
        self.decode(tape, &a_seq, trace)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder_fwd.vars();
        v.extend(self.encoder_bwd.vars());
        v.extend([self.alignment.w_r, self.alignment.w_a, self.alignment.b, self.alignment.v]);
        v.extend(self.decoder.vars());
        v.extend(self.head.vars());
        v
    }
}

impl Parameterized for LowerModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder_fwd.visit(&mut scoped("encoder_fwd", f));
        self.encoder_bwd.visit(&mut scoped("encoder_bwd", f));
        self.alignment.visit(&mut scoped("alignment", f));
        self.decoder.visit(&mut scoped("decoder", f));
        self.head.visit(&mut scoped("head", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder_fwd.visit_mut(&mut scoped_mut("encoder_fwd", f));
        self.encoder_bwd.visit_mut(&mut scoped_mut("encoder_bwd", f));
        self.alignment.visit_mut(&mut scoped_mut("alignment", f));
        self.decoder.visit_mut(&mut scoped_mut("decoder", f));
        self.head.visit_mut(&mut scoped_mut("head", f));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Product-class loss of the higher-level model.
    Higher,
    /// Review-score loss of a lower-level (or flat) model.
    Lower,
}

/// Cross-entropy of `probs` against the one-hot `target_index`.
pub fn model_loss(_kind: LossKind, target_index: usize, probs: &Tensor) -> Result<f64> {
    let target = Tensor::one_hot(target_index, probs.len())?;
    crate::tensor::cross_entropy(&target, probs)
}

pub(crate) fn tape_loss(tape: &mut Tape, target_index: usize, probs: Var) -> Result<Var> {
    let target = Tensor::one_hot(target_index, tape.value(probs).len())?;
    tape.cross_entropy(&target, probs)
}
