//! Parameterized building blocks: dense layers, the GRU cell and the small
//! convolutional backbone that stands in for a pretrained feature extractor.
//!
//! Each layer owns its parameter tensors and can be *bound* to a [`Tape`],
//! which registers those tensors as leaves and returns a lightweight handle
//! (`*Vars`) used to build the forward graph. Binding order always equals
//! [`Parameterized::visit`] order, so gradients map back positionally.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered, named access to a model's trainable tensors.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n.to_string()));
        names
    }

    fn param_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t.clone()));
        out
    }
}

/// Prefixes child parameter names with `scope.`.
pub(crate) fn scoped<'a>(scope: &'a str, f: &'a mut dyn FnMut(&str, &Tensor)) -> impl FnMut(&str, &Tensor) + 'a {
    move |n, t| f(&format!("{scope}.{n}"), t)
}

pub(crate) fn scoped_mut<'a>(
    scope: &'a str,
    f: &'a mut dyn FnMut(&str, &mut Tensor),
) -> impl FnMut(&str, &mut Tensor) + 'a {
    move |n, t| f(&format!("{scope}.{n}"), t)
}

/// Glorot-uniform sample: `U(−a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Uniform with variance `2 / fan_in`; used in front of Mish.
pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Mish,
    Softmax,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Result<Self> {
        if input == 0 || output == 0 {
            return Err(Error::InvalidConfig(format!("dense layer {input}->{output} must have positive sizes")));
        }
        let w = match activation {
            Activation::Mish => he_uniform(&[output, input], input, rng),
            _ => glorot(&[output, input], input, output, rng),
        };
        Ok(DenseLayer { w, b: Tensor::zeros(&[output]), activation })
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DenseVars {
        DenseVars {
            w: tape.leaf(self.w.clone(), trainable),
            b: tape.leaf(self.b.clone(), trainable),
            activation: self.activation,
        }
    }

    /// Untracked `activation(W·x + b)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = vars.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }
}

impl DenseVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let wx = tape.matvec(self.w, x)?;
        let z = tape.add(wx, self.b)?;
        match self.activation {
            Activation::Mish => Ok(tape.mish(z)),
            Activation::Softmax => tape.softmax(z),
            Activation::None => Ok(z),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.w, self.b]
    }
}

impl Parameterized for DenseLayer {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w", &self.w);
        f("b", &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

/// Gated recurrent unit with `h' = (1−z)⊙h + z⊙h̃`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub wz: Tensor,
    pub uz: Tensor,
    pub bz: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub br: Tensor,
    pub wh: Tensor,
    pub uh: Tensor,
    pub bh: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wh: Var,
    pub uh: Var,
    pub bh: Var,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::InvalidConfig(format!("GRU {input}->{hidden} must have positive sizes")));
        }
        let mut w = || glorot(&[hidden, input], input, hidden, rng);
        let (wz, wr, wh) = (w(), w(), w());
        let mut u = || glorot(&[hidden, hidden], hidden, hidden, rng);
        let (uz, ur, uh) = (u(), u(), u());
        let b = Tensor::zeros(&[hidden]);
        Ok(GruCell { wz, uz, bz: b.clone(), wr, ur, br: b.clone(), wh, uh, bh: b })
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = Tensor::zeros(&[hidden, input]);
        let u = Tensor::zeros(&[hidden, hidden]);
        let b = Tensor::zeros(&[hidden]);
        GruCell {
            wz: w.clone(),
            uz: u.clone(),
            bz: b.clone(),
            wr: w.clone(),
            ur: u.clone(),
            br: b.clone(),
            wh: w,
            uh: u,
            bh: b,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.wz.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.wz.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GruVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        GruVars {
            wz: leaf(&self.wz),
            uz: leaf(&self.uz),
            bz: leaf(&self.bz),
            wr: leaf(&self.wr),
            ur: leaf(&self.ur),
            br: leaf(&self.br),
            wh: leaf(&self.wh),
            uh: leaf(&self.uh),
            bh: leaf(&self.bh),
        }
    }

    /// Untracked single step.
    pub fn step(&self, x: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let hv = tape.constant(h_prev.clone());
        let out = vars.step(&mut tape, xv, hv)?;
        Ok(tape.value(out).clone())
    }
}

impl GruVars {
    fn gate(tape: &mut Tape, w: Var, x: Var, u: Var, h: Var, b: Var) -> Result<Var> {
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, h)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let z_pre = Self::gate(tape, self.wz, x, self.uz, h, self.bz)?;
        let z = tape.sigmoid(z_pre);
        let r_pre = Self::gate(tape, self.wr, x, self.ur, h, self.br)?;
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h)?;
        let cand_pre = Self::gate(tape, self.wh, x, self.uh, rh, self.bh)?;
        let cand = tape.tanh(cand_pre);
        // h + z⊙(h̃ − h) == (1−z)⊙h + z⊙h̃
        let delta = tape.sub(cand, h)?;
        let gated = tape.mul(z, delta)?;
        tape.add(h, gated)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.wz, self.uz, self.bz, self.wr, self.ur, self.br, self.wh, self.uh, self.bh]
    }
}

impl Parameterized for GruCell {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("wz", &self.wz);
        f("uz", &self.uz);
        f("bz", &self.bz);
        f("wr", &self.wr);
        f("ur", &self.ur);
        f("br", &self.br);
        f("wh", &self.wh);
        f("uh", &self.uh);
        f("bh", &self.bh);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("wz", &mut self.wz);
        f("uz", &mut self.uz);
        f("bz", &mut self.bz);
        f("wr", &mut self.wr);
        f("ur", &mut self.ur);
        f("br", &mut self.br);
        f("wh", &mut self.wh);
        f("uh", &mut self.uh);
        f("bh", &mut self.bh);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Conv stages (each conv → bias → mish) followed by a global average pool.
/// The last stage's filter count is the feature dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stages: Vec<ConvStage>,
    pub output_dim: usize,
}

impl BackboneConfig {
    /// Three stride-2 stages, 8 and 16 filters then `output_dim`.
    pub fn desk(in_channels: usize, output_dim: usize) -> Self {
        BackboneConfig {
            in_channels,
            stages: vec![
                ConvStage { filters: 8, kernel: 3, stride: 2 },
                ConvStage { filters: 16, kernel: 3, stride: 2 },
                ConvStage { filters: output_dim, kernel: 3, stride: 2 },
            ],
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.in_channels == 0 {
            return bad("backbone needs at least one input channel".into());
        }
        let Some(last) = self.stages.last() else {
            return bad("backbone needs at least one conv stage".into());
        };
        if self.stages.iter().any(|s| s.filters == 0 || s.kernel == 0 || s.stride == 0) {
            return bad("conv stages need positive filters, kernel and stride".into());
        }
        if last.filters != self.output_dim {
            return bad(format!("last stage has {} filters but output_dim is {}", last.filters, self.output_dim));
        }
        Ok(())
    }

    /// Spatial size after all stages, or `KernelLargerThanInput` if a stage does not fit.
    pub fn output_extent(&self, mut h: usize, mut w: usize) -> Result<(usize, usize)> {
        for s in &self.stages {
            if s.kernel > h || s.kernel > w {
                return Err(Error::KernelLargerThanInput { kernel: (s.kernel, s.kernel), input: (h, w) });
            }
            h = (h - s.kernel) / s.stride + 1;
            w = (w - s.kernel) / s.stride + 1;
        }
        Ok((h, w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    stages: Vec<(Var, Var, usize)>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut channels = config.in_channels;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for s in &config.stages {
            let area = s.kernel * s.kernel;
            kernels.push(he_uniform(&[s.filters, channels, s.kernel, s.kernel], channels * area, rng));
            biases.push(Tensor::zeros(&[s.filters]));
            channels = s.filters;
        }
        Ok(Backbone { config, kernels, biases })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BackboneVars {
        let stages = self
            .kernels
            .iter()
            .zip(&self.biases)
            .zip(&self.config.stages)
            .map(|((k, b), s)| (tape.leaf(k.clone(), trainable), tape.leaf(b.clone(), trainable), s.stride))
            .collect();
        BackboneVars { stages }
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let out = vars.forward(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }
}

impl BackboneVars {
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let mut x = image;
        for &(k, b, stride) in &self.stages {
            let conv = tape.conv2d(x, k, stride)?;
            let biased = tape.channel_bias(conv, b)?;
            x = tape.mish(biased);
        }
        tape.global_avg_pool(x)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.stages.iter().flat_map(|&(k, b, _)| [k, b]).collect()
    }
}

impl Parameterized for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, (k, b)) in self.kernels.iter().zip(&self.biases).enumerate() {
            f(&format!("conv{i}.kernel"), k);
            f(&format!("conv{i}.bias"), b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, (k, b)) in self.kernels.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            f(&format!("conv{i}.kernel"), k);
            f(&format!("conv{i}.bias"), b);
        }
    }
}
