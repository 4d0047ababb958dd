//! The finite-difference suite run by `hireview grad-check`: every layer type,
//! a few primitive compositions and both full desk-scale models.

use rand::Rng;

use crate::autodiff::{Mode, Tape, Var};
use crate::error::Result;
use crate::gradcheck::{check_params, grad_check, GradCheckReport, DEFAULT_EPS};
use crate::hierarchy::{FlatModel, ModelConfig};
use crate::models::{tape_loss, HigherModel, LowerConfig, LowerModel};
use crate::nn::{Activation, Backbone, BackboneConfig, DenseLayer, GruCell};
use crate::rng::{label, stream, Stream};
use crate::tensor::Tensor;

pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Coordinates probed per parameter tensor of the full models.
const FULL_MODEL_PROBES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCase {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// `(tensor index, element index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < SUITE_TOLERANCE
    }
}

fn uniform(shape: &[usize], rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn image(shape: &[usize], rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).expect("shape")
}

/// `Σ wᵢ yᵢ` with fixed random weights; keeps every output coordinate in play.
fn projection(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn case(name: &'static str, seed: u64, report: GradCheckReport) -> SuiteCase {
    SuiteCase { name, seed, max_rel_error: report.max_rel_error, coordinates: report.coordinates, worst: report.worst }
}

fn input_case(name: &'static str, seed: u64, err: f64, coordinates: usize) -> SuiteCase {
    SuiteCase { name, seed, max_rel_error: err, coordinates, worst: None }
}

pub fn run_seed(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = stream(seed, &[label::GRAD_CHECK, 1]);
    let mut cases = Vec::new();

    // primitive compositions, checked with respect to their input
    let w = uniform(&[5, 6], &mut rng);
    let x = uniform(&[6], &mut rng);
    let target = Tensor::one_hot(seed as usize % 5, 5)?;
    let err = grad_check(
        |tape, x| {
            let wv = tape.constant(w.clone());
            let h = tape.matvec(wv, x)?;
            let h = tape.mish(h);
            let p = tape.softmax(h)?;
            tape.cross_entropy(&target, p)
        },
        &x,
        DEFAULT_EPS,
    )?;
    cases.push(input_case("ops.matvec_mish_softmax_ce", seed, err, x.len()));

    let kernels = uniform(&[3, 2, 3, 3], &mut rng);
    let x = uniform(&[2, 8, 8], &mut rng);
    let weights = uniform(&[3, 3, 3], &mut rng);
    let err = grad_check(
        |tape, x| {
            let k = tape.constant(kernels.clone());
            let y = tape.conv2d(x, k, 1)?;
            let y = tape.tanh(y);
            let y = tape.avg_pool2d(y, 2, 2)?;
            projection(tape, y, &weights)
        },
        &x,
        DEFAULT_EPS,
    )?;
    cases.push(input_case("ops.conv_tanh_pool", seed, err, x.len()));

    let m = uniform(&[4, 3], &mut rng);
    let weights = uniform(&[3, 7], &mut rng);
    let err = grad_check(
        |tape, x| {
            let mv = tape.constant(m.clone());
            let mt = tape.transpose(mv)?;
            let prod = tape.matmul(mt, x)?;
            let s = tape.sigmoid(prod);
            let r = tape.relu(s);
            projection(tape, r, &weights)
        },
        &uniform(&[4, 7], &mut rng),
        DEFAULT_EPS,
    )?;
    cases.push(input_case("ops.transpose_matmul_sigmoid", seed, err, 28));

    for (name, activation) in
        [("dense.mish", Activation::Mish), ("dense.softmax", Activation::Softmax), ("dense.none", Activation::None)]
    {
        let layer = DenseLayer::new(6, 4, activation, &mut rng)?;
        let x = uniform(&[6], &mut rng);
        let weights = uniform(&[4], &mut rng);
        let report = check_params(
            &layer,
            |l, tape| {
                let vars = l.bind(tape, true);
                let xv = tape.constant(x.clone());
                let y = vars.forward(tape, xv)?;
                Ok((projection(tape, y, &weights)?, vars.vars()))
            },
            DEFAULT_EPS,
            None,
            seed,
        )?;
        cases.push(case(name, seed, report));
    }

    let cell = GruCell::new(4, 5, &mut rng)?;
    let xs = [uniform(&[4], &mut rng), uniform(&[4], &mut rng)];
    let h0 = uniform(&[5], &mut rng);
    let weights = uniform(&[5], &mut rng);
    let report = check_params(
        &cell,
        |c, tape| {
            let vars = c.bind(tape, true);
            let mut h = tape.constant(h0.clone());
            for x in &xs {
                let xv = tape.constant(x.clone());
                h = vars.step(tape, xv, h)?;
            }
            Ok((projection(tape, h, &weights)?, vars.vars()))
        },
        DEFAULT_EPS,
        None,
        seed,
    )?;
    cases.push(case("gru", seed, report));

    let backbone = Backbone::new(BackboneConfig::desk(1, 12), &mut rng)?;
    let img = image(&[1, 16, 16], &mut rng);
    let weights = uniform(&[12], &mut rng);
    let report = check_params(
        &backbone,
        |b, tape| {
            let vars = b.bind(tape, true);
            let x = tape.constant(img.clone());
            let y = vars.forward(tape, x)?;
            Ok((projection(tape, y, &weights)?, vars.vars()))
        },
        DEFAULT_EPS,
        Some(12),
        seed,
    )?;
    cases.push(case("backbone", seed, report));

    let lower = LowerModel::new(
        LowerConfig { input_dim: 4, encoder_hidden: 3, decoder_hidden: 3, attention_dim: 4, score_classes: 5 },
        &mut rng,
    )?;
    let seq: Vec<Tensor> = (0..4).map(|_| uniform(&[4], &mut rng)).collect();
    let score = seed as usize % 5;
    let report = check_params(
        &lower,
        |l, tape| {
            let vars = l.bind(tape, true);
            let xs: Vec<Var> = seq.iter().map(|x| tape.constant(x.clone())).collect();
            let a = vars.encode(tape, &xs)?;
            let p = vars.decode(tape, &a, None)?;
            Ok((tape_loss(tape, score, p)?, vars.vars()))
        },
        DEFAULT_EPS,
        None,
        seed,
    )?;
    cases.push(case("encoder_attention_decoder", seed, report));

    // full desk-scale models
    let config = ModelConfig::desk(4, 1);
    let img = image(&[1, 32, 32], &mut rng);
    let higher = HigherModel::new(config.higher.clone(), &mut rng)?;
    let class = seed as usize % 4;
    let report = check_params(
        &higher,
        |h, tape| {
            let vars = h.bind(tape, true);
            let x = tape.constant(img.clone());
            let p = vars.forward(tape, x, Mode::Eval, &mut stream(0, &[]))?;
            Ok((tape_loss(tape, class, p)?, vars.vars()))
        },
        DEFAULT_EPS,
        Some(FULL_MODEL_PROBES),
        seed,
    )?;
    cases.push(case("model.higher", seed, report));

    let flat = FlatModel::new(config.clone(), seed)?;
    let spec = config.tiling;
    let report = check_params(
        &flat,
        |f, tape| {
            let fx = f.fx.bind(tape, true);
            let lower = f.lower.bind(tape, true);
            let p = lower.forward(tape, &fx, &img, &spec, None)?;
            let mut vars = fx.vars();
            vars.extend(lower.vars());
            Ok((tape_loss(tape, score, p)?, vars))
        },
        DEFAULT_EPS,
        Some(FULL_MODEL_PROBES),
        seed,
    )?;
    cases.push(case("model.extractor_lower", seed, report));

    Ok(cases)
}

pub fn run_suite(seeds: &[u64]) -> Result<Vec<SuiteCase>> {
    let mut all = Vec::new();
    for &seed in seeds {
        all.extend(run_seed(seed)?);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes() {
        let cases = run_seed(11).unwrap();
        for c in &cases {
            assert!(c.passed(), "{c:?}");
            assert!(c.coordinates > 0);
        }
    }
}
