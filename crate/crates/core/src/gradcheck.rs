//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::rng::{label, stream};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// `(tensor index, element index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, tensor: usize, element: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.coordinates += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((tensor, element, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.coordinates += other.coordinates;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

fn scalar_value(tape: &Tape, loss: Var) -> Result<f64> {
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of `f` at `x` against central differences over
/// every coordinate and returns the largest relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        scalar_value(&tape, out)
    };
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let analytic = tape.backward(loss)?.wrt(&tape, xv);

    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        report.record(0, i, analytic.data()[i], (plus - minus) / (2.0 * eps));
    }
    Ok(report.max_rel_error)
}

/// Finite-difference check of every parameter tensor of `model`.
///
/// `loss` builds the scalar loss on a fresh tape and returns it with the
/// parameter vars in [`Parameterized::visit`] order. When `max_per_tensor` is
/// set, larger tensors are checked on that many seeded random coordinates.
pub fn check_params<M, F>(model: &M, loss: F, eps: f64, max_per_tensor: Option<usize>, seed: u64) -> Result<GradCheckReport>
where
    M: Parameterized + Clone,
    F: Fn(&M, &mut Tape) -> Result<(Var, Vec<Var>)>,
{
    let mut tape = Tape::new();
    let (out, vars) = loss(model, &mut tape)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
    let mut sizes = Vec::new();
    model.visit(&mut |_, t| sizes.push(t.len()));
    if sizes.len() != analytic.len() {
        return Err(Error::DimensionMismatch {
            op: "check_params",
            detail: format!("{} parameter tensors but {} vars", sizes.len(), analytic.len()),
        });
    }

    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let (out, _) = loss(m, &mut tape)?;
        scalar_value(&tape, out)
    };
    let mut rng = stream(seed, &[label::GRAD_CHECK]);
    let mut report = GradCheckReport::default();
    let mut probe = model.clone();
    for (ti, &n) in sizes.iter().enumerate() {
        let coords: Vec<usize> = match max_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for ei in coords {
            let orig = nudge(&mut probe, ti, ei, |v| v + eps);
            let plus = eval(&probe)?;
            nudge(&mut probe, ti, ei, |_| orig - eps);
            let minus = eval(&probe)?;
            nudge(&mut probe, ti, ei, |_| orig);
            report.record(ti, ei, analytic[ti].data()[ei], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Rewrites element `ei` of parameter tensor `ti`, returning its previous value.
fn nudge<M: Parameterized>(model: &mut M, ti: usize, ei: usize, f: impl Fn(f64) -> f64) -> f64 {
    let mut idx = 0;
    let mut previous = 0.0;
    model.visit_mut(&mut |_, t| {
        if idx == ti {
            previous = t.data()[ei];
            t.data_mut()[ei] = f(previous);
        }
        idx += 1;
    });
    previous
}
