//! Recorded-tape reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the ids of its inputs. Node ids are assigned in creation order, so the tape
//! is topologically sorted by construction and `backward` is a single reverse
//! sweep.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    self, check_one_hot, concat_all, mish_derivative, ConvGeometry, Elementwise, PoolGeometry, Tensor,
    PROB_FLOOR,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, kernels: Var, stride: usize },
    ChannelBias { x: Var, bias: Var },
    AvgPool2d { x: Var, window: usize, stride: usize },
    GlobalAvgPool(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Stack(Vec<Var>),
    Reshape(Var),
    AddRow { matrix: Var, row: Var },
    Activation(Var, Elementwise),
    Mish(Var),
    Softmax(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    CrossEntropy { target: Tensor, probs: Var },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visits: Vec<u32>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros shaped like its value when nothing flowed into it.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()))
    }

    /// How many times the sweep processed each node.
    pub fn visits(&self) -> &[u32] {
        &self.visits
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Parameter leaves in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value);
        self.params.push(v);
        v
    }

    /// Registers as a parameter when `trainable`, otherwise as a constant.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scale(factor);
        self.push(Op::Scale(a, factor), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let v = self.value(m).matvec(self.value(x))?;
        Ok(self.push(Op::MatVec(m, x), v))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        let v = self.value(x).conv2d(self.value(kernels), stride)?;
        Ok(self.push(Op::Conv2d { x, kernels, stride }, v))
    }

    /// Adds `bias[f]` to every element of channel `f` of a `F×H×W` tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (f, h, w) = self.value(x).dims3("channel_bias")?;
        let b = self.value(bias);
        if b.shape() != [f] {
            return Err(Error::ShapeMismatch { op: "channel_bias", left: vec![f], right: b.shape().to_vec() });
        }
        let mut out = self.value(x).clone();
        let plane = h * w;
        for (fi, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate().take(f) {
            let bv = b.data()[fi];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(Op::ChannelBias { x, bias }, out))
    }

    pub fn avg_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let v = self.value(x).avg_pool2d(window, stride)?;
        Ok(self.push(Op::AvgPool2d { x, window, stride }, v))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).global_avg_pool()?;
        Ok(self.push(Op::GlobalAvgPool(x), v))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = concat_all(&values, axis)?;
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, v))
    }

    /// Stacks equally sized vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or(Error::EmptyInput("stack"))?;
        let d = self.value(first).len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: self.value(first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(Op::Stack(rows.to_vec()), v))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    /// Adds `row` to every row of `matrix`.
    pub fn add_row(&mut self, matrix: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(matrix).dims2("add_row")?;
        let rv = self.value(row);
        if rv.rank() != 1 || rv.len() != c {
            return Err(Error::ShapeMismatch { op: "add_row", left: vec![r, c], right: rv.shape().to_vec() });
        }
        let mut out = self.value(matrix).clone();
        let rd = rv.data().to_vec();
        for chunk in out.data_mut().chunks_mut(c.max(1)) {
            chunk.iter_mut().zip(&rd).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(Op::AddRow { matrix, row }, out))
    }

    pub fn activation(&mut self, x: Var, kind: Elementwise) -> Var {
        let v = self.value(x).activate(kind);
        self.push(Op::Activation(x, kind), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Elementwise::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Elementwise::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Elementwise::Relu)
    }

    pub fn mish(&mut self, x: Var) -> Var {
        let v = self.value(x).mish();
        self.push(Op::Mish(x), v)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 {
            return Err(Error::DimensionMismatch { op: "softmax", detail: format!("expected vector, got {:?}", t.shape()) });
        }
        let v = t.softmax()?;
        Ok(self.push(Op::Softmax(x), v))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1−rate)`; evaluation is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate(rate));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x, mask }, v))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v)
    }

    pub fn cross_entropy(&mut self, target: &Tensor, probs: Var) -> Result<Var> {
        let loss = tensor::cross_entropy(target, self.value(probs))?;
        check_one_hot(target)?;
        Ok(self.push(Op::CrossEntropy { target: target.clone(), probs }, Tensor::scalar(loss)))
    }

    /// Reverse sweep from a scalar `loss`. Every node at or before `loss` is
    /// processed exactly once; nodes with no incoming gradient are skipped cheaply.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        let mut visits = vec![0u32; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for id in (0..=loss.0).rev() {
            visits[id] += 1;
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, visits })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| self.value(v);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(val(*b))?);
                accumulate(grads, *b, g.mul(val(*a))?);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul(&val(*b).transpose()?)?);
                accumulate(grads, *b, val(*a).transpose()?.matmul(g)?);
            }
            Op::MatVec(m, x) => {
                let (rows, cols) = val(*m).dims2("matvec")?;
                let xd = val(*x).data();
                let mut gm = vec![0.0; rows * cols];
                let mut gx = vec![0.0; cols];
                let md = val(*m).data();
                for (i, &gi) in g.data().iter().enumerate() {
                    if gi == 0.0 {
                        continue;
                    }
                    let row = &md[i * cols..(i + 1) * cols];
                    let grow = &mut gm[i * cols..(i + 1) * cols];
                    for j in 0..cols {
                        grow[j] = gi * xd[j];
                        gx[j] += gi * row[j];
                    }
                }
                accumulate(grads, *m, Tensor::new(vec![rows, cols], gm)?);
                accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), gx)?);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()?),
            Op::Conv2d { x, kernels, stride } => {
                let (gx, gk) = conv2d_backward(val(*x), val(*kernels), *stride, g)?;
                accumulate(grads, *x, gx);
                accumulate(grads, *kernels, gk);
            }
            Op::ChannelBias { x, bias } => {
                let f = val(*bias).len();
                let plane = g.len() / f.max(1);
                let gb = (0..f).map(|fi| g.data()[fi * plane..(fi + 1) * plane].iter().sum()).collect();
                accumulate(grads, *x, g.clone());
                accumulate(grads, *bias, Tensor::vector(gb));
            }
            Op::AvgPool2d { x, window, stride } => {
                let xv = val(*x);
                let geo = PoolGeometry::new(xv, *window, *stride)?;
                let mut gx = vec![0.0; xv.len()];
                let norm = 1.0 / (window * window) as f64;
                for ci in 0..geo.c {
                    for oy in 0..geo.oh {
                        for ox in 0..geo.ow {
                            let gv = g.data()[(ci * geo.oh + oy) * geo.ow + ox] * norm;
                            for dy in 0..*window {
                                let row = (ci * geo.h + oy * stride + dy) * geo.w + ox * stride;
                                gx[row..row + window].iter_mut().for_each(|v| *v += gv);
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::GlobalAvgPool(x) => {
                let xv = val(*x);
                let (c, h, w) = xv.dims3("global_avg_pool")?;
                let plane = h * w;
                let mut gx = Vec::with_capacity(xv.len());
                for ci in 0..c {
                    let gv = g.data()[ci] / plane as f64;
                    gx.extend(std::iter::repeat_n(gv, plane));
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out.shape()[..*axis].iter().product();
                let inner: usize = out.shape()[axis + 1..].iter().product();
                let mut pieces: Vec<Vec<f64>> = parts.iter().map(|&p| Vec::with_capacity(val(p).len())).collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (pi, &p) in parts.iter().enumerate() {
                        let chunk = val(p).shape()[*axis] * inner;
                        pieces[pi].extend_from_slice(&g.data()[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                for (&p, data) in parts.iter().zip(pieces) {
                    accumulate(grads, p, Tensor::new(val(p).shape().to_vec(), data)?);
                }
            }
            Op::Stack(rows) => {
                let d = out.shape()[1];
                for (i, &r) in rows.iter().enumerate() {
                    accumulate(grads, r, Tensor::vector(g.data()[i * d..(i + 1) * d].to_vec()));
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g.reshape(val(*x).shape())?),
            Op::AddRow { matrix, row } => {
                let c = val(*row).len();
                let mut gr = vec![0.0; c];
                for chunk in g.data().chunks(c.max(1)) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                accumulate(grads, *matrix, g.clone());
                accumulate(grads, *row, Tensor::vector(gr));
            }
            Op::Activation(x, kind) => {
                let xv = val(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(out.data()))
                    .map(|(gv, (&xi, &yi))| gv * kind.derivative(xi, yi))
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Mish(x) => {
                let xv = val(*x);
                let data = g.data().iter().zip(xv.data()).map(|(gv, &xi)| gv * mish_derivative(xi)).collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Softmax(x) => {
                let gy: f64 = tensor::dot(g.data(), out.data());
                let data = out.data().iter().zip(g.data()).map(|(y, gv)| y * (gv - gy)).collect();
                accumulate(grads, *x, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                accumulate(grads, *x, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::Sum(x) => accumulate(grads, *x, Tensor::filled(val(*x).shape(), g.item())),
            Op::CrossEntropy { target, probs } => {
                let pv = val(*probs);
                let gl = g.item();
                let data = target
                    .data()
                    .iter()
                    .zip(pv.data())
                    .map(|(&t, &p)| if t != 0.0 && p >= PROB_FLOOR { -gl * t / p } else { 0.0 })
                    .collect();
                accumulate(grads, *probs, Tensor::new(pv.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn conv2d_backward(x: &Tensor, kernels: &Tensor, stride: usize, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let ConvGeometry { c, h, w, f, kh, kw, oh, ow, stride } = ConvGeometry::new(x, kernels, stride)?;
    let xd = x.data();
    let kd = kernels.data();
    let gd = g.data();
    let mut gx = vec![0.0; xd.len()];
    let mut gk = vec![0.0; kd.len()];
    for fi in 0..f {
        for ci in 0..c {
            for dy in 0..kh {
                for dx in 0..kw {
                    let kidx = ((fi * c + ci) * kh + dy) * kw + dx;
                    let k = kd[kidx];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let in_row = (ci * h + oy * stride + dy) * w;
                        let out_row = (fi * oh + oy) * ow;
                        for ox in 0..ow {
                            let gv = gd[out_row + ox];
                            let xi = in_row + ox * stride + dx;
                            acc += gv * xd[xi];
                            gx[xi] += gv * k;
                        }
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(kernels.shape().to_vec(), gk)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1., -2., 3.]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1., 2.]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn concat_backward_splits_ones() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1., 2.]));
        let b = tape.param(Tensor::vector(vec![3.]));
        let c = tape.concat(&[a, b], 0).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1., 1.]);
        assert_eq!(g.get(b).unwrap().data(), &[1.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreached_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1., 2.]));
        let unused = tape.param(Tensor::vector(vec![5.]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(&tape, unused), Tensor::zeros(&[1]));
    }

    #[test]
    fn each_node_visited_once() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.3, -0.7]));
        let y = tape.mish(x);
        let z = tape.mul(y, x).unwrap();
        let w = tape.add(z, y).unwrap();
        let p = tape.softmax(w).unwrap();
        let l = tape.cross_entropy(&Tensor::one_hot(0, 2).unwrap(), p).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.visits().iter().all(|&v| v == 1));
        assert_eq!(g.visits().len(), tape.len());
    }

    #[test]
    fn dropout_contracts() {
        let mut rng = stream(3, &[0]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[100_000]));
        assert_eq!(tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.9, Mode::Eval, &mut rng).unwrap(), x);
        assert!(matches!(tape.dropout(x, 1.0, Mode::Train, &mut rng), Err(Error::InvalidRate(_))));
        let d = tape.dropout(x, 0.2, Mode::Train, &mut rng).unwrap();
        let mean = tape.value(d).mean();
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
    }
}
