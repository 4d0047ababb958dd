//! Dense row-major `f64` tensors and the untracked numeric kernels that the
//! tape reuses for its forward values.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"HRTN";
pub const BLOB_VERSION: u32 = 1;

/// Smallest probability fed to `ln` by [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DimensionMismatch {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn one_hot(index: usize, len: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::IndexOutOfRange { index, len });
        }
        let mut t = Self::zeros(&[len]);
        t.data[index] = 1.0;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// True when the tensor holds exactly one value, whatever its rank.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the largest value; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { op, left: self.shape.clone(), right: other.shape.clone() });
        }
        Ok(())
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::DimensionMismatch { op, detail: format!("expected rank 2, got {s:?}") }),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(Error::DimensionMismatch { op, detail: format!("expected rank 3, got {s:?}") }),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                detail: format!("inner dimensions {k} and {k2} differ"),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `[m×k] · [k] -> [m]`.
    pub fn matvec(&self, x: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2("matvec")?;
        if x.rank() != 1 || x.len() != k {
            return Err(Error::DimensionMismatch {
                op: "matvec",
                detail: format!("matrix {:?} against vector {:?}", self.shape, x.shape),
            });
        }
        let out = (0..m).map(|i| dot(&self.data[i * k..(i + 1) * k], &x.data)).collect();
        Ok(Tensor::vector(out))
    }

    /// Valid (unpadded) 2-D cross-correlation of `C×H×W` input with `F×C×kh×kw` kernels.
    pub fn conv2d(&self, kernels: &Tensor, stride: usize) -> Result<Self> {
        let geom = ConvGeometry::new(self, kernels, stride)?;
        let ConvGeometry { c, h, w, f, kh, kw, oh, ow, stride } = geom;
        let mut out = vec![0.0; f * oh * ow];
        for fi in 0..f {
            for ci in 0..c {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let k = kernels.data[((fi * c + ci) * kh + dy) * kw + dx];
                        if k == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let in_row = (ci * h + oy * stride + dy) * w;
                            let out_row = (fi * oh + oy) * ow;
                            for ox in 0..ow {
                                out[out_row + ox] += k * self.data[in_row + ox * stride + dx];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![f, oh, ow], out)
    }

    pub fn avg_pool2d(&self, window: usize, stride: usize) -> Result<Self> {
        let g = PoolGeometry::new(self, window, stride)?;
        let mut out = vec![0.0; g.c * g.oh * g.ow];
        let norm = 1.0 / (window * window) as f64;
        for ci in 0..g.c {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for dy in 0..window {
                        let row = (ci * g.h + oy * stride + dy) * g.w + ox * stride;
                        acc += self.data[row..row + window].iter().sum::<f64>();
                    }
                    out[(ci * g.oh + oy) * g.ow + ox] = acc * norm;
                }
            }
        }
        Tensor::new(vec![g.c, g.oh, g.ow], out)
    }

    /// Mean over each channel's full spatial extent: `C×H×W -> [C]`.
    pub fn global_avg_pool(&self) -> Result<Self> {
        let (c, h, w) = self.dims3("global_avg_pool")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::EmptyInput("global_avg_pool"));
        }
        let out = (0..c)
            .map(|ci| self.data[ci * plane..(ci + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(Tensor::vector(out))
    }

    pub fn concat(&self, other: &Tensor, axis: usize) -> Result<Self> {
        concat_all(&[self, other], axis)
    }

    pub fn softmax(&self) -> Result<Self> {
        if self.is_empty() {
            return Err(Error::EmptyInput("softmax"));
        }
        Ok(Tensor { shape: self.shape.clone(), data: softmax_slice(&self.data) })
    }

    pub fn activate(&self, kind: Elementwise) -> Self {
        self.map(|v| kind.apply(v))
    }

    pub fn mish(&self) -> Self {
        self.map(mish)
    }

    /// Writes the `HRTN` blob: magic, version, rank, `u64` dims, little-endian `f64` data.
    pub fn write_blob<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(BLOB_MAGIC)?;
        out.write_all(&BLOB_VERSION.to_le_bytes())?;
        out.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.blob_len());
        self.write_blob(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn blob_len(&self) -> usize {
        4 + 4 + 4 + 8 * self.shape.len() + 8 * self.data.len()
    }

    pub fn read_blob<R: Read>(input: &mut R) -> std::io::Result<Tensor> {
        use std::io::{Error as IoError, ErrorKind};
        let invalid = |msg: String| IoError::new(ErrorKind::InvalidData, msg);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != BLOB_MAGIC {
            return Err(invalid(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != BLOB_VERSION {
            return Err(invalid(format!("unsupported blob version {version}")));
        }
        input.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut dword = [0u8; 8];
        for _ in 0..rank {
            input.read_exact(&mut dword)?;
            shape.push(u64::from_le_bytes(dword) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| invalid("shape overflows".into()))?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            input.read_exact(&mut dword)?;
            data.push(f64::from_le_bytes(dword));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_blob(bytes: &[u8]) -> std::io::Result<Tensor> {
        let mut cursor = bytes;
        let t = Self::read_blob(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{} trailing bytes after tensor blob", cursor.len()),
            ));
        }
        Ok(t)
    }
}

pub fn concat_all(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::EmptyInput("concat"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::DimensionMismatch { op: "concat", detail: format!("axis {axis} for rank {rank}") });
    }
    for p in &parts[1..] {
        let compatible = p.rank() == rank
            && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::ShapeMismatch { op: "concat", left: first.shape.clone(), right: p.shape.clone() });
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total_axis;
    Tensor::new(shape, data)
}

/// `−Σ tᵢ ln max(pᵢ, 1e-12)` for a one-hot target.
pub fn cross_entropy(target: &Tensor, predicted: &Tensor) -> Result<f64> {
    target.expect_same_shape(predicted, "cross_entropy")?;
    check_one_hot(target)?;
    Ok(target
        .data
        .iter()
        .zip(&predicted.data)
        .filter(|(&t, _)| t != 0.0)
        .map(|(&t, &p)| -t * p.clamp(PROB_FLOOR, 1.0).ln())
        .sum())
}

pub(crate) fn check_one_hot(target: &Tensor) -> Result<()> {
    let ones = target.data.iter().filter(|&&v| v == 1.0).count();
    let zeros = target.data.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != target.len() {
        return Err(Error::NotOneHot);
    }
    Ok(())
}

pub(crate) struct ConvGeometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn new(x: &Tensor, kernels: &Tensor, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::NonPositiveStride);
        }
        let (c, h, w) = x.dims3("conv2d")?;
        let (f, kc, kh, kw) = match kernels.shape.as_slice() {
            &[f, kc, kh, kw] => (f, kc, kh, kw),
            s => {
                return Err(Error::DimensionMismatch { op: "conv2d", detail: format!("kernels must be rank 4, got {s:?}") })
            }
        };
        if kc != c {
            return Err(Error::DimensionMismatch {
                op: "conv2d",
                detail: format!("kernel channels {kc} vs input channels {c}"),
            });
        }
        if kh > h || kw > w || kh == 0 || kw == 0 {
            return Err(Error::KernelLargerThanInput { kernel: (kh, kw), input: (h, w) });
        }
        Ok(ConvGeometry { c, h, w, f, kh, kw, oh: (h - kh) / stride + 1, ow: (w - kw) / stride + 1, stride })
    }
}

pub(crate) struct PoolGeometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeometry {
    pub fn new(x: &Tensor, window: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::NonPositiveStride);
        }
        let (c, h, w) = x.dims3("avg_pool2d")?;
        if window == 0 || window > h.min(w) {
            return Err(Error::KernelLargerThanInput { kernel: (window, window), input: (h, w) });
        }
        Ok(PoolGeometry { c, h, w, oh: (h - window) / stride + 1, ow: (w - window) / stride + 1 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Relu,
}

impl Elementwise {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Elementwise::Sigmoid => sigmoid(x),
            Elementwise::Tanh => x.tanh(),
            Elementwise::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the forward input `x` and output `y`.
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Elementwise::Sigmoid => y * (1.0 - y),
            Elementwise::Tanh => 1.0 - y * y,
            Elementwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for Elementwise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Elementwise::Sigmoid),
            "tanh" => Ok(Elementwise::Tanh),
            "relu" => Ok(Elementwise::Relu),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

pub fn mish_derivative(x: f64) -> f64 {
    let t = softplus(x).tanh();
    t + x * (1.0 - t * t) * sigmoid(x)
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(Tensor::identity(2).matmul(&b).unwrap(), b);
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let c = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(a.matmul(&c).unwrap().data(), &[19., 22., 43., 50.]);
        let z = Tensor::zeros(&[2, 3]).matmul(&Tensor::ones(&[3, 4])).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn conv2d_identity_and_constant() {
        let x = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let k = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(x.conv2d(&k, 1).unwrap(), x);

        let img = Tensor::filled(&[1, 5, 5], 2.0);
        let out = img.conv2d(&Tensor::ones(&[1, 1, 3, 3]), 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 18.0));
    }

    #[test]
    fn conv2d_errors() {
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(x.conv2d(&Tensor::zeros(&[1, 1, 3, 3]), 1), Err(Error::KernelLargerThanInput { .. })));
        assert!(matches!(x.conv2d(&Tensor::zeros(&[1, 1, 1, 1]), 0), Err(Error::NonPositiveStride)));
    }

    #[test]
    fn avg_pool_examples() {
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(x.avg_pool2d(2, 2).unwrap().data(), &[2.5]);
        let c = Tensor::filled(&[2, 6, 6], 0.7);
        assert!(c.avg_pool2d(3, 2).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert_eq!(x.global_avg_pool().unwrap().data(), &[2.5]);
    }

    #[test]
    fn concat_examples() {
        let a = Tensor::vector(vec![1., 2.]);
        let b = Tensor::vector(vec![3.]);
        assert_eq!(a.concat(&b, 0).unwrap().data(), &[1., 2., 3.]);
        let empty = Tensor::vector(vec![]);
        assert_eq!(a.concat(&empty, 0).unwrap(), a);
        let m = t(&[2, 1], &[1., 2.]);
        let n = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(m.concat(&n, 1).unwrap().data(), &[1., 3., 4., 2., 5., 6.]);
        assert!(matches!(m.concat(&n, 0), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(Elementwise::Tanh.apply(0.0), 0.0);
        for x in [-30.0, -2.5, -0.1, 0.3, 4.0, 700.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
        assert!(matches!("gelu".parse::<Elementwise>(), Err(Error::UnknownKind(_))));
        assert_eq!("relu".parse::<Elementwise>().unwrap(), Elementwise::Relu);
    }

    #[test]
    fn mish_values() {
        assert_eq!(mish(0.0), 0.0);
        assert!((mish(20.0) / 20.0 - 1.0).abs() < 1e-6);
        // 1·tanh(ln(1+e)) at 30 digits: 0.865098388267310346116233449256
        assert!((mish(1.0) - 0.865_098_388_267_310_3).abs() < 1e-14);
        assert!(mish(-800.0).is_finite() && mish(800.0).is_finite());
        assert!((mish(800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::vector(vec![0., 0.]).softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::vector(vec![2f64.ln(), 0.]).softmax().unwrap();
        assert!((s.data()[0] - 2. / 3.).abs() < 1e-15 && (s.data()[1] - 1. / 3.).abs() < 1e-15);
        let s = Tensor::vector(vec![1000., 0.]).softmax().unwrap();
        assert!(s.is_finite() && (s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
        assert!(matches!(Tensor::vector(vec![]).softmax(), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let tgt = Tensor::vector(vec![1., 0.]);
        assert_eq!(cross_entropy(&tgt, &Tensor::vector(vec![1., 0.])).unwrap(), 0.0);
        let ln2 = cross_entropy(&tgt, &Tensor::vector(vec![0.5, 0.5])).unwrap();
        assert!((ln2 - 2f64.ln()).abs() < 1e-15);
        let five = Tensor::one_hot(1, 5).unwrap();
        let ce = cross_entropy(&five, &Tensor::filled(&[5], 0.2)).unwrap();
        assert!((ce - 5f64.ln()).abs() < 1e-15);
        let wrong = cross_entropy(&tgt, &Tensor::vector(vec![0., 1.])).unwrap();
        assert!((wrong - (-(PROB_FLOOR.ln()))).abs() < 1e-9);
        assert!(matches!(cross_entropy(&Tensor::vector(vec![0.5, 0.5]), &tgt), Err(Error::NotOneHot)));
        assert!(matches!(cross_entropy(&tgt, &Tensor::filled(&[3], 0.3)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn blob_layout_is_fixed() {
        let x = t(&[1, 2], &[1.5, -2.0]);
        let bytes = x.to_blob();
        assert_eq!(&bytes[0..4], b"HRTN");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &2u64.to_le_bytes());
        assert_eq!(&bytes[28..36], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), x.blob_len());
        assert_eq!(Tensor::from_blob(&bytes).unwrap(), x);
        assert!(Tensor::from_blob(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Tensor::from_blob(&bad).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }
}
