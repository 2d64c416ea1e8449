//! Dense row-major tensors with value-faithful bf16 emulation.
//!
//! A bf16-backed tensor keeps binary32 carriers that only ever hold
//! bf16-representable values. Arithmetic runs in binary32 and the result is
//! narrowed with nearest rounding when the destination is bf16-backed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rounding::{round_nearest, round_stochastic, Address, RoundRng};

/// Storage/compute precision of a training role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Bf16,
    #[default]
    Fp32,
}

impl Precision {
    /// Narrow a binary32 result into this precision with nearest rounding.
    #[inline]
    pub fn narrow(self, x: f32) -> f32 {
        match self {
            Precision::Fp32 => x,
            Precision::Bf16 => round_nearest(x).to_f32(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    Nearest,
    Stochastic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline]
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sqrt,
    Square,
    Neg,
    Abs,
}

impl UnaryOp {
    #[inline]
    fn apply(self, a: f32) -> f32 {
        match self {
            UnaryOp::Sqrt => a.sqrt(),
            UnaryOp::Square => a * a,
            UnaryOp::Neg => -a,
            UnaryOp::Abs => a.abs(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    L1,
    L2,
    Linf,
    Mean,
}

/// Right-hand side of an elementwise op.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f32),
}

impl<'a> From<&'a Tensor> for Operand<'a> {
    fn from(t: &'a Tensor) -> Self {
        Operand::Tensor(t)
    }
}

impl From<f32> for Operand<'_> {
    fn from(s: f32) -> Self {
        Operand::Scalar(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    storage: Precision,
}

impl Tensor {
    /// Build a tensor; bf16-backed data is narrowed with nearest rounding.
    pub fn new(shape: Vec<usize>, data: Vec<f32>, storage: Precision) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                found: vec![data.len()],
            });
        }
        let data = match storage {
            Precision::Fp32 => data,
            Precision::Bf16 => data.into_iter().map(|x| storage.narrow(x)).collect(),
        };
        Ok(Self {
            shape,
            data,
            storage,
        })
    }

    pub fn from_vec(data: Vec<f32>, storage: Precision) -> Self {
        let n = data.len();
        Self::new(vec![n], data, storage).expect("1-d shape always matches")
    }

    pub fn zeros(shape: &[usize], storage: Precision) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            storage,
        }
    }

    pub fn full(shape: &[usize], value: f32, storage: Precision) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![storage.narrow(value); n],
            storage,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn storage(&self) -> Precision {
        self.storage
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Apply `f` to every element, narrowing into `self`'s storage.
    pub fn map_in_place(&mut self, mut f: impl FnMut(f32) -> f32) {
        let p = self.storage;
        for x in &mut self.data {
            *x = p.narrow(f(*x));
        }
    }

    /// Re-home the values in a different storage precision (nearest rounding).
    pub fn cast(&self, storage: Precision) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| storage.narrow(x)).collect(),
            storage,
        }
    }

    /// True when every element of a bf16-backed tensor is representable.
    pub fn is_storage_faithful(&self) -> bool {
        match self.storage {
            Precision::Fp32 => true,
            Precision::Bf16 => self
                .data
                .iter()
                .all(|&x| x.is_nan() || x.to_bits() & 0xFFFF == 0),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                found: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise binary op with exact-shape or scalar broadcast. The result
    /// lives in `dest` precision.
    pub fn zip<'a>(&self, rhs: impl Into<Operand<'a>>, op: BinaryOp, dest: Precision) -> Result<Tensor> {
        let data = match rhs.into() {
            Operand::Scalar(s) => self.data.iter().map(|&a| dest.narrow(op.apply(a, s))).collect(),
            Operand::Tensor(t) if t.len() == 1 && self.len() != 1 => {
                let s = t.data[0];
                self.data.iter().map(|&a| dest.narrow(op.apply(a, s))).collect()
            }
            Operand::Tensor(t) => {
                self.same_shape(t)?;
                self.data
                    .iter()
                    .zip(&t.data)
                    .map(|(&a, &b)| dest.narrow(op.apply(a, b)))
                    .collect()
            }
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            storage: dest,
        })
    }

    pub fn unary(&self, op: UnaryOp, dest: Precision) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| dest.narrow(op.apply(a))).collect(),
            storage: dest,
        }
    }

    pub fn add<'a>(&self, rhs: impl Into<Operand<'a>>) -> Result<Tensor> {
        self.zip(rhs, BinaryOp::Add, self.storage)
    }

    pub fn sub<'a>(&self, rhs: impl Into<Operand<'a>>) -> Result<Tensor> {
        self.zip(rhs, BinaryOp::Sub, self.storage)
    }

    pub fn mul<'a>(&self, rhs: impl Into<Operand<'a>>) -> Result<Tensor> {
        self.zip(rhs, BinaryOp::Mul, self.storage)
    }

    pub fn div<'a>(&self, rhs: impl Into<Operand<'a>>) -> Result<Tensor> {
        self.zip(rhs, BinaryOp::Div, self.storage)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(UnaryOp::Sqrt, self.storage)
    }

    pub fn square(&self) -> Tensor {
        self.unary(UnaryOp::Square, self.storage)
    }

    /// Reductions accumulate in binary32 whatever the storage precision.
    pub fn reduce(&self, op: Reduction) -> f32 {
        match op {
            Reduction::Sum => self.data.iter().sum(),
            Reduction::L1 => self.data.iter().map(|x| x.abs()).sum(),
            Reduction::L2 => self.data.iter().map(|x| x * x).sum::<f32>().sqrt(),
            Reduction::Linf => self.data.iter().fold(0.0f32, |m, x| m.max(x.abs())),
            Reduction::Mean => {
                if self.data.is_empty() {
                    0.0
                } else {
                    self.data.iter().sum::<f32>() / self.data.len() as f32
                }
            }
        }
    }

    pub fn first_non_finite(&self) -> Option<(usize, f32)> {
        self.data
            .iter()
            .enumerate()
            .find(|(_, x)| !x.is_finite())
            .map(|(i, &x)| (i, x))
    }

    /// Write `<prefix>.bin` (little-endian binary32) and `<prefix>.json`.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let bin = prefix.with_extension("bin");
        let json = prefix.with_extension("json");
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let meta = TensorMeta {
            shape: self.shape.clone(),
            storage_precision: self.storage,
        };
        fs::write(&json, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    pub fn load(prefix: &Path) -> Result<Tensor> {
        let bin = prefix.with_extension("bin");
        let json = prefix.with_extension("json");
        let meta: TensorMeta =
            serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::config(
                bin.display().to_string(),
                "byte length is not a multiple of 4",
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(meta.shape, data, meta.storage_precision)
    }
}

/// JSON sidecar of a saved tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub shape: Vec<usize>,
    pub storage_precision: Precision,
}

/// Round every element into bf16 with counter address `(stream, step, i)`.
pub fn narrow_tensor(
    t: &Tensor,
    mode: RoundingMode,
    rng: &RoundRng,
    stream: u64,
    step: u64,
) -> Result<Tensor> {
    if let Some((index, value)) = t.first_non_finite() {
        return Err(Error::NonFinite { index, value });
    }
    let data = match mode {
        RoundingMode::Nearest => t.data.iter().map(|&x| round_nearest(x).to_f32()).collect(),
        RoundingMode::Stochastic => t
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                round_stochastic(x, rng, Address::new(stream, step, i as u64)).map(|b| b.to_f32())
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(Tensor {
        shape: t.shape.clone(),
        data,
        storage: Precision::Bf16,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec(), Precision::Fp32)
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(fp(&[1.0, 2.0]).add(&fp(&[3.0, 4.0])).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(fp(&[3.0]).square().data(), &[9.0]);
        assert_eq!(fp(&[9.0, 4.0]).sqrt().data(), &[3.0, 2.0]);
        assert_eq!(fp(&[1.0, 2.0]).mul(3.0).unwrap().data(), &[3.0, 6.0]);
        assert_eq!(fp(&[1.0, 2.0]).div(&fp(&[2.0])).unwrap().data(), &[0.5, 1.0]);
        assert_eq!(fp(&[1.0, 2.0]).sub(1.0).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let err = fp(&[1.0, 2.0]).add(&fp(&[1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3], Precision::Fp32).is_err());
    }

    #[test]
    fn bf16_addition_swamps_small_terms() {
        // 2^-9 is a quarter of the spacing at 1.0; nearest rounding drops it
        let one = Tensor::from_vec(vec![1.0], Precision::Bf16);
        let tiny = 0.001953125f32;
        assert_eq!(one.add(tiny).unwrap().data(), &[1.0]);
        // in fp32 the sum survives
        assert_eq!(one.zip(tiny, BinaryOp::Add, Precision::Fp32).unwrap().data(), &[1.001953125]);
    }

    #[test]
    fn reductions() {
        assert_eq!(fp(&[1.0, -2.0, 3.0]).reduce(Reduction::L1), 6.0);
        assert_eq!(fp(&[3.0, 4.0]).reduce(Reduction::L2), 5.0);
        assert_eq!(fp(&[1.0, -7.0, 3.0]).reduce(Reduction::Linf), 7.0);
        assert_eq!(fp(&[1.0, -2.0, 3.0]).reduce(Reduction::Sum), 2.0);
        assert_eq!(fp(&[1.0, 2.0, 3.0]).reduce(Reduction::Mean), 2.0);
    }

    #[test]
    fn bf16_constructor_narrows() {
        let t = Tensor::from_vec(vec![1.001953125, 3.1], Precision::Bf16);
        assert!(t.is_storage_faithful());
        assert_eq!(t.data(), &[1.0, 3.09375]);
    }

    #[test]
    fn narrow_nearest_is_identity_on_bf16_tensor() {
        let t = Tensor::from_vec(vec![1.0, -0.5, 3.140625], Precision::Bf16);
        let rng = RoundRng::new(0);
        let n = narrow_tensor(&t, RoundingMode::Nearest, &rng, 0, 0).unwrap();
        assert_eq!(n, t);
    }

    #[test]
    fn narrow_stochastic_is_deterministic_per_address() {
        let t = fp(&[1.001, 2.3, -7.77, 0.1]);
        let rng = RoundRng::new(5);
        let a = narrow_tensor(&t, RoundingMode::Stochastic, &rng, 3, 9).unwrap();
        let b = narrow_tensor(&t, RoundingMode::Stochastic, &rng, 3, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.is_storage_faithful());
    }

    #[test]
    fn narrow_reports_non_finite_index() {
        let t = fp(&[1.0, f32::NAN]);
        let err = narrow_tensor(&t, RoundingMode::Nearest, &RoundRng::new(0), 0, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn stochastic_mean_of_constant_tensor() {
        // 10^4 narrowings of 1.001953125 (P(up) = 1/4): binomial oracle
        let t = fp(&[1.001953125; 8]);
        let rng = RoundRng::new(77);
        let reps = 10_000;
        let mut sum = 0.0f64;
        for step in 0..reps {
            let n = narrow_tensor(&t, RoundingMode::Stochastic, &rng, 0, step).unwrap();
            sum += n.data().iter().map(|&x| x as f64).sum::<f64>();
        }
        let n = (reps * 8) as f64;
        let mean = sum / n;
        let delta = 0.0078125;
        let sigma = delta * (0.25f64 * 0.75 / n).sqrt();
        assert!((mean - 1.001953125).abs() <= 4.0 * sigma, "mean {mean}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.5, -4.0, 0.0, 6.25], Precision::Bf16).unwrap();
        let prefix = dir.path().join("w0");
        t.save(&prefix).unwrap();
        let bytes = std::fs::read(prefix.with_extension("bin")).unwrap();
        assert_eq!(&bytes[..4], &1.0f32.to_le_bytes());
        let meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(prefix.with_extension("json")).unwrap()).unwrap();
        assert_eq!(meta["storage_precision"], "bf16");
        assert_eq!(Tensor::load(&prefix).unwrap(), t);
    }
}
