//! Dense double-precision tensors with reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Tape`] that is rebuilt every forward pass (define-by-run). There is no
//! broadcasting: every operation requires exactly compatible shapes.

mod tape;

pub use tape::{Gradients, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major tensor of `f64` values.
///
/// Parameters carry `requires_grad = true` and receive a `grad` buffer after
/// a backward pass through [`Tensor::set_grad`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::BadShape {
                op: "Tensor::new",
                expected: format!("{} elements for shape {:?}", numel, shape),
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Like [`Tensor::new`] but also rejects NaN/Inf values.
    pub fn checked(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "Tensor::checked at flat index {idx}"
            )));
        }
        Tensor::new(shape, data)
    }

    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }
}

/// Which exponent the temperature softmax uses.
///
/// The standard distillation convention divides logits by the temperature so
/// that larger temperatures soften the output. The alternative multiplies the
/// logits by the temperature, which sharpens for temperatures above one; it
/// is kept selectable because both conventions appear in the literature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftmaxConvention {
    StandardDivide,
    PaperMultiply,
}

impl SoftmaxConvention {
    /// Factor applied to the logits before the plain softmax.
    pub fn scale(self, tau: f64) -> f64 {
        match self {
            SoftmaxConvention::StandardDivide => 1.0 / tau,
            SoftmaxConvention::PaperMultiply => tau,
        }
    }
}

/// Temperature softmax over one logits vector, computed with max-subtraction.
pub fn softmax_temperature(
    logits: &[f64],
    tau: f64,
    convention: SoftmaxConvention,
) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::InvalidArg {
            op: "softmax_temperature",
            msg: format!("temperature must be positive, got {tau}"),
        });
    }
    if logits.is_empty() {
        return Err(Error::InvalidArg {
            op: "softmax_temperature",
            msg: "empty logits".into(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax_temperature input".into()));
    }
    let scale = convention.scale(tau);
    let scaled: Vec<f64> = logits.iter().map(|z| z * scale).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_for_constant_logits() {
        for tau in [0.5, 1.0, 20.0] {
            for conv in [
                SoftmaxConvention::StandardDivide,
                SoftmaxConvention::PaperMultiply,
            ] {
                let p = softmax_temperature(&[3.0, 3.0, 3.0], tau, conv).unwrap();
                for v in p {
                    assert!((v - 1.0 / 3.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn softmax_hand_values() {
        let e = std::f64::consts::E;
        let p = softmax_temperature(&[1.0, 0.0], 1.0, SoftmaxConvention::StandardDivide).unwrap();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);

        // multiply convention sharpens for tau > 1
        let e2 = e * e;
        let p = softmax_temperature(&[1.0, 0.0], 2.0, SoftmaxConvention::PaperMultiply).unwrap();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e2 + 1.0)).abs() < 1e-12);
        assert!(p[0] > e / (e + 1.0));
    }

    #[test]
    fn softmax_stable_for_large_logits() {
        let p = softmax_temperature(&[100.0, -100.0, 50.0], 1.0, SoftmaxConvention::StandardDivide)
            .unwrap();
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        assert!(softmax_temperature(&[1.0], 0.0, SoftmaxConvention::StandardDivide).is_err());
        assert!(softmax_temperature(&[1.0], -1.0, SoftmaxConvention::StandardDivide).is_err());
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::checked(vec![2], vec![1.0, f64::NAN]).is_err());
    }
}
