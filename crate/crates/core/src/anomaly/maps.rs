use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Per-pixel reconstruction error, `H×W`, all entries non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap<T> {
    values: Tensor<T>,
}

impl<T: Scalar> ErrorMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::Shape(format!(
                "error map must be H×W, got {} dims",
                values.ndim()
            )));
        }
        if let Some(bad) = values.data().iter().find(|v| !(**v >= T::zero())) {
            return Err(Error::Numeric(format!(
                "error map entries must be finite and non-negative, found {bad}"
            )));
        }
        Ok(ErrorMap { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.values
    }
}

/// Anomaly-suppression weights derived from an [`ErrorMap`].
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap<T> {
    pub values: Tensor<T>,
    pub source_epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightScaling {
    /// `w = max(E) − e` as is.
    Raw,
    /// Raw weights divided by their mean when the mean is positive.
    Mean,
}

impl FromStr for WeightScaling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "raw" => Ok(WeightScaling::Raw),
            "mean" => Ok(WeightScaling::Mean),
            other => Err(format!("expected raw|mean, got `{other}`")),
        }
    }
}

/// Weights are the residual from the largest error: `w = max(E) − e`.
///
/// The max-error pixel gets exactly zero weight and ordering by weight is the
/// reverse of ordering by error.
pub fn asl_weight_map<T: Scalar>(errors: &ErrorMap<T>, scaling: WeightScaling) -> WeightMap<T> {
    let max = errors.values.max();
    let raw = errors.values.map(|e| max - e);
    let values = match scaling {
        WeightScaling::Raw => raw,
        WeightScaling::Mean => {
            let mean = raw.mean();
            if mean > T::zero() {
                raw.map(|w| w / mean)
            } else {
                raw
            }
        }
    };
    WeightMap {
        values,
        source_epoch: 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossForm {
    /// Σ w·e divided by the support size.
    Mean,
    /// Σ w·e.
    Sum,
}

impl FromStr for LossForm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(LossForm::Mean),
            "sum" => Ok(LossForm::Sum),
            other => Err(format!("expected mean|sum, got `{other}`")),
        }
    }
}

/// Constant per-pixel factors `w·[support]` and the support size.
fn loss_factors<T: Scalar>(
    weights: &Tensor<T>,
    support: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, usize)> {
    match support {
        None => Ok((weights.clone(), weights.len())),
        Some(s) => {
            weights.ensure_same_shape(s, "weighted_loss support")?;
            let count = s.data().iter().filter(|&&v| v != T::zero()).count();
            let factors = Tensor::from_fn(weights.shape().to_vec(), |i| {
                if s.data()[i] != T::zero() {
                    weights.data()[i]
                } else {
                    T::zero()
                }
            });
            Ok((factors, count))
        }
    }
}

/// Σ w·e over the support (whole image when `support` is `None`), optionally
/// divided by the support size. An empty support yields zero.
pub fn weighted_loss<T: Scalar>(
    errors: &ErrorMap<T>,
    weights: &WeightMap<T>,
    support: Option<&Tensor<T>>,
    form: LossForm,
) -> Result<T> {
    errors
        .values
        .ensure_same_shape(&weights.values, "weighted_loss")?;
    let (factors, count) = loss_factors(&weights.values, support)?;
    let total: T = errors
        .values
        .data()
        .iter()
        .zip(factors.data())
        .map(|(&e, &w)| e * w)
        .sum();
    Ok(match form {
        LossForm::Sum => total,
        LossForm::Mean if count == 0 => T::zero(),
        LossForm::Mean => total / T::of_usize(count),
    })
}

/// Tape version of [`weighted_loss`]; weights are constants, so gradients
/// flow only through the error node.
pub fn weighted_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    errors: Var,
    weights: &Tensor<T>,
    support: Option<&Tensor<T>>,
    form: LossForm,
) -> Result<Var> {
    let (factors, count) = loss_factors(weights, support)?;
    let weighted = g.mul_const(errors, &factors)?;
    let total = g.sum(weighted);
    Ok(match form {
        LossForm::Sum => total,
        LossForm::Mean => g.scale(total, T::one() / T::of_usize(count.max(1))),
    })
}

/// Row-major binary raster of `height × width` 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "binary mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Contract("binary mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }
}

/// Thresholded anomaly map together with the threshold that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub mask: BinaryMask,
    pub threshold_used: f64,
}

/// `A = [Ē ≥ θ]`, pixelwise.
pub fn binarize<T: Scalar>(errors: &ErrorMap<T>, threshold: T) -> AnomalyMap {
    let values = errors
        .values
        .data()
        .iter()
        .map(|&e| u8::from(e >= threshold))
        .collect();
    AnomalyMap {
        mask: BinaryMask {
            height: errors.height(),
            width: errors.width(),
            values,
        },
        threshold_used: threshold.to_f64_lossy(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emap(rows: usize, cols: usize, v: &[f64]) -> ErrorMap<f64> {
        ErrorMap::new(Tensor::new([rows, cols], v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn constant_errors_give_zero_weights() {
        let w = asl_weight_map(&emap(2, 2, &[1., 1., 1., 1.]), WeightScaling::Mean);
        assert_eq!(w.values.data(), &[0.0; 4]);
    }

    #[test]
    fn raw_weights_worked_example() {
        let w = asl_weight_map(&emap(2, 2, &[4., 1., 0., 3.]), WeightScaling::Raw);
        assert_eq!(w.values.data(), &[0., 3., 4., 1.]);
        let scaled = asl_weight_map(&emap(2, 2, &[4., 1., 0., 3.]), WeightScaling::Mean);
        assert_eq!(scaled.values.data(), &[0., 1.5, 2., 0.5]);
    }

    #[test]
    fn weighted_loss_examples() {
        let e = emap(2, 2, &[4., 1., 0., 3.]);
        let w = WeightMap {
            values: Tensor::new([2, 2], vec![0., 3., 4., 1.]).unwrap(),
            source_epoch: 0,
        };
        assert_eq!(weighted_loss(&e, &w, None, LossForm::Sum).unwrap(), 6.0);
        assert_eq!(weighted_loss(&e, &w, None, LossForm::Mean).unwrap(), 1.5);
        let zeros = WeightMap {
            values: Tensor::zeros([2, 2]),
            source_epoch: 0,
        };
        assert_eq!(weighted_loss(&e, &zeros, None, LossForm::Mean).unwrap(), 0.0);
        let ones = WeightMap {
            values: Tensor::ones([2, 2]),
            source_epoch: 0,
        };
        assert_eq!(weighted_loss(&e, &ones, None, LossForm::Mean).unwrap(), 2.0);
        let support = Tensor::new([2, 2], vec![1., 0., 0., 1.]).unwrap();
        assert_eq!(
            weighted_loss(&e, &ones, Some(&support), LossForm::Mean).unwrap(),
            3.5
        );
    }

    #[test]
    fn loss_gradient_equals_weight_over_support() {
        let e = Tensor::new([2, 2], vec![4., 1., 0., 3.]).unwrap().with_requires_grad(true);
        let w = Tensor::new([2, 2], vec![0., 3., 4., 1.]).unwrap();
        let mut g = Graph::new();
        let ev = g.leaf(e);
        let loss = weighted_loss_node(&mut g, ev, &w, None, LossForm::Mean).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(ev).unwrap(), &[0.0, 0.75, 1.0, 0.25]);
    }

    #[test]
    fn binarize_examples() {
        let e = emap(1, 2, &[0.1, 0.9]);
        assert_eq!(binarize(&e, 0.5).mask.values, vec![0, 1]);
        assert_eq!(binarize(&e, 0.0).mask.values, vec![1, 1]);
        assert_eq!(binarize(&e, 0.9f64.next_up()).mask.values, vec![0, 0]);
    }

    #[test]
    fn negative_errors_rejected() {
        assert!(ErrorMap::new(Tensor::new([1, 2], vec![0.1, -0.1]).unwrap()).is_err());
        assert!(ErrorMap::new(Tensor::new([1, 1], vec![f64::NAN]).unwrap()).is_err());
    }
}
