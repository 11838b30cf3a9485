//! Knee-point threshold on the sorted error distribution.
//!
//! Sorted ascending, per-pixel errors form an increasing convex curve: most
//! pixels sit on a flat floor and anomalies form a steep tail. Both axes are
//! normalised to [0,1]; the knee is the sample lying furthest below the chord
//! `y = x`, i.e. the arg-max of `x − y`, and the threshold is its value.

use crate::scalar::Scalar;

/// Minimum normalised chord distance for a knee to count.
pub const SENSITIVITY_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KneeThreshold<T> {
    /// Threshold value. For the fallback this is the maximum value.
    pub theta: T,
    /// Index of the knee in ascending order; `None` when the fallback fired.
    pub knee_index: Option<usize>,
}

impl<T: Scalar> KneeThreshold<T> {
    pub fn is_fallback(&self) -> bool {
        self.knee_index.is_none()
    }

    /// Value to binarize with. The fallback steps just past the maximum so the
    /// resulting anomaly map is empty under `Ē ≥ θ`.
    pub fn binarization_threshold(&self) -> T {
        if self.is_fallback() {
            self.theta.next_up()
        } else {
            self.theta
        }
    }
}

/// Normalised difference curve `x_i − y_i` over ascending `sorted` values.
pub fn difference_curve<T: Scalar>(sorted: &[T]) -> Vec<f64> {
    let n = sorted.len();
    let lo = sorted[0].to_f64_lossy();
    let hi = sorted[n - 1].to_f64_lossy();
    let range = hi - lo;
    sorted
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = i as f64 / (n - 1) as f64;
            let y = (v.to_f64_lossy() - lo) / range;
            x - y
        })
        .collect()
}

/// Knee threshold of `values` (any order, at least two entries).
///
/// Degenerate inputs (fewer than two values, constant values, a straight
/// ramp, or non-finite entries) fall back to `θ = max(values)`.
pub fn knee_threshold<T: Scalar>(values: &[T]) -> KneeThreshold<T> {
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    let fallback = KneeThreshold {
        theta: max,
        knee_index: None,
    };
    if values.len() < 2 || values.iter().any(|v| !v.is_finite()) {
        return fallback;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    if sorted[0] == sorted[sorted.len() - 1] {
        return fallback;
    }
    let diff = difference_curve(&sorted);
    let mut best = 0;
    for (i, &d) in diff.iter().enumerate() {
        if d > diff[best] {
            best = i;
        }
    }
    if diff[best] <= SENSITIVITY_FLOOR {
        return fallback;
    }
    KneeThreshold {
        theta: sorted[best],
        knee_index: Some(best),
    }
}
