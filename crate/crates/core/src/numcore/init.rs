use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numcore::tensor::Tensor;
use crate::scalar::Scalar;

/// Normal(0, std) samples redrawn until they fall within two standard deviations.
pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_are_truncated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = truncated_normal(&[1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        assert!(t.mean().abs() < 0.005);
    }
}
