use crate::error::{Error, Result};
use crate::numcore::param::ParamStore;
use crate::scalar::Scalar;

/// AdamW hyperparameters and the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                problems.push(format!("{name} must lie in (0,1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            problems.push(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// One AdamW update over every parameter that has a gradient.
///
/// Decay is decoupled: `p -= lr * wd * p` before the bias-corrected Adam step.
pub fn adamw_step<T: Scalar>(params: &mut ParamStore<T>, cfg: &mut OptimConfig) {
    cfg.step_count += 1;
    let t = cfg.step_count as i32;
    let lr = T::of(cfg.learning_rate);
    let wd = T::of(cfg.weight_decay);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let eps = T::of(cfg.epsilon);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for p in params.iter_mut() {
        let Some(grad) = p.tensor.grad().map(<[T]>::to_vec) else {
            continue;
        };
        let decay = p.decay;
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            if decay {
                data[i] -= lr * wd * data[i];
            }
            let m = b1 * p.first_moment[i] + (T::one() - b1) * g;
            let v = b2 * p.second_moment[i] + (T::one() - b2) * g * g;
            p.first_moment[i] = m;
            p.second_moment[i] = v;
            let m_hat = m / c1;
            let v_hat = v / c2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Graph, Parameter, Tensor};

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add(Parameter::new("p", Tensor::new([1], vec![v]).unwrap(), true))
            .unwrap();
        s
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut s = scalar_store(1.5);
        let id = s.id_of("p").unwrap();
        s.accumulate_grad(id, &[0.0], 1.0);
        let mut cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &mut cfg);
        assert_eq!(s.get(id).tensor.data(), &[1.5]);
        assert_eq!(cfg.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // step 1: m_hat = g, v_hat = g^2, so p -= lr * g / (|g| + eps)
        let mut s = scalar_store(1.0);
        let id = s.id_of("p").unwrap();
        s.accumulate_grad(id, &[1.0], 1.0);
        let mut cfg = OptimConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &mut cfg);
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.get(id).tensor.data()[0] - expected).abs() < 1e-15);
        assert!((s.get(id).tensor.data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut s = scalar_store(0.0);
        let id = s.id_of("p").unwrap();
        let mut cfg = OptimConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..200 {
            s.zero_grad();
            let mut g = Graph::new();
            let p = g.param(&s, id);
            let three = g.constant(Tensor::new([1], vec![3.0]).unwrap());
            let d = g.sub(p, three).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap();
            g.accumulate_into(&mut s, 1.0);
            adamw_step(&mut s, &mut cfg);
        }
        assert!((s.get(id).tensor.data()[0] - 3.0).abs() < 0.1);
    }

    #[test]
    fn validation_lists_all_problems() {
        let cfg = OptimConfig {
            learning_rate: 0.0,
            beta1: 1.0,
            epsilon: 0.0,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
