use std::collections::BTreeMap;

use super::TrainError;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.beta1) || !open(self.beta2) {
            return Err(TrainError::Config(format!(
                "beta1 and beta2 must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(TrainError::Config(format!("adam epsilon must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates per named parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState<T> {
    /// Number of applied updates.
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState {
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update. A parameter without a gradient entry is
/// treated as having zero gradient. If any gradient is non-finite, nothing is
/// modified and the offending parameter is reported.
pub fn adam_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { param: name.clone() });
    }
    let params: Vec<_> = params.into_iter().collect();
    for (name, p) in &params {
        if let Some(g) = grads.get(*name) {
            if g.shape() != p.shape() {
                return Err(TrainError::Config(format!(
                    "gradient of `{name}` has shape {}, parameter has {}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params {
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name);
        for i in 0..p.data().len() {
            let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
            let mi = cfg.beta1 * m.data()[i].as_f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = T::of(mi);
            v.data_mut()[i] = T::of(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            if update != 0.0 {
                p.data_mut()[i] = T::of(p.data()[i].as_f64() - update);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(x: &mut Tensor<f64>, g: f64, state: &mut OptimizerState<f64>, lr: f64) {
        let grads = BTreeMap::from([("x".to_string(), Tensor::scalar(g))]);
        adam_step([("x", x)], &grads, state, lr, &AdamConfig::default()).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut x = Tensor::scalar(1.25);
        let mut s = OptimizerState::new();
        for _ in 0..3 {
            scalar_step(&mut x, 0.0, &mut s, 0.1);
        }
        assert_eq!(x.data()[0], 1.25);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn first_step_closed_form() {
        let mut x = Tensor::scalar(0.0);
        let mut s = OptimizerState::new();
        scalar_step(&mut x, 1.0, &mut s, 0.1);
        assert!((x.data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut x = Tensor::scalar(0.0);
        let mut s = OptimizerState::new();
        for _ in 0..200 {
            let g = 2.0 * (x.data()[0] - 3.0);
            scalar_step(&mut x, g, &mut s, 0.05);
        }
        assert!((x.data()[0] - 3.0).abs() < 0.1, "x = {}", x.data()[0]);
    }

    #[test]
    fn non_finite_gradient_rejects_whole_step() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(2.0);
        let mut s = OptimizerState::new();
        let grads = BTreeMap::from([("a".to_string(), Tensor::scalar(1.0)), ("b".to_string(), Tensor::scalar(f64::NAN))]);
        let err = adam_step([("a", &mut a), ("b", &mut b)], &grads, &mut s, 0.1, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { ref param } if param == "b"));
        assert_eq!((a.data()[0], b.data()[0], s.step), (1.0, 2.0, 0));
    }
}
