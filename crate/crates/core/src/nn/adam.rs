use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::NetParams;
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0 && unit(self.beta1) && unit(self.beta2) && self.epsilon > 0.0)
        {
            return config_err(format!("invalid Adam hyperparameters {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub first_moment: NetParams<S>,
    pub second_moment: NetParams<S>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &NetParams<S>, config: AdamConfig) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step_count: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<S: Scalar>(
    params: &mut NetParams<S>,
    grads: &NetParams<S>,
    state: &mut AdamState<S>,
) -> Result<()> {
    if grads.layers.len() != params.layers.len()
        || grads
            .layers
            .iter()
            .zip(&params.layers)
            .any(|(g, p)| g.weight.dim() != p.weight.dim() || g.bias.len() != p.bias.len())
    {
        return config_err("gradient shapes do not match parameters");
    }
    if let Some(layer) = grads
        .layers
        .iter()
        .position(|g| g.weight.iter().chain(g.bias.iter()).any(|v| !v.is_finite()))
    {
        return Err(Error::Numeric {
            layer,
            what: "non-finite gradient passed to Adam".into(),
        });
    }

    state.step_count += 1;
    let cfg = state.config;
    let t = state.step_count as i32;
    let b1 = S::of(cfg.beta1);
    let b2 = S::of(cfg.beta2);
    let one = S::one();
    let c1 = one / (one - S::of(cfg.beta1.powi(t)));
    let c2 = one / (one - S::of(cfg.beta2.powi(t)));
    let lr = S::of(cfg.learning_rate);
    let eps = S::of(cfg.epsilon);

    let update = |p: &mut S, m: &mut S, v: &mut S, g: S| {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m * c1;
        let v_hat = *v * c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for (l, (((p, g), m), v)) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first_moment.layers)
        .zip(&mut state.second_moment.layers)
        .enumerate()
    {
        Zip::from(&mut p.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .and(&g.weight)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut p.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        if p.weight.iter().chain(p.bias.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                layer: l,
                what: "non-finite parameter after Adam update".into(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetSpec;
    use rand::SeedableRng;

    fn scalar_param(x: f64) -> (NetSpec, NetParams<f64>) {
        // A 1x1 layer with zero bias: treat the weight as the single variable.
        let spec = NetSpec::new(1, &[], 1);
        let mut p = NetParams::zeros(&spec);
        p.layers[0].weight[[0, 0]] = x;
        (spec, p)
    }

    fn grad_of(spec: &NetSpec, g: f64) -> NetParams<f64> {
        let mut grads = NetParams::zeros(spec);
        grads.layers[0].weight[[0, 0]] = g;
        grads
    }

    #[test]
    fn zero_gradient_is_identity() {
        let spec = NetSpec::new(3, &[4], 2);
        let mut params = NetParams::<f64>::init(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(9));
        let before = params.clone();
        let mut state = AdamState::new(&params, AdamConfig::default());
        for _ in 0..10 {
            adam_step(&mut params, &before.zeros_like(), &mut state).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.step_count, 10);
    }

    #[test]
    fn constant_gradient_step_tends_to_learning_rate() {
        let (spec, mut p) = scalar_param(0.0);
        let mut state = AdamState::new(&p, AdamConfig::with_lr(1e-3));
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p.layers[0].weight[[0, 0]];
            adam_step(&mut p, &grad_of(&spec, 4.2), &mut state).unwrap();
            last = p.layers[0].weight[[0, 0]] - before;
        }
        assert!((last + 1e-3).abs() < 1e-9, "step {last}");
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        let (spec, mut p) = scalar_param(0.0);
        let mut state = AdamState::new(&p, AdamConfig::with_lr(1e-2));
        for _ in 0..10_000 {
            let x = p.layers[0].weight[[0, 0]];
            adam_step(&mut p, &grad_of(&spec, 2.0 * (x - 3.0)), &mut state).unwrap();
        }
        let x = p.layers[0].weight[[0, 0]];
        assert!((x - 3.0).abs() < 1e-3, "x = {x}");
        assert!(state.second_moment.layers[0].weight.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (spec, mut p) = scalar_param(1.0);
        let mut state = AdamState::new(&p, AdamConfig::default());
        let err = adam_step(&mut p, &grad_of(&spec, f64::NAN), &mut state).unwrap_err();
        assert!(matches!(err, Error::Numeric { layer: 0, .. }));
        assert_eq!(state.step_count, 0);
    }
}
