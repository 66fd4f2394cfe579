use super::{Gradients, MlpModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::invalid("adam betas must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::invalid("adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// Moment accumulators, flat in `MlpModel::parameters` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(model: &MlpModel, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let n = model.parameter_count();
        Ok(Self {
            config,
            step: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        })
    }
}

/// One bias-corrected Adam update of `model` in place.
pub fn adam_step(model: &mut MlpModel, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if state.first_moment.len() != model.parameter_count() {
        return Err(Error::DimensionMismatch {
            what: "adam state size",
            expected: model.parameter_count(),
            found: state.first_moment.len(),
        });
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let moments = state.first_moment.iter_mut().zip(state.second_moment.iter_mut());
    for ((p, &g), (m, v)) in model.parameters_mut().zip(grads.parameters()).zip(moments) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, Activation, LayerSpec};

    fn model() -> MlpModel {
        init_model(
            &[
                LayerSpec::new(3, 4, Activation::Relu),
                LayerSpec::new(4, 2, Activation::Identity),
            ],
            5,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = model();
        let before = m.clone();
        let mut state = AdamState::new(&m, AdamConfig::default()).unwrap();
        let g = Gradients::zeros(&m);
        adam_step(&mut m, &g, &mut state).unwrap();
        assert_eq!(m, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut m = model();
        let before = m.clone();
        let mut g = Gradients::zeros(&m);
        g.weights[0][0] = 3.7;
        g.biases[1][1] = -0.02;
        let mut state = AdamState::new(&m, AdamConfig::default()).unwrap();
        adam_step(&mut m, &g, &mut state).unwrap();
        // t = 1: m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps).
        let d0 = m.layers()[0].weights[0] - before.layers()[0].weights[0];
        let d1 = m.layers()[1].biases[1] - before.layers()[1].biases[1];
        assert!((d0 + 1e-3 * 3.7 / (3.7 + 1e-8)).abs() < 1e-15);
        assert!((d1 - 1e-3 * 0.02 / (0.02 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn trajectories_are_deterministic() {
        let run = || {
            let mut m = model();
            let mut g = Gradients::zeros(&m);
            g.weights[1].iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1 - 0.3);
            let mut state = AdamState::new(&m, AdamConfig::default()).unwrap();
            adam_step(&mut m, &g, &mut state).unwrap();
            adam_step(&mut m, &g, &mut state).unwrap();
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_betas() {
        let cfg = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(AdamState::new(&model(), cfg).is_err());
    }
}
