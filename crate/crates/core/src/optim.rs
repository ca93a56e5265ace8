//! Adam with parameter groups and decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning-rate multiplier for the embedding learners.
pub const LEARNER_LR_MULTIPLIER: f64 = 10.0;

/// A named set of tensors sharing a learning-rate multiplier.
pub struct ParamGroup<'a> {
    pub id: String,
    pub lr_multiplier: f64,
    pub tensors: Vec<(&'a str, &'a mut Tensor)>,
}

impl<'a> ParamGroup<'a> {
    pub fn new(id: impl Into<String>, lr_multiplier: f64) -> Self {
        ParamGroup { id: id.into(), lr_multiplier, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: &'a str, t: &'a mut Tensor) {
        self.tensors.push((name, t));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 2e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Moment buffers and step counter. Buffers are laid out group by group in
/// the order the groups and their tensors are passed to [`adam_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<Vec<Moments>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, moments: Vec::new() }
    }
}

/// One bias-corrected Adam update of every tensor in `groups`, then zeroes
/// the gradients.
///
/// The effective learning rate of a group is `lr * lr_multiplier`. Weight
/// decay is decoupled: it shrinks the weights directly and never enters the
/// moment estimates.
pub fn adam_step(groups: &mut [ParamGroup<'_>], state: &mut AdamState) -> Result<()> {
    for group in groups.iter() {
        if !(group.lr_multiplier > 0.0) {
            return Err(Error::Parameter(format!(
                "group `{}` has non-positive lr multiplier {}",
                group.id, group.lr_multiplier
            )));
        }
        if let Some((name, _)) = group.tensors.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::UnpopulatedGradient { name: name.to_string() });
        }
    }

    if state.moments.is_empty() {
        state.moments = groups
            .iter()
            .map(|g| {
                g.tensors
                    .iter()
                    .map(|(_, t)| Moments { first: vec![0.0; t.numel()], second: vec![0.0; t.numel()] })
                    .collect()
            })
            .collect();
    }
    let layout_ok = state.moments.len() == groups.len()
        && groups.iter().zip(&state.moments).all(|(g, m)| {
            g.tensors.len() == m.len() && g.tensors.iter().zip(m).all(|((_, t), mm)| t.numel() == mm.first.len())
        });
    if !layout_ok {
        return Err(Error::Parameter("parameter layout changed between Adam steps".into()));
    }

    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps, weight_decay } = state.config;
    let bias1 = 1.0 - beta1.powi(state.step as i32);
    let bias2 = 1.0 - beta2.powi(state.step as i32);

    for (group, moments) in groups.iter_mut().zip(state.moments.iter_mut()) {
        let step_lr = lr * group.lr_multiplier;
        for ((_, tensor), m) in group.tensors.iter_mut().zip(moments.iter_mut()) {
            let (values, grad) = tensor.value_and_grad_mut();
            let grad = grad.expect("checked above");
            for i in 0..values.len() {
                let g = grad[i];
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g;
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g * g;
                let m_hat = m.first[i] / bias1;
                let v_hat = m.second[i] / bias2;
                values[i] -= step_lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * values[i]);
                grad[i] = 0.0;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamConfig {
        AdamConfig { weight_decay: 0.0, ..AdamConfig::default() }
    }

    fn with_grad(value: f64, grad: f64) -> Tensor {
        let mut t = Tensor::scalar(value);
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = with_grad(0.75, 0.0);
        let mut state = AdamState::new(no_decay());
        let mut groups = vec![ParamGroup::new("backbone", 1.0)];
        groups[0].push("p", &mut p);
        adam_step(&mut groups, &mut state).unwrap();
        drop(groups);
        assert_eq!(p.item(), 0.75);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² at t = 1, so the update is lr · g / (|g| + eps).
        let mut p = with_grad(1.0, 1.0);
        let mut state = AdamState::new(no_decay());
        let mut groups = vec![ParamGroup::new("backbone", 1.0)];
        groups[0].push("p", &mut p);
        adam_step(&mut groups, &mut state).unwrap();
        drop(groups);
        let expected = 1.0 - 1e-5 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert_eq!(p.grad().unwrap(), &[0.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn learner_group_moves_ten_times_further() {
        let (mut a, mut b) = (with_grad(0.0, 0.3), with_grad(0.0, 0.3));
        let mut state = AdamState::new(no_decay());
        let mut groups = vec![ParamGroup::new("backbone", 1.0), ParamGroup::new("learners", LEARNER_LR_MULTIPLIER)];
        groups[0].push("a", &mut a);
        groups[1].push("b", &mut b);
        adam_step(&mut groups, &mut state).unwrap();
        drop(groups);
        assert!((b.item() / a.item() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_shrinks_weights_only() {
        let mut p = with_grad(2.0, 0.0);
        let mut state = AdamState::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        let mut groups = vec![ParamGroup::new("g", 1.0)];
        groups[0].push("p", &mut p);
        adam_step(&mut groups, &mut state).unwrap();
        drop(groups);
        assert!((p.item() - (2.0 - 0.1 * 2e-4 * 2.0)).abs() < 1e-15);
        assert!(state.moments[0][0].first[0] == 0.0 && state.moments[0][0].second[0] == 0.0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::scalar(1.0);
        let mut state = AdamState::new(no_decay());
        let mut groups = vec![ParamGroup::new("g", 1.0)];
        groups[0].push("weights", &mut p);
        let err = adam_step(&mut groups, &mut state).unwrap_err();
        assert!(matches!(err, Error::UnpopulatedGradient { ref name } if name == "weights"));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn deterministic_given_identical_inputs() {
        let run = || {
            let mut p = Tensor::vector(&[0.1, -0.2, 0.3]);
            let mut state = AdamState::new(AdamConfig::default());
            for k in 0..5 {
                p.accumulate_grad(&[0.5 - k as f64, 1.0, -0.25]).unwrap();
                let mut groups = vec![ParamGroup::new("g", 1.0)];
                groups[0].push("p", &mut p);
                adam_step(&mut groups, &mut state).unwrap();
            }
            (p, state)
        };
        let (p1, s1) = run();
        let (p2, s2) = run();
        assert_eq!(p1.data(), p2.data());
        assert_eq!(s1, s2);
        assert_eq!(s1.step, 5);
    }
}
