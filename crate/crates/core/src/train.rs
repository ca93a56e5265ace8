//! Balanced-batch training with the metric loss, activation decay, the
//! weight-orthogonality term and the adversarial diversity term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::cam::adversary_loss;
use crate::data::{sample_batch, Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{activation_decay, binomial_deviance, ntri_regularizer, total_loss, LossConfig, PairBatch};
use crate::model::{Model, ParamKind};
use crate::oam::DEFAULT_STEPS;
use crate::optim::{adam_step, AdamConfig, AdamState, ParamGroup, LEARNER_LR_MULTIPLIER};

/// Stream of the batch sampler, kept apart from parameter initialization.
const SAMPLER_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub learner_lr_multiplier: f64,
    pub weight_decay: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Random-walk steps `T` of object attention.
    pub walk_steps: usize,
    pub iterations: usize,
    /// Classes per batch, `m`.
    pub classes_per_batch: usize,
    /// Images per class, `k`.
    pub images_per_class: usize,
    pub seed: u64,
    /// Include the adversarial diversity term (only meaningful for `J ≥ 2`).
    pub adversary: bool,
    /// Include activation decay and the orthogonality term.
    pub activation_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        let adam = AdamConfig::default();
        TrainConfig {
            base_lr: adam.lr,
            learner_lr_multiplier: LEARNER_LR_MULTIPLIER,
            weight_decay: adam.weight_decay,
            lambda0: loss.lambda0,
            lambda1: loss.lambda1,
            lambda2: loss.lambda2,
            alpha: loss.alpha,
            beta: loss.beta,
            gamma_pos: loss.gamma_pos,
            gamma_neg: loss.gamma_neg,
            walk_steps: DEFAULT_STEPS,
            iterations: 1000,
            classes_per_batch: 4,
            images_per_class: 4,
            seed: 0,
            adversary: true,
            activation_decay: true,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma_pos: self.gamma_pos,
            gamma_neg: self.gamma_neg,
            lambda0: self.lambda0,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig { lr: self.base_lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch < 2 || self.images_per_class < 2 {
            return Err(Error::Parameter(format!(
                "batches need m ≥ 2 and k ≥ 2, got m={} k={}",
                self.classes_per_batch, self.images_per_class
            )));
        }
        let nonneg = [
            ("base_lr", self.base_lr),
            ("weight_decay", self.weight_decay),
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Parameter(format!("{name} must be finite and nonnegative, got {v}")));
        }
        let positive = [
            ("learner_lr_multiplier", self.learner_lr_multiplier),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma_pos", self.gamma_pos),
            ("gamma_neg", self.gamma_neg),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
        }
        Ok(())
    }
}

/// The four logged loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub metric: f64,
    pub act: f64,
    pub ntri: f64,
    pub adv: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.metric + self.act + self.ntri + self.adv
    }

    pub const CSV_HEADER: &'static str = "step,L_metric,L_act,L_ntri,L_adv";

    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{},{},{},{}", self.metric, self.act, self.ntri, self.adv)
    }
}

/// One forward and backward pass over `batch` followed by an Adam update
/// with the learners in the boosted group.
///
/// The adversary sees the learner outputs through frozen copies of the
/// learner matrices. Its reversed gradient therefore reaches the channel
/// attention, GNet and FNet but never the learners, which are trained by the
/// metric and decay terms alone.
///
/// A non-finite loss term aborts with [`Error::Divergence`] before any
/// parameter is touched.
pub fn train_step(model: &mut Model, batch: &Batch, cfg: &TrainConfig, optimizer: &mut AdamState) -> Result<LossComponents> {
    let pairs = PairBatch::new(&batch.labels)?;
    let loss_cfg = cfg.loss_config();
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let pass = model.forward(&mut g, &bound, &batch.images, cfg.walk_steps)?;
    let bank = pass.bank();

    let mut terms = vec![binomial_deviance(&mut g, &bank, &pairs, &loss_cfg)?];
    let mut parts = LossComponents::default();
    if cfg.activation_decay {
        terms.push(activation_decay(&mut g, &bank, &loss_cfg)?);
        let omegas = model.learner_vars(&bound);
        terms.push(ntri_regularizer(&mut g, &omegas, &loss_cfg)?);
    }
    let mut adv_terms = Vec::new();
    if cfg.adversary {
        for (i, scale) in pass.scales.iter().enumerate() {
            if let Some((l1, l2)) = model.adversary_vars(&bound, i) {
                let branches = model.frozen_learner_outputs(&mut g, i, scale)?;
                adv_terms.push(adversary_loss(&mut g, &branches, l1, l2, loss_cfg.lambda0, true)?);
            }
        }
    }
    parts.metric = g.value(terms[0]).item();
    if cfg.activation_decay {
        parts.act = g.value(terms[1]).item();
        parts.ntri = g.value(terms[2]).item();
    }
    parts.adv = adv_terms.iter().map(|&v| g.value(v).item()).sum();
    terms.extend(adv_terms);

    let step = optimizer.step as usize + 1;
    for (name, v) in [("L_metric", parts.metric), ("L_act", parts.act), ("L_ntri", parts.ntri), ("L_adv", parts.adv)] {
        if !v.is_finite() {
            return Err(Error::Divergence { step, detail: format!("{name} = {v}") });
        }
    }

    let loss = total_loss(&mut g, &terms)?;
    let grads = g.backward(loss)?;
    for (p, &v) in model.params_mut().iter_mut().zip(&bound.vars) {
        p.value.zero_grad();
        let grad = grads.get_or_zero(v, p.value.numel());
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step, detail: format!("non-finite gradient for {}", p.name) });
        }
        p.value.accumulate_grad(&grad)?;
    }

    let mut backbone = ParamGroup::new("backbone", 1.0);
    let mut learners = ParamGroup::new("learners", cfg.learner_lr_multiplier);
    for p in model.params_mut() {
        let group = if p.kind == ParamKind::Learner { &mut learners } else { &mut backbone };
        group.push(p.name.as_str(), &mut p.value);
    }
    adam_step(&mut [backbone, learners], optimizer)?;
    Ok(parts)
}

/// Trains `model` for `cfg.iterations` balanced batches drawn from `data`,
/// calling `on_step` after every step with its 1-based index and the updated
/// model. An error from `on_step` stops training.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossComponents, &Model) -> Result<()>,
) -> Result<AdamState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SAMPLER_STREAM);
    let mut optimizer = AdamState::new(cfg.adam_config());
    for step in 1..=cfg.iterations {
        let batch = sample_batch(data, cfg.classes_per_batch, cfg.images_per_class, &mut rng)?;
        let parts = train_step(model, &batch, cfg, &mut optimizer)?;
        on_step(step, &parts, model)?;
    }
    Ok(optimizer)
}
