use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{EncodedExample, ParameterVector, QaModel};
use crate::error::{Error, Result};
use crate::seed::SeedStream;

/// How much local work one call to [`train_local`] performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalSteps {
    /// A fixed number of optimizer steps.
    Steps(usize),
    /// Full passes over the local data.
    Epochs(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_steps: LocalSteps,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 8,
            local_steps: LocalSteps::Steps(1),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("AdamW betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Number of optimizer steps for a local dataset of `n` examples.
    pub fn steps_for(&self, n: usize) -> usize {
        match self.local_steps {
            LocalSteps::Steps(s) => s,
            LocalSteps::Epochs(e) => e * n.div_ceil(self.batch_size),
        }
    }
}

/// AdamW with decoupled weight decay. Frozen coordinates are never touched.
#[derive(Debug, Clone)]
pub struct AdamW {
    hyper: TrainHyper,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    mask: Vec<bool>,
}

impl AdamW {
    pub fn new(hyper: TrainHyper, params: &ParameterVector) -> Self {
        let n = params.values.len();
        Self { hyper, m: vec![0.0; n], v: vec![0.0; n], t: 0, mask: params.layout.trainable_mask() }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let h = &self.hyper;
        self.t += 1;
        let bc1 = 1.0 - h.beta1.powi(self.t);
        let bc2 = 1.0 - h.beta2.powi(self.t);
        for i in 0..params.len() {
            if !self.mask[i] {
                continue;
            }
            let g = grad[i];
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g;
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= h.learning_rate * (mhat / (vhat.sqrt() + h.eps) + h.weight_decay * params[i]);
        }
    }
}

/// Runs local AdamW from `params` over shuffled mini-batches of `examples`,
/// with fresh optimizer state, and returns the trained copy.
pub fn train_local(
    model: &QaModel,
    params: &ParameterVector,
    examples: &[&EncodedExample],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<ParameterVector> {
    hyper.validate()?;
    if examples.is_empty() {
        return Err(Error::Input("train_local needs at least one example".into()));
    }
    let steps = hyper.steps_for(examples.len());
    let mut w = params.clone();
    if steps == 0 {
        return Ok(w);
    }
    let mut opt = AdamW::new(hyper.clone(), params);
    let mut rng = SeedStream::new(seed).child("minibatch").rng();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let bs = hyper.batch_size.min(examples.len());
    for step in 0..steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(examples[order[cursor]]);
            cursor += 1;
        }
        let (loss, grad) = model.loss_and_grad(&w, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at local step {step}")));
        }
        opt.step(&mut w.values, &grad);
    }
    if !w.is_finite() {
        return Err(Error::Diverged("non-finite parameters after local training".into()));
    }
    Ok(w)
}
