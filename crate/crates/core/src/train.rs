//! Denoising-objective training with conditioning dropout and plain SGD.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::text::{encode, null_embeddings, tokenize, EncoderParams, TextEmbeddings};
use crate::world::ToyScene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the prompt by the empty prompt.
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 8000, batch: 8, lr: 0.1, dropout: 0.1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1]", self.dropout)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Encoded training pair.
#[derive(Clone, Debug)]
pub struct Example<S> {
    pub latent: Tensor<S>,
    pub cond: TextEmbeddings<S>,
}

pub fn encode_dataset<S: Scalar>(scenes: &[ToyScene<S>], encoder: &EncoderParams<S>) -> Vec<Example<S>> {
    scenes.iter().map(|s| Example { latent: s.latent.clone(), cond: encode(&tokenize(&s.prompt), encoder) }).collect()
}

/// Per-step mean minibatch loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of the last `k` step losses.
    pub fn running_loss(&self, k: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(k)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Train `model` in place. `on_step(step, model, loss)` runs after every
/// update, `step` counting from 1.
pub fn train_with<S: Scalar>(
    model: &mut Denoiser<S>,
    encoder: &EncoderParams<S>,
    dataset: &[ToyScene<S>],
    tc: &TrainConfig,
    sched: &NoiseSchedule<S>,
    rng: &mut Rng,
    mut on_step: impl FnMut(usize, &Denoiser<S>, f64),
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::InsufficientData("training needs at least one scene".into()));
    }
    tc.validate()?;
    let examples = encode_dataset(dataset, encoder);
    let null = null_embeddings(encoder);
    let steps = sched.steps();
    let weight = S::one() / S::of(tc.batch as f64);
    let mut report = TrainReport { losses: Vec::with_capacity(tc.steps) };
    let mut grads = model.params.zeros_like();
    for step in 1..=tc.steps {
        grads.tensors_mut().into_iter().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x = S::zero()));
        let mut loss = S::zero();
        for _ in 0..tc.batch {
            let ex = &examples[rng.below(examples.len())];
            let t = 1 + rng.below(steps);
            let eps = rng.randn::<S>(ex.latent.shape());
            let z = sched.add_noise(&ex.latent, t, &eps)?;
            let cond = if rng.bernoulli(tc.dropout) { &null } else { &ex.cond };
            loss += model.accumulate_gradient(&z, t, cond, &eps, weight, &mut grads)? * weight;
        }
        model.params.add_scaled(-S::of(tc.lr), &grads);
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Domain(format!("training diverged at step {step}")));
        }
        report.losses.push(loss);
        on_step(step, model, loss);
    }
    Ok(report)
}

pub fn train<S: Scalar>(
    model: &mut Denoiser<S>,
    encoder: &EncoderParams<S>,
    dataset: &[ToyScene<S>],
    tc: &TrainConfig,
    sched: &NoiseSchedule<S>,
    rng: &mut Rng,
) -> Result<TrainReport> {
    train_with(model, encoder, dataset, tc, sched, rng, |_, _, _| {})
}

/// Fixed noised examples for comparing losses across training.
#[derive(Clone, Debug)]
pub struct EvalBatch<S> {
    items: Vec<(Tensor<S>, usize, TextEmbeddings<S>, Tensor<S>)>,
}

impl<S: Scalar> EvalBatch<S> {
    pub fn new(dataset: &[ToyScene<S>], encoder: &EncoderParams<S>, size: usize, sched: &NoiseSchedule<S>, rng: &mut Rng) -> Result<Self> {
        if dataset.is_empty() || size == 0 {
            return Err(Error::InsufficientData("evaluation batch needs scenes".into()));
        }
        let examples = encode_dataset(dataset, encoder);
        let items = (0..size)
            .map(|_| {
                let ex = &examples[rng.below(examples.len())];
                let t = 1 + rng.below(sched.steps());
                let eps = rng.randn::<S>(ex.latent.shape());
                Ok((sched.add_noise(&ex.latent, t, &eps)?, t, ex.cond.clone(), eps))
            })
            .collect::<Result<_>>()?;
        Ok(Self { items })
    }

    pub fn loss(&self, model: &Denoiser<S>) -> Result<f64> {
        let mut total = 0.0;
        for (z, t, c, eps) in &self.items {
            total += model.loss(z, *t, c, eps)?.as_f64();
        }
        Ok(total / self.items.len() as f64)
    }
}

/// Largest relative error between the analytic gradient and central
/// differences over `count` randomly chosen parameter entries.
pub fn gradient_check(model: &Denoiser<f64>, c: &TextEmbeddings<f64>, count: usize, h: f64, rng: &mut Rng) -> Result<f64> {
    let shape = [model.config().grid_h, model.config().grid_w, model.config().channels];
    let t = 1 + rng.below(model.config().steps);
    let x0 = rng.randn::<f64>(&shape);
    let eps = rng.randn::<f64>(&shape);
    let z = x0.scale(0.8).add(&eps.scale(0.6))?;

    let mut grads = model.params.zeros_like();
    model.accumulate_gradient(&z, t, c, &eps, 1.0, &mut grads)?;
    let analytic: Vec<Vec<f64>> = grads.tensors_mut().into_iter().map(|g| g.data().to_vec()).collect();

    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let ti = rng.below(analytic.len());
        let ei = rng.below(analytic[ti].len());
        let original = probe.params.tensors_mut()[ti].data()[ei];
        probe.params.tensors_mut()[ti].data_mut()[ei] = original + h;
        let up = probe.loss(&z, t, c, &eps)?;
        probe.params.tensors_mut()[ti].data_mut()[ei] = original - h;
        let down = probe.loss(&z, t, c, &eps)?;
        probe.params.tensors_mut()[ti].data_mut()[ei] = original;
        let fd = (up - down) / (2.0 * h);
        let g = analytic[ti][ei];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    Ok(worst)
}
