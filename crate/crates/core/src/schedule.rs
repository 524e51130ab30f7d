//! Log-SNR noise schedule with forward noising and ancestral reverse steps.
//!
//! Steps are 1-based: `t = 1` is the least noisy, `t = T` the most. With
//! `λ_t` the log signal-to-noise ratio, `α_t² = sigmoid(λ_t)` and
//! `σ_t² = sigmoid(-λ_t)`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub lambda_max: f64,
    pub lambda_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 20, lambda_max: 10.0, lambda_min: -10.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<S> {
    lambda: Vec<S>,
    alpha: Vec<S>,
    sigma: Vec<S>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Linearly spaced log-SNR from `lambda_max` at `t = 1` to `lambda_min` at `t = T`.
pub fn make_schedule<S: Scalar>(steps: usize, lambda_max: f64, lambda_min: f64) -> Result<NoiseSchedule<S>> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(lambda_max > lambda_min) || !lambda_max.is_finite() || !lambda_min.is_finite() {
        return Err(Error::Config(format!(
            "log-SNR endpoints must be finite with lambda_max > lambda_min, got {lambda_max} and {lambda_min}"
        )));
    }
    let lambdas: Vec<f64> = if steps == 1 {
        vec![lambda_max]
    } else {
        let span = lambda_max - lambda_min;
        (0..steps).map(|i| lambda_max - span * i as f64 / (steps - 1) as f64).collect()
    };
    Ok(NoiseSchedule::from_lambdas(&lambdas))
}

impl<S: Scalar> NoiseSchedule<S> {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_schedule(cfg.steps, cfg.lambda_max, cfg.lambda_min)
    }

    fn from_lambdas(lambdas: &[f64]) -> Self {
        Self {
            lambda: lambdas.iter().map(|&l| S::of(l)).collect(),
            alpha: lambdas.iter().map(|&l| S::of(sigmoid(l).sqrt())).collect(),
            sigma: lambdas.iter().map(|&l| S::of(sigmoid(-l).sqrt())).collect(),
        }
    }

    /// T.
    pub fn steps(&self) -> usize {
        self.lambda.len()
    }

    pub fn lambda(&self, t: usize) -> S {
        self.lambda[t - 1]
    }

    pub fn alpha(&self, t: usize) -> S {
        self.alpha[t - 1]
    }

    pub fn sigma(&self, t: usize) -> S {
        self.sigma[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Forward process: `z_t = α_t x + σ_t ε`.
    pub fn add_noise(&self, x: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_step(t)?;
        x.lincomb(self.alpha(t), eps, self.sigma(t))
    }

    /// Clean-sample estimate `(z - σ_t ε) / α_t`.
    pub fn predict_x0(&self, z: &Tensor<S>, eps: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
        self.check_step(t)?;
        let inv = S::one() / self.alpha(t);
        z.lincomb(inv, eps, -self.sigma(t) * inv)
    }

    /// Mean coefficients `(on z, on x̂)` and variance of `q(z_{t-1} | z_t, x̂)`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(S, S, S)> {
        self.check_step(t)?;
        if t < 2 {
            return Err(Error::Domain("posterior step needs t >= 2; use final_step at t = 1".into()));
        }
        let s = t - 1;
        // σ²_{t|s} / σ_t² = 1 - exp(λ_t - λ_s), evaluated without cancellation.
        let r = -(self.lambda(t) - self.lambda(s)).exp_m1();
        let (a_t, a_s) = (self.alpha(t), self.alpha(s));
        let (v_t, v_s) = (self.sigma(t).powi(2), self.sigma(s).powi(2));
        let on_z = (a_t / a_s) * v_s / v_t;
        let on_x = a_s * r;
        let var = r * v_s;
        Ok((on_z, on_x, var))
    }

    /// Ancestral step `z_t → z_{t-1}`. `eta` scales the posterior standard
    /// deviation: 1 gives the lower-bound variance, 0 a deterministic step.
    pub fn posterior_step(&self, z: &Tensor<S>, eps: &Tensor<S>, t: usize, rng: &mut Rng, eta: S) -> Result<Tensor<S>> {
        if z.shape() != eps.shape() {
            return Err(dim_err!("latent {:?} and score {:?} differ", z.shape(), eps.shape()));
        }
        let (on_z, on_x, var) = self.posterior_coefficients(t)?;
        let x0 = self.predict_x0(z, eps, t)?;
        let mut out = z.lincomb(on_z, &x0, on_x)?;
        let std = var.sqrt() * eta;
        if std > S::zero() {
            let noise = rng.randn::<S>(z.shape());
            for (o, &n) in out.data_mut().iter_mut().zip(noise.data()) {
                *o += std * n;
            }
        }
        Ok(out)
    }

    /// Last reverse step: `z_0 = (z_1 - σ_1 ε̃) / α_1`.
    pub fn final_step(&self, z1: &Tensor<S>, eps: &Tensor<S>) -> Result<Tensor<S>> {
        if z1.shape() != eps.shape() {
            return Err(dim_err!("latent {:?} and score {:?} differ", z1.shape(), eps.shape()));
        }
        self.predict_x0(z1, eps, 1)
    }

    #[cfg(test)]
    pub(crate) fn with_first_sigma_zero(mut self) -> Self {
        self.sigma[0] = S::zero();
        self.alpha[0] = S::one();
        self
    }
}
