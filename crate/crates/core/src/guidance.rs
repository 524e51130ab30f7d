//! Score combination, local-semantic selection and the brute-force
//! global-semantic oracle.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, OverrideSpec};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::TextEmbeddings;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    ClassifierFree,
    SegmentationFree,
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceMode::ClassifierFree => "cfg",
            GuidanceMode::SegmentationFree => "segfree",
        })
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cfg" | "classifier_free" | "classifier-free" => Ok(GuidanceMode::ClassifierFree),
            "segfree" | "segmentation_free" | "segmentation-free" => Ok(GuidanceMode::SegmentationFree),
            other => Err(Error::Config(format!("unknown guidance mode {other:?}"))),
        }
    }
}

/// Guidance hyperparameters. `t_s` is the number of classifier-free
/// iterations run before switching to segmentation-free guidance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub w: f64,
    pub w_bar: f64,
    pub a: f64,
    pub t_s: usize,
    pub mode: GuidanceMode,
}

impl GuidanceConfig {
    /// Defaults for a `steps`-step sampler: w = 7.5, w̄ = 2.5, a = 10, t_s = T/2.
    pub fn for_steps(steps: usize) -> Self {
        Self { w: 7.5, w_bar: 2.5, a: 10.0, t_s: steps / 2, mode: GuidanceMode::SegmentationFree }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !nonneg(self.w) || !nonneg(self.w_bar) || !nonneg(self.a) {
            return Err(Error::Config(format!("w, w_bar and a must be finite and >= 0: {self:?}")));
        }
        if self.t_s > steps {
            return Err(Error::Config(format!("t_s = {} exceeds T = {steps}", self.t_s)));
        }
        Ok(())
    }

    /// Classifier-free while `t >= T - t_s`, so `t_s + 1` steps run
    /// classifier-free before the switch.
    pub fn mode_at(&self, t: usize, steps: usize) -> GuidanceMode {
        match self.mode {
            GuidanceMode::ClassifierFree => GuidanceMode::ClassifierFree,
            GuidanceMode::SegmentationFree if t + self.t_s >= steps => GuidanceMode::ClassifierFree,
            GuidanceMode::SegmentationFree => GuidanceMode::SegmentationFree,
        }
    }
}

fn affine<S: Scalar>(lead: &Tensor<S>, other: &Tensor<S>, k: S) -> Result<Tensor<S>> {
    if lead.shape() != other.shape() {
        return Err(dim_err!("scores {:?} and {:?} differ", lead.shape(), other.shape()));
    }
    // lead + k (lead - other): algebraically (1 + k) lead - k other, and
    // exactly `lead` whenever k = 0 or the inputs coincide.
    let data = lead.data().iter().zip(other.data()).map(|(&a, &b)| a + k * (a - b)).collect();
    Tensor::new(lead.shape().to_vec(), data)
}

/// `(1 + w) ε(z, c) − w ε(z, ∅)`.
pub fn classifier_free_combine<S: Scalar>(eps_cond: &Tensor<S>, eps_uncond: &Tensor<S>, w: S) -> Result<Tensor<S>> {
    affine(eps_cond, eps_uncond, w)
}

/// `(1 + w̄) ε(z, c) − w̄ ε̄(z, c)`.
pub fn segmentation_free_combine<S: Scalar>(eps_cond: &Tensor<S>, eps_bar: &Tensor<S>, w_bar: S) -> Result<Tensor<S>> {
    affine(eps_cond, eps_bar, w_bar)
}

/// Per-patch argmax over the non-BOS columns of a `P × (n+1)` weight matrix.
/// Ties go to the lowest token index.
pub fn local_semantics<S: Scalar>(weights: &Tensor<S>) -> Result<Vec<usize>> {
    if weights.rank() != 2 {
        return Err(dim_err!("expected a P x (n+1) matrix, got {:?}", weights.shape()));
    }
    if weights.cols() < 2 {
        return Err(Error::EmptyPrompt);
    }
    Ok((0..weights.rows())
        .map(|p| {
            let row = weights.row(p);
            let mut best = 1;
            for i in 2..row.len() {
                if row[i] > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Selected token per layer and patch. Indices are token positions in
/// `1..=n`; 0 (BOS) never appears.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticMap {
    pub layers: Vec<Vec<usize>>,
}

impl SemanticMap {
    pub fn new(layers: Vec<Vec<usize>>) -> Result<Self> {
        if layers.iter().flatten().any(|&s| s == 0) {
            return Err(Error::Domain("semantic map may not select BOS".into()));
        }
        Ok(Self { layers })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }
}

/// Result of the brute-force semantic oracle.
#[derive(Clone, Debug)]
pub struct OracleReport<S> {
    /// Winning token per patch.
    pub semantics: Vec<usize>,
    /// `P × n` per-patch score-difference norms, column `i-1` for token `i`.
    pub deltas: Tensor<S>,
}

impl<S: Scalar> OracleReport<S> {
    /// Fraction of patches where each layer's local semantic matches the oracle.
    pub fn agreement(&self, map: &SemanticMap) -> Vec<f64> {
        map.layers
            .iter()
            .map(|layer| {
                let hits = layer.iter().zip(&self.semantics).filter(|(a, b)| a == b).count();
                hits as f64 / self.semantics.len().max(1) as f64
            })
            .collect()
    }
}

/// Brute-force semantic assignment: one extra forward pass per token with its
/// embedding row dropped (remaining rows untouched), assigning each patch the
/// token whose removal moves that patch's score the most.
pub fn global_semantics_oracle<S: Scalar>(model: &Denoiser<S>, z: &Tensor<S>, t: usize, c: &TextEmbeddings<S>) -> Result<OracleReport<S>> {
    let n = c.content_len();
    if n == 0 {
        return Err(Error::EmptyPrompt);
    }
    let full = model.predict_score(z, t, c, OverrideSpec::disabled())?.score;
    let channels = *z.shape().last().unwrap_or(&1);
    let patches = full.len() / channels;
    let mut deltas = Tensor::zeros(&[patches, n]);
    for i in 1..=n {
        let reduced = model.predict_score(z, t, &c.without_row(i)?, OverrideSpec::disabled())?.score;
        for p in 0..patches {
            let a = &full.data()[p * channels..(p + 1) * channels];
            let b = &reduced.data()[p * channels..(p + 1) * channels];
            let norm = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<S>().sqrt();
            deltas.set(p, i - 1, norm);
        }
    }
    let semantics = (0..patches)
        .map(|p| {
            let row = deltas.row(p);
            let mut best = 0;
            for i in 1..n {
                if row[i] > row[best] {
                    best = i;
                }
            }
            best + 1
        })
        .collect();
    Ok(OracleReport { semantics, deltas })
}
