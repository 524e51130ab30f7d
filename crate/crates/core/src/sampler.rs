//! Ancestral sampling with the classifier-free to segmentation-free switch.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionRecord, Denoiser, OverrideSpec};
use crate::error::{dim_err, Result};
use crate::guidance::{classifier_free_combine, local_semantics, segmentation_free_combine, GuidanceConfig, GuidanceMode, SemanticMap};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::text::TextEmbeddings;

/// One reverse step. Serialized as a JSON line with fields in this order:
/// `t`, `mode`, `lambda`, `eps_norm`, `passes`, `semantic_map`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub mode: GuidanceMode,
    pub lambda: f64,
    /// Norm of the guided score.
    pub eps_norm: f64,
    /// Denoiser forward passes spent on this step.
    pub passes: usize,
    /// Local semantics per layer: from the override pass on segmentation-free
    /// steps, from the conditional pass otherwise. Absent for empty prompts.
    pub semantic_map: Option<SemanticMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    /// Steps in execution order, `t = T` first.
    pub steps: Vec<TraceStep>,
}

impl SampleTrace {
    pub fn modes(&self) -> Vec<GuidanceMode> {
        self.steps.iter().map(|s| s.mode).collect()
    }

    /// Semantic map recorded at the last step (`t = 1`).
    pub fn final_map(&self) -> Option<&SemanticMap> {
        self.steps.last().and_then(|s| s.semantic_map.as_ref())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for step in &self.steps {
            let line = serde_json::to_string(step).map_err(|e| crate::Error::Format(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let steps = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| crate::Error::Format(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { steps })
    }
}

/// Per-layer local semantics from a pass's attention records; `None` for an
/// empty prompt.
pub fn semantic_map_of<S: Scalar>(records: &[AttentionRecord<S>]) -> Option<SemanticMap> {
    let layers = records
        .iter()
        .map(|r| r.semantics.clone().map_or_else(|| local_semantics(&r.weights).ok(), Some))
        .collect::<Option<Vec<_>>>()?;
    SemanticMap::new(layers).ok()
}

/// Guided score for one step in the given mode. Always two denoiser passes:
/// conditional plus either the negative-prompt pass or the override pass.
pub fn guided_score<S: Scalar>(
    model: &Denoiser<S>,
    z: &Tensor<S>,
    t: usize,
    c: &TextEmbeddings<S>,
    neg: &TextEmbeddings<S>,
    cfg: &GuidanceConfig,
    mode: GuidanceMode,
) -> Result<(Tensor<S>, Option<SemanticMap>)> {
    let cond = model.predict_score(z, t, c, OverrideSpec::disabled())?;
    match mode {
        GuidanceMode::ClassifierFree => {
            let uncond = model.predict_score(z, t, neg, OverrideSpec::disabled())?;
            let eps = classifier_free_combine(&cond.score, &uncond.score, S::of(cfg.w))?;
            Ok((eps, semantic_map_of(&cond.records)))
        }
        GuidanceMode::SegmentationFree => {
            let bar = model.predict_score(z, t, c, OverrideSpec::with_scale(S::of(cfg.a))?)?;
            let eps = segmentation_free_combine(&cond.score, &bar.score, S::of(cfg.w_bar))?;
            Ok((eps, semantic_map_of(&bar.records)))
        }
    }
}

/// Draw `z_T ~ N(0, I)` and run the reverse process down to `z_0`.
///
/// Steps with `t >= T - t_s` use classifier-free guidance against `neg`; the
/// rest use segmentation-free guidance. A prompt with no tokens besides BOS
/// runs classifier-free throughout.
pub fn sample<S: Scalar>(
    model: &Denoiser<S>,
    c: &TextEmbeddings<S>,
    neg: &TextEmbeddings<S>,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule<S>,
    rng: &mut Rng,
) -> Result<(Tensor<S>, SampleTrace)> {
    sample_observed(model, c, neg, cfg, sched, rng, |_, _| {})
}

/// [`sample`] calling `observe(t, z_t)` before each reverse step.
pub fn sample_observed<S: Scalar>(
    model: &Denoiser<S>,
    c: &TextEmbeddings<S>,
    neg: &TextEmbeddings<S>,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule<S>,
    rng: &mut Rng,
    mut observe: impl FnMut(usize, &Tensor<S>),
) -> Result<(Tensor<S>, SampleTrace)> {
    let steps = sched.steps();
    cfg.validate(steps)?;
    let mc = model.config();
    if mc.steps != steps {
        return Err(dim_err!("model trained for {} steps, schedule has {steps}", mc.steps));
    }
    let mut z = rng.randn::<S>(&[mc.grid_h, mc.grid_w, mc.channels]);
    let mut trace = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        let mode = if c.content_len() == 0 { GuidanceMode::ClassifierFree } else { cfg.mode_at(t, steps) };
        observe(t, &z);
        let before = model.passes();
        let (eps, semantic_map) = guided_score(model, &z, t, c, neg, cfg, mode)?;
        trace.push(TraceStep {
            t,
            mode,
            lambda: sched.lambda(t).as_f64(),
            eps_norm: eps.norm().as_f64(),
            passes: model.passes() - before,
            semantic_map,
        });
        z = if t > 1 { sched.posterior_step(&z, &eps, t, rng, S::one())? } else { sched.final_step(&z, &eps)? };
    }
    Ok((z, SampleTrace { steps: trace }))
}
