//! Toy score network: a stack of transformer blocks over a patch grid.
//!
//! Each block is pre-norm self-attention, pre-norm cross-attention over the
//! prompt embeddings, and a SiLU MLP, all with residual connections. The
//! cross-attention exposes an override hook: the weight of each patch's most
//! attended non-BOS token is multiplied by `-a` after the softmax, without
//! renormalising the row. The token is picked on the fly from the weights of
//! the pass being computed, so an override at layer `l` shapes the weights
//! seen at layer `l + 1`.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::guidance::local_semantics;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{dot, gemm, gemm_acc, softmax_in_place, Tensor};
use crate::text::TextEmbeddings;

pub(crate) const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub text_dim: usize,
    /// Number of diffusion steps the time embedding covers.
    pub steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { grid_h: 8, grid_w: 8, channels: 8, width: 32, heads: 1, layers: 2, mlp_hidden: 64, text_dim: 32, steps: 20 }
    }
}

impl ModelConfig {
    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.grid_h, self.grid_w, self.channels, self.width, self.heads, self.layers, self.mlp_hidden, self.text_dim, self.steps];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        Ok(())
    }
}

/// Segmentation-free override applied inside every cross-attention module.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverrideSpec<S> {
    pub enabled: bool,
    pub scale: S,
}

impl<S: Scalar> OverrideSpec<S> {
    pub fn disabled() -> Self {
        Self { enabled: false, scale: S::zero() }
    }

    pub fn with_scale(scale: S) -> Result<Self> {
        if !(scale >= S::zero()) {
            return Err(Error::Config(format!("segmentation-free scale must be >= 0, got {scale}")));
        }
        Ok(Self { enabled: true, scale })
    }
}

/// Cross-attention weights captured at one layer, averaged over heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<S> {
    /// Post-softmax weights before any override, `P × (n+1)`.
    pub weights: Tensor<S>,
    /// Weights actually used to mix token values, when an override ran.
    pub applied: Option<Tensor<S>>,
    /// Selected token per patch, when an override ran.
    pub semantics: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Prediction<S> {
    pub score: Tensor<S>,
    pub records: Vec<AttentionRecord<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<S> {
    pub self_query: Tensor<S>,
    pub self_key: Tensor<S>,
    pub self_value: Tensor<S>,
    pub self_output: Tensor<S>,
    pub cross: CrossAttentionParams<S>,
    pub mlp_in: Tensor<S>,
    pub mlp_in_bias: Tensor<S>,
    pub mlp_out: Tensor<S>,
    pub mlp_out_bias: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionParams<S> {
    /// `width × width`
    pub query: Tensor<S>,
    /// `text_dim × width`
    pub key: Tensor<S>,
    /// `text_dim × width`
    pub value: Tensor<S>,
    /// `width × width`
    pub output: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<S> {
    pub input: Tensor<S>,
    pub input_bias: Tensor<S>,
    pub position: Tensor<S>,
    pub time: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub output: Tensor<S>,
    pub output_bias: Tensor<S>,
}

impl<S: Scalar> DenoiserParams<S> {
    pub fn init(cfg: &ModelConfig, rng: &Rng) -> Self {
        let mut label = 0u64;
        let mut draw = |shape: &[usize], std: f64| {
            label += 1;
            rng.substream(label).randn::<S>(shape).scale(S::of(std))
        };
        let (d, m, dt) = (cfg.width, cfg.mlp_hidden, cfg.text_dim);
        let inv_d = 1.0 / (d as f64).sqrt();
        let resid = inv_d / (2.0 * cfg.layers as f64).sqrt();
        let input = draw(&[cfg.channels, d], 1.0 / (cfg.channels as f64).sqrt());
        let position = draw(&[cfg.patches(), d], 0.5);
        let time = draw(&[cfg.steps, d], 0.5);
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams {
                self_query: draw(&[d, d], inv_d),
                self_key: draw(&[d, d], inv_d),
                self_value: draw(&[d, d], inv_d),
                self_output: draw(&[d, d], resid),
                cross: CrossAttentionParams {
                    query: draw(&[d, d], inv_d),
                    key: draw(&[dt, d], 1.0 / (dt as f64).sqrt()),
                    value: draw(&[dt, d], 1.0 / (dt as f64).sqrt()),
                    output: draw(&[d, d], resid),
                },
                mlp_in: draw(&[d, m], inv_d),
                mlp_in_bias: Tensor::zeros(&[m]),
                mlp_out: draw(&[m, d], resid * (d as f64 / m as f64).sqrt()),
                mlp_out_bias: Tensor::zeros(&[d]),
            })
            .collect();
        Self {
            input,
            input_bias: Tensor::zeros(&[d]),
            position,
            time,
            blocks,
            output: draw(&[d, cfg.channels], inv_d),
            output_bias: Tensor::zeros(&[cfg.channels]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("input".into(), &self.input),
            ("input_bias".into(), &self.input_bias),
            ("position".into(), &self.position),
            ("time".into(), &self.time),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block{l}.{s}");
            out.extend([
                (p("self_query"), &b.self_query),
                (p("self_key"), &b.self_key),
                (p("self_value"), &b.self_value),
                (p("self_output"), &b.self_output),
                (p("cross_query"), &b.cross.query),
                (p("cross_key"), &b.cross.key),
                (p("cross_value"), &b.cross.value),
                (p("cross_output"), &b.cross.output),
                (p("mlp_in"), &b.mlp_in),
                (p("mlp_in_bias"), &b.mlp_in_bias),
                (p("mlp_out"), &b.mlp_out),
                (p("mlp_out_bias"), &b.mlp_out_bias),
            ]);
        }
        out.push(("output".into(), &self.output));
        out.push(("output_bias".into(), &self.output_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.input, &mut self.input_bias, &mut self.position, &mut self.time];
        for b in &mut self.blocks {
            out.extend([
                &mut b.self_query,
                &mut b.self_key,
                &mut b.self_value,
                &mut b.self_output,
                &mut b.cross.query,
                &mut b.cross.key,
                &mut b.cross.value,
                &mut b.cross.output,
                &mut b.mlp_in,
                &mut b.mlp_in_bias,
                &mut b.mlp_out,
                &mut b.mlp_out_bias,
            ]);
        }
        out.push(&mut self.output);
        out.push(&mut self.output_bias);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = S::zero());
        }
        z
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += k * other`, tensor by tensor.
    pub fn add_scaled(&mut self, k: S, other: &Self) {
        let theirs: Vec<&Tensor<S>> = other.named_tensors().into_iter().map(|(_, t)| t).collect();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, &b) in mine.data_mut().iter_mut().zip(theirs.data()) {
                *a += k * b;
            }
        }
    }

    pub fn sum_squares(&self) -> S {
        self.named_tensors().iter().map(|(_, t)| t.sum_squares()).sum()
    }

    /// Rebuild from named tensors (checkpoint loading); shapes must match `cfg`.
    pub fn from_named(cfg: &ModelConfig, mut lookup: impl FnMut(&str) -> Option<Tensor<S>>) -> Result<Self> {
        let mut params = Self::init(cfg, &Rng::new(0, 0));
        let names: Vec<(String, Vec<usize>)> =
            params.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        for ((name, shape), slot) in names.into_iter().zip(params.tensors_mut()) {
            let t = lookup(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), shape)));
            }
            *slot = t;
        }
        Ok(params)
    }
}

/// Row-wise RMS normalisation without gain. Returns the normalised rows and
/// each row's reciprocal RMS.
pub(crate) fn rms_norm<S: Scalar>(x: &[S], d: usize) -> (Vec<S>, Vec<S>) {
    let mut y = vec![S::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.len() / d);
    let eps = S::of(RMS_EPS);
    let dn = S::of(d as f64);
    for (row, out) in x.chunks(d).zip(y.chunks_mut(d)) {
        let ms = dot(row, row) / dn;
        let r = S::one() / (ms + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = v * r;
        }
        inv.push(r);
    }
    (y, inv)
}

pub(crate) fn silu<S: Scalar>(u: S) -> S {
    u / (S::one() + (-u).exp())
}

/// Multi-head attention scores and softmax. Returns one `rows_q × rows_k`
/// weight buffer per head.
pub(crate) fn attention_weights<S: Scalar>(q: &[S], k: &[S], rows_q: usize, rows_k: usize, d: usize, heads: usize) -> Vec<Vec<S>> {
    let dh = d / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    (0..heads)
        .map(|h| {
            let off = h * dh;
            let mut w = vec![S::zero(); rows_q * rows_k];
            for p in 0..rows_q {
                let qp = &q[p * d + off..p * d + off + dh];
                let row = &mut w[p * rows_k..(p + 1) * rows_k];
                for (i, slot) in row.iter_mut().enumerate() {
                    *slot = dot(qp, &k[i * d + off..i * d + off + dh]) * scale;
                }
                softmax_in_place(row);
            }
            w
        })
        .collect()
}

/// Mix per-head values: `out[:, head] = weights_head · v[:, head]`.
pub(crate) fn attention_mix<S: Scalar>(weights: &[Vec<S>], v: &[S], rows_q: usize, rows_k: usize, d: usize) -> Vec<S> {
    let heads = weights.len();
    let dh = d / heads;
    let mut out = vec![S::zero(); rows_q * d];
    for (h, w) in weights.iter().enumerate() {
        let off = h * dh;
        for p in 0..rows_q {
            let orow = &mut out[p * d + off..p * d + off + dh];
            for i in 0..rows_k {
                let a = w[p * rows_k + i];
                if a == S::zero() {
                    continue;
                }
                for (o, &vv) in orow.iter_mut().zip(&v[i * d + off..i * d + off + dh]) {
                    *o += a * vv;
                }
            }
        }
    }
    out
}

pub(crate) fn head_average<S: Scalar>(weights: &[Vec<S>], rows: usize, cols: usize) -> Tensor<S> {
    let inv = S::one() / S::of(weights.len() as f64);
    let mut avg = vec![S::zero(); rows * cols];
    for w in weights {
        for (a, &x) in avg.iter_mut().zip(w) {
            *a += x;
        }
    }
    if weights.len() > 1 {
        avg.iter_mut().for_each(|a| *a *= inv);
    }
    Tensor::matrix(rows, cols, avg).expect("consistent attention shapes")
}

/// Output of one cross-attention module.
#[derive(Clone, Debug)]
pub struct CrossAttentionOutput<S> {
    /// Projected output, `P × width`, to be added to the residual stream.
    pub out: Tensor<S>,
    pub record: AttentionRecord<S>,
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct CrossCache<S> {
    pub query: Vec<S>,
    pub key: Vec<S>,
    pub value: Vec<S>,
    /// Per-head weights as used for mixing.
    pub weights: Vec<Vec<S>>,
    pub mixed: Vec<S>,
}

impl<S: Scalar> CrossAttentionParams<S> {
    /// Cross-attention of `patches` (`P × width`, already normalised) over the
    /// prompt embeddings, with the optional segmentation-free override.
    pub fn forward(&self, patches: &Tensor<S>, c: &TextEmbeddings<S>, heads: usize, ov: OverrideSpec<S>) -> Result<CrossAttentionOutput<S>> {
        let d = self.query.cols();
        if patches.rank() != 2 || patches.cols() != d || c.dim() != self.key.rows() {
            return Err(dim_err!("cross-attention got patches {:?} and text dim {}", patches.shape(), c.dim()));
        }
        let (out, record, _) = self.forward_cached(patches.data(), patches.rows(), c, heads, ov);
        Ok(CrossAttentionOutput { out: Tensor::matrix(patches.rows(), d, out)?, record })
    }

    pub(crate) fn forward_cached(&self, x: &[S], rows: usize, c: &TextEmbeddings<S>, heads: usize, ov: OverrideSpec<S>) -> (Vec<S>, AttentionRecord<S>, CrossCache<S>) {
        let d = self.query.cols();
        let tokens = c.rows();
        let dt = c.dim();
        let mut query = vec![S::zero(); rows * d];
        gemm(x, self.query.data(), &mut query, rows, d, d);
        let mut key = vec![S::zero(); tokens * d];
        gemm(c.vectors().data(), self.key.data(), &mut key, tokens, dt, d);
        let mut value = vec![S::zero(); tokens * d];
        gemm(c.vectors().data(), self.value.data(), &mut value, tokens, dt, d);

        let mut weights = attention_weights(&query, &key, rows, tokens, d, heads);
        let averaged = head_average(&weights, rows, tokens);
        let mut record = AttentionRecord { weights: averaged, applied: None, semantics: None };
        if ov.enabled && tokens > 1 {
            let picks = local_semantics(&record.weights).expect("prompt has non-BOS tokens");
            let factor = -ov.scale;
            for w in &mut weights {
                for (p, &s) in picks.iter().enumerate() {
                    w[p * tokens + s] *= factor;
                }
            }
            record.applied = Some(head_average(&weights, rows, tokens));
            record.semantics = Some(picks);
        }
        let mixed = attention_mix(&weights, &value, rows, tokens, d);
        let mut out = vec![S::zero(); rows * d];
        gemm(&mixed, self.output.data(), &mut out, rows, d, d);
        (out, record, CrossCache { query, key, value, weights, mixed })
    }
}

/// Intermediates of one block, kept for backprop.
#[derive(Clone, Debug)]
pub(crate) struct BlockCache<S> {
    pub input: Vec<S>,
    pub norm1: Vec<S>,
    pub inv1: Vec<S>,
    pub query: Vec<S>,
    pub key: Vec<S>,
    pub value: Vec<S>,
    pub self_weights: Vec<Vec<S>>,
    pub self_mixed: Vec<S>,
    pub after_self: Vec<S>,
    pub norm2: Vec<S>,
    pub inv2: Vec<S>,
    pub cross: CrossCache<S>,
    pub after_cross: Vec<S>,
    pub norm3: Vec<S>,
    pub inv3: Vec<S>,
    pub pre_act: Vec<S>,
    pub act: Vec<S>,
}

#[derive(Clone, Debug)]
pub(crate) struct ForwardCache<S> {
    pub blocks: Vec<BlockCache<S>>,
    pub last: Vec<S>,
    pub norm_out: Vec<S>,
    pub inv_out: Vec<S>,
}

/// The score network: configuration, parameters and a forward-pass counter.
#[derive(Debug)]
pub struct Denoiser<S> {
    config: ModelConfig,
    pub params: DenoiserParams<S>,
    passes: AtomicUsize,
}

impl<S: Scalar> Clone for Denoiser<S> {
    fn clone(&self) -> Self {
        Self { config: self.config, params: self.params.clone(), passes: AtomicUsize::new(self.passes()) }
    }
}

impl<S: Scalar> Denoiser<S> {
    pub fn new(config: ModelConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self::from_params(config, DenoiserParams::init(&config, rng)))
    }

    pub fn from_params(config: ModelConfig, params: DenoiserParams<S>) -> Self {
        Self { config, params, passes: AtomicUsize::new(0) }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Forward passes run since construction or the last reset.
    pub fn passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    pub(crate) fn check_inputs(&self, z: &Tensor<S>, t: usize, c: &TextEmbeddings<S>) -> Result<()> {
        let cfg = &self.config;
        if z.shape() != [cfg.grid_h, cfg.grid_w, cfg.channels] {
            return Err(dim_err!("latent shape {:?}, expected {:?}", z.shape(), [cfg.grid_h, cfg.grid_w, cfg.channels]));
        }
        if t == 0 || t > cfg.steps {
            return Err(Error::Domain(format!("step {t} outside 1..={}", cfg.steps)));
        }
        if c.dim() != cfg.text_dim {
            return Err(dim_err!("text dim {}, expected {}", c.dim(), cfg.text_dim));
        }
        Ok(())
    }

    /// Score estimate for `z` at step `t` given prompt embeddings `c`.
    ///
    /// With the override disabled this is the plain conditional score; with
    /// it enabled it is the segmentation-free counterpart used in guidance.
    pub fn predict_score(&self, z: &Tensor<S>, t: usize, c: &TextEmbeddings<S>, ov: OverrideSpec<S>) -> Result<Prediction<S>> {
        self.check_inputs(z, t, c)?;
        let (score, records, _) = self.forward(z, t, c, ov);
        Ok(Prediction { score, records })
    }

    pub(crate) fn forward(&self, z: &Tensor<S>, t: usize, c: &TextEmbeddings<S>, ov: OverrideSpec<S>) -> (Tensor<S>, Vec<AttentionRecord<S>>, ForwardCache<S>) {
        self.passes.fetch_add(1, Ordering::Relaxed);
        let cfg = &self.config;
        let p = &self.params;
        let (np, d, ch, m) = (cfg.patches(), cfg.width, cfg.channels, cfg.mlp_hidden);

        let mut h = vec![S::zero(); np * d];
        gemm(z.data(), p.input.data(), &mut h, np, ch, d);
        let time = p.time.row(t - 1);
        for (i, row) in h.chunks_mut(d).enumerate() {
            let pos = p.position.row(i);
            for j in 0..d {
                row[j] += p.input_bias.data()[j] + pos[j] + time[j];
            }
        }

        let mut records = Vec::with_capacity(cfg.layers);
        let mut caches = Vec::with_capacity(cfg.layers);
        for b in &p.blocks {
            let input = h.clone();

            let (norm1, inv1) = rms_norm(&h, d);
            let mut query = vec![S::zero(); np * d];
            let mut key = vec![S::zero(); np * d];
            let mut value = vec![S::zero(); np * d];
            gemm(&norm1, b.self_query.data(), &mut query, np, d, d);
            gemm(&norm1, b.self_key.data(), &mut key, np, d, d);
            gemm(&norm1, b.self_value.data(), &mut value, np, d, d);
            let self_weights = attention_weights(&query, &key, np, np, d, cfg.heads);
            let self_mixed = attention_mix(&self_weights, &value, np, np, d);
            gemm_acc(&self_mixed, b.self_output.data(), &mut h, np, d, d);
            let after_self = h.clone();

            let (norm2, inv2) = rms_norm(&h, d);
            let (cross_out, record, cross) = b.cross.forward_cached(&norm2, np, c, cfg.heads, ov);
            for (x, y) in h.iter_mut().zip(&cross_out) {
                *x += *y;
            }
            records.push(record);
            let after_cross = h.clone();

            let (norm3, inv3) = rms_norm(&h, d);
            let mut pre_act = vec![S::zero(); np * m];
            gemm(&norm3, b.mlp_in.data(), &mut pre_act, np, d, m);
            for row in pre_act.chunks_mut(m) {
                for (x, &bias) in row.iter_mut().zip(b.mlp_in_bias.data()) {
                    *x += bias;
                }
            }
            let act: Vec<S> = pre_act.iter().map(|&u| silu(u)).collect();
            gemm_acc(&act, b.mlp_out.data(), &mut h, np, m, d);
            for row in h.chunks_mut(d) {
                for (x, &bias) in row.iter_mut().zip(b.mlp_out_bias.data()) {
                    *x += bias;
                }
            }

            caches.push(BlockCache {
                input,
                norm1,
                inv1,
                query,
                key,
                value,
                self_weights,
                self_mixed,
                after_self,
                norm2,
                inv2,
                cross,
                after_cross,
                norm3,
                inv3,
                pre_act,
                act,
            });
        }

        let (norm_out, inv_out) = rms_norm(&h, d);
        let mut out = vec![S::zero(); np * ch];
        gemm(&norm_out, p.output.data(), &mut out, np, d, ch);
        for row in out.chunks_mut(ch) {
            for (x, &bias) in row.iter_mut().zip(p.output_bias.data()) {
                *x += bias;
            }
        }
        let score = Tensor::new(z.shape().to_vec(), out).expect("output matches latent shape");
        (score, records, ForwardCache { blocks: caches, last: h, norm_out, inv_out })
    }
}
