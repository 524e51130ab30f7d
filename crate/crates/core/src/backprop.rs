//! Reverse-mode gradients of the denoising loss for [`Denoiser`].
//!
//! Only the plain conditional pass is differentiated: training never runs the
//! cross-attention override.

use crate::denoiser::{Denoiser, DenoiserParams, OverrideSpec};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nt, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::text::TextEmbeddings;

fn rms_back<S: Scalar>(x: &[S], inv: &[S], dy: &[S], d: usize, dx: &mut [S]) {
    let dn = S::of(d as f64);
    for (((row, &r), g), out) in x.chunks(d).zip(inv).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
        let proj = crate::tensor::dot(row, g) / dn;
        let r3 = r * r * r;
        for ((o, &xv), &gv) in out.iter_mut().zip(row).zip(g) {
            *o += r * gv - r3 * xv * proj;
        }
    }
}

fn silu_grad<S: Scalar>(u: S) -> S {
    let s = S::one() / (S::one() + (-u).exp());
    s * (S::one() + u * (S::one() - s))
}

/// Gradients of a softmax attention with respect to its query, key and
/// value inputs, given the gradient of the mixed output.
#[allow(clippy::too_many_arguments)]
fn attention_back<S: Scalar>(
    weights: &[Vec<S>],
    q: &[S],
    k: &[S],
    v: &[S],
    dmixed: &[S],
    rows_q: usize,
    rows_k: usize,
    d: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let heads = weights.len();
    let dh = d / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut dq = vec![S::zero(); rows_q * d];
    let mut dk = vec![S::zero(); rows_k * d];
    let mut dv = vec![S::zero(); rows_k * d];
    let mut dscore = vec![S::zero(); rows_k];
    for (h, w) in weights.iter().enumerate() {
        let off = h * dh;
        for p in 0..rows_q {
            let g = &dmixed[p * d + off..p * d + off + dh];
            let wrow = &w[p * rows_k..(p + 1) * rows_k];
            let mut inner = S::zero();
            for i in 0..rows_k {
                let da = crate::tensor::dot(g, &v[i * d + off..i * d + off + dh]);
                dscore[i] = da;
                inner += wrow[i] * da;
                let a = wrow[i];
                for (dvj, &gj) in dv[i * d + off..i * d + off + dh].iter_mut().zip(g) {
                    *dvj += a * gj;
                }
            }
            for i in 0..rows_k {
                let ds = wrow[i] * (dscore[i] - inner) * scale;
                if ds == S::zero() {
                    continue;
                }
                for j in 0..dh {
                    dq[p * d + off + j] += ds * k[i * d + off + j];
                    dk[i * d + off + j] += ds * q[p * d + off + j];
                }
            }
        }
    }
    (dq, dk, dv)
}

fn col_sum_acc<S: Scalar>(x: &[S], cols: usize, out: &mut [S]) {
    for row in x.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

impl<S: Scalar> Denoiser<S> {
    /// Mean squared error between the predicted and true noise.
    pub fn loss(&self, z: &Tensor<S>, t: usize, c: &TextEmbeddings<S>, eps: &Tensor<S>) -> Result<S> {
        let pred = self.predict_score(z, t, c, OverrideSpec::disabled())?;
        let diff = pred.score.sub(eps)?;
        Ok(diff.sum_squares() / S::of(diff.len() as f64))
    }

    /// Adds `weight * ∂loss/∂θ` into `grads` and returns the loss.
    pub fn accumulate_gradient(&self, z: &Tensor<S>, t: usize, c: &TextEmbeddings<S>, eps: &Tensor<S>, weight: S, grads: &mut DenoiserParams<S>) -> Result<S> {
        if z.shape() != eps.shape() {
            return Err(dim_err!("latent {:?} and target {:?} differ", z.shape(), eps.shape()));
        }
        self.check_inputs(z, t, c)?;
        let (score, _, cache) = self.forward(z, t, c, OverrideSpec::disabled());
        let cfg = *self.config();
        let p = &self.params;
        let (np, d, ch, m) = (cfg.patches(), cfg.width, cfg.channels, cfg.mlp_hidden);
        let tokens = c.rows();
        let dt = c.dim();

        let n = S::of(score.len() as f64);
        let loss = score.sub(eps)?.sum_squares() / n;
        let k = S::of(2.0) * weight / n;
        let dout: Vec<S> = score.data().iter().zip(eps.data()).map(|(&a, &b)| k * (a - b)).collect();

        gemm_tn_acc(&cache.norm_out, &dout, grads.output.data_mut(), np, d, ch);
        col_sum_acc(&dout, ch, grads.output_bias.data_mut());
        let mut dnorm = vec![S::zero(); np * d];
        gemm_nt(&dout, p.output.data(), &mut dnorm, np, ch, d);
        let mut dh = vec![S::zero(); np * d];
        rms_back(&cache.last, &cache.inv_out, &dnorm, d, &mut dh);

        for ((b, bc), gb) in p.blocks.iter().zip(&cache.blocks).zip(grads.blocks.iter_mut()).rev() {
            // MLP
            gemm_tn_acc(&bc.act, &dh, gb.mlp_out.data_mut(), np, m, d);
            col_sum_acc(&dh, d, gb.mlp_out_bias.data_mut());
            let mut dact = vec![S::zero(); np * m];
            gemm_nt(&dh, b.mlp_out.data(), &mut dact, np, d, m);
            for (g, &u) in dact.iter_mut().zip(&bc.pre_act) {
                *g *= silu_grad(u);
            }
            gemm_tn_acc(&bc.norm3, &dact, gb.mlp_in.data_mut(), np, d, m);
            col_sum_acc(&dact, m, gb.mlp_in_bias.data_mut());
            let mut dn3 = vec![S::zero(); np * d];
            gemm_nt(&dact, b.mlp_in.data(), &mut dn3, np, m, d);
            rms_back(&bc.after_cross, &bc.inv3, &dn3, d, &mut dh);

            // cross-attention
            let cc = &bc.cross;
            gemm_tn_acc(&cc.mixed, &dh, gb.cross.output.data_mut(), np, d, d);
            let mut dmixed = vec![S::zero(); np * d];
            gemm_nt(&dh, b.cross.output.data(), &mut dmixed, np, d, d);
            let (dq, dk, dv) = attention_back(&cc.weights, &cc.query, &cc.key, &cc.value, &dmixed, np, tokens, d);
            gemm_tn_acc(&bc.norm2, &dq, gb.cross.query.data_mut(), np, d, d);
            gemm_tn_acc(c.vectors().data(), &dk, gb.cross.key.data_mut(), tokens, dt, d);
            gemm_tn_acc(c.vectors().data(), &dv, gb.cross.value.data_mut(), tokens, dt, d);
            let mut dn2 = vec![S::zero(); np * d];
            gemm_nt(&dq, b.cross.query.data(), &mut dn2, np, d, d);
            rms_back(&bc.after_self, &bc.inv2, &dn2, d, &mut dh);

            // self-attention
            gemm_tn_acc(&bc.self_mixed, &dh, gb.self_output.data_mut(), np, d, d);
            let mut dmixed = vec![S::zero(); np * d];
            gemm_nt(&dh, b.self_output.data(), &mut dmixed, np, d, d);
            let (dq, dk, dv) = attention_back(&bc.self_weights, &bc.query, &bc.key, &bc.value, &dmixed, np, np, d);
            gemm_tn_acc(&bc.norm1, &dq, gb.self_query.data_mut(), np, d, d);
            gemm_tn_acc(&bc.norm1, &dk, gb.self_key.data_mut(), np, d, d);
            gemm_tn_acc(&bc.norm1, &dv, gb.self_value.data_mut(), np, d, d);
            let mut dn1 = vec![S::zero(); np * d];
            gemm_nt(&dq, b.self_query.data(), &mut dn1, np, d, d);
            gemm_nt_acc(&dk, b.self_key.data(), &mut dn1, np, d, d);
            gemm_nt_acc(&dv, b.self_value.data(), &mut dn1, np, d, d);
            rms_back(&bc.input, &bc.inv1, &dn1, d, &mut dh);
        }

        gemm_tn_acc(z.data(), &dh, grads.input.data_mut(), np, ch, d);
        col_sum_acc(&dh, d, grads.input_bias.data_mut());
        for (g, &v) in grads.position.data_mut().iter_mut().zip(&dh) {
            *g += v;
        }
        col_sum_acc(&dh, d, grads.time.row_mut(t - 1));
        Ok(loss)
    }
}
