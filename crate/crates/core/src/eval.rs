//! Evaluation tooling: Fréchet distance between embedding sets, the
//! diversity-versus-size curve, percentile-band prompt selection, a toy
//! image–prompt alignment score and the per-step cost benchmark.

use std::io::{BufRead, Write};
use std::time::Instant;

use crate::denoiser::Denoiser;
use crate::error::{dim_err, Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::linalg::{mean_cov, sqrtm_spd, symmetric_eigen, symmetrize};
use crate::rng::Rng;
use crate::sampler::guided_score;
use crate::scalar::Scalar;
use crate::tensor::{matmul, Tensor};
use crate::text::{encode, tokenize, EncoderParams, TextEmbeddings};
use crate::world::{gen_dataset, Grammar, COLORS, SHAPES};

/// `N × d` embeddings with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<S> {
    data: Tensor<S>,
    labels: Vec<String>,
}

impl<S: Scalar> EmbeddingSet<S> {
    pub fn new(data: Tensor<S>, labels: Vec<String>) -> Result<Self> {
        if data.rank() != 2 {
            return Err(dim_err!("embeddings must be a matrix, got {:?}", data.shape()));
        }
        if labels.len() != data.rows() {
            return Err(dim_err!("{} labels for {} rows", labels.len(), data.rows()));
        }
        Ok(Self { data, labels })
    }

    /// Rows labelled by their index.
    pub fn unlabelled(data: Tensor<S>) -> Result<Self> {
        let n = if data.rank() == 2 { data.rows() } else { 0 };
        Self::new(data, (0..n).map(|i| i.to_string()).collect())
    }

    pub fn data(&self) -> &Tensor<S> {
        &self.data
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(dim_err!("row {i} out of range for {} rows", self.len()));
            }
            data.extend_from_slice(self.data.row(i));
            labels.push(self.labels[i].clone());
        }
        Self::new(Tensor::matrix(indices.len(), d, data)?, labels)
    }

    /// Pooled prompt embeddings, labelled by prompt.
    pub fn from_prompts(prompts: &[String], encoder: &EncoderParams<S>) -> Result<Self> {
        let rows: Vec<Vec<S>> = prompts.iter().map(|p| encode(&tokenize(p), encoder).pooled()).collect();
        Self::new(Tensor::from_rows(&rows)?, prompts.to_vec())
    }

    /// CSV with one row per embedding: `label,v1,...,vd`. Lines starting
    /// with `#` are skipped.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (no, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split(',');
            labels.push(fields.next().unwrap_or_default().to_string());
            let row = fields
                .map(|f| f.trim().parse::<f64>().map(S::of).map_err(|e| Error::Format(format!("line {}: {e}", no + 1))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::InsufficientData("embedding file has no rows".into()));
        }
        Self::new(Tensor::from_rows(&rows)?, labels)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, label) in self.labels.iter().enumerate() {
            write!(out, "{label}")?;
            for v in self.data.row(i) {
                write!(out, ",{}", v.as_f64())?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Squared Fréchet distance between Gaussian fits of two embedding sets,
/// `|μa − μb|² + tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`.
pub fn frechet<S: Scalar>(a: &EmbeddingSet<S>, b: &EmbeddingSet<S>) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(dim_err!("embedding dims {} and {} differ", a.dim(), b.dim()));
    }
    let (mu_a, cov_a) = mean_cov(a.data())?;
    let (mu_b, cov_b) = mean_cov(b.data())?;
    let shift: S = mu_a.iter().zip(&mu_b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    let root_a = sqrtm_spd(&cov_a)?;
    let mut inner = matmul(&matmul(&root_a, &cov_b)?, &root_a)?;
    symmetrize(&mut inner);
    let cross = sqrtm_spd(&inner)?.trace()?;
    let d = shift + cov_a.trace()? + cov_b.trace()? - S::of(2.0) * cross;
    Ok(d.max(S::zero()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub size: usize,
    pub mean: f64,
    pub std: f64,
}

/// Fréchet distance from random subsets to the full set, `trials` draws per
/// size. Trial `k` of size index `i` uses substream `i * trials + k`.
pub fn diversity_curve<S: Scalar>(set: &EmbeddingSet<S>, sizes: &[usize], trials: usize, rng: &Rng) -> Result<Vec<CurvePoint>> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    if let Some(&big) = sizes.iter().find(|&&s| s > set.len()) {
        return Err(Error::InsufficientData(format!("subset size {big} exceeds {} rows", set.len())));
    }
    sizes
        .iter()
        .enumerate()
        .map(|(i, &size)| {
            let dists = (0..trials)
                .map(|k| {
                    let mut r = rng.substream((i * trials + k) as u64);
                    let picked = set.subset(&r.sample_indices(set.len(), size))?;
                    Ok(frechet(&picked, set)?.as_f64())
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = dists.iter().sum::<f64>() / trials as f64;
            let std = if trials > 1 { (dists.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt() } else { 0.0 };
            Ok(CurvePoint { size, mean, std })
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(points: &[CurvePoint], mut out: W) -> Result<()> {
    writeln!(out, "size,mean,std")?;
    for p in points {
        writeln!(out, "{},{},{}", p.size, p.mean, p.std)?;
    }
    Ok(())
}

/// Frozen linear embedder mapping images and prompts into a shared concept
/// space with one axis per color and per shape.
///
/// The image side averages the latent over patches and projects onto the
/// scene prototypes. The prompt side is a ridge regression from pooled text
/// embeddings (plus a bias) to concept indicators, fitted once on a seeded
/// corpus of grammar prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentEmbedder<S> {
    image_proj: Tensor<S>,
    text_proj: Tensor<S>,
}

fn concept_indicator(prompt: &str) -> Vec<f64> {
    let mut v = vec![0.0; COLORS.len() + SHAPES.len()];
    for w in prompt.split_whitespace() {
        if let Some(i) = COLORS.iter().position(|c| w.eq_ignore_ascii_case(c)) {
            v[i] = 1.0;
        }
        if let Some(i) = SHAPES.iter().position(|s| w.eq_ignore_ascii_case(s)) {
            v[COLORS.len() + i] = 1.0;
        }
    }
    v
}

impl<S: Scalar> AlignmentEmbedder<S> {
    pub fn seeded(seed: u64, encoder: &EncoderParams<S>, grammar: &Grammar) -> Result<Self> {
        const CORPUS: usize = 2000;
        const RIDGE: f64 = 1e-3;
        let k = COLORS.len() + SHAPES.len();
        let mut image_proj = Tensor::zeros(&[grammar.channels, k]);
        for j in 0..k {
            image_proj.set(j, j, S::one());
        }

        let scenes = gen_dataset::<f64>(CORPUS, &Rng::new(seed, 0xa11), grammar)?;
        let d = encoder.dim() + 1;
        let mut xtx = Tensor::<f64>::zeros(&[d, d]);
        let mut xty = Tensor::<f64>::zeros(&[d, k]);
        for s in &scenes {
            let mut x: Vec<f64> = encode(&tokenize(&s.prompt), encoder).pooled().iter().map(|v| v.as_f64()).collect();
            x.push(1.0);
            let y = concept_indicator(&s.prompt);
            for i in 0..d {
                for j in 0..d {
                    xtx.data_mut()[i * d + j] += x[i] * x[j];
                }
                for j in 0..k {
                    xty.data_mut()[i * k + j] += x[i] * y[j];
                }
            }
        }
        let (values, vectors) = symmetric_eigen(&xtx)?;
        let ridge = RIDGE * values.iter().copied().fold(0.0, f64::max);
        let mut inv = Tensor::<f64>::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                let v: f64 = (0..d).map(|m| vectors.at(i, m) * vectors.at(j, m) / (values[m] + ridge)).sum();
                inv.set(i, j, v);
            }
        }
        let text_proj = matmul(&inv, &xty)?.cast::<S>();
        Ok(Self { image_proj, text_proj })
    }

    pub fn embed_image(&self, image: &Tensor<S>) -> Result<Vec<S>> {
        let c = self.image_proj.rows();
        if image.is_empty() || image.len() % c != 0 || image.shape().last() != Some(&c) {
            return Err(dim_err!("image shape {:?} does not end in {c} channels", image.shape()));
        }
        let mut pooled = vec![S::zero(); c];
        let cells = image.len() / c;
        for cell in image.data().chunks(c) {
            for (p, &v) in pooled.iter_mut().zip(cell) {
                *p += v;
            }
        }
        let inv = S::one() / S::of(cells as f64);
        pooled.iter_mut().for_each(|p| *p *= inv);
        Ok(matmul(&Tensor::matrix(1, c, pooled)?, &self.image_proj)?.into_data())
    }

    pub fn embed_prompt(&self, c: &TextEmbeddings<S>) -> Result<Vec<S>> {
        let mut x = c.pooled();
        x.push(S::one());
        let n = x.len();
        Ok(matmul(&Tensor::matrix(1, n, x)?, &self.text_proj)?.into_data())
    }
}

fn cosine<S: Scalar>(a: &[S], b: &[S]) -> S {
    let na = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<S>().sqrt();
    if na == S::zero() || nb == S::zero() {
        return S::zero();
    }
    let c = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<S>() / (na * nb);
    c.max(-S::one()).min(S::one())
}

/// Cosine similarity of the image and prompt concept vectors; 0 when either
/// vector vanishes.
pub fn alignment_score<S: Scalar>(image: &Tensor<S>, prompt: &str, encoder: &EncoderParams<S>, embedder: &AlignmentEmbedder<S>) -> Result<S> {
    let a = embedder.embed_image(image)?;
    let b = embedder.embed_prompt(&encode(&tokenize(prompt), encoder))?;
    Ok(cosine(&a, &b))
}

/// One percentile band of a subset selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub percentile: f64,
    /// 1-based rank in ascending score order.
    pub center_rank: usize,
    /// Selected (rank, prompt index) pairs in rank order.
    pub members: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetReport {
    pub bands: Vec<Band>,
    pub prompts: Vec<String>,
    pub scores: Vec<f64>,
}

impl SubsetReport {
    pub fn selected(&self) -> Vec<usize> {
        self.bands.iter().flat_map(|b| b.members.iter().map(|&(_, i)| i)).collect()
    }

    /// CSV `band,rank,prompt,score`; prompts are quoted.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "band,rank,prompt,score")?;
        for b in &self.bands {
            for &(rank, i) in &b.members {
                writeln!(out, "{},{},\"{}\",{}", b.percentile, rank, self.prompts[i].replace('"', "\"\""), self.scores[i])?;
            }
        }
        Ok(())
    }
}

/// Rank (1-based, ascending) of percentile `q` among `n` items:
/// `floor(q / 100 · (n − 1)) + 1`.
pub fn percentile_rank(q: f64, n: usize) -> usize {
    (q / 100.0 * (n - 1) as f64).floor() as usize + 1
}

/// Pick `total / bands.len()` prompts around each percentile's rank.
///
/// Prompts are ordered by ascending score with a stable sort, so equal scores
/// keep their input order. Each band is the contiguous rank window of the
/// requested size whose center is the percentile rank (shifted inward at the
/// ends). Overlapping windows are an error.
pub fn subset_select(prompts: &[String], scores: &[f64], total: usize, bands: &[f64]) -> Result<SubsetReport> {
    if prompts.len() != scores.len() {
        return Err(dim_err!("{} prompts but {} scores", prompts.len(), scores.len()));
    }
    if bands.is_empty() || total == 0 || total % bands.len() != 0 {
        return Err(Error::Config(format!("total {total} not divisible into {} bands", bands.len())));
    }
    if bands.iter().any(|q| !(0.0..=100.0).contains(q)) {
        return Err(Error::Config("percentiles must lie in [0, 100]".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("scores contain NaN".into()));
    }
    let n = prompts.len();
    if n < total {
        return Err(Error::InsufficientData(format!("{n} prompts cannot fill {total} slots")));
    }
    let per = total / bands.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut out = Vec::with_capacity(bands.len());
    let mut taken = vec![false; n];
    for &q in bands {
        let center = percentile_rank(q, n);
        let start = center.saturating_sub((per - 1) / 2).max(1).min(n - per + 1);
        let mut members = Vec::with_capacity(per);
        for rank in start..start + per {
            if std::mem::replace(&mut taken[rank - 1], true) {
                return Err(Error::Config(format!("band windows overlap at rank {rank}")));
            }
            members.push((rank, order[rank - 1]));
        }
        out.push(Band { percentile: q, center_rank: center, members });
    }
    Ok(SubsetReport { bands: out, prompts: prompts.to_vec(), scores: scores.to_vec() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchReport {
    /// Mean seconds per classifier-free step.
    pub cfg_mean: f64,
    /// Mean seconds per segmentation-free step.
    pub segfree_mean: f64,
    pub cfg_passes: usize,
    pub segfree_passes: usize,
    pub repeats: usize,
}

impl BenchReport {
    pub fn ratio(&self) -> f64 {
        self.segfree_mean / self.cfg_mean
    }
}

/// Time guided score evaluations in both modes on identical inputs. Runs
/// `repeats` warm iterations per mode after a short warm-up, alternating
/// modes in blocks so drift affects both equally.
pub fn step_benchmark<S: Scalar>(
    model: &Denoiser<S>,
    c: &TextEmbeddings<S>,
    neg: &TextEmbeddings<S>,
    cfg: &GuidanceConfig,
    repeats: usize,
    rng: &mut Rng,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::Config("benchmark needs at least one repeat".into()));
    }
    if c.content_len() == 0 {
        return Err(Error::EmptyPrompt);
    }
    let mc = *model.config();
    let z = rng.randn::<S>(&[mc.grid_h, mc.grid_w, mc.channels]);
    let t = mc.steps.div_ceil(2);
    let run = |mode: GuidanceMode| -> Result<usize> {
        let before = model.passes();
        guided_score(model, &z, t, c, neg, cfg, mode)?;
        Ok(model.passes() - before)
    };
    let cfg_passes = run(GuidanceMode::ClassifierFree)?;
    let segfree_passes = run(GuidanceMode::SegmentationFree)?;
    for _ in 0..repeats.clamp(1, 10) {
        run(GuidanceMode::ClassifierFree)?;
        run(GuidanceMode::SegmentationFree)?;
    }
    let block = repeats.clamp(1, 10);
    let (mut cf_time, mut sf_time) = (0.0, 0.0);
    let mut done = 0;
    while done < repeats {
        let k = block.min(repeats - done);
        for (mode, acc) in [(GuidanceMode::ClassifierFree, &mut cf_time), (GuidanceMode::SegmentationFree, &mut sf_time)] {
            let start = Instant::now();
            for _ in 0..k {
                run(mode)?;
            }
            *acc += start.elapsed().as_secs_f64();
        }
        done += k;
    }
    Ok(BenchReport { cfg_mean: cf_time / repeats as f64, segfree_mean: sf_time / repeats as f64, cfg_passes, segfree_passes, repeats })
}
