//! Synthetic scenes: prompts from a closed grammar rendered onto a patch grid.
//!
//! Each object is a 3×3-footprint blob whose cells all hold the same vector:
//! the sum of its color and shape prototypes (orthogonal unit directions)
//! times a per-object gain near 1.
//! Background cells are zero. Scenes carry the ground-truth region of every
//! object so semantic maps can be scored against them.

use std::io::{Read, Write};

use crate::error::{dim_err, Error, Result};
use crate::guidance::SemanticMap;
use crate::pgm;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{tokenize, word_id};

pub const COLORS: &[&str] = &["red", "green", "blue", "yellow"];
pub const SHAPES: &[&str] = &["square", "circle", "triangle", "cross"];

const FOOTPRINT: usize = 3;

/// Each object's vector is scaled by a gain drawn from `1 ± AMPLITUDE_JITTER`.
const AMPLITUDE_JITTER: f64 = 0.2;

/// Cells (row, col) of each shape inside its 3×3 footprint.
fn shape_cells(shape: usize) -> &'static [(usize, usize)] {
    match shape {
        0 => &[(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)],
        1 => &[(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)],
        2 => &[(0, 1), (1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)],
        _ => &[(0, 0), (0, 2), (1, 1), (2, 0), (2, 2)],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
    NextTo,
}

impl Relation {
    pub const ALL: [Relation; 5] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below, Relation::NextTo];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
            Relation::NextTo => &["next", "to"],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    /// Probability that a scene has two objects rather than one.
    pub two_object_prob: f64,
}

impl Default for Grammar {
    fn default() -> Self {
        Self { grid_h: 8, grid_w: 8, channels: 8, two_object_prob: 0.75 }
    }
}

impl Grammar {
    pub fn validate(&self) -> Result<()> {
        if self.grid_h < 2 * FOOTPRINT || self.grid_w < 2 * FOOTPRINT {
            return Err(Error::Config(format!("grid must be at least {0}x{0}", 2 * FOOTPRINT)));
        }
        if self.channels < COLORS.len() + SHAPES.len() {
            return Err(Error::Config(format!("need at least {} channels", COLORS.len() + SHAPES.len())));
        }
        if !(0.0..=1.0).contains(&self.two_object_prob) {
            return Err(Error::Config("two_object_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn only_two_objects(mut self) -> Self {
        self.two_object_prob = 1.0;
        self
    }

    /// Prototype vector of an object: unit color axis plus unit shape axis.
    pub fn object_vector<S: Scalar>(&self, color: usize, shape: usize) -> Vec<S> {
        let mut v = vec![S::zero(); self.channels];
        v[color] = S::one();
        v[COLORS.len() + shape] = S::one();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    /// Token positions (1-based, BOS = 0) of the words naming this object.
    pub tokens: Vec<usize>,
    /// Row-major `H × W` region.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene<S> {
    /// `H × W × C`.
    pub latent: Tensor<S>,
    pub prompt: String,
    pub objects: Vec<SceneObject>,
}

impl<S: Scalar> ToyScene<S> {
    pub fn grid(&self) -> (usize, usize) {
        (self.latent.shape()[0], self.latent.shape()[1])
    }

    pub fn background_mask(&self) -> Vec<bool> {
        let (h, w) = self.grid();
        (0..h * w).map(|p| !self.objects.iter().any(|o| o.mask[p])).collect()
    }

    /// Region attributed to the token at `position`: its object's mask for
    /// color and shape words, the background for every other word.
    pub fn token_mask(&self, position: usize) -> Vec<bool> {
        self.objects.iter().find(|o| o.tokens.contains(&position)).map_or_else(|| self.background_mask(), |o| o.mask.clone())
    }

    /// Index of the object covering patch `p`, if any.
    pub fn object_at(&self, p: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.mask[p])
    }

    pub fn object_patch_count(&self) -> usize {
        self.objects.iter().map(|o| o.mask.iter().filter(|&&m| m).count()).sum()
    }

    /// Recover object regions from a latent (for example a generated sample)
    /// by labelling each patch with the nearest of the prompt's object
    /// vectors or the zero background.
    pub fn from_latent(latent: Tensor<S>, prompt: &str, grammar: &Grammar) -> Result<Self> {
        let shape = latent.shape().to_vec();
        if shape.len() != 3 || shape[2] != grammar.channels {
            return Err(dim_err!("latent shape {:?} does not match grammar", shape));
        }
        let mut objects = parse_objects(prompt)?;
        let cells = shape[0] * shape[1];
        let ch = shape[2];
        let protos: Vec<Vec<f64>> = objects.iter().map(|o| grammar.object_vector::<f64>(o.color, o.shape)).collect();
        for o in &mut objects {
            o.mask = vec![false; cells];
        }
        for p in 0..cells {
            let v: Vec<f64> = latent.data()[p * ch..(p + 1) * ch].iter().map(|x| x.as_f64()).collect();
            let dist = |proto: &[f64]| v.iter().zip(proto).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let mut best = (v.iter().map(|a| a * a).sum::<f64>(), None);
            for (k, proto) in protos.iter().enumerate() {
                let d = dist(proto);
                if d < best.0 {
                    best = (d, Some(k));
                }
            }
            if let Some(k) = best.1 {
                objects[k].mask[p] = true;
            }
        }
        Ok(Self { latent, prompt: prompt.to_string(), objects })
    }
}

/// Objects named in a grammar prompt: each color word directly followed by
/// a shape word.
fn parse_objects(prompt: &str) -> Result<Vec<SceneObject>> {
    let ids = tokenize(prompt);
    let words: Vec<&str> = prompt.split_whitespace().collect();
    let mut objects = Vec::new();
    for i in 0..words.len().saturating_sub(1) {
        let color = COLORS.iter().position(|c| words[i].eq_ignore_ascii_case(c));
        let shape = SHAPES.iter().position(|s| words[i + 1].eq_ignore_ascii_case(s));
        if let (Some(color), Some(shape)) = (color, shape) {
            objects.push(SceneObject { color, shape, tokens: vec![i + 1, i + 2], mask: Vec::new() });
        }
    }
    if objects.is_empty() {
        return Err(Error::Domain(format!("prompt {prompt:?} names no objects ({} tokens)", ids.len())));
    }
    Ok(objects)
}

fn sample_pair(rng: &mut Rng, n: usize) -> (usize, usize) {
    let a = rng.below(n);
    let b = (a + 1 + rng.below(n - 1)) % n;
    (a, b)
}

/// Draw one scene from the grammar.
pub fn gen_scene<S: Scalar>(rng: &mut Rng, grammar: &Grammar) -> ToyScene<S> {
    let (h, w) = (grammar.grid_h, grammar.grid_w);
    let span_r = h - FOOTPRINT + 1;
    let span_c = w - FOOTPRINT + 1;
    let mut words: Vec<&str> = Vec::new();
    // (color, shape, top-left corner)
    let mut placed: Vec<(usize, usize, (usize, usize), Vec<usize>)> = Vec::new();

    if rng.bernoulli(grammar.two_object_prob) {
        let (c1, c2) = sample_pair(rng, COLORS.len());
        let (s1, s2) = sample_pair(rng, SHAPES.len());
        let rel = Relation::ALL[rng.below(Relation::ALL.len())];
        // First object's footprint range along the split axis: low half or high half.
        let low = |rng: &mut Rng, len: usize| rng.below(len / 2 - FOOTPRINT + 1);
        let high = |rng: &mut Rng, len: usize| len / 2 + rng.below(len - len / 2 - FOOTPRINT + 1);
        let (pos1, pos2) = match rel {
            Relation::LeftOf | Relation::RightOf | Relation::NextTo => {
                let first_left = match rel {
                    Relation::LeftOf => true,
                    Relation::RightOf => false,
                    _ => rng.bernoulli(0.5),
                };
                let (a, b) = if first_left { (low(rng, w), high(rng, w)) } else { (high(rng, w), low(rng, w)) };
                ((rng.below(span_r), a), (rng.below(span_r), b))
            }
            Relation::Above | Relation::Below => {
                let (a, b) = if rel == Relation::Above { (low(rng, h), high(rng, h)) } else { (high(rng, h), low(rng, h)) };
                ((a, rng.below(span_c)), (b, rng.below(span_c)))
            }
        };
        words.extend(["a", COLORS[c1], SHAPES[s1]]);
        placed.push((c1, s1, pos1, vec![2, 3]));
        words.extend(rel.words());
        words.push("a");
        let at = words.len() + 1;
        words.extend([COLORS[c2], SHAPES[s2]]);
        placed.push((c2, s2, pos2, vec![at, at + 1]));
    } else {
        let c = rng.below(COLORS.len());
        let s = rng.below(SHAPES.len());
        let pos = (rng.below(span_r), rng.below(span_c));
        words.extend(["a", COLORS[c], SHAPES[s]]);
        placed.push((c, s, pos, vec![2, 3]));
    }

    let mut latent = Tensor::zeros(&[h, w, grammar.channels]);
    let mut objects = Vec::new();
    for (color, shape, (r0, c0), tokens) in placed {
        let gain = S::of(1.0 - AMPLITUDE_JITTER + 2.0 * AMPLITUDE_JITTER * rng.uniform());
        let v: Vec<S> = grammar.object_vector::<S>(color, shape).into_iter().map(|x| x * gain).collect();
        let mut mask = vec![false; h * w];
        for &(dr, dc) in shape_cells(shape) {
            let p = (r0 + dr) * w + c0 + dc;
            mask[p] = true;
            latent.data_mut()[p * grammar.channels..(p + 1) * grammar.channels].copy_from_slice(&v);
        }
        objects.push(SceneObject { color, shape, tokens, mask });
    }
    ToyScene { latent, prompt: words.join(" "), objects }
}

/// `n` scenes, scene `i` drawn from substream `i` of `rng`.
pub fn gen_dataset<S: Scalar>(n: usize, rng: &Rng, grammar: &Grammar) -> Result<Vec<ToyScene<S>>> {
    if n == 0 {
        return Err(Error::InsufficientData("dataset size must be at least 1".into()));
    }
    grammar.validate()?;
    Ok((0..n as u64).map(|i| gen_scene(&mut rng.substream(i), grammar)).collect())
}

/// Fraction of object patches whose selected token names the object covering
/// them, averaged over layers. Background patches are excluded.
pub fn semantic_map_score<S: Scalar>(map: &SemanticMap, scene: &ToyScene<S>) -> Result<f64> {
    let (h, w) = scene.grid();
    if map.layers.is_empty() || map.layers.iter().any(|l| l.len() != h * w) {
        return Err(dim_err!("semantic map does not match the {h}x{w} scene grid"));
    }
    let covered = scene.object_patch_count();
    if covered == 0 {
        return Err(Error::InsufficientData("scene has no object patches".into()));
    }
    let mut total = 0.0;
    for layer in &map.layers {
        let hits = (0..h * w).filter(|&p| scene.object_at(p).is_some_and(|o| o.tokens.contains(&layer[p]))).count();
        total += hits as f64 / covered as f64;
    }
    Ok(total / map.layers.len() as f64)
}

/// Monte Carlo score of maps drawn uniformly over each scene's tokens.
/// Each trial averages over all scenes; returns the mean and standard
/// deviation of the per-trial averages.
pub fn random_map_baseline<S: Scalar>(scenes: &[ToyScene<S>], layers: usize, trials: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    if scenes.is_empty() || trials == 0 {
        return Err(Error::InsufficientData("baseline needs scenes and trials".into()));
    }
    let mut per_trial = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut acc = 0.0;
        for scene in scenes {
            let n = tokenize(&scene.prompt).content_len();
            let (h, w) = scene.grid();
            let map = SemanticMap::new((0..layers).map(|_| (0..h * w).map(|_| 1 + rng.below(n)).collect()).collect())?;
            acc += semantic_map_score(&map, scene)?;
        }
        per_trial.push(acc / scenes.len() as f64);
    }
    let mean = per_trial.iter().sum::<f64>() / trials as f64;
    let var = if trials > 1 { per_trial.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64 } else { 0.0 };
    Ok((mean, var.sqrt()))
}

const SCENE_MAGIC: &[u8; 4] = b"SFGS";
const SCENE_VERSION: u32 = 1;

/// Binary scene record, little-endian:
/// magic `SFGS`, version u32, prompt length u32 + UTF-8 bytes, H, W, C as
/// u32, `H·W·C` f64 latent values, object count u32, then per object:
/// color u32, shape u32, token count u32 + u32 positions, `H·W` mask bytes.
pub fn write_scene<S: Scalar, W: Write>(scene: &ToyScene<S>, mut out: W) -> Result<()> {
    let u32le = |x: usize| (x as u32).to_le_bytes();
    out.write_all(SCENE_MAGIC)?;
    out.write_all(&SCENE_VERSION.to_le_bytes())?;
    out.write_all(&u32le(scene.prompt.len()))?;
    out.write_all(scene.prompt.as_bytes())?;
    for &d in scene.latent.shape() {
        out.write_all(&u32le(d))?;
    }
    for &v in scene.latent.data() {
        out.write_all(&v.as_f64().to_le_bytes())?;
    }
    out.write_all(&u32le(scene.objects.len()))?;
    for o in &scene.objects {
        out.write_all(&u32le(o.color))?;
        out.write_all(&u32le(o.shape))?;
        out.write_all(&u32le(o.tokens.len()))?;
        for &t in &o.tokens {
            out.write_all(&u32le(t))?;
        }
        out.write_all(&o.mask.iter().map(|&m| m as u8).collect::<Vec<_>>())?;
    }
    Ok(())
}

pub fn read_scene<S: Scalar, R: Read>(mut input: R) -> Result<ToyScene<S>> {
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut R| -> Result<usize> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf) as usize)
    };
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != SCENE_MAGIC {
        return Err(Error::Format("not a scene record".into()));
    }
    let version = read_u32(&mut input)?;
    if version != SCENE_VERSION as usize {
        return Err(Error::Format(format!("unsupported scene version {version}")));
    }
    let len = read_u32(&mut input)?;
    let mut prompt = vec![0u8; len];
    input.read_exact(&mut prompt)?;
    let prompt = String::from_utf8(prompt).map_err(|e| Error::Format(e.to_string()))?;
    let shape = vec![read_u32(&mut input)?, read_u32(&mut input)?, read_u32(&mut input)?];
    let cells: usize = shape.iter().product();
    let mut data = Vec::with_capacity(cells);
    let mut f = [0u8; 8];
    for _ in 0..cells {
        input.read_exact(&mut f)?;
        data.push(S::of(f64::from_le_bytes(f)));
    }
    let latent = Tensor::new(shape.clone(), data)?;
    let count = read_u32(&mut input)?;
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let color = read_u32(&mut input)?;
        let shape_id = read_u32(&mut input)?;
        let nt = read_u32(&mut input)?;
        let tokens = (0..nt).map(|_| read_u32(&mut input)).collect::<Result<Vec<_>>>()?;
        let mut mask = vec![0u8; shape[0] * shape[1]];
        input.read_exact(&mut mask)?;
        objects.push(SceneObject { color, shape: shape_id, tokens, mask: mask.into_iter().map(|b| b != 0).collect() });
    }
    Ok(ToyScene { latent, prompt, objects })
}

/// One channel of the scene as a PGM, each cell drawn `cell` pixels wide.
pub fn write_scene_pgm<S: Scalar, W: Write>(scene: &ToyScene<S>, channel: usize, cell: usize, out: W) -> Result<()> {
    let (h, w) = scene.grid();
    let c = scene.latent.shape()[2];
    if channel >= c {
        return Err(dim_err!("channel {channel} out of range for {c} channels"));
    }
    let values: Vec<f64> = (0..h * w).map(|p| scene.latent.data()[p * c + channel].as_f64()).collect();
    pgm::write_pgm(out, w * cell, h * cell, &pgm::grid_to_gray(&values, h, w, 0.0, 1.0, cell))
}

/// Content-token ids used by the grammar, for vocabulary checks.
pub fn grammar_word_ids() -> Vec<u32> {
    let mut words: Vec<&str> = vec!["a"];
    words.extend(COLORS);
    words.extend(SHAPES);
    for r in Relation::ALL {
        words.extend(r.words());
    }
    words.into_iter().map(word_id).collect()
}
