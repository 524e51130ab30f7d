//! Closed-vocabulary tokenizer and a frozen causal text encoder.
//!
//! The encoder is one causal self-attention layer with a residual path and an
//! output projection. Row `j` of the output only reads tokens `0..=j`, so two
//! prompts sharing a prefix produce bit-identical rows over that prefix.

use crate::error::{dim_err, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};

pub const BOS: u32 = 0;
pub const UNK: u32 = 1;

/// Words of the toy grammar, in id order starting at 2.
pub const WORDS: &[&str] = &[
    "a", "red", "green", "blue", "yellow", "square", "circle", "triangle", "cross", "left", "right", "of", "above",
    "below", "next", "to",
];

pub fn vocab_size() -> usize {
    WORDS.len() + 2
}

pub fn word_id(word: &str) -> u32 {
    WORDS.iter().position(|w| *w == word).map_or(UNK, |p| p as u32 + 2)
}

pub fn id_word(id: u32) -> &'static str {
    match id {
        BOS => "<bos>",
        UNK => "<unk>",
        i => WORDS.get(i as usize - 2).copied().unwrap_or("<unk>"),
    }
}

/// Token ids with BOS at position 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn from_ids(ids: Vec<u32>) -> Result<Self> {
        if ids.first() != Some(&BOS) {
            return Err(dim_err!("token sequence must start with BOS"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab_size()) {
            return Err(dim_err!("token id {bad} outside vocabulary"));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false: BOS is present.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of tokens after BOS.
    pub fn content_len(&self) -> usize {
        self.0.len() - 1
    }
}

/// Whitespace-split, lowercased lookup with BOS prepended.
pub fn tokenize(text: &str) -> TokenSeq {
    let mut ids = vec![BOS];
    ids.extend(text.split_whitespace().map(|w| word_id(&w.to_lowercase())));
    TokenSeq(ids)
}

/// `(n+1) × d_text` prompt embeddings; row 0 is the BOS embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddings<S> {
    vectors: Tensor<S>,
}

impl<S: Scalar> TextEmbeddings<S> {
    pub fn new(vectors: Tensor<S>) -> Result<Self> {
        if vectors.rank() != 2 || vectors.rows() == 0 {
            return Err(dim_err!("text embeddings need at least one row, got {:?}", vectors.shape()));
        }
        Ok(Self { vectors })
    }

    pub fn vectors(&self) -> &Tensor<S> {
        &self.vectors
    }

    pub fn rows(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Number of non-BOS rows.
    pub fn content_len(&self) -> usize {
        self.rows() - 1
    }

    /// Copy with row `i` dropped and the remaining rows left as they are
    /// (no re-encoding).
    pub fn without_row(&self, i: usize) -> Result<Self> {
        if i == 0 || i >= self.rows() {
            return Err(dim_err!("cannot omit row {i} of {}", self.rows()));
        }
        let d = self.dim();
        let data = (0..self.rows()).filter(|&r| r != i).flat_map(|r| self.vectors.row(r).to_vec()).collect();
        Self::new(Tensor::matrix(self.rows() - 1, d, data)?)
    }

    /// Mean of the non-BOS rows (the BOS row when there are none).
    pub fn pooled(&self) -> Vec<S> {
        let d = self.dim();
        let rows: Vec<usize> = if self.rows() > 1 { (1..self.rows()).collect() } else { vec![0] };
        let inv = S::one() / S::of(rows.len() as f64);
        let mut out = vec![S::zero(); d];
        for r in rows {
            for (o, &v) in out.iter_mut().zip(self.vectors.row(r)) {
                *o += v * inv;
            }
        }
        out
    }
}

/// Frozen encoder weights, drawn from a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<S> {
    pub token_embedding: Tensor<S>,
    pub query: Tensor<S>,
    pub key: Tensor<S>,
    pub value: Tensor<S>,
    pub output: Tensor<S>,
}

impl<S: Scalar> EncoderParams<S> {
    pub fn seeded(seed: u64, d_text: usize) -> Self {
        let rng = Rng::new(seed, 0x7e47);
        let mut streams = rng.split(5);
        let inv = S::of(1.0 / (d_text as f64).sqrt());
        let mut draw = |i: usize, rows: usize, k: S| streams[i].randn::<S>(&[rows, d_text]).scale(k);
        Self {
            token_embedding: draw(0, vocab_size(), S::one()),
            query: draw(1, d_text, inv),
            key: draw(2, d_text, inv),
            value: draw(3, d_text, inv),
            output: draw(4, d_text, inv),
        }
    }

    pub fn dim(&self) -> usize {
        self.token_embedding.cols()
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<S>)> {
        vec![
            ("text.token_embedding", &self.token_embedding),
            ("text.query", &self.query),
            ("text.key", &self.key),
            ("text.value", &self.value),
            ("text.output", &self.output),
        ]
    }
}

fn sinusoid<S: Scalar>(pos: usize, d: usize) -> impl Iterator<Item = S> {
    (0..d).map(move |j| {
        let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        S::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

fn row_times<S: Scalar>(x: &[S], w: &Tensor<S>) -> Vec<S> {
    let n = w.cols();
    let mut out = vec![S::zero(); n];
    for (k, &xv) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(k)) {
            *o += xv * wv;
        }
    }
    out
}

pub fn encode<S: Scalar>(tokens: &TokenSeq, params: &EncoderParams<S>) -> TextEmbeddings<S> {
    let d = params.dim();
    let inputs: Vec<Vec<S>> = tokens
        .ids()
        .iter()
        .enumerate()
        .map(|(pos, &id)| params.token_embedding.row(id as usize).iter().zip(sinusoid::<S>(pos, d)).map(|(&e, p)| e + p).collect())
        .collect();
    let keys: Vec<Vec<S>> = inputs.iter().map(|e| row_times(e, &params.key)).collect();
    let values: Vec<Vec<S>> = inputs.iter().map(|e| row_times(e, &params.value)).collect();
    let scale = S::one() / S::of(d as f64).sqrt();

    let mut data = Vec::with_capacity(inputs.len() * d);
    for (j, e) in inputs.iter().enumerate() {
        let q = row_times(e, &params.query);
        let mut w: Vec<S> = keys[..=j].iter().map(|k| dot(&q, k) * scale).collect();
        crate::tensor::softmax_in_place(&mut w);
        let mut h = e.clone();
        for (wi, v) in w.iter().zip(&values[..=j]) {
            for (hk, &vk) in h.iter_mut().zip(v) {
                *hk += *wi * vk;
            }
        }
        data.extend(row_times(&h, &params.output));
    }
    let vectors = Tensor::matrix(inputs.len(), d, data).expect("consistent encoder shapes");
    TextEmbeddings { vectors }
}

/// Embeddings of the empty prompt (BOS only).
pub fn null_embeddings<S: Scalar>(params: &EncoderParams<S>) -> TextEmbeddings<S> {
    encode(&tokenize(""), params)
}
