//! Named-tensor container and model checkpoints.
//!
//! Layout, all little-endian: magic `SFGE`, format version `u32`, tensor count
//! `u32`, then per tensor: name length `u32`, UTF-8 name, rank `u32`, `rank`
//! dims as `u64`, and the payload as `f64` in row-major order.
//!
//! A checkpoint stores the denoiser tensors under their parameter names, the
//! text encoder under `text.*`, and every configuration field as a rank-0
//! tensor under `config.*`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::denoiser::{Denoiser, DenoiserParams, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::ScheduleConfig;
use crate::tensor::Tensor;
use crate::text::EncoderParams;

const MAGIC: &[u8; 4] = b"SFGE";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_tensors<S: Scalar, W: Write>(mut out: W, tensors: &[(String, &Tensor<S>)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<S: Scalar, R: Read>(mut input: R) -> Result<Vec<(String, Tensor<S>)>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("missing SFGE magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let count = read_u32(&mut input)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank).map(|_| read_u64(&mut input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        input.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(8).map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk")))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Everything needed to sample: model, frozen text encoder and schedule.
#[derive(Debug)]
pub struct Checkpoint<S> {
    pub model: Denoiser<S>,
    pub encoder: EncoderParams<S>,
    pub schedule: ScheduleConfig,
}

fn config_entries(m: &ModelConfig, s: &ScheduleConfig) -> Vec<(&'static str, f64)> {
    vec![
        ("config.grid_h", m.grid_h as f64),
        ("config.grid_w", m.grid_w as f64),
        ("config.channels", m.channels as f64),
        ("config.width", m.width as f64),
        ("config.heads", m.heads as f64),
        ("config.layers", m.layers as f64),
        ("config.mlp_hidden", m.mlp_hidden as f64),
        ("config.text_dim", m.text_dim as f64),
        ("config.steps", m.steps as f64),
        ("config.lambda_max", s.lambda_max),
        ("config.lambda_min", s.lambda_min),
    ]
}

impl<S: Scalar> Checkpoint<S> {
    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let scalars: Vec<(String, Tensor<S>)> =
            config_entries(self.model.config(), &self.schedule).into_iter().map(|(k, v)| (k.to_string(), Tensor::scalar(S::of(v)))).collect();
        let mut all: Vec<(String, &Tensor<S>)> = scalars.iter().map(|(k, t)| (k.clone(), t)).collect();
        all.extend(self.encoder.named_tensors().into_iter().map(|(k, t)| (k.to_string(), t)));
        all.extend(self.model.params.named_tensors());
        write_tensors(out, &all)
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut map: BTreeMap<String, Tensor<S>> = read_tensors(input)?.into_iter().collect();
        let mut scalar = |key: &str| -> Result<f64> {
            let t = map.remove(key).ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
            if t.rank() != 0 {
                return Err(Error::Format(format!("{key} is not a scalar")));
            }
            Ok(t.data()[0].as_f64())
        };
        let count = |v: f64| v as usize;
        let config = ModelConfig {
            grid_h: count(scalar("config.grid_h")?),
            grid_w: count(scalar("config.grid_w")?),
            channels: count(scalar("config.channels")?),
            width: count(scalar("config.width")?),
            heads: count(scalar("config.heads")?),
            layers: count(scalar("config.layers")?),
            mlp_hidden: count(scalar("config.mlp_hidden")?),
            text_dim: count(scalar("config.text_dim")?),
            steps: count(scalar("config.steps")?),
        };
        let schedule = ScheduleConfig { steps: config.steps, lambda_max: scalar("config.lambda_max")?, lambda_min: scalar("config.lambda_min")? };
        config.validate()?;
        let mut take = |k: &str| map.remove(k).ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")));
        let encoder = EncoderParams {
            token_embedding: take("text.token_embedding")?,
            query: take("text.query")?,
            key: take("text.key")?,
            value: take("text.value")?,
            output: take("text.output")?,
        };
        if encoder.dim() != config.text_dim {
            return Err(Error::Format("encoder width does not match config".into()));
        }
        let params = DenoiserParams::from_named(&config, |k| map.remove(k))?;
        Ok(Self { model: Denoiser::from_params(config, params), encoder, schedule })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn tensors_round_trip() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap();
        let b = Tensor::scalar(4.0);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        assert_eq!(&buf[..4], b"SFGE");
        let back: Vec<(String, Tensor<f64>)> = read_tensors(&buf[..]).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b".to_string(), b)]);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = ModelConfig { heads: 2, ..ModelConfig::default() };
        let ck = Checkpoint {
            model: Denoiser::<f64>::new(cfg, &Rng::new(3, 0)).unwrap(),
            encoder: EncoderParams::seeded(4, cfg.text_dim),
            schedule: ScheduleConfig::default(),
        };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::<f64>::read(&buf[..]).unwrap();
        assert_eq!(back.model.config(), ck.model.config());
        assert_eq!(back.model.params, ck.model.params);
        assert_eq!(back.encoder, ck.encoder);
        assert_eq!(back.schedule, ck.schedule);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(read_tensors::<f64, _>(&b"NOPE\x01\0\0\0\0\0\0\0"[..]).is_err());
        assert!(read_tensors::<f64, _>(&b"SFGE\x09\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x".into(), &Tensor::<f64>::zeros(&[4]))]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensors::<f64, _>(&buf[..]).is_err());
        let mut lone = Vec::new();
        write_tensors(&mut lone, &[("x".into(), &Tensor::<f64>::zeros(&[1]))]).unwrap();
        assert!(Checkpoint::<f64>::read(&lone[..]).is_err());
    }
}
