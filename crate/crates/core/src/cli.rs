//! Command-line front end.
//!
//! Settings resolve in three layers: an optional flat `key = value` config
//! file, then the `SFGE_OUT_DIR` environment variable (output directory only),
//! then command-line flags. Every run writes the resolved settings to
//! `config.resolved.txt` in the output directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{write_tensors, Checkpoint};
use crate::denoiser::{Denoiser, ModelConfig, OverrideSpec};
use crate::error::{Error, Result};
use crate::eval::{alignment_score, diversity_curve, frechet, step_benchmark, subset_select, write_curve_csv, AlignmentEmbedder, EmbeddingSet};
use crate::guidance::{GuidanceConfig, GuidanceMode, SemanticMap};
use crate::pgm::{grid_to_gray, write_pgm};
use crate::rng::Rng;
use crate::sampler::{sample, sample_observed, SampleTrace};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tensor::Tensor;
use crate::text::{encode, null_embeddings, tokenize, EncoderParams, TextEmbeddings};
use crate::train::{train_with, TrainConfig};
use crate::world::{gen_dataset, Grammar};

pub const OUT_DIR_ENV: &str = "SFGE_OUT_DIR";

/// Pixels per grid cell in written images.
const CELL: usize = 4;

/// Every recognised config key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("a", "10"),
    ("bands", "90,50,10"),
    ("batch", "8"),
    ("channels", "8"),
    ("checkpoint", ""),
    ("corpus", ""),
    ("corpus_size", "300"),
    ("dataset_size", "2000"),
    ("dropout", "0.1"),
    ("dump_step", "1"),
    ("encoder_seed", "1"),
    ("grid_h", "8"),
    ("grid_w", "8"),
    ("heads", "1"),
    ("lambda_max", "10"),
    ("lambda_min", "-10"),
    ("layers", "2"),
    ("lr", "0.1"),
    ("mlp_hidden", "64"),
    ("mode", "segfree"),
    ("negative", ""),
    ("out_dir", "sfge-out"),
    ("prompt", "a red square left of a blue circle"),
    ("repeats", "100"),
    ("seed", "0"),
    ("sizes", "50,100,250,500,1000"),
    ("steps", "20"),
    ("t_s", ""),
    ("text_dim", "32"),
    ("total", "150"),
    ("train_steps", "8000"),
    ("trials", "10"),
    ("w", "7.5"),
    ("w_bar", "2.5"),
    ("width", "32"),
];

#[derive(Parser, Debug)]
#[command(name = "sfge", about = "Toy segmentation-free guidance experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a toy dataset, train the denoiser and save a checkpoint.
    Train(Settings),
    /// Sample one prompt; writes the latent, its image and the step trace.
    Sample(Settings),
    /// Sample the same prompt and seed under both guidance modes.
    Compare(Settings),
    /// Fréchet distance between two embedding files.
    Frechet(FrechetArgs),
    /// Percentile-band prompt subset from a scored corpus.
    Subset(Settings),
    /// Fréchet distance of random subsets to the full corpus, by size.
    Curve(Settings),
    /// Time classifier-free against segmentation-free steps.
    Bench(Settings),
    /// Per-layer attention weights and local semantics at one step, as images.
    DumpAttn(Settings),
}

#[derive(Args, Debug)]
struct FrechetArgs {
    /// Embedding CSV (`label,v1,...,vd` per line).
    first: PathBuf,
    second: PathBuf,
    #[command(flatten)]
    settings: Settings,
}

/// Flags; each maps onto the config key of the same name (dashes become
/// underscores).
#[derive(Args, Debug, Default)]
struct Settings {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    negative: Option<String>,
    /// `cfg` or `segfree`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    wbar: Option<f64>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    ts: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda_max: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lambda_min: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    #[arg(long)]
    text_dim: Option<usize>,
    #[arg(long)]
    encoder_seed: Option<u64>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    dataset_size: Option<usize>,
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    corpus_size: Option<usize>,
    #[arg(long)]
    total: Option<usize>,
    #[arg(long)]
    bands: Option<String>,
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    dump_step: Option<usize>,
}

impl Settings {
    fn flag_values(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        let s = |x: &Option<String>| x.clone();
        let n = |x: Option<usize>| x.map(|v| v.to_string());
        let f = |x: Option<f64>| x.map(|v| v.to_string());
        put("seed", self.seed.map(|v| v.to_string()));
        put("out_dir", s(&self.out_dir));
        put("checkpoint", s(&self.checkpoint));
        put("prompt", s(&self.prompt));
        put("negative", s(&self.negative));
        put("mode", s(&self.mode));
        put("w", f(self.w));
        put("w_bar", f(self.wbar));
        put("a", f(self.a));
        put("t_s", n(self.ts));
        put("steps", n(self.steps));
        put("lambda_max", f(self.lambda_max));
        put("lambda_min", f(self.lambda_min));
        put("width", n(self.width));
        put("heads", n(self.heads));
        put("layers", n(self.layers));
        put("mlp_hidden", n(self.mlp_hidden));
        put("text_dim", n(self.text_dim));
        put("encoder_seed", self.encoder_seed.map(|v| v.to_string()));
        put("train_steps", n(self.train_steps));
        put("batch", n(self.batch));
        put("lr", f(self.lr));
        put("dropout", f(self.dropout));
        put("dataset_size", n(self.dataset_size));
        put("corpus", s(&self.corpus));
        put("corpus_size", n(self.corpus_size));
        put("total", n(self.total));
        put("bands", s(&self.bands));
        put("sizes", s(&self.sizes));
        put("trials", n(self.trials));
        put("repeats", n(self.repeats));
        put("dump_step", n(self.dump_step));
        out
    }
}

/// Parse a flat config file: `key = value` per line, `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        let k = k.trim();
        if !DEFAULTS.iter().any(|(d, _)| *d == k) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}", no + 1)));
        }
        map.insert(k.to_string(), v.trim().trim_matches('"').to_string());
    }
    Ok(map)
}

/// Fully resolved settings for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub values: BTreeMap<String, String>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub train: TrainConfig,
    pub encoder_seed: u64,
    pub dataset_size: usize,
}

fn parse<T: std::str::FromStr>(values: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = &values[key];
    raw.parse().map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(raw: &str, key: &str) -> Result<Vec<T>> {
    raw.split(',').map(|x| x.trim().parse().map_err(|_| Error::Config(format!("invalid entry {x:?} in {key}")))).collect()
}

impl RunConfig {
    /// Layer defaults, file values, the environment and flags (in that order).
    pub fn resolve(file: BTreeMap<String, String>, env_out_dir: Option<String>, flags: &[(&str, String)]) -> Result<Self> {
        let mut values: BTreeMap<String, String> = DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        values.extend(file);
        if let Some(dir) = env_out_dir.filter(|d| !d.is_empty()) {
            values.insert("out_dir".into(), dir);
        }
        for (k, v) in flags {
            values.insert(k.to_string(), v.clone());
        }
        let steps: usize = parse(&values, "steps")?;
        if values["t_s"].is_empty() {
            values.insert("t_s".into(), (steps / 2).to_string());
        }
        let model = ModelConfig {
            grid_h: parse(&values, "grid_h")?,
            grid_w: parse(&values, "grid_w")?,
            channels: parse(&values, "channels")?,
            width: parse(&values, "width")?,
            heads: parse(&values, "heads")?,
            layers: parse(&values, "layers")?,
            mlp_hidden: parse(&values, "mlp_hidden")?,
            text_dim: parse(&values, "text_dim")?,
            steps,
        };
        model.validate()?;
        let schedule = ScheduleConfig { steps, lambda_max: parse(&values, "lambda_max")?, lambda_min: parse(&values, "lambda_min")? };
        NoiseSchedule::<f64>::from_config(&schedule)?;
        let guidance = GuidanceConfig {
            w: parse(&values, "w")?,
            w_bar: parse(&values, "w_bar")?,
            a: parse(&values, "a")?,
            t_s: parse(&values, "t_s")?,
            mode: values["mode"].parse()?,
        };
        guidance.validate(steps)?;
        let train = TrainConfig { steps: parse(&values, "train_steps")?, batch: parse(&values, "batch")?, lr: parse(&values, "lr")?, dropout: parse(&values, "dropout")? };
        train.validate()?;
        let checkpoint = Some(&values["checkpoint"]).filter(|p| !p.is_empty()).map(PathBuf::from);
        Ok(Self {
            seed: parse(&values, "seed")?,
            out_dir: PathBuf::from(&values["out_dir"]),
            checkpoint,
            model,
            schedule,
            guidance,
            train,
            encoder_seed: parse(&values, "encoder_seed")?,
            dataset_size: parse(&values, "dataset_size")?,
            values,
        })
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key]
    }

    pub fn number<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        parse(&self.values, key)
    }

    /// `key = value` lines in key order, readable back as a config file.
    pub fn snapshot(&self, command: &str) -> String {
        let mut out = format!("# sfge {command}\n");
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    fn grammar(&self) -> Grammar {
        Grammar { grid_h: self.model.grid_h, grid_w: self.model.grid_w, channels: self.model.channels, ..Grammar::default() }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Run the CLI on `argv` (program name first) and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn resolve(settings: &Settings) -> Result<RunConfig> {
    let file = match &settings.config {
        Some(path) => parse_config_text(&fs::read_to_string(path)?)?,
        None => BTreeMap::new(),
    };
    RunConfig::resolve(file, std::env::var(OUT_DIR_ENV).ok(), &settings.flag_values())
}

fn prepare(settings: &Settings, command: &str) -> Result<RunConfig> {
    let rc = resolve(settings)?;
    fs::create_dir_all(&rc.out_dir)?;
    fs::write(rc.out("config.resolved.txt"), rc.snapshot(command))?;
    Ok(rc)
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(s) => cmd_train(&prepare(&s, "train")?),
        Cmd::Sample(s) => cmd_sample(&prepare(&s, "sample")?),
        Cmd::Compare(s) => cmd_compare(&prepare(&s, "compare")?),
        Cmd::Frechet(f) => cmd_frechet(&prepare(&f.settings, "frechet")?, &f.first, &f.second),
        Cmd::Subset(s) => cmd_subset(&prepare(&s, "subset")?),
        Cmd::Curve(s) => cmd_curve(&prepare(&s, "curve")?),
        Cmd::Bench(s) => cmd_bench(&prepare(&s, "bench")?),
        Cmd::DumpAttn(s) => cmd_dump_attn(&prepare(&s, "dump-attn")?),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Model, encoder and schedule from the configured checkpoint, or a freshly
/// initialised model when none is set.
fn load_model(rc: &RunConfig) -> Result<Checkpoint<f64>> {
    match &rc.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model.config().steps != rc.schedule.steps {
                return Err(Error::Config(format!("checkpoint uses {} steps, config asks for {}", ck.model.config().steps, rc.schedule.steps)));
            }
            Ok(ck)
        }
        None => {
            eprintln!("note: no checkpoint set, using an untrained model");
            Ok(Checkpoint {
                model: Denoiser::new(rc.model, &Rng::new(rc.seed, 2))?,
                encoder: EncoderParams::seeded(rc.encoder_seed, rc.model.text_dim),
                schedule: rc.schedule,
            })
        }
    }
}

fn cmd_train(rc: &RunConfig) -> Result<()> {
    let grammar = rc.grammar();
    let scenes = gen_dataset::<f64>(rc.dataset_size, &Rng::new(rc.seed, 1), &grammar)?;
    let encoder = EncoderParams::seeded(rc.encoder_seed, rc.model.text_dim);
    let sched = NoiseSchedule::from_config(&rc.schedule)?;
    let mut model = Denoiser::new(rc.model, &Rng::new(rc.seed, 2))?;
    let every = (rc.train.steps / 20).max(1);
    let mut window = 0.0;
    let report = train_with(&mut model, &encoder, &scenes, &rc.train, &sched, &mut Rng::new(rc.seed, 3), |step, _, loss| {
        window += loss;
        if step % every == 0 {
            eprintln!("step {step:>6}  loss {:.5}", window / every as f64);
            window = 0.0;
        }
    })?;
    let mut csv = create(&rc.out("loss.csv"))?;
    writeln!(csv, "step,loss")?;
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(csv, "{},{l}", i + 1)?;
    }
    csv.flush()?;
    let path = rc.checkpoint.clone().unwrap_or_else(|| rc.out("model.sfge"));
    Checkpoint { model, encoder, schedule: rc.schedule }.save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}

fn latent_pixels(z: &Tensor<f64>) -> (usize, usize, Vec<u8>) {
    let (h, w, c) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    // Channels side by side, each on a fixed value range.
    let mut values = vec![0.0; h * w * c];
    for r in 0..h {
        for ch in 0..c {
            for col in 0..w {
                values[r * w * c + ch * w + col] = z.data()[(r * w + col) * c + ch];
            }
        }
    }
    (w * c * CELL, h * CELL, grid_to_gray(&values, h, w * c, -0.5, 1.5, CELL))
}

fn write_latent(dir: &Path, stem: &str, z: &Tensor<f64>) -> Result<()> {
    let (width, height, px) = latent_pixels(z);
    write_pgm(create(&dir.join(format!("{stem}.pgm")))?, width, height, &px)?;
    write_tensors(create(&dir.join(format!("{stem}.sfge")))?, &[("z0".to_string(), z)])
}

fn write_map(path: &Path, layer: &[usize], tokens: usize, h: usize, w: usize) -> Result<()> {
    let values: Vec<f64> = layer.iter().map(|&s| s as f64).collect();
    write_pgm(create(path)?, w * CELL, h * CELL, &grid_to_gray(&values, h, w, 0.0, tokens.max(1) as f64, CELL))
}

fn write_trace(path: &Path, trace: &SampleTrace) -> Result<()> {
    let mut out = create(path)?;
    trace.write_jsonl(&mut out)?;
    out.flush()?;
    Ok(())
}

struct Prompted {
    ck: Checkpoint<f64>,
    sched: NoiseSchedule<f64>,
    c: TextEmbeddings<f64>,
    neg: TextEmbeddings<f64>,
}

fn prompted(rc: &RunConfig) -> Result<Prompted> {
    let ck = load_model(rc)?;
    let sched = NoiseSchedule::from_config(&ck.schedule)?;
    let c = encode(&tokenize(rc.get("prompt")), &ck.encoder);
    let neg = if rc.get("negative").is_empty() { null_embeddings(&ck.encoder) } else { encode(&tokenize(rc.get("negative")), &ck.encoder) };
    Ok(Prompted { ck, sched, c, neg })
}

fn cmd_sample(rc: &RunConfig) -> Result<()> {
    let p = prompted(rc)?;
    let (z0, trace) = sample(&p.ck.model, &p.c, &p.neg, &rc.guidance, &p.sched, &mut Rng::new(rc.seed, 4))?;
    write_latent(&rc.out_dir, "sample", &z0)?;
    write_trace(&rc.out("trace.jsonl"), &trace)?;
    if let Some(map) = trace.final_map() {
        write_maps(&rc.out_dir, "semantic", map, p.c.content_len(), &p.ck.model)?;
    }
    println!("wrote {}", rc.out("sample.pgm").display());
    Ok(())
}

fn write_maps(dir: &Path, stem: &str, map: &SemanticMap, tokens: usize, model: &Denoiser<f64>) -> Result<()> {
    let mc = model.config();
    for (l, layer) in map.layers.iter().enumerate() {
        write_map(&dir.join(format!("{stem}_l{l}.pgm")), layer, tokens, mc.grid_h, mc.grid_w)?;
    }
    Ok(())
}

fn cmd_compare(rc: &RunConfig) -> Result<()> {
    let p = prompted(rc)?;
    let embedder = AlignmentEmbedder::seeded(rc.encoder_seed, &p.ck.encoder, &rc.grammar())?;
    let mut summary = create(&rc.out("compare.txt"))?;
    writeln!(summary, "mode,alignment,final_eps_norm")?;
    for mode in [GuidanceMode::ClassifierFree, GuidanceMode::SegmentationFree] {
        let cfg = GuidanceConfig { mode, ..rc.guidance };
        let (z0, trace) = sample(&p.ck.model, &p.c, &p.neg, &cfg, &p.sched, &mut Rng::new(rc.seed, 4))?;
        let tag = mode.to_string();
        write_latent(&rc.out_dir, &format!("{tag}_sample"), &z0)?;
        write_trace(&rc.out(&format!("{tag}_trace.jsonl")), &trace)?;
        if let Some(map) = trace.final_map() {
            write_maps(&rc.out_dir, &format!("{tag}_semantic"), map, p.c.content_len(), &p.ck.model)?;
        }
        let score = alignment_score(&z0, rc.get("prompt"), &p.ck.encoder, &embedder)?;
        let last = trace.steps.last().map_or(0.0, |s| s.eps_norm);
        writeln!(summary, "{tag},{score},{last}")?;
    }
    summary.flush()?;
    println!("wrote comparison to {}", rc.out_dir.display());
    Ok(())
}

fn cmd_frechet(rc: &RunConfig, first: &Path, second: &Path) -> Result<()> {
    let read = |p: &Path| -> Result<EmbeddingSet<f64>> { EmbeddingSet::read_csv(BufReader::new(fs::File::open(p)?)) };
    let d = frechet(&read(first)?, &read(second)?)?;
    fs::write(rc.out("frechet.txt"), format!("{d}\n"))?;
    println!("{d}");
    Ok(())
}

/// Corpus prompts with optional precomputed scores. A corpus file holds one
/// prompt per line, optionally followed by a tab and a score; without a file
/// a toy corpus of `corpus_size` grammar prompts is drawn from the seed.
fn load_corpus(rc: &RunConfig) -> Result<Vec<(String, Option<f64>)>> {
    let path = rc.get("corpus");
    if path.is_empty() {
        let n: usize = rc.number("corpus_size")?;
        let scenes = gen_dataset::<f64>(n, &Rng::new(rc.seed, 5), &rc.grammar())?;
        return Ok(scenes.into_iter().map(|s| (s.prompt, None)).collect());
    }
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((p, s)) => {
                let score = s.trim().parse().map_err(|_| Error::Format(format!("bad score in corpus line {line:?}")))?;
                out.push((p.trim().to_string(), Some(score)));
            }
            None => out.push((line.trim().to_string(), None)),
        }
    }
    if out.is_empty() {
        return Err(Error::InsufficientData("corpus is empty".into()));
    }
    Ok(out)
}

fn cmd_subset(rc: &RunConfig) -> Result<()> {
    let corpus = load_corpus(rc)?;
    let total: usize = rc.number("total")?;
    let bands: Vec<f64> = parse_list(rc.get("bands"), "bands")?;
    let prompts: Vec<String> = corpus.iter().map(|(p, _)| p.clone()).collect();
    let scores = if corpus.iter().all(|(_, s)| s.is_some()) {
        corpus.iter().map(|(_, s)| s.unwrap_or_default()).collect()
    } else {
        // Score each prompt by the alignment of one sample with its prompt.
        let ck = load_model(rc)?;
        let sched = NoiseSchedule::from_config(&ck.schedule)?;
        let embedder = AlignmentEmbedder::seeded(rc.encoder_seed, &ck.encoder, &rc.grammar())?;
        let neg = null_embeddings(&ck.encoder);
        let base = Rng::new(rc.seed, 6);
        prompts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let c = encode(&tokenize(p), &ck.encoder);
                let (z0, _) = sample(&ck.model, &c, &neg, &rc.guidance, &sched, &mut base.substream(i as u64))?;
                alignment_score(&z0, p, &ck.encoder, &embedder)
            })
            .collect::<Result<Vec<f64>>>()?
    };
    let report = subset_select(&prompts, &scores, total, &bands)?;
    let mut out = create(&rc.out("subset.csv"))?;
    report.write_csv(&mut out)?;
    out.flush()?;
    println!("selected {} of {} prompts", report.selected().len(), prompts.len());
    Ok(())
}

fn cmd_curve(rc: &RunConfig) -> Result<()> {
    let prompts: Vec<String> = load_corpus(rc)?.into_iter().map(|(p, _)| p).collect();
    let encoder = EncoderParams::<f64>::seeded(rc.encoder_seed, rc.model.text_dim);
    let set = EmbeddingSet::from_prompts(&prompts, &encoder)?;
    let sizes: Vec<usize> = parse_list(rc.get("sizes"), "sizes")?;
    let points = diversity_curve(&set, &sizes, rc.number("trials")?, &Rng::new(rc.seed, 7))?;
    let mut out = create(&rc.out("curve.csv"))?;
    write_curve_csv(&points, &mut out)?;
    out.flush()?;
    for p in &points {
        println!("{:>6}  {:.6}  {:.6}", p.size, p.mean, p.std);
    }
    Ok(())
}

fn cmd_bench(rc: &RunConfig) -> Result<()> {
    let p = prompted(rc)?;
    let r = step_benchmark(&p.ck.model, &p.c, &p.neg, &rc.guidance, rc.number("repeats")?, &mut Rng::new(rc.seed, 8))?;
    let text = format!(
        "repeats,{}\ncfg_passes,{}\nsegfree_passes,{}\ncfg_mean_s,{}\nsegfree_mean_s,{}\nratio,{}\n",
        r.repeats,
        r.cfg_passes,
        r.segfree_passes,
        r.cfg_mean,
        r.segfree_mean,
        r.ratio()
    );
    fs::write(rc.out("bench.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_dump_attn(rc: &RunConfig) -> Result<()> {
    let p = prompted(rc)?;
    let step: usize = rc.number("dump_step")?;
    if step == 0 || step > p.sched.steps() {
        return Err(Error::Config(format!("dump_step must lie in 1..={}", p.sched.steps())));
    }
    let mut captured = None;
    sample_observed(&p.ck.model, &p.c, &p.neg, &rc.guidance, &p.sched, &mut Rng::new(rc.seed, 4), |t, z| {
        if t == step {
            captured = Some(z.clone());
        }
    })?;
    let z = captured.ok_or_else(|| Error::Domain("step was not reached".into()))?;
    let mc = *p.ck.model.config();
    let cond = p.ck.model.predict_score(&z, step, &p.c, OverrideSpec::disabled())?;
    let bar = p.ck.model.predict_score(&z, step, &p.c, OverrideSpec::with_scale(rc.guidance.a)?)?;
    let tokens = p.c.rows();
    for (l, record) in cond.records.iter().enumerate() {
        for i in 0..tokens {
            let values: Vec<f64> = (0..mc.patches()).map(|q| record.weights.at(q, i)).collect();
            let px = grid_to_gray(&values, mc.grid_h, mc.grid_w, 0.0, 1.0, CELL);
            write_pgm(create(&rc.out(&format!("attn_l{l}_tok{i}.pgm")))?, mc.grid_w * CELL, mc.grid_h * CELL, &px)?;
        }
    }
    if let Some(map) = crate::sampler::semantic_map_of(&cond.records) {
        write_maps(&rc.out_dir, "semantic", &map, p.c.content_len(), &p.ck.model)?;
    }
    if let Some(map) = crate::sampler::semantic_map_of(&bar.records) {
        write_maps(&rc.out_dir, "semantic_override", &map, p.c.content_len(), &p.ck.model)?;
    }
    println!("wrote attention maps for step {step} to {}", rc.out_dir.display());
    Ok(())
}
