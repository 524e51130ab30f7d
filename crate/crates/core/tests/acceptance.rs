//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use segfree::checkpoint::Checkpoint;
use segfree::denoiser::{Denoiser, ModelConfig, OverrideSpec};
use segfree::eval::{diversity_curve, frechet, step_benchmark, EmbeddingSet};
use segfree::guidance::{classifier_free_combine, local_semantics, segmentation_free_combine, GuidanceConfig, GuidanceMode};
use segfree::linalg::{mean_cov, sqrtm_spd};
use segfree::sampler::sample;
use segfree::schedule::{make_schedule, NoiseSchedule, ScheduleConfig};
use segfree::tensor::Tensor;
use segfree::text::{encode, null_embeddings, tokenize, EncoderParams};
use segfree::train::{gradient_check, train_with, EvalBatch, TrainConfig};
use segfree::world::{gen_dataset, random_map_baseline, semantic_map_score, Grammar, ToyScene};
use segfree::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within(elapsed: Duration, cap: Duration, detail: String) -> Outcome {
    check(elapsed <= cap, format!("{detail}; {:.2}s of {:.0}s budget", elapsed.as_secs_f64(), cap.as_secs_f64()))
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn schedule_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(101, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        // Endpoints stay within |lambda| <= 20, where adjacent sigmoid values
        // remain distinct in f64.
        let steps = 2 + rng.below(999);
        let lambda_max = -19.0 + 39.0 * rng.uniform();
        let lambda_min = lambda_max - 1.0 - (lambda_max + 19.0) * rng.uniform();
        let s = make_schedule::<f64>(steps, lambda_max, lambda_min).map_err(fail)?;
        for t in 1..=steps {
            let (a, sg) = (s.alpha(t), s.sigma(t));
            worst = worst.max((a * a + sg * sg - 1.0).abs());
            if t > 1 && !(s.lambda(t) < s.lambda(t - 1) && a < s.alpha(t - 1) && sg > s.sigma(t - 1)) {
                return Err(format!("not strictly monotone at t = {t} of {steps} ({lambda_max}, {lambda_min})"));
            }
        }
    }
    if worst > 1e-12 {
        return Err(format!("|alpha^2 + sigma^2 - 1| reached {worst:e}"));
    }
    within(start.elapsed(), Duration::from_secs(1), format!("max |alpha^2 + sigma^2 - 1| = {worst:.1e}"))
}

fn guidance_arithmetic() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(102, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = 1 + rng.below(64);
        let a: Tensor<f64> = rng.randn(&[n]);
        let b: Tensor<f64> = rng.randn(&[n]);
        let w = 20.0 * rng.uniform();
        let cf = classifier_free_combine(&a, &b, w).map_err(fail)?;
        let sf = segmentation_free_combine(&a, &b, w).map_err(fail)?;
        for i in 0..n {
            let hand = (1.0 + w) * a.data()[i] - w * b.data()[i];
            worst = worst.max((cf.data()[i] - hand).abs()).max((sf.data()[i] - hand).abs());
        }
        let fixed = [
            classifier_free_combine(&a, &b, 0.0).map_err(fail)?,
            segmentation_free_combine(&a, &b, 0.0).map_err(fail)?,
            classifier_free_combine(&a, &a, w).map_err(fail)?,
            segmentation_free_combine(&a, &a, w).map_err(fail)?,
        ];
        if fixed.iter().any(|f| f != &a) {
            return Err("a fixed point was not exact".into());
        }
    }
    if worst > 1e-12 {
        return Err(format!("combine deviates from hand arithmetic by {worst:e}"));
    }
    within(start.elapsed(), Duration::from_secs(1), format!("max deviation {worst:.1e}, fixed points exact"))
}

fn small_model(seed: u64) -> Result<Denoiser<f64>, String> {
    Denoiser::new(ModelConfig::default(), &Rng::new(seed, 0)).map_err(fail)
}

fn sampler_structure() -> Outcome {
    let start = Instant::now();
    let model = small_model(103)?;
    let enc = EncoderParams::<f64>::seeded(1, 32);
    let c = encode(&tokenize("a red square left of a blue circle"), &enc);
    let neg = null_embeddings(&enc);
    let sched = make_schedule::<f64>(20, 10.0, -10.0).map_err(fail)?;
    let cfg = GuidanceConfig { t_s: 10, ..GuidanceConfig::for_steps(20) };
    let (_, trace) = sample(&model, &c, &neg, &cfg, &sched, &mut Rng::new(5, 4)).map_err(fail)?;
    for step in &trace.steps {
        let want = if step.t >= 10 { GuidanceMode::ClassifierFree } else { GuidanceMode::SegmentationFree };
        if step.mode != want {
            return Err(format!("t = {} ran {:?}", step.t, step.mode));
        }
    }
    let ts: Vec<usize> = trace.steps.iter().map(|s| s.t).collect();
    if ts != (1..=20).rev().collect::<Vec<_>>() {
        return Err(format!("unexpected step order {ts:?}"));
    }
    let bytes = |mode, t_s| -> Result<(Vec<u8>, Vec<u8>), String> {
        let g = GuidanceConfig { mode, t_s, ..cfg };
        let (z, tr) = sample(&model, &c, &neg, &g, &sched, &mut Rng::new(5, 4)).map_err(fail)?;
        let mut jsonl = Vec::new();
        tr.write_jsonl(&mut jsonl).map_err(fail)?;
        Ok((z.data().iter().flat_map(|v| v.to_le_bytes()).collect(), jsonl))
    };
    let full = bytes(GuidanceMode::SegmentationFree, 20)?;
    let cf = bytes(GuidanceMode::ClassifierFree, 10)?;
    if full != cf {
        return Err("t_s = T run differs from classifier-free".into());
    }
    within(start.elapsed(), Duration::from_secs(10), "CF at t = 20..10, SF at t = 9..1; t_s = T byte-identical to CF".into())
}

/// Reference argmax over columns `1..`, first index on ties.
fn oracle_argmax(row: &[f64]) -> usize {
    let max = row[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    1 + row[1..].iter().position(|&v| v == max).expect("row has a maximum")
}

fn argmax_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(104, 0);
    let (mut ties, mut bos_max) = (0, 0);
    for _ in 0..10_000 {
        let cols = 2 + rng.below(10);
        let mut row: Vec<f64> = (0..cols).map(|_| rng.uniform()).collect();
        match rng.below(3) {
            0 => {
                let k = 1 + rng.below(cols - 1);
                let v = row[k];
                for j in 1..cols {
                    if rng.bernoulli(0.5) {
                        row[j] = v;
                    }
                }
                row[k] = v;
                let top = row[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                ties += usize::from(row[1..].iter().filter(|&&x| x == top).count() > 1);
            }
            1 => {
                row[0] = 10.0;
                bos_max += 1;
            }
            _ => {}
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= sum);
        let m = Tensor::matrix(1, cols, row.clone()).map_err(fail)?;
        let got = local_semantics(&m).map_err(fail)?[0];
        if got == 0 || got != oracle_argmax(&row) {
            return Err(format!("row {row:?} gave {got}"));
        }
        let k = [0.5, 3.0, 1e-3, 1e3][rng.below(4)];
        let scaled = Tensor::matrix(1, cols, row.iter().map(|x| x * k).collect()).map_err(fail)?;
        if local_semantics(&scaled).map_err(fail)?[0] != got {
            return Err(format!("scaling by {k} changed the pick for {row:?}"));
        }
    }
    within(start.elapsed(), Duration::from_secs(1), format!("10^4 rows, {ties} with ties, {bos_max} with BOS maximal"))
}

fn override_locality() -> Outcome {
    let start = Instant::now();
    let enc = EncoderParams::<f64>::seeded(1, 32);
    let mut rng = Rng::new(105, 0);
    let prompts = ["a red square left of a blue circle", "a green cross", "a yellow triangle above a red square"];
    let mut checked = 0;
    for heads in [1, 2, 4] {
        let model = Denoiser::<f64>::new(ModelConfig { heads, ..ModelConfig::default() }, &Rng::new(heads as u64, 5)).map_err(fail)?;
        for prompt in prompts {
            let c = encode(&tokenize(prompt), &enc);
            for _ in 0..3 {
                let z: Tensor<f64> = rng.randn(&[8, 8, 8]);
                let t = 1 + rng.below(20);
                let a = [1.0, 10.0, 0.5 + 20.0 * rng.uniform()][rng.below(3)];
                let pred = model.predict_score(&z, t, &c, OverrideSpec::with_scale(a).map_err(fail)?).map_err(fail)?;
                for (l, rec) in pred.records.iter().enumerate() {
                    let applied = rec.applied.as_ref().ok_or("override pass recorded no applied weights")?;
                    let picks = rec.semantics.as_ref().ok_or("override pass recorded no semantics")?;
                    for p in 0..rec.weights.rows() {
                        let (pre, post) = (rec.weights.row(p), applied.row(p));
                        let sum: f64 = pre.iter().sum();
                        if (sum - 1.0).abs() > 1e-9 {
                            return Err(format!("layer {l} patch {p}: pre-override row sums to {sum}"));
                        }
                        let changed: Vec<usize> = (0..pre.len()).filter(|&j| pre[j] != post[j]).collect();
                        if changed != [picks[p]] || picks[p] != oracle_argmax(pre) {
                            return Err(format!("layer {l} patch {p}: changed {changed:?}, pick {}", picks[p]));
                        }
                        let s = picks[p];
                        let want = -a * pre[s];
                        if (post[s] - want).abs() > 1e-12 * want.abs().max(1e-300) {
                            return Err(format!("layer {l} patch {p}: {} != -a * {}", post[s], pre[s]));
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(5), format!("{checked} patch rows over heads 1, 2, 4"))
}

fn column(values: &[f64]) -> EmbeddingSet<f64> {
    EmbeddingSet::unlabelled(Tensor::matrix(values.len(), 1, values.to_vec()).unwrap()).unwrap()
}

fn frechet_correctness() -> Outcome {
    let mut rng = Rng::new(106, 0);
    let x = EmbeddingSet::unlabelled(rng.randn::<f64>(&[200, 6])).map_err(fail)?;
    let same = frechet(&x, &x).map_err(fail)?;
    if same.abs() > 1e-8 {
        return Err(format!("identical sets gave {same:e}"));
    }
    let mut worst_1d: f64 = 0.0;
    for _ in 0..50 {
        let n1 = 5 + rng.below(100);
        let n2 = 5 + rng.below(100);
        let (m1, s1, m2, s2) = (4.0 * rng.normal(), 0.1 + 3.0 * rng.uniform(), 4.0 * rng.normal(), 0.1 + 3.0 * rng.uniform());
        let a: Vec<f64> = (0..n1).map(|_| m1 + s1 * rng.normal()).collect();
        let b: Vec<f64> = (0..n2).map(|_| m2 + s2 * rng.normal()).collect();
        let stats = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (mean, var.sqrt())
        };
        let ((ma, sa), (mb, sb)) = (stats(&a), stats(&b));
        let closed = (ma - mb).powi(2) + (sa - sb).powi(2);
        worst_1d = worst_1d.max((frechet(&column(&a), &column(&b)).map_err(fail)? - closed).abs());
    }
    if worst_1d > 1e-8 {
        return Err(format!("1-D closed form off by {worst_1d:e}"));
    }
    let delta: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
    let shifted = Tensor::new(
        vec![200, 6],
        x.data().data().iter().enumerate().map(|(i, v)| v + delta[i % 6]).collect(),
    )
    .map_err(fail)?;
    let shift = frechet(&x, &EmbeddingSet::unlabelled(shifted).map_err(fail)?).map_err(fail)?;
    let norm2: f64 = delta.iter().map(|d| d * d).sum();
    if (shift - norm2).abs() > 1e-8 {
        return Err(format!("mean shift gave {shift}, want {norm2}"));
    }
    let mut worst_sqrt: f64 = 0.0;
    for k in 0..20 {
        let d = 2 + k % 8;
        let (_, cov) = mean_cov(&rng.randn::<f64>(&[3 * d + 5, d])).map_err(fail)?;
        let root = sqrtm_spd(&cov).map_err(fail)?;
        for i in 0..d {
            for j in 0..d {
                let product: f64 = (0..d).map(|k| root.at(i, k) * root.at(k, j)).sum();
                worst_sqrt = worst_sqrt.max((product - cov.at(i, j)).abs());
            }
        }
    }
    check(
        worst_sqrt < 1e-8,
        format!("identity {same:.1e}, 1-D max err {worst_1d:.1e}, shift err {:.1e}, sqrtm err {worst_sqrt:.1e}", (shift - norm2).abs()),
    )
}

fn diversity_trend() -> Outcome {
    let start = Instant::now();
    let enc = EncoderParams::<f64>::seeded(1, 32);
    let scenes = gen_dataset::<f64>(3000, &Rng::new(107, 0), &Grammar::default()).map_err(fail)?;
    let prompts: Vec<String> = scenes.into_iter().map(|s| s.prompt).collect();
    let set = EmbeddingSet::from_prompts(&prompts, &enc).map_err(fail)?;
    let curve = diversity_curve(&set, &[50, 1000], 10, &Rng::new(107, 1)).map_err(fail)?;
    let (small, large) = (curve[0].mean, curve[1].mean);
    if !(large < small) {
        return Err(format!("size 1000 mean {large} is not below size 50 mean {small}"));
    }
    within(start.elapsed(), Duration::from_secs(30), format!("size 50: {small:.4}, size 1000: {large:.4}"))
}

fn trainer_soundness() -> Outcome {
    let start = Instant::now();
    let enc = EncoderParams::<f64>::seeded(1, 32);
    let c = encode(&tokenize("a blue circle right of a yellow cross"), &enc);
    let mut fd_worst: f64 = 0.0;
    for heads in [1, 2] {
        let model = Denoiser::<f64>::new(ModelConfig { heads, ..ModelConfig::default() }, &Rng::new(108, heads as u64)).map_err(fail)?;
        fd_worst = fd_worst.max(gradient_check(&model, &c, 10, 1e-5, &mut Rng::new(108, 10 + heads as u64)).map_err(fail)?);
    }
    if fd_worst >= 1e-4 {
        return Err(format!("finite-difference relative error {fd_worst:e}"));
    }
    let sched = make_schedule::<f64>(20, 10.0, -10.0).map_err(fail)?;
    let tc = TrainConfig { steps: 2000, ..TrainConfig::default() };
    let mut summary = Vec::new();
    for seed in 0..3u64 {
        let scenes = gen_dataset::<f64>(2000, &Rng::new(seed, 1), &Grammar::default()).map_err(fail)?;
        let eval = EvalBatch::new(&scenes, &enc, 64, &sched, &mut Rng::new(seed, 9)).map_err(fail)?;
        let mut model = small_model(seed)?;
        let mut at = BTreeMap::new();
        let mut eval_err = None;
        train_with(&mut model, &enc, &scenes, &tc, &sched, &mut Rng::new(seed, 3), |step, m, _| {
            if step == 50 || step == 2000 {
                match eval.loss(m) {
                    Ok(v) => {
                        at.insert(step, v);
                    }
                    Err(e) => eval_err = Some(e.to_string()),
                }
            }
        })
        .map_err(fail)?;
        if let Some(e) = eval_err {
            return Err(e);
        }
        let (early, late) = (at[&50], at[&2000]);
        summary.push(format!("seed {seed}: {early:.3} -> {late:.3}"));
        if !(late < early) {
            return Err(format!("loss did not fall: {}", summary.join(", ")));
        }
    }
    within(start.elapsed(), Duration::from_secs(300), format!("FD rel err {fd_worst:.1e}; {}", summary.join(", ")))
}

struct Trained {
    model: Denoiser<f64>,
    encoder: EncoderParams<f64>,
    schedule: NoiseSchedule<f64>,
}

fn train_reference() -> Result<(Trained, Duration), String> {
    let start = Instant::now();
    let encoder = EncoderParams::<f64>::seeded(1, 32);
    let schedule = NoiseSchedule::from_config(&ScheduleConfig::default()).map_err(fail)?;
    let scenes = gen_dataset::<f64>(2000, &Rng::new(0, 1), &Grammar::default()).map_err(fail)?;
    let mut model = Denoiser::new(ModelConfig::default(), &Rng::new(0, 2)).map_err(fail)?;
    segfree::train::train(&mut model, &encoder, &scenes, &TrainConfig::default(), &schedule, &mut Rng::new(0, 3)).map_err(fail)?;
    Ok((Trained { model, encoder, schedule }, start.elapsed()))
}

fn semantic_behavior(trained: &Trained, train_time: Duration) -> Outcome {
    if train_time > Duration::from_secs(600) {
        return Err(format!("training took {:.0}s", train_time.as_secs_f64()));
    }
    let grammar = Grammar::default();
    let scenes = gen_dataset::<f64>(50, &Rng::new(109, 0), &grammar.clone().only_two_objects()).map_err(fail)?;
    let neg = null_embeddings(&trained.encoder);
    let cfg = GuidanceConfig { a: 10.0, ..GuidanceConfig::for_steps(trained.schedule.steps()) };
    let mut segmented = Vec::new();
    let mut scores = Vec::new();
    let mut uncovered = 0;
    for (i, scene) in scenes.iter().enumerate() {
        let c = encode(&tokenize(&scene.prompt), &trained.encoder);
        let (z0, trace) = sample(&trained.model, &c, &neg, &cfg, &trained.schedule, &mut Rng::new(109, 100 + i as u64)).map_err(fail)?;
        let map = trace.final_map().ok_or("segmentation-free run produced no semantic map")?;
        let seg = ToyScene::from_latent(z0, &scene.prompt, &grammar).map_err(fail)?;
        match semantic_map_score(map, &seg) {
            Ok(v) => {
                scores.push(v);
                segmented.push(seg);
            }
            Err(_) => uncovered += 1,
        }
    }
    if scores.len() < 25 {
        return Err(format!("only {} of 50 samples contained a recognisable object", scores.len()));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let (base, std) = random_map_baseline(&segmented, trained.model.config().layers, 200, &mut Rng::new(109, 1)).map_err(fail)?;
    check(
        mean >= base + 2.0 * std,
        format!(
            "score {mean:.4} vs baseline {base:.4} +/- {std:.4} over {} scenes ({uncovered} without objects); trained in {:.0}s",
            scores.len(),
            train_time.as_secs_f64()
        ),
    )
}

fn cost_parity(trained: &Trained) -> Outcome {
    let c = encode(&tokenize("a red square left of a blue circle"), &trained.encoder);
    let neg = null_embeddings(&trained.encoder);
    let cfg = GuidanceConfig::for_steps(trained.schedule.steps());
    let r = step_benchmark(&trained.model, &c, &neg, &cfg, 100, &mut Rng::new(110, 0)).map_err(fail)?;
    check(
        r.cfg_passes == 2 && r.segfree_passes == 2 && r.ratio() <= 1.3,
        format!(
            "passes {} vs {}; step time {:.3}ms vs {:.3}ms, ratio {:.3}",
            r.cfg_passes,
            r.segfree_passes,
            r.cfg_mean * 1e3,
            r.segfree_mean * 1e3,
            r.ratio()
        ),
    )
}

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(fail)? {
        let path = entry.map_err(fail)?.path();
        out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).map_err(fail)?);
    }
    Ok(out)
}

fn determinism(trained: &Trained) -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let ck_path = dir.path().join("model.sfge");
    let ck = Checkpoint { model: trained.model.clone(), encoder: trained.encoder.clone(), schedule: ScheduleConfig::default() };
    ck.save(&ck_path).map_err(fail)?;
    let out = dir.path().join("out");
    let argv = [
        "sfge",
        "compare",
        "--checkpoint",
        ck_path.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--prompt",
        "a green triangle above a yellow cross",
        "--seed",
        "11",
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let code = segfree::cli::run(argv);
        if code != 0 {
            return Err(format!("compare exited with {code}"));
        }
        runs.push(snapshot(&out)?);
    }
    let names: Vec<&String> = runs[0].keys().collect();
    let needs = |suffix: &str| names.iter().any(|n| n.ends_with(suffix));
    if !(needs(".pgm") && needs("trace.jsonl")) {
        return Err(format!("missing artifacts: {names:?}"));
    }
    let differing: Vec<&String> = runs[0].iter().filter(|(k, v)| runs[1].get(*k) != Some(v)).map(|(k, _)| k).collect();
    check(
        differing.is_empty() && runs[0].len() == runs[1].len(),
        format!("{} artifacts compared byte-for-byte, {} differ {differing:?}", names.len(), differing.len()),
    )
}

fn report(id: usize, name: &str, outcome: Outcome, started: Instant) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.2}s]");
            true
        }
        Err(detail) => {
            println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.2}s]");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    let quick: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "schedule identities", schedule_identities),
        (2, "guidance arithmetic", guidance_arithmetic),
        (3, "sampler structure", sampler_structure),
        (4, "BOS and argmax invariants", argmax_invariants),
        (5, "override locality", override_locality),
        (6, "Frechet correctness", frechet_correctness),
        (7, "diversity-curve trend", diversity_trend),
        (8, "trainer soundness", trainer_soundness),
    ];
    for (id, name, f) in quick {
        let t = Instant::now();
        ok &= report(id, name, f(), t);
    }

    let t = Instant::now();
    match train_reference() {
        Ok((trained, train_time)) => {
            ok &= report(9, "semantic behavior", semantic_behavior(&trained, train_time), t);
            let t = Instant::now();
            ok &= report(10, "cost parity", cost_parity(&trained), t);
            let t = Instant::now();
            ok &= report(11, "determinism", determinism(&trained), t);
        }
        Err(e) => {
            for (id, name) in [(9, "semantic behavior"), (10, "cost parity"), (11, "determinism")] {
                ok &= report(id, name, Err(format!("reference training failed: {e}")), t);
            }
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
