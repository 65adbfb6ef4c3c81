//! Acceptance run: trains (or resumes) every stage with the committed desk
//! config in `target/acceptance-run`, then checks each criterion and prints
//! one PASS/FAIL line per criterion. Trained checkpoints are reused on
//! later runs; their training wall time is kept in `timings.tsv`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use vdsk::app::{self, RunDir, Stage};
use vdsk::autoencoder::{latent_frames, psnr, LatentVideo, VideoAutoencoder};
use vdsk::checkpoint::Checkpoint;
use vdsk::config::RunConfig;
use vdsk::control::{
    finetune_subject, init_adapter, predict_noise_controlled, sample_controlled, subject_caption, DataEvent,
    SubjectData,
};
use vdsk::corpus::{
    build_corpus, edge_map, write_vclip, ClipSpec, Color, Direction, Motion, Shape, VideoClip, ALLOWED_LENGTHS,
    DEFAULT_EDGE_THRESHOLD,
};
use vdsk::diffusion::{ddim_sample, ddim_sample_with, noise_tensor, q_sample_tensor, Denoiser, SamplerConfig};
use vdsk::eval::{
    analyze_clip, centroid_displacement, conditional_accuracy, edge_agreement, gradcheck_suite, prompt_grid,
    AccuracyReport, EvalPrompt, Precision,
};
use vdsk::nn::to_vec_f64;
use vdsk::seed;
use vdsk::text::{extend_vocab_subject, tokenize, PromptTokens, Vocab};
use vdsk::uvit::{patchify_tensor, unpatchify_tensor, UViT, PREFIX_TOKENS};
use vdsk::Result;

// Tolerances and thresholds.
const GRAD_TOL_SINGLE: f64 = 1e-3;
const GRAD_TOL_DOUBLE: f64 = 1e-5;
const GRAD_BUDGET_S: f64 = 120.0;
const DDIM_TOL: f64 = 1e-4;
const MC_VAR_TOL: f64 = 0.05;
const GOLDEN_TOL: f64 = 1e-12;
const AE_MAX_STEPS: usize = 5000;
const AE_BUDGET_S: f64 = 30.0 * 60.0;
const PSNR_MIN: f64 = 25.0;
const DIFF_BUDGET_S: f64 = 2.0 * 3600.0;
const COLOR_MIN: f64 = 0.60;
const DIRECTION_MIN: f64 = 0.50;
const FRESH_ADAPTER_INPUTS: usize = 100;
const EDGE_GAIN_MIN: f64 = 0.10;
const PREDICT_RUNS: usize = 32;
const PERSIST_MIN: f64 = 0.80;
const SUBJECT_RUNS: usize = 32;
const SUBJECT_MOTION_PX: f64 = 4.0;
const SUBJECT_MOTION_FRAC: f64 = 0.60;
const PRIOR_DROP_MAX: f64 = 0.10;

struct Ctx {
    cfg: RunConfig,
    run: RunDir,
    scratch: PathBuf,
    baseline: Option<AccuracyReport>,
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn timings_path(run: &RunDir) -> PathBuf {
    run.root.join("timings.tsv")
}

fn recorded_seconds(run: &RunDir, stage: Stage) -> f64 {
    fs::read_to_string(timings_path(run))
        .unwrap_or_default()
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .filter(|(s, _)| *s == stage.name())
        .filter_map(|(_, v)| v.parse::<f64>().ok())
        .sum()
}

/// Train or resume `stage`; returns total recorded training seconds.
fn ensure_stage(ctx: &Ctx, stage: Stage) -> Result<f64> {
    let plan = app::plan_train(&ctx.cfg, &ctx.run, stage)?;
    let t0 = Instant::now();
    let report = app::exec_train(plan)?;
    if !report.losses.is_empty() {
        let secs = t0.elapsed().as_secs_f64();
        let mut log = fs::read_to_string(timings_path(&ctx.run)).unwrap_or_default();
        log.push_str(&format!("{}\t{secs:.1}\n", stage.name()));
        fs::write(timings_path(&ctx.run), log)?;
        for line in app::report_outcome(&report).messages {
            eprintln!("  {line}");
        }
    }
    Ok(recorded_seconds(&ctx.run, stage))
}

fn load_ae(ctx: &Ctx) -> Result<VideoAutoencoder> {
    app::load_ae(&ctx.run)
}

fn load_base(ctx: &Ctx) -> Result<UViT> {
    app::load_uvit(&ctx.run, Stage::Diffusion)
}

// ---------------------------------------------------------------- criteria

fn c1_gradcheck(_: &mut Ctx) -> Result<(bool, String)> {
    let t0 = Instant::now();
    let single = gradcheck_suite(Precision::Single, GRAD_TOL_SINGLE, 1);
    let double = gradcheck_suite(Precision::Double, GRAD_TOL_DOUBLE, 1);
    let secs = t0.elapsed().as_secs_f64();
    let describe = |r: &Result<vdsk::eval::GradcheckReport>| match r {
        Ok(r) => format!("max {:.2e} over {} families", r.max_error(), r.families.len()),
        Err(e) => e.to_string(),
    };
    let pass = single.is_ok() && double.is_ok() && secs < GRAD_BUDGET_S;
    Ok((pass, format!("single: {}; double: {}; {secs:.1}s (< {GRAD_BUDGET_S}s)", describe(&single), describe(&double))))
}

fn c2_structure(ctx: &mut Ctx) -> Result<(bool, String)> {
    let model = load_base(ctx)?;
    let c = model.config;
    let mut ok = true;
    let mut notes = vec![];
    for tl in 1..=4usize {
        let x = noise_tensor(tl as u64, &[2, tl, c.latent_channels, c.latent_height, c.latent_width], DType::F32)?;
        let (p, grid) = patchify_tensor(&x)?;
        let back = unpatchify_tensor(&p, grid)?;
        let exact = bits(&x)? == bits(&back)?;
        let seq = model.embed_inputs(&x, &[10, 900], &[PromptTokens::NULL, PromptTokens::NULL])?;
        let tokens = seq.tokens.dims()[1];
        let want = PREFIX_TOKENS + 16 * tl;
        let out = model.forward(&x, &[10, 900], &[PromptTokens::NULL, PromptTokens::NULL])?;
        let finite = to_vec_f64(&out)?.iter().all(|v| v.is_finite());
        ok &= exact && tokens == want && out.dims() == x.dims() && finite;
        notes.push(format!("Tl={tl}: roundtrip {} tokens {tokens}/{want}", if exact { "exact" } else { "DIFFERS" }));
    }
    Ok((ok, notes.join(", ")))
}

fn bits(t: &Tensor) -> Result<Vec<u32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?.into_iter().map(f32::to_bits).collect())
}

/// Denoiser that knows the clean sample and returns the exact noise.
struct Perfect {
    x0: Tensor,
    schedule: vdsk::diffusion::NoiseSchedule,
}

impl Denoiser for Perfect {
    fn predict(&self, x: &Tensor, t: &[usize], _p: &[PromptTokens]) -> Result<Tensor> {
        let ab = self.schedule.alpha_bar(t[0]);
        Ok(((x - (self.x0.broadcast_as(x.dims())? * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
    }
}

fn c3_algebra(ctx: &mut Ctx) -> Result<(bool, String)> {
    let schedule = app::schedule(&ctx.cfg)?;
    // DDIM with the perfect denoiser, f64.
    let x0 = (noise_tensor(3, &[1, 4, 4, 8, 8], DType::F64)? * 0.5)?;
    let model = Perfect { x0: x0.clone(), schedule: schedule.clone() };
    let config = SamplerConfig { steps: 50, guidance: 1.0, eta: 0.0, seed: 4 };
    let out = ddim_sample_with(&model, &schedule, &PromptTokens::NULL, [4, 4, 8, 8], DType::F64, &config, &mut |_, x| Ok(x))?;
    let ddim_err = to_vec_f64(&out.tensor().unsqueeze(0)?)?
        .iter()
        .zip(to_vec_f64(&x0)?)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    // Monte Carlo variance of q_sample at fixed x0.
    let mut var_err: f64 = 0.0;
    for t in [50usize, 500, 950] {
        let x0 = Tensor::full(0.7f64, (20000,), &Device::Cpu)?;
        let eps = noise_tensor(t as u64, &[20000], DType::F64)?;
        let xt = to_vec_f64(&q_sample_tensor(&x0, t, &eps, &schedule)?)?;
        let mean = xt.iter().sum::<f64>() / xt.len() as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (xt.len() - 1) as f64;
        var_err = var_err.max((var / (1.0 - schedule.alpha_bar(t)) - 1.0).abs());
    }
    // Double-precision product oracle for the cumulative schedule.
    let (n, lo, hi) = (ctx.cfg.diffusion_steps, ctx.cfg.beta_start, ctx.cfg.beta_end);
    let mut prod = 1.0f64;
    let mut golden_err: f64 = 0.0;
    for t in 1..=n {
        prod *= 1.0 - (lo + (hi - lo) * (t - 1) as f64 / (n - 1) as f64);
        golden_err = golden_err.max((schedule.alpha_bar(t) - prod).abs());
    }
    let pass = ddim_err <= DDIM_TOL && var_err <= MC_VAR_TOL && golden_err <= GOLDEN_TOL;
    Ok((
        pass,
        format!(
            "DDIM max |x0 err| {ddim_err:.2e} (<= {DDIM_TOL:.0e}); MC variance rel err {var_err:.3} (<= {MC_VAR_TOL}); alpha_bar max err {golden_err:.1e} (<= {GOLDEN_TOL:.0e})"
        ),
    ))
}

fn c4_autoencoder(ctx: &mut Ctx) -> Result<(bool, String)> {
    let secs = ensure_stage(ctx, Stage::Ae)?;
    let ae = load_ae(ctx)?;
    let clips = app::heldout_clips(&ctx.cfg)?;
    let mut per_len = vec![];
    let mut all = vec![];
    for &len in &ALLOWED_LENGTHS {
        let v: Vec<f64> = clips
            .iter()
            .filter(|c| c.frames() == len)
            .map(|c| psnr(c, &ae.decode(&ae.encode(c)?, len)?))
            .collect::<Result<_>>()?;
        per_len.push(format!("T={len}: {:.2}", v.iter().sum::<f64>() / v.len() as f64));
        all.extend(v);
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let pass = mean >= PSNR_MIN && ctx.cfg.ae_steps <= AE_MAX_STEPS && secs <= AE_BUDGET_S;
    Ok((
        pass,
        format!(
            "held-out mean PSNR {mean:.2} dB over {} clips ({}) >= {PSNR_MIN}; {} steps in {:.1} min",
            all.len(),
            per_len.join(", "),
            ctx.cfg.ae_steps,
            secs / 60.0
        ),
    ))
}

fn grid_accuracy(ae: &VideoAutoencoder, model: &UViT, cfg: &RunConfig, single_ok: &mut bool) -> Result<AccuracyReport> {
    let schedule = app::schedule(cfg)?;
    let vocab = Vocab::grammar();
    let mut sampler = |p: &EvalPrompt, s: u64| -> Result<VideoClip> {
        let tokens = tokenize(&vocab, &p.caption())?;
        let z = ddim_sample(model, &schedule, &tokens, latent_frames(p.length_frames), &app::sampler_config(cfg, s))?;
        let clip = ae.decode(&z, p.length_frames)?;
        if p.length_frames == 1 {
            *single_ok &= clip.frames() == 1 && clip.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0);
        }
        Ok(clip)
    };
    conditional_accuracy(&mut sampler, &prompt_grid(), cfg.eval_per_prompt, seed::derive_path(cfg.seed, &[seed::stream::EVAL]))
}

fn c5_text_to_video(ctx: &mut Ctx) -> Result<(bool, String)> {
    let secs = ensure_stage(ctx, Stage::Diffusion)?;
    let ae = load_ae(ctx)?;
    let model = load_base(ctx)?;
    let mut single_ok = true;
    let r = grid_accuracy(&ae, &model, &ctx.cfg, &mut single_ok)?;
    let m = r.metrics;
    let pass = m.color_acc >= COLOR_MIN && m.direction_acc >= DIRECTION_MIN && single_ok && secs <= DIFF_BUDGET_S;
    let detail = format!(
        "color_acc {:.3} (>= {COLOR_MIN}), direction_acc {:.3} (>= {DIRECTION_MIN}), shape_acc {:.3}, temporal {:.3} over {} samples ({} empty); 1-frame clips valid: {single_ok}; trained {:.1} min",
        m.color_acc, m.direction_acc, m.shape_acc, m.temporal_consistency, r.samples, r.empty_clips, secs / 60.0
    );
    ctx.baseline = Some(r);
    Ok((pass, detail))
}

fn c6_control(ctx: &mut Ctx) -> Result<(bool, String)> {
    let base = load_base(ctx)?;
    let fresh = init_adapter(&base, 77)?;
    let vocab = Vocab::grammar();
    let grid = prompt_grid();
    let mut rng = seed::rng(606);
    let mut identical = 0;
    for k in 0..FRESH_ADAPTER_INPUTS {
        let frames = ALLOWED_LENGTHS[k % 4];
        let x = LatentVideo::new(noise_tensor(rng.random(), &[latent_frames(frames), 4, 8, 8], DType::F32)?)?;
        let t = rng.random_range(1..=ctx.cfg.diffusion_steps);
        let prompt = if k % 5 == 0 {
            PromptTokens::NULL
        } else {
            tokenize(&vocab, &grid[rng.random_range(0..grid.len())].caption())?
        };
        let clip = build_corpus(1, rng.random(), &[frames])?.remove(0).clip;
        let ctrl = edge_map(&clip, DEFAULT_EDGE_THRESHOLD)?;
        let a = predict_noise_controlled(&base, &fresh, &x, t, &prompt, &ctrl)?;
        let b = base.predict_noise(&x, t, &prompt)?;
        identical += (bits(a.tensor())? == bits(b.tensor())?) as usize;
    }

    ensure_stage(ctx, Stage::Adapter)?;
    let adapter = app::load_adapter(&ctx.run, &base)?;
    let ae = load_ae(ctx)?;
    let schedule = app::schedule(&ctx.cfg)?;
    let items = build_corpus(32, seed::derive_path(ctx.cfg.seed, &[seed::stream::HELDOUT, 6]), &ALLOWED_LENGTHS)?;
    let (mut with, mut without) = (0.0, 0.0);
    for (i, item) in items.iter().enumerate() {
        let ctrl = edge_map(&item.clip, DEFAULT_EDGE_THRESHOLD)?;
        let prompt = tokenize(&vocab, &item.caption)?;
        let sc = app::sampler_config(&ctx.cfg, seed::derive_path(ctx.cfg.seed, &[seed::stream::SAMPLE, 600 + i as u64]));
        let frames = item.clip.frames();
        let zc = sample_controlled(&base, &adapter, &schedule, &prompt, &ctrl, &sc)?;
        let zb = ddim_sample(&base, &schedule, &prompt, latent_frames(frames), &sc)?;
        with += edge_agreement(&ae.decode(&zc, frames)?, &ctrl)?;
        without += edge_agreement(&ae.decode(&zb, frames)?, &ctrl)?;
    }
    let n = items.len() as f64;
    let (with, without) = (with / n, without / n);
    let pass = identical == FRESH_ADAPTER_INPUTS && with - without >= EDGE_GAIN_MIN;
    Ok((
        pass,
        format!(
            "fresh adapter bit-equal on {identical}/{FRESH_ADAPTER_INPUTS} inputs; edge_agreement controlled {with:.3} vs uncontrolled {without:.3} (gain {:.3} >= {EDGE_GAIN_MIN}) over {} clips",
            with - without,
            items.len()
        ),
    ))
}

fn c7_prediction(ctx: &mut Ctx) -> Result<(bool, String)> {
    let ae = load_ae(ctx)?;
    let model = load_base(ctx)?;
    let schedule = app::schedule(&ctx.cfg)?;
    let prompt = tokenize(&Vocab::grammar(), "a red square moves right")?;
    let mut rng = seed::rng(707);
    let (mut min_psnr, mut kept, mut total) = (f64::INFINITY, 0usize, 0usize);
    // Per-attribute counts, and the same score on the autoencoder round trip of the true clip.
    let (mut red, mut square, mut ceiling) = (0usize, 0usize, 0usize);
    for i in 0..PREDICT_RUNS {
        let spec = ClipSpec {
            shape: Shape::Square,
            color: Color::Red,
            motion: Some(Motion { direction: Direction::Right, speed: 1 }),
            start: (rng.random_range(0..=7), rng.random_range(0..=22)),
            length_frames: 16,
            seed: i as u64,
        };
        let input = vdsk::corpus::render_clip(&spec)?;
        let (given, gl) = app::conditioning_clip(&input, 4, 16)?;
        let sc = app::sampler_config(&ctx.cfg, seed::derive_path(ctx.cfg.seed, &[seed::stream::SAMPLE, 700 + i as u64]));
        let out = app::predict_clip(&ae, &model, &schedule, &prompt, &given, gl, 16, &sc)?;
        min_psnr = min_psnr.min(psnr(&input.frame_range(0, 4)?, &out.frame_range(0, 4)?)?);
        let round_trip = ae.decode(&ae.encode(&input)?, 16)?;
        for t in 4..16 {
            total += 1;
            if let Ok(r) = analyze_clip(&out.frame_range(t, 1)?) {
                kept += (r.color == Color::Red && r.shape == Shape::Square) as usize;
                red += (r.color == Color::Red) as usize;
                square += (r.shape == Shape::Square) as usize;
            }
            if let Ok(r) = analyze_clip(&round_trip.frame_range(t, 1)?) {
                ceiling += (r.color == Color::Red && r.shape == Shape::Square) as usize;
            }
        }
    }
    let frac = kept as f64 / total as f64;
    let pass = min_psnr >= PSNR_MIN && frac >= PERSIST_MIN;
    Ok((
        pass,
        format!(
            "given frames min PSNR {min_psnr:.2} dB (>= {PSNR_MIN}); red square kept in {kept}/{total} generated frames = {frac:.3} (>= {PERSIST_MIN}) over {PREDICT_RUNS} runs; red {red}/{total}, square {square}/{total}; autoencoder round trip of the true clip scores {ceiling}/{total}"
        ),
    ))
}

fn c8_subject(ctx: &mut Ctx) -> Result<(bool, String)> {
    let ae = load_ae(ctx)?;
    let base = load_base(ctx)?;
    let schedule = app::schedule(&ctx.cfg)?;
    let subjects = app::subject_set(&ctx.cfg)?;
    let prior = app::prior_set(&ctx.cfg)?;
    let vocab = extend_vocab_subject(&Vocab::grammar())?;
    let data = SubjectData { ae: &ae, subjects: &subjects, prior: &prior, vocab: &vocab };
    let mut events: Vec<DataEvent> = vec![];
    let sc = app::subject_config(&ctx.cfg);
    let (tuned, _) = finetune_subject(&base, &data, &schedule, &sc, &mut |e| events.push(*e))?;
    let expected = sc.steps * 2 * sc.half_batch;
    let images_only = events.len() == expected && events.iter().all(|e| e.frames == 1);

    let prompt = tokenize(&vocab, &format!("{} moves right", subject_caption()))?;
    let mut moving = 0;
    for i in 0..SUBJECT_RUNS {
        let s = app::sampler_config(&ctx.cfg, seed::derive_path(ctx.cfg.seed, &[seed::stream::SAMPLE, 800 + i as u64]));
        let clip = ae.decode(&ddim_sample(&tuned, &schedule, &prompt, 4, &s)?, 16)?;
        if centroid_displacement(&clip).map(|d| d > SUBJECT_MOTION_PX).unwrap_or(false) {
            moving += 1;
        }
    }
    let motion = moving as f64 / SUBJECT_RUNS as f64;

    let before = match &ctx.baseline {
        Some(r) => r.metrics,
        None => grid_accuracy(&ae, &base, &ctx.cfg, &mut true)?.metrics,
    };
    let after = grid_accuracy(&ae, &tuned, &ctx.cfg, &mut true)?.metrics;
    let color_drop = before.color_acc - after.color_acc;
    let dir_drop = before.direction_acc - after.direction_acc;
    let pass = images_only && motion >= SUBJECT_MOTION_FRAC && color_drop <= PRIOR_DROP_MAX && dir_drop <= PRIOR_DROP_MAX;
    Ok((
        pass,
        format!(
            "stream: {} clips, all single-frame: {images_only}; <V> motion > {SUBJECT_MOTION_PX}px in {moving}/{SUBJECT_RUNS} = {motion:.3} (>= {SUBJECT_MOTION_FRAC}); color_acc {:.3} -> {:.3}, direction_acc {:.3} -> {:.3}, shape_acc {:.3} -> {:.3} (drop <= {PRIOR_DROP_MAX})",
            events.len(),
            before.color_acc,
            after.color_acc,
            before.direction_acc,
            after.direction_acc,
            before.shape_acc,
            after.shape_acc
        ),
    ))
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn fresh_run(ctx: &Ctx, name: &str, stages: &[Stage]) -> Result<RunDir> {
    let root = ctx.scratch.join(name);
    if root.exists() {
        fs::remove_dir_all(&root)?;
    }
    fs::create_dir_all(&root)?;
    let run = RunDir::new(root);
    for &s in stages {
        fs::copy(ctx.run.checkpoint(s), run.checkpoint(s))?;
    }
    Ok(run)
}

fn c9_reproducibility(ctx: &mut Ctx) -> Result<(bool, String)> {
    let mut checks: Vec<(String, bool)> = vec![];
    let cheap = RunConfig {
        corpus_size: 16,
        num_samples: 2,
        sampler_steps: 10,
        length_frames: 8,
        stop_after: 3,
        ..ctx.cfg.clone()
    };

    // Each command twice into fresh run directories.
    let pair = |name: &str, stages: &[Stage]| -> Result<(RunDir, RunDir)> {
        Ok((fresh_run(ctx, &format!("{name}-a"), stages)?, fresh_run(ctx, &format!("{name}-b"), stages)?))
    };
    let (a, b) = pair("datagen", &[])?;
    app::exec_datagen(app::plan_datagen(&cheap, &a)?)?;
    app::exec_datagen(app::plan_datagen(&cheap, &b)?)?;
    checks.push(("datagen".into(), tree(&a.root) == tree(&b.root)));

    for stage in [Stage::Ae, Stage::Diffusion, Stage::Adapter, Stage::Subject] {
        let (a, b) = pair(&format!("train-{}", stage.name()), stage_deps(stage))?;
        for r in [&a, &b] {
            app::exec_train(app::plan_train(&cheap, r, stage)?)?;
        }
        checks.push((format!("train {}", stage.name()), tree(&a.root) == tree(&b.root)));
    }

    let (a, b) = pair("sample", &[Stage::Ae, Stage::Diffusion])?;
    for r in [&a, &b] {
        app::exec_sample(app::plan_sample(&cheap, r)?)?;
    }
    checks.push(("sample".into(), tree(&a.root) == tree(&b.root)));

    let input = ctx.scratch.join("predict-input.vclip");
    write_vclip(&input, &build_corpus(1, 9, &[16])?.remove(0).clip)?;
    let with_input = RunConfig { input: Some(input.clone()), control_input: Some(input), length_frames: 16, ..cheap.clone() };
    let (a, b) = pair("predict", &[Stage::Ae, Stage::Diffusion])?;
    for r in [&a, &b] {
        app::exec_predict(app::plan_predict(&with_input, r)?)?;
    }
    checks.push(("predict".into(), tree(&a.root) == tree(&b.root)));

    let (a, b) = pair("control", &[Stage::Ae, Stage::Diffusion, Stage::Adapter])?;
    for r in [&a, &b] {
        app::exec_control(app::plan_control(&with_input, r)?)?;
    }
    checks.push(("control".into(), tree(&a.root) == tree(&b.root)));

    let eval_cfg = RunConfig { sampler_steps: 4, ..cheap.clone() };
    let (a, b) = pair("eval", &[Stage::Ae, Stage::Diffusion])?;
    for r in [&a, &b] {
        app::exec_eval(app::plan_eval(&eval_cfg, r)?)?;
    }
    checks.push(("eval".into(), tree(&a.root) == tree(&b.root)));

    let mut round_trips = 0;
    let mut all_round_trip = true;
    for s in [Stage::Ae, Stage::Diffusion, Stage::Adapter] {
        let path = ctx.run.checkpoint(s);
        let bytes = fs::read(&path)?;
        let copy = ctx.scratch.join(format!("roundtrip-{}.ckpt", s.name()));
        Checkpoint::load(&path)?.save(&copy)?;
        all_round_trip &= fs::read(&copy)? == bytes && Checkpoint::load(&copy)?.to_bytes()? == bytes;
        round_trips += 1;
    }
    checks.push((format!("{round_trips} checkpoint round trips"), all_round_trip));

    let pass = checks.iter().all(|(_, ok)| *ok);
    let detail = checks
        .iter()
        .map(|(name, ok)| format!("{name} {}", if *ok { "identical" } else { "DIFFERS" }))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((pass, detail))
}

fn stage_deps(stage: Stage) -> &'static [Stage] {
    match stage {
        Stage::Ae => &[],
        Stage::Diffusion => &[Stage::Ae],
        Stage::Adapter | Stage::Subject => &[Stage::Ae, Stage::Diffusion],
    }
}

type Check = fn(&mut Ctx) -> Result<(bool, String)>;

fn main() {
    let root = workspace_root();
    let cfg = RunConfig::load(&root.join("configs/desk.conf")).expect("committed config parses");
    let run_root = root.join("target/acceptance-run");
    fs::create_dir_all(&run_root).unwrap();
    let scratch = run_root.join("scratch");
    fs::create_dir_all(&scratch).unwrap();
    let mut ctx = Ctx { cfg, run: RunDir::new(run_root), scratch, baseline: None };

    // Training stages run inside the criteria that need them; order matters.
    let criteria: [(&str, Check); 9] = [
        ("numerics", c1_gradcheck),
        ("autoencoder", c4_autoencoder),
        ("structure", c2_structure),
        ("diffusion algebra", c3_algebra),
        ("text-to-video", c5_text_to_video),
        ("control", c6_control),
        ("prediction", c7_prediction),
        ("subject", c8_subject),
        ("reproducibility", c9_reproducibility),
    ];
    let ids = [1, 4, 2, 3, 5, 6, 7, 8, 9];
    let mut lines = vec![];
    for ((name, check), id) in criteria.into_iter().zip(ids) {
        if id == 2 {
            // Structure needs a trained denoiser.
            if let Err(e) = ensure_stage(&ctx, Stage::Diffusion) {
                lines.push((id, format!("criterion {id} [{name}]: FAIL  training failed: {e}"), false));
                continue;
            }
        }
        let t0 = Instant::now();
        let (pass, detail) = match check(&mut ctx) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let line = format!(
            "criterion {id} [{name}]: {}  {detail}  ({:.0}s)",
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
        eprintln!("{line}");
        lines.push((id, line, pass));
    }
    lines.sort_by_key(|l| l.0);
    println!("\nacceptance summary");
    for (_, line, _) in &lines {
        println!("{line}");
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.2).map(|l| l.0).collect();
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
