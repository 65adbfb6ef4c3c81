//! Command implementations behind the CLI. Every command is split into a
//! `plan_*` step that validates the config, inputs and prerequisite
//! checkpoints without touching the run directory, and an `exec` step.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};

use crate::autoencoder::{
    latent_frames, psnr, sample_ae_batch, AeConfig, AeTrainer, LatentVideo, VideoAutoencoder, TEMPORAL_FACTOR,
};
use crate::checkpoint::{write_atomic, Checkpoint, SectionTag};
use crate::config::RunConfig;
use crate::control::{
    init_adapter, predict_frames, sample_controlled, subject_step, ControlAdapter, FrameMask, SubjectConfig,
    SubjectData, SubjectSet,
};
use crate::corpus::{
    build_corpus, caption_of, edge_map, read_vclip, render_clip, write_ppm_frames, write_vclip, ClipSpec, CorpusItem,
    VideoClip, ALLOWED_LENGTHS, DEFAULT_EDGE_THRESHOLD,
};
use crate::diffusion::{ddim_sample, make_schedule, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::eval::{conditional_accuracy, edge_agreement, prompt_grid, AccuracyReport, EvalPrompt};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::seed::{self, stream};
use crate::text::{extend_vocab_subject, recaption, tokenize, PromptTokens, SynonymTable, Vocab};
use crate::train::{encode_corpus, AdapterTrainer, DiffusionTrainer, StageConfig};
use crate::uvit::{UViT, UViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ae,
    Diffusion,
    Adapter,
    Subject,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ae => "ae",
            Stage::Diffusion => "diffusion",
            Stage::Adapter => "adapter",
            Stage::Subject => "subject",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ae" => Ok(Stage::Ae),
            "diffusion" => Ok(Stage::Diffusion),
            "adapter" => Ok(Stage::Adapter),
            "subject" => Ok(Stage::Subject),
            _ => Err(Error::Config(format!("unknown stage `{s}`; expected ae, diffusion, adapter or subject"))),
        }
    }

    fn tag(self) -> SectionTag {
        match self {
            Stage::Ae => SectionTag::Aenc,
            Stage::Diffusion | Stage::Subject => SectionTag::Uvit,
            Stage::Adapter => SectionTag::Adpt,
        }
    }

    fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Ae => &[],
            Stage::Diffusion => &[Stage::Ae],
            Stage::Adapter | Stage::Subject => &[Stage::Ae, Stage::Diffusion],
        }
    }
}

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("{}.ckpt", stage.name()))
    }

    pub fn subject_vocab(&self) -> PathBuf {
        self.root.join("subject_vocab.ckpt")
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    /// First of `name.ext`, `name.1.ext`, `name.2.ext`, ... that does not exist.
    pub fn next_free(dir: &Path, name: &str, ext: &str) -> PathBuf {
        let with = |i: usize| {
            let stem = if i == 0 { name.to_string() } else { format!("{name}.{i}") };
            dir.join(if ext.is_empty() { stem } else { format!("{stem}.{ext}") })
        };
        (0..).map(with).find(|p| !p.exists()).expect("unbounded search")
    }
}

/// What a command produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    /// Lines for standard output.
    pub messages: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    fn say(&mut self, s: impl Into<String>) {
        self.messages.push(s.into());
    }
}

// ---------------------------------------------------------------- seeds & data

pub fn corpus_seed(cfg: &RunConfig) -> u64 {
    seed::derive_path(cfg.seed, &[stream::CORPUS])
}

pub fn heldout_seed(cfg: &RunConfig) -> u64 {
    seed::derive_path(cfg.seed, &[stream::HELDOUT])
}

/// Item `i` of every training corpus is the same clip, so smaller stage
/// corpora are prefixes of the datagen corpus.
pub fn training_corpus(cfg: &RunConfig, n: usize) -> Result<Vec<CorpusItem>> {
    build_corpus(n, corpus_seed(cfg), &cfg.corpus_lengths)
}

pub fn ae_config(cfg: &RunConfig) -> AeConfig {
    AeConfig { width1: cfg.ae_width1, width2: cfg.ae_width2, latent_channels: cfg.ae_latent_channels }
}

pub fn uvit_config(cfg: &RunConfig) -> UViTConfig {
    UViTConfig {
        latent_channels: cfg.ae_latent_channels,
        d_model: cfg.d_model,
        depth: cfg.depth,
        heads: cfg.heads,
        mlp_ratio: cfg.mlp_ratio,
        ..Default::default()
    }
}

pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
}

fn adam(lr: f64, warmup: usize) -> AdamConfig {
    let mut a = AdamConfig::with_lr(lr);
    a.warmup = warmup;
    a
}

fn stage_config(cfg: &RunConfig, stage: Stage) -> StageConfig {
    let (steps, batch, lr, warmup) = match stage {
        Stage::Ae => (cfg.ae_steps, cfg.ae_batch, cfg.ae_lr, cfg.ae_warmup),
        Stage::Diffusion => (cfg.train_steps, cfg.batch, cfg.lr, cfg.warmup),
        Stage::Adapter => (cfg.adapter_steps, cfg.adapter_batch, cfg.adapter_lr, cfg.adapter_warmup),
        Stage::Subject => (cfg.subject_steps, 2 * cfg.subject_half_batch, cfg.subject_lr, cfg.subject_warmup),
    };
    StageConfig { steps, batch, adam: adam(lr, warmup), p_uncond: cfg.p_uncond, seed: cfg.seed }
}

pub fn subject_config(cfg: &RunConfig) -> SubjectConfig {
    SubjectConfig {
        steps: cfg.subject_steps,
        half_batch: cfg.subject_half_batch,
        adam: adam(cfg.subject_lr, cfg.subject_warmup),
        p_drop: cfg.p_uncond,
        seed: cfg.seed,
    }
}

pub fn subject_set(cfg: &RunConfig) -> Result<SubjectSet> {
    SubjectSet::render(cfg.subject_images, seed::derive_path(cfg.seed, &[stream::SUBJECT_DATA]))
}

pub fn prior_set(cfg: &RunConfig) -> Result<Vec<CorpusItem>> {
    build_corpus(cfg.prior_images, seed::derive_path(cfg.seed, &[stream::PRIOR_DATA]), &[1])
}

/// Settings that must not change while a stage is resumed.
fn fingerprint(cfg: &RunConfig, stage: Stage) -> String {
    let s = stage_config(cfg, stage);
    let common = format!(
        "seed={} batch={} lr={} warmup={} lengths={:?}",
        cfg.seed, s.batch, s.adam.lr, s.adam.warmup, cfg.corpus_lengths
    );
    let ae = format!("ae={}x{}x{} ae_corpus={}", cfg.ae_width1, cfg.ae_width2, cfg.ae_latent_channels, cfg.ae_corpus_size);
    let net = format!(
        "d={} depth={} heads={} mlp={} T={} beta={}..{} p_uncond={}",
        cfg.d_model, cfg.depth, cfg.heads, cfg.mlp_ratio, cfg.diffusion_steps, cfg.beta_start, cfg.beta_end, cfg.p_uncond
    );
    match stage {
        Stage::Ae => format!("{common} {ae}"),
        Stage::Diffusion => format!("{common} {ae} {net} corpus={}", cfg.corpus_size),
        Stage::Adapter => format!("{common} {ae} {net} adapter_corpus={}", cfg.adapter_corpus_size),
        Stage::Subject => format!("{common} {ae} {net} subjects={} prior={}", cfg.subject_images, cfg.prior_images),
    }
}

// ---------------------------------------------------------------- checkpoints

const OPT: &str = "opt/";
const PARAM: &str = "param/";

fn stage_checkpoint(stage: Stage, cfg: &RunConfig, params: &ParamStore, adam: &Adam, step: usize) -> Checkpoint {
    let mut ck = Checkpoint::new(stage.tag());
    ck.set_meta("stage", stage.name());
    ck.set_meta("fingerprint", fingerprint(cfg, stage));
    ck.set_meta("step", step);
    ck.set_meta("adam_step", adam.steps_taken());
    ck.set_meta("complete", step >= stage_config(cfg, stage).steps);
    ck.add_store(PARAM, params);
    for (name, t) in adam.state() {
        ck.add(format!("{OPT}{name}"), t);
    }
    ck
}

fn uvit_meta(ck: &mut Checkpoint, c: &UViTConfig) {
    ck.set_meta("d_model", c.d_model);
    ck.set_meta("depth", c.depth);
    ck.set_meta("heads", c.heads);
    ck.set_meta("mlp_ratio", c.mlp_ratio);
    ck.set_meta("latent_channels", c.latent_channels);
    ck.set_meta("vocab_size", c.vocab_size);
}

fn uvit_from_meta(ck: &Checkpoint) -> Result<UViTConfig> {
    Ok(UViTConfig {
        d_model: ck.meta_parse("d_model")?,
        depth: ck.meta_parse("depth")?,
        heads: ck.meta_parse("heads")?,
        mlp_ratio: ck.meta_parse("mlp_ratio")?,
        latent_channels: ck.meta_parse("latent_channels")?,
        vocab_size: ck.meta_parse("vocab_size")?,
        ..Default::default()
    })
}

fn require(run: &RunDir, stage: Stage) -> Result<Checkpoint> {
    let path = run.checkpoint(stage);
    if !path.exists() {
        return Err(Error::Dependency {
            stage: stage.name().into(),
            detail: format!("{} not found; run `train --stage {}` first", path.display(), stage.name()),
        });
    }
    let ck = Checkpoint::load_tagged(&path, stage.tag())?;
    if ck.meta("complete")? != "true" {
        return Err(Error::Dependency {
            stage: stage.name().into(),
            detail: format!("{} is a partial checkpoint at step {}; finish training first", path.display(), ck.meta("step")?),
        });
    }
    Ok(ck)
}

pub fn load_ae(run: &RunDir) -> Result<VideoAutoencoder> {
    let ck = require(run, Stage::Ae)?;
    let config = AeConfig {
        width1: ck.meta_parse("width1")?,
        width2: ck.meta_parse("width2")?,
        latent_channels: ck.meta_parse("latent_channels")?,
    };
    VideoAutoencoder::from_store(config, ck.store(PARAM)?, ck.meta_parse("latent_scale")?)
}

pub fn load_uvit(run: &RunDir, stage: Stage) -> Result<UViT> {
    let ck = require(run, stage)?;
    UViT::from_store(uvit_from_meta(&ck)?, ck.store(PARAM)?)
}

pub fn load_adapter(run: &RunDir, base: &UViT) -> Result<ControlAdapter> {
    let ck = require(run, Stage::Adapter)?;
    ControlAdapter::from_store(base.config, ck.store(PARAM)?)
}

pub fn load_subject_vocab(run: &RunDir) -> Result<Vocab> {
    let path = run.subject_vocab();
    if !path.exists() {
        return Err(Error::Dependency { stage: "subject".into(), detail: format!("{} not found", path.display()) });
    }
    let ck = Checkpoint::load_tagged(&path, SectionTag::Embd)?;
    let n: usize = ck.meta_parse("vocab_len")?;
    let tsv: String = (0..n).map(|i| Ok(format!("{}\n", ck.meta(&format!("token.{i:03}"))?))).collect::<Result<_>>()?;
    Vocab::from_tsv(&tsv)
}

fn vocab_checkpoint(vocab: &Vocab, model: &UViT) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(SectionTag::Embd);
    let tsv = vocab.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    ck.set_meta("vocab_len", lines.len());
    for (i, l) in lines.iter().enumerate() {
        ck.set_meta(&format!("token.{i:03}"), l);
    }
    ck.add("text_embed", model.store().get(crate::uvit::TEXT_EMBED)?);
    Ok(ck)
}

// ---------------------------------------------------------------- training

/// Result of one `train` invocation.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub stage: Stage,
    /// Steps completed before this invocation.
    pub start: usize,
    /// Steps completed after it.
    pub end: usize,
    pub losses: Vec<f64>,
    pub log: Option<PathBuf>,
    /// Held-out metric reported by the final line (AE: PSNR).
    pub final_metric: Option<(String, f64)>,
}

pub struct TrainPlan {
    stage: Stage,
    cfg: RunConfig,
    run: RunDir,
    resume: Option<Checkpoint>,
}

pub fn plan_train(cfg: &RunConfig, run: &RunDir, stage: Stage) -> Result<TrainPlan> {
    cfg.validate()?;
    for &dep in stage.prerequisites() {
        require(run, dep)?;
    }
    let path = run.checkpoint(stage);
    let resume = if path.exists() {
        let ck = Checkpoint::load_tagged(&path, stage.tag())?;
        let want = fingerprint(cfg, stage);
        if ck.meta("fingerprint")? != want {
            return Err(Error::Config(format!(
                "{} was trained with different settings ({}); use a fresh --out directory",
                path.display(),
                ck.meta("fingerprint")?
            )));
        }
        Some(ck)
    } else {
        None
    };
    Ok(TrainPlan { stage, cfg: cfg.clone(), run: run.clone(), resume })
}

/// Drives `step` from the resume point to the target, saving every
/// `checkpoint_every` steps, honouring `stop_after`, and writing one loss
/// line per step to a fresh log file.
fn drive(
    plan: &TrainPlan,
    start: usize,
    mut step: impl FnMut(usize) -> Result<f64>,
    mut save: impl FnMut(usize) -> Result<()>,
) -> Result<(usize, Vec<f64>, Option<PathBuf>)> {
    let total = stage_config(&plan.cfg, plan.stage).steps;
    let end = if plan.cfg.stop_after > 0 { total.min(start + plan.cfg.stop_after) } else { total };
    if start >= end {
        return Ok((start, vec![], None));
    }
    fs::create_dir_all(plan.run.logs())?;
    let log_path = RunDir::next_free(&plan.run.logs(), &format!("train_{}", plan.stage.name()), "log");
    let mut log = String::new();
    let mut losses = Vec::with_capacity(end - start);
    for s in start..end {
        let loss = step(s)?;
        losses.push(loss);
        log.push_str(&format!("{}\t{loss:.6}\n", s + 1));
        let done = s + 1;
        if done % plan.cfg.checkpoint_every == 0 || done == end {
            save(done)?;
            write_atomic(&log_path, log.as_bytes())?;
        }
    }
    Ok((end, losses, Some(log_path)))
}

fn resume_state(plan: &TrainPlan) -> Result<(usize, Option<(ParamStore, Adam)>)> {
    let sc = stage_config(&plan.cfg, plan.stage);
    match &plan.resume {
        None => Ok((0, None)),
        Some(ck) => {
            let step: usize = ck.meta_parse("step")?;
            let adam = Adam::restore(sc.adam, ck.meta_parse("adam_step")?, ck.entries(OPT))?;
            Ok((step, Some((ck.store(PARAM)?, adam))))
        }
    }
}

pub fn exec_train(plan: TrainPlan) -> Result<TrainReport> {
    match plan.stage {
        Stage::Ae => train_ae(&plan),
        Stage::Diffusion => train_diffusion(&plan),
        Stage::Adapter => train_adapter(&plan),
        Stage::Subject => train_subject(&plan),
    }
}

fn train_ae(plan: &TrainPlan) -> Result<TrainReport> {
    let cfg = &plan.cfg;
    let sc = stage_config(cfg, Stage::Ae);
    let (start, state) = resume_state(plan)?;
    let (ae, opt) = match state {
        Some((store, adam)) => (VideoAutoencoder::from_store(ae_config(cfg), store, 1.0)?, adam),
        None => (
            VideoAutoencoder::init(ae_config(cfg), seed::derive_path(cfg.seed, &[stream::AE_INIT]), DType::F32)?,
            Adam::new(sc.adam),
        ),
    };
    let corpus = training_corpus(cfg, cfg.ae_corpus_size)?;
    let path = plan.run.checkpoint(Stage::Ae);
    let save_partial = |t: &AeTrainer, done: usize| -> Result<Checkpoint> {
        let mut ck = stage_checkpoint(Stage::Ae, cfg, t.ae.store(), &t.adam, done);
        ck.set_meta("width1", cfg.ae_width1);
        ck.set_meta("width2", cfg.ae_width2);
        ck.set_meta("latent_channels", cfg.ae_latent_channels);
        ck.set_meta("latent_scale", 1.0);
        Ok(ck)
    };
    let trainer_cell = std::cell::RefCell::new(AeTrainer::new(ae, opt));
    let (end, losses, log) = drive(
        plan,
        start,
        |s| {
            let batch = sample_ae_batch(&corpus, sc.batch, seed::derive_path(cfg.seed, &[stream::AE_TRAIN, s as u64]), DType::F32)?;
            trainer_cell.borrow_mut().train_step(&batch, s)
        },
        |done| {
            let t = trainer_cell.borrow();
            let mut ck = save_partial(&t, done)?;
            if done >= sc.steps {
                let mut ae = VideoAutoencoder::from_store(ae_config(cfg), t.ae.store().deep_copy()?, 1.0)?;
                let clips: Vec<VideoClip> = corpus.iter().take(256).map(|c| c.clip.clone()).collect();
                ck.set_meta("latent_scale", ae.calibrate_latent_scale(&clips)?);
            }
            ck.save(&path)
        },
    )?;
    let final_metric = if end >= sc.steps { Some(("heldout_psnr".to_string(), heldout_psnr(&load_ae(&plan.run)?, cfg)?)) } else { None };
    Ok(TrainReport { stage: Stage::Ae, start, end, losses, log, final_metric })
}

/// Mean PSNR of AE round trips over 64 held-out clips, 16 per length.
pub fn heldout_psnr(ae: &VideoAutoencoder, cfg: &RunConfig) -> Result<f64> {
    let clips = heldout_clips(cfg)?;
    let mut sum = 0.0;
    for c in &clips {
        sum += psnr(c, &ae.decode(&ae.encode(c)?, c.frames())?)?;
    }
    Ok(sum / clips.len() as f64)
}

pub fn heldout_clips(cfg: &RunConfig) -> Result<Vec<VideoClip>> {
    let root = heldout_seed(cfg);
    let mut out = Vec::with_capacity(64);
    for (k, &len) in ALLOWED_LENGTHS.iter().enumerate() {
        out.extend(build_corpus(16, seed::derive_seed(root, k as u64), &[len])?.into_iter().map(|i| i.clip));
    }
    Ok(out)
}

fn train_diffusion(plan: &TrainPlan) -> Result<TrainReport> {
    let cfg = &plan.cfg;
    let sc = stage_config(cfg, Stage::Diffusion);
    let (start, state) = resume_state(plan)?;
    let ucfg = uvit_config(cfg);
    let (model, opt) = match state {
        Some((store, adam)) => (UViT::from_store(ucfg, store)?, adam),
        None => (UViT::init(ucfg, seed::derive_path(cfg.seed, &[stream::UVIT_INIT]), DType::F32)?, Adam::new(sc.adam)),
    };
    let ae = load_ae(&plan.run)?;
    let sched = schedule(cfg)?;
    let data = encode_corpus(&ae, &training_corpus(cfg, cfg.corpus_size)?, &Vocab::grammar(), false)?;
    let trainer = std::cell::RefCell::new(DiffusionTrainer { model, adam: opt });
    let path = plan.run.checkpoint(Stage::Diffusion);
    let (end, losses, log) = drive(
        plan,
        start,
        |s| trainer.borrow_mut().train_step(&data, &sched, &sc, s),
        |done| {
            let t = trainer.borrow();
            let mut ck = stage_checkpoint(Stage::Diffusion, cfg, t.model.store(), &t.adam, done);
            uvit_meta(&mut ck, &t.model.config);
            ck.save(&path)
        },
    )?;
    Ok(TrainReport { stage: Stage::Diffusion, start, end, losses, log, final_metric: None })
}

fn train_adapter(plan: &TrainPlan) -> Result<TrainReport> {
    let cfg = &plan.cfg;
    let sc = stage_config(cfg, Stage::Adapter);
    let (start, state) = resume_state(plan)?;
    let base = load_uvit(&plan.run, Stage::Diffusion)?;
    let (adapter, opt) = match state {
        Some((store, adam)) => (ControlAdapter::from_store(base.config, store)?, adam),
        None => (init_adapter(&base, seed::derive_path(cfg.seed, &[stream::ADAPTER_TRAIN]))?, Adam::new(sc.adam)),
    };
    let ae = load_ae(&plan.run)?;
    let sched = schedule(cfg)?;
    let data = encode_corpus(&ae, &training_corpus(cfg, cfg.adapter_corpus_size)?, &Vocab::grammar(), true)?;
    let trainer = std::cell::RefCell::new(AdapterTrainer::new(&base, adapter, opt)?);
    let path = plan.run.checkpoint(Stage::Adapter);
    let (end, losses, log) = drive(
        plan,
        start,
        |s| trainer.borrow_mut().train_step(&data, &sched, &sc, s),
        |done| {
            let t = trainer.borrow();
            let mut ck = stage_checkpoint(Stage::Adapter, cfg, t.adapter.store(), &t.adam, done);
            uvit_meta(&mut ck, &base.config);
            ck.save(&path)
        },
    )?;
    Ok(TrainReport { stage: Stage::Adapter, start, end, losses, log, final_metric: None })
}

fn train_subject(plan: &TrainPlan) -> Result<TrainReport> {
    let cfg = &plan.cfg;
    let sc = subject_config(cfg);
    let (start, state) = resume_state(plan)?;
    let base = load_uvit(&plan.run, Stage::Diffusion)?;
    let (model, opt) = match state {
        Some((store, adam)) => (UViT::from_store(base.config, store)?, adam),
        None => (base.deep_clone()?, Adam::new(sc.adam)),
    };
    let ae = load_ae(&plan.run)?;
    let subjects = subject_set(cfg)?;
    let prior = prior_set(cfg)?;
    let vocab = extend_vocab_subject(&Vocab::grammar())?;
    let data = SubjectData { ae: &ae, subjects: &subjects, prior: &prior, vocab: &vocab };
    data.check(&model.config)?;
    let sched = schedule(cfg)?;
    let opt = std::cell::RefCell::new(opt);
    let path = plan.run.checkpoint(Stage::Subject);
    let mut multi_frame = None;
    let (end, losses, log) = drive(
        plan,
        start,
        |s| {
            subject_step(&model, &mut opt.borrow_mut(), &data, &sched, &sc, s, &mut |e| {
                if e.frames != 1 {
                    multi_frame.get_or_insert(*e);
                }
            })
        },
        |done| {
            let mut ck = stage_checkpoint(Stage::Subject, cfg, model.store(), &opt.borrow(), done);
            uvit_meta(&mut ck, &model.config);
            ck.save(&path)?;
            vocab_checkpoint(&vocab, &model)?.save(&plan.run.subject_vocab())
        },
    )?;
    if let Some(e) = multi_frame {
        return Err(Error::InvalidState(format!("subject stream delivered a {}-frame clip at step {}", e.frames, e.step)));
    }
    Ok(TrainReport { stage: Stage::Subject, start, end, losses, log, final_metric: None })
}

pub fn report_outcome(report: &TrainReport) -> Outcome {
    let mut out = Outcome::default();
    let name = report.stage.name();
    if report.losses.is_empty() {
        out.say(format!("stage={name} already at step {}; nothing to do", report.end));
        return out;
    }
    let tail = &report.losses[report.losses.len().saturating_sub(50)..];
    let mut line = format!(
        "stage={name} steps={}..{} final_loss={:.6} mean_last_{}={:.6}",
        report.start + 1,
        report.end,
        report.losses.last().copied().unwrap_or(f64::NAN),
        tail.len(),
        tail.iter().sum::<f64>() / tail.len() as f64
    );
    if let Some((k, v)) = &report.final_metric {
        line.push_str(&format!(" {k}={v:.3}"));
    }
    out.say(line);
    out.files.extend(report.log.clone());
    out
}

// ---------------------------------------------------------------- datagen

pub struct DatagenPlan {
    items: Vec<CorpusItem>,
    dir: PathBuf,
    seed: u64,
}

pub fn plan_datagen(cfg: &RunConfig, run: &RunDir) -> Result<DatagenPlan> {
    cfg.validate()?;
    let dir = run.corpus_dir();
    if dir.exists() {
        return Err(Error::Config(format!("{} already exists; use a fresh --out directory", dir.display())));
    }
    Ok(DatagenPlan { items: training_corpus(cfg, cfg.corpus_size)?, dir, seed: corpus_seed(cfg) })
}

pub const MANIFEST_HEADER: &str = "index\tcaption\tshape\tcolor\tdirection\tspeed\tstart_x\tstart_y\tlength_frames\tseed";

fn manifest_row(i: usize, item: &CorpusItem) -> String {
    let s = &item.spec;
    let (dir, speed) = match s.motion {
        Some(m) => (m.direction.name().to_string(), m.speed.to_string()),
        None => ("-".to_string(), "0".to_string()),
    };
    format!(
        "{i}\t{}\t{}\t{}\t{dir}\t{speed}\t{}\t{}\t{}\t{}",
        item.caption,
        s.shape.name(),
        s.color.name(),
        s.start.0,
        s.start.1,
        s.length_frames,
        s.seed
    )
}

/// Parse a manifest row back into a spec and caption.
pub fn parse_manifest_row(line: &str) -> Result<(usize, String, ClipSpec)> {
    use crate::corpus::{Color, Direction, Motion, Shape};
    let f: Vec<&str> = line.split('\t').collect();
    let bad = || Error::Format(format!("bad manifest row {line:?}"));
    if f.len() != 10 {
        return Err(bad());
    }
    let p = |s: &str| s.parse::<i64>().map_err(|_| bad());
    let motion = if f[4] == "-" {
        None
    } else {
        Some(Motion { direction: Direction::from_name(f[4]).ok_or_else(bad)?, speed: p(f[5])? as u32 })
    };
    let spec = ClipSpec {
        shape: Shape::from_name(f[2]).ok_or_else(bad)?,
        color: Color::from_name(f[3]).ok_or_else(bad)?,
        motion,
        start: (p(f[6])? as i32, p(f[7])? as i32),
        length_frames: p(f[8])? as usize,
        seed: f[9].parse().map_err(|_| bad())?,
    };
    Ok((p(f[0])? as usize, f[1].to_string(), spec))
}

/// Files are written into a temp directory that is renamed into place.
pub fn exec_datagen(plan: DatagenPlan) -> Result<Outcome> {
    let parent = plan.dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(".corpus.tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let mut manifest = format!("# root_seed\t{}\n{MANIFEST_HEADER}\n", plan.seed);
    for (i, item) in plan.items.iter().enumerate() {
        write_vclip(&tmp.join(clip_name(i)), &item.clip)?;
        manifest.push_str(&manifest_row(i, item));
        manifest.push('\n');
    }
    fs::write(tmp.join("manifest.tsv"), manifest)?;
    fs::rename(&tmp, &plan.dir)?;
    let mut out = Outcome::default();
    out.say(format!("wrote {} clips and manifest.tsv to {}", plan.items.len(), plan.dir.display()));
    out.files = (0..plan.items.len()).map(|i| plan.dir.join(clip_name(i))).collect();
    out.files.push(plan.dir.join("manifest.tsv"));
    Ok(out)
}

pub fn clip_name(i: usize) -> String {
    format!("clip_{i:05}.vclip")
}

// ---------------------------------------------------------------- sampling

pub struct SamplePlan {
    cfg: RunConfig,
    run: RunDir,
    caption: String,
    vocab: Vocab,
    stage: Stage,
}

fn check_length(len: usize) -> Result<()> {
    if !ALLOWED_LENGTHS.contains(&len) {
        return Err(Error::InvalidLength { got: len, allowed: ALLOWED_LENGTHS.to_vec() });
    }
    Ok(())
}

pub fn canonical_prompt(prompt: &str, vocab: &Vocab) -> Result<(String, PromptTokens)> {
    let caption = recaption(prompt, &SynonymTable::builtin())?;
    let tokens = tokenize(vocab, &caption)?;
    Ok((caption, tokens))
}

pub fn sampler_config(cfg: &RunConfig, seed_: u64) -> SamplerConfig {
    SamplerConfig { steps: cfg.sampler_steps, guidance: cfg.guidance, eta: cfg.eta, seed: seed_ }
}

pub fn plan_sample(cfg: &RunConfig, run: &RunDir) -> Result<SamplePlan> {
    cfg.validate()?;
    check_length(cfg.length_frames)?;
    let (stage, vocab) = if cfg.use_subject {
        require(run, Stage::Subject)?;
        (Stage::Subject, load_subject_vocab(run)?)
    } else {
        (Stage::Diffusion, Vocab::grammar())
    };
    let (caption, _) = canonical_prompt(&cfg.prompt, &vocab)?;
    require(run, Stage::Ae)?;
    require(run, stage)?;
    Ok(SamplePlan { cfg: cfg.clone(), run: run.clone(), caption, vocab, stage })
}

/// Seed for sample `i` of a `sample` run.
pub fn sample_seed(cfg: &RunConfig, i: usize) -> u64 {
    seed::derive_path(cfg.seed, &[stream::SAMPLE, i as u64])
}

pub fn exec_sample(plan: SamplePlan) -> Result<Outcome> {
    let cfg = &plan.cfg;
    let ae = load_ae(&plan.run)?;
    let model = load_uvit(&plan.run, plan.stage)?;
    let sched = schedule(cfg)?;
    let tokens = tokenize(&plan.vocab, &plan.caption)?;
    let clips = (0..cfg.num_samples)
        .map(|i| {
            let z = ddim_sample(&model, &sched, &tokens, latent_frames(cfg.length_frames), &sampler_config(cfg, sample_seed(cfg, i)))?;
            ae.decode(&z, cfg.length_frames)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Sampling { prompt: plan.caption.clone(), source: Box::new(e) })?;
    let mut out = Outcome::default();
    out.say(plan.caption.clone());
    let dir = write_outputs(&plan.run, "samples", &clips, cfg.write_ppm, &mut out)?;
    out.say(format!("wrote {} clip(s) to {}", clips.len(), dir.display()));
    Ok(out)
}

fn write_outputs(run: &RunDir, name: &str, clips: &[VideoClip], ppm: bool, out: &mut Outcome) -> Result<PathBuf> {
    fs::create_dir_all(&run.root)?;
    let dir = RunDir::next_free(&run.root, name, "");
    fs::create_dir_all(&dir)?;
    for (i, clip) in clips.iter().enumerate() {
        let path = dir.join(format!("sample_{i:03}.vclip"));
        write_vclip(&path, clip)?;
        out.files.push(path);
        if ppm {
            out.files.extend(write_ppm_frames(&dir.join(format!("sample_{i:03}_frames")), clip)?);
        }
    }
    Ok(dir)
}

// ---------------------------------------------------------------- prediction

pub struct PredictPlan {
    cfg: RunConfig,
    run: RunDir,
    caption: String,
    given: VideoClip,
    given_latents: usize,
}

/// Pixel frames presented to the encoder for `given_frames` input frames:
/// multiples of the temporal factor pass through, a single image is
/// replicated across the first group. Returns the clip and the number of
/// given latent frames.
pub fn conditioning_clip(input: &VideoClip, given_frames: usize, length_frames: usize) -> Result<(VideoClip, usize)> {
    check_length(length_frames)?;
    if given_frames == 0 || given_frames >= length_frames {
        return Err(Error::InvalidArgument(format!(
            "given_frames must be in 1..{length_frames} (target length), got {given_frames}"
        )));
    }
    if given_frames > input.frames() {
        return Err(Error::InvalidArgument(format!("input has {} frames, {given_frames} requested", input.frames())));
    }
    if given_frames == 1 {
        if length_frames <= TEMPORAL_FACTOR {
            return Err(Error::InvalidArgument(format!(
                "a single given image fills the first {TEMPORAL_FACTOR}-frame group; target length must exceed {TEMPORAL_FACTOR}"
            )));
        }
        let frame = input.frame_range(0, 1)?;
        let mut data = Vec::with_capacity(TEMPORAL_FACTOR * frame.data().len());
        for _ in 0..TEMPORAL_FACTOR {
            data.extend_from_slice(frame.data());
        }
        return Ok((VideoClip::new(TEMPORAL_FACTOR, frame.height(), frame.width(), data)?, 1));
    }
    if given_frames % TEMPORAL_FACTOR != 0 {
        return Err(Error::InvalidArgument(format!(
            "given_frames must be a multiple of {TEMPORAL_FACTOR} or exactly 1 (single image replicated into the first group), got {given_frames}"
        )));
    }
    Ok((input.frame_range(0, given_frames)?, given_frames / TEMPORAL_FACTOR))
}

pub fn plan_predict(cfg: &RunConfig, run: &RunDir) -> Result<PredictPlan> {
    cfg.validate()?;
    let path = cfg.input.as_ref().ok_or_else(|| Error::Config("predict needs `input = <clip.vclip>`".into()))?;
    let input = read_vclip(path).map_err(|e| Error::Config(format!("cannot read input {}: {e}", path.display())))?;
    let (given, given_latents) = conditioning_clip(&input, cfg.given_frames, cfg.length_frames)?;
    let (caption, _) = canonical_prompt(&cfg.prompt, &Vocab::grammar())?;
    require(run, Stage::Ae)?;
    require(run, Stage::Diffusion)?;
    Ok(PredictPlan { cfg: cfg.clone(), run: run.clone(), caption, given, given_latents })
}

/// Continue `given` (already in conditioning form) to `length_frames` frames.
#[allow(clippy::too_many_arguments)]
pub fn predict_clip(
    ae: &VideoAutoencoder,
    model: &UViT,
    sched: &NoiseSchedule,
    prompt: &PromptTokens,
    given: &VideoClip,
    given_latents: usize,
    length_frames: usize,
    sampler: &SamplerConfig,
) -> Result<VideoClip> {
    let tl = latent_frames(length_frames);
    let z = ae.encode(given)?.into_tensor();
    let (_, c, h, w) = z.dims4()?;
    let pad = Tensor::zeros((tl - given_latents, c, h, w), z.dtype(), z.device())?;
    let known = LatentVideo::new(Tensor::cat(&[z.narrow(0, 0, given_latents)?, pad], 0)?)?;
    let mask = FrameMask::prefix(given_latents, tl)?;
    let out = predict_frames(model, sched, prompt, &known, &mask, sampler, None)?;
    ae.decode(&out, length_frames)
}

pub fn exec_predict(plan: PredictPlan) -> Result<Outcome> {
    let cfg = &plan.cfg;
    let ae = load_ae(&plan.run)?;
    let model = load_uvit(&plan.run, Stage::Diffusion)?;
    let sched = schedule(cfg)?;
    let tokens = tokenize(&Vocab::grammar(), &plan.caption)?;
    let clips = (0..cfg.num_samples)
        .map(|i| {
            predict_clip(&ae, &model, &sched, &tokens, &plan.given, plan.given_latents, cfg.length_frames, &sampler_config(cfg, sample_seed(cfg, i)))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Sampling { prompt: plan.caption.clone(), source: Box::new(e) })?;
    let mut out = Outcome::default();
    out.say(plan.caption.clone());
    let n = plan.given.frames();
    for (i, clip) in clips.iter().enumerate() {
        let p = psnr(&plan.given, &clip.frame_range(0, n)?)?;
        out.say(format!("sample {i}: given frames reproduced at {p:.2} dB"));
    }
    let dir = write_outputs(&plan.run, "predict", &clips, cfg.write_ppm, &mut out)?;
    out.say(format!("wrote {} clip(s) to {}", clips.len(), dir.display()));
    Ok(out)
}

// ---------------------------------------------------------------- control

pub struct ControlPlan {
    cfg: RunConfig,
    run: RunDir,
    caption: String,
    source: VideoClip,
}

pub fn plan_control(cfg: &RunConfig, run: &RunDir) -> Result<ControlPlan> {
    cfg.validate()?;
    let path = cfg
        .control_input
        .as_ref()
        .ok_or_else(|| Error::Config("control needs `control_input = <clip.vclip>`".into()))?;
    let source = read_vclip(path).map_err(|e| Error::Config(format!("cannot read control input {}: {e}", path.display())))?;
    check_length(source.frames())?;
    let (caption, _) = canonical_prompt(&cfg.prompt, &Vocab::grammar())?;
    for stage in [Stage::Ae, Stage::Diffusion, Stage::Adapter] {
        require(run, stage)?;
    }
    Ok(ControlPlan { cfg: cfg.clone(), run: run.clone(), caption, source })
}

pub fn exec_control(plan: ControlPlan) -> Result<Outcome> {
    let cfg = &plan.cfg;
    let ae = load_ae(&plan.run)?;
    let base = load_uvit(&plan.run, Stage::Diffusion)?;
    let adapter = load_adapter(&plan.run, &base)?;
    let sched = schedule(cfg)?;
    let tokens = tokenize(&Vocab::grammar(), &plan.caption)?;
    let ctrl = edge_map(&plan.source, DEFAULT_EDGE_THRESHOLD)?;
    let mut out = Outcome::default();
    out.say(plan.caption.clone());
    let mut clips = vec![];
    for i in 0..cfg.num_samples {
        let z = sample_controlled(&base, &adapter, &sched, &tokens, &ctrl, &sampler_config(cfg, sample_seed(cfg, i)))
            .map_err(|e| Error::Sampling { prompt: plan.caption.clone(), source: Box::new(e) })?;
        let clip = ae.decode(&z, plan.source.frames())?;
        out.say(format!("sample {i}: edge_agreement {:.4}", edge_agreement(&clip, &ctrl)?));
        clips.push(clip);
    }
    let dir = write_outputs(&plan.run, "control", &clips, cfg.write_ppm, &mut out)?;
    out.say(format!("wrote {} clip(s) to {}", clips.len(), dir.display()));
    Ok(out)
}

// ---------------------------------------------------------------- eval

pub struct EvalPlan {
    cfg: RunConfig,
    run: RunDir,
}

pub fn plan_eval(cfg: &RunConfig, run: &RunDir) -> Result<EvalPlan> {
    cfg.validate()?;
    if !cfg.eval_oracle {
        require(run, Stage::Ae)?;
        require(run, if cfg.use_subject { Stage::Subject } else { Stage::Diffusion })?;
    }
    Ok(EvalPlan { cfg: cfg.clone(), run: run.clone() })
}

/// Renders the prompted spec with a seeded start position.
pub fn oracle_sample(p: &EvalPrompt, seed_: u64) -> Result<VideoClip> {
    use rand::Rng;
    let mut rng = seed::rng(seed_);
    let motion = p.direction.map(|direction| crate::corpus::Motion { direction, speed: 1 });
    let mut spec = ClipSpec { shape: p.shape, color: p.color, motion, start: (11, 11), length_frames: p.length_frames, seed: seed_ };
    let max = crate::corpus::MAX_OFFSET;
    let span = p.length_frames as i32 - 1;
    let (dx, dy) = motion.map(|m| m.direction.unit()).unwrap_or((0, 0));
    let range = |d: i32| if d > 0 { 0..=max - span } else if d < 0 { span..=max } else { 0..=max };
    spec.start = (rng.random_range(range(dx)), rng.random_range(range(dy)));
    render_clip(&spec)
}

/// Conditional accuracy of a trained model over the prompt grid.
pub fn evaluate_model(
    ae: &VideoAutoencoder,
    model: &UViT,
    vocab: &Vocab,
    cfg: &RunConfig,
    prompts: &[EvalPrompt],
) -> Result<AccuracyReport> {
    let sched = schedule(cfg)?;
    let mut sampler = |p: &EvalPrompt, s: u64| -> Result<VideoClip> {
        let tokens = tokenize(vocab, &p.caption())?;
        let z = ddim_sample(model, &sched, &tokens, latent_frames(p.length_frames), &sampler_config(cfg, s))?;
        ae.decode(&z, p.length_frames)
    };
    conditional_accuracy(&mut sampler, prompts, cfg.eval_per_prompt, seed::derive_path(cfg.seed, &[stream::EVAL]))
}

pub fn exec_eval(plan: EvalPlan) -> Result<Outcome> {
    let cfg = &plan.cfg;
    let prompts = prompt_grid();
    let report = if cfg.eval_oracle {
        conditional_accuracy(&mut oracle_sample, &prompts, cfg.eval_per_prompt, seed::derive_path(cfg.seed, &[stream::EVAL]))?
    } else {
        let ae = load_ae(&plan.run)?;
        let stage = if cfg.use_subject { Stage::Subject } else { Stage::Diffusion };
        let model = load_uvit(&plan.run, stage)?;
        evaluate_model(&ae, &model, &Vocab::grammar(), cfg, &prompts)?
    };
    fs::create_dir_all(&plan.run.root)?;
    let dir = RunDir::next_free(&plan.run.root, "eval", "");
    fs::create_dir_all(&dir)?;
    let path = dir.join("report.tsv");
    let text = report.metrics.to_report();
    write_atomic(&path, text.as_bytes())?;
    let mut out = Outcome::default();
    out.messages.extend(text.lines().map(str::to_string));
    out.say(format!("samples {} empty {}", report.samples, report.empty_clips));
    out.files.push(path);
    Ok(out)
}

/// Parse a `metric<TAB>value` report.
pub fn read_report(text: &str) -> Result<Vec<(String, f64)>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (k, v) = l.split_once('\t').ok_or_else(|| Error::Format(format!("bad report line {l:?}")))?;
            Ok((k.to_string(), v.parse().map_err(|_| Error::Format(format!("bad value in {l:?}")))?))
        })
        .collect()
}

pub fn manifest_caption_check(dir: &Path) -> Result<usize> {
    let text = fs::read_to_string(dir.join("manifest.tsv"))?;
    let mut n = 0;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("index\t")) {
        let (i, caption, spec) = parse_manifest_row(line)?;
        if caption_of(&spec) != caption {
            return Err(Error::Format(format!("row {i}: caption {caption:?} does not match its spec")));
        }
        if read_vclip(&dir.join(clip_name(i)))? != render_clip(&spec)? {
            return Err(Error::Format(format!("row {i}: clip differs from its spec")));
        }
        n += 1;
    }
    Ok(n)
}
