//! Controllable generation on top of a trained denoiser: an edge-map adapter
//! with zero-initialised output projections, video prediction by sampler-time
//! inpainting, and subject finetuning on single images bound to `<V>`.

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::autoencoder::{latent_frames, LatentVideo, VideoAutoencoder, SPATIAL_FACTOR, TEMPORAL_FACTOR};
use crate::corpus::{render_sprite, ControlSignal, CorpusItem, SpriteStyle, VideoClip, MAX_OFFSET, SPRITE_SIZE};
use crate::diffusion::{
    ddim_sample_with, noise_tensor, q_sample_tensor, training_loss, Denoiser, LatentGroup, NoiseSchedule,
    SamplerConfig,
};
use crate::error::{invalid, Error, Result};
use crate::nn::{scalar_f64, Adam, AdamConfig, Init, Linear, ParamStore};
use crate::seed;
use crate::text::{tokenize, PromptTokens, Vocab, SUBJECT, SUBJECT_ID, SUBJECT_NOUN};
use crate::uvit::{patchify_tensor, Block, UViT, UViTConfig, PREFIX_TOKENS};

const CTRL_EMBED_STD: f64 = 0.02;

/// Trainable side network: control-patch embedding, copies of the first half
/// of the base blocks, and one zero-initialised projection per copy.
pub struct ControlAdapter {
    pub config: UViTConfig,
    store: ParamStore,
    embed: Linear,
    blocks: Vec<Block>,
    zero: Vec<Linear>,
}

/// Control patches are 2×2 blocks of a single-channel map.
const CTRL_PATCH_DIM: usize = 4;

pub fn init_adapter(base: &UViT, seed_: u64) -> Result<ControlAdapter> {
    let cfg = base.config;
    let d = cfg.d_model;
    let mut store = ParamStore::new(base.dtype());
    let mut init = Init::new(seed_, base.dtype());
    Linear::init(&mut store, &mut init, "ctrl.embed", CTRL_PATCH_DIM, d, CTRL_EMBED_STD)?;
    for i in 0..cfg.depth / 2 {
        let prefix = format!("blocks.{i}.");
        for (name, var) in base.store().iter().filter(|(n, _)| n.starts_with(&prefix)) {
            store.insert(&format!("ctrl.{name}"), var.as_tensor().copy()?)?;
        }
        Linear::init_zero(&mut store, &mut init, &format!("ctrl.zero.{i}"), d, d)?;
    }
    ControlAdapter::from_store(cfg, store)
}

impl ControlAdapter {
    pub fn from_store(config: UViTConfig, store: ParamStore) -> Result<Self> {
        let half = config.depth / 2;
        Ok(Self {
            config,
            embed: Linear::load(&store, "ctrl.embed")?,
            blocks: (0..half)
                .map(|i| Block::load(&store, &format!("ctrl.blocks.{i}"), config.heads))
                .collect::<Result<_>>()?,
            zero: (0..half).map(|i| Linear::load(&store, &format!("ctrl.zero.{i}"))).collect::<Result<_>>()?,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Residuals for the base's first-half block outputs. `ctrl` is
    /// `(B or 1, Tl, 1, h, w)`.
    fn residuals(&self, tokens: &Tensor, key_bias: &Tensor, ctrl: &Tensor) -> Result<Vec<Tensor>> {
        let (b, n, d) = tokens.dims3()?;
        let (ctrl_patches, _) = patchify_tensor(ctrl)?;
        let ctrl_tok = self.embed.forward(&ctrl_patches)?;
        let (cb, p, _) = ctrl_tok.dims3()?;
        if p + PREFIX_TOKENS != n {
            return invalid(format!("control has {p} patches for a sequence of {n} tokens"));
        }
        let prefix = Tensor::zeros((cb, PREFIX_TOKENS, d), tokens.dtype(), &Device::Cpu)?;
        let ctrl_tok = Tensor::cat(&[prefix, ctrl_tok], 1)?;
        let mut h = tokens.broadcast_add(&ctrl_tok)?;
        if h.dims()[0] != b {
            return invalid("control batch does not match the latent batch");
        }
        let mut out = Vec::with_capacity(self.blocks.len());
        for (block, zero) in self.blocks.iter().zip(&self.zero) {
            h = block.forward(&h, key_bias)?;
            out.push(zero.forward(&h)?);
        }
        Ok(out)
    }
}

/// Align an edge map with the latent grid: max over each group of
/// `TEMPORAL_FACTOR` source frames, then mean over `SPATIAL_FACTOR²` blocks.
/// Returns `(Tl, 1, h, w)`.
pub fn control_latent_map(ctrl: &ControlSignal, dtype: DType) -> Result<Tensor> {
    let (t, hh, ww) = (ctrl.frames(), ctrl.height(), ctrl.width());
    if hh % SPATIAL_FACTOR != 0 || ww % SPATIAL_FACTOR != 0 {
        return invalid(format!("control size {hh}x{ww} not divisible by {SPATIAL_FACTOR}"));
    }
    let tl = latent_frames(t);
    let (h, w) = (hh / SPATIAL_FACTOR, ww / SPATIAL_FACTOR);
    let mut out = vec![0f32; tl * h * w];
    let area = (SPATIAL_FACTOR * SPATIAL_FACTOR) as f32;
    for l in 0..tl {
        let frames = (l * TEMPORAL_FACTOR)..((l + 1) * TEMPORAL_FACTOR).min(t);
        for y in 0..hh {
            for x in 0..ww {
                let on = frames.clone().any(|f| ctrl.get(f, y, x) != 0);
                if on {
                    out[(l * h + y / SPATIAL_FACTOR) * w + x / SPATIAL_FACTOR] += 1.0 / area;
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (tl, 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Base denoiser steered by an adapter and a fixed latent-aligned control map.
pub struct Controlled<'a> {
    pub base: &'a UViT,
    pub adapter: &'a ControlAdapter,
    /// `(B or 1, Tl, 1, h, w)`.
    pub ctrl: Tensor,
}

impl Denoiser for Controlled<'_> {
    fn predict(&self, x: &Tensor, t: &[usize], prompts: &[PromptTokens]) -> Result<Tensor> {
        let (_, tl, _, h, w) = x.dims5()?;
        let (_, ctl, cc, ch, cw) = self.ctrl.dims5()?;
        if (ctl, cc, ch, cw) != (tl, 1, h, w) {
            return invalid(format!("control map {:?} does not match latent {:?}", self.ctrl.dims(), x.dims()));
        }
        let seq = self.base.embed_inputs(x, t, prompts)?;
        let residuals = self.adapter.residuals(&seq.tokens, &seq.key_bias, &self.ctrl)?;
        let hidden = self.base.run_blocks(&seq, Some(&residuals), None)?;
        self.base.head(&hidden, seq.grid)
    }
}

pub fn predict_noise_controlled(
    base: &UViT,
    adapter: &ControlAdapter,
    x_t: &LatentVideo,
    t: usize,
    prompt: &PromptTokens,
    ctrl: &ControlSignal,
) -> Result<LatentVideo> {
    if latent_frames(ctrl.frames()) != x_t.frames() {
        return invalid(format!("{}-frame control does not match {} latent frames", ctrl.frames(), x_t.frames()));
    }
    let map = control_latent_map(ctrl, base.dtype())?.unsqueeze(0)?;
    let model = Controlled { base, adapter, ctrl: map };
    let x = x_t.tensor().to_dtype(base.dtype())?.unsqueeze(0)?;
    LatentVideo::new(model.predict(&x, &[t], &[*prompt])?.squeeze(0)?)
}

/// Controlled DDIM sampling for one clip of `ctrl.frames()` frames.
pub fn sample_controlled(
    base: &UViT,
    adapter: &ControlAdapter,
    schedule: &NoiseSchedule,
    prompt: &PromptTokens,
    ctrl: &ControlSignal,
    config: &SamplerConfig,
) -> Result<LatentVideo> {
    let map = control_latent_map(ctrl, base.dtype())?.unsqueeze(0)?;
    let c = base.config;
    let shape = [latent_frames(ctrl.frames()), c.latent_channels, c.latent_height, c.latent_width];
    let model = Controlled { base, adapter, ctrl: map };
    ddim_sample_with(&model, schedule, prompt, shape, base.dtype(), config, &mut |_, x| Ok(x))
}

/// Training examples with their latent-aligned control maps `(B, Tl, 1, h, w)`.
#[derive(Debug, Clone)]
pub struct ControlGroup {
    pub latents: LatentGroup,
    pub ctrl: Tensor,
}

/// ε-prediction loss of the controlled model; gradients reach only the
/// adapter because the base is used through a frozen view.
pub fn adapter_loss(
    frozen_base: &UViT,
    adapter: &ControlAdapter,
    groups: &[ControlGroup],
    schedule: &NoiseSchedule,
    p_drop: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Tensor> {
    let total: usize = groups.iter().map(|g| g.latents.prompts.len()).sum();
    if total == 0 {
        return invalid("empty training batch");
    }
    let mut acc: Option<Tensor> = None;
    for g in groups {
        let model = Controlled { base: frozen_base, adapter, ctrl: g.ctrl.clone() };
        let weight = g.latents.prompts.len() as f64 / total as f64;
        let term = (training_loss(&model, std::slice::from_ref(&g.latents), schedule, p_drop, rng)? * weight)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty batch"))
}

/// Which latent frames are given. At least one must be given and one free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMask {
    given: Vec<bool>,
}

impl FrameMask {
    pub fn new(given: Vec<bool>) -> Result<Self> {
        if !given.iter().any(|g| *g) {
            return invalid("frame mask gives no frames; prediction needs a condition");
        }
        if given.iter().all(|g| *g) {
            return invalid("frame mask gives every frame; nothing to predict");
        }
        Ok(Self { given })
    }

    /// The first `n` latent frames given, the rest free.
    pub fn prefix(n: usize, len: usize) -> Result<Self> {
        Self::new((0..len).map(|i| i < n).collect())
    }

    pub fn len(&self) -> usize {
        self.given.len()
    }

    pub fn is_empty(&self) -> bool {
        self.given.is_empty()
    }

    pub fn is_given(&self, i: usize) -> bool {
        self.given[i]
    }
}

/// Seed of the noise used to re-noise given frames after sampler step `step`.
pub fn overwrite_noise_seed(sampler_seed: u64, step: usize) -> u64 {
    seed::derive_path(sampler_seed, &[seed::stream::SAMPLE, 1 + step as u64])
}

/// Replace given frames of `x: (1, Tl, C, h, w)` with `src`'s frames.
fn splice(x: &Tensor, src: &Tensor, mask: &FrameMask) -> Result<Tensor> {
    let parts: Vec<Tensor> = (0..mask.len())
        .map(|l| if mask.is_given(l) { src.narrow(1, l, 1) } else { x.narrow(1, l, 1) })
        .collect::<candle_core::Result<_>>()?;
    Ok(Tensor::cat(&parts, 1)?)
}

/// Inpainting-style sampling: after every DDIM update the given frames are
/// overwritten with `q_sample(known, t_prev, ε)` using fresh noise, and with
/// the clean latents at the end. `observer` sees `(step, t_prev, state)`
/// right after each overwrite.
#[allow(clippy::too_many_arguments)]
pub fn predict_frames<D: Denoiser>(
    model: &D,
    schedule: &NoiseSchedule,
    prompt: &PromptTokens,
    known: &LatentVideo,
    mask: &FrameMask,
    config: &SamplerConfig,
    mut observer: Option<&mut dyn FnMut(usize, usize, &Tensor)>,
) -> Result<LatentVideo> {
    if mask.len() != known.frames() {
        return invalid(format!("mask has {} frames, known latent has {}", mask.len(), known.frames()));
    }
    let clean = known.tensor().unsqueeze(0)?;
    let dtype = clean.dtype();
    let mut step = 0usize;
    let mut hook = |t_prev: usize, x: Tensor| -> Result<Tensor> {
        let src = if t_prev == 0 {
            clean.clone()
        } else {
            let eps = noise_tensor(overwrite_noise_seed(config.seed, step), clean.dims(), dtype)?;
            q_sample_tensor(&clean, t_prev, &eps, schedule)?
        };
        let x = splice(&x, &src, mask)?;
        if let Some(obs) = observer.as_mut() {
            obs(step, t_prev, &x);
        }
        step += 1;
        Ok(x)
    };
    ddim_sample_with(model, schedule, prompt, known.dims(), dtype, config, &mut hook)
}

/// Two-tone disc: a circle whose upper half is magenta and lower half cyan.
/// Neither colour nor the split occurs in the base corpus.
pub struct SubjectSprite;

impl SpriteStyle for SubjectSprite {
    fn covers(&self, x: usize, y: usize) -> bool {
        crate::corpus::Shape::Circle.covers(x, y)
    }

    fn rgb_at(&self, _x: usize, y: usize) -> [f32; 3] {
        if y < SPRITE_SIZE / 2 {
            [1.0, -1.0, 1.0]
        } else {
            [-1.0, 1.0, 1.0]
        }
    }
}

/// Single-frame images of one subject and the token that names it.
#[derive(Debug, Clone)]
pub struct SubjectSet {
    clips: Vec<VideoClip>,
    pub token: u32,
}

impl SubjectSet {
    pub fn new(clips: Vec<VideoClip>, token: u32) -> Result<Self> {
        if clips.is_empty() {
            return invalid("subject set is empty");
        }
        if let Some(c) = clips.iter().find(|c| c.frames() != 1) {
            return invalid(format!("subject clips must be single frames, got {}", c.frames()));
        }
        Ok(Self { clips, token })
    }

    /// `n` renders of [`SubjectSprite`] at seeded positions.
    pub fn render(n: usize, seed_: u64) -> Result<Self> {
        let mut rng = seed::rng(seed_);
        let clips = (0..n)
            .map(|_| {
                let p = (rng.random_range(0..=MAX_OFFSET), rng.random_range(0..=MAX_OFFSET));
                render_sprite(&SubjectSprite, &[p])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(clips, SUBJECT_ID)
    }

    pub fn clips(&self) -> &[VideoClip] {
        &self.clips
    }
}

/// Caption used for subject images.
pub fn subject_caption() -> String {
    format!("a {SUBJECT} {SUBJECT_NOUN}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectConfig {
    pub steps: usize,
    /// Subject images per step; the same number of prior images is added.
    pub half_batch: usize,
    pub adam: AdamConfig,
    pub p_drop: f64,
    pub seed: u64,
}

impl Default for SubjectConfig {
    fn default() -> Self {
        let mut adam = AdamConfig::with_lr(5e-5);
        adam.warmup = 20;
        Self { steps: 200, half_batch: 4, adam, p_drop: 0.1, seed: 0 }
    }
}

/// Origin of a clip fed to subject finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubjectSource {
    Subject(usize),
    Prior(usize),
}

/// Every clip that enters a training batch, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataEvent {
    pub step: usize,
    pub source: SubjectSource,
    pub frames: usize,
}

/// Inputs to subject finetuning.
pub struct SubjectData<'a> {
    pub ae: &'a VideoAutoencoder,
    pub subjects: &'a SubjectSet,
    /// Single-frame items from the base corpus for prior preservation.
    pub prior: &'a [CorpusItem],
    pub vocab: &'a Vocab,
}

impl SubjectData<'_> {
    pub fn check(&self, model: &UViTConfig) -> Result<()> {
        if !self.vocab.subject_active() {
            return Err(Error::InvalidState(format!("{SUBJECT} is not active in the vocabulary")));
        }
        if self.subjects.token as usize >= model.vocab_size {
            return invalid("subject token outside the model vocabulary");
        }
        if self.prior.is_empty() {
            return invalid("prior-preservation set is empty");
        }
        if let Some(p) = self.prior.iter().find(|p| p.spec.length_frames != 1) {
            return invalid(format!("prior items must be single frames, got {}", p.spec.length_frames));
        }
        Ok(())
    }
}

/// One finetuning step: `half_batch` subject images and as many prior
/// images, each reported to `observer` before it is encoded.
pub fn subject_step(
    model: &UViT,
    adam: &mut Adam,
    data: &SubjectData,
    schedule: &NoiseSchedule,
    config: &SubjectConfig,
    step: usize,
    observer: &mut dyn FnMut(&DataEvent),
) -> Result<f64> {
    let subject_prompt = tokenize(data.vocab, &subject_caption())?;
    let encode = |clip: &VideoClip| -> Result<Tensor> { Ok(data.ae.encode(clip)?.tensor().detach()) };
    let mut rng = seed::rng(seed::derive_path(config.seed, &[seed::stream::SUBJECT_TRAIN, step as u64]));
    let mut xs = Vec::with_capacity(2 * config.half_batch);
    let mut prompts = Vec::with_capacity(2 * config.half_batch);
    for _ in 0..config.half_batch {
        let i = rng.random_range(0..data.subjects.clips.len());
        let clip = &data.subjects.clips[i];
        observer(&DataEvent { step, source: SubjectSource::Subject(i), frames: clip.frames() });
        xs.push(encode(clip)?);
        prompts.push(subject_prompt);
        let j = rng.random_range(0..data.prior.len());
        let item = &data.prior[j];
        observer(&DataEvent { step, source: SubjectSource::Prior(j), frames: item.clip.frames() });
        xs.push(encode(&item.clip)?);
        prompts.push(tokenize(data.vocab, &item.caption)?);
    }
    let x0 = Tensor::stack(&xs, 0)?.to_dtype(model.dtype())?;
    let group = LatentGroup { x0, prompts };
    let loss = training_loss(model, &[group], schedule, config.p_drop, &mut rng).map_err(|e| with_step(e, step))?;
    let value = scalar_f64(&loss)?;
    let grads = loss.backward()?;
    adam.step(model.store(), &grads).map_err(|e| with_step(e, step))?;
    Ok(value)
}

/// Finetune a copy of `base` on subject images captioned with `<V>`, mixed
/// 1:1 with single-frame prior images from the base corpus. Prior items
/// with more than one frame are rejected.
pub fn finetune_subject(
    base: &UViT,
    data: &SubjectData,
    schedule: &NoiseSchedule,
    config: &SubjectConfig,
    observer: &mut dyn FnMut(&DataEvent),
) -> Result<(UViT, Vec<f64>)> {
    data.check(&base.config)?;
    if config.steps == 0 || config.half_batch == 0 {
        return invalid("subject finetuning needs positive steps and batch");
    }
    let model = base.deep_clone()?;
    let mut adam = Adam::new(config.adam);
    let curve = (0..config.steps)
        .map(|step| subject_step(&model, &mut adam, data, schedule, config, step, observer))
        .collect::<Result<Vec<_>>>()?;
    Ok((model, curve))
}

pub(crate) fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::TrainingFailure { reason, .. } => Error::TrainingFailure { step, reason },
        other => Error::TrainingFailure { step, reason: other.to_string() },
    }
}
