//! Noise schedule, forward corruption, ε-prediction objective, classifier-free
//! guidance and the DDIM sampler.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::LatentVideo;
use crate::error::{invalid, Error, Result};
use crate::nn::scalar_f64;
use crate::seed;
use crate::text::PromptTokens;
use crate::uvit::UViT;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const X0_CLAMP: f64 = 3.0;

/// β, α and ᾱ tables, indexed by `t ∈ 1..=steps`. `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear β schedule.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return invalid(format!("schedule needs at least 2 steps, got {steps}"));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return invalid(format!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0f64;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return invalid(format!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε` on tensors of equal shape.
pub fn q_sample_tensor(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    if x0.dims() != eps.dims() {
        return invalid(format!("q_sample shape mismatch {:?} vs {:?}", x0.dims(), eps.dims()));
    }
    let ab = schedule.alpha_bar(t);
    Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

pub fn q_sample(x0: &LatentVideo, t: usize, eps: &LatentVideo, schedule: &NoiseSchedule) -> Result<LatentVideo> {
    LatentVideo::new(q_sample_tensor(x0.tensor(), t, eps.tensor(), schedule)?)
}

/// Per-sample timesteps over a leading batch axis.
fn q_sample_batch(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let b = x0.dims()[0];
    if t.len() != b {
        return invalid("one timestep per batch item required");
    }
    let mut bshape = vec![1usize; x0.rank()];
    bshape[0] = b;
    let coef = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = t.iter().map(|&t| f(schedule.alpha_bar(t))).collect();
        Ok(Tensor::from_vec(v, bshape.as_slice(), &Device::Cpu)?.to_dtype(x0.dtype())?)
    };
    let a = coef(&|ab| ab.sqrt())?;
    let s = coef(&|ab| (1.0 - ab).sqrt())?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// Anything that predicts ε for a batch `(B, Tl, C, h, w)`.
pub trait Denoiser {
    fn predict(&self, x: &Tensor, t: &[usize], prompts: &[PromptTokens]) -> Result<Tensor>;
}

impl Denoiser for UViT {
    fn predict(&self, x: &Tensor, t: &[usize], prompts: &[PromptTokens]) -> Result<Tensor> {
        self.forward(x, t, prompts)
    }
}

pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_cond.dims() != eps_uncond.dims() {
        return invalid("guidance inputs differ in shape");
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * scale)?)?)
}

/// Replace each prompt with the null prompt with probability `p_drop`.
pub fn drop_conditions(prompts: &[PromptTokens], p_drop: f64, rng: &mut ChaCha8Rng) -> Vec<PromptTokens> {
    prompts
        .iter()
        .map(|p| if rng.random::<f64>() < p_drop { PromptTokens::NULL } else { *p })
        .collect()
}

/// Training examples sharing one latent length: `x0: (B, Tl, C, h, w)`.
#[derive(Debug, Clone)]
pub struct LatentGroup {
    pub x0: Tensor,
    pub prompts: Vec<PromptTokens>,
}

/// Mean over examples of the per-example mean squared ε error. Timesteps,
/// noise and condition dropout are drawn from `rng`.
pub fn training_loss<D: Denoiser>(
    model: &D,
    groups: &[LatentGroup],
    schedule: &NoiseSchedule,
    p_drop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let total: usize = groups.iter().map(|g| g.prompts.len()).sum();
    if total == 0 {
        return invalid("empty training batch");
    }
    let mut acc: Option<Tensor> = None;
    for g in groups {
        let b = g.prompts.len();
        if g.x0.dims()[0] != b {
            return invalid("latent group and prompt counts differ");
        }
        let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let eps = Tensor::from_vec(seed::normal_vec(rng, g.x0.elem_count()), g.x0.dims(), &Device::Cpu)?
            .to_dtype(g.x0.dtype())?;
        let prompts = drop_conditions(&g.prompts, p_drop, rng);
        let x_t = q_sample_batch(&g.x0, &t, &eps, schedule)?;
        let pred = model.predict(&x_t, &t, &prompts)?;
        let per_item = g.x0.elem_count() / b;
        let term = ((pred - eps)?.sqr()?.sum_all()? / per_item as f64)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    let loss = (acc.expect("non-empty batch") / total as f64)?;
    let value = scalar_f64(&loss)?;
    if !value.is_finite() {
        return Err(Error::TrainingFailure { step: 0, reason: format!("diffusion loss is {value}") });
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, guidance: 3.0, eta: 0.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.steps() {
            return invalid(format!("sampler steps {} outside 1..={}", self.steps, schedule.steps()));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return invalid(format!("guidance scale must be finite and >= 0, got {}", self.guidance));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return invalid(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        Ok(())
    }
}

/// `S` timesteps `1 + ⌊i·T/S⌋`, returned from largest to smallest.
pub fn sampling_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..steps).map(|i| 1 + i * total / steps).collect();
    ts.reverse();
    ts
}

/// One DDIM update from `t` to `t_prev` (`t_prev = 0` means clean data).
/// `noise` is required when `eta > 0`.
pub fn ddim_step(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    eta: f64,
    noise: Option<&Tensor>,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return invalid(format!("DDIM must move to an earlier step, got {t} -> {t_prev}"));
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let x0 = ((x_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?.clamp(-X0_CLAMP, X0_CLAMP)?;
    let eps = ((x_t - (&x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = ((&x0 * ab_prev.sqrt())? + (eps * dir)?)?;
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| Error::InvalidArgument("eta > 0 requires a noise tensor".into()))?;
        out = (out + (z * sigma)?)?;
    }
    Ok(out)
}

fn guided_eps<D: Denoiser>(model: &D, x: &Tensor, t: usize, prompt: &PromptTokens, guidance: f64) -> Result<Tensor> {
    if guidance == 1.0 || prompt.is_null() {
        return model.predict(x, &[t], &[*prompt]);
    }
    if guidance == 0.0 {
        return model.predict(x, &[t], &[PromptTokens::NULL]);
    }
    let both = model.predict(&Tensor::cat(&[x, x], 0)?, &[t, t], &[*prompt, PromptTokens::NULL])?;
    cfg_combine(&both.narrow(0, 0, 1)?, &both.narrow(0, 1, 1)?, guidance)
}

/// Seeded unit-normal tensor.
pub fn noise_tensor(seed_: u64, dims: &[usize], dtype: DType) -> Result<Tensor> {
    let mut rng = seed::rng(seed_);
    let n = dims.iter().product();
    Ok(Tensor::from_vec(seed::normal_vec(&mut rng, n), dims, &Device::Cpu)?.to_dtype(dtype)?)
}

/// DDIM sampling of one latent `(Tl, C, h, w)`. After every update `hook`
/// receives the new step index (0 at the end) and may rewrite the state.
pub fn ddim_sample_with<D: Denoiser>(
    model: &D,
    schedule: &NoiseSchedule,
    prompt: &PromptTokens,
    shape: [usize; 4],
    dtype: DType,
    config: &SamplerConfig,
    hook: &mut dyn FnMut(usize, Tensor) -> Result<Tensor>,
) -> Result<LatentVideo> {
    config.validate(schedule)?;
    let mut x = noise_tensor(seed::derive_seed(config.seed, 0), &shape, dtype)?.unsqueeze(0)?;
    let ts = sampling_timesteps(schedule.steps(), config.steps);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        // Sampling never backpropagates; without detaching, every step would pin the previous graph.
        let eps = guided_eps(model, &x, t, prompt, config.guidance)?.detach();
        let z = if config.eta > 0.0 {
            Some(noise_tensor(seed::derive_seed(config.seed, 1 + i as u64), x.dims(), dtype)?)
        } else {
            None
        };
        x = ddim_step(&x, &eps, t, t_prev, config.eta, z.as_ref(), schedule)?;
        x = hook(t_prev, x)?.detach();
    }
    LatentVideo::new(x.squeeze(0)?)
}

pub fn ddim_sample(
    model: &UViT,
    schedule: &NoiseSchedule,
    prompt: &PromptTokens,
    latent_frames: usize,
    config: &SamplerConfig,
) -> Result<LatentVideo> {
    let c = model.config;
    if latent_frames == 0 || latent_frames > c.max_latent_frames {
        return invalid(format!("latent length {latent_frames} outside 1..={}", c.max_latent_frames));
    }
    let shape = [latent_frames, c.latent_channels, c.latent_height, c.latent_width];
    ddim_sample_with(model, schedule, prompt, shape, model.dtype(), config, &mut |_, x| Ok(x))
}
