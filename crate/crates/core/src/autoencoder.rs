//! Deterministic spatio-temporal video autoencoder.
//!
//! Frames are encoded independently by two stride-2 blocks (H, W ÷ 4), then
//! every aligned group of four frames is folded into one latent frame by a
//! kernel-4 / stride-4 temporal layer. Single-frame clips skip the temporal
//! layer, so an image maps to exactly one latent frame. The decoder mirrors
//! this with a learned time unfold and depth-to-space upsampling.

use candle_core::{DType, Device, Tensor};

use crate::corpus::{CorpusItem, VideoClip, CHANNELS};
use crate::error::{invalid, Error, Result};
use crate::nn::{scalar_f64, Adam, AdamConfig, Conv3x3, Down2x2, Init, Linear, ParamStore, Up2x2};
use crate::seed;
use rand::Rng;

pub const SPATIAL_FACTOR: usize = 4;
pub const TEMPORAL_FACTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AeConfig {
    /// Channels at full resolution; the half-resolution stage uses twice this.
    pub width1: usize,
    /// Channels at latent resolution.
    pub width2: usize,
    pub latent_channels: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            width1: 16,
            width2: 64,
            latent_channels: 4,
        }
    }
}

/// Number of latent frames for a `frames`-long clip.
pub fn latent_frames(frames: usize) -> usize {
    if frames <= 1 {
        1
    } else {
        frames.div_ceil(TEMPORAL_FACTOR)
    }
}

/// Latent clip, layout (Tl, c, h, w).
#[derive(Debug, Clone)]
pub struct LatentVideo {
    tensor: Tensor,
}

impl LatentVideo {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 4 {
            return invalid(format!("latent must be rank 4, got {:?}", tensor.dims()));
        }
        Ok(Self { tensor })
    }

    pub fn from_vec(data: Vec<f32>, dims: [usize; 4]) -> Result<Self> {
        Self::new(Tensor::from_vec(data, &dims, &Device::Cpu)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn dims(&self) -> [usize; 4] {
        let d = self.tensor.dims();
        [d[0], d[1], d[2], d[3]]
    }

    pub fn frames(&self) -> usize {
        self.dims()[0]
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.tensor.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn is_finite(&self) -> Result<bool> {
        Ok(self.to_vec()?.iter().all(|v| v.is_finite()))
    }
}

/// `(T, 3, H, W)` clip → `(1, T, H, W, 3)` channels-last tensor.
pub fn clip_to_tensor(clip: &VideoClip, dtype: DType) -> Result<Tensor> {
    let [t, c, h, w] = clip.shape();
    Ok(Tensor::from_slice(clip.data(), (1, t, c, h, w), &Device::Cpu)?
        .permute((0, 1, 3, 4, 2))?
        .contiguous()?
        .to_dtype(dtype)?)
}

/// Inverse of [`clip_to_tensor`] for one batch row, clamping into [-1, 1].
pub fn tensor_to_clip(x: &Tensor) -> Result<VideoClip> {
    let (t, h, w, c) = x.dims4()?;
    if c != CHANNELS {
        return invalid(format!("expected {CHANNELS} channels, got {c}"));
    }
    let data = x
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    VideoClip::from_clamped(t, h, w, data)
}

pub struct VideoAutoencoder {
    pub config: AeConfig,
    store: ParamStore,
    /// Raw latents are divided by this on encode and multiplied back on decode.
    pub latent_scale: f64,
    conv_in: Conv3x3,
    down1: Down2x2,
    conv_mid: Conv3x3,
    down2: Down2x2,
    time_down: Linear,
    to_latent: Conv3x3,
    from_latent: Conv3x3,
    time_up: Linear,
    dec1: Conv3x3,
    up1: Up2x2,
    dec2: Conv3x3,
    up2: Up2x2,
    conv_out: Conv3x3,
}

impl VideoAutoencoder {
    pub fn init(config: AeConfig, seed: u64, dtype: DType) -> Result<Self> {
        let AeConfig { width1: w1, width2: w2, latent_channels: c } = config;
        let mut store = ParamStore::new(dtype);
        let mut init = Init::new(seed, dtype);
        Conv3x3::init(&mut store, &mut init, "enc.conv_in", CHANNELS, w1)?;
        Down2x2::init(&mut store, &mut init, "enc.down1", w1, 2 * w1)?;
        Conv3x3::init(&mut store, &mut init, "enc.conv_mid", 2 * w1, w2)?;
        Down2x2::init(&mut store, &mut init, "enc.down2", w2, w2)?;
        let fold = TEMPORAL_FACTOR * w2;
        Linear::init(&mut store, &mut init, "enc.time_down", fold, w2, (2.0 / fold as f64).sqrt())?;
        Conv3x3::init(&mut store, &mut init, "enc.to_latent", w2, c)?;
        Conv3x3::init(&mut store, &mut init, "dec.from_latent", c, w2)?;
        Linear::init(&mut store, &mut init, "dec.time_up", w2, fold, (2.0 / w2 as f64).sqrt())?;
        Conv3x3::init(&mut store, &mut init, "dec.conv1", w2, w2)?;
        Up2x2::init(&mut store, &mut init, "dec.up1", w2, 2 * w1)?;
        Conv3x3::init(&mut store, &mut init, "dec.conv2", 2 * w1, 2 * w1)?;
        Up2x2::init(&mut store, &mut init, "dec.up2", 2 * w1, w1)?;
        Conv3x3::init(&mut store, &mut init, "dec.conv_out", w1, CHANNELS)?;
        Self::from_store(config, store, 1.0)
    }

    pub fn from_store(config: AeConfig, store: ParamStore, latent_scale: f64) -> Result<Self> {
        if !(latent_scale.is_finite() && latent_scale > 0.0) {
            return invalid(format!("latent scale must be positive, got {latent_scale}"));
        }
        Ok(Self {
            config,
            latent_scale,
            conv_in: Conv3x3::load(&store, "enc.conv_in")?,
            down1: Down2x2::load(&store, "enc.down1")?,
            conv_mid: Conv3x3::load(&store, "enc.conv_mid")?,
            down2: Down2x2::load(&store, "enc.down2")?,
            time_down: Linear::load(&store, "enc.time_down")?,
            to_latent: Conv3x3::load(&store, "enc.to_latent")?,
            from_latent: Conv3x3::load(&store, "dec.from_latent")?,
            time_up: Linear::load(&store, "dec.time_up")?,
            dec1: Conv3x3::load(&store, "dec.conv1")?,
            up1: Up2x2::load(&store, "dec.up1")?,
            dec2: Conv3x3::load(&store, "dec.conv2")?,
            up2: Up2x2::load(&store, "dec.up2")?,
            conv_out: Conv3x3::load(&store, "dec.conv_out")?,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Channels-last batch encode: `(B, T, H, W, 3)` → `(B, Tl, h, w, c)`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, h, w, c) = x.dims5()?;
        if c != CHANNELS {
            return invalid(format!("expected {CHANNELS} channels, got {c}"));
        }
        if h % SPATIAL_FACTOR != 0 || w % SPATIAL_FACTOR != 0 {
            return invalid(format!("frame size {h}x{w} not divisible by {SPATIAL_FACTOR}"));
        }
        let frames = x.reshape((b * t, h, w, c))?;
        let f = self.conv_in.forward(&frames)?.silu()?;
        let f = self.down1.forward(&f)?.silu()?;
        let f = self.conv_mid.forward(&f)?.silu()?;
        let f = self.down2.forward(&f)?.silu()?;
        let (hl, wl, wd) = (h / SPATIAL_FACTOR, w / SPATIAL_FACTOR, self.config.width2);
        let f = if t == 1 {
            f
        } else {
            let f = f.reshape((b, t, hl, wl, wd))?;
            let tl = latent_frames(t);
            let pad = tl * TEMPORAL_FACTOR - t;
            // Ceil mode: replicate the last frame into the final group.
            let f = if pad > 0 { f.pad_with_same(1, 0, pad)? } else { f };
            let f = f
                .reshape((b, tl, TEMPORAL_FACTOR, hl, wl, wd))?
                .permute((0, 1, 3, 4, 2, 5))?
                .contiguous()?
                .reshape((b * tl, hl, wl, TEMPORAL_FACTOR * wd))?;
            self.time_down.forward(&f)?.silu()?
        };
        let z = self.to_latent.forward(&f)?;
        let tl = latent_frames(t);
        Ok((z.reshape((b, tl, hl, wl, self.config.latent_channels))? / self.latent_scale)?)
    }

    /// Channels-last batch decode: `(B, Tl, h, w, c)` → `(B, target_t, H, W, 3)`, unclamped.
    pub fn decode_tensor(&self, z: &Tensor, target_t: usize) -> Result<Tensor> {
        let (b, tl, hl, wl, c) = z.dims5()?;
        if c != self.config.latent_channels {
            return invalid(format!("expected {} latent channels, got {c}", self.config.latent_channels));
        }
        if target_t == 0 || latent_frames(target_t) != tl {
            return invalid(format!("target length {target_t} inconsistent with {tl} latent frames"));
        }
        let wd = self.config.width2;
        let z = (z.reshape((b * tl, hl, wl, c))? * self.latent_scale)?;
        let f = self.from_latent.forward(&z)?.silu()?;
        let (f, frames) = if target_t == 1 {
            (f, 1)
        } else {
            let f = self.time_up.forward(&f)?.silu()?;
            let f = f
                .reshape((b, tl, hl, wl, TEMPORAL_FACTOR, wd))?
                .permute((0, 1, 4, 2, 3, 5))?
                .contiguous()?
                .reshape((b, tl * TEMPORAL_FACTOR, hl, wl, wd))?;
            let f = if tl * TEMPORAL_FACTOR > target_t { f.narrow(1, 0, target_t)? } else { f };
            (f.reshape((b * target_t, hl, wl, wd))?, target_t)
        };
        let f = self.dec1.forward(&f)?.silu()?;
        let f = self.up1.forward(&f)?.silu()?;
        let f = self.dec2.forward(&f)?.silu()?;
        let f = self.up2.forward(&f)?.silu()?;
        let out = self.conv_out.forward(&f)?;
        Ok(out.reshape((b, frames, hl * SPATIAL_FACTOR, wl * SPATIAL_FACTOR, CHANNELS))?)
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<LatentVideo> {
        let z = self.encode_tensor(&clip_to_tensor(clip, self.dtype())?)?;
        LatentVideo::new(z.squeeze(0)?.permute((0, 3, 1, 2))?.contiguous()?)
    }

    pub fn decode(&self, latent: &LatentVideo, target_t: usize) -> Result<VideoClip> {
        let z = latent.tensor().to_dtype(self.dtype())?.permute((0, 2, 3, 1))?.unsqueeze(0)?;
        let x = self.decode_tensor(&z.contiguous()?, target_t)?;
        tensor_to_clip(&x.squeeze(0)?)
    }

    /// Set the latent scale to the standard deviation of raw latents over `clips`.
    pub fn calibrate_latent_scale(&mut self, clips: &[VideoClip]) -> Result<f64> {
        if clips.is_empty() {
            return invalid("no clips to calibrate on");
        }
        let previous = self.latent_scale;
        self.latent_scale = 1.0;
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
        for clip in clips {
            for v in self.encode(clip)?.to_vec()? {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
        self.latent_scale = if std.is_finite() && std > 1e-6 { std } else { previous };
        Ok(self.latent_scale)
    }
}

/// `20·log10(2 / rms)`, capped at 99 dB for identical clips.
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    if a.shape() != b.shape() {
        return invalid(format!("psnr shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    let mse = mse(a.data(), b.data());
    Ok(psnr_from_mse(mse))
}

pub(crate) fn mse(a: &[f32], b: &[f32]) -> f64 {
    let se: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    se / a.len() as f64
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return 99.0;
    }
    (20.0 * (2.0 / mse.sqrt()).log10()).min(99.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        let mut adam = AdamConfig::with_lr(1e-3);
        adam.warmup = 50;
        Self {
            steps: 1500,
            batch: 16,
            adam,
            seed: 0,
        }
    }
}

/// Training batches are sampled in units of one temporal group: a four-frame
/// aligned chunk of a video clip or a whole single-frame clip. Groups are
/// encoded and decoded independently, so a chunk exercises exactly the
/// computation applied to the full clip.
#[derive(Debug, Clone)]
pub struct AeBatch {
    pub chunks: Option<Tensor>,
    pub images: Option<Tensor>,
}

pub fn sample_ae_batch(corpus: &[CorpusItem], batch: usize, seed: u64, dtype: DType) -> Result<AeBatch> {
    if corpus.is_empty() {
        return invalid("empty corpus");
    }
    let mut rng = seed::rng(seed);
    let mut chunks = vec![];
    let mut images = vec![];
    for _ in 0..batch {
        let item = &corpus[rng.random_range(0..corpus.len())];
        let t = item.clip.frames();
        if t == 1 {
            images.push(clip_to_tensor(&item.clip, dtype)?);
        } else {
            let groups = t / TEMPORAL_FACTOR;
            let g = rng.random_range(0..groups.max(1));
            let len = TEMPORAL_FACTOR.min(t);
            let chunk = item.clip.frame_range(g * TEMPORAL_FACTOR, len)?;
            if len != TEMPORAL_FACTOR {
                return invalid(format!("clip length {t} is not a multiple of {TEMPORAL_FACTOR}"));
            }
            chunks.push(clip_to_tensor(&chunk, dtype)?);
        }
    }
    let cat = |v: Vec<Tensor>| -> Result<Option<Tensor>> {
        if v.is_empty() {
            Ok(None)
        } else {
            Ok(Some(Tensor::cat(&v, 0)?))
        }
    };
    Ok(AeBatch {
        chunks: cat(chunks)?,
        images: cat(images)?,
    })
}

/// Mean squared reconstruction error over every element of the batch.
pub fn reconstruction_loss(ae: &VideoAutoencoder, batch: &AeBatch) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    let mut count = 0usize;
    for (x, t) in [(&batch.chunks, TEMPORAL_FACTOR), (&batch.images, 1)] {
        if let Some(x) = x {
            let recon = ae.decode_tensor(&ae.encode_tensor(x)?, t)?;
            let se = (recon - x)?.sqr()?.sum_all()?;
            count += x.elem_count();
            total = Some(match total {
                Some(acc) => (acc + se)?,
                None => se,
            });
        }
    }
    match total {
        Some(t) => Ok((t / count as f64)?),
        None => invalid("empty batch"),
    }
}

pub struct AeTrainer {
    pub ae: VideoAutoencoder,
    pub adam: Adam,
}

impl AeTrainer {
    pub fn new(ae: VideoAutoencoder, adam: Adam) -> Self {
        Self { ae, adam }
    }

    /// One optimiser step; `step` indexes the failure report.
    pub fn train_step(&mut self, batch: &AeBatch, step: usize) -> Result<f64> {
        let loss = reconstruction_loss(&self.ae, batch)?;
        let value = scalar_f64(&loss)?;
        if !value.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                reason: format!("reconstruction loss is {value}"),
            });
        }
        let grads = loss.backward()?;
        self.adam
            .step(self.ae.store(), &grads)
            .map_err(|e| Error::TrainingFailure { step, reason: e.to_string() })?;
        Ok(value)
    }
}

/// Train from scratch; returns the model (with calibrated latent scale) and
/// the per-step loss curve.
pub fn train_autoencoder(
    corpus: &[CorpusItem],
    ae_config: AeConfig,
    config: &AeTrainConfig,
) -> Result<(VideoAutoencoder, Vec<f64>)> {
    if corpus.is_empty() {
        return invalid("empty corpus");
    }
    let ae = VideoAutoencoder::init(ae_config, seed::derive_path(config.seed, &[seed::stream::AE_INIT]), DType::F32)?;
    let mut trainer = AeTrainer::new(ae, Adam::new(config.adam));
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch_seed = seed::derive_path(config.seed, &[seed::stream::AE_TRAIN, step as u64]);
        let batch = sample_ae_batch(corpus, config.batch, batch_seed, DType::F32)?;
        curve.push(trainer.train_step(&batch, step)?);
    }
    let mut ae = trainer.ae;
    let clips: Vec<VideoClip> = corpus.iter().take(256).map(|c| c.clip.clone()).collect();
    ae.calibrate_latent_scale(&clips)?;
    Ok((ae, curve))
}
