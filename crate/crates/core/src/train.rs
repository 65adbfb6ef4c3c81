//! Step-indexed training loops over pre-encoded latents. Every step draws its
//! batch and noise from `derive_path(seed, [stream, step])`, so a run resumed
//! from a checkpoint (params + optimiser moments) continues bit-identically.

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::autoencoder::VideoAutoencoder;
use crate::control::{adapter_loss, control_latent_map, with_step, ControlAdapter, ControlGroup};
use crate::corpus::{edge_map, CorpusItem, DEFAULT_EDGE_THRESHOLD};
use crate::diffusion::{training_loss, LatentGroup, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::nn::{scalar_f64, Adam, AdamConfig};
use crate::seed;
use crate::text::{tokenize, PromptTokens, Vocab};
use crate::uvit::UViT;

/// One training clip in latent space, `(Tl, C, h, w)`, with its edge control
/// map `(Tl, 1, h, w)` when the control stage needs it.
#[derive(Debug, Clone)]
pub struct EncodedClip {
    pub latent: Tensor,
    pub prompt: PromptTokens,
    pub ctrl: Option<Tensor>,
}

pub fn encode_corpus(ae: &VideoAutoencoder, items: &[CorpusItem], vocab: &Vocab, with_ctrl: bool) -> Result<Vec<EncodedClip>> {
    items
        .iter()
        .map(|item| {
            let ctrl = if with_ctrl {
                Some(control_latent_map(&edge_map(&item.clip, DEFAULT_EDGE_THRESHOLD)?, DType::F32)?)
            } else {
                None
            };
            Ok(EncodedClip {
                latent: ae.encode(&item.clip)?.into_tensor().detach(),
                prompt: tokenize(vocab, &item.caption)?,
                ctrl,
            })
        })
        .collect()
}

/// Draw `batch` clips uniformly and group them by latent length (ascending).
fn draw(data: &[EncodedClip], batch: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if data.is_empty() {
        return invalid("no training data");
    }
    if batch == 0 {
        return invalid("batch size must be positive");
    }
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for _ in 0..batch {
        let i = rng.random_range(0..data.len());
        by_len.entry(data[i].latent.dims()[0]).or_default().push(i);
    }
    Ok(by_len.into_values().collect())
}

fn stack(data: &[EncodedClip], idx: &[usize], f: impl Fn(&EncodedClip) -> Result<Tensor>, dtype: DType) -> Result<Tensor> {
    let parts = idx.iter().map(|&i| f(&data[i])).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&parts, 0)?.to_dtype(dtype)?)
}

pub fn latent_batch(data: &[EncodedClip], batch: usize, rng: &mut rand_chacha::ChaCha8Rng, dtype: DType) -> Result<Vec<LatentGroup>> {
    draw(data, batch, rng)?
        .into_iter()
        .map(|idx| {
            Ok(LatentGroup {
                x0: stack(data, &idx, |c| Ok(c.latent.clone()), dtype)?,
                prompts: idx.iter().map(|&i| data[i].prompt).collect(),
            })
        })
        .collect()
}

pub fn control_batch(data: &[EncodedClip], batch: usize, rng: &mut rand_chacha::ChaCha8Rng, dtype: DType) -> Result<Vec<ControlGroup>> {
    draw(data, batch, rng)?
        .into_iter()
        .map(|idx| {
            let ctrl = stack(
                data,
                &idx,
                |c| c.ctrl.clone().ok_or_else(|| Error::InvalidArgument("clip lacks a control map".into())),
                dtype,
            )?;
            Ok(ControlGroup {
                latents: LatentGroup {
                    x0: stack(data, &idx, |c| Ok(c.latent.clone()), dtype)?,
                    prompts: idx.iter().map(|&i| data[i].prompt).collect(),
                },
                ctrl,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Probability of replacing a caption with the null prompt.
    pub p_uncond: f64,
    pub seed: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return invalid("steps and batch must be positive");
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return invalid(format!("learning rate must be positive, got {}", self.adam.lr));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return invalid(format!("p_uncond must be in [0, 1], got {}", self.p_uncond));
        }
        Ok(())
    }
}

pub struct DiffusionTrainer {
    pub model: UViT,
    pub adam: Adam,
}

impl DiffusionTrainer {
    pub fn train_step(&mut self, data: &[EncodedClip], schedule: &NoiseSchedule, cfg: &StageConfig, step: usize) -> Result<f64> {
        let mut rng = seed::rng(seed::derive_path(cfg.seed, &[seed::stream::DIFF_TRAIN, step as u64]));
        let groups = latent_batch(data, cfg.batch, &mut rng, self.model.dtype())?;
        let loss = training_loss(&self.model, &groups, schedule, cfg.p_uncond, &mut rng).map_err(|e| with_step(e, step))?;
        let value = scalar_f64(&loss)?;
        let grads = loss.backward()?;
        self.adam.step(self.model.store(), &grads).map_err(|e| with_step(e, step))?;
        Ok(value)
    }
}

/// Trains only the adapter; the base is used through a frozen view.
pub struct AdapterTrainer {
    pub base: UViT,
    pub adapter: ControlAdapter,
    pub adam: Adam,
}

impl AdapterTrainer {
    pub fn new(base: &UViT, adapter: ControlAdapter, adam: Adam) -> Result<Self> {
        Ok(Self { base: base.frozen()?, adapter, adam })
    }

    pub fn train_step(&mut self, data: &[EncodedClip], schedule: &NoiseSchedule, cfg: &StageConfig, step: usize) -> Result<f64> {
        let mut rng = seed::rng(seed::derive_path(cfg.seed, &[seed::stream::ADAPTER_TRAIN, step as u64]));
        let groups = control_batch(data, cfg.batch, &mut rng, self.base.dtype())?;
        let loss = adapter_loss(&self.base, &self.adapter, &groups, schedule, cfg.p_uncond, &mut rng)
            .map_err(|e| with_step(e, step))?;
        let value = scalar_f64(&loss)?;
        let grads = loss.backward()?;
        self.adam.step(self.adapter.store(), &grads).map_err(|e| with_step(e, step))?;
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AeConfig;
    use crate::control::init_adapter;
    use crate::corpus::{build_corpus, ALLOWED_LENGTHS};
    use crate::nn::to_vec_f64;
    use crate::uvit::UViTConfig;

    fn setup(with_ctrl: bool) -> (UViT, Vec<EncodedClip>) {
        let ae = VideoAutoencoder::init(AeConfig { width1: 4, width2: 8, latent_channels: 4 }, 1, DType::F32).unwrap();
        let corpus = build_corpus(12, 5, &ALLOWED_LENGTHS).unwrap();
        let data = encode_corpus(&ae, &corpus, &Vocab::grammar(), with_ctrl).unwrap();
        let cfg = UViTConfig { d_model: 16, depth: 2, heads: 2, mlp_ratio: 2, ..Default::default() };
        (UViT::init(cfg, 2, DType::F32).unwrap(), data)
    }

    fn cfg() -> StageConfig {
        StageConfig { steps: 4, batch: 6, adam: AdamConfig::with_lr(1e-3), p_uncond: 0.1, seed: 3 }
    }

    #[test]
    fn batches_group_by_length() {
        let (_, data) = setup(true);
        let mut rng = seed::rng(1);
        let groups = control_batch(&data, 10, &mut rng, DType::F32).unwrap();
        let total: usize = groups.iter().map(|g| g.latents.prompts.len()).sum();
        assert_eq!(total, 10);
        let lens: Vec<usize> = groups.iter().map(|g| g.latents.x0.dims()[1]).collect();
        assert!(lens.windows(2).all(|w| w[0] < w[1]));
        for g in &groups {
            assert_eq!(g.ctrl.dims()[1], g.latents.x0.dims()[1]);
        }
    }

    #[test]
    fn split_run_matches_straight_run() {
        let (model, data) = setup(false);
        let schedule = NoiseSchedule::default();
        let c = cfg();
        let mut straight = DiffusionTrainer { model: model.deep_clone().unwrap(), adam: Adam::new(c.adam) };
        let a: Vec<f64> = (0..4).map(|s| straight.train_step(&data, &schedule, &c, s).unwrap()).collect();

        let mut first = DiffusionTrainer { model: model.deep_clone().unwrap(), adam: Adam::new(c.adam) };
        let mut b: Vec<f64> = (0..2).map(|s| first.train_step(&data, &schedule, &c, s).unwrap()).collect();
        let state = first.adam.state();
        let mut second = DiffusionTrainer {
            model: first.model.deep_clone().unwrap(),
            adam: Adam::restore(c.adam, 2, state).unwrap(),
        };
        b.extend((2..4).map(|s| second.train_step(&data, &schedule, &c, s).unwrap()));
        assert_eq!(a, b);
        for (name, var) in straight.model.store().iter() {
            let other = second.model.store().get(name).unwrap();
            assert_eq!(to_vec_f64(var.as_tensor()).unwrap(), to_vec_f64(&other).unwrap());
        }
    }

    #[test]
    fn adapter_training_leaves_base_untouched() {
        let (model, data) = setup(true);
        let schedule = NoiseSchedule::default();
        let adapter = init_adapter(&model, 4).unwrap();
        let before: Vec<Vec<f64>> = model.store().iter().map(|(_, v)| to_vec_f64(v.as_tensor()).unwrap()).collect();
        let c = cfg();
        let mut trainer = AdapterTrainer::new(&model, adapter, Adam::new(c.adam)).unwrap();
        for s in 0..2 {
            trainer.train_step(&data, &schedule, &c, s).unwrap();
        }
        let after: Vec<Vec<f64>> = model.store().iter().map(|(_, v)| to_vec_f64(v.as_tensor()).unwrap()).collect();
        assert_eq!(before, after);
        let z = to_vec_f64(&trainer.adapter.store().get("ctrl.zero.0.w").unwrap()).unwrap();
        assert!(z.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn missing_control_maps_rejected() {
        let (model, data) = setup(false);
        let c = cfg();
        let mut trainer = AdapterTrainer::new(&model, init_adapter(&model, 4).unwrap(), Adam::new(c.adam)).unwrap();
        assert!(trainer.train_step(&data, &NoiseSchedule::default(), &c, 0).is_err());
    }
}
