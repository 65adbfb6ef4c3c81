//! Run configuration: UTF-8 lines of `key = value`, `#` comments, and a
//! mandatory `config_version = 1`. Unknown and repeated keys are errors.

use std::path::{Path, PathBuf};

use crate::corpus::ALLOWED_LENGTHS;
use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub corpus_size: usize,
    pub corpus_lengths: Vec<usize>,

    pub ae_width1: usize,
    pub ae_width2: usize,
    pub ae_latent_channels: usize,
    pub ae_corpus_size: usize,
    pub ae_steps: usize,
    pub ae_batch: usize,
    pub ae_lr: f64,
    pub ae_warmup: usize,

    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub p_uncond: f64,

    pub adapter_corpus_size: usize,
    pub adapter_steps: usize,
    pub adapter_batch: usize,
    pub adapter_lr: f64,
    pub adapter_warmup: usize,

    pub subject_images: usize,
    pub prior_images: usize,
    pub subject_steps: usize,
    pub subject_half_batch: usize,
    pub subject_lr: f64,
    pub subject_warmup: usize,

    /// Save a resumable checkpoint every this many steps.
    pub checkpoint_every: usize,
    /// Stop this invocation after this many steps (0 = run to completion).
    pub stop_after: usize,

    pub sampler_steps: usize,
    pub guidance: f64,
    pub eta: f64,
    pub prompt: String,
    pub length_frames: usize,
    pub num_samples: usize,
    pub write_ppm: bool,
    pub use_subject: bool,

    pub input: Option<PathBuf>,
    pub given_frames: usize,
    pub control_input: Option<PathBuf>,

    pub eval_per_prompt: usize,
    pub eval_oracle: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus_size: 4096,
            corpus_lengths: ALLOWED_LENGTHS.to_vec(),
            ae_width1: 16,
            ae_width2: 64,
            ae_latent_channels: 4,
            ae_corpus_size: 2048,
            ae_steps: 2000,
            ae_batch: 16,
            ae_lr: 1e-3,
            ae_warmup: 50,
            d_model: 128,
            depth: 8,
            heads: 4,
            mlp_ratio: 4,
            diffusion_steps: 1000,
            beta_start: crate::diffusion::DEFAULT_BETA_START,
            beta_end: crate::diffusion::DEFAULT_BETA_END,
            train_steps: 6000,
            batch: 16,
            lr: 3e-4,
            warmup: 200,
            p_uncond: 0.1,
            adapter_corpus_size: 2048,
            adapter_steps: 1500,
            adapter_batch: 16,
            adapter_lr: 3e-4,
            adapter_warmup: 100,
            subject_images: 16,
            prior_images: 256,
            subject_steps: 200,
            subject_half_batch: 4,
            subject_lr: 5e-5,
            subject_warmup: 20,
            checkpoint_every: 250,
            stop_after: 0,
            sampler_steps: 50,
            guidance: 3.0,
            eta: 0.0,
            prompt: "a red square moves right".into(),
            length_frames: 16,
            num_samples: 1,
            write_ppm: false,
            use_subject: false,
            input: None,
            given_frames: 4,
            control_input: None,
            eval_per_prompt: 1,
            eval_oracle: false,
        }
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(line, format!("`{key}` expects a number, got {v:?}")))
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(line, format!("`{key}` expects true or false, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        let mut version = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| bad(line, format!("expected `key = value`, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(bad(line, format!("`{key}` set twice")));
            }
            if key == "config_version" {
                version = Some(num::<u32>(line, key, value)?);
                continue;
            }
            cfg.set(line, key, value)?;
        }
        match version {
            Some(CONFIG_VERSION) => {}
            Some(v) => return Err(Error::Config(format!("unsupported config_version {v}, expected {CONFIG_VERSION}"))),
            None => return Err(Error::Config("missing `config_version = 1`".into())),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        macro_rules! n {
            ($field:ident) => {
                self.$field = num(line, key, v)?
            };
        }
        match key {
            "seed" => n!(seed),
            "corpus_size" => n!(corpus_size),
            "corpus_lengths" => {
                self.corpus_lengths = v
                    .split(',')
                    .map(|s| num::<usize>(line, key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "ae_width1" => n!(ae_width1),
            "ae_width2" => n!(ae_width2),
            "ae_latent_channels" => n!(ae_latent_channels),
            "ae_corpus_size" => n!(ae_corpus_size),
            "ae_steps" => n!(ae_steps),
            "ae_batch" => n!(ae_batch),
            "ae_lr" => n!(ae_lr),
            "ae_warmup" => n!(ae_warmup),
            "d_model" => n!(d_model),
            "depth" => n!(depth),
            "heads" => n!(heads),
            "mlp_ratio" => n!(mlp_ratio),
            "diffusion_steps" => n!(diffusion_steps),
            "beta_start" => n!(beta_start),
            "beta_end" => n!(beta_end),
            "train_steps" => n!(train_steps),
            "batch" => n!(batch),
            "lr" => n!(lr),
            "warmup" => n!(warmup),
            "p_uncond" => n!(p_uncond),
            "adapter_corpus_size" => n!(adapter_corpus_size),
            "adapter_steps" => n!(adapter_steps),
            "adapter_batch" => n!(adapter_batch),
            "adapter_lr" => n!(adapter_lr),
            "adapter_warmup" => n!(adapter_warmup),
            "subject_images" => n!(subject_images),
            "prior_images" => n!(prior_images),
            "subject_steps" => n!(subject_steps),
            "subject_half_batch" => n!(subject_half_batch),
            "subject_lr" => n!(subject_lr),
            "subject_warmup" => n!(subject_warmup),
            "checkpoint_every" => n!(checkpoint_every),
            "stop_after" => n!(stop_after),
            "sampler_steps" => n!(sampler_steps),
            "guidance" => n!(guidance),
            "eta" => n!(eta),
            "prompt" => self.prompt = v.to_string(),
            "length_frames" => n!(length_frames),
            "num_samples" => n!(num_samples),
            "write_ppm" => self.write_ppm = boolean(line, key, v)?,
            "use_subject" => self.use_subject = boolean(line, key, v)?,
            "input" => self.input = Some(PathBuf::from(v)),
            "given_frames" => n!(given_frames),
            "control_input" => self.control_input = Some(PathBuf::from(v)),
            "eval_per_prompt" => n!(eval_per_prompt),
            "eval_oracle" => self.eval_oracle = boolean(line, key, v)?,
            _ => return Err(bad(line, format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Numeric bounds shared by every command.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let positive = [
            ("corpus_size", self.corpus_size),
            ("ae_width1", self.ae_width1),
            ("ae_width2", self.ae_width2),
            ("ae_latent_channels", self.ae_latent_channels),
            ("ae_corpus_size", self.ae_corpus_size),
            ("ae_steps", self.ae_steps),
            ("ae_batch", self.ae_batch),
            ("d_model", self.d_model),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("diffusion_steps", self.diffusion_steps),
            ("train_steps", self.train_steps),
            ("batch", self.batch),
            ("adapter_corpus_size", self.adapter_corpus_size),
            ("adapter_steps", self.adapter_steps),
            ("adapter_batch", self.adapter_batch),
            ("subject_images", self.subject_images),
            ("prior_images", self.prior_images),
            ("subject_steps", self.subject_steps),
            ("subject_half_batch", self.subject_half_batch),
            ("checkpoint_every", self.checkpoint_every),
            ("sampler_steps", self.sampler_steps),
            ("num_samples", self.num_samples),
            ("eval_per_prompt", self.eval_per_prompt),
        ];
        for (k, v) in positive {
            if v == 0 {
                return err(format!("`{k}` must be positive"));
            }
        }
        if self.corpus_lengths.is_empty() {
            return err("`corpus_lengths` is empty".into());
        }
        if let Some(l) = self.corpus_lengths.iter().find(|l| !ALLOWED_LENGTHS.contains(l)) {
            return err(format!("corpus length {l} not in {ALLOWED_LENGTHS:?}"));
        }
        if self.d_model % self.heads != 0 {
            return err(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.depth % 2 != 0 {
            return err(format!("depth must be even, got {}", self.depth));
        }
        for (k, v) in [("ae_lr", self.ae_lr), ("lr", self.lr), ("adapter_lr", self.adapter_lr), ("subject_lr", self.subject_lr)] {
            if !(v > 0.0 && v < 1.0) {
                return err(format!("`{k}` must be in (0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return err(format!("`p_uncond` must be in [0, 1], got {}", self.p_uncond));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return err(format!("need 0 < beta_start <= beta_end < 1, got {} and {}", self.beta_start, self.beta_end));
        }
        if self.sampler_steps > self.diffusion_steps {
            return err(format!("sampler_steps {} exceeds diffusion_steps {}", self.sampler_steps, self.diffusion_steps));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return err(format!("`guidance` must be finite and >= 0, got {}", self.guidance));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return err(format!("`eta` must be finite and >= 0, got {}", self.eta));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = format!("config_version = {CONFIG_VERSION}\n");
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("seed", self.seed.to_string());
        kv("corpus_size", self.corpus_size.to_string());
        kv("corpus_lengths", self.corpus_lengths.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","));
        kv("ae_width1", self.ae_width1.to_string());
        kv("ae_width2", self.ae_width2.to_string());
        kv("ae_latent_channels", self.ae_latent_channels.to_string());
        kv("ae_corpus_size", self.ae_corpus_size.to_string());
        kv("ae_steps", self.ae_steps.to_string());
        kv("ae_batch", self.ae_batch.to_string());
        kv("ae_lr", self.ae_lr.to_string());
        kv("ae_warmup", self.ae_warmup.to_string());
        kv("d_model", self.d_model.to_string());
        kv("depth", self.depth.to_string());
        kv("heads", self.heads.to_string());
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("diffusion_steps", self.diffusion_steps.to_string());
        kv("beta_start", self.beta_start.to_string());
        kv("beta_end", self.beta_end.to_string());
        kv("train_steps", self.train_steps.to_string());
        kv("batch", self.batch.to_string());
        kv("lr", self.lr.to_string());
        kv("warmup", self.warmup.to_string());
        kv("p_uncond", self.p_uncond.to_string());
        kv("adapter_corpus_size", self.adapter_corpus_size.to_string());
        kv("adapter_steps", self.adapter_steps.to_string());
        kv("adapter_batch", self.adapter_batch.to_string());
        kv("adapter_lr", self.adapter_lr.to_string());
        kv("adapter_warmup", self.adapter_warmup.to_string());
        kv("subject_images", self.subject_images.to_string());
        kv("prior_images", self.prior_images.to_string());
        kv("subject_steps", self.subject_steps.to_string());
        kv("subject_half_batch", self.subject_half_batch.to_string());
        kv("subject_lr", self.subject_lr.to_string());
        kv("subject_warmup", self.subject_warmup.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("stop_after", self.stop_after.to_string());
        kv("sampler_steps", self.sampler_steps.to_string());
        kv("guidance", self.guidance.to_string());
        kv("eta", self.eta.to_string());
        kv("prompt", self.prompt.clone());
        kv("length_frames", self.length_frames.to_string());
        kv("num_samples", self.num_samples.to_string());
        kv("write_ppm", self.write_ppm.to_string());
        kv("use_subject", self.use_subject.to_string());
        if let Some(p) = &self.input {
            kv("input", p.display().to_string());
        }
        kv("given_frames", self.given_frames.to_string());
        if let Some(p) = &self.control_input {
            kv("control_input", p.display().to_string());
        }
        kv("eval_per_prompt", self.eval_per_prompt.to_string());
        kv("eval_oracle", self.eval_oracle.to_string());
        s
    }
}
