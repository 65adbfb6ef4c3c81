//! U-ViT noise predictor over 3D latent patches.
//!
//! The input sequence is `[time | text × 8 | patches]`: one token from a
//! sinusoidal timestep embedding, eight prompt tokens, and one token per
//! (1, 2, 2) latent patch. Conditioning is purely by concatenation. The first
//! half of the blocks push their outputs on a stack; each block of the second
//! half pops one, and a skip-merge linear map folds it into its input.

use candle_core::{DType, Device, Tensor};

use crate::autoencoder::LatentVideo;
use crate::error::{invalid, Error, Result};
use crate::nn::{gelu, linear, softmax_last, Init, LayerNorm, Linear, ParamStore};
use crate::text::{PromptTokens, MAX_TOKENS};

pub const PATCH: (usize, usize, usize) = (1, 2, 2);
/// Time token plus text tokens.
pub const PREFIX_TOKENS: usize = 1 + MAX_TOKENS;
const INIT_STD: f64 = 0.02;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UViTConfig {
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub max_latent_frames: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
}

impl Default for UViTConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_height: 8,
            latent_width: 8,
            max_latent_frames: 4,
            d_model: 128,
            depth: 8,
            heads: 4,
            mlp_ratio: 4,
            vocab_size: crate::text::Vocab::grammar().len(),
        }
    }
}

impl UViTConfig {
    pub fn patch_dim(&self) -> usize {
        self.latent_channels * PATCH.0 * PATCH.1 * PATCH.2
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.latent_height / PATCH.1, self.latent_width / PATCH.2)
    }

    pub fn patches_per_frame(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Total sequence length for `tl` latent frames.
    pub fn sequence_len(&self, tl: usize) -> usize {
        PREFIX_TOKENS + tl * self.patches_per_frame()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth % 2 != 0 {
            return invalid(format!("depth must be even and positive, got {}", self.depth));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return invalid(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.latent_height % PATCH.1 != 0 || self.latent_width % PATCH.2 != 0 {
            return invalid("latent size not divisible by the patch size");
        }
        if self.max_latent_frames == 0 || self.vocab_size == 0 || self.mlp_ratio == 0 {
            return invalid("frames, vocabulary and mlp ratio must be positive");
        }
        Ok(())
    }
}

/// Shape bookkeeping for [`patchify`] / [`unpatchify`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub frames: usize,
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.frames * self.grid_h * self.grid_w
    }
}

/// `(B, Tl, C, h, w)` → `(B, P, C·2·2)`, patches row-major over (tl, gy, gx),
/// each flattened in (c, p_t, p_h, p_w) order.
pub fn patchify_tensor(x: &Tensor) -> Result<(Tensor, PatchGrid)> {
    let (b, tl, c, h, w) = x.dims5()?;
    if h % PATCH.1 != 0 || w % PATCH.2 != 0 {
        return invalid(format!("latent {h}x{w} not divisible by patch {}x{}", PATCH.1, PATCH.2));
    }
    let grid = PatchGrid { frames: tl, channels: c, grid_h: h / PATCH.1, grid_w: w / PATCH.2 };
    let p = x
        .reshape(vec![b, tl, c, grid.grid_h, PATCH.1, grid.grid_w, PATCH.2])?
        .permute([0, 1, 3, 5, 2, 4, 6])?
        .contiguous()?
        .reshape((b, grid.num_patches(), c * PATCH.1 * PATCH.2))?;
    Ok((p, grid))
}

/// Inverse of [`patchify_tensor`].
pub fn unpatchify_tensor(patches: &Tensor, grid: PatchGrid) -> Result<Tensor> {
    let (b, p, d) = patches.dims3()?;
    if p != grid.num_patches() || d != grid.channels * PATCH.1 * PATCH.2 {
        return invalid(format!(
            "{p} patches of size {d} do not match grid {grid:?}"
        ));
    }
    Ok(patches
        .reshape(vec![b, grid.frames, grid.grid_h, grid.grid_w, grid.channels, PATCH.1, PATCH.2])?
        .permute([0, 1, 4, 2, 5, 3, 6])?
        .contiguous()?
        .reshape((b, grid.frames, grid.channels, grid.grid_h * PATCH.1, grid.grid_w * PATCH.2))?)
}

pub fn patchify(latent: &LatentVideo) -> Result<(Tensor, PatchGrid)> {
    let (p, grid) = patchify_tensor(&latent.tensor().unsqueeze(0)?)?;
    Ok((p.squeeze(0)?, grid))
}

pub fn unpatchify(patches: &Tensor, grid: PatchGrid) -> Result<LatentVideo> {
    LatentVideo::new(unpatchify_tensor(&patches.unsqueeze(0)?, grid)?.squeeze(0)?)
}

/// Sinusoidal timestep features `[cos(t·f_i), sin(t·f_i)]`, `f_i = 10000^(-i/half)`.
pub fn timestep_features(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let mut row = vec![0f64; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = step as f64 * freq;
            row[i] = arg.cos();
            row[half + i] = arg.sin();
        }
        data.extend(row);
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Assembled denoiser input.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `(B, N, d_model)`.
    pub tokens: Tensor,
    /// Additive attention bias over keys, `(B, 1, 1, N)`: 0 or a large negative value for padding.
    pub key_bias: Tensor,
    pub grid: PatchGrid,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn forward(&self, x: &Tensor, key_bias: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let q = qkv.get(0)?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let weights = softmax_last(&scores.broadcast_add(key_bias)?)?;
        let out = weights.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn init(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, mlp_ratio: usize) -> Result<()> {
        LayerNorm::init(store, init, &format!("{name}.ln1"), d)?;
        Linear::init(store, init, &format!("{name}.attn.qkv"), d, 3 * d, INIT_STD)?;
        Linear::init(store, init, &format!("{name}.attn.proj"), d, d, INIT_STD)?;
        LayerNorm::init(store, init, &format!("{name}.ln2"), d)?;
        Linear::init(store, init, &format!("{name}.mlp.fc1"), d, mlp_ratio * d, INIT_STD)?;
        Linear::init(store, init, &format!("{name}.mlp.fc2"), mlp_ratio * d, d, INIT_STD)
    }

    pub fn load(store: &ParamStore, name: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::load(store, &format!("{name}.ln1"))?,
            attn: Attention {
                qkv: Linear::load(store, &format!("{name}.attn.qkv"))?,
                proj: Linear::load(store, &format!("{name}.attn.proj"))?,
                heads,
            },
            ln2: LayerNorm::load(store, &format!("{name}.ln2"))?,
            mlp: Mlp {
                fc1: Linear::load(store, &format!("{name}.mlp.fc1"))?,
                fc2: Linear::load(store, &format!("{name}.mlp.fc2"))?,
            },
        })
    }

    pub fn forward(&self, x: &Tensor, key_bias: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, key_bias)?)?;
        Ok((&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?)
    }
}

/// Long-skip merge: `[h, skip] · W + b` with `W: (2d, d)`, evaluated as
/// `h · W[:d] + skip · W[d:] + b`.
#[derive(Debug, Clone)]
pub struct SkipMerge {
    pub w: Tensor,
    pub b: Tensor,
}

impl SkipMerge {
    fn init(store: &mut ParamStore, init: &mut Init, name: &str, d: usize) -> Result<()> {
        // Start close to passing `h` through unchanged.
        let eye = Tensor::eye(d, store.dtype(), &Device::Cpu)?;
        let w_h = (eye + init.normal(&[d, d], INIT_STD)?)?;
        let w_s = init.normal(&[d, d], INIT_STD)?;
        store.insert(&format!("{name}.w"), Tensor::cat(&[w_h, w_s], 0)?)?;
        store.insert(&format!("{name}.b"), init.zeros(&[d])?)
    }

    fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            w: store.get(&format!("{name}.w"))?,
            b: store.get(&format!("{name}.b"))?,
        })
    }

    fn d(&self) -> usize {
        self.b.dims()[0]
    }

    pub fn forward(&self, h: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let d = self.d();
        let main = linear(h, &self.w.narrow(0, 0, d)?, None)?;
        let side = linear(skip, &self.w.narrow(0, d, d)?, None)?;
        Ok((main + side)?.broadcast_add(&self.b)?)
    }

    /// The same map with the skip branch removed.
    pub fn forward_main_only(&self, h: &Tensor) -> Result<Tensor> {
        Ok(linear(h, &self.w.narrow(0, 0, self.d())?, None)?.broadcast_add(&self.b)?)
    }
}

/// Push/pop counts observed during one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipTrace {
    pub pushes: usize,
    pub pops: usize,
    pub left_on_stack: usize,
}

pub struct UViT {
    pub config: UViTConfig,
    store: ParamStore,
    patch_embed: Linear,
    pos_time: Tensor,
    pos_space: Tensor,
    slots: Tensor,
    time_fc1: Linear,
    time_fc2: Linear,
    text_embed: Tensor,
    blocks: Vec<Block>,
    skips: Vec<SkipMerge>,
    final_ln: LayerNorm,
    out: Linear,
}

/// Name of the text embedding table; checkpointed in its own section.
pub const TEXT_EMBED: &str = "text_embed";

impl UViT {
    pub fn init(config: UViTConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new(dtype);
        let mut init = Init::new(seed, dtype);
        Linear::init(&mut store, &mut init, "patch_embed", config.patch_dim(), d, INIT_STD)?;
        store.insert("pos.time", init.normal(&[config.max_latent_frames, d], INIT_STD)?)?;
        store.insert("pos.space", init.normal(&[config.patches_per_frame(), d], INIT_STD)?)?;
        store.insert("pos.slots", init.normal(&[PREFIX_TOKENS, d], INIT_STD)?)?;
        Linear::init(&mut store, &mut init, "time_mlp.fc1", d, d, INIT_STD)?;
        Linear::init(&mut store, &mut init, "time_mlp.fc2", d, d, INIT_STD)?;
        store.insert(TEXT_EMBED, init.normal(&[config.vocab_size, d], INIT_STD)?)?;
        for i in 0..config.depth {
            Block::init(&mut store, &mut init, &format!("blocks.{i}"), d, config.mlp_ratio)?;
        }
        for j in 0..config.depth / 2 {
            SkipMerge::init(&mut store, &mut init, &format!("skips.{j}"), d)?;
        }
        LayerNorm::init(&mut store, &mut init, "final_ln", d)?;
        Linear::init(&mut store, &mut init, "out", d, config.patch_dim(), INIT_STD)?;
        Self::from_store(config, store)
    }

    pub fn from_store(config: UViTConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.depth)
            .map(|i| Block::load(&store, &format!("blocks.{i}"), config.heads))
            .collect::<Result<Vec<_>>>()?;
        let skips = (0..config.depth / 2)
            .map(|j| SkipMerge::load(&store, &format!("skips.{j}")))
            .collect::<Result<Vec<_>>>()?;
        let text_embed = store.get(TEXT_EMBED)?;
        if text_embed.dims() != [config.vocab_size, config.d_model] {
            return invalid(format!("text embedding has shape {:?}", text_embed.dims()));
        }
        Ok(Self {
            config,
            patch_embed: Linear::load(&store, "patch_embed")?,
            pos_time: store.get("pos.time")?,
            pos_space: store.get("pos.space")?,
            slots: store.get("pos.slots")?,
            time_fc1: Linear::load(&store, "time_mlp.fc1")?,
            time_fc2: Linear::load(&store, "time_mlp.fc2")?,
            text_embed,
            blocks,
            skips,
            final_ln: LayerNorm::load(&store, "final_ln")?,
            out: Linear::load(&store, "out")?,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Independent copy with its own parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        Self::from_store(self.config, self.store.deep_copy()?)
    }

    /// Same parameters (shared storage) with gradients disabled.
    pub fn frozen(&self) -> Result<Self> {
        Self::from_store(self.config, self.store.frozen_view())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Self::from_store(self.config, self.store.to_dtype(dtype)?)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Timestep token before its slot embedding: `(B, d)`.
    pub fn time_embedding(&self, t: &[usize]) -> Result<Tensor> {
        let feats = timestep_features(t, self.config.d_model, self.dtype())?;
        self.time_fc2.forward(&self.time_fc1.forward(&feats)?.silu()?)
    }

    /// Prompt token rows `(B, 8, d)` and the key bias for padding.
    pub fn text_tokens(&self, prompts: &[PromptTokens]) -> Result<(Tensor, Tensor)> {
        let b = prompts.len();
        let ids: Vec<u32> = prompts.iter().flat_map(|p| p.ids).collect();
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return invalid(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size));
        }
        let ids = Tensor::from_vec(ids, b * MAX_TOKENS, &Device::Cpu)?;
        let rows = self.text_embed.index_select(&ids, 0)?.reshape((b, MAX_TOKENS, self.config.d_model))?;
        let bias: Vec<f64> = prompts
            .iter()
            .flat_map(|p| p.mask().map(|m| if m > 0.0 { 0.0 } else { MASKED }))
            .collect();
        let bias = Tensor::from_vec(bias, (b, MAX_TOKENS), &Device::Cpu)?.to_dtype(self.dtype())?;
        Ok((rows, bias))
    }

    /// Patch tokens `(B, P, d)` before positional embeddings.
    pub fn patch_tokens(&self, x: &Tensor) -> Result<(Tensor, PatchGrid)> {
        let (_, tl, c, h, w) = x.dims5()?;
        if c != self.config.latent_channels || h != self.config.latent_height || w != self.config.latent_width {
            return invalid(format!("latent shape {:?} does not match the model", x.dims()));
        }
        if tl == 0 || tl > self.config.max_latent_frames {
            return invalid(format!("{tl} latent frames outside 1..={}", self.config.max_latent_frames));
        }
        let (patches, grid) = patchify_tensor(x)?;
        Ok((self.patch_embed.forward(&patches)?, grid))
    }

    /// Concatenate `[time | text | patches]`, adding slot embeddings to the
    /// time and text tokens and factorised time+space positions to patches.
    pub fn assemble_sequence(
        &self,
        time: &Tensor,
        text: &Tensor,
        text_bias: &Tensor,
        patches: &Tensor,
        grid: PatchGrid,
    ) -> Result<TokenSequence> {
        let d = self.config.d_model;
        let (b, td) = time.dims2()?;
        let (bt, nt, dt) = text.dims3()?;
        let (bp, np, dp) = patches.dims3()?;
        if td != d || dt != d || dp != d {
            return invalid(format!("token widths {td}, {dt}, {dp} must all equal d_model {d}"));
        }
        if bt != b || bp != b || nt != MAX_TOKENS || np != grid.num_patches() {
            return invalid("token batch or count mismatch");
        }
        let time_tok = time.unsqueeze(1)?.broadcast_add(&self.slots.narrow(0, 0, 1)?)?;
        let text_tok = text.broadcast_add(&self.slots.narrow(0, 1, MAX_TOKENS)?)?;
        let pos = self
            .pos_time
            .narrow(0, 0, grid.frames)?
            .unsqueeze(1)?
            .broadcast_add(&self.pos_space.unsqueeze(0)?)?
            .reshape((grid.num_patches(), d))?;
        let patch_tok = patches.broadcast_add(&pos)?;
        let tokens = Tensor::cat(&[time_tok, text_tok, patch_tok], 1)?;
        let zeros = Tensor::zeros((b, 1), self.dtype(), &Device::Cpu)?;
        let zeros_p = Tensor::zeros((b, np), self.dtype(), &Device::Cpu)?;
        let key_bias = Tensor::cat(&[zeros, text_bias.clone(), zeros_p], 1)?.reshape((b, 1, 1, PREFIX_TOKENS + np))?;
        Ok(TokenSequence { tokens, key_bias, grid })
    }

    /// Embed `(x_t, t, prompt)` into the input sequence.
    pub fn embed_inputs(&self, x: &Tensor, t: &[usize], prompts: &[PromptTokens]) -> Result<TokenSequence> {
        let b = x.dims()[0];
        if t.len() != b || prompts.len() != b {
            return invalid(format!("batch of {b} latents with {} timesteps and {} prompts", t.len(), prompts.len()));
        }
        let (patches, grid) = self.patch_tokens(x)?;
        let time = self.time_embedding(t)?;
        let (text, bias) = self.text_tokens(prompts)?;
        self.assemble_sequence(&time, &text, &bias, &patches, grid)
    }

    /// Run the block stack. `residuals`, when given, are added to the outputs
    /// of the first `depth / 2` blocks before they are pushed.
    pub fn run_blocks(
        &self,
        seq: &TokenSequence,
        residuals: Option<&[Tensor]>,
        trace: Option<&mut SkipTrace>,
    ) -> Result<Tensor> {
        let half = self.config.depth / 2;
        if let Some(r) = residuals {
            if r.len() != half {
                return invalid(format!("expected {half} control residuals, got {}", r.len()));
            }
        }
        let mut stack = Vec::with_capacity(half);
        let mut local = SkipTrace::default();
        let mut h = seq.tokens.clone();
        for (i, block) in self.blocks[..half].iter().enumerate() {
            h = block.forward(&h, &seq.key_bias)?;
            if let Some(r) = residuals {
                h = (h + &r[i])?;
            }
            stack.push(h.clone());
            local.pushes += 1;
        }
        for (j, block) in self.blocks[half..].iter().enumerate() {
            let skip = stack
                .pop()
                .ok_or_else(|| Error::InvalidState("skip stack underflow".into()))?;
            local.pops += 1;
            h = self.skips[j].forward(&h, &skip)?;
            h = block.forward(&h, &seq.key_bias)?;
        }
        local.left_on_stack = stack.len();
        if let Some(t) = trace {
            *t = local;
        }
        Ok(h)
    }

    /// Final norm and projection of the patch tokens back to a latent.
    pub fn head(&self, h: &Tensor, grid: PatchGrid) -> Result<Tensor> {
        let patches = h.narrow(1, PREFIX_TOKENS, grid.num_patches())?;
        let out = self.out.forward(&self.final_ln.forward(&patches)?)?;
        unpatchify_tensor(&out, grid)
    }

    /// Batched ε prediction on `(B, Tl, C, h, w)` latents.
    pub fn forward(&self, x: &Tensor, t: &[usize], prompts: &[PromptTokens]) -> Result<Tensor> {
        self.forward_with(x, t, prompts, None, None)
    }

    pub fn forward_with(
        &self,
        x: &Tensor,
        t: &[usize],
        prompts: &[PromptTokens],
        residuals: Option<&[Tensor]>,
        trace: Option<&mut SkipTrace>,
    ) -> Result<Tensor> {
        let seq = self.embed_inputs(x, t, prompts)?;
        let h = self.run_blocks(&seq, residuals, trace)?;
        self.head(&h, seq.grid)
    }

    /// Reference path with every long skip removed: each merge keeps only
    /// its main-branch weights. Used to check the skip wiring.
    pub fn forward_without_skips(&self, x: &Tensor, t: &[usize], prompts: &[PromptTokens]) -> Result<Tensor> {
        let seq = self.embed_inputs(x, t, prompts)?;
        let half = self.config.depth / 2;
        let mut h = seq.tokens.clone();
        for block in &self.blocks[..half] {
            h = block.forward(&h, &seq.key_bias)?;
        }
        for (j, block) in self.blocks[half..].iter().enumerate() {
            h = self.skips[j].forward_main_only(&h)?;
            h = block.forward(&h, &seq.key_bias)?;
        }
        self.head(&h, seq.grid)
    }

    /// Single-clip ε prediction.
    pub fn predict_noise(&self, x_t: &LatentVideo, t: usize, prompt: &PromptTokens) -> Result<LatentVideo> {
        let x = x_t.tensor().to_dtype(self.dtype())?.unsqueeze(0)?;
        let eps = self.forward(&x, &[t], &[*prompt])?;
        LatentVideo::new(eps.squeeze(0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;
    use crate::seed;
    use crate::text::{tokenize, Vocab};

    fn latent(tl: usize, seed_: u64) -> LatentVideo {
        let mut rng = seed::rng(seed_);
        LatentVideo::from_vec(seed::normal_vec(&mut rng, tl * 4 * 64), [tl, 4, 8, 8]).unwrap()
    }

    fn small_config() -> UViTConfig {
        UViTConfig { d_model: 32, depth: 4, heads: 2, ..Default::default() }
    }

    #[test]
    fn patch_counts() {
        let (p, grid) = patchify(&latent(4, 1)).unwrap();
        assert_eq!(p.dims(), &[64, 16]);
        assert_eq!(grid.num_patches(), 64);
        let (p, _) = patchify(&latent(1, 1)).unwrap();
        assert_eq!(p.dims(), &[16, 16]);
        let odd = LatentVideo::from_vec(vec![0.0; 4 * 7 * 8], [1, 4, 7, 8]).unwrap();
        assert!(patchify(&odd).is_err());
    }

    #[test]
    fn patch_contents_match_index_oracle() {
        let z = latent(3, 9);
        let v = z.to_vec().unwrap();
        let (p, grid) = patchify(&z).unwrap();
        let pv = to_vec_f64(&p).unwrap();
        let at = |t: usize, c: usize, y: usize, x: usize| v[((t * 4 + c) * 8 + y) * 8 + x] as f64;
        for tl in 0..3 {
            for gy in 0..grid.grid_h {
                for gx in 0..grid.grid_w {
                    let idx = (tl * grid.grid_h + gy) * grid.grid_w + gx;
                    let mut k = 0;
                    for c in 0..4 {
                        for py in 0..2 {
                            for px in 0..2 {
                                assert_eq!(pv[idx * 16 + k], at(tl, c, 2 * gy + py, 2 * gx + px));
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        for tl in 1..=4 {
            let z = latent(tl, tl as u64);
            let (p, grid) = patchify(&z).unwrap();
            assert_eq!(unpatchify(&p, grid).unwrap().to_vec().unwrap(), z.to_vec().unwrap());
        }
        let (p, grid) = patchify(&latent(2, 3)).unwrap();
        assert!(unpatchify(&p.narrow(0, 0, 31).unwrap(), grid).is_err());
    }

    #[test]
    fn swapping_patches_swaps_blocks() {
        let z = latent(2, 4);
        let (p, grid) = patchify(&z).unwrap();
        // Swap patch 0 (tl 0, gy 0, gx 0) with patch 21 (tl 1, gy 1, gx 1).
        let rows: Vec<u32> = (0..32u32).map(|i| if i == 0 { 21 } else if i == 21 { 0 } else { i }).collect();
        let idx = Tensor::from_vec(rows, 32, &Device::Cpu).unwrap();
        let swapped = unpatchify(&p.index_select(&idx, 0).unwrap(), grid).unwrap().to_vec().unwrap();
        let orig = z.to_vec().unwrap();
        let at = |v: &[f32], t: usize, c: usize, y: usize, x: usize| v[((t * 4 + c) * 8 + y) * 8 + x];
        for t in 0..2 {
            for c in 0..4 {
                for y in 0..8 {
                    for x in 0..8 {
                        let in_a = t == 0 && y < 2 && x < 2;
                        let in_b = t == 1 && (2..4).contains(&y) && (2..4).contains(&x);
                        let expected = if in_a {
                            at(&orig, 1, c, y + 2, x + 2)
                        } else if in_b {
                            at(&orig, 0, c, y - 2, x - 2)
                        } else {
                            at(&orig, t, c, y, x)
                        };
                        assert_eq!(at(&swapped, t, c, y, x), expected);
                    }
                }
            }
        }
    }

    #[test]
    fn sequence_lengths() {
        let model = UViT::init(small_config(), 1, DType::F32).unwrap();
        let vocab = Vocab::grammar();
        let prompt = tokenize(&vocab, "a red square moves right").unwrap();
        for (tl, n) in [(4, 73), (1, 25), (2, 41), (3, 57)] {
            let x = latent(tl, 2).tensor().unsqueeze(0).unwrap();
            let seq = model.embed_inputs(&x, &[10], &[prompt]).unwrap();
            assert_eq!(seq.len(), n);
            assert_eq!(model.config.sequence_len(tl), n);
        }
    }

    #[test]
    fn time_token_is_embedding_plus_slot() {
        let model = UViT::init(small_config(), 2, DType::F64).unwrap();
        let x = latent(1, 2).tensor().to_dtype(DType::F64).unwrap().unsqueeze(0).unwrap();
        let seq = model.embed_inputs(&x, &[123], &[PromptTokens::NULL]).unwrap();
        let token0 = to_vec_f64(&seq.tokens.get(0).unwrap().get(0).unwrap()).unwrap();
        // Direct construction, independent of assemble_sequence.
        let feats = timestep_features(&[123], 32, DType::F64).unwrap();
        let s = model.store();
        let h = feats.matmul(&s.get("time_mlp.fc1.w").unwrap()).unwrap()
            .broadcast_add(&s.get("time_mlp.fc1.b").unwrap()).unwrap()
            .silu().unwrap();
        let e = h.matmul(&s.get("time_mlp.fc2.w").unwrap()).unwrap()
            .broadcast_add(&s.get("time_mlp.fc2.b").unwrap()).unwrap();
        let slot = s.get("pos.slots").unwrap().get(0).unwrap();
        let expected = to_vec_f64(&e.squeeze(0).unwrap().add(&slot).unwrap()).unwrap();
        for (a, b) in token0.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn assemble_rejects_width_mismatch() {
        let model = UViT::init(small_config(), 2, DType::F32).unwrap();
        let time = Tensor::zeros((1, 31), DType::F32, &Device::Cpu).unwrap();
        let text = Tensor::zeros((1, 8, 32), DType::F32, &Device::Cpu).unwrap();
        let bias = Tensor::zeros((1, 8), DType::F32, &Device::Cpu).unwrap();
        let patches = Tensor::zeros((1, 16, 32), DType::F32, &Device::Cpu).unwrap();
        let grid = PatchGrid { frames: 1, channels: 4, grid_h: 4, grid_w: 4 };
        assert!(model.assemble_sequence(&time, &text, &bias, &patches, grid).is_err());
    }

    #[test]
    fn one_model_serves_every_length() {
        let model = UViT::init(UViTConfig::default(), 3, DType::F32).unwrap();
        let prompt = tokenize(&Vocab::grammar(), "a blue circle moves up").unwrap();
        for tl in 1..=4 {
            let z = latent(tl, 5);
            let eps = model.predict_noise(&z, 500, &prompt).unwrap();
            assert_eq!(eps.dims(), z.dims());
        }
        assert!(model.predict_noise(&latent(1, 5), 500, &prompt).unwrap().is_finite().unwrap());
    }

    #[test]
    fn skip_stack_balanced() {
        let model = UViT::init(small_config(), 4, DType::F32).unwrap();
        let x = latent(2, 1).tensor().unsqueeze(0).unwrap();
        let mut trace = SkipTrace::default();
        model.forward_with(&x, &[3], &[PromptTokens::NULL], None, Some(&mut trace)).unwrap();
        assert_eq!(trace, SkipTrace { pushes: 2, pops: 2, left_on_stack: 0 });
    }

    #[test]
    fn zeroed_skip_branch_equals_plain_transformer() {
        let model = UViT::init(UViTConfig::default(), 5, DType::F32).unwrap();
        let d = model.config.d_model;
        for j in 0..model.config.depth / 2 {
            let name = format!("skips.{j}.w");
            let w = model.store().get(&name).unwrap();
            let kept = w.narrow(0, 0, d).unwrap();
            let zeroed = Tensor::cat(&[kept, Tensor::zeros((d, d), DType::F32, &Device::Cpu).unwrap()], 0).unwrap();
            model.store().set(&name, &zeroed).unwrap();
        }
        let prompt = tokenize(&Vocab::grammar(), "a red square moves left").unwrap();
        let x = latent(3, 8).tensor().unsqueeze(0).unwrap();
        let a = to_vec_f64(&model.forward(&x, &[77], &[prompt]).unwrap()).unwrap();
        let b = to_vec_f64(&model.forward_without_skips(&x, &[77], &[prompt]).unwrap()).unwrap();
        assert_eq!(a, b);
        // With the skip branch live the two paths differ.
        let fresh = UViT::init(UViTConfig::default(), 5, DType::F32).unwrap();
        let c = to_vec_f64(&fresh.forward(&x, &[77], &[prompt]).unwrap()).unwrap();
        let e = to_vec_f64(&fresh.forward_without_skips(&x, &[77], &[prompt]).unwrap()).unwrap();
        assert_ne!(c, e);
    }

    #[test]
    fn pad_rows_are_masked() {
        let model = UViT::init(small_config(), 6, DType::F32).unwrap();
        let prompt = tokenize(&Vocab::grammar(), "a green triangle").unwrap();
        let x = latent(1, 3).tensor().unsqueeze(0).unwrap();
        let before = to_vec_f64(&model.forward(&x, &[40], &[prompt]).unwrap()).unwrap();
        let table = model.store().get(TEXT_EMBED).unwrap();
        let mut rows = to_vec_f64(&table).unwrap();
        for v in rows.iter_mut().take(32) {
            *v += 3.0;
        }
        let dims = table.dims().to_vec();
        model
            .store()
            .set(TEXT_EMBED, &Tensor::from_vec(rows, dims, &Device::Cpu).unwrap())
            .unwrap();
        let after = to_vec_f64(&model.forward(&x, &[40], &[prompt]).unwrap()).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn output_depends_on_timestep() {
        let model = UViT::init(UViTConfig::default(), 7, DType::F32).unwrap();
        let x = latent(2, 4);
        let a = model.predict_noise(&x, 10, &PromptTokens::NULL).unwrap().to_vec().unwrap();
        let b = model.predict_noise(&x, 900, &PromptTokens::NULL).unwrap().to_vec().unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = UViT::init(small_config(), 8, DType::F32).unwrap();
        assert!(model.predict_noise(&latent(5, 1), 10, &PromptTokens::NULL).is_err());
        let bad = PromptTokens { ids: [1000; 8], len: 8 };
        assert!(model.predict_noise(&latent(1, 1), 10, &bad).is_err());
        assert!(UViTConfig { depth: 3, ..Default::default() }.validate().is_err());
    }
}
