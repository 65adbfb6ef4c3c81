//! Measurement from pixels: attribute recovery, conditional accuracy,
//! temporal consistency, edge agreement, and the gradient-check suite.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::autoencoder::{AeConfig, VideoAutoencoder};
use crate::corpus::{edge_map, Color, ControlSignal, Direction, Shape, VideoClip, DEFAULT_EDGE_THRESHOLD};
use crate::error::{invalid, Error, Result};
use crate::nn::{scalar_f64, to_vec_f64, ParamStore};
use crate::seed;
use crate::text::{tokenize, Vocab};
use crate::uvit::{UViT, UViTConfig};

/// A pixel is foreground when any channel exceeds this.
pub const FOREGROUND_THRESHOLD: f32 = -0.5;

/// Fill-ratio decision boundaries: midpoints of square 1.0, circle π/4, triangle 0.5.
const SQUARE_CIRCLE_SPLIT: f64 = (1.0 + std::f64::consts::FRAC_PI_4) / 2.0;
const CIRCLE_TRIANGLE_SPLIT: f64 = (std::f64::consts::FRAC_PI_4 + 0.5) / 2.0;
/// Top-half to bottom-half mass ratio below which a blob reads as a triangle.
const TRIANGLE_ASYMMETRY: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeReport {
    pub color: Color,
    pub shape: Shape,
    pub direction: Option<Direction>,
    pub color_confidence: f64,
    pub shape_confidence: f64,
    pub direction_confidence: Option<f64>,
}

/// Dominant foreground blob of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub area: usize,
    pub centroid: (f64, f64),
    pub mean_rgb: [f64; 3],
    pub shape: Shape,
}

fn foreground_mask(clip: &VideoClip, t: usize) -> Vec<bool> {
    let (h, w) = (clip.height(), clip.width());
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            mask[y * w + x] = (0..3).any(|c| clip.get(t, c, y, x) > FOREGROUND_THRESHOLD);
        }
    }
    mask
}

/// Pixels of the largest 4-connected component, or empty.
fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut seen = vec![false; mask.len()];
    let mut best = vec![];
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = vec![];
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            comp.push((y, x));
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

fn classify_blob(pixels: &[(usize, usize)]) -> Shape {
    let (y0, y1) = pixels.iter().fold((usize::MAX, 0), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (x0, x1) = pixels.iter().fold((usize::MAX, 0), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let bbox = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
    let fill = pixels.len() as f64 / bbox;
    let mid = (y0 + y1) as f64 / 2.0;
    let top = pixels.iter().filter(|p| (p.0 as f64) < mid).count() as f64;
    let bottom = pixels.iter().filter(|p| (p.0 as f64) > mid).count() as f64;
    let asymmetric = bottom > 0.0 && top / bottom < TRIANGLE_ASYMMETRY;
    if fill >= SQUARE_CIRCLE_SPLIT {
        Shape::Square
    } else if fill >= CIRCLE_TRIANGLE_SPLIT && !asymmetric {
        Shape::Circle
    } else {
        Shape::Triangle
    }
}

/// Per-frame dominant blob; `None` for frames without foreground.
pub fn analyze_frames(clip: &VideoClip) -> Vec<Option<FrameReport>> {
    let (h, w) = (clip.height(), clip.width());
    (0..clip.frames())
        .map(|t| {
            let blob = largest_component(&foreground_mask(clip, t), h, w);
            if blob.is_empty() {
                return None;
            }
            let n = blob.len() as f64;
            let cy = blob.iter().map(|p| p.0 as f64).sum::<f64>() / n;
            let cx = blob.iter().map(|p| p.1 as f64).sum::<f64>() / n;
            let mut rgb = [0.0; 3];
            for &(y, x) in &blob {
                for (c, acc) in rgb.iter_mut().enumerate() {
                    *acc += clip.get(t, c, y, x) as f64 / n;
                }
            }
            Some(FrameReport { area: blob.len(), centroid: (cx, cy), mean_rgb: rgb, shape: classify_blob(&blob) })
        })
        .collect()
}

fn nearest_color(rgb: [f64; 3]) -> (Color, f64) {
    let mut d: Vec<(f64, Color)> = Color::ALL
        .iter()
        .map(|c| {
            let p = c.rgb();
            let dist = (0..3).map(|i| (rgb[i] - p[i] as f64).powi(2)).sum::<f64>().sqrt();
            (dist, *c)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0));
    let conf = if d[0].0 + d[1].0 > 0.0 { 1.0 - d[0].0 / (d[0].0 + d[1].0) } else { 1.0 };
    (d[0].1, conf)
}

/// Direction of the dominant-axis centroid displacement between the first
/// and last frames that have foreground, with its confidence.
fn direction_of(frames: &[FrameReport]) -> Option<(Direction, f64)> {
    let (first, last) = (frames.first()?, frames.last()?);
    let dx = last.centroid.0 - first.centroid.0;
    let dy = last.centroid.1 - first.centroid.1;
    if dx == 0.0 && dy == 0.0 {
        return None;
    }
    let dir = if dx.abs() >= dy.abs() {
        if dx > 0.0 { Direction::Right } else { Direction::Left }
    } else if dy > 0.0 {
        Direction::Down
    } else {
        Direction::Up
    };
    let conf = dx.abs().max(dy.abs()) / (dx.abs() + dy.abs());
    Some((dir, conf))
}

pub fn analyze_clip(clip: &VideoClip) -> Result<AttributeReport> {
    let frames: Vec<FrameReport> = analyze_frames(clip).into_iter().flatten().collect();
    if frames.is_empty() {
        return Err(Error::EmptyClip);
    }
    let total: f64 = frames.iter().map(|f| f.area as f64).sum();
    let mut rgb = [0.0; 3];
    for f in &frames {
        for (acc, v) in rgb.iter_mut().zip(f.mean_rgb) {
            *acc += v * f.area as f64 / total;
        }
    }
    let (color, color_confidence) = nearest_color(rgb);
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for f in &frames {
        let idx = Shape::ALL.iter().position(|s| *s == f.shape).expect("known shape");
        *votes.entry(idx).or_default() += 1;
    }
    // Ties go to the earlier shape in `Shape::ALL`.
    let (best, count) = votes.iter().fold((0, 0), |acc, (&k, &v)| if v > acc.1 { (k, v) } else { acc });
    let (direction, direction_confidence) = if clip.frames() > 1 {
        match direction_of(&frames) {
            Some((d, c)) => (Some(d), Some(c)),
            None => (None, Some(0.0)),
        }
    } else {
        (None, None)
    };
    Ok(AttributeReport {
        color,
        shape: Shape::ALL[best],
        direction,
        color_confidence,
        shape_confidence: count as f64 / frames.len() as f64,
        direction_confidence,
    })
}

/// Euclidean displacement of the dominant-blob centroid between the first
/// and last frames with foreground.
pub fn centroid_displacement(clip: &VideoClip) -> Result<f64> {
    let frames: Vec<FrameReport> = analyze_frames(clip).into_iter().flatten().collect();
    match (frames.first(), frames.last()) {
        (Some(a), Some(b)) => Ok(((b.centroid.0 - a.centroid.0).powi(2) + (b.centroid.1 - a.centroid.1).powi(2)).sqrt()),
        _ => Err(Error::EmptyClip),
    }
}

/// `1 − Var(n_t) / mean(n_t)²` over per-frame foreground counts, clamped to [0, 1].
pub fn temporal_consistency(clip: &VideoClip) -> f64 {
    if clip.frames() <= 1 {
        return 1.0;
    }
    let counts: Vec<f64> = (0..clip.frames())
        .map(|t| foreground_mask(clip, t).iter().filter(|m| **m).count() as f64)
        .collect();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return 1.0;
    }
    if mean == 0.0 {
        return 0.0;
    }
    (1.0 - var / (mean * mean)).clamp(0.0, 1.0)
}

/// F1 between two binary maps; 1 when both are empty, 0 when exactly one is.
pub fn binary_f1(a: &[u8], b: &[u8]) -> f64 {
    let pa = a.iter().filter(|v| **v != 0).count();
    let pb = b.iter().filter(|v| **v != 0).count();
    if pa == 0 && pb == 0 {
        return 1.0;
    }
    let tp = a.iter().zip(b).filter(|(x, y)| **x != 0 && **y != 0).count();
    2.0 * tp as f64 / (pa + pb) as f64
}

/// Frame-averaged F1 between two edge sets of equal shape.
pub fn edge_f1(a: &ControlSignal, b: &ControlSignal) -> Result<f64> {
    if a.shape() != b.shape() {
        return invalid(format!("edge maps differ in shape: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let n = a.frames();
    Ok((0..n).map(|t| binary_f1(a.frame(t), b.frame(t))).sum::<f64>() / n as f64)
}

pub fn edge_agreement(clip: &VideoClip, ctrl: &ControlSignal) -> Result<f64> {
    if clip.frames() != ctrl.frames() || clip.height() != ctrl.height() || clip.width() != ctrl.width() {
        return invalid(format!("clip {:?} and control {:?} differ in shape", clip.shape(), ctrl.shape()));
    }
    edge_f1(&edge_map(clip, DEFAULT_EDGE_THRESHOLD)?, ctrl)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricBundle {
    pub color_acc: f64,
    pub shape_acc: f64,
    pub direction_acc: f64,
    pub temporal_consistency: f64,
    pub edge_agreement: f64,
}

impl MetricBundle {
    pub const KEYS: [&'static str; 5] =
        ["color_acc", "shape_acc", "direction_acc", "temporal_consistency", "edge_agreement"];

    pub fn values(&self) -> [f64; 5] {
        [self.color_acc, self.shape_acc, self.direction_acc, self.temporal_consistency, self.edge_agreement]
    }

    /// `metric<TAB>value` lines.
    pub fn to_report(&self) -> String {
        Self::KEYS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k}\t{v:.6}\n"))
            .collect()
    }
}

/// One cell of the evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalPrompt {
    pub color: Color,
    pub shape: Shape,
    pub direction: Option<Direction>,
    pub length_frames: usize,
}

impl EvalPrompt {
    pub fn caption(&self) -> String {
        match self.direction {
            Some(d) => format!("a {} {} moves {}", self.color.name(), self.shape.name(), d.name()),
            None => format!("a {} {}", self.color.name(), self.shape.name()),
        }
    }
}

/// 64 prompts: every color × direction × length, shapes cycling. Single-frame
/// cells drop the direction.
pub fn prompt_grid() -> Vec<EvalPrompt> {
    let mut out = Vec::with_capacity(64);
    let mut k = 0;
    for &length_frames in &crate::corpus::ALLOWED_LENGTHS {
        for color in Color::ALL {
            for dir in Direction::ALL {
                out.push(EvalPrompt {
                    color,
                    shape: Shape::ALL[k % Shape::ALL.len()],
                    direction: if length_frames > 1 { Some(dir) } else { None },
                    length_frames,
                });
                k += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub metrics: MetricBundle,
    pub samples: usize,
    pub empty_clips: usize,
}

/// Sample `n` clips per prompt and score them. The sampler receives the
/// prompt and a per-sample seed `derive_path(seed, [prompt index, k])`.
/// `direction_acc` counts only prompts with a direction (0 if there are none).
pub fn conditional_accuracy(
    sampler: &mut dyn FnMut(&EvalPrompt, u64) -> Result<VideoClip>,
    prompts: &[EvalPrompt],
    n: usize,
    seed_: u64,
) -> Result<AccuracyReport> {
    if n == 0 {
        return invalid("n per prompt must be at least 1");
    }
    let (mut color, mut shape, mut dir, mut dir_total, mut tc, mut empty, mut total) = (0, 0, 0, 0, 0.0, 0, 0);
    for (i, p) in prompts.iter().enumerate() {
        for k in 0..n {
            let clip = sampler(p, seed::derive_path(seed_, &[i as u64, k as u64]))
                .map_err(|e| Error::Sampling { prompt: p.caption(), source: Box::new(e) })?;
            total += 1;
            tc += temporal_consistency(&clip);
            if p.direction.is_some() {
                dir_total += 1;
            }
            match analyze_clip(&clip) {
                Ok(r) => {
                    color += (r.color == p.color) as usize;
                    shape += (r.shape == p.shape) as usize;
                    if p.direction.is_some() && r.direction == p.direction {
                        dir += 1;
                    }
                }
                Err(Error::EmptyClip) => empty += 1,
                Err(e) => return Err(e),
            }
        }
    }
    if total == 0 {
        return invalid("empty prompt set");
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(AccuracyReport {
        metrics: MetricBundle {
            color_acc: frac(color, total),
            shape_acc: frac(shape, total),
            direction_acc: frac(dir, dir_total),
            temporal_consistency: tc / total as f64,
            edge_agreement: 0.0,
        },
        samples: total,
        empty_clips: empty,
    })
}

/// Central differences of `f` at `x`.
pub fn finite_difference(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut x = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x)?;
        x[i] = orig - h;
        let minus = f(&x)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    fn dtype(self) -> DType {
        match self {
            Precision::Single => DType::F32,
            Precision::Double => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyResult {
    pub family: &'static str,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub precision: Precision,
    pub tolerance: f64,
    pub families: Vec<FamilyResult>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.families.iter().map(|f| f.max_rel_error).fold(0.0, f64::max)
    }
}

const FD_STEP: f64 = 1e-5;
/// Gradient components below this magnitude are compared in absolute terms.
const FD_FLOOR: f64 = 1e-5;
const COORDS_PER_TENSOR: usize = 4;
const JITTER: f64 = 0.2;

fn family_of(name: &str) -> &'static str {
    if name.starts_with("patch_embed") || name.starts_with("pos.") {
        "patch_embed"
    } else if name.contains(".attn.") {
        "attention"
    } else if name.contains(".mlp.") || name.starts_with("time_mlp") {
        "mlp"
    } else if name.contains(".ln") || name.starts_with("final_ln") {
        "norm"
    } else if name.starts_with("skips.") {
        "skip_merge"
    } else if name.starts_with("enc.") || name.starts_with("dec.") {
        "ae_conv"
    } else {
        "text_and_output"
    }
}

pub fn micro_uvit_config() -> UViTConfig {
    UViTConfig {
        latent_channels: 4,
        latent_height: 4,
        latent_width: 4,
        max_latent_frames: 2,
        d_model: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        vocab_size: Vocab::grammar().len(),
    }
}

pub fn micro_ae_config() -> AeConfig {
    AeConfig { width1: 4, width2: 8, latent_channels: 2 }
}

/// Compare analytic gradients at `precision` against f64 central differences
/// for `coords` sampled entries of every parameter.
fn check_store(
    analytic: &BTreeMap<String, Vec<f64>>,
    reference: &ParamStore,
    loss64: &mut dyn FnMut() -> Result<f64>,
    rng: &mut rand_chacha::ChaCha8Rng,
    results: &mut BTreeMap<&'static str, (f64, usize)>,
) -> Result<()> {
    for (name, grad) in analytic {
        let base = to_vec_f64(&reference.get(name)?)?;
        let dims = reference.get(name)?.dims().to_vec();
        let picks: Vec<usize> = if base.len() <= COORDS_PER_TENSOR {
            (0..base.len()).collect()
        } else {
            (0..COORDS_PER_TENSOR).map(|_| rng.random_range(0..base.len())).collect()
        };
        let entry = results.entry(family_of(name)).or_insert((0.0, 0));
        for i in picks {
            let mut v = base.clone();
            v[i] = base[i] + FD_STEP;
            reference.set(name, &Tensor::from_vec(v.clone(), dims.as_slice(), &Device::Cpu)?)?;
            let plus = loss64()?;
            v[i] = base[i] - FD_STEP;
            reference.set(name, &Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?)?;
            let minus = loss64()?;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let re = relative_error(grad[i], fd, FD_FLOOR);
            entry.0 = entry.0.max(re);
            entry.1 += 1;
        }
        reference.set(name, &Tensor::from_vec(base, dims.as_slice(), &Device::Cpu)?)?;
    }
    Ok(())
}

/// Move every parameter to a generic point by adding `N(0, std²)` noise, so
/// gradients are not dominated by the near-symmetric initialisation.
fn jitter(store: &ParamStore, std: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let t = store.get(&name)?;
        let noise = Tensor::from_vec(seed::normal_vec(rng, t.elem_count()), t.dims(), &Device::Cpu)?;
        let noise = (noise.to_dtype(t.dtype())? * std)?;
        store.set(&name, &(t + noise)?)?;
    }
    Ok(())
}

fn analytic_grads(store: &ParamStore, loss: &Tensor) -> Result<BTreeMap<String, Vec<f64>>> {
    let grads = loss.backward()?;
    let mut out = BTreeMap::new();
    for (name, var) in store.iter() {
        let g = match grads.get(var.as_tensor()) {
            Some(g) => to_vec_f64(g)?,
            None => vec![0.0; var.elem_count()],
        };
        out.insert(name.clone(), g);
    }
    Ok(out)
}

/// Gradient check of every trainable layer family on micro instances: a
/// U-ViT under the ε-prediction loss and an autoencoder under reconstruction
/// loss. Analytic gradients use `precision`; the finite-difference reference
/// always runs in double precision.
pub fn gradcheck_suite(precision: Precision, tolerance: f64, seed_: u64) -> Result<GradcheckReport> {
    if !(tolerance > 0.0) {
        return invalid("tolerance must be positive");
    }
    let dtype = precision.dtype();
    let mut rng = seed::rng(seed_);
    let mut results: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();

    // Denoiser.
    let cfg = micro_uvit_config();
    let model = UViT::init(cfg, seed::derive_seed(seed_, 1), dtype)?;
    jitter(model.store(), JITTER, &mut rng)?;
    let shape = (1, 2, cfg.latent_channels, cfg.latent_height, cfg.latent_width);
    let n = 2 * cfg.latent_channels * cfg.latent_height * cfg.latent_width;
    let x = Tensor::from_vec(seed::normal_vec(&mut rng, n), shape, &Device::Cpu)?.to_dtype(DType::F64)?;
    let eps = Tensor::from_vec(seed::normal_vec(&mut rng, n), shape, &Device::Cpu)?.to_dtype(DType::F64)?;
    let prompt = tokenize(&Vocab::grammar(), "a red circle moves up")?;
    let t = [417usize];
    let uvit_loss = |m: &UViT, x: &Tensor, eps: &Tensor| -> Result<Tensor> {
        Ok((m.forward(x, &t, &[prompt])? - eps)?.sqr()?.mean_all()?)
    };
    let loss = uvit_loss(&model, &x.to_dtype(dtype)?, &eps.to_dtype(dtype)?)?;
    let grads = analytic_grads(model.store(), &loss)?;
    let reference = model.to_dtype(DType::F64)?;
    check_store(
        &grads,
        reference.store(),
        &mut || scalar_f64(&uvit_loss(&reference, &x, &eps)?),
        &mut rng,
        &mut results,
    )?;

    // Autoencoder.
    let ae = VideoAutoencoder::init(micro_ae_config(), seed::derive_seed(seed_, 2), dtype)?;
    jitter(ae.store(), JITTER, &mut rng)?;
    let n = 4 * 8 * 8 * 3;
    let clip: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let clip = Tensor::from_vec(clip, (1, 4, 8, 8, 3), &Device::Cpu)?.to_dtype(DType::F64)?;
    let ae_loss = |m: &VideoAutoencoder, x: &Tensor| -> Result<Tensor> {
        Ok((m.decode_tensor(&m.encode_tensor(x)?, 4)? - x)?.sqr()?.mean_all()?)
    };
    let loss = ae_loss(&ae, &clip.to_dtype(dtype)?)?;
    let grads = analytic_grads(ae.store(), &loss)?;
    let reference = VideoAutoencoder::from_store(ae.config, ae.store().to_dtype(DType::F64)?, ae.latent_scale)?;
    check_store(
        &grads,
        reference.store(),
        &mut || scalar_f64(&ae_loss(&reference, &clip)?),
        &mut rng,
        &mut results,
    )?;

    let families: Vec<FamilyResult> = results
        .into_iter()
        .map(|(family, (max_rel_error, coordinates))| FamilyResult { family, max_rel_error, coordinates })
        .collect();
    if let Some(bad) = families.iter().find(|f| !(f.max_rel_error <= tolerance)) {
        return Err(Error::CheckFailure { family: bad.family.to_string(), error: bad.max_rel_error, tolerance });
    }
    Ok(GradcheckReport { precision, tolerance, families })
}
