//! Procedurally generated "moving sprites" clips with ground-truth labels.
//!
//! Every clip is a pure function of its [`ClipSpec`]: a single 10×10 sprite on
//! a black 32×32 canvas, translated by `speed` pixels per frame. Captions follow
//! a fixed grammar so downstream evaluation can recover the prompt from pixels.

mod edges;
mod vclip;

pub use edges::{edge_map, ControlSignal, DEFAULT_EDGE_THRESHOLD};
pub use vclip::{read_vclip, write_ppm_frames, write_vclip, decode_vclip, encode_vclip};

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::seed;

pub const FRAME_SIZE: usize = 32;
pub const SPRITE_SIZE: usize = 10;
pub const CHANNELS: usize = 3;
pub const ALLOWED_LENGTHS: [usize; 4] = [1, 4, 8, 16];
/// Largest top-left coordinate that keeps the sprite box inside the frame.
pub const MAX_OFFSET: i32 = (FRAME_SIZE - SPRITE_SIZE) as i32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Whether pixel `(x, y)` of the sprite box is covered. Pixel centres sit at
    /// half-integer offsets inside the box.
    pub fn covers(self, x: usize, y: usize) -> bool {
        let half = SPRITE_SIZE as f64 / 2.0;
        let cx = x as f64 + 0.5;
        let cy = y as f64 + 0.5;
        match self {
            Shape::Square => true,
            Shape::Circle => (cx - half).powi(2) + (cy - half).powi(2) <= half * half,
            // Apex at the top centre, base along the bottom edge.
            Shape::Triangle => (cx - half).abs() <= cy / 2.0,
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Channel values in [-1, 1]; yellow lights red and green.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Unit step in image coordinates (y grows downward).
    pub fn unit(self) -> (i32, i32) {
        match self {
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Motion {
    pub direction: Direction,
    /// Pixels per frame, 1 or 2.
    pub speed: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClipSpec {
    pub shape: Shape,
    pub color: Color,
    /// `None` exactly when `length_frames == 1`.
    pub motion: Option<Motion>,
    /// Top-left corner of the sprite box in frame 0.
    pub start: (i32, i32),
    pub length_frames: usize,
    pub seed: u64,
}

impl ClipSpec {
    pub fn direction(&self) -> Option<Direction> {
        self.motion.map(|m| m.direction)
    }

    /// Top-left corner of the sprite box at frame `k`.
    pub fn position(&self, k: usize) -> (i32, i32) {
        match self.motion {
            Some(m) => {
                let (ux, uy) = m.direction.unit();
                let d = (m.speed as usize * k) as i32;
                (self.start.0 + ux * d, self.start.1 + uy * d)
            }
            None => self.start,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_LENGTHS.contains(&self.length_frames) {
            return Err(Error::InvalidLength {
                got: self.length_frames,
                allowed: ALLOWED_LENGTHS.to_vec(),
            });
        }
        match (self.length_frames, self.motion) {
            (1, Some(_)) => return invalid("single-frame clip cannot carry motion"),
            (l, None) if l > 1 => return invalid("multi-frame clip requires a motion"),
            (_, Some(m)) if !(1..=2).contains(&m.speed) => {
                return invalid(format!("speed {} not in {{1, 2}}", m.speed))
            }
            _ => {}
        }
        for k in 0..self.length_frames {
            let (x, y) = self.position(k);
            if !(0..=MAX_OFFSET).contains(&x) || !(0..=MAX_OFFSET).contains(&y) {
                return invalid(format!("sprite leaves the frame at frame {k} (top-left {x},{y})"));
            }
        }
        Ok(())
    }
}

/// A pixel-space clip, layout (t, c, y, x), values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return invalid("clip dimensions must be positive");
        }
        if data.len() != frames * CHANNELS * height * width {
            return invalid(format!(
                "clip data has {} values, expected {}",
                data.len(),
                frames * CHANNELS * height * width
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return invalid(format!("clip value {v} outside [-1, 1]"));
        }
        Ok(Self { frames, height, width, data })
    }

    /// Like [`VideoClip::new`] but clamps into [-1, 1] (non-finite values map to -1).
    pub fn from_clamped(frames: usize, height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { -1.0 };
        }
        Self::new(frames, height, width, data)
    }

    pub fn black(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![-1.0; frames * CHANNELS * height * width],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn shape(&self) -> [usize; 4] {
        [self.frames, CHANNELS, self.height, self.width]
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * CHANNELS + c) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(t, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(t, c, y, x);
        self.data[i] = v.clamp(-1.0, 1.0);
    }

    /// Frames `start..start + len` as a new clip.
    pub fn frame_range(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return invalid(format!("frame range {start}..{} outside 0..{}", start + len, self.frames));
        }
        let per = CHANNELS * self.height * self.width;
        Ok(Self {
            frames: len,
            height: self.height,
            width: self.width,
            data: self.data[start * per..(start + len) * per].to_vec(),
        })
    }
}

/// Stroke/fill recipe for drawing one sprite; lets callers render sprites
/// outside the corpus enums (e.g. a subject sprite) with the same geometry.
pub trait SpriteStyle {
    fn covers(&self, x: usize, y: usize) -> bool;
    fn rgb_at(&self, x: usize, y: usize) -> [f32; 3];
}

struct Plain(Shape, Color);

impl SpriteStyle for Plain {
    fn covers(&self, x: usize, y: usize) -> bool {
        self.0.covers(x, y)
    }
    fn rgb_at(&self, _: usize, _: usize) -> [f32; 3] {
        self.1.rgb()
    }
}

/// Draw `style` with its box top-left at `positions[k]` in frame `k`.
pub fn render_sprite(style: &dyn SpriteStyle, positions: &[(i32, i32)]) -> Result<VideoClip> {
    let mut clip = VideoClip::black(positions.len(), FRAME_SIZE, FRAME_SIZE);
    for (t, &(px, py)) in positions.iter().enumerate() {
        if !(0..=MAX_OFFSET).contains(&px) || !(0..=MAX_OFFSET).contains(&py) {
            return invalid(format!("sprite leaves the frame at frame {t}"));
        }
        for sy in 0..SPRITE_SIZE {
            for sx in 0..SPRITE_SIZE {
                if !style.covers(sx, sy) {
                    continue;
                }
                let rgb = style.rgb_at(sx, sy);
                let (x, y) = (px as usize + sx, py as usize + sy);
                for (c, v) in rgb.into_iter().enumerate() {
                    clip.set(t, c, y, x, v);
                }
            }
        }
    }
    Ok(clip)
}

pub fn render_clip(spec: &ClipSpec) -> Result<VideoClip> {
    spec.validate()?;
    let positions: Vec<_> = (0..spec.length_frames).map(|k| spec.position(k)).collect();
    render_sprite(&Plain(spec.shape, spec.color), &positions)
}

/// Speeds that keep a `length`-frame trajectory inside the frame.
pub fn feasible_speeds(length: usize) -> Vec<u32> {
    (1..=2u32)
        .filter(|&s| (s as usize * length.saturating_sub(1)) as i32 <= MAX_OFFSET)
        .collect()
}

fn check_lengths(allowed: &[usize]) -> Result<()> {
    if allowed.is_empty() {
        return invalid("allowed_lengths is empty");
    }
    if let Some(&bad) = allowed.iter().find(|l| !ALLOWED_LENGTHS.contains(l)) {
        return Err(Error::InvalidLength {
            got: bad,
            allowed: ALLOWED_LENGTHS.to_vec(),
        });
    }
    Ok(())
}

/// Start coordinate along one axis for a trajectory of `travel` pixels with unit step `u`.
fn start_coord<R: Rng>(rng: &mut R, u: i32, travel: i32) -> i32 {
    match u {
        1 => rng.random_range(0..=MAX_OFFSET - travel),
        -1 => rng.random_range(travel..=MAX_OFFSET),
        _ => rng.random_range(0..=MAX_OFFSET),
    }
}

pub fn sample_spec(rng_seed: u64, allowed_lengths: &[usize]) -> Result<ClipSpec> {
    check_lengths(allowed_lengths)?;
    let mut rng = seed::rng(rng_seed);
    let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
    let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
    let length_frames = allowed_lengths[rng.random_range(0..allowed_lengths.len())];
    let (motion, start) = if length_frames == 1 {
        let x = rng.random_range(0..=MAX_OFFSET);
        let y = rng.random_range(0..=MAX_OFFSET);
        (None, (x, y))
    } else {
        let direction = Direction::ALL[rng.random_range(0..Direction::ALL.len())];
        let speeds = feasible_speeds(length_frames);
        let speed = speeds[rng.random_range(0..speeds.len())];
        let travel = (speed as usize * (length_frames - 1)) as i32;
        let (ux, uy) = direction.unit();
        let x = start_coord(&mut rng, ux, travel);
        let y = start_coord(&mut rng, uy, travel);
        (Some(Motion { direction, speed }), (x, y))
    };
    Ok(ClipSpec {
        shape,
        color,
        motion,
        start,
        length_frames,
        seed: rng_seed,
    })
}

/// Caption grammar: `a {color} {shape} moves {direction}`, or `a {color} {shape}`
/// for single frames. Speed and position are never mentioned.
pub fn caption_of(spec: &ClipSpec) -> String {
    match spec.motion {
        Some(m) => format!(
            "a {} {} moves {}",
            spec.color.name(),
            spec.shape.name(),
            m.direction.name()
        ),
        None => format!("a {} {}", spec.color.name(), spec.shape.name()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub spec: ClipSpec,
    pub clip: VideoClip,
    pub caption: String,
}

/// Item `i` is generated from `derive_seed(seed, i)`.
pub fn build_corpus(n: usize, seed: u64, allowed_lengths: &[usize]) -> Result<Vec<CorpusItem>> {
    if n == 0 {
        return invalid("corpus size must be positive");
    }
    check_lengths(allowed_lengths)?;
    (0..n)
        .map(|i| {
            let spec = sample_spec(seed::derive_seed(seed, i as u64), allowed_lengths)?;
            let clip = render_clip(&spec)?;
            let caption = caption_of(&spec);
            Ok(CorpusItem { spec, clip, caption })
        })
        .collect()
}
