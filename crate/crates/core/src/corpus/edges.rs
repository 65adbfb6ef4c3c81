use super::{VideoClip, CHANNELS};
use crate::error::{invalid, Result};

pub const DEFAULT_EDGE_THRESHOLD: f32 = 0.5;

/// Binary edge maps, layout (t, y, x), one channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlSignal {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ControlSignal {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != frames * height * width {
            return invalid("control data length does not match its shape");
        }
        if data.iter().any(|&v| v > 1) {
            return invalid("control signal must be binary");
        }
        Ok(Self { frames, height, width, data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width, data: vec![0; frames * height * width] }
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
        [self.frames, 1, self.height, self.width]
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize) -> u8 {
        self.data[(t * self.height + y) * self.width + x]
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }
}

/// Thresholded luminance gradient magnitude. Luminance is the channel mean;
/// gradients are the central differences `L[x+1] - L[x-1]` (and likewise in y)
/// with edge-replicated borders.
pub fn edge_map(clip: &VideoClip, threshold: f32) -> Result<ControlSignal> {
    if !(threshold > 0.0) {
        return invalid(format!("edge threshold must be positive, got {threshold}"));
    }
    let (t_n, h, w) = (clip.frames(), clip.height(), clip.width());
    let mut out = vec![0u8; t_n * h * w];
    let mut lum = vec![0f32; h * w];
    for t in 0..t_n {
        for y in 0..h {
            for x in 0..w {
                let s: f32 = (0..CHANNELS).map(|c| clip.get(t, c, y, x)).sum();
                lum[y * w + x] = s / CHANNELS as f32;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let l = |yy: usize, xx: usize| lum[yy * w + xx];
                let gx = l(y, (x + 1).min(w - 1)) - l(y, x.saturating_sub(1));
                let gy = l((y + 1).min(h - 1), x) - l(y.saturating_sub(1), x);
                if (gx * gx + gy * gy).sqrt() > threshold {
                    out[(t * h + y) * w + x] = 1;
                }
            }
        }
    }
    ControlSignal::new(t_n, h, w, out)
}
