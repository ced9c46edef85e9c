//! Frame encoder interface and the deterministic toy backbone.
//!
//! The toy encoder mirrors a ViT patch embedding: every `patch x patch` RGB
//! patch is flattened and multiplied by a fixed seeded projection, a fixed
//! sinusoidal positional code is added, and a zero class token is prepended
//! to each frame. An optional stack of residual token blocks stands in for
//! transformer layers so that selective unfreezing has something to act on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::nn::{join, randn_scaled, Activation, Linear, Mlp, Module};
use crate::types::{ClipTokens, ClipVar};
use crate::Param;

/// One RGB frame, row-major `[h, w, 3]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!("frame buffer has {} values, expected {height}x{width}x3", pixels.len())));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width * 3] }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }

    pub fn flip_horizontal(&self) -> Frame {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    /// Bilinear resize (align-corners off, half-pixel centers).
    pub fn resize(&self, height: usize, width: usize) -> Frame {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Frame::zeros(height, width);
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for c in 0..3 {
                    let top = self.get(y0, x0, c) * (1.0 - wx) + self.get(y0, x1, c) * wx;
                    let bot = self.get(y1, x0, c) * (1.0 - wx) + self.get(y1, x1, c) * wx;
                    out.set(y, x, c, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub patch_size: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub d: usize,
    pub seed: u64,
    /// Residual token blocks after the patch embedding (0 = embedding only).
    pub blocks: usize,
    pub block_hidden: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { patch_size: 16, image_h: 256, image_w: 128, d: 768, seed: 0, blocks: 0, block_hidden: 64 }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.d == 0 {
            return Err(Error::Config("patch_size and d must be positive".into()));
        }
        if !self.image_h.is_multiple_of(self.patch_size) || !self.image_w.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.num_patches() + 1
    }

    fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Residual token block standing in for a transformer layer.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub mlp: Mlp,
}

impl Module for EncoderBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Pluggable per-frame encoder. Implementations never expose trainable
/// patch-embedding weights.
pub trait FrameEncoder {
    fn spec(&self) -> &EncoderSpec;
    fn embed(&self, frames: &[Frame]) -> Result<ClipTokens>;
}

#[derive(Clone, Debug)]
pub struct ToyEncoder {
    spec: EncoderSpec,
    projection: Tensor,
    positional: Tensor,
    pub blocks: Vec<EncoderBlock>,
}

impl ToyEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let projection = randn_scaled(spec.patch_dim(), spec.d, 1.0, &mut rng);
        let positional = sinusoidal(spec.num_patches(), spec.d, 0.1);
        let blocks = (0..spec.blocks)
            .map(|_| {
                let mut mlp = Mlp::zero_out(spec.d, spec.block_hidden, spec.d, true, Activation::Gelu, &mut rng);
                mlp.fc2 = Linear::new(spec.block_hidden, spec.d, true, &mut rng);
                mlp.fc2.weight.value *= 0.1;
                EncoderBlock { mlp }
            })
            .collect();
        Ok(Self { spec, projection, positional, blocks })
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn positional(&self) -> &Tensor {
        &self.positional
    }

    /// Applies the residual blocks on a graph. Identity when there are none.
    pub fn blocks_forward(&self, g: &mut Graph, clip: ClipVar) -> ClipVar {
        let mut x = clip.var;
        for block in &self.blocks {
            let delta = block.mlp.forward(g, x);
            x = g.add(x, delta);
        }
        clip.with_var(x)
    }

    /// Full encoder: patch embedding followed by the block stack.
    pub fn encode(&self, frames: &[Frame]) -> Result<ClipTokens> {
        let tokens = self.embed(frames)?;
        if self.blocks.is_empty() {
            return Ok(tokens);
        }
        let mut g = Graph::inference();
        let clip = tokens.to_var(&mut g);
        let out = self.blocks_forward(&mut g, clip);
        out.to_tokens(&g)
    }
}

impl FrameEncoder for ToyEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn embed(&self, frames: &[Frame]) -> Result<ClipTokens> {
        let spec = &self.spec;
        if frames.is_empty() {
            return Err(Error::Shape("need at least one frame".into()));
        }
        let p = spec.patch_size;
        let gw = spec.image_w / p;
        let np = spec.num_patches();
        let per_frame = np + 1;
        let mut patches = Tensor::zeros((frames.len() * np, spec.patch_dim()));
        for (t, frame) in frames.iter().enumerate() {
            if frame.height != spec.image_h || frame.width != spec.image_w {
                return Err(Error::Shape(format!(
                    "frame {t} is {}x{}, encoder expects {}x{}",
                    frame.height, frame.width, spec.image_h, spec.image_w
                )));
            }
            if frame.pixels.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("frame {t} has non-finite pixels")));
            }
            for k in 0..np {
                let (py, px) = (k / gw, k % gw);
                let mut row = patches.row_mut(t * np + k);
                let mut j = 0;
                for y in py * p..(py + 1) * p {
                    for x in px * p..(px + 1) * p {
                        for c in 0..3 {
                            row[j] = frame.get(y, x, c) as f64;
                            j += 1;
                        }
                    }
                }
            }
        }
        let projected = patches.dot(&self.projection);
        let mut data = Tensor::zeros((frames.len() * per_frame, spec.d));
        for t in 0..frames.len() {
            for k in 0..np {
                let mut row = data.row_mut(t * per_frame + 1 + k);
                row.assign(&projected.row(t * np + k));
                row += &self.positional.row(k);
            }
        }
        ClipTokens::new(data, frames.len())
    }
}

impl Module for ToyEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{}", i + 1)), f);
        }
    }
}

/// Encodes `frames` with a toy encoder built from `spec`.
pub fn encode_frames(frames: &[Frame], spec: &EncoderSpec) -> Result<ClipTokens> {
    ToyEncoder::new(spec.clone())?.encode(frames)
}

fn sinusoidal(positions: usize, d: usize, scale: f64) -> Tensor {
    Tensor::from_shape_fn((positions, d), |(pos, i)| {
        let k = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
        scale * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}
