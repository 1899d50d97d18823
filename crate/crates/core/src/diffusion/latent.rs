//! Fixed orthogonal patch-pooling map between pixels and latents.
//!
//! Every 4×4×3 pixel block is projected onto four orthonormal vectors:
//! the block mean of each colour channel and a channel-shared checker
//! texture. Rendered frames are block-constant per channel plus a checker
//! term, so they lie exactly in the map's range.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthdata::scene::{BLOCK, CHANNELS, FRAME_SIZE, GRID};

pub const LATENT_CHANNELS: usize = 4;

/// `[F, c, h, w]` latent video.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentClip {
    pub z: Tensor,
}

fn basis(ch: usize, dy: usize, dx: usize, c: usize) -> f64 {
    let n = (BLOCK * BLOCK) as f64;
    if ch < CHANNELS {
        if c == ch {
            1.0 / n.sqrt()
        } else {
            0.0
        }
    } else {
        let s = if (dx + dy) % 2 == 0 { 1.0 } else { -1.0 };
        s / (n * CHANNELS as f64).sqrt()
    }
}

/// `[..., H, W, C]` pixels to `[..., 4, GRID, GRID]` latents.
pub fn encode(frames: &Tensor) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() < 3 || s[s.len() - 3..] != [FRAME_SIZE, FRAME_SIZE, CHANNELS] {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected [..., 32, 32, 3] pixels".into(),
        });
    }
    let lead = &s[..s.len() - 3];
    let count: usize = lead.iter().product();
    let frame = FRAME_SIZE * FRAME_SIZE * CHANNELS;
    let lat = LATENT_CHANNELS * GRID * GRID;
    let mut out = vec![0.0; count * lat];
    for f in 0..count {
        let px = &frames.data()[f * frame..(f + 1) * frame];
        let z = &mut out[f * lat..(f + 1) * lat];
        for gy in 0..GRID {
            for gx in 0..GRID {
                for dy in 0..BLOCK {
                    for dx in 0..BLOCK {
                        let (y, x) = (gy * BLOCK + dy, gx * BLOCK + dx);
                        for c in 0..CHANNELS {
                            let v = px[(y * FRAME_SIZE + x) * CHANNELS + c] - 0.5;
                            for ch in 0..LATENT_CHANNELS {
                                z[(ch * GRID + gy) * GRID + gx] += basis(ch, dy, dx, c) * v;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut shape = lead.to_vec();
    shape.extend([LATENT_CHANNELS, GRID, GRID]);
    Tensor::new(&shape, out)
}

/// `[..., 4, GRID, GRID]` latents back to `[..., H, W, C]` pixels.
pub fn decode(z: &Tensor) -> Result<Tensor> {
    let s = z.shape();
    if s.len() < 3 || s[s.len() - 3..] != [LATENT_CHANNELS, GRID, GRID] {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected [..., 4, 8, 8] latents".into(),
        });
    }
    let lead = &s[..s.len() - 3];
    let count: usize = lead.iter().product();
    let frame = FRAME_SIZE * FRAME_SIZE * CHANNELS;
    let lat = LATENT_CHANNELS * GRID * GRID;
    let mut out = vec![0.5; count * frame];
    for f in 0..count {
        let zf = &z.data()[f * lat..(f + 1) * lat];
        let px = &mut out[f * frame..(f + 1) * frame];
        for y in 0..FRAME_SIZE {
            for x in 0..FRAME_SIZE {
                let (gy, gx, dy, dx) = (y / BLOCK, x / BLOCK, y % BLOCK, x % BLOCK);
                for c in 0..CHANNELS {
                    let mut v = 0.0;
                    for ch in 0..LATENT_CHANNELS {
                        v += basis(ch, dy, dx, c) * zf[(ch * GRID + gy) * GRID + gx];
                    }
                    px[(y * FRAME_SIZE + x) * CHANNELS + c] += v;
                }
            }
        }
    }
    let mut shape = lead.to_vec();
    shape.extend([FRAME_SIZE, FRAME_SIZE, CHANNELS]);
    Tensor::new(&shape, out)
}

impl LatentClip {
    pub fn from_pixels(clip: &Tensor) -> Result<Self> {
        Ok(Self { z: encode(clip)? })
    }

    pub fn to_pixels(&self) -> Result<Tensor> {
        decode(&self.z)
    }

    pub fn frames(&self) -> usize {
        self.z.shape()[0]
    }
}
