//! Scene catalog, deterministic sprite renderer and caption tokens.
//!
//! Frames are 32×32 RGB. Every frame is piecewise structured on a 4×4-pixel
//! block grid: each block is a flat color plus an optional zero-mean
//! checker texture, which is exactly the span of the latent map used by the
//! generator.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::numerics::Tensor;
use crate::rng;

pub const FRAME_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const BLOCK: usize = 4;
pub const GRID: usize = FRAME_SIZE / BLOCK;
pub const NUM_CLASSES: usize = 64;
pub const NUM_HUES: usize = 8;
pub const NUM_LAYOUTS: usize = 8;
pub const NUM_DIRECTIONS: usize = 8;
pub const SEMANTIC_DIM: usize = 16;
/// Native stimulus frame rate (frames per second) the motion code refers to.
pub const NATIVE_FPS: usize = 3;

pub const VOCAB: usize = 64;
pub const CAPTION_LEN: usize = 8;
pub const PAD: usize = 0;
pub const THEN: usize = 63;
const COLOR_BASE: usize = 1;
const LAYOUT_BASE: usize = 9;
const TEXTURE_BASE: usize = 17;
/// Offset from a word to its synonym id.
pub const SYNONYM_OFFSET: usize = 20;

const CATALOG_SEED: u64 = 0x5ce7_e5ca_7a10_9001;

const PALETTE: [[f64; 3]; NUM_HUES] = [
    [0.80, 0.25, 0.25],
    [0.25, 0.75, 0.30],
    [0.25, 0.35, 0.80],
    [0.80, 0.75, 0.25],
    [0.70, 0.30, 0.75],
    [0.25, 0.75, 0.75],
    [0.85, 0.45, 0.60],
    [0.55, 0.55, 0.55],
];

const SHAPES: [[u8; 9]; NUM_LAYOUTS] = [
    [1, 1, 1, 1, 1, 1, 1, 1, 1],
    [0, 1, 0, 1, 1, 1, 0, 1, 0],
    [1, 0, 1, 0, 1, 0, 1, 0, 1],
    [0, 0, 0, 1, 1, 1, 0, 0, 0],
    [0, 1, 0, 0, 1, 0, 0, 1, 0],
    [1, 0, 0, 1, 0, 0, 1, 1, 1],
    [1, 1, 1, 0, 1, 0, 0, 1, 0],
    [1, 1, 1, 1, 0, 1, 1, 1, 1],
];

pub const DIRECTIONS: [(i32, i32); NUM_DIRECTIONS] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

fn layout_pattern(layout: usize, bx: usize, by: usize) -> bool {
    match layout {
        1 => by % 2 == 0,
        2 => bx % 2 == 0,
        3 => (bx + by) % 2 == 0,
        4 => by < GRID / 2,
        5 => bx < GRID / 2,
        6 => (bx + by) % 4 < 2,
        7 => bx == 0 || by == 0 || bx == GRID - 1 || by == GRID - 1,
        _ => false,
    }
}

/// One stimulus scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub semantic_code: Vec<f64>,
    /// Sprite velocity in blocks per native frame, each component in {-1, 0, 1}.
    pub motion_code: [f64; 2],
    pub scene_id: usize,
    /// Sprite top-left block at the first frame.
    pub origin: (usize, usize),
    pub caption_tokens: Vec<usize>,
}

impl SyntheticScene {
    pub fn hue(&self) -> usize {
        self.scene_id % NUM_HUES
    }

    pub fn layout(&self) -> usize {
        (self.scene_id / NUM_HUES) % NUM_LAYOUTS
    }

    pub fn texture_amplitude(&self) -> f64 {
        let s = 1.0 / (1.0 + (-self.semantic_code[0]).exp());
        0.02 + 0.04 * s
    }

    fn brightness_shift(&self) -> f64 {
        0.05 * self.semantic_code[1].tanh()
    }

    /// Index into [`DIRECTIONS`]; `None` for a static sprite.
    pub fn direction(&self) -> Option<usize> {
        let v = (self.motion_code[0] as i32, self.motion_code[1] as i32);
        DIRECTIONS.iter().position(|&d| d == v)
    }

    /// Motion-catalog class: direction × sprite shape.
    pub fn video_class(&self) -> usize {
        self.direction().unwrap_or(0) * NUM_LAYOUTS + self.layout()
    }

    /// Write frame `k` (counted from the scene start, at `fps`) into `out`
    /// as `[H, W, C]`.
    pub fn render_into(&self, k: usize, fps: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), FRAME_SIZE * FRAME_SIZE * CHANNELS);
        let steps = (k * NATIVE_FPS / fps.max(1)) as i64;
        let g = GRID as i64;
        let px = (self.origin.0 as i64 + self.motion_code[0] as i64 * steps).rem_euclid(g) as usize;
        let py = (self.origin.1 as i64 + self.motion_code[1] as i64 * steps).rem_euclid(g) as usize;
        let shift = self.brightness_shift();
        let mut bg = PALETTE[self.hue()];
        bg.iter_mut().for_each(|c| *c += shift);
        let shade = if self.layout() % 2 == 0 { 0.92 } else { 0.08 };
        let amp = self.texture_amplitude();
        let shape = SHAPES[self.layout()];
        for by in 0..GRID {
            for bx in 0..GRID {
                let rx = (bx + GRID - px) % GRID;
                let ry = (by + GRID - py) % GRID;
                let sprite = rx < 3 && ry < 3 && shape[ry * 3 + rx] == 1;
                let dark = layout_pattern(self.layout(), bx, by);
                for dy in 0..BLOCK {
                    for dx in 0..BLOCK {
                        let y = by * BLOCK + dy;
                        let x = bx * BLOCK + dx;
                        let base = (y * FRAME_SIZE + x) * CHANNELS;
                        let checker = if (dx + dy) % 2 == 0 { 1.0 } else { -1.0 };
                        for c in 0..CHANNELS {
                            out[base + c] = if sprite {
                                shade
                            } else {
                                let v = if dark { bg[c] * 0.65 } else { bg[c] };
                                v + amp * checker
                            };
                        }
                    }
                }
            }
        }
    }
}

/// A rendered clip `[F, H, W, C]` with caption tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub fps: usize,
    pub caption: Vec<usize>,
}

pub fn frame_len() -> usize {
    FRAME_SIZE * FRAME_SIZE * CHANNELS
}

/// Deterministic renderer: same scene and arguments give bit-identical clips.
pub fn render_clip(scene: &SyntheticScene, frames: usize, fps: usize) -> VideoClip {
    let n = frame_len();
    let mut data = vec![0.0; frames * n];
    for (k, chunk) in data.chunks_mut(n).enumerate() {
        scene.render_into(k, fps, chunk);
    }
    VideoClip {
        frames: Tensor::new(&[frames, FRAME_SIZE, FRAME_SIZE, CHANNELS], data).expect("extents"),
        fps,
        caption: pad_caption(&scene.caption_tokens),
    }
}

/// The fixed catalog of scene classes and their semantic codes.
#[derive(Clone, Debug)]
pub struct SceneCatalog {
    codes: Vec<Vec<f64>>,
}

impl Default for SceneCatalog {
    fn default() -> Self {
        Self::new()
    }
}

impl SceneCatalog {
    pub fn new() -> Self {
        let mut r = rng::stream(CATALOG_SEED, "scene-catalog");
        let codes = (0..NUM_CLASSES)
            .map(|_| (0..SEMANTIC_DIM).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Self { codes }
    }

    pub fn semantic_code(&self, scene_id: usize) -> &[f64] {
        &self.codes[scene_id % NUM_CLASSES]
    }

    pub fn scene(&self, scene_id: usize, motion: (i32, i32), origin: (usize, usize)) -> SyntheticScene {
        let semantic_code = self.semantic_code(scene_id).to_vec();
        let caption_tokens = scene_caption(&semantic_code, scene_id);
        SyntheticScene {
            semantic_code,
            motion_code: [f64::from(motion.0), f64::from(motion.1)],
            scene_id: scene_id % NUM_CLASSES,
            origin: (origin.0 % GRID, origin.1 % GRID),
            caption_tokens,
        }
    }

    pub fn random_scene<R: Rng + ?Sized>(&self, r: &mut R) -> SyntheticScene {
        let id = r.random_range(0..NUM_CLASSES);
        let dir = DIRECTIONS[r.random_range(0..NUM_DIRECTIONS)];
        let origin = (r.random_range(0..GRID), r.random_range(0..GRID));
        self.scene(id, dir, origin)
    }
}

/// Three tokens: color, layout and texture words.
pub fn scene_caption(semantic_code: &[f64], scene_id: usize) -> Vec<usize> {
    let s = 1.0 / (1.0 + (-semantic_code[0]).exp());
    let texture = ((s * 4.0) as usize).min(3);
    vec![
        COLOR_BASE + scene_id % NUM_HUES,
        LAYOUT_BASE + (scene_id / NUM_HUES) % NUM_LAYOUTS,
        TEXTURE_BASE + texture,
    ]
}

pub fn pad_caption(tokens: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = tokens.iter().copied().take(CAPTION_LEN).collect();
    out.resize(CAPTION_LEN, PAD);
    out
}

/// Caption of a scan window: a single scene caption, or the first and last
/// scene captions joined by the `THEN` separator when the scene changes.
pub fn window_caption(scenes: &[&SyntheticScene]) -> Vec<usize> {
    match scenes {
        [] => vec![PAD; CAPTION_LEN],
        [only] => pad_caption(&only.caption_tokens),
        [first, .., last] if first == last => pad_caption(&first.caption_tokens),
        [first, .., last] => {
            let mut t = first.caption_tokens.clone();
            t.push(THEN);
            t.extend_from_slice(&last.caption_tokens);
            pad_caption(&t)
        }
    }
}

/// Whether `token` has a synonym id, and the mapping both ways.
pub fn synonym(token: usize) -> Option<usize> {
    match token {
        t if (COLOR_BASE..TEXTURE_BASE + 4).contains(&t) => Some(t + SYNONYM_OFFSET),
        t if (COLOR_BASE + SYNONYM_OFFSET..TEXTURE_BASE + 4 + SYNONYM_OFFSET).contains(&t) => {
            Some(t - SYNONYM_OFFSET)
        }
        _ => None,
    }
}
