//! Synthetic videos with exact ground truth: value-noise textured
//! rectangles translating at constant integer velocity over a static
//! textured background.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_frames, write_keypoints, write_masks};
use crate::colour::Frame;
use crate::error::{Error, Result};
use crate::propagation::{Keypoint, MaskAnnotation};

/// Lattice spacing of the value noise, in pixels.
const NOISE_CELL: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub patches: usize,
    /// Bound on each velocity component, pixels per frame.
    pub max_speed: usize,
    /// Explicit `(vx, vy)` per patch; drawn at random when absent.
    pub velocities: Option<Vec<(i32, i32)>>,
    pub clip_len: usize,
    pub background_texture: bool,
    pub stride: usize,
    pub max_disparity: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 32,
            width: 32,
            patches: 2,
            max_speed: 4,
            velocities: None,
            clip_len: 8,
            background_texture: true,
            stride: 4,
            max_disparity: 6,
        }
    }
}

impl SyntheticSpec {
    pub fn speed_bound(&self) -> usize {
        self.stride * self.max_disparity
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(self.stride) || !self.width.is_multiple_of(self.stride) {
            return Err(Error::config(format!(
                "canvas {}x{} must be non-empty multiples of {}",
                self.height, self.width, self.stride
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::config("canvas must be at least 16x16"));
        }
        if self.clip_len == 0 {
            return Err(Error::config("clip length must be positive"));
        }
        if self.patches > 254 {
            return Err(Error::config("at most 254 patches fit in 8-bit masks"));
        }
        let bound = self.speed_bound();
        if self.max_speed > bound {
            return Err(Error::config(format!(
                "max_speed {} exceeds stride*M = {}*{} = {bound}",
                self.max_speed, self.stride, self.max_disparity
            )));
        }
        if let Some(v) = &self.velocities {
            if v.len() != self.patches {
                return Err(Error::config(format!("{} velocities for {} patches", v.len(), self.patches)));
            }
            if let Some(&(vx, vy)) = v.iter().find(|(vx, vy)| vx.unsigned_abs() as usize > bound || vy.unsigned_abs() as usize > bound) {
                return Err(Error::config(format!(
                    "velocity ({vx}, {vy}) exceeds stride*M = {}*{} = {bound}",
                    self.stride, self.max_disparity
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub frames: Vec<Frame>,
    pub masks: Vec<MaskAnnotation>,
    /// Per frame transition `t -> t+1`, the `(dx, dy)` of every pixel.
    pub flow: Vec<Vec<[i32; 2]>>,
    /// Patch centres, keypoint id = patch index.
    pub keypoints: Vec<Keypoint>,
    pub velocities: Vec<(i32, i32)>,
}

/// Smooth RGB noise: random values on a `NOISE_CELL` lattice, bilinearly
/// interpolated, around a random base colour.
struct Texture {
    h: usize,
    w: usize,
    rgb: Vec<f32>,
}

impl Texture {
    fn new(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let (lh, lw) = (h / NOISE_CELL + 2, w / NOISE_CELL + 2);
        let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
        let lattice: Vec<f32> = (0..lh * lw * 3).map(|_| rng.random_range(-0.25..0.25)).collect();
        let mut rgb = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            let (gy, fy) = (y / NOISE_CELL, (y % NOISE_CELL) as f32 / NOISE_CELL as f32);
            for x in 0..w {
                let (gx, fx) = (x / NOISE_CELL, (x % NOISE_CELL) as f32 / NOISE_CELL as f32);
                for c in 0..3 {
                    let at = |i: usize, j: usize| lattice[(i * lw + j) * 3 + c];
                    let v = (1.0 - fy) * ((1.0 - fx) * at(gy, gx) + fx * at(gy, gx + 1))
                        + fy * ((1.0 - fx) * at(gy + 1, gx) + fx * at(gy + 1, gx + 1));
                    rgb.push((base[c] + v).clamp(0.0, 1.0));
                }
            }
        }
        Texture { h, w, rgb }
    }

    fn flat(h: usize, w: usize, value: f32) -> Self {
        Texture {
            h,
            w,
            rgb: vec![value; h * w * 3],
        }
    }

    fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

struct Patch {
    y0: i64,
    x0: i64,
    vy: i64,
    vx: i64,
    texture: Texture,
}

/// Start positions keeping the whole trajectory on the canvas, preferring
/// multiples of 4.
fn start_range(extent: usize, size: usize, v: i64, frames: usize) -> Option<(i64, i64)> {
    let travel = v * (frames as i64 - 1);
    let lo = (-travel).max(0);
    let hi = extent as i64 - size as i64 - travel.max(0);
    (lo <= hi).then_some((lo, hi))
}

fn pick_start(rng: &mut ChaCha8Rng, (lo, hi): (i64, i64)) -> i64 {
    let aligned: Vec<i64> = (lo..=hi).filter(|v| v % 4 == 0).collect();
    if aligned.is_empty() {
        rng.random_range(lo..=hi)
    } else {
        aligned[rng.random_range(0..aligned.len())]
    }
}

pub fn generate_clip(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticClip> {
    spec.validate()?;
    let (h, w, n) = (spec.height, spec.width, spec.clip_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = if spec.background_texture {
        Texture::new(h, w, &mut rng)
    } else {
        Texture::flat(h, w, 0.5)
    };
    let mut patches = Vec::with_capacity(spec.patches);
    for p in 0..spec.patches {
        let size = |rng: &mut ChaCha8Rng, extent: usize| {
            let (lo, hi) = ((extent / 4).max(8) / 4, (extent / 2) / 4);
            rng.random_range(lo..=hi.max(lo)) * 4
        };
        let (ph, pw) = (size(&mut rng, h), size(&mut rng, w));
        let speed_for = |extent: usize, size: usize| {
            let room = extent.saturating_sub(size) / n.saturating_sub(1).max(1);
            spec.max_speed.min(room) as i64
        };
        let (vx, vy) = match &spec.velocities {
            Some(v) => (v[p].0 as i64, v[p].1 as i64),
            None => {
                let (sx, sy) = (speed_for(w, pw), speed_for(h, ph));
                (rng.random_range(-sx..=sx), rng.random_range(-sy..=sy))
            }
        };
        let (ry, rx) = match (start_range(h, ph, vy, n), start_range(w, pw, vx, n)) {
            (Some(ry), Some(rx)) => (ry, rx),
            _ => {
                return Err(Error::config(format!(
                    "patch {p} ({pw}x{ph}) moving ({vx}, {vy}) for {n} frames leaves the {w}x{h} canvas"
                )))
            }
        };
        let (y0, x0) = (pick_start(&mut rng, ry), pick_start(&mut rng, rx));
        let texture = Texture::new(ph, pw, &mut rng);
        patches.push(Patch { y0, x0, vy, vx, texture });
    }

    let mut frames = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut flow = Vec::with_capacity(n.saturating_sub(1));
    let mut keypoints = Vec::new();
    for t in 0..n as i64 {
        let mut rgb = background.rgb.clone();
        let mut ids = vec![0u8; h * w];
        let mut motion = vec![[0i32; 2]; h * w];
        for (p, patch) in patches.iter().enumerate() {
            let (py, px) = (patch.y0 + patch.vy * t, patch.x0 + patch.vx * t);
            for y in 0..patch.texture.h {
                for x in 0..patch.texture.w {
                    let cell = (py as usize + y) * w + px as usize + x;
                    rgb[cell * 3..cell * 3 + 3].copy_from_slice(&patch.texture.pixel(y, x));
                    ids[cell] = p as u8 + 1;
                    motion[cell] = [patch.vx as i32, patch.vy as i32];
                }
            }
            keypoints.push(Keypoint {
                frame: t as usize,
                id: p,
                x: px as f64 + patch.texture.w as f64 / 2.0,
                y: py as f64 + patch.texture.h as f64 / 2.0,
                visible: true,
            });
        }
        frames.push(Frame::new(h, w, rgb)?);
        masks.push(MaskAnnotation::new(h, w, ids)?);
        if (t as usize) + 1 < n {
            flow.push(motion);
        }
    }
    Ok(SyntheticClip {
        frames,
        masks,
        flow,
        keypoints,
        velocities: patches.iter().map(|p| (p.vx as i32, p.vy as i32)).collect(),
    })
}

/// Writes `frames/`, `masks/` and `keypoints.csv` under `dir`.
pub fn write_clip(dir: &Path, clip: &SyntheticClip) -> Result<()> {
    write_frames(&dir.join("frames"), &clip.frames)?;
    write_masks(&dir.join("masks"), &clip.masks)?;
    write_keypoints(&dir.join("keypoints.csv"), &clip.keypoints)
}
