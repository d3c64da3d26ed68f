//! Colour handling: sRGB/CIELAB conversion, the 16-class Lab palette used
//! as the reconstruction target, and the input bottleneck.

mod bottleneck;
mod palette;
mod space;

pub use bottleneck::{apply_bottleneck, bottleneck_graph, BottleneckConfig, DropMask, JitterDraw, GRAY_WEIGHTS};
pub use palette::{fit_palette, pool_lab, quantize, sample_lab_pixels, Palette, QuantizedFrame};
pub use space::{lab_to_rgb, lab_to_rgb_graph, rgb_to_lab, rgb_to_lab_pixel, lab_to_rgb_pixel};

use crate::error::{Error, Result};

/// RGB image with channel values in `[0, 1]`, stored `H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    rgb: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, rgb: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || rgb.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "frame {height}x{width} needs {} values, got {}",
                height * width * 3,
                rgb.len()
            )));
        }
        if let Some(v) = rgb.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::shape(format!("frame value {v} outside [0, 1]")));
        }
        Ok(Frame { height, width, rgb })
    }

    /// Builds a frame from values that may drift outside `[0, 1]`, clamping
    /// them back.
    pub fn from_clamped(height: usize, width: usize, mut rgb: Vec<f32>) -> Result<Self> {
        rgb.iter_mut().for_each(|v| *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Frame::new(height, width, rgb)
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Frame::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn filled(height: usize, width: usize, colour: [f32; 3]) -> Result<Self> {
        let rgb = (0..height * width).flat_map(|_| colour).collect();
        Frame::new(height, width, rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rgb(&self) -> &[f32] {
        &self.rgb
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, c: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c.map(|v| v.clamp(0.0, 1.0)));
    }

    /// Values rounded to 8 bits, as written to PPM.
    pub fn to_u8(&self) -> Vec<u8> {
        self.rgb.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// CIELAB image, `H x W x 3`, nominally `L in [0,100]`, `a, b in [-128,127]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabFrame {
    height: usize,
    width: usize,
    lab: Vec<f64>,
}

impl LabFrame {
    pub fn new(height: usize, width: usize, lab: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || lab.len() != height * width * 3 {
            return Err(Error::shape(format!("lab frame {height}x{width} with {} values", lab.len())));
        }
        Ok(LabFrame { height, width, lab })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.lab
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.lab[i], self.lab[i + 1], self.lab[i + 2]]
    }
}
