//! Images, region boxes and ROI Align.

use serde::{Deserialize, Serialize};

use super::EncoderError;
use crate::diffcore::Tensor;

/// `height × width × 3` pixels in `[0, 1]`, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Image, EncoderError> {
        if pixels.len() != height * width * 3 {
            return Err(EncoderError::Image(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(EncoderError::Image(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Image {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.height, self.width, 3], self.pixels.clone()).expect("consistent image")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Image, EncoderError> {
        match t.shape() {
            [h, w, 3] => Image::new(*h, *w, t.data().to_vec()),
            s => Err(EncoderError::Image(format!("expected [h, w, 3] tensor, got {s:?}"))),
        }
    }

    /// Flattens non-overlapping `patch × patch` tiles in row-major tile order;
    /// each tile is laid out as `(row, col, channel)`.
    pub fn patchify(&self, patch: usize) -> Result<Vec<f32>, EncoderError> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(EncoderError::Image(format!(
                "{}x{} image is not divisible into {patch}x{patch} patches",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(self.pixels.len());
        for py in 0..self.height / patch {
            for px in 0..self.width / patch {
                for y in py * patch..(py + 1) * patch {
                    let start = (y * self.width + px * patch) * 3;
                    out.extend_from_slice(&self.pixels[start..start + patch * 3]);
                }
            }
        }
        Ok(out)
    }
}

/// Axis-aligned box in center-size form, as fractions of the image extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl RegionBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<RegionBox, EncoderError> {
        let b = RegionBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<RegionBox, EncoderError> {
        RegionBox::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.cx) || !unit(self.cy) {
            return Err(EncoderError::Box(format!("center ({}, {}) outside [0, 1]", self.cx, self.cy)));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(EncoderError::Box(format!(
                "extent w={} h={} must satisfy 0 < w, h <= 1",
                self.w, self.h
            )));
        }
        Ok(())
    }

    /// `[x1, y1, x2, y2]` clipped to the unit square.
    pub fn corners(&self) -> [f64; 4] {
        [
            (self.cx - self.w / 2.0).max(0.0),
            (self.cy - self.h / 2.0).max(0.0),
            (self.cx + self.w / 2.0).min(1.0),
            (self.cy + self.h / 2.0).min(1.0),
        ]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// How many bilinear samples each output cell averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Sampling {
    /// `ceil(cell extent in pixels)` samples per axis, at least one.
    #[default]
    Adaptive,
    /// A fixed `n × n` grid per cell.
    Grid(usize),
}

/// Bilinear interpolation between pixel centers; `y`, `x` are continuous
/// image coordinates where pixel `(i, j)` covers `[i, i+1) × [j, j+1)`.
pub fn bilinear(img: &Image, y: f64, x: f64, c: usize) -> f64 {
    let py = (y - 0.5).clamp(0.0, (img.height - 1) as f64);
    let px = (x - 0.5).clamp(0.0, (img.width - 1) as f64);
    let y0 = py.floor() as usize;
    let x0 = px.floor() as usize;
    let y1 = (y0 + 1).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let ly = py - y0 as f64;
    let lx = px - x0 as f64;
    let p = |yy: usize, xx: usize| img.get(yy, xx, c) as f64;
    (1.0 - ly) * ((1.0 - lx) * p(y0, x0) + lx * p(y0, x1)) + ly * ((1.0 - lx) * p(y1, x0) + lx * p(y1, x1))
}

/// Resamples the box region of `img` onto an `out_h × out_w` grid. Each output
/// cell averages regularly spaced bilinear samples inside its sub-rectangle.
pub fn roi_align(
    img: &Image,
    rbox: &RegionBox,
    out_h: usize,
    out_w: usize,
    sampling: Sampling,
) -> Result<Image, EncoderError> {
    rbox.validate()?;
    if out_h == 0 || out_w == 0 {
        return Err(EncoderError::Image("roi_align output must be at least 1x1".into()));
    }
    let [x1, y1, x2, y2] = rbox.corners();
    let (x1, x2) = (x1 * img.width as f64, x2 * img.width as f64);
    let (y1, y2) = (y1 * img.height as f64, y2 * img.height as f64);
    if x2 - x1 < 2.0 || y2 - y1 < 2.0 {
        return Err(EncoderError::Box(format!(
            "box spans {:.3}x{:.3} pixels; roi_align needs at least 2x2",
            x2 - x1,
            y2 - y1
        )));
    }
    let bin_h = (y2 - y1) / out_h as f64;
    let bin_w = (x2 - x1) / out_w as f64;
    let (gh, gw) = match sampling {
        Sampling::Adaptive => ((bin_h.ceil() as usize).max(1), (bin_w.ceil() as usize).max(1)),
        Sampling::Grid(n) => (n.max(1), n.max(1)),
    };
    let inv = 1.0 / (gh * gw) as f64;
    let mut pixels = Vec::with_capacity(out_h * out_w * 3);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let mut acc = [0.0f64; 3];
            for iy in 0..gh {
                let y = y1 + oy as f64 * bin_h + (iy as f64 + 0.5) * bin_h / gh as f64;
                for ix in 0..gw {
                    let x = x1 + ox as f64 * bin_w + (ix as f64 + 0.5) * bin_w / gw as f64;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += bilinear(img, y, x, c);
                    }
                }
            }
            pixels.extend(acc.iter().map(|a| ((a * inv) as f32).clamp(0.0, 1.0)));
        }
    }
    Ok(Image { height: out_h, width: out_w, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = (x as f32 + 4.0 * y as f32) / (h * w) as f32;
                px.extend([v, 1.0 - v, 0.5]);
            }
        }
        Image::new(h, w, px).unwrap()
    }

    #[test]
    fn full_box_is_identity() {
        let img = ramp(4, 4);
        let full = RegionBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        let out = roi_align(&img, &full, 4, 4, Sampling::Adaptive).unwrap();
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(8, 8, [0.2, 0.4, 0.6]);
        let b = RegionBox::new(0.4, 0.55, 0.5, 0.3).unwrap();
        for s in [Sampling::Adaptive, Sampling::Grid(2)] {
            let out = roi_align(&img, &b, 5, 3, s).unwrap();
            for px in out.pixels().chunks(3) {
                assert!((px[0] - 0.2).abs() < 1e-6 && (px[1] - 0.4).abs() < 1e-6 && (px[2] - 0.6).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_boxes_rejected() {
        let img = Image::filled(8, 8, [0.0; 3]);
        let thin = RegionBox::new(0.5, 0.5, 0.2, 0.5).unwrap();
        assert!(matches!(roi_align(&img, &thin, 2, 2, Sampling::Adaptive), Err(EncoderError::Box(_))));
        assert!(RegionBox::new(0.5, 0.5, 0.0, 0.5).is_err());
        assert!(RegionBox::new(1.2, 0.5, 0.2, 0.5).is_err());
    }

    #[test]
    fn patch_order_is_row_major() {
        let img = ramp(4, 4);
        let p = img.patchify(2).unwrap();
        // second tile starts at pixel (0, 2)
        assert_eq!(&p[12..15], &img.pixels()[6..9]);
        assert!(img.patchify(3).is_err());
    }
}
