//! Image, box and mask primitives shared by the detector, the attacks and the
//! metrics.
//!
//! Conventions used throughout the crate:
//!
//! * pixel `(y, x)` covers the continuous square `[x, x+1) × [y, y+1)`;
//! * boxes live in continuous pixel coordinates of the image they refer to,
//!   and box areas carry no `+1` term;
//! * rasterizing a box marks pixel `(y, x)` iff
//!   `x ∈ [floor(x1), ceil(x2))` and `y ∈ [floor(y1), ceil(y2))`;
//! * images stay real-valued while being optimized and are quantized to 8 bits
//!   only when written to disk.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// An `H × W × 3` array of real values stored row-major with interleaved
/// channels.
///
/// The same type holds images (values in `[0, 255]` after [`clamp_image`]),
/// perturbations and image-space gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height >= 1 && width >= 1, "image must be at least 1x1");
        Image {
            height,
            width,
            data: vec![value; height * width * Self::CHANNELS],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::InvalidInput(format!(
                "expected {} values for a {height}x{width}x3 image, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut img = Image::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..Self::CHANNELS {
                    img.data[(y * width + x) * Self::CHANNELS + c] = f(y, x, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * Self::CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * Self::CHANNELS + c] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * Self::CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.ensure_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Image {
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Image) -> Result<Image> {
        self.ensure_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Image {
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Euclidean norm over all pixels and channels.
    ///
    /// Squares are summed in ascending order, so the result is bit-identical
    /// for any permutation of the entries.
    pub fn l2_norm(&self) -> f64 {
        let mut sq: Vec<f64> = self.data.iter().map(|v| v * v).collect();
        sq.sort_unstable_by(f64::total_cmp);
        sq.iter().sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Quantizes to 8-bit RGB (round-half-away-from-zero after clamping).
    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (dst, src) in out.as_mut().iter_mut().zip(&self.data) {
            *dst = src.clamp(0.0, 255.0).round() as u8;
        }
        out
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let (w, h) = img.dimensions();
        Image {
            height: h as usize,
            width: w as usize,
            data: img.as_raw().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Image::from_rgb8(&img))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }
}

/// An axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// Builds a box from COCO-style `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    fn check(&self) -> Result<()> {
        if !self.is_valid() {
            return Err(Error::DegenerateBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            });
        }
        Ok(())
    }

    /// Clips to `[0, width] × [0, height]`.
    pub fn clip(&self, height: usize, width: usize) -> BBox {
        let (w, h) = (width as f64, height as f64);
        BBox::new(
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
            self.x2.clamp(0.0, w),
            self.y2.clamp(0.0, h),
        )
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        BBox::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    /// Half-open integer pixel ranges `(x0..x1, y0..y1)` covered by the
    /// rasterized box, limited to a `height × width` canvas.
    pub fn pixel_span(&self, height: usize, width: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let clamp = |v: f64, hi: usize| -> usize {
            if v.is_nan() || v <= 0.0 {
                0
            } else {
                (v as usize).min(hi)
            }
        };
        let x0 = clamp(self.x1.floor(), width);
        let x1 = clamp(self.x2.ceil(), width);
        let y0 = clamp(self.y1.floor(), height);
        let y1 = clamp(self.y2.ceil(), height);
        (x0..x1.max(x0), y0..y1.max(y0))
    }
}

/// Intersection over union with continuous areas.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(iou_unchecked(a, b))
}

/// [`iou`] without validity checks; degenerate inputs yield 0.
pub fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A spatial boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    pixel_count: usize,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
            pixel_count: 0,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![true; height * width],
            pixel_count: height * width,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        let pixel_count = bits.iter().filter(|&&b| b).count();
        BinaryMask {
            height,
            width,
            bits,
            pixel_count,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.pixel_count
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Number of mask pixels covered by the raster of `b`.
    pub fn overlap_pixels(&self, b: &BBox) -> usize {
        let (xs, ys) = b.pixel_span(self.height, self.width);
        ys.map(|y| xs.clone().filter(|&x| self.get(y, x)).count()).sum()
    }

    /// True iff the raster of `b` shares at least one pixel with the mask.
    pub fn intersects(&self, b: &BBox) -> bool {
        let (xs, ys) = b.pixel_span(self.height, self.width);
        ys.into_iter().any(|y| xs.clone().any(|x| self.get(y, x)))
    }

    /// Nearest-neighbour resampling to a new shape.
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        BinaryMask::from_fn(height, width, |y, x| {
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            self.get(src_y, src_x)
        })
    }

    /// Writes the mask as a 1-bit grayscale PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        use std::fs::File;
        use std::io::BufWriter;

        let file = File::create(path.as_ref())?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::One);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let row_bytes = self.width.div_ceil(8);
        let mut packed = vec![0u8; row_bytes * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        writer
            .write_image_data(&packed)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        Ok(())
    }
}

/// Union raster of `boxes` on a `height × width` canvas.
pub fn rasterize_mask(boxes: &[BBox], shape: (usize, usize)) -> BinaryMask {
    let (height, width) = shape;
    let mut mask = BinaryMask::empty(height, width);
    for b in boxes {
        let (xs, ys) = b.pixel_span(height, width);
        for y in ys {
            for x in xs.clone() {
                let bit = &mut mask.bits[y * width + x];
                if !*bit {
                    *bit = true;
                    mask.pixel_count += 1;
                }
            }
        }
    }
    mask
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    assert!(height >= 1 && width >= 1, "target shape must be at least 1x1");
    if img.shape() == (height, width) {
        return img.clone();
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let taps = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| taps(x, sx, img.width)).collect();
    let mut out = Image::zeros(height, width);
    for y in 0..height {
        let (y0, y1, fy) = taps(y, sy, img.height);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..Image::CHANNELS {
                let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
                let bot = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
                out.set(y, x, c, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Output shape of [`rescale_image`] for an input of `shape`.
pub fn rescaled_shape(shape: (usize, usize), short_side: usize) -> (usize, usize) {
    let (h, w) = shape;
    if h <= w {
        let nw = ((w as f64) * short_side as f64 / h as f64).round() as usize;
        (short_side, nw.max(1))
    } else {
        let nh = ((h as f64) * short_side as f64 / w as f64).round() as usize;
        (nh.max(1), short_side)
    }
}

/// Rescales so the shorter side equals `short_side`, preserving aspect ratio.
pub fn rescale_image(img: &Image, short_side: usize) -> Result<Image> {
    if short_side < 8 {
        return Err(Error::InvalidInput(format!(
            "short side must be at least 8, got {short_side}"
        )));
    }
    let (h, w) = rescaled_shape(img.shape(), short_side);
    Ok(resize_bilinear(img, h, w))
}

/// Resizes by a scale factor (used by the resize-robustness control).
pub fn resize_by_scale(img: &Image, scale: f64) -> Result<Image> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidInput(format!("scale must be positive, got {scale}")));
    }
    let h = ((img.height as f64 * scale).round() as usize).max(1);
    let w = ((img.width as f64 * scale).round() as usize).max(1);
    Ok(resize_bilinear(img, h, w))
}

/// A gradient at detector input resolution together with the step size and the
/// shape of the image it must be mapped back onto.
#[derive(Debug, Clone)]
pub struct GradientPlan {
    pub rescaled_gradient: Image,
    pub original_shape: (usize, usize),
    pub learning_rate: f64,
}

impl GradientPlan {
    pub fn new(rescaled_gradient: Image, original_shape: (usize, usize), learning_rate: f64) -> Result<Self> {
        if !rescaled_gradient.is_finite() {
            return Err(Error::InvalidInput("gradient contains NaN or infinity".into()));
        }
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        Ok(GradientPlan {
            rescaled_gradient,
            original_shape,
            learning_rate,
        })
    }

    /// `rescale(r · ∇', original_shape)` without any mask.
    pub fn unmasked(&self) -> Image {
        let (h, w) = self.original_shape;
        resize_bilinear(&self.rescaled_gradient.scale(self.learning_rate), h, w)
    }
}

/// `M ⊙ rescale(r · ∇', s)`: the scaled gradient mapped back to image
/// resolution and zeroed (all three channels) wherever the mask is false.
pub fn mask_gradient(plan: &GradientPlan, mask: &BinaryMask) -> Result<Image> {
    if mask.shape() != plan.original_shape {
        return Err(Error::ShapeMismatch {
            expected: plan.original_shape,
            found: mask.shape(),
        });
    }
    let mut out = plan.unmasked();
    for (px, &bit) in out.data.chunks_exact_mut(Image::CHANNELS).zip(&mask.bits) {
        if !bit {
            px.fill(0.0);
        }
    }
    Ok(out)
}

/// Elementwise `min(max(v, 0), 255)`.
pub fn clamp_image(img: &Image) -> Image {
    let mut out = img.clone();
    clamp_in_place(&mut out);
    out
}

pub fn clamp_in_place(img: &mut Image) {
    for v in &mut img.data {
        *v = v.clamp(0.0, 255.0);
    }
}

/// Seeded uniform permutation of spatial positions; the three channel values of
/// a pixel move together.
pub fn permute_perturbation(pert: &Image, seed: u64) -> Image {
    let n = pert.height * pert.width;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut out = Image::zeros(pert.height, pert.width);
    for (dst, &src) in order.iter().enumerate() {
        let s = src * Image::CHANNELS;
        let d = dst * Image::CHANNELS;
        out.data[d..d + Image::CHANNELS].copy_from_slice(&pert.data[s..s + Image::CHANNELS]);
    }
    out
}

/// Permutation of every scalar entry independently (channels not bound
/// together).
pub fn permute_entries(pert: &Image, seed: u64) -> Image {
    let mut data = pert.data.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.shuffle(&mut rng);
    Image {
        height: pert.height,
        width: pert.width,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        let third = iou(&a, &BBox::new(5.0, 0.0, 15.0, 10.0)).unwrap();
        assert!(approx(third, 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert!(matches!(
            iou(&a, &BBox::new(3.0, 3.0, 3.0, 8.0)),
            Err(Error::DegenerateBox { .. })
        ));
    }

    #[test]
    fn rescale_examples() {
        let img = Image::filled(100, 200, 42.0);
        let out = rescale_image(&img, 128).unwrap();
        assert_eq!(out.shape(), (128, 256));
        assert!(out.data().iter().all(|&v| approx(v, 42.0, 1e-12)));

        let img = Image::zeros(600, 800);
        assert_eq!(rescale_image(&img, 600).unwrap().shape(), (600, 800));
        assert!(rescale_image(&img, 7).is_err());
    }

    #[test]
    fn rescale_tall_image() {
        let img = Image::zeros(200, 100);
        assert_eq!(rescale_image(&img, 50).unwrap().shape(), (100, 50));
    }

    #[test]
    fn rasterize_examples() {
        let m = rasterize_mask(&[BBox::new(2.0, 2.0, 4.0, 4.0)], (6, 6));
        assert_eq!(m.pixel_count(), 4);
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(m.get(y, x), (2..4).contains(&y) && (2..4).contains(&x));
            }
        }
        let b = BBox::new(1.0, 1.0, 3.5, 2.2);
        assert_eq!(rasterize_mask(&[b, b], (6, 6)), rasterize_mask(&[b], (6, 6)));
        let m = rasterize_mask(
            &[BBox::new(0.0, 0.0, 3.0, 3.0), BBox::new(1.0, 1.0, 4.0, 4.0)],
            (6, 6),
        );
        assert_eq!(m.pixel_count(), 14);
        assert_eq!(rasterize_mask(&[], (6, 6)).pixel_count(), 0);
    }

    #[test]
    fn rasterize_rounds_outward() {
        let m = rasterize_mask(&[BBox::new(1.2, 0.5, 2.1, 1.5)], (4, 4));
        // x in [1, 3), y in [0, 2)
        assert_eq!(m.pixel_count(), 4);
        assert!(m.get(0, 1) && m.get(1, 2));
    }

    fn plan(g: Image, shape: (usize, usize), r: f64) -> GradientPlan {
        GradientPlan::new(g, shape, r).unwrap()
    }

    #[test]
    fn mask_gradient_examples() {
        let zero = plan(Image::zeros(8, 8), (16, 16), 3.0);
        let mask = rasterize_mask(&[BBox::new(2.0, 2.0, 9.0, 12.0)], (16, 16));
        assert!(mask_gradient(&zero, &mask).unwrap().data().iter().all(|&v| v == 0.0));

        let g = Image::from_fn(8, 8, |y, x, c| (y * 8 + x) as f64 + c as f64 * 0.5);
        let p = plan(g, (16, 16), 2.0);
        let full = mask_gradient(&p, &BinaryMask::full(16, 16)).unwrap();
        assert_eq!(full, p.unmasked());

        let left_off = BinaryMask::from_fn(16, 16, |_, x| x >= 8);
        let out = mask_gradient(&p, &left_off).unwrap();
        for y in 0..16 {
            for x in 0..8 {
                assert_eq!(out.pixel(y, x), [0.0; 3]);
            }
        }
        assert!(out.get(3, 12, 1) != 0.0);
    }

    #[test]
    fn mask_gradient_shape_mismatch() {
        let p = plan(Image::zeros(4, 4), (8, 8), 1.0);
        assert!(matches!(
            mask_gradient(&p, &BinaryMask::full(8, 9)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gradient_plan_rejects_non_finite() {
        let mut g = Image::zeros(2, 2);
        g.set(0, 0, 0, f64::NAN);
        assert!(GradientPlan::new(g, (2, 2), 1.0).is_err());
    }

    #[test]
    fn clamp_examples() {
        let img = Image::from_vec(1, 1, vec![300.0, -5.0, 127.3]).unwrap();
        assert_eq!(clamp_image(&img).data(), &[255.0, 0.0, 127.3]);
    }

    fn sorted_triplets(img: &Image) -> Vec<[u64; 3]> {
        let mut v: Vec<[u64; 3]> = img
            .data()
            .chunks_exact(3)
            .map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()])
            .collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn permute_zero_is_zero() {
        let z = Image::zeros(5, 7);
        assert_eq!(permute_perturbation(&z, 3), z);
    }

    /// Independent Fisher–Yates: walks i from the end, draws j uniformly in
    /// `[0, i]` (as a 32-bit draw) from the same seeded stream and swaps.
    fn fisher_yates_oracle(n: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i as u32) as usize;
            idx.swap(i, j);
        }
        idx
    }

    #[test]
    fn permute_matches_fisher_yates_oracle() {
        let pert = Image::from_fn(2, 2, |y, x, c| (100 * (y * 2 + x) + c) as f64);
        let out = permute_perturbation(&pert, 0);
        let order = fisher_yates_oracle(4, 0);
        for (dst, &src) in order.iter().enumerate() {
            let (sy, sx) = (src / 2, src % 2);
            let (dy, dx) = (dst / 2, dst % 2);
            assert_eq!(out.pixel(dy, dx), pert.pixel(sy, sx));
        }
    }

    #[test]
    fn permute_entries_preserves_values() {
        let pert = Image::from_fn(3, 4, |y, x, c| (y * 12 + x * 3 + c) as f64);
        let out = permute_entries(&pert, 9);
        let mut a = pert.data().to_vec();
        let mut b = out.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn resize_nearest_mask() {
        let m = BinaryMask::from_fn(4, 4, |_, x| x < 2);
        let big = m.resize_nearest(8, 8);
        assert_eq!(big.pixel_count(), 32);
        assert!(big.get(7, 3) && !big.get(7, 4));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 6, |y, x, c| ((y * 40 + x * 7 + c * 3) % 256) as f64);
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        assert_eq!(Image::load_png(&path).unwrap(), img);

        let mask = BinaryMask::from_fn(5, 11, |y, x| (x + y) % 3 == 0);
        mask.save_png(dir.path().join("m.png")).unwrap();
        let back = image::open(dir.path().join("m.png")).unwrap().to_luma8();
        for y in 0..5 {
            for x in 0..11 {
                assert_eq!(back.get_pixel(x as u32, y as u32).0[0] > 0, mask.get(y, x));
            }
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64)
            .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
    }

    fn arb_image(max: usize) -> impl Strategy<Value = Image> {
        (1..max, 1..max).prop_flat_map(|(h, w)| {
            proptest::collection::vec(-400.0..400.0f64, h * w * 3)
                .prop_map(move |d| Image::from_vec(h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_reflexive(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            let v = iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn masked_gradient_is_zero_outside(
            (h, w, g, bits) in (2usize..12, 2usize..12).prop_flat_map(|(h, w)| (
                Just(h), Just(w),
                proptest::collection::vec(-5.0..5.0f64, 36 * 3),
                proptest::collection::vec(any::<bool>(), h * w),
            )),
            r in 0.1..100.0f64,
        ) {
            let grad = Image::from_vec(6, 6, g).unwrap();
            let p = GradientPlan::new(grad, (h, w), r).unwrap();
            let mask = BinaryMask::from_fn(h, w, |y, x| bits[y * w + x]);
            let out = mask_gradient(&p, &mask).unwrap();
            for y in 0..h {
                for x in 0..w {
                    if !mask.get(y, x) {
                        prop_assert_eq!(out.pixel(y, x), [0.0; 3]);
                    }
                }
            }
        }

        #[test]
        fn clamp_idempotent(img in arb_image(8)) {
            let once = clamp_image(&img);
            prop_assert_eq!(clamp_image(&once), once.clone());
            prop_assert!(once.data().iter().all(|v| (0.0..=255.0).contains(v)));
        }

        #[test]
        fn rescale_at_current_short_side_keeps_shape(h in 8usize..40, w in 8usize..40) {
            let img = Image::zeros(h, w);
            prop_assert_eq!(rescale_image(&img, h.min(w)).unwrap().shape(), (h, w));
        }

        #[test]
        fn permutation_preserves_multiset_and_norm(img in arb_image(7), seed in any::<u64>()) {
            let out = permute_perturbation(&img, seed);
            prop_assert_eq!(sorted_triplets(&out), sorted_triplets(&img));
            prop_assert_eq!(out.l2_norm().to_bits(), img.l2_norm().to_bits());
        }
    }
}
