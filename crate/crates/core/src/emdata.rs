//! EM slice handling that does not touch the filesystem: centred slice
//! selection, intensity normalisation, geometric augmentation and the
//! resize/pad helpers shared with the encoders.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{Image, Mask, Plane};

pub const DEFAULT_CLASSES: [&str; 3] = ["nucleus", "mitochondria", "granules"];
pub const DEFAULT_SLICES_PER_CELL: usize = 350;

/// One 2D EM slice plus its per-class binary masks.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSlice {
    pub image: Image,
    pub masks: BTreeMap<String, Mask>,
    pub cell_id: String,
    pub slice_index: usize,
}

impl LabeledSlice {
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.image.data().iter().position(|v| !v.is_finite()) {
            return Err(invalid!(
                "slice {}/{}: non-finite intensity at index {i}",
                self.cell_id,
                self.slice_index
            ));
        }
        for (class, mask) in &self.masks {
            if mask.shape() != self.image.shape() {
                return Err(invalid!(
                    "slice {}/{}: mask '{class}' is {:?}, image is {:?}",
                    self.cell_id,
                    self.slice_index,
                    mask.shape(),
                    self.image.shape()
                ));
            }
            if !mask.is_binary() {
                return Err(invalid!(
                    "slice {}/{}: mask '{class}' has values outside {{0,1}}",
                    self.cell_id,
                    self.slice_index
                ));
            }
        }
        Ok(())
    }
}

/// Centred window of `min(slices_per_cell, depth)` slice indices.
///
/// Returns the index range and whether the request had to be clamped.
pub fn slice_window(depth: usize, slices_per_cell: usize) -> (Range<usize>, bool) {
    let len = slices_per_cell.min(depth);
    let start = (depth - len) / 2;
    (start..start + len, slices_per_cell > depth)
}

/// Dataset-level standardisation applied after per-slice min-max scaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f32,
    pub std: f32,
}

impl Default for NormalizationStats {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

/// Per-slice min-max to `[0, 1]`, then `(v - mean) / std`.
///
/// A constant image maps to all zeros.
pub fn normalize(slice: &LabeledSlice, stats: NormalizationStats) -> Result<LabeledSlice> {
    if !(stats.std > 0.0) || !stats.mean.is_finite() {
        return Err(invalid!(
            "normalisation std must be positive and mean finite, got {:?}",
            stats
        ));
    }
    slice.validate()?;
    let (lo, hi) = slice
        .image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let image = if !(hi > lo) {
        slice.image.map(|_| 0.0)
    } else {
        let range = hi - lo;
        slice
            .image
            .map(|v| ((v - lo) / range - stats.mean) / stats.std)
    };
    Ok(LabeledSlice {
        image,
        ..slice.clone()
    })
}

/// Crop-and-resize augmentation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_min: f64,
    pub crop_max: f64,
    /// Square output side; `None` keeps the input shape.
    pub output_side: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_min: 0.6,
            crop_max: 1.0,
            output_side: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl AugmentConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0 < self.crop_min && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return Err(invalid!(
                "crop fraction range must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.crop_min,
                self.crop_max
            ));
        }
        Ok(())
    }

    /// Draws the crop window for an image of the given shape.
    pub fn sample_window(&self, height: usize, width: usize, seed: u64) -> Result<CropWindow> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = |n: usize, rng: &mut ChaCha8Rng| {
            let f = if self.crop_max > self.crop_min {
                rng.random_range(self.crop_min..=self.crop_max)
            } else {
                self.crop_min
            };
            let len = libm::round(f * n as f64) as usize;
            let len = len.clamp(1, n.max(1));
            let off = rng.random_range(0..=n - len);
            (off, len)
        };
        let (top, h) = side(height, &mut rng);
        let (left, w) = side(width, &mut rng);
        Ok(CropWindow {
            top,
            left,
            height: h,
            width: w,
        })
    }
}

/// Random crop followed by a resize, identical for the image and every mask.
pub fn augment(slice: &LabeledSlice, config: &AugmentConfig, seed: u64) -> Result<LabeledSlice> {
    slice.validate()?;
    let (h, w) = slice.image.shape();
    let window = config.sample_window(h, w, seed)?;
    let (oh, ow) = config.output_side.map_or((h, w), |s| (s, s));
    crop_resize(slice, window, oh, ow)
}

/// Applies one crop window and resize to the image and all masks. Masks are
/// resized bilinearly and re-binarised at 0.5.
pub fn crop_resize(
    slice: &LabeledSlice,
    window: CropWindow,
    out_height: usize,
    out_width: usize,
) -> Result<LabeledSlice> {
    if window.height < 2 || window.width < 2 {
        return Err(invalid!(
            "crop window {}x{} is smaller than 2x2",
            window.height,
            window.width
        ));
    }
    let (h, w) = slice.image.shape();
    if window.top + window.height > h || window.left + window.width > w {
        return Err(invalid!("crop window {:?} exceeds image {}x{}", window, h, w));
    }
    let image = resize_bilinear(&crop(&slice.image, window), out_height, out_width);
    let masks = slice
        .masks
        .iter()
        .map(|(k, m)| {
            let soft = crop(m, window).map(|v| v as f32);
            (k.clone(), binarize(&resize_bilinear(&soft, out_height, out_width)))
        })
        .collect();
    Ok(LabeledSlice {
        image,
        masks,
        cell_id: slice.cell_id.clone(),
        slice_index: slice.slice_index,
    })
}

pub fn crop<T: Copy + Default>(plane: &Plane<T>, window: CropWindow) -> Plane<T> {
    Plane::from_fn(window.height, window.width, |y, x| {
        plane.get(window.top + y, window.left + x)
    })
}

pub fn binarize(plane: &Image) -> Mask {
    plane.map(|v| u8::from(v >= 0.5))
}

/// Half-pixel-centre bilinear resize with edge clamping. Same-size resizes
/// are the identity.
pub fn resize_bilinear(src: &Image, out_height: usize, out_width: usize) -> Image {
    let (h, w) = src.shape();
    if (h, w) == (out_height, out_width) {
        return src.clone();
    }
    let sy = h as f64 / out_height as f64;
    let sx = w as f64 / out_width as f64;
    let axis = |dst: usize, scale: f64, n: usize| {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (libm::floor(pos) as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - i0 as f64)
    };
    let cols: Vec<_> = (0..out_width).map(|x| axis(x, sx, w)).collect();
    Plane::from_fn(out_height, out_width, |y, x| {
        let (y0, y1, fy) = axis(y, sy, h);
        let (x0, x1, fx) = cols[x];
        let top = src.get(y0, x0) as f64 * (1.0 - fx) + src.get(y0, x1) as f64 * fx;
        let bot = src.get(y1, x0) as f64 * (1.0 - fx) + src.get(y1, x1) as f64 * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}

/// Nearest-neighbour resize (pixel centres).
pub fn resize_nearest<T: Copy + Default>(src: &Plane<T>, out_height: usize, out_width: usize) -> Plane<T> {
    let (h, w) = src.shape();
    Plane::from_fn(out_height, out_width, |y, x| {
        let sy = ((y * h * 2 + h) / (2 * out_height)).min(h - 1);
        let sx = ((x * w * 2 + w) / (2 * out_width)).min(w - 1);
        src.get(sy, sx)
    })
}

/// Geometry of an image placed in a square encoder canvas: the longest side
/// is scaled to `side` and the rest zero-padded at the bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub side: usize,
    pub original: (usize, usize),
    pub scaled: (usize, usize),
}

impl Letterbox {
    pub fn new(original: (usize, usize), side: usize) -> Self {
        let (h, w) = original;
        let longest = h.max(w).max(1);
        let scale = |n: usize| ((n * side + longest / 2) / longest).clamp(1, side);
        Self {
            side,
            original,
            scaled: (scale(h), scale(w)),
        }
    }

    pub fn apply(&self, image: &Image) -> Image {
        let resized = resize_bilinear(image, self.scaled.0, self.scaled.1);
        Plane::from_fn(self.side, self.side, |y, x| {
            if y < self.scaled.0 && x < self.scaled.1 {
                resized.get(y, x)
            } else {
                0.0
            }
        })
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let soft = resize_bilinear(&mask.map(|v| v as f32), self.scaled.0, self.scaled.1);
        Plane::from_fn(self.side, self.side, |y, x| {
            if y < self.scaled.0 && x < self.scaled.1 {
                u8::from(soft.get(y, x) >= 0.5)
            } else {
                0
            }
        })
    }

    /// Maps a square grid covering the canvas back to the original image
    /// with nearest-neighbour lookup.
    pub fn restore<T: Copy + Default>(&self, canvas_grid: &Plane<T>) -> Plane<T> {
        let (gh, gw) = canvas_grid.shape();
        let (oh, ow) = self.original;
        Plane::from_fn(oh, ow, |y, x| {
            // centre of original pixel -> canvas coordinate -> grid cell
            let cy = (y as f64 + 0.5) * self.scaled.0 as f64 / oh as f64;
            let cx = (x as f64 + 0.5) * self.scaled.1 as f64 / ow as f64;
            let gy = ((cy * gh as f64 / self.side as f64) as usize).min(gh - 1);
            let gx = ((cx * gw as f64 / self.side as f64) as usize).min(gw - 1);
            canvas_grid.get(gy, gx)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn slice_with(image: Image, masks: &[(&str, Mask)]) -> LabeledSlice {
        LabeledSlice {
            image,
            masks: masks
                .iter()
                .map(|(k, m)| (k.to_string(), m.clone()))
                .collect(),
            cell_id: "cell".into(),
            slice_index: 0,
        }
    }

    #[test]
    fn centred_window_arithmetic() {
        assert_eq!(slice_window(1000, 350), (325..675, false));
        assert_eq!(slice_window(350, 350), (0..350, false));
        assert_eq!(slice_window(100, 350), (0..100, true));
    }

    #[test]
    fn window_reversal_symmetry_for_even_margin() {
        for (depth, n) in [(1000, 350), (12, 4), (9, 9), (20, 2)] {
            let (w, _) = slice_window(depth, n);
            let reversed: Vec<usize> = w.clone().rev().map(|i| depth - 1 - i).collect();
            let direct: Vec<usize> = w.collect();
            let mut sorted = reversed.clone();
            sorted.sort();
            assert_eq!(sorted, direct, "depth {depth} n {n}");
        }
    }

    #[test]
    fn normalize_midpoint_and_constant() {
        let img = Plane::from_vec(1, 3, vec![10.0, 15.0, 20.0]).unwrap();
        let out = normalize(&slice_with(img, &[]), NormalizationStats::default()).unwrap();
        assert_eq!(out.image.data(), &[0.0, 0.5, 1.0]);

        let flat = Plane::from_vec(2, 2, vec![7.0; 4]).unwrap();
        let stats = NormalizationStats { mean: 0.5, std: 0.25 };
        let out = normalize(&slice_with(flat, &[]), stats).unwrap();
        assert!(out.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_two_stage_hand_values() {
        let img = Plane::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let stats = NormalizationStats { mean: 0.5, std: 0.25 };
        let out = normalize(&slice_with(img, &[]), stats).unwrap();
        let expect = [
            (0.0 - 0.5) / 0.25,
            (1.0 / 3.0 - 0.5) / 0.25,
            (2.0 / 3.0 - 0.5) / 0.25,
            (1.0 - 0.5) / 0.25,
        ];
        for (a, b) in out.image.data().iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_absorbs_affine_prestandardisation() {
        // min-max erases any positive affine map, so a second pass is a no-op
        let img = Plane::from_vec(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let stats = NormalizationStats { mean: 0.5, std: 0.25 };
        let once = normalize(&slice_with(img, &[]), stats).unwrap();
        let twice = normalize(&once, stats).unwrap();
        for (a, b) in once.image.data().iter().zip(twice.image.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn full_crop_is_identity() {
        let img = Plane::from_fn(8, 8, |y, x| (y * 8 + x) as f32);
        let m = Plane::from_fn(8, 8, |y, _| u8::from(y < 3));
        let s = slice_with(img, &[("nucleus", m)]);
        let cfg = AugmentConfig {
            crop_min: 1.0,
            crop_max: 1.0,
            output_side: None,
        };
        let out = augment(&s, &cfg, 5).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn augment_is_deterministic() {
        let img = Plane::from_fn(32, 32, |y, x| ((y * 7 + x * 3) % 11) as f32);
        let m = Plane::from_fn(32, 32, |y, x| u8::from(y > 10 && x < 20));
        let s = slice_with(img, &[("mitochondria", m)]);
        let cfg = AugmentConfig {
            output_side: Some(24),
            ..AugmentConfig::default()
        };
        assert_eq!(augment(&s, &cfg, 9).unwrap(), augment(&s, &cfg, 9).unwrap());
    }

    #[test]
    fn cropped_square_pixel_count() {
        // 10x10 square at (5..15, 5..15); crop window keeps a 5x5 corner of it.
        let m = Plane::from_fn(20, 20, |y, x| u8::from((5..15).contains(&y) && (5..15).contains(&x)));
        let s = slice_with(Plane::new(20, 20), &[("granules", m.clone())]);
        let win = CropWindow {
            top: 10,
            left: 10,
            height: 10,
            width: 10,
        };
        let out = crop_resize(&s, win, 10, 10).unwrap();
        let mut direct = 0;
        for y in 10..20 {
            for x in 10..20 {
                direct += m.get(y, x) as usize;
            }
        }
        assert_eq!(direct, 25);
        assert_eq!(out.masks["granules"].area(), direct);

        // upscaled 2x: bilinear then threshold, counted independently
        let out = crop_resize(&s, win, 20, 20).unwrap();
        let mut expected = 0;
        for y in 0..20 {
            for x in 0..20 {
                let src = |d: usize| (((d as f64 + 0.5) * 0.5 - 0.5).max(0.0), 10usize);
                let (py, _) = src(y);
                let (px, _) = src(x);
                let sample = |yy: usize, xx: usize| {
                    let yy = yy.min(9);
                    let xx = xx.min(9);
                    f64::from(u8::from(yy < 5 && xx < 5))
                };
                let (y0, x0) = (py.floor() as usize, px.floor() as usize);
                let (fy, fx) = (py - y0 as f64, px - x0 as f64);
                let v = sample(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + sample(y0, x0 + 1) * (1.0 - fy) * fx
                    + sample(y0 + 1, x0) * fy * (1.0 - fx)
                    + sample(y0 + 1, x0 + 1) * fy * fx;
                expected += usize::from(v >= 0.5);
            }
        }
        assert_eq!(out.masks["granules"].area(), expected);
    }

    #[test]
    fn image_and_mask_share_the_geometric_map() {
        let m = Plane::from_fn(30, 26, |y, x| u8::from((y * x) % 7 < 3));
        let s = slice_with(m.map(|v| v as f32), &[("nucleus", m)]);
        let cfg = AugmentConfig {
            output_side: Some(17),
            ..AugmentConfig::default()
        };
        for seed in 0..10 {
            let out = augment(&s, &cfg, seed).unwrap();
            assert_eq!(binarize(&out.image), out.masks["nucleus"]);
        }
    }

    #[test]
    fn tiny_crop_is_rejected() {
        let s = slice_with(Plane::new(4, 4), &[]);
        let win = CropWindow {
            top: 0,
            left: 0,
            height: 1,
            width: 3,
        };
        assert!(crop_resize(&s, win, 4, 4).is_err());
    }

    #[test]
    fn mask_shape_mismatch_is_invalid() {
        let s = slice_with(Plane::new(4, 4), &[("nucleus", Plane::new(3, 4))]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn letterbox_pads_bottom_right_and_restores() {
        let lb = Letterbox::new((4, 8), 16);
        assert_eq!(lb.scaled, (8, 16));
        let img = Plane::from_fn(4, 8, |_, _| 1.0);
        let canvas = lb.apply(&img);
        assert_eq!(canvas.get(7, 15), 1.0);
        assert_eq!(canvas.get(8, 0), 0.0);
        let grid = Plane::from_fn(16, 16, |y, x| (y * 16 + x) as u32);
        let back = lb.restore(&grid);
        assert_eq!(back.shape(), (4, 8));
        // original pixel centres land at canvas (1, 1) and (7, 15)
        assert_eq!(back.get(0, 0), 17);
        assert_eq!(back.get(3, 7), 7 * 16 + 15);
    }
}
