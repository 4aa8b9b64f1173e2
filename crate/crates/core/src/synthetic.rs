//! Seeded toy EM slices with three organelle classes, for smoke runs.
//!
//! Each slice has a bright cytoplasm background, one mid-grey textured
//! nucleus, a few dark striped elongated mitochondria and several very dark
//! round granules. Later shapes are painted over earlier ones, so the class
//! masks never overlap.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::emdata::{LabeledSlice, DEFAULT_CLASSES};
use crate::error::{invalid, Result};
use crate::grid::{Image, Mask, Plane};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub side: usize,
    pub images: usize,
    pub seed: u64,
    pub noise: f64,
    /// Images per synthetic cell id.
    pub per_cell: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            side: 64,
            images: 8,
            seed: 7,
            noise: 0.03,
            per_cell: 4,
        }
    }
}

const BACKGROUND: f32 = 0.8;
const NUCLEUS: f32 = 0.5;
const MITO: f32 = 0.28;
const GRANULE: f32 = 0.06;

struct Canvas {
    image: Image,
    labels: Plane<u8>,
}

impl Canvas {
    fn paint(&mut self, label: u8, inside: impl Fn(f64, f64) -> bool, shade: impl Fn(f64, f64) -> f32) {
        let (h, w) = self.image.shape();
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                if inside(fy, fx) {
                    self.image.set(y, x, shade(fy, fx));
                    self.labels.set(y, x, label);
                }
            }
        }
    }
}

fn ellipse(cy: f64, cx: f64, a: f64, b: f64, angle: f64) -> impl Fn(f64, f64) -> bool {
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    move |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
    }
}

/// One slice; `index` selects the cell id and slice index.
pub fn synthetic_slice(cfg: &SyntheticConfig, index: usize) -> Result<LabeledSlice> {
    if cfg.side < 32 {
        return Err(invalid!("synthetic slices need side >= 32, got {}", cfg.side));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64));
    let side = cfg.side;
    let s = side as f64;
    let mut canvas = Canvas {
        image: Plane::from_fn(side, side, |_, _| BACKGROUND),
        labels: Plane::new(side, side),
    };

    let (ncy, ncx) = (rng.random_range(0.35 * s..0.65 * s), rng.random_range(0.35 * s..0.65 * s));
    let (na, nb) = (rng.random_range(0.17 * s..0.22 * s), rng.random_range(0.14 * s..0.18 * s));
    let nang = rng.random_range(0.0..core::f64::consts::PI);
    canvas.paint(1, ellipse(ncy, ncx, na, nb, nang), |y, x| {
        NUCLEUS + 0.04 * ((libm::floor(y / 2.0) + libm::floor(x / 2.0)) as i64 % 2) as f32
    });

    let mitos = rng.random_range(2..=3);
    for _ in 0..mitos {
        let (cy, cx) = (rng.random_range(0.12 * s..0.88 * s), rng.random_range(0.12 * s..0.88 * s));
        let (a, b) = (rng.random_range(0.1 * s..0.15 * s), rng.random_range(0.05 * s..0.065 * s));
        let ang = rng.random_range(0.0..core::f64::consts::PI);
        let (sn, cs) = (libm::sin(ang), libm::cos(ang));
        canvas.paint(2, ellipse(cy, cx, a, b, ang), move |y, x| {
            // cristae: stripes across the long axis
            let u = (x - cx) * cs + (y - cy) * sn;
            MITO + 0.06 * (libm::sin(u * 1.6) > 0.0) as u8 as f32
        });
    }

    let granules = rng.random_range(3..=5);
    for _ in 0..granules {
        let (cy, cx) = (rng.random_range(0.08 * s..0.92 * s), rng.random_range(0.08 * s..0.92 * s));
        let r = rng.random_range(0.045 * s..0.06 * s);
        canvas.paint(3, ellipse(cy, cx, r, r, 0.0), |_, _| GRANULE);
    }

    let normal = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| invalid!("bad noise level: {e}"))?;
    let image = Plane::from_vec(
        side,
        side,
        canvas
            .image
            .data()
            .iter()
            .map(|&v| (v as f64 + if cfg.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 }).clamp(0.0, 1.0) as f32)
            .collect(),
    )?;
    let mut masks = BTreeMap::new();
    for (k, name) in DEFAULT_CLASSES.iter().enumerate() {
        let m: Mask = canvas.labels.map(|l| u8::from(l as usize == k + 1));
        masks.insert(name.to_string(), m);
    }
    let per_cell = cfg.per_cell.max(1);
    Ok(LabeledSlice {
        image,
        masks,
        cell_id: format!("syn{}", index / per_cell),
        slice_index: index % per_cell,
    })
}

pub fn synthetic_dataset(cfg: &SyntheticConfig) -> Result<Vec<LabeledSlice>> {
    (0..cfg.images).map(|i| synthetic_slice(cfg, i)).collect()
}

pub fn synthetic_classes() -> Vec<String> {
    DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
}
