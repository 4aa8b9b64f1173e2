//! Plots: similarity heatmaps, mask overlays, embedding scatters and Dice
//! curves. Raster outputs are PNG, vector outputs SVG.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{DynamicImage, Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use scsam_core::emdata::{resize_bilinear, Letterbox};
use scsam_core::engine::{EpochRecord, Inference, Model};
use scsam_core::grid::{FeatureGrid, Image, Mask};

use crate::dataset::save;
use crate::error::{write_atomic, Result};

fn scaled_gray(image: &Image) -> Vec<f32> {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    image.data().iter().map(|&v| (v - lo) / range).collect()
}

fn blend(base: f32, color: [u8; 3], alpha: f32) -> Rgb<u8> {
    let g = base * 255.0;
    Rgb(color.map(|c| (g * (1.0 - alpha) + f32::from(c) * alpha).round().clamp(0.0, 255.0) as u8))
}

/// File-name-safe version of a class name.
pub fn file_tag(class: &str) -> String {
    class
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// One heatmap per class of the prototype similarity, resampled to the
/// original image and blended over it. Returns the written paths.
pub fn similarity_maps(
    model: &Model,
    inference: &Inference,
    image: &Image,
    letterbox: &Letterbox,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let base = scaled_gray(image);
    let mut written = Vec::new();
    for (k, class) in model.classes().iter().enumerate() {
        let plane = inference.similarity.class_plane(k);
        let smooth = resize_bilinear(&plane, letterbox.side, letterbox.side);
        let sim = letterbox.restore(&smooth);
        let img = RgbImage::from_fn(image.width() as u32, image.height() as u32, |x, y| {
            let i = y as usize * image.width() + x as usize;
            let t = ((sim.data()[i] + 1.0) / 2.0).clamp(0.0, 1.0);
            let c = colorous::VIRIDIS.eval_continuous(f64::from(t));
            blend(base[i], [c.r, c.g, c.b], 0.6)
        });
        let path = out_dir.join(format!("similarity_{}.png", file_tag(class)));
        save(&path, &DynamicImage::ImageRgb8(img))?;
        written.push(path);
    }
    Ok(written)
}

/// Class-coloured masks blended over the image.
pub fn overlay(image: &Image, masks: &[(String, Mask)], path: &Path) -> Result<()> {
    let base = scaled_gray(image);
    let img = RgbImage::from_fn(image.width() as u32, image.height() as u32, |x, y| {
        let i = y as usize * image.width() + x as usize;
        let hit = masks.iter().enumerate().rev().find(|(_, (_, m))| m.data()[i] != 0);
        match hit {
            Some((k, _)) => {
                let c = colorous::CATEGORY10[k % colorous::CATEGORY10.len()];
                blend(base[i], [c.r, c.g, c.b], 0.5)
            }
            None => blend(base[i], [0, 0, 0], 0.0),
        }
    });
    save(path, &DynamicImage::ImageRgb8(img))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projector {
    Tsne,
    Pca,
}

/// Every `stride`-th location vector of a grid, zero-padded to `dim`.
pub fn grid_points(grid: &FeatureGrid, max_points: usize, dim: usize) -> Vec<Vec<f64>> {
    let n = grid.height() * grid.width();
    let stride = n.div_ceil(max_points.max(1)).max(1);
    let c = grid.channels();
    (0..n)
        .step_by(stride)
        .map(|i| {
            let mut v: Vec<f64> = grid.data()[i * c..(i + 1) * c].iter().map(|&x| f64::from(x)).collect();
            v.resize(dim, 0.0);
            v
        })
        .collect()
}

/// 2D projection of the rows of `points`. t-SNE starts from a seeded
/// layout and runs on a single thread, so the output depends only on the
/// inputs and the seed.
pub fn project(points: &[Vec<f64>], projector: Projector, seed: u64) -> Vec<[f64; 2]> {
    match projector {
        Projector::Pca => pca(points),
        Projector::Tsne => tsne(points, seed),
    }
}

fn pca(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return vec![[0.0; 2]; n];
    }
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| {
        order
            .get(k)
            .map(|&c| eig.eigenvectors.column(c).into_owned())
            .unwrap_or_else(|| nalgebra::DVector::zeros(d))
    };
    let (a, b) = (&x * axis(0), &x * axis(1));
    (0..n).map(|i| [a[i], b[i]]).collect()
}

fn tsne(points: &[Vec<f64>], seed: u64) -> Vec<[f64; 2]> {
    let n = points.len();
    if n < 4 {
        return pca(points);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1e-2..1e-2)).collect();
    let perplexity = 30f64.min((n as f64 - 1.0) / 3.0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    let flat = pool.install(|| {
        let mut t: bhtsne::tSNE<f64, Vec<f64>> = bhtsne::tSNE::new(points);
        t.embedding_dim(2)
            .perplexity(perplexity)
            .epochs(750)
            .initial_embedding(init)
            .exact(|a, b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum());
        t.embedding()
    });
    flat.chunks(2).map(|p| [p[0], p[1]]).collect()
}

/// How far apart two 2D point clouds are relative to their size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub center_distance: f64,
    /// Mean over both clouds of the RMS distance to the cloud's centre.
    pub spread: f64,
    pub separated: bool,
}

pub fn separation(a: &[[f64; 2]], b: &[[f64; 2]]) -> Separation {
    fn centre(p: &[[f64; 2]]) -> [f64; 2] {
        let n = p.len().max(1) as f64;
        [p.iter().map(|q| q[0]).sum::<f64>() / n, p.iter().map(|q| q[1]).sum::<f64>() / n]
    }
    fn rms(p: &[[f64; 2]], c: [f64; 2]) -> f64 {
        let n = p.len().max(1) as f64;
        (p.iter().map(|q| (q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2)).sum::<f64>() / n).sqrt()
    }
    let (ca, cb) = (centre(a), centre(b));
    let center_distance = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
    let spread = (rms(a, ca) + rms(b, cb)) / 2.0;
    Separation {
        center_distance,
        spread,
        separated: center_distance > spread,
    }
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 56.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    fn x(&self, v: f64) -> f64 {
        PAD + (v - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn y(&self, v: f64) -> f64 {
        H - PAD - (v - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter of labelled point groups.
pub fn scatter_svg(title: &str, groups: &[(&str, &[[f64; 2]])], path: &Path) -> Result<()> {
    let all = groups.iter().flat_map(|(_, p)| p.iter());
    let frame = Frame::fit(all.clone().map(|p| p[0]), all.map(|p| p[1]));
    let mut s = svg_open(title);
    for (k, (label, pts)) in groups.iter().enumerate() {
        let c = colorous::CATEGORY10[k % 10];
        let fill = format!("#{:02x}{:02x}{:02x}", c.r, c.g, c.b);
        for p in pts.iter() {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{fill}" fill-opacity="0.7"/>"#,
                frame.x(p[0]),
                frame.y(p[1])
            );
        }
        let ly = PAD + 16.0 + 18.0 * k as f64;
        let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="5" fill="{fill}"/>"#, W - PAD - 90.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, W - PAD - 80.0, escape(label));
    }
    s.push_str("</svg>\n");
    write_atomic(path, s.as_bytes())
}

/// Per-epoch mean train Dice as a line with one marker per epoch.
pub fn dice_curve_svg(epochs: &[EpochRecord], path: &Path) -> Result<usize> {
    let xs = epochs.iter().map(|e| e.epoch as f64);
    let frame = Frame {
        y0: 0.0,
        y1: 1.0,
        ..Frame::fit(xs.clone(), std::iter::once(0.0))
    };
    let mut s = svg_open("mean train Dice per epoch");
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            PAD - 6.0,
            frame.y(v) + 4.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, W / 2.0, H - 16.0);
    if let (Some(first), Some(last)) = (epochs.first(), epochs.last()) {
        for e in [first, last] {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                frame.x(e.epoch as f64),
                H - PAD + 16.0,
                e.epoch
            );
        }
    }
    let pts: Vec<String> = epochs
        .iter()
        .map(|e| format!("{:.2},{:.2}", frame.x(e.epoch as f64), frame.y(e.train_dice)))
        .collect();
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, pts.join(" "));
    for p in &pts {
        let (x, y) = p.split_once(',').expect("formatted above");
        let _ = writeln!(s, r##"<circle class="epoch" cx="{x}" cy="{y}" r="3" fill="#1f77b4"/>"##);
    }
    s.push_str("</svg>\n");
    write_atomic(path, s.as_bytes())?;
    Ok(epochs.len())
}
