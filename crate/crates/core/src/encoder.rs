//! Frozen image encoders producing SAM-style and MAE-style embedding grids.
//!
//! Both roles share one architecture: every `patch x patch` block of the
//! (letterboxed) canvas is average-pooled down to `cells x cells` values,
//! projected to `channels` features, squashed with `tanh` and offset by a
//! fixed per-position bias field. Weights are either generated from a seed
//! (the synthetic stand-in) or loaded from an exported weight file.
//!
//! The MAE role encodes the canvas as four independent quadrants and
//! stitches the token grids back by position.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::grid::{FeatureGrid, Image, Plane, Source};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    SamVit,
    MaeVit,
    Synthetic,
}

/// Which embedding an encoder produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderRole {
    Sam,
    Mae,
}

impl EncoderRole {
    pub fn source(self) -> Source {
        match self {
            EncoderRole::Sam => Source::Sam,
            EncoderRole::Mae => Source::Mae,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            EncoderRole::Sam => "sam",
            EncoderRole::Mae => "mae",
        }
    }

    /// Quadrant tiling per side.
    pub fn tiles_per_side(self) -> usize {
        match self {
            EncoderRole::Sam => 1,
            EncoderRole::Mae => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderHandle {
    pub kind: EncoderKind,
    pub role: EncoderRole,
    pub input_side: usize,
    pub patch: usize,
    pub cells: usize,
    pub channels: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub weights: Option<String>,
    #[serde(default = "default_bias_scale")]
    pub bias_scale: f64,
}

fn default_bias_scale() -> f64 {
    0.1
}

impl EncoderHandle {
    /// 1024 input, patch 16, 256 channels.
    pub fn sam_default() -> Self {
        Self {
            kind: EncoderKind::SamVit,
            role: EncoderRole::Sam,
            input_side: 1024,
            patch: 16,
            cells: 4,
            channels: 256,
            seed: None,
            weights: None,
            bias_scale: default_bias_scale(),
        }
    }

    /// 1024 input split into four 512 tiles, patch 16, 512 channels.
    pub fn mae_default() -> Self {
        Self {
            kind: EncoderKind::MaeVit,
            role: EncoderRole::Mae,
            channels: 512,
            ..Self::sam_default()
        }
    }

    pub fn synthetic(role: EncoderRole, input_side: usize, patch: usize, cells: usize, channels: usize, seed: u64) -> Self {
        Self {
            kind: EncoderKind::Synthetic,
            role,
            input_side,
            patch,
            cells,
            channels,
            seed: Some(seed),
            weights: None,
            bias_scale: default_bias_scale(),
        }
    }

    pub fn tile_side(&self) -> usize {
        self.input_side / self.role.tiles_per_side()
    }

    pub fn tokens_per_tile(&self) -> usize {
        self.tile_side() / self.patch
    }

    /// `(H, W, C)` of the produced grid.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        let side = self.input_side / self.patch;
        (side, side, self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let tiles = self.role.tiles_per_side();
        if self.patch == 0 || self.cells == 0 || self.channels == 0 || self.input_side == 0 {
            return Err(invalid!("encoder dimensions must be positive: {:?}", self));
        }
        if self.input_side % (tiles * self.patch) != 0 {
            return Err(invalid!(
                "input side {} is not divisible into {} tile(s) of whole {}-pixel patches",
                self.input_side,
                tiles * tiles,
                self.patch
            ));
        }
        if self.patch % self.cells != 0 {
            return Err(invalid!(
                "patch {} is not divisible into {} cells",
                self.patch,
                self.cells
            ));
        }
        match (self.kind, self.role) {
            (EncoderKind::SamVit, EncoderRole::Mae) | (EncoderKind::MaeVit, EncoderRole::Sam) => {
                return Err(invalid!("encoder kind {:?} cannot serve role {:?}", self.kind, self.role))
            }
            (EncoderKind::Synthetic, _) if self.seed.is_none() => {
                return Err(invalid!("synthetic encoder requires a seed"))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Frozen patch-projection encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchEncoder {
    handle: EncoderHandle,
    /// `(cells*cells) x channels`, row-major.
    projection: Vec<f32>,
    /// `tokens_per_tile^2 x channels`, row-major by token position.
    bias_field: Vec<f32>,
}

impl PatchEncoder {
    /// Builds the seeded stand-in encoder.
    pub fn synthetic(handle: EncoderHandle) -> Result<Self> {
        handle.validate()?;
        let seed = handle
            .seed
            .ok_or_else(|| invalid!("synthetic encoder requires a seed"))?;
        if handle.kind != EncoderKind::Synthetic {
            return Err(invalid!("handle kind {:?} is not synthetic", handle.kind));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = handle.cells * handle.cells;
        let proj = Normal::new(0.0, 2.0 / libm::sqrt(k as f64)).map_err(|e| invalid!("{e}"))?;
        let projection = (0..k * handle.channels)
            .map(|_| proj.sample(&mut rng) as f32)
            .collect();
        let t = handle.tokens_per_tile();
        let bias = Normal::new(0.0, handle.bias_scale.max(0.0)).map_err(|e| invalid!("{e}"))?;
        let bias_field = (0..t * t * handle.channels)
            .map(|_| bias.sample(&mut rng) as f32)
            .collect();
        Ok(Self {
            handle,
            projection,
            bias_field,
        })
    }

    /// Builds an encoder from exported weights.
    pub fn from_weights(handle: EncoderHandle, projection: Vec<f32>, bias_field: Vec<f32>) -> Result<Self> {
        handle.validate()?;
        let k = handle.cells * handle.cells;
        let t = handle.tokens_per_tile();
        if projection.len() != k * handle.channels {
            return Err(Error::Init(format!(
                "projection has {} weights, expected {}",
                projection.len(),
                k * handle.channels
            )));
        }
        if bias_field.len() != t * t * handle.channels {
            return Err(Error::Init(format!(
                "bias field has {} values, expected {}",
                bias_field.len(),
                t * t * handle.channels
            )));
        }
        if projection.iter().chain(&bias_field).any(|v| !v.is_finite()) {
            return Err(Error::Init("encoder weights contain non-finite values".into()));
        }
        Ok(Self {
            handle,
            projection,
            bias_field,
        })
    }

    /// Re-validates deserialised weights.
    pub fn checked(self) -> Result<Self> {
        let Self {
            handle,
            projection,
            bias_field,
        } = self;
        Self::from_weights(handle, projection, bias_field)
    }

    pub fn handle(&self) -> &EncoderHandle {
        &self.handle
    }

    pub fn bias_field(&self) -> &[f32] {
        &self.bias_field
    }

    /// SHA-256 over the handle and every weight.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.handle).unwrap_or_default());
        for v in self.projection.iter().chain(&self.bias_field) {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    fn check_canvas(&self, image: &Image) -> Result<()> {
        let s = self.handle.input_side;
        if image.shape() != (s, s) {
            return Err(invalid!(
                "encoder expects a {s}x{s} padded canvas, got {}x{}",
                image.height(),
                image.width()
            ));
        }
        if image.data().iter().any(|v| !v.is_finite()) {
            return Err(invalid!("encoder input contains non-finite intensities"));
        }
        Ok(())
    }

    /// Encodes one `tile_side x tile_side` tile into a token grid.
    pub fn encode_tile(&self, tile: &Image) -> Result<FeatureGrid> {
        let side = self.handle.tile_side();
        if tile.shape() != (side, side) {
            return Err(invalid!(
                "tile must be {side}x{side}, got {}x{}",
                tile.height(),
                tile.width()
            ));
        }
        let EncoderHandle {
            patch,
            cells,
            channels,
            ..
        } = self.handle;
        let t = self.handle.tokens_per_tile();
        let cell = patch / cells;
        let inv = 1.0 / (cell * cell) as f32;
        let mut data = Vec::with_capacity(t * t * channels);
        let mut pooled = alloc::vec![0f32; cells * cells];
        for ty in 0..t {
            for tx in 0..t {
                for cy in 0..cells {
                    for cx in 0..cells {
                        let mut s = 0.0;
                        for y in 0..cell {
                            for x in 0..cell {
                                s += tile.get(ty * patch + cy * cell + y, tx * patch + cx * cell + x);
                            }
                        }
                        pooled[cy * cells + cx] = s * inv;
                    }
                }
                let bias = &self.bias_field[(ty * t + tx) * channels..(ty * t + tx + 1) * channels];
                for c in 0..channels {
                    let mut z = 0.0f32;
                    for (k, &p) in pooled.iter().enumerate() {
                        z += p * self.projection[k * channels + c];
                    }
                    data.push(libm::tanhf(z) + bias[c]);
                }
            }
        }
        FeatureGrid::new(t, t, channels, self.handle.role.source(), data)
    }

    /// Splits the canvas into tiles and encodes each independently.
    pub fn encode_tiles(&self, canvas: &Image) -> Result<Vec<(TilePos, FeatureGrid)>> {
        self.check_canvas(canvas)?;
        let n = self.handle.role.tiles_per_side();
        let side = self.handle.tile_side();
        let mut out = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                let tile = Plane::from_fn(side, side, |y, x| canvas.get(row * side + y, col * side + x));
                out.push((TilePos { row, col }, self.encode_tile(&tile)?));
            }
        }
        Ok(out)
    }

    pub fn encode(&self, canvas: &Image) -> Result<FeatureGrid> {
        let tiles = self.encode_tiles(canvas)?;
        stitch(&tiles, self.handle.role.tiles_per_side(), self.handle.role.source())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TilePos {
    pub row: usize,
    pub col: usize,
}

/// Places tile grids by their recorded position; input order is irrelevant.
pub fn stitch(tiles: &[(TilePos, FeatureGrid)], per_side: usize, source: Source) -> Result<FeatureGrid> {
    if tiles.len() != per_side * per_side {
        return Err(invalid!("expected {} tiles, got {}", per_side * per_side, tiles.len()));
    }
    let (th, tw, c) = tiles[0].1.shape();
    let mut out = FeatureGrid::zeros(th * per_side, tw * per_side, c, source);
    let mut seen = alloc::vec![false; per_side * per_side];
    for (pos, grid) in tiles {
        if grid.shape() != (th, tw, c) {
            return Err(invalid!("tile shapes differ: {:?} vs {:?}", grid.shape(), (th, tw, c)));
        }
        if pos.row >= per_side || pos.col >= per_side || seen[pos.row * per_side + pos.col] {
            return Err(invalid!("invalid or duplicate tile position {:?}", pos));
        }
        seen[pos.row * per_side + pos.col] = true;
        for y in 0..th {
            for x in 0..tw {
                out.vector_mut(pos.row * th + y, pos.col * tw + x)
                    .copy_from_slice(grid.vector(y, x));
            }
        }
    }
    Ok(out)
}

/// SAM-role embedding of a padded canvas.
pub fn compute_sam_embedding(canvas: &Image, encoder: &PatchEncoder) -> Result<FeatureGrid> {
    if encoder.handle.role != EncoderRole::Sam || encoder.handle.kind == EncoderKind::MaeVit {
        return Err(invalid!("encoder {:?}/{:?} cannot produce SAM embeddings", encoder.handle.kind, encoder.handle.role));
    }
    encoder.encode(canvas)
}

/// MAE-role embedding: four quadrants encoded independently and stitched.
pub fn compute_mae_embedding(canvas: &Image, encoder: &PatchEncoder) -> Result<FeatureGrid> {
    if encoder.handle.role != EncoderRole::Mae || encoder.handle.kind == EncoderKind::SamVit {
        return Err(invalid!("encoder {:?}/{:?} cannot produce MAE embeddings", encoder.handle.kind, encoder.handle.role));
    }
    encoder.encode(canvas)
}

/// The frozen SAM/MAE pair used by a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderPair {
    pub sam: PatchEncoder,
    pub mae: PatchEncoder,
}

impl EncoderPair {
    pub fn embed(&self, canvas: &Image) -> Result<(FeatureGrid, FeatureGrid)> {
        Ok((
            compute_sam_embedding(canvas, &self.sam)?,
            compute_mae_embedding(canvas, &self.mae)?,
        ))
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        combine_fingerprints(&self.sam.fingerprint(), &self.mae.fingerprint())
    }
}

/// Pair fingerprint from the two encoder fingerprints.
pub fn combine_fingerprints(sam: &[u8; 32], mae: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(sam);
    h.update(mae);
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    use core::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}
