//! Frozen encoders and the on-disk embedding cache.
//!
//! Cache layout under the root: `{cell_id}/{slice_index}.{sam|mae}.emb`.
//! Offline-augmented copies sit next to their source as
//! `{slice_index}.aug{n}.{sam|mae}.emb`. `encoders.json` records the
//! fingerprint of the encoders that produced the files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scsam_core::codec::{decode_embedding, encode_embedding};
use scsam_core::encoder::{combine_fingerprints, hex, EncoderHandle, EncoderKind, EncoderPair, EncoderRole, PatchEncoder};
use scsam_core::engine::{EmbeddingSource, EngineConfig, PreparedSlice, SliceKey};
use scsam_core::grid::FeatureGrid;
use scsam_core::Error;

use crate::error::{read, read_string, write_atomic, CliError, Result};

pub const CACHE_ENV: &str = "SCSAM_CACHE";
pub const MANIFEST_NAME: &str = "encoders.json";

/// Builds the encoder a handle describes. Synthetic encoders come from
/// their seed; the others need a weights file (a JSON-serialised
/// [`PatchEncoder`]).
pub fn load_encoder(handle: &EncoderHandle) -> Result<PatchEncoder> {
    if handle.kind == EncoderKind::Synthetic && handle.weights.is_none() {
        return Ok(PatchEncoder::synthetic(handle.clone())?);
    }
    let path = handle.weights.as_ref().ok_or_else(|| {
        Error::Init(format!(
            "{:?} encoder needs a weights file (encoders.{}.weights)",
            handle.kind,
            handle.role.extension()
        ))
    })?;
    load_weights(Path::new(path), handle.role)
}

pub fn load_weights(path: &Path, role: EncoderRole) -> Result<PatchEncoder> {
    let enc: PatchEncoder = serde_json::from_str(&read_string(path)?)
        .map_err(|e| Error::Init(format!("{}: unreadable encoder weights: {e}", path.display())))?;
    let enc = enc.checked()?;
    if enc.handle().role != role {
        return Err(Error::Init(format!(
            "{}: weights are for the {} encoder, expected {}",
            path.display(),
            enc.handle().role.extension(),
            role.extension()
        ))
        .into());
    }
    Ok(enc)
}

pub fn save_weights(path: &Path, encoder: &PatchEncoder) -> Result<()> {
    write_atomic(path, serde_json::to_string(encoder).expect("encoder serialises").as_bytes())
}

pub fn load_pair(config: &EngineConfig) -> Result<EncoderPair> {
    Ok(EncoderPair {
        sam: load_encoder(&config.encoders.sam)?,
        mae: load_encoder(&config.encoders.mae)?,
    })
}

/// The cache root from the flag, else from `SCSAM_CACHE`. The choice is
/// logged.
pub fn cache_root(flag: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = flag {
        log::info!("embedding cache: {} (from --cache)", p.display());
        return Some(p.to_path_buf());
    }
    match std::env::var_os(CACHE_ENV) {
        Some(v) if !v.is_empty() => {
            let p = PathBuf::from(v);
            log::info!("embedding cache: {} (from {CACHE_ENV})", p.display());
            Some(p)
        }
        _ => {
            log::info!("embedding cache: none, encoding on the fly");
            None
        }
    }
}

pub fn store_embedding(grid: &FeatureGrid, path: &Path) -> Result<()> {
    write_atomic(path, &encode_embedding(grid))
}

pub fn load_embedding(path: &Path) -> Result<FeatureGrid> {
    decode_embedding(&read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())).into(),
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())).into(),
        other => other.into(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Hex fingerprints by role name.
    pub encoders: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    pub root: PathBuf,
}

impl EmbeddingCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, key: &SliceKey, role: EncoderRole) -> PathBuf {
        let stem = if key.variant == 0 {
            key.slice_index.to_string()
        } else {
            format!("{}.aug{}", key.slice_index, key.variant)
        };
        self.root.join(&key.cell_id).join(format!("{stem}.{}.emb", role.extension()))
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let p = self.root.join(MANIFEST_NAME);
        if !p.exists() {
            return Ok(Manifest::default());
        }
        serde_json::from_str(&read_string(&p)?).map_err(|e| Error::Format(format!("{}: {e}", p.display())).into())
    }

    fn record(&self, role: EncoderRole, fingerprint: [u8; 32]) -> Result<()> {
        let mut m = self.manifest()?;
        m.encoders.insert(role.extension().into(), hex(&fingerprint));
        write_atomic(
            &self.root.join(MANIFEST_NAME),
            serde_json::to_string_pretty(&m).expect("manifest serialises").as_bytes(),
        )
    }

    /// Encodes every slice with one encoder and writes the grids.
    pub fn precompute(&self, encoder: &PatchEncoder, items: &[PreparedSlice]) -> Result<usize> {
        let role = encoder.handle().role;
        for item in items {
            let grid = match role {
                EncoderRole::Sam => scsam_core::encoder::compute_sam_embedding(&item.canvas, encoder)?,
                EncoderRole::Mae => scsam_core::encoder::compute_mae_embedding(&item.canvas, encoder)?,
            };
            store_embedding(&grid, &self.path(&item.key, role))?;
        }
        self.record(role, encoder.fingerprint())?;
        Ok(items.len())
    }

    /// Fingerprint of the pair as [`EncoderPair::fingerprint`] computes it,
    /// if both roles are recorded.
    pub fn pair_fingerprint(&self) -> Result<Option<[u8; 32]>> {
        let m = self.manifest()?;
        let (Some(s), Some(a)) = (m.encoders.get("sam"), m.encoders.get("mae")) else {
            return Ok(None);
        };
        let (Some(s), Some(a)) = (unhex(s), unhex(a)) else {
            return Err(Error::Format(format!("{}: bad fingerprint", self.root.join(MANIFEST_NAME).display())).into());
        };
        Ok(Some(combine_fingerprints(&s, &a)))
    }

    /// Fails unless the cache was written by exactly these encoders.
    pub fn check_against(&self, encoders: &EncoderPair) -> Result<()> {
        let m = self.manifest()?;
        for (role, enc) in [("sam", &encoders.sam), ("mae", &encoders.mae)] {
            let want = hex(&enc.fingerprint());
            match m.encoders.get(role) {
                Some(got) if *got == want => {}
                Some(got) => {
                    return Err(Error::Validation(format!(
                        "cache {} holds {role} embeddings from encoder {got}, configured encoder is {want}",
                        self.root.display()
                    ))
                    .into())
                }
                None => {
                    return Err(Error::Validation(format!(
                        "cache {} has no {role} embeddings; run precompute first",
                        self.root.display()
                    ))
                    .into())
                }
            }
        }
        Ok(())
    }

    pub fn source(&self) -> Result<CacheSource> {
        Ok(CacheSource {
            cache: self.clone(),
            fingerprint: self.pair_fingerprint()?,
            error: None,
        })
    }
}

/// Reads cached grids lazily. File problems are kept with their exit-code
/// class and surfaced by [`CacheSource::take_error`].
pub struct CacheSource {
    cache: EmbeddingCache,
    fingerprint: Option<[u8; 32]>,
    error: Option<CliError>,
}

impl CacheSource {
    pub fn take_error(&mut self) -> Option<CliError> {
        self.error.take()
    }
}

impl EmbeddingSource for CacheSource {
    fn embeddings(&mut self, slice: &PreparedSlice) -> scsam_core::Result<(FeatureGrid, FeatureGrid)> {
        let load = |role| load_embedding(&self.cache.path(&slice.key, role));
        match load(EncoderRole::Sam).and_then(|s| Ok((s, load(EncoderRole::Mae)?))) {
            Ok(pair) => Ok(pair),
            Err(e) => {
                let msg = e.to_string();
                let core = match &e {
                    CliError::Core(c) => c.clone(),
                    _ => Error::Validation(format!("no cached embeddings for slice {}: {msg}", slice.key)),
                };
                self.error = Some(e);
                Err(core)
            }
        }
    }

    fn fingerprint(&self) -> Option<[u8; 32]> {
        self.fingerprint
    }
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use scsam_core::engine::{prepare, Dataset, OnTheFly};
    use scsam_core::synthetic::{synthetic_dataset, SyntheticConfig};

    fn setup() -> (EngineConfig, Vec<PreparedSlice>, EncoderPair) {
        let cfg = EngineConfig::smoke();
        let slices = synthetic_dataset(&SyntheticConfig { images: 2, ..Default::default() }).unwrap();
        let items = prepare(&cfg, &slices).unwrap();
        let pair = load_pair(&cfg).unwrap();
        (cfg, items, pair)
    }

    #[test]
    fn cached_dataset_equals_on_the_fly() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, items, pair) = setup();
        let cache = EmbeddingCache::new(dir.path());
        cache.precompute(&pair.sam, &items).unwrap();
        cache.precompute(&pair.mae, &items).unwrap();
        assert!(cache.path(&items[0].key, EncoderRole::Sam).ends_with("syn0/0.sam.emb"));
        cache.check_against(&pair).unwrap();
        let live = Dataset::gather(&cfg, items.clone(), &mut OnTheFly { encoders: pair.clone() }).unwrap();
        let cached = Dataset::gather(&cfg, items, &mut cache.source().unwrap()).unwrap();
        assert_eq!(live.embeddings, cached.embeddings);
        assert_eq!(live.fingerprint, cached.fingerprint);
    }

    #[test]
    fn stale_or_missing_cache_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, items, pair) = setup();
        let cache = EmbeddingCache::new(dir.path());
        assert_eq!(cache.check_against(&pair).unwrap_err().exit_code(), 3);
        cache.precompute(&pair.sam, &items).unwrap();
        let mut other = cfg.clone();
        other.encoders.mae.seed = Some(1);
        cache.precompute(&load_pair(&other).unwrap().mae, &items).unwrap();
        assert_eq!(cache.check_against(&pair).unwrap_err().exit_code(), 3);
        let mut src = cache.source().unwrap();
        std::fs::remove_file(cache.path(&items[1].key, EncoderRole::Mae)).unwrap();
        assert!(Dataset::gather(&cfg, items, &mut src).is_err());
        assert_eq!(src.take_error().unwrap().exit_code(), 4);
    }

    #[test]
    fn truncated_file_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let (_, items, pair) = setup();
        let cache = EmbeddingCache::new(dir.path());
        cache.precompute(&pair.sam, &items[..1]).unwrap();
        let p = cache.path(&items[0].key, EncoderRole::Sam);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_embedding(&p).unwrap_err();
        assert!(matches!(err, CliError::Core(Error::Corrupt(_)) | CliError::Core(Error::Format(_))), "{err}");
    }

    #[test]
    fn weights_files_round_trip_and_missing_weights_fail() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, _, pair) = setup();
        let p = dir.path().join("sam.json");
        save_weights(&p, &pair.sam).unwrap();
        assert_eq!(load_weights(&p, EncoderRole::Sam).unwrap(), pair.sam);
        assert!(load_weights(&p, EncoderRole::Mae).is_err());
        let mut vit = cfg.encoders.sam.clone();
        vit.kind = EncoderKind::SamVit;
        let err = load_encoder(&vit).unwrap_err();
        assert!(matches!(err, CliError::Core(Error::Init(_))), "{err}");
    }
}
