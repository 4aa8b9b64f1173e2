use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::EngineConfig;
use crate::emdata::{augment, normalize, resize_nearest, LabeledSlice, Letterbox};
use crate::encoder::EncoderPair;
use crate::error::{invalid, Result};
use crate::grid::{FeatureGrid, Image, Mask};
use crate::tensor::Tensor;

/// Identifies a training item. `variant` 0 is the original slice; higher
/// values are offline-augmented copies.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceKey {
    pub cell_id: String,
    pub slice_index: usize,
    pub variant: usize,
}

impl core::fmt::Display for SliceKey {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        if self.variant == 0 {
            write!(f, "{}/{}", self.cell_id, self.slice_index)
        } else {
            write!(f, "{}/{}.aug{}", self.cell_id, self.slice_index, self.variant)
        }
    }
}

/// A slice ready for the model: the normalised encoder canvas, the
/// letterbox geometry, per-class targets at logit resolution and the
/// original masks for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSlice {
    pub key: SliceKey,
    pub canvas: Image,
    pub letterbox: Letterbox,
    /// Class index to a `(side*side) x 1` column of 0/1 targets.
    pub targets: BTreeMap<usize, Tensor>,
    /// Original-resolution masks by class name.
    pub masks: BTreeMap<String, Mask>,
}

/// Normalises and letterboxes each slice. With augmentation configured,
/// every slice is followed by one cropped-and-resized copy (drawn once,
/// before any embedding is computed).
pub fn prepare(config: &EngineConfig, slices: &[LabeledSlice]) -> Result<Vec<PreparedSlice>> {
    let side = config.encoders.sam.input_side;
    let logit_side = config.logit_side();
    let mut out = Vec::with_capacity(slices.len());
    for (i, slice) in slices.iter().enumerate() {
        slice.validate()?;
        let mut variants = alloc::vec![slice.clone()];
        if let Some(aug) = &config.train.augment {
            let seed = config.train.seed ^ (i as u64).wrapping_mul(0xA24B_AED4_963E_E407);
            variants.push(augment(slice, aug, seed)?);
        }
        for (variant, s) in variants.into_iter().enumerate() {
            let s = normalize(&s, config.train.normalization)?;
            let letterbox = Letterbox::new(s.image.shape(), side);
            let mut targets = BTreeMap::new();
            for (name, mask) in &s.masks {
                let Ok(k) = config.class_index(name) else {
                    log::warn!("slice {}/{}: ignoring unconfigured class {name:?}", s.cell_id, s.slice_index);
                    continue;
                };
                let boxed = letterbox.apply_mask(mask);
                let small = resize_nearest(&boxed, logit_side, logit_side);
                let col = small.data().iter().map(|&v| f64::from(v)).collect();
                targets.insert(k, Tensor::from_vec(logit_side * logit_side, 1, col));
            }
            out.push(PreparedSlice {
                key: SliceKey {
                    cell_id: s.cell_id.clone(),
                    slice_index: s.slice_index,
                    variant,
                },
                canvas: letterbox.apply(&s.image),
                letterbox,
                targets,
                masks: s.masks,
            });
        }
    }
    Ok(out)
}

/// Supplies frozen-encoder embeddings for prepared slices.
pub trait EmbeddingSource {
    fn embeddings(&mut self, slice: &PreparedSlice) -> Result<(FeatureGrid, FeatureGrid)>;

    /// Fingerprint of the encoders behind this source, if known.
    fn fingerprint(&self) -> Option<[u8; 32]>;
}

/// Encodes each canvas when asked.
pub struct OnTheFly {
    pub encoders: EncoderPair,
}

impl EmbeddingSource for OnTheFly {
    fn embeddings(&mut self, slice: &PreparedSlice) -> Result<(FeatureGrid, FeatureGrid)> {
        self.encoders.embed(&slice.canvas)
    }

    fn fingerprint(&self) -> Option<[u8; 32]> {
        Some(self.encoders.fingerprint())
    }
}

/// Embeddings loaded ahead of time, keyed by slice.
#[derive(Clone, Debug, Default)]
pub struct Precomputed {
    pub grids: BTreeMap<SliceKey, (FeatureGrid, FeatureGrid)>,
    pub fingerprint: Option<[u8; 32]>,
}

impl EmbeddingSource for Precomputed {
    fn embeddings(&mut self, slice: &PreparedSlice) -> Result<(FeatureGrid, FeatureGrid)> {
        self.grids
            .get(&slice.key)
            .cloned()
            .ok_or_else(|| invalid!("no cached embeddings for slice {}", slice.key))
    }

    fn fingerprint(&self) -> Option<[u8; 32]> {
        self.fingerprint
    }
}

/// Any fallible loader closure, e.g. one reading cache files lazily.
pub struct FromFn<F> {
    pub load: F,
    pub fingerprint: Option<[u8; 32]>,
}

impl<F> EmbeddingSource for FromFn<F>
where
    F: FnMut(&PreparedSlice) -> Result<(FeatureGrid, FeatureGrid)>,
{
    fn embeddings(&mut self, slice: &PreparedSlice) -> Result<(FeatureGrid, FeatureGrid)> {
        (self.load)(slice)
    }

    fn fingerprint(&self) -> Option<[u8; 32]> {
        self.fingerprint
    }
}

impl<S: EmbeddingSource + ?Sized> EmbeddingSource for Box<S> {
    fn embeddings(&mut self, slice: &PreparedSlice) -> Result<(FeatureGrid, FeatureGrid)> {
        (**self).embeddings(slice)
    }

    fn fingerprint(&self) -> Option<[u8; 32]> {
        (**self).fingerprint()
    }
}

/// Prepared slices paired with their embeddings, shape-checked against the
/// configured encoders.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<PreparedSlice>,
    pub embeddings: Vec<(FeatureGrid, FeatureGrid)>,
    pub fingerprint: Option<[u8; 32]>,
}

impl Dataset {
    pub fn gather(config: &EngineConfig, items: Vec<PreparedSlice>, source: &mut dyn EmbeddingSource) -> Result<Self> {
        let (sh, sw, _) = config.encoders.sam.output_shape();
        let want_sam = (sh, sw, config.encoders.sam.channels);
        let (mh, mw, _) = config.encoders.mae.output_shape();
        let want_mae = (mh, mw, config.encoders.mae.channels);
        let side = config.encoders.sam.input_side;
        let mut embeddings = Vec::with_capacity(items.len());
        for item in &items {
            if item.canvas.shape() != (side, side) {
                return Err(invalid!(
                    "slice {} canvas is {:?}, encoders expect {side}x{side}",
                    item.key,
                    item.canvas.shape()
                ));
            }
            let (s, m) = source.embeddings(item)?;
            if s.shape() != want_sam || m.shape() != want_mae {
                return Err(invalid!(
                    "slice {}: embeddings {:?}/{:?} do not match configured encoders {:?}/{:?}",
                    item.key,
                    s.shape(),
                    m.shape(),
                    want_sam,
                    want_mae
                ));
            }
            embeddings.push((s, m));
        }
        Ok(Self {
            items,
            embeddings,
            fingerprint: source.fingerprint(),
        })
    }

    /// Prepares raw slices and gathers their embeddings in one go.
    pub fn build(config: &EngineConfig, slices: &[LabeledSlice], source: &mut dyn EmbeddingSource) -> Result<Self> {
        Self::gather(config, prepare(config, slices)?, source)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn describe(&self) -> String {
        format!("{} slices", self.items.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PatchEncoder;
    use alloc::string::ToString;
    use crate::synthetic::{synthetic_dataset, SyntheticConfig};

    fn pair(cfg: &EngineConfig) -> EncoderPair {
        EncoderPair {
            sam: PatchEncoder::synthetic(cfg.encoders.sam.clone()).unwrap(),
            mae: PatchEncoder::synthetic(cfg.encoders.mae.clone()).unwrap(),
        }
    }

    #[test]
    fn prepared_targets_live_at_logit_resolution() {
        let cfg = EngineConfig::smoke();
        let slices = synthetic_dataset(&SyntheticConfig::default()).unwrap();
        let prepared = prepare(&cfg, &slices).unwrap();
        assert_eq!(prepared.len(), 8);
        let p = &prepared[0];
        assert_eq!(p.canvas.shape(), (64, 64));
        assert_eq!(p.targets.len(), 3);
        assert_eq!(p.targets[&0].rows(), 64 * 64);
        let area = p.targets[&0].data().iter().sum::<f64>() as usize;
        assert_eq!(area, slices[0].masks["nucleus"].area());
    }

    #[test]
    fn augmentation_adds_a_copy_per_slice() {
        let mut cfg = EngineConfig::smoke();
        cfg.train.augment = Some(Default::default());
        let slices = synthetic_dataset(&SyntheticConfig { images: 2, ..Default::default() }).unwrap();
        let prepared = prepare(&cfg, &slices).unwrap();
        assert_eq!(prepared.len(), 4);
        assert_eq!(prepared[1].key.variant, 1);
        assert_eq!(prepared[1].key.to_string(), "syn0/0.aug1");
    }

    #[test]
    fn precomputed_matches_on_the_fly_and_reports_misses() {
        let cfg = EngineConfig::smoke();
        let slices = synthetic_dataset(&SyntheticConfig { images: 2, ..Default::default() }).unwrap();
        let mut live = OnTheFly { encoders: pair(&cfg) };
        let a = Dataset::build(&cfg, &slices, &mut live).unwrap();
        let mut cached = Precomputed {
            grids: a.items.iter().map(|p| p.key.clone()).zip(a.embeddings.iter().cloned()).collect(),
            fingerprint: live.fingerprint(),
        };
        let b = Dataset::build(&cfg, &slices, &mut cached).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.fingerprint, b.fingerprint);
        let mut empty = Precomputed::default();
        assert!(Dataset::build(&cfg, &slices, &mut empty).is_err());
    }

    #[test]
    fn wrong_shaped_cache_is_a_validation_error() {
        let cfg = EngineConfig::smoke();
        let mut other = cfg.clone();
        other.encoders.mae.channels = 16;
        let slices = synthetic_dataset(&SyntheticConfig { images: 1, ..Default::default() }).unwrap();
        let mut wrong = OnTheFly { encoders: pair(&other) };
        let err = Dataset::build(&cfg, &slices, &mut wrong).unwrap_err();
        assert!(matches!(err, crate::Error::Validation(_)), "{err}");
    }
}
