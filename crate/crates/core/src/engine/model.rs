use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::{EngineConfig, FusionMode};
use crate::class_prompt::{ClassActivations, ClassPromptParams, SimilarityMap};
use crate::emdata::Letterbox;
use crate::error::{invalid, Error, Result};
use crate::fafm::{AlignmentBranch, AlignmentParams, FusionParams};
use crate::grid::{FeatureGrid, Mask, Plane, Source};
use crate::maskhead::{logits_plane, logits_to_mask, Attention, DecodeMode, DecoderParams, UPSAMPLE};
use crate::nn::{group_of, Graph, Init, LayerNorm, Linear, ParamStore};
use crate::tape::Var;

/// Symmetric cross-attention baseline: SAM queries MAE, MAE queries SAM,
/// each with a residual and LayerNorm, then a per-location projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionFusion {
    pub sam_queries: Attention,
    pub mae_queries: Attention,
    pub sam_norm: LayerNorm,
    pub mae_norm: LayerNorm,
    pub proj: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Fusion {
    Fafm(FusionParams),
    /// Channel concatenation followed by a 1x1 projection to `N`.
    Concat { proj: Linear },
    CrossAttention(CrossAttentionFusion),
}

impl Fusion {
    fn new(store: &mut ParamStore, init: &mut Init, cfg: &EngineConfig) -> Self {
        let n = cfg.model.width;
        match cfg.train.ablation.fusion {
            FusionMode::Fafm => Fusion::Fafm(FusionParams::new(store, init, "fusion", &cfg.fafm())),
            FusionMode::Concat => Fusion::Concat {
                proj: Linear::new(store, init, "fusion.proj", 2 * n, n, true),
            },
            FusionMode::CrossAttention => Fusion::CrossAttention(CrossAttentionFusion {
                sam_queries: Attention::new(store, init, "fusion.sam_queries", n),
                mae_queries: Attention::new(store, init, "fusion.mae_queries", n),
                sam_norm: LayerNorm::new(store, "fusion.sam_norm", n),
                mae_norm: LayerNorm::new(store, "fusion.mae_norm", n),
                proj: Linear::new(store, init, "fusion.proj", 2 * n, n, true),
            }),
        }
    }

    /// Fused `(H*W) x N` grid from the two aligned grids.
    pub fn forward(&self, g: &mut Graph<'_>, e_sam: Var, e_mae: Var, height: usize, width: usize) -> Var {
        match self {
            Fusion::Fafm(p) => p.forward(g, e_sam, e_mae, height, width),
            Fusion::Concat { proj } => {
                let x = g.tape.concat_cols(&[e_sam, e_mae]);
                proj.forward(g, x)
            }
            Fusion::CrossAttention(p) => {
                let a = p.sam_queries.forward(g, e_sam, e_mae);
                let s = g.tape.add(e_sam, a);
                let s = p.sam_norm.forward(g, s);
                let a = p.mae_queries.forward(g, e_mae, e_sam);
                let m = g.tape.add(e_mae, a);
                let m = p.mae_norm.forward(g, m);
                let x = g.tape.concat_cols(&[s, m]);
                p.proj.forward(g, x)
            }
        }
    }
}

/// Every trainable piece plus the parameter values they index into.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: EngineConfig,
    pub store: ParamStore,
    pub align: AlignmentParams,
    pub fusion: Fusion,
    pub prompt: ClassPromptParams,
    pub decoder: DecoderParams,
}

/// Differentiable intermediates of one image.
pub struct ImageForward {
    pub e_sam: Var,
    pub e_mae: Var,
    pub fused: Var,
    pub classes: ClassActivations,
    pub height: usize,
    pub width: usize,
}

/// Non-differentiable per-image outputs used for reporting and plots.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub aligned_sam: FeatureGrid,
    pub aligned_mae: FeatureGrid,
    pub fused: FeatureGrid,
    pub similarity: SimilarityMap,
    /// Class embeddings, one row per class.
    pub embeddings: Vec<Vec<f64>>,
    /// Per-class logits at `UPSAMPLE` times the grid, over the encoder canvas.
    pub logits: Vec<Plane<f32>>,
}

impl Model {
    pub fn new(config: &EngineConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.model.seed);
        let n = config.model.width;
        let align = AlignmentParams {
            sam: AlignmentBranch::new(&mut store, &mut init, "align.sam", config.encoders.sam.channels, n),
            mae: AlignmentBranch::new(&mut store, &mut init, "align.mae", config.encoders.mae.channels, n),
        };
        let fusion = Fusion::new(&mut store, &mut init, config);
        let prompt = ClassPromptParams::new(
            &mut store,
            &mut init,
            config.model.classes.len(),
            n,
            config.model.seed.wrapping_add(0x5eed),
            config.train.ablation.use_residual,
        )?;
        let decoder = DecoderParams::new(&mut store, &mut init, n, &config.decoder())?;
        Ok(Self {
            config: config.clone(),
            store,
            align,
            fusion,
            prompt,
            decoder,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.config.model.classes
    }

    /// Per-parameter frozen flags derived from the configured groups.
    pub fn frozen_mask(&self) -> Vec<bool> {
        self.store
            .ids()
            .map(|id| {
                let g = group_of(self.store.name(id));
                self.config.train.frozen.iter().any(|f| *f == g)
            })
            .collect()
    }

    /// Trainable scalars. Encoders are not part of the model, so they
    /// contribute nothing.
    pub fn count_trainable(&self) -> usize {
        let frozen = &self.config.train.frozen;
        self.store.count_scalars(|name| !frozen.iter().any(|f| *f == group_of(name)))
    }

    /// Scalars per parameter group, for logging.
    pub fn group_sizes(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, t) in self.store.iter() {
            *out.entry(group_of(name)).or_insert(0) += t.len();
        }
        out
    }

    pub fn check_embeddings(&self, sam: &FeatureGrid, mae: &FeatureGrid) -> Result<()> {
        let (sh, sw, _) = self.config.encoders.sam.output_shape();
        let want_sam = (sh, sw, self.config.encoders.sam.channels);
        let (mh, mw, _) = self.config.encoders.mae.output_shape();
        let want_mae = (mh, mw, self.config.encoders.mae.channels);
        if sam.shape() != want_sam || mae.shape() != want_mae {
            return Err(invalid!(
                "embedding shapes {:?} (SAM) and {:?} (MAE) do not match the configured encoders {:?} and {:?}",
                sam.shape(),
                mae.shape(),
                want_sam,
                want_mae
            ));
        }
        if sam.source() != Source::Sam || mae.source() != Source::Mae {
            return Err(invalid!(
                "embedding sources are {:?} and {:?}, expected Sam and Mae",
                sam.source(),
                mae.source()
            ));
        }
        Ok(())
    }

    pub fn forward_image(&self, g: &mut Graph<'_>, sam: &FeatureGrid, mae: &FeatureGrid) -> ImageForward {
        let (height, width, _) = sam.shape();
        let s = g.input(sam.to_tensor());
        let m = g.input(mae.to_tensor());
        let e_sam = self.align.sam.forward(g, s);
        let e_mae = self.align.mae.forward(g, m);
        let fused = self.fusion.forward(g, e_sam, e_mae, height, width);
        let classes = self.prompt.activations(g, fused);
        ImageForward {
            e_sam,
            e_mae,
            fused,
            classes,
            height,
            width,
        }
    }

    /// Logits for class `k` as a `(4H*4W) x 1` column.
    pub fn logits_var(&self, g: &mut Graph<'_>, f: &ImageForward, k: usize) -> Var {
        let ab = &self.config.train.ablation;
        let va = f.classes.activated[k];
        let dense = ab.use_dense.then(|| self.prompt.dense_var(g, va));
        let tokens = ab
            .use_sparse
            .then(|| self.prompt.tokens_var(g, &f.classes.embeddings, k));
        self.decoder
            .forward(g, va, dense, tokens, k, f.height, f.width, DecodeMode::Full)
    }

    /// Runs every class for one image without recording gradients.
    pub fn infer(&self, sam: &FeatureGrid, mae: &FeatureGrid) -> Result<Inference> {
        self.check_embeddings(sam, mae)?;
        let mut g = Graph::new(&self.store, &[]);
        let f = self.forward_image(&mut g, sam, mae);
        let (h, w) = (f.height, f.width);
        let mut logits = Vec::with_capacity(self.classes().len());
        for k in 0..self.classes().len() {
            let l = self.logits_var(&mut g, &f, k);
            let v = g.value(l);
            if !v.is_finite() {
                return Err(Error::Numeric(alloc::format!(
                    "non-finite logits for class {}",
                    self.classes()[k]
                )));
            }
            logits.push(logits_plane(v, UPSAMPLE * h, UPSAMPLE * w));
        }
        let grid = |v: Var, src| FeatureGrid::from_tensor(g.value(v), h, w, src);
        Ok(Inference {
            aligned_sam: grid(f.e_sam, Source::Aligned)?,
            aligned_mae: grid(f.e_mae, Source::Aligned)?,
            fused: grid(f.fused, Source::Fused)?,
            similarity: SimilarityMap {
                height: h,
                width: w,
                values: g.value(f.classes.similarity).clone(),
            },
            embeddings: f
                .classes
                .embeddings
                .iter()
                .map(|&e| g.value(e).data().to_vec())
                .collect(),
            logits,
        })
    }

    /// Binary mask for class `k` at the original image resolution.
    pub fn predict_mask(&self, sam: &FeatureGrid, mae: &FeatureGrid, letterbox: &Letterbox, k: usize) -> Result<Mask> {
        self.prompt.check_target(k)?;
        let inf = self.infer(sam, mae)?;
        Ok(restore_mask(&inf.logits[k], letterbox, self.config.train.threshold))
    }
}

/// Thresholds canvas-space logits and maps them back through the letterbox.
pub fn restore_mask(logits: &Plane<f32>, letterbox: &Letterbox, threshold: f32) -> Mask {
    letterbox.restore(&logits_to_mask(logits, threshold, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderHandle, EncoderRole};
    use crate::tensor::Tensor;
    use alloc::vec;

    fn toy(fusion: FusionMode) -> EngineConfig {
        let mut c = EngineConfig::smoke();
        c.model.width = 8;
        c.model.reduction = 2;
        c.model.decoder_hidden = 4;
        c.model.decoder_blocks = 1;
        c.model.classes = vec!["a".into(), "b".into()];
        c.encoders.sam = EncoderHandle::synthetic(EncoderRole::Sam, 16, 4, 2, 4, 1);
        c.encoders.mae = EncoderHandle::synthetic(EncoderRole::Mae, 16, 4, 2, 6, 2);
        c.train.ablation.fusion = fusion;
        c
    }

    fn grid(h: usize, w: usize, c: usize, src: Source, seed: u64) -> FeatureGrid {
        let t = crate::testutil::random_tensor(h * w, c, seed);
        FeatureGrid::from_tensor(&t, h, w, src).unwrap()
    }

    #[test]
    fn concat_dispatch_is_concat_then_projection() {
        let model = Model::new(&toy(FusionMode::Concat)).unwrap();
        let (s, m) = (grid(4, 4, 8, Source::Aligned, 3), grid(4, 4, 8, Source::Aligned, 4));
        let mut g = Graph::new(&model.store, &[]);
        let sv = g.input(s.to_tensor());
        let mv = g.input(m.to_tensor());
        let out = model.fusion.forward(&mut g, sv, mv, 4, 4);
        let Fusion::Concat { proj } = &model.fusion else { panic!("wrong fusion") };
        let w = model.store.get(proj.weight);
        let b = model.store.get(proj.bias.unwrap());
        let (st, mt) = (s.to_tensor(), m.to_tensor());
        let mut expect = Tensor::zeros(16, 8);
        for r in 0..16 {
            let x: Vec<f64> = st.row(r).iter().chain(mt.row(r)).copied().collect();
            for o in 0..8 {
                let mut acc = 0.0;
                for (i, xi) in x.iter().enumerate() {
                    acc += xi * w.get(i, o);
                }
                expect.set(r, o, acc + b.get(0, o));
            }
        }
        assert!(g.value(out).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn toy_trainable_count_matches_hand_tally() {
        // N=8, c=2, decoder hidden 4 with one block, SAM 4 and MAE 6 channels,
        // 3x3 kernels, reduction 2.
        let lin = |i: usize, o: usize| i * o + o;
        let align = (lin(4, 8) + lin(8, 8)) + (lin(6, 8) + lin(8, 8));
        let conv = |i: usize, o: usize| 9 * i * o + o;
        let cam = |c: usize| 2 * c * (c / 2);
        let fusion = conv(16, 4) + 2 * 4 + conv(4, 4) + 2 * 4 + cam(4) + conv(8, 4) + cam(4);
        let bank = 2 * 8;
        let prompt = 2 * lin(8, 8) + 3 * lin(8, 8);
        let attn = 4 * lin(4, 4);
        let block = 3 * attn + 4 * 2 * 4 + lin(4, 8) + lin(8, 4);
        let decoder = lin(8, 4) + lin(8, 4) + block + (4 * 4 + 1) + 2 + (4 * 1 + 1) + lin(4, 4) + lin(4, 1);
        let model = Model::new(&toy(FusionMode::Fafm)).unwrap();
        assert_eq!(model.count_trainable(), align + fusion + bank + prompt + decoder);
        let sizes = model.group_sizes();
        assert_eq!(sizes["fusion"], fusion);
        assert_eq!(sizes["decoder"], decoder);
    }

    #[test]
    fn freezing_every_group_leaves_nothing_trainable() {
        let mut c = toy(FusionMode::CrossAttention);
        c.train.frozen = super::super::config::GROUPS.iter().map(|s| String::from(*s)).collect();
        let model = Model::new(&c).unwrap();
        assert_eq!(model.count_trainable(), 0);
        assert!(model.frozen_mask().iter().all(|&f| f));
    }

    #[test]
    fn inference_is_deterministic_and_shaped() {
        for mode in [FusionMode::Fafm, FusionMode::Concat, FusionMode::CrossAttention] {
            let model = Model::new(&toy(mode)).unwrap();
            let s = grid(4, 4, 4, Source::Sam, 5);
            let m = grid(4, 4, 6, Source::Mae, 6);
            let a = model.infer(&s, &m).unwrap();
            assert_eq!(a, model.infer(&s, &m).unwrap());
            assert_eq!(a.logits.len(), 2);
            assert_eq!(a.logits[0].shape(), (16, 16));
            assert_eq!(a.fused.shape(), (4, 4, 8));
        }
    }

    #[test]
    fn mismatched_embeddings_are_rejected() {
        let model = Model::new(&toy(FusionMode::Fafm)).unwrap();
        let s = grid(4, 4, 4, Source::Sam, 5);
        let m = grid(4, 4, 5, Source::Mae, 6);
        assert!(matches!(model.infer(&s, &m), Err(Error::Validation(_))));
        assert!(model.infer(&m, &s).is_err());
    }
}
