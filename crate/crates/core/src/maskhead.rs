//! Promptable mask decoder.
//!
//! Features `V_a + dense` and the sparse tokens are projected to the hidden
//! width and mixed by two-way attention blocks (token self-attention,
//! token-to-image, MLP, image-to-token). Two 2x2 transposed convolutions
//! upscale the features 4x, and the output of the target token, passed
//! through a small hypernetwork, is dotted with every upscaled location.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::class_prompt::PromptBundle;
use crate::error::{invalid, Result};
use crate::grid::{FeatureGrid, Mask, Plane};
use crate::nn::{ConvTranspose2x2, Graph, Init, LayerNorm, Linear, Mlp2, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const UPSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub use_sparse: bool,
    pub use_dense: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            blocks: 2,
            use_sparse: true,
            use_dense: true,
        }
    }
}

impl DecoderConfig {
    /// Channel widths after the first and second upscaling step.
    pub fn upscale_widths(&self) -> (usize, usize) {
        ((self.hidden / 4).max(1), (self.hidden / 8).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(invalid!("decoder hidden width must be positive"));
        }
        if !self.use_sparse && !self.use_dense {
            return Err(invalid!("decoder needs at least one prompt stream: use_sparse and use_dense are both off"));
        }
        Ok(())
    }
}

/// Single-head scaled dot-product attention with input and output
/// projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim, true),
            out: Linear::new(store, init, &format!("{name}.out"), dim, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, queries: Var, context: Var) -> Var {
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let scores = g.tape.matmul_t(q, k);
        let scores = g.tape.scale(scores, 1.0 / libm::sqrt(self.q.out_dim as f64));
        let a = g.tape.softmax_rows(scores);
        let mixed = g.tape.matmul(a, v);
        self.out.forward(g, mixed)
    }

    pub fn param_count(&self) -> usize {
        self.q.param_count() + self.k.param_count() + self.v.param_count() + self.out.param_count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub token_to_image: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp2,
    pub norm3: LayerNorm,
    pub image_to_token: Attention,
    pub norm4: LayerNorm,
}

impl TwoWayBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            self_attn: Attention::new(store, init, &format!("{name}.self_attn"), dim),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            token_to_image: Attention::new(store, init, &format!("{name}.t2i"), dim),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp2::new(store, init, &format!("{name}.mlp"), (dim, 2 * dim, dim), true),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
            image_to_token: Attention::new(store, init, &format!("{name}.i2t"), dim),
            norm4: LayerNorm::new(store, &format!("{name}.norm4"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, tokens: Var, image: Var) -> (Var, Var) {
        let a = self.self_attn.forward(g, tokens, tokens);
        let t = g.tape.add(tokens, a);
        let t = self.norm1.forward(g, t);
        let a = self.token_to_image.forward(g, t, image);
        let t = g.tape.add(t, a);
        let t = self.norm2.forward(g, t);
        let m = self.mlp.forward(g, t);
        let t = g.tape.add(t, m);
        let t = self.norm3.forward(g, t);
        let a = self.image_to_token.forward(g, image, t);
        let i = g.tape.add(image, a);
        let i = self.norm4.forward(g, i);
        (t, i)
    }

    pub fn param_count(&self) -> usize {
        self.self_attn.param_count()
            + self.token_to_image.param_count()
            + self.image_to_token.param_count()
            + self.mlp.param_count()
            + [&self.norm1, &self.norm2, &self.norm3, &self.norm4]
                .into_iter()
                .map(LayerNorm::param_count)
                .sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub feature_proj: Linear,
    pub token_proj: Linear,
    /// Query used when sparse prompts are switched off.
    pub mask_token: Option<ParamId>,
    pub blocks: Vec<TwoWayBlock>,
    pub up1: ConvTranspose2x2,
    pub up_norm: LayerNorm,
    pub up2: ConvTranspose2x2,
    pub hyper: Mlp2,
}

/// Which parts of the decoder run. `Probe` skips the attention blocks and
/// the upscaler norm and nonlinearities, leaving a map that is linear in the
/// features once biases are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Full,
    Probe,
}

impl DecoderParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, dim: usize, config: &DecoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let (u1, u2) = config.upscale_widths();
        Ok(Self {
            config: config.clone(),
            feature_proj: Linear::new(store, init, "decoder.feature_proj", dim, d, true),
            token_proj: Linear::new(store, init, "decoder.token_proj", dim, d, true),
            mask_token: (!config.use_sparse).then(|| store.add("decoder.mask_token", init.normal(1, d, 1.0))),
            blocks: (0..config.blocks)
                .map(|b| TwoWayBlock::new(store, init, &format!("decoder.block{b}"), d))
                .collect(),
            up1: ConvTranspose2x2::new(store, init, "decoder.up1", d, u1),
            up_norm: LayerNorm::new(store, "decoder.up_norm", u1),
            up2: ConvTranspose2x2::new(store, init, "decoder.up2", u1, u2),
            hyper: Mlp2::new(store, init, "decoder.hyper", (d, d, u2), true),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.feature_proj.in_dim
    }

    /// Logits as a `(4H*4W) x 1` column, row-major over the upscaled grid.
    /// `dense` is ignored when the dense stream is off, `tokens` when the
    /// sparse stream is off.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        activated: Var,
        dense: Option<Var>,
        tokens: Option<Var>,
        target: usize,
        height: usize,
        width: usize,
        mode: DecodeMode,
    ) -> Var {
        let features = match dense {
            Some(d) if self.config.use_dense => g.tape.add(activated, d),
            _ => activated,
        };
        let mut image = self.feature_proj.forward(g, features);
        let (mut toks, query_row) = match (self.config.use_sparse, tokens, self.mask_token) {
            (true, Some(t), _) => (self.token_proj.forward(g, t), target),
            (_, _, Some(m)) => (g.p(m), 0),
            _ => panic!("sparse stream enabled but no tokens supplied"),
        };
        if mode == DecodeMode::Full {
            for b in &self.blocks {
                (toks, image) = b.forward(g, toks, image);
            }
        }
        let mut up = self.up1.forward(g, image, height, width);
        if mode == DecodeMode::Full {
            up = self.up_norm.forward(g, up);
            up = g.tape.gelu(up);
        }
        let mut up = self.up2.forward(g, up, 2 * height, 2 * width);
        if mode == DecodeMode::Full {
            up = g.tape.gelu(up);
        }
        let query = g.tape.select_rows(toks, &[query_row]);
        let w = self.hyper.forward(g, query);
        g.tape.matmul_t(up, w)
    }

    pub fn param_count(&self) -> usize {
        self.feature_proj.param_count()
            + self.token_proj.param_count()
            + self.mask_token.map_or(0, |_| self.config.hidden)
            + self.blocks.iter().map(TwoWayBlock::param_count).sum::<usize>()
            + self.up1.param_count()
            + self.up_norm.param_count()
            + self.up2.param_count()
            + self.hyper.param_count()
    }
}

/// Raw per-class logits at `UPSAMPLE` times the decoder grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub logits: Plane<f32>,
    pub upsample: usize,
}

pub fn decode(
    activated: &FeatureGrid,
    bundle: &PromptBundle,
    params: &DecoderParams,
    store: &ParamStore,
    mode: DecodeMode,
) -> Result<MaskLogits> {
    if activated.channels() != params.in_dim() {
        return Err(invalid!(
            "activated grid has {} channels, decoder expects {}",
            activated.channels(),
            params.in_dim()
        ));
    }
    if bundle.dense.shape() != activated.shape() {
        return Err(invalid!(
            "dense prompt {:?} does not match activated grid {:?}",
            bundle.dense.shape(),
            activated.shape()
        ));
    }
    if bundle.sparse.cols() != params.in_dim() || bundle.target_class >= bundle.sparse.rows() {
        return Err(invalid!(
            "sparse prompt is {}x{} with target {}",
            bundle.sparse.rows(),
            bundle.sparse.cols(),
            bundle.target_class
        ));
    }
    let (h, w, _) = activated.shape();
    let mut g = Graph::new(store, &[]);
    let va = g.input(activated.to_tensor());
    let dense = g.input(bundle.dense.to_tensor());
    let tokens = g.input(bundle.sparse.clone());
    let out = params.forward(&mut g, va, Some(dense), Some(tokens), bundle.target_class, h, w, mode);
    let values = g.value(out);
    if !values.is_finite() {
        return Err(crate::Error::Numeric("decoder produced non-finite logits".into()));
    }
    Ok(MaskLogits {
        logits: logits_plane(values, UPSAMPLE * h, UPSAMPLE * w),
        upsample: UPSAMPLE,
    })
}

pub(crate) fn logits_plane(values: &Tensor, height: usize, width: usize) -> Plane<f32> {
    Plane::from_vec(height, width, values.data().iter().map(|&v| v as f32).collect())
        .expect("logit count matches upscaled grid")
}

/// Thresholds logits (`>= threshold` is foreground) and, if `size` is given,
/// resizes to it with nearest-neighbour lookup.
pub fn logits_to_mask(logits: &Plane<f32>, threshold: f32, size: Option<(usize, usize)>) -> Mask {
    let m = logits.map(|v| u8::from(v >= threshold));
    match size {
        Some((h, w)) if (h, w) != m.shape() => crate::emdata::resize_nearest(&m, h, w),
        _ => m,
    }
}
