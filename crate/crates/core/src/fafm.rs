//! Feature alignment and fusion.
//!
//! Each frozen embedding is mapped per location by a two-layer MLP to a
//! shared width `N`; a cosine loss pulls the two aligned grids into the same
//! direction at every location. The fusion block then runs a main stream
//! (`concat(Ê_M, Ê_S)` through conv/GN/ReLU twice and channel attention,
//! `N/2` channels) next to an auxiliary stream on `Ê_M` (one conv and
//! channel attention, `N/2` channels) and concatenates the two into `V_f`.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{FeatureGrid, Source};
use crate::nn::{Conv2d, Graph, GroupNorm, Init, Linear, Mlp2, ParamStore};
use crate::tape::{Tape, Var};

/// Epsilon guarding every cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FafmConfig {
    pub sam_channels: usize,
    pub mae_channels: usize,
    pub width: usize,
    pub reduction: usize,
    /// Overrides the automatic group count for both norm layers.
    #[serde(default)]
    pub groups: Option<usize>,
    pub kernel: usize,
}

impl Default for FafmConfig {
    fn default() -> Self {
        Self {
            sam_channels: 256,
            mae_channels: 512,
            width: 256,
            reduction: 16,
            groups: None,
            kernel: 3,
        }
    }
}

impl FafmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width % 2 != 0 {
            return Err(invalid!("fusion width N={} must be even and positive", self.width));
        }
        if self.kernel % 2 == 0 {
            return Err(invalid!("fusion kernel {} must be odd", self.kernel));
        }
        if self.reduction == 0 {
            return Err(invalid!("channel attention reduction must be positive"));
        }
        if let Some(g) = self.groups {
            if g == 0 || (self.width / 2) % g != 0 {
                return Err(invalid!(
                    "group count {g} does not divide {} channels",
                    self.width / 2
                ));
            }
        }
        Ok(())
    }

    pub fn group_count(&self) -> usize {
        self.groups.unwrap_or_else(|| group_count(self.width / 2))
    }
}

/// 32 groups when they divide `channels`, otherwise the largest power of two
/// below 32 that does.
pub fn group_count(channels: usize) -> usize {
    [32, 16, 8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Per-location `L1(ReLU(L2(x)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentBranch {
    pub mlp: Mlp2,
}

impl AlignmentBranch {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_channels: usize, width: usize) -> Self {
        Self {
            mlp: Mlp2::new(store, init, name, (in_channels, width, width), true),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.mlp.first.in_dim
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        self.mlp.forward(g, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentParams {
    pub sam: AlignmentBranch,
    pub mae: AlignmentBranch,
}

/// CBAM-style channel gate: `sigmoid(MLP(avgpool) + MLP(maxpool))`, with a
/// bias-free bottleneck MLP shared by both pooled statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelAttention {
    pub reduce: Linear,
    pub expand: Linear,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            reduce: Linear::new(store, init, &format!("{name}.reduce"), channels, hidden, false),
            expand: Linear::new(store, init, &format!("{name}.expand"), hidden, channels, false),
        }
    }

    pub fn channels(&self) -> usize {
        self.reduce.in_dim
    }

    fn shared_mlp(&self, g: &mut Graph<'_>, pooled: Var) -> Var {
        let h = self.reduce.forward(g, pooled);
        let h = g.tape.relu(h);
        self.expand.forward(g, h)
    }

    /// The `1 x C` gate.
    pub fn gate(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let avg = g.tape.mean_rows(x);
        let max = g.tape.max_rows(x);
        let a = self.shared_mlp(g, avg);
        let m = self.shared_mlp(g, max);
        let s = g.tape.add(a, m);
        g.tape.sigmoid(s)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gate = self.gate(g, x);
        g.tape.mul_row(x, gate)
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.expand.param_count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub conv1: Conv2d,
    pub norm1: GroupNorm,
    pub conv2: Conv2d,
    pub norm2: GroupNorm,
    pub attention_main: ChannelAttention,
    pub aux_conv: Conv2d,
    pub attention_aux: ChannelAttention,
    pub width: usize,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &FafmConfig) -> Self {
        let n = cfg.width;
        let half = n / 2;
        let groups = cfg.group_count();
        Self {
            conv1: Conv2d::new(store, init, &format!("{name}.conv1"), cfg.kernel, 2 * n, half),
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), groups, half),
            conv2: Conv2d::new(store, init, &format!("{name}.conv2"), cfg.kernel, half, half),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), groups, half),
            attention_main: ChannelAttention::new(store, init, &format!("{name}.cam_main"), half, cfg.reduction),
            aux_conv: Conv2d::new(store, init, &format!("{name}.aux_conv"), cfg.kernel, n, half),
            attention_aux: ChannelAttention::new(store, init, &format!("{name}.cam_aux"), half, cfg.reduction),
            width: n,
        }
    }

    /// Main stream `V_c` (`N/2` channels).
    pub fn main_stream(&self, g: &mut Graph<'_>, e_sam: Var, e_mae: Var, height: usize, width: usize) -> Var {
        let x = g.tape.concat_cols(&[e_mae, e_sam]);
        let x = self.conv1.forward(g, x, height, width);
        let x = self.norm1.forward(g, x);
        let x = g.tape.relu(x);
        let x = self.conv2.forward(g, x, height, width);
        let x = self.norm2.forward(g, x);
        let x = g.tape.relu(x);
        self.attention_main.forward(g, x)
    }

    /// `V_f = concat(V_c, CAM(Conv(Ê_M)))`.
    pub fn forward(&self, g: &mut Graph<'_>, e_sam: Var, e_mae: Var, height: usize, width: usize) -> Var {
        let vc = self.main_stream(g, e_sam, e_mae, height, width);
        let aux = self.aux_conv.forward(g, e_mae, height, width);
        let aux = self.attention_aux.forward(g, aux);
        g.tape.concat_cols(&[vc, aux])
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.norm1.param_count()
            + self.conv2.param_count()
            + self.norm2.param_count()
            + self.attention_main.param_count()
            + self.aux_conv.param_count()
            + self.attention_aux.param_count()
    }
}

/// Differentiable `mean_i (1 - cos(a_i, b_i))` over rows.
pub fn cosine_alignment_var(tape: &mut Tape, a: Var, b: Var) -> Var {
    let na = tape.normalize_rows(a, COSINE_EPS);
    let nb = tape.normalize_rows(b, COSINE_EPS);
    let cos = tape.row_dot(na, nb);
    let mean = tape.mean_all(cos);
    let neg = tape.scale(mean, -1.0);
    tape.add_scalar(neg, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineAlignment {
    pub loss: f64,
    /// Locations where either vector was (numerically) zero; they count as
    /// cosine 0.
    pub degenerate_locations: usize,
}

/// Cosine alignment loss between two aligned grids.
pub fn cosine_alignment_loss(a: &FeatureGrid, b: &FeatureGrid) -> Result<CosineAlignment> {
    if a.shape() != b.shape() {
        return Err(invalid!(
            "aligned grids differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (h, w, _) = a.shape();
    let mut degenerate = 0;
    for y in 0..h {
        for x in 0..w {
            let n = |v: &[f32]| libm::sqrt(v.iter().map(|&t| t as f64 * t as f64).sum::<f64>());
            if n(a.vector(y, x)) <= COSINE_EPS || n(b.vector(y, x)) <= COSINE_EPS {
                degenerate += 1;
            }
        }
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store, &[]);
    let av = g.input(a.to_tensor());
    let bv = g.input(b.to_tensor());
    let l = cosine_alignment_var(&mut g.tape, av, bv);
    Ok(CosineAlignment {
        loss: g.value(l).item(),
        degenerate_locations: degenerate,
    })
}

/// The full module: both alignment branches plus fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fafm {
    pub align: AlignmentParams,
    pub fusion: FusionParams,
}

impl Fafm {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &FafmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            align: AlignmentParams {
                sam: AlignmentBranch::new(store, init, "fafm.align_sam", cfg.sam_channels, cfg.width),
                mae: AlignmentBranch::new(store, init, "fafm.align_mae", cfg.mae_channels, cfg.width),
            },
            fusion: FusionParams::new(store, init, "fafm.fusion", cfg),
        })
    }
}

fn run_unary(
    grid: &FeatureGrid,
    store: &ParamStore,
    source: Source,
    f: impl FnOnce(&mut Graph<'_>, Var) -> Var,
) -> Result<FeatureGrid> {
    let mut g = Graph::new(store, &[]);
    let x = g.input(grid.to_tensor());
    let y = f(&mut g, x);
    FeatureGrid::from_tensor(g.value(y), grid.height(), grid.width(), source)
}

/// Aligns a raw SAM or MAE embedding to width `N`.
pub fn align(grid: &FeatureGrid, branch: &AlignmentBranch, store: &ParamStore) -> Result<FeatureGrid> {
    if !matches!(grid.source(), Source::Sam | Source::Mae) {
        return Err(invalid!("align expects a SAM or MAE embedding, got {:?}", grid.source()));
    }
    if grid.channels() != branch.in_channels() {
        return Err(invalid!(
            "embedding has {} channels, alignment branch expects {}",
            grid.channels(),
            branch.in_channels()
        ));
    }
    run_unary(grid, store, Source::Aligned, |g, x| branch.forward(g, x))
}

pub fn channel_attention(grid: &FeatureGrid, cam: &ChannelAttention, store: &ParamStore) -> Result<FeatureGrid> {
    if grid.channels() != cam.channels() {
        return Err(invalid!(
            "grid has {} channels, attention expects {}",
            grid.channels(),
            cam.channels()
        ));
    }
    run_unary(grid, store, grid.source(), |g, x| cam.forward(g, x))
}

/// Fuses two aligned grids into `V_f`.
pub fn fuse(e_sam: &FeatureGrid, e_mae: &FeatureGrid, fusion: &FusionParams, store: &ParamStore) -> Result<FeatureGrid> {
    if fusion.width % 2 != 0 {
        return Err(invalid!("fusion width {} is odd", fusion.width));
    }
    for e in [e_sam, e_mae] {
        if e.source() != Source::Aligned {
            return Err(invalid!("fuse expects aligned grids, got {:?}", e.source()));
        }
        if e.channels() != fusion.width {
            return Err(invalid!("aligned grid has {} channels, fusion expects {}", e.channels(), fusion.width));
        }
    }
    if e_sam.shape() != e_mae.shape() {
        return Err(invalid!("aligned grids differ: {:?} vs {:?}", e_sam.shape(), e_mae.shape()));
    }
    let (h, w, _) = e_sam.shape();
    let mut g = Graph::new(store, &[]);
    let s = g.input(e_sam.to_tensor());
    let m = g.input(e_mae.to_tensor());
    let vf = fusion.forward(&mut g, s, m, h, w);
    FeatureGrid::from_tensor(g.value(vf), h, w, Source::Fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::testutil::{check_gradient, random_tensor};
    use alloc::vec;
    use alloc::vec::Vec;

    fn grid(t: &Tensor, h: usize, w: usize, s: Source) -> FeatureGrid {
        FeatureGrid::from_tensor(t, h, w, s).unwrap()
    }

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
    }

    #[test]
    fn zero_alignment_params_give_zero_grid() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let br = AlignmentBranch::new(&mut store, &mut init, "a", 5, 4);
        zero_all(&mut store);
        let x = grid(&random_tensor(6, 5, 2), 2, 3, Source::Sam);
        let y = align(&x, &br, &store).unwrap();
        assert_eq!(y.shape(), (2, 3, 4));
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.source(), Source::Aligned);
    }

    #[test]
    fn identity_alignment_is_transparent_on_nonnegative_input() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let br = AlignmentBranch::new(&mut store, &mut init, "a", 4, 4);
        zero_all(&mut store);
        *store.get_mut(br.mlp.first.weight) = Tensor::identity(4);
        *store.get_mut(br.mlp.second.weight) = Tensor::identity(4);
        let x = grid(&random_tensor(4, 4, 3).map(f64::abs), 2, 2, Source::Mae);
        assert_eq!(align(&x, &br, &store).unwrap().data(), x.data());
    }

    #[test]
    fn alignment_hand_evaluation() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let br = AlignmentBranch::new(&mut store, &mut init, "a", 3, 3);
        // row-vector convention: hidden = relu(x W_first + b), out = hidden W_second + b
        *store.get_mut(br.mlp.first.weight) =
            Tensor::from_vec(3, 3, vec![1.0, 0.0, -1.0, 0.5, 1.0, 0.0, 0.0, -2.0, 1.0]);
        *store.get_mut(br.mlp.first.bias.unwrap()) = Tensor::from_vec(1, 3, vec![0.1, 0.0, -0.5]);
        *store.get_mut(br.mlp.second.weight) =
            Tensor::from_vec(3, 3, vec![1.0, 1.0, 0.0, 0.0, 2.0, 0.0, -1.0, 0.0, 1.0]);
        *store.get_mut(br.mlp.second.bias.unwrap()) = Tensor::from_vec(1, 3, vec![0.0, 0.25, 0.0]);
        let x = grid(&Tensor::from_vec(1, 3, vec![1.0, 2.0, 0.5]), 1, 1, Source::Sam);
        // hidden = [1+1+0+0.1, 0+2-1+0, -1+0+0.5-0.5] = [2.1, 1.0, -1.0] -> relu [2.1, 1, 0]
        // out = [2.1, 2.1+2+0.25, 0] = [2.1, 4.35, 0]
        let y = align(&x, &br, &store).unwrap();
        let expect = [2.1f32, 4.35, 0.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn align_rejects_channel_mismatch_and_wrong_source() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let br = AlignmentBranch::new(&mut store, &mut init, "a", 5, 4);
        let bad = grid(&random_tensor(4, 3, 2), 2, 2, Source::Sam);
        assert!(align(&bad, &br, &store).is_err());
        let fused = grid(&random_tensor(4, 5, 2), 2, 2, Source::Fused);
        assert!(align(&fused, &br, &store).is_err());
    }

    #[test]
    fn cosine_loss_reference_values() {
        let a = random_tensor(6, 4, 5);
        let ga = grid(&a, 2, 3, Source::Aligned);
        assert!(cosine_alignment_loss(&ga, &ga).unwrap().loss.abs() < 1e-12);
        let neg = grid(&a.scale(-1.0), 2, 3, Source::Aligned);
        assert!((cosine_alignment_loss(&ga, &neg).unwrap().loss - 2.0).abs() < 1e-6);
        let e1 = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 3.0]);
        let e2 = Tensor::from_vec(2, 2, vec![0.0, 2.0, -1.0, 0.0]);
        let r = cosine_alignment_loss(&grid(&e1, 1, 2, Source::Aligned), &grid(&e2, 1, 2, Source::Aligned)).unwrap();
        assert!((r.loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_loss_flags_zero_vectors() {
        let a = Tensor::from_vec(2, 2, vec![0.0, 0.0, 1.0, 0.0]);
        let b = Tensor::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let r = cosine_alignment_loss(&grid(&a, 1, 2, Source::Aligned), &grid(&b, 1, 2, Source::Aligned)).unwrap();
        assert_eq!(r.degenerate_locations, 1);
        assert!((r.loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_loss_gradient() {
        let a = random_tensor(4, 8, 7);
        let b = random_tensor(4, 8, 8);
        check_gradient(&[a, b], |t, v| cosine_alignment_var(t, v[0], v[1]));
    }

    fn cam_fixture(c: usize) -> (ParamStore, ChannelAttention) {
        let mut store = ParamStore::new();
        let mut init = Init::new(4);
        let cam = ChannelAttention::new(&mut store, &mut init, "cam", c, 2);
        (store, cam)
    }

    #[test]
    fn zero_cam_weights_halve_input() {
        let (mut store, cam) = cam_fixture(4);
        zero_all(&mut store);
        let x = grid(&random_tensor(6, 4, 1), 2, 3, Source::Fused);
        let y = channel_attention(&x, &cam, &store).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b / 2.0);
        }
    }

    #[test]
    fn cam_constant_channels_hand_evaluation() {
        let (mut store, cam) = cam_fixture(2);
        // reduce: 2 -> 1, expand: 1 -> 2
        *store.get_mut(cam.reduce.weight) = Tensor::from_vec(2, 1, vec![1.0, -0.5]);
        *store.get_mut(cam.expand.weight) = Tensor::from_vec(1, 2, vec![0.3, -0.7]);
        let x = grid(&Tensor::from_vec(4, 2, vec![2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0]), 2, 2, Source::Fused);
        // pooled = (2, 1); hidden = relu(2 - 0.5) = 1.5; mlp = (0.45, -1.05)
        let g0 = 1.0 / (1.0 + libm::exp(-2.0 * 0.45));
        let g1 = 1.0 / (1.0 + libm::exp(2.0 * 1.05));
        let y = channel_attention(&x, &cam, &store).unwrap();
        for loc in 0..4 {
            assert!((y.data()[loc * 2] as f64 - 2.0 * g0).abs() < 1e-6);
            assert!((y.data()[loc * 2 + 1] as f64 - g1).abs() < 1e-6);
        }
    }

    #[test]
    fn cam_is_channel_permutation_equivariant() {
        let (store, cam) = cam_fixture(4);
        let perm = [2usize, 0, 3, 1];
        let x = random_tensor(6, 4, 9);
        let xp = Tensor::from_vec(6, 4, (0..24).map(|i| x.get(i / 4, perm[i % 4])).collect());
        // permute reduce rows and expand columns accordingly
        let mut pstore = store.clone();
        let r = store.get(cam.reduce.weight).clone();
        let e = store.get(cam.expand.weight).clone();
        *pstore.get_mut(cam.reduce.weight) =
            Tensor::from_vec(4, r.cols(), (0..4 * r.cols()).map(|i| r.get(perm[i / r.cols()], i % r.cols())).collect());
        *pstore.get_mut(cam.expand.weight) =
            Tensor::from_vec(e.rows(), 4, (0..e.rows() * 4).map(|i| e.get(i / 4, perm[i % 4])).collect());
        let y = channel_attention(&grid(&x, 2, 3, Source::Fused), &cam, &store).unwrap();
        let yp = channel_attention(&grid(&xp, 2, 3, Source::Fused), &cam, &pstore).unwrap();
        for loc in 0..6 {
            for c in 0..4 {
                assert!((yp.data()[loc * 4 + c] - y.data()[loc * 4 + perm[c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cam_ratio_is_spatially_constant() {
        let (store, cam) = cam_fixture(4);
        let x = random_tensor(6, 4, 19).map(|v| v + 2.0);
        let y = channel_attention(&grid(&x, 2, 3, Source::Fused), &cam, &store).unwrap();
        for c in 0..4 {
            let r0 = y.data()[c] as f64 / x.get(0, c) as f32 as f64;
            for loc in 1..6 {
                let r = y.data()[loc * 4 + c] as f64 / x.get(loc, c) as f32 as f64;
                assert!((r - r0).abs() < 1e-5);
            }
        }
    }

    fn small_fafm(n: usize) -> (ParamStore, Fafm) {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let cfg = FafmConfig {
            sam_channels: 3,
            mae_channels: 5,
            width: n,
            reduction: 2,
            groups: None,
            kernel: 3,
        };
        let f = Fafm::new(&mut store, &mut init, &cfg).unwrap();
        (store, f)
    }

    #[test]
    fn fuse_shapes_and_odd_width() {
        let (store, f) = small_fafm(8);
        let es = grid(&random_tensor(12, 8, 1), 3, 4, Source::Aligned);
        let em = grid(&random_tensor(12, 8, 2), 3, 4, Source::Aligned);
        let vf = fuse(&es, &em, &f.fusion, &store).unwrap();
        assert_eq!(vf.shape(), (3, 4, 8));
        assert_eq!(vf.source(), Source::Fused);
        let bad = FafmConfig { width: 7, ..FafmConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_width_channel_split() {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let cfg = FafmConfig { sam_channels: 4, mae_channels: 4, ..FafmConfig::default() };
        let f = Fafm::new(&mut store, &mut init, &cfg).unwrap();
        assert_eq!(f.fusion.attention_main.channels(), 128);
        assert_eq!(f.fusion.attention_aux.channels(), 128);
        assert_eq!(f.fusion.conv1.in_channels, 512);
        assert_eq!(f.fusion.norm1.groups, 32);
    }

    #[test]
    fn zero_conv_weights_zero_main_stream() {
        let (mut store, f) = small_fafm(8);
        for c in [&f.fusion.conv1, &f.fusion.conv2, &f.fusion.aux_conv] {
            *store.get_mut(c.weight) = Tensor::zeros(store.get(c.weight).rows(), store.get(c.weight).cols());
            *store.get_mut(c.bias) = Tensor::zeros(1, c.out_channels);
        }
        let es = grid(&random_tensor(12, 8, 1), 3, 4, Source::Aligned);
        let em = grid(&random_tensor(12, 8, 2), 3, 4, Source::Aligned);
        let vf = fuse(&es, &em, &f.fusion, &store).unwrap();
        assert!(vf.data().iter().all(|&v| v == 0.0));
    }

    /// Brute-force oracle: centre-tap-only kernels reduce every conv to a
    /// per-location matrix product, traced here with explicit loops.
    #[test]
    fn fuse_center_tap_brute_force() {
        let (mut store, f) = small_fafm(4);
        let half = 2;
        let mut centre_only = |conv: &Conv2d, cin: usize, seed: u64| {
            let centre = random_tensor(cin, half, seed);
            let mut w = Tensor::zeros(9 * cin, half);
            for c in 0..cin {
                for o in 0..half {
                    w.set(4 * cin + c, o, centre.get(c, o));
                }
            }
            *store.get_mut(conv.weight) = w;
            *store.get_mut(conv.bias) = random_tensor(1, half, seed + 100);
            centre
        };
        let k1 = centre_only(&f.fusion.conv1, 8, 1);
        let k2 = centre_only(&f.fusion.conv2, 2, 2);
        let ka = centre_only(&f.fusion.aux_conv, 4, 3);
        let es = random_tensor(16, 4, 11);
        let em = random_tensor(16, 4, 12);
        let vf = fuse(
            &grid(&es, 4, 4, Source::Aligned),
            &grid(&em, 4, 4, Source::Aligned),
            &f.fusion,
            &store,
        )
        .unwrap();

        let s = &store;
        let b = |conv: &Conv2d| s.get(conv.bias).clone();
        let dense = |x: &[Vec<f64>], k: &Tensor, bias: &Tensor| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    (0..k.cols())
                        .map(|o| bias.get(0, o) + row.iter().enumerate().map(|(c, v)| v * k.get(c, o)).sum::<f64>())
                        .collect()
                })
                .collect()
        };
        let gn = |x: &[Vec<f64>], groups: usize| -> Vec<Vec<f64>> {
            let c = x[0].len();
            let gs = c / groups;
            let mut out = x.to_vec();
            for g in 0..groups {
                let vals: Vec<f64> = x.iter().flat_map(|r| r[g * gs..(g + 1) * gs].to_vec()).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
                for (r, orow) in x.iter().zip(out.iter_mut()) {
                    for j in g * gs..(g + 1) * gs {
                        orow[j] = (r[j] - m) / (v + 1e-5).sqrt();
                    }
                }
            }
            out
        };
        let relu = |x: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
        };
        let cam = |x: &[Vec<f64>], att: &ChannelAttention| -> Vec<Vec<f64>> {
            let c = x[0].len();
            let avg: Vec<f64> = (0..c).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / x.len() as f64).collect();
            let max: Vec<f64> = (0..c).map(|j| x.iter().map(|r| r[j]).fold(f64::MIN, f64::max)).collect();
            let rw = s.get(att.reduce.weight);
            let ew = s.get(att.expand.weight);
            let mlp = |p: &[f64]| -> Vec<f64> {
                let h: Vec<f64> = (0..rw.cols())
                    .map(|k| p.iter().enumerate().map(|(j, v)| v * rw.get(j, k)).sum::<f64>().max(0.0))
                    .collect();
                (0..c).map(|j| h.iter().enumerate().map(|(k, v)| v * ew.get(k, j)).sum()).collect()
            };
            let (ma, mm) = (mlp(&avg), mlp(&max));
            let gate: Vec<f64> = (0..c).map(|j| 1.0 / (1.0 + (-(ma[j] + mm[j])).exp())).collect();
            x.iter().map(|r| r.iter().zip(&gate).map(|(v, g)| v * g).collect()).collect()
        };
        let rows = |t: &Tensor| -> Vec<Vec<f64>> { (0..t.rows()).map(|i| t.row(i).to_vec()).collect() };
        let cat: Vec<Vec<f64>> = rows(&em).into_iter().zip(rows(&es)).map(|(mut a, b)| { a.extend(b); a }).collect();
        let x = dense(&cat, &k1, &b(&f.fusion.conv1));
        let x = relu(gn(&x, f.fusion.norm1.groups));
        let x = dense(&x, &k2, &b(&f.fusion.conv2));
        let x = relu(gn(&x, f.fusion.norm2.groups));
        let vc = cam(&x, &f.fusion.attention_main);
        let aux = cam(&dense(&rows(&em), &ka, &b(&f.fusion.aux_conv)), &f.fusion.attention_aux);
        for loc in 0..16 {
            for j in 0..2 {
                assert!((vf.data()[loc * 4 + j] as f64 - vc[loc][j]).abs() < 1e-5);
                assert!((vf.data()[loc * 4 + 2 + j] as f64 - aux[loc][j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn group_count_rule() {
        assert_eq!(group_count(128), 32);
        assert_eq!(group_count(16), 16);
        assert_eq!(group_count(4), 4);
        assert_eq!(group_count(6), 2);
    }
}
