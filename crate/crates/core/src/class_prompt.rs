//! Prototype-driven class prompts.
//!
//! A learnable bank holds one prototype per class. Cosine similarity between
//! the fused grid and prototype `k` activates the grid (`V_a = (1 + S_k) V_f`);
//! pooling plus a residual MLP gives the class embedding `E_C`; one-hot
//! routing through a positive or a negative projection turns the `c` class
//! embeddings into sparse tokens, and a 1x1 projection of `V_a` gives the
//! dense prompt.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fafm::COSINE_EPS;
use crate::grid::{FeatureGrid, Plane, Source};
use crate::nn::{Graph, Init, Linear, Mlp2, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PROTOTYPE_STD: f64 = 0.02;

/// `c x N` prototypes drawn i.i.d. from `N(0, 0.02^2)`.
pub fn init_prototypes(classes: usize, dim: usize, seed: u64) -> Result<Tensor> {
    if classes == 0 || dim == 0 {
        return Err(invalid!("prototype bank needs c >= 1 and N >= 1, got {classes}x{dim}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, PROTOTYPE_STD).expect("valid std");
    let mut t = Tensor::from_vec(classes, dim, (0..classes * dim).map(|_| normal.sample(&mut rng)).collect());
    // A zero row would have no direction; redraw until it does.
    for r in 0..classes {
        while t.row(r).iter().all(|&v| v == 0.0) {
            for v in t.row_mut(r) {
                *v = normal.sample(&mut rng);
            }
        }
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypeBank {
    pub param: ParamId,
    pub classes: usize,
    pub dim: usize,
}

impl ClassPrototypeBank {
    pub fn register(store: &mut ParamStore, name: &str, prototypes: Tensor) -> Self {
        let (classes, dim) = prototypes.shape();
        Self {
            param: store.add(name, prototypes),
            classes,
            dim,
        }
    }
}

/// Per-class cosine similarity, `(H*W) x c`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub height: usize,
    pub width: usize,
    pub values: Tensor,
}

impl SimilarityMap {
    pub fn classes(&self) -> usize {
        self.values.cols()
    }

    pub fn class_plane(&self, k: usize) -> Plane<f32> {
        Plane::from_fn(self.height, self.width, |y, x| self.values.get(y * self.width + x, k) as f32)
    }

    pub fn class_column(&self, k: usize) -> Tensor {
        Tensor::from_vec(
            self.values.rows(),
            1,
            (0..self.values.rows()).map(|i| self.values.get(i, k)).collect(),
        )
    }
}

/// `S[i, k] = <v_i / |v_i|, p_k / |p_k|>`.
pub fn similarity_var(tape: &mut Tape, features: Var, prototypes: Var) -> Var {
    let v = tape.normalize_rows(features, COSINE_EPS);
    let p = tape.normalize_rows(prototypes, COSINE_EPS);
    tape.matmul_t(v, p)
}

/// `(1 + s) * V_f` with `s` an `(H*W) x 1` column.
pub fn activate_var(tape: &mut Tape, features: Var, sim_column: Var) -> Var {
    let gain = tape.add_scalar(sim_column, 1.0);
    tape.mul_col(features, gain)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPromptParams {
    pub bank: ClassPrototypeBank,
    pub residual: Mlp2,
    pub pos_proj: Linear,
    pub neg_proj: Linear,
    pub dense_proj: Linear,
    pub use_residual: bool,
}

/// Differentiable outputs for one image: the shared similarity map plus
/// per-class activated grids and class embeddings.
pub struct ClassActivations {
    pub similarity: Var,
    pub activated: Vec<Var>,
    pub embeddings: Vec<Var>,
}

impl ClassPromptParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, classes: usize, dim: usize, seed: u64, use_residual: bool) -> Result<Self> {
        let bank = ClassPrototypeBank::register(store, "bank.prototypes", init_prototypes(classes, dim, seed)?);
        Ok(Self {
            bank,
            residual: Mlp2::new(store, init, "prompt.residual", (dim, dim, dim), true),
            pos_proj: Linear::new(store, init, "prompt.pos", dim, dim, true),
            neg_proj: Linear::new(store, init, "prompt.neg", dim, dim, true),
            dense_proj: Linear::new(store, init, "prompt.dense", dim, dim, true),
            use_residual,
        })
    }

    pub fn classes(&self) -> usize {
        self.bank.classes
    }

    pub fn dim(&self) -> usize {
        self.bank.dim
    }

    /// `E_C = e + MLP(e)` with `e` the spatial mean of `V_a`; without the
    /// residual switch only `MLP(e)` remains.
    pub fn class_embedding_var(&self, g: &mut Graph<'_>, activated: Var) -> Var {
        let e = g.tape.mean_rows(activated);
        let m = self.residual.forward(g, e);
        if self.use_residual {
            g.tape.add(e, m)
        } else {
            m
        }
    }

    pub fn activations(&self, g: &mut Graph<'_>, fused: Var) -> ClassActivations {
        let p = g.p(self.bank.param);
        let similarity = similarity_var(&mut g.tape, fused, p);
        let mut activated = Vec::with_capacity(self.classes());
        let mut embeddings = Vec::with_capacity(self.classes());
        for k in 0..self.classes() {
            let s = g.tape.select_cols(similarity, &[k]);
            let va = activate_var(&mut g.tape, fused, s);
            embeddings.push(self.class_embedding_var(g, va));
            activated.push(va);
        }
        ClassActivations {
            similarity,
            activated,
            embeddings,
        }
    }

    /// Sparse tokens (`c x N`) routed by the one-hot bit of `target`.
    pub fn tokens_var(&self, g: &mut Graph<'_>, embeddings: &[Var], target: usize) -> Var {
        let rows: Vec<Var> = embeddings
            .iter()
            .enumerate()
            .map(|(j, &e)| {
                if j == target {
                    self.pos_proj.forward(g, e)
                } else {
                    self.neg_proj.forward(g, e)
                }
            })
            .collect();
        g.tape.concat_rows(&rows)
    }

    pub fn dense_var(&self, g: &mut Graph<'_>, activated: Var) -> Var {
        self.dense_proj.forward(g, activated)
    }

    pub fn check_target(&self, target: usize) -> Result<()> {
        if target >= self.classes() {
            return Err(invalid!(
                "target class index {target} outside 0..{}",
                self.classes()
            ));
        }
        Ok(())
    }
}

/// Prompts handed to the mask decoder for one target class.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub sparse: Tensor,
    pub dense: FeatureGrid,
    pub target_class: usize,
}

impl PromptBundle {
    /// One-hot routing vector.
    pub fn selector(&self) -> Vec<u8> {
        (0..self.sparse.rows()).map(|j| u8::from(j == self.target_class)).collect()
    }
}

fn check_dim(grid: &FeatureGrid, dim: usize) -> Result<()> {
    if grid.channels() != dim {
        return Err(invalid!(
            "grid has {} channels, prototypes have {dim}",
            grid.channels()
        ));
    }
    Ok(())
}

pub fn similarity(fused: &FeatureGrid, bank: &ClassPrototypeBank, store: &ParamStore) -> Result<SimilarityMap> {
    check_dim(fused, bank.dim)?;
    let mut g = Graph::new(store, &[]);
    let v = g.input(fused.to_tensor());
    let p = g.p(bank.param);
    let s = similarity_var(&mut g.tape, v, p);
    Ok(SimilarityMap {
        height: fused.height(),
        width: fused.width(),
        values: g.value(s).clone(),
    })
}

pub fn activate(fused: &FeatureGrid, sim: &SimilarityMap, k: usize) -> Result<FeatureGrid> {
    if (sim.height, sim.width) != (fused.height(), fused.width()) {
        return Err(invalid!(
            "similarity map is {}x{}, grid is {}x{}",
            sim.height,
            sim.width,
            fused.height(),
            fused.width()
        ));
    }
    if k >= sim.classes() {
        return Err(invalid!("class index {k} outside 0..{}", sim.classes()));
    }
    let mut tape = Tape::new();
    let v = tape.constant(fused.to_tensor());
    let s = tape.constant(sim.class_column(k));
    let a = activate_var(&mut tape, v, s);
    FeatureGrid::from_tensor(tape.value(a), fused.height(), fused.width(), Source::Activated)
}

pub fn class_embedding(activated: &FeatureGrid, params: &ClassPromptParams, store: &ParamStore) -> Result<Vec<f64>> {
    if activated.source() != Source::Activated {
        return Err(invalid!("class embedding expects an activated grid, got {:?}", activated.source()));
    }
    check_dim(activated, params.dim())?;
    let mut g = Graph::new(store, &[]);
    let va = g.input(activated.to_tensor());
    let e = params.class_embedding_var(&mut g, va);
    Ok(g.value(e).data().to_vec())
}

pub fn build_prompts(
    params: &ClassPromptParams,
    store: &ParamStore,
    embeddings: &[Vec<f64>],
    activated: &FeatureGrid,
    target: usize,
) -> Result<PromptBundle> {
    params.check_target(target)?;
    if embeddings.len() != params.classes() {
        return Err(invalid!(
            "{} class embeddings supplied for {} classes",
            embeddings.len(),
            params.classes()
        ));
    }
    check_dim(activated, params.dim())?;
    let mut g = Graph::new(store, &[]);
    let es: Vec<Var> = embeddings
        .iter()
        .map(|e| {
            if e.len() == params.dim() {
                Ok(g.input(Tensor::from_vec(1, e.len(), e.clone())))
            } else {
                Err(invalid!("class embedding has length {}, expected {}", e.len(), params.dim()))
            }
        })
        .collect::<Result<_>>()?;
    let tokens = params.tokens_var(&mut g, &es, target);
    let va = g.input(activated.to_tensor());
    let dense = params.dense_var(&mut g, va);
    Ok(PromptBundle {
        sparse: g.value(tokens).clone(),
        dense: FeatureGrid::from_tensor(g.value(dense), activated.height(), activated.width(), Source::Activated)?,
        target_class: target,
    })
}

/// Convenience used by the command line: every per-class intermediate for
/// one fused grid.
pub fn class_embeddings(fused: &FeatureGrid, params: &ClassPromptParams, store: &ParamStore) -> Result<Vec<Vec<f64>>> {
    let sim = similarity(fused, &params.bank, store)?;
    (0..params.classes())
        .map(|k| class_embedding(&activate(fused, &sim, k)?, params, store))
        .collect()
}
