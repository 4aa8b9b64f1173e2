//! Training objective: `lambda * L_cos + L_ntx + L_dice`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fafm::COSINE_EPS;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DICE_SMOOTH: f64 = 1.0;
pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// Denominator convention for the contrastive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NtxentVariant {
    /// Positive pair plus all negatives in the denominator; never negative.
    #[default]
    Inclusive,
    /// Negatives only, as the formula is usually printed; can go negative.
    Exclusive,
}

/// Contrastive loss for one image. `prototypes` and `embeddings` are both
/// `c x N`; row `k` of each forms the positive pair, the other embedding
/// rows are negatives for anchor `k`. Returns the mean over anchors.
pub fn ntxent_var(tape: &mut Tape, prototypes: Var, embeddings: Var, tau: f64, variant: NtxentVariant) -> Var {
    let c = tape.shape(prototypes).0;
    let p = tape.normalize_rows(prototypes, COSINE_EPS);
    let e = tape.normalize_rows(embeddings, COSINE_EPS);
    let sim = tape.matmul_t(p, e);
    let logits = tape.scale(sim, 1.0 / tau);
    let mut per_anchor = Vec::with_capacity(c);
    for k in 0..c {
        let row = tape.select_rows(logits, &[k]);
        let pos = tape.select_cols(row, &[k]);
        let pool = match variant {
            NtxentVariant::Inclusive => row,
            NtxentVariant::Exclusive => {
                let others: Vec<usize> = (0..c).filter(|&j| j != k).collect();
                tape.select_cols(row, &others)
            }
        };
        let lse = tape.logsumexp_rows(pool);
        per_anchor.push(tape.sub(lse, pos));
    }
    let all = tape.concat_rows(&per_anchor);
    tape.mean_all(all)
}

/// Mean contrastive loss over a batch of per-image embedding matrices.
pub fn ntxent(prototypes: &Tensor, embeddings: &[Tensor], tau: f64, variant: NtxentVariant) -> Result<f64> {
    check_ntxent(prototypes, tau)?;
    if embeddings.is_empty() {
        return Err(invalid!("contrastive loss needs at least one batch item"));
    }
    let mut total = 0.0;
    for e in embeddings {
        if e.shape() != prototypes.shape() {
            return Err(invalid!(
                "class embeddings {:?} do not match prototypes {:?}",
                e.shape(),
                prototypes.shape()
            ));
        }
        let mut tape = Tape::new();
        let p = tape.constant(prototypes.clone());
        let ev = tape.constant(e.clone());
        let l = ntxent_var(&mut tape, p, ev, tau, variant);
        total += tape.value(l).item();
    }
    Ok(total / embeddings.len() as f64)
}

pub fn check_ntxent(prototypes: &Tensor, tau: f64) -> Result<()> {
    if prototypes.rows() < 2 {
        return Err(invalid!("contrastive loss needs at least 2 classes, got {}", prototypes.rows()));
    }
    if !(tau > 0.0) {
        return Err(invalid!("temperature must be positive, got {tau}"));
    }
    Ok(())
}

/// `1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)` over columns of equal shape.
pub fn dice_loss_var(tape: &mut Tape, probs: Var, target: Var) -> Var {
    let pt = tape.mul(probs, target);
    let inter = tape.sum_all(pt);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_SMOOTH);
    let sp = tape.sum_all(probs);
    let st = tape.sum_all(target);
    let den = tape.add(sp, st);
    let den = tape.add_scalar(den, DICE_SMOOTH);
    let ratio = tape.div(num, den);
    let neg = tape.scale(ratio, -1.0);
    tape.add_scalar(neg, 1.0)
}

pub fn dice_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(invalid!("prediction has {} values, target {}", pred.len(), target.len()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_vec(pred.len(), 1, pred.to_vec()));
    let t = tape.constant(Tensor::from_vec(target.len(), 1, target.to_vec()));
    let l = dice_loss_var(&mut tape, p, t);
    Ok(tape.value(l).item())
}

/// One logged step of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cos: f64,
    pub l_ntx: f64,
    pub l_dice: f64,
    pub total: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl LossReport {
    /// Recomputes the weighted sum with the same operation order used to
    /// build `total`.
    pub fn decomposition_holds(&self) -> bool {
        weighted(self.l_cos, self.l_ntx, self.l_dice, self.lambda) == self.total
    }
}

fn weighted(l_cos: f64, l_ntx: f64, l_dice: f64, lambda: f64) -> f64 {
    l_cos * lambda + l_ntx + l_dice
}

pub fn total_loss(l_cos: f64, l_ntx: f64, l_dice: f64, lambda: f64, tau: f64) -> Result<LossReport> {
    if !(lambda >= 0.0) {
        return Err(invalid!("loss weight lambda must be >= 0, got {lambda}"));
    }
    Ok(LossReport {
        l_cos,
        l_ntx,
        l_dice,
        total: weighted(l_cos, l_ntx, l_dice, lambda),
        lambda,
        tau,
    })
}
