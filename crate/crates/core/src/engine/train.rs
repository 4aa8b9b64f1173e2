use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ShuffleMode;
use super::data::Dataset;
use super::model::{restore_mask, Model};
use crate::error::{invalid, Error, Result};
use crate::fafm::cosine_alignment_var;
use crate::metrics::{MetricsAccumulator, MetricsReport, Overlap};
use crate::nn::{Adam, Graph, ParamGrads};
use crate::objective::{dice_loss_var, ntxent_var, total_loss, LossReport};

/// One optimiser step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub batch: Vec<String>,
    pub loss: LossReport,
}

/// End-of-epoch summary. `train_dice` is the mean over classes of pooled
/// Dice between thresholded training logits and targets, both at logit
/// resolution, collected during the epoch's forward passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub mean_loss: f64,
    pub train_dice: f64,
    pub per_class_dice: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss.total).collect()
    }
}

/// Where a run stands; enough to resume it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimiser steps.
    pub step: u64,
}

/// Callbacks for logging and periodic evaluation.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
    /// Called every `eval_every` epochs with the current parameters.
    fn on_eval(&mut self, _epoch: u64, _model: &Model) {}
}

/// Observer that does nothing.
pub struct Quiet;

impl TrainObserver for Quiet {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub progress: Progress,
    pub log: TrainLog,
}

/// Batches for one epoch. The order depends only on the seed and epoch
/// number, so a resumed run sees the same sequence.
pub fn epoch_batches(data: &Dataset, batch_size: usize, mode: ShuffleMode, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    match mode {
        ShuffleMode::Mixed => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            order.chunks(batch_size).map(<[usize]>::to_vec).collect()
        }
        ShuffleMode::PerCell => {
            let mut cells: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, item) in data.items.iter().enumerate() {
                cells.entry(item.key.cell_id.as_str()).or_default().push(i);
            }
            let mut groups: Vec<Vec<usize>> = cells.into_values().collect();
            groups.shuffle(&mut rng);
            let mut out = Vec::new();
            for mut g in groups {
                g.shuffle(&mut rng);
                out.extend(g.chunks(batch_size).map(<[usize]>::to_vec));
            }
            out
        }
    }
}

struct BatchResult {
    grads: ParamGrads,
    report: LossReport,
    overlaps: Vec<Overlap>,
}

fn mask_of(values: &[f64], threshold: f64) -> crate::grid::Mask {
    crate::grid::Plane::from_vec(1, values.len(), values.iter().map(|&v| u8::from(v >= threshold)).collect())
        .expect("non-empty column")
}

fn run_batch(model: &Model, data: &Dataset, batch: &[usize], frozen: &[bool]) -> Result<BatchResult> {
    let cfg = &model.config.train;
    let c = model.classes().len();
    let b = batch.len() as f64;
    let lambda = cfg.effective_lambda();
    let pairs: usize = batch.iter().map(|&i| data.items[i].targets.len()).sum();
    let mut grads = ParamGrads::zeros_like(&model.store);
    let (mut l_cos, mut l_ntx, mut l_dice) = (0.0, 0.0, 0.0);
    let mut overlaps = alloc::vec![Overlap::default(); c];
    for &i in batch {
        let item = &data.items[i];
        let (sam, mae) = &data.embeddings[i];
        let mut g = Graph::new(&model.store, frozen);
        let f = model.forward_image(&mut g, sam, mae);
        let cos = cosine_alignment_var(&mut g.tape, f.e_sam, f.e_mae);
        let protos = g.p(model.prompt.bank.param);
        let emb = g.tape.concat_rows(&f.classes.embeddings);
        let ntx = ntxent_var(&mut g.tape, protos, emb, cfg.tau, cfg.ntxent);
        let mut root = g.tape.scale(cos, lambda / b);
        let t = g.tape.scale(ntx, 1.0 / b);
        root = g.tape.add(root, t);
        l_cos += g.value(cos).item();
        l_ntx += g.value(ntx).item();
        for (&k, target) in &item.targets {
            let logits = model.logits_var(&mut g, &f, k);
            let probs = g.tape.sigmoid(logits);
            let t = g.input(target.clone());
            let d = dice_loss_var(&mut g.tape, probs, t);
            l_dice += g.value(d).item();
            let d = g.tape.scale(d, 1.0 / pairs.max(1) as f64);
            root = g.tape.add(root, d);
            let pred = mask_of(g.value(logits).data(), f64::from(cfg.threshold));
            let truth = mask_of(target.data(), 0.5);
            overlaps[k].add(Overlap::of(&pred, &truth)?);
        }
        grads.accumulate(&g.param_grads(root));
    }
    let report = total_loss(l_cos / b, l_ntx / b, l_dice / pairs.max(1) as f64, lambda, cfg.tau)?;
    Ok(BatchResult { grads, report, overlaps })
}

fn numeric_failure(progress: Progress, keys: &[String], report: &LossReport, what: &str) -> Error {
    Error::Numeric(format!(
        "{what} at epoch {} step {}: l_cos={} l_ntx={} l_dice={} total={} (lambda={}, tau={}); batch [{}]",
        progress.epoch,
        progress.step,
        report.l_cos,
        report.l_ntx,
        report.l_dice,
        report.total,
        report.lambda,
        report.tau,
        keys.join(", ")
    ))
}

/// Trains from `start` until the configured epochs or `max_steps` are
/// reached. The encoders are never touched: only embeddings enter.
pub fn train_from(
    model: &mut Model,
    optimizer: &mut Adam,
    start: Progress,
    data: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    let cfg = model.config.train.clone();
    if model.classes().len() < 2 {
        return Err(invalid!("contrastive training needs at least 2 classes"));
    }
    for (s, m) in &data.embeddings {
        model.check_embeddings(s, m)?;
    }
    let frozen = model.frozen_mask();
    let mut progress = start;
    let mut log = TrainLog::default();
    let max_steps = cfg.max_steps.map(|s| s as u64);
    let c = model.classes().len();
    while progress.epoch < cfg.epochs as u64 && max_steps.is_none_or(|m| progress.step < m) {
        let mut overlaps = alloc::vec![Overlap::default(); c];
        let mut loss_sum = 0.0;
        let mut batches_run = 0usize;
        for batch in epoch_batches(data, cfg.batch_size, cfg.shuffle, cfg.seed, progress.epoch) {
            if max_steps.is_some_and(|m| progress.step >= m) {
                break;
            }
            let keys: Vec<String> = batch.iter().map(|&i| data.items[i].key.to_string()).collect();
            let r = run_batch(model, data, &batch, &frozen)?;
            let finite = [r.report.l_cos, r.report.l_ntx, r.report.l_dice, r.report.total]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(numeric_failure(progress, &keys, &r.report, "non-finite loss"));
            }
            if !r.grads.is_finite() {
                return Err(numeric_failure(progress, &keys, &r.report, "non-finite gradient"));
            }
            optimizer.update(&mut model.store, &r.grads, &frozen);
            if !model.store.is_finite() {
                return Err(numeric_failure(progress, &keys, &r.report, "non-finite parameters after update"));
            }
            progress.step += 1;
            for (acc, o) in overlaps.iter_mut().zip(r.overlaps) {
                acc.add(o);
            }
            loss_sum += r.report.total;
            batches_run += 1;
            let rec = StepRecord {
                step: progress.step,
                epoch: progress.epoch,
                batch: keys,
                loss: r.report,
            };
            log::debug!("step {} loss {:.6}", rec.step, rec.loss.total);
            observer.on_step(&rec);
            log.steps.push(rec);
        }
        progress.epoch += 1;
        let per_class: Vec<f64> = overlaps.iter().map(Overlap::dice).collect();
        let rec = EpochRecord {
            epoch: progress.epoch,
            step: progress.step,
            mean_loss: loss_sum / batches_run.max(1) as f64,
            train_dice: per_class.iter().sum::<f64>() / c as f64,
            per_class_dice: per_class,
        };
        log::info!(
            "epoch {} step {} loss {:.4} train dice {:.4}",
            rec.epoch,
            rec.step,
            rec.mean_loss,
            rec.train_dice
        );
        observer.on_epoch(&rec);
        log.epochs.push(rec);
        if cfg.eval_every > 0 && progress.epoch % cfg.eval_every as u64 == 0 {
            observer.on_eval(progress.epoch, model);
        }
    }
    Ok(TrainOutcome { progress, log })
}

/// A fresh model and optimiser trained on `data`.
pub fn train(
    config: &super::config::EngineConfig,
    data: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<(Model, Adam, TrainOutcome)> {
    let mut model = Model::new(config)?;
    let mut adam = Adam::new(config.train.adam(), &model.store);
    let outcome = train_from(&mut model, &mut adam, Progress::default(), data, observer)?;
    Ok((model, adam, outcome))
}

/// Per-class inference on every slice, scored at the original resolution.
/// Classes without a mask in a slice are skipped and counted.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(invalid!("evaluation set is empty"));
    }
    let classes = model.classes().to_vec();
    let mut acc = MetricsAccumulator::new(&classes);
    for (item, (sam, mae)) in data.items.iter().zip(&data.embeddings) {
        let inf = model.infer(sam, mae)?;
        let mut preds = BTreeMap::new();
        for (k, name) in classes.iter().enumerate() {
            preds.insert(
                name.clone(),
                restore_mask(&inf.logits[k], &item.letterbox, model.config.train.threshold),
            );
        }
        for name in classes.iter().filter(|n| !item.masks.contains_key(*n)) {
            log::warn!("slice {}: no {name} mask, class skipped", item.key);
        }
        acc.add_slice(&preds, &item.masks)?;
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::config::EngineConfig;
    use crate::engine::data::OnTheFly;
    use crate::encoder::{EncoderHandle, EncoderPair, EncoderRole, PatchEncoder};
    use crate::synthetic::{synthetic_dataset, SyntheticConfig};

    fn small() -> (EngineConfig, Dataset) {
        let mut cfg = EngineConfig::smoke();
        cfg.model.width = 8;
        cfg.model.reduction = 2;
        cfg.model.decoder_hidden = 8;
        cfg.model.decoder_blocks = 1;
        cfg.encoders.sam = EncoderHandle::synthetic(EncoderRole::Sam, 32, 4, 2, 8, 11);
        cfg.encoders.mae = EncoderHandle::synthetic(EncoderRole::Mae, 32, 4, 2, 8, 12);
        cfg.train.batch_size = 2;
        cfg.train.epochs = 2;
        let slices = synthetic_dataset(&SyntheticConfig { images: 3, side: 32, ..Default::default() }).unwrap();
        let mut src = OnTheFly {
            encoders: EncoderPair {
                sam: PatchEncoder::synthetic(cfg.encoders.sam.clone()).unwrap(),
                mae: PatchEncoder::synthetic(cfg.encoders.mae.clone()).unwrap(),
            },
        };
        let data = Dataset::build(&cfg, &slices, &mut src).unwrap();
        (cfg, data)
    }

    #[test]
    fn runs_are_deterministic_and_decompose() {
        let (cfg, data) = small();
        let (m1, a1, o1) = train(&cfg, &data, &mut Quiet).unwrap();
        let (m2, a2, o2) = train(&cfg, &data, &mut Quiet).unwrap();
        assert_eq!(o1.log, o2.log);
        assert_eq!(m1.store, m2.store);
        assert_eq!(a1, a2);
        assert_eq!(o1.progress, Progress { epoch: 2, step: 4 });
        assert!(o1.log.steps.iter().all(|s| s.loss.decomposition_holds()));
        assert_eq!(o1.log.epochs.len(), 2);
    }

    #[test]
    fn resuming_matches_an_uninterrupted_run() {
        let (mut cfg, data) = small();
        cfg.train.epochs = 3;
        let (full, _, _) = train(&cfg, &data, &mut Quiet).unwrap();
        let mut half = cfg.clone();
        half.train.max_steps = Some(2);
        let (mut m, mut adam, o) = train(&half, &data, &mut Quiet).unwrap();
        assert_eq!(o.progress, Progress { epoch: 1, step: 2 });
        m.config = cfg.clone();
        train_from(&mut m, &mut adam, o.progress, &data, &mut Quiet).unwrap();
        assert_eq!(m.store, full.store);
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let (mut cfg, data) = small();
        cfg.train.frozen = alloc::vec!["align".into(), "bank".into()];
        let before = Model::new(&cfg).unwrap();
        let (after, _, _) = train(&cfg, &data, &mut Quiet).unwrap();
        let mut moved = 0;
        for id in before.store.ids() {
            let name = before.store.name(id);
            let same = before.store.get(id) == after.store.get(id);
            if name.starts_with("align.") || name.starts_with("bank.") {
                assert!(same, "{name}");
            } else {
                moved += usize::from(!same);
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn per_cell_batches_never_mix_cells() {
        let (_, data) = small();
        let mut d = data.clone();
        d.items[2].key.cell_id = "other".into();
        for e in 0..4 {
            for b in epoch_batches(&d, 2, ShuffleMode::PerCell, 9, e) {
                let first = &d.items[b[0]].key.cell_id;
                assert!(b.iter().all(|&i| &d.items[i].key.cell_id == first));
            }
            let mut all: Vec<usize> = epoch_batches(&d, 2, ShuffleMode::Mixed, 9, e).concat();
            all.sort();
            assert_eq!(all, alloc::vec![0, 1, 2]);
        }
    }

    #[test]
    fn empty_sets_and_bad_losses_are_reported() {
        let (cfg, data) = small();
        let empty = Dataset {
            items: Vec::new(),
            embeddings: Vec::new(),
            fingerprint: None,
        };
        assert!(matches!(train(&cfg, &empty, &mut Quiet), Err(Error::Validation(_))));
        let model = Model::new(&cfg).unwrap();
        assert!(matches!(evaluate(&model, &empty), Err(Error::Validation(_))));
        let mut poisoned = Model::new(&cfg).unwrap();
        let id = poisoned.store.find("decoder.hyper.1.bias").unwrap();
        poisoned.store.get_mut(id).data_mut()[0] = f64::NAN;
        let mut adam = Adam::new(cfg.train.adam(), &poisoned.store);
        let err = train_from(&mut poisoned, &mut adam, Progress::default(), &data, &mut Quiet).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("batch [")), "{err}");
    }

    #[test]
    fn evaluation_is_repeatable() {
        let (cfg, data) = small();
        let model = Model::new(&cfg).unwrap();
        let a = evaluate(&model, &data).unwrap();
        assert_eq!(a, evaluate(&model, &data).unwrap());
        assert_eq!(a.slices, 3);
    }
}
