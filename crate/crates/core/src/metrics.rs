//! Segmentation metrics.
//!
//! Overlap counts are accumulated per class over every evaluated slice and
//! turned into scores at the end, so per-class Dice and IoU are dataset-level
//! ratios. Empty prediction against empty ground truth scores 1.
//!
//! Challenge IoU averages only classes whose ground truth is nonempty
//! somewhere in the evaluated set. AJI treats 4-connected components of each
//! class mask as instances, matches them greedily by descending IoU (one to
//! one), and adds every unmatched instance to the union.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{Mask, Plane};

/// Pixel counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub pred: u64,
    pub target: u64,
    pub intersection: u64,
}

impl Overlap {
    pub fn of(pred: &Mask, target: &Mask) -> Result<Self> {
        if pred.shape() != target.shape() {
            return Err(invalid!(
                "prediction {:?} and target {:?} differ in shape",
                pred.shape(),
                target.shape()
            ));
        }
        let mut o = Overlap::default();
        for (&p, &t) in pred.data().iter().zip(target.data()) {
            let (p, t) = (p != 0, t != 0);
            o.pred += u64::from(p);
            o.target += u64::from(t);
            o.intersection += u64::from(p && t);
        }
        Ok(o)
    }

    pub fn add(&mut self, other: Overlap) {
        self.pred += other.pred;
        self.target += other.target;
        self.intersection += other.intersection;
    }

    pub fn union(&self) -> u64 {
        self.pred + self.target - self.intersection
    }

    pub fn dice(&self) -> f64 {
        if self.pred + self.target == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / (self.pred + self.target) as f64
        }
    }

    /// `IoU == D / (2 - D)` checked on the exact rationals
    /// `I / (P + T - I)` and `2I / (P + T)`.
    pub fn iou_equals_dice_identity(&self) -> bool {
        let (i, s) = (u128::from(self.intersection), u128::from(self.pred + self.target));
        if s == 0 {
            return self.dice() == 1.0 && self.iou() == 1.0;
        }
        // D / (2 - D) = 2I / (2S - 2I)
        i * (2 * s - 2 * i) == 2 * i * (s - i)
    }

    pub fn iou(&self) -> f64 {
        if self.union() == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union() as f64
        }
    }
}

pub fn dice_score(pred: &Mask, target: &Mask) -> Result<f64> {
    Ok(Overlap::of(pred, target)?.dice())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouScores {
    pub m_iou: f64,
    pub challenge_iou: f64,
    pub per_class: Vec<f64>,
}

fn iou_from_overlaps(overlaps: &[Overlap]) -> IouScores {
    let per_class: Vec<f64> = overlaps.iter().map(Overlap::iou).collect();
    let m_iou = mean(&per_class);
    let present: Vec<f64> = overlaps
        .iter()
        .zip(&per_class)
        .filter(|(o, _)| o.target > 0)
        .map(|(_, &v)| v)
        .collect();
    // With no class present at all there is nothing to restrict to.
    let challenge_iou = if present.is_empty() { m_iou } else { mean(&present) };
    IouScores {
        m_iou,
        challenge_iou,
        per_class,
    }
}

/// Class-aligned masks for one slice.
pub fn iou_scores(preds: &[Mask], targets: &[Mask]) -> Result<IouScores> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(invalid!(
            "{} predicted and {} target classes",
            preds.len(),
            targets.len()
        ));
    }
    let overlaps = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| Overlap::of(p, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(iou_from_overlaps(&overlaps))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// 4-connected component labels (1-based, 0 = background) numbered in
/// raster order of each component's first pixel.
pub fn connected_components(mask: &Mask) -> (Plane<u32>, usize) {
    let (h, w) = mask.shape();
    let mut labels: Plane<u32> = Plane::new(h, w);
    let mut count = 0u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 || labels.get(y, x) != 0 {
                continue;
            }
            count += 1;
            labels.set(y, x, count);
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                let mut visit = |ny: usize, nx: usize| {
                    if mask.get(ny, nx) != 0 && labels.get(ny, nx) == 0 {
                        labels.set(ny, nx, count);
                        stack.push((ny, nx));
                    }
                };
                if cy > 0 {
                    visit(cy - 1, cx);
                }
                if cy + 1 < h {
                    visit(cy + 1, cx);
                }
                if cx > 0 {
                    visit(cy, cx - 1);
                }
                if cx + 1 < w {
                    visit(cy, cx + 1);
                }
            }
        }
    }
    (labels, count as usize)
}

/// Numerator and denominator of the aggregated Jaccard index, kept apart so
/// they can be pooled over classes and slices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AjiCounts {
    pub intersection: u64,
    pub union: u64,
}

impl AjiCounts {
    pub fn add(&mut self, other: AjiCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    pub fn value(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn aji_counts(pred: &Mask, target: &Mask) -> Result<AjiCounts> {
    if pred.shape() != target.shape() {
        return Err(invalid!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        ));
    }
    let (pl, np) = connected_components(pred);
    let (tl, nt) = connected_components(target);
    let mut p_area = vec![0u64; np + 1];
    let mut t_area = vec![0u64; nt + 1];
    let mut inter: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (&a, &b) in pl.data().iter().zip(tl.data()) {
        p_area[a as usize] += 1;
        t_area[b as usize] += 1;
        if a != 0 && b != 0 {
            *inter.entry((b, a)).or_default() += 1;
        }
    }
    let mut pairs: Vec<(u32, u32, u64, u64)> = inter
        .iter()
        .map(|(&(t, p), &i)| (t, p, i, t_area[t as usize] + p_area[p as usize] - i))
        .collect();
    // Descending IoU (exact rational comparison), ties by GT then pred label.
    pairs.sort_by(|a, b| {
        (u128::from(b.2) * u128::from(a.3))
            .cmp(&(u128::from(a.2) * u128::from(b.3)))
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut t_used = vec![false; nt + 1];
    let mut p_used = vec![false; np + 1];
    let mut counts = AjiCounts::default();
    for (t, p, i, u) in pairs {
        if t_used[t as usize] || p_used[p as usize] {
            continue;
        }
        t_used[t as usize] = true;
        p_used[p as usize] = true;
        counts.intersection += i;
        counts.union += u;
    }
    for t in 1..=nt {
        if !t_used[t] {
            counts.union += t_area[t];
        }
    }
    for p in 1..=np {
        if !p_used[p] {
            counts.union += p_area[p];
        }
    }
    Ok(counts)
}

pub fn aji(pred: &Mask, target: &Mask) -> Result<f64> {
    Ok(aji_counts(pred, target)?.value())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub per_class_dice: BTreeMap<String, f64>,
    pub per_class_iou: BTreeMap<String, f64>,
    pub dice: f64,
    pub m_iou: f64,
    pub challenge_iou: f64,
    pub aji: f64,
    pub slices: usize,
    /// Classes missing from at least one slice's annotations, with the
    /// number of slices skipped for each.
    pub skipped: BTreeMap<String, usize>,
}

impl MetricsReport {
    /// Scores keyed as in the results table.
    pub fn dice_of(&self, class: &str) -> Option<f64> {
        self.per_class_dice.get(class).copied()
    }
}

/// Pools overlap counts slice by slice.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    classes: Vec<String>,
    overlaps: Vec<Overlap>,
    aji: AjiCounts,
    slices: usize,
    skipped: BTreeMap<String, usize>,
}

impl MetricsAccumulator {
    pub fn new(classes: &[String]) -> Self {
        Self {
            classes: classes.to_vec(),
            overlaps: vec![Overlap::default(); classes.len()],
            aji: AjiCounts::default(),
            slices: 0,
            skipped: BTreeMap::new(),
        }
    }

    /// Adds one slice. A class without a ground-truth mask is skipped for
    /// this slice and recorded.
    pub fn add_slice(&mut self, preds: &BTreeMap<String, Mask>, targets: &BTreeMap<String, Mask>) -> Result<()> {
        for (k, class) in self.classes.iter().enumerate() {
            let Some(t) = targets.get(class) else {
                *self.skipped.entry(class.clone()).or_default() += 1;
                continue;
            };
            let p = preds
                .get(class)
                .ok_or_else(|| invalid!("no prediction for class {class}"))?;
            self.overlaps[k].add(Overlap::of(p, t)?);
            self.aji.add(aji_counts(p, t)?);
        }
        self.slices += 1;
        Ok(())
    }

    pub fn overlaps(&self) -> &[Overlap] {
        &self.overlaps
    }

    pub fn finish(&self) -> MetricsReport {
        let iou = iou_from_overlaps(&self.overlaps);
        let dices: Vec<f64> = self.overlaps.iter().map(Overlap::dice).collect();
        MetricsReport {
            classes: self.classes.clone(),
            per_class_dice: self.classes.iter().cloned().zip(dices.iter().copied()).collect(),
            per_class_iou: self.classes.iter().cloned().zip(iou.per_class.iter().copied()).collect(),
            dice: mean(&dices),
            m_iou: iou.m_iou,
            challenge_iou: iou.challenge_iou,
            aji: self.aji.value(),
            slices: self.slices,
            skipped: self.skipped.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    type Px = (usize, usize);

    fn set(m: &Mask) -> HashSet<Px> {
        let mut s = HashSet::new();
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(y, x) != 0 {
                    s.insert((y, x));
                }
            }
        }
        s
    }

    fn rect(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Mask {
        Plane::from_fn(h, w, |y, x| u8::from((y0..y1).contains(&y) && (x0..x1).contains(&x)))
    }

    fn random_mask(rng: &mut ChaCha8Rng, side: usize) -> Mask {
        let mut m: Mask = Plane::new(side, side);
        let blobs = rng.random_range(0..4);
        for _ in 0..blobs {
            let (y, x) = (rng.random_range(0..side), rng.random_range(0..side));
            let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
            for yy in y..(y + h).min(side) {
                for xx in x..(x + w).min(side) {
                    m.set(yy, xx, 1);
                }
            }
        }
        for _ in 0..rng.random_range(0..6) {
            let (y, x) = (rng.random_range(0..side), rng.random_range(0..side));
            m.set(y, x, 1 - m.get(y, x));
        }
        m
    }

    fn oracle_components(s: &HashSet<Px>) -> Vec<HashSet<Px>> {
        let mut seen: HashSet<Px> = HashSet::new();
        let mut out = Vec::new();
        let mut keys: Vec<&Px> = s.iter().collect();
        keys.sort();
        for &start in keys {
            if seen.contains(&start) {
                continue;
            }
            let mut comp = HashSet::new();
            let mut frontier = vec![start];
            while let Some(p) = frontier.pop() {
                if !s.contains(&p) || !comp.insert(p) {
                    continue;
                }
                let (y, x) = (p.0 as isize, p.1 as isize);
                for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 {
                        frontier.push((ny as usize, nx as usize));
                    }
                }
            }
            seen.extend(comp.iter().copied());
            out.push(comp);
        }
        out
    }

    fn oracle_aji(p: &HashSet<Px>, t: &HashSet<Px>) -> (u64, u64) {
        let pc = oracle_components(p);
        let tc = oracle_components(t);
        let mut cand = Vec::new();
        for (i, g) in tc.iter().enumerate() {
            for (j, s) in pc.iter().enumerate() {
                let inter = g.intersection(s).count();
                if inter > 0 {
                    let uni = g.union(s).count();
                    cand.push((inter as f64 / uni as f64, i, j, inter, uni));
                }
            }
        }
        cand.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut gu = HashSet::new();
        let mut su = HashSet::new();
        let (mut c, mut u) = (0u64, 0u64);
        for (_, i, j, inter, uni) in cand {
            if gu.contains(&i) || su.contains(&j) {
                continue;
            }
            gu.insert(i);
            su.insert(j);
            c += inter as u64;
            u += uni as u64;
        }
        u += tc.iter().enumerate().filter(|(i, _)| !gu.contains(i)).map(|(_, g)| g.len() as u64).sum::<u64>();
        u += pc.iter().enumerate().filter(|(j, _)| !su.contains(j)).map(|(_, s)| s.len() as u64).sum::<u64>();
        (c, u)
    }

    #[test]
    fn dice_reference_values() {
        let a = rect(4, 4, 0, 0, 2, 2);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &rect(4, 4, 2, 2, 4, 4)).unwrap(), 0.0);
        let p = rect(4, 4, 0, 0, 2, 3); // area 6
        let t = rect(4, 4, 1, 0, 3, 2); // area 4, overlap 2
        let t2 = Plane::from_fn(4, 4, |y, x| u8::from((y == 0 && x < 3) || (y == 2 && x < 1)));
        assert_eq!(Overlap::of(&p, &t).unwrap().intersection, 2);
        // area 4, overlap 3
        assert_eq!(Overlap::of(&p, &t2).unwrap(), Overlap { pred: 6, target: 4, intersection: 3 });
        assert!((dice_score(&p, &t2).unwrap() - 0.6).abs() < 1e-15);
        let empty: Mask = Plane::new(4, 4);
        assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn iou_definition_split() {
        let full = rect(4, 4, 0, 0, 4, 4);
        let half = rect(4, 4, 0, 0, 2, 4);
        let empty: Mask = Plane::new(4, 4);
        let s = iou_scores(&[full.clone(), full.clone()], &[full.clone(), full.clone()]).unwrap();
        assert_eq!((s.m_iou, s.challenge_iou), (1.0, 1.0));
        let s = iou_scores(&[half.clone(), empty.clone()], &[full.clone(), empty.clone()]).unwrap();
        assert_eq!((s.m_iou, s.challenge_iou), (0.75, 0.5));
        // absent class predicted with area 10 scores 0 and stays out of challenge
        let ten = Plane::from_fn(4, 4, |y, x| u8::from(y * 4 + x < 10));
        let s = iou_scores(&[half, ten], &[full, empty]).unwrap();
        assert_eq!(s.per_class, vec![0.5, 0.0]);
        assert_eq!((s.challenge_iou, s.m_iou), (0.5, 0.25));
    }

    #[test]
    fn aji_reference_values() {
        let a = rect(6, 6, 1, 1, 3, 4);
        assert_eq!(aji(&a, &a).unwrap(), 1.0);
        assert_eq!(aji(&Plane::new(6, 6), &a).unwrap(), 0.0);
        let two = Plane::from_fn(6, 6, |y, x| u8::from(y < 2 && (x < 2 || x >= 4)));
        let one = rect(6, 6, 0, 0, 2, 2);
        assert_eq!(aji(&one, &two).unwrap(), 0.5);
    }

    #[test]
    fn components_are_four_connected() {
        let diag = Plane::from_fn(3, 3, |y, x| u8::from(y == x));
        assert_eq!(connected_components(&diag).1, 3);
        let l = Plane::from_fn(3, 3, |y, x| u8::from(y == 2 || x == 0));
        assert_eq!(connected_components(&l).1, 1);
    }

    #[test]
    fn random_instances_match_set_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| String::from(*s)).collect();
        for _ in 0..200 {
            let mut acc = MetricsAccumulator::new(&classes);
            let mut preds = BTreeMap::new();
            let mut targets = BTreeMap::new();
            for c in &classes {
                preds.insert(c.clone(), random_mask(&mut rng, 16));
                let t = if rng.random_bool(0.2) { Plane::new(16, 16) } else { random_mask(&mut rng, 16) };
                targets.insert(c.clone(), t);
            }
            acc.add_slice(&preds, &targets).unwrap();
            let r = acc.finish();

            let mut ious = Vec::new();
            let mut dices = Vec::new();
            let mut present = Vec::new();
            let (mut ac, mut au) = (0u64, 0u64);
            for c in &classes {
                let (p, t) = (set(&preds[c]), set(&targets[c]));
                let inter = p.intersection(&t).count() as f64;
                let uni = p.union(&t).count() as f64;
                let iou = if uni == 0.0 { 1.0 } else { inter / uni };
                let d = if p.len() + t.len() == 0 { 1.0 } else { 2.0 * inter / (p.len() + t.len()) as f64 };
                assert!((r.per_class_dice[c] - d).abs() <= 1e-9);
                assert!((r.per_class_iou[c] - iou).abs() <= 1e-9);
                // cross-metric identity: exact on the rational counts, to
                // rounding on the floats
                let o = acc.overlaps()[classes.iter().position(|x| x == c).unwrap()];
                assert!(o.iou_equals_dice_identity());
                let via_dice = r.per_class_dice[c] / (2.0 - r.per_class_dice[c]);
                assert!((r.per_class_iou[c] - via_dice).abs() <= 4.0 * f64::EPSILON);
                ious.push(iou);
                dices.push(d);
                if !t.is_empty() {
                    present.push(iou);
                }
                let (c1, u1) = oracle_aji(&p, &t);
                ac += c1;
                au += u1;
                let single = aji(&preds[c], &targets[c]).unwrap();
                let expect = if u1 == 0 { 1.0 } else { c1 as f64 / u1 as f64 };
                assert!((single - expect).abs() <= 1e-9);
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            assert!((r.m_iou - mean(&ious)).abs() <= 1e-9);
            assert!((r.dice - mean(&dices)).abs() <= 1e-9);
            let ch = if present.is_empty() { mean(&ious) } else { mean(&present) };
            assert!((r.challenge_iou - ch).abs() <= 1e-9);
            let aj = if au == 0 { 1.0 } else { ac as f64 / au as f64 };
            assert!((r.aji - aj).abs() <= 1e-9);
        }
    }

    #[test]
    fn pixel_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_mask(&mut rng, 16);
        let t = random_mask(&mut rng, 16);
        // a fixed bijection of pixel positions
        let perm: Vec<usize> = (0..256).map(|i| (i * 37 + 11) % 256).collect();
        let shuffle = |m: &Mask| Plane::from_vec(16, 16, perm.iter().map(|&i| m.data()[i]).collect()).unwrap();
        assert_eq!(dice_score(&p, &t).unwrap(), dice_score(&shuffle(&p), &shuffle(&t)).unwrap());
        let a = iou_scores(&[p.clone()], &[t.clone()]).unwrap();
        let b = iou_scores(&[shuffle(&p)], &[shuffle(&t)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_class_is_skipped_and_recorded() {
        let classes = vec![String::from("a"), String::from("b")];
        let mut acc = MetricsAccumulator::new(&classes);
        let m = rect(4, 4, 0, 0, 2, 2);
        let preds: BTreeMap<_, _> = [("a".into(), m.clone()), ("b".into(), m.clone())].into_iter().collect();
        let targets: BTreeMap<_, _> = [(String::from("a"), m)].into_iter().collect();
        acc.add_slice(&preds, &targets).unwrap();
        let r = acc.finish();
        assert_eq!(r.skipped.get("b"), Some(&1));
        assert_eq!(r.per_class_dice["a"], 1.0);
    }
}
