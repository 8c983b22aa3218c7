//! Bipartite matching between predictions and padded ground truth, and the
//! set-prediction training loss.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::model::{PredictionSet, PredictionVars};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Interval in normalized video time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    /// Ground-truth constructor: finite, inside `[0, 1]`, `start <= end`.
    pub fn ground_truth(start: f64, end: f64) -> Result<Self> {
        let in_unit = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        if !in_unit(start) || !in_unit(end) || start > end {
            return Err(contract_err!(
                "ground-truth segment [{start}, {end}] is not an ordered interval in [0, 1]"
            ));
        }
        Ok(Self { start, end })
    }

    /// `(min, max)` of the two endpoints.
    pub fn canonical(self) -> Self {
        Self {
            start: self.start.min(self.end),
            end: self.start.max(self.end),
        }
    }

    pub fn length(self) -> f64 {
        self.end - self.start
    }
}

impl From<(f64, f64)> for Segment {
    fn from((start, end): (f64, f64)) -> Self {
        Segment::new(start, end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    /// Zero-based action class.
    pub class: usize,
    pub segment: Segment,
}

/// Ground-truth actions of one video. The padded view appends no-action
/// entries up to the number of predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSet {
    pub instances: Vec<Instance>,
}

impl GroundTruthSet {
    pub fn new(instances: Vec<Instance>) -> Self {
        Self { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    fn check(&self, num_queries: usize, num_classes: usize) -> Result<()> {
        if self.len() > num_queries {
            return Err(contract_err!(
                "{} ground-truth instances exceed {num_queries} predictions",
                self.len()
            ));
        }
        for inst in &self.instances {
            if inst.class >= num_classes {
                return Err(contract_err!(
                    "ground-truth class {} outside 0..{num_classes}",
                    inst.class
                ));
            }
            Segment::ground_truth(inst.segment.start, inst.segment.end)?;
        }
        Ok(())
    }
}

/// Prediction index for each padded ground-truth index.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pred_for_gt: Vec<usize>,
    pub total_cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    pub iou: f64,
    pub use_l1: bool,
    pub use_iou: bool,
    /// Multiplier on the class term of padded (no-action) entries.
    pub no_action: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            iou: 3.0,
            use_l1: true,
            use_iou: true,
            no_action: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l1", self.l1),
            ("iou", self.iou),
            ("no_action", self.no_action),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(contract_err!(
                    "loss weight {name} must be finite and non-negative"
                ));
            }
        }
        Ok(())
    }
}

/// `1 − |s∩s̃| / |s∪s̃|` with the prediction canonicalized first.
pub fn iou_loss(gt: Segment, pred: Segment) -> f64 {
    let (g, p) = (gt.canonical(), pred.canonical());
    let inter = (g.end.min(p.end) - g.start.max(p.start)).max(0.0);
    let union = g.length() + p.length() - inter;
    if union > 0.0 {
        1.0 - inter / union
    } else if g == p {
        0.0
    } else {
        1.0
    }
}

pub fn segment_loss(gt: Segment, pred: Segment, w: &LossWeights) -> f64 {
    let mut loss = 0.0;
    if w.use_iou {
        loss += w.iou * iou_loss(gt, pred);
    }
    if w.use_l1 {
        loss += w.l1 * ((gt.start - pred.start).abs() + (gt.end - pred.end).abs());
    }
    loss
}

/// Cost of pairing a ground-truth entry (`None` for no-action) with one
/// prediction.
pub fn matching_cost(gt: Option<&Instance>, probs: &[f64], pred: Segment, w: &LossWeights) -> f64 {
    match gt {
        None => 0.0,
        Some(inst) => -probs[inst.class] + segment_loss(inst.segment, pred, w),
    }
}

/// Padded `N_o × N_o` cost matrix: rows are ground-truth entries, columns
/// predictions.
pub fn cost_matrix(
    gt: &GroundTruthSet,
    pred: &PredictionSet,
    w: &LossWeights,
) -> Result<Vec<Vec<f64>>> {
    let n = pred.len();
    gt.check(n, pred.num_classes())?;
    Ok((0..n)
        .map(|i| {
            let inst = gt.instances.get(i);
            (0..n)
                .map(|j| {
                    let (s, e) = pred.segment(j);
                    matching_cost(inst, pred.probs(j), Segment::new(s, e), w)
                })
                .collect()
        })
        .collect())
}

fn check_square(cost: &[Vec<f64>]) -> Result<usize> {
    let n = cost.len();
    if n == 0 {
        return Err(shape_err!("empty cost matrix"));
    }
    if cost.iter().any(|r| r.len() != n) {
        return Err(shape_err!("cost matrix must be square"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(contract_err!("cost matrix has non-finite entries"));
    }
    Ok(n)
}

fn total(cost: &[Vec<f64>], pred_for_gt: &[usize]) -> f64 {
    pred_for_gt
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .sum()
}

/// Minimum-cost bijection by the shortest augmenting path method with
/// potentials, `O(n³)`. Ties go to the lowest column index.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = check_square(cost)?;
    // 1-based arrays; column 0 is the virtual root of each augmenting search.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pred_for_gt = vec![0; n];
    for j in 1..=n {
        pred_for_gt[row_of[j] - 1] = j - 1;
    }
    let total_cost = total(cost, &pred_for_gt);
    Ok(Assignment {
        pred_for_gt,
        total_cost,
    })
}

/// Exhaustive minimum over all permutations; the lexicographically first
/// optimum wins ties.
pub fn brute_force_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = check_square(cost)?;
    if n > 8 {
        return Err(contract_err!(
            "brute-force matching is limited to n <= 8, got {n}"
        ));
    }
    let mut best: Option<Assignment> = None;
    for perm in (0..n).permutations(n) {
        let c = total(cost, &perm);
        if best.as_ref().map_or(true, |b| c < b.total_cost) {
            best = Some(Assignment {
                pred_for_gt: perm,
                total_cost: c,
            });
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Matches on detached values, then returns the loss at that matching.
pub fn hungarian_loss(
    tape: &mut Tape,
    gt: &GroundTruthSet,
    pred: PredictionVars,
    w: &LossWeights,
) -> Result<(Var, Assignment)> {
    let snapshot = PredictionSet {
        class_probs: tape.value(pred.class_probs).clone(),
        segments: tape.value(pred.segments).clone(),
    };
    let assignment = hungarian_match(&cost_matrix(gt, &snapshot, w)?)?;
    let loss = loss_at_assignment(tape, gt, pred, &assignment, w)?;
    Ok((loss, assignment))
}

/// `Σ_i [−w_i log p̃_{φ(i)}(c_i) + 1{c_i ≠ ∅} segment_loss]` for a fixed
/// matching `φ`.
pub fn loss_at_assignment(
    tape: &mut Tape,
    gt: &GroundTruthSet,
    pred: PredictionVars,
    a: &Assignment,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let (n, width) = tape.dims2(pred.class_probs)?;
    if tape.shape(pred.segments) != [n, 2] {
        return Err(shape_err!(
            "segments {:?} do not match {n} predictions",
            tape.shape(pred.segments)
        ));
    }
    let num_classes = width - 1;
    gt.check(n, num_classes)?;
    if a.pred_for_gt.len() != n || !a.pred_for_gt.iter().copied().sorted().eq(0..n) {
        return Err(contract_err!(
            "assignment is not a bijection on {n} predictions"
        ));
    }

    let picks: Vec<usize> = (0..n)
        .map(|i| {
            let class = gt.instances.get(i).map_or(num_classes, |inst| inst.class);
            a.pred_for_gt[i] * width + class
        })
        .collect();
    let factors: Vec<f64> = (0..n)
        .map(|i| if i < gt.len() { -1.0 } else { -w.no_action })
        .collect();
    let p = tape.gather(pred.class_probs, &picks)?;
    let logp = tape.log_clamped(p, LOG_FLOOR);
    let weighted = tape.mul_const(logp, factors)?;
    let mut loss = tape.sum(weighted);

    if !gt.is_empty() && (w.use_iou || w.use_l1) {
        let coords: Vec<usize> = (0..gt.len())
            .flat_map(|i| [2 * a.pred_for_gt[i], 2 * a.pred_for_gt[i] + 1])
            .collect();
        let matched = tape.gather(pred.segments, &coords)?;
        if w.use_iou {
            let pairs = tape.reshape(matched, vec![gt.len(), 2])?;
            let targets: Vec<(f64, f64)> = gt
                .instances
                .iter()
                .map(|i| (i.segment.start, i.segment.end))
                .collect();
            let iou = tape.iou_loss(pairs, &targets)?;
            let iou = tape.sum(iou);
            let iou = tape.scale(iou, w.iou);
            loss = tape.add(loss, iou)?;
        }
        if w.use_l1 {
            let flat: Vec<f64> = gt
                .instances
                .iter()
                .flat_map(|i| [i.segment.start, i.segment.end])
                .collect();
            let target = tape.constant(Tensor::vector(flat));
            let diff = tape.sub(matched, target)?;
            let l1 = tape.l1_norm(diff);
            let l1 = tape.scale(l1, w.l1);
            loss = tape.add(loss, l1)?;
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests;
