//! Turning prediction sets into detections, mAP at temporal-IoU thresholds,
//! and segmentation error against instance duration.

use serde::{Deserialize, Serialize};

use crate::data::{augment_features, AugmentConfig, AugmentMode, VideoRecord};
use crate::error::{contract_err, Result};
use crate::matching::{cost_matrix, hungarian_match, GroundTruthSet, LossWeights, Segment};
use crate::model::{ActivityGraphTransformer, PredictionSet};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

/// One scored action proposal, in normalized time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video: String,
    /// Query node that produced it; orders detections with equal score.
    pub query: usize,
    pub class: usize,
    pub score: f64,
    pub start: f64,
    pub end: f64,
}

impl Detection {
    pub fn segment(&self) -> Segment {
        Segment::new(self.start, self.end)
    }
}

/// A ground-truth instance tagged with its video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSegment {
    pub video: String,
    pub class: usize,
    pub start: f64,
    pub end: f64,
}

impl LabeledSegment {
    pub fn segment(&self) -> Segment {
        Segment::new(self.start, self.end)
    }
}

pub fn ground_truth(records: &[VideoRecord]) -> Vec<LabeledSegment> {
    records
        .iter()
        .flat_map(|r| {
            r.targets()
                .instances
                .into_iter()
                .map(move |i| LabeledSegment {
                    video: r.id.clone(),
                    class: i.class,
                    start: i.segment.start,
                    end: i.segment.end,
                })
        })
        .collect()
}

/// Argmax class per query (lowest index wins ties); no-action and
/// low-scoring queries are dropped.
pub fn filter_predictions(
    video: &str,
    pred: &PredictionSet,
    score_threshold: f64,
) -> Vec<Detection> {
    let no_action = pred.num_classes();
    (0..pred.len())
        .filter_map(|q| {
            let probs = pred.probs(q);
            let (class, &score) = probs
                .iter()
                .enumerate()
                .fold(
                    (0, &probs[0]),
                    |best, (c, p)| if *p > *best.1 { (c, p) } else { best },
                );
            if class == no_action || score < score_threshold {
                return None;
            }
            let s = Segment::from(pred.segment(q)).canonical();
            Some(Detection {
                video: video.to_string(),
                query: q,
                class,
                score,
                start: s.start,
                end: s.end,
            })
        })
        .collect()
}

pub fn temporal_iou(a: Segment, b: Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union > 0.0 {
        inter / union
    } else if a == b {
        1.0
    } else {
        0.0
    }
}

/// Score order used everywhere: score descending, then video id, then query.
fn ranked<'a>(dets: impl IntoIterator<Item = &'a Detection>) -> Vec<&'a Detection> {
    let mut v: Vec<&Detection> = dets.into_iter().collect();
    v.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.video.cmp(&b.video))
            .then_with(|| a.query.cmp(&b.query))
    });
    v
}

/// True-positive flags for detections in ranked order.
fn greedy_hits(ranked: &[&Detection], gts: &[&LabeledSegment], threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    ranked
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.video != d.video {
                    continue;
                }
                let iou = temporal_iou(d.segment(), gt.segment());
                if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP for one class. `None` when there is no ground
/// truth to recall.
pub fn average_precision(
    dets: &[&Detection],
    gts: &[&LabeledSegment],
    threshold: f64,
) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let ranked = ranked(dets.iter().copied());
    let hits = greedy_hits(&ranked, gts, threshold);
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// `class_ap[c][t]`; `None` for classes without ground truth.
    pub class_ap: Vec<Vec<Option<f64>>>,
    /// Mean AP over classes with ground truth, per threshold.
    pub map: Vec<f64>,
    pub average_map: f64,
    pub detections: Vec<usize>,
    pub ground_truth: Vec<usize>,
}

impl EvalReport {
    /// mAP at `threshold`, if it was evaluated.
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-12)
            .map(|i| self.map[i])
    }
}

pub fn evaluate(
    dets: &[Detection],
    gts: &[LabeledSegment],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(contract_err!(
            "evaluation needs at least one ground-truth instance"
        ));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(contract_err!(
            "tIoU thresholds must be a non-empty list in [0, 1]"
        ));
    }
    if let Some(g) = gts.iter().find(|g| g.class >= num_classes) {
        return Err(contract_err!(
            "ground-truth class {} outside 0..{num_classes}",
            g.class
        ));
    }
    let class_ap: Vec<Vec<Option<f64>>> = (0..num_classes)
        .map(|c| {
            let d: Vec<&Detection> = dets.iter().filter(|d| d.class == c).collect();
            let g: Vec<&LabeledSegment> = gts.iter().filter(|g| g.class == c).collect();
            thresholds
                .iter()
                .map(|&t| average_precision(&d, &g, t))
                .collect()
        })
        .collect();
    let map: Vec<f64> = (0..thresholds.len())
        .map(|t| {
            let valid: Vec<f64> = class_ap.iter().filter_map(|row| row[t]).collect();
            valid.iter().sum::<f64>() / valid.len() as f64
        })
        .collect();
    let average_map = map.iter().sum::<f64>() / map.len() as f64;
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        class_ap,
        map,
        average_map,
        detections: (0..num_classes)
            .map(|c| dets.iter().filter(|d| d.class == c).count())
            .collect(),
        ground_truth: (0..num_classes)
            .map(|c| gts.iter().filter(|g| g.class == c).count())
            .collect(),
    })
}

/// Eval-mode prediction set for one record (subsampled to the positional
/// table when longer).
pub fn predict_record(
    model: &ActivityGraphTransformer,
    record: &VideoRecord,
) -> Result<PredictionSet> {
    let cfg = AugmentConfig {
        max_positions: model.config().max_positions,
        repeat: 1,
        mode: AugmentMode::Eval,
    };
    // Eval augmentation draws nothing from the generator.
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let features = augment_features(&record.features, &cfg, &mut rng)?;
    model.predict(&features)
}

pub fn detect(
    model: &ActivityGraphTransformer,
    records: &[VideoRecord],
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(filter_predictions(
            &r.id,
            &predict_record(model, r)?,
            score_threshold,
        ));
    }
    Ok(out)
}

pub fn evaluate_model(
    model: &ActivityGraphTransformer,
    records: &[VideoRecord],
    score_threshold: f64,
    thresholds: &[f64],
) -> Result<EvalReport> {
    let dets = detect(model, records, score_threshold)?;
    evaluate(
        &dets,
        &ground_truth(records),
        model.config().num_classes,
        thresholds,
    )
}

/// Matched ground-truth duration and the L1 distance of its prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorPoint {
    pub duration: f64,
    pub l1_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_error: Option<f64>,
}

/// One point per ground-truth instance, paired through the training matcher.
pub fn segmentation_errors(
    gt: &GroundTruthSet,
    pred: &PredictionSet,
    weights: &LossWeights,
) -> Result<Vec<ErrorPoint>> {
    let assignment = hungarian_match(&cost_matrix(gt, pred, weights)?)?;
    Ok(gt
        .instances
        .iter()
        .zip(&assignment.pred_for_gt)
        .map(|(inst, &j)| {
            let (s, e) = pred.segment(j);
            ErrorPoint {
                duration: inst.segment.length(),
                l1_error: (inst.segment.start - s).abs() + (inst.segment.end - e).abs(),
            }
        })
        .collect())
}

pub fn segmentation_error_analysis(
    model: &ActivityGraphTransformer,
    records: &[VideoRecord],
    weights: &LossWeights,
) -> Result<Vec<ErrorPoint>> {
    let mut points = Vec::new();
    for r in records {
        points.extend(segmentation_errors(
            &r.targets(),
            &predict_record(model, r)?,
            weights,
        )?);
    }
    Ok(points)
}

/// Equal-width duration bins over `[0, 1]`; the last bin is closed.
pub fn bin_errors(points: &[ErrorPoint], bins: usize) -> Vec<ErrorBin> {
    let bins = bins.max(1);
    let mut sums = vec![(0usize, 0.0); bins];
    for p in points {
        let b = ((p.duration * bins as f64) as usize).min(bins - 1);
        sums[b].0 += 1;
        sums[b].1 += p.l1_error;
    }
    (0..bins)
        .map(|b| {
            let (count, total) = sums[b];
            ErrorBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count,
                mean_error: (count > 0).then(|| total / count as f64),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
