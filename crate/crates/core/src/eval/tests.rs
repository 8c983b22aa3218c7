use super::*;
use crate::autodiff::Tensor;
use crate::matching::Instance;
use proptest::prelude::*;

fn det(video: &str, query: usize, class: usize, score: f64, start: f64, end: f64) -> Detection {
    Detection {
        video: video.into(),
        query,
        class,
        score,
        start,
        end,
    }
}

fn gt(video: &str, class: usize, start: f64, end: f64) -> LabeledSegment {
    LabeledSegment {
        video: video.into(),
        class,
        start,
        end,
    }
}

fn hand_fixture() -> (Vec<Detection>, Vec<LabeledSegment>) {
    let gts = vec![
        gt("v1", 0, 0.1, 0.3),
        gt("v1", 0, 0.5, 0.7),
        gt("v2", 0, 0.2, 0.4),
        gt("v2", 1, 0.6, 0.9),
        gt("v3", 1, 0.0, 0.5),
    ];
    let dets = vec![
        det("v1", 0, 0, 0.9, 0.1, 0.3),
        det("v2", 0, 0, 0.8, 0.24, 0.44),
        det("v1", 1, 0, 0.7, 0.1, 0.3),
        det("v3", 0, 0, 0.6, 0.5, 0.7),
        det("v1", 2, 0, 0.5, 0.5, 0.8),
        det("v3", 1, 1, 0.95, 0.0, 0.4),
        det("v2", 1, 1, 0.4, 0.7, 0.9),
        det("v1", 3, 1, 0.4, 0.6, 0.9),
    ];
    (dets, gts)
}

/// Area under the interpolated PR curve from a hit sequence: each true
/// positive contributes `1/G` times the best precision at any later rank.
fn pr_area(hits: &[bool], num_gt: usize) -> f64 {
    let precision: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    (0..hits.len())
        .filter(|&k| hits[k])
        .map(|k| precision[k..].iter().cloned().fold(0.0, f64::max) / num_gt as f64)
        .sum()
}

fn predictions(probs: Vec<Vec<f64>>, segs: Vec<(f64, f64)>) -> PredictionSet {
    let n = probs.len();
    let c = probs[0].len();
    PredictionSet {
        class_probs: Tensor::matrix(n, c, probs.concat()).unwrap(),
        segments: Tensor::matrix(n, 2, segs.iter().flat_map(|&(a, b)| [a, b]).collect()).unwrap(),
    }
}

#[test]
fn temporal_iou_examples() {
    let s = Segment::new;
    assert_eq!(temporal_iou(s(0.2, 0.6), s(0.2, 0.6)), 1.0);
    assert_eq!(temporal_iou(s(0.1, 0.2), s(0.3, 0.4)), 0.0);
    assert!((temporal_iou(s(0.2, 0.6), s(0.4, 0.8)) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn filtering_drops_no_action_and_low_scores() {
    let all_empty = predictions(vec![vec![0.1, 0.2, 0.7]; 3], vec![(0.1, 0.2); 3]);
    assert!(filter_predictions("v", &all_empty, 0.0).is_empty());

    let p = predictions(
        vec![
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.1, 0.8],
            vec![0.4, 0.4, 0.2],
        ],
        vec![(0.3, 0.1), (0.2, 0.5), (0.0, 1.0), (0.4, 0.6)],
    );
    let d = filter_predictions("v", &p, 0.0);
    assert_eq!(
        d.iter().map(|d| (d.query, d.class)).collect::<Vec<_>>(),
        vec![(0, 0), (1, 1), (3, 0)]
    );
    assert_eq!((d[0].start, d[0].end, d[0].score), (0.1, 0.3, 0.6));
    assert_eq!(filter_predictions("v", &p, 0.45).len(), 2);

    let tie = predictions(vec![vec![1.0 / 3.0; 3]], vec![(0.1, 0.2)]);
    assert_eq!(filter_predictions("v", &tie, 0.0)[0].class, 0);
}

#[test]
fn single_detection_threshold_examples() {
    let d = det("v", 0, 0, 0.9, 0.4, 0.8);
    let g = gt("v", 0, 0.2, 0.6);
    assert_eq!(average_precision(&[&d], &[&g], 0.5), Some(0.0));
    assert_eq!(average_precision(&[&d], &[&g], 0.3), Some(1.0));
    assert_eq!(average_precision(&[&d], &[], 0.3), None);
}

#[test]
fn duplicate_detection_is_a_false_positive() {
    let g = gt("v", 0, 0.2, 0.6);
    let good = det("v", 0, 0, 0.9, 0.2, 0.6);
    let dup = det("v", 1, 0, 0.5, 0.2, 0.6);
    assert_eq!(average_precision(&[&dup, &good], &[&g], 0.5), Some(1.0));
    // When the duplicate outranks a better box of another gt, precision drops.
    let g2 = gt("v", 0, 0.7, 0.9);
    let second = det("v", 2, 0, 0.4, 0.7, 0.9);
    let ap = average_precision(&[&good, &dup, &second], &[&g, &g2], 0.5).unwrap();
    assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn hand_fixture_matches_pr_oracle() {
    let (dets, gts) = hand_fixture();
    let report = evaluate(&dets, &gts, 2, &DEFAULT_THRESHOLDS).unwrap();

    // Ranked hits per class, written out by hand.
    let class0_loose = [true, true, false, false, true];
    let class0_strict = [true, false, false, false, false];
    let class1_loose = [true, false, true];
    let class1_strict = [true, false, false];
    for (t, &thr) in DEFAULT_THRESHOLDS.iter().enumerate() {
        let strict = thr > 0.65;
        let a0 = pr_area(
            if strict {
                &class0_strict
            } else {
                &class0_loose
            },
            3,
        );
        let a1 = pr_area(
            if strict {
                &class1_strict
            } else {
                &class1_loose
            },
            2,
        );
        assert!(
            (report.class_ap[0][t].unwrap() - a0).abs() < 1e-12,
            "class 0 @ {thr}"
        );
        assert!(
            (report.class_ap[1][t].unwrap() - a1).abs() < 1e-12,
            "class 1 @ {thr}"
        );
        assert!((report.map[t] - (a0 + a1) / 2.0).abs() < 1e-12);
    }
    assert!((report.map_at(0.5).unwrap() - 0.85).abs() < 1e-12);
    assert!((report.map_at(0.7).unwrap() - 5.0 / 12.0).abs() < 1e-12);
    assert!((report.average_map - (4.0 * 0.85 + 5.0 / 12.0) / 5.0).abs() < 1e-12);
    assert_eq!(report.ground_truth, vec![3, 2]);
    assert_eq!(report.detections, vec![5, 3]);
}

#[test]
fn replayed_ground_truth_scores_one() {
    let (_, gts) = hand_fixture();
    let dets: Vec<Detection> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| det(&g.video, i, g.class, 1.0, g.start, g.end))
        .collect();
    let report = evaluate(&dets, &gts, 3, &DEFAULT_THRESHOLDS).unwrap();
    assert!(report.map.iter().all(|&m| m == 1.0));
    assert_eq!(report.class_ap[2], vec![None; 5]);
    let none = evaluate(&[], &gts, 2, &DEFAULT_THRESHOLDS).unwrap();
    assert!(none.map.iter().all(|&m| m == 0.0));
    assert!(evaluate(&dets, &[], 2, &DEFAULT_THRESHOLDS).is_err());
}

#[test]
fn segmentation_error_examples() {
    let w = LossWeights::default();
    let gt = GroundTruthSet::new(vec![
        Instance {
            class: 0,
            segment: Segment::new(0.1, 0.2),
        },
        Instance {
            class: 1,
            segment: Segment::new(0.4, 0.9),
        },
    ]);
    let exact = predictions(
        vec![
            vec![0.9, 0.05, 0.05],
            vec![0.05, 0.9, 0.05],
            vec![0.05, 0.05, 0.9],
        ],
        vec![(0.1, 0.2), (0.4, 0.9), (0.5, 0.5)],
    );
    let pts = segmentation_errors(&gt, &exact, &w).unwrap();
    assert!(pts.iter().all(|p| p.l1_error == 0.0));
    assert!((pts[1].duration - 0.5).abs() < 1e-12);

    let delta = 0.03;
    let shifted = predictions(
        vec![
            vec![0.9, 0.05, 0.05],
            vec![0.05, 0.9, 0.05],
            vec![0.05, 0.05, 0.9],
        ],
        vec![
            (0.1 + delta, 0.2 + delta),
            (0.4 + delta, 0.9 + delta),
            (0.5, 0.5),
        ],
    );
    for p in segmentation_errors(&gt, &shifted, &w).unwrap() {
        assert!((p.l1_error - 2.0 * delta).abs() < 1e-12);
    }
}

#[test]
fn binned_errors_follow_constructed_trend() {
    // Shorter instances get larger errors.
    let points: Vec<ErrorPoint> = (1..100)
        .map(|i| i as f64 / 100.0)
        .map(|d| ErrorPoint {
            duration: d,
            l1_error: 0.2 * (1.0 - d),
        })
        .collect();
    let bins = bin_errors(&points, 5);
    assert_eq!(bins.len(), 5);
    assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 99);
    let means: Vec<f64> = bins.iter().map(|b| b.mean_error.unwrap()).collect();
    assert!(means.windows(2).all(|w| w[0] > w[1]), "{means:?}");
    assert_eq!(bin_errors(&[], 3)[1].mean_error, None);
}

fn arb_fixture() -> impl Strategy<Value = (Vec<Detection>, Vec<LabeledSegment>)> {
    let seg = (0.0f64..0.9, 0.02f64..0.5).prop_map(|(a, l)| (a, (a + l).min(1.0)));
    let gts = prop::collection::vec((0usize..3, seg.clone()), 1..8).prop_map(|v| {
        v.into_iter()
            .map(|(vid, (a, b))| gt(&format!("v{vid}"), 0, a, b))
            .collect::<Vec<_>>()
    });
    let dets = prop::collection::vec((0usize..3, 0.01f64..1.0, seg), 0..12).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(q, (vid, s, (a, b)))| det(&format!("v{vid}"), q, 0, s, a, b))
            .collect::<Vec<_>>()
    });
    (dets, gts)
}

proptest! {
    #[test]
    fn ap_is_bounded_monotone_in_threshold_and_scale_free((dets, gts) in arb_fixture()) {
        let d: Vec<&Detection> = dets.iter().collect();
        let g: Vec<&LabeledSegment> = gts.iter().collect();
        let mut prev = f64::INFINITY;
        for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let ap = average_precision(&d, &g, t).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!(ap <= prev + 1e-12);
            prev = ap;
        }
        let rescaled: Vec<Detection> = dets.iter().map(|x| Detection { score: x.score.powi(3) * 0.5, ..x.clone() }).collect();
        let r: Vec<&Detection> = rescaled.iter().collect();
        prop_assert_eq!(average_precision(&d, &g, 0.5), average_precision(&r, &g, 0.5));
    }
}
