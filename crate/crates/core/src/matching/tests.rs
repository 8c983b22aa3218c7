use super::*;
use crate::autodiff::compare_with_central_differences;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seg(a: f64, b: f64) -> Segment {
    Segment::new(a, b)
}

fn inst(class: usize, a: f64, b: f64) -> Instance {
    Instance {
        class,
        segment: seg(a, b),
    }
}

fn random_cost(rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..n).map(|_| rng.gen_range(-2.0..3.0)).collect())
        .collect()
}

/// Random prediction set: softmax-normalized rows and segments in (0, 1).
fn random_predictions(rng: &mut impl Rng, n: usize, classes: usize) -> PredictionSet {
    let mut probs = Vec::new();
    for _ in 0..n {
        let raw: Vec<f64> = (0..=classes).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|r| r / z));
    }
    let segs = (0..2 * n).map(|_| rng.gen_range(0.02..0.98)).collect();
    PredictionSet {
        class_probs: Tensor::matrix(n, classes + 1, probs).unwrap(),
        segments: Tensor::matrix(n, 2, segs).unwrap(),
    }
}

fn random_gt(rng: &mut impl Rng, count: usize, classes: usize) -> GroundTruthSet {
    GroundTruthSet::new(
        (0..count)
            .map(|_| {
                let a: f64 = rng.gen_range(0.0..0.9);
                let b = rng.gen_range(a + 0.01..1.0);
                inst(rng.gen_range(0..classes), a, b)
            })
            .collect(),
    )
}

fn loss_value(gt: &GroundTruthSet, pred: &PredictionSet, w: &LossWeights) -> (f64, Assignment) {
    let mut tape = Tape::new();
    let vars = PredictionVars {
        class_probs: tape.constant(pred.class_probs.clone()),
        segments: tape.constant(pred.segments.clone()),
    };
    let (loss, a) = hungarian_loss(&mut tape, gt, vars, w).unwrap();
    (tape.value(loss).item(), a)
}

/// Loss computed with plain scalar arithmetic for a given matching.
fn scalar_loss(gt: &GroundTruthSet, pred: &PredictionSet, a: &Assignment, w: &LossWeights) -> f64 {
    let c = pred.num_classes();
    (0..pred.len())
        .map(|i| {
            let j = a.pred_for_gt[i];
            match gt.instances.get(i) {
                Some(g) => {
                    let (s, e) = pred.segment(j);
                    -pred.probs(j)[g.class].max(LOG_FLOOR).ln()
                        + segment_loss(g.segment, seg(s, e), w)
                }
                None => -w.no_action * pred.probs(j)[c].max(LOG_FLOOR).ln(),
            }
        })
        .sum()
}

#[test]
fn iou_loss_examples() {
    assert_eq!(iou_loss(seg(0.2, 0.6), seg(0.2, 0.6)), 0.0);
    assert_eq!(iou_loss(seg(0.1, 0.2), seg(0.5, 0.7)), 1.0);
    assert!((iou_loss(seg(0.2, 0.6), seg(0.4, 0.8)) - 2.0 / 3.0).abs() < 1e-12);
    // Reversed prediction is canonicalized.
    assert!((iou_loss(seg(0.2, 0.6), seg(0.8, 0.4)) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(iou_loss(seg(0.3, 0.3), seg(0.3, 0.3)), 0.0);
    assert_eq!(iou_loss(seg(0.3, 0.3), seg(0.4, 0.4)), 1.0);
}

#[test]
fn segment_loss_examples() {
    let w = LossWeights::default();
    let (s, p) = (seg(0.2, 0.6), seg(0.4, 0.8));
    assert!((segment_loss(s, p, &w) - 4.0).abs() < 1e-12);
    assert_eq!(segment_loss(s, s, &w), 0.0);
    let no_iou = LossWeights {
        use_iou: false,
        ..w
    };
    assert!((segment_loss(s, p, &no_iou) - 2.0).abs() < 1e-12);
    let no_l1 = LossWeights { use_l1: false, ..w };
    assert!((segment_loss(s, p, &no_l1) - 2.0).abs() < 1e-12);
}

#[test]
fn matching_cost_examples() {
    let w = LossWeights::default();
    let g = inst(1, 0.2, 0.6);
    assert_eq!(
        matching_cost(None, &[0.3, 0.3, 0.4], seg(0.9, 0.1), &w),
        0.0
    );
    assert_eq!(
        matching_cost(Some(&g), &[0.0, 1.0, 0.0], seg(0.2, 0.6), &w),
        -1.0
    );
    assert!((matching_cost(Some(&g), &[0.25, 0.5, 0.25], seg(0.4, 0.8), &w) - 3.5).abs() < 1e-12);
}

#[test]
fn hungarian_small_examples() {
    let a = hungarian_match(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
    assert_eq!(a.pred_for_gt, vec![1, 0]);
    assert_eq!(a.total_cost, 4.0);
    let diag = vec![
        vec![0.0, 5.0, 6.0],
        vec![7.0, 1.0, 9.0],
        vec![4.0, 8.0, 2.0],
    ];
    assert_eq!(hungarian_match(&diag).unwrap().pred_for_gt, vec![0, 1, 2]);
    assert_eq!(
        brute_force_match(&[vec![3.0]]).unwrap().pred_for_gt,
        vec![0]
    );
    let flat = vec![vec![1.5; 4]; 4];
    assert_eq!(hungarian_match(&flat).unwrap().total_cost, 6.0);
    assert_eq!(brute_force_match(&flat).unwrap().total_cost, 6.0);
}

#[test]
fn hungarian_rejects_bad_input() {
    assert!(hungarian_match(&[vec![1.0, f64::NAN], vec![0.0, 0.0]]).is_err());
    assert!(hungarian_match(&[vec![1.0, 2.0]]).is_err());
    assert!(brute_force_match(&vec![vec![0.0; 9]; 9]).is_err());
}

#[test]
fn hungarian_equals_brute_force_on_random_7x7() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = random_cost(&mut rng, 7);
        let h = hungarian_match(&cost).unwrap();
        let b = brute_force_match(&cost).unwrap();
        assert_eq!(h.total_cost, b.total_cost, "seed {seed}");
    }
}

#[test]
fn no_transposition_improves_the_matching() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.gen_range(2..12);
        let cost = random_cost(&mut rng, n);
        let a = hungarian_match(&cost).unwrap();
        for i in 0..n {
            for k in i + 1..n {
                let (ji, jk) = (a.pred_for_gt[i], a.pred_for_gt[k]);
                let delta = cost[i][jk] + cost[k][ji] - cost[i][ji] - cost[k][jk];
                assert!(
                    delta >= -1e-12,
                    "seed {seed}: swapping {i},{k} improves by {delta}"
                );
            }
        }
    }
}

#[test]
fn hungarian_is_deterministic_under_ties() {
    let cost = vec![vec![0.0; 5]; 5];
    let a = hungarian_match(&cost).unwrap();
    assert_eq!(a, hungarian_match(&cost).unwrap());
}

#[test]
fn perfect_predictions_have_near_zero_loss() {
    let gt = GroundTruthSet::new(vec![inst(0, 0.1, 0.3), inst(2, 0.5, 0.9)]);
    let probs = vec![
        0.0, 0.0, 0.0, 1.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0, //
        1.0, 0.0, 0.0, 0.0,
    ];
    let pred = PredictionSet {
        class_probs: Tensor::matrix(4, 4, probs).unwrap(),
        segments: Tensor::matrix(4, 2, vec![0.5, 0.5, 0.5, 0.9, 0.2, 0.2, 0.1, 0.3]).unwrap(),
    };
    let (loss, a) = loss_value(&gt, &pred, &LossWeights::default());
    assert_eq!(&a.pred_for_gt[..2], &[3, 1]);
    assert!(loss.abs() <= 4.0 * LOG_FLOOR, "{loss}");
}

#[test]
fn matcher_picks_the_confident_prediction() {
    let gt = GroundTruthSet::new(vec![inst(0, 0.2, 0.6)]);
    let pred = PredictionSet {
        class_probs: Tensor::matrix(2, 2, vec![0.1, 0.9, 0.8, 0.2]).unwrap(),
        segments: Tensor::matrix(2, 2, vec![0.4, 0.8, 0.4, 0.8]).unwrap(),
    };
    let w = LossWeights::default();
    let (loss, a) = loss_value(&gt, &pred, &w);
    assert_eq!(a.pred_for_gt, vec![1, 0]);
    // −log 0.8 + 3·(2/3) + 5·0.4, plus −log 0.9 for the unmatched slot.
    let expected = -(0.8f64).ln() + 2.0 + 2.0 - (0.9f64).ln();
    assert!((loss - expected).abs() < 1e-12);
    // Brute force over both permutations agrees on the choice.
    let costs = cost_matrix(&gt, &pred, &w).unwrap();
    assert_eq!(brute_force_match(&costs).unwrap().pred_for_gt, vec![1, 0]);
}

#[test]
fn loss_matches_scalar_oracle_and_is_permutation_invariant() {
    let w = LossWeights {
        no_action: 0.7,
        ..LossWeights::default()
    };
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..8);
        let pred = random_predictions(&mut rng, n, 3);
        let count = rng.gen_range(0..=n);
        let gt = random_gt(&mut rng, count, 3);
        let (loss, a) = loss_value(&gt, &pred, &w);
        assert!((loss - scalar_loss(&gt, &pred, &a, &w)).abs() < 1e-10);

        let mut shuffled = gt.clone();
        shuffled.instances.reverse();
        assert!((loss_value(&shuffled, &pred, &w).0 - loss).abs() < 1e-9);

        // Relabel predictions by reversing row order.
        let rev = |t: &Tensor| {
            Tensor::from_rows(&(0..n).rev().map(|i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let relabeled = PredictionSet {
            class_probs: rev(&pred.class_probs),
            segments: rev(&pred.segments),
        };
        assert!((loss_value(&gt, &relabeled, &w).0 - loss).abs() < 1e-9);

        if n <= 7 {
            let costs = cost_matrix(&gt, &pred, &w).unwrap();
            assert_eq!(
                hungarian_match(&costs).unwrap().total_cost,
                brute_force_match(&costs).unwrap().total_cost
            );
        }
    }
}

#[test]
fn too_many_ground_truth_instances_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pred = random_predictions(&mut rng, 2, 2);
    let gt = random_gt(&mut rng, 3, 2);
    assert!(matches!(
        cost_matrix(&gt, &pred, &LossWeights::default()),
        Err(crate::Error::Contract(_))
    ));
    let bad_class = GroundTruthSet::new(vec![inst(2, 0.1, 0.2)]);
    assert!(cost_matrix(&bad_class, &pred, &LossWeights::default()).is_err());
}

#[test]
fn loss_gradient_passes_check_at_fixed_matching() {
    let w = LossWeights::default();
    let mut checked = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = 5;
        let pred = random_predictions(&mut rng, n, 3);
        let gt = random_gt(&mut rng, 3, 3);
        let (_, a) = loss_value(&gt, &pred, &w);

        let build = |tape: &mut Tape,
                     probs: &[f64],
                     segs: &[f64],
                     track: bool|
         -> Result<(Var, Var, Var)> {
            let p = tape.leaf(Tensor::matrix(n, 4, probs.to_vec())?, track);
            let s = tape.leaf(Tensor::matrix(n, 2, segs.to_vec())?, track);
            let loss = loss_at_assignment(
                tape,
                &gt,
                PredictionVars {
                    class_probs: p,
                    segments: s,
                },
                &a,
                &w,
            )?;
            Ok((loss, p, s))
        };
        let probs = pred.class_probs.data().to_vec();
        let segs = pred.segments.data().to_vec();
        let mut tape = Tape::new();
        let (loss, pv, sv) = build(&mut tape, &probs, &segs, true).unwrap();
        tape.backward(loss).unwrap();
        if tape.kink_margin() <= 1e-3 {
            continue;
        }
        let mut analytic = tape.grad(pv).unwrap().to_vec();
        analytic.extend_from_slice(tape.grad(sv).unwrap());
        let mut base = probs.clone();
        base.extend_from_slice(&segs);
        let report = compare_with_central_differences(&base, &analytic, 1e-6, |x| {
            let mut t = Tape::new();
            let (l, _, _) = build(&mut t, &x[..4 * n], &x[4 * n..], false)?;
            Ok(t.value(l).item())
        })
        .unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "seed {seed}: {}",
            report.max_rel_error
        );
        checked += 1;
    }
    assert!(checked >= 5, "{checked}");
}

proptest! {
    #[test]
    fn iou_loss_is_bounded_and_symmetric(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, d in 0.0f64..1.0) {
        let l = iou_loss(seg(a, b), seg(c, d));
        prop_assert!((0.0..=1.0).contains(&l));
        prop_assert!((l - iou_loss(seg(c, d), seg(a, b))).abs() < 1e-12);
        prop_assert!((iou_loss(seg(a.min(b), a.max(b)), seg(a.min(b), a.max(b)))).abs() < 1e-12);
    }

    #[test]
    fn segment_loss_zero_only_on_equality(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, d in 0.0f64..1.0) {
        let w = LossWeights::default();
        let l = segment_loss(seg(a, b), seg(c, d), &w);
        prop_assert!(l >= 0.0);
        if (a, b) != (c, d) {
            prop_assert!(l > 0.0);
        }
    }

    #[test]
    fn hungarian_matches_brute_force(seed in 0u64..10_000, n in 1usize..=7) {
        let cost = random_cost(&mut ChaCha8Rng::seed_from_u64(seed), n);
        prop_assert_eq!(hungarian_match(&cost).unwrap().total_cost, brute_force_match(&cost).unwrap().total_cost);
    }
}
