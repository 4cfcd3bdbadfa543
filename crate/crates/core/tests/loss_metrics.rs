mod common;

use common::rng;
use focusalpha::loss::{
    all_wrap, all_wrap_derivative, bace, evaluate, hybrid, loss_node, tversky_index, LossConfig,
    LossWrapper, SoftCounts,
};
use focusalpha::metrics::{metrics, roc_auc, ConfusionCounts, Metrics};
use focusalpha::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn balanced_cross_entropy_single_pixels() {
    assert!(close(bace(&[1.0], &[0.5], 0.7), 0.485203, 1e-6));
    assert!(close(bace(&[0.0], &[0.5], 0.7), 0.207944, 1e-6));
    assert!(bace(&[1.0, 0.0], &[1.0, 0.0], 0.7) < 1e-6);
    assert!(bace(&[1.0], &[0.0], 0.7).is_finite());
}

#[test]
fn half_weight_is_half_the_plain_cross_entropy() {
    let mut r = rng(1);
    let p: Vec<f64> = (0..50).map(|_| f64::from(r.gen_bool(0.4) as u8)).collect();
    let q: Vec<f64> = (0..50).map(|_| r.gen_range(0.01..0.99)).collect();
    let bce: f64 = -p
        .iter()
        .zip(&q)
        .map(|(p, q)| p * q.ln() + (1.0 - p) * (1.0 - q).ln())
        .sum::<f64>()
        / 50.0;
    assert!(close(bace(&p, &q, 0.5), 0.5 * bce, 1e-12));
}

#[test]
fn tversky_index_examples() {
    let c = SoftCounts::from_probs(&[1.0, 1.0, 1.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 1.0, 0.0]);
    assert_eq!(
        c,
        SoftCounts {
            tp: 2.0,
            fp: 1.0,
            fn_: 1.0
        }
    );
    assert!(close(tversky_index(c, 0.3, 0.7), 2.0 / 3.0, 1e-15));
    // alpha = beta = 0.5 is the Dice coefficient.
    assert!(close(tversky_index(c, 0.5, 0.5), 2.0 / 3.0, 1e-15));
    assert_eq!(tversky_index(SoftCounts::default(), 0.3, 0.7), 1.0);
}

#[test]
fn hybrid_loss_toy_example() {
    let cfg = LossConfig::default();
    let (p, q) = ([1.0, 0.0], [0.5, 0.5]);
    let b = (0.7 * 2f64.ln() + 0.3 * 2f64.ln()) / 2.0;
    let ti = 0.5 / (0.5 + 0.3 * 0.5 + 0.7 * 0.5);
    let want = 0.5 * b + 0.5 * (1.0 - ti);
    assert!(close(hybrid(&p, &q, &cfg), want, 1e-15));
    let (br, _) = evaluate(&p, &q, &cfg).unwrap();
    assert!(close(br.hybrid, want, 1e-15));
    assert!(close(br.value, all_wrap(want, &cfg), 1e-15));
}

#[test]
fn wrapper_reference_values() {
    let cfg = LossConfig::default();
    assert_eq!(all_wrap(0.0, &cfg), 0.0);
    assert!(close(all_wrap(0.1, &cfg), 1.823216, 1e-6));
    assert!(close(all_wrap(1.0, &cfg), 2.723216, 1e-6));
    let below = all_wrap(0.1f64.next_down(), &cfg);
    assert!(close(below, all_wrap(0.1, &cfg), 1e-12));
    assert_eq!(all_wrap(-0.3, &cfg), all_wrap(0.3, &cfg));
    assert_eq!(all_wrap_derivative(0.1, &cfg), 10.0 / 0.6);
    assert_eq!(all_wrap_derivative(0.5, &cfg), 1.0);
    assert_eq!(all_wrap_derivative(-0.5, &cfg), -1.0);
}

#[test]
fn wrapper_derivative_matches_finite_differences() {
    let cfg = LossConfig::default();
    for hl in [0.01, 0.05, 0.09, 0.2, 0.7, 2.0] {
        let h = 1e-6;
        let fd = (all_wrap(hl + h, &cfg) - all_wrap(hl - h, &cfg)) / (2.0 * h);
        assert!(close(fd, all_wrap_derivative(hl, &cfg), 1e-6), "{hl}");
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = rng(2);
    for wrapper in [LossWrapper::All, LossWrapper::None] {
        let cfg = LossConfig {
            wrapper,
            ..LossConfig::default()
        };
        for _ in 0..5 {
            let p: Vec<f64> = (0..40).map(|_| f64::from(r.gen_bool(0.3) as u8)).collect();
            let q: Vec<f64> = (0..40).map(|_| r.gen_range(0.05..0.95)).collect();
            let (_, grad) = evaluate(&p, &q, &cfg).unwrap();
            let h = 1e-6;
            for i in 0..q.len() {
                let mut hi = q.clone();
                let mut lo = q.clone();
                hi[i] += h;
                lo[i] -= h;
                let fd = (evaluate(&p, &hi, &cfg).unwrap().0.value
                    - evaluate(&p, &lo, &cfg).unwrap().0.value)
                    / (2.0 * h);
                let scale = fd.abs().max(grad[i].abs()).max(1e-2);
                assert!(
                    (fd - grad[i]).abs() / scale < 1e-5,
                    "{wrapper:?} {i}: {fd} vs {}",
                    grad[i]
                );
            }
        }
    }
}

#[test]
fn loss_node_feeds_the_tape() {
    let cfg = LossConfig::default();
    let target = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let pred = Tensor::new(&[1, 1, 2, 2], vec![0.8, 0.3, 0.1, 0.6]).unwrap();
    let mut g = Graph::new();
    let q = g.leaf(pred.clone());
    let (l, br) = loss_node(&mut g, q, &target, &cfg).unwrap();
    assert_eq!(g.value(l).item(), br.value);
    let grads = g.backward(l).unwrap();
    let (_, want) = evaluate(target.data(), pred.data(), &cfg).unwrap();
    assert_eq!(grads.get(q).unwrap().data(), &want[..]);
}

#[test]
fn loss_rejects_bad_inputs() {
    let cfg = LossConfig::default();
    assert!(evaluate(&[0.5], &[0.5], &cfg).is_err());
    assert!(evaluate(&[1.0], &[f64::NAN], &cfg).is_err());
    assert!(evaluate(&[1.0, 0.0], &[0.5], &cfg).is_err());
    assert!(LossConfig {
        k: 1.5,
        ..cfg.clone()
    }
    .validate()
    .is_err());
    assert!(LossConfig {
        epsilon: 0.0,
        ..cfg
    }
    .validate()
    .is_err());
}

#[test]
fn metrics_on_a_ten_pixel_example() {
    let target = [1., 1., 1., 0., 0., 0., 0., 0., 1., 0.];
    let pred = [0.9, 0.8, 0.2, 0.7, 0.1, 0.3, 0.4, 0.2, 0.6, 0.1];
    let c = ConfusionCounts::from_masks(&target, &pred, 0.5).unwrap();
    assert_eq!(
        c,
        ConfusionCounts {
            tp: 3,
            fp: 1,
            fn_: 1,
            tn: 5
        }
    );
    let m = Metrics::from_counts(&c);
    assert_eq!(m.precision, 0.75);
    assert_eq!(m.recall, 0.75);
    assert_eq!(m.accuracy, 0.8);
    assert_eq!(m.dice, 0.75);
    assert_eq!(m.jaccard, 0.6);
    assert_eq!(m.f1, 0.75);
    assert!(m.undefined.is_empty());
}

#[test]
fn threshold_is_strict() {
    assert_eq!(
        ConfusionCounts::from_masks(&[1.0], &[0.5], 0.5).unwrap().tp,
        0
    );
    assert_eq!(
        ConfusionCounts::from_masks(&[1.0], &[0.5f64.next_up()], 0.5)
            .unwrap()
            .tp,
        1
    );
}

#[test]
fn perfect_and_empty_predictions() {
    let t = [1.0, 0.0, 1.0, 0.0];
    let m = metrics(&t, &t, 0.5).unwrap();
    for v in [m.precision, m.recall, m.accuracy, m.dice, m.jaccard, m.f1] {
        assert_eq!(v, 1.0);
    }
    let m = metrics(&[0.0, 0.0], &[0.1, 0.2], 0.5).unwrap();
    assert_eq!(m.accuracy, 1.0);
    for name in ["precision", "recall", "dice", "jaccard", "f1"] {
        assert!(m.undefined.contains(&name), "{name}");
    }
    assert!(metrics(&[0.3], &[0.2], 0.5).is_err());
}

#[test]
fn auc_examples() {
    assert_eq!(
        roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0., 0., 1., 1.])
            .unwrap()
            .auc,
        1.0
    );
    assert_eq!(
        roc_auc(&[0.9, 0.8, 0.2, 0.1], &[0., 0., 1., 1.])
            .unwrap()
            .auc,
        0.0
    );
    assert_eq!(
        roc_auc(&[0.5; 6], &[0., 1., 0., 1., 1., 0.]).unwrap().auc,
        0.5
    );
    assert!(roc_auc(&[0.1, 0.2], &[1., 1.]).is_err());
    let curve = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0., 0., 1., 1.]).unwrap();
    assert_eq!(curve.auc, 0.75);
    assert_eq!(curve.points.first(), Some(&(0.0, 0.0)));
    assert_eq!(curve.points.last(), Some(&(1.0, 1.0)));
    assert!(curve.to_csv().starts_with("fpr,tpr\n"));
}

proptest! {
    #[test]
    fn wrapper_is_monotone_and_continuous(a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let cfg = LossConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(all_wrap(lo, &cfg) <= all_wrap(hi, &cfg));
        prop_assert!(all_wrap(lo, &cfg) >= 0.0);
    }

    #[test]
    fn auc_matches_pair_counting(
        pairs in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| f64::from(*s) / 5.0).collect();
        let labels: Vec<f64> = pairs.iter().map(|(_, l)| f64::from(*l as u8)).collect();
        let pos = labels.iter().filter(|&&l| l == 1.0).count();
        prop_assume!(pos > 0 && pos < labels.len());
        let mut wins = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let want = wins / (pos * (labels.len() - pos)) as f64;
        prop_assert!((roc_auc(&scores, &labels).unwrap().auc - want).abs() < 1e-12);
    }

    #[test]
    fn dice_and_jaccard_are_linked(tp in 1u64..100, fp in 0u64..100, fn_ in 0u64..100, tn in 0u64..100) {
        let m = Metrics::from_counts(&ConfusionCounts { tp, fp, fn_, tn });
        prop_assert!((m.dice - 2.0 * m.jaccard / (1.0 + m.jaccard)).abs() < 1e-12);
        prop_assert!((m.f1 - m.dice).abs() < 1e-12);
    }
}
