use pdfuse::labels::{LabelMap, IGNORE};
use pdfuse::metrics::{ConfusionMatrix, Scores};
use pdfuse::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lm(h: usize, w: usize, v: Vec<u8>) -> LabelMap {
    LabelMap::new(h, w, v).unwrap()
}

/// Per-class TP/FP/FN counted straight from the pixel lists.
fn brute_force(pred: &[u8], gt: &[u8], k: usize) -> Option<Scores> {
    let (mut correct, mut total) = (0u64, 0u64);
    let (mut acc, mut iou) = (Vec::new(), Vec::new());
    for c in 0..k as u8 {
        let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                _ => {}
            }
        }
        if tp + fne > 0 {
            acc.push(tp as f64 / (tp + fne) as f64);
        }
        if tp + fp + fne > 0 {
            iou.push(tp as f64 / (tp + fp + fne) as f64);
        }
    }
    for (&p, &g) in pred.iter().zip(gt) {
        if g != IGNORE {
            total += 1;
            correct += (p == g) as u64;
        }
    }
    (total > 0).then(|| Scores {
        pixel_acc: correct as f64 / total as f64,
        mean_acc: acc.iter().sum::<f64>() / acc.len() as f64,
        miou: iou.iter().sum::<f64>() / iou.len() as f64,
    })
}

fn random_pair(rng: &mut ChaCha8Rng) -> (usize, Vec<u8>, Vec<u8>) {
    let k = rng.random_range(1..=4);
    let gt = (0..64)
        .map(|_| {
            if rng.random_bool(0.1) {
                IGNORE
            } else {
                rng.random_range(0..k as u8)
            }
        })
        .collect();
    let pred = (0..64).map(|_| rng.random_range(0..k as u8)).collect();
    (k, pred, gt)
}

#[test]
fn scores_equal_brute_force_enumeration_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let (k, pred, gt) = random_pair(&mut rng);
        let mut cm = ConfusionMatrix::new(k);
        cm.update(&lm(8, 8, pred.clone()), &lm(8, 8, gt.clone())).unwrap();
        match brute_force(&pred, &gt, k) {
            Some(want) => assert_eq!(cm.scores().unwrap(), want, "case {case}, K={k}"),
            None => assert!(cm.scores().is_err()),
        }
    }
}

#[test]
fn hand_case() {
    let mut cm = ConfusionMatrix::new(2);
    cm.update(&lm(2, 2, vec![0, 1, 1, 1]), &lm(2, 2, vec![0, 0, 1, 1])).unwrap();
    let s = cm.scores().unwrap();
    assert!((s.pixel_acc - 0.75).abs() < 1e-12);
    assert!((s.mean_acc - 0.75).abs() < 1e-12);
    assert!((s.miou - 0.58333).abs() < 1e-5);
    assert!((s.miou - 7.0 / 12.0).abs() < 1e-12);
}

#[test]
fn unseen_class_is_excluded_from_means() {
    let mut cm = ConfusionMatrix::new(3);
    cm.update(&lm(1, 4, vec![0, 1, 1, 1]), &lm(1, 4, vec![0, 0, 1, 1])).unwrap();
    let s = cm.scores().unwrap();
    assert_eq!(cm.class_iou()[2], None);
    assert_eq!(cm.class_accuracy()[2], None);
    assert!((s.miou - 7.0 / 12.0).abs() < 1e-12);
}

#[test]
fn predicted_only_class_counts_as_zero_iou() {
    let mut cm = ConfusionMatrix::new(3);
    cm.update(&lm(1, 2, vec![0, 2]), &lm(1, 2, vec![0, 0])).unwrap();
    assert_eq!(cm.class_accuracy(), vec![Some(0.5), None, None]);
    assert_eq!(cm.class_iou(), vec![Some(0.5), None, Some(0.0)]);
    let s = cm.scores().unwrap();
    assert_eq!((s.mean_acc, s.miou), (0.5, 0.25));
}

#[test]
fn ignored_pixels_leave_matrix_unchanged() {
    let mut cm = ConfusionMatrix::new(2);
    cm.update(&lm(1, 3, vec![0, 1, 1]), &lm(1, 3, vec![IGNORE; 3])).unwrap();
    assert_eq!(cm, ConfusionMatrix::new(2));
    assert!(matches!(cm.scores(), Err(Error::Input(_))));
}

#[test]
fn rejects_mismatched_shapes_and_out_of_range_ids() {
    let mut cm = ConfusionMatrix::new(2);
    let err = cm.update(&lm(1, 2, vec![0, 0]), &lm(2, 1, vec![0, 0]));
    assert!(matches!(err, Err(Error::Dimension(_))));
    let err = cm.update(&lm(1, 2, vec![0, 2]), &lm(1, 2, vec![0, 1]));
    assert!(matches!(err, Err(Error::Input(_))));
    assert_eq!(cm.total(), 0);
    assert!(cm.merge(&ConfusionMatrix::new(3)).is_err());
}

#[test]
fn merging_equals_updating_with_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut merged = ConfusionMatrix::new(4);
    let mut whole = ConfusionMatrix::new(4);
    for _ in 0..5 {
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..4)).collect();
        let gt: Vec<u8> = (0..64).map(|_| rng.random_range(0..4)).collect();
        let mut part = ConfusionMatrix::new(4);
        part.update(&lm(8, 8, pred.clone()), &lm(8, 8, gt.clone())).unwrap();
        merged.merge(&part).unwrap();
        whole.update(&lm(8, 8, pred), &lm(8, 8, gt)).unwrap();
    }
    assert_eq!(merged, whole);
    assert_eq!(whole.total(), 320);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_are_ordered_and_bounded(seed in any::<u64>()) {
        let (k, pred, gt) = random_pair(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut cm = ConfusionMatrix::new(k);
        cm.update(&lm(8, 8, pred), &lm(8, 8, gt)).unwrap();
        let s = cm.scores().unwrap();
        prop_assert!(0.0 <= s.miou && s.miou <= s.mean_acc && s.mean_acc <= 1.0);
        prop_assert!(s.miou <= s.pixel_acc && s.pixel_acc <= 1.0);
    }

    #[test]
    fn relabeling_classes_keeps_scores(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, pred, gt) = random_pair(&mut rng);
        let perm = [2u8, 0, 3, 1];
        let relabel = |v: &[u8]| v.iter().map(|&x| if x == IGNORE { x } else { perm[x as usize] }).collect::<Vec<_>>();
        let mut a = ConfusionMatrix::new(4);
        let mut b = ConfusionMatrix::new(4);
        a.update(&lm(8, 8, pred.clone()), &lm(8, 8, gt.clone())).unwrap();
        b.update(&lm(8, 8, relabel(&pred)), &lm(8, 8, relabel(&gt))).unwrap();
        let (sa, sb) = (a.scores().unwrap(), b.scores().unwrap());
        prop_assert_eq!(sa.pixel_acc, sb.pixel_acc);
        prop_assert!((sa.mean_acc - sb.mean_acc).abs() < 1e-12);
        prop_assert!((sa.miou - sb.miou).abs() < 1e-12);
    }
}
