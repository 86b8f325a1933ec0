use orewatch::metrics::{cluster_agreement, confusion, confusion_with_classes, precision_recall_f1};
use orewatch::spectral::UNLABELLED;
use proptest::prelude::*;

fn rasters() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (2u8..6, 1usize..300).prop_flat_map(|(k, n)| {
        (
            proptest::collection::vec(0..k, n),
            proptest::collection::vec(prop_oneof![9 => 0..k, 1 => Just(UNLABELLED)], n),
        )
    })
}

proptest! {
    #[test]
    fn f1_matches_direct_counting((pred, truth) in rasters()) {
        let report = precision_recall_f1(&confusion(&pred, &truth).unwrap());
        let mut macro_sum = 0.0;
        for (c, m) in report.per_class.iter().enumerate() {
            let c = c as u8;
            let pairs = pred.iter().zip(&truth).filter(|(_, &t)| t != UNLABELLED);
            let (mut tp, mut fp, mut fneg) = (0u32, 0u32, 0u32);
            for (&p, &t) in pairs {
                tp += (p == c && t == c) as u32;
                fp += (p == c && t != c) as u32;
                fneg += (p != c && t == c) as u32;
            }
            // F1 written on counts rather than on precision and recall
            let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64 };
            prop_assert!((m.f1 - f1).abs() < 1e-12);
            macro_sum += f1;
        }
        prop_assert!((report.macro_f1 - macro_sum / report.per_class.len() as f64).abs() < 1e-12);
        let labelled = truth.iter().filter(|&&t| t != UNLABELLED).count() as u64;
        prop_assert_eq!(report.labelled, labelled);
    }

    #[test]
    fn agreement_ignores_cluster_names((pred, truth) in rasters(), rot in 0usize..6) {
        prop_assume!(truth.iter().any(|&t| t != UNLABELLED));
        let assign: Vec<usize> = pred.iter().map(|&p| p as usize).collect();
        let k = assign.iter().max().unwrap() + 1;
        let renamed: Vec<usize> = assign.iter().map(|&a| (a + rot) % k).collect();
        let (a, _) = cluster_agreement(&assign, &truth).unwrap();
        let (b, _) = cluster_agreement(&renamed, &truth).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn agreement_mapping_reproduces_the_score((pred, truth) in rasters()) {
        prop_assume!(truth.iter().any(|&t| t != UNLABELLED));
        let assign: Vec<usize> = pred.iter().map(|&p| p as usize).collect();
        let (score, mapping) = cluster_agreement(&assign, &truth).unwrap();
        let labelled: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] != UNLABELLED).collect();
        let hits = labelled.iter().filter(|&&i| mapping[assign[i]] == truth[i] as usize).count();
        prop_assert!((score - hits as f64 / labelled.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn hand_case_two_thirds() {
    let m = precision_recall_f1(&confusion(&[0, 0], &[0, 1]).unwrap()).per_class[0];
    assert_eq!((m.precision, m.recall, m.f1), (0.5, 1.0, 2.0 / 3.0));
}

#[test]
fn perfect_prediction_scores_one() {
    let labels = [0u8, 1, 2, 1, 0, 2];
    let r = precision_recall_f1(&confusion(&labels, &labels).unwrap());
    assert_eq!(r.macro_f1, 1.0);
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn absent_class_is_flagged_undefined() {
    let r = precision_recall_f1(&confusion_with_classes(&[0, 0], &[0, 0], 2).unwrap());
    assert!(r.per_class[1].undefined);
    assert_eq!(r.per_class[1].f1, 0.0);
}

#[test]
fn unlabelled_prediction_is_rejected() {
    assert!(confusion(&[UNLABELLED], &[0]).is_err());
    assert!(confusion(&[0, 1], &[0]).is_err());
}
