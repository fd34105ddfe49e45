use proptest::prelude::*;
use trackdepth::evalmetrics::*;
use trackdepth::{BoxXywh, Tensor};

fn boxes(n: usize) -> impl Strategy<Value = Vec<BoxXywh>> {
    prop::collection::vec(
        (0.0f64..200.0, 0.0f64..200.0, 1.0f64..80.0, 1.0f64..80.0).prop_map(|(x, y, w, h)| BoxXywh::new(x, y, w, h)),
        n,
    )
}

fn ious() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, 1..40)
}

#[test]
fn iou_hand_cases() {
    let a = BoxXywh::new(0.0, 0.0, 1.0, 1.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert!((iou(&a, &BoxXywh::new(0.5, 0.0, 1.0, 1.0)) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(iou(&a, &BoxXywh::new(2.0, 2.0, 1.0, 1.0)), 0.0);
}

#[test]
fn auc_edge_values() {
    assert_eq!(success_auc(&[1.0, 1.0]).unwrap(), 100.0 * 20.0 / 21.0);
    assert_eq!(success_auc(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
    // 0.5 clears thresholds 0 through 0.45
    assert!((success_auc(&[0.5]).unwrap() - 100.0 * 10.0 / 21.0).abs() < 1e-12);
    assert!(success_auc(&[]).is_err());
}

#[test]
fn ao_sr_hand_cases() {
    let (ao, sr5, sr75) = ao_sr(&[0.6, 0.8]).unwrap();
    assert!((ao - 70.0).abs() < 1e-12);
    assert_eq!((sr5, sr75), (100.0, 50.0));
    assert_eq!(ao_sr(&[1.0, 1.0]).unwrap(), (100.0, 100.0, 100.0));
}

#[test]
fn precision_hand_cases() {
    let b = vec![BoxXywh::new(0.0, 0.0, 30.0, 40.0); 2];
    let c = vec![(15.0, 20.0), (15.0, 20.0)];
    assert_eq!(precision_metrics(&c, &c, &b).unwrap(), (100.0, 100.0));
    let off = vec![(36.0, 20.0), (15.0, 41.0)];
    let (p, np) = precision_metrics(&off, &c, &b).unwrap();
    assert_eq!(p, 0.0);
    // error 21 on a diagonal of 50 clears thresholds 0.42 through 0.5
    assert!((np - 100.0 * 9.0 / 51.0).abs() < 1e-12, "{np}");
    // exactly 20 px still counts
    let edge = vec![(35.0, 20.0), (15.0, 20.0)];
    assert_eq!(precision_metrics(&edge, &c, &b).unwrap().0, 100.0);
    assert!(precision_metrics(&c[..1], &c, &b).is_err());
}

#[test]
fn depth_eval_hand_cases() {
    let gt = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 4.0, 8.0]).unwrap();
    let none = Tensor::zeros(&[1, 2, 2]);
    let r = depth_eval(&gt, &gt, &none).unwrap();
    assert_eq!((r.rmse, r.abs_rel, r.scale), (0.0, 0.0, 1.0));
    let r = depth_eval(&gt.map(|d| d * 7.0), &gt, &none).unwrap();
    assert!(r.abs_rel < 1e-12 && r.rmse < 1e-12);
    // two of four pixels doubled; medians 3 and 5 give scale 0.6
    let pred = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 8.0, 16.0]).unwrap();
    let r = depth_eval(&pred, &gt, &none).unwrap();
    let s = 3.0 / 5.0;
    let want = [(1.0, 1.0), (2.0, 2.0), (8.0, 4.0), (16.0, 8.0)]
        .iter()
        .map(|&(p, g): &(f64, f64)| (p * s - g).abs() / g)
        .sum::<f64>()
        / 4.0;
    assert!((r.scale - s).abs() < 1e-12);
    assert!((r.abs_rel - want).abs() < 1e-12);
    // padded and invalid pixels are ignored
    let pad = Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    assert!(depth_eval(&pred, &gt, &pad).unwrap().abs_rel < 1e-12);
    let holes = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 0.0, 0.0]).unwrap();
    assert!(depth_eval(&pred, &holes, &none).unwrap().abs_rel < 1e-12);
}

proptest! {
    #[test]
    fn auc_is_monotone(v in ious(), bump in prop::collection::vec(0.0f64..0.5, 40)) {
        let better: Vec<f64> = v.iter().zip(&bump).map(|(a, b)| (a + b).min(1.0)).collect();
        prop_assert!(success_auc(&better).unwrap() >= success_auc(&v).unwrap());
    }

    #[test]
    fn overlap_metrics_are_bounded_and_ordered(v in ious()) {
        let auc = success_auc(&v).unwrap();
        let (ao, sr5, sr75) = ao_sr(&v).unwrap();
        for m in [auc, ao, sr5, sr75] {
            prop_assert!((0.0..=100.0).contains(&m));
        }
        prop_assert!(sr75 <= sr5);
    }

    #[test]
    fn metrics_ignore_frame_order(pred in boxes(12), gt in boxes(12), rot in 0usize..12) {
        let a = track_metrics(&pred, &gt).unwrap();
        let (mut p2, mut g2) = (pred.clone(), gt.clone());
        p2.rotate_left(rot);
        g2.rotate_left(rot);
        p2.reverse();
        g2.reverse();
        let b = track_metrics(&p2, &g2).unwrap();
        prop_assert_eq!(a.sr_050, b.sr_050);
        prop_assert_eq!(a.precision_20px, b.precision_20px);
        prop_assert_eq!(a.norm_precision, b.norm_precision);
        prop_assert!((a.auc - b.auc).abs() < 1e-9 && (a.ao - b.ao).abs() < 1e-9);
        for m in [a.auc, a.precision_20px, a.norm_precision, a.ao, a.sr_050, a.sr_075] {
            prop_assert!((0.0..=100.0).contains(&m));
        }
    }

    #[test]
    fn normalized_precision_ignores_frame_scale(pred in boxes(10), gt in boxes(10)) {
        let centers = |b: &[BoxXywh], s: f64| b.iter().map(|b| { let (x, y) = b.center(); (x * s, y * s) }).collect::<Vec<_>>();
        let scaled: Vec<BoxXywh> = gt.iter().map(|b| b.scaled(3.0)).collect();
        let (_, np1) = precision_metrics(&centers(&pred, 1.0), &centers(&gt, 1.0), &gt).unwrap();
        let (_, np3) = precision_metrics(&centers(&pred, 3.0), &centers(&gt, 3.0), &scaled).unwrap();
        prop_assert!((np1 - np3).abs() < 1e-9, "{} vs {}", np1, np3);
    }

    #[test]
    fn depth_eval_ignores_global_scale(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut s = seed | 1;
        let mut next = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; 0.2 + 50.0 * (s >> 11) as f64 / (1u64 << 53) as f64 };
        let gt = Tensor::from_fn(&[1, 6, 6], |_| next());
        let pred = Tensor::from_fn(&[1, 6, 6], |_| next());
        let none = Tensor::zeros(&[1, 6, 6]);
        let a = depth_eval(&pred, &gt, &none).unwrap();
        let b = depth_eval(&pred.map(|d| d * c), &gt, &none).unwrap();
        prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-9);
        prop_assert!((a.rmse - b.rmse).abs() < 1e-9);
        prop_assert!(a.abs_rel >= 0.0 && a.rmse >= 0.0);
    }
}
