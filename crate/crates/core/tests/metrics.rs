use forma_core::loss::{combined_loss, dice_loss, focal_loss, LossConfig};
use forma_core::metrics::{dataset_average, f1_iou, Confusion, EvalReport, ImageRecord};
use forma_core::Tensor;
use proptest::prelude::*;

fn t(v: Vec<f64>) -> Tensor {
    let n = v.len();
    Tensor::new(&[n], v).unwrap()
}

fn masks() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1usize..200).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)))
}

fn bits(v: &[bool]) -> Tensor {
    t(v.iter().map(|&b| f64::from(u8::from(b))).collect())
}

proptest! {
    #[test]
    fn f1_is_a_function_of_iou((a, b) in masks()) {
        let (f1, iou) = f1_iou(&bits(&a), &bits(&b)).unwrap();
        prop_assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
        prop_assert!(f1 >= iou - 1e-15);
        prop_assert!((0.0..=1.0).contains(&f1) && (0.0..=1.0).contains(&iou));
    }

    #[test]
    fn scores_are_symmetric((a, b) in masks()) {
        prop_assert_eq!(f1_iou(&bits(&a), &bits(&b)).unwrap(), f1_iou(&bits(&b), &bits(&a)).unwrap());
    }

    #[test]
    fn confusion_counts_partition_the_pixels((a, b) in masks()) {
        let c = Confusion::from_masks(&bits(&a), &bits(&b)).unwrap();
        prop_assert_eq!((c.tp + c.fp + c.fn_ + c.tn) as usize, a.len());
        let tp = a.iter().zip(&b).filter(|(x, y)| **x && **y).count() as u64;
        prop_assert_eq!(c.tp, tp);
    }

    #[test]
    fn weighted_average_is_bounded(
        ds in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 1usize..500), 1..6)
    ) {
        let (f, i) = dataset_average(&ds).unwrap();
        let lo = ds.iter().map(|d| d.0).fold(f64::INFINITY, f64::min);
        let hi = ds.iter().map(|d| d.0).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(f >= lo - 1e-12 && f <= hi + 1e-12);
        let total: usize = ds.iter().map(|d| d.2).sum();
        let want: f64 = ds.iter().map(|d| d.1 * d.2 as f64).sum::<f64>() / total as f64;
        prop_assert!((i - want).abs() < 1e-12);
    }

    #[test]
    fn dice_matches_its_closed_form(
        v in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..100)
    ) {
        let p = t(v.iter().map(|x| x.0).collect());
        let g = t(v.iter().map(|x| f64::from(u8::from(x.1))).collect());
        let inter: f64 = v.iter().filter(|x| x.1).map(|x| x.0).sum();
        let sp: f64 = v.iter().map(|x| x.0).sum();
        let sg = v.iter().filter(|x| x.1).count() as f64;
        let want = 1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0);
        let got = dice_loss(&p, &g).unwrap();
        prop_assert!((got - want).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn focal_matches_a_per_pixel_sum(
        v in prop::collection::vec((0.01f64..0.99, any::<bool>()), 1..100),
        gamma in 0.0f64..4.0,
        alpha in 0.0f64..1.0,
    ) {
        let p = t(v.iter().map(|x| x.0).collect());
        let g = t(v.iter().map(|x| f64::from(u8::from(x.1))).collect());
        let want = v
            .iter()
            .map(|&(p, pos)| {
                let (pt, at) = if pos { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
                -at * (1.0 - pt).powf(gamma) * pt.ln()
            })
            .sum::<f64>()
            / v.len() as f64;
        let got = focal_loss(&p, &g, gamma, alpha).unwrap();
        prop_assert!((got - want).abs() < 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn combined_is_the_weighted_sum(
        v in prop::collection::vec((0.01f64..0.99, any::<bool>()), 1..50),
        wd in 0.0f64..3.0,
        wf in 0.0f64..3.0,
    ) {
        let p = t(v.iter().map(|x| x.0).collect());
        let g = t(v.iter().map(|x| f64::from(u8::from(x.1))).collect());
        let cfg = LossConfig { w_dice: wd, w_focal: wf, ..LossConfig::default() };
        let want = wd * dice_loss(&p, &g).unwrap() + wf * focal_loss(&p, &g, 2.0, 0.5).unwrap();
        prop_assert!((combined_loss(&p, &g, &cfg).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn dice_extremes_on_a_full_image() {
    let gt = Tensor::from_fn(&[64, 64], |i| f64::from(u8::from((i / 64) < 20)));
    assert!(dice_loss(&gt, &gt).unwrap() < 1e-3);
    let miss = gt.map(|v| 1.0 - v);
    assert!((dice_loss(&miss, &gt).unwrap() - 1.0).abs() < 1e-3);
}

#[test]
fn confident_correct_prediction_has_no_focal_loss() {
    let gt = t(vec![1.0, 0.0, 1.0]);
    let p = t(vec![1.0 - 1e-9, 1e-9, 1.0 - 1e-9]);
    assert!(focal_loss(&p, &gt, 2.0, 0.5).unwrap() < 1e-12);
}

#[test]
fn hand_counted_examples() {
    let gt = Tensor::new(&[2, 2], vec![1.0; 4]).unwrap();
    let left = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let (f1, iou) = f1_iou(&left, &gt).unwrap();
    assert_eq!(f1, 2.0 / 3.0);
    assert_eq!(iou, 0.5);
    let empty = Tensor::zeros(&[2, 2]);
    assert_eq!(f1_iou(&empty, &empty).unwrap(), (1.0, 1.0));
    assert_eq!(f1_iou(&empty, &gt).unwrap(), (0.0, 0.0));
    assert_eq!(f1_iou(&gt, &empty).unwrap(), (0.0, 0.0));
    assert_eq!(dataset_average(&[(0.4, 0.1, 100), (0.8, 0.3, 300)]).unwrap().0, 0.7);
    assert_eq!(dataset_average(&[(0.2, 0.0, 5), (0.6, 0.0, 5)]).unwrap().0, 0.4);
}

#[test]
fn report_weights_datasets_by_image_count() {
    let rec = |ds: &str, tp, fp| {
        ImageRecord::new("x", ds, Confusion { tp, fp, fn_: 0, tn: 0 })
    };
    // dataset a: one perfect image; dataset b: three images at F1 = 0.5
    let mut recs = vec![rec("a", 4, 0)];
    for _ in 0..3 {
        recs.push(rec("b", 1, 2));
    }
    let r = EvalReport::from_records(recs, 1).unwrap();
    assert_eq!(r.datasets.len(), 2);
    assert_eq!(r.datasets[1].f1, 0.5);
    let (f1, _) = r.average.unwrap();
    assert!((f1 - (1.0 + 3.0 * 0.5) / 4.0).abs() < 1e-15);
    assert!(r.table().contains("skipped entries: 1"));
}
