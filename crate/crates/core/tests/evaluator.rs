use deformdet::bbox::{iou, BBox, Detection};
use deformdet::detect::format_detections;
use deformdet::eval::{average_precision, evaluate, group_detections, EvalConfig};
use deformdet::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod eval_fixture;

use eval_fixture::{jitter, oracle, random_box, toy_fixture};

fn det(class: usize, cx: f64, cy: f64, w: f64, h: f64, score: f64) -> Detection {
    Detection {
        bbox: BBox::new(class, cx, cy, w, h),
        score,
    }
}

#[test]
fn iou_examples() {
    let a = BBox::new(0, 0.3, 0.3, 0.2, 0.2);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BBox::new(0, 0.8, 0.8, 0.2, 0.2)), 0.0);
    let b = BBox::new(0, 0.4, 0.3, 0.2, 0.2);
    assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn single_image_ap_examples() {
    let g = BBox::new(0, 0.5, 0.5, 0.2, 0.2);
    assert_eq!(average_precision(&[det(0, 0.5, 0.5, 0.2, 0.2, 0.9)], &[g], 0.5), 1.0);
    let false_first = [det(0, 0.1, 0.1, 0.1, 0.1, 0.9), det(0, 0.5, 0.5, 0.2, 0.2, 0.8)];
    assert!((average_precision(&false_first, &[g], 0.5) - 0.5).abs() < 1e-15);
    assert_eq!(average_precision(&[], &[g], 0.5), 0.0);
}

#[test]
fn ten_random_dets_against_brute_force() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<BBox> = (0..3).map(|_| random_box(&mut rng, 0)).collect();
        let mut dets: Vec<Detection> = (0..10)
            .map(|_| {
                let b = if rng.gen_bool(0.6) {
                    let g = gts[rng.gen_range(0..3)];
                    jitter(&mut rng, &g, 0.35)
                } else {
                    random_box(&mut rng, 0)
                };
                Detection {
                    bbox: b,
                    score: rng.gen(),
                }
            })
            .collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        for t in [0.3, 0.5, 0.75] {
            let got = average_precision(&dets, &gts, t);
            let want = oracle::class_ap(&[dets.clone()], &[gts.clone()], 0, t).unwrap();
            assert!((got - want).abs() < 1e-12, "seed {seed} t {t}: {got} vs {want}");
        }
    }
}

#[test]
fn five_image_fixture_matches_oracle() {
    let cfg = EvalConfig::default();
    for seed in [1, 2, 3] {
        let (dets, gts) = toy_fixture(seed);
        assert_eq!(dets.iter().map(Vec::len).sum::<usize>(), 30);
        let r = evaluate(&dets, &gts, 6, &cfg).unwrap();
        let (m50, m5095) = oracle::maps(&dets, &gts, 6, &cfg.thresholds);
        assert!((r.map50 - m50).abs() < 1e-12, "{} vs {m50}", r.map50);
        assert!((r.map5095 - m5095).abs() < 1e-12);
        for (c, aps) in &r.per_class_ap {
            for (k, &t) in cfg.thresholds.iter().enumerate() {
                let want = oracle::class_ap(&dets, &gts, *c, t).unwrap();
                assert!((aps[k] - want).abs() < 1e-12);
            }
        }
        assert!(r.excluded.contains(&5));
        assert!(r.map50 > 0.0 && r.map50 < 1.0, "fixture should be non-trivial: {}", r.map50);
    }
}

#[test]
fn perfect_and_empty_detectors() {
    let (_, gts) = toy_fixture(4);
    let perfect: Vec<Vec<Detection>> = gts
        .iter()
        .map(|g| g.iter().map(|b| Detection { bbox: *b, score: 0.9 }).collect())
        .collect();
    let r = evaluate(&perfect, &gts, 6, &EvalConfig::default()).unwrap();
    assert_eq!((r.map50, r.map5095), (1.0, 1.0));
    let empty = vec![Vec::new(); gts.len()];
    let r = evaluate(&empty, &gts, 6, &EvalConfig::default()).unwrap();
    assert_eq!((r.map50, r.map5095), (0.0, 0.0));
}

#[test]
fn unknown_class_and_image_errors() {
    let gts = vec![vec![BBox::new(0, 0.5, 0.5, 0.2, 0.2)]];
    let dets = vec![vec![det(6, 0.5, 0.5, 0.2, 0.2, 0.5)]];
    assert!(matches!(
        evaluate(&dets, &gts, 6, &EvalConfig::default()),
        Err(Error::UnknownClass { class_id: 6, .. })
    ));
    let bad_gt = vec![vec![BBox::new(9, 0.5, 0.5, 0.2, 0.2)]];
    assert!(evaluate(&[vec![]], &bad_gt, 6, &EvalConfig::default()).is_err());
    let ids = vec!["a".to_string()];
    assert!(group_detections(&ids, &[("b".into(), dets[0][0])]).is_err());
}

#[test]
fn upper_090_sweep_is_an_option() {
    let (dets, gts) = toy_fixture(1);
    let cfg = EvalConfig::upper_090();
    assert_eq!(cfg.thresholds.len(), 9);
    let r = evaluate(&dets, &gts, 6, &cfg).unwrap();
    let (_, m) = oracle::maps(&dets, &gts, 6, &cfg.thresholds);
    assert!((r.map5095 - m).abs() < 1e-12);
}

#[test]
fn report_outputs() {
    let (dets, gts) = toy_fixture(2);
    let r = evaluate(&dets, &gts, 6, &EvalConfig::default()).unwrap();
    let table = r.to_table();
    assert!(table.contains("mAP") && table.contains("AP@50:95"));
    let csv = r.pr_csv();
    assert!(csv.starts_with("class,recall,precision\n"));
    assert_eq!(csv.lines().count() - 1, r.pr_curves.values().map(Vec::len).sum::<usize>());
    assert!(r.pr_svg().contains("<polyline"));
    let dir = tempfile::tempdir().unwrap();
    r.write(dir.path()).unwrap();
    assert!(dir.path().join("pr.svg").exists());
    // detections survive the text format the evaluator reads
    let flat: Vec<(String, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().map(move |d| (format!("{i:06}"), *d)))
        .collect();
    let back = deformdet::detect::parse_detections(&format_detections(&flat), "d").unwrap();
    let ids: Vec<String> = (0..5).map(|i| format!("{i:06}")).collect();
    let regrouped = group_detections(&ids, &back).unwrap();
    let r2 = evaluate(&regrouped, &gts, 6, &EvalConfig::default()).unwrap();
    assert!((r2.map50 - r.map50).abs() < 1e-9);
}

fn arb_case() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<Vec<BBox>>)> {
    any::<u64>().prop_map(toy_fixture)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_depends_only_on_ranking((dets, gts) in arb_case(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let cfg = EvalConfig::default();
        let r = evaluate(&dets, &gts, 6, &cfg).unwrap();
        let moved: Vec<Vec<Detection>> = dets
            .iter()
            .map(|ds| ds.iter().map(|d| Detection { bbox: d.bbox, score: (a * d.score + b).exp() }).collect())
            .collect();
        let r2 = evaluate(&moved, &gts, 6, &cfg).unwrap();
        prop_assert_eq!(r.per_class_ap, r2.per_class_ap);
    }

    #[test]
    fn trailing_false_positive_never_helps((dets, gts) in arb_case(), img in 0usize..5, class in 0usize..3) {
        let cfg = EvalConfig::default();
        let r = evaluate(&dets, &gts, 6, &cfg).unwrap();
        let mut more = dets.clone();
        // far corner box with the lowest score of all
        more[img].push(det(class, 0.99, 0.99, 0.01, 0.01, -1.0));
        let r2 = evaluate(&more, &gts, 6, &cfg).unwrap();
        for (c, aps) in &r.per_class_ap {
            for (x, y) in aps.iter().zip(&r2.per_class_ap[c]) {
                prop_assert!(y <= x);
            }
        }
    }

    #[test]
    fn stricter_thresholds_never_score_higher((dets, gts) in arb_case()) {
        let r = evaluate(&dets, &gts, 6, &EvalConfig::default()).unwrap();
        prop_assert!(r.map5095 <= r.map50);
        prop_assert!((0.0..=1.0).contains(&r.map50) && (0.0..=1.0).contains(&r.map5095));
        for aps in r.per_class_ap.values() {
            for w in aps.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-15);
            }
        }
    }
}
