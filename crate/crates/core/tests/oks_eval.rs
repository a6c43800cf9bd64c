mod common;

use common::{ap_oracle, greedy_oracle, oks_oracle, random_instance, random_person, rng};
use msa_core::boxes::BBox;
use msa_core::keypoints::{KeypointAnnotation, KeypointPrediction, Visibility};
use msa_core::oks::{evaluate, match_image, oks, AreaRange, MatchStatus, OksConfig};

fn single(gt: (f64, f64), pred: (f64, f64), side: f64) -> (KeypointPrediction, KeypointAnnotation) {
    let g = KeypointAnnotation {
        image_id: 0,
        bbox: BBox::new(0.0, 0.0, side, side),
        coords: vec![gt],
        visibility: vec![Visibility::Visible],
    };
    let mut p = KeypointPrediction::from_annotation(&g, 1.0);
    p.coords = vec![pred];
    (p, g)
}

#[test]
fn oks_closed_forms() {
    let kappa = 0.1;
    let cfg = OksConfig::uniform(1, kappa);
    let (p, g) = single((5.0, 5.0), (5.0, 5.0), 20.0);
    assert_eq!(oks(&p, &g, &cfg).unwrap(), 1.0);
    // d^2 = 2 s^2 kappa^2 with s^2 the box area
    let d = (2.0 * 400.0 * kappa * kappa).sqrt();
    let (p, g) = single((5.0, 5.0), (5.0 + d, 5.0), 20.0);
    assert!((oks(&p, &g, &cfg).unwrap() - (-1.0f64).exp()).abs() <= 1e-12);
    let mut last = 1.0;
    for far in [10.0, 100.0, 1e3, 1e5] {
        let (p, g) = single((5.0, 5.0), (5.0 + far, 5.0 - far), 20.0);
        let s = oks(&p, &g, &cfg).unwrap();
        assert!(s <= last);
        last = s;
    }
    assert_eq!(last, 0.0);
}

#[test]
fn oks_agrees_with_direct_formula() {
    let mut r = rng(20);
    let cfg = OksConfig {
        kappas: vec![0.05, 0.08, 0.1, 0.12, 0.2],
        ..OksConfig::uniform(5, 0.1)
    };
    for _ in 0..100 {
        let (preds, gts) = random_instance(&mut r, 0, 5);
        for p in &preds {
            for g in &gts {
                assert!((oks(p, g, &cfg).unwrap() - oks_oracle(p, g, &cfg.kappas)).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn exact_prediction_is_a_hit_at_every_threshold() {
    let mut r = rng(21);
    let g = random_person(&mut r, 0, 5);
    let p = KeypointPrediction::from_annotation(&g, 0.5);
    let cfg = OksConfig::uniform(5, 0.1);
    for &t in &cfg.thresholds {
        let m = match_image(std::slice::from_ref(&p), std::slice::from_ref(&g), t, AreaRange::ALL, &cfg).unwrap();
        assert_eq!(m.count(MatchStatus::TruePositive), 1);
        assert_eq!(m.count(MatchStatus::FalsePositive), 0);
        assert_eq!(m.false_negatives, 0);
    }
    let m = match_image(&[], &[g.clone(), g], 0.5, AreaRange::ALL, &cfg).unwrap();
    assert_eq!(m.false_negatives, 2);
}

#[test]
fn greedy_matching_agrees_with_enumeration() {
    let mut r = rng(22);
    let cfg = OksConfig::uniform(5, 0.1);
    for _ in 0..300 {
        let (preds, gts) = random_instance(&mut r, 0, 5);
        for &t in &[0.5, 0.75, 0.9] {
            let m = match_image(&preds, &gts, t, AreaRange::ALL, &cfg).unwrap();
            let want = greedy_oracle(&preds, &gts, t, &cfg.kappas);
            let mut order: Vec<usize> = (0..preds.len()).collect();
            order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap());
            let got: Vec<Option<usize>> = {
                let mut v = vec![None; preds.len()];
                for (k, &i) in order.iter().enumerate() {
                    v[i] = m.matched_gt[k];
                }
                v
            };
            assert_eq!(got, want);
            let hits = want.iter().flatten().count();
            assert_eq!(m.count(MatchStatus::TruePositive), hits);
            assert_eq!(m.count(MatchStatus::FalsePositive), preds.len() - hits);
            assert_eq!(m.false_negatives, gts.len() - hits);
        }
    }
}

/// Two persons, three predictions with scores 0.9 (hit), 0.8 (miss), 0.7
/// (hit). Precision/recall points: (1, 1/2), (1/2, 1/2), (2/3, 1). The
/// envelope is 1 up to recall 1/2 and 2/3 above it.
#[test]
fn hand_computed_precision_recall_area() {
    let mut r = rng(23);
    let a = random_person(&mut r, 0, 5);
    let mut b = random_person(&mut r, 0, 5);
    b.bbox = BBox::new(200.0, 200.0, 240.0, 250.0);
    b.coords = b.coords.iter().map(|&(x, y)| (x + 200.0, y + 200.0)).collect();
    let mut miss = KeypointPrediction::from_annotation(&a, 0.8);
    miss.coords = miss.coords.iter().map(|&(x, y)| (x + 500.0, y)).collect();
    let preds = vec![
        KeypointPrediction::from_annotation(&a, 0.9),
        miss,
        KeypointPrediction::from_annotation(&b, 0.7),
    ];
    let rep = evaluate(&preds, &[a, b], &OksConfig::uniform(5, 0.1)).unwrap();
    let want = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    assert!((rep.ap.unwrap() - want).abs() < 1e-12, "{:?}", rep.ap);
    assert_eq!(rep.ar, Some(1.0));
}

#[test]
fn perfect_and_empty_detectors() {
    let mut r = rng(24);
    let gts: Vec<KeypointAnnotation> = (0..12).map(|i| random_person(&mut r, i / 3, 5)).collect();
    let preds: Vec<KeypointPrediction> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| KeypointPrediction::from_annotation(g, 1.0 - 0.01 * i as f64))
        .collect();
    let rep = evaluate(&preds, &gts, &OksConfig::uniform(5, 0.1)).unwrap();
    assert_eq!((rep.ap, rep.ar, rep.ap50, rep.ap75), (Some(1.0), Some(1.0), Some(1.0), Some(1.0)));
    let rep = evaluate(&[], &gts, &OksConfig::uniform(5, 0.1)).unwrap();
    assert_eq!(rep.ap, Some(0.0));
}

#[test]
fn pooled_ap_agrees_with_oracle() {
    let mut r = rng(25);
    let cfg = OksConfig::uniform(5, 0.1);
    for _ in 0..30 {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for img in 0..5 {
            let (p, g) = random_instance(&mut r, img, 5);
            preds.extend(p);
            gts.extend(g);
        }
        let rep = evaluate(&preds, &gts, &cfg).unwrap();
        let mut total = 0.0;
        for &t in &cfg.thresholds {
            let mut dets = Vec::new();
            for img in 0..5 {
                let p: Vec<KeypointPrediction> = preds.iter().filter(|x| x.image_id == img).cloned().collect();
                let g: Vec<KeypointAnnotation> = gts.iter().filter(|x| x.image_id == img).cloned().collect();
                let m = greedy_oracle(&p, &g, t, &cfg.kappas);
                dets.extend(p.iter().zip(&m).map(|(x, m)| (x.score, m.is_some())));
            }
            total += ap_oracle(&dets, gts.len());
        }
        let want = total / cfg.thresholds.len() as f64;
        assert!((rep.ap.unwrap() - want).abs() < 1e-12, "{:?} vs {want}", rep.ap);
    }
}
