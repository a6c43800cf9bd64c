mod common;

use common::{rand_tensor, rng, softmax_ce_oracle};
use msa_core::boxes::BBox;
use msa_core::heads::HeatmapBatch;
use msa_core::heatmap::{
    decode_argmax, decode_top2, encode_target, softmax_ce_loss, tta_average, warp_to_image, HeatmapTarget, ProbHeatmaps,
};
use msa_core::keypoints::{KeypointAnnotation, Visibility};
use msa_core::{Graph, Tensor};
use rand::Rng;

fn person(points: &[(f64, f64)]) -> KeypointAnnotation {
    KeypointAnnotation {
        image_id: 0,
        bbox: BBox::new(0.0, 0.0, 64.0, 64.0),
        coords: points.to_vec(),
        visibility: vec![Visibility::Visible; points.len()],
    }
}

/// Loss of `logits` `[1, N, G, G]` against `cells`.
fn loss(logits: &Tensor<f64>, cells: Vec<Option<usize>>) -> f64 {
    let mut g = Graph::new();
    let grid = logits.shape()[2];
    let v = g.constant(logits.clone()).unwrap();
    let batch = HeatmapBatch {
        logits: v,
        boxes: vec![BBox::new(0.0, 0.0, 1.0, 1.0)],
        num_keypoints: logits.shape()[1],
        size: grid,
    };
    let l = softmax_ce_loss(&mut g, &batch, &[HeatmapTarget { cells, grid }]).unwrap();
    g.value(l).data()[0]
}

#[test]
fn centre_keypoint_encodes_to_the_middle_cell() {
    let t = encode_target(&person(&[(32.0, 32.0)]), &BBox::new(0.0, 0.0, 64.0, 64.0), 64);
    assert_eq!(t.cells, vec![Some(32 * 64 + 32)]);
    let oh = t.one_hot::<f64>();
    assert_eq!(oh.data().iter().sum::<f64>(), 1.0);
    assert_eq!(oh.data()[32 * 64 + 32], 1.0);
}

#[test]
fn uniform_logits_cost_log_grid_area() {
    for g in [4usize, 8, 32] {
        let logits = Tensor::new([1, 2, g, g], vec![0.7; 2 * g * g]).unwrap();
        let l = loss(&logits, vec![Some(0), Some(g * g - 1)]);
        assert!((l - ((g * g) as f64).ln()).abs() <= 1e-12, "G={g}: {l}");
    }
}

#[test]
fn spike_at_target_costs_almost_nothing() {
    let mut z = vec![0.0; 64];
    z[27] = 60.0;
    let l = loss(&Tensor::new([1, 1, 8, 8], z).unwrap(), vec![Some(27)]);
    assert!((0.0..1e-20).contains(&l), "{l}");
}

#[test]
fn random_two_keypoint_loss_matches_direct_computation() {
    let mut r = rng(11);
    for _ in 0..20 {
        let logits = rand_tensor(&mut r, &[1, 2, 8, 8]).map(|v| 4.0 * v);
        let cells = vec![
            Some(r.random_range(0..64)),
            if r.random() { Some(r.random_range(0..64)) } else { None },
        ];
        let got = loss(&logits, cells.clone());
        let want = softmax_ce_oracle(logits.data(), 64, &cells);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

fn scan_argmax(plane: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..plane.len() {
        if plane[i] > plane[best] {
            best = i;
        }
    }
    best
}

#[test]
fn argmax_cases() {
    let mut plane = vec![1e-4; 64];
    plane[45] = 0.99;
    let p = decode_argmax(&plane, 8);
    assert_eq!((p.row, p.col, p.confidence), (5.0, 5.0, 0.99));

    let uniform = vec![1.0 / 256.0; 256];
    let p = decode_argmax(&uniform, 16);
    assert_eq!((p.row, p.col, p.confidence), (0.0, 0.0, 1.0 / 256.0));

    let mut r = rng(12);
    for _ in 0..200 {
        let plane: Vec<f64> = (0..36).map(|_| r.random_range(0..5) as f64).collect();
        let best = scan_argmax(&plane);
        let p = decode_argmax(&plane, 6);
        assert_eq!((p.row, p.col), ((best / 6) as f64, (best % 6) as f64));
    }
}

#[test]
fn top2_lies_between_the_two_best_cells() {
    let mut r = rng(13);
    for _ in 0..200 {
        let mut plane: Vec<f64> = (0..64).map(|_| r.random::<f64>()).collect();
        let total: f64 = plane.iter().sum();
        plane.iter_mut().for_each(|v| *v /= total);
        let mut idx: Vec<usize> = (0..64).collect();
        idx.sort_by(|&a, &b| plane[b].partial_cmp(&plane[a]).unwrap());
        let (a, b) = (idx[0], idx[1]);
        let (ar, ac) = ((a / 8) as f64, (a % 8) as f64);
        let (br, bc) = ((b / 8) as f64, (b % 8) as f64);
        let p = decode_top2(&plane, 8);
        // p = a + t (b - a) with t = p_b / (p_a + p_b) in [0, 1/2]
        let t = plane[b] / (plane[a] + plane[b]);
        assert!((0.0..=0.5).contains(&t));
        assert!((p.row - (ar + t * (br - ar))).abs() < 1e-12);
        assert!((p.col - (ac + t * (bc - ac))).abs() < 1e-12);
        assert_eq!(p.confidence, plane[a]);
    }
}

#[test]
fn warp_is_affine_and_inverts_encoding_within_a_cell() {
    let roi = BBox::new(10.0, 20.0, 50.0, 100.0);
    assert_eq!(warp_to_image(0.0, 0.0, &BBox::new(3.0, 4.0, 11.0, 12.0), 8), (3.5, 4.5));
    let (cw, ch) = (40.0 / 16.0, 80.0 / 16.0);
    let a = warp_to_image(2.5, 7.0, &roi, 16);
    let b = warp_to_image(-1.0, 3.25, &roi, 16);
    assert!(((a.0 - b.0) - (7.0 - 3.25) * cw).abs() < 1e-12);
    assert!(((a.1 - b.1) - (2.5 + 1.0) * ch).abs() < 1e-12);

    let mut r = rng(14);
    for _ in 0..500 {
        let pt = (r.random_range(10.0..50.0), r.random_range(20.0..100.0));
        let cell = encode_target(&person(&[pt]), &roi, 16).cells[0].unwrap();
        let (x, y) = warp_to_image((cell / 16) as f64, (cell % 16) as f64, &roi, 16);
        assert!((x - pt.0).abs() <= cw && (y - pt.1).abs() <= ch);
    }
}

fn probs(size: usize, planes: Vec<Vec<f64>>) -> ProbHeatmaps {
    ProbHeatmaps {
        probs: planes.concat(),
        boxes: vec![BBox::new(0.0, 0.0, 8.0, 8.0)],
        num_keypoints: planes.len(),
        size,
    }
}

#[test]
fn tta_average_cases() {
    let mut spike8 = vec![0.0; 64];
    spike8[3 * 8 + 5] = 1.0;
    let a = probs(8, vec![spike8.clone()]);
    assert_eq!(tta_average(std::slice::from_ref(&a)).unwrap(), a);
    let avg = tta_average(&[a.clone(), a.clone(), a.clone()]).unwrap();
    assert_eq!(scan_argmax(&avg.probs), 3 * 8 + 5);
    assert!((avg.probs[3 * 8 + 5] - 1.0).abs() < 1e-12);

    let mut r = rng(15);
    let rand_plane = |r: &mut rand_chacha::ChaCha8Rng, n: usize| (0..n).map(|_| r.random::<f64>()).collect::<Vec<f64>>();
    let small = probs(4, vec![rand_plane(&mut r, 16), rand_plane(&mut r, 16)]);
    let large = probs(8, vec![rand_plane(&mut r, 64), rand_plane(&mut r, 64)]);
    let avg = tta_average(&[small, large]).unwrap();
    assert_eq!(avg.size, 8);
    for k in 0..2 {
        assert!((avg.plane(0, k).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
