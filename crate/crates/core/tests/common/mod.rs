//! Reference implementations written independently of the library, used as
//! oracles by several test targets.
#![allow(dead_code, clippy::too_many_arguments, clippy::needless_range_loop)]

use msa_core::boxes::BBox;
use msa_core::keypoints::{KeypointAnnotation, KeypointPrediction, Visibility};
use msa_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Bilinear interpolation as a sum of tent weights over every texel. Points
/// more than one texel outside the map read zero; points in the border band
/// are clamped onto the map first.
pub fn bilinear_point(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return 0.0;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let mut v = 0.0;
    for i in 0..h {
        let wy = (1.0 - (y - i as f64).abs()).max(0.0);
        if wy == 0.0 {
            continue;
        }
        for j in 0..w {
            let wx = (1.0 - (x - j as f64).abs()).max(0.0);
            v += plane[i * w + j] * wy * wx;
        }
    }
    v
}

/// Aligned RoIAlign of one box on a `[C, h, w]` map: each of the `out x out`
/// cells is the mean of `sr x sr` evenly spaced bilinear samples, the box
/// being mapped to texel coordinates as `p / stride - 0.5`.
pub fn roialign_oracle(map: &[f64], c: usize, h: usize, w: usize, b: [f64; 4], stride: f64, out: usize, sr: usize) -> Vec<f64> {
    let (x1, y1) = (b[0] / stride - 0.5, b[1] / stride - 0.5);
    let (x2, y2) = (b[2] / stride - 0.5, b[3] / stride - 0.5);
    let (cw, ch) = ((x2 - x1) / out as f64, (y2 - y1) / out as f64);
    let mut res = Vec::with_capacity(c * out * out);
    for k in 0..c {
        let plane = &map[k * h * w..(k + 1) * h * w];
        for py in 0..out {
            for px in 0..out {
                let mut acc = 0.0;
                for sy in 0..sr {
                    for sx in 0..sr {
                        let y = y1 + ch * (py as f64 + (2 * sy + 1) as f64 / (2 * sr) as f64);
                        let x = x1 + cw * (px as f64 + (2 * sx + 1) as f64 / (2 * sr) as f64);
                        acc += bilinear_point(plane, h, w, y, x);
                    }
                }
                res.push(acc / (sr * sr) as f64);
            }
        }
    }
    res
}

/// Mean over valid keypoints of `-log softmax(logits)[target]`, with the
/// log-partition computed around the plane maximum.
pub fn softmax_ce_oracle(logits: &[f64], plane: usize, targets: &[Option<usize>]) -> f64 {
    let mut total = 0.0;
    let mut valid = 0;
    for (k, t) in targets.iter().enumerate() {
        let Some(t) = t else { continue };
        let z = &logits[k * plane..(k + 1) * plane];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[*t];
        valid += 1;
    }
    total / valid as f64
}

pub fn oks_oracle(p: &KeypointPrediction, g: &KeypointAnnotation, kappas: &[f64]) -> f64 {
    let area = (g.bbox.x2 - g.bbox.x1) * (g.bbox.y2 - g.bbox.y1);
    let terms: Vec<f64> = (0..g.coords.len())
        .filter(|&i| g.visibility[i] != Visibility::Unlabeled)
        .map(|i| {
            let dx = p.coords[i].0 - g.coords[i].0;
            let dy = p.coords[i].1 - g.coords[i].1;
            (-(dx * dx + dy * dy) / (2.0 * area * kappas[i] * kappas[i])).exp()
        })
        .collect();
    terms.iter().sum::<f64>() / terms.len() as f64
}

/// Enumerate every partial one-to-one assignment of predictions (visited by
/// descending score, ties by index) to ground truths and return the unique
/// one consistent with greedy matching: each prediction takes the best
/// still-free GT reaching `thr` (lowest index on ties), or nothing when no
/// free GT qualifies. Result is indexed like `preds`.
pub fn greedy_oracle(preds: &[KeypointPrediction], gts: &[KeypointAnnotation], thr: f64, kappas: &[f64]) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
    let sim: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| gts.iter().map(|g| oks_oracle(&preds[i], g, kappas)).collect())
        .collect();
    let choices = gts.len() + 1;
    let total = choices.pow(preds.len() as u32);
    let mut found: Vec<Vec<Option<usize>>> = Vec::new();
    'outer: for code in 0..total {
        let mut c = code;
        let mut assign = Vec::with_capacity(preds.len());
        for _ in 0..preds.len() {
            let d = c % choices;
            c /= choices;
            assign.push(if d == gts.len() { None } else { Some(d) });
        }
        let mut used = vec![false; gts.len()];
        for (k, a) in assign.iter().enumerate() {
            let free: Vec<usize> = (0..gts.len()).filter(|&j| !used[j] && sim[k][j] >= thr).collect();
            match a {
                None if !free.is_empty() => continue 'outer,
                None => {}
                Some(j) => {
                    if !free.contains(j) {
                        continue 'outer;
                    }
                    if free.iter().any(|&o| sim[k][o] > sim[k][*j] || (sim[k][o] == sim[k][*j] && o < *j)) {
                        continue 'outer;
                    }
                    used[*j] = true;
                }
            }
        }
        found.push(assign);
    }
    assert_eq!(found.len(), 1, "greedy assignment must be unique");
    let mut out = vec![None; preds.len()];
    for (k, &i) in order.iter().enumerate() {
        out[i] = found[0][k];
    }
    out
}

/// 101-point interpolated AP from pooled `(score, is_true_positive)` pairs,
/// where interpolated precision at recall `r` is the best precision reached
/// at any recall of at least `r`.
pub fn ap_oracle(dets: &[(f64, bool)], num_gt: usize) -> f64 {
    let mut d = dets.to_vec();
    d.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut tp = 0;
    let pr: Vec<(f64, f64)> = d
        .iter()
        .enumerate()
        .map(|(k, &(_, hit))| {
            tp += hit as usize;
            (tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64)
        })
        .collect();
    (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            pr.iter().filter(|(rec, _)| *rec + 1e-12 >= r).map(|p| p.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

/// A random person box with `n` labelled keypoints scattered inside it.
pub fn random_person(rng: &mut ChaCha8Rng, image_id: u32, n: usize) -> KeypointAnnotation {
    let x1 = rng.random_range(0.0..80.0);
    let y1 = rng.random_range(0.0..80.0);
    let w = rng.random_range(10.0..60.0);
    let h = rng.random_range(10.0..60.0);
    let bbox = BBox::new(x1, y1, x1 + w, y1 + h);
    let coords = (0..n)
        .map(|_| (x1 + rng.random_range(0.0..w), y1 + rng.random_range(0.0..h)))
        .collect();
    let visibility = (0..n)
        .map(|i| match (i, rng.random_range(0..4)) {
            (0, _) => Visibility::Visible,
            (_, 0) => Visibility::Unlabeled,
            (_, 1) => Visibility::LabeledInvisible,
            _ => Visibility::Visible,
        })
        .collect();
    KeypointAnnotation {
        image_id,
        bbox,
        coords,
        visibility,
    }
}

/// A prediction near `gt`, displaced by Gaussian-ish noise of scale `noise`
/// pixels per keypoint.
pub fn noisy_prediction(rng: &mut ChaCha8Rng, gt: &KeypointAnnotation, noise: f64, score: f64) -> KeypointPrediction {
    let coords = gt
        .coords
        .iter()
        .map(|&(x, y)| (x + noise * rng.random_range(-1.0..1.0), y + noise * rng.random_range(-1.0..1.0)))
        .collect();
    KeypointPrediction {
        image_id: gt.image_id,
        bbox: gt.bbox,
        score,
        coords,
        confidences: vec![1.0; gt.coords.len()],
    }
}

/// A random image with up to four persons and up to four predictions drawn
/// near them at mixed noise levels, with distinct scores.
pub fn random_instance(rng: &mut ChaCha8Rng, image_id: u32, n: usize) -> (Vec<KeypointPrediction>, Vec<KeypointAnnotation>) {
    let gts: Vec<KeypointAnnotation> = (0..rng.random_range(1..=4)).map(|_| random_person(rng, image_id, n)).collect();
    let np = rng.random_range(0..=4);
    let preds = (0..np)
        .map(|_| {
            let g = &gts[rng.random_range(0..gts.len())];
            let noise = [0.5, 2.0, 5.0, 12.0][rng.random_range(0..4)];
            let score = rng.random_range(0.05..1.0);
            noisy_prediction(rng, g, noise, score)
        })
        .collect();
    (preds, gts)
}
