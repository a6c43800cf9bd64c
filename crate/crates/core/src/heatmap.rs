//! One-hot heatmap targets, the spatial softmax cross-entropy loss, peak
//! decoding, RoI-to-image warping and multi-scale heatmap averaging.

use crate::boxes::BBox;
use crate::error::{ensure_dim, Error, Result};
use crate::heads::HeatmapBatch;
use crate::keypoints::KeypointAnnotation;
use crate::tensor::kernels::{resize_forward, softmax_planes};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Hot cell per keypoint (row-major flat index) or `None` when masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapTarget {
    pub cells: Vec<Option<usize>>,
    pub grid: usize,
}

impl HeatmapTarget {
    /// Dense one-hot maps `[N, G, G]`, zero for masked keypoints.
    pub fn one_hot<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.grid * self.grid;
        let mut t = Tensor::zeros([self.cells.len(), self.grid, self.grid]);
        for (k, c) in self.cells.iter().enumerate() {
            if let Some(c) = c {
                t.data_mut()[k * plane + c] = T::one();
            }
        }
        t
    }

    pub fn mask(&self) -> Vec<bool> {
        self.cells.iter().map(Option::is_some).collect()
    }
}

/// Map each labelled keypoint inside `roi` to the `grid x grid` cell that
/// contains it (floor convention). Unlabelled keypoints and keypoints
/// outside the RoI are masked.
pub fn encode_target(ann: &KeypointAnnotation, roi: &BBox, grid: usize) -> HeatmapTarget {
    let (w, h) = (roi.width(), roi.height());
    let cells = ann
        .coords
        .iter()
        .zip(&ann.visibility)
        .map(|(&(x, y), v)| {
            if !v.is_labeled() || !roi.contains(x, y) || w <= 0.0 || h <= 0.0 {
                return None;
            }
            let col = (((x - roi.x1) / w * grid as f64).floor() as usize).min(grid - 1);
            let row = (((y - roi.y1) / h * grid as f64).floor() as usize).min(grid - 1);
            Some(row * grid + col)
        })
        .collect();
    HeatmapTarget { cells, grid }
}

/// Mean spatial-softmax cross-entropy over unmasked keypoints of all RoIs.
pub fn softmax_ce_loss<T: Scalar>(g: &mut Graph<T>, heatmaps: &HeatmapBatch, targets: &[HeatmapTarget]) -> Result<Var> {
    ensure_dim!(
        targets.len() == heatmaps.boxes.len(),
        "{} targets for {} RoIs",
        targets.len(),
        heatmaps.boxes.len()
    );
    let mut flat = Vec::with_capacity(targets.len() * heatmaps.num_keypoints);
    for t in targets {
        ensure_dim!(t.grid == heatmaps.size, "target grid {} != heatmap size {}", t.grid, heatmaps.size);
        ensure_dim!(t.cells.len() == heatmaps.num_keypoints, "target keypoint count mismatch");
        flat.extend_from_slice(&t.cells);
    }
    g.softmax_ce(heatmaps.logits, &flat)
}

/// Softmax-normalised heatmaps `[R, N, G, G]` with the RoIs they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbHeatmaps {
    pub probs: Vec<f64>,
    pub boxes: Vec<BBox>,
    pub num_keypoints: usize,
    pub size: usize,
}

impl ProbHeatmaps {
    pub fn from_logits<T: Scalar>(logits: &Tensor<T>, boxes: &[BBox]) -> Result<Self> {
        let (r, n, h, w) = logits.dims4()?;
        ensure_dim!(h == w, "heatmaps must be square, got {h}x{w}");
        ensure_dim!(r == boxes.len(), "{r} heatmaps for {} boxes", boxes.len());
        let probs = softmax_planes(logits.data(), h * w).into_iter().map(|v| v.as_f64()).collect();
        Ok(ProbHeatmaps {
            probs,
            boxes: boxes.to_vec(),
            num_keypoints: n,
            size: h,
        })
    }

    pub fn plane(&self, roi: usize, keypoint: usize) -> &[f64] {
        let p = self.size * self.size;
        let i = roi * self.num_keypoints + keypoint;
        &self.probs[i * p..(i + 1) * p]
    }

    pub fn num_rois(&self) -> usize {
        self.boxes.len()
    }
}

/// Decoded peak in grid coordinates (row, col may be fractional).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub row: f64,
    pub col: f64,
    pub confidence: f64,
}

/// Highest-probability cell; ties go to the first cell in row-major order.
pub fn decode_argmax(plane: &[f64], size: usize) -> Peak {
    let (best, &p) = plane
        .iter()
        .enumerate()
        .fold((0, &plane[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
    Peak {
        row: (best / size) as f64,
        col: (best % size) as f64,
        confidence: p,
    }
}

/// Probability-weighted average of the two highest cells; the confidence is
/// the peak probability.
pub fn decode_top2(plane: &[f64], size: usize) -> Peak {
    let mut first = 0;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[first] {
            first = i;
        }
    }
    let mut second: Option<usize> = None;
    for (i, &v) in plane.iter().enumerate() {
        if i != first && second.is_none_or(|s| v > plane[s]) {
            second = Some(i);
        }
    }
    let (p1, g1) = (plane[first], ((first / size) as f64, (first % size) as f64));
    let Some(second) = second else {
        return Peak {
            row: g1.0,
            col: g1.1,
            confidence: p1,
        };
    };
    let (p2, g2) = (plane[second], ((second / size) as f64, (second % size) as f64));
    let total = p1 + p2;
    if total <= 0.0 {
        return Peak {
            row: g1.0,
            col: g1.1,
            confidence: p1,
        };
    }
    Peak {
        row: (p1 * g1.0 + p2 * g2.0) / total,
        col: (p1 * g1.1 + p2 * g2.1) / total,
        confidence: p1,
    }
}

/// Grid coordinates to image pixels, mapping cell `(r, c)` to its centre.
pub fn warp_to_image(row: f64, col: f64, roi: &BBox, grid: usize) -> (f64, f64) {
    let cw = roi.width() / grid as f64;
    let ch = roi.height() / grid as f64;
    (roi.x1 + (col + 0.5) * cw, roi.y1 + (row + 0.5) * ch)
}

/// Average probability heatmaps computed at several input scales for the
/// same RoIs. Every set is bilinearly resized to the largest grid present,
/// averaged, and renormalised to unit mass per keypoint.
pub fn tta_average(sets: &[ProbHeatmaps]) -> Result<ProbHeatmaps> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Config("tta_average over zero heatmap sets".into()))?;
    for s in sets {
        if s.boxes.len() != first.boxes.len() || s.num_keypoints != first.num_keypoints {
            return Err(Error::Config("tta_average: heatmap sets cover different RoIs".into()));
        }
        for (a, b) in s.boxes.iter().zip(&first.boxes) {
            let tol = 1e-6 * (1.0 + a.x2.abs().max(a.y2.abs()));
            if (a.x1 - b.x1).abs() > tol || (a.y1 - b.y1).abs() > tol || (a.x2 - b.x2).abs() > tol || (a.y2 - b.y2).abs() > tol {
                return Err(Error::Config("tta_average: heatmap sets cover different RoIs".into()));
            }
        }
    }
    if sets.len() == 1 {
        return Ok(first.clone());
    }
    let size = sets.iter().map(|s| s.size).max().unwrap_or(first.size);
    let maps = first.num_rois() * first.num_keypoints;
    let mut acc = vec![0.0f64; maps * size * size];
    for s in sets {
        let resized = if s.size == size {
            s.probs.clone()
        } else {
            resize_forward(&s.probs, [maps, 1, s.size, s.size], size, size)
        };
        for (a, v) in acc.iter_mut().zip(resized) {
            *a += v;
        }
    }
    let plane = size * size;
    for block in acc.chunks_mut(plane) {
        let total: f64 = block.iter().sum();
        if total > 0.0 {
            for v in block.iter_mut() {
                *v /= total;
            }
        }
    }
    Ok(ProbHeatmaps {
        probs: acc,
        boxes: first.boxes.clone(),
        num_keypoints: first.num_keypoints,
        size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::Visibility;

    fn ann(points: &[(f64, f64, u8)]) -> KeypointAnnotation {
        KeypointAnnotation {
            image_id: 0,
            bbox: BBox::new(0.0, 0.0, 100.0, 100.0),
            coords: points.iter().map(|&(x, y, _)| (x, y)).collect(),
            visibility: points.iter().map(|&(_, _, v)| Visibility::from_flag(v).unwrap()).collect(),
        }
    }

    #[test]
    fn centre_keypoint_lands_in_middle_cell() {
        let roi = BBox::new(10.0, 20.0, 74.0, 84.0);
        let t = encode_target(&ann(&[(42.0, 52.0, 2)]), &roi, 64);
        assert_eq!(t.cells[0], Some(32 * 64 + 32));
    }

    #[test]
    fn unlabeled_and_outside_are_masked() {
        let roi = BBox::new(10.0, 10.0, 50.0, 50.0);
        let t = encode_target(&ann(&[(20.0, 20.0, 0), (60.0, 20.0, 2), (20.0, 20.0, 1)]), &roi, 8);
        assert_eq!(t.mask(), vec![false, false, true]);
        let oh = t.one_hot::<f64>();
        let plane = 64;
        assert!(oh.data()[..plane].iter().all(|&v| v == 0.0));
        assert_eq!(oh.data()[2 * plane..].iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn argmax_ties_go_to_first_cell() {
        let plane = vec![1.0 / 16.0; 16];
        let p = decode_argmax(&plane, 4);
        assert_eq!((p.row, p.col), (0.0, 0.0));
        assert_eq!(p.confidence, 1.0 / 16.0);
    }

    #[test]
    fn top2_weighted_average() {
        let mut plane = vec![0.0; 64];
        plane[3 * 8 + 4] = 0.6;
        plane[3 * 8 + 5] = 0.4;
        let p = decode_top2(&plane, 8);
        assert_eq!((p.row, p.col), (3.0, 4.4));
        assert_eq!(p.confidence, 0.6);
    }

    #[test]
    fn top2_with_zero_runner_up_is_argmax() {
        let mut plane = vec![0.0; 16];
        plane[9] = 1.0;
        let p = decode_top2(&plane, 4);
        assert_eq!((p.row, p.col), (2.0, 1.0));
    }

    #[test]
    fn warp_maps_cells_to_centres() {
        let roi = BBox::new(5.0, 7.0, 13.0, 15.0);
        assert_eq!(warp_to_image(0.0, 0.0, &roi, 8), (5.5, 7.5));
        let (ax, ay) = warp_to_image(3.0, 2.0, &roi, 4);
        let (bx, by) = warp_to_image(1.0, 1.0, &roi, 4);
        assert_eq!((ax - bx, ay - by), (1.0 * 2.0, 2.0 * 2.0));
    }

    #[test]
    fn tta_rejects_different_rois() {
        let a = ProbHeatmaps {
            probs: vec![0.25; 4],
            boxes: vec![BBox::new(0.0, 0.0, 4.0, 4.0)],
            num_keypoints: 1,
            size: 2,
        };
        let mut b = a.clone();
        b.boxes[0].x2 = 9.0;
        assert!(tta_average(&[a.clone(), b]).is_err());
        assert!(tta_average(&[]).is_err());
        assert_eq!(tta_average(&[a.clone(), a.clone()]).unwrap(), a);
    }
}
