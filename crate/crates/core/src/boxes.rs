//! Axis-aligned boxes, delta encoding, and the proposal sampler that stands
//! in for a region proposal network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clip to `[0, width] x [0, height]`, keeping at least a 1-pixel extent.
    pub fn clipped(&self, width: f64, height: f64) -> BBox {
        let mut x1 = self.x1.clamp(0.0, width);
        let mut y1 = self.y1.clamp(0.0, height);
        let mut x2 = self.x2.clamp(0.0, width);
        let mut y2 = self.y2.clamp(0.0, height);
        if x2 - x1 < 1.0 {
            let c = (0.5 * (x1 + x2)).clamp(0.5, width - 0.5);
            x1 = c - 0.5;
            x2 = c + 0.5;
        }
        if y2 - y1 < 1.0 {
            let c = (0.5 * (y1 + y2)).clamp(0.5, height - 0.5);
            y1 = c - 0.5;
            y2 = c + 0.5;
        }
        BBox::new(x1, y1, x2, y2)
    }
}

/// A region of interest in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoI {
    pub bbox: BBox,
    pub score: f64,
    pub is_positive: bool,
    /// Ground-truth person this RoI was sampled from, for positives.
    pub gt_index: Option<usize>,
}

impl RoI {
    pub fn new(bbox: BBox) -> Self {
        RoI {
            bbox,
            score: 1.0,
            is_positive: false,
            gt_index: None,
        }
    }
}

/// Box refinement deltas: centre shift relative to size, log size ratio.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDeltas {
    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxDeltas {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

/// Deltas that move `reference` onto `target`.
pub fn encode_deltas(target: &BBox, reference: &BBox) -> BoxDeltas {
    let (rw, rh) = (reference.width(), reference.height());
    let (rcx, rcy) = reference.center();
    let (tcx, tcy) = target.center();
    BoxDeltas {
        dx: (tcx - rcx) / rw,
        dy: (tcy - rcy) / rh,
        dw: (target.width() / rw).ln(),
        dh: (target.height() / rh).ln(),
    }
}

/// Apply deltas to a box without clipping.
pub fn apply_deltas(reference: &BBox, d: &BoxDeltas) -> BBox {
    let (w, h) = (reference.width(), reference.height());
    let (cx, cy) = reference.center();
    let (ncx, ncy) = (cx + d.dx * w, cy + d.dy * h);
    // exp(4.1) ~ 60x growth; larger predictions are nonsense
    let (nw, nh) = (w * d.dw.min(4.1).exp(), h * d.dh.min(4.1).exp());
    BBox::new(ncx - 0.5 * nw, ncy - 0.5 * nh, ncx + 0.5 * nw, ncy + 0.5 * nh)
}

/// Refine an RoI by `deltas` and clip it to the image.
pub fn refine_box(roi: &RoI, deltas: &BoxDeltas, image_w: f64, image_h: f64) -> RoI {
    RoI {
        bbox: apply_deltas(&roi.bbox, deltas).clipped(image_w, image_h),
        ..*roi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    /// Corner perturbation as a fraction of the box side, in `[0, 0.5]`.
    pub jitter: f64,
    /// Total RoIs per image.
    pub budget: usize,
    /// Negatives must have IoU strictly below this against every GT box.
    pub negative_iou: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            jitter: 0.1,
            budget: 16,
            negative_iou: 0.3,
        }
    }
}

pub fn jitter_box(b: &BBox, jitter: f64, rng: &mut impl Rng, image_w: f64, image_h: f64) -> BBox {
    if jitter == 0.0 {
        return *b;
    }
    let (w, h) = (b.width(), b.height());
    let mut u = || rng.random_range(-jitter..=jitter);
    let j = BBox::new(b.x1 + u() * w, b.y1 + u() * h, b.x2 + u() * w, b.y2 + u() * h);
    if j.is_valid() {
        j.clipped(image_w, image_h)
    } else {
        b.clipped(image_w, image_h)
    }
}

fn random_negative(gt: &[BBox], image_w: f64, image_h: f64, max_iou: f64, rng: &mut impl Rng) -> BBox {
    for _ in 0..200 {
        let w = rng.random_range(8.0..=(0.6 * image_w).max(9.0));
        let h = rng.random_range(8.0..=(0.6 * image_h).max(9.0));
        let x1 = rng.random_range(0.0..=(image_w - w).max(0.0));
        let y1 = rng.random_range(0.0..=(image_h - h).max(0.0));
        let b = BBox::new(x1, y1, x1 + w, y1 + h).clipped(image_w, image_h);
        if gt.iter().all(|g| g.iou(&b) < max_iou) {
            return b;
        }
    }
    // Fall back to tiny boxes, which overlap any sizeable GT only marginally.
    loop {
        let x1 = rng.random_range(0.0..=(image_w - 4.0));
        let y1 = rng.random_range(0.0..=(image_h - 4.0));
        let b = BBox::new(x1, y1, x1 + 4.0, y1 + 4.0);
        if gt.iter().all(|g| g.iou(&b) < max_iou) {
            return b;
        }
    }
}

/// Sample training/evaluation RoIs from ground truth.
///
/// With a non-empty GT list, `budget / 4` positives are drawn round-robin over
/// the GT boxes (each corner jittered uniformly by up to `jitter` of the box
/// side) and three negatives are drawn per positive. With no GT boxes all
/// `budget` RoIs are negatives. Output order: positives, then negatives.
pub fn propose(gt: &[BBox], image_w: f64, image_h: f64, cfg: &ProposalConfig, seed: u64) -> Result<Vec<RoI>> {
    if !(0.0..=0.5).contains(&cfg.jitter) {
        return Err(Error::Config(format!("jitter {} outside [0, 0.5]", cfg.jitter)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (num_pos, num_neg) = if gt.is_empty() {
        (0, cfg.budget)
    } else {
        let p = cfg.budget / 4;
        (p, 3 * p)
    };
    let mut rois = Vec::with_capacity(num_pos + num_neg);
    for i in 0..num_pos {
        let gi = i % gt.len();
        rois.push(RoI {
            bbox: jitter_box(&gt[gi], cfg.jitter, &mut rng, image_w, image_h),
            score: 1.0,
            is_positive: true,
            gt_index: Some(gi),
        });
    }
    for _ in 0..num_neg {
        rois.push(RoI {
            bbox: random_negative(gt, image_w, image_h, cfg.negative_iou, &mut rng),
            score: 0.0,
            is_positive: false,
            gt_index: None,
        });
    }
    Ok(rois)
}
