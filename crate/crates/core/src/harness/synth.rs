//! Procedural multi-person scenes: stick figures whose keypoints are drawn
//! as coloured blobs on a textured background.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::keypoints::{KeypointAnnotation, Visibility};

use super::image::RgbImage;

/// Keypoint names in annotation order.
pub const KEYPOINT_NAMES: [&str; 5] = ["head", "left_hand", "right_hand", "left_foot", "right_foot"];

/// Index pairs exchanged by a horizontal flip.
pub const FLIP_PAIRS: [(usize, usize); 2] = [(1, 2), (3, 4)];

/// Bones drawn between keypoints in overlays.
pub const SKELETON: [(usize, usize); 4] = [(0, 1), (0, 2), (0, 3), (0, 4)];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_height: f64,
    pub max_height: f64,
    pub max_persons: usize,
    /// Probability that a keypoint is hidden (labelled, not drawn).
    pub p_hidden: f64,
    /// Probability that a keypoint is left unlabelled.
    pub p_unlabeled: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 128,
            min_height: 28.0,
            max_height: 100.0,
            max_persons: 4,
            p_hidden: 0.04,
            p_unlabeled: 0.03,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 || !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image_size must be a multiple of 32, got {}",
                self.image_size
            )));
        }
        if !(self.min_height >= 8.0 && self.max_height >= self.min_height && self.max_height <= 0.9 * self.image_size as f64) {
            return Err(Error::Config(format!(
                "person heights [{}, {}] do not fit {}-pixel images",
                self.min_height, self.max_height, self.image_size
            )));
        }
        if self.max_persons == 0 {
            return Err(Error::Config("max_persons must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub persons: Vec<KeypointAnnotation>,
    /// Figure height in pixels per person.
    pub heights: Vec<f64>,
}

struct Figure {
    coords: [(f64, f64); 5],
    neck: (f64, f64),
    hip: (f64, f64),
    height: f64,
}

impl Figure {
    fn sample(height: f64, rng: &mut impl Rng) -> Figure {
        let h = height;
        let neck = (0.0, 0.2 * h);
        let hip = (0.0, 0.58 * h);
        let arm = |rng: &mut ChaCha8Rng, side: f64| {
            let a: f64 = rng.random_range(-0.9..0.9);
            (neck.0 + side * 0.33 * h * a.cos(), neck.1 + 0.33 * h * a.sin())
        };
        let leg = |rng: &mut ChaCha8Rng, side: f64| {
            let a: f64 = rng.random_range(0.05..0.5);
            (hip.0 + side * 0.4 * h * a.sin(), hip.1 + 0.4 * h * a.cos())
        };
        let mut r = ChaCha8Rng::seed_from_u64(rng.random());
        let coords = [
            (0.0, 0.1 * h),
            arm(&mut r, -1.0),
            arm(&mut r, 1.0),
            leg(&mut r, -1.0),
            leg(&mut r, 1.0),
        ];
        Figure {
            coords,
            neck,
            hip,
            height: h,
        }
    }

    fn radius(&self, k: usize) -> f64 {
        if k == 0 {
            0.09 * self.height
        } else {
            (0.05 * self.height).max(1.5)
        }
    }

    fn extent(&self) -> BBox {
        let mut b = BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (k, &(x, y)) in self.coords.iter().enumerate() {
            let r = self.radius(k);
            b.x1 = b.x1.min(x - r);
            b.y1 = b.y1.min(y - r);
            b.x2 = b.x2.max(x + r);
            b.y2 = b.y2.max(y + r);
        }
        b
    }

    fn shifted(&self, dx: f64, dy: f64) -> Figure {
        let s = |p: (f64, f64)| (p.0 + dx, p.1 + dy);
        Figure {
            coords: self.coords.map(s),
            neck: s(self.neck),
            hip: s(self.hip),
            height: self.height,
        }
    }
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let i = 3 * (y * self.size + x);
        for c in 0..3 {
            self.px[i + c] = self.px[i + c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    /// Anti-aliased capsule between `a` and `b` of radius `r`.
    fn capsule(&mut self, a: (f64, f64), b: (f64, f64), r: f64, color: [f64; 3]) {
        let s = self.size as f64;
        let x0 = (a.0.min(b.0) - r - 1.0).floor().clamp(0.0, s - 1.0) as usize;
        let x1 = (a.0.max(b.0) + r + 1.0).ceil().clamp(0.0, s - 1.0) as usize;
        let y0 = (a.1.min(b.1) - r - 1.0).floor().clamp(0.0, s - 1.0) as usize;
        let y1 = (a.1.max(b.1) + r + 1.0).ceil().clamp(0.0, s - 1.0) as usize;
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 > 0.0 {
                    (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let d = ((px - a.0 - t * dx).powi(2) + (py - a.1 - t * dy).powi(2)).sqrt();
                let alpha = (r + 0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    self.blend(x, y, color, alpha);
                }
            }
        }
    }

    fn to_image(&self) -> RgbImage {
        RgbImage {
            width: self.size,
            height: self.size,
            pixels: self.px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }
}

fn jitter_color(base: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0))
}

/// Render scene `index` of the stream selected by `seed`.
pub fn generate_scene(image_id: u32, cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id as u64 + 1);
    let n = cfg.image_size;
    let s = n as f64;

    let base: [f64; 3] = [
        rng.random_range(0.25..0.6),
        rng.random_range(0.25..0.6),
        rng.random_range(0.25..0.6),
    ];
    let (fx, fy, ph) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random_range(0.0..6.3));
    let mut canvas = Canvas {
        size: n,
        px: vec![0.0; 3 * n * n],
    };
    for y in 0..n {
        for x in 0..n {
            let tex = 0.07 * ((x as f64 * fx + ph).sin() * (y as f64 * fy).cos());
            for c in 0..3 {
                let noise: f64 = rng.random_range(-0.04..0.04);
                canvas.px[3 * (y * n + x) + c] = base[c] + tex + noise;
            }
        }
    }

    let count = rng.random_range(1..=cfg.max_persons);
    let mut placed: Vec<(Figure, BBox)> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..30 {
            let h = (rng.random_range(cfg.min_height.ln()..=cfg.max_height.ln())).exp();
            let fig = Figure::sample(h, &mut rng);
            let e = fig.extent();
            if e.width() >= s - 2.0 || e.height() >= s - 2.0 {
                continue;
            }
            let dx = rng.random_range((1.0 - e.x1)..(s - 1.0 - e.x2));
            let dy = rng.random_range((1.0 - e.y1)..(s - 1.0 - e.y2));
            let fig = fig.shifted(dx, dy);
            let bbox = fig.extent();
            if placed.iter().all(|(_, b)| b.iou(&bbox) < 0.3) {
                placed.push((fig, bbox));
                break;
            }
        }
    }

    let mut persons = Vec::with_capacity(placed.len());
    let mut heights = Vec::with_capacity(placed.len());
    for (fig, bbox) in &placed {
        let limb = jitter_color([0.92, 0.9, 0.85], &mut rng);
        let t = (fig.height / 28.0).max(0.8);
        canvas.capsule(fig.neck, fig.hip, t, limb);
        for k in 1..5 {
            let joint = if k < 3 { fig.neck } else { fig.hip };
            canvas.capsule(joint, fig.coords[k], t * 0.8, limb);
        }
        canvas.capsule(fig.coords[0], fig.neck, t * 0.8, limb);
        let palette = [
            jitter_color([0.95, 0.2, 0.15], &mut rng),
            jitter_color([0.15, 0.85, 0.2], &mut rng),
            jitter_color([0.15, 0.3, 0.95], &mut rng),
        ];
        let mut visibility = Vec::with_capacity(5);
        for k in 0..5usize {
            let u: f64 = rng.random();
            let v = if u < cfg.p_hidden {
                Visibility::LabeledInvisible
            } else if u < cfg.p_hidden + cfg.p_unlabeled {
                Visibility::Unlabeled
            } else {
                Visibility::Visible
            };
            if v != Visibility::LabeledInvisible {
                let colour = palette[k.div_ceil(2)];
                canvas.capsule(fig.coords[k], fig.coords[k], fig.radius(k), colour);
            }
            visibility.push(v);
        }
        persons.push(KeypointAnnotation {
            image_id,
            bbox: *bbox,
            coords: fig.coords.to_vec(),
            visibility,
        });
        heights.push(fig.height);
    }
    Ok(Scene {
        image: canvas.to_image(),
        persons,
        heights,
    })
}

/// Mirror an annotation horizontally in an image of width `w`, swapping
/// left/right keypoints.
pub fn flip_annotation(ann: &KeypointAnnotation, w: f64) -> KeypointAnnotation {
    let mut out = ann.clone();
    out.bbox = BBox::new(w - ann.bbox.x2, ann.bbox.y1, w - ann.bbox.x1, ann.bbox.y2);
    for c in out.coords.iter_mut() {
        c.0 = w - c.0;
    }
    if out.coords.len() == KEYPOINT_NAMES.len() {
        for (a, b) in FLIP_PAIRS {
            out.coords.swap(a, b);
            out.visibility.swap(a, b);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        let a = generate_scene(3, &cfg, 9).unwrap();
        let b = generate_scene(3, &cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(4, &cfg, 9).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn keypoints_lie_inside_boxes_and_image() {
        let cfg = SceneConfig::default();
        for id in 0..50 {
            let s = generate_scene(id, &cfg, 1).unwrap();
            assert!((1..=4).contains(&s.persons.len()));
            for p in &s.persons {
                assert!(p.bbox.x1 >= 0.0 && p.bbox.y1 >= 0.0 && p.bbox.x2 <= 128.0 && p.bbox.y2 <= 128.0);
                for &(x, y) in &p.coords {
                    assert!(p.bbox.contains(x, y));
                }
            }
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = generate_scene(0, &SceneConfig::default(), 2).unwrap();
        let p = &s.persons[0];
        let back = flip_annotation(&flip_annotation(p, 128.0), 128.0);
        for (a, b) in back.coords.iter().zip(&p.coords) {
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
        assert_eq!(back.visibility, p.visibility);
    }
}
