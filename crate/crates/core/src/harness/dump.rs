//! Heatmap diagnostics: one grayscale image per detection and keypoint plus
//! an overlay of the decoded skeletons on the input.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::heatmap::ProbHeatmaps;
use crate::keypoints::KeypointPrediction;

use super::image::{encode_pgm, RgbImage};
use super::synth::SKELETON;

/// Probabilities scaled so 0 maps to 0 and the plane maximum to 255.
pub fn to_gray(plane: &[f64]) -> Vec<u8> {
    let max = plane.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![0; plane.len()];
    }
    plane.iter().map(|&p| (p.max(0.0) / max * 255.0).round() as u8).collect()
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), rgb: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        if x >= 0.0 && y >= 0.0 {
            img.set(x as usize, y as usize, rgb);
        }
    }
}

fn draw_dot(img: &mut RgbImage, p: (f64, f64), rgb: [u8; 3]) {
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let (x, y) = (p.0 as i64 + dx, p.1 as i64 + dy);
            if x >= 0 && y >= 0 {
                img.set(x as usize, y as usize, rgb);
            }
        }
    }
}

/// Copy of `image` with every prediction's box, limbs and keypoints drawn.
pub fn overlay(image: &RgbImage, preds: &[KeypointPrediction]) -> RgbImage {
    let mut img = image.clone();
    for p in preds {
        let b = p.bbox;
        let corners = [(b.x1, b.y1), (b.x2, b.y1), (b.x2, b.y2), (b.x1, b.y2)];
        for i in 0..4 {
            draw_line(&mut img, corners[i], corners[(i + 1) % 4], [255, 255, 0]);
        }
        if p.coords.len() == SKELETON.len() + 1 {
            for &(i, j) in &SKELETON {
                draw_line(&mut img, p.coords[i], p.coords[j], [0, 255, 0]);
            }
        }
        for &c in &p.coords {
            draw_dot(&mut img, c, [255, 0, 0]);
        }
    }
    img
}

/// Write `det{R}_kp{K}.pgm` for every plane of `hm` and `overlay.ppm`.
/// Returns the heatmap paths in detection-major order.
pub fn dump_heatmaps(dir: &Path, image: &RgbImage, hm: &ProbHeatmaps, preds: &[KeypointPrediction]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(hm.num_rois() * hm.num_keypoints);
    for r in 0..hm.num_rois() {
        for k in 0..hm.num_keypoints {
            let path = dir.join(format!("det{r:02}_kp{k}.pgm"));
            let bytes = encode_pgm(hm.size, hm.size, &to_gray(hm.plane(r, k)));
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
    }
    overlay(image, preds).save(&dir.join("overlay.ppm"))?;
    Ok(paths)
}
