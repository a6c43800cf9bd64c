//! Evaluation runs: proposals, sequential inference, optional multi-scale
//! heatmap averaging, decoding, and OKS scoring.

use std::fs;
use std::path::Path;

use crate::boxes::{propose, BBox, ProposalConfig};
use crate::error::{Error, Result};
use crate::heatmap::{decode_argmax, decode_top2, tta_average, warp_to_image, ProbHeatmaps};
use crate::keypoints::{KeypointAnnotation, KeypointPrediction};
use crate::model::Model;
use crate::oks::{evaluate as oks_evaluate, EvalReport, OksConfig};
use crate::par;
use crate::tensor::Scalar;

use super::config::{DecodeMode, RunConfig};
use super::dataset::{format_prediction, write_lines, Split};
use super::image::RgbImage;

/// Evaluation proposals: one jittered box per person plus three negatives
/// per person.
pub fn eval_proposals(anns: &[KeypointAnnotation], width: f64, height: f64, jitter: f64, seed: u64) -> Result<Vec<BBox>> {
    let boxes: Vec<BBox> = anns.iter().map(|a| a.bbox).collect();
    let cfg = ProposalConfig {
        jitter,
        budget: 4 * boxes.len().max(1),
        negative_iou: 0.3,
    };
    Ok(propose(&boxes, width, height, &cfg, seed)?.into_iter().map(|r| r.bbox).collect())
}

/// Heatmaps of `boxes` averaged over `scales`. `base` holds the heatmaps
/// already computed at scale 1, when available.
pub fn multi_scale_heatmaps<T: Scalar>(
    model: &Model<T>,
    image: &RgbImage,
    boxes: &[BBox],
    scales: &[f64],
    base: Option<&ProbHeatmaps>,
) -> Result<ProbHeatmaps> {
    let mut sets = Vec::with_capacity(scales.len());
    for &s in scales {
        if s == 1.0 {
            if let Some(b) = base {
                sets.push(b.clone());
                continue;
            }
        }
        let (input, _) = image.to_input::<T>(s, false)?;
        let scaled: Vec<BBox> = boxes.iter().map(|b| b.scaled(s)).collect();
        let mut hm = model.keypoint_heatmaps(&input, &scaled)?;
        hm.boxes = boxes.to_vec();
        sets.push(hm);
    }
    tta_average(&sets)
}

/// Decode every RoI of `hm` into image-space predictions.
pub fn decode_predictions(hm: &ProbHeatmaps, scores: &[f64], image_id: u32, mode: DecodeMode) -> Vec<KeypointPrediction> {
    (0..hm.num_rois())
        .map(|r| {
            let b = hm.boxes[r];
            let mut coords = Vec::with_capacity(hm.num_keypoints);
            let mut confidences = Vec::with_capacity(hm.num_keypoints);
            for k in 0..hm.num_keypoints {
                let plane = hm.plane(r, k);
                let peak = match mode {
                    DecodeMode::Argmax => decode_argmax(plane, hm.size),
                    DecodeMode::Top2 => decode_top2(plane, hm.size),
                };
                coords.push(warp_to_image(peak.row, peak.col, &b, hm.size));
                confidences.push(peak.confidence);
            }
            KeypointPrediction {
                image_id,
                bbox: b,
                score: scores[r],
                coords,
                confidences,
            }
        })
        .collect()
}

/// Everything needed to decode one image under different decode/TTA
/// settings without rerunning the detector.
#[derive(Debug, Clone)]
pub struct ImageInference {
    pub image_id: u32,
    pub scores: Vec<f64>,
    pub heatmaps: ProbHeatmaps,
}

/// Run the detector and keypoint head on one image.
pub fn infer_image<T: Scalar>(
    model: &Model<T>,
    image: &RgbImage,
    anns: &[KeypointAnnotation],
    image_id: u32,
    cfg: &RunConfig,
) -> Result<ImageInference> {
    let (w, h) = (image.width as f64, image.height as f64);
    let seed = cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ image_id as u64;
    let proposals = eval_proposals(anns, w, h, cfg.eval_jitter, seed)?;
    let (input, _) = image.to_input::<T>(1.0, false)?;
    let out = model.sequential_inference(&input, &proposals, cfg.score_threshold)?;
    let scores: Vec<f64> = out.detections.iter().map(|d| d.score).collect();
    Ok(ImageInference {
        image_id,
        scores,
        heatmaps: out.heatmaps,
    })
}

/// Predictions for a split under `cfg.decode` and `cfg.tta_scales`.
pub fn predict_split<T: Scalar>(model: &Model<T>, split: &Split, cfg: &RunConfig) -> Result<Vec<KeypointPrediction>> {
    let per_image = par::map_indexed(split.len(), |i| -> Result<Vec<KeypointPrediction>> {
        let inf = infer_image(model, &split.images[i], &split.annotations[i], i as u32, cfg)?;
        let hm = if cfg.tta_scales.len() == 1 && cfg.tta_scales[0] == 1.0 {
            inf.heatmaps
        } else {
            let boxes = inf.heatmaps.boxes.clone();
            multi_scale_heatmaps(model, &split.images[i], &boxes, &cfg.tta_scales, Some(&inf.heatmaps))?
        };
        Ok(decode_predictions(&hm, &inf.scores, i as u32, cfg.decode))
    });
    let mut preds = Vec::new();
    for p in per_image {
        preds.extend(p?);
    }
    Ok(preds)
}

pub fn oks_config(cfg: &RunConfig) -> OksConfig {
    OksConfig::uniform(cfg.model.num_keypoints, cfg.kappa)
}

/// Predict, score, and write `predictions.txt`, `report.txt` and
/// `report.json` into `out_dir`.
pub fn evaluate_split<T: Scalar>(model: &Model<T>, split: &Split, cfg: &RunConfig, out_dir: &Path) -> Result<EvalReport> {
    let preds = predict_split(model, split, cfg)?;
    let report = oks_evaluate(&preds, &split.all_annotations(), &oks_config(cfg))?;
    write_outputs(out_dir, &preds, &report)?;
    Ok(report)
}

pub fn write_outputs(out_dir: &Path, preds: &[KeypointPrediction], report: &EvalReport) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_lines(&out_dir.join("predictions.txt"), preds.iter().map(format_prediction))?;
    let txt = out_dir.join("report.txt");
    fs::write(&txt, report.to_key_value()).map_err(|e| Error::io(&txt, e))?;
    let json = out_dir.join("report.json");
    fs::write(&json, report.to_record() + "\n").map_err(|e| Error::io(&json, e))
}
