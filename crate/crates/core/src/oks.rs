//! Object keypoint similarity and the OKS-thresholded AP/AR evaluator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::{KeypointAnnotation, KeypointPrediction};
use crate::par;

/// Number of recall points used for interpolated AP.
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OksConfig {
    /// Per-keypoint falloff constants.
    pub kappas: Vec<f64>,
    /// OKS thresholds, strictly increasing in `(0, 1]`.
    pub thresholds: Vec<f64>,
    /// Medium bin `[lo, hi)` in pixel².
    pub medium: (f64, f64),
    /// Large bin lower bound in pixel².
    pub large_min: f64,
}

impl OksConfig {
    /// Uniform `kappa` for `num_keypoints`, thresholds 0.50:0.05:0.95 and the
    /// desk-scale area bins.
    pub fn uniform(num_keypoints: usize, kappa: f64) -> Self {
        OksConfig {
            kappas: vec![kappa; num_keypoints],
            thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            medium: (16.0 * 16.0, 48.0 * 48.0),
            large_min: 48.0 * 48.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappas.iter().any(|&k| k.is_nan() || k <= 0.0) {
            return Err(Error::Config("OKS kappas must be positive".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config("OKS thresholds must lie in (0, 1]".into()));
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("OKS thresholds must be strictly increasing".into()));
        }
        Ok(())
    }

    fn threshold_index(&self, t: f64) -> Option<usize> {
        self.thresholds.iter().position(|&x| (x - t).abs() < 1e-9)
    }
}

/// Similarity between a prediction and a ground-truth person. Errors when
/// the annotation has no labelled keypoint.
pub fn oks(pred: &KeypointPrediction, gt: &KeypointAnnotation, cfg: &OksConfig) -> Result<f64> {
    if gt.num_labeled() == 0 {
        return Err(Error::Data(format!(
            "OKS undefined: annotation in image {} has no labelled keypoints",
            gt.image_id
        )));
    }
    if pred.coords.len() != gt.coords.len() || gt.coords.len() != cfg.kappas.len() {
        return Err(Error::Dimension(format!(
            "OKS over {} predicted / {} annotated keypoints with {} kappas",
            pred.coords.len(),
            gt.coords.len(),
            cfg.kappas.len()
        )));
    }
    let s2 = gt.area();
    let mut total = 0.0;
    let mut count = 0usize;
    for (((p, g), v), k) in pred.coords.iter().zip(&gt.coords).zip(&gt.visibility).zip(&cfg.kappas) {
        if !v.is_labeled() {
            continue;
        }
        let d2 = (p.0 - g.0).powi(2) + (p.1 - g.1).powi(2);
        total += (-d2 / (2.0 * s2 * k * k)).exp();
        count += 1;
    }
    Ok(total / count as f64)
}

/// Area restriction applied while matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo && area < self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchStatus {
    TruePositive,
    FalsePositive,
    /// Matched to an out-of-bin GT, or unmatched and itself out of bin.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    /// `(score, status)` per prediction, in descending score order.
    pub predictions: Vec<(f64, MatchStatus)>,
    /// Matched GT index per prediction (same order).
    pub matched_gt: Vec<Option<usize>>,
    /// GTs that count towards recall.
    pub num_gt: usize,
    /// Counted GTs left unmatched.
    pub false_negatives: usize,
}

impl ImageMatch {
    pub fn count(&self, status: MatchStatus) -> usize {
        self.predictions.iter().filter(|p| p.1 == status).count()
    }
}

/// Indices of `preds` sorted by descending score; ties keep input order.
pub fn score_order(preds: &[KeypointPrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Greedy matching of one image's predictions against its annotations.
///
/// Predictions are visited by descending score; each takes the unmatched GT
/// with the highest OKS (first index on ties) provided that OKS reaches
/// `threshold`. GTs without labelled keypoints or outside `area` are
/// ignored: they never count as misses and predictions matched to them are
/// neither hits nor false alarms. A counted GT is preferred over an ignored
/// one whenever both qualify.
pub fn match_image(
    preds: &[KeypointPrediction],
    gts: &[KeypointAnnotation],
    threshold: f64,
    area: AreaRange,
    cfg: &OksConfig,
) -> Result<ImageMatch> {
    let ignored: Vec<bool> = gts.iter().map(|g| g.num_labeled() == 0 || !area.contains(g.area())).collect();
    let mut taken = vec![false; gts.len()];
    let mut predictions = Vec::with_capacity(preds.len());
    let mut matched_gt = Vec::with_capacity(preds.len());
    for i in score_order(preds) {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.num_labeled() == 0 {
                continue;
            }
            let s = oks(p, g, cfg)?;
            if s < threshold {
                continue;
            }
            best = match best {
                None => Some((j, s)),
                Some((b, bs)) => {
                    let better = match (ignored[b], ignored[j]) {
                        (true, false) => true,
                        (false, true) => false,
                        _ => s > bs,
                    };
                    if better {
                        Some((j, s))
                    } else {
                        Some((b, bs))
                    }
                }
            };
        }
        let status = match best {
            Some((j, _)) => {
                taken[j] = true;
                if ignored[j] {
                    MatchStatus::Ignored
                } else {
                    MatchStatus::TruePositive
                }
            }
            None if !area.contains(p.bbox.area()) => MatchStatus::Ignored,
            None => MatchStatus::FalsePositive,
        };
        predictions.push((p.score, status));
        matched_gt.push(best.map(|b| b.0));
    }
    let num_gt = ignored.iter().filter(|&&i| !i).count();
    let hits = (0..gts.len()).filter(|&j| taken[j] && !ignored[j]).count();
    Ok(ImageMatch {
        predictions,
        matched_gt,
        num_gt,
        false_negatives: num_gt - hits,
    })
}

/// Interpolated precision-recall summary at one OKS threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub threshold: f64,
    /// Precision at recall 0, 0.01, ..., 1 (monotone envelope).
    pub precision: Vec<f64>,
    pub ap: f64,
    pub max_recall: f64,
}

/// Build the curve from matches pooled over images.
pub fn pr_curve(matches: &[ImageMatch], threshold: f64) -> Option<PrCurve> {
    let npos: usize = matches.iter().map(|m| m.num_gt).sum();
    if npos == 0 {
        return None;
    }
    let mut dets: Vec<(f64, MatchStatus)> = matches
        .iter()
        .flat_map(|m| m.predictions.iter().copied())
        .filter(|d| d.1 != MatchStatus::Ignored)
        .collect();
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for (k, d) in dets.iter().enumerate() {
        if d.1 == MatchStatus::TruePositive {
            tp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (1..precision.len()).rev() {
        if precision[k] > precision[k - 1] {
            precision[k - 1] = precision[k];
        }
    }
    let interp: Vec<f64> = (0..RECALL_POINTS)
        .map(|i| {
            let r = i as f64 / (RECALL_POINTS - 1) as f64;
            let pos = recall.partition_point(|&x| x < r - 1e-12);
            precision.get(pos).copied().unwrap_or(0.0)
        })
        .collect();
    let ap = interp.iter().sum::<f64>() / RECALL_POINTS as f64;
    Some(PrCurve {
        threshold,
        precision: interp,
        ap,
        max_recall: recall.last().copied().unwrap_or(0.0),
    })
}

/// AP/AR summary for one area bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub ap: f64,
    pub ar: f64,
    pub curves: Vec<PrCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub ar: Option<f64>,
    pub ar50: Option<f64>,
    pub ar75: Option<f64>,
    pub ar_m: Option<f64>,
    pub ar_l: Option<f64>,
    pub num_gt: usize,
    pub num_predictions: usize,
    /// Per-threshold curves over all areas.
    pub curves: Vec<PrCurve>,
}

impl EvalReport {
    const KEYS: [&'static str; 10] = ["AP", "AP50", "AP75", "AP_M", "AP_L", "AR", "AR50", "AR75", "AR_M", "AR_L"];

    fn metrics(&self) -> [Option<f64>; 10] {
        [
            self.ap, self.ap50, self.ap75, self.ap_m, self.ap_l, self.ar, self.ar50, self.ar75, self.ar_m, self.ar_l,
        ]
    }

    /// Named metric lookup (`AP`, `AP75`, ...).
    pub fn metric(&self, key: &str) -> Option<f64> {
        Self::KEYS.iter().position(|k| *k == key).and_then(|i| self.metrics()[i])
    }

    /// `key=value` lines; undefined metrics are written as `undefined`.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(self.metrics()) {
            match v {
                Some(v) => out.push_str(&format!("{k}={v:.6}\n")),
                None => out.push_str(&format!("{k}=undefined\n")),
            }
        }
        out.push_str(&format!("num_gt={}\nnum_predictions={}\n", self.num_gt, self.num_predictions));
        out
    }

    /// The same metrics as one JSON line (without the curves).
    pub fn to_record(&self) -> String {
        let mut map = serde_json::Map::new();
        for (k, v) in Self::KEYS.iter().zip(self.metrics()) {
            map.insert(k.to_string(), v.map_or(serde_json::Value::Null, |v| serde_json::json!(v)));
        }
        map.insert("num_gt".into(), self.num_gt.into());
        map.insert("num_predictions".into(), self.num_predictions.into());
        serde_json::Value::Object(map).to_string()
    }
}

fn group<T, F: Fn(&T) -> u32>(items: &[T], key: F) -> BTreeMap<u32, Vec<&T>> {
    let mut m: BTreeMap<u32, Vec<&T>> = BTreeMap::new();
    for it in items {
        m.entry(key(it)).or_default().push(it);
    }
    m
}

/// Per-image grouping of predictions and annotations, keyed by image id.
pub struct EvalSet {
    images: Vec<(Vec<KeypointPrediction>, Vec<KeypointAnnotation>)>,
}

impl EvalSet {
    pub fn new(preds: &[KeypointPrediction], gts: &[KeypointAnnotation]) -> Self {
        let p = group(preds, |x| x.image_id);
        let g = group(gts, |x| x.image_id);
        let mut ids: Vec<u32> = p.keys().chain(g.keys()).copied().collect();
        ids.sort_unstable();
        ids.dedup();
        let images = ids
            .into_iter()
            .map(|id| {
                let pp = p.get(&id).map(|v| v.iter().map(|x| (*x).clone()).collect()).unwrap_or_default();
                let gg = g.get(&id).map(|v| v.iter().map(|x| (*x).clone()).collect()).unwrap_or_default();
                (pp, gg)
            })
            .collect();
        EvalSet { images }
    }

    /// Match every image at `threshold` restricted to `area`.
    pub fn match_all(&self, threshold: f64, area: AreaRange, cfg: &OksConfig) -> Result<Vec<ImageMatch>> {
        par::map_indexed(self.images.len(), |i| {
            let (p, g) = &self.images[i];
            match_image(p, g, threshold, area, cfg)
        })
        .into_iter()
        .collect()
    }

    pub fn summarize(&self, area: AreaRange, cfg: &OksConfig) -> Result<Option<BinSummary>> {
        let mut curves = Vec::with_capacity(cfg.thresholds.len());
        for &t in &cfg.thresholds {
            match pr_curve(&self.match_all(t, area, cfg)?, t) {
                Some(c) => curves.push(c),
                None => return Ok(None),
            }
        }
        let n = curves.len() as f64;
        Ok(Some(BinSummary {
            ap: curves.iter().map(|c| c.ap).sum::<f64>() / n,
            ar: curves.iter().map(|c| c.max_recall).sum::<f64>() / n,
            curves,
        }))
    }
}

/// Full evaluation: all areas, then the medium and large bins.
pub fn evaluate(preds: &[KeypointPrediction], gts: &[KeypointAnnotation], cfg: &OksConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let set = EvalSet::new(preds, gts);
    let all = set.summarize(AreaRange::ALL, cfg)?;
    let medium = set.summarize(
        AreaRange {
            lo: cfg.medium.0,
            hi: cfg.medium.1,
        },
        cfg,
    )?;
    let large = set.summarize(
        AreaRange {
            lo: cfg.large_min,
            hi: f64::INFINITY,
        },
        cfg,
    )?;
    let at = |t: f64, f: fn(&PrCurve) -> f64| -> Option<f64> {
        let i = cfg.threshold_index(t)?;
        all.as_ref().map(|s| f(&s.curves[i]))
    };
    Ok(EvalReport {
        ap: all.as_ref().map(|s| s.ap),
        ap50: at(0.5, |c| c.ap),
        ap75: at(0.75, |c| c.ap),
        ap_m: medium.as_ref().map(|s| s.ap),
        ap_l: large.as_ref().map(|s| s.ap),
        ar: all.as_ref().map(|s| s.ar),
        ar50: at(0.5, |c| c.max_recall),
        ar75: at(0.75, |c| c.max_recall),
        ar_m: medium.as_ref().map(|s| s.ar),
        ar_l: large.as_ref().map(|s| s.ar),
        num_gt: gts.iter().filter(|g| g.num_labeled() > 0).count(),
        num_predictions: preds.len(),
        curves: all.map(|s| s.curves).unwrap_or_default(),
    })
}
