//! The ablation ladder: train and evaluate each variant over several seeds
//! and tabulate AP deltas row by row.

use std::fmt::Write as _;
use std::fs;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::heads::{HeadVariant, OutputMode};
use crate::model::{Model, RoiPolicy};
use crate::oks::EvalReport;
use crate::roialign::Aggregation;
use crate::tensor::Scalar;

use super::config::{DecodeMode, RunConfig};
use super::dataset::Dataset;
use super::eval::evaluate_split;
use super::train::train;

/// One variant of the ladder. Rows that only change decoding reuse the
/// model trained for the previous row.
#[derive(Debug, Clone)]
pub struct Variant {
    pub name: &'static str,
    pub cfg: RunConfig,
    pub retrain: bool,
}

fn with(base: &RunConfig, f: impl FnOnce(&mut RunConfig)) -> RunConfig {
    let mut c = base.clone();
    f(&mut c);
    c
}

/// Ladder rows in table order. The longer-training row is present only
/// when `epochs_multiplier > 1`.
pub fn ladder(base: &RunConfig) -> Vec<Variant> {
    let mut rows = Vec::new();
    let baseline = with(base, |c| {
        c.model.roi_policy = RoiPolicy::Assigned;
        c.model.head = HeadVariant::BaselineSequential;
        c.model.output_mode = OutputMode::DeconvOnly;
        c.model.aggregation = Aggregation::Sum;
        c.decode = DecodeMode::Argmax;
        c.tta_scales = vec![1.0];
    });
    rows.push(Variant {
        name: "baseline",
        cfg: baseline.clone(),
        retrain: true,
    });
    let p2 = with(&baseline, |c| c.model.roi_policy = RoiPolicy::P2Only);
    rows.push(Variant {
        name: "p2_only",
        cfg: p2.clone(),
        retrain: true,
    });
    let one = with(&p2, |c| c.model.output_mode = OutputMode::DeconvThen1x1);
    rows.push(Variant {
        name: "1x1_output",
        cfg: one.clone(),
        retrain: true,
    });
    let mut kps = with(&one, |c| c.model.head = HeadVariant::MsKpsnet);
    rows.push(Variant {
        name: "ms_kpsnet",
        cfg: kps.clone(),
        retrain: true,
    });
    if base.epochs_multiplier > 1.0 {
        kps = with(&kps, |c| c.epochs = (c.epochs as f64 * base.epochs_multiplier).round() as usize);
        rows.push(Variant {
            name: "longer_training",
            cfg: kps.clone(),
            retrain: true,
        });
    }
    let ms = with(&kps, |c| c.model.roi_policy = RoiPolicy::MsRoIAlign);
    rows.push(Variant {
        name: "ms_roialign",
        cfg: ms.clone(),
        retrain: true,
    });
    let top2 = with(&ms, |c| c.decode = DecodeMode::Top2);
    rows.push(Variant {
        name: "top2_decode",
        cfg: top2.clone(),
        retrain: false,
    });
    rows.push(Variant {
        name: "tta",
        cfg: with(&top2, |c| c.tta_scales = vec![0.8, 1.0, 1.2]),
        retrain: false,
    });
    rows
}

/// Comparison runs outside the ladder: the multi-scale head on
/// size-assigned single-level features, and concatenation instead of sum.
pub fn supplements(base: &RunConfig) -> Vec<Variant> {
    let ladder = ladder(base);
    let ms = ladder
        .iter()
        .find(|v| v.name == "ms_roialign")
        .expect("ladder has ms_roialign")
        .cfg
        .clone();
    let assigned = with(&ms, |c| c.model.roi_policy = RoiPolicy::Assigned);
    let concat = with(&ms, |c| {
        c.model.aggregation = Aggregation::Concat;
        let [a, b, cc] = c.model.body_channels;
        c.model.body_channels = [2 * a, 2 * b, cc];
    });
    vec![
        Variant {
            name: "ms_kpsnet_assigned",
            cfg: assigned,
            retrain: true,
        },
        Variant {
            name: "ms_roialign_concat",
            cfg: concat,
            retrain: true,
        },
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct RowResult {
    pub name: String,
    pub seeds: Vec<u64>,
    pub ap: Vec<f64>,
    pub ap50: Vec<f64>,
    pub ap75: Vec<f64>,
    pub ap_m: Vec<f64>,
    pub ap_l: Vec<f64>,
    pub ar: Vec<f64>,
    pub params: usize,
    pub train_seconds: f64,
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Sample standard deviation (0 for a single value).
pub fn spread(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl RowResult {
    fn new(name: &str) -> Self {
        RowResult {
            name: name.to_string(),
            seeds: Vec::new(),
            ap: Vec::new(),
            ap50: Vec::new(),
            ap75: Vec::new(),
            ap_m: Vec::new(),
            ap_l: Vec::new(),
            ar: Vec::new(),
            params: 0,
            train_seconds: 0.0,
        }
    }

    fn push(&mut self, seed: u64, r: &EvalReport) {
        let g = |v: Option<f64>| v.unwrap_or(f64::NAN);
        self.seeds.push(seed);
        self.ap.push(g(r.ap));
        self.ap50.push(g(r.ap50));
        self.ap75.push(g(r.ap75));
        self.ap_m.push(g(r.ap_m));
        self.ap_l.push(g(r.ap_l));
        self.ar.push(g(r.ar));
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub rows: Vec<RowResult>,
    pub supplements: Vec<RowResult>,
}

impl AblationResult {
    pub fn row(&self, name: &str) -> Option<&RowResult> {
        self.rows.iter().chain(&self.supplements).find(|r| r.name == name)
    }

    /// Text table: AP as mean ± std over seeds (in points), the change
    /// against the previous row, and secondary metrics.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>14} {:>7} {:>6} {:>6} {:>6} {:>6} {:>6} {:>9}",
            "variant", "AP", "delta", "AP50", "AP75", "AP_M", "AP_L", "AR", "params"
        );
        let mut prev: Option<f64> = None;
        for r in &self.rows {
            let ap = 100.0 * mean(&r.ap);
            let delta = prev.map_or("-".to_string(), |p| format!("{:+.2}", ap - p));
            let _ = writeln!(
                s,
                "{:<20} {:>7.2} ± {:<4.2} {:>7} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>9}",
                r.name,
                ap,
                100.0 * spread(&r.ap),
                delta,
                100.0 * mean(&r.ap50),
                100.0 * mean(&r.ap75),
                100.0 * mean(&r.ap_m),
                100.0 * mean(&r.ap_l),
                100.0 * mean(&r.ar),
                r.params
            );
            prev = Some(ap);
        }
        if !self.supplements.is_empty() {
            let _ = writeln!(s, "\nsupplementary");
            for r in &self.supplements {
                let _ = writeln!(
                    s,
                    "{:<20} {:>7.2} ± {:<4.2} {:>7} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>9}",
                    r.name,
                    100.0 * mean(&r.ap),
                    100.0 * spread(&r.ap),
                    "",
                    100.0 * mean(&r.ap50),
                    100.0 * mean(&r.ap75),
                    100.0 * mean(&r.ap_m),
                    100.0 * mean(&r.ap_l),
                    100.0 * mean(&r.ar),
                    r.params
                );
            }
        }
        s
    }
}

fn run_variants<T: Scalar>(
    variants: &[Variant],
    base: &RunConfig,
    data: &Dataset,
    tag: &str,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<RowResult>> {
    let train_split = data.train.truncated(if base.num_train == 0 { usize::MAX } else { base.num_train });
    let val_split = data.val.truncated(if base.num_val == 0 { usize::MAX } else { base.num_val });
    let mut rows: Vec<RowResult> = variants.iter().map(|v| RowResult::new(v.name)).collect();
    for &seed in &base.seeds {
        let mut current: Option<Model<T>> = None;
        for (v, row) in variants.iter().zip(rows.iter_mut()) {
            let mut cfg = v.cfg.clone();
            cfg.seed = seed;
            cfg.out_dir = base.out_dir.join(tag).join(format!("{}_seed{seed}", v.name));
            if v.retrain || current.is_none() {
                let t0 = std::time::Instant::now();
                let out = train::<T>(&cfg, &train_split)?;
                row.train_seconds += t0.elapsed().as_secs_f64();
                current = Some(out.model);
            }
            let model = current.as_ref().expect("model trained above");
            row.params = model.param_count();
            let report = evaluate_split(model, &val_split, &cfg, &cfg.out_dir)?;
            log(&format!(
                "{:<20} seed={seed} AP={:.4} AP75={:.4}",
                v.name,
                report.ap.unwrap_or(f64::NAN),
                report.ap75.unwrap_or(f64::NAN)
            ));
            row.push(seed, &report);
        }
    }
    Ok(rows)
}

/// Run the ladder and the supplementary variants for every seed in
/// `base.seeds`, writing `ablation.txt` and `ablation.json` into
/// `base.out_dir`.
pub fn ablate<T: Scalar>(base: &RunConfig, data: &Dataset, log: &mut dyn FnMut(&str)) -> Result<AblationResult> {
    base.validate()?;
    fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    let rows = run_variants::<T>(&ladder(base), base, data, "ladder", log)?;
    let supplements = run_variants::<T>(&supplements(base), base, data, "supplement", log)?;
    let result = AblationResult { rows, supplements };
    let txt = base.out_dir.join("ablation.txt");
    fs::write(&txt, result.table()).map_err(|e| Error::io(&txt, e))?;
    let json = base.out_dir.join("ablation.json");
    let record = serde_json::to_string(&result).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&json, record + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_follows_table_order() {
        let names: Vec<&str> = ladder(&RunConfig::default()).iter().map(|v| v.name).collect();
        assert_eq!(
            names,
            [
                "baseline",
                "p2_only",
                "1x1_output",
                "ms_kpsnet",
                "ms_roialign",
                "top2_decode",
                "tta"
            ]
        );
        let longer = RunConfig {
            epochs_multiplier: 1.5,
            ..RunConfig::default()
        };
        assert_eq!(ladder(&longer)[4].name, "longer_training");
    }

    #[test]
    fn baseline_row_recipe() {
        let b = &ladder(&RunConfig::default())[0].cfg;
        assert_eq!(b.model.roi_policy, RoiPolicy::Assigned);
        assert_eq!(b.model.head, HeadVariant::BaselineSequential);
        assert_eq!(b.model.output_mode, OutputMode::DeconvOnly);
    }

    #[test]
    fn each_row_changes_one_thing() {
        let rows = ladder(&RunConfig::default());
        for w in rows.windows(2) {
            assert_ne!(w[0].cfg, w[1].cfg, "{} -> {}", w[0].name, w[1].name);
        }
    }

    #[test]
    fn spread_of_constant_is_zero() {
        assert_eq!(spread(&[0.3, 0.3, 0.3]), 0.0);
        assert!((mean(&[1.0, 2.0, 3.0]) - 2.0).abs() < 1e-15);
        assert!((spread(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
    }
}
