//! Run configuration: every training, evaluation and ablation knob, read
//! from `key=value` files with per-key overrides.

use std::path::PathBuf;

use crate::boxes::ProposalConfig;
use crate::error::{Error, Result};
use crate::kv::{join, KvMap};
use crate::model::{LossWeights, ModelConfig};
use crate::tensor::{Precision, SgdConfig};

/// Heatmap peak decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Argmax,
    Top2,
}

impl std::str::FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "argmax" => Ok(DecodeMode::Argmax),
            "top2" => Ok(DecodeMode::Top2),
            o => Err(format!("unknown decode mode `{o}` (argmax|top2)")),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeMode::Argmax => "argmax",
            DecodeMode::Top2 => "top2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Use only the first `n` training / validation images (0 = all).
    pub num_train: usize,
    pub num_val: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch fractions at which the learning rate drops by 10x.
    pub lr_steps: Vec<f64>,
    pub warmup_iters: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    pub budget: usize,
    pub jitter: f64,
    pub negative_iou: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip: bool,
    pub loss_weights: LossWeights,
    pub decode: DecodeMode,
    pub tta_scales: Vec<f64>,
    pub score_threshold: f64,
    pub eval_jitter: f64,
    pub kappa: f64,
    pub seed: u64,
    /// Worker threads (0 = one per core).
    pub threads: usize,
    pub precision: Precision,
    pub seeds: Vec<u64>,
    pub epochs_multiplier: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            num_train: 0,
            num_val: 0,
            epochs: 8,
            batch_size: 4,
            lr: 0.02,
            lr_steps: vec![0.75],
            warmup_iters: 20,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 5.0,
            budget: 16,
            jitter: 0.1,
            negative_iou: 0.3,
            scale_min: 0.8,
            scale_max: 1.2,
            flip: true,
            loss_weights: LossWeights::default(),
            decode: DecodeMode::Argmax,
            tta_scales: vec![1.0],
            score_threshold: 0.5,
            eval_jitter: 0.1,
            kappa: 0.08,
            seed: 0,
            threads: 1,
            precision: Precision::F32,
            seeds: vec![0, 1, 2],
            epochs_multiplier: 1.0,
        }
    }
}

const RUN_KEYS: [&str; 31] = [
    "data_dir",
    "out_dir",
    "num_train",
    "num_val",
    "epochs",
    "batch_size",
    "lr",
    "lr_steps",
    "warmup_iters",
    "momentum",
    "weight_decay",
    "grad_clip",
    "budget",
    "jitter",
    "negative_iou",
    "scale_min",
    "scale_max",
    "flip",
    "loss_cls",
    "loss_bbox",
    "loss_kps",
    "decode",
    "tta_scales",
    "score_threshold",
    "eval_jitter",
    "kappa",
    "seed",
    "threads",
    "precision",
    "seeds",
    "epochs_multiplier",
];

impl RunConfig {
    /// Every accepted key, architecture keys included.
    pub fn keys() -> Vec<&'static str> {
        let mut k: Vec<&str> = ModelConfig::KEYS.to_vec();
        k.extend_from_slice(&RUN_KEYS);
        k
    }

    pub fn apply(&mut self, kv: &KvMap) -> Result<()> {
        kv.check_known(&Self::keys())?;
        self.model.apply(kv)?;
        if let Some(v) = kv.get("data_dir") {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = kv.get("out_dir") {
            self.out_dir = PathBuf::from(v);
        }
        kv.read("num_train", &mut self.num_train)?;
        kv.read("num_val", &mut self.num_val)?;
        kv.read("epochs", &mut self.epochs)?;
        kv.read("batch_size", &mut self.batch_size)?;
        kv.read("lr", &mut self.lr)?;
        kv.read_list("lr_steps", &mut self.lr_steps)?;
        kv.read("warmup_iters", &mut self.warmup_iters)?;
        kv.read("momentum", &mut self.momentum)?;
        kv.read("weight_decay", &mut self.weight_decay)?;
        kv.read("grad_clip", &mut self.grad_clip)?;
        kv.read("budget", &mut self.budget)?;
        kv.read("jitter", &mut self.jitter)?;
        kv.read("negative_iou", &mut self.negative_iou)?;
        kv.read("scale_min", &mut self.scale_min)?;
        kv.read("scale_max", &mut self.scale_max)?;
        kv.read("flip", &mut self.flip)?;
        kv.read("loss_cls", &mut self.loss_weights.cls)?;
        kv.read("loss_bbox", &mut self.loss_weights.bbox)?;
        kv.read("loss_kps", &mut self.loss_weights.kps)?;
        kv.read("decode", &mut self.decode)?;
        kv.read_list("tta_scales", &mut self.tta_scales)?;
        kv.read("score_threshold", &mut self.score_threshold)?;
        kv.read("eval_jitter", &mut self.eval_jitter)?;
        kv.read("kappa", &mut self.kappa)?;
        kv.read("seed", &mut self.seed)?;
        kv.read("threads", &mut self.threads)?;
        kv.read("precision", &mut self.precision)?;
        kv.read_list("seeds", &mut self.seeds)?;
        kv.read("epochs_multiplier", &mut self.epochs_multiplier)?;
        self.validate()
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply(kv)?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.model.to_kv();
        kv.set("data_dir", self.data_dir.display());
        kv.set("out_dir", self.out_dir.display());
        kv.set("num_train", self.num_train);
        kv.set("num_val", self.num_val);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("lr_steps", join(&self.lr_steps));
        kv.set("warmup_iters", self.warmup_iters);
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("grad_clip", self.grad_clip);
        kv.set("budget", self.budget);
        kv.set("jitter", self.jitter);
        kv.set("negative_iou", self.negative_iou);
        kv.set("scale_min", self.scale_min);
        kv.set("scale_max", self.scale_max);
        kv.set("flip", self.flip);
        kv.set("loss_cls", self.loss_weights.cls);
        kv.set("loss_bbox", self.loss_weights.bbox);
        kv.set("loss_kps", self.loss_weights.kps);
        kv.set("decode", self.decode);
        kv.set("tta_scales", join(&self.tta_scales));
        kv.set("score_threshold", self.score_threshold);
        kv.set("eval_jitter", self.eval_jitter);
        kv.set("kappa", self.kappa);
        kv.set("seed", self.seed);
        kv.set("threads", self.threads);
        kv.set("precision", self.precision);
        kv.set("seeds", join(&self.seeds));
        kv.set("epochs_multiplier", self.epochs_multiplier);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..=0.5).contains(&self.jitter) || !(0.0..=0.5).contains(&self.eval_jitter) {
            return bad("jitter must lie in [0, 0.5]".into());
        }
        if self.budget < 4 {
            return bad(format!("RoI budget must be at least 4, got {}", self.budget));
        }
        if !(self.scale_min > 0.0 && self.scale_max >= self.scale_min) {
            return bad(format!("bad scale range [{}, {}]", self.scale_min, self.scale_max));
        }
        if self.tta_scales.is_empty() || self.tta_scales.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return bad("tta_scales must be a non-empty list of positive scales".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.epochs_multiplier.is_nan() || self.epochs_multiplier <= 0.0 {
            return bad("epochs_multiplier must be positive".into());
        }
        if self.lr_steps.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return bad("lr_steps are epoch fractions in [0, 1]".into());
        }
        Ok(())
    }

    pub fn proposal_config(&self) -> ProposalConfig {
        ProposalConfig {
            jitter: self.jitter,
            budget: self.budget,
            negative_iou: self.negative_iou,
        }
    }

    pub fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate at `iter` of `total` iterations: linear warm-up, then
    /// 10x drops at the configured fractions.
    pub fn lr_at(&self, iter: usize, total: usize) -> f64 {
        let mut lr = self.lr;
        for &f in &self.lr_steps {
            if iter as f64 >= f * total as f64 {
                lr *= 0.1;
            }
        }
        if iter < self.warmup_iters {
            lr *= (iter + 1) as f64 / self.warmup_iters as f64;
        }
        lr
    }
}
