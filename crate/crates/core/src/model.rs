//! The assembled detect-then-localise model: shared backbone, RoI feature
//! extraction for the classification and keypoint branches, and both heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::boxes::{encode_deltas, refine_box, BBox, BoxDeltas, RoI};
use crate::error::{Error, Result};
use crate::heads::{ClsHead, HeadVariant, KpsHead, KpsHeadConfig, OutputMode};
use crate::heatmap::{encode_target, softmax_ce_loss, ProbHeatmaps};
use crate::keypoints::KeypointAnnotation;
use crate::kv::{join, KvMap};
use crate::roialign::{desk_canonical, Aggregation, LevelPolicy, MsRoIAlign, MsRoIAlignConfig, RoiExtractor, DEFAULT_SAMPLING_RATIO};
use crate::tensor::{sigmoid, Graph, ParamStore, Scalar, Tensor, Var};

/// RoI feature extraction used by both branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiPolicy {
    /// One pyramid level per RoI chosen by box size.
    Assigned,
    /// Always the finest level.
    P2Only,
    /// Every level, aggregated.
    MsRoIAlign,
}

impl std::str::FromStr for RoiPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "assigned" => Ok(RoiPolicy::Assigned),
            "p2_only" | "p2" => Ok(RoiPolicy::P2Only),
            "ms_roialign" | "ms" => Ok(RoiPolicy::MsRoIAlign),
            o => Err(format!("unknown roi policy `{o}` (assigned|p2_only|ms_roialign)")),
        }
    }
}

impl std::fmt::Display for RoiPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RoiPolicy::Assigned => "assigned",
            RoiPolicy::P2Only => "p2_only",
            RoiPolicy::MsRoIAlign => "ms_roialign",
        })
    }
}

/// Architecture description; serialised as `key=value` lines next to
/// checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_keypoints: usize,
    pub backbone: BackboneConfig,
    pub roi_policy: RoiPolicy,
    pub aggregation: Aggregation,
    /// MS-RoIAlign size exponent for the keypoint branch (0 or 1).
    pub kps_roi_exp: u32,
    /// Single-level keypoint RoI grid.
    pub kps_grid: usize,
    pub head: HeadVariant,
    pub body_channels: [usize; 3],
    pub output_mode: OutputMode,
    pub deconv_channels: usize,
    pub skips: bool,
    pub cls_hidden: usize,
    pub sampling_ratio: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 128,
            num_keypoints: 5,
            backbone: BackboneConfig::default(),
            roi_policy: RoiPolicy::MsRoIAlign,
            aggregation: Aggregation::Sum,
            kps_roi_exp: 0,
            kps_grid: 8,
            head: HeadVariant::MsKpsnet,
            body_channels: [32, 32, 32],
            output_mode: OutputMode::DeconvThen1x1,
            deconv_channels: 32,
            skips: true,
            cls_hidden: 64,
            sampling_ratio: DEFAULT_SAMPLING_RATIO,
            init_seed: 0,
        }
    }
}

/// Grid of the classification branch (size exponent 0).
pub const CLS_GRID: usize = 8;

impl ModelConfig {
    pub const KEYS: [&'static str; 16] = [
        "image_size",
        "num_keypoints",
        "backbone_widths",
        "pyramid_channels",
        "roi_policy",
        "aggregation",
        "kps_roi_exp",
        "kps_grid",
        "head",
        "body_channels",
        "output_mode",
        "deconv_channels",
        "skips",
        "cls_hidden",
        "sampling_ratio",
        "init_seed",
    ];

    /// Overlay values from `kv` (unknown keys are left to the caller).
    pub fn apply(&mut self, kv: &KvMap) -> Result<()> {
        kv.read("image_size", &mut self.image_size)?;
        kv.read("num_keypoints", &mut self.num_keypoints)?;
        kv.read_array("backbone_widths", &mut self.backbone.widths)?;
        kv.read("pyramid_channels", &mut self.backbone.pyramid_channels)?;
        kv.read("roi_policy", &mut self.roi_policy)?;
        kv.read("aggregation", &mut self.aggregation)?;
        kv.read("kps_roi_exp", &mut self.kps_roi_exp)?;
        kv.read("kps_grid", &mut self.kps_grid)?;
        kv.read("head", &mut self.head)?;
        kv.read_array("body_channels", &mut self.body_channels)?;
        kv.read("output_mode", &mut self.output_mode)?;
        kv.read("deconv_channels", &mut self.deconv_channels)?;
        kv.read("skips", &mut self.skips)?;
        kv.read("cls_hidden", &mut self.cls_hidden)?;
        kv.read("sampling_ratio", &mut self.sampling_ratio)?;
        kv.read("init_seed", &mut self.init_seed)?;
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("image_size", self.image_size);
        kv.set("num_keypoints", self.num_keypoints);
        kv.set("backbone_widths", join(&self.backbone.widths));
        kv.set("pyramid_channels", self.backbone.pyramid_channels);
        kv.set("roi_policy", self.roi_policy);
        kv.set("aggregation", self.aggregation);
        kv.set("kps_roi_exp", self.kps_roi_exp);
        kv.set("kps_grid", self.kps_grid);
        kv.set("head", self.head);
        kv.set("body_channels", join(&self.body_channels));
        kv.set("output_mode", self.output_mode);
        kv.set("deconv_channels", self.deconv_channels);
        kv.set("skips", self.skips);
        kv.set("cls_hidden", self.cls_hidden);
        kv.set("sampling_ratio", self.sampling_ratio);
        kv.set("init_seed", self.init_seed);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.check_known(&Self::KEYS)?;
        let mut cfg = ModelConfig::default();
        cfg.apply(kv)?;
        Ok(cfg)
    }

    pub fn canonical(&self) -> f64 {
        desk_canonical(self.image_size)
    }

    /// RoI grid fed to the keypoint head.
    pub fn kps_roi_grid(&self) -> usize {
        match self.roi_policy {
            RoiPolicy::MsRoIAlign => 1 << (self.kps_roi_exp + 3),
            _ => self.kps_grid,
        }
    }

    pub fn heatmap_size(&self) -> usize {
        4 * self.kps_roi_grid()
    }

    fn extractor(
        &self,
        store: &mut ParamStore<impl Scalar>,
        name: &str,
        n: u32,
        grid: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<RoiExtractor> {
        let channels = self.backbone.pyramid_channels;
        Ok(match self.roi_policy {
            RoiPolicy::Assigned => RoiExtractor::Single {
                policy: LevelPolicy::Assigned {
                    canonical: self.canonical(),
                },
                grid,
                channels,
                sampling_ratio: self.sampling_ratio,
            },
            RoiPolicy::P2Only => RoiExtractor::Single {
                policy: LevelPolicy::P2Only,
                grid,
                channels,
                sampling_ratio: self.sampling_ratio,
            },
            RoiPolicy::MsRoIAlign => {
                let mut c = MsRoIAlignConfig::new(n, self.aggregation, channels)?;
                c.sampling_ratio = self.sampling_ratio;
                RoiExtractor::Multi(MsRoIAlign::new(store, name, c, rng))
            }
        })
    }
}

/// Losses of one training step.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub bbox: Option<Var>,
    pub kps: Option<Var>,
}

/// Relative weights of the joint loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub bbox: f64,
    pub kps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            bbox: 1.0,
            kps: 1.0,
        }
    }
}

/// Output of [`Model::sequential_inference`].
#[derive(Debug, Clone)]
pub struct Inference {
    /// Person probability per proposal.
    pub scores: Vec<f64>,
    /// Predicted refinement per proposal.
    pub deltas: Vec<BoxDeltas>,
    /// Proposals at or above the threshold, refined and clipped.
    pub detections: Vec<RoI>,
    /// Keypoint heatmaps of the detections.
    pub heatmaps: ProbHeatmaps,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    backbone: Backbone,
    cls_roi: RoiExtractor,
    kps_roi: RoiExtractor,
    cls_head: ClsHead,
    kps_head: KpsHead,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if !cfg.image_size.is_multiple_of(32) || cfg.image_size == 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 32, got {}",
                cfg.image_size
            )));
        }
        if cfg.num_keypoints == 0 {
            return Err(Error::Config("num_keypoints must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &cfg.backbone, &mut rng);
        let cls_roi = cfg.extractor(&mut store, "cls_roi", 0, CLS_GRID, &mut rng)?;
        let kps_roi = cfg.extractor(&mut store, "kps_roi", cfg.kps_roi_exp, cfg.kps_grid, &mut rng)?;
        let cls_in = cls_roi.out_channels() * cls_roi.grid() * cls_roi.grid();
        let cls_head = ClsHead::new(&mut store, "cls_head", cls_in, cfg.cls_hidden, &mut rng);
        let kps_head = KpsHead::new(
            &mut store,
            "kps_head",
            KpsHeadConfig {
                variant: cfg.head,
                body_channels: cfg.body_channels,
                num_keypoints: cfg.num_keypoints,
                output_mode: cfg.output_mode,
                deconv_channels: cfg.deconv_channels,
                in_channels: kps_roi.out_channels(),
                grid: kps_roi.grid(),
                skips: cfg.skips,
            },
            &mut rng,
        )?;
        Ok(Model {
            cfg,
            store,
            backbone,
            cls_roi,
            kps_roi,
            cls_head,
            kps_head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Learnable scalars of the keypoint RoI extraction plus the keypoint head.
    pub fn keypoint_branch_param_count(&self) -> usize {
        self.kps_roi.param_count() + self.kps_head.param_count()
    }

    pub fn kps_head(&self) -> &KpsHead {
        &self.kps_head
    }

    fn check_image(image: &Tensor<T>) -> Result<(usize, usize)> {
        let (n, c, h, w) = image.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::Dimension(format!("expected a [1, 3, H, W] image, got {:?}", image.shape())));
        }
        Ok((h, w))
    }

    /// Joint training loss for one image and its sampled RoIs.
    pub fn training_loss(
        &self,
        g: &mut Graph<T>,
        image: &Tensor<T>,
        rois: &[RoI],
        gts: &[KeypointAnnotation],
        weights: LossWeights,
    ) -> Result<LossTerms> {
        Self::check_image(image)?;
        if rois.is_empty() {
            return Err(Error::Data("training step with zero RoIs".into()));
        }
        let img = g.constant(image.clone())?;
        let pyr = self.backbone.forward(g, &self.store, img)?;
        let boxes: Vec<BBox> = rois.iter().map(|r| r.bbox).collect();
        let feat = self.cls_roi.extract(g, &self.store, &pyr, &boxes)?;
        let out = self.cls_head.forward(g, &self.store, &feat)?;
        let labels: Vec<T> = rois.iter().map(|r| if r.is_positive { T::one() } else { T::zero() }).collect();
        let cls = g.bce_with_logits(out.logits, &labels)?;
        let mut terms = vec![(cls, T::lit(weights.cls))];

        let pos: Vec<usize> = (0..rois.len()).filter(|&i| rois[i].is_positive).collect();
        let mut bbox = None;
        let mut kps = None;
        if !pos.is_empty() {
            let gt_of = |i: usize| -> Result<&KeypointAnnotation> {
                rois[i]
                    .gt_index
                    .and_then(|j| gts.get(j))
                    .ok_or_else(|| Error::Data(format!("positive RoI {i} has no ground-truth person")))
            };
            let mut target = Vec::with_capacity(4 * pos.len());
            for &i in &pos {
                let d = encode_deltas(&gt_of(i)?.bbox, &rois[i].bbox);
                target.extend(d.to_array().map(T::lit));
            }
            let pred = g.gather_rows(out.deltas, &pos)?;
            let l = g.smooth_l1(pred, &Tensor::new([pos.len(), 4], target)?)?;
            terms.push((l, T::lit(weights.bbox)));
            bbox = Some(l);

            let pos_boxes: Vec<BBox> = pos.iter().map(|&i| rois[i].bbox).collect();
            let kfeat = self.kps_roi.extract(g, &self.store, &pyr, &pos_boxes)?;
            let hm = self.kps_head.forward(g, &self.store, &kfeat)?;
            let targets = pos
                .iter()
                .map(|&i| Ok(encode_target(gt_of(i)?, &rois[i].bbox, hm.size)))
                .collect::<Result<Vec<_>>>()?;
            let l = softmax_ce_loss(g, &hm, &targets)?;
            terms.push((l, T::lit(weights.kps)));
            kps = Some(l);
        }
        let total = g.weighted_sum(&terms)?;
        Ok(LossTerms { total, cls, bbox, kps })
    }

    /// Classify and refine `proposals`, then run the keypoint head on the
    /// refined boxes whose score reaches `threshold`.
    pub fn sequential_inference(&self, image: &Tensor<T>, proposals: &[BBox], threshold: f64) -> Result<Inference> {
        let (h, w) = Self::check_image(image)?;
        let mut g = Graph::new();
        let img = g.constant(image.clone())?;
        let pyr = self.backbone.forward(&mut g, &self.store, img)?;
        let (scores, deltas) = if proposals.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let feat = self.cls_roi.extract(&mut g, &self.store, &pyr, proposals)?;
            let out = self.cls_head.forward(&mut g, &self.store, &feat)?;
            let scores: Vec<f64> = g.value(out.logits).data().iter().map(|&z| sigmoid(z).as_f64()).collect();
            let deltas: Vec<BoxDeltas> = g.value(out.deltas).to_f64_vec().chunks(4).map(BoxDeltas::from_slice).collect();
            (scores, deltas)
        };
        let detections: Vec<RoI> = proposals
            .iter()
            .zip(&scores)
            .zip(&deltas)
            .filter(|((_, &s), _)| s >= threshold)
            .map(|((b, &s), d)| {
                let roi = RoI { score: s, ..RoI::new(*b) };
                refine_box(&roi, d, w as f64, h as f64)
            })
            .collect();
        let boxes: Vec<BBox> = detections.iter().map(|r| r.bbox).collect();
        let heatmaps = self.heatmaps_on(&mut g, &pyr, &boxes)?;
        Ok(Inference {
            scores,
            deltas,
            detections,
            heatmaps,
        })
    }

    fn heatmaps_on(&self, g: &mut Graph<T>, pyr: &crate::backbone::FeaturePyramid, boxes: &[BBox]) -> Result<ProbHeatmaps> {
        if boxes.is_empty() {
            return Ok(ProbHeatmaps {
                probs: Vec::new(),
                boxes: Vec::new(),
                num_keypoints: self.cfg.num_keypoints,
                size: self.cfg.heatmap_size(),
            });
        }
        let feat = self.kps_roi.extract(g, &self.store, pyr, boxes)?;
        let hm = self.kps_head.forward(g, &self.store, &feat)?;
        ProbHeatmaps::from_logits(g.value(hm.logits), boxes)
    }

    /// Keypoint heatmaps for fixed boxes (image coordinates of `image`).
    pub fn keypoint_heatmaps(&self, image: &Tensor<T>, boxes: &[BBox]) -> Result<ProbHeatmaps> {
        Self::check_image(image)?;
        let mut g = Graph::new();
        let img = g.constant(image.clone())?;
        let pyr = self.backbone.forward(&mut g, &self.store, img)?;
        self.heatmaps_on(&mut g, &pyr, boxes)
    }
}

/// Human-readable architecture summary.
pub fn describe(cfg: &ModelConfig) -> String {
    format!(
        "roi={} agg={} head={} output={} skips={} grid={} heatmap={}",
        cfg.roi_policy,
        cfg.aggregation,
        cfg.head,
        cfg.output_mode,
        cfg.skips,
        cfg.kps_roi_grid(),
        cfg.heatmap_size()
    )
}
