//! Keypoint heads (the multi-scale U-shaped head and the sequential
//! baseline) and the classification/box-refinement head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Deconv2d, Init, Linear};
use crate::roialign::RoIFeature;
use crate::tensor::{Graph, ParamStore, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    MsKpsnet,
    BaselineSequential,
}

impl std::str::FromStr for HeadVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ms_kpsnet" => Ok(HeadVariant::MsKpsnet),
            "baseline" | "baseline_sequential" => Ok(HeadVariant::BaselineSequential),
            o => Err(format!("unknown head `{o}` (ms_kpsnet|baseline)")),
        }
    }
}

impl std::fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadVariant::MsKpsnet => "ms_kpsnet",
            HeadVariant::BaselineSequential => "baseline",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    DeconvOnly,
    DeconvThen1x1,
}

impl std::str::FromStr for OutputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "deconv_only" | "deconv" => Ok(OutputMode::DeconvOnly),
            "deconv_then_1x1" | "1x1" => Ok(OutputMode::DeconvThen1x1),
            o => Err(format!("unknown output mode `{o}` (deconv_only|deconv_then_1x1)")),
        }
    }
}

impl std::fmt::Display for OutputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OutputMode::DeconvOnly => "deconv_only",
            OutputMode::DeconvThen1x1 => "deconv_then_1x1",
        })
    }
}

/// Number of 3x3 convs in the sequential baseline head.
pub const BASELINE_CONVS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpsHeadConfig {
    pub variant: HeadVariant,
    /// Widths of the first three convs; later convs use the third.
    pub body_channels: [usize; 3],
    pub num_keypoints: usize,
    pub output_mode: OutputMode,
    /// Deconv output width when a 1x1 conv follows it.
    pub deconv_channels: usize,
    /// Input RoI feature channels.
    pub in_channels: usize,
    /// Input RoI grid `S`; heatmaps are `4S x 4S`.
    pub grid: usize,
    /// Residual skip connections in the multi-scale head.
    pub skips: bool,
}

impl KpsHeadConfig {
    pub fn heatmap_size(&self) -> usize {
        4 * self.grid
    }
}

/// Per-RoI keypoint logits `[R, N, 4S, 4S]`.
#[derive(Debug, Clone)]
pub struct HeatmapBatch {
    pub logits: Var,
    pub boxes: Vec<BBox>,
    pub num_keypoints: usize,
    pub size: usize,
}

#[derive(Debug, Clone)]
enum Body {
    MsKpsnet {
        stem: [Conv2d; 3],
        down: [Conv2d; 2],
        bottom: [Conv2d; 2],
        skip: [Conv2d; 2],
        up: [Conv2d; 2],
    },
    Sequential(Vec<Conv2d>),
}

#[derive(Debug, Clone)]
pub struct KpsHead {
    pub cfg: KpsHeadConfig,
    body: Body,
    deconv: Deconv2d,
    pointwise: Option<Conv2d>,
}

impl KpsHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: KpsHeadConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.grid < 8 || !cfg.grid.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "keypoint head needs an RoI grid that is a multiple of 4 and at least 8, got {}",
                cfg.grid
            )));
        }
        let [c1, c2, c3] = cfg.body_channels;
        let he = Init::He(1.0);
        let conv = |store: &mut ParamStore<T>, rng: &mut _, n: &str, i, o| Conv2d::new(store, &format!("{name}.{n}"), i, o, 3, 1, he, rng);
        let body = match cfg.variant {
            HeadVariant::MsKpsnet => Body::MsKpsnet {
                stem: [
                    conv(store, rng, "conv1", cfg.in_channels, c1),
                    conv(store, rng, "conv2", c1, c2),
                    conv(store, rng, "conv3", c2, c3),
                ],
                down: [conv(store, rng, "down1", c3, c3), conv(store, rng, "down2", c3, c3)],
                bottom: [conv(store, rng, "bottom1", c3, c3), conv(store, rng, "bottom2", c3, c3)],
                skip: [conv(store, rng, "skip1", c3, c3), conv(store, rng, "skip0", c3, c3)],
                up: [conv(store, rng, "up1", c3, c3), conv(store, rng, "up0", c3, c3)],
            },
            HeadVariant::BaselineSequential => {
                let mut convs = Vec::with_capacity(BASELINE_CONVS);
                let mut prev = cfg.in_channels;
                for i in 0..BASELINE_CONVS {
                    let out = cfg.body_channels[i.min(2)];
                    convs.push(conv(store, rng, &format!("conv{}", i + 1), prev, out));
                    prev = out;
                }
                Body::Sequential(convs)
            }
        };
        let (deconv, pointwise) = match cfg.output_mode {
            OutputMode::DeconvOnly => (
                Deconv2d::new(store, &format!("{name}.deconv"), c3, cfg.num_keypoints, Init::Normal(0.001), rng),
                None,
            ),
            OutputMode::DeconvThen1x1 => (
                Deconv2d::new(store, &format!("{name}.deconv"), c3, cfg.deconv_channels, Init::He(1.0), rng),
                Some(Conv2d::new(
                    store,
                    &format!("{name}.logits"),
                    cfg.deconv_channels,
                    cfg.num_keypoints,
                    1,
                    1,
                    Init::Normal(0.001),
                    rng,
                )),
            ),
        };
        Ok(KpsHead {
            cfg,
            body,
            deconv,
            pointwise,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, roi: &RoIFeature) -> Result<HeatmapBatch> {
        if roi.grid != self.cfg.grid || roi.channels != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "keypoint head built for {}ch/{}x{} RoIs, got {}ch/{}x{}",
                self.cfg.in_channels, self.cfg.grid, self.cfg.grid, roi.channels, roi.grid, roi.grid
            )));
        }
        let x = roi.var;
        let body = match &self.body {
            Body::MsKpsnet {
                stem,
                down,
                bottom,
                skip,
                up,
            } => {
                let mut x = x;
                for c in stem {
                    x = c.forward_relu(g, store, x)?;
                }
                let f0 = x;
                let p = g.maxpool2(f0)?;
                let f1 = down[0].forward_relu(g, store, p)?;
                let p = g.maxpool2(f1)?;
                let mut b = down[1].forward_relu(g, store, p)?;
                for c in bottom {
                    b = c.forward_relu(g, store, b)?;
                }
                let mut u = b;
                for (level, feat) in [f1, f0].into_iter().enumerate() {
                    let mut merged = g.upsample2(u)?;
                    if self.cfg.skips {
                        let s = skip[level].forward_relu(g, store, feat)?;
                        debug_assert_eq!(g.shape(s), g.shape(merged));
                        merged = g.add(merged, s)?;
                    }
                    u = up[level].forward_relu(g, store, merged)?;
                }
                u
            }
            Body::Sequential(convs) => {
                let mut x = x;
                for c in convs {
                    x = c.forward_relu(g, store, x)?;
                }
                x
            }
        };
        let size = self.cfg.heatmap_size();
        let logits = match &self.pointwise {
            None => {
                let d = self.deconv.forward(g, store, body)?;
                g.resize(d, size, size)?
            }
            Some(pw) => {
                let d = self.deconv.forward(g, store, body)?;
                let d = g.relu(d)?;
                let r = g.resize(d, size, size)?;
                pw.forward(g, store, r)?
            }
        };
        Ok(HeatmapBatch {
            logits,
            boxes: roi.boxes.clone(),
            num_keypoints: self.cfg.num_keypoints,
            size,
        })
    }

    pub fn param_count(&self) -> usize {
        let body: usize = match &self.body {
            Body::MsKpsnet {
                stem,
                down,
                bottom,
                skip,
                up,
            } => stem
                .iter()
                .chain(down)
                .chain(bottom)
                .chain(skip)
                .chain(up)
                .map(Conv2d::param_count)
                .sum(),
            Body::Sequential(c) => c.iter().map(Conv2d::param_count).sum(),
        };
        body + self.deconv.param_count() + self.pointwise.as_ref().map_or(0, Conv2d::param_count)
    }

    /// Parameters of the skip-connection convs (empty for the baseline).
    pub fn skip_params(&self) -> Vec<crate::tensor::ParamId> {
        match &self.body {
            Body::MsKpsnet { skip, .. } => skip.iter().flat_map(|c| [c.weight, c.bias]).collect(),
            Body::Sequential(_) => Vec::new(),
        }
    }
}

/// Output of the classification head for a batch of RoIs.
#[derive(Debug, Clone, Copy)]
pub struct ClsOutput {
    /// `[R, 1]` person logits.
    pub logits: Var,
    /// `[R, 4]` box refinement deltas.
    pub deltas: Var,
}

/// Flatten -> FC(hidden) -> ReLU -> FC(1 + 4).
#[derive(Debug, Clone)]
pub struct ClsHead {
    fc1: Linear,
    fc2: Linear,
}

impl ClsHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_features: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), in_features, hidden, Init::He(1.0), rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, 5, Init::Normal(0.01), rng);
        ClsHead { fc1, fc2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, roi: &RoIFeature) -> Result<ClsOutput> {
        let x = g.flatten(roi.var)?;
        let h = self.fc1.forward(g, store, x)?;
        let h = g.relu(h)?;
        let out = self.fc2.forward(g, store, h)?;
        Ok(ClsOutput {
            logits: g.select_cols(out, 0, 1)?,
            deltas: g.select_cols(out, 1, 4)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}
