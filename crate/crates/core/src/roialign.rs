//! Single-level RoIAlign, size-based level assignment, and the multi-scale
//! extraction block that samples every pyramid level and aggregates them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{level_stride, FeaturePyramid, LEVELS};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init};
use crate::tensor::kernels::RoiAlignSpec;
use crate::tensor::{Graph, ParamStore, Scalar, Var};

pub const DEFAULT_SAMPLING_RATIO: usize = 2;

/// Canonical box side (pixels) that maps to level 4 for 800-pixel images.
pub const FULL_SCALE_CANONICAL: f64 = 224.0;

/// Canonical side rescaled by the ratio of desk-scale to full-scale images.
pub fn desk_canonical(image_size: usize) -> f64 {
    FULL_SCALE_CANONICAL * image_size as f64 / 800.0
}

/// Per-RoI features `[R, C, S, S]`, in input order.
#[derive(Debug, Clone)]
pub struct RoIFeature {
    pub var: Var,
    pub boxes: Vec<BBox>,
    pub grid: usize,
    pub channels: usize,
}

/// Pyramid level for a box: `floor(4 + log2(sqrt(area) / canonical))`,
/// clamped to `[2, 5]`.
pub fn assign_level(b: &BBox, canonical: f64) -> Result<usize> {
    let area = b.area();
    if area.is_nan() || area <= 0.0 {
        return Err(Error::Dimension(format!("cannot assign a level to zero-area box {b:?}")));
    }
    // small slack so exact powers of two are not pushed down by rounding
    let k = (4.0 + (area.sqrt() / canonical).log2() + 1e-9).floor();
    Ok(k.clamp(2.0, 5.0) as usize)
}

/// How a single-level extractor picks its pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LevelPolicy {
    Assigned { canonical: f64 },
    P2Only,
}

/// RoIAlign every box from one pyramid level chosen by `policy`.
pub fn single_level_roialign<T: Scalar>(
    g: &mut Graph<T>,
    pyramid: &FeaturePyramid,
    boxes: &[BBox],
    out: usize,
    policy: LevelPolicy,
    sampling_ratio: usize,
) -> Result<RoIFeature> {
    let levels: Vec<usize> = match policy {
        LevelPolicy::P2Only => vec![2; boxes.len()],
        LevelPolicy::Assigned { canonical } => boxes.iter().map(|b| assign_level(b, canonical)).collect::<Result<_>>()?,
    };
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(boxes.len());
    for level in LEVELS {
        let idx: Vec<usize> = (0..boxes.len()).filter(|&i| levels[i] == level).collect();
        if idx.is_empty() {
            continue;
        }
        let arr: Vec<[f64; 4]> = idx.iter().map(|&i| boxes[i].to_array()).collect();
        let spec = RoiAlignSpec {
            stride: level_stride(level) as f64,
            out,
            sampling_ratio,
        };
        parts.push(g.roialign(pyramid.level(level), &arr, spec)?);
        order.extend(idx);
    }
    let var = match parts.len() {
        0 => g.roialign(
            pyramid.level(2),
            &[],
            RoiAlignSpec {
                stride: 4.0,
                out,
                sampling_ratio,
            },
        )?,
        1 if order.iter().enumerate().all(|(i, &o)| i == o) => parts[0],
        _ => {
            let cat = g.concat_rows(&parts)?;
            let mut inverse = vec![0; order.len()];
            for (pos, &orig) in order.iter().enumerate() {
                inverse[orig] = pos;
            }
            g.gather_rows(cat, &inverse)?
        }
    };
    Ok(RoIFeature {
        var,
        boxes: boxes.to_vec(),
        grid: out,
        channels: pyramid.channels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sum,
    Concat,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "concat" => Ok(Aggregation::Concat),
            o => Err(format!("unknown aggregation `{o}` (sum|concat)")),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Sum => "sum",
            Aggregation::Concat => "concat",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsRoIAlignConfig {
    /// Size exponent: grids are `2^(n+3)` on P2 down to `2^n` on P5.
    pub n: u32,
    pub aggregation: Aggregation,
    /// Channels of each pyramid level (and of each per-level conv).
    pub channels: usize,
    pub sampling_ratio: usize,
}

impl MsRoIAlignConfig {
    pub fn new(n: u32, aggregation: Aggregation, channels: usize) -> Result<Self> {
        if n > 1 {
            return Err(Error::Config(format!("MS-RoIAlign size exponent must be 0 or 1, got {n}")));
        }
        Ok(MsRoIAlignConfig {
            n,
            aggregation,
            channels,
            sampling_ratio: DEFAULT_SAMPLING_RATIO,
        })
    }

    /// Final aggregated grid, `2^(n+3)`.
    pub fn output_grid(&self) -> usize {
        1 << (self.n + 3)
    }

    /// Extraction grid for P2..P5: `2^(n+3), 2^(n+2), 2^(n+1), 2^n`.
    pub fn level_grids(&self) -> [usize; 4] {
        let top = self.n + 3;
        [1 << top, 1 << (top - 1), 1 << (top - 2), 1 << (top - 3)]
    }

    pub fn out_channels(&self) -> usize {
        match self.aggregation {
            Aggregation::Sum => self.channels,
            Aggregation::Concat => 4 * self.channels,
        }
    }
}

/// The multi-scale block: per level, RoIAlign at a halving grid, one 3x3
/// conv, nearest-neighbour upsampling back to the common grid; the four
/// results are summed (or concatenated along channels).
#[derive(Debug, Clone)]
pub struct MsRoIAlign {
    pub cfg: MsRoIAlignConfig,
    pub convs: Vec<Conv2d>,
}

impl MsRoIAlign {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: MsRoIAlignConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let convs = LEVELS
            .iter()
            .map(|l| Conv2d::new(store, &format!("{name}.p{l}"), c, c, 3, 1, Init::He(0.5), rng))
            .collect();
        MsRoIAlign { cfg, convs }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pyramid: &FeaturePyramid,
        boxes: &[BBox],
    ) -> Result<RoIFeature> {
        let arr: Vec<[f64; 4]> = boxes.iter().map(BBox::to_array).collect();
        let target = self.cfg.output_grid();
        let mut per_level = Vec::with_capacity(4);
        for ((&level, &grid), conv) in LEVELS.iter().zip(&self.cfg.level_grids()).zip(&self.convs) {
            let spec = RoiAlignSpec {
                stride: level_stride(level) as f64,
                out: grid,
                sampling_ratio: self.cfg.sampling_ratio,
            };
            let feat = g.roialign(pyramid.level(level), &arr, spec)?;
            let mut x = conv.forward(g, store, feat)?;
            let mut size = grid;
            while size < target {
                x = g.upsample2(x)?;
                size *= 2;
            }
            per_level.push(x);
        }
        let var = match self.cfg.aggregation {
            Aggregation::Sum => {
                let mut acc = per_level[0];
                for &v in &per_level[1..] {
                    acc = g.add(acc, v)?;
                }
                acc
            }
            Aggregation::Concat => g.concat_channels(&per_level)?,
        };
        Ok(RoIFeature {
            var,
            boxes: boxes.to_vec(),
            grid: target,
            channels: self.cfg.out_channels(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv2d::param_count).sum()
    }
}

/// RoI feature extraction strategy used by a model branch.
#[derive(Debug, Clone)]
pub enum RoiExtractor {
    Single {
        policy: LevelPolicy,
        grid: usize,
        channels: usize,
        sampling_ratio: usize,
    },
    Multi(MsRoIAlign),
}

impl RoiExtractor {
    pub fn extract<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pyramid: &FeaturePyramid,
        boxes: &[BBox],
    ) -> Result<RoIFeature> {
        match self {
            RoiExtractor::Single {
                policy,
                grid,
                sampling_ratio,
                ..
            } => single_level_roialign(g, pyramid, boxes, *grid, *policy, *sampling_ratio),
            RoiExtractor::Multi(ms) => ms.forward(g, store, pyramid, boxes),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            RoiExtractor::Single { channels, .. } => *channels,
            RoiExtractor::Multi(ms) => ms.cfg.out_channels(),
        }
    }

    pub fn grid(&self) -> usize {
        match self {
            RoiExtractor::Single { grid, .. } => *grid,
            RoiExtractor::Multi(ms) => ms.cfg.output_grid(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            RoiExtractor::Single { .. } => 0,
            RoiExtractor::Multi(ms) => ms.param_count(),
        }
    }
}
