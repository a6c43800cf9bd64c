//! Miniature FPN-style backbone producing the P2..P5 pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Result};
use crate::nn::{Conv2d, Init};
use crate::tensor::{Graph, ParamStore, Scalar, Var};

/// Pyramid levels, finest first.
pub const LEVELS: [usize; 4] = [2, 3, 4, 5];

pub fn level_stride(level: usize) -> usize {
    1 << level
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of the stem and of the bottom-up stages C2..C5.
    pub widths: [usize; 5],
    /// Channels of every pyramid level.
    pub pyramid_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: [16, 24, 32, 48, 64],
            pyramid_channels: 32,
        }
    }
}

/// Feature maps P2..P5 of one image, recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    levels: [Var; 4],
    pub channels: usize,
}

impl FeaturePyramid {
    pub fn new(levels: [Var; 4], channels: usize) -> Self {
        FeaturePyramid { levels, channels }
    }

    /// Map for pyramid level `level` in `2..=5`.
    pub fn level(&self, level: usize) -> Var {
        self.levels[level - 2]
    }

    pub fn levels(&self) -> &[Var; 4] {
        &self.levels
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stem: Conv2d,
    stages: Vec<[Conv2d; 2]>,
    laterals: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let w = cfg.widths;
        let stem = Conv2d::new(store, "backbone.stem", 3, w[0], 3, 2, Init::He(1.0), rng);
        let mut stages = Vec::new();
        for s in 0..4 {
            let name = format!("backbone.c{}", s + 2);
            let a = Conv2d::new(store, &format!("{name}.0"), w[s], w[s + 1], 3, 2, Init::He(1.0), rng);
            let b = Conv2d::new(store, &format!("{name}.1"), w[s + 1], w[s + 1], 3, 1, Init::He(1.0), rng);
            stages.push([a, b]);
        }
        let c = cfg.pyramid_channels;
        let laterals = (0..4)
            .map(|s| Conv2d::new(store, &format!("fpn.lateral{}", s + 2), w[s + 1], c, 1, 1, Init::He(0.5), rng))
            .collect();
        let smooth = (0..4)
            .map(|s| Conv2d::new(store, &format!("fpn.smooth{}", s + 2), c, c, 3, 1, Init::He(0.5), rng))
            .collect();
        Backbone {
            stem,
            stages,
            laterals,
            smooth,
            cfg: cfg.clone(),
        }
    }

    /// Bottom-up stride-2 stages, then a top-down path of nearest-neighbour
    /// upsampling summed with 1x1 lateral projections, then a 3x3 smoothing
    /// conv per level. `image` is `[1, 3, H, W]` with H, W divisible by 32.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<FeaturePyramid> {
        let (_, c, h, w) = g.value(image).dims4()?;
        ensure_dim!(c == 3, "backbone expects 3-channel images, got {c}");
        ensure_dim!(h % 32 == 0 && w % 32 == 0, "image size {h}x{w} is not divisible by 32");
        let mut x = self.stem.forward_relu(g, store, image)?;
        let mut bottom_up = Vec::with_capacity(4);
        for [a, b] in &self.stages {
            x = a.forward_relu(g, store, x)?;
            x = b.forward_relu(g, store, x)?;
            bottom_up.push(x);
        }
        let mut merged: [Option<Var>; 4] = [None; 4];
        let mut top: Option<Var> = None;
        for s in (0..4).rev() {
            let lat = self.laterals[s].forward(g, store, bottom_up[s])?;
            let m = match top {
                Some(t) => {
                    let up = g.upsample2(t)?;
                    g.add(up, lat)?
                }
                None => lat,
            };
            merged[s] = Some(m);
            top = Some(m);
        }
        let mut levels = [image; 4];
        for s in 0..4 {
            levels[s] = self.smooth[s].forward(g, store, merged[s].expect("filled above"))?;
        }
        Ok(FeaturePyramid::new(levels, self.cfg.pyramid_channels))
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count()
            + self.stages.iter().map(|[a, b]| a.param_count() + b.param_count()).sum::<usize>()
            + self.laterals.iter().map(Conv2d::param_count).sum::<usize>()
            + self.smooth.iter().map(Conv2d::param_count).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn build() -> (ParamStore<f64>, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bb = Backbone::new(&mut store, &BackboneConfig::default(), &mut rng);
        (store, bb)
    }

    #[test]
    fn pyramid_shapes_follow_stride_schedule() {
        let (store, bb) = build();
        for (h, w) in [(64, 64), (96, 128), (32, 160)] {
            let mut g = Graph::new();
            let img = g.constant(Tensor::full([1, 3, h, w], 0.5)).unwrap();
            let p = bb.forward(&mut g, &store, img).unwrap();
            for level in LEVELS {
                let s = level_stride(level);
                assert_eq!(g.shape(p.level(level)), &[1, 32, h.div_ceil(s), w.div_ceil(s)]);
            }
        }
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_pyramid() {
        let (store, bb) = build();
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros([1, 3, 64, 64])).unwrap();
        let p = bb.forward(&mut g, &store, img).unwrap();
        for &v in p.levels() {
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn random_input_gives_finite_pyramid() {
        let (store, bb) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = (0..3 * 64 * 64).map(|_| rng.random::<f64>()).collect();
        let mut g = Graph::new();
        let img = g.constant(Tensor::new([1, 3, 64, 64], data).unwrap()).unwrap();
        let p = bb.forward(&mut g, &store, img).unwrap();
        assert!(p.levels().iter().all(|&v| g.value(v).all_finite()));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let (store, bb) = build();
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros([1, 3, 48, 64])).unwrap();
        assert!(matches!(bb.forward(&mut g, &store, img), Err(crate::Error::Dimension(_))));
    }
}
