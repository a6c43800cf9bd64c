//! Parameterised layers on top of the graph ops.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

/// Weight initialisation scheme for a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-normal with the given gain.
    He(f64),
    /// Normal with a fixed standard deviation.
    Normal(f64),
}

fn init_weight<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut impl Rng,
) -> ParamId {
    match init {
        Init::He(gain) => store.add_he(name, shape, fan_in, gain, rng),
        Init::Normal(std) => store.add_normal(name, shape, std, rng),
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// `kernel` 1 or 3; padding keeps stride-1 convolutions size-preserving.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = init_weight(
            store,
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            init,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), &[out_channels]);
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.conv2d(x, w, Some(b), self.stride, (self.kernel - 1) / 2)
    }

    pub fn forward_relu<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.forward(g, store, x)?;
        g.relu(y)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// Kernel-4, stride-2 transposed convolution.
#[derive(Debug, Clone)]
pub struct Deconv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Deconv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        // each output pixel sees in_channels * 2 * 2 inputs
        let weight = init_weight(
            store,
            &format!("{name}.weight"),
            &[in_channels, out_channels, 4, 4],
            in_channels * 4,
            init,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), &[out_channels]);
        Deconv2d {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.deconv2d(x, w, Some(b), 2)
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * 16 + self.out_channels
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = init_weight(
            store,
            &format!("{name}.weight"),
            &[out_features, in_features],
            in_features,
            init,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), &[out_features]);
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }
}
