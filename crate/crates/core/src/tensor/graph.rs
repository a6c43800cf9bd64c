use std::collections::HashMap;

use super::kernels::{self, ConvGeom, DeconvGeom, RoiAlignSpec, RoiTaps};
use super::param::{ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{dim_err, ensure_dim, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: DeconvGeom,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        x: Var,
    },
    Resize {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    AddScalar {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    ConcatChannels {
        parts: Vec<Var>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SelectCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    RoiAlign {
        feature: Var,
        taps: Vec<RoiTaps<T>>,
        out: usize,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<Option<usize>>,
        valid: usize,
    },
    Bce {
        logits: Var,
        labels: Vec<T>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<T>,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    Project {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of recorded operations. Values are immutable once recorded;
/// [`Graph::backward`] walks the tape in reverse recording order, visiting
/// each operation once.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameters bound on the graph, with their gradient (if the loss
    /// depends on them).
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<T>>)> + '_ {
        self.params.iter().map(move |&(id, v)| (id, self.get(v)))
    }
}

fn unary_shape(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by op #{} (shape {:?})",
                self.nodes.len(),
                value.shape()
            )));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Record a leaf that never receives gradients (images, targets).
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Record a leaf that does receive gradients.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a parameter as a gradient-tracking leaf. Binding the same
    /// parameter twice returns the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.get(id).tensor.clone(), Op::Leaf, true)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            ensure_dim!(
                self.shape(b) == [geom.k],
                "conv bias shape {:?} does not match {} output channels",
                self.shape(b),
                geom.k
            );
        }
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(geom.out_shape().to_vec(), out)?, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Transposed convolution doubling the spatial size (kernel 4, stride 2,
    /// padding 1). `w` is `[C_in, C_out, 4, 4]`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let geom = DeconvGeom::new(self.shape(x), self.shape(w), stride)?;
        if let Some(b) = b {
            ensure_dim!(self.shape(b) == [geom.cout], "deconv bias shape {:?} mismatch", self.shape(b));
        }
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::deconv2d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(geom.out_shape().to_vec(), out)?, Op::Deconv2d { x, w, b, geom }, rg)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), [n, c, h, w])?;
        let rg = self.rg(x);
        self.push(Tensor::new([n, c, h / 2, w / 2], out)?, Op::MaxPool2 { x, argmax }, rg)
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::upsample2_forward(self.value(x).data(), [n, c, h, w]);
        let rg = self.rg(x);
        self.push(Tensor::new([n, c, 2 * h, 2 * w], out)?, Op::Upsample2 { x }, rg)
    }

    /// Bilinear resize with half-pixel centres (align-corners off).
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        ensure_dim!(out_h >= 1 && out_w >= 1, "resize target must be at least 1x1");
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::resize_forward(self.value(x).data(), [n, c, h, w], out_h, out_w);
        let rg = self.rg(x);
        self.push(Tensor::new([n, c, out_h, out_w], out)?, Op::Resize { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_dim!(
            self.shape(a) == self.shape(b),
            "add shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, s }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar { x }, rg)
    }

    /// `x: [N, D]`, `w: [M, D]`, `b: [M]` -> `[N, M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let (m, wd) = self.value(w).dims2()?;
        ensure_dim!(wd == d, "linear: input has {d} features, weight expects {wd}");
        ensure_dim!(self.shape(b) == [m], "linear bias shape {:?} mismatch", self.shape(b));
        let y = kernels::linear_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), n, d, m);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new([n, m], y)?, Op::Linear { x, w, b }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape { x }, rg)
    }

    /// Flatten everything but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape[0];
        let d = shape[1..].iter().product();
        self.reshape(x, &[n, d])
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        ensure_dim!(!parts.is_empty(), "concat of zero tensors");
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            ensure_dim!(pn == n && ph == h && pw == w, "concat spatial/batch mismatch");
            total_c += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for i in 0..n {
            for &p in parts {
                let pc = self.shape(p)[1];
                data.extend_from_slice(&self.value(p).data()[i * pc * plane..(i + 1) * pc * plane]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new([n, total_c, h, w], data)?,
            Op::ConcatChannels { parts: parts.to_vec() },
            rg,
        )
    }

    /// Concatenate tensors along the leading (batch) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure_dim!(!parts.is_empty(), "concat of zero tensors");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            ensure_dim!(self.shape(p)[1..] == tail[..], "concat_rows trailing shape mismatch");
            rows += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, data)?, Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    /// Columns `start..start+len` of a `[N, D]` tensor.
    pub fn select_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        ensure_dim!(start + len <= d, "select_cols {start}+{len} out of range {d}");
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new([n, len], data)?, Op::SelectCols { x, start }, rg)
    }

    /// Rows of the leading axis, in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let inner: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            ensure_dim!(r < shape[0], "gather_rows index {r} out of range {}", shape[0]);
            data.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let rg = self.rg(x);
        self.push(Tensor::new(out_shape, data)?, Op::GatherRows { x, rows: rows.to_vec() }, rg)
    }

    /// RoIAlign of every box against a single-image feature map `[1, C, h, w]`.
    /// Output is `[R, C, S, S]`, in box order.
    pub fn roialign(&mut self, feature: Var, boxes: &[[f64; 4]], spec: RoiAlignSpec) -> Result<Var> {
        let (n, c, h, w) = self.value(feature).dims4()?;
        ensure_dim!(n == 1, "roialign expects a single-image feature map, got batch {n}");
        ensure_dim!(spec.out >= 1, "roialign output grid must be positive");
        let taps: Vec<RoiTaps<T>> = boxes.iter().map(|&b| kernels::roi_taps(b, h, w, &spec)).collect();
        let out = kernels::roialign_forward(self.value(feature).data(), c, h, w, &taps, spec.out);
        let rg = self.rg(feature);
        self.push(
            Tensor::new([boxes.len(), c, spec.out, spec.out], out)?,
            Op::RoiAlign {
                feature,
                taps,
                out: spec.out,
            },
            rg,
        )
    }

    /// Spatial softmax cross-entropy against one-hot targets.
    ///
    /// `logits` is `[R, K, G, G]`; `targets[r * K + k]` is the flat hot cell
    /// or `None` for a masked keypoint. The loss is averaged over unmasked
    /// keypoints; with none unmasked the loss is 0 with zero gradient.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, k, gh, gw) = self.value(logits).dims4()?;
        let plane = gh * gw;
        ensure_dim!(
            targets.len() == r * k,
            "softmax_ce: {} targets for {} heatmaps",
            targets.len(),
            r * k
        );
        let src = self.value(logits).data();
        let probs = kernels::softmax_planes(src, plane);
        let mut loss = T::zero();
        let mut valid = 0usize;
        for (i, t) in targets.iter().enumerate() {
            if let Some(cell) = *t {
                ensure_dim!(cell < plane, "target cell {cell} outside {plane}-cell grid");
                let block = &src[i * plane..(i + 1) * plane];
                let m = block.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + block.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                loss += lse - block[cell];
                valid += 1;
            }
        }
        if valid > 0 {
            loss /= T::lit(valid as f64);
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
                valid,
            },
            rg,
        )
    }

    /// Mean binary cross-entropy on logits; `labels` in `{0, 1}`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let x = self.value(logits).data();
        ensure_dim!(x.len() == labels.len(), "bce: {} logits for {} labels", x.len(), labels.len());
        ensure_dim!(!labels.is_empty(), "bce over zero elements");
        let mut loss = T::zero();
        for (&z, &y) in x.iter().zip(labels) {
            // max(z,0) - z*y + log(1 + exp(-|z|))
            loss += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
        }
        loss /= T::lit(labels.len() as f64);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Mean smooth-L1 (Huber with unit threshold) between `pred` and `target`.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        ensure_dim!(
            self.shape(pred) == target.shape(),
            "smooth_l1 shape mismatch: {:?} vs {:?}",
            self.shape(pred),
            target.shape()
        );
        ensure_dim!(!target.is_empty(), "smooth_l1 over zero elements");
        let half = T::lit(0.5);
        let mut loss = T::zero();
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let d = (p - t).abs();
            loss += if d < T::one() { half * d * d } else { d - half };
        }
        loss /= T::lit(target.len() as f64);
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        )
    }

    /// `sum_i w_i * x_i` over scalar variables.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            ensure_dim!(self.value(v).len() == 1, "weighted_sum expects scalars");
            total += w * self.value(v).item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(total), Op::WeightedSum { terms: terms.to_vec() }, rg)
    }

    /// `sum(x * weights)`, a scalar probe used for gradient checks.
    pub fn project(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        ensure_dim!(self.value(x).len() == weights.len(), "project: length mismatch");
        let s = kernels::dot(self.value(x).data(), weights.data());
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(s),
            Op::Project {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure_dim!(self.value(loss).len() == 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if !g.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at op #{idx}")));
            }
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort_by_key(|&(id, _)| id);
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(data) {
                    *e += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v).to_vec(), data)?);
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                if self.rg(*x) {
                    let dx = kernels::conv2d_input_grad(self.value(*w).data(), gd, geom);
                    self.acc(grads, *x, dx)?;
                }
                if self.rg(*w) {
                    let dw = kernels::conv2d_weight_grad(self.value(*x).data(), gd, geom);
                    self.acc(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    let db = kernels::channel_sum(gd, geom.n, geom.k, geom.oh * geom.ow);
                    self.acc(grads, *b, db)?;
                }
            }
            Op::Deconv2d { x, w, b, geom } => {
                if self.rg(*x) {
                    let dx = kernels::deconv2d_input_grad(self.value(*w).data(), gd, geom);
                    self.acc(grads, *x, dx)?;
                }
                if self.rg(*w) {
                    let dw = kernels::deconv2d_weight_grad(self.value(*x).data(), gd, geom);
                    self.acc(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    let db = kernels::channel_sum(gd, geom.n, geom.cout, 4 * geom.h * geom.w);
                    self.acc(grads, *b, db)?;
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let dx = kernels::maxpool2_backward(gd, argmax, unary_shape(self.shape(*x)));
                self.acc(grads, *x, dx)?;
            }
            Op::Upsample2 { x } => {
                let dx = kernels::upsample2_backward(gd, unary_shape(self.shape(*x)));
                self.acc(grads, *x, dx)?;
            }
            Op::Resize { x } => {
                let s = node.value.shape();
                let dx = kernels::resize_backward(gd, unary_shape(self.shape(*x)), s[2], s[3]);
                self.acc(grads, *x, dx)?;
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.acc(grads, *x, dx)?;
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, gd.to_vec())?;
                self.acc(grads, *b, gd.to_vec())?;
            }
            Op::Scale { x, s } => {
                self.acc(grads, *x, gd.iter().map(|&d| d * *s).collect())?;
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                self.acc(grads, *x, gd.to_vec())?;
            }
            Op::Linear { x, w, b } => {
                let (n, d) = self.value(*x).dims2()?;
                let m = self.shape(*w)[0];
                let (dx, dw, db) = kernels::linear_backward(self.value(*x).data(), self.value(*w).data(), gd, n, d, m);
                self.acc(grads, *x, dx)?;
                self.acc(grads, *w, dw)?;
                self.acc(grads, *b, db)?;
            }
            Op::ConcatChannels { parts } => {
                let (n, _, h, w) = node.value.dims4()?;
                let total_c = node.value.shape()[1];
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(n * pc * plane);
                    for i in 0..n {
                        let start = (i * total_c + offset) * plane;
                        dp.extend_from_slice(&gd[start..start + pc * plane]);
                    }
                    self.acc(grads, p, dp)?;
                    offset += pc;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, gd[offset..offset + n].to_vec())?;
                    offset += n;
                }
            }
            Op::SelectCols { x, start } => {
                let (n, d) = self.value(*x).dims2()?;
                let len = node.value.shape()[1];
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    dx[i * d + start..i * d + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.acc(grads, *x, dx)?;
            }
            Op::GatherRows { x, rows } => {
                let shape = self.shape(*x);
                let inner: usize = shape[1..].iter().product();
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (d, &s) in dx[r * inner..(r + 1) * inner].iter_mut().zip(&gd[i * inner..(i + 1) * inner]) {
                        *d += s;
                    }
                }
                self.acc(grads, *x, dx)?;
            }
            Op::RoiAlign { feature, taps, out } => {
                let (_, c, h, w) = self.value(*feature).dims4()?;
                let dx = kernels::roialign_backward(gd, c, h, w, taps, *out);
                self.acc(grads, *feature, dx)?;
            }
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
                valid,
            } => {
                let mut dx = vec![T::zero(); probs.len()];
                if *valid > 0 {
                    let plane = probs.len() / targets.len();
                    let scale = gd[0] / T::lit(*valid as f64);
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(cell) = *t {
                            let p = &probs[i * plane..(i + 1) * plane];
                            let d = &mut dx[i * plane..(i + 1) * plane];
                            for (dv, &pv) in d.iter_mut().zip(p) {
                                *dv = pv * scale;
                            }
                            d[cell] -= scale;
                        }
                    }
                }
                self.acc(grads, *logits, dx)?;
            }
            Op::Bce { logits, labels } => {
                let scale = gd[0] / T::lit(labels.len() as f64);
                let dx = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect();
                self.acc(grads, *logits, dx)?;
            }
            Op::SmoothL1 { pred, target } => {
                let scale = gd[0] / T::lit(target.len() as f64);
                let dx = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let d = p - t;
                        let g = if d.abs() < T::one() { d } else { d.signum() };
                        g * scale
                    })
                    .collect();
                self.acc(grads, *pred, dx)?;
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    self.acc(grads, v, vec![w * gd[0]])?;
                }
            }
            Op::Project { x, weights } => {
                self.acc(grads, *x, weights.iter().map(|&w| w * gd[0]).collect())?;
            }
        }
        Ok(())
    }

    /// Look up the variable a parameter was bound to, if any.
    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| dim_err!("unknown variable {:?}", v))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
