//! Finite-difference checks of every differentiable op and of the
//! multi-scale keypoint branch trained with the spatial cross-entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::FeaturePyramid;
use crate::boxes::BBox;
use crate::error::Result;
use crate::heads::{HeadVariant, KpsHead, KpsHeadConfig, OutputMode};
use crate::roialign::{Aggregation, MsRoIAlign, MsRoIAlignConfig};
use crate::tensor::gradcheck::{grad_check, GradCheckConfig};
use crate::tensor::kernels::RoiAlignSpec;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Values bounded away from zero so relu and max-pool kinks stay further
/// than `eps` from every probe.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Distinct values spaced 0.01 apart, shuffled, so pooling windows have a
/// unique maximum.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.005 * n as f64).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

type Probe = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn check(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    body: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckEntry> {
    // Project the op output onto fixed random weights so every output
    // element contributes to the scalar being checked.
    let probe_len = {
        let mut g = Graph::new();
        let vars = inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = body(&mut g, &vars)?;
        g.value(out).len()
    };
    let w = uniform(rng, &[probe_len], -1.0, 1.0);
    let f: Probe = Box::new(move |g, vars| {
        let out = body(g, vars)?;
        if g.value(out).len() == 1 {
            return Ok(out);
        }
        let flat_len = g.value(out).len();
        let out = g.reshape(out, &[flat_len])?;
        g.project(out, &w)
    });
    let r = grad_check(f, &inputs, GradCheckConfig::default())?;
    Ok(GradCheckEntry {
        name: name.to_string(),
        max_rel_error: r.max_rel_error,
        tolerance: OP_TOLERANCE,
        checked: r.checked,
    })
}

/// One entry per op.
pub fn op_checks(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let x = away_from_zero(r, &[1, 2, 5, 5]);
    let w = away_from_zero(r, &[3, 2, 3, 3]);
    let b = away_from_zero(r, &[3]);
    out.push(check(
        "conv2d_s1_p1",
        vec![x.clone(), w.clone(), b.clone()],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        r,
    )?);
    out.push(check(
        "conv2d_s2_p1",
        vec![x.clone(), w.clone(), b],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        r,
    )?);
    let w1 = away_from_zero(r, &[3, 2, 1, 1]);
    out.push(check(
        "conv2d_1x1",
        vec![x.clone(), w1],
        |g, v| g.conv2d(v[0], v[1], None, 1, 0),
        r,
    )?);

    let xd = away_from_zero(r, &[1, 2, 3, 3]);
    let wd = away_from_zero(r, &[2, 3, 4, 4]);
    let bd = away_from_zero(r, &[3]);
    out.push(check(
        "deconv2d",
        vec![xd, wd, bd],
        |g, v| g.deconv2d(v[0], v[1], Some(v[2]), 2),
        r,
    )?);

    out.push(check("maxpool2", vec![distinct(r, &[1, 2, 4, 6])], |g, v| g.maxpool2(v[0]), r)?);
    out.push(check(
        "upsample2",
        vec![away_from_zero(r, &[2, 2, 3, 3])],
        |g, v| g.upsample2(v[0]),
        r,
    )?);
    out.push(check(
        "resize_up",
        vec![away_from_zero(r, &[1, 2, 4, 5])],
        |g, v| g.resize(v[0], 7, 9),
        r,
    )?);
    out.push(check(
        "resize_down",
        vec![away_from_zero(r, &[1, 2, 8, 6])],
        |g, v| g.resize(v[0], 5, 4),
        r,
    )?);
    out.push(check("relu", vec![away_from_zero(r, &[1, 3, 4, 4])], |g, v| g.relu(v[0]), r)?);
    out.push(check(
        "add",
        vec![away_from_zero(r, &[2, 3, 2, 2]), away_from_zero(r, &[2, 3, 2, 2])],
        |g, v| g.add(v[0], v[1]),
        r,
    )?);
    out.push(check("scale", vec![away_from_zero(r, &[6])], |g, v| g.scale(v[0], -1.7), r)?);
    out.push(check(
        "add_scalar",
        vec![away_from_zero(r, &[6])],
        |g, v| g.add_scalar(v[0], 0.3),
        r,
    )?);
    out.push(check(
        "linear",
        vec![away_from_zero(r, &[3, 5]), away_from_zero(r, &[4, 5]), away_from_zero(r, &[4])],
        |g, v| g.linear(v[0], v[1], v[2]),
        r,
    )?);
    out.push(check("flatten", vec![away_from_zero(r, &[2, 2, 2, 2])], |g, v| g.flatten(v[0]), r)?);
    out.push(check(
        "concat_channels",
        vec![away_from_zero(r, &[2, 1, 2, 2]), away_from_zero(r, &[2, 3, 2, 2])],
        |g, v| g.concat_channels(&[v[0], v[1]]),
        r,
    )?);
    out.push(check(
        "concat_rows",
        vec![away_from_zero(r, &[2, 3]), away_from_zero(r, &[1, 3])],
        |g, v| g.concat_rows(&[v[0], v[1]]),
        r,
    )?);
    out.push(check(
        "select_cols",
        vec![away_from_zero(r, &[3, 5])],
        |g, v| g.select_cols(v[0], 1, 3),
        r,
    )?);
    out.push(check(
        "gather_rows",
        vec![away_from_zero(r, &[4, 3])],
        |g, v| g.gather_rows(v[0], &[2, 0, 2]),
        r,
    )?);

    let boxes = vec![[3.3, 2.1, 17.6, 13.9], [0.7, 5.2, 9.4, 22.3]];
    let spec = RoiAlignSpec {
        stride: 2.0,
        out: 3,
        sampling_ratio: 2,
    };
    out.push(check(
        "roialign",
        vec![away_from_zero(r, &[1, 2, 12, 12])],
        move |g, v| g.roialign(v[0], &boxes, spec),
        r,
    )?);

    let targets = vec![Some(3), None, Some(15), Some(0)];
    out.push(check(
        "softmax_ce",
        vec![uniform(r, &[2, 2, 4, 4], -2.0, 2.0)],
        move |g, v| g.softmax_ce(v[0], &targets),
        r,
    )?);
    let labels = vec![1.0, 0.0, 0.0, 1.0, 1.0];
    out.push(check(
        "bce_with_logits",
        vec![uniform(r, &[5], -3.0, 3.0)],
        move |g, v| g.bce_with_logits(v[0], &labels),
        r,
    )?);
    // residuals kept off the |d| = 1 switch
    let target = Tensor::new(vec![6], vec![0.0; 6])?;
    let pred = Tensor::new(vec![6], vec![0.3, -0.6, 1.8, -2.4, 0.05, -1.3])?;
    out.push(check("smooth_l1", vec![pred], move |g, v| g.smooth_l1(v[0], &target), r)?);
    out.push(check(
        "weighted_sum",
        vec![away_from_zero(r, &[1]), away_from_zero(r, &[1])],
        |g, v| g.weighted_sum(&[(v[0], 0.7), (v[1], -1.3)]),
        r,
    )?);
    out.push(check(
        "three_op_chain",
        vec![away_from_zero(r, &[1, 2, 4, 4]), away_from_zero(r, &[2, 2, 3, 3])],
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 1)?;
            let y = g.relu(y)?;
            g.upsample2(y)
        },
        r,
    )?);
    Ok(out)
}

/// Multi-scale RoIAlign feeding the multi-scale keypoint head, scored with
/// the spatial softmax cross-entropy. Gradients are checked against the
/// pyramid inputs and every parameter element.
pub fn composite_check(seed: u64) -> Result<GradCheckEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 3;
    let mut store = ParamStore::<f64>::new();
    let ms = MsRoIAlign::new(&mut store, "ms", MsRoIAlignConfig::new(0, Aggregation::Sum, c)?, &mut rng);
    let head_cfg = KpsHeadConfig {
        variant: HeadVariant::MsKpsnet,
        body_channels: [4, 4, 3],
        num_keypoints: 2,
        output_mode: OutputMode::DeconvThen1x1,
        deconv_channels: 3,
        in_channels: c,
        grid: 8,
        skips: true,
    };
    let head = KpsHead::new(&mut store, "kps", head_cfg, &mut rng)?;
    // Zero-initialised biases would put dead-window pre-activations exactly
    // on the relu kink; check at a generic point instead.
    for p in store.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let pyramid: Vec<Tensor<f64>> = [16usize, 8, 4, 2]
        .iter()
        .map(|&s| uniform(&mut rng, &[1, c, s, s], -1.0, 1.0))
        .collect();
    let boxes = vec![BBox::new(5.3, 7.1, 41.7, 55.2), BBox::new(18.2, 3.9, 60.4, 30.6)];
    let plane = 32 * 32;
    let targets: Vec<Option<usize>> = vec![
        Some(rng.random_range(0..plane)),
        None,
        Some(rng.random_range(0..plane)),
        Some(rng.random_range(0..plane)),
    ];

    let loss = |g: &mut Graph<f64>, store: &ParamStore<f64>, levels: &[Var]| -> Result<Var> {
        let p = FeaturePyramid::new([levels[0], levels[1], levels[2], levels[3]], c);
        let feat = ms.forward(g, store, &p, &boxes)?;
        let hm = head.forward(g, store, &feat)?;
        g.softmax_ce(hm.logits, &targets)
    };

    let eps = GradCheckConfig::default();
    let mut g = Graph::new();
    let levels = pyramid.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = loss(&mut g, &store, &levels)?;
    let grads = g.backward(out)?;

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let levels = inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = loss(&mut g, store, &levels)?;
        Ok(g.value(out).item())
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(eps.floor);

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = pyramid.clone();
    for (i, &v) in levels.iter().enumerate() {
        let analytic = grads
            .get(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; pyramid[i].len()]);
        for j in 0..pyramid[i].len() {
            let orig = pyramid[i].data()[j];
            work[i].data_mut()[j] = orig + eps.eps;
            let plus = eval(&store, &work)?;
            work[i].data_mut()[j] = orig - eps.eps;
            let minus = eval(&store, &work)?;
            work[i].data_mut()[j] = orig;
            worst = worst.max(rel(analytic[j], (plus - minus) / (2.0 * eps.eps)));
            checked += 1;
        }
    }
    let param_grads: Vec<(crate::tensor::ParamId, Vec<f64>)> = grads
        .params()
        .map(|(id, t)| {
            (
                id,
                t.map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; store.get(id).tensor.len()]),
            )
        })
        .collect();
    for (id, analytic) in param_grads {
        for j in 0..analytic.len() {
            let orig = store.get(id).tensor.data()[j];
            store.get_mut(id).tensor.data_mut()[j] = orig + eps.eps;
            let plus = eval(&store, &pyramid)?;
            store.get_mut(id).tensor.data_mut()[j] = orig - eps.eps;
            let minus = eval(&store, &pyramid)?;
            store.get_mut(id).tensor.data_mut()[j] = orig;
            worst = worst.max(rel(analytic[j], (plus - minus) / (2.0 * eps.eps)));
            checked += 1;
        }
    }
    Ok(GradCheckEntry {
        name: "ms_roialign+ms_kpsnet+softmax_ce".into(),
        max_rel_error: worst,
        tolerance: COMPOSITE_TOLERANCE,
        checked,
    })
}

/// Every op check followed by the composite.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut all = op_checks(seed)?;
    all.push(composite_check(seed)?);
    Ok(all)
}
