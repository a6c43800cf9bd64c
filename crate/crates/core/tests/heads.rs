use msa_core::backbone::BackboneConfig;
use msa_core::boxes::{refine_box, BBox, RoI};
use msa_core::harness::config::DecodeMode;
use msa_core::harness::eval::{decode_predictions, multi_scale_heatmaps};
use msa_core::harness::RgbImage;
use msa_core::heads::{ClsHead, HeadVariant, KpsHead, KpsHeadConfig, OutputMode};
use msa_core::model::{Model, ModelConfig, RoiPolicy};
use msa_core::roialign::{Aggregation, RoIFeature};
use msa_core::tensor::gradcheck::{grad_check, GradCheckConfig};
use msa_core::tensor::sigmoid;
use msa_core::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn head_cfg(variant: HeadVariant, grid: usize) -> KpsHeadConfig {
    KpsHeadConfig {
        variant,
        body_channels: [4, 4, 4],
        num_keypoints: 2,
        output_mode: OutputMode::DeconvThen1x1,
        deconv_channels: 4,
        in_channels: 3,
        grid,
        skips: true,
    }
}

fn run_head(head: &KpsHead, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = g.constant(x.clone()).unwrap();
    let grid = x.shape()[2];
    let roi = RoIFeature {
        var: v,
        boxes: vec![BBox::new(0.0, 0.0, 10.0, 10.0); x.shape()[0]],
        grid,
        channels: x.shape()[1],
    };
    let hm = head.forward(&mut g, store, &roi).unwrap();
    g.value(hm.logits).clone()
}

fn build(cfg: KpsHeadConfig, seed: u64) -> (KpsHead, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let h = KpsHead::new(&mut store, "h", cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (h, store)
}

#[test]
fn heatmap_is_four_times_the_input_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for variant in [HeadVariant::MsKpsnet, HeadVariant::BaselineSequential] {
        for mode in [OutputMode::DeconvOnly, OutputMode::DeconvThen1x1] {
            let mut cfg = head_cfg(variant, 16);
            cfg.output_mode = mode;
            let (h, store) = build(cfg, 1);
            let y = run_head(&h, &store, &rand_tensor(&mut rng, &[2, 3, 16, 16]));
            assert_eq!(y.shape(), &[2, 2, 64, 64], "{variant} {mode}");
        }
    }
}

#[test]
fn zero_input_zero_biases_gives_zero_logits() {
    for variant in [HeadVariant::MsKpsnet, HeadVariant::BaselineSequential] {
        let (h, store) = build(head_cfg(variant, 8), 2);
        let y = run_head(&h, &store, &Tensor::zeros([1, 3, 8, 8]));
        assert!(y.data().iter().all(|&v| v == 0.0), "{variant}");
    }
}

#[test]
fn zero_weights_give_zero_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, mut store) = build(head_cfg(HeadVariant::BaselineSequential, 8), 3);
    for p in store.iter_mut() {
        p.tensor = Tensor::zeros(p.tensor.shape().to_vec());
    }
    let y = run_head(&h, &store, &rand_tensor(&mut rng, &[2, 3, 8, 8]));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zeroed_skip_convs_match_a_head_without_skips() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let (with, mut store) = build(head_cfg(HeadVariant::MsKpsnet, 8), 5);
    let mut cfg = head_cfg(HeadVariant::MsKpsnet, 8);
    cfg.skips = false;
    let (without, store_without) = build(cfg, 5);
    let baseline = run_head(&without, &store_without, &x);
    assert_ne!(run_head(&with, &store, &x), baseline);
    for id in with.skip_params() {
        let p = store.get_mut(id);
        p.tensor = Tensor::zeros(p.tensor.shape().to_vec());
    }
    assert_eq!(run_head(&with, &store, &x), baseline);
}

#[test]
fn classification_head_defaults_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let head = ClsHead::new(&mut store, "cls", 3 * 4 * 4, 6, &mut rng);
    let x = rand_tensor(&mut rng, &[3, 3, 4, 4]);
    let forward = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let v = g.constant(x.clone()).unwrap();
        let roi = RoIFeature {
            var: v,
            boxes: vec![BBox::new(0.0, 0.0, 1.0, 1.0); 3],
            grid: 4,
            channels: 3,
        };
        let out = head.forward(&mut g, store, &roi).unwrap();
        (g.value(out.logits).clone(), g.value(out.deltas).clone())
    };
    let (logits, deltas) = forward(&store);
    assert_eq!(logits.shape(), &[3, 1]);
    assert_eq!(deltas.shape(), &[3, 4]);

    let mut zeroed = store.clone();
    for p in zeroed.iter_mut() {
        p.tensor = Tensor::zeros(p.tensor.shape().to_vec());
    }
    let (logits, deltas) = forward(&zeroed);
    assert!(logits.data().iter().all(|&z| z == 0.0 && sigmoid(z) == 0.5));
    let roi = RoI::new(BBox::new(5.0, 6.0, 30.0, 40.0));
    let d = msa_core::boxes::BoxDeltas::from_slice(&deltas.data()[..4]);
    assert_eq!(refine_box(&roi, &d, 64.0, 64.0).bbox, roi.bbox);

    let probe = rand_tensor(&mut rng, &[15]);
    let r = grad_check(
        move |g, v| {
            let roi = RoIFeature {
                var: v[0],
                boxes: vec![BBox::new(0.0, 0.0, 1.0, 1.0); 3],
                grid: 4,
                channels: 3,
            };
            let out = head.forward(g, &store, &roi)?;
            let l = g.reshape(out.logits, &[3])?;
            let d = g.reshape(out.deltas, &[12])?;
            let both = g.concat_rows(&[l, d])?;
            g.project(both, &probe)
        },
        std::slice::from_ref(&x),
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

fn tiny() -> ModelConfig {
    ModelConfig {
        image_size: 64,
        backbone: BackboneConfig {
            widths: [4, 4, 4, 4, 4],
            pyramid_channels: 4,
        },
        body_channels: [4, 4, 4],
        deconv_channels: 4,
        cls_hidden: 8,
        ..ModelConfig::default()
    }
}

fn probe_image() -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    rand_tensor(&mut rng, &[1, 3, 64, 64])
}

const PROPOSALS: [BBox; 3] = [
    BBox::new(4.0, 6.0, 30.0, 50.0),
    BBox::new(20.0, 10.0, 60.0, 62.0),
    BBox::new(1.0, 1.0, 12.0, 14.0),
];

#[test]
fn sequential_inference_refines_then_runs_keypoints() {
    let m = Model::<f64>::new(tiny()).unwrap();
    let img = probe_image();
    let out = m.sequential_inference(&img, &PROPOSALS, 0.0).unwrap();
    assert_eq!(out.detections.len(), 3);
    for (i, det) in out.detections.iter().enumerate() {
        let roi = RoI {
            score: out.scores[i],
            ..RoI::new(PROPOSALS[i])
        };
        assert_eq!(*det, refine_box(&roi, &out.deltas[i], 64.0, 64.0));
    }
    let boxes: Vec<BBox> = out.detections.iter().map(|d| d.bbox).collect();
    assert_eq!(out.heatmaps.boxes, boxes);
    assert_eq!(out.heatmaps, m.keypoint_heatmaps(&img, &boxes).unwrap());
}

#[test]
fn models_are_deterministic_in_their_seed() {
    let a = Model::<f64>::new(tiny()).unwrap();
    let b = Model::<f64>::new(tiny()).unwrap();
    let c = Model::<f64>::new(ModelConfig { init_seed: 1, ..tiny() }).unwrap();
    let values = |m: &Model<f64>| m.store.iter().flat_map(|p| p.tensor.data().to_vec()).collect::<Vec<f64>>();
    assert_eq!(values(&a), values(&b));
    assert_ne!(values(&a), values(&c));
}

/// Parameter count, heatmap shape and decoded coordinates on a fixed probe.
fn fingerprint(cfg: &ModelConfig, decode: DecodeMode, scales: &[f64]) -> (usize, usize, Vec<(f64, f64)>) {
    let m = Model::<f64>::new(cfg.clone()).unwrap();
    let mut img = RgbImage::new(64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for p in img.pixels.iter_mut() {
        *p = rng.random();
    }
    let hm = multi_scale_heatmaps(&m, &img, &PROPOSALS[..2], scales, None).unwrap();
    let preds = decode_predictions(&hm, &[1.0, 1.0], 0, decode);
    (m.param_count(), hm.size, preds.into_iter().flat_map(|p| p.coords).collect())
}

#[test]
fn every_variant_flag_changes_something_measurable() {
    let base = tiny();
    let reference = fingerprint(&base, DecodeMode::Argmax, &[1.0]);
    let variants: Vec<(&str, ModelConfig)> = vec![
        (
            "roi_policy=assigned",
            ModelConfig {
                roi_policy: RoiPolicy::Assigned,
                ..base.clone()
            },
        ),
        (
            "roi_policy=p2_only",
            ModelConfig {
                roi_policy: RoiPolicy::P2Only,
                ..base.clone()
            },
        ),
        (
            "aggregation=concat",
            ModelConfig {
                aggregation: Aggregation::Concat,
                ..base.clone()
            },
        ),
        (
            "kps_roi_exp=1",
            ModelConfig {
                kps_roi_exp: 1,
                ..base.clone()
            },
        ),
        (
            "head=baseline",
            ModelConfig {
                head: HeadVariant::BaselineSequential,
                ..base.clone()
            },
        ),
        (
            "output_mode=deconv_only",
            ModelConfig {
                output_mode: OutputMode::DeconvOnly,
                ..base.clone()
            },
        ),
        (
            "skips=false",
            ModelConfig {
                skips: false,
                ..base.clone()
            },
        ),
    ];
    for (name, cfg) in variants {
        assert_ne!(fingerprint(&cfg, DecodeMode::Argmax, &[1.0]), reference, "{name}");
    }
    assert_ne!(fingerprint(&base, DecodeMode::Top2, &[1.0]), reference, "decode=top2");
    assert_ne!(fingerprint(&base, DecodeMode::Argmax, &[0.8, 1.0, 1.2]), reference, "tta_scales");
}

#[test]
fn single_scale_tta_is_exactly_the_plain_heatmap() {
    let m = Model::<f64>::new(tiny()).unwrap();
    let mut img = RgbImage::new(64, 64);
    for (i, p) in img.pixels.iter_mut().enumerate() {
        *p = (i * 37 % 251) as u8;
    }
    let (input, _) = img.to_input::<f64>(1.0, false).unwrap();
    let plain = m.keypoint_heatmaps(&input, &PROPOSALS).unwrap();
    assert_eq!(multi_scale_heatmaps(&m, &img, &PROPOSALS, &[1.0], None).unwrap(), plain);
}
