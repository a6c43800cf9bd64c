use msa_core::boxes::{propose, BBox};
use msa_core::harness::dataset::{synthesize, DatasetMeta};
use msa_core::harness::dump::{dump_heatmaps, to_gray};
use msa_core::harness::image::decode_pgm;
use msa_core::harness::synth::{generate_scene, SceneConfig};
use msa_core::harness::train::{image_step, Augment};
use msa_core::harness::{train, RunConfig};
use msa_core::heatmap::decode_argmax;
use msa_core::model::Model;
use msa_core::tensor::checkpoint;

fn small_data(num_train: usize, seed: u64) -> msa_core::harness::Dataset {
    synthesize(&DatasetMeta {
        num_train,
        num_val: 2,
        seed,
        ..DatasetMeta::default()
    })
    .unwrap()
}

#[test]
fn person_heights_cover_the_configured_range() {
    let cfg = SceneConfig::default();
    let mut heights = Vec::new();
    for id in 0..120 {
        let scene = generate_scene(id, &cfg, 1000 + id as u64).unwrap();
        assert!((1..=cfg.max_persons).contains(&scene.persons.len()));
        for p in &scene.persons {
            for (i, &(x, y)) in p.coords.iter().enumerate() {
                if p.visibility[i].is_labeled() {
                    assert!(p.bbox.contains(x, y), "keypoint {i} outside its box");
                }
            }
        }
        heights.extend(scene.heights);
    }
    let bins = 4;
    let width = (cfg.max_height - cfg.min_height) / bins as f64;
    let mut hist = vec![0usize; bins];
    for &h in &heights {
        assert!((cfg.min_height..=cfg.max_height).contains(&h), "{h}");
        hist[(((h - cfg.min_height) / width) as usize).min(bins - 1)] += 1;
    }
    assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
    let (lo, hi) = heights.iter().fold((f64::MAX, 0.0f64), |(lo, hi), &h| (lo.min(h), hi.max(h)));
    assert!(hi / lo >= 3.0, "scale range {lo}..{hi}");
}

#[test]
fn training_loss_falls_within_four_epochs() {
    for seed in 0..3 {
        let data = small_data(12, seed);
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            epochs: 4,
            seed,
            out_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let out = train::<f32>(&cfg, &data.train).unwrap();
        let (first, last) = (out.epoch_losses[0].total, out.epoch_losses[3].total);
        assert!(last < first, "seed {seed}: epoch 0 {first} epoch 3 {last}");
    }
}

#[test]
fn zero_learning_rate_keeps_parameters_bit_identical() {
    let data = small_data(4, 5);
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        epochs: 1,
        lr: 0.0,
        seed: 9,
        out_dir: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    let out = train::<f32>(&cfg, &data.train).unwrap();
    let mut mcfg = cfg.model.clone();
    mcfg.init_seed = 9;
    let fresh = Model::<f32>::new(mcfg).unwrap();
    let fresh_path = dir.path().join("fresh.ckpt");
    checkpoint::save(&fresh.store, &fresh_path).unwrap();
    assert_eq!(std::fs::read(&out.checkpoint).unwrap(), std::fs::read(&fresh_path).unwrap());
}

#[test]
fn roi_batches_hold_one_positive_per_three_negatives() {
    let cfg = RunConfig::default();
    let data = small_data(6, 6);
    let model = Model::<f32>::new(cfg.model.clone()).unwrap();
    for i in 0..data.train.len() {
        let aug = Augment::draw(&cfg, 0, i);
        let (_, l) = image_step(&model, &data.train.images[i], &data.train.annotations[i], &aug, &cfg).unwrap();
        assert_eq!(l.rois, cfg.budget);
        assert_eq!(3 * l.positives, l.rois - l.positives);
    }
    for budget in [4, 16, 64] {
        let gt = [BBox::new(10.0, 10.0, 50.0, 90.0), BBox::new(60.0, 20.0, 100.0, 120.0)];
        let rois = propose(
            &gt,
            128.0,
            128.0,
            &msa_core::boxes::ProposalConfig {
                budget,
                ..cfg.proposal_config()
            },
            budget as u64,
        )
        .unwrap();
        let pos = rois.iter().filter(|r| r.is_positive).count();
        assert_eq!((pos, rois.len() - pos), (budget / 4, 3 * budget / 4));
    }
}

#[test]
fn dumped_heatmaps_peak_at_the_decoded_cell() {
    let data = small_data(1, 7);
    let cfg = RunConfig::default();
    let model = Model::<f32>::new(cfg.model.clone()).unwrap();
    let image = &data.val.images[0];
    let boxes: Vec<BBox> = data.val.annotations[0].iter().map(|a| a.bbox).collect();
    let (input, _) = image.to_input::<f32>(1.0, false).unwrap();
    let hm = model.keypoint_heatmaps(&input, &boxes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = dump_heatmaps(dir.path(), image, &hm, &[]).unwrap();
    assert_eq!(paths.len(), boxes.len() * cfg.model.num_keypoints);
    for r in 0..hm.num_rois() {
        for k in 0..hm.num_keypoints {
            let (w, size, pixels) = decode_pgm(&std::fs::read(&paths[r * hm.num_keypoints + k]).unwrap()).unwrap();
            assert_eq!((w, size), (hm.size, hm.size));
            assert_eq!(pixels, to_gray(hm.plane(r, k)));
            let peak = decode_argmax(hm.plane(r, k), size);
            let cell = peak.row as usize * size + peak.col as usize;
            assert_eq!(pixels[cell], 255);
            assert_eq!(pixels.iter().max(), Some(&255));
        }
    }
    assert!(dir.path().join("overlay.ppm").exists());
}
