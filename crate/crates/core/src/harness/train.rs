//! Mini-batch momentum-SGD training of the full model on a dataset split.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{propose, BBox};
use crate::error::{Error, Result};
use crate::keypoints::KeypointAnnotation;
use crate::model::{Model, ModelConfig};
use crate::par;
use crate::tensor::{checkpoint, Gradients, Graph, Scalar};

use super::config::RunConfig;
use super::dataset::{format_annotation, Split};
use super::image::RgbImage;
use super::synth::flip_annotation;

/// Per-image augmentation drawn for one visit of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub scale: f64,
    pub flip: bool,
    pub proposal_seed: u64,
}

impl Augment {
    pub fn draw(cfg: &RunConfig, epoch: usize, image: usize) -> Augment {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(((epoch as u64) << 32) | image as u64);
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        let flip = cfg.flip && rng.random::<bool>();
        Augment {
            scale,
            flip,
            proposal_seed: rng.random(),
        }
    }
}

/// Annotations mapped into the augmented image frame.
pub fn augment_annotations(anns: &[KeypointAnnotation], width: f64, aug: &Augment) -> Vec<KeypointAnnotation> {
    anns.iter()
        .map(|a| {
            let mut a = if aug.flip { flip_annotation(a, width) } else { a.clone() };
            a.bbox = a.bbox.scaled(aug.scale);
            for c in a.coords.iter_mut() {
                *c = (c.0 * aug.scale, c.1 * aug.scale);
            }
            a
        })
        .collect()
}

/// Scalar losses of one image.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub cls: f64,
    pub bbox: f64,
    pub kps: f64,
    pub positives: usize,
    pub rois: usize,
}

impl StepLosses {
    fn add(&mut self, o: &StepLosses) {
        self.total += o.total;
        self.cls += o.cls;
        self.bbox += o.bbox;
        self.kps += o.kps;
        self.positives += o.positives;
        self.rois += o.rois;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.total *= s;
        self.cls *= s;
        self.bbox *= s;
        self.kps *= s;
        self
    }
}

/// Forward and backward for one augmented image.
pub fn image_step<T: Scalar>(
    model: &Model<T>,
    image: &RgbImage,
    anns: &[KeypointAnnotation],
    aug: &Augment,
    cfg: &RunConfig,
) -> Result<(Gradients<T>, StepLosses)> {
    let (input, (h, w)) = image.to_input::<T>(aug.scale, aug.flip)?;
    let gts = augment_annotations(anns, image.width as f64, aug);
    let boxes: Vec<BBox> = gts.iter().map(|a| a.bbox).collect();
    let rois = propose(&boxes, w as f64, h as f64, &cfg.proposal_config(), aug.proposal_seed)?;
    let mut g = Graph::new();
    let terms = model.training_loss(&mut g, &input, &rois, &gts, cfg.loss_weights)?;
    let grads = g.backward(terms.total)?;
    let val = |v: Option<crate::tensor::Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
    let losses = StepLosses {
        total: g.value(terms.total).item().as_f64(),
        cls: g.value(terms.cls).item().as_f64(),
        bbox: val(terms.bbox),
        kps: val(terms.kps),
        positives: rois.iter().filter(|r| r.is_positive).count(),
        rois: rois.len(),
    };
    Ok((grads, losses))
}

/// Mean losses per epoch plus where the artifacts went.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub epoch_losses: Vec<StepLosses>,
    pub checkpoint: PathBuf,
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("model.ckpt")
}

pub fn model_config_path(dir: &Path) -> PathBuf {
    dir.join("model.cfg")
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn nan_dump(dir: &Path, epoch: usize, iter: usize, batch: &[usize], augs: &[Augment], split: &Split, err: &Error) -> PathBuf {
    let path = dir.join("nan_dump.txt");
    let mut s = format!("error: {err}\nepoch={epoch}\niteration={iter}\n");
    for (&i, a) in batch.iter().zip(augs) {
        let _ = writeln!(s, "image={i} scale={} flip={} proposal_seed={}", a.scale, a.flip, a.proposal_seed);
        for ann in &split.annotations[i] {
            let _ = writeln!(s, "  {}", format_annotation(ann));
        }
    }
    let _ = fs::write(&path, s);
    path
}

fn clip_gradients<T: Scalar>(model: &mut Model<T>, max_norm: f64) -> f64 {
    let norm = model
        .store
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for p in model.store.iter_mut() {
            for v in p.grad.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Train on `split`, writing `train.log`, per-epoch checkpoints,
/// `model.ckpt` and `model.cfg` into `cfg.out_dir`.
pub fn train<T: Scalar>(cfg: &RunConfig, split: &Split) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if split.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut mcfg: ModelConfig = cfg.model.clone();
    mcfg.init_seed = cfg.seed;
    mcfg.image_size = split.images[0].width;
    let mut model = Model::<T>::new(mcfg.clone())?;
    write(&model_config_path(out), mcfg.to_kv().render())?;

    let n = split.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut log = format!(
        "# precision={} params={}\n# epoch iter lr total cls bbox kps grad_norm\n",
        T::NAME,
        model.param_count()
    );
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut it = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX - epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = StepLosses::default();
        for batch in order.chunks(cfg.batch_size) {
            let augs: Vec<Augment> = batch.iter().map(|&i| Augment::draw(cfg, epoch, i)).collect();
            let results = par::map_indexed(batch.len(), |j| {
                let i = batch[j];
                image_step(&model, &split.images[i], &split.annotations[i], &augs[j], cfg)
            });
            let inv = T::lit(1.0 / batch.len() as f64);
            let mut batch_loss = StepLosses::default();
            for r in results {
                match r {
                    Ok((grads, l)) => {
                        model.store.accumulate(&grads, inv);
                        batch_loss.add(&l);
                    }
                    Err(e @ Error::Numerical(_)) => {
                        let p = nan_dump(out, epoch, it, batch, &augs, split, &e);
                        let _ = write(&out.join("train.log"), &log);
                        return Err(Error::Numerical(format!("{e}; batch dumped to {}", p.display())));
                    }
                    Err(e) => return Err(e),
                }
            }
            let batch_loss = batch_loss.scaled(1.0 / batch.len() as f64);
            if !batch_loss.total.is_finite() {
                let e = Error::Numerical(format!("non-finite loss at iteration {it}"));
                let p = nan_dump(out, epoch, it, batch, &augs, split, &e);
                return Err(Error::Numerical(format!("{e}; batch dumped to {}", p.display())));
            }
            let norm = clip_gradients(&mut model, cfg.grad_clip);
            let lr = cfg.lr_at(it, total);
            model.store.sgd_step(&cfg.sgd(lr))?;
            let _ = writeln!(
                log,
                "{epoch} {it} {lr:.6} {:.6} {:.6} {:.6} {:.6} {norm:.4}",
                batch_loss.total, batch_loss.cls, batch_loss.bbox, batch_loss.kps
            );
            sum.add(&batch_loss.scaled(batch.len() as f64));
            it += 1;
        }
        let mean = sum.scaled(1.0 / n as f64);
        let _ = writeln!(
            log,
            "# epoch {epoch} mean total={:.6} cls={:.6} bbox={:.6} kps={:.6}",
            mean.total, mean.cls, mean.bbox, mean.kps
        );
        epoch_losses.push(mean);
        checkpoint::save(&model.store, &out.join(format!("epoch{epoch:03}.ckpt")))?;
        write(&out.join("train.log"), &log)?;
    }
    let ckpt = checkpoint_path(out);
    checkpoint::save(&model.store, &ckpt)?;
    Ok(TrainOutcome {
        model,
        epoch_losses,
        checkpoint: ckpt,
    })
}

/// Rebuild a model from `model.cfg` and a checkpoint.
pub fn load_model<T: Scalar>(model_cfg: &Path, ckpt: &Path) -> Result<Model<T>> {
    let text = fs::read_to_string(model_cfg).map_err(|e| Error::io(model_cfg, e))?;
    let cfg = ModelConfig::from_kv(&crate::kv::KvMap::parse(&text)?)?;
    let mut model = Model::<T>::new(cfg)?;
    checkpoint::restore(&mut model.store, &checkpoint::load_entries(ckpt)?)?;
    Ok(model)
}
