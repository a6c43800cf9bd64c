//! On-disk dataset layout and the line-delimited annotation and prediction
//! formats.
//!
//! ```text
//! <dir>/dataset.cfg                 key=value metadata
//! <dir>/{train,val}/images/NNNNNN.ppm
//! <dir>/{train,val}/annotations.txt one person per line:
//!     image_id x1 y1 x2 y2 (x y v) * N
//! predictions.txt                   one person per line:
//!     image_id x1 y1 x2 y2 score (x y v conf) * N
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::keypoints::{KeypointAnnotation, KeypointPrediction, Visibility};
use crate::kv::KvMap;
use crate::par;

use super::image::RgbImage;
use super::synth::{generate_scene, SceneConfig};

/// Seed offset separating the validation stream from the training stream.
const VAL_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn format_annotation(a: &KeypointAnnotation) -> String {
    let mut s = format!("{} {:.4} {:.4} {:.4} {:.4}", a.image_id, a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2);
    for (&(x, y), v) in a.coords.iter().zip(&a.visibility) {
        let _ = write!(s, " {x:.4} {y:.4} {}", v.flag());
    }
    s
}

pub fn format_prediction(p: &KeypointPrediction) -> String {
    let mut s = format!(
        "{} {:.4} {:.4} {:.4} {:.4} {:.6}",
        p.image_id, p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2, p.score
    );
    for (&(x, y), c) in p.coords.iter().zip(&p.confidences) {
        let _ = write!(s, " {x:.4} {y:.4} 2 {c:.6}");
    }
    s
}

fn fields(line: &str, lineno: usize, head: usize, group: usize, n: usize) -> Result<Vec<f64>> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != head + group * n {
        return Err(Error::Data(format!(
            "line {lineno}: expected {} fields for {n} keypoints, got {}",
            head + group * n,
            toks.len()
        )));
    }
    toks.iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Data(format!("line {lineno}: bad number `{t}`")))
        })
        .collect()
}

fn image_id(v: f64, lineno: usize) -> Result<u32> {
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(Error::Data(format!("line {lineno}: bad image id {v}")));
    }
    Ok(v as u32)
}

fn parse_box(v: &[f64], lineno: usize) -> Result<BBox> {
    let b = BBox::new(v[0], v[1], v[2], v[3]);
    if !b.is_valid() {
        return Err(Error::Data(format!("line {lineno}: degenerate box {:?}", v)));
    }
    Ok(b)
}

pub fn parse_annotations(text: &str, num_keypoints: usize) -> Result<Vec<KeypointAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = fields(line, i + 1, 5, 3, num_keypoints)?;
        let mut coords = Vec::with_capacity(num_keypoints);
        let mut visibility = Vec::with_capacity(num_keypoints);
        for k in 0..num_keypoints {
            let t = &v[5 + 3 * k..8 + 3 * k];
            coords.push((t[0], t[1]));
            let flag = t[2];
            let vis = (flag.fract() == 0.0 && (0.0..=2.0).contains(&flag))
                .then(|| Visibility::from_flag(flag as u8))
                .flatten()
                .ok_or_else(|| Error::Data(format!("line {}: bad visibility flag {flag}", i + 1)))?;
            visibility.push(vis);
        }
        out.push(KeypointAnnotation {
            image_id: image_id(v[0], i + 1)?,
            bbox: parse_box(&v[1..5], i + 1)?,
            coords,
            visibility,
        });
    }
    Ok(out)
}

pub fn parse_predictions(text: &str, num_keypoints: usize) -> Result<Vec<KeypointPrediction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = fields(line, i + 1, 6, 4, num_keypoints)?;
        let mut coords = Vec::with_capacity(num_keypoints);
        let mut confidences = Vec::with_capacity(num_keypoints);
        for k in 0..num_keypoints {
            let t = &v[6 + 4 * k..10 + 4 * k];
            coords.push((t[0], t[1]));
            confidences.push(t[3]);
        }
        out.push(KeypointPrediction {
            image_id: image_id(v[0], i + 1)?,
            bbox: parse_box(&v[1..5], i + 1)?,
            score: v[5],
            coords,
            confidences,
        });
    }
    Ok(out)
}

pub fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path, num_keypoints: usize) -> Result<Vec<KeypointAnnotation>> {
    parse_annotations(&read_text(path)?, num_keypoints).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn load_predictions(path: &Path, num_keypoints: usize) -> Result<Vec<KeypointPrediction>> {
    parse_predictions(&read_text(path)?, num_keypoints).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        e => e,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub scene: SceneConfig,
    pub num_keypoints: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub seed: u64,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        DatasetMeta {
            scene: SceneConfig::default(),
            num_keypoints: 5,
            num_train: 500,
            num_val: 100,
            seed: 0,
        }
    }
}

impl DatasetMeta {
    fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("image_size", self.scene.image_size);
        kv.set("min_height", self.scene.min_height);
        kv.set("max_height", self.scene.max_height);
        kv.set("max_persons", self.scene.max_persons);
        kv.set("num_keypoints", self.num_keypoints);
        kv.set("num_train", self.num_train);
        kv.set("num_val", self.num_val);
        kv.set("seed", self.seed);
        kv
    }

    fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut m = DatasetMeta {
            num_train: 0,
            num_val: 0,
            ..DatasetMeta::default()
        };
        kv.read("image_size", &mut m.scene.image_size)?;
        kv.read("min_height", &mut m.scene.min_height)?;
        kv.read("max_height", &mut m.scene.max_height)?;
        kv.read("max_persons", &mut m.scene.max_persons)?;
        kv.read("num_keypoints", &mut m.num_keypoints)?;
        kv.read("num_train", &mut m.num_train)?;
        kv.read("num_val", &mut m.num_val)?;
        kv.read("seed", &mut m.seed)?;
        Ok(m)
    }
}

/// Images and per-image annotations of one split, indexed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Vec<RgbImage>,
    pub annotations: Vec<Vec<KeypointAnnotation>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn all_annotations(&self) -> Vec<KeypointAnnotation> {
        self.annotations.iter().flatten().cloned().collect()
    }

    /// First `n` images.
    pub fn truncated(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            images: self.images[..n].to_vec(),
            annotations: self.annotations[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Split,
    pub val: Split,
}

fn render_split(n: usize, scene: &SceneConfig, seed: u64) -> Result<Split> {
    let scenes = par::map_indexed(n, |i| generate_scene(i as u32, scene, seed));
    let mut split = Split {
        images: Vec::with_capacity(n),
        annotations: Vec::with_capacity(n),
    };
    for s in scenes {
        let s = s?;
        split.images.push(s.image);
        split.annotations.push(s.persons);
    }
    Ok(split)
}

/// Render a dataset in memory. Deterministic in `seed`.
pub fn synthesize(meta: &DatasetMeta) -> Result<Dataset> {
    if meta.num_keypoints != 5 {
        return Err(Error::Config(format!(
            "the synthetic generator renders 5 keypoints, got num_keypoints={}",
            meta.num_keypoints
        )));
    }
    Ok(Dataset {
        meta: meta.clone(),
        train: render_split(meta.num_train, &meta.scene, meta.seed)?,
        val: render_split(meta.num_val, &meta.scene, meta.seed.wrapping_add(VAL_STREAM))?,
    })
}

fn split_dir(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn save_split(dir: &Path, split: &Split) -> Result<()> {
    let img_dir = dir.join("images");
    mkdir(&img_dir)?;
    for (i, img) in split.images.iter().enumerate() {
        img.save(&img_dir.join(format!("{i:06}.ppm")))?;
    }
    write_lines(
        &dir.join("annotations.txt"),
        split.annotations.iter().flatten().map(format_annotation),
    )
}

fn load_split(dir: &Path, n: usize, num_keypoints: usize) -> Result<Split> {
    let anns = load_annotations(&dir.join("annotations.txt"), num_keypoints)?;
    let mut annotations = vec![Vec::new(); n];
    for a in anns {
        let slot = annotations
            .get_mut(a.image_id as usize)
            .ok_or_else(|| Error::Data(format!("{}: annotation for unknown image {}", dir.display(), a.image_id)))?;
        slot.push(a);
    }
    let images = par::map_indexed(n, |i| RgbImage::load(&dir.join("images").join(format!("{i:06}.ppm"))))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Split { images, annotations })
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        mkdir(dir)?;
        let meta = dir.join("dataset.cfg");
        fs::write(&meta, self.meta.to_kv().render()).map_err(|e| Error::io(&meta, e))?;
        save_split(&split_dir(dir, "train"), &self.train)?;
        save_split(&split_dir(dir, "val"), &self.val)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("dataset.cfg");
        let meta = DatasetMeta::from_kv(&KvMap::parse(&read_text(&meta_path)?)?)?;
        Ok(Dataset {
            train: load_split(&split_dir(dir, "train"), meta.num_train, meta.num_keypoints)?,
            val: load_split(&split_dir(dir, "val"), meta.num_val, meta.num_keypoints)?,
            meta,
        })
    }
}

/// Render and write a dataset.
pub fn generate_dataset(dir: &Path, meta: &DatasetMeta) -> Result<Dataset> {
    let ds = synthesize(meta)?;
    ds.save(dir)?;
    Ok(ds)
}
