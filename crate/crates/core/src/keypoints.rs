//! Per-person keypoint annotations and predictions in image pixels.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;

/// Keypoint labelling state, numbered as in the annotation files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Visibility {
    Unlabeled = 0,
    LabeledInvisible = 1,
    Visible = 2,
}

impl Visibility {
    pub fn from_flag(v: u8) -> Option<Self> {
        match v {
            0 => Some(Visibility::Unlabeled),
            1 => Some(Visibility::LabeledInvisible),
            2 => Some(Visibility::Visible),
            _ => None,
        }
    }

    pub fn flag(self) -> u8 {
        self as u8
    }

    pub fn is_labeled(self) -> bool {
        self != Visibility::Unlabeled
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    pub image_id: u32,
    pub bbox: BBox,
    pub coords: Vec<(f64, f64)>,
    pub visibility: Vec<Visibility>,
}

impl KeypointAnnotation {
    pub fn num_labeled(&self) -> usize {
        self.visibility.iter().filter(|v| v.is_labeled()).count()
    }

    /// Person area used for OKS normalisation and area bins.
    pub fn area(&self) -> f64 {
        self.bbox.area()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointPrediction {
    pub image_id: u32,
    pub bbox: BBox,
    pub score: f64,
    pub coords: Vec<(f64, f64)>,
    pub confidences: Vec<f64>,
}

impl KeypointPrediction {
    /// A prediction that reproduces an annotation exactly.
    pub fn from_annotation(ann: &KeypointAnnotation, score: f64) -> Self {
        KeypointPrediction {
            image_id: ann.image_id,
            bbox: ann.bbox,
            score,
            coords: ann.coords.clone(),
            confidences: vec![1.0; ann.coords.len()],
        }
    }
}
