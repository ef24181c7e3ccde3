//! The differentiable-detector contract and the bundled two-stage detector.
//!
//! A [`Detector`] maps an image to a [`DetectionSet`] (boxes in original image
//! coordinates, a class distribution per box, an objectness score) and can
//! differentiate a weighted sum of `-log g[box, class]` terms with respect to
//! its rescaled input. Proposal boxes are treated as constants during
//! differentiation, as in Faster R-CNN where the ROI coordinates are detached.

pub mod adapter;
pub mod mini;
pub mod nn;
pub mod train;
pub mod weights;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou_unchecked, BBox, GradientPlan, Image};
use crate::{Error, Result};

pub use mini::MiniDetector;
pub use train::{train_mini_detector, TrainConfig};

/// Probabilities are clamped to this value before taking logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_probs: Vec<f64>,
    pub objectness: f64,
}

impl Detection {
    /// Argmax of the class distribution (lowest index on ties).
    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.class_probs.iter().enumerate() {
            if p > self.class_probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn top_prob(&self) -> f64 {
        self.class_probs[self.predicted_class()]
    }

    pub fn prob(&self, class: usize) -> f64 {
        self.class_probs[class]
    }

    /// Ranking score: objectness × top class probability.
    pub fn confidence(&self) -> f64 {
        self.objectness * self.top_prob()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    /// Ordered by descending [`Detection::confidence`].
    pub detections: Vec<Detection>,
    pub class_vocab: Vec<String>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_vocab.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.detections.iter().map(Detection::predicted_class).collect()
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.class_vocab[class]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub box_index: usize,
    pub class_index: usize,
    pub weight: f64,
}

/// `L = Σ weight · (−log g[box, class])`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub terms: Vec<LossTerm>,
}

impl LossSpec {
    pub fn new(terms: Vec<LossTerm>) -> Self {
        LossSpec { terms }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn validate(&self, n_boxes: usize, n_classes: usize) -> Result<()> {
        for t in &self.terms {
            if t.box_index >= n_boxes || t.class_index >= n_classes || !t.weight.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "loss term {t:?} is invalid for {n_boxes} boxes and {n_classes} classes"
                )));
            }
        }
        Ok(())
    }

    /// Evaluates the loss on a detection set.
    pub fn evaluate(&self, dets: &DetectionSet) -> Result<f64> {
        self.validate(dets.len(), dets.num_classes())?;
        Ok(self
            .terms
            .iter()
            .map(|t| t.weight * neg_log_prob(dets.detections[t.box_index].prob(t.class_index)))
            .sum())
    }
}

/// `−ln(max(p, PROB_EPS))`.
pub fn neg_log_prob(p: f64) -> f64 {
    if p < PROB_EPS {
        log::debug!("probability {p:e} clamped to {PROB_EPS:e} before log");
    }
    -p.max(PROB_EPS).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Shorter side of the detector input after rescaling.
    pub short_side: usize,
    /// Upper bound on the number of returned detections.
    pub n_max: usize,
    pub nms_iou: f64,
    pub objectness_threshold: f64,
    /// Number of classes, background included.
    pub num_classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            short_side: 128,
            n_max: 64,
            nms_iou: 0.5,
            objectness_threshold: 0.5,
            num_classes: 13,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.nms_iou) || !in_unit(self.objectness_threshold) {
            return Err(Error::Config(format!(
                "thresholds must lie in (0, 1): nms_iou={}, objectness_threshold={}",
                self.nms_iou, self.objectness_threshold
            )));
        }
        if self.short_side < 32 {
            return Err(Error::Config(format!("short_side must be at least 32, got {}", self.short_side)));
        }
        if self.n_max == 0 || self.num_classes < 2 {
            return Err(Error::Config("n_max must be positive and num_classes at least 2".into()));
        }
        Ok(())
    }
}

/// Loss value and the scaled gradient plan of one differentiation.
#[derive(Debug, Clone)]
pub struct Differentiated {
    pub loss: f64,
    pub plan: GradientPlan,
}

/// Callback choosing a loss from the detections of the current forward pass.
pub type LossSelector<'a> = dyn FnMut(&DetectionSet) -> Result<Option<LossSpec>> + 'a;

pub trait Detector: Send + Sync {
    fn config(&self) -> &DetectorConfig;

    fn class_vocab(&self) -> &[String];

    /// Index of a catch-all background class, if the vocabulary has one.
    fn background_class(&self) -> Option<usize>;

    fn detect(&self, img: &Image) -> Result<DetectionSet>;

    /// Runs one forward pass, lets `select` build a loss from its detections,
    /// and differentiates that loss (scaled by `learning_rate`) with respect
    /// to the rescaled input when a loss is returned.
    fn detect_and_differentiate(
        &self,
        img: &Image,
        learning_rate: f64,
        select: &mut LossSelector<'_>,
    ) -> Result<(DetectionSet, Option<Differentiated>)>;

    /// Loss and gradient plan for `spec`, whose box indices refer to the
    /// detections of a fresh forward pass on `img`.
    fn loss_and_gradient(&self, img: &Image, spec: &LossSpec, learning_rate: f64) -> Result<(f64, GradientPlan)> {
        let (_, diff) = self.detect_and_differentiate(img, learning_rate, &mut |_| Ok(Some(spec.clone())))?;
        let diff = diff.expect("a loss was supplied");
        Ok((diff.loss, diff.plan))
    }
}

/// Greedy non-maximum suppression. Returns indices of kept candidates in
/// descending score order; a candidate is suppressed when its IoU with an
/// already-kept box exceeds `iou_thresh`. Equal scores keep the lower index
/// first.
pub fn nms(candidates: &[(BBox, f64)], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let b = &candidates[i].0;
        if kept.iter().all(|&k| iou_unchecked(&candidates[k].0, b) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(probs: &[f64]) -> Detection {
        Detection {
            bbox: BBox::new(0.0, 0.0, 4.0, 4.0),
            class_probs: probs.to_vec(),
            objectness: 0.9,
        }
    }

    fn set(dets: Vec<Detection>) -> DetectionSet {
        let k = dets.first().map_or(2, |d| d.class_probs.len());
        DetectionSet {
            detections: dets,
            class_vocab: (0..k).map(|i| format!("c{i}")).collect(),
        }
    }

    #[test]
    fn nms_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[(a, 0.3)], 0.5), vec![0]);
        assert_eq!(nms(&[(a, 0.9), (a, 0.8)], 0.5), vec![0]);
        let b = BBox::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(nms(&[(a, 0.2), (b, 0.7)], 0.5), vec![1, 0]);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn loss_examples() {
        let dets = set(vec![det(&[0.5, 0.5]), det(&[0.75, 0.25])]);
        assert_eq!(LossSpec::default().evaluate(&dets).unwrap(), 0.0);
        let one = LossSpec::new(vec![LossTerm {
            box_index: 0,
            class_index: 1,
            weight: 1.0,
        }]);
        assert!((one.evaluate(&dets).unwrap() - 0.693147).abs() < 1e-6);
        let bad = LossSpec::new(vec![LossTerm {
            box_index: 2,
            class_index: 0,
            weight: 1.0,
        }]);
        assert!(bad.evaluate(&dets).is_err());
    }

    #[test]
    fn zero_probability_is_clamped() {
        assert!((neg_log_prob(0.0) - (-PROB_EPS.ln())).abs() < 1e-12);
        assert!(neg_log_prob(0.0).is_finite());
    }

    #[test]
    fn predicted_class_ties_go_low() {
        assert_eq!(det(&[0.4, 0.4, 0.2]).predicted_class(), 0);
        assert_eq!(det(&[0.1, 0.6, 0.3]).predicted_class(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::default().validate().is_ok());
        let bad = DetectorConfig {
            nms_iou: 1.0,
            ..DetectorConfig::default()
        };
        assert!(bad.validate().is_err());
        let small = DetectorConfig {
            short_side: 16,
            ..DetectorConfig::default()
        };
        assert!(small.validate().is_err());
    }
}
