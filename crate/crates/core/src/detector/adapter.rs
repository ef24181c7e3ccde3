//! Adapter slot for an external two-stage detector (e.g. a Faster R-CNN).
//!
//! The backend works at its own input resolution and knows nothing about
//! rescaling or box post-processing; [`ExternalDetector`] rescales the image
//! to the configured short side, applies the objectness threshold, NMS and the
//! `n_max` cut, and maps boxes back to original-image coordinates.

use super::{nms, Detection, DetectionSet, Detector, DetectorConfig, Differentiated, LossSelector, LossTerm};
use crate::geometry::{rescale_image, BBox, GradientPlan, Image};
use crate::{Error, Result};

/// Default short side for external detectors.
pub const EXTERNAL_SHORT_SIDE: usize = 600;
/// Documented default learning rate for attacks on an external detector.
pub const EXTERNAL_LEARNING_RATE: f64 = 10_000.0;

/// One raw proposal at backend input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetection {
    pub bbox: BBox,
    pub class_probs: Vec<f64>,
    pub objectness: f64,
}

pub trait ExternalBackend: Send + Sync {
    fn class_vocab(&self) -> &[String];

    fn background_class(&self) -> Option<usize>;

    /// Proposals with class distributions for an input already at network
    /// resolution.
    fn forward(&self, input: &Image) -> Result<Vec<RawDetection>>;

    /// Gradient of `Σ weight · (−log g[row, class])` with respect to `input`,
    /// where rows index the output of [`ExternalBackend::forward`] on the
    /// same input and proposals are held fixed.
    fn backward(&self, input: &Image, terms: &[LossTerm]) -> Result<Image>;
}

/// Post-processing settings the caller must state explicitly: typical
/// external detectors do not publish them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSettings {
    pub n_max: usize,
    pub nms_iou: f64,
    pub objectness_threshold: f64,
}

pub struct ExternalDetector<B> {
    backend: B,
    cfg: DetectorConfig,
}

struct Processed {
    input: Image,
    /// Detection index → raw row.
    rows: Vec<usize>,
    dets: DetectionSet,
}

impl<B: ExternalBackend> ExternalDetector<B> {
    pub fn new(backend: B, settings: AdapterSettings) -> Result<Self> {
        Self::with_short_side(backend, settings, EXTERNAL_SHORT_SIDE)
    }

    pub fn with_short_side(backend: B, settings: AdapterSettings, short_side: usize) -> Result<Self> {
        let cfg = DetectorConfig {
            short_side,
            n_max: settings.n_max,
            nms_iou: settings.nms_iou,
            objectness_threshold: settings.objectness_threshold,
            num_classes: backend.class_vocab().len(),
        };
        cfg.validate()?;
        Ok(ExternalDetector { backend, cfg })
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    fn process(&self, img: &Image) -> Result<Processed> {
        let input = rescale_image(img, self.cfg.short_side)?;
        let (h, w) = img.shape();
        let sx = input.width() as f64 / w as f64;
        let sy = input.height() as f64 / h as f64;
        let raw = self.backend.forward(&input)?;
        let k = self.cfg.num_classes;
        for r in &raw {
            if r.class_probs.len() != k {
                return Err(Error::InvalidInput(format!(
                    "backend returned {} class probabilities, expected {k}",
                    r.class_probs.len()
                )));
            }
        }
        let candidates: Vec<(BBox, f64)> = raw
            .iter()
            .filter(|r| r.objectness >= self.cfg.objectness_threshold)
            .map(|r| (r.bbox, r.objectness))
            .collect();
        let above: Vec<usize> = (0..raw.len())
            .filter(|&i| raw[i].objectness >= self.cfg.objectness_threshold)
            .collect();
        let kept: Vec<usize> = nms(&candidates, self.cfg.nms_iou).into_iter().map(|i| above[i]).collect();
        let mut dets: Vec<(usize, Detection)> = kept
            .iter()
            .map(|&row| {
                let r = &raw[row];
                (
                    row,
                    Detection {
                        bbox: r.bbox.scaled(1.0 / sx, 1.0 / sy).clip(h, w),
                        class_probs: r.class_probs.clone(),
                        objectness: r.objectness,
                    },
                )
            })
            .collect();
        dets.sort_by(|a, b| b.1.confidence().total_cmp(&a.1.confidence()));
        dets.truncate(self.cfg.n_max);
        Ok(Processed {
            input,
            rows: dets.iter().map(|(r, _)| *r).collect(),
            dets: DetectionSet {
                detections: dets.into_iter().map(|(_, d)| d).collect(),
                class_vocab: self.backend.class_vocab().to_vec(),
            },
        })
    }
}

impl<B: ExternalBackend> Detector for ExternalDetector<B> {
    fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    fn class_vocab(&self) -> &[String] {
        self.backend.class_vocab()
    }

    fn background_class(&self) -> Option<usize> {
        self.backend.background_class()
    }

    fn detect(&self, img: &Image) -> Result<DetectionSet> {
        Ok(self.process(img)?.dets)
    }

    fn detect_and_differentiate(
        &self,
        img: &Image,
        learning_rate: f64,
        select: &mut LossSelector<'_>,
    ) -> Result<(DetectionSet, Option<Differentiated>)> {
        let p = self.process(img)?;
        let Some(spec) = select(&p.dets)? else {
            return Ok((p.dets, None));
        };
        spec.validate(p.dets.len(), self.cfg.num_classes)?;
        let raw_terms: Vec<LossTerm> = spec
            .terms
            .iter()
            .map(|t| LossTerm {
                box_index: p.rows[t.box_index],
                ..*t
            })
            .collect();
        let gradient = self.backend.backward(&p.input, &raw_terms)?;
        if gradient.shape() != p.input.shape() {
            return Err(Error::ShapeMismatch {
                expected: p.input.shape(),
                found: gradient.shape(),
            });
        }
        let loss = spec.evaluate(&p.dets)?;
        let plan = GradientPlan::new(gradient, img.shape(), learning_rate)?;
        Ok((p.dets, Some(Differentiated { loss, plan })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::LossSpec;

    /// Two fixed proposals whose class-1 probability is the mean input
    /// intensity inside the box divided by 255.
    struct Mock;

    fn mean_in(input: &Image, b: &BBox) -> (f64, usize) {
        let (xs, ys) = b.pixel_span(input.height(), input.width());
        let mut s = 0.0;
        let mut n = 0;
        for y in ys {
            for x in xs.clone() {
                for c in 0..3 {
                    s += input.get(y, x, c);
                    n += 1;
                }
            }
        }
        (s / n as f64, n)
    }

    fn boxes(input: &Image) -> [BBox; 3] {
        let w = input.width() as f64;
        [
            BBox::new(0.0, 0.0, w / 2.0, 100.0),
            BBox::new(w / 2.0, 0.0, w, 100.0),
            BBox::new(1.0, 1.0, w / 2.0, 100.0),
        ]
    }

    impl ExternalBackend for Mock {
        fn class_vocab(&self) -> &[String] {
            static V: std::sync::OnceLock<Vec<String>> = std::sync::OnceLock::new();
            V.get_or_init(|| vec!["__background__".into(), "thing".into()])
        }

        fn background_class(&self) -> Option<usize> {
            Some(0)
        }

        fn forward(&self, input: &Image) -> Result<Vec<RawDetection>> {
            Ok(boxes(input)
                .iter()
                .zip([0.9, 0.8, 0.7])
                .map(|(b, obj)| {
                    let p = (mean_in(input, b).0 / 255.0).clamp(0.01, 0.99);
                    RawDetection {
                        bbox: *b,
                        class_probs: vec![1.0 - p, p],
                        objectness: obj,
                    }
                })
                .collect())
        }

        fn backward(&self, input: &Image, terms: &[LossTerm]) -> Result<Image> {
            let mut g = Image::zeros(input.height(), input.width());
            for t in terms {
                let b = boxes(input)[t.box_index];
                let (m, n) = mean_in(input, &b);
                let p = m / 255.0;
                let dp = if t.class_index == 1 { -1.0 / p } else { 1.0 / (1.0 - p) };
                let (xs, ys) = b.pixel_span(input.height(), input.width());
                for y in ys {
                    for x in xs.clone() {
                        for c in 0..3 {
                            let v = g.get(y, x, c) + t.weight * dp / (255.0 * n as f64);
                            g.set(y, x, c, v);
                        }
                    }
                }
            }
            Ok(g)
        }
    }

    fn settings() -> AdapterSettings {
        AdapterSettings {
            n_max: 10,
            nms_iou: 0.5,
            objectness_threshold: 0.5,
        }
    }

    #[test]
    fn boxes_map_back_and_nms_applies() {
        let det = ExternalDetector::new(Mock, settings()).unwrap();
        let img = Image::filled(300, 400, 128.0);
        let dets = det.detect(&img).unwrap();
        // the third proposal overlaps the first and is suppressed
        assert_eq!(dets.len(), 2);
        assert_eq!(det.config().short_side, 600);
        let b = dets.detections[0].bbox;
        assert!((b.x2 - 200.0).abs() < 1e-9 && (b.y2 - 50.0).abs() < 1e-9, "{b:?}");
    }

    #[test]
    fn gradient_routes_to_backend_rows() {
        let det = ExternalDetector::with_short_side(Mock, settings(), 64).unwrap();
        let img = Image::filled(64, 128, 100.0);
        let spec = LossSpec::new(vec![LossTerm {
            box_index: 1,
            class_index: 1,
            weight: 1.0,
        }]);
        let (loss, plan) = det.loss_and_gradient(&img, &spec, 1.0).unwrap();
        assert!((loss + (100.0f64 / 255.0).ln()).abs() < 1e-9);
        let g = plan.unmasked();
        // box 1 is the right half
        assert!(g.get(10, 100, 0) < 0.0);
        assert_eq!(g.get(10, 10, 0), 0.0);
    }

    #[test]
    fn invalid_settings_rejected() {
        let bad = AdapterSettings {
            nms_iou: 0.0,
            ..settings()
        };
        assert!(ExternalDetector::new(Mock, bad).is_err());
    }
}
