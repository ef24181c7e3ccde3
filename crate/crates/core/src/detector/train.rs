//! Seeded training of the bundled detector on generated scenes.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::mini::{Grads, MiniDetector};
use super::nn::AdamSlot;
use super::weights::TrainingMeta;
use super::{Detector, DetectorConfig};
use crate::geometry::{rescale_image, BBox};
use crate::metrics::{mean_average_precision, GtBox, PredBox};
use crate::scenedata::{class_vocabulary, generate_scene, DatasetConfig, Scene};
use crate::seed::SeedKey;
use crate::{Error, Result};

pub const MIN_TRAIN_SCENES: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Held-out scenes generated from a seed derived from the dataset seed.
    pub heldout_scenes: usize,
    pub min_heldout_map: f64,
    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 8,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            heldout_scenes: 200,
            min_heldout_map: 0.80,
            detector: DetectorConfig::default(),
        }
    }
}

/// Held-out split used during training: same generator settings, a derived seed.
pub fn heldout_config(dataset: &DatasetConfig, n: usize) -> DatasetConfig {
    DatasetConfig {
        n_scenes: n,
        seed: SeedKey::new(dataset.seed).with_str("heldout").finish(),
        ..dataset.clone()
    }
}

fn ground_truth(scene: &Scene, vocab: &[String]) -> Result<Vec<(BBox, usize)>> {
    scene
        .annotation
        .boxes
        .iter()
        .map(|b| {
            let class = vocab
                .iter()
                .position(|v| *v == b.class_name)
                .ok_or_else(|| Error::InvalidInput(format!("unknown class {:?}", b.class_name)))?;
            Ok((b.bbox, class))
        })
        .collect()
}

/// Held-out mAP (IoU 0.5, 11-point AP) of `det` on scenes `0..n` of `data`.
pub fn evaluate_map(det: &MiniDetector, data: &DatasetConfig) -> Result<f64> {
    let vocab = class_vocabulary();
    let bg = det.background_class();
    let mut gts = Vec::with_capacity(data.n_scenes);
    let mut preds = Vec::with_capacity(data.n_scenes);
    for i in 0..data.n_scenes {
        let scene = generate_scene(data, i)?;
        gts.push(
            ground_truth(&scene, &vocab)?
                .into_iter()
                .map(|(bbox, class)| GtBox { bbox, class })
                .collect::<Vec<_>>(),
        );
        let dets = det.detect_unchecked(&scene.image)?;
        preds.push(
            dets.detections
                .iter()
                .filter(|d| Some(d.predicted_class()) != bg)
                .map(|d| PredBox {
                    bbox: d.bbox,
                    class: d.predicted_class(),
                    score: d.confidence(),
                })
                .collect::<Vec<_>>(),
        );
    }
    Ok(mean_average_precision(&gts, &preds).unwrap_or(0.0))
}

/// Trains the bundled detector on scenes `0..dataset.n_scenes` generated from
/// `dataset`, then checks held-out mAP against `cfg.min_heldout_map`.
pub fn train_mini_detector(dataset: &DatasetConfig, cfg: &TrainConfig, seed: u64) -> Result<MiniDetector> {
    dataset.validate()?;
    if dataset.n_scenes < MIN_TRAIN_SCENES {
        return Err(Error::Training(format!(
            "at least {MIN_TRAIN_SCENES} training scenes are required, got {}",
            dataset.n_scenes
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.heldout_scenes == 0 {
        return Err(Error::Config("epochs, batch_size and heldout_scenes must be positive".into()));
    }
    let mut det = MiniDetector::untrained(cfg.detector.clone(), SeedKey::new(seed).with_str("init").finish())?;
    let vocab = class_vocabulary();
    let mut rng = SeedKey::new(seed).with_str("train").rng();
    let mut slots: Vec<(AdamSlot, AdamSlot)> = det
        .params()
        .tensors()
        .iter()
        .map(|(w, b)| (AdamSlot::new(w.len()), AdamSlot::new(b.len())))
        .collect();

    let steps_per_epoch = dataset.n_scenes.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = (total_steps / 50).max(1);
    let mut step = 0u32;
    let mut last_loss = f64::NAN;
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.n_scenes).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let (mut correct, mut rois) = (0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = det.params().zero_grads();
            for &i in batch {
                let scene = generate_scene(dataset, i)?;
                let scaled = rescale_image(&scene.image, cfg.detector.short_side)?;
                let sx = scaled.width() as f64 / scene.image.width() as f64;
                let sy = scaled.height() as f64 / scene.image.height() as f64;
                let gt: Vec<(BBox, usize)> = ground_truth(&scene, &vocab)?
                    .into_iter()
                    .map(|(b, c)| (b.scaled(sx, sy), c))
                    .collect();
                let l = det.train_step(&scaled, &gt, cfg.label_smoothing, &mut rng, &mut grads);
                epoch_loss += l.objectness + l.boxes + l.classification;
                correct += l.correct_rois;
                rois += l.rois;
            }
            grads.scale(1.0 / batch.len() as f64);
            step += 1;
            let lr = schedule(cfg.learning_rate, step as usize, warmup, total_steps);
            apply(&mut det, &mut slots, &grads, lr, step, cfg.weight_decay);
        }
        last_loss = epoch_loss / dataset.n_scenes as f64;
        log::info!(
            "epoch {}/{}: loss {:.4}, roi accuracy {:.3}, {:.0}s elapsed",
            epoch + 1,
            cfg.epochs,
            last_loss,
            correct as f64 / rois.max(1) as f64,
            start.elapsed().as_secs_f64()
        );
        if !last_loss.is_finite() {
            return Err(Error::Training(format!("loss diverged in epoch {}", epoch + 1)));
        }
    }

    let heldout = heldout_config(dataset, cfg.heldout_scenes);
    let map = evaluate_map(&det, &heldout)?;
    log::info!("held-out mAP {map:.4} on {} scenes", cfg.heldout_scenes);
    if map < cfg.min_heldout_map {
        return Err(Error::Training(format!(
            "held-out mAP {map:.4} is below the required {:.2} after {} epochs on {} scenes \
             (final training loss {last_loss:.4}); increase epochs or training scenes",
            cfg.min_heldout_map, cfg.epochs, dataset.n_scenes
        )));
    }
    det.set_training_meta(TrainingMeta {
        epochs: cfg.epochs,
        seed,
        train_scenes: dataset.n_scenes,
        heldout_scenes: cfg.heldout_scenes,
        heldout_map: map,
        final_loss: last_loss,
    });
    Ok(det)
}

/// Linear warmup then cosine decay to 5% of the base rate.
fn schedule(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step <= warmup {
        return base * step as f64 / warmup as f64;
    }
    let t = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    base * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos()))
}

fn apply(det: &mut MiniDetector, slots: &mut [(AdamSlot, AdamSlot)], grads: &Grads, lr: f64, t: u32, wd: f64) {
    let params = det.params_mut();
    for (((w, b), (sw, sb)), g) in params.tensors_mut().into_iter().zip(slots.iter_mut()).zip(&grads.layers) {
        sw.step(w, &g.weight, lr, t, wd);
        sb.step(b, &g.bias, lr, t, 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_few_scenes_is_an_error() {
        let data = DatasetConfig {
            n_scenes: 10,
            ..DatasetConfig::default()
        };
        let err = train_mini_detector(&data, &TrainConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Training(_)), "{err}");
    }

    #[test]
    fn schedule_shape() {
        assert!((schedule(1.0, 5, 10, 100) - 0.5).abs() < 1e-12);
        assert!((schedule(1.0, 10, 10, 100) - 1.0).abs() < 1e-12);
        assert!((schedule(1.0, 100, 10, 100) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn heldout_seed_differs() {
        let d = DatasetConfig::default();
        let h = heldout_config(&d, 20);
        assert_ne!(h.seed, d.seed);
        assert_eq!(h.n_scenes, 20);
    }
}
