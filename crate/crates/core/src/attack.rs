//! Class-confined attacks: pick an object class, fix a mask over its boxes, and
//! push the class distribution of those boxes with masked gradient steps.
//!
//! * non-targeted (`run_non_targeted`): ascend `−Σ_a log g[a, o_pick]` until no
//!   box is labelled `o_pick`;
//! * targeted (`run_targeted`): descend `−Σ_a log g[a, k]` until some tracked
//!   box is labelled `k` and none is labelled `o_pick`;
//! * all objects (`run_all_objects`): descend `−Σ_b log g[b, z]` over every box
//!   with an unmasked gradient until no originally predicted class remains.
//!
//! Each iteration runs the detector once: detections are inspected first (the
//! loop exits on success before any update) and the gradient comes from the
//! same forward pass.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectionSet, Detector, LossSpec, LossTerm};
use crate::geometry::{mask_gradient, rasterize_mask, BinaryMask, Image};
use crate::seed::SeedKey;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NonTarFrequent,
    NonTarConfident,
    TarFrequent,
    TarConfident,
    NonTarAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Frequent,
    Confident,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::NonTarAll,
        Variant::TarFrequent,
        Variant::TarConfident,
        Variant::NonTarFrequent,
        Variant::NonTarConfident,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NonTarFrequent => "non_tar_frequent",
            Variant::NonTarConfident => "non_tar_confident",
            Variant::TarFrequent => "tar_frequent",
            Variant::TarConfident => "tar_confident",
            Variant::NonTarAll => "non_tar_all",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    /// `None` for the all-objects baseline.
    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Variant::NonTarFrequent | Variant::TarFrequent => Some(Strategy::Frequent),
            Variant::NonTarConfident | Variant::TarConfident => Some(Strategy::Confident),
            Variant::NonTarAll => None,
        }
    }

    pub fn is_targeted(self) -> bool {
        matches!(self, Variant::TarFrequent | Variant::TarConfident)
    }

    pub fn default_max_iter(self) -> usize {
        if self == Variant::NonTarAll {
            120
        } else {
            60
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub max_iter: usize,
    /// Required for targeted variants.
    pub target_class: Option<usize>,
    pub seed: u64,
}

/// Default step scale for the bundled detector.
pub const DEFAULT_LEARNING_RATE: f64 = 10_000.0;

impl AttackConfig {
    pub fn new(variant: Variant) -> Self {
        AttackConfig {
            variant,
            learning_rate: DEFAULT_LEARNING_RATE,
            max_iter: variant.default_max_iter(),
            target_class: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.variant.is_targeted() && self.target_class.is_none() {
            return Err(Error::Config(format!("{} needs a target class", self.variant)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCause {
    /// The iteration budget ran out.
    BudgetExhausted,
    /// Targeted attack: no tracked box and no box overlapping the mask.
    NoOverlap,
    /// The image had no foreground detection; no attack was run.
    NothingToAttack,
    /// The attack could not run (see the record's error message).
    Error,
}

impl FailureCause {
    /// Whether the attack actually ran (records that did not are left out of
    /// aggregates).
    pub fn attack_ran(self) -> bool {
        matches!(self, FailureCause::BudgetExhausted | FailureCause::NoOverlap)
    }
}

impl fmt::Display for FailureCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureCause::BudgetExhausted => "budget_exhausted",
            FailureCause::NoOverlap => "no_overlap",
            FailureCause::NothingToAttack => "nothing_to_attack",
            FailureCause::Error => "error",
        })
    }
}

/// What an attack is trying to achieve; also the success test reused by the
/// permutation and resize controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Goal {
    NonTargeted { o_pick: usize },
    Targeted { o_pick: usize, target: usize },
    AllObjects { original: BTreeSet<usize>, z: usize },
}

impl Goal {
    /// The success condition on a detection set. `mask` is the attack mask at
    /// the resolution of `dets` (only the targeted fallback uses it).
    pub fn is_met(&self, dets: &DetectionSet, mask: &BinaryMask) -> bool {
        match *self {
            Goal::NonTargeted { o_pick } => compute_box_set_a(dets, o_pick).is_empty(),
            Goal::Targeted { o_pick, target } => match tracked_boxes(dets, mask, o_pick, target) {
                Some(a) => targeted_success(dets, &a, o_pick, target),
                None => false,
            },
            Goal::AllObjects { ref original, .. } => dets
                .detections
                .iter()
                .all(|d| !original.contains(&d.predicted_class())),
        }
    }

    pub fn o_pick(&self) -> Option<usize> {
        match *self {
            Goal::NonTargeted { o_pick } | Goal::Targeted { o_pick, .. } => Some(o_pick),
            Goal::AllObjects { .. } => None,
        }
    }

    pub fn target(&self) -> Option<usize> {
        match *self {
            Goal::Targeted { target, .. } => Some(target),
            Goal::AllObjects { z, .. } => Some(z),
            Goal::NonTargeted { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub loss: f64,
    /// Boxes driving the loss at this step.
    pub boxes: usize,
    /// Largest absolute pixel change made by this step (after clamping).
    pub max_change: f64,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub variant: Variant,
    pub goal: Goal,
    pub original: Image,
    pub adversarial: Image,
    pub mask: BinaryMask,
    pub success: bool,
    pub failure_cause: Option<FailureCause>,
    /// Number of gradient updates applied.
    pub iterations_used: usize,
    pub trace: Vec<TraceStep>,
    pub original_detections: DetectionSet,
    pub final_detections: DetectionSet,
}

impl AttackResult {
    pub fn perturbation(&self) -> Image {
        self.adversarial.sub(&self.original).expect("same shape")
    }
}

fn is_foreground(det: &dyn Detector, class: usize) -> bool {
    det.background_class() != Some(class)
}

/// Class to attack. `frequent`: most boxes, then larger summed confidence,
/// then lower index. `confident`: label of the box with the highest top-class
/// probability, lower box index on ties. Boxes labelled `background` (if
/// given) are ignored.
pub fn select_object(dets: &DetectionSet, strategy: Strategy, background: Option<usize>) -> Result<usize> {
    let fg: Vec<(usize, &crate::detector::Detection)> = dets
        .detections
        .iter()
        .enumerate()
        .filter(|(_, d)| Some(d.predicted_class()) != background)
        .collect();
    if fg.is_empty() {
        return Err(Error::NothingToAttack);
    }
    match strategy {
        Strategy::Frequent => {
            let k = dets.num_classes();
            let mut count = vec![0usize; k];
            let mut conf = vec![0.0f64; k];
            for (_, d) in &fg {
                count[d.predicted_class()] += 1;
                conf[d.predicted_class()] += d.top_prob();
            }
            let mut best = fg[0].1.predicted_class();
            for c in 0..k {
                if count[c] > count[best] || (count[c] == count[best] && conf[c] > conf[best]) {
                    best = c;
                }
            }
            // equal count and confidence keeps the lower index by scan order
            Ok(best)
        }
        Strategy::Confident => {
            let mut best = fg[0].1;
            for (_, d) in &fg[1..] {
                if d.top_prob() > best.top_prob() {
                    best = d;
                }
            }
            Ok(best.predicted_class())
        }
    }
}

/// Union raster of the boxes predicted as `o_pick`.
pub fn compute_mask(dets: &DetectionSet, o_pick: usize, shape: (usize, usize)) -> Result<BinaryMask> {
    let boxes: Vec<_> = dets
        .detections
        .iter()
        .filter(|d| d.predicted_class() == o_pick)
        .map(|d| d.bbox.clip(shape.0, shape.1))
        .collect();
    if boxes.is_empty() {
        return Err(Error::ClassAbsent(o_pick));
    }
    Ok(rasterize_mask(&boxes, shape))
}

/// Indices of detections whose argmax is `o_pick`.
pub fn compute_box_set_a(dets: &DetectionSet, o_pick: usize) -> Vec<usize> {
    dets.detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.predicted_class() == o_pick)
        .map(|(i, _)| i)
        .collect()
}

/// Among boxes touching at least one mask pixel, the one with the largest
/// `g[·, k]` (lower index on ties). `None` signals no overlap.
pub fn fallback_box(dets: &DetectionSet, mask: &BinaryMask, k: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, d) in dets.detections.iter().enumerate() {
        if mask.intersects(&d.bbox) && best.is_none_or(|b| d.prob(k) > dets.detections[b].prob(k)) {
            best = Some(i);
        }
    }
    best
}

fn tracked_boxes(dets: &DetectionSet, mask: &BinaryMask, o_pick: usize, k: usize) -> Option<Vec<usize>> {
    let a = compute_box_set_a(dets, o_pick);
    if a.is_empty() {
        fallback_box(dets, mask, k).map(|u| vec![u])
    } else {
        Some(a)
    }
}

fn targeted_success(dets: &DetectionSet, a: &[usize], o_pick: usize, k: usize) -> bool {
    let labels: Vec<usize> = a.iter().map(|&i| dets.detections[i].predicted_class()).collect();
    labels.contains(&k) && !labels.contains(&o_pick)
}

fn unit_terms(a: &[usize], class: usize) -> LossSpec {
    LossSpec::new(
        a.iter()
            .map(|&box_index| LossTerm {
                box_index,
                class_index: class,
                weight: 1.0,
            })
            .collect(),
    )
}

/// `−Σ_{a} log g[a, o_pick]`, to be maximized.
pub fn loss_nontargeted(a: &[usize], o_pick: usize) -> LossSpec {
    unit_terms(a, o_pick)
}

/// `−Σ_{a} log g[a, k]`, to be minimized.
pub fn loss_targeted(a: &[usize], k: usize) -> LossSpec {
    unit_terms(a, k)
}

enum Step {
    Done,
    Stop(FailureCause),
    Update(LossSpec, f64),
}

struct LoopOutcome {
    image: Image,
    success: bool,
    failure_cause: Option<FailureCause>,
    trace: Vec<TraceStep>,
    final_dets: DetectionSet,
}

/// Shared loop: `decide` inspects the current detections and either ends the
/// attack or returns a loss with the update sign (+1 ascent, −1 descent).
fn attack_loop(
    det: &dyn Detector,
    original: &Image,
    cfg: &AttackConfig,
    mask: Option<&BinaryMask>,
    mut decide: impl FnMut(&DetectionSet) -> Step,
) -> Result<LoopOutcome> {
    let mut img = original.clone();
    let mut trace = Vec::new();
    for _ in 0..cfg.max_iter {
        let mut step = Step::Done;
        let (dets, diff) = det.detect_and_differentiate(&img, cfg.learning_rate, &mut |d| {
            step = decide(d);
            Ok(match &step {
                Step::Update(spec, _) => Some(spec.clone()),
                _ => None,
            })
        })?;
        let (spec, sign) = match step {
            Step::Done => {
                return Ok(LoopOutcome {
                    image: img,
                    success: true,
                    failure_cause: None,
                    trace,
                    final_dets: dets,
                })
            }
            Step::Stop(cause) => {
                return Ok(LoopOutcome {
                    image: img,
                    success: false,
                    failure_cause: Some(cause),
                    trace,
                    final_dets: dets,
                })
            }
            Step::Update(spec, sign) => (spec, sign),
        };
        let diff = diff.expect("a loss was selected");
        let grad = match mask {
            Some(m) => mask_gradient(&diff.plan, m)?,
            None => diff.plan.unmasked(),
        };
        let mut max_change = 0.0f64;
        for (v, g) in img.data_mut().iter_mut().zip(grad.data()) {
            let next = (*v + sign * g).clamp(0.0, 255.0);
            max_change = max_change.max((next - *v).abs());
            *v = next;
        }
        trace.push(TraceStep {
            loss: diff.loss,
            boxes: spec.terms.len(),
            max_change,
        });
    }
    // The last update is never inspected by the loop, so the attack counts as
    // failed even if that image would pass the success test.
    let final_dets = det.detect(&img)?;
    Ok(LoopOutcome {
        image: img,
        success: false,
        failure_cause: Some(FailureCause::BudgetExhausted),
        trace,
        final_dets,
    })
}

fn prepare(det: &dyn Detector, img: &Image, cfg: &AttackConfig, o_pick: usize) -> Result<(DetectionSet, BinaryMask)> {
    cfg.validate()?;
    if !is_foreground(det, o_pick) {
        return Err(Error::Config("the background class cannot be attacked".into()));
    }
    let dets = det.detect(img)?;
    let mask = compute_mask(&dets, o_pick, img.shape())?;
    Ok((dets, mask))
}

/// Non-targeted attack on class `o_pick`.
pub fn run_non_targeted(det: &dyn Detector, img: &Image, cfg: &AttackConfig, o_pick: usize) -> Result<AttackResult> {
    let (original_detections, mask) = prepare(det, img, cfg, o_pick)?;
    let out = attack_loop(det, img, cfg, Some(&mask), |dets| {
        let a = compute_box_set_a(dets, o_pick);
        if a.is_empty() {
            Step::Done
        } else {
            Step::Update(loss_nontargeted(&a, o_pick), 1.0)
        }
    })?;
    Ok(finish(cfg, Goal::NonTargeted { o_pick }, img, mask, original_detections, out))
}

/// Targeted attack turning `o_pick` boxes into class `k`.
pub fn run_targeted(det: &dyn Detector, img: &Image, cfg: &AttackConfig, o_pick: usize, k: usize) -> Result<AttackResult> {
    if k == o_pick {
        return Err(Error::Config(format!("target class {k} equals the attacked class")));
    }
    if k >= det.class_vocab().len() {
        return Err(Error::Config(format!("target class {k} is outside the vocabulary")));
    }
    let (original_detections, mask) = prepare(det, img, cfg, o_pick)?;
    let out = attack_loop(det, img, cfg, Some(&mask), |dets| match tracked_boxes(dets, &mask, o_pick, k) {
        None => Step::Stop(FailureCause::NoOverlap),
        Some(a) if targeted_success(dets, &a, o_pick, k) => Step::Done,
        Some(a) => Step::Update(loss_targeted(&a, k), -1.0),
    })?;
    Ok(finish(cfg, Goal::Targeted { o_pick, target: k }, img, mask, original_detections, out))
}

/// Baseline: relabel every box to one random class absent from the original
/// predictions, with an unmasked gradient.
pub fn run_all_objects(det: &dyn Detector, img: &Image, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let original_detections = det.detect(img)?;
    let original: BTreeSet<usize> = original_detections
        .detections
        .iter()
        .map(|d| d.predicted_class())
        .filter(|&c| is_foreground(det, c))
        .collect();
    if original.is_empty() {
        return Err(Error::NothingToAttack);
    }
    let candidates: Vec<usize> = (0..det.class_vocab().len())
        .filter(|&c| is_foreground(det, c) && !original.contains(&c))
        .collect();
    let mut rng = SeedKey::new(cfg.seed).with_str("all-objects-target").rng();
    let z = *candidates.choose(&mut rng).ok_or(Error::VocabularyExhausted)?;
    let goal = Goal::AllObjects { original, z };
    let empty = BinaryMask::empty(img.height(), img.width());
    let out = attack_loop(det, img, cfg, None, |dets| {
        if goal.is_met(dets, &empty) {
            Step::Done
        } else {
            let all: Vec<usize> = (0..dets.len()).collect();
            Step::Update(loss_targeted(&all, z), -1.0)
        }
    })?;
    Ok(finish(cfg, goal, img, empty, original_detections, out))
}

fn finish(
    cfg: &AttackConfig,
    goal: Goal,
    img: &Image,
    mask: BinaryMask,
    original_detections: DetectionSet,
    out: LoopOutcome,
) -> AttackResult {
    AttackResult {
        variant: cfg.variant,
        goal,
        original: img.clone(),
        adversarial: out.image,
        mask,
        success: out.success,
        failure_cause: out.failure_cause,
        iterations_used: out.trace.len(),
        trace: out.trace,
        original_detections,
        final_detections: out.final_dets,
    }
}

/// Runs `cfg.variant` end to end: object selection, then the matching loop.
pub fn run_variant(det: &dyn Detector, img: &Image, cfg: &AttackConfig) -> Result<AttackResult> {
    match cfg.variant.strategy() {
        None => run_all_objects(det, img, cfg),
        Some(strategy) => {
            let dets = det.detect(img)?;
            let o_pick = select_object(&dets, strategy, det.background_class())?;
            if cfg.variant.is_targeted() {
                let k = cfg.target_class.ok_or_else(|| Error::Config("missing target class".into()))?;
                run_targeted(det, img, cfg, o_pick, k)
            } else {
                run_non_targeted(det, img, cfg, o_pick)
            }
        }
    }
}

/// `n` distinct foreground targets other than `o_pick`, sampled uniformly
/// without replacement (fewer if the vocabulary is smaller).
pub fn sample_targets(n_classes: usize, background: Option<usize>, o_pick: usize, n: usize, seed: u64) -> Vec<usize> {
    let pool: Vec<usize> = (0..n_classes).filter(|&c| c != o_pick && Some(c) != background).collect();
    let mut rng = SeedKey::new(seed).with_str("targets").rng();
    pool.choose_multiple(&mut rng, n.min(pool.len())).copied().collect()
}
