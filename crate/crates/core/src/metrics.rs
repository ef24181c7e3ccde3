//! Attack evaluation: success rate, class confidences, perturbation size,
//! SSIM, detection mAP, the permutation and resize controls, and aggregation of
//! per-attack records into per-variant tables.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attack::{FailureCause, Goal, Variant};
use crate::detector::{DetectionSet, Detector};
use crate::geometry::{iou_unchecked, permute_perturbation, resize_by_scale, BBox, BinaryMask, Image};
use crate::seed::SeedKey;
use crate::{Error, Result};

/// `100 · #success / #attacks`.
pub fn success_rate(successes: &[bool]) -> Result<f64> {
    if successes.is_empty() {
        return Err(Error::Empty("success rate over no attacks"));
    }
    Ok(100.0 * successes.iter().filter(|&&s| s).count() as f64 / successes.len() as f64)
}

/// Mean `g[·, o_pick]` (×100) over adversarial boxes touching the mask; 0 when
/// none touches it.
pub fn actc(dets_adv: &DetectionSet, mask: &BinaryMask, o_pick: usize) -> f64 {
    let probs: Vec<f64> = dets_adv
        .detections
        .iter()
        .filter(|d| mask.intersects(&d.bbox))
        .map(|d| d.prob(o_pick))
        .collect();
    if probs.is_empty() {
        0.0
    } else {
        100.0 * probs.iter().sum::<f64>() / probs.len() as f64
    }
}

/// Mean `g[·, k]` (×100) over boxes labelled `k`; `None` when there are none.
pub fn acac(dets_adv: &DetectionSet, k: usize) -> Option<f64> {
    let probs: Vec<f64> = dets_adv
        .detections
        .iter()
        .filter(|d| d.predicted_class() == k)
        .map(|d| d.prob(k))
        .collect();
    (!probs.is_empty()).then(|| 100.0 * probs.iter().sum::<f64>() / probs.len() as f64)
}

/// ℓ2 norm of the full difference divided by the number of mask pixels.
pub fn delta(i_adv: &Image, i_org: &Image, mask: &BinaryMask) -> Result<f64> {
    if mask.shape() != i_org.shape() {
        return Err(Error::ShapeMismatch {
            expected: i_org.shape(),
            found: mask.shape(),
        });
    }
    if mask.pixel_count() == 0 {
        return Err(Error::Empty("delta with an empty mask"));
    }
    Ok(i_adv.sub(i_org)?.l2_norm() / mask.pixel_count() as f64)
}

/// ℓ2 norm of the difference divided by `H·W`.
pub fn l2_per_image_size(i_adv: &Image, i_org: &Image) -> Result<f64> {
    let (h, w) = i_org.shape();
    Ok(i_adv.sub(i_org)?.l2_norm() / (h * w) as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let n = SSIM_WINDOW;
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), dynamic range 255,
/// computed per channel over all fully covered window positions and averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let k = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.data().iter().skip(c).step_by(3).copied().collect();
        let pb: Vec<f64> = b.data().iter().skip(c).step_by(3).copied().collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let aa = filter_valid(&prod(&pa, &pa), h, w, &k);
        let bb = filter_valid(&prod(&pb, &pb), h, w, &k);
        let ab = filter_valid(&prod(&pa, &pb), h, w, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredBox {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// 11-point interpolated AP from predictions already sorted by descending
/// score, each marked true/false positive, against `n_gt` ground-truth boxes.
pub fn average_precision_11(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp_flags.len());
    let mut rec = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &t) in tp_flags.iter().enumerate() {
        tp += usize::from(t);
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    let mut ap = 0.0;
    for step in 0..=10 {
        let t = step as f64 / 10.0;
        let p = rec
            .iter()
            .zip(&prec)
            .filter(|(r, _)| **r >= t)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += p;
    }
    ap / 11.0
}

/// Mean over ground-truth classes of the 11-point AP at IoU ≥ 0.5. Images are
/// paired by index. A prediction matching an already matched ground-truth box
/// counts as a false positive. `None` when there is no ground truth at all.
pub fn mean_average_precision(gts: &[Vec<GtBox>], preds: &[Vec<PredBox>]) -> Option<f64> {
    assert_eq!(gts.len(), preds.len(), "ground truth and predictions must pair up");
    let classes: std::collections::BTreeSet<usize> = gts.iter().flatten().map(|g| g.class).collect();
    if classes.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &c in &classes {
        let n_gt = gts.iter().flatten().filter(|g| g.class == c).count();
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for (img, p) in preds.iter().enumerate() {
            for (j, pb) in p.iter().enumerate() {
                if pb.class == c {
                    cand.push((pb.score, img, j));
                }
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut flags = Vec::with_capacity(cand.len());
        for &(_, img, j) in &cand {
            let pb = &preds[img][j];
            let mut best: Option<(f64, usize)> = None;
            for (gi, g) in gts[img].iter().enumerate() {
                if g.class != c {
                    continue;
                }
                let o = iou_unchecked(&pb.bbox, &g.bbox);
                if best.is_none_or(|(bo, _)| o > bo) {
                    best = Some((o, gi));
                }
            }
            let tp = match best {
                Some((o, gi)) if o >= MATCH_IOU && !used[img][gi] => {
                    used[img][gi] = true;
                    true
                }
                _ => false,
            };
            flags.push(tp);
        }
        sum += average_precision_11(&flags, n_gt);
    }
    Some(sum / classes.len() as f64)
}

/// Detection mAP (×100) on the adversarial image with the original
/// detections not touching the mask as ground truth. Boxes labelled
/// `background` are ignored on both sides. `None` when no ground truth
/// remains outside the mask.
pub fn map_outside_mask(
    dets_org: &DetectionSet,
    dets_adv: &DetectionSet,
    mask: &BinaryMask,
    background: Option<usize>,
) -> Option<f64> {
    let gt: Vec<GtBox> = dets_org
        .detections
        .iter()
        .filter(|d| Some(d.predicted_class()) != background && !mask.intersects(&d.bbox))
        .map(|d| GtBox {
            bbox: d.bbox,
            class: d.predicted_class(),
        })
        .collect();
    let pred: Vec<PredBox> = dets_adv
        .detections
        .iter()
        .filter(|d| Some(d.predicted_class()) != background)
        .map(|d| PredBox {
            bbox: d.bbox,
            class: d.predicted_class(),
            score: d.confidence(),
        })
        .collect();
    mean_average_precision(&[gt], &[pred]).map(|m| 100.0 * m)
}

/// Adds the spatially permuted perturbation to the original image, clamps,
/// and re-runs the success test.
pub fn permutation_check(
    det: &dyn Detector,
    original: &Image,
    adversarial: &Image,
    goal: &Goal,
    mask: &BinaryMask,
    seed: u64,
) -> Result<bool> {
    let pert = adversarial.sub(original)?;
    let moved = permute_perturbation(&pert, seed);
    let mut img = original.add(&moved)?;
    crate::geometry::clamp_in_place(&mut img);
    Ok(goal.is_met(&det.detect(&img)?, mask))
}

/// Bilinearly resizes the adversarial image by `scale` and re-runs the
/// success test (the mask is resized with nearest-neighbour sampling).
pub fn resize_check(det: &dyn Detector, adversarial: &Image, goal: &Goal, mask: &BinaryMask, scale: f64) -> Result<bool> {
    let img = resize_by_scale(adversarial, scale)?;
    let m = mask.resize_nearest(img.height(), img.width());
    Ok(goal.is_met(&det.detect(&img)?, &m))
}

/// One successful attack as seen by the controls.
#[derive(Debug, Clone, Copy)]
pub struct ControlCase<'a> {
    pub original: &'a Image,
    pub adversarial: &'a Image,
    pub goal: &'a Goal,
    pub mask: &'a BinaryMask,
}

/// Success rate (%) of the permuted perturbations; case `i` uses a seed
/// derived from `(seed, i)`.
pub fn permutation_control(cases: &[ControlCase<'_>], det: &dyn Detector, seed: u64) -> Result<f64> {
    let mut ok = Vec::with_capacity(cases.len());
    for (i, c) in cases.iter().enumerate() {
        let s = SeedKey::new(seed).with_u64(i as u64).finish();
        ok.push(permutation_check(det, c.original, c.adversarial, c.goal, c.mask, s)?);
    }
    success_rate(&ok)
}

/// Success rate (%) per scale after resizing the adversarial images.
pub fn resize_robustness(cases: &[ControlCase<'_>], det: &dyn Detector, scales: &[f64]) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(scales.len());
    for &s in scales {
        if !(s > 0.0) {
            return Err(Error::InvalidInput(format!("scale must be positive, got {s}")));
        }
        let ok = cases
            .iter()
            .map(|c| resize_check(det, c.adversarial, c.goal, c.mask, s))
            .collect::<Result<Vec<bool>>>()?;
        out.push((s, success_rate(&ok)?));
    }
    Ok(out)
}

/// Everything measured for one attack; aggregation works from these alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub image_id: String,
    pub variant: Variant,
    pub o_pick: Option<usize>,
    pub o_pick_name: Option<String>,
    /// Target `k` (targeted) or the relabel class `z` (all-objects).
    pub target: Option<usize>,
    pub success: bool,
    pub failure_cause: Option<FailureCause>,
    pub iterations: usize,
    pub mask_pixels: usize,
    /// Largest `|I_adv − I_org|` outside the mask (mask-confined variants).
    pub max_outside_mask: Option<f64>,
    pub delta: Option<f64>,
    pub l2_image_norm: f64,
    pub ssim: f64,
    pub actc: Option<f64>,
    pub acac: Option<f64>,
    pub map_outside: Option<f64>,
    /// `|a|` and mean `g[a, o_pick]` on the original image.
    pub initial_boxes: usize,
    pub initial_mean_prob: Option<f64>,
    pub permutation_success: Option<bool>,
    /// `(scale, success)` for each resize scale.
    pub resize_success: Vec<(f64, bool)>,
    pub original_caption: String,
    pub adversarial_caption: String,
    pub adversarial_png: Option<String>,
    pub perturbation_png: Option<String>,
    pub error: Option<String>,
}

impl AttackRecord {
    /// False for images that were skipped (nothing to attack, or an error).
    pub fn attack_ran(&self) -> bool {
        self.failure_cause.is_none_or(FailureCause::attack_ran)
    }

    /// Sort key giving a canonical record order.
    pub fn key(&self) -> (usize, String, Option<usize>) {
        let v = Variant::ALL.iter().position(|v| *v == self.variant).unwrap_or(usize::MAX);
        (v, self.image_id.clone(), self.target)
    }
}

/// Aggregates for one variant. Percentages are in [0, 100].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: Variant,
    pub attacks: usize,
    /// Images for which no attack could run.
    pub skipped: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Success rate excluding attacks that ended with no box overlapping the mask.
    pub success_rate_given_overlap: Option<f64>,
    /// Over successful attacks.
    pub acac: Option<f64>,
    /// Over successful attacks.
    pub actc: Option<f64>,
    /// Over all attacks with ground truth outside the mask.
    pub map_outside: Option<f64>,
    pub l2_mean: Option<f64>,
    pub l2_std: Option<f64>,
    /// Mean SSIM × 100.
    pub ssim_mean: Option<f64>,
    pub delta_mean: Option<f64>,
    pub delta_std: Option<f64>,
    pub permutation_sr: Option<f64>,
    pub resize_sr: Vec<(f64, f64)>,
}

/// Mean and population standard deviation, summed in the given order.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn mean(values: &[f64]) -> Option<f64> {
    mean_std(values).map(|(m, _)| m)
}

impl VariantMetrics {
    /// `records` must all belong to `variant`. Skipped records are only
    /// counted.
    pub fn from_records(variant: Variant, all: &[&AttackRecord]) -> Result<Self> {
        let records: Vec<&AttackRecord> = all.iter().copied().filter(|r| r.attack_ran()).collect();
        if records.is_empty() {
            return Err(Error::Empty("no attacks ran for variant"));
        }
        let succ: Vec<&&AttackRecord> = records.iter().filter(|r| r.success).collect();
        let flags: Vec<bool> = records.iter().map(|r| r.success).collect();
        let overlap: Vec<bool> = records
            .iter()
            .filter(|r| r.failure_cause != Some(FailureCause::NoOverlap))
            .map(|r| r.success)
            .collect();
        let collect = |f: &dyn Fn(&AttackRecord) -> Option<f64>, only_success: bool| -> Vec<f64> {
            records
                .iter()
                .filter(|r| !only_success || r.success)
                .filter_map(|r| f(r))
                .collect()
        };
        let l2 = mean_std(&collect(&|r| Some(r.l2_image_norm), true));
        let dl = mean_std(&collect(&|r| r.delta, true));
        let perm: Vec<bool> = succ.iter().filter_map(|r| r.permutation_success).collect();
        let mut scales: Vec<f64> = Vec::new();
        for r in &succ {
            for &(s, _) in &r.resize_success {
                if !scales.contains(&s) {
                    scales.push(s);
                }
            }
        }
        scales.sort_by(f64::total_cmp);
        let mut resize_sr = Vec::new();
        for s in scales {
            let ok: Vec<bool> = succ
                .iter()
                .filter_map(|r| r.resize_success.iter().find(|(x, _)| *x == s).map(|(_, b)| *b))
                .collect();
            resize_sr.push((s, success_rate(&ok)?));
        }
        Ok(VariantMetrics {
            variant,
            attacks: records.len(),
            skipped: all.len() - records.len(),
            successes: succ.len(),
            success_rate: success_rate(&flags)?,
            success_rate_given_overlap: success_rate(&overlap).ok(),
            acac: mean(&collect(&|r| r.acac, true)),
            actc: mean(&collect(&|r| r.actc, true)),
            map_outside: mean(&collect(&|r| r.map_outside, false)),
            l2_mean: l2.map(|x| x.0),
            l2_std: l2.map(|x| x.1),
            ssim_mean: mean(&collect(&|r| Some(100.0 * r.ssim), true)),
            delta_mean: dl.map(|x| x.0),
            delta_std: dl.map(|x| x.1),
            permutation_sr: success_rate(&perm).ok(),
            resize_sr,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<VariantMetrics>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

fn fmt_num(v: f64) -> String {
    format!("{v:.6}")
}

impl MetricsReport {
    /// Groups records by variant (in [`Variant::ALL`] order) after sorting
    /// them canonically, so the result does not depend on input order.
    pub fn from_records(records: &[AttackRecord]) -> Result<Self> {
        if !records.iter().any(AttackRecord::attack_ran) {
            return Err(Error::Empty("no attack records"));
        }
        let mut sorted: Vec<&AttackRecord> = records.iter().collect();
        sorted.sort_by_key(|r| r.key());
        let mut rows = Vec::new();
        for v in Variant::ALL {
            let group: Vec<&AttackRecord> = sorted.iter().copied().filter(|r| r.variant == v).collect();
            if group.iter().any(|r| r.attack_ran()) {
                rows.push(VariantMetrics::from_records(v, &group)?);
            }
        }
        Ok(MetricsReport { rows })
    }

    pub fn row(&self, v: Variant) -> Option<&VariantMetrics> {
        self.rows.iter().find(|r| r.variant == v)
    }

    fn scales(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.rows.iter().flat_map(|r| r.resize_sr.iter().map(|x| x.0)).collect();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s
    }

    /// Column names of [`MetricsReport::write_csv`].
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "variant",
            "attacks",
            "skipped",
            "successes",
            "success_rate",
            "acac",
            "actc",
            "map_outside",
            "l2_mean",
            "l2_std",
            "ssim_mean",
            "delta_mean",
            "delta_std",
            "success_rate_given_overlap",
            "permutation_sr",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend(self.scales().iter().map(|s| format!("resize_sr_{s}")));
        h
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let scales = self.scales();
        self.rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.variant.name().to_string(),
                    r.attacks.to_string(),
                    r.skipped.to_string(),
                    r.successes.to_string(),
                    fmt_num(r.success_rate),
                    fmt_opt(r.acac),
                    fmt_opt(r.actc),
                    fmt_opt(r.map_outside),
                    fmt_opt(r.l2_mean),
                    fmt_opt(r.l2_std),
                    fmt_opt(r.ssim_mean),
                    fmt_opt(r.delta_mean),
                    fmt_opt(r.delta_std),
                    fmt_opt(r.success_rate_given_overlap),
                    fmt_opt(r.permutation_sr),
                ];
                for s in &scales {
                    row.push(fmt_opt(r.resize_sr.iter().find(|x| x.0 == *s).map(|x| x.1)));
                }
                row
            })
            .collect()
    }

    /// One row per variant; AP is 11-point interpolated at IoU 0.5.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header()).map_err(csv_err)?;
        for row in self.csv_rows() {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Counts per bin of width `width` starting at zero (used for histograms).
pub fn histogram(values: &[f64], width: f64) -> BTreeMap<i64, usize> {
    let mut out = BTreeMap::new();
    for v in values {
        *out.entry((v / width).floor() as i64).or_insert(0) += 1;
    }
    out
}
