//! A deliberately small two-stage detector.
//!
//! ```text
//! image ─ rescale ─ conv3×3/2 ─ conv3×3 ─ conv3×3/2 ──┬─ conv3×3/2 ─ conv3×3 ─ 1×1 ─▶ objectness + box deltas
//!                   (12)        (16)      (32, /4) │   (32, /8)     (32)            one anchor per cell
//!                                                   │
//!                                                   └─ ROI-align 6×6 ─ fc 64 ─ fc K ─▶ class distribution
//! ```
//!
//! Stage one scores every cell of the stride-8 grid and regresses a box from a
//! fixed 24 px anchor; proposals above the objectness threshold go through NMS.
//! Stage two pools each proposal from the stride-4 feature map and classifies
//! it over `K` classes (background included).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nn::{
    relu_backward, relu_in_place, sigmoid, softmax_in_place, Conv2d, ConvCache, ConvGrad, Linear, RoiAlign, Taps,
    Tensor,
};
use super::weights::TrainingMeta;
use super::{nms, Detection, DetectionSet, Detector, DetectorConfig, Differentiated, LossSelector, LossTerm, PROB_EPS};
use crate::geometry::{iou_unchecked, rescale_image, BBox, GradientPlan, Image};
use crate::scenedata::{class_vocabulary, BACKGROUND};
use crate::{Error, Result};

pub const ANCHOR_SIZE: f64 = 24.0;
pub const RPN_STRIDE: usize = 8;
pub const ROI_STRIDE: usize = 4;
pub const ROI_BINS: usize = 6;

const INPUT_CENTER: f64 = 127.5;
const INPUT_SCALE: f64 = 1.0 / 64.0;
const CH1: usize = 12;
const CH2: usize = 16;
const CH3: usize = 32;
const CH4: usize = 32;
const HIDDEN: usize = 64;
const DELTA_CLAMP: f64 = 3.0;
const BOX_LOSS_WEIGHT: f64 = 5.0;

const ROI: RoiAlign = RoiAlign {
    bins: ROI_BINS,
    stride: ROI_STRIDE,
};

/// Layer order used for gradients, optimizer state and serialization.
pub(crate) const N_LAYERS: usize = 8;
const L_C1: usize = 0;
const L_C2: usize = 1;
const L_C3: usize = 2;
const L_C4: usize = 3;
const L_RPN: usize = 4;
const L_RPN_OUT: usize = 5;
const L_FC1: usize = 6;
const L_FC2: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
    rpn: Conv2d,
    rpn_out: Conv2d,
    fc1: Linear,
    fc2: Linear,
}

impl Params {
    pub fn init(num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rpn_out = Conv2d::new(CH4, 5, 1, 1, &mut rng);
        for w in &mut rpn_out.weight {
            *w *= 0.1;
        }
        rpn_out.bias[0] = -3.0;
        Params {
            c1: Conv2d::new(3, CH1, 3, 2, &mut rng),
            c2: Conv2d::new(CH1, CH2, 3, 1, &mut rng),
            c3: Conv2d::new(CH2, CH3, 3, 2, &mut rng),
            c4: Conv2d::new(CH3, CH4, 3, 2, &mut rng),
            rpn: Conv2d::new(CH4, CH4, 3, 1, &mut rng),
            rpn_out,
            fc1: Linear::new(ROI.out_len(CH3), HIDDEN, 1.0, &mut rng),
            fc2: Linear::new(HIDDEN, num_classes, 0.1, &mut rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fc2.nout
    }

    /// `(weight, bias)` of every layer in serialization order.
    pub(crate) fn tensors(&self) -> [(&[f64], &[f64]); N_LAYERS] {
        [
            (&self.c1.weight, &self.c1.bias),
            (&self.c2.weight, &self.c2.bias),
            (&self.c3.weight, &self.c3.bias),
            (&self.c4.weight, &self.c4.bias),
            (&self.rpn.weight, &self.rpn.bias),
            (&self.rpn_out.weight, &self.rpn_out.bias),
            (&self.fc1.weight, &self.fc1.bias),
            (&self.fc2.weight, &self.fc2.bias),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&mut Vec<f64>, &mut Vec<f64>); N_LAYERS] {
        [
            (&mut self.c1.weight, &mut self.c1.bias),
            (&mut self.c2.weight, &mut self.c2.bias),
            (&mut self.c3.weight, &mut self.c3.bias),
            (&mut self.c4.weight, &mut self.c4.bias),
            (&mut self.rpn.weight, &mut self.rpn.bias),
            (&mut self.rpn_out.weight, &mut self.rpn_out.bias),
            (&mut self.fc1.weight, &mut self.fc1.bias),
            (&mut self.fc2.weight, &mut self.fc2.bias),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    pub(crate) fn zero_grads(&self) -> Grads {
        Grads {
            layers: self
                .tensors()
                .iter()
                .map(|(w, b)| ConvGrad {
                    weight: vec![0.0; w.len()],
                    bias: vec![0.0; b.len()],
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Grads {
    pub layers: Vec<ConvGrad>,
}

impl Grads {
    pub fn scale(&mut self, s: f64) {
        for g in &mut self.layers {
            g.weight.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }
}

struct Backbone {
    k1: ConvCache,
    a1: Tensor,
    k2: ConvCache,
    a2: Tensor,
    k3: ConvCache,
    a3: Tensor,
}

struct RpnPass {
    k4: ConvCache,
    a4: Tensor,
    kr: ConvCache,
    ar: Tensor,
    ko: ConvCache,
    out: Tensor,
}

struct ClassPass {
    taps: Vec<Vec<Taps>>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
    rows: usize,
}

struct Pass {
    backbone: Backbone,
    cls: ClassPass,
    /// Detection index → ROI row of `cls`.
    order: Vec<usize>,
    dets: DetectionSet,
    scaled_shape: (usize, usize),
}

/// The bundled detector. Construct with [`MiniDetector::untrained`] and train
/// with [`super::train_mini_detector`], or load from a weights file.
#[derive(Debug, Clone)]
pub struct MiniDetector {
    cfg: DetectorConfig,
    params: Params,
    vocab: Vec<String>,
    meta: Option<TrainingMeta>,
}

pub(crate) fn image_to_tensor(img: &Image) -> Tensor {
    let (h, w) = img.shape();
    let mut t = Tensor::zeros(3, h, w);
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            t.data[c * h * w + i] = (px[c] - INPUT_CENTER) * INPUT_SCALE;
        }
    }
    t
}

fn tensor_to_gradient(t: &Tensor) -> Image {
    let (h, w) = (t.h, t.w);
    let mut data = vec![0.0; h * w * 3];
    for c in 0..3 {
        for i in 0..h * w {
            data[i * 3 + c] = t.data[c * h * w + i] * INPUT_SCALE;
        }
    }
    Image::from_vec(h, w, data).expect("shape matches")
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl MiniDetector {
    /// A randomly initialized detector. [`Detector::detect`] refuses to run
    /// until training metadata is attached.
    pub fn untrained(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = class_vocabulary();
        if cfg.num_classes != vocab.len() {
            return Err(Error::Config(format!(
                "the bundled vocabulary has {} classes but num_classes is {}",
                vocab.len(),
                cfg.num_classes
            )));
        }
        Ok(MiniDetector {
            params: Params::init(cfg.num_classes, seed),
            cfg,
            vocab,
            meta: None,
        })
    }

    pub(crate) fn from_parts(cfg: DetectorConfig, params: Params, meta: Option<TrainingMeta>) -> Result<Self> {
        let mut det = MiniDetector::untrained(cfg, 0)?;
        det.params = params;
        det.meta = meta;
        Ok(det)
    }

    pub fn is_trained(&self) -> bool {
        self.meta.is_some()
    }

    pub fn training_meta(&self) -> Option<&TrainingMeta> {
        self.meta.as_ref()
    }

    pub(crate) fn set_training_meta(&mut self, meta: TrainingMeta) {
        self.meta = Some(meta);
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Same weights, different runtime thresholds.
    pub fn with_config(&self, cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.num_classes != self.cfg.num_classes {
            return Err(Error::Config("num_classes is fixed by the weights".into()));
        }
        let mut out = self.clone();
        out.cfg = cfg;
        Ok(out)
    }

    fn backbone(&self, x0: &Tensor) -> Backbone {
        let p = &self.params;
        let (mut a1, k1) = p.c1.forward(x0);
        relu_in_place(&mut a1.data);
        let (mut a2, k2) = p.c2.forward(&a1);
        relu_in_place(&mut a2.data);
        let (mut a3, k3) = p.c3.forward(&a2);
        relu_in_place(&mut a3.data);
        Backbone { k1, a1, k2, a2, k3, a3 }
    }

    fn rpn(&self, a3: &Tensor) -> RpnPass {
        let p = &self.params;
        let (mut a4, k4) = p.c4.forward(a3);
        relu_in_place(&mut a4.data);
        let (mut ar, kr) = p.rpn.forward(&a4);
        relu_in_place(&mut ar.data);
        let (out, ko) = p.rpn_out.forward(&ar);
        RpnPass { k4, a4, kr, ar, ko, out }
    }

    fn anchor_center(i: usize, j: usize) -> (f64, f64) {
        let s = RPN_STRIDE as f64;
        ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)
    }

    fn decode(out: &Tensor, i: usize, j: usize) -> BBox {
        let (ax, ay) = Self::anchor_center(i, j);
        let tx = out.at(1, i, j);
        let ty = out.at(2, i, j);
        let tw = out.at(3, i, j).clamp(-DELTA_CLAMP, DELTA_CLAMP);
        let th = out.at(4, i, j).clamp(-DELTA_CLAMP, DELTA_CLAMP);
        let cx = ax + tx * ANCHOR_SIZE;
        let cy = ay + ty * ANCHOR_SIZE;
        let w = ANCHOR_SIZE * tw.exp();
        let h = ANCHOR_SIZE * th.exp();
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    fn proposals(&self, rpn: &RpnPass, shape: (usize, usize)) -> Vec<(BBox, f64)> {
        let out = &rpn.out;
        let mut props = Vec::new();
        for i in 0..out.h {
            for j in 0..out.w {
                let p = sigmoid(out.at(0, i, j));
                if p < self.cfg.objectness_threshold {
                    continue;
                }
                let b = Self::decode(out, i, j).clip(shape.0, shape.1);
                if b.width() >= 1.0 && b.height() >= 1.0 {
                    props.push((b, p));
                }
            }
        }
        props
    }

    fn classify(&self, a3: &Tensor, rois: &[BBox]) -> ClassPass {
        let p = &self.params;
        let taps: Vec<Vec<Taps>> = rois
            .iter()
            .map(|b| ROI.taps(a3.h, a3.w, [b.x1, b.y1, b.x2, b.y2]))
            .collect();
        let rows = rois.len();
        let pooled = ROI.forward(a3, &taps);
        let mut hidden = p.fc1.forward(&pooled, rows);
        relu_in_place(&mut hidden);
        let mut probs = p.fc2.forward(&hidden, rows);
        for row in probs.chunks_exact_mut(p.fc2.nout) {
            softmax_in_place(row);
        }
        ClassPass {
            taps,
            pooled,
            hidden,
            probs,
            rows,
        }
    }

    fn classify_backward(&self, a3: &Tensor, cls: &ClassPass, dlogits: &[f64], mut grads: Option<&mut Grads>) -> Tensor {
        let p = &self.params;
        let mut dhidden = p.fc2.backward(
            &cls.hidden,
            dlogits,
            cls.rows,
            grads.as_deref_mut().map(|g| &mut g.layers[L_FC2]),
        );
        relu_backward(&cls.hidden, &mut dhidden);
        let dpooled = p.fc1.backward(
            &cls.pooled,
            &dhidden,
            cls.rows,
            grads.as_deref_mut().map(|g| &mut g.layers[L_FC1]),
        );
        let mut da3 = Tensor::zeros(a3.c, a3.h, a3.w);
        ROI.backward((a3.c, a3.h, a3.w), &cls.taps, &dpooled, &mut da3);
        da3
    }

    /// Backpropagates a gradient on the stride-4 features to the network input.
    fn backbone_backward(
        &self,
        bb: &Backbone,
        mut da3: Tensor,
        mut grads: Option<&mut Grads>,
        need_input: bool,
    ) -> Option<Tensor> {
        let p = &self.params;
        relu_backward(&bb.a3.data, &mut da3.data);
        let mut da2 = p
            .c3
            .backward(&bb.k3, &da3, grads.as_deref_mut().map(|g| &mut g.layers[L_C3]), true)
            .expect("input gradient requested");
        relu_backward(&bb.a2.data, &mut da2.data);
        let mut da1 = p
            .c2
            .backward(&bb.k2, &da2, grads.as_deref_mut().map(|g| &mut g.layers[L_C2]), true)
            .expect("input gradient requested");
        relu_backward(&bb.a1.data, &mut da1.data);
        p.c1.backward(&bb.k1, &da1, grads.map(|g| &mut g.layers[L_C1]), need_input)
    }

    fn run(&self, img: &Image) -> Result<Pass> {
        let scaled = rescale_image(img, self.cfg.short_side)?;
        let (h, w) = img.shape();
        let (sh, sw) = scaled.shape();
        let sx = sw as f64 / w as f64;
        let sy = sh as f64 / h as f64;

        let x0 = image_to_tensor(&scaled);
        let backbone = self.backbone(&x0);
        let rpn = self.rpn(&backbone.a3);
        let props = self.proposals(&rpn, (sh, sw));
        let kept = nms(&props, self.cfg.nms_iou);
        let rois: Vec<BBox> = kept.iter().map(|&i| props[i].0).collect();
        let cls = self.classify(&backbone.a3, &rois);

        let k = self.cfg.num_classes;
        let mut dets: Vec<(usize, Detection)> = kept
            .iter()
            .enumerate()
            .map(|(row, &pi)| {
                let bbox = rois[row].scaled(1.0 / sx, 1.0 / sy).clip(h, w);
                (
                    row,
                    Detection {
                        bbox,
                        class_probs: cls.probs[row * k..(row + 1) * k].to_vec(),
                        objectness: props[pi].1,
                    },
                )
            })
            .collect();
        dets.sort_by(|a, b| b.1.confidence().total_cmp(&a.1.confidence()).then(a.0.cmp(&b.0)));
        dets.truncate(self.cfg.n_max);
        let order = dets.iter().map(|(row, _)| *row).collect();
        Ok(Pass {
            backbone,
            cls,
            order,
            dets: DetectionSet {
                detections: dets.into_iter().map(|(_, d)| d).collect(),
                class_vocab: self.vocab.clone(),
            },
            scaled_shape: (sh, sw),
        })
    }

    fn ensure_trained(&self) -> Result<()> {
        if self.meta.is_none() {
            return Err(Error::Untrained);
        }
        Ok(())
    }

    /// Loss value and `∂loss/∂logits` for terms addressing classifier rows.
    fn class_loss(&self, probs: &[f64], terms: &[LossTerm], row_of: impl Fn(usize) -> usize) -> (f64, Vec<f64>) {
        let k = self.cfg.num_classes;
        let mut dlogits = vec![0.0; probs.len()];
        let mut loss = 0.0;
        for t in terms {
            let row = row_of(t.box_index);
            let p = &probs[row * k..(row + 1) * k];
            let g = p[t.class_index];
            loss += t.weight * super::neg_log_prob(g);
            if g >= PROB_EPS {
                // d(−log softmax_c)/dz = softmax − onehot(c)
                let d = &mut dlogits[row * k..(row + 1) * k];
                for (j, (dj, pj)) in d.iter_mut().zip(p).enumerate() {
                    *dj += t.weight * (pj - if j == t.class_index { 1.0 } else { 0.0 });
                }
            }
        }
        (loss, dlogits)
    }

    fn check_terms(&self, terms: &[LossTerm], n_boxes: usize) -> Result<()> {
        super::LossSpec::new(terms.to_vec()).validate(n_boxes, self.cfg.num_classes)
    }

    /// Classification loss for fixed ROIs on an input already at detector
    /// resolution, with its gradient with respect to that input. `rois` are in
    /// input pixel coordinates and `terms` index into `rois`.
    pub fn roi_class_loss(&self, input: &Image, rois: &[BBox], terms: &[LossTerm]) -> Result<(f64, Image)> {
        self.check_terms(terms, rois.len())?;
        let x0 = image_to_tensor(input);
        let bb = self.backbone(&x0);
        let cls = self.classify(&bb.a3, rois);
        let (loss, dlogits) = self.class_loss(&cls.probs, terms, |b| b);
        let da3 = self.classify_backward(&bb.a3, &cls, &dlogits, None);
        let dx0 = self.backbone_backward(&bb, da3, None, true).expect("input gradient requested");
        Ok((loss, tensor_to_gradient(&dx0)))
    }

    /// Value-only version of [`MiniDetector::roi_class_loss`].
    pub fn roi_class_loss_value(&self, input: &Image, rois: &[BBox], terms: &[LossTerm]) -> Result<f64> {
        self.check_terms(terms, rois.len())?;
        let bb = self.backbone(&image_to_tensor(input));
        let cls = self.classify(&bb.a3, rois);
        Ok(self.class_loss(&cls.probs, terms, |b| b).0)
    }

    /// One training example: RPN objectness/box losses on the full grid and a
    /// label-smoothed classification loss on sampled ROIs. Gradients are
    /// accumulated into `grads`.
    pub(crate) fn train_step(
        &self,
        scaled: &Image,
        gt: &[(BBox, usize)],
        label_smoothing: f64,
        rng: &mut impl Rng,
        grads: &mut Grads,
    ) -> StepLoss {
        let p = &self.params;
        let (sh, sw) = scaled.shape();
        let x0 = image_to_tensor(scaled);
        let bb = self.backbone(&x0);
        let rpn = self.rpn(&bb.a3);

        // --- stage one
        let (gh, gw) = (rpn.out.h, rpn.out.w);
        let mut assigned: Vec<Option<usize>> = vec![None; gh * gw];
        for (g, (b, _)) in gt.iter().enumerate() {
            let (cx, cy) = b.center();
            let i = ((cy / RPN_STRIDE as f64) as usize).min(gh - 1);
            let j = ((cx / RPN_STRIDE as f64) as usize).min(gw - 1);
            assigned[i * gw + j].get_or_insert(g);
        }
        let n_pos = assigned.iter().filter(|a| a.is_some()).count();
        let n_neg = gh * gw - n_pos;
        let mut dout = Tensor::zeros(5, gh, gw);
        let mut loss = StepLoss::default();
        let plane = gh * gw;
        for i in 0..gh {
            for j in 0..gw {
                let cell = i * gw + j;
                let z = rpn.out.at(0, i, j);
                match assigned[cell] {
                    Some(g) => {
                        let n = n_pos as f64;
                        loss.objectness += (softplus(z) - z) / n;
                        dout.data[cell] = (sigmoid(z) - 1.0) / n;
                        let b = gt[g].0;
                        let (ax, ay) = Self::anchor_center(i, j);
                        let (cx, cy) = b.center();
                        let target = [
                            (cx - ax) / ANCHOR_SIZE,
                            (cy - ay) / ANCHOR_SIZE,
                            (b.width() / ANCHOR_SIZE).ln(),
                            (b.height() / ANCHOR_SIZE).ln(),
                        ];
                        for (c, t) in target.iter().enumerate() {
                            let d = rpn.out.at(c + 1, i, j) - t;
                            loss.boxes += BOX_LOSS_WEIGHT * 0.5 * d * d / n;
                            dout.data[(c + 1) * plane + cell] = BOX_LOSS_WEIGHT * d / n;
                        }
                    }
                    None => {
                        let n = n_neg.max(1) as f64;
                        loss.objectness += softplus(z) / n;
                        dout.data[cell] = sigmoid(z) / n;
                    }
                }
            }
        }
        let mut dar = p
            .rpn_out
            .backward(&rpn.ko, &dout, Some(&mut grads.layers[L_RPN_OUT]), true)
            .expect("input gradient requested");
        relu_backward(&rpn.ar.data, &mut dar.data);
        let mut da4 = p
            .rpn
            .backward(&rpn.kr, &dar, Some(&mut grads.layers[L_RPN]), true)
            .expect("input gradient requested");
        relu_backward(&rpn.a4.data, &mut da4.data);
        let mut da3 = p
            .c4
            .backward(&rpn.k4, &da4, Some(&mut grads.layers[L_C4]), true)
            .expect("input gradient requested");

        // --- stage two
        let (rois, labels) = sample_rois(gt, (sh, sw), rng);
        let cls = self.classify(&bb.a3, &rois);
        let k = self.cfg.num_classes;
        let n = rois.len() as f64;
        let mut dlogits = vec![0.0; cls.probs.len()];
        for (r, &label) in labels.iter().enumerate() {
            let probs = &cls.probs[r * k..(r + 1) * k];
            for c in 0..k {
                let target = label_smoothing / k as f64 + if c == label { 1.0 - label_smoothing } else { 0.0 };
                loss.classification -= target * probs[c].max(PROB_EPS).ln() / n;
                dlogits[r * k + c] = (probs[c] - target) / n;
            }
            if cls_argmax(probs) == label {
                loss.correct_rois += 1;
            }
        }
        loss.rois = rois.len();
        let da3_cls = self.classify_backward(&bb.a3, &cls, &dlogits, Some(grads));
        for (a, b) in da3.data.iter_mut().zip(&da3_cls.data) {
            *a += b;
        }
        self.backbone_backward(&bb, da3, Some(grads), false);
        loss
    }

    /// Detections without the trained-weights check (used while training).
    pub(crate) fn detect_unchecked(&self, img: &Image) -> Result<DetectionSet> {
        Ok(self.run(img)?.dets)
    }
}

fn cls_argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct StepLoss {
    pub objectness: f64,
    pub boxes: f64,
    pub classification: f64,
    pub rois: usize,
    pub correct_rois: usize,
}

const JITTERS_PER_OBJECT: usize = 2;
const NEGATIVE_ROIS: usize = 6;

/// Ground-truth boxes, jittered copies (IoU ≥ 0.5) labelled with their class,
/// and random background boxes (IoU < 0.3 with every object).
fn sample_rois(gt: &[(BBox, usize)], shape: (usize, usize), rng: &mut impl Rng) -> (Vec<BBox>, Vec<usize>) {
    let (h, w) = shape;
    let mut rois = Vec::new();
    let mut labels = Vec::new();
    for &(b, class) in gt {
        rois.push(b);
        labels.push(class);
        let mut made = 0;
        for _ in 0..20 {
            if made == JITTERS_PER_OBJECT {
                break;
            }
            let (bw, bh) = (b.width(), b.height());
            let mut jit = |v: f64, s: f64| v + rng.gen_range(-0.2..0.2) * s;
            let cand = BBox::new(jit(b.x1, bw), jit(b.y1, bh), jit(b.x2, bw), jit(b.y2, bh)).clip(h, w);
            if cand.is_valid() && iou_unchecked(&cand, &b) >= 0.5 {
                rois.push(cand);
                labels.push(class);
                made += 1;
            }
        }
    }
    let mut made = 0;
    for _ in 0..60 {
        if made == NEGATIVE_ROIS {
            break;
        }
        let bw = rng.gen_range(10.0..36.0);
        let bh = rng.gen_range(10.0..36.0);
        let x = rng.gen_range(0.0..(w as f64 - bw).max(1.0));
        let y = rng.gen_range(0.0..(h as f64 - bh).max(1.0));
        let cand = BBox::new(x, y, x + bw, y + bh).clip(h, w);
        if cand.is_valid() && gt.iter().all(|(b, _)| iou_unchecked(&cand, b) < 0.3) {
            rois.push(cand);
            labels.push(BACKGROUND);
            made += 1;
        }
    }
    (rois, labels)
}

impl Detector for MiniDetector {
    fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    fn class_vocab(&self) -> &[String] {
        &self.vocab
    }

    fn background_class(&self) -> Option<usize> {
        Some(BACKGROUND)
    }

    fn detect(&self, img: &Image) -> Result<DetectionSet> {
        self.ensure_trained()?;
        self.detect_unchecked(img)
    }

    fn detect_and_differentiate(
        &self,
        img: &Image,
        learning_rate: f64,
        select: &mut LossSelector<'_>,
    ) -> Result<(DetectionSet, Option<Differentiated>)> {
        self.ensure_trained()?;
        let pass = self.run(img)?;
        let Some(spec) = select(&pass.dets)? else {
            return Ok((pass.dets, None));
        };
        spec.validate(pass.dets.len(), self.cfg.num_classes)?;
        let (sh, sw) = pass.scaled_shape;
        let gradient = if spec.is_empty() {
            Image::zeros(sh, sw)
        } else {
            let (_, dlogits) = self.class_loss(&pass.cls.probs, &spec.terms, |b| pass.order[b]);
            let da3 = self.classify_backward(&pass.backbone.a3, &pass.cls, &dlogits, None);
            let dx0 = self
                .backbone_backward(&pass.backbone, da3, None, true)
                .expect("input gradient requested");
            tensor_to_gradient(&dx0)
        };
        let loss = spec.evaluate(&pass.dets)?;
        let plan = GradientPlan::new(gradient, img.shape(), learning_rate)?;
        Ok((pass.dets, Some(Differentiated { loss, plan })))
    }
}
