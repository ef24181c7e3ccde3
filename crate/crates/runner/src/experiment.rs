//! End-to-end experiment: scenes, detector, attacks, per-attack records and
//! aggregate tables.
//!
//! Each finished attack is appended to `results.jsonl` as soon as it is done,
//! so an interrupted run picks up where it stopped. Aggregates are always
//! recomputed from the full record file in canonical order, which makes them
//! independent of worker scheduling.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use maskstrike::attack::{
    compute_box_set_a, run_all_objects, run_non_targeted, run_targeted, sample_targets, select_object, AttackResult,
    FailureCause, Variant,
};
use maskstrike::detector::weights::{load_weights, save_weights, TrainingMeta};
use maskstrike::detector::{train_mini_detector, Detector, MiniDetector};
use maskstrike::downstream::{generate_caption, CaptionReport};
use maskstrike::geometry::{BinaryMask, Image};
use maskstrike::metrics::{
    acac, actc, delta, l2_per_image_size, map_outside_mask, permutation_check, resize_check, ssim, AttackRecord,
    MetricsReport,
};
use maskstrike::scenedata::{generate_dataset, read_scenes, write_scenes, Scene};
use maskstrike::seed::SeedKey;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const DATA_DIR: &str = "data";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const CAPTIONS_CSV: &str = "captions.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_DIR: &str = "images";

/// Gain applied to perturbations when they are drawn around mid-grey.
pub const PERTURBATION_GAIN: f64 = 20.0;

/// What a run produced. Paths are relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub config: ExperimentConfig,
    pub weights: PathBuf,
    pub training: Option<TrainingMeta>,
    pub scenes: usize,
    pub records: usize,
    pub results: PathBuf,
    pub metrics_csv: PathBuf,
    pub metrics_json: PathBuf,
    pub captions_csv: PathBuf,
}

impl RunManifest {
    pub fn load(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Generates the evaluation scenes into `<output_dir>/data`.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(DATA_DIR);
    let scenes = generate_dataset(&cfg.data.scenes)?;
    write_scenes(&scenes, &dir)?;
    info!("wrote {} scenes to {}", scenes.len(), dir.display());
    Ok(dir)
}

/// Trains the bundled detector and saves it to the configured weights path.
pub fn train_detector(cfg: &ExperimentConfig) -> Result<MiniDetector> {
    let det = train_mini_detector(&cfg.training.scenes, &cfg.training.optimizer, cfg.seed)?;
    let path = cfg.weights_path();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    save_weights(&det, &path)?;
    info!("saved weights to {}", path.display());
    Ok(det)
}

pub fn load_detector(cfg: &ExperimentConfig) -> Result<MiniDetector> {
    let path = cfg.weights_path();
    if !path.exists() {
        bail!("weights file {} does not exist; run train-detector first", path.display());
    }
    Ok(load_weights(&path)?)
}

pub fn load_eval_scenes(cfg: &ExperimentConfig) -> Result<Vec<Scene>> {
    match &cfg.data.path {
        Some(dir) => {
            if !dir.is_dir() {
                bail!("data directory {} does not exist", dir.display());
            }
            Ok(read_scenes(dir)?)
        }
        None => Ok(generate_dataset(&cfg.data.scenes)?),
    }
}

/// Reads a record file. A truncated last line (an interrupted write) is
/// dropped and the file is rewritten without it; any other malformed line is
/// an error.
pub fn read_records(path: &Path) -> Result<Vec<AttackRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AttackRecord>(line) {
            Ok(r) => out.push(r),
            Err(e) if i + 1 == lines.len() && !text.ends_with('\n') => {
                warn!("dropping truncated record at the end of {}: {e}", path.display());
                let keep: String = lines[..i].iter().map(|l| format!("{l}\n")).collect();
                fs::write(path, keep)?;
            }
            Err(e) => bail!("{}:{}: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Units of work already present in a record file.
#[derive(Debug, Default)]
struct Done {
    pairs: BTreeSet<(Variant, String)>,
    targeted: BTreeSet<(Variant, String, usize)>,
}

impl Done {
    fn new(records: &[AttackRecord]) -> Self {
        let mut d = Done::default();
        for r in records {
            match r.target {
                Some(k) if r.variant.is_targeted() => {
                    d.targeted.insert((r.variant, r.image_id.clone(), k));
                }
                _ => {
                    d.pairs.insert((r.variant, r.image_id.clone()));
                }
            }
        }
        d
    }
}

struct Appender {
    out: Mutex<BufWriter<File>>,
}

impl Appender {
    fn open(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Appender {
            out: Mutex::new(BufWriter::new(f)),
        })
    }

    fn push(&self, r: &AttackRecord) -> Result<()> {
        let line = serde_json::to_string(r)?;
        let mut w = self.out.lock().expect("appender lock");
        writeln!(w, "{line}")?;
        w.flush()?;
        Ok(())
    }
}

/// Seed for one `(image, variant)` unit.
pub fn unit_seed(global: u64, image_id: &str, variant: Variant) -> u64 {
    SeedKey::new(global).with_str(image_id).with_str(variant.name()).finish()
}

fn skipped_record(image_id: &str, variant: Variant, cause: FailureCause, error: String) -> AttackRecord {
    AttackRecord {
        image_id: image_id.to_string(),
        variant,
        o_pick: None,
        o_pick_name: None,
        target: None,
        success: false,
        failure_cause: Some(cause),
        iterations: 0,
        mask_pixels: 0,
        max_outside_mask: None,
        delta: None,
        l2_image_norm: 0.0,
        ssim: 1.0,
        actc: None,
        acac: None,
        map_outside: None,
        initial_boxes: 0,
        initial_mean_prob: None,
        permutation_success: None,
        resize_success: Vec::new(),
        original_caption: String::new(),
        adversarial_caption: String::new(),
        adversarial_png: None,
        perturbation_png: None,
        error: Some(error),
    }
}

fn skipped_from_error(image_id: &str, variant: Variant, e: maskstrike::Error) -> AttackRecord {
    let cause = match e {
        maskstrike::Error::NothingToAttack => FailureCause::NothingToAttack,
        _ => FailureCause::Error,
    };
    skipped_record(image_id, variant, cause, e.to_string())
}

/// Largest absolute perturbation outside `mask`.
pub fn max_outside(original: &Image, adversarial: &Image, mask: &BinaryMask) -> f64 {
    let mut m: f64 = 0.0;
    for y in 0..original.height() {
        for x in 0..original.width() {
            if !mask.get(y, x) {
                for c in 0..3 {
                    m = m.max((adversarial.get(y, x, c) - original.get(y, x, c)).abs());
                }
            }
        }
    }
    m
}

/// Perturbation drawn as `128 + gain · δ`, so untouched pixels are exactly
/// mid-grey.
pub fn perturbation_view(original: &Image, adversarial: &Image) -> Image {
    Image::from_fn(original.height(), original.width(), |y, x, c| {
        (128.0 + PERTURBATION_GAIN * (adversarial.get(y, x, c) - original.get(y, x, c))).clamp(0.0, 255.0)
    })
}

fn image_stem(r: &AttackResult, image_id: &str) -> String {
    match (r.variant.is_targeted(), r.goal.target()) {
        (true, Some(k)) => format!("{image_id}_k{k:02}"),
        _ => image_id.to_string(),
    }
}

/// Measures one finished attack and runs the controls on it.
pub fn build_record(
    det: &dyn Detector,
    cfg: &ExperimentConfig,
    image_id: &str,
    res: &AttackResult,
    seed: u64,
) -> Result<AttackRecord> {
    let bg = det.background_class();
    let o_pick = res.goal.o_pick();
    let target = res.goal.target();
    let mask_pixels = res.mask.pixel_count();
    let org = &res.original_detections;
    let fin = &res.final_detections;
    let (initial_boxes, initial_mean_prob) = match o_pick {
        Some(o) => {
            let a = compute_box_set_a(org, o);
            let mean = (!a.is_empty()).then(|| a.iter().map(|&i| org.detections[i].prob(o)).sum::<f64>() / a.len() as f64);
            (a.len(), mean)
        }
        None => (org.detections.iter().filter(|d| Some(d.predicted_class()) != bg).count(), None),
    };
    let permutation_success = if res.success && cfg.eval.permutation {
        let s = SeedKey::new(seed).with_str("permutation").with_u64(target.unwrap_or(u64::MAX as usize) as u64);
        Some(permutation_check(det, &res.original, &res.adversarial, &res.goal, &res.mask, s.finish())?)
    } else {
        None
    };
    let resize_success = if res.success {
        cfg.eval
            .resize_scales
            .iter()
            .map(|&s| Ok((s, resize_check(det, &res.adversarial, &res.goal, &res.mask, s)?)))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let (adversarial_png, perturbation_png) = if cfg.eval.save_images {
        let rel = Path::new(IMAGES_DIR).join(res.variant.name());
        fs::create_dir_all(cfg.output_dir.join(&rel))?;
        let stem = image_stem(res, image_id);
        let adv = rel.join(format!("{stem}_adv.png"));
        let pert = rel.join(format!("{stem}_pert.png"));
        res.adversarial.save_png(cfg.output_dir.join(&adv))?;
        perturbation_view(&res.original, &res.adversarial).save_png(cfg.output_dir.join(&pert))?;
        (Some(path_string(&adv)), Some(path_string(&pert)))
    } else {
        (None, None)
    };
    Ok(AttackRecord {
        image_id: image_id.to_string(),
        variant: res.variant,
        o_pick,
        o_pick_name: o_pick.map(|o| det.class_vocab()[o].clone()),
        target,
        success: res.success,
        failure_cause: res.failure_cause,
        iterations: res.iterations_used,
        mask_pixels,
        max_outside_mask: o_pick.map(|_| max_outside(&res.original, &res.adversarial, &res.mask)),
        delta: if mask_pixels > 0 {
            Some(delta(&res.adversarial, &res.original, &res.mask)?)
        } else {
            None
        },
        l2_image_norm: l2_per_image_size(&res.adversarial, &res.original)?,
        ssim: ssim(&res.original, &res.adversarial)?,
        actc: o_pick.map(|o| actc(fin, &res.mask, o)),
        acac: if res.variant.is_targeted() {
            target.and_then(|k| acac(fin, k))
        } else {
            None
        },
        map_outside: map_outside_mask(org, fin, &res.mask, bg),
        initial_boxes,
        initial_mean_prob,
        permutation_success,
        resize_success,
        original_caption: generate_caption(org, bg).join(" "),
        adversarial_caption: generate_caption(fin, bg).join(" "),
        adversarial_png,
        perturbation_png,
        error: None,
    })
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Runs one `(image, variant)` unit, skipping targets already recorded, and
/// hands each record to `emit`.
pub fn attack_unit(
    det: &dyn Detector,
    cfg: &ExperimentConfig,
    scene: &Scene,
    variant: Variant,
    skip_target: &dyn Fn(usize) -> bool,
    emit: &mut dyn FnMut(AttackRecord) -> Result<()>,
) -> Result<()> {
    let image_id = scene.annotation.image_id.as_str();
    let img = &scene.image;
    let seed = unit_seed(cfg.seed, image_id, variant);
    let mut acfg = cfg.attack_config(variant);
    acfg.seed = seed;
    let Some(strategy) = variant.strategy() else {
        return match run_all_objects(det, img, &acfg) {
            Ok(res) => emit(build_record(det, cfg, image_id, &res, seed)?),
            Err(e) => emit(skipped_from_error(image_id, variant, e)),
        };
    };
    let o_pick = match det.detect(img).and_then(|d| select_object(&d, strategy, det.background_class())) {
        Ok(o) => o,
        Err(e) => return emit(skipped_from_error(image_id, variant, e)),
    };
    if !variant.is_targeted() {
        return match run_non_targeted(det, img, &acfg, o_pick) {
            Ok(res) => emit(build_record(det, cfg, image_id, &res, seed)?),
            Err(e) => emit(skipped_from_error(image_id, variant, e)),
        };
    }
    let targets = sample_targets(
        det.class_vocab().len(),
        det.background_class(),
        o_pick,
        cfg.attack.targets_per_image,
        seed,
    );
    for k in targets {
        if skip_target(k) {
            continue;
        }
        acfg.target_class = Some(k);
        match run_targeted(det, img, &acfg, o_pick, k) {
            Ok(res) => emit(build_record(det, cfg, image_id, &res, seed)?)?,
            Err(e) => {
                let mut r = skipped_from_error(image_id, variant, e);
                r.target = Some(k);
                emit(r)?
            }
        }
    }
    Ok(())
}

/// Attacks every scene with every configured variant, appending to the
/// record file under `cfg.output_dir`. Returns all records in the file.
pub fn run_attacks(det: &dyn Detector, cfg: &ExperimentConfig, scenes: &[Scene]) -> Result<Vec<AttackRecord>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(RESULTS_FILE);
    let existing = read_records(&path)?;
    let done = Done::new(&existing);
    if !existing.is_empty() {
        info!("resuming: {} records already in {}", existing.len(), path.display());
    }
    let appender = Appender::open(&path)?;
    let units: Vec<(&Scene, Variant)> = scenes
        .iter()
        .flat_map(|s| cfg.attack.variants.iter().map(move |v| (s, *v)))
        .filter(|(s, v)| !done.pairs.contains(&(*v, s.annotation.image_id.clone())))
        .collect();
    let total = units.len();
    let finished = std::sync::atomic::AtomicUsize::new(0);
    let work = || {
        units.par_iter().try_for_each(|&(scene, variant)| -> Result<()> {
            let id = scene.annotation.image_id.clone();
            let skip = |k: usize| done.targeted.contains(&(variant, id.clone(), k));
            attack_unit(det, cfg, scene, variant, &skip, &mut |r| appender.push(&r))?;
            let n = finished.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            if n % 20 == 0 || n == total {
                info!("{n}/{total} attack units done");
            }
            Ok(())
        })
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?;
    pool.install(work)?;
    drop(appender);
    read_records(&path)
}

/// Recomputes aggregate tables from the record file and writes them.
pub fn evaluate(out_dir: &Path) -> Result<(MetricsReport, Vec<AttackRecord>)> {
    let records = read_records(&out_dir.join(RESULTS_FILE))?;
    if records.is_empty() {
        bail!("no attack records in {}", out_dir.display());
    }
    let report = MetricsReport::from_records(&records)?;
    report.write_csv(File::create(out_dir.join(METRICS_CSV))?)?;
    fs::write(out_dir.join(METRICS_JSON), report.to_json()?)?;
    Ok((report, records))
}

/// Caption metrics over successful attacks, written next to the records.
pub fn caption_eval(out_dir: &Path) -> Result<CaptionReport> {
    let records = read_records(&out_dir.join(RESULTS_FILE))?;
    if records.is_empty() {
        bail!("no attack records in {}", out_dir.display());
    }
    let report = CaptionReport::from_records(&records)?;
    report.write_csv(File::create(out_dir.join(CAPTIONS_CSV))?)?;
    Ok(report)
}

/// Full run with an already loaded detector.
pub fn run_experiment_with(det: &dyn Detector, training: Option<TrainingMeta>, cfg: &ExperimentConfig) -> Result<RunManifest> {
    let scenes = load_eval_scenes(cfg)?;
    let records = run_attacks(det, cfg, &scenes)?;
    evaluate(&cfg.output_dir)?;
    caption_eval(&cfg.output_dir)?;
    let manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        weights: cfg.weights_path(),
        training,
        scenes: scenes.len(),
        records: records.len(),
        results: RESULTS_FILE.into(),
        metrics_csv: METRICS_CSV.into(),
        metrics_json: METRICS_JSON.into(),
        captions_csv: CAPTIONS_CSV.into(),
    };
    fs::write(cfg.output_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads the detector named by `cfg` and runs the whole experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let det = load_detector(cfg)?;
    run_experiment_with(&det, det.training_meta().cloned(), cfg)
}
