//! Report rendering from a finished run: tables (CSV and Markdown),
//! histograms (CSV and PNG bar charts) and original/perturbation/adversarial
//! triptychs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};
use log::info;
use maskstrike::attack::{run_all_objects, run_non_targeted, run_targeted, AttackResult, Variant};
use maskstrike::detector::Detector;
use maskstrike::downstream::CaptionReport;
use maskstrike::geometry::Image;
use maskstrike::metrics::{histogram, AttackRecord, MetricsReport};
use maskstrike::scenedata::Scene;
use maskstrike::seed::SeedKey;
use rand::seq::SliceRandom;

use crate::config::ExperimentConfig;
use crate::experiment::{
    load_detector, load_eval_scenes, perturbation_view, read_records, unit_seed, RunManifest, RESULTS_FILE,
};

pub const REPORT_DIR: &str = "report";
const GAP: u32 = 4;

/// Files written by [`render_report`], relative to the report directory.
#[derive(Debug, Clone, Default)]
pub struct ReportOutput {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

/// GitHub-style Markdown table.
pub fn markdown_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| {} |", header.join(" | "));
    let _ = writeln!(s, "|{}", header.iter().map(|_| "---|").collect::<String>());
    for r in rows {
        let _ = writeln!(s, "| {} |", r.join(" | "));
    }
    s
}

/// Bins from the lowest to the highest occupied one, gaps filled with zeros.
fn dense_bins(values: &[f64], width: f64) -> Vec<(f64, usize)> {
    let h = histogram(values, width);
    let (Some(lo), Some(hi)) = (h.keys().next().copied(), h.keys().last().copied()) else {
        return Vec::new();
    };
    (lo..=hi).map(|b| (b as f64 * width, h.get(&b).copied().unwrap_or(0))).collect()
}

/// Plain bar chart: one bar per bin, heights scaled to the largest count.
pub fn bar_chart(counts: &[usize]) -> RgbImage {
    let bar = 10u32;
    let (h, margin) = (120u32, 8u32);
    let w = (counts.len() as u32 * bar).max(60) + 2 * margin;
    let mut img = RgbImage::from_pixel(w, h + 2 * margin, Rgb([255, 255, 255]));
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    for (i, &c) in counts.iter().enumerate() {
        let bh = (c as f64 / max as f64 * h as f64).round() as u32;
        let x0 = margin + i as u32 * bar;
        for x in x0 + 1..x0 + bar - 1 {
            for y in margin + h - bh..margin + h {
                img.put_pixel(x, y, Rgb([52, 101, 164]));
            }
        }
    }
    for x in margin..w - margin {
        img.put_pixel(x, margin + h, Rgb([0, 0, 0]));
    }
    img
}

/// Original | perturbation (amplified around mid-grey) | adversarial.
pub fn triptych(original: &Image, adversarial: &Image) -> RgbImage {
    let panels = [original.to_rgb8(), perturbation_view(original, adversarial).to_rgb8(), adversarial.to_rgb8()];
    let (w, h) = (original.width() as u32, original.height() as u32);
    let mut out = RgbImage::from_pixel(3 * w + 2 * GAP, h, Rgb([255, 255, 255]));
    for (i, p) in panels.iter().enumerate() {
        image::imageops::replace(&mut out, p, (i as u32 * (w + GAP)) as i64, 0);
    }
    out
}

struct HistSpec {
    name: &'static str,
    width: f64,
    values: fn(&AttackRecord) -> Option<f64>,
    successes_only: bool,
}

/// Re-runs the attack behind `r`; every attack is deterministic given its
/// unit seed, so this reproduces the recorded adversarial image.
pub fn rerun(det: &dyn Detector, cfg: &ExperimentConfig, scene: &Scene, r: &AttackRecord) -> Result<AttackResult> {
    let mut acfg = cfg.attack_config(r.variant);
    acfg.seed = unit_seed(cfg.seed, &r.image_id, r.variant);
    let img = &scene.image;
    let res = match (r.variant.strategy(), r.o_pick) {
        (None, _) => run_all_objects(det, img, &acfg)?,
        (Some(_), Some(o)) if r.variant.is_targeted() => {
            let k = r.target.context("targeted record without a target")?;
            acfg.target_class = Some(k);
            run_targeted(det, img, &acfg, o, k)?
        }
        (Some(_), Some(o)) => run_non_targeted(det, img, &acfg, o)?,
        (Some(_), None) => bail!("record for {} has no attacked class", r.image_id),
    };
    Ok(res)
}

fn adversarial_for(
    out_dir: &Path,
    cfg: &ExperimentConfig,
    det: &mut Option<Box<dyn Detector>>,
    scene: &Scene,
    r: &AttackRecord,
) -> Result<Image> {
    if let Some(p) = &r.adversarial_png {
        let path = out_dir.join(p);
        if path.exists() {
            return Ok(Image::load_png(path)?);
        }
    }
    if det.is_none() {
        *det = Some(Box::new(load_detector(cfg)?));
    }
    let d = det.as_deref().expect("loaded above");
    Ok(rerun(d, cfg, scene, r)?.adversarial)
}

/// Renders the report for the run in `out_dir` into `out_dir/report`.
pub fn render_report(out_dir: &Path) -> Result<ReportOutput> {
    let manifest = RunManifest::load(out_dir)?;
    let records = read_records(&out_dir.join(RESULTS_FILE))?;
    if manifest.records == 0 || records.is_empty() {
        bail!("the run in {} has no attack records", out_dir.display());
    }
    let cfg = &manifest.config;
    let dir = out_dir.join(REPORT_DIR);
    fs::create_dir_all(&dir)?;
    let mut out = ReportOutput {
        dir: dir.clone(),
        files: Vec::new(),
    };
    let mut md = String::from("# Attack report\n\n");

    let metrics = MetricsReport::from_records(&records)?;
    let header = metrics.csv_header();
    let rows = metrics.csv_rows();
    metrics.write_csv(File::create(dir.join("metrics.csv"))?)?;
    let table = markdown_table(&header, &rows);
    fs::write(dir.join("metrics.md"), &table)?;
    out.files.extend(["metrics.csv".into(), "metrics.md".into()]);
    let _ = writeln!(md, "## Attack metrics\n\n{table}");

    let captions = CaptionReport::from_records(&records)?;
    if !captions.rows.is_empty() {
        let header: Vec<String> = CaptionReport::csv_header().into_iter().map(String::from).collect();
        let table = markdown_table(&header, &captions.csv_rows());
        captions.write_csv(File::create(dir.join("captions.csv"))?)?;
        fs::write(dir.join("captions.md"), &table)?;
        out.files.extend(["captions.csv".into(), "captions.md".into()]);
        let _ = writeln!(md, "## Caption drift\n\n{table}");
    }

    let specs = [
        HistSpec {
            name: "iterations",
            width: 5.0,
            values: |r| Some(r.iterations as f64),
            successes_only: true,
        },
        HistSpec {
            name: "initial_boxes",
            width: 1.0,
            values: |r| r.o_pick.map(|_| r.initial_boxes as f64),
            successes_only: false,
        },
        HistSpec {
            name: "initial_mean_prob",
            width: cfg.report.prob_bin,
            values: |r| r.initial_mean_prob,
            successes_only: false,
        },
    ];
    let _ = writeln!(md, "## Histograms\n");
    for spec in &specs {
        let csv_name = format!("hist_{}.csv", spec.name);
        let mut w = csv::Writer::from_path(dir.join(&csv_name))?;
        w.write_record(["variant", "bin_start", "bin_end", "count"])?;
        for v in Variant::ALL {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.variant == v && r.attack_ran() && (r.success || !spec.successes_only))
                .filter_map(spec.values)
                .collect();
            let bins = dense_bins(&values, spec.width);
            if bins.is_empty() {
                continue;
            }
            for (start, c) in &bins {
                w.write_record([v.name().to_string(), format!("{start:.6}"), format!("{:.6}", start + spec.width), c.to_string()])?;
            }
            let png = format!("hist_{}_{}.png", spec.name, v.name());
            bar_chart(&bins.iter().map(|b| b.1).collect::<Vec<_>>()).save(dir.join(&png))?;
            let _ = writeln!(md, "- {} / {}: ![]({png})", spec.name, v.name());
            out.files.push(png);
        }
        w.flush()?;
        out.files.push(csv_name);
    }

    let _ = writeln!(md, "\n## Examples\n");
    let scenes: BTreeMap<String, Scene> = load_eval_scenes(cfg)?
        .into_iter()
        .map(|s| (s.annotation.image_id.clone(), s))
        .collect();
    let mut det: Option<Box<dyn Detector>> = None;
    let mut sorted: Vec<&AttackRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.key());
    for v in Variant::ALL {
        let succ: Vec<&AttackRecord> = sorted.iter().copied().filter(|r| r.variant == v && r.success).collect();
        if succ.is_empty() {
            if sorted.iter().any(|r| r.variant == v) {
                let _ = writeln!(md, "- {}: no successful attacks", v.name());
            }
            continue;
        }
        let mut rng = SeedKey::new(cfg.seed).with_str("triptych").with_str(v.name()).rng();
        let n = cfg.report.triptychs.min(succ.len());
        let mut picks: Vec<&AttackRecord> = succ.choose_multiple(&mut rng, n).copied().collect();
        picks.sort_by_key(|r| r.key());
        for r in picks {
            let scene = scenes
                .get(&r.image_id)
                .with_context(|| format!("scene {} is missing from the evaluation data", r.image_id))?;
            let adv = adversarial_for(out_dir, cfg, &mut det, scene, r)?;
            let name = match r.target {
                Some(k) if v.is_targeted() => format!("triptych_{}_{}_k{k:02}.png", v.name(), r.image_id),
                _ => format!("triptych_{}_{}.png", v.name(), r.image_id),
            };
            triptych(&scene.image, &adv).save(dir.join(&name))?;
            let _ = writeln!(
                md,
                "- {} {}: {} -> {} ![]({name})",
                v.name(),
                r.image_id,
                r.original_caption,
                r.adversarial_caption
            );
            out.files.push(name);
        }
    }
    fs::write(dir.join("report.md"), md)?;
    out.files.push("report.md".into());
    info!("report written to {}", dir.display());
    Ok(out)
}
