//! Procedural multi-object scenes and COCO-style annotation files.
//!
//! A scene is a textured, low-saturation background with 2–6 flat-coloured
//! shapes. Each class is a colour × shape pair. Scene `i` draws from its own
//! PRNG stream keyed by `(seed, i)`, so any subset of scenes can be generated
//! independently (and in any order) with identical results. Placement and
//! rasterization use integer arithmetic only.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, Image};
use crate::seed::SeedKey;
use crate::{Error, Result};

/// Index of the background class in [`class_vocabulary`].
pub const BACKGROUND: usize = 0;
pub const BACKGROUND_NAME: &str = "background";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn rgb(self) -> [i32; 3] {
        match self {
            Color::Red => [205, 40, 40],
            Color::Green => [40, 175, 60],
            Color::Blue => [50, 70, 215],
            Color::Yellow => [225, 205, 40],
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyphen-joined class name, e.g. `red-circle`.
pub fn class_name(color: Color, shape: Shape) -> String {
    format!("{}-{}", color.name(), shape.name())
}

/// `background` followed by the 12 colour × shape classes (colour-major).
pub fn class_vocabulary() -> Vec<String> {
    let mut v = vec![BACKGROUND_NAME.to_string()];
    for color in Color::ALL {
        for shape in Shape::ALL {
            v.push(class_name(color, shape));
        }
    }
    v
}

pub fn class_index(color: Color, shape: Shape) -> usize {
    let ci = Color::ALL.iter().position(|&c| c == color).expect("known colour");
    let si = Shape::ALL.iter().position(|&s| s == shape).expect("known shape");
    1 + ci * Shape::ALL.len() + si
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundConfig {
    /// Range of the per-scene base grey level.
    pub base_level: (u8, u8),
    /// Maximum per-channel tint added to the base level.
    pub tint: u8,
    /// Amplitude of the smooth blob texture.
    pub blob_amplitude: u8,
    /// Spacing of the blob-texture control grid, in pixels.
    pub blob_cell: u32,
    /// Amplitude of per-pixel grain.
    pub grain: u8,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            base_level: (70, 180),
            tint: 12,
            blob_amplitude: 24,
            blob_cell: 24,
            grain: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    /// `(height, width)`
    pub canvas: (usize, usize),
    /// Inclusive range of objects per scene.
    pub objects_per_scene: (usize, usize),
    /// Inclusive range of object side lengths in pixels.
    pub object_size: (u32, u32),
    /// Minimum free gap between objects, in pixels.
    pub min_gap: u32,
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    pub background: BackgroundConfig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_scenes: 1000,
            canvas: (160, 224),
            objects_per_scene: (2, 6),
            object_size: (16, 40),
            min_gap: 4,
            shapes: Shape::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
            background: BackgroundConfig::default(),
            seed: 0,
        }
    }
}

const PLACEMENT_RETRIES: usize = 200;

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        let (lo, hi) = self.objects_per_scene;
        let (smin, smax) = self.object_size;
        let bad = |m: String| Err(Error::Config(m));
        if lo > hi || hi == 0 {
            return bad(format!("objects_per_scene range {lo}..={hi} is empty"));
        }
        if smin > smax || smin * smin < 100 {
            return bad(format!(
                "object_size range {smin}..={smax} is empty or allows areas below 100 px"
            ));
        }
        if smax as usize > h.min(w) {
            return bad(format!("objects of size {smax} do not fit a {h}x{w} canvas"));
        }
        if self.shapes.is_empty() || self.colors.is_empty() {
            return bad("shape and colour sets must be nonempty".into());
        }
        let (blo, bhi) = self.background.base_level;
        if blo > bhi {
            return bad(format!("background base level range {blo}..={bhi} is empty"));
        }
        if self.background.blob_cell == 0 {
            return bad("blob_cell must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    pub bbox: BBox,
    pub class_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub image_id: String,
    pub boxes: Vec<AnnotatedBox>,
    /// `(height, width)`
    pub canvas: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub annotation: SceneAnnotation,
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

fn rand_i32(rng: &mut impl Rng, amp: u8) -> i32 {
    let a = i32::from(amp);
    rng.gen_range(-a..=a)
}

fn paint_background(cfg: &DatasetConfig, rng: &mut impl Rng) -> Vec<i32> {
    let (h, w) = cfg.canvas;
    let bg = &cfg.background;
    let base = i32::from(rng.gen_range(bg.base_level.0..=bg.base_level.1));
    let tint = [rand_i32(rng, bg.tint), rand_i32(rng, bg.tint), rand_i32(rng, bg.tint)];

    // Smooth blobs: random control values on a coarse grid, bilinearly
    // interpolated in fixed point (weights in 1/cell units).
    let cell = bg.blob_cell as usize;
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<i32> = (0..gh * gw).map(|_| rand_i32(rng, bg.blob_amplitude)).collect();
    let c = cell as i32;

    let mut px = vec![0i32; h * w * 3];
    for y in 0..h {
        let gy = y / cell;
        let fy = (y % cell) as i32;
        for x in 0..w {
            let gx = x / cell;
            let fx = (x % cell) as i32;
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(gy, gx) * (c - fx) + g(gy, gx + 1) * fx;
            let bot = g(gy + 1, gx) * (c - fx) + g(gy + 1, gx + 1) * fx;
            let blob = (top * (c - fy) + bot * fy).div_euclid(c * c);
            for ch in 0..3 {
                px[(y * w + x) * 3 + ch] = base + tint[ch] + blob + rand_i32(rng, bg.grain);
            }
        }
    }
    px
}

/// Pixel-centre membership test in doubled coordinates relative to the
/// object's top-left corner; `u, v ∈ {1, 3, …, 2s − 1}`.
fn inside(shape: Shape, u: i64, v: i64, s: i64) -> bool {
    match shape {
        Shape::Square => true,
        Shape::Circle => (u - s) * (u - s) + (v - s) * (v - s) <= s * s,
        // apex at the top centre, base along the bottom edge
        Shape::Triangle => 2 * (u - s).abs() <= v,
    }
}

struct Placed {
    x: u32,
    y: u32,
    size: u32,
    color: Color,
    shape: Shape,
}

fn overlaps(a: &Placed, x: u32, y: u32, s: u32, gap: u32) -> bool {
    let (ax0, ay0, ax1, ay1) = (a.x, a.y, a.x + a.size, a.y + a.size);
    let (bx0, by0, bx1, by1) = (x, y, x + s, y + s);
    !(bx0 >= ax1 + gap || ax0 >= bx1 + gap || by0 >= ay1 + gap || ay0 >= by1 + gap)
}

/// Generates scene `index` of the dataset described by `cfg`.
///
/// Even-indexed scenes with at least two objects repeat the first object's
/// class, so at least half of any dataset has a repeated class.
pub fn generate_scene(cfg: &DatasetConfig, index: usize) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = SeedKey::new(cfg.seed).with_str("scene").with_u64(index as u64).rng();
    let (h, w) = cfg.canvas;
    let mut px = paint_background(cfg, &mut rng);

    let n = rng.gen_range(cfg.objects_per_scene.0..=cfg.objects_per_scene.1);
    let mut placed: Vec<Placed> = Vec::with_capacity(n);
    for i in 0..n {
        let (color, shape) = if i == 1 && index % 2 == 0 {
            (placed[0].color, placed[0].shape)
        } else {
            (
                cfg.colors[rng.gen_range(0..cfg.colors.len())],
                cfg.shapes[rng.gen_range(0..cfg.shapes.len())],
            )
        };
        let mut spot = None;
        for _ in 0..PLACEMENT_RETRIES {
            let s = rng.gen_range(cfg.object_size.0..=cfg.object_size.1);
            let x = rng.gen_range(0..=(w as u32 - s));
            let y = rng.gen_range(0..=(h as u32 - s));
            if placed.iter().all(|p| !overlaps(p, x, y, s, cfg.min_gap)) {
                spot = Some((x, y, s));
                break;
            }
        }
        let Some((x, y, size)) = spot else {
            return Err(Error::Infeasible(format!(
                "scene {index}: could not place object {} of {n} after {PLACEMENT_RETRIES} tries",
                i + 1
            )));
        };
        placed.push(Placed {
            x,
            y,
            size,
            color,
            shape,
        });
    }

    let mut boxes = Vec::with_capacity(n);
    for p in &placed {
        let rgb = p.color.rgb();
        let jitter = [rand_i32(&mut rng, 20), rand_i32(&mut rng, 20), rand_i32(&mut rng, 20)];
        let s = i64::from(p.size);
        for yy in 0..p.size {
            for xx in 0..p.size {
                let u = 2 * i64::from(xx) + 1;
                let v = 2 * i64::from(yy) + 1;
                if !inside(p.shape, u, v, s) {
                    continue;
                }
                let shade = rand_i32(&mut rng, 6);
                let at = ((p.y + yy) as usize * w + (p.x + xx) as usize) * 3;
                for ch in 0..3 {
                    px[at + ch] = rgb[ch] + jitter[ch] + shade;
                }
            }
        }
        boxes.push(AnnotatedBox {
            bbox: BBox::new(
                f64::from(p.x),
                f64::from(p.y),
                f64::from(p.x + p.size),
                f64::from(p.y + p.size),
            ),
            class_name: class_name(p.color, p.shape),
        });
    }

    let data = px.into_iter().map(|v| f64::from(v.clamp(0, 255))).collect();
    Ok(Scene {
        image: Image::from_vec(h, w, data)?,
        annotation: SceneAnnotation {
            image_id: scene_id(index),
            boxes,
            canvas: (h, w),
        },
    })
}

/// Generates all `cfg.n_scenes` scenes.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    (0..cfg.n_scenes).map(|i| generate_scene(cfg, i)).collect()
}

/// Writes scenes as `<image_id>.png` in `dir` plus `annotations.json`.
pub fn write_scenes(scenes: &[Scene], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in scenes {
        s.image.save_png(dir.join(format!("{}.png", s.annotation.image_id)))?;
    }
    let anns: Vec<_> = scenes.iter().map(|s| s.annotation.clone()).collect();
    write_annotations(&anns, &dir.join(ANNOTATION_FILE))
}

pub const ANNOTATION_FILE: &str = "annotations.json";

/// Loads a directory written by [`write_scenes`].
pub fn read_scenes(dir: &Path) -> Result<Vec<Scene>> {
    read_annotations(&dir.join(ANNOTATION_FILE))?
        .into_iter()
        .map(|annotation| {
            let image = Image::load_png(dir.join(format!("{}.png", annotation.image_id)))?;
            if image.shape() != annotation.canvas {
                return Err(Error::Parse {
                    record: annotation.image_id.clone(),
                    message: format!(
                        "image is {:?} but the annotation declares {:?}",
                        image.shape(),
                        annotation.canvas
                    ),
                });
            }
            Ok(Scene { image, annotation })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    height: usize,
    width: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    area: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Writes COCO-style JSON: `images`, `annotations` with `[x, y, w, h]` boxes,
/// and `categories` (ids follow [`class_vocabulary`] indices).
pub fn write_annotations(annotations: &[SceneAnnotation], path: &Path) -> Result<()> {
    let vocab = class_vocabulary();
    let mut file = CocoFile {
        images: Vec::with_capacity(annotations.len()),
        annotations: Vec::new(),
        categories: vocab
            .iter()
            .enumerate()
            .skip(1)
            .map(|(id, name)| CocoCategory {
                id: id as u64,
                name: name.clone(),
            })
            .collect(),
    };
    for (img_idx, ann) in annotations.iter().enumerate() {
        file.images.push(CocoImage {
            id: img_idx as u64,
            file_name: format!("{}.png", ann.image_id),
            height: ann.canvas.0,
            width: ann.canvas.1,
        });
        for b in &ann.boxes {
            let cat = vocab
                .iter()
                .position(|n| *n == b.class_name)
                .filter(|&i| i != BACKGROUND)
                .ok_or_else(|| Error::InvalidInput(format!("unknown class name {:?}", b.class_name)))?;
            file.annotations.push(CocoAnnotation {
                id: file.annotations.len() as u64,
                image_id: img_idx as u64,
                category_id: cat as u64,
                bbox: b.bbox.to_xywh(),
                area: b.bbox.area(),
            });
        }
    }
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<SceneAnnotation>> {
    let text = fs::read_to_string(path)?;
    let file: CocoFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        record: path.display().to_string(),
        message: e.to_string(),
    })?;
    let categories: BTreeMap<u64, String> = file.categories.into_iter().map(|c| (c.id, c.name)).collect();
    let mut by_id: BTreeMap<u64, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(file.images.len());
    for (i, img) in file.images.iter().enumerate() {
        let image_id = img
            .file_name
            .strip_suffix(".png")
            .ok_or_else(|| Error::Parse {
                record: format!("images[{i}]"),
                message: format!("file_name {:?} is not a .png", img.file_name),
            })?
            .to_string();
        if by_id.insert(img.id, out.len()).is_some() {
            return Err(Error::Parse {
                record: format!("images[{i}]"),
                message: format!("duplicate image id {}", img.id),
            });
        }
        out.push(SceneAnnotation {
            image_id,
            boxes: Vec::new(),
            canvas: (img.height, img.width),
        });
    }
    for (i, a) in file.annotations.iter().enumerate() {
        let record = || format!("annotations[{i}] (id {})", a.id);
        let &slot = by_id.get(&a.image_id).ok_or_else(|| Error::Parse {
            record: record(),
            message: format!("unknown image_id {}", a.image_id),
        })?;
        let class_name = categories.get(&a.category_id).ok_or_else(|| Error::Parse {
            record: record(),
            message: format!("unknown category_id {}", a.category_id),
        })?;
        let [x, y, w, h] = a.bbox;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Parse {
                record: record(),
                message: format!("non-positive box size {w}x{h}"),
            });
        }
        out[slot].boxes.push(AnnotatedBox {
            bbox: BBox::from_xywh(x, y, w, h),
            class_name: class_name.clone(),
        });
    }
    Ok(out)
}
