//! Synthetic scenes with part-structured objects, proposal generation and
//! manifest I/O.
//!
//! Every object class is a composition of primitive parts. Circles appear in
//! three of the four built-in classes, and traffic lights carry a variable
//! number of them. Each image belongs to a scene type that sets the
//! background tint and, through a co-occurrence matrix, which classes it may
//! contain.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::jsonl::{read_jsonl, write_jsonl};
use crate::par::Exec;
use crate::pipeline::BoundingBox;
use crate::rng::{self, Rng as ChaRng};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    /// Vertical bar with 1 to 4 circular bulbs.
    TrafficLight,
    /// Horizontal bar with a circle at each end.
    Dumbbell,
    /// Filled body with two circular wheels below it.
    Cart,
    /// Rectangular outline with a grid of square windows.
    Building,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 4] = [
        ObjectKind::TrafficLight,
        ObjectKind::Dumbbell,
        ObjectKind::Cart,
        ObjectKind::Building,
    ];

    /// Width and height of the undeformed template.
    pub fn template_size(self) -> (usize, usize) {
        match self {
            ObjectKind::TrafficLight => (10, 24),
            ObjectKind::Dumbbell => (24, 10),
            ObjectKind::Cart => (22, 16),
            ObjectKind::Building => (18, 22),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartKind {
    Bar,
    Circle,
    Body,
    Frame,
    Window,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Primitive {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
    Frame { x0: f64, y0: f64, x1: f64, y1: f64, t: f64 },
}

impl Primitive {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Primitive::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Primitive::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Primitive::Frame { x0, y0, x1, y1, t } => {
                let outer = x >= x0 && x < x1 && y >= y0 && y < y1;
                let inner = x >= x0 + t && x < x1 - t && y >= y0 + t && y < y1 - t;
                outer && !inner
            }
        }
    }

    fn translated(self, dx: f64, dy: f64) -> Self {
        match self {
            Primitive::Rect { x0, y0, x1, y1 } => Primitive::Rect {
                x0: x0 + dx,
                y0: y0 + dy,
                x1: x1 + dx,
                y1: y1 + dy,
            },
            Primitive::Circle { cx, cy, r } => Primitive::Circle {
                cx: cx + dx,
                cy: cy + dy,
                r,
            },
            Primitive::Frame { x0, y0, x1, y1, t } => Primitive::Frame {
                x0: x0 + dx,
                y0: y0 + dy,
                x1: x1 + dx,
                y1: y1 + dy,
                t,
            },
        }
    }
}

/// One part of a rendered object. `offset` is the part's displacement from
/// its anchor in pixels, `[dx, dy]`; root parts never move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartRecord {
    pub kind: PartKind,
    pub offset: [i64; 2],
}

/// Binary mask of one rendered object, cropped to its tight extent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sprite {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub parts: Vec<PartRecord>,
}

fn parts_of(kind: ObjectKind, rng: &mut ChaRng, vary_counts: bool) -> Vec<(PartKind, Primitive, bool)> {
    let rect = |x0, y0, x1, y1| Primitive::Rect { x0, y0, x1, y1 };
    let circle = |cx, cy, r| Primitive::Circle { cx, cy, r };
    match kind {
        ObjectKind::TrafficLight => {
            let n = if vary_counts { rng.gen_range(1..=4) } else { 3 };
            let mut v = vec![(PartKind::Bar, rect(4.0, 0.0, 6.0, 24.0), false)];
            v.extend((0..n).map(|i| (PartKind::Circle, circle(5.0, 3.5 + 5.5 * i as f64, 2.5), true)));
            v
        }
        ObjectKind::Dumbbell => vec![
            (PartKind::Bar, rect(3.0, 4.0, 21.0, 6.0), false),
            (PartKind::Circle, circle(4.0, 5.0, 3.5), true),
            (PartKind::Circle, circle(20.0, 5.0, 3.5), true),
        ],
        ObjectKind::Cart => vec![
            (PartKind::Body, rect(0.0, 0.0, 22.0, 10.0), false),
            (PartKind::Circle, circle(5.0, 12.5, 3.0), true),
            (PartKind::Circle, circle(17.0, 12.5, 3.0), true),
        ],
        ObjectKind::Building => {
            let rows = if vary_counts { rng.gen_range(1..=3) } else { 3 };
            let mut v = vec![(
                PartKind::Frame,
                Primitive::Frame {
                    x0: 0.0,
                    y0: 0.0,
                    x1: 18.0,
                    y1: 22.0,
                    t: 2.0,
                },
                false,
            )];
            for r in 0..rows {
                for c in 0..2 {
                    let (x, y) = (4.0 + 7.0 * c as f64, 4.0 + 6.0 * r as f64);
                    v.push((PartKind::Window, rect(x, y, x + 3.0, y + 3.0), true));
                }
            }
            v
        }
    }
}

/// Renders one object with every movable part displaced by an independent
/// integer offset in `[-jitter, jitter]^2`.
pub fn render_object(kind: ObjectKind, jitter: usize, vary_counts: bool, rng: &mut ChaRng) -> Sprite {
    let parts = parts_of(kind, rng, vary_counts);
    let r = jitter as i64;
    let mut placed = Vec::with_capacity(parts.len());
    let mut records = Vec::with_capacity(parts.len());
    for (pk, prim, movable) in parts {
        let (dx, dy) = if movable && r > 0 {
            (rng.gen_range(-r..=r), rng.gen_range(-r..=r))
        } else {
            (0, 0)
        };
        placed.push(prim.translated(dx as f64, dy as f64));
        records.push(PartRecord {
            kind: pk,
            offset: [dx, dy],
        });
    }
    let (tw, th) = kind.template_size();
    let margin = jitter + 4;
    let (cw, ch) = (tw + 2 * margin, th + 2 * margin);
    let m = margin as f64;
    let mut canvas = vec![false; cw * ch];
    for y in 0..ch {
        for x in 0..cw {
            let (px, py) = (x as f64 + 0.5 - m, y as f64 + 0.5 - m);
            canvas[y * cw + x] = placed.iter().any(|p| p.contains(px, py));
        }
    }
    let (mut x0, mut y0, mut x1, mut y1) = (cw, ch, 0, 0);
    for y in 0..ch {
        for x in 0..cw {
            if canvas[y * cw + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    let (w, h) = (x1 - x0, y1 - y0);
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            mask[y * w + x] = canvas[(y + y0) * cw + x + x0];
        }
    }
    Sprite {
        width: w,
        height: h,
        mask,
        parts: records,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// 1 (grey) or 3 (RGB).
    pub channels: usize,
    /// Class id `k` renders as `classes[k]`.
    pub classes: Vec<ObjectKind>,
    pub scene_types: usize,
    /// `cooccurrence[s][k]`: relative weight of class `k` in scene type `s`.
    /// A zero entry forbids the class in that scene.
    pub cooccurrence: Vec<Vec<f64>>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Bound on every part displacement, in pixels.
    pub jitter_radius: usize,
    /// Random bulb and window counts.
    pub vary_part_counts: bool,
    /// Amplitude of uniform per-pixel noise, in `[0, 1]` intensity units.
    pub noise: f64,
    /// Placement attempts per object, and layout restarts per image.
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            channels: 3,
            classes: ObjectKind::ALL.to_vec(),
            scene_types: 3,
            cooccurrence: vec![vec![0.4, 0.2, 0.2, 0.2], vec![0.25, 0.25, 0.25, 0.25], vec![0.0, 0.3, 0.35, 0.35]],
            min_objects: 1,
            max_objects: 3,
            jitter_radius: 2,
            vary_part_counts: true,
            noise: 0.08,
            max_retries: 200,
        }
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.classes.is_empty() || self.scene_types == 0 {
            return Err(Error::invalid("need at least one class and one scene type"));
        }
        if self.cooccurrence.len() != self.scene_types || self.cooccurrence.iter().any(|r| r.len() != self.classes.len()) {
            return Err(Error::invalid(format!(
                "co-occurrence matrix must be {}x{}",
                self.scene_types,
                self.classes.len()
            )));
        }
        if self.cooccurrence.iter().flatten().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("co-occurrence weights must be finite and non-negative"));
        }
        for k in 0..self.classes.len() {
            if self.cooccurrence.iter().all(|r| r[k] == 0.0) {
                return Err(Error::invalid(format!("class {k} is allowed in no scene type")));
            }
        }
        if self.max_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::invalid("need 1 <= max_objects and min_objects <= max_objects"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid("noise must lie in [0, 1]"));
        }
        for kind in &self.classes {
            let (w, h) = kind.template_size();
            let pad = 2 * (self.jitter_radius + 4);
            if w + pad > self.width || h + pad > self.height {
                return Err(Error::invalid(format!(
                    "{kind:?} does not fit a {}x{} image",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }

    /// Background colour of a scene type.
    pub fn background(&self, scene: usize) -> Vec<f64> {
        if self.channels == 1 {
            let denom = (self.scene_types.max(2) - 1) as f64;
            return vec![0.15 + 0.35 * scene as f64 / denom];
        }
        let level = 0.05 * (scene / 3) as f64;
        (0..3).map(|c| if scene % 3 == c { 0.5 + level } else { 0.2 + level }).collect()
    }
}

pub const FOREGROUND: f64 = 0.92;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRequest {
    pub name: String,
    pub images: usize,
    /// Exact number of instances of each class.
    pub instances_per_class: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub scene: SceneSpec,
    pub splits: Vec<SplitRequest>,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Splits named `train` and `val` with instances spread evenly over the
    /// classes at two objects per image on average.
    pub fn train_val(scene: SceneSpec, train: usize, val: usize, seed: u64) -> Self {
        let k = scene.num_classes();
        let per = |n: usize| (0..k).map(|c| 2 * n / k + usize::from(c < 2 * n % k)).collect();
        GeneratorConfig {
            splits: vec![
                SplitRequest {
                    name: "train".into(),
                    images: train,
                    instances_per_class: per(train),
                },
                SplitRequest {
                    name: "val".into(),
                    images: val,
                    instances_per_class: per(val),
                },
            ],
            scene,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    pub class_id: usize,
    pub bbox: BoundingBox,
    pub parts: Vec<PartRecord>,
}

/// An 8-bit image stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: u64,
    pub scene_type: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub objects: Vec<PlacedObject>,
}

impl SyntheticImage {
    /// `[C, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        pixels_to_tensor(&self.pixels, self.channels, self.height, self.width)
    }

    pub fn save_pnm(&self, path: &Path) -> Result<()> {
        write_pnm(path, &self.pixels, self.width, self.height, self.channels)
    }
}

fn pixels_to_tensor(px: &[u8], c: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(&[c, h, w]);
    let d = t.data_mut();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                d[(ch * h + y) * w + x] = px[(y * w + x) * c + ch] as f64 / 255.0;
            }
        }
    }
    t
}

/// Writes `pixels` as binary PPM (`channels == 3`) or PGM (`channels == 1`).
pub fn write_pnm(path: &Path, pixels: &[u8], width: usize, height: usize, channels: usize) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    let (subtype, color) = match channels {
        3 => (PnmSubtype::Pixmap(SampleEncoding::Binary), image::ExtendedColorType::Rgb8),
        1 => (PnmSubtype::Graymap(SampleEncoding::Binary), image::ExtendedColorType::L8),
        c => return Err(Error::invalid(format!("cannot write {c}-channel image"))),
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    PnmEncoder::new(&mut w)
        .with_subtype(subtype)
        .encode(pixels, width as u32, height as u32, color)
        .map_err(|e| Error::malformed(path.display().to_string(), e))
}

/// Reads a PPM/PGM file into a `[channels, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::malformed(path.display().to_string(), e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = match channels {
        3 => img.to_rgb8().into_raw(),
        1 => img.to_luma8().into_raw(),
        c => return Err(Error::invalid(format!("cannot load {c}-channel image"))),
    };
    Ok(pixels_to_tensor(&px, channels, h, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    /// Relative to the manifest's directory.
    pub path: String,
    pub scene_type: usize,
    pub objects: Vec<ObjectRecord>,
}

/// One split. Records are stored as JSON lines; the split name and the
/// generator configuration live in a sidecar `*.meta.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub generator: GeneratorConfig,
    pub records: Vec<ImageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestMeta {
    split: String,
    generator: GeneratorConfig,
}

pub fn meta_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("meta.json")
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("manifest_{split}.jsonl"))
}

impl DatasetManifest {
    pub fn ground_truth(&self) -> crate::eval::GroundTruthSet {
        let mut gts = crate::eval::GroundTruthSet::default();
        for r in &self.records {
            gts.insert(
                r.id,
                r.objects
                    .iter()
                    .map(|o| crate::eval::GtObject {
                        bbox: o.bbox,
                        class_id: o.class_id,
                    })
                    .collect(),
            );
        }
        gts
    }

    /// Schema checks that need no file system access.
    pub fn validate(&self) -> Result<()> {
        let scene = &self.generator.scene;
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id) {
                return Err(Error::Validation(format!(
                    "image id {} appears twice in split '{}'",
                    r.id, self.split
                )));
            }
            if r.scene_type >= scene.scene_types {
                return Err(Error::Validation(format!("image {} has scene type {}", r.id, r.scene_type)));
            }
            for o in &r.objects {
                if o.class_id >= scene.num_classes() {
                    return Err(Error::Validation(format!("image {} has class {}", r.id, o.class_id)));
                }
                let b = o.bbox;
                if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > scene.width as f64 || b.y2 > scene.height as f64 {
                    return Err(Error::Validation(format!("image {} has an object outside the image: {b:?}", r.id)));
                }
            }
        }
        Ok(())
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    write_jsonl(path, &manifest.records)?;
    let meta = ManifestMeta {
        split: manifest.split.clone(),
        generator: manifest.generator.clone(),
    };
    let mp = meta_path(path);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::malformed(mp.display().to_string(), e))?;
    fs::write(&mp, text + "\n").map_err(|e| Error::io(&mp, e))
}

/// Loads and validates a manifest, including that every image file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mp = meta_path(path);
    if !mp.exists() {
        return Err(Error::MissingFile(mp));
    }
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: ManifestMeta = serde_json::from_str(&text).map_err(|e| Error::malformed(mp.display().to_string(), e))?;
    let records: Vec<ImageRecord> = read_jsonl(path)?;
    let m = DatasetManifest {
        split: meta.split,
        generator: meta.generator,
        records,
    };
    m.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    for r in &m.records {
        let p = base.join(&r.path);
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
    }
    Ok(m)
}

/// No image id or path may appear in two splits.
pub fn validate_splits(manifests: &[DatasetManifest]) -> Result<()> {
    let mut owner: BTreeMap<u64, &str> = BTreeMap::new();
    let mut paths: BTreeMap<&str, &str> = BTreeMap::new();
    for m in manifests {
        for r in &m.records {
            if let Some(prev) = owner.insert(r.id, &m.split) {
                return Err(Error::Validation(format!("image {} is in splits '{prev}' and '{}'", r.id, m.split)));
            }
            if let Some(prev) = paths.insert(&r.path, &m.split) {
                return Err(Error::Validation(format!(
                    "file {} is in splits '{prev}' and '{}'",
                    r.path, m.split
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub manifest: DatasetManifest,
    pub images: Vec<SyntheticImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub splits: Vec<SplitData>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&SplitData> {
        self.splits
            .iter()
            .find(|s| s.manifest.split == name)
            .ok_or_else(|| Error::invalid(format!("no split named '{name}'")))
    }

    /// Writes images under `dir/images/<split>/` and one manifest per split.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for s in &self.splits {
            let img_dir = dir.join("images").join(&s.manifest.split);
            fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
            for (img, rec) in s.images.iter().zip(&s.manifest.records) {
                img.save_pnm(&dir.join(&rec.path))?;
            }
            save_manifest(&s.manifest, &manifest_path(dir, &s.manifest.split))?;
        }
        Ok(())
    }
}

struct Layout {
    id: u64,
    scene: usize,
    classes: Vec<usize>,
}

fn plan_split(spec: &SceneSpec, req: &SplitRequest, first_id: u64, rng: &mut ChaRng) -> Result<Vec<Layout>> {
    let k = spec.num_classes();
    if req.instances_per_class.len() != k {
        return Err(Error::invalid(format!(
            "split '{}' lists {} class counts for {k} classes",
            req.name,
            req.instances_per_class.len()
        )));
    }
    if req.images == 0 {
        return Err(Error::invalid(format!("split '{}' needs at least one image", req.name)));
    }
    let total: usize = req.instances_per_class.iter().sum();
    let (lo, hi) = (req.images * spec.min_objects, req.images * spec.max_objects);
    if total < lo || total > hi {
        return Err(Error::invalid(format!(
            "split '{}': {total} instances cannot fill {} images with {}..={} objects each",
            req.name, req.images, spec.min_objects, spec.max_objects
        )));
    }
    let mut counts = vec![spec.min_objects; req.images];
    let mut open: Vec<usize> = (0..req.images).filter(|&i| counts[i] < spec.max_objects).collect();
    for _ in lo..total {
        let j = rng.gen_range(0..open.len());
        let i = open[j];
        counts[i] += 1;
        if counts[i] == spec.max_objects {
            open.swap_remove(j);
        }
    }
    let mut pool: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, req.instances_per_class[c])).collect();
    pool.shuffle(rng);
    let mut out = Vec::with_capacity(req.images);
    let mut at = 0;
    for (i, &n) in counts.iter().enumerate() {
        let classes = pool[at..at + n].to_vec();
        at += n;
        let weights: Vec<f64> = (0..spec.scene_types)
            .map(|s| classes.iter().map(|&c| spec.cooccurrence[s][c]).product())
            .collect();
        let scene = WeightedIndex::new(&weights)
            .map_err(|_| Error::Validation(format!("no scene type admits the class set {classes:?}")))?
            .sample(rng);
        out.push(Layout {
            id: first_id + i as u64,
            scene,
            classes,
        });
    }
    Ok(out)
}

fn render_image(spec: &SceneSpec, layout: &Layout, seed: u64) -> Result<SyntheticImage> {
    let mut rng = rng::rng_indexed(seed, "render", layout.id);
    let sprites: Vec<Sprite> = layout
        .classes
        .iter()
        .map(|&c| render_object(spec.classes[c], spec.jitter_radius, spec.vary_part_counts, &mut rng))
        .collect();
    let mut boxes: Vec<(usize, usize, usize, usize)> = Vec::new();
    'restart: for _ in 0..spec.max_retries.max(1) {
        boxes.clear();
        for s in &sprites {
            let mut placed = false;
            for _ in 0..spec.max_retries.max(1) {
                let x = rng.gen_range(0..=spec.width - s.width);
                let y = rng.gen_range(0..=spec.height - s.height);
                let clear = boxes
                    .iter()
                    .all(|&(bx, by, bw, bh)| x + s.width < bx || bx + bw < x || y + s.height < by || by + bh < y);
                if clear {
                    boxes.push((x, y, s.width, s.height));
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        break;
    }
    if boxes.len() != sprites.len() {
        return Err(Error::Validation(format!(
            "could not place {} objects in image {} after {} attempts",
            sprites.len(),
            layout.id,
            spec.max_retries
        )));
    }
    let (w, h, c) = (spec.width, spec.height, spec.channels);
    let bg = spec.background(layout.scene);
    let mut canvas: Vec<f64> = (0..w * h).flat_map(|_| bg.iter().copied()).collect();
    let mut objects = Vec::with_capacity(sprites.len());
    for ((s, &(bx, by, bw, bh)), &class_id) in sprites.iter().zip(&boxes).zip(&layout.classes) {
        for y in 0..bh {
            for x in 0..bw {
                if s.mask[y * bw + x] {
                    let base = ((by + y) * w + bx + x) * c;
                    canvas[base..base + c].iter_mut().for_each(|v| *v = FOREGROUND);
                }
            }
        }
        objects.push(PlacedObject {
            class_id,
            bbox: BoundingBox::new(bx as f64, by as f64, (bx + bw) as f64, (by + bh) as f64)?,
            parts: s.parts.clone(),
        });
    }
    let pixels = canvas
        .into_iter()
        .map(|v| {
            let n = if spec.noise > 0.0 {
                rng.gen_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Ok(SyntheticImage {
        id: layout.id,
        scene_type: layout.scene,
        width: w,
        height: h,
        channels: c,
        pixels,
        objects,
    })
}

/// Generates every split. Layouts are planned sequentially from the seed;
/// images render in parallel from per-image seeds, so the output does not
/// depend on the thread schedule.
pub fn generate_dataset(config: &GeneratorConfig, exec: Exec) -> Result<Dataset> {
    config.scene.validate()?;
    let mut names = BTreeSet::new();
    for s in &config.splits {
        if !names.insert(s.name.as_str()) {
            return Err(Error::invalid(format!("split '{}' requested twice", s.name)));
        }
    }
    let mut rng = rng::rng_for(config.seed, "layout");
    let mut next_id = 0u64;
    let mut splits = Vec::with_capacity(config.splits.len());
    for req in &config.splits {
        let layouts = plan_split(&config.scene, req, next_id, &mut rng)?;
        next_id += req.images as u64;
        let images = exec.try_map(&layouts, |l| render_image(&config.scene, l, config.seed))?;
        let records = images
            .iter()
            .map(|img| ImageRecord {
                id: img.id,
                path: format!("images/{}/{:06}.ppm", req.name, img.id),
                scene_type: img.scene_type,
                objects: img
                    .objects
                    .iter()
                    .map(|o| ObjectRecord {
                        bbox: o.bbox,
                        class_id: o.class_id,
                    })
                    .collect(),
            })
            .collect();
        splits.push(SplitData {
            manifest: DatasetManifest {
                split: req.name.clone(),
                generator: config.clone(),
                records,
            },
            images,
        });
    }
    Ok(Dataset {
        config: config.clone(),
        splits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalPolicy {
    /// Exact copies of each GT box.
    pub per_gt_exact: usize,
    /// Perturbed copies of each GT box.
    pub per_gt_jittered: usize,
    /// Centre shift std as a fraction of the box size; log-scale std of
    /// width and height.
    pub jitter_sigma: f64,
    /// Uniformly random boxes per image.
    pub negatives: usize,
    pub min_size: f64,
}

impl Default for ProposalPolicy {
    fn default() -> Self {
        ProposalPolicy {
            per_gt_exact: 0,
            per_gt_jittered: 4,
            jitter_sigma: 0.3,
            negatives: 30,
            min_size: 6.0,
        }
    }
}

/// One proposal line: `{image_id, box, scores?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub image_id: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

pub fn generate_proposals(manifest: &DatasetManifest, policy: &ProposalPolicy, seed: u64) -> Result<Vec<ProposalRecord>> {
    let scene = &manifest.generator.scene;
    let (w, h) = (scene.width as f64, scene.height as f64);
    if !(policy.jitter_sigma >= 0.0 && policy.jitter_sigma.is_finite()) {
        return Err(Error::invalid("jitter sigma must be finite and non-negative"));
    }
    if !(policy.min_size >= 1.0 && policy.min_size < w.min(h) / 2.0) {
        return Err(Error::invalid(format!("min_size {} out of range", policy.min_size)));
    }
    let normal = Normal::new(0.0, policy.jitter_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::new();
    for r in &manifest.records {
        let mut rng = rng::rng_indexed(seed, "proposals", r.id);
        let push = |out: &mut Vec<ProposalRecord>, b: BoundingBox| {
            out.push(ProposalRecord {
                image_id: r.id,
                bbox: b,
                scores: None,
            })
        };
        for o in &r.objects {
            for _ in 0..policy.per_gt_exact {
                push(&mut out, o.bbox);
            }
            let mut made = 0;
            while made < policy.per_gt_jittered {
                let (cx, cy) = o.bbox.center();
                let (bw, bh) = (o.bbox.width(), o.bbox.height());
                let cx = cx + normal.sample(&mut rng) * bw;
                let cy = cy + normal.sample(&mut rng) * bh;
                let nw = bw * normal.sample(&mut rng).exp();
                let nh = bh * normal.sample(&mut rng).exp();
                let b = BoundingBox::from_center(cx, cy, nw, nh).and_then(|b| b.clamp(w, h));
                if let Ok(b) = b {
                    if b.width() >= 1.0 && b.height() >= 1.0 {
                        push(&mut out, b);
                        made += 1;
                    }
                }
            }
        }
        for _ in 0..policy.negatives {
            let bw = rng.gen_range(policy.min_size..=w / 2.0);
            let bh = rng.gen_range(policy.min_size..=h / 2.0);
            let x = rng.gen_range(0.0..=w - bw);
            let y = rng.gen_range(0.0..=h - bh);
            push(&mut out, BoundingBox::new(x, y, x + bw, y + bh)?);
        }
    }
    Ok(out)
}

pub fn save_proposals(path: &Path, proposals: &[ProposalRecord]) -> Result<()> {
    write_jsonl(path, proposals)
}

pub fn load_proposals(path: &Path) -> Result<Vec<ProposalRecord>> {
    read_jsonl(path)
}

/// Proposals grouped by image id, in file order.
pub fn group_proposals(proposals: &[ProposalRecord]) -> BTreeMap<u64, Vec<BoundingBox>> {
    let mut m: BTreeMap<u64, Vec<BoundingBox>> = BTreeMap::new();
    for p in proposals {
        m.entry(p.image_id).or_default().push(p.bbox);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::proposal_recall;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig::train_val(SceneSpec::default(), 40, 10, seed)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small(3), Exec::Sequential).unwrap();
        let b = generate_dataset(&small(3), Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(4), Exec::default()).unwrap();
        assert_ne!(a.splits[0].images[0].pixels, c.splits[0].images[0].pixels);
    }

    #[test]
    fn class_counts_are_exact() {
        let d = generate_dataset(&small(1), Exec::default()).unwrap();
        for (s, req) in d.splits.iter().zip(&d.config.splits) {
            let mut counts = vec![0; 4];
            for r in &s.manifest.records {
                assert!((1..=3).contains(&r.objects.len()));
                for o in &r.objects {
                    counts[o.class_id] += 1;
                }
            }
            assert_eq!(counts, req.instances_per_class);
        }
    }

    #[test]
    fn forbidden_class_never_appears_in_scene() {
        let d = generate_dataset(&GeneratorConfig::train_val(SceneSpec::default(), 200, 1, 2), Exec::default()).unwrap();
        for r in &d.splits[0].manifest.records {
            if r.scene_type == 2 {
                assert!(r.objects.iter().all(|o| o.class_id != 0));
            }
        }
    }

    #[test]
    fn boxes_are_tight_and_disjoint() {
        let d = generate_dataset(&small(5), Exec::default()).unwrap();
        let spec = &d.config.scene;
        for img in &d.splits[0].images {
            let bg: Vec<u8> = spec.background(img.scene_type).iter().map(|v| (v * 255.0).round() as u8).collect();
            for (i, o) in img.objects.iter().enumerate() {
                for (j, p) in img.objects.iter().enumerate() {
                    if i != j {
                        assert_eq!(o.bbox.intersection_area(&p.bbox), 0.0);
                    }
                }
                let (x1, y1, x2, y2) = (o.bbox.x1 as usize, o.bbox.y1 as usize, o.bbox.x2 as usize, o.bbox.y2 as usize);
                let bright = |x: usize, y: usize| img.pixels[(y * img.width + x) * 3] as f64 / 255.0 > 0.7 && bg[0] < 180;
                assert!((x1..x2).any(|x| bright(x, y1)));
                assert!((x1..x2).any(|x| bright(x, y2 - 1)));
                assert!((y1..y2).any(|y| bright(x1, y)));
                assert!((y1..y2).any(|y| bright(x2 - 1, y)));
            }
        }
    }

    #[test]
    fn zero_noise_zero_jitter_objects_are_translates() {
        let spec = SceneSpec {
            jitter_radius: 0,
            noise: 0.0,
            vary_part_counts: false,
            ..SceneSpec::default()
        };
        let d = generate_dataset(&GeneratorConfig::train_val(spec, 60, 1, 9), Exec::default()).unwrap();
        let mut seen: BTreeMap<(usize, usize), Vec<u8>> = BTreeMap::new();
        for img in &d.splits[0].images {
            for o in &img.objects {
                let (x1, y1, x2, y2) = (o.bbox.x1 as usize, o.bbox.y1 as usize, o.bbox.x2 as usize, o.bbox.y2 as usize);
                let mut patch = Vec::new();
                for y in y1..y2 {
                    patch.extend_from_slice(&img.pixels[(y * img.width + x1) * 3..(y * img.width + x2) * 3]);
                }
                let key = (o.class_id, img.scene_type);
                if let Some(prev) = seen.get(&key) {
                    assert_eq!(prev, &patch, "class {} differs", o.class_id);
                } else {
                    seen.insert(key, patch);
                }
            }
        }
        assert!(seen.len() >= 8);
    }

    #[test]
    fn part_offsets_bounded_by_jitter_radius() {
        let mut rng = rng::rng_for(0, "t");
        let mut max_seen = 0;
        for i in 0..1000 {
            let s = render_object(ObjectKind::ALL[i % 4], 3, true, &mut rng);
            for p in &s.parts {
                max_seen = max_seen.max(p.offset[0].abs()).max(p.offset[1].abs());
            }
        }
        assert_eq!(max_seen, 3);
    }

    #[test]
    fn circles_are_shared_across_classes() {
        let mut rng = rng::rng_for(0, "t");
        let with_circles = ObjectKind::ALL
            .iter()
            .filter(|&&k| {
                render_object(k, 0, false, &mut rng)
                    .parts
                    .iter()
                    .any(|p| p.kind == PartKind::Circle)
            })
            .count();
        assert!(with_circles >= 2);
    }

    #[test]
    fn manifest_round_trip_and_missing_file() {
        let d = generate_dataset(&small(2), Exec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let p = manifest_path(dir.path(), "train");
        let m = load_manifest(&p).unwrap();
        assert_eq!(m, d.splits[0].manifest);
        let t = load_image(&dir.path().join(&m.records[0].path), 3).unwrap();
        assert_eq!(t, d.splits[0].images[0].to_tensor());
        let victim = dir.path().join(&m.records[1].path);
        fs::remove_file(&victim).unwrap();
        match load_manifest(&p) {
            Err(Error::MissingFile(path)) => assert_eq!(path, victim),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "{not json\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Malformed { .. })));
    }

    #[test]
    fn overlapping_splits_fail_validation() {
        let d = generate_dataset(&small(2), Exec::default()).unwrap();
        let ms: Vec<DatasetManifest> = d.splits.iter().map(|s| s.manifest.clone()).collect();
        validate_splits(&ms).unwrap();
        let mut bad = ms.clone();
        bad[1].records.push(ms[0].records[0].clone());
        assert!(matches!(validate_splits(&bad), Err(Error::Validation(_))));
    }

    #[test]
    fn unsatisfiable_placement_errors() {
        let spec = SceneSpec {
            width: 36,
            height: 36,
            min_objects: 3,
            max_objects: 3,
            max_retries: 5,
            ..SceneSpec::default()
        };
        let cfg = GeneratorConfig {
            splits: vec![SplitRequest {
                name: "x".into(),
                images: 4,
                instances_per_class: vec![3; 4],
            }],
            scene: spec,
            seed: 0,
        };
        assert!(matches!(generate_dataset(&cfg, Exec::default()), Err(Error::Validation(_))));
    }

    #[test]
    fn exact_copies_give_full_recall_and_negatives_none() {
        let d = generate_dataset(&small(2), Exec::default()).unwrap();
        let m = &d.splits[0].manifest;
        let exact = ProposalPolicy {
            per_gt_exact: 1,
            per_gt_jittered: 0,
            negatives: 0,
            ..ProposalPolicy::default()
        };
        let p = generate_proposals(m, &exact, 0).unwrap();
        assert_eq!(proposal_recall(&group_proposals(&p), &m.ground_truth(), 0.5), 1.0);
        let neg = ProposalPolicy {
            per_gt_jittered: 0,
            negatives: 5,
            min_size: 40.0,
            ..ProposalPolicy::default()
        };
        assert!(generate_proposals(m, &neg, 0).is_err());
        let neg = ProposalPolicy {
            per_gt_jittered: 0,
            negatives: 5,
            min_size: 1.0,
            ..ProposalPolicy::default()
        };
        let p = generate_proposals(m, &neg, 0).unwrap();
        // Random boxes rarely hit an object; with tiny sizes they never reach IoU 0.5.
        let tiny: Vec<ProposalRecord> = p
            .into_iter()
            .map(|mut r| {
                r.bbox = BoundingBox::new(r.bbox.x1, r.bbox.y1, r.bbox.x1 + 1.0, r.bbox.y1 + 1.0).unwrap();
                r
            })
            .collect();
        assert_eq!(proposal_recall(&group_proposals(&tiny), &m.ground_truth(), 0.5), 0.0);
    }

    #[test]
    fn proposals_round_trip() {
        let d = generate_dataset(&small(2), Exec::default()).unwrap();
        let mut p = generate_proposals(&d.splits[1].manifest, &ProposalPolicy::default(), 1).unwrap();
        p[0].scores = Some(vec![0.5, -1.0]);
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("p.jsonl");
        save_proposals(&f, &p).unwrap();
        assert_eq!(load_proposals(&f).unwrap(), p);
    }
}
