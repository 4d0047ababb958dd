//! Synthetic review-image datasets: procedural generation, augmentation,
//! parent-disjoint splitting and the on-disk pack format.
//!
//! Each product class is drawn as its own motif (shape, stripe texture,
//! background level and a fixed grain pattern). The review score sets a damage
//! level `λ(s) = (s_H − s)/(s_H − s_L)` that drives occlusion, additive noise,
//! a brightness shift and scratch strokes. Where and how the damage shows up
//! depends on the class, so reading a score is easier once the class is known.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, label, stream};
use crate::tensor::Tensor;

pub const SCORE_LOW: u8 = 1;
pub const SCORE_HIGH: u8 = 5;
pub const SCORE_LEVELS: usize = (SCORE_HIGH - SCORE_LOW + 1) as usize;

pub const PACK_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Raw,
    Augmented,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: Tensor,
    pub product_class: usize,
    pub score: u8,
    pub origin: Origin,
    /// Raw ancestor; equals `id` for raw samples.
    pub parent_id: u64,
}

impl Sample {
    pub fn score_index(&self) -> usize {
        (self.score - SCORE_LOW) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    pub per_score: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Augmented copies per raw image.
    pub augment: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    /// 4 classes, 10 raws per (class, score) cell, two augments each, 32×32 grayscale.
    pub fn desk() -> Self {
        GeneratorConfig { n_classes: 4, per_score: 10, image_size: 32, channels: 1, augment: 2, seed: 7 }
    }

    /// 23 classes × 5 scores × 20 raws at 224×224 RGB, 10 augments each.
    pub fn full() -> Self {
        GeneratorConfig { n_classes: 23, per_score: 20, image_size: 224, channels: 3, augment: 10, seed: 7 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidCounts(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.per_score == 0 {
            return Err(Error::InvalidCounts("per_score must be at least 1".into()));
        }
        if self.image_size < 8 || self.channels == 0 {
            return Err(Error::InvalidCounts("image_size must be ≥ 8 and channels ≥ 1".into()));
        }
        Ok(())
    }

    pub fn raw_count(&self) -> usize {
        self.n_classes * SCORE_LEVELS * self.per_score
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn raw_count(&self) -> usize {
        self.samples.iter().filter(|s| s.origin == Origin::Raw).count()
    }

    pub fn augmented_count(&self) -> usize {
        self.samples.iter().filter(|s| s.origin == Origin::Augmented).count()
    }

    pub fn of_class(&self, class: usize) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.product_class == class).collect()
    }

    /// Sample counts per `(class, score)` cell.
    pub fn cell_counts(&self, origin: Option<Origin>) -> BTreeMap<(usize, u8), usize> {
        let mut counts = BTreeMap::new();
        for s in self.samples.iter().filter(|s| origin.is_none_or(|o| s.origin == o)) {
            *counts.entry((s.product_class, s.score)).or_insert(0) += 1;
        }
        counts
    }
}

/// Damage level for a score: 0 at the top of the scale, 1 at the bottom.
pub fn damage_level(score: u8) -> f64 {
    (SCORE_HIGH - score) as f64 / (SCORE_HIGH - SCORE_LOW) as f64
}

/// Full-damage brightness shift. Bright classes darken and dark classes
/// brighten by this much, so that absolute brightness alone says nothing
/// about the score.
const BRIGHTNESS_SHIFT: f64 = 0.3;

/// Amplitude of the fixed per-pixel grain on grainy classes. Its spread is
/// close to the full-damage noise, so texture energy alone is ambiguous.
const GRAIN: f64 = 0.5;

/// Half-width, in normalized units, of the pristine label patch. Damage peels
/// it away, so patch size points in opposite directions for different classes.
const LABEL_HALF: f64 = 0.4;

/// Fixed per-class drawing and damage parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassStyle {
    pub class: usize,
    shape: usize,
    stripe_freq: f64,
    stripe_angle: f64,
    stripe_phase: f64,
    background: f64,
    grain: f64,
    occlusion_center: (f64, f64),
    label_patch: bool,
    fill: f64,
    brightness_sign: f64,
    scratch_angle: f64,
    tint: [f64; 3],
}

impl ClassStyle {
    pub fn new(class: usize, n_classes: usize) -> Self {
        let shape = class % 5;
        let variant = (class / 5) % 5;
        let quadrant = class % 4;
        let hue = class as f64 / n_classes as f64;
        ClassStyle {
            class,
            shape,
            stripe_freq: 1.5 + variant as f64,
            stripe_angle: variant as f64 * PI / 5.0 + shape as f64 * PI / 10.0,
            stripe_phase: class as f64 * 0.7,
            background: 0.08 + 0.05 * ((class / 25) + variant) as f64 % 0.3,
            grain: if (class / 2).is_multiple_of(2) { 0.0 } else { GRAIN },
            occlusion_center: (if quadrant.is_multiple_of(2) { -0.5 } else { 0.5 }, if quadrant < 2 { -0.5 } else { 0.5 }),
            label_patch: class % 2 != (class / 2) % 2,
            fill: if class.is_multiple_of(2) { 0.7 } else { 0.4 },
            brightness_sign: if class.is_multiple_of(2) { -1.0 } else { 1.0 },
            scratch_angle: ((class * 37) % 180) as f64 * PI / 180.0,
            tint: [0, 1, 2].map(|ch| 0.75 + 0.25 * (2.0 * PI * (hue + ch as f64 / 3.0)).cos()),
        }
    }

    fn inside(&self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        match self.shape {
            0 => r < 0.62,
            1 => u.abs().max(v.abs()) < 0.55,
            2 => r > 0.32 && r < 0.68,
            3 => (u.abs() < 0.2 || v.abs() < 0.2) && u.abs().max(v.abs()) < 0.7,
            _ => u.abs() + v.abs() < 0.72,
        }
    }

    /// Undamaged intensity at normalized coordinates, before channel tinting.
    fn motif(&self, u: f64, v: f64, x: usize, y: usize, label_half: f64) -> f64 {
        let (lu, lv) = self.occlusion_center;
        if (u - lu).abs() < label_half && (v - lv).abs() < label_half {
            return self.fill;
        }
        let base = if self.inside(u, v) {
            let along = u * self.stripe_angle.cos() + v * self.stripe_angle.sin();
            self.fill + 0.15 * (PI * self.stripe_freq * along + self.stripe_phase).sin()
        } else {
            self.background
        };
        base + self.grain * grain_noise(self.class, x, y)
    }
}

/// Deterministic per-class grain in `[-1, 1]`.
fn grain_noise(class: usize, x: usize, y: usize) -> f64 {
    let h = derive_seed(class as u64, &[x as u64, y as u64]);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Renders one sample. `jitter` offsets the motif in normalized units;
/// `damage` is a fully seeded description of the score-driven corruption.
fn render(style: &ClassStyle, size: usize, channels: usize, jitter: (f64, f64), damage: Option<&Damage>) -> Tensor {
    let mut data = vec![0.0; channels * size * size];
    let level = damage.map_or(0.0, |d| d.level);
    let label_half = if style.label_patch { LABEL_HALF * (1.0 - level) } else { 0.0 };
    for y in 0..size {
        for x in 0..size {
            let u = (2 * x + 1) as f64 / size as f64 - 1.0 - jitter.0;
            let v = (2 * y + 1) as f64 / size as f64 - 1.0 - jitter.1;
            let mut value = style.motif(u, v, x, y, label_half);
            if let Some(d) = damage {
                value = d.apply(style, x, y, size, value);
            }
            for ch in 0..channels {
                let tinted = if channels == 1 { value } else { value * style.tint[ch % 3] };
                let noise = damage.map_or(0.0, |d| d.noise[(ch * size + y) * size + x]);
                data[(ch * size + y) * size + x] = (tinted + noise).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![channels, size, size], data).expect("render shape")
}

struct Damage {
    level: f64,
    occlusion: Option<(f64, f64, f64)>,
    scratches: Vec<(f64, f64, f64)>,
    noise: Vec<f64>,
}

impl Damage {
    fn sample<R: Rng>(style: &ClassStyle, level: f64, size: usize, channels: usize, rng: &mut R) -> Self {
        let s = size as f64;
        let occlusion = (level > 0.0 && !style.label_patch).then(|| {
            let side = level * 0.4 * s;
            let cx = (style.occlusion_center.0 + 1.0) * s / 2.0 + rng.random_range(-0.06..0.06) * s;
            let cy = (style.occlusion_center.1 + 1.0) * s / 2.0 + rng.random_range(-0.06..0.06) * s;
            (cx, cy, side)
        });
        let n_scratches = (3.0 * level).round() as usize;
        let scratches = (0..n_scratches)
            .map(|_| {
                let angle = style.scratch_angle + rng.random_range(-0.15..0.15);
                (angle, rng.random_range(0.25..0.75) * s, rng.random_range(0.25..0.75) * s)
            })
            .collect();
        let sigma = 0.3 * level;
        let noise = if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            (0..channels * size * size).map(|_| normal.sample(rng)).collect()
        } else {
            vec![0.0; channels * size * size]
        };
        Damage { level, occlusion, scratches, noise }
    }

    fn apply(&self, style: &ClassStyle, x: usize, y: usize, _size: usize, value: f64) -> f64 {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut v = value + BRIGHTNESS_SHIFT * self.level * style.brightness_sign;
        if let Some((cx, cy, side)) = self.occlusion {
            if (px - cx).abs() < side / 2.0 && (py - cy).abs() < side / 2.0 {
                v = style.fill;
            }
        }
        for &(angle, ox, oy) in &self.scratches {
            // distance from the line through (ox, oy) with direction `angle`
            let dist = ((px - ox) * angle.sin() - (py - oy) * angle.cos()).abs();
            if dist < 0.6 {
                v = 1.0 - style.fill;
            }
        }
        v
    }
}

/// Pristine motif of a class with no positional jitter.
pub fn pristine_motif(class: usize, config: &GeneratorConfig) -> Tensor {
    render(&ClassStyle::new(class, config.n_classes), config.image_size, config.channels, (0.0, 0.0), None)
}

fn raw_sample(config: &GeneratorConfig, id: u64) -> Sample {
    let per_class = (SCORE_LEVELS * config.per_score) as u64;
    let class = (id / per_class) as usize;
    let score = SCORE_LOW + ((id % per_class) / config.per_score as u64) as u8;
    let mut rng = stream(config.seed, &[label::GENERATE, id]);
    let style = ClassStyle::new(class, config.n_classes);
    let jitter = (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06));
    let level = damage_level(score);
    let damage = Damage::sample(&style, level, config.image_size, config.channels, &mut rng);
    let image = render(&style, config.image_size, config.channels, jitter, Some(&damage));
    Sample { id, image, product_class: class, score, origin: Origin::Raw, parent_id: id }
}

/// Raw samples only, ordered by class, then score, then index within the cell.
pub fn generate_synthetic(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let samples = (0..config.raw_count() as u64).into_par_iter().map(|id| raw_sample(config, id)).collect();
    Ok(Dataset { config: config.clone(), samples })
}

/// Raw samples followed by `config.augment` augmented copies of each.
pub fn build_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    let mut ds = generate_synthetic(config)?;
    let n_raw = ds.samples.len() as u64;
    let count = config.augment;
    let augmented: Vec<Sample> = ds
        .samples
        .par_iter()
        .flat_map_iter(|raw| {
            let first_id = n_raw + raw.id * count as u64;
            augment_with_ids(raw, count, config.seed, first_id)
        })
        .collect();
    ds.samples.extend(augmented);
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub shift: (f64, f64),
    pub flip: bool,
    pub brightness: f64,
    pub zoom: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams =
        AugmentParams { rotation_deg: 0.0, shift: (0.0, 0.0), flip: false, brightness: 1.0, zoom: 1.0 };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            rotation_deg: rng.random_range(-25.0..=25.0),
            shift: (rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1)),
            flip: rng.random_bool(0.5),
            brightness: rng.random_range(0.7..=1.3),
            zoom: rng.random_range(0.85..=1.15),
        }
    }
}

/// Rotation, zoom and shift about the image center with bilinear sampling and
/// zero fill, then the optional horizontal flip, then brightness scaling.
pub fn apply_augmentation(image: &Tensor, params: &AugmentParams) -> Result<Tensor> {
    let (c, h, w) = image.dims3("augment")?;
    let geometric = params.rotation_deg != 0.0 || params.zoom != 1.0 || params.shift != (0.0, 0.0);
    let mut out = if geometric { warp(image, params, c, h, w) } else { image.clone() };
    if params.flip {
        out = flip_horizontal(&out)?;
    }
    if params.brightness != 1.0 {
        out = out.map(|v| (v * params.brightness).clamp(0.0, 1.0));
    }
    Ok(out)
}

fn warp(image: &Tensor, params: &AugmentParams, c: usize, h: usize, w: usize) -> Tensor {
    let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sx, sy) = (params.shift.0 * w as f64, params.shift.1 * h as f64);
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            // inverse map: undo shift, then zoom, then rotation
            let dx = (x as f64 - cx - sx) / params.zoom;
            let dy = (y as f64 - cy - sy) / params.zoom;
            let u = cos * dx + sin * dy + cx;
            let v = -sin * dx + cos * dy + cy;
            for ch in 0..c {
                out[(ch * h + y) * w + x] = bilinear(&src[ch * h * w..(ch + 1) * h * w], h, w, u, v);
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("warp shape")
}

fn bilinear(plane: &[f64], h: usize, w: usize, u: f64, v: f64) -> f64 {
    let x0 = u.floor();
    let y0 = v.floor();
    let (fx, fy) = (u - x0, v - y0);
    let at = |x: f64, y: f64| -> f64 {
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    at(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + at(x0 + 1.0, y0) * fx * (1.0 - fy)
        + at(x0, y0 + 1.0) * (1.0 - fx) * fy
        + at(x0 + 1.0, y0 + 1.0) * fx * fy
}

pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.dims3("flip")?;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for row in 0..c * h {
        out.extend(src[row * w..(row + 1) * w].iter().rev());
    }
    Tensor::new(vec![c, h, w], out)
}

fn augment_with_ids(sample: &Sample, count: usize, seed: u64, first_id: u64) -> Vec<Sample> {
    (0..count)
        .map(|j| {
            let mut rng = stream(seed, &[label::AUGMENT, sample.parent_id, j as u64]);
            let params = AugmentParams::sample(&mut rng);
            Sample {
                id: first_id + j as u64,
                image: apply_augmentation(&sample.image, &params).expect("sample images are rank 3"),
                product_class: sample.product_class,
                score: sample.score,
                origin: Origin::Augmented,
                parent_id: sample.parent_id,
            }
        })
        .collect()
}

/// `count` randomly augmented copies of `sample`; ids follow the parent's.
pub fn augment(sample: &Sample, count: usize, seed: u64) -> Vec<Sample> {
    augment_with_ids(sample, count, seed, sample.id * 1_000 + 1)
}

/// Split by raw parent: every raw image and all of its augments land on the
/// same side. Each `(class, score)` cell contributes `round(n·val/(train+val))`
/// parents to validation.
pub fn split_dataset(dataset: &Dataset, ratio: (usize, usize), seed: u64) -> Result<(Dataset, Dataset)> {
    let (train_parts, val_parts) = ratio;
    if train_parts == 0 || val_parts == 0 {
        return Err(Error::InvalidCounts(format!("split ratio {train_parts}:{val_parts} must be positive")));
    }
    let mut cells: BTreeMap<(usize, u8), Vec<u64>> = BTreeMap::new();
    for s in dataset.samples.iter().filter(|s| s.origin == Origin::Raw) {
        cells.entry((s.product_class, s.score)).or_default().push(s.id);
    }
    if cells.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut val_parents = std::collections::HashSet::new();
    for (&(class, score), ids) in &mut cells {
        let n = ids.len();
        let n_val = ((n * val_parts) as f64 / (train_parts + val_parts) as f64).round() as usize;
        if n_val == 0 || n_val == n {
            return Err(Error::TooFewSamples(format!(
                "cell (class {class}, score {score}) has {n} raw images, too few for a {train_parts}:{val_parts} split"
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut stream(seed, &[label::SPLIT, class as u64, score as u64]));
        val_parents.extend(ids[..n_val].iter().copied());
    }
    let (val, train): (Vec<Sample>, Vec<Sample>) =
        dataset.samples.iter().cloned().partition(|s| val_parents.contains(&s.parent_id));
    Ok((
        Dataset { config: dataset.config.clone(), samples: train },
        Dataset { config: dataset.config.clone(), samples: val },
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: u64,
    pub class: usize,
    pub score: u8,
    pub origin: Origin,
    pub parent: u64,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub generator: GeneratorConfig,
    pub samples: Vec<ManifestEntry>,
    /// Hex SHA-256 of `images.bin`.
    pub checksum: String,
}

/// Writes `manifest.json` and `images.bin` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let images_path = dir.join(IMAGES_FILE);
    let file = fs::File::create(&images_path).map_err(|e| Error::io(&images_path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let mut hasher = Sha256::new();
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let blob = s.image.to_blob();
        hasher.update(&blob);
        writer.write_all(&blob).map_err(|e| Error::io(&images_path, e))?;
        entries.push(ManifestEntry {
            id: s.id,
            class: s.product_class,
            score: s.score,
            origin: s.origin,
            parent: s.parent_id,
            offset,
            length: blob.len() as u64,
        });
        offset += blob.len() as u64;
    }
    writer.flush().map_err(|e| Error::io(&images_path, e))?;
    let manifest = DatasetManifest {
        version: PACK_VERSION,
        generator: dataset.config.clone(),
        samples: entries,
        checksum: hex(&hasher.finalize()),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(&path, format!("unreadable manifest: {e}")))?;
    if manifest.version != PACK_VERSION {
        return Err(Error::corrupt(&path, format!("unsupported pack version {}", manifest.version)));
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let images_path = dir.join(IMAGES_FILE);
    let bytes = fs::read(&images_path).map_err(|e| Error::io(&images_path, e))?;
    let digest = hex(&Sha256::digest(&bytes));
    if digest != manifest.checksum {
        return Err(Error::corrupt(&images_path, "checksum mismatch"));
    }
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let end = e.offset.checked_add(e.length).filter(|&end| end <= bytes.len() as u64);
            let Some(end) = end else {
                return Err(Error::corrupt(&images_path, format!("sample {} extends past end of blob", e.id)));
            };
            let image = Tensor::from_blob(&bytes[e.offset as usize..end as usize])
                .map_err(|err| Error::corrupt(&images_path, format!("sample {}: {err}", e.id)))?;
            Ok(Sample {
                id: e.id,
                image,
                product_class: e.class,
                score: e.score,
                origin: e.origin,
                parent_id: e.parent,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { config: manifest.generator, samples })
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig { n_classes: 3, per_score: 4, image_size: 16, channels: 1, augment: 2, seed: 11 }
    }

    #[test]
    fn raw_counts_and_balance() {
        let ds = generate_synthetic(&tiny()).unwrap();
        assert_eq!(ds.len(), 3 * 5 * 4);
        assert!(ds.cell_counts(None).values().all(|&c| c == 4));
        assert!(ds.samples.iter().all(|s| s.parent_id == s.id && s.origin == Origin::Raw));
        assert!(ds.samples.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn invalid_counts() {
        let mut cfg = tiny();
        cfg.n_classes = 1;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::InvalidCounts(_))));
        let mut cfg = tiny();
        cfg.per_score = 0;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::InvalidCounts(_))));
    }

    #[test]
    fn top_score_has_no_damage() {
        assert_eq!(damage_level(5), 0.0);
        assert_eq!(damage_level(1), 1.0);
        let cfg = tiny();
        let mut rng = stream(0, &[]);
        let style = ClassStyle::new(1, cfg.n_classes);
        let d = Damage::sample(&style, 0.0, 16, 1, &mut rng);
        assert!(d.noise.iter().all(|&n| n == 0.0));
        assert!(d.occlusion.is_none() && d.scratches.is_empty());
        let clean = render(&style, 16, 1, (0.0, 0.0), Some(&d));
        assert_eq!(clean, pristine_motif(1, &cfg));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = build_dataset(&tiny()).unwrap();
        let b = build_dataset(&tiny()).unwrap();
        assert_eq!(a, b);
        let mut other = tiny();
        other.seed = 12;
        assert_ne!(a.samples[0].image, build_dataset(&other).unwrap().samples[0].image);
    }

    #[test]
    fn augment_counts_and_labels() {
        let ds = build_dataset(&tiny()).unwrap();
        assert_eq!(ds.raw_count(), 60);
        assert_eq!(ds.augmented_count(), 120);
        let by_id: BTreeMap<u64, &Sample> = ds.samples.iter().map(|s| (s.id, s)).collect();
        assert_eq!(by_id.len(), ds.len());
        for s in ds.samples.iter().filter(|s| s.origin == Origin::Augmented) {
            let parent = by_id[&s.parent_id];
            assert_eq!((s.product_class, s.score), (parent.product_class, parent.score));
        }
        assert!(augment(&ds.samples[0], 0, 1).is_empty());
    }

    #[test]
    fn flip_is_an_involution() {
        let ds = generate_synthetic(&tiny()).unwrap();
        let img = &ds.samples[7].image;
        let forced = AugmentParams { flip: true, ..AugmentParams::IDENTITY };
        let twice = apply_augmentation(&apply_augmentation(img, &forced).unwrap(), &forced).unwrap();
        assert_eq!(&twice, img);
        assert_ne!(&apply_augmentation(img, &forced).unwrap(), img);
        assert_eq!(&apply_augmentation(img, &AugmentParams::IDENTITY).unwrap(), img);
    }

    #[test]
    fn augmentation_stays_in_unit_range() {
        let ds = generate_synthetic(&tiny()).unwrap();
        for (i, s) in ds.samples.iter().enumerate().take(10) {
            for a in augment(s, 3, i as u64) {
                assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn split_is_parent_disjoint_and_stratified() {
        let mut cfg = tiny();
        cfg.per_score = 8;
        let ds = build_dataset(&cfg).unwrap();
        let (train, val) = split_dataset(&ds, (3, 1), 5).unwrap();
        assert_eq!(train.len() + val.len(), ds.len());
        let train_parents: std::collections::HashSet<u64> = train.samples.iter().map(|s| s.parent_id).collect();
        assert!(val.samples.iter().all(|s| !train_parents.contains(&s.parent_id)));
        assert!(val.cell_counts(Some(Origin::Raw)).values().all(|&c| c == 2));
        assert!(train.cell_counts(Some(Origin::Raw)).values().all(|&c| c == 6));
        assert_eq!(split_dataset(&ds, (3, 1), 5).unwrap(), (train, val));
    }

    #[test]
    fn split_needs_enough_parents() {
        let mut cfg = tiny();
        cfg.per_score = 1;
        let ds = generate_synthetic(&cfg).unwrap();
        assert!(matches!(split_dataset(&ds, (3, 1), 0), Err(Error::TooFewSamples(_))));
    }

    #[test]
    fn pack_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&tiny()).unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, ds);
        assert_eq!(read_manifest(dir.path()).unwrap(), manifest);

        let images = dir.path().join(IMAGES_FILE);
        let bytes = fs::read(&images).unwrap();
        fs::write(&images, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::CorruptManifest { .. })));
    }

    fn mean_abs(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn classes_separable_by_nearest_centroid() {
        let cfg = GeneratorConfig { n_classes: 23, per_score: 8, image_size: 32, channels: 1, augment: 0, seed: 3 };
        let ds = generate_synthetic(&cfg).unwrap();
        let (train, test): (Vec<&Sample>, Vec<&Sample>) = ds.samples.iter().partition(|s| s.id % 2 == 0);
        let mut centroids = vec![Tensor::zeros(&[1, 32, 32]); 23];
        let mut counts = vec![0usize; 23];
        for s in &train {
            centroids[s.product_class].add_assign(&s.image).unwrap();
            counts[s.product_class] += 1;
        }
        let centroids: Vec<Tensor> =
            centroids.iter().zip(&counts).map(|(c, &n)| c.scale(1.0 / n as f64)).collect();
        let correct = test
            .iter()
            .filter(|s| {
                let d: Vec<f64> = centroids.iter().map(|c| c.sub(&s.image).unwrap().data().iter().map(|v| v * v).sum()).collect();
                crate::tensor::argmax(&d.iter().map(|v| -v).collect::<Vec<_>>()) == s.product_class
            })
            .count();
        let accuracy = correct as f64 / test.len() as f64;
        assert!(accuracy > 0.8, "nearest-centroid accuracy {accuracy}");
    }

    #[test]
    fn damage_grows_as_score_falls() {
        let cfg = GeneratorConfig { n_classes: 23, per_score: 20, image_size: 32, channels: 1, augment: 0, seed: 9 };
        let ds = generate_synthetic(&cfg).unwrap();
        for class in 0..cfg.n_classes {
            let pristine = pristine_motif(class, &cfg);
            let mut by_score = [0.0; SCORE_LEVELS];
            for s in ds.of_class(class) {
                by_score[s.score_index()] += mean_abs(&s.image, &pristine) / cfg.per_score as f64;
            }
            assert!(by_score.windows(2).all(|w| w[0] > w[1]), "class {class}: {by_score:?}");
        }
    }
}
