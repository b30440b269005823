//! Image ingestion (binary PPM) and a synthetic fine-grained dataset.
//!
//! The synthetic generator draws classes in families: every class in a
//! family shares the glyph shape, hue and texture and differs only in shade, and
//! all classes share one set of background textures. Glyphs are aligned to
//! the patch grid so the foreground patches of every image are known.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Data(format!(
                "{width}×{height} image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Mirror along the width axis.
    pub fn flipped(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }
}

/// Nearest-neighbour resampling.
pub fn resize_nearest(image: &Image, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    let mut out = Image::filled(width, height, [0, 0, 0]);
    for y in 0..height {
        let sy = y * image.height / height;
        for x in 0..width {
            let sx = x * image.width / width;
            out.set(x, y, image.get(sx, sy));
        }
    }
    Ok(out)
}

/// Stack equally sized images into `[B, H, W, 3]` with values in `[0, 1]`.
pub fn images_to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Empty("no images".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * w * h * 3);
    for im in images {
        if im.width != w || im.height != h {
            return Err(Error::Data("images in a batch must share a size".into()));
        }
        data.extend(im.pixels.iter().map(|&p| T::c(p as f64 / 255.0)));
    }
    Tensor::new(vec![images.len(), h, w, 3], data)
}

pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let err = |m: &str| Error::format(path, m);
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err("bad magic (expected binary P6)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(err("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("malformed header number"))?;
    }
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(err("malformed header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(err(&format!("maxval {maxval}, only 255 is supported")));
    }
    if w == 0 || h == 0 {
        return Err(err("zero image dimension"));
    }
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(err("truncated payload"));
    }
    Image::new(w, h, bytes[pos..pos + need].to_vec())
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    parse_ppm(&bytes, path)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_ppm(image))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub class: usize,
    pub split: Split,
    /// Patch ids covered by the foreground glyph, when known.
    pub foreground: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub items: Vec<LabeledImage>,
    /// Family of each class, when the dataset was generated.
    pub families: Option<Vec<usize>>,
    pub seed: Option<u64>,
}

/// Fraction of each class kept for training.
pub const TRAIN_FRACTION: f64 = 0.8;

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == split).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for it in &self.items {
            c[it.class] += 1;
        }
        c
    }

    /// Seeded stratified split: per class, `⌈0.8·n_c⌉` images go to training.
    pub fn assign_split(&mut self, seed: u64) {
        let rng = SeededRng::new(seed);
        for c in 0..self.num_classes() {
            let mut members: Vec<usize> = (0..self.items.len()).filter(|&i| self.items[i].class == c).collect();
            rng.derive(&[0x5711, c as u64]).shuffle(&mut members);
            let n_train = (TRAIN_FRACTION * members.len() as f64 - 1e-9).ceil() as usize;
            for (rank, &i) in members.iter().enumerate() {
                self.items[i].split = if rank < n_train { Split::Train } else { Split::Val };
            }
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            class_names: self.class_names.clone(),
            counts: self.class_counts(),
            families: self.families.clone(),
            seed: self.seed,
            images: self
                .items
                .iter()
                .enumerate()
                .map(|(i, it)| ManifestEntry {
                    file: format!("{}/{:05}.ppm", self.class_names[it.class], i),
                    class: it.class,
                    split: it.split,
                    foreground: it.foreground.clone(),
                })
                .collect(),
        }
    }

    /// Writes `<dir>/<class>/<index>.ppm` and `<dir>/manifest.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        for name in &self.class_names {
            fs::create_dir_all(dir.join(name))?;
        }
        for (it, entry) in self.items.iter().zip(&manifest.images) {
            write_ppm(&dir.join(&entry.file), &it.image)?;
        }
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a directory written by [`Dataset::save_dir`], or falls back to
    /// [`load_ppm_dir`] with a seed-0 split when there is no manifest.
    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.exists() {
            let mut ds = load_ppm_dir(dir)?;
            ds.assign_split(0);
            return Ok(ds);
        }
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&mpath)?)
            .map_err(|e| Error::format(&mpath, e.to_string()))?;
        let mut items = Vec::with_capacity(manifest.images.len());
        for e in &manifest.images {
            if e.class >= manifest.class_names.len() {
                return Err(Error::format(&mpath, format!("class id {} out of range", e.class)));
            }
            items.push(LabeledImage {
                image: read_ppm(&dir.join(&e.file))?,
                class: e.class,
                split: e.split,
                foreground: e.foreground.clone(),
            });
        }
        Ok(Dataset {
            class_names: manifest.class_names,
            items,
            families: manifest.families,
            seed: manifest.seed,
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub class: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foreground: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    #[serde(default)]
    pub families: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub images: Vec<ManifestEntry>,
}

/// `<class_name>/<image>.ppm` directory; classes sorted by name get ids 0, 1, …
pub fn load_ppm_dir(dir: &Path) -> Result<Dataset> {
    let mut classes: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::format(dir, e.to_string()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Data(format!("no classes in {}", dir.display())));
    }
    let mut items = Vec::new();
    for (id, (_, path)) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        files.sort();
        for f in files {
            items.push(LabeledImage {
                image: read_ppm(&f)?,
                class: id,
                split: Split::Train,
                foreground: None,
            });
        }
    }
    Ok(Dataset {
        class_names: classes.into_iter().map(|(n, _)| n).collect(),
        items,
        families: None,
        seed: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub families: usize,
    pub image_size: usize,
    /// Patch side the foreground glyph is aligned to.
    pub patch_size: usize,
    /// Glyph side, in patches.
    pub glyph_patches: usize,
    pub samples_per_class: usize,
    /// 0 = members of a family are far apart in brightness, 1 = identical.
    pub family_similarity: f64,
    /// Gaussian pixel noise standard deviation, in units of full scale.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 12,
            families: 4,
            image_size: 64,
            patch_size: 8,
            glyph_patches: 3,
            samples_per_class: 40,
            family_similarity: 0.5,
            noise: 0.04,
            seed: 0,
        }
    }
}

const FAMILY_HUES: [[f64; 3]; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.7, 0.2],
    [0.2, 0.25, 0.9],
    [0.9, 0.8, 0.1],
    [0.75, 0.2, 0.8],
    [0.1, 0.75, 0.8],
    [0.95, 0.5, 0.1],
    [0.5, 0.5, 0.5],
];

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

const SHAPES: [Shape; 6] = [
    Shape::Disc,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Diamond,
    Shape::Ring,
];

impl Shape {
    /// Whether normalized glyph coordinates `(u, v)` in `[-1, 1]²` are inside.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disc => u * u + v * v <= 0.8,
            Shape::Square => u.abs() <= 0.75 && v.abs() <= 0.75,
            Shape::Triangle => (-0.8..=0.8).contains(&v) && u.abs() <= (v + 0.8) * 0.55,
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 0.9) || (v.abs() <= 0.3 && u.abs() <= 0.9),
            Shape::Diamond => u.abs() + v.abs() <= 0.95,
            Shape::Ring => {
                let r = u * u + v * v;
                (0.25..=0.85).contains(&r)
            }
        }
    }
}

fn background(kind: usize, x: usize, y: usize, size: usize, phase: f64, tint: [f64; 3]) -> [f64; 3] {
    let (fx, fy) = (x as f64 / size as f64, y as f64 / size as f64);
    let level = match kind {
        0 => 0.35 + 0.3 * (fx + fy) / 2.0,
        1 => 0.4 + 0.15 * ((fx * 12.0 + phase).sin()),
        2 => {
            if ((x / 4) + (y / 4)) % 2 == 0 {
                0.45
            } else {
                0.3
            }
        }
        _ => 0.4 + 0.12 * ((fx * 7.0 + phase).sin() * (fy * 5.0 - phase).cos()),
    };
    [level * tint[0], level * tint[1], level * tint[2]]
}

/// Family of class `c` when `num_classes` are split into `families`
/// contiguous groups.
pub fn family_of(c: usize, num_classes: usize, families: usize) -> usize {
    let per = num_classes.div_ceil(families);
    c / per
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.families == 0 || spec.families > spec.num_classes {
        return Err(Error::InvalidArgument("need 1 ≤ families ≤ num_classes".into()));
    }
    if spec.families > FAMILY_HUES.len() {
        return Err(Error::InvalidArgument(format!("at most {} families", FAMILY_HUES.len())));
    }
    if spec.patch_size == 0 || spec.image_size % spec.patch_size != 0 {
        return Err(Error::InvalidArgument("image_size must be a multiple of patch_size".into()));
    }
    let grid = spec.image_size / spec.patch_size;
    if spec.glyph_patches == 0 || spec.glyph_patches > grid {
        return Err(Error::InvalidArgument("glyph does not fit the patch grid".into()));
    }
    if spec.samples_per_class == 0 {
        return Err(Error::InvalidArgument("samples_per_class must be positive".into()));
    }
    let families: Vec<usize> = (0..spec.num_classes)
        .map(|c| family_of(c, spec.num_classes, spec.families))
        .collect();
    let root = SeededRng::new(spec.seed);
    let size = spec.image_size;
    let glyph = spec.glyph_patches * spec.patch_size;
    let mut items = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for c in 0..spec.num_classes {
        let fam = families[c];
        let members: Vec<usize> = (0..spec.num_classes).filter(|&k| families[k] == fam).collect();
        let member = members.iter().position(|&k| k == c).unwrap();
        let rank = if members.len() > 1 {
            member as f64 / (members.len() - 1) as f64
        } else {
            0.0
        };
        let brightness = 1.0 - rank * 0.9 * (1.0 - spec.family_similarity);
        let striped = fam % 2 == 1;
        let hue = FAMILY_HUES[fam];
        let shape = SHAPES[fam % SHAPES.len()];
        for s in 0..spec.samples_per_class {
            let mut rng = root.derive(&[c as u64, s as u64]);
            let kind = rng.below(4);
            let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
            let tint = [
                rng.uniform_range(0.8, 1.2),
                rng.uniform_range(0.8, 1.2),
                rng.uniform_range(0.8, 1.2),
            ];
            let gx = rng.below(grid - spec.glyph_patches + 1);
            let gy = rng.below(grid - spec.glyph_patches + 1);
            let jitter = rng.uniform_range(0.96, 1.04);
            let mut img = Image::filled(size, size, [0, 0, 0]);
            for y in 0..size {
                for x in 0..size {
                    let mut rgb = background(kind, x, y, size, phase, tint);
                    let (lx, ly) = (x as isize - (gx * spec.patch_size) as isize, y as isize - (gy * spec.patch_size) as isize);
                    if lx >= 0 && ly >= 0 && (lx as usize) < glyph && (ly as usize) < glyph {
                        let u = (lx as f64 + 0.5) / glyph as f64 * 2.0 - 1.0;
                        let v = (ly as f64 + 0.5) / glyph as f64 * 2.0 - 1.0;
                        if shape.contains(u, v) {
                            let texture = if striped && (ly / 2) % 2 == 1 { 0.8 } else { 1.0 };
                            for k in 0..3 {
                                rgb[k] = (hue[k] * brightness * jitter * texture).min(1.0);
                            }
                        }
                    }
                    let px = rgb.map(|v| {
                        let n = v + spec.noise * rng.normal();
                        (n.clamp(0.0, 1.0) * 255.0).round() as u8
                    });
                    img.set(x, y, px);
                }
            }
            let foreground = (0..spec.glyph_patches)
                .flat_map(|dy| (0..spec.glyph_patches).map(move |dx| (gy + dy) * grid + gx + dx))
                .collect();
            items.push(LabeledImage {
                image: img,
                class: c,
                split: Split::Train,
                foreground: Some(foreground),
            });
        }
    }
    let mut ds = Dataset {
        class_names: (0..spec.num_classes).map(|c| format!("class_{c:02}")).collect(),
        items,
        families: Some(families),
        seed: Some(spec.seed),
    };
    ds.assign_split(spec.seed);
    Ok(ds)
}
