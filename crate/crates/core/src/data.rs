//! Dataset ingestion: manifests, image decoding and bilinear resampling to
//! the 64x64 domain, label harmonization onto the 13 shared classes, and a
//! synthetic desk-scale dataset generator.
//!
//! File formats (UTF-8, line-delimited, tab-separated):
//! - manifest: `path<TAB>raw_label<TAB>class_id<TAB>domain<TAB>split`
//! - harmonization map: `domain<TAB>raw_label<TAB>class_id|EXCLUDED`

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::train::Sample;

pub const NUM_HARMONIZED_CLASSES: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub raw_label: String,
    pub class_id: usize,
    pub domain: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.path.display(),
                e.raw_label,
                e.class_id,
                e.domain,
                e.split
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parse_err = |detail: String| Error::ManifestParse {
                path: path.to_path_buf(),
                line: lineno + 1,
                detail,
            };
            if fields.len() != 5 {
                return Err(parse_err(format!("expected 5 tab-separated fields, got {}", fields.len())));
            }
            let class_id: usize = fields[2]
                .parse()
                .map_err(|_| parse_err(format!("bad class id '{}'", fields[2])))?;
            if class_id >= NUM_HARMONIZED_CLASSES {
                return Err(parse_err(format!(
                    "class id {class_id} outside [0, {NUM_HARMONIZED_CLASSES})"
                )));
            }
            let split = Split::parse(fields[4])
                .ok_or_else(|| parse_err(format!("bad split '{}'", fields[4])))?;
            if fields[3].is_empty() {
                return Err(parse_err("empty domain".into()));
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(fields[0]),
                raw_label: fields[1].to_string(),
                class_id,
                domain: fields[3].to_string(),
                split,
            });
        }
        Ok(DatasetManifest { entries })
    }

    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn class_histogram(&self) -> [usize; NUM_HARMONIZED_CLASSES] {
        let mut hist = [0usize; NUM_HARMONIZED_CLASSES];
        for e in &self.entries {
            hist[e.class_id] += 1;
        }
        hist
    }
}

/// Harmonized target for one raw label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Harmonized {
    Class(usize),
    Excluded,
}

/// Per-domain mapping from raw dataset labels to the shared class ids.
/// The expert mapping is consumed as an external config file, not derived.
#[derive(Debug, Clone, Default)]
pub struct HarmonizationMap {
    map: HashMap<(String, String), Harmonized>,
}

impl HarmonizationMap {
    pub fn insert(&mut self, domain: &str, raw_label: &str, target: Harmonized) {
        self.map.insert((domain.to_string(), raw_label.to_string()), target);
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = HarmonizationMap::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parse_err = |detail: String| Error::ManifestParse {
                path: path.to_path_buf(),
                line: lineno + 1,
                detail,
            };
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let target = if fields[2] == "EXCLUDED" {
                Harmonized::Excluded
            } else {
                let id: usize = fields[2]
                    .parse()
                    .map_err(|_| parse_err(format!("bad class id '{}'", fields[2])))?;
                if id >= NUM_HARMONIZED_CLASSES {
                    return Err(parse_err(format!(
                        "class id {id} outside [0, {NUM_HARMONIZED_CLASSES})"
                    )));
                }
                Harmonized::Class(id)
            };
            map.insert(fields[0], fields[1], target);
        }
        Ok(map)
    }

    /// Deterministic lookup; absent labels are a structured error naming
    /// domain and label.
    pub fn harmonize(&self, raw_label: &str, domain: &str) -> Result<Harmonized> {
        self.map
            .get(&(domain.to_string(), raw_label.to_string()))
            .copied()
            .ok_or_else(|| Error::UnmappedLabel {
                domain: domain.to_string(),
                label: raw_label.to_string(),
            })
    }
}

/// Scans a folder-per-class tree into a manifest. Subfolder names are the
/// raw labels; ordering is lexicographic, so re-scans are byte-identical.
/// Returns the manifest and the count of entries dropped as EXCLUDED.
pub fn scan_folder(
    root: &Path,
    map: &HarmonizationMap,
    domain: &str,
) -> Result<(DatasetManifest, usize)> {
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::EmptyDatasetRoot(root.to_path_buf()));
    }
    let mut entries = Vec::new();
    let mut dropped = 0usize;
    for dir in class_dirs {
        let raw_label = dir.file_name().unwrap().to_string_lossy().to_string();
        let target = map.harmonize(&raw_label, domain)?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                    Some(ref e) if ["png", "jpg", "jpeg", "tif", "tiff"].contains(&e.as_str())
                )
            })
            .collect();
        files.sort();
        for path in files {
            match target {
                Harmonized::Class(class_id) => entries.push(ManifestEntry {
                    path,
                    raw_label: raw_label.clone(),
                    class_id,
                    domain: domain.to_string(),
                    split: Split::Train,
                }),
                Harmonized::Excluded => dropped += 1,
            }
        }
    }
    Ok((DatasetManifest { entries }, dropped))
}

/// Bilinear resampling with pixel-center alignment. Identity when the
/// output size equals the input size.
pub fn resize_bilinear(src: &Grid<f32>, out_h: usize, out_w: usize) -> Grid<f32> {
    let (h, w, ch) = (src.height(), src.width(), src.channels());
    let mut out = Grid::zeros(out_h, out_w, ch);
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for i in 0..out_h {
        let fy = ((i as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for j in 0..out_w {
            let fx = ((j as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            let dst = out.cell_mut(i, j);
            for c in 0..ch {
                let top = src.get(y0, x0, c) * (1.0 - wx) + src.get(y0, x1, c) * wx;
                let bot = src.get(y1, x0, c) * (1.0 - wx) + src.get(y1, x1, c) * wx;
                dst[c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

fn decode_rgb(path: &Path) -> Result<Grid<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::ImageRead { path: path.to_path_buf(), detail: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut grid = Grid::zeros(h, w, 3);
    for (j, i, px) in img.enumerate_pixels() {
        let cell = grid.cell_mut(i as usize, j as usize);
        for c in 0..3 {
            cell[c] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(grid)
}

/// Decodes an RGB raster and resamples it to 64x64 with values in [0, 1].
/// Non-square sources are resampled directly without cropping.
pub fn load_image_64(path: &Path) -> Result<Grid<f32>> {
    Ok(resize_bilinear(&decode_rgb(path)?, 64, 64))
}

/// Loads every entry of one split into memory as training samples.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    manifest
        .of_split(split)
        .map(|e| Ok(Sample { image: load_image_64(&e.path)?, class_id: e.class_id }))
        .collect()
}

/// Synthetic dataset parameters. Each image is a noisy background plus a
/// class-distinctive disk: the class picks the hue and the radius band,
/// the position is jittered. `hue_shift` (degrees) moves the whole hue
/// wheel, which makes shifted-domain variants for cross-domain runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub per_class: usize,
    pub num_classes: usize,
    pub hue_shift: f64,
}

impl SynthSpec {
    pub fn new(seed: u64, per_class: usize, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > NUM_HARMONIZED_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "synthetic class count must be in 1..={NUM_HARMONIZED_CLASSES} (got {num_classes})"
            )));
        }
        if per_class == 0 {
            return Err(Error::InvalidConfig("per_class must be >= 1".into()));
        }
        Ok(SynthSpec { seed, per_class, num_classes, hue_shift: 0.0 })
    }

    pub fn with_hue_shift(mut self, degrees: f64) -> Self {
        self.hue_shift = degrees;
        self
    }

    /// Hue (degrees) assigned to a class under this spec.
    pub fn class_hue(&self, class: usize) -> f64 {
        (self.hue_shift + 360.0 * class as f64 / self.num_classes as f64).rem_euclid(360.0)
    }
}

pub fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// Generates the in-memory synthetic dataset, `per_class` samples for each
/// class in order, deterministic from the seed.
pub fn synth_blobs(spec: &SynthSpec) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.per_class * spec.num_classes);
    for class in 0..spec.num_classes {
        for _ in 0..spec.per_class {
            samples.push(Sample { image: synth_image(spec, class, &mut rng), class_id: class });
        }
    }
    samples
}

fn synth_image(spec: &SynthSpec, class: usize, rng: &mut ChaCha8Rng) -> Grid<f32> {
    let mut img = Grid::zeros(64, 64, 3);
    for v in img.as_mut_slice().iter_mut() {
        *v = rng.gen_range(0.0..0.25);
    }
    let color = hsv_to_rgb(spec.class_hue(class), 1.0, 1.0);
    // radius band per class: 8..20 split into num_classes bands
    let band = 12.0 / spec.num_classes as f64;
    let radius = 8.0 + band * (class as f64 + rng.gen_range(0.1..0.9));
    let ci = rng.gen_range(24.0..40.0);
    let cj = rng.gen_range(24.0..40.0);
    for i in 0..64 {
        for j in 0..64 {
            let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
            if d2 <= radius * radius {
                let cell = img.cell_mut(i, j);
                for c in 0..3 {
                    cell[c] = (color[c] * rng.gen_range(0.85..1.0)).clamp(0.0, 1.0);
                }
            }
        }
    }
    img
}

/// Writes samples to `dir` as a folder-per-class PNG tree plus a manifest
/// TSV (`manifest.tsv`), splitting each class `train_fraction` /
/// remainder-test in generation order.
pub fn save_dataset(
    dir: &Path,
    samples: &[Sample],
    domain: &str,
    train_fraction: f64,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut per_class_seen: HashMap<usize, usize> = HashMap::new();
    let mut per_class_total: HashMap<usize, usize> = HashMap::new();
    for s in samples {
        *per_class_total.entry(s.class_id).or_default() += 1;
    }
    let mut entries = Vec::new();
    for s in samples {
        let seen = per_class_seen.entry(s.class_id).or_default();
        let total = per_class_total[&s.class_id];
        let split = if (*seen as f64) < (total as f64 * train_fraction).round() {
            Split::Train
        } else {
            Split::Test
        };
        let class_dir = dir.join(format!("class_{:02}", s.class_id));
        std::fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        let path = class_dir.join(format!("img_{:05}.png", *seen));
        write_png(&path, &s.image)?;
        *seen += 1;
        entries.push(ManifestEntry {
            path,
            raw_label: format!("class_{:02}", s.class_id),
            class_id: s.class_id,
            domain: domain.to_string(),
            split,
        });
    }
    let manifest = DatasetManifest { entries };
    manifest.write_tsv(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// 8-bit RGB PNG of a [0,1] image grid.
pub fn write_png(path: &Path, img: &Grid<f32>) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for (j, i, px) in buf.enumerate_pixels_mut() {
        let cell = img.cell(i as usize, j as usize);
        for c in 0..3 {
            px.0[c] = (cell[c].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path)
        .map_err(|e| Error::OutputWrite { path: path.to_path_buf(), detail: e.to_string() })
}

/// 8-bit grayscale PNG of a [0,1] plane, row-major.
pub fn write_gray_png(path: &Path, plane: &[f32], height: usize, width: usize) -> Result<()> {
    let mut buf = image::GrayImage::new(width as u32, height as u32);
    for (j, i, px) in buf.enumerate_pixels_mut() {
        px.0[0] = (plane[i as usize * width + j as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    buf.save(path)
        .map_err(|e| Error::OutputWrite { path: path.to_path_buf(), detail: e.to_string() })
}
