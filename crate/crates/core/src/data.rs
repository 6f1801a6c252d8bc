//! Annotation records, dataset loading, preprocessing and split files.
//!
//! A dataset directory holds
//!
//! ```text
//! annotations.jsonl   one record per line:
//!                     {"image": "images/scene_00000.png",
//!                      "points": [[x, y], ...],
//!                      "boxes": [[x1, y1, x2, y2], ...],
//!                      "category": "disc-red"}
//! images/             8-bit RGB PNG files
//! splits/<name>.txt   one image identifier (file stem) per line
//! manifest.json       generator configuration and seed (synthetic data only)
//! ```
//!
//! Coordinates are pixels with the origin at the top-left image corner.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ExemplarBox, MAX_EXEMPLARS};
use crate::raster::Raster;

pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const SPLIT_DIR: &str = "splits";

/// On-disk form of one annotation line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub points: Vec<[f64; 2]>,
    pub boxes: Vec<[f64; 4]>,
    pub category: String,
}

/// Validated annotation of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    /// File stem of the image; the identifier used by split files.
    pub id: String,
    /// Relative to the dataset root.
    pub image_path: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<(f64, f64)>,
    pub boxes: Vec<ExemplarBox>,
    pub category: String,
}

/// Identifier of an image path: its file stem.
pub fn image_id(image_path: &str) -> String {
    Path::new(image_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| image_path.to_owned())
}

impl AnnotatedImage {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::Annotation {
                id: self.id.clone(),
                reason,
            })
        };
        if self.category.trim().is_empty() {
            return fail("empty category".into());
        }
        if self.boxes.is_empty() || self.boxes.len() > MAX_EXEMPLARS {
            return fail(format!(
                "{} exemplar boxes, expected 1 to {MAX_EXEMPLARS}",
                self.boxes.len()
            ));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if let Err(e) = b.validate() {
                return fail(format!("box {i}: {e}"));
            }
            if !b.within(self.width, self.height) {
                return fail(format!("box {i} {b:?} outside {}x{} image", self.width, self.height));
            }
        }
        for (i, &(x, y)) in self.points.iter().enumerate() {
            let inside = x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64;
            if !inside {
                return fail(format!(
                    "point {i} ({x}, {y}) outside {}x{} image",
                    self.width, self.height
                ));
            }
        }
        Ok(())
    }

    pub fn to_record(&self) -> AnnotationRecord {
        AnnotationRecord {
            image: self.image_path.clone(),
            points: self.points.iter().map(|&(x, y)| [x, y]).collect(),
            boxes: self.boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect(),
            category: self.category.clone(),
        }
    }

    pub fn from_record(rec: AnnotationRecord, width: usize, height: usize) -> Result<Self> {
        let ann = Self {
            id: image_id(&rec.image),
            image_path: rec.image,
            width,
            height,
            points: rec.points.iter().map(|p| (p[0], p[1])).collect(),
            boxes: rec
                .boxes
                .iter()
                .map(|b| ExemplarBox {
                    x1: b[0],
                    y1: b[1],
                    x2: b[2],
                    y2: b[3],
                })
                .collect(),
            category: rec.category,
        };
        ann.validate()?;
        Ok(ann)
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Writes one JSON record per line.
pub fn write_annotations(path: &Path, anns: &[AnnotatedImage]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for a in anns {
        let line = serde_json::to_string(&a.to_record()).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses every record of an annotation file without checking the images.
pub fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::Annotation {
            id: format!("{}:{}", path.display(), n + 1),
            reason: format!("malformed record: {e}"),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

pub fn write_split(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    if !ids.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads and validates the annotations listed in `split_file`. Image
/// dimensions are read from the image headers.
pub fn load_dataset(root: &Path, split_file: &Path) -> Result<Vec<AnnotatedImage>> {
    let ids = read_split(split_file)?;
    let records = read_records(&root.join(ANNOTATION_FILE))?;
    let mut by_id: HashMap<String, AnnotationRecord> =
        records.into_iter().map(|r| (image_id(&r.image), r)).collect();
    ids.iter()
        .map(|id| {
            let rec = by_id.remove(id).ok_or_else(|| Error::Annotation {
                id: id.clone(),
                reason: format!("listed in {} but has no annotation", split_file.display()),
            })?;
            let path = root.join(&rec.image);
            let (w, h) = image::image_dimensions(&path).map_err(|source| Error::Image { path, source })?;
            AnnotatedImage::from_record(rec, w as usize, h as usize)
        })
        .collect()
}

/// An annotation together with its pixels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub ann: AnnotatedImage,
    pub raster: Raster,
}

impl Sample {
    pub fn new(ann: AnnotatedImage, raster: Raster) -> Result<Self> {
        if (raster.width(), raster.height()) != (ann.width, ann.height) {
            return Err(Error::Annotation {
                id: ann.id.clone(),
                reason: format!(
                    "annotation says {}x{} but the image is {}x{}",
                    ann.width,
                    ann.height,
                    raster.width(),
                    raster.height()
                ),
            });
        }
        Ok(Self { ann, raster })
    }

    pub fn load(root: &Path, ann: AnnotatedImage) -> Result<Self> {
        let raster = Raster::load(&root.join(&ann.image_path))?;
        Self::new(ann, raster)
    }

    /// Rescales pixels and annotations to `width × height`.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if (width, height) == (self.ann.width, self.ann.height) {
            return self.clone();
        }
        let fx = width as f64 / self.ann.width as f64;
        let fy = height as f64 / self.ann.height as f64;
        let clamp = |v: f64, hi: usize| v.min(hi as f64 - 1e-6).max(0.0);
        let ann = AnnotatedImage {
            width,
            height,
            points: self
                .ann
                .points
                .iter()
                .map(|&(x, y)| (clamp(x * fx, width), clamp(y * fy, height)))
                .collect(),
            boxes: self
                .ann
                .boxes
                .iter()
                .map(|b| ExemplarBox {
                    x1: b.x1 * fx,
                    y1: b.y1 * fy,
                    x2: (b.x2 * fx).min(width as f64),
                    y2: (b.y2 * fy).min(height as f64),
                })
                .collect(),
            ..self.ann.clone()
        };
        Self {
            ann,
            raster: self.raster.resize_bilinear(width, height),
        }
    }
}

/// Isotropic rescale so the shorter side equals `target`.
pub fn resize_shortest_side(sample: &Sample, target: usize) -> Sample {
    let (w, h) = (sample.ann.width, sample.ann.height);
    let f = target as f64 / w.min(h) as f64;
    let (nw, nh) = if w <= h {
        (target, ((h as f64 * f).round() as usize).max(target))
    } else {
        (((w as f64 * f).round() as usize).max(target), target)
    };
    sample.resized(nw, nh)
}

/// Rounds both sides to the nearest multiple of `patch` (at least one
/// patch) so the image tokenizes without remainder.
pub fn fit_to_patches(sample: &Sample, patch: usize) -> Sample {
    let snap = |v: usize| (((v as f64 / patch as f64).round() as usize).max(1)) * patch;
    sample.resized(snap(sample.ann.width), snap(sample.ann.height))
}

/// Pixels and dots of a training crop. Exemplars are built from the full
/// image, so boxes are not carried.
#[derive(Clone, Debug)]
pub struct TrainingPatch {
    pub raster: Raster,
    pub points: Vec<(f64, f64)>,
    /// Top-left corner of the crop in the source image.
    pub offset: (usize, usize),
}

/// Uniformly placed `size × size` crop.
pub fn crop_training_patch<R: Rng + ?Sized>(sample: &Sample, size: usize, rng: &mut R) -> Result<TrainingPatch> {
    let (w, h) = (sample.ann.width, sample.ann.height);
    if w < size || h < size {
        return Err(Error::InvalidArgument(format!(
            "{w}x{h} image is smaller than the {size}x{size} crop"
        )));
    }
    let x0 = rng.gen_range(0..=w - size);
    let y0 = rng.gen_range(0..=h - size);
    Ok(crop_at(sample, x0, y0, size))
}

pub fn crop_at(sample: &Sample, x0: usize, y0: usize, size: usize) -> TrainingPatch {
    let (fx, fy) = (x0 as f64, y0 as f64);
    let limit = size as f64;
    let points = sample
        .ann
        .points
        .iter()
        .map(|&(x, y)| (x - fx, y - fy))
        .filter(|&(x, y)| x >= 0.0 && y >= 0.0 && x < limit && y < limit)
        .collect();
    TrainingPatch {
        raster: sample.raster.crop(x0, y0, size, size).expect("crop inside image"),
        points,
        offset: (x0, y0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Random,
    CategoryDisjoint,
}

/// Standard split names for two or three ratios.
pub fn split_names(n: usize) -> Result<&'static [&'static str]> {
    match n {
        2 => Ok(&["train", "test"]),
        3 => Ok(&["train", "val", "test"]),
        _ => Err(Error::InvalidArgument(format!(
            "expected 2 (train/test) or 3 (train/val/test) ratios, got {n}"
        ))),
    }
}

/// Largest-remainder apportionment of `total` items by `ratios`.
fn apportion(total: usize, ratios: &[f64]) -> Vec<usize> {
    let sum: f64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios.iter().map(|r| r / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Partitions identifiers into splits. In category-disjoint mode whole
/// categories are assigned to splits; every split gets at least one.
pub fn make_splits(
    anns: &[AnnotatedImage],
    ratios: &[f64],
    seed: u64,
    mode: SplitMode,
) -> Result<Vec<(String, Vec<String>)>> {
    let names = split_names(ratios.len())?;
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::InvalidArgument(format!("split ratios must be positive: {ratios:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<String>> = match mode {
        SplitMode::Random => {
            let mut ids: Vec<String> = anns.iter().map(|a| a.id.clone()).collect();
            ids.shuffle(&mut rng);
            let counts = apportion(ids.len(), ratios);
            let mut it = ids.into_iter();
            counts.iter().map(|&c| it.by_ref().take(c).collect()).collect()
        }
        SplitMode::CategoryDisjoint => {
            let mut cats: Vec<String> = anns.iter().map(|a| a.category.clone()).collect();
            cats.sort();
            cats.dedup();
            if cats.len() < ratios.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} categories cannot fill {} category-disjoint splits",
                    cats.len(),
                    ratios.len()
                )));
            }
            cats.shuffle(&mut rng);
            let mut counts = apportion(cats.len() - ratios.len(), ratios);
            for c in &mut counts {
                *c += 1;
            }
            let mut it = cats.into_iter();
            counts
                .iter()
                .map(|&c| {
                    let chosen: Vec<String> = it.by_ref().take(c).collect();
                    anns.iter()
                        .filter(|a| chosen.contains(&a.category))
                        .map(|a| a.id.clone())
                        .collect()
                })
                .collect()
        }
    };
    Ok(names.iter().map(|n| n.to_string()).zip(groups).collect())
}

pub fn split_path(root: &Path, name: &str) -> PathBuf {
    root.join(SPLIT_DIR).join(format!("{name}.txt"))
}
