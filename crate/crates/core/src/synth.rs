//! Seeded synthetic counting scenes.
//!
//! Each scene has one target category (a shape family and a base colour)
//! drawn on a noisy soil-like background, plus distractors from a category
//! that differs in both family and colour. Points are target centres and the
//! exemplar boxes are the tight pixel boxes of up to three random targets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_annotations, write_split, AnnotatedImage, Sample, SplitMode, ANNOTATION_FILE, SPLIT_DIR};
use crate::error::{Error, Result};
use crate::geometry::{ExemplarBox, MAX_EXEMPLARS};
use crate::raster::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Disc,
    Ellipse,
    /// Three overlapping lobes around a common centre.
    Cluster,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 3] = [ShapeFamily::Disc, ShapeFamily::Ellipse, ShapeFamily::Cluster];

    fn name(self) -> &'static str {
        match self {
            ShapeFamily::Disc => "disc",
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Cluster => "cluster",
        }
    }
}

/// Named base colours for target categories.
pub const PALETTE: [(&str, [f32; 3]); 4] = [
    ("red", [0.85, 0.15, 0.12]),
    ("yellow", [0.92, 0.82, 0.18]),
    ("green", [0.25, 0.75, 0.22]),
    ("violet", [0.55, 0.30, 0.85]),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Category {
    pub family: ShapeFamily,
    pub colour: usize,
}

impl Category {
    pub fn name(&self) -> String {
        format!("{}-{}", self.family.name(), PALETTE[self.colour].0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Target families to draw categories from.
    pub families: Vec<ShapeFamily>,
    /// Inclusive target count range.
    pub count_range: (usize, usize),
    /// Inclusive range of the per-scene nominal radius in pixels.
    pub radius_range: (f64, f64),
    /// Relative per-target radius jitter around the scene radius.
    pub radius_jitter: f64,
    pub distractor_range: (usize, usize),
    /// Maximum per-channel colour deviation of a target from its base colour.
    pub colour_jitter: f32,
    /// Fraction of the summed radii two shapes may overlap by.
    pub max_overlap: f64,
    pub placement_retries: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            families: ShapeFamily::ALL.to_vec(),
            count_range: (3, 30),
            radius_range: (4.0, 9.0),
            radius_jitter: 0.15,
            distractor_range: (0, 4),
            colour_jitter: 0.08,
            max_overlap: 0.1,
            placement_retries: 200,
            seed: 0,
        }
    }
}

const SCENE_ATTEMPTS: usize = 100;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let (r0, r1) = self.radius_range;
        if !(r0.is_finite() && r1.is_finite() && r0 > 0.0 && r0 <= r1) {
            return fail(format!("radius range {:?} must be positive and ordered", self.radius_range));
        }
        if self.count_range.0 > self.count_range.1 || self.distractor_range.0 > self.distractor_range.1 {
            return fail("count ranges must be ordered".into());
        }
        if self.count_range.1 == 0 {
            return fail("count range [0, 0] can never produce a scene with targets".into());
        }
        if self.families.is_empty() {
            return fail("at least one shape family is required".into());
        }
        let extent = r1 * (1.0 + self.radius_jitter);
        if (self.width.min(self.height) as f64) < 2.0 * extent + 2.0 {
            return fail(format!(
                "{}x{} canvas cannot hold a target of radius {extent:.1}",
                self.width, self.height
            ));
        }
        if !(0.0..1.0).contains(&self.max_overlap) || !(0.0..1.0).contains(&self.radius_jitter) {
            return fail("max_overlap and radius_jitter must lie in [0, 1)".into());
        }
        if !(0.0..=0.5).contains(&self.colour_jitter) {
            return fail("colour_jitter must lie in [0, 0.5]".into());
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<Category> {
        self.families
            .iter()
            .flat_map(|&family| (0..PALETTE.len()).map(move |colour| Category { family, colour }))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    family: ShapeFamily,
    cx: f64,
    cy: f64,
    r: f64,
    /// Ellipse axis ratio or cluster rotation, depending on family.
    aspect: f64,
    horizontal: bool,
    colour: [f32; 3],
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.family {
            ShapeFamily::Disc => dx * dx + dy * dy <= self.r * self.r,
            ShapeFamily::Ellipse => {
                let (a, b) = if self.horizontal { (self.r, self.r * self.aspect) } else { (self.r * self.aspect, self.r) };
                (dx / a).powi(2) + (dy / b).powi(2) <= 1.0
            }
            ShapeFamily::Cluster => {
                let lobe = self.r * 0.55;
                (0..3).any(|i| {
                    let t = self.aspect + i as f64 * std::f64::consts::TAU / 3.0;
                    let (lx, ly) = (self.cx + 0.45 * self.r * t.cos(), self.cy + 0.45 * self.r * t.sin());
                    (x - lx).powi(2) + (y - ly).powi(2) <= lobe * lobe
                })
            }
        }
    }

    /// Paints pixels whose centres fall inside; returns the tight box.
    fn paint(&self, raster: &mut Raster) -> Option<ExemplarBox> {
        let (w, h) = (raster.width() as f64, raster.height() as f64);
        let x0 = (self.cx - self.r - 1.0).floor().max(0.0) as usize;
        let y0 = (self.cy - self.r - 1.0).floor().max(0.0) as usize;
        let x1 = (self.cx + self.r + 1.0).ceil().min(w - 1.0) as usize;
        let y1 = (self.cy + self.r + 1.0).ceil().min(h - 1.0) as usize;
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if !self.contains(px, py) {
                    continue;
                }
                // darker rim for a little shading
                let d = ((px - self.cx).powi(2) + (py - self.cy).powi(2)).sqrt() / self.r;
                let shade = (1.0 - 0.25 * d.min(1.0) as f32).max(0.0);
                raster.set_pixel(x, y, self.colour.map(|c| (c * shade).clamp(0.0, 1.0)));
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                });
            }
        }
        bounds.map(|(a, b, c, d)| ExemplarBox {
            x1: a as f64,
            y1: b as f64,
            x2: (c + 1) as f64,
            y2: (d + 1) as f64,
        })
    }
}

fn background<R: Rng>(w: usize, h: usize, rng: &mut R) -> Raster {
    let base = [
        0.42 + rng.gen_range(-0.05..0.05),
        0.33 + rng.gen_range(-0.05..0.05),
        0.24 + rng.gen_range(-0.04..0.04),
    ];
    let mut r = Raster::filled(w, h, base);
    for y in 0..h {
        for x in 0..w {
            let n: f32 = rng.gen_range(-0.04..0.04);
            r.set_pixel(x, y, base.map(|c| (c + n).clamp(0.0, 1.0)));
        }
    }
    r
}

fn jittered<R: Rng>(base: [f32; 3], jitter: f32, rng: &mut R) -> [f32; 3] {
    if jitter == 0.0 {
        return base;
    }
    base.map(|c| (c + rng.gen_range(-jitter..=jitter)).clamp(0.0, 1.0))
}

/// Rejection-samples up to `n` shapes that keep clear of `placed`.
fn place<R: Rng>(
    cfg: &SynthConfig,
    n: usize,
    radius: f64,
    cat: Category,
    placed: &mut Vec<Shape>,
    rng: &mut R,
) -> usize {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut added = 0;
    for _ in 0..n {
        for _ in 0..cfg.placement_retries {
            let j = cfg.radius_jitter;
            let r = if j > 0.0 { radius * (1.0 + rng.gen_range(-j..=j)) } else { radius };
            let cx = rng.gen_range(r + 1.0..=w - r - 1.0);
            let cy = rng.gen_range(r + 1.0..=h - r - 1.0);
            let clear = placed.iter().all(|s| {
                let dist = ((s.cx - cx).powi(2) + (s.cy - cy).powi(2)).sqrt();
                dist >= (1.0 - cfg.max_overlap) * (s.r + r)
            });
            if clear {
                placed.push(Shape {
                    family: cat.family,
                    cx,
                    cy,
                    r,
                    aspect: match cat.family {
                        ShapeFamily::Ellipse => rng.gen_range(0.5..0.8),
                        _ => rng.gen_range(0.0..std::f64::consts::TAU),
                    },
                    horizontal: rng.gen(),
                    colour: jittered(PALETTE[cat.colour].1, cfg.colour_jitter, rng),
                });
                added += 1;
                break;
            }
        }
    }
    added
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn scene_id(index: u64) -> String {
    format!("scene_{index:05}")
}

/// Renders scene `index` of the dataset defined by `cfg`. Scenes where no
/// target could be placed are redrawn.
pub fn synth_scene(cfg: &SynthConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index);
    let cats = cfg.categories();
    let (r0, r1) = cfg.radius_range;
    for _ in 0..SCENE_ATTEMPTS {
        let cat = *cats.choose(&mut rng).expect("non-empty categories");
        let n = rng.gen_range(cfg.count_range.0..=cfg.count_range.1);
        let radius = if r0 == r1 { r0 } else { rng.gen_range(r0..=r1) };
        let mut raster = background(cfg.width, cfg.height, &mut rng);
        let mut targets = Vec::new();
        if n == 0 || place(cfg, n, radius, cat, &mut targets, &mut rng) == 0 {
            continue;
        }
        let others: Vec<Category> = all_categories()
            .into_iter()
            .filter(|c| c.family != cat.family && c.colour != cat.colour)
            .collect();
        let n_distract = rng.gen_range(cfg.distractor_range.0..=cfg.distractor_range.1);
        let mut shapes = targets.clone();
        if let Some(&dcat) = others.choose(&mut rng) {
            let d_radius = rng.gen_range(r0..=r1);
            place(cfg, n_distract, d_radius, dcat, &mut shapes, &mut rng);
        }
        for s in &shapes[targets.len()..] {
            s.paint(&mut raster);
        }
        let mut boxes = Vec::with_capacity(targets.len());
        for t in &targets {
            boxes.push(t.paint(&mut raster));
        }
        let mut candidates: Vec<usize> = (0..targets.len()).filter(|&i| boxes[i].is_some()).collect();
        candidates.shuffle(&mut rng);
        candidates.truncate(MAX_EXEMPLARS);
        candidates.sort_unstable();
        if candidates.is_empty() {
            continue;
        }
        let id = scene_id(index);
        let ann = AnnotatedImage {
            image_path: format!("images/{id}.png"),
            id,
            width: cfg.width,
            height: cfg.height,
            points: targets.iter().map(|t| (t.cx, t.cy)).collect(),
            boxes: candidates.iter().map(|&i| boxes[i].expect("painted")).collect(),
            category: cat.name(),
        };
        ann.validate()?;
        return Sample::new(ann, raster.quantized());
    }
    Err(Error::Config(format!(
        "no scene with targets after {SCENE_ATTEMPTS} attempts (seed {}, index {index})",
        cfg.seed
    )))
}

fn all_categories() -> Vec<Category> {
    ShapeFamily::ALL
        .iter()
        .flat_map(|&family| (0..PALETTE.len()).map(move |colour| Category { family, colour }))
        .collect()
}

/// Provenance record written next to a generated dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub scenes: usize,
    pub config: SynthConfig,
    pub split_ratios: Vec<f64>,
    pub split_mode: SplitMode,
    pub split_seed: u64,
}

/// Renders `n` scenes into `root` with annotations, splits and a manifest.
pub fn write_dataset(
    root: &Path,
    cfg: &SynthConfig,
    n: usize,
    ratios: &[f64],
    mode: SplitMode,
) -> Result<Vec<AnnotatedImage>> {
    if n == 0 {
        return Err(Error::Config("scene count must be positive".into()));
    }
    cfg.validate()?;
    let images = root.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let splits_dir = root.join(SPLIT_DIR);
    std::fs::create_dir_all(&splits_dir).map_err(|e| Error::io(&splits_dir, e))?;
    let mut anns = Vec::with_capacity(n);
    for i in 0..n {
        let s = synth_scene(cfg, i as u64)?;
        s.raster.save_png(&root.join(&s.ann.image_path))?;
        anns.push(s.ann);
    }
    write_annotations(&root.join(ANNOTATION_FILE), &anns)?;
    let splits = crate::data::make_splits(&anns, ratios, cfg.seed, mode)?;
    for (name, ids) in &splits {
        write_split(&splits_dir.join(format!("{name}.txt")), ids)?;
    }
    let manifest = Manifest {
        generator: format!("tassel-core {}", env!("CARGO_PKG_VERSION")),
        scenes: n,
        config: cfg.clone(),
        split_ratios: ratios.to_vec(),
        split_mode: mode,
        split_seed: cfg.seed,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(anns)
}
