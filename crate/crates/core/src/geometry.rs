//! Quantities derived from exemplar box geometry: per-exemplar scale maps,
//! the magnitude embedding, the scale prior and the branch it selects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Nearest integer, ties rounded up.
pub fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Axis-aligned exemplar box in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl ExemplarBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::InvalidArgument(format!("degenerate box {self:?}")));
        }
        if self.width() < 1.0 || self.height() < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "box {self:?} is narrower than one pixel after rounding"
            )));
        }
        Ok(())
    }

    /// Whether the box lies inside a `width × height` image.
    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width as f64 && self.y2 <= height as f64
    }

    /// Width `w_i` in whole pixels.
    pub fn width(&self) -> f64 {
        round_half_up(self.x2) - round_half_up(self.x1)
    }

    /// Height `h_i` in whole pixels.
    pub fn height(&self) -> f64 {
        round_half_up(self.y2) - round_half_up(self.y1)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

/// Scale-embedding map of an `h_i × w_i` exemplar resized to `h × w`:
/// `S(m, n) = m·h/h_i + n·w/w_i`, returned row-major.
pub fn scale_embedding(box_h: f64, box_w: f64, h: usize, w: usize) -> Vec<f64> {
    let (rh, rw) = (h as f64 / box_h, w as f64 / box_w);
    let mut map = Vec::with_capacity(h * w);
    for m in 0..h {
        for n in 0..w {
            map.push(m as f64 * rh + n as f64 * rw);
        }
    }
    map
}

fn check_boxes(boxes: &[ExemplarBox]) -> Result<()> {
    if boxes.is_empty() {
        return Err(Error::InvalidArgument("at least one exemplar box is required".into()));
    }
    boxes.iter().try_for_each(ExemplarBox::validate)
}

/// Mean area resize factor `M_e = (1/l)·Σ (w·h)/(w_i·h_i)`.
pub fn magnitude_embedding(boxes: &[ExemplarBox], h: usize, w: usize) -> Result<f64> {
    check_boxes(boxes)?;
    let target = (h * w) as f64;
    let total: f64 = boxes.iter().map(|b| target / (b.width() * b.height())).sum();
    Ok(total / boxes.len() as f64)
}

/// Scale prior `s = (1/l)·sqrt(Σ h_i · Σ w_i)`.
pub fn scale_prior(boxes: &[ExemplarBox]) -> Result<f64> {
    check_boxes(boxes)?;
    let sum_h: f64 = boxes.iter().map(ExemplarBox::height).sum();
    let sum_w: f64 = boxes.iter().map(ExemplarBox::width).sum();
    Ok((sum_h * sum_w).sqrt() / boxes.len() as f64)
}

/// Upper bounds of every scale interval except the last, which is unbounded.
/// With bounds `[S1, S2]` the intervals are `(0, S1]`, `(S1, S2]`, `(S2, ∞)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BranchThresholds {
    bounds: Vec<f64>,
}

impl Default for BranchThresholds {
    fn default() -> Self {
        Self {
            bounds: vec![32.0, 64.0],
        }
    }
}

impl BranchThresholds {
    pub fn new(bounds: Vec<f64>) -> Result<Self> {
        if bounds.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::Config(format!("thresholds must be positive: {bounds:?}")));
        }
        if bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "thresholds must be strictly increasing: {bounds:?}"
            )));
        }
        Ok(Self { bounds })
    }

    /// A single interval `(0, ∞)`, i.e. one branch.
    pub fn single() -> Self {
        Self { bounds: Vec::new() }
    }

    pub fn bounds(&self) -> &[f64] {
        &self.bounds
    }

    pub fn branch_count(&self) -> usize {
        self.bounds.len() + 1
    }
}

/// Counter branch, stored zero-based and displayed one-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Branch(pub usize);

impl Branch {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn number(self) -> usize {
        self.0 + 1
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Picks the branch whose right-closed interval contains `s`.
pub fn branch_select(s: f64, thresholds: &BranchThresholds) -> Branch {
    Branch(thresholds.bounds.iter().take_while(|&&b| s > b).count())
}

/// Exemplars resized for tokenization, with the geometry derived from them.
#[derive(Clone, Debug)]
pub struct ExemplarSet {
    pub boxes: Vec<ExemplarBox>,
    /// One `size × size` RGB raster per box.
    pub patches: Vec<Raster>,
    /// One row-major `size × size` scale-embedding map per box.
    pub scale_maps: Vec<Vec<f64>>,
    pub magnitude: f64,
    pub scale_prior: f64,
    pub size: usize,
}

pub const MAX_EXEMPLARS: usize = 3;

impl ExemplarSet {
    /// Crops each box from `image` and resizes it bilinearly to `size × size`.
    pub fn build(image: &Raster, boxes: &[ExemplarBox], size: usize) -> Result<Self> {
        if boxes.is_empty() || boxes.len() > MAX_EXEMPLARS {
            return Err(Error::InvalidArgument(format!(
                "expected 1 to {MAX_EXEMPLARS} exemplar boxes, got {}",
                boxes.len()
            )));
        }
        let mut patches = Vec::with_capacity(boxes.len());
        let mut scale_maps = Vec::with_capacity(boxes.len());
        for b in boxes {
            b.validate()?;
            if !b.within(image.width(), image.height()) {
                return Err(Error::InvalidArgument(format!(
                    "box {b:?} outside {}x{} image",
                    image.width(),
                    image.height()
                )));
            }
            let x0 = round_half_up(b.x1) as usize;
            let y0 = round_half_up(b.y1) as usize;
            let crop = image.crop(x0, y0, b.width() as usize, b.height() as usize)?;
            patches.push(crop.resize_bilinear(size, size));
            scale_maps.push(scale_embedding(b.height(), b.width(), size, size));
        }
        Ok(Self {
            boxes: boxes.to_vec(),
            patches,
            scale_maps,
            magnitude: magnitude_embedding(boxes, size, size)?,
            scale_prior: scale_prior(boxes)?,
            size,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Keeps only exemplar `index` (one-shot protocol).
    pub fn single(&self, index: usize) -> Result<Self> {
        if index >= self.len() {
            return Err(Error::InvalidArgument(format!("no exemplar {index}")));
        }
        let boxes = vec![self.boxes[index]];
        Ok(Self {
            magnitude: magnitude_embedding(&boxes, self.size, self.size)?,
            scale_prior: scale_prior(&boxes)?,
            boxes,
            patches: vec![self.patches[index].clone()],
            scale_maps: vec![self.scale_maps[index].clone()],
            size: self.size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq(side: f64) -> ExemplarBox {
        ExemplarBox::new(0.0, 0.0, side, side).unwrap()
    }

    #[test]
    fn scale_embedding_examples() {
        let s = scale_embedding(64.0, 64.0, 64, 64);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[64 + 1], 2.0);
        assert_eq!(s[5 * 64 + 7], 12.0);
        let s = scale_embedding(32.0, 32.0, 64, 64);
        assert_eq!(s[64 + 1], 4.0);
        let s = scale_embedding(16.0, 64.0, 64, 64);
        assert_eq!(s[64 + 1], 5.0);
    }

    #[test]
    fn magnitude_examples() {
        assert_eq!(magnitude_embedding(&[sq(64.0)], 64, 64).unwrap(), 1.0);
        assert_eq!(magnitude_embedding(&[sq(32.0)], 64, 64).unwrap(), 4.0);
        let three = [sq(32.0), sq(64.0), sq(128.0)];
        assert_eq!(magnitude_embedding(&three, 64, 64).unwrap(), 1.75);
        assert!(magnitude_embedding(&[], 64, 64).is_err());
    }

    #[test]
    fn scale_prior_examples() {
        assert_eq!(scale_prior(&[sq(64.0)]).unwrap(), 64.0);
        assert_eq!(scale_prior(&[sq(32.0), sq(32.0), sq(32.0)]).unwrap(), 32.0);
        assert_eq!(scale_prior(&[sq(16.0), sq(32.0), sq(48.0)]).unwrap(), 32.0);
    }

    #[test]
    fn branch_select_examples() {
        let t = BranchThresholds::default();
        assert_eq!(branch_select(20.0, &t).number(), 1);
        assert_eq!(branch_select(32.0, &t).number(), 1);
        assert_eq!(branch_select(32.5, &t).number(), 2);
        assert_eq!(branch_select(64.0, &t).number(), 2);
        assert_eq!(branch_select(200.0, &t).number(), 3);
        assert_eq!(branch_select(1e9, &BranchThresholds::single()).number(), 1);
    }

    #[test]
    fn zero_area_box_rejected() {
        assert!(ExemplarBox::new(3.0, 3.0, 3.0, 9.0).is_err());
        // 0.2 -> 0 and 0.4 -> 0 after rounding: zero width
        assert!(ExemplarBox::new(0.2, 0.0, 0.4, 5.0).is_err());
    }

    #[test]
    fn fractional_coordinates_round_half_up() {
        let b = ExemplarBox::new(0.5, 1.49, 10.5, 11.5).unwrap();
        assert_eq!(b.width(), 10.0); // 11 - 1
        assert_eq!(b.height(), 11.0); // 12 - 1
    }

    #[test]
    fn thresholds_validate() {
        assert!(BranchThresholds::new(vec![64.0, 32.0]).is_err());
        assert!(BranchThresholds::new(vec![0.0]).is_err());
        assert_eq!(BranchThresholds::new(vec![8.0, 16.0, 32.0]).unwrap().branch_count(), 4);
    }
}
