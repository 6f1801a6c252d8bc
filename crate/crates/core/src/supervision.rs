//! Training targets: density maps from dots, redundant window counts, the
//! branch-gated L1 loss and mosaic augmentation.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::counter::{RedundantCountMap, WindowGeometry};
use crate::data::{AnnotatedImage, Sample};
use crate::error::{Error, Result};
use crate::geometry::{branch_select, Branch, BranchThresholds};
use crate::raster::Raster;
use crate::tensor::Tensor;

/// Pixel-resolution density whose mass equals the dot count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub values: Vec<f64>,
    pub dot_count: usize,
}

impl DensityMap {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Kernel width for scale prior `s`: `max(1, s/4)`.
pub fn kernel_sigma(s: f64) -> f64 {
    (s / 4.0).max(1.0)
}

/// Places a truncated isotropic Gaussian (radius `⌈4σ⌉`) at each dot's pixel
/// and renormalizes the part inside the image to unit mass.
pub fn density_from_dots(dots: &[(f64, f64)], width: usize, height: usize, sigma: f64) -> Result<DensityMap> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("kernel sigma {sigma} must be positive")));
    }
    let mut values = vec![0.0; width * height];
    let radius = (4.0 * sigma).ceil() as i64;
    let two_var = 2.0 * sigma * sigma;
    let mut kernel = Vec::new();
    for (i, &(x, y)) in dots.iter().enumerate() {
        let inside = x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64;
        if !inside {
            return Err(Error::InvalidArgument(format!(
                "dot {i} at ({x}, {y}) lies outside the {width}x{height} image"
            )));
        }
        let (px, py) = (x.floor() as i64, y.floor() as i64);
        kernel.clear();
        let mut mass = 0.0;
        for dy in -radius..=radius {
            let yy = py + dy;
            if yy < 0 || yy >= height as i64 {
                continue;
            }
            for dx in -radius..=radius {
                let xx = px + dx;
                let d2 = (dx * dx + dy * dy) as f64;
                if xx < 0 || xx >= width as i64 || d2 > (radius * radius) as f64 {
                    continue;
                }
                let v = (-d2 / two_var).exp();
                mass += v;
                kernel.push((yy as usize * width + xx as usize, v));
            }
        }
        for &(idx, v) in &kernel {
            values[idx] += v / mass;
        }
    }
    Ok(DensityMap {
        width,
        height,
        values,
        dot_count: dots.len(),
    })
}

/// Sum of the density inside every `k × k` pixel window at stride `z`.
pub fn redundant_gt(d: &DensityMap, geometry: &WindowGeometry, branch: Branch) -> Result<RedundantCountMap> {
    let (h, w) = geometry.pixel_dims();
    if (d.height, d.width) != (h, w) {
        return Err(Error::Shape(format!(
            "{}x{} density does not match the {w}x{h} pixel grid of the window geometry",
            d.width, d.height
        )));
    }
    if geometry.k > w || geometry.k > h {
        return Err(Error::InvalidArgument(format!("block {} exceeds the image", geometry.k)));
    }
    // summed-area table with a zero border row/column
    let stride = w + 1;
    let mut sat = vec![0.0; (h + 1) * stride];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += d.values[y * w + x];
            sat[(y + 1) * stride + x + 1] = sat[y * stride + x + 1] + row;
        }
    }
    let (k, z) = (geometry.k, geometry.z);
    let mut values = Vec::with_capacity(geometry.len());
    for jy in 0..geometry.out.0 {
        for jx in 0..geometry.out.1 {
            let (y0, x0) = (jy * z, jx * z);
            let (y1, x1) = (y0 + k, x0 + k);
            let s = sat[y1 * stride + x1] - sat[y0 * stride + x1] - sat[y1 * stride + x0] + sat[y0 * stride + x0];
            values.push(s.max(0.0));
        }
    }
    RedundantCountMap::new(values, *geometry, branch)
}

/// Mean absolute error of the branch selected by `s`. The other branches
/// are not part of the expression, so they receive no gradient.
///
/// `preds` holds `[rows, cols]` graph outputs and `gts` the matching
/// targets, in the same branch order.
pub fn gated_l1_loss(
    g: &mut Graph,
    preds: &[(Branch, Var)],
    gts: &[RedundantCountMap],
    s: f64,
    thresholds: &BranchThresholds,
) -> Result<Var> {
    let selected = branch_select(s, thresholds);
    let (_, pred) = preds
        .iter()
        .find(|(b, _)| *b == selected)
        .ok_or_else(|| Error::InvalidArgument(format!("no prediction for selected branch {selected}")))?;
    let gt = gts
        .iter()
        .find(|m| m.branch == selected)
        .ok_or_else(|| Error::InvalidArgument(format!("no target for selected branch {selected}")))?;
    let shape = g.shape(*pred).to_vec();
    if shape != [gt.geometry.out.0, gt.geometry.out.1] {
        return Err(Error::Shape(format!(
            "branch {selected}: prediction {shape:?} but target window grid {:?}",
            gt.geometry.out
        )));
    }
    let target = g.constant(Tensor::new(&shape, gt.values.clone())?);
    let diff = g.sub(*pred, target)?;
    let abs = g.abs(diff);
    Ok(g.mean(abs))
}

/// 2×2 mosaic of side `size`: the current image's region occupies one random
/// quadrant and keeps its dots and boxes; the other quadrants are crops of
/// images from other categories and carry no dots. Returns `current`
/// unchanged when no other-category image exists or no region of side
/// `size / 2` contains all exemplar boxes. Region origins are drawn only from
/// the feasible set, so a placement never needs to be retried.
pub fn mosaic_augment<R: Rng + ?Sized>(current: &Sample, pool: &[Sample], size: usize, rng: &mut R) -> Sample {
    let q = size / 2;
    let others: Vec<&Sample> = pool
        .iter()
        .filter(|s| s.ann.category != current.ann.category && s.ann.width >= q && s.ann.height >= q)
        .collect();
    let (w, h) = (current.ann.width, current.ann.height);
    if others.is_empty() || q == 0 || w < q || h < q {
        return current.clone();
    }
    // window of region origins keeping every box inside the region
    let lo_x = current.ann.boxes.iter().map(|b| b.x2.ceil() as i64).max().unwrap_or(0) - q as i64;
    let hi_x = current.ann.boxes.iter().map(|b| b.x1.floor() as i64).min().unwrap_or(0);
    let lo_y = current.ann.boxes.iter().map(|b| b.y2.ceil() as i64).max().unwrap_or(0) - q as i64;
    let hi_y = current.ann.boxes.iter().map(|b| b.y1.floor() as i64).min().unwrap_or(0);
    let (max_x, max_y) = ((w - q) as i64, (h - q) as i64);
    let (x_lo, x_hi) = (lo_x.max(0), hi_x.min(max_x));
    let (y_lo, y_hi) = (lo_y.max(0), hi_y.min(max_y));
    if x_lo > x_hi || y_lo > y_hi {
        return current.clone();
    }
    let ox = rng.gen_range(x_lo..=x_hi) as usize;
    let oy = rng.gen_range(y_lo..=y_hi) as usize;
    let quadrant = rng.gen_range(0..4usize);
    let mut raster = Raster::new(2 * q, 2 * q);
    let corner = |i: usize| ((i % 2) * q, (i / 2) * q);
    for i in 0..4 {
        let (cx, cy) = corner(i);
        if i == quadrant {
            raster.paste(&current.raster.crop(ox, oy, q, q).expect("region inside image"), cx, cy);
        } else {
            let src = others.choose(rng).expect("non-empty pool");
            let sx = rng.gen_range(0..=src.ann.width - q);
            let sy = rng.gen_range(0..=src.ann.height - q);
            raster.paste(&src.raster.crop(sx, sy, q, q).expect("crop inside image"), cx, cy);
        }
    }
    let (cx, cy) = corner(quadrant);
    let (dx, dy) = (cx as f64 - ox as f64, cy as f64 - oy as f64);
    let (fx, fy, fq) = (ox as f64, oy as f64, q as f64);
    let points = current
        .ann
        .points
        .iter()
        .filter(|&&(x, y)| x >= fx && y >= fy && x < fx + fq && y < fy + fq)
        .map(|&(x, y)| (x + dx, y + dy))
        .collect();
    let ann = AnnotatedImage {
        width: 2 * q,
        height: 2 * q,
        points,
        boxes: current.ann.boxes.iter().map(|b| b.translated(dx, dy)).collect(),
        ..current.ann.clone()
    };
    Sample { ann, raster }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_mass() {
        let d = density_from_dots(&[], 16, 16, 2.0).unwrap();
        assert_eq!(d.sum(), 0.0);
        let d = density_from_dots(&[(8.5, 8.5)], 32, 32, 2.0).unwrap();
        assert!((d.sum() - 1.0).abs() < 1e-12);
        let dots = [(0.0, 0.0), (31.9, 0.2), (15.0, 15.0), (31.0, 31.0), (3.0, 28.0), (16.0, 1.0), (30.0, 15.0)];
        let d = density_from_dots(&dots, 32, 32, 3.0).unwrap();
        assert!((d.sum() - 7.0).abs() < 1e-6);
        let err = density_from_dots(&[(1.0, 1.0), (32.0, 1.0)], 32, 32, 1.0).unwrap_err();
        assert!(err.to_string().contains("dot 1"));
    }

    #[test]
    fn uniform_density_windows() {
        let geom = WindowGeometry::new(32, 16, 16, (4, 4)).unwrap();
        let d = DensityMap {
            width: 64,
            height: 64,
            values: vec![0.25; 64 * 64],
            dot_count: 0,
        };
        let r = redundant_gt(&d, &geom, Branch(0)).unwrap();
        assert_eq!(r.geometry.out, (3, 3));
        assert!(r.values.iter().all(|&v| (v - 0.25 * 32.0 * 32.0).abs() < 1e-9));
    }
}
