//! Attention-guided visualization of predicted counts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::round_half_up;
use crate::normalize::NormalizedCountMap;
use crate::raster::Raster;
use crate::tensor::resize_bilinear;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisMode {
    Detection,
    Density,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualizationMap {
    pub mode: VisMode,
    pub rows: usize,
    pub cols: usize,
    pub hint: Vec<bool>,
    /// Detection: the hint as 0/1. Density: hint ⊙ count map.
    pub overlay: Vec<f64>,
    pub n_top: usize,
}

/// `round(total · magnitude)` (half up), clamped to `[0, cells]`.
pub fn top_count(total: f64, magnitude: f64, cells: usize) -> usize {
    let n = round_half_up(total * magnitude);
    if n.is_nan() || n <= 0.0 {
        0
    } else {
        (n.min(cells as f64)) as usize
    }
}

/// Indices of the `n` largest values, ties broken by lower index.
pub fn top_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Marks the `N_top` strongest match-map cells. `match_map` is row-major
/// `rows × cols`; `c` is resampled bilinearly when its grid differs.
pub fn visualize(
    c: &NormalizedCountMap,
    match_map: &[f64],
    rows: usize,
    cols: usize,
    magnitude: f64,
    mode: VisMode,
) -> Result<VisualizationMap> {
    if rows * cols == 0 || match_map.len() != rows * cols {
        return Err(Error::Shape(format!(
            "match map has {} cells, expected {rows}x{cols}",
            match_map.len()
        )));
    }
    let cells = rows * cols;
    let n_top = top_count(c.total(), magnitude, cells);
    let mut hint = vec![false; cells];
    for i in top_indices(match_map, n_top) {
        hint[i] = true;
    }
    let overlay = match mode {
        VisMode::Detection => hint.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect(),
        VisMode::Density => {
            let counts = if (c.rows, c.cols) == (rows, cols) {
                c.values().to_vec()
            } else {
                resize_bilinear(c.values(), c.rows, c.cols, 1, rows, cols)
            };
            hint.iter()
                .zip(counts)
                .map(|(&h, v)| if h { v } else { 0.0 })
                .collect()
        }
    };
    Ok(VisualizationMap {
        mode,
        rows,
        cols,
        hint,
        overlay,
        n_top,
    })
}

/// Overlay colour (red).
const OVERLAY_RGB: [f32; 3] = [1.0, 0.0, 0.0];

/// Overlay upsampled to `width × height`: nearest for detection, bilinear
/// for density. Density values are scaled by their maximum into `[0, 1]`.
pub fn upsample_overlay(vis: &VisualizationMap, width: usize, height: usize) -> Vec<f64> {
    match vis.mode {
        VisMode::Detection => {
            let mut out = Vec::with_capacity(width * height);
            for y in 0..height {
                let r = y * vis.rows / height;
                for x in 0..width {
                    out.push(vis.overlay[r * vis.cols + x * vis.cols / width]);
                }
            }
            out
        }
        VisMode::Density => {
            let max = vis.overlay.iter().cloned().fold(0.0, f64::max);
            if max <= 0.0 {
                return vec![0.0; width * height];
            }
            let scaled: Vec<f64> = vis.overlay.iter().map(|v| (v / max).max(0.0)).collect();
            resize_bilinear(&scaled, vis.rows, vis.cols, 1, height, width)
        }
    }
}

/// Alpha-blends the overlay onto `base` at `opacity` in `[0, 1]`.
pub fn blend(vis: &VisualizationMap, base: &Raster, opacity: f64) -> Result<Raster> {
    if !(0.0..=1.0).contains(&opacity) {
        return Err(Error::InvalidArgument(format!("opacity {opacity} outside [0, 1]")));
    }
    let (w, h) = (base.width(), base.height());
    let alpha = upsample_overlay(vis, w, h);
    let mut out = base.clone();
    for y in 0..h {
        for x in 0..w {
            let a = (alpha[y * w + x] * opacity) as f32;
            if a == 0.0 {
                continue;
            }
            let p = base.pixel(x, y);
            let mut q = [0.0; 3];
            for c in 0..3 {
                q[c] = p[c] * (1.0 - a) + OVERLAY_RGB[c] * a;
            }
            out.set_pixel(x, y, q);
        }
    }
    Ok(out)
}

/// Writes the blended overlay as PNG.
pub fn render(vis: &VisualizationMap, base: &Raster, opacity: f64, path: &Path) -> Result<()> {
    blend(vis, base, opacity)?.save_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_top_arithmetic() {
        assert_eq!(top_count(10.0, 4.0, 1000), 40);
        assert_eq!(top_count(0.0, 4.0, 10), 0);
        assert_eq!(top_count(-3.0, 1.0, 10), 0);
        assert_eq!(top_count(2.5, 1.0, 10), 3);
        assert_eq!(top_count(100.0, 1.0, 10), 10);
    }

    #[test]
    fn ties_prefer_row_major_order() {
        assert_eq!(top_indices(&[1.0, 3.0, 3.0, 2.0, 3.0], 2), vec![1, 2]);
    }

    #[test]
    fn zero_count_gives_empty_hint() {
        let c = NormalizedCountMap::new(2, 2, vec![0.0; 4]).unwrap();
        let v = visualize(&c, &[0.1, 0.2, 0.3, 0.4], 2, 2, 3.0, VisMode::Density).unwrap();
        assert!(v.hint.iter().all(|h| !h));
        assert!(v.overlay.iter().all(|&o| o == 0.0));
    }

    #[test]
    fn nearest_block_pattern() {
        let vis = VisualizationMap {
            mode: VisMode::Detection,
            rows: 2,
            cols: 2,
            hint: vec![true, false, false, true],
            overlay: vec![1.0, 0.0, 0.0, 1.0],
            n_top: 2,
        };
        let up = upsample_overlay(&vis, 32, 32);
        for y in 0..32 {
            for x in 0..32 {
                let expect = if (y < 16) == (x < 16) { 1.0 } else { 0.0 };
                assert_eq!(up[y * 32 + x], expect, "pixel ({x}, {y})");
            }
        }
    }
}
