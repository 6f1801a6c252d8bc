//! Token-level counting windows and the per-branch local counters.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::ParamStore;
use crate::encoder::linear_init;
use crate::error::{Error, Result};
use crate::geometry::Branch;
use crate::tensor::Tensor;

/// Counting-window geometry of one branch on a concrete token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGeometry {
    /// Block size in pixels.
    pub k: usize,
    /// Output stride in pixels.
    pub z: usize,
    pub patch: usize,
    pub k_p: usize,
    pub z_p: usize,
    /// Token grid `(H_t, W_t)`.
    pub grid: (usize, usize),
    /// Window grid `(rows, cols)`.
    pub out: (usize, usize),
}

impl WindowGeometry {
    pub fn new(k: usize, z: usize, patch: usize, grid: (usize, usize)) -> Result<Self> {
        if patch == 0 || k == 0 || z == 0 || k % patch != 0 || z % patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "block {k} and stride {z} must be positive multiples of patch size {patch}"
            )));
        }
        let (k_p, z_p) = (k / patch, z / patch);
        let out = grid_out(grid.0, grid.1, k_p, z_p)?;
        Ok(Self {
            k,
            z,
            patch,
            k_p,
            z_p,
            grid,
            out,
        })
    }

    /// Window count.
    pub fn len(&self) -> usize {
        self.out.0 * self.out.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel extent of the token grid.
    pub fn pixel_dims(&self) -> (usize, usize) {
        (self.grid.0 * self.patch, self.grid.1 * self.patch)
    }
}

fn grid_out(h_t: usize, w_t: usize, k_p: usize, z_p: usize) -> Result<(usize, usize)> {
    if k_p == 0 || z_p == 0 {
        return Err(Error::InvalidArgument("window size and stride must be positive".into()));
    }
    if k_p > h_t || k_p > w_t {
        return Err(Error::InvalidArgument(format!(
            "window of {k_p} tokens exceeds the {h_t}x{w_t} token grid"
        )));
    }
    Ok(((h_t - k_p) / z_p + 1, (w_t - k_p) / z_p + 1))
}

/// Top-left tokens `(row, col)` of every window, row-major.
pub fn window_grid(h_t: usize, w_t: usize, k_p: usize, z_p: usize) -> Result<Vec<(usize, usize)>> {
    let (rows, cols) = grid_out(h_t, w_t, k_p, z_p)?;
    Ok((0..rows)
        .flat_map(|jy| (0..cols).map(move |jx| (jy * z_p, jx * z_p)))
        .collect())
}

/// Tokens shared by windows `j` and `j2`, given as `(row, col)` window indices.
pub fn redundancy_overlap(
    j: (usize, usize),
    j2: (usize, usize),
    geometry: &WindowGeometry,
) -> BTreeSet<(usize, usize)> {
    let (k, z) = (geometry.k_p, geometry.z_p);
    let span = |a: usize, b: usize| {
        let lo = (a * z).max(b * z);
        let hi = (a * z + k).min(b * z + k);
        lo..hi.max(lo)
    };
    let ys = span(j.0, j2.0);
    let xs = span(j.1, j2.1);
    ys.flat_map(|y| xs.clone().map(move |x| (y, x))).collect()
}

/// Local counts of one branch over its window grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RedundantCountMap {
    /// Row-major over `geometry.out`.
    pub values: Vec<f64>,
    pub geometry: WindowGeometry,
    pub branch: Branch,
}

impl RedundantCountMap {
    pub fn new(values: Vec<f64>, geometry: WindowGeometry, branch: Branch) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "{} window values for a {}x{} window grid",
                values.len(),
                geometry.out.0,
                geometry.out.1
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("redundant count map".into()));
        }
        Ok(Self {
            values,
            geometry,
            branch,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.geometry.out.1 + col]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.geometry.out.0, self.geometry.out.1], self.values.clone()).expect("non-empty grid")
    }
}

/// Whether counter outputs are rectified.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// All branches, raw outputs.
    Train,
    /// Selected branch only, rectified.
    Infer,
}

/// Parameter slots of one branch counter.
#[derive(Clone, Debug)]
pub(crate) struct BranchSlots {
    pub(crate) slack_w: usize,
    pub(crate) slack_b: usize,
    pub(crate) head_w: usize,
    pub(crate) head_b: usize,
}

impl BranchSlots {
    pub(crate) fn init<R: Rng>(index: usize, dim: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let name = |part: &str| format!("counter.branch{}.{part}", index + 1);
        Self {
            slack_w: store.insert(name("slack.weight"), linear_init(rng, 9 * (dim + 1), dim)),
            slack_b: store.insert(name("slack.bias"), Tensor::zeros(&[dim])),
            head_w: store.insert(name("head.weight"), linear_init(rng, dim, 1)),
            head_b: store.insert(name("head.bias"), Tensor::zeros(&[1])),
        }
    }

    pub(crate) fn slots(&self) -> [usize; 4] {
        [self.slack_w, self.slack_b, self.head_w, self.head_b]
    }
}

/// Slack conv → GELU → window average pool → linear head, optionally
/// rectified. `enhanced` is `[H_t, W_t, C]`; the result is `[rows, cols]`.
pub(crate) fn count_branch(
    g: &mut Graph,
    slots: &BranchSlots,
    params: &[Var],
    enhanced: Var,
    geometry: &WindowGeometry,
    rectify: bool,
) -> Result<Var> {
    let shape = g.shape(enhanced).to_vec();
    if shape.len() != 3 || (shape[0], shape[1]) != geometry.grid {
        return Err(Error::Shape(format!(
            "features {shape:?} do not match the {:?} token grid of the window geometry",
            geometry.grid
        )));
    }
    let h = g.conv2d_3x3(enhanced, params[slots.slack_w], params[slots.slack_b])?;
    let h = g.gelu(h);
    let pooled = g.avg_pool2d(h, geometry.k_p, geometry.z_p)?;
    let d = g.shape(pooled)[2];
    let flat = g.reshape(pooled, &[geometry.len(), d])?;
    let y = g.matmul(flat, params[slots.head_w])?;
    let y = g.add(y, params[slots.head_b])?;
    let y = g.reshape(y, &[geometry.out.0, geometry.out.1])?;
    Ok(if rectify { g.relu(y) } else { y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn window_counts() {
        assert_eq!(window_grid(24, 24, 2, 1).unwrap().len(), 529);
        assert_eq!(window_grid(24, 24, 8, 1).unwrap().len(), 289);
        assert_eq!(window_grid(24, 24, 1, 1).unwrap().len(), 576);
        assert!(window_grid(4, 8, 5, 1).is_err());
        let w = window_grid(5, 6, 2, 2).unwrap();
        assert_eq!(w, vec![(0, 0), (0, 2), (0, 4), (2, 0), (2, 2), (2, 4)]);
    }

    #[test]
    fn overlaps() {
        let g = WindowGeometry::new(32, 16, 16, (24, 24)).unwrap();
        let s = redundancy_overlap((0, 0), (0, 1), &g);
        assert_eq!(s.into_iter().collect::<Vec<_>>(), vec![(0, 1), (1, 1)]);
        let tiled = WindowGeometry::new(32, 32, 16, (24, 24)).unwrap();
        assert!(redundancy_overlap((0, 0), (0, 1), &tiled).is_empty());
        let big = WindowGeometry::new(128, 16, 16, (24, 24)).unwrap();
        assert_eq!(redundancy_overlap((2, 2), (2, 5), &big).len(), 40);
        assert_eq!(big.out, (17, 17));
    }

    #[test]
    fn zero_input_gives_zero_map() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let slots = BranchSlots::init(0, 4, &mut store, &mut rng);
        let mut g = Graph::new();
        let params: Vec<Var> = store.tensors().iter().map(|t| g.param(t.clone())).collect();
        let geom = WindowGeometry::new(32, 16, 16, (6, 6)).unwrap();
        let x = g.constant(Tensor::zeros(&[6, 6, 5]));
        let y = count_branch(&mut g, &slots, &params, x, &geom, true).unwrap();
        assert_eq!(g.shape(y), &[5, 5]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
