//! Model architecture configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BranchThresholds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square input image in pixels.
    pub image_size: usize,
    /// Side every exemplar is resized to.
    pub exemplar_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Hidden width of each block's MLP as a multiple of `dim`.
    pub mlp_ratio: usize,
    /// Block size `k` in pixels, one per counter branch.
    pub branch_blocks: Vec<usize>,
    /// Output stride `z` in pixels, shared by all branches.
    pub output_stride: usize,
    pub thresholds: BranchThresholds,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 384,
            exemplar_size: 64,
            patch_size: 16,
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            branch_blocks: vec![32, 64, 128],
            output_stride: 16,
            thresholds: BranchThresholds::default(),
            layernorm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: 128 px images, 32 px exemplars, 2 blocks of width 64.
    pub fn tiny() -> Self {
        Self {
            image_size: 128,
            exemplar_size: 32,
            depth: 2,
            dim: 64,
            heads: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        let fail = |msg: String| Err(Error::Config(msg));
        if p == 0 || self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return fail("patch_size, dim, heads and mlp_ratio must be positive".into());
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.image_size == 0 || self.image_size % p != 0 {
            return fail(format!("image_size {} not a multiple of patch size {p}", self.image_size));
        }
        if self.exemplar_size == 0 || self.exemplar_size % p != 0 {
            return fail(format!(
                "exemplar_size {} not a multiple of patch size {p}",
                self.exemplar_size
            ));
        }
        if self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.output_stride == 0 || self.output_stride % p != 0 {
            return fail(format!("output stride {} not a multiple of {p}", self.output_stride));
        }
        if self.branch_blocks.is_empty() {
            return fail("at least one counter branch is required".into());
        }
        for &k in &self.branch_blocks {
            if k < p || k % p != 0 {
                return fail(format!("block size {k} must be a positive multiple of {p}"));
            }
            if k > self.image_size {
                return fail(format!("block size {k} exceeds image size {}", self.image_size));
            }
        }
        BranchThresholds::new(self.thresholds.bounds().to_vec())?;
        if self.thresholds.branch_count() != self.branch_blocks.len() {
            return fail(format!(
                "{} thresholds define {} branches but {} block sizes are configured",
                self.thresholds.bounds().len(),
                self.thresholds.branch_count(),
                self.branch_blocks.len()
            ));
        }
        Ok(())
    }

    /// Image-token grid side `H_t = W_t`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn exemplar_grid(&self) -> usize {
        self.exemplar_size / self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Same architecture restricted to the single branch with block size `k`.
    pub fn single_branch(&self, k: usize) -> Self {
        Self {
            branch_blocks: vec![k],
            thresholds: BranchThresholds::single(),
            ..self.clone()
        }
    }
}
