//! The complete exemplar-conditioned counter: encoder plus branch counters.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Checkpoint, ParamStore};
use crate::config::ModelConfig;
use crate::counter::{count_branch, BranchSlots, Mode, RedundantCountMap, WindowGeometry};
use crate::encoder::{decouple_attention, encode, tokenize_joint, AttentionQuadrants, EncoderOutput, EncoderSlots, TokenSequence};
use crate::error::{Error, Result};
use crate::geometry::{branch_select, Branch, ExemplarSet};
use crate::normalize::{normalize, NormalizedCountMap};
use crate::raster::Raster;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TasselModel {
    config: ModelConfig,
    params: ParamStore,
    encoder: EncoderSlots,
    branches: Vec<BranchSlots>,
}

/// One branch output inside a graph.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    pub branch: Branch,
    pub geometry: WindowGeometry,
    /// `[rows, cols]` local counts.
    pub map: Var,
}

/// Graph handles of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// One leaf per parameter slot, in [`ParamStore`] order.
    pub params: Vec<Var>,
    pub tokens: TokenSequence,
    pub encoded: EncoderOutput,
    /// All branches in train mode, only the selected one in infer mode.
    pub branches: Vec<BranchOutput>,
    pub selected: Branch,
}

impl Forward {
    pub fn branch(&self, b: Branch) -> Option<&BranchOutput> {
        self.branches.iter().find(|o| o.branch == b)
    }
}

/// Inference result for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub count: f64,
    pub branch: Branch,
    pub scale_prior: f64,
    pub magnitude: f64,
    pub redundant: RedundantCountMap,
    pub normalized: NormalizedCountMap,
    /// Row-major over the token grid.
    pub match_map: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

impl TasselModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = EncoderSlots::init(&config, &mut params, &mut rng);
        let branches = (0..config.branch_blocks.len())
            .map(|i| BranchSlots::init(i, config.dim, &mut params, &mut rng))
            .collect();
        Ok(Self {
            config,
            params,
            encoder,
            branches,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter slots owned exclusively by one branch counter.
    pub fn branch_slots(&self, b: Branch) -> Vec<usize> {
        self.branches[b.index()].slots().to_vec()
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn geometry(&self, b: Branch, grid: (usize, usize)) -> Result<WindowGeometry> {
        let k = *self
            .config
            .branch_blocks
            .get(b.index())
            .ok_or_else(|| Error::InvalidArgument(format!("no branch {b}")))?;
        WindowGeometry::new(k, self.config.output_stride, self.config.patch_size, grid)
    }

    pub fn select(&self, exemplars: &ExemplarSet) -> Branch {
        branch_select(exemplars.scale_prior, &self.config.thresholds)
    }

    /// Builds the forward graph. With `trainable`, parameters are gradient
    /// leaves; otherwise constants.
    pub fn forward(
        &self,
        g: &mut Graph,
        image: &Raster,
        exemplars: &ExemplarSet,
        mode: Mode,
        trainable: bool,
    ) -> Result<Forward> {
        let params: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        self.forward_with(g, params, image, exemplars, mode)
    }

    /// Forward pass using caller-provided parameter nodes, one per slot.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        params: Vec<Var>,
        image: &Raster,
        exemplars: &ExemplarSet,
        mode: Mode,
    ) -> Result<Forward> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} parameter nodes for {} parameter slots",
                params.len(),
                self.params.len()
            )));
        }
        let tokens = tokenize_joint(g, &self.config, &self.encoder, &params, image, exemplars)?;
        let encoded = encode(g, &self.config, &self.encoder, &params, &tokens, exemplars.magnitude)?;
        let selected = self.select(exemplars);
        let active: Vec<Branch> = match mode {
            Mode::Train => (0..self.branches.len()).map(Branch).collect(),
            Mode::Infer => vec![selected],
        };
        let mut branches = Vec::with_capacity(active.len());
        for b in active {
            let geometry = self.geometry(b, tokens.grid)?;
            let map = count_branch(
                g,
                &self.branches[b.index()],
                &params,
                encoded.features,
                &geometry,
                mode == Mode::Infer,
            )?;
            branches.push(BranchOutput {
                branch: b,
                geometry,
                map,
            });
        }
        Ok(Forward {
            params,
            tokens,
            encoded,
            branches,
            selected,
        })
    }

    pub fn predict(&self, image: &Raster, exemplars: &ExemplarSet) -> Result<Prediction> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, image, exemplars, Mode::Infer, false)?;
        let out = &fwd.branches[0];
        let redundant = RedundantCountMap::new(g.value(out.map).data().to_vec(), out.geometry, out.branch)?;
        let normalized = normalize(&redundant);
        Ok(Prediction {
            count: normalized.total(),
            branch: fwd.selected,
            scale_prior: exemplars.scale_prior,
            magnitude: exemplars.magnitude,
            redundant,
            normalized,
            match_map: g.value(fwd.encoded.match_map).data().to_vec(),
        })
    }

    /// Runs one branch counter on enhanced features `[H_t, W_t, dim + 1]`.
    pub fn branch_counts(&self, b: Branch, features: &Tensor, rectify: bool) -> Result<Tensor> {
        let shape = features.shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("features must be [H_t, W_t, C], got {shape:?}")));
        }
        let geometry = self.geometry(b, (shape[0], shape[1]))?;
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.tensors().iter().map(|t| g.constant(t.clone())).collect();
        let x = g.constant(features.clone());
        let y = count_branch(&mut g, &self.branches[b.index()], &params, x, &geometry, rectify)?;
        Ok(g.value(y).clone())
    }

    /// Raw last-block scores of each head, split into quadrants.
    pub fn attention_quadrants(&self, image: &Raster, exemplars: &ExemplarSet) -> Result<Vec<AttentionQuadrants>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, image, exemplars, Mode::Infer, false)?;
        fwd.encoded
            .scores
            .iter()
            .map(|&s| decouple_attention(g.value(s), fwd.tokens.n_image, fwd.tokens.n_exemplar))
            .collect()
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = Meta {
            model: self.config.clone(),
            extra,
        };
        Checkpoint {
            meta: serde_json::to_value(meta).expect("config serializes"),
            tensors: self.params.clone(),
        }
    }

    /// Rebuilds a model and returns the checkpoint's extra metadata.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, serde_json::Value)> {
        let meta: Meta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let mut model = Self::new(meta.model, 0)?;
        for slot in 0..model.params.len() {
            let name = model.params.name(slot).to_owned();
            let t = ck
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != model.params.tensor(slot).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.params.tensor(slot).shape()
                )));
            }
            *model.params.tensor_mut(slot) = t.clone();
        }
        Ok((model, meta.extra))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
