//! Joint image/exemplar tokenization and the transformer encoder.
//!
//! Image tokens come first in the joint sequence, followed by the tokens of
//! each exemplar in order. At the last block the raw score matrix `Q·Kᵀ` of
//! every head is kept so it can be split into its four quadrants
//! (image→image, image→exemplar, exemplar→image, exemplar→exemplar).

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::ParamStore;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::ExemplarSet;
use crate::raster::Raster;
use crate::tensor::Tensor;

/// Input channels per pixel: RGB plus the scale-embedding channel.
pub const PIXEL_CHANNELS: usize = 4;

#[derive(Clone, Debug)]
pub(crate) struct BlockSlots {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderSlots {
    patch_w: usize,
    patch_b: usize,
    segment: usize,
    blocks: Vec<BlockSlots>,
    norm_g: usize,
    norm_b: usize,
}

/// Fan-in scaled uniform initialization, `U(-1/√fan_in, 1/√fan_in)`.
pub(crate) fn linear_init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl EncoderSlots {
    pub(crate) fn init<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let d = cfg.dim;
        let patch_in = cfg.patch_size * cfg.patch_size * PIXEL_CHANNELS;
        let patch_w = store.insert("encoder.patch.weight", linear_init(rng, patch_in, d));
        let patch_b = store.insert("encoder.patch.bias", Tensor::zeros(&[d]));
        let segment = store.insert("encoder.segment", Tensor::uniform(&[2, d], 0.02, rng));
        let blocks = (0..cfg.depth)
            .map(|i| {
                let mut add = |name: &str, t: Tensor| store.insert(format!("encoder.block{i}.{name}"), t);
                let hidden = d * cfg.mlp_ratio;
                BlockSlots {
                    ln1_g: add("ln1.gamma", Tensor::full(&[d], 1.0)),
                    ln1_b: add("ln1.beta", Tensor::zeros(&[d])),
                    qkv_w: add("attn.qkv.weight", linear_init(rng, d, 3 * d)),
                    qkv_b: add("attn.qkv.bias", Tensor::zeros(&[3 * d])),
                    proj_w: add("attn.proj.weight", linear_init(rng, d, d)),
                    proj_b: add("attn.proj.bias", Tensor::zeros(&[d])),
                    ln2_g: add("ln2.gamma", Tensor::full(&[d], 1.0)),
                    ln2_b: add("ln2.beta", Tensor::zeros(&[d])),
                    fc1_w: add("mlp.fc1.weight", linear_init(rng, d, hidden)),
                    fc1_b: add("mlp.fc1.bias", Tensor::zeros(&[hidden])),
                    fc2_w: add("mlp.fc2.weight", linear_init(rng, hidden, d)),
                    fc2_b: add("mlp.fc2.bias", Tensor::zeros(&[d])),
                }
            })
            .collect();
        let norm_g = store.insert("encoder.norm.gamma", Tensor::full(&[d], 1.0));
        let norm_b = store.insert("encoder.norm.beta", Tensor::zeros(&[d]));
        Self {
            patch_w,
            patch_b,
            segment,
            blocks,
            norm_g,
            norm_b,
        }
    }
}

/// Fixed 2D sine/cosine position embeddings for an `h × w` token grid,
/// `[h·w, dim]` row-major. A quarter of the channels each encode
/// `sin(y·ω)`, `cos(y·ω)`, `sin(x·ω)`, `cos(x·ω)`.
pub fn sincos_position_embedding(h: usize, w: usize, dim: usize) -> Tensor {
    assert!(dim % 4 == 0, "position embedding width must be a multiple of 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            data.extend(omega.iter().map(|o| (y as f64 * o).sin()));
            data.extend(omega.iter().map(|o| (y as f64 * o).cos()));
            data.extend(omega.iter().map(|o| (x as f64 * o).sin()));
            data.extend(omega.iter().map(|o| (x as f64 * o).cos()));
        }
    }
    Tensor::new(&[h * w, dim], data).expect("position embedding shape")
}

/// Flattens non-overlapping `p × p` patches into rows of
/// `p·p·PIXEL_CHANNELS` values ordered (row, column, channel). The fourth
/// channel carries `extra` (row-major, one value per pixel) or zeros.
fn patchify(raster: &Raster, extra: Option<&[f64]>, p: usize) -> Result<(Tensor, usize, usize)> {
    let (w, h) = (raster.width(), raster.height());
    if w % p != 0 || h % p != 0 {
        return Err(Error::Shape(format!(
            "{w}x{h} raster is not divisible into {p}x{p} patches"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let row_len = p * p * PIXEL_CHANNELS;
    let px = raster.data();
    let mut data = Vec::with_capacity(gh * gw * row_len);
    for ty in 0..gh {
        for tx in 0..gw {
            for py in 0..p {
                for pxl in 0..p {
                    let (y, x) = (ty * p + py, tx * p + pxl);
                    let i = y * w + x;
                    // centre RGB around zero
                    data.push((px[i * 3] as f64 - 0.5) * 2.0);
                    data.push((px[i * 3 + 1] as f64 - 0.5) * 2.0);
                    data.push((px[i * 3 + 2] as f64 - 0.5) * 2.0);
                    data.push(extra.map_or(0.0, |e| e[i]));
                }
            }
        }
    }
    Ok((Tensor::new(&[gh * gw, row_len], data)?, gh, gw))
}

/// Joint token sequence in a graph.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `[(n_image + n_exemplar) × dim]`
    pub tokens: Var,
    pub n_image: usize,
    pub n_exemplar: usize,
    /// Image-token grid `(H_t, W_t)`.
    pub grid: (usize, usize),
}

/// Scale maps enter the projection divided by `h + w` so that full-size
/// exemplars stay in the same range as pixel values.
fn normalized_scale_map(map: &[f64], size: usize) -> Vec<f64> {
    let norm = 2.0 * size as f64;
    map.iter().map(|v| v / norm).collect()
}

pub(crate) fn tokenize_joint(
    g: &mut Graph,
    cfg: &ModelConfig,
    slots: &EncoderSlots,
    params: &[Var],
    image: &Raster,
    exemplars: &ExemplarSet,
) -> Result<TokenSequence> {
    let p = cfg.patch_size;
    let d = cfg.dim;
    if exemplars.size != cfg.exemplar_size {
        return Err(Error::Shape(format!(
            "exemplars resized to {} but the model expects {}",
            exemplars.size, cfg.exemplar_size
        )));
    }
    let (w, b) = (params[slots.patch_w], params[slots.patch_b]);
    let segment = params[slots.segment];

    let embed = |g: &mut Graph, patches: Tensor, gh: usize, gw: usize, seg_row: usize| -> Result<Var> {
        let x = g.constant(patches);
        let x = g.matmul(x, w)?;
        let x = g.add(x, b)?;
        let pos = g.constant(sincos_position_embedding(gh, gw, d));
        let x = g.add(x, pos)?;
        let seg = g.slice(segment, 0, seg_row, 1)?;
        let seg = g.reshape(seg, &[d])?;
        g.add(x, seg)
    };

    let (img_patches, gh, gw) = patchify(image, None, p)?;
    let mut parts = vec![embed(g, img_patches, gh, gw, 0)?];
    let mut n_exemplar = 0;
    for (patch, map) in exemplars.patches.iter().zip(&exemplars.scale_maps) {
        let scale = normalized_scale_map(map, exemplars.size);
        let (ex_patches, eh, ew) = patchify(patch, Some(&scale), p)?;
        n_exemplar += eh * ew;
        parts.push(embed(g, ex_patches, eh, ew, 1)?);
    }
    let tokens = g.concat(&parts, 0)?;
    Ok(TokenSequence {
        tokens,
        n_image: gh * gw,
        n_exemplar,
        grid: (gh, gw),
    })
}

/// Dense sub-block of an attention score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadrant {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Quadrant {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// The four blocks of one `N × N` score matrix with image tokens first.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionQuadrants {
    /// image → image, `N_q × N_q`
    pub query: Quadrant,
    /// image → exemplar, `N_q × N_e`
    pub class: Quadrant,
    /// exemplar → image, `N_e × N_q`
    pub matching: Quadrant,
    /// exemplar → exemplar, `N_e × N_e`
    pub exemplar: Quadrant,
}

fn sub_block(scores: &[f64], n: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Quadrant {
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for r in rows.clone() {
        data.extend_from_slice(&scores[r * n + cols.start..r * n + cols.end]);
    }
    Quadrant {
        rows: rows.len(),
        cols: cols.len(),
        data,
    }
}

/// Splits an `N × N` score matrix into its quadrants, `N = n_image + n_exemplar`.
pub fn decouple_attention(scores: &Tensor, n_image: usize, n_exemplar: usize) -> Result<AttentionQuadrants> {
    let (r, c) = scores.dims2()?;
    let n = n_image + n_exemplar;
    if r != n || c != n {
        return Err(Error::Shape(format!(
            "score matrix is {r}x{c} but {n_image} + {n_exemplar} tokens were given"
        )));
    }
    let s = scores.data();
    Ok(AttentionQuadrants {
        query: sub_block(s, n, 0..n_image, 0..n_image),
        class: sub_block(s, n, 0..n_image, n_image..n),
        matching: sub_block(s, n, n_image..n, 0..n_image),
        exemplar: sub_block(s, n, n_image..n, n_image..n),
    })
}

impl AttentionQuadrants {
    /// Reassembles the full score matrix.
    pub fn assemble(&self) -> Tensor {
        let nq = self.query.rows;
        let ne = self.exemplar.rows;
        let n = nq + ne;
        let mut data = Vec::with_capacity(n * n);
        for r in 0..nq {
            data.extend_from_slice(&self.query.data[r * nq..(r + 1) * nq]);
            data.extend_from_slice(&self.class.data[r * ne..(r + 1) * ne]);
        }
        for r in 0..ne {
            data.extend_from_slice(&self.matching.data[r * nq..(r + 1) * nq]);
            data.extend_from_slice(&self.exemplar.data[r * ne..(r + 1) * ne]);
        }
        Tensor::new(&[n, n], data).expect("square")
    }
}

/// Graph handles produced by [`encode`].
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Enhanced image features `[H_t, W_t, dim + 1]`; the last channel is the
    /// match map.
    pub features: Var,
    /// Head- and exemplar-averaged, magnitude-compensated exemplar→image
    /// attention, `[H_t · W_t]`.
    pub match_map: Var,
    /// Raw `Q·Kᵀ` of every head at the last block, `[N × N]` each.
    pub scores: Vec<Var>,
}

fn block_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    slots: &BlockSlots,
    params: &[Var],
    x: Var,
    keep_scores: bool,
) -> Result<(Var, Vec<Var>)> {
    let d = cfg.dim;
    let hd = cfg.head_dim();
    let temperature = (hd as f64).sqrt();
    let eps = cfg.layernorm_eps;
    let p = |i: usize| params[i];

    let h = g.layernorm(x, p(slots.ln1_g), p(slots.ln1_b), eps)?;
    let qkv = g.matmul(h, p(slots.qkv_w))?;
    let qkv = g.add(qkv, p(slots.qkv_b))?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut scores = Vec::new();
    for head in 0..cfg.heads {
        let q = g.slice(qkv, 1, head * hd, hd)?;
        let k = g.slice(qkv, 1, d + head * hd, hd)?;
        let v = g.slice(qkv, 1, 2 * d + head * hd, hd)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        if keep_scores {
            scores.push(s);
        }
        let a = g.softmax_rows(s, temperature)?;
        heads.push(g.matmul(a, v)?);
    }
    let o = g.concat(&heads, 1)?;
    let o = g.matmul(o, p(slots.proj_w))?;
    let o = g.add(o, p(slots.proj_b))?;
    let x = g.add(x, o)?;

    let h = g.layernorm(x, p(slots.ln2_g), p(slots.ln2_b), eps)?;
    let h = g.matmul(h, p(slots.fc1_w))?;
    let h = g.add(h, p(slots.fc1_b))?;
    let h = g.gelu(h);
    let h = g.matmul(h, p(slots.fc2_w))?;
    let h = g.add(h, p(slots.fc2_b))?;
    Ok((g.add(x, h)?, scores))
}

pub(crate) fn encode(
    g: &mut Graph,
    cfg: &ModelConfig,
    slots: &EncoderSlots,
    params: &[Var],
    seq: &TokenSequence,
    magnitude: f64,
) -> Result<EncoderOutput> {
    if slots.blocks.is_empty() {
        return Err(Error::Config("encoder depth must be at least 1".into()));
    }
    let (nq, ne) = (seq.n_image, seq.n_exemplar);
    let hd = cfg.head_dim();
    let last = slots.blocks.len() - 1;
    let mut x = seq.tokens;
    let mut scores = Vec::new();
    for (i, block) in slots.blocks.iter().enumerate() {
        let (y, s) = block_forward(g, cfg, block, params, x, i == last)?;
        g.check_finite(y, &format!("encoder block {i}"))?;
        x = y;
        scores = s;
    }

    let (gh, gw) = seq.grid;
    let image_tokens = g.slice(x, 0, 0, nq)?;
    let feats = g.layernorm(image_tokens, params[slots.norm_g], params[slots.norm_b], cfg.layernorm_eps)?;

    let match_map = if ne == 0 {
        g.constant(Tensor::zeros(&[nq]))
    } else {
        let mut per_head = Vec::with_capacity(scores.len());
        for &s in &scores {
            let rows = g.slice(s, 0, nq, ne)?;
            let a_match = g.slice(rows, 1, 0, nq)?;
            per_head.push(g.softmax_rows(a_match, (hd as f64).sqrt())?);
        }
        let mut acc = per_head[0];
        for &h in &per_head[1..] {
            acc = g.add(acc, h)?;
        }
        let head_mean = g.scale(acc, 1.0 / per_head.len() as f64);
        let avg = g.constant(Tensor::full(&[1, ne], 1.0 / ne as f64));
        let row_mean = g.matmul(avg, head_mean)?;
        let compensated = g.scale(row_mean, magnitude);
        g.reshape(compensated, &[nq])?
    };
    let column = g.reshape(match_map, &[nq, 1])?;
    let enhanced = g.concat(&[feats, column], 1)?;
    let features = g.reshape(enhanced, &[gh, gw, cfg.dim + 1])?;
    g.check_finite(features, "encoder output")?;
    Ok(EncoderOutput {
        features,
        match_map,
        scores,
    })
}
