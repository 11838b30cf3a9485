//! Vision building blocks on top of the autodiff tape.
//!
//! Tokens are always a `[rows·cols × dim]` matrix in row-major grid order.
//! Window attention regroups them with a flat gather so every window becomes
//! a contiguous run of rows, attends within the run, and scatters back.

use rand::Rng;

use crate::error::{Error, Result};
use crate::masking::PatchMask;
use crate::numcore::{truncated_normal, Graph, ParamId, ParamStore, Parameter, Tensor, Var};
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;
pub const MLP_RATIO: usize = 4;

/// Token grid flowing through the encoder and decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub tokens: Var,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn with_tokens(self, tokens: Var) -> Self {
        PatchGrid { tokens, ..self }
    }
}

fn add_param<T: Scalar>(
    store: &mut ParamStore<T>,
    name: String,
    tensor: Tensor<T>,
    decay: bool,
) -> Result<ParamId> {
    store.add(Parameter::new(name, tensor, decay))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight stored `[in × out]`, truncated-normal init; bias zeros.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = add_param(
            store,
            format!("{name}.weight"),
            truncated_normal(&[in_dim, out_dim], INIT_STD, rng),
            true,
        )?;
        let bias = if bias {
            Some(add_param(
                store,
                format!("{name}.bias"),
                Tensor::zeros([out_dim]),
                false,
            )?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: add_param(store, format!("{name}.gain"), Tensor::ones([dim]), false)?,
            bias: add_param(store, format!("{name}.bias"), Tensor::zeros([dim]), false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Query/key/value/output projections of one multi-head attention.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub head_count: usize,
    pub dim: usize,
}

impl AttentionWeights {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        head_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if head_count == 0 || !dim.is_multiple_of(head_count) {
            return Err(Error::Config(vec![format!(
                "{name}: width {dim} not divisible by {head_count} heads"
            )]));
        }
        Ok(AttentionWeights {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng)?,
            head_count,
            dim,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Linear::param_count(dim, dim, true)
    }

    /// Attention over consecutive groups of `group` rows.
    fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        group: usize,
    ) -> Result<Var> {
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let a = g.grouped_attention(q, k, v, group, self.head_count)?;
        self.output.forward(g, store, a)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, MLP_RATIO * dim, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), MLP_RATIO * dim, dim, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Which tokens may attend to each other inside a transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionScope {
    Global,
    Window { size: usize, shift: usize },
}

/// Pre-norm transformer layer: `z' = MSA(LN(z)) + z`, `z = MLP(LN(z')) + z'`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attention: AttentionWeights,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attention: AttentionWeights::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, rng)?,
        })
    }

    /// Closed-form parameter count for width `dim`.
    pub fn param_count(dim: usize) -> usize {
        2 * 2 * dim
            + AttentionWeights::param_count(dim)
            + Linear::param_count(dim, MLP_RATIO * dim, true)
            + Linear::param_count(MLP_RATIO * dim, dim, true)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        grid: PatchGrid,
        scope: AttentionScope,
    ) -> Result<PatchGrid> {
        let normed = self.norm1.forward(g, store, grid.tokens)?;
        let attended = match scope {
            AttentionScope::Global => global_attention(g, store, normed, &self.attention)?,
            AttentionScope::Window { size, shift } => {
                window_attention(g, store, grid.with_tokens(normed), &self.attention, size, shift)?
                    .tokens
            }
        };
        let z = g.add(attended, grid.tokens)?;
        let normed = self.norm2.forward(g, store, z)?;
        let h = self.mlp.forward(g, store, normed)?;
        let out = g.add(h, z)?;
        Ok(grid.with_tokens(out))
    }
}

/// Token order that makes every (shifted) window contiguous.
///
/// Entry `i` names the source token at grouped position `i`. With shift `s`
/// grid cell `(r, c)` is filled from `((r+s) mod rows, (c+s) mod cols)`.
pub fn window_order(rows: usize, cols: usize, window: usize, shift: usize) -> Result<Vec<usize>> {
    if window == 0 || !rows.is_multiple_of(window) || !cols.is_multiple_of(window) {
        return Err(Error::Shape(format!(
            "token grid {rows}x{cols} is not divisible by window {window}"
        )));
    }
    if shift >= window {
        return Err(Error::Shape(format!(
            "shift {shift} must be smaller than window {window}"
        )));
    }
    let mut order = Vec::with_capacity(rows * cols);
    for wr in 0..rows / window {
        for wc in 0..cols / window {
            for a in 0..window {
                for b in 0..window {
                    let r = (wr * window + a + shift) % rows;
                    let c = (wc * window + b + shift) % cols;
                    order.push(r * cols + c);
                }
            }
        }
    }
    Ok(order)
}

fn inverse_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &src) in p.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

/// Multi-head self-attention restricted to `window × window` groups of the
/// grid after a cyclic shift by `(shift, shift)`; output is unshifted.
pub fn window_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    grid: PatchGrid,
    weights: &AttentionWeights,
    window: usize,
    shift: usize,
) -> Result<PatchGrid> {
    let order = window_order(grid.rows, grid.cols, window, shift)?;
    let grouped = g.gather_rows(grid.tokens, &order)?;
    let attended = weights.attend(g, store, grouped, window * window)?;
    let restored = g.gather_rows(attended, &inverse_permutation(&order))?;
    Ok(grid.with_tokens(restored))
}

/// Multi-head self-attention over all rows of `tokens`.
pub fn global_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    tokens: Var,
    weights: &AttentionWeights,
) -> Result<Var> {
    let n = g.shape(tokens)[0];
    weights.attend(g, store, tokens, n)
}

/// Flat-index map from token layout `[N × patch·patch·B]` to the H×W×B image.
///
/// Tokens are row-major over the patch grid; inside a token the order is
/// (row within patch, column within patch, band).
pub fn patch_index(height: usize, width: usize, bands: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::Shape(format!(
            "image {height}x{width} is not divisible by patch size {patch}"
        )));
    }
    let (gr, gc) = (height / patch, width / patch);
    let mut index = Vec::with_capacity(height * width * bands);
    for pr in 0..gr {
        for pc in 0..gc {
            for y in 0..patch {
                for x in 0..patch {
                    let base = ((pr * patch + y) * width + pc * patch + x) * bands;
                    index.extend(base..base + bands);
                }
            }
        }
    }
    Ok(index)
}

/// Splits an `H×W×B` image node into raw patch tokens.
pub fn patchify<T: Scalar>(g: &mut Graph<T>, image: Var, patch: usize) -> Result<PatchGrid> {
    let shape = g.shape(image).to_vec();
    let [h, w, b] = shape[..] else {
        return Err(Error::Shape(format!(
            "patchify expects an H×W×B image, got {} dims",
            shape.len()
        )));
    };
    let index = patch_index(h, w, b, patch)?;
    let (rows, cols) = (h / patch, w / patch);
    let dim = patch * patch * b;
    let tokens = g.gather(image, index, &[rows * cols, dim])?;
    Ok(PatchGrid {
        rows,
        cols,
        dim,
        tokens,
    })
}

/// Reassembles raw patch tokens into an `H×W×B` image.
pub fn unpatchify<T: Scalar>(
    g: &mut Graph<T>,
    grid: PatchGrid,
    patch: usize,
    bands: usize,
) -> Result<Var> {
    if grid.dim != patch * patch * bands {
        return Err(Error::Shape(format!(
            "token width {} does not match patch {patch} with {bands} bands",
            grid.dim
        )));
    }
    let (h, w) = (grid.rows * patch, grid.cols * patch);
    let index = patch_index(h, w, bands, patch)?;
    g.gather(grid.tokens, inverse_permutation(&index), &[h, w, bands])
}

/// Pure-tensor patchify, used where no tape is involved.
pub fn patchify_tensor<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [h, w, b] = image.shape()[..] else {
        return Err(Error::Shape("patchify expects an H×W×B image".into()));
    };
    let index = patch_index(h, w, b, patch)?;
    let data = index.iter().map(|&i| image.data()[i]).collect();
    Tensor::new([(h / patch) * (w / patch), patch * patch * b], data)
}

/// Linear fusion of each 2×2 block of tokens into one token of twice the width.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub weight: ParamId,
    pub dim: usize,
}

impl PatchMerge {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = add_param(
            store,
            format!("{name}.weight"),
            truncated_normal(&[4 * dim, 2 * dim], INIT_STD, rng),
            true,
        )?;
        Ok(PatchMerge { weight, dim })
    }

    pub fn param_count(dim: usize) -> usize {
        8 * dim * dim
    }
}

/// Offsets of the four children in concatenation order:
/// (2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1).
pub const CHILD_OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

pub fn patch_merge<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    grid: PatchGrid,
    merge: &PatchMerge,
) -> Result<PatchGrid> {
    if !grid.rows.is_multiple_of(2) || !grid.cols.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "patch_merge needs an even grid, got {}x{}",
            grid.rows, grid.cols
        )));
    }
    if grid.dim != merge.dim {
        return Err(Error::Shape(format!(
            "patch_merge weights expect width {}, grid has {}",
            merge.dim, grid.dim
        )));
    }
    let (rows, cols) = (grid.rows / 2, grid.cols / 2);
    let mut order = Vec::with_capacity(grid.len());
    for i in 0..rows {
        for j in 0..cols {
            for (dr, dc) in CHILD_OFFSETS {
                order.push((2 * i + dr) * grid.cols + 2 * j + dc);
            }
        }
    }
    let children = g.gather_rows(grid.tokens, &order)?;
    let concat = g.reshape(children, &[rows * cols, 4 * grid.dim])?;
    let w = g.param(store, merge.weight);
    let tokens = g.matmul(concat, w)?;
    Ok(PatchGrid {
        rows,
        cols,
        dim: 2 * grid.dim,
        tokens,
    })
}

/// Inverse of merging: project to twice the width and split each token
/// into a 2×2 block of half-width tokens.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub weight: ParamId,
    pub dim: usize,
}

impl PatchExpand {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(Error::Shape(format!("patch_expand needs an even width, got {dim}")));
        }
        let weight = add_param(
            store,
            format!("{name}.weight"),
            truncated_normal(&[dim, 2 * dim], INIT_STD, rng),
            true,
        )?;
        Ok(PatchExpand { weight, dim })
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim * dim
    }
}

pub fn patch_expand<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    grid: PatchGrid,
    expand: &PatchExpand,
) -> Result<PatchGrid> {
    if !grid.dim.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "patch_expand needs an even width, got {}",
            grid.dim
        )));
    }
    if grid.dim != expand.dim {
        return Err(Error::Shape(format!(
            "patch_expand weights expect width {}, grid has {}",
            expand.dim, grid.dim
        )));
    }
    let w = g.param(store, expand.weight);
    let projected = g.matmul(grid.tokens, w)?;
    let half = grid.dim / 2;
    let children = g.reshape(projected, &[grid.len() * 4, half])?;
    let (rows, cols) = (grid.rows * 2, grid.cols * 2);
    let mut order = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let parent = (r / 2) * grid.cols + c / 2;
            let child = CHILD_OFFSETS
                .iter()
                .position(|&o| o == (r % 2, c % 2))
                .expect("offset table covers 2x2");
            order.push(parent * 4 + child);
        }
    }
    let tokens = g.gather_rows(children, &order)?;
    Ok(PatchGrid {
        rows,
        cols,
        dim: half,
        tokens,
    })
}

/// Learnable vector substituted for masked tokens.
#[derive(Clone, Debug)]
pub struct MaskToken {
    pub vector: ParamId,
    pub dim: usize,
}

impl MaskToken {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let vector = add_param(
            store,
            name.to_string(),
            truncated_normal(&[dim], INIT_STD, rng),
            false,
        )?;
        Ok(MaskToken { vector, dim })
    }
}

/// Replaces masked tokens with the shared mask vector; token count is unchanged.
pub fn apply_mask_tokens<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    grid: PatchGrid,
    mask: &PatchMask,
    token: &MaskToken,
) -> Result<PatchGrid> {
    if mask.len() != grid.len() {
        return Err(Error::Shape(format!(
            "mask covers {} patches, grid has {}",
            mask.len(),
            grid.len()
        )));
    }
    if token.dim != grid.dim {
        return Err(Error::Shape(format!(
            "mask token width {} vs grid width {}",
            token.dim, grid.dim
        )));
    }
    if mask.masked_count() == 0 {
        return Ok(grid);
    }
    let n = grid.len();
    let v = g.param(store, token.vector);
    let row = g.reshape(v, &[1, grid.dim])?;
    let stacked = g.concat_rows(grid.tokens, row)?;
    let order: Vec<usize> = (0..n).map(|i| if mask.masked[i] { n } else { i }).collect();
    let tokens = g.gather_rows(stacked, &order)?;
    Ok(grid.with_tokens(tokens))
}
