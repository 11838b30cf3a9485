use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    apply_mask_tokens, patch_expand, patch_merge, patchify, unpatchify, AttentionScope,
    LayerNorm, Linear, MaskToken, PatchExpand, PatchGrid, PatchMerge, TransformerLayer, INIT_STD,
};
use crate::error::{Error, Result};
use crate::masking::PatchMask;
use crate::models::config::ModelConfig;
use crate::numcore::{truncated_normal, Graph, ParamId, ParamStore, Parameter, Var};
use crate::scalar::Scalar;

/// Consecutive transformer layers at one resolution. Odd layers use a
/// half-window cyclic shift unless the grid is a single window.
#[derive(Clone, Debug)]
pub struct SwinStage {
    pub layers: Vec<TransformerLayer>,
    pub window: usize,
}

impl SwinStage {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
        window: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), dim, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(SwinStage { layers, window })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut grid: PatchGrid,
    ) -> Result<PatchGrid> {
        for (i, layer) in self.layers.iter().enumerate() {
            let shift = if i % 2 == 1 && grid.rows.max(grid.cols) > self.window {
                self.window / 2
            } else {
                0
            };
            let scope = AttentionScope::Window {
                size: self.window,
                shift,
            };
            grid = layer.forward(g, store, grid, scope)?;
        }
        Ok(grid)
    }
}

/// Hierarchical masked autoencoder built from Swin stages.
///
/// Encoder: embed → mask tokens → +pos → (stage, norm, merge)… → stage → norm.
/// Decoder: (stage, expand, norm)… → stage → norm → per-token projection to pixels.
#[derive(Clone, Debug)]
pub struct SwinMae<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub embed: Linear,
    pub mask_token: MaskToken,
    pub position: ParamId,
    pub encoder: Vec<SwinStage>,
    pub merges: Vec<PatchMerge>,
    pub merge_norms: Vec<LayerNorm>,
    pub encoder_norm: LayerNorm,
    pub decoder: Vec<SwinStage>,
    pub expands: Vec<PatchExpand>,
    pub expand_norms: Vec<LayerNorm>,
    pub decoder_norm: LayerNorm,
    pub head: Linear,
}

impl<T: Scalar> SwinMae<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = c.embed_dim;
        let embed = Linear::new(&mut store, "embed", c.patch_dim(), d, true, &mut rng)?;
        let mask_token = MaskToken::new(&mut store, "mask_token", d, &mut rng)?;
        let position = store.add(Parameter::new(
            "pos_embed",
            truncated_normal(&[c.token_count(), d], INIT_STD, &mut rng),
            false,
        ))?;
        let depth = 2 * c.blocks_per_stage;
        let mut encoder = Vec::new();
        let mut merges = Vec::new();
        let mut merge_norms = Vec::new();
        for s in 0..c.stages {
            let dim = c.stage_dim(s);
            encoder.push(SwinStage::new(
                &mut store,
                &format!("encoder.stage{s}"),
                dim,
                c.heads_per_stage[s],
                depth,
                c.window,
                &mut rng,
            )?);
            if s + 1 < c.stages {
                merge_norms.push(LayerNorm::new(&mut store, &format!("encoder.merge{s}.norm"), dim)?);
                merges.push(PatchMerge::new(&mut store, &format!("encoder.merge{s}"), dim, &mut rng)?);
            }
        }
        let encoder_norm = LayerNorm::new(&mut store, "encoder.norm", c.stage_dim(c.stages - 1))?;
        let mut decoder = Vec::new();
        let mut expands = Vec::new();
        let mut expand_norms = Vec::new();
        for s in (0..c.stages).rev() {
            let dim = c.stage_dim(s);
            decoder.push(SwinStage::new(
                &mut store,
                &format!("decoder.stage{s}"),
                dim,
                c.heads_per_stage[s],
                depth,
                c.window,
                &mut rng,
            )?);
            if s > 0 {
                expands.push(PatchExpand::new(&mut store, &format!("decoder.expand{s}"), dim, &mut rng)?);
                expand_norms.push(LayerNorm::new(&mut store, &format!("decoder.expand{s}.norm"), dim / 2)?);
            }
        }
        let decoder_norm = LayerNorm::new(&mut store, "decoder.norm", d)?;
        let head = Linear::new(&mut store, "head", d, c.patch_dim(), true, &mut rng)?;
        Ok(SwinMae {
            config: c.clone(),
            params: store,
            embed,
            mask_token,
            position,
            encoder,
            merges,
            merge_norms,
            encoder_norm,
            decoder,
            expands,
            expand_norms,
            decoder_norm,
            head,
        })
    }

    /// Embedded, masked and position-tagged stage-1 tokens.
    pub fn embed_tokens(&self, g: &mut Graph<T>, image: Var, mask: &PatchMask) -> Result<PatchGrid> {
        let c = &self.config;
        let raw = patchify(g, image, c.patch_size)?;
        let embedded = self.embed.forward(g, &self.params, raw.tokens)?;
        let grid = PatchGrid {
            rows: raw.rows,
            cols: raw.cols,
            dim: c.embed_dim,
            tokens: embedded,
        };
        let grid = apply_mask_tokens(g, &self.params, grid, mask, &self.mask_token)?;
        let pos = g.param(&self.params, self.position);
        let tokens = g.add(grid.tokens, pos)?;
        Ok(PatchGrid { tokens, ..grid })
    }

    pub fn forward(&self, g: &mut Graph<T>, image: Var, mask: &PatchMask) -> Result<Var> {
        let c = &self.config;
        let expected = [c.image_size, c.image_size, c.bands];
        if g.shape(image) != expected {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match model input {:?}",
                g.shape(image),
                expected
            )));
        }
        if (mask.rows, mask.cols) != (c.grid(), c.grid()) {
            return Err(Error::Shape(format!(
                "mask grid {}x{} does not match patch grid {}x{}",
                mask.rows,
                mask.cols,
                c.grid(),
                c.grid()
            )));
        }
        let mut grid = self.embed_tokens(g, image, mask)?;
        for (s, stage) in self.encoder.iter().enumerate() {
            grid = stage.forward(g, &self.params, grid)?;
            if let Some(merge) = self.merges.get(s) {
                grid.tokens = self.merge_norms[s].forward(g, &self.params, grid.tokens)?;
                grid = patch_merge(g, &self.params, grid, merge)?;
            }
        }
        grid.tokens = self.encoder_norm.forward(g, &self.params, grid.tokens)?;
        for (i, stage) in self.decoder.iter().enumerate() {
            grid = stage.forward(g, &self.params, grid)?;
            if let Some(expand) = self.expands.get(i) {
                grid = patch_expand(g, &self.params, grid, expand)?;
                grid.tokens = self.expand_norms[i].forward(g, &self.params, grid.tokens)?;
            }
        }
        let normed = self.decoder_norm.forward(g, &self.params, grid.tokens)?;
        let pixels = self.head.forward(g, &self.params, normed)?;
        let out = PatchGrid {
            dim: c.patch_dim(),
            tokens: pixels,
            ..grid
        };
        unpatchify(g, out, c.patch_size, c.bands)
    }
}
