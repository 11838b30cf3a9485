use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    patchify, unpatchify, AttentionScope, LayerNorm, Linear, MaskToken, PatchGrid,
    TransformerLayer, INIT_STD,
};
use crate::error::{Error, Result};
use crate::masking::PatchMask;
use crate::models::config::ModelConfig;
use crate::numcore::{truncated_normal, Graph, ParamId, ParamStore, Parameter, Var};
use crate::scalar::Scalar;

/// Plain masked autoencoder: the encoder sees only visible patches, the
/// decoder gets mask tokens re-inserted at masked positions.
#[derive(Clone, Debug)]
pub struct VitMae<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub embed: Linear,
    pub encoder_position: ParamId,
    pub encoder: Vec<TransformerLayer>,
    pub encoder_norm: LayerNorm,
    pub mask_token: MaskToken,
    pub decoder_position: ParamId,
    pub decoder: Vec<TransformerLayer>,
    pub decoder_norm: LayerNorm,
    pub head: Linear,
}

impl<T: Scalar> VitMae<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = c.embed_dim;
        let heads = c.heads_per_stage[0];
        let n = c.token_count();
        let embed = Linear::new(&mut store, "embed", c.patch_dim(), d, true, &mut rng)?;
        let encoder_position = store.add(Parameter::new(
            "encoder.pos_embed",
            truncated_normal(&[n, d], INIT_STD, &mut rng),
            false,
        ))?;
        let encoder = (0..c.vit_depth)
            .map(|i| TransformerLayer::new(&mut store, &format!("encoder.layer{i}"), d, heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = LayerNorm::new(&mut store, "encoder.norm", d)?;
        let mask_token = MaskToken::new(&mut store, "mask_token", d, &mut rng)?;
        let decoder_position = store.add(Parameter::new(
            "decoder.pos_embed",
            truncated_normal(&[n, d], INIT_STD, &mut rng),
            false,
        ))?;
        let decoder = (0..c.vit_decoder_depth)
            .map(|i| TransformerLayer::new(&mut store, &format!("decoder.layer{i}"), d, heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = LayerNorm::new(&mut store, "decoder.norm", d)?;
        let head = Linear::new(&mut store, "head", d, c.patch_dim(), true, &mut rng)?;
        Ok(VitMae {
            config: c.clone(),
            params: store,
            embed,
            encoder_position,
            encoder,
            encoder_norm,
            mask_token,
            decoder_position,
            decoder,
            decoder_norm,
            head,
        })
    }

    fn run_layers(
        &self,
        g: &mut Graph<T>,
        layers: &[TransformerLayer],
        tokens: Var,
    ) -> Result<Var> {
        let n = g.shape(tokens)[0];
        let mut grid = PatchGrid {
            rows: n,
            cols: 1,
            dim: self.config.embed_dim,
            tokens,
        };
        for layer in layers {
            grid = layer.forward(g, &self.params, grid, AttentionScope::Global)?;
        }
        Ok(grid.tokens)
    }

    /// Encoder stack over already position-tagged visible tokens.
    pub fn encode(&self, g: &mut Graph<T>, visible: Var) -> Result<Var> {
        let z = self.run_layers(g, &self.encoder, visible)?;
        self.encoder_norm.forward(g, &self.params, z)
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
        let n = c.token_count();
        if mask.len() != n {
            return Err(Error::Shape(format!(
                "mask covers {} patches, model expects {n}",
                mask.len()
            )));
        }
        let raw = patchify(g, image, c.patch_size)?;
        let embedded = self.embed.forward(g, &self.params, raw.tokens)?;
        let pos = g.param(&self.params, self.encoder_position);
        let tagged = g.add(embedded, pos)?;

        let visible = mask.visible_indices();
        let token = g.param(&self.params, self.mask_token.vector);
        let token_row = g.reshape(token, &[1, c.embed_dim])?;
        let full = if visible.is_empty() {
            g.gather_rows(token_row, &vec![0; n])?
        } else {
            let kept = g.gather_rows(tagged, &visible)?;
            let encoded = self.encode(g, kept)?;
            let stacked = g.concat_rows(encoded, token_row)?;
            let mut slot = vec![visible.len(); n];
            for (k, &i) in visible.iter().enumerate() {
                slot[i] = k;
            }
            g.gather_rows(stacked, &slot)?
        };
        let dpos = g.param(&self.params, self.decoder_position);
        let full = g.add(full, dpos)?;
        let z = self.run_layers(g, &self.decoder, full)?;
        let z = self.decoder_norm.forward(g, &self.params, z)?;
        let pixels = self.head.forward(g, &self.params, z)?;
        let grid = PatchGrid {
            rows: raw.rows,
            cols: raw.cols,
            dim: c.patch_dim(),
            tokens: pixels,
        };
        unpatchify(g, grid, c.patch_size, c.bands)
    }
}
