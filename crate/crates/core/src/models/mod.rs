//! Model assembly: the hierarchical Swin autoencoder and the ViT baseline.

pub mod config;
pub mod swin;
pub mod vit;

pub use config::{ModelConfig, Variant};
pub use swin::{SwinMae, SwinStage};
pub use vit::VitMae;

use crate::anomaly::ErrorMap;
use crate::error::Result;
use crate::masking::PatchMask;
use crate::numcore::{Graph, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Either autoencoder variant behind one interface.
#[derive(Clone, Debug)]
pub enum MaskedAutoencoder<T> {
    Swin(SwinMae<T>),
    Vit(VitMae<T>),
}

impl<T: Scalar> MaskedAutoencoder<T> {
    /// Validates the configuration and initialises parameters from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config.variant {
            Variant::SwinMae => MaskedAutoencoder::Swin(SwinMae::build(config, seed)?),
            Variant::VitMae => MaskedAutoencoder::Vit(VitMae::build(config, seed)?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            MaskedAutoencoder::Swin(m) => &m.config,
            MaskedAutoencoder::Vit(m) => &m.config,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        match self {
            MaskedAutoencoder::Swin(m) => &m.params,
            MaskedAutoencoder::Vit(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            MaskedAutoencoder::Swin(m) => &mut m.params,
            MaskedAutoencoder::Vit(m) => &mut m.params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().element_count()
    }

    /// Records a full forward pass; returns the `H×W×B` reconstruction node.
    pub fn forward(&self, g: &mut Graph<T>, image: Var, mask: &PatchMask) -> Result<Var> {
        match self {
            MaskedAutoencoder::Swin(m) => m.forward(g, image, mask),
            MaskedAutoencoder::Vit(m) => m.forward(g, image, mask),
        }
    }

    /// Forward pass outside of training.
    pub fn reconstruct(&self, image: &Tensor<T>, mask: &PatchMask) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, x, mask)?;
        Ok(g.value(out).clone())
    }
}

/// Per-pixel squared error summed over bands, recorded on the tape.
pub fn error_map_node<T: Scalar>(g: &mut Graph<T>, image: Var, reconstruction: Var) -> Result<Var> {
    let diff = g.sub(image, reconstruction)?;
    let sq = g.mul(diff, diff)?;
    g.sum_lastdim(sq)
}

/// Per-pixel squared error summed over bands: `H×W×B` pair → `H×W` map.
pub fn reconstruction_error<T: Scalar>(
    image: &Tensor<T>,
    reconstruction: &Tensor<T>,
) -> Result<ErrorMap<T>> {
    image.ensure_same_shape(reconstruction, "reconstruction_error")?;
    let shape = image.shape();
    let bands = *shape.last().unwrap_or(&1);
    let spatial = shape[..shape.len().saturating_sub(1)].to_vec();
    let values: Vec<T> = image
        .data()
        .chunks(bands)
        .zip(reconstruction.data().chunks(bands))
        .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum())
        .collect();
    ErrorMap::new(Tensor::new(spatial, values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    pub(crate) fn toy_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            image_size: 16,
            bands: 2,
            patch_size: 4,
            embed_dim: 8,
            stages: 2,
            heads_per_stage: vec![2, 2],
            window: 2,
            blocks_per_stage: 1,
            mask_ratio: 0.75,
            mask_window: 2,
            variant,
            vit_depth: 1,
            vit_decoder_depth: 1,
        }
    }

    fn image(cfg: &ModelConfig) -> Tensor<f64> {
        Tensor::from_fn([cfg.image_size, cfg.image_size, cfg.bands], |i| {
            ((i * 37 % 101) as f64) / 101.0
        })
    }

    #[test]
    fn output_shape_matches_input_for_both_variants() {
        for variant in [Variant::SwinMae, Variant::VitMae] {
            let cfg = ModelConfig {
                variant,
                ..ModelConfig::default()
            };
            let model = MaskedAutoencoder::<f64>::build(&cfg, 1).unwrap();
            let img = image(&cfg);
            let mut mask = PatchMask::visible(cfg.grid(), cfg.grid());
            mask.masked[..40].iter_mut().for_each(|m| *m = true);
            let out = model.reconstruct(&img, &mask).unwrap();
            assert_eq!(out.shape(), img.shape());
            assert!(out.all_finite());
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        for variant in [Variant::SwinMae, Variant::VitMae] {
            for cfg in [
                ModelConfig {
                    variant,
                    ..ModelConfig::default()
                },
                toy_config(variant),
                ModelConfig {
                    variant,
                    blocks_per_stage: 2,
                    stages: 2,
                    heads_per_stage: vec![1, 4],
                    vit_depth: 3,
                    ..ModelConfig::default()
                },
            ] {
                let model = MaskedAutoencoder::<f64>::build(&cfg, 3).unwrap();
                assert_eq!(model.param_count(), cfg.expected_param_count(), "{cfg:?}");
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::default();
        let a = MaskedAutoencoder::<f64>::build(&cfg, 7).unwrap();
        let b = MaskedAutoencoder::<f64>::build(&cfg, 7).unwrap();
        assert_eq!(a.params(), b.params());
        let c = MaskedAutoencoder::<f64>::build(&cfg, 8).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn invalid_config_rejected_on_build() {
        let cfg = ModelConfig {
            window: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(
            MaskedAutoencoder::<f64>::build(&cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_mask_ignores_mask_token() {
        let cfg = toy_config(Variant::SwinMae);
        let mut model = MaskedAutoencoder::<f64>::build(&cfg, 2).unwrap();
        let img = image(&cfg);
        let mask = PatchMask::visible(cfg.grid(), cfg.grid());
        let before = model.reconstruct(&img, &mask).unwrap();
        let MaskedAutoencoder::Swin(m) = &mut model else { unreachable!() };
        let id = m.mask_token.vector;
        m.params.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v += 5.0);
        let after = model.reconstruct(&img, &mask).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn wrong_image_shape_is_error() {
        let cfg = toy_config(Variant::SwinMae);
        let model = MaskedAutoencoder::<f64>::build(&cfg, 2).unwrap();
        let img = Tensor::<f64>::zeros([16, 16, 3]);
        let mask = PatchMask::visible(4, 4);
        assert!(model.reconstruct(&img, &mask).is_err());
    }

    #[test]
    fn error_map_examples() {
        let a = Tensor::<f64>::from_fn([3, 2, 4], |i| i as f64 * 0.1);
        let e = reconstruction_error(&a, &a).unwrap();
        assert!(e.values().data().iter().all(|&v| v == 0.0));
        let b = a.map(|v| v + 1.0);
        let e = reconstruction_error(&a, &b).unwrap();
        assert_eq!(e.values().shape(), &[3, 2]);
        assert!(e.values().data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn f32_models_run() {
        let cfg = toy_config(Variant::SwinMae);
        let model = MaskedAutoencoder::<f32>::build(&cfg, 2).unwrap();
        let img: Tensor<f32> = image(&cfg).cast();
        let out = model.reconstruct(&img, &PatchMask::all_masked(4, 4)).unwrap();
        assert_eq!(out.shape(), img.shape());
    }
}
