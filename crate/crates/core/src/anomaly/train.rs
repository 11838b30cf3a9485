//! Training loop with plain MSE or the anomaly-suppression loss.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::anomaly::maps::{
    asl_weight_map, weighted_loss_node, ErrorMap, LossForm, WeightMap, WeightScaling,
};
use crate::config::{KeyValues, Switch};
use crate::error::{Error, Result};
use crate::masking::{window_mask, PatchMask};
use crate::models::{error_map_node, reconstruction_error, MaskedAutoencoder};
use crate::numcore::{adamw_step, Graph, OptimConfig, ParamId, Tensor};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, stream};

/// Pixels that contribute to the reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossSupport {
    /// Only pixels under masked patches.
    Masked,
    /// Every pixel.
    All,
}

impl FromStr for LossSupport {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "masked" => Ok(LossSupport::Masked),
            "all" => Ok(LossSupport::All),
            other => Err(format!("expected masked|all, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Epochs of plain MSE before weight maps are first computed; `None` = 10% of epochs.
    pub warmup_epochs: Option<usize>,
    /// Epochs between weight-map refreshes once warmup is over.
    pub refresh_period: usize,
    pub asl: bool,
    pub loss_support: LossSupport,
    pub weight_scaling: WeightScaling,
    pub loss_form: LossForm,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            optim: OptimConfig::default(),
            warmup_epochs: None,
            refresh_period: 5,
            asl: true,
            loss_support: LossSupport::Masked,
            weight_scaling: WeightScaling::Mean,
            loss_form: LossForm::Mean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.epochs / 10)
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.epochs == 0 {
            p.push("epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".to_string());
        }
        if self.refresh_period == 0 {
            p.push("refresh_period must be at least 1".to_string());
        }
        if let Err(Error::Config(mut more)) = self.optim.validate() {
            p.append(&mut more);
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Whether weight maps are (re)computed at the start of `epoch` (0-based).
    pub fn refreshes_at(&self, epoch: usize) -> bool {
        let warmup = self.warmup();
        self.asl && epoch >= warmup && (epoch - warmup).is_multiple_of(self.refresh_period)
    }

    pub fn from_kv(kv: &mut KeyValues) -> Self {
        let mut c = TrainConfig::default();
        if let Some(v) = kv.take("epochs") {
            c.epochs = v;
        }
        if let Some(v) = kv.take("batch_size") {
            c.batch_size = v;
        }
        if let Some(v) = kv.take("learning_rate") {
            c.optim.learning_rate = v;
        }
        if let Some(v) = kv.take("weight_decay") {
            c.optim.weight_decay = v;
        }
        if let Some(v) = kv.take("beta1") {
            c.optim.beta1 = v;
        }
        if let Some(v) = kv.take("beta2") {
            c.optim.beta2 = v;
        }
        if let Some(v) = kv.take("epsilon") {
            c.optim.epsilon = v;
        }
        if let Some(v) = kv.take("warmup_epochs") {
            c.warmup_epochs = Some(v);
        }
        if let Some(v) = kv.take("refresh_period") {
            c.refresh_period = v;
        }
        if let Some(Switch(v)) = kv.take("asl") {
            c.asl = v;
        }
        if let Some(v) = kv.take("loss_support") {
            c.loss_support = v;
        }
        if let Some(v) = kv.take("weight_scaling") {
            c.weight_scaling = v;
        }
        if let Some(v) = kv.take("loss_form") {
            c.loss_form = v;
        }
        if let Some(v) = kv.take("seed") {
            c.seed = v;
        }
        c
    }

    pub fn to_kv_lines(&self) -> Vec<String> {
        let mut lines = vec![
            format!("epochs = {}", self.epochs),
            format!("batch_size = {}", self.batch_size),
            format!("learning_rate = {}", self.optim.learning_rate),
            format!("weight_decay = {}", self.optim.weight_decay),
            format!("beta1 = {}", self.optim.beta1),
            format!("beta2 = {}", self.optim.beta2),
            format!("epsilon = {}", self.optim.epsilon),
        ];
        if let Some(w) = self.warmup_epochs {
            lines.push(format!("warmup_epochs = {w}"));
        }
        lines.extend([
            format!("refresh_period = {}", self.refresh_period),
            format!("asl = {}", Switch(self.asl)),
            format!(
                "loss_support = {}",
                match self.loss_support {
                    LossSupport::Masked => "masked",
                    LossSupport::All => "all",
                }
            ),
            format!(
                "weight_scaling = {}",
                match self.weight_scaling {
                    WeightScaling::Raw => "raw",
                    WeightScaling::Mean => "mean",
                }
            ),
            format!(
                "loss_form = {}",
                match self.loss_form {
                    LossForm::Mean => "mean",
                    LossForm::Sum => "sum",
                }
            ),
            format!("seed = {}", self.seed),
        ]);
        lines
    }
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean optimised loss over all images.
    pub loss: f64,
    /// Mean unweighted per-pixel error over masked pixels.
    pub masked_mse: f64,
    pub asl_active: bool,
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: MaskedAutoencoder<T>,
    pub optim: OptimConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub weight_maps: Vec<Option<WeightMap<T>>>,
    pub history: Vec<EpochStats>,
    pub config: TrainConfig,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: MaskedAutoencoder<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(TrainState {
            model,
            optim: config.optim.clone(),
            epoch: 0,
            weight_maps: Vec::new(),
            history: Vec::new(),
            config,
        })
    }

    pub fn loss_history(&self) -> Vec<f64> {
        self.history.iter().map(|s| s.loss).collect()
    }
}

struct StepOutcome<T> {
    loss: T,
    masked_error: T,
    masked_pixels: usize,
    grads: Vec<(ParamId, Vec<T>)>,
}

/// Mask for image `index` in `epoch`; depends only on the seed and coordinates.
pub fn training_mask(
    model_cfg: &crate::models::ModelConfig,
    seed: u64,
    epoch: usize,
    index: usize,
) -> Result<PatchMask> {
    let mut rng = stream(seed, &[1, epoch as u64, index as u64]);
    let g = model_cfg.grid();
    window_mask(g, g, model_cfg.mask_window, model_cfg.mask_ratio, &mut rng)
}

fn image_step<T: Scalar>(
    model: &MaskedAutoencoder<T>,
    cfg: &TrainConfig,
    image: &Tensor<T>,
    mask: &PatchMask,
    weights: Option<&WeightMap<T>>,
) -> Result<StepOutcome<T>> {
    let mc = model.config();
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let recon = model.forward(&mut g, x, mask)?;
    let errors = error_map_node(&mut g, x, recon)?;
    let masked_px: Tensor<T> = mask.to_pixels(mc.patch_size).cast();
    let masked_pixels = masked_px.data().iter().filter(|&&v| v != T::zero()).count();
    let masked_error: T = g
        .data(errors)
        .iter()
        .zip(masked_px.data())
        .map(|(&e, &m)| e * m)
        .sum();
    let support = match cfg.loss_support {
        LossSupport::Masked if masked_pixels > 0 => Some(&masked_px),
        _ => None,
    };
    let unit;
    let w = match weights {
        Some(w) => &w.values,
        None => {
            unit = Tensor::ones([mc.image_size, mc.image_size]);
            &unit
        }
    };
    let loss = weighted_loss_node(&mut g, errors, w, support, cfg.loss_form)?;
    let loss_value = g.value(loss).item();
    g.backward(loss)?;
    let grads = g.param_grads().map(|(id, gr)| (id, gr.to_vec())).collect();
    Ok(StepOutcome {
        loss: loss_value,
        masked_error,
        masked_pixels,
        grads,
    })
}

/// Weight maps from a full unmasked reconstruction of every image.
pub fn compute_weight_maps<T: Scalar>(
    model: &MaskedAutoencoder<T>,
    images: &[Tensor<T>],
    scaling: WeightScaling,
    epoch: usize,
) -> Result<Vec<WeightMap<T>>> {
    let grid = model.config().grid();
    let visible = PatchMask::visible(grid, grid);
    images
        .par_iter()
        .map(|img| {
            let recon = model.reconstruct(img, &visible)?;
            let errors = reconstruction_error(img, &recon)?;
            let mut w = asl_weight_map(&errors, scaling);
            w.source_epoch = epoch;
            Ok(w)
        })
        .collect()
}

/// Per-image error maps of the current model on unmasked input.
pub fn unmasked_errors<T: Scalar>(
    model: &MaskedAutoencoder<T>,
    images: &[Tensor<T>],
) -> Result<Vec<ErrorMap<T>>> {
    let grid = model.config().grid();
    let visible = PatchMask::visible(grid, grid);
    images
        .par_iter()
        .map(|img| reconstruction_error(img, &model.reconstruct(img, &visible)?))
        .collect()
}

pub fn train<T: Scalar>(state: TrainState<T>, images: &[Tensor<T>]) -> Result<TrainState<T>> {
    train_with(state, images, |_| {})
}

/// Runs the remaining epochs, calling `observe` after each.
///
/// Images are processed in parallel within a batch; gradients are summed in
/// batch order, so results do not depend on the thread count.
pub fn train_with<T: Scalar>(
    mut state: TrainState<T>,
    images: &[Tensor<T>],
    mut observe: impl FnMut(&EpochStats),
) -> Result<TrainState<T>> {
    if images.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    state.config.validate()?;
    let cfg = state.config.clone();
    let mc = state.model.config().clone();
    let expected = [mc.image_size, mc.image_size, mc.bands];
    if let Some((i, img)) = images.iter().enumerate().find(|(_, im)| im.shape() != expected) {
        return Err(Error::Shape(format!(
            "training image {i} has shape {:?}, model expects {:?}",
            img.shape(),
            expected
        )));
    }
    if state.weight_maps.len() != images.len() {
        state.weight_maps = vec![None; images.len()];
    }
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        if cfg.refreshes_at(epoch) {
            let maps = compute_weight_maps(&state.model, images, cfg.weight_scaling, epoch)?;
            state.weight_maps = maps.into_iter().map(Some).collect();
        }
        let asl_active = cfg.asl && state.weight_maps.iter().all(Option::is_some);
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[0, epoch as u64]));

        let mut loss_sum = 0.0;
        let mut err_sum = 0.0;
        let mut px_sum = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let model = &state.model;
            let maps = &state.weight_maps;
            let outcomes = batch
                .par_iter()
                .map(|&i| {
                    let mask = training_mask(&mc, cfg.seed, epoch, i)?;
                    let w = if asl_active { maps[i].as_ref() } else { None };
                    image_step(model, &cfg, &images[i], &mask, w)
                })
                .collect::<Result<Vec<_>>>()?;
            let params = state.model.params_mut();
            params.zero_grad();
            let inv = T::one() / T::of_usize(batch.len());
            for out in &outcomes {
                if !out.loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, step {step}"
                    )));
                }
                loss_sum += out.loss.to_f64_lossy();
                err_sum += out.masked_error.to_f64_lossy();
                px_sum += out.masked_pixels;
                for (id, g) in &out.grads {
                    params.accumulate_grad(*id, g, inv);
                }
            }
            adamw_step(params, &mut state.optim);
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / images.len() as f64,
            masked_mse: if px_sum > 0 { err_sum / px_sum as f64 } else { 0.0 },
            asl_active,
        };
        observe(&stats);
        state.history.push(stats);
        state.epoch += 1;
    }
    Ok(state)
}

/// Reproducible per-run base seed for callers that need one.
pub fn run_seed(seed: u64, tag: u64) -> u64 {
    derive_seed(seed, &[2, tag])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, Variant};

    fn toy() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            bands: 2,
            patch_size: 4,
            embed_dim: 8,
            stages: 2,
            heads_per_stage: vec![2, 2],
            window: 2,
            mask_window: 2,
            variant: Variant::SwinMae,
            ..ModelConfig::default()
        }
    }

    fn images(n: usize) -> Vec<Tensor<f64>> {
        (0..n)
            .map(|k| {
                Tensor::from_fn([16, 16, 2], |i| {
                    let y = (i / 32) as f64;
                    0.5 + 0.4 * ((y + k as f64) * 0.9).sin()
                })
            })
            .collect()
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn refresh_schedule() {
        let cfg = TrainConfig {
            epochs: 20,
            warmup_epochs: Some(4),
            refresh_period: 5,
            ..Default::default()
        };
        let at: Vec<usize> = (0..20).filter(|&e| cfg.refreshes_at(e)).collect();
        assert_eq!(at, vec![4, 9, 14, 19]);
        assert_eq!(TrainConfig { epochs: 50, ..Default::default() }.warmup(), 5);
    }

    #[test]
    fn full_warmup_matches_asl_off() {
        let model = MaskedAutoencoder::<f64>::build(&toy(), 3).unwrap();
        let base = TrainConfig {
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let off = TrainConfig {
            asl: false,
            ..base.clone()
        };
        let on = TrainConfig {
            asl: true,
            warmup_epochs: Some(3),
            ..base
        };
        let data = images(3);
        let a = train(TrainState::new(model.clone(), off).unwrap(), &data).unwrap();
        let b = train(TrainState::new(model, on).unwrap(), &data).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.loss_history(), b.loss_history());
    }

    #[test]
    fn asl_activates_after_warmup() {
        let model = MaskedAutoencoder::<f64>::build(&toy(), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            warmup_epochs: Some(1),
            refresh_period: 1,
            ..Default::default()
        };
        let s = train(TrainState::new(model, cfg).unwrap(), &images(2)).unwrap();
        let active: Vec<bool> = s.history.iter().map(|h| h.asl_active).collect();
        assert_eq!(active, vec![false, true, true]);
        assert!(s.weight_maps.iter().all(|w| w.as_ref().unwrap().source_epoch == 2));
    }

    #[test]
    fn config_kv_roundtrip() {
        let c = TrainConfig {
            epochs: 7,
            warmup_epochs: Some(2),
            asl: false,
            loss_support: LossSupport::All,
            weight_scaling: WeightScaling::Raw,
            loss_form: LossForm::Sum,
            seed: 99,
            ..Default::default()
        };
        let mut kv = KeyValues::parse(&c.to_kv_lines().join("\n")).unwrap();
        let back = TrainConfig::from_kv(&mut kv);
        kv.finish().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_dataset_rejected() {
        let model = MaskedAutoencoder::<f64>::build(&toy(), 3).unwrap();
        let s = TrainState::new(model, TrainConfig::default()).unwrap();
        assert!(train(s, &[]).is_err());
    }
}
