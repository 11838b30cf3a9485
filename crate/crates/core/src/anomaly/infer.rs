use rayon::prelude::*;

use crate::anomaly::knee::{knee_threshold, KneeThreshold};
use crate::anomaly::maps::{binarize, AnomalyMap, ErrorMap};
use crate::error::{Error, Result};
use crate::masking::{inference_schedule, MaskPlan, PatchMask};
use crate::models::{reconstruction_error, MaskedAutoencoder};
use crate::numcore::Tensor;
use crate::scalar::Scalar;
use crate::seed::stream;

/// Averaged error map over the K masked reconstructions of `plan`.
///
/// Runs are independent and execute in parallel. Per-run maps are summed in
/// ascending order of their masks, so the result does not depend on the
/// order of runs inside the plan.
pub fn infer<T: Scalar>(
    model: &MaskedAutoencoder<T>,
    image: &Tensor<T>,
    plan: &MaskPlan,
) -> Result<ErrorMap<T>> {
    let grid = model.config().grid();
    if (plan.rows, plan.cols) != (grid, grid) {
        return Err(Error::Shape(format!(
            "mask plan grid {}x{} does not match model grid {grid}x{grid}",
            plan.rows, plan.cols
        )));
    }
    if plan.runs.is_empty() {
        return Err(Error::Contract("mask plan has no runs".into()));
    }
    let maps = plan
        .runs
        .par_iter()
        .map(|mask| {
            let recon = model.reconstruct(image, mask)?;
            Ok((mask, reconstruction_error(image, &recon)?))
        })
        .collect::<Result<Vec<_>>>()?;
    average_maps(maps)
}

/// Fixed-order mean of per-run maps keyed by their masks.
pub fn average_maps<T: Scalar>(mut maps: Vec<(&PatchMask, ErrorMap<T>)>) -> Result<ErrorMap<T>> {
    maps.sort_by(|a, b| a.0.cmp(b.0));
    let k = maps.len();
    let shape = maps[0].1.values().shape().to_vec();
    let mut acc = vec![T::zero(); maps[0].1.values().len()];
    for (_, m) in &maps {
        if m.values().shape() != shape.as_slice() {
            return Err(Error::Shape("run error maps differ in shape".into()));
        }
        for (a, &v) in acc.iter_mut().zip(m.values().data()) {
            *a += v;
        }
    }
    let kf = T::of_usize(k);
    ErrorMap::new(Tensor::new(shape, acc.into_iter().map(|v| v / kf).collect())?)
}

/// Everything produced for one image by the anomaly pipeline.
#[derive(Clone, Debug)]
pub struct Detection<T> {
    pub errors: ErrorMap<T>,
    pub threshold: KneeThreshold<T>,
    pub anomaly: AnomalyMap,
}

/// Inference options: number of runs, schedule kind and mask seed.
#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub k: usize,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            k: 32,
            stratified: true,
            seed: 0,
        }
    }
}

/// Mask plan for image `index`; fixed by the seed and index.
pub fn plan_for(
    model: &MaskedAutoencoder<impl Scalar>,
    cfg: &InferConfig,
    index: usize,
) -> Result<MaskPlan> {
    let mc = model.config();
    let g = mc.grid();
    let mut rng = stream(cfg.seed, &[3, index as u64]);
    inference_schedule(g, g, mc.mask_window, mc.mask_ratio, cfg.k, &mut rng, cfg.stratified)
}

/// Averaged error map, knee threshold and binary anomaly map for one image.
pub fn detect<T: Scalar>(
    model: &MaskedAutoencoder<T>,
    image: &Tensor<T>,
    plan: &MaskPlan,
) -> Result<Detection<T>> {
    let errors = infer(model, image, plan)?;
    let threshold = knee_threshold(errors.values().data());
    let anomaly = binarize(&errors, threshold.binarization_threshold());
    Ok(Detection {
        errors,
        threshold,
        anomaly,
    })
}
