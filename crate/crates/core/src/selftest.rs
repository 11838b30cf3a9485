//! Gradient checks and brute-force oracles, runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anomaly::{knee_threshold, BinaryMask};
use crate::blocks::{
    apply_mask_tokens, global_attention, patch_expand, patch_merge, patchify, window_attention,
    AttentionWeights, LayerNorm, Linear, MaskToken, Mlp, PatchExpand, PatchGrid, PatchMerge,
};
use crate::error::Result;
use crate::masking::PatchMask;
use crate::metrics::{auroc, iou};
use crate::models::{MaskedAutoencoder, ModelConfig, Variant};
use crate::numcore::{Graph, ParamId, ParamStore, Parameter, Tensor, Var};

/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-6;
/// Maximum norm-wise relative error between analytic and numeric gradients.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Measured discrepancy (relative error, or count of mismatches).
    pub error: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, error: f64, passed: bool) -> Self {
        CheckResult {
            name: name.to_string(),
            error,
            passed,
        }
    }
}

/// `Σ out ⊙ R` with a fixed pseudo-random `R`, so no gradient cancels by symmetry.
pub fn probe_loss(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(g.shape(out).to_vec(), |_| rng.gen_range(-1.0..1.0));
    let weighted = g.mul_const(out, &r)?;
    Ok(g.sum(weighted))
}

fn evaluate(
    store: &ParamStore<f64>,
    f: &impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    Ok(g.value(loss).item())
}

/// Norm-wise relative error between tape gradients and central differences.
///
/// At most `per_param` evenly spaced entries of each parameter are probed.
pub fn gradcheck(
    store: &ParamStore<f64>,
    per_param: usize,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (id, grad) in g.param_grads() {
        analytic[id.index()] = Some(grad.to_vec());
    }
    let mut probe = store.clone();
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for id in store.ids() {
        let len = store.get(id).tensor.len();
        let stride = (len / per_param.max(1)).max(1);
        for i in (0..len).step_by(stride).take(per_param) {
            let orig = probe.get(id).tensor.data()[i];
            probe.get_mut(id).tensor.data_mut()[i] = orig + GRADCHECK_STEP;
            let up = evaluate(&probe, &f)?;
            probe.get_mut(id).tensor.data_mut()[i] = orig - GRADCHECK_STEP;
            let down = evaluate(&probe, &f)?;
            probe.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
            let a = analytic[id.index()].as_ref().map_or(0.0, |v| v[i]);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
    }
    let scale = a2.sqrt().max(n2.sqrt());
    Ok(if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale })
}

fn input(store: &mut ParamStore<f64>, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> ParamId {
    let t = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0));
    store.add(Parameter::new(name, t, false)).expect("unique name")
}

fn grid_of(g: &mut Graph<f64>, store: &ParamStore<f64>, id: ParamId, rows: usize, cols: usize) -> PatchGrid {
    let tokens = g.param(store, id);
    let dim = store.get(id).tensor.shape()[1];
    PatchGrid {
        rows,
        cols,
        dim,
        tokens,
    }
}

fn check(name: &str, store: &ParamStore<f64>, per_param: usize, f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>) -> Result<CheckResult> {
    let err = gradcheck(store, per_param, f)?;
    Ok(CheckResult::new(name, err, err < GRADCHECK_TOLERANCE))
}

/// Gradient checks for every building block and both full models at a toy size.
pub fn gradcheck_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(41);

    let mut s = ParamStore::new();
    let img = input(&mut s, "image", &[8, 8, 2], &mut rng);
    let embed = Linear::new(&mut s, "embed", 32, 6, true, &mut rng)?;
    out.push(check("patch_embed", &s, 16, |g, st| {
        let x = g.param(st, img);
        let p = patchify(g, x, 4)?;
        let y = embed.forward(g, st, p.tokens)?;
        probe_loss(g, y, 1)
    })?);

    for shift in [0, 1] {
        let mut s = ParamStore::new();
        let x = input(&mut s, "tokens", &[16, 8], &mut rng);
        let w = AttentionWeights::new(&mut s, "attn", 8, 2, &mut rng)?;
        for p in s.iter_mut() {
            if p.decay {
                p.tensor = p.tensor.map(|v| v * 20.0);
            }
        }
        out.push(check(&format!("window_attention_shift{shift}"), &s, 16, |g, st| {
            let grid = grid_of(g, st, x, 4, 4);
            let y = window_attention(g, st, grid, &w, 2, shift)?;
            probe_loss(g, y.tokens, 2)
        })?);
    }

    let mut s = ParamStore::new();
    let x = input(&mut s, "tokens", &[16, 4], &mut rng);
    let merge = PatchMerge::new(&mut s, "merge", 4, &mut rng)?;
    out.push(check("patch_merge", &s, 16, |g, st| {
        let grid = grid_of(g, st, x, 4, 4);
        let y = patch_merge(g, st, grid, &merge)?;
        probe_loss(g, y.tokens, 3)
    })?);

    let mut s = ParamStore::new();
    let x = input(&mut s, "tokens", &[4, 8], &mut rng);
    let expand = PatchExpand::new(&mut s, "expand", 8, &mut rng)?;
    out.push(check("patch_expand", &s, 16, |g, st| {
        let grid = grid_of(g, st, x, 2, 2);
        let y = patch_expand(g, st, grid, &expand)?;
        probe_loss(g, y.tokens, 4)
    })?);

    let mut s = ParamStore::new();
    let x = input(&mut s, "tokens", &[5, 6], &mut rng);
    let ln = LayerNorm::new(&mut s, "ln", 6)?;
    for p in s.iter_mut() {
        if p.name.starts_with("ln") {
            let data: Vec<f64> = p.tensor.data().iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
            p.tensor = Tensor::new(p.tensor.shape().to_vec(), data)?;
        }
    }
    out.push(check("layer_norm", &s, 32, |g, st| {
        let xv = g.param(st, x);
        let y = ln.forward(g, st, xv)?;
        probe_loss(g, y, 5)
    })?);

    let mut s = ParamStore::new();
    let x = input(&mut s, "tokens", &[5, 4], &mut rng);
    let mlp = Mlp::new(&mut s, "mlp", 4, &mut rng)?;
    for p in s.iter_mut() {
        p.tensor = p.tensor.map(|v| v * 30.0 + 0.01);
    }
    out.push(check("mlp", &s, 32, |g, st| {
        let xv = g.param(st, x);
        let y = mlp.forward(g, st, xv)?;
        probe_loss(g, y, 6)
    })?);

    let mut s = ParamStore::new();
    let x = input(&mut s, "tokens", &[16, 4], &mut rng);
    let token = MaskToken::new(&mut s, "mask_token", 4, &mut rng)?;
    let mut mask = PatchMask::visible(4, 4);
    for i in [0, 1, 4, 5, 10, 15] {
        mask.masked[i] = true;
    }
    out.push(check("mask_token", &s, 64, |g, st| {
        let grid = grid_of(g, st, x, 4, 4);
        let y = apply_mask_tokens(g, st, grid, &mask, &token)?;
        let sq = g.mul(y.tokens, y.tokens)?;
        probe_loss(g, sq, 7)
    })?);

    for variant in [Variant::SwinMae, Variant::VitMae] {
        let cfg = toy_model_config(variant);
        let model = MaskedAutoencoder::<f64>::build(&cfg, 9)?;
        let mut store = model.params().clone();
        for p in store.iter_mut() {
            let data: Vec<f64> = p.tensor.data().iter().map(|v| v * 10.0 + rng.gen_range(-0.05..0.05)).collect();
            p.tensor = Tensor::new(p.tensor.shape().to_vec(), data)?;
        }
        let image = Tensor::from_fn([16, 16, 2], |_| rng.gen_range(0.0..1.0));
        let mut mask = PatchMask::visible(4, 4);
        for i in [0, 1, 4, 5, 10, 11, 14, 15] {
            mask.masked[i] = true;
        }
        let name = match variant {
            Variant::SwinMae => "swin_mae",
            Variant::VitMae => "vit_mae",
        };
        let mut m = model.clone();
        *m.params_mut() = store.clone();
        out.push(check(name, &store, 6, |g, st| {
            let mut local = m.clone();
            *local.params_mut() = st.clone();
            let x = g.constant(image.clone());
            let y = local.forward(g, x, &mask)?;
            probe_loss(g, y, 8)
        })?);
    }
    Ok(out)
}

/// 16×16×2 two-stage configuration used by the checks.
pub fn toy_model_config(variant: Variant) -> ModelConfig {
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

/// Largest absolute difference between window attention with one window
/// covering the grid and plain global attention.
pub fn window_vs_global(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let x = input(&mut s, "tokens", &[16, 8], &mut rng);
    let w = AttentionWeights::new(&mut s, "attn", 8, 2, &mut rng)?;
    for p in s.iter_mut() {
        p.tensor = p.tensor.map(|v| v * 25.0);
    }
    let mut g = Graph::new();
    let grid = grid_of(&mut g, &s, x, 4, 4);
    let a = window_attention(&mut g, &s, grid, &w, 4, 0)?;
    let b = global_attention(&mut g, &s, grid.tokens, &w)?;
    Ok(g
        .data(a.tokens)
        .iter()
        .zip(g.data(b))
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max))
}

/// IoU by explicit index sets.
pub fn oracle_iou(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    use std::collections::BTreeSet;
    let p: BTreeSet<usize> = (0..pred.values.len()).filter(|&i| pred.values[i] == 1).collect();
    let t: BTreeSet<usize> = (0..gt.values.len()).filter(|&i| gt.values[i] == 1).collect();
    let union = p.union(&t).count();
    if union == 0 {
        1.0
    } else {
        p.intersection(&t).count() as f64 / union as f64
    }
}

/// AUROC as the fraction of (positive, negative) pairs ranked correctly, ties ½.
pub fn oracle_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Knee index by perpendicular distance below the chord from first to last point.
pub fn oracle_knee(sorted: &[f64]) -> Option<usize> {
    let n = sorted.len();
    let (x0, y0) = (0.0, sorted[0]);
    let (x1, y1) = ((n - 1) as f64, sorted[n - 1]);
    if y1 == y0 {
        return None;
    }
    let mut best = None;
    let mut best_d = 0.0;
    for (i, &y) in sorted.iter().enumerate() {
        let x = i as f64;
        let chord = y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        let d = (chord - y) / (y1 - y0);
        if d > best_d + 1e-12 {
            best_d = d;
            best = Some(i);
        }
    }
    best
}

/// Random convex-ish ascending curve: a noisy floor followed by a steep tail.
pub fn random_sorted_curve(rng: &mut impl Rng) -> Vec<f64> {
    let n = rng.gen_range(20..400);
    let tail = rng.gen_range(1..n / 4 + 2);
    let floor: f64 = rng.gen_range(0.0..0.3);
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            if i + tail >= n {
                floor + rng.gen_range(0.5..2.0)
            } else {
                floor + rng.gen_range(0.0..0.2) * rng.gen_range(0.0..1.0f64).powi(3)
            }
        })
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

fn random_mask(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask {
        height: h,
        width: w,
        values: (0..h * w).map(|_| u8::from(rng.gen_bool(density))).collect(),
    }
}

/// Oracle comparisons: window/global attention, IoU, AUROC and knee index.
pub fn oracle_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    let gap = (0..5).map(window_vs_global).collect::<Result<Vec<_>>>()?;
    let worst = gap.iter().copied().fold(0.0, f64::max);
    out.push(CheckResult::new("window_equals_global", worst, worst <= 1e-10));

    let mut mismatches = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let density = rng.gen_range(0.0..1.0);
        let p = random_mask(&mut rng, h, w, density);
        let density = rng.gen_range(0.0..1.0);
        let t = random_mask(&mut rng, h, w, density);
        if iou(&p, &t)? != oracle_iou(&p, &t) {
            mismatches += 1;
        }
    }
    out.push(CheckResult::new("iou_oracle", mismatches as f64, mismatches == 0));

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(4..200);
        let levels = rng.gen_range(2..50);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.3))).collect();
        labels[0] = 1;
        labels[1] = 0;
        worst = worst.max((auroc(&scores, &labels)? - oracle_auroc(&scores, &labels)).abs());
    }
    out.push(CheckResult::new("auroc_oracle", worst, worst <= 1e-12));

    let mut mismatches = 0;
    for _ in 0..100 {
        let curve = random_sorted_curve(&mut rng);
        if knee_threshold(&curve).knee_index != oracle_knee(&curve) {
            mismatches += 1;
        }
    }
    out.push(CheckResult::new("knee_oracle", mismatches as f64, mismatches == 0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_flags_a_wrong_gradient() {
        let mut s = ParamStore::new();
        let id = s.add(Parameter::new("x", Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap(), false)).unwrap();
        let good = gradcheck(&s, 8, |g, st| {
            let x = g.param(st, id);
            let y = g.mul(x, x)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(good < 1e-8);
        let bad = gradcheck(&s, 8, |g, st| {
            let x = g.param(st, id);
            let c = g.constant(st.get(id).tensor.clone());
            let y = g.mul(x, c)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(bad > 0.1);
    }

    #[test]
    fn oracles_agree_on_small_cases() {
        assert_eq!(oracle_auroc(&[0.1, 0.2, 0.3], &[0, 1, 1]), 1.0);
        assert_eq!(oracle_knee(&[0.0, 0.0, 0.0, 1.0]), Some(2));
        assert_eq!(oracle_knee(&[0.0, 1.0, 2.0]), None);
    }
}
