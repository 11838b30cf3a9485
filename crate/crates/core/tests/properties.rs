use std::path::Path;

use agrimae_core::anomaly::{
    asl_weight_map, binarize, knee_threshold, BinaryMask, ErrorMap, WeightScaling,
};
use agrimae_core::blocks::{patchify, unpatchify};
use agrimae_core::data::Raster;
use agrimae_core::masking::{inference_schedule, masked_window_count, window_mask};
use agrimae_core::metrics::{auroc, iou, miou};
use agrimae_core::numcore::{Graph, Tensor};
use agrimae_core::selftest::{oracle_auroc, oracle_iou};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn error_map(values: Vec<f64>, width: usize) -> ErrorMap<f64> {
    let h = values.len() / width;
    ErrorMap::new(Tensor::new([h, width], values).unwrap()).unwrap()
}

fn masks(len: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (
        prop::collection::vec(0u8..=1, len),
        prop::collection::vec(0u8..=1, len),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unpatchify_inverts_patchify(
        gh in 1usize..4, gw in 1usize..4, patch in 1usize..4, bands in 1usize..4, seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (gh * patch, gw * patch);
        let img = Tensor::from_fn([h, w, bands], |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let mut g = Graph::<f64>::new();
        let v = g.constant(img.clone());
        let grid = patchify(&mut g, v, patch).unwrap();
        prop_assert_eq!(grid.len(), gh * gw);
        let back = unpatchify(&mut g, grid, patch, bands).unwrap();
        prop_assert_eq!(g.value(back), &img);
    }

    #[test]
    fn window_masks_mask_the_ceiling_count(
        wr in 1usize..6, wc in 1usize..6, mw in 1usize..4, ratio in 0.0f64..0.99, seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = window_mask(wr * mw, wc * mw, mw, ratio, &mut rng).unwrap();
        let windows = masked_window_count(ratio, wr * wc);
        prop_assert_eq!(windows, ((ratio * (wr * wc) as f64) - 1e-9).ceil().max(0.0) as usize);
        prop_assert_eq!(m.masked_count(), windows * mw * mw);
    }

    #[test]
    fn stratified_plans_cover_every_window(
        g in 1usize..5, k in 4usize..40, ratio in 0.25f64..0.95, seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = inference_schedule(2 * g, 2 * g, 2, ratio, k, &mut rng, true).unwrap();
        prop_assert_eq!(plan.runs.len(), k);
        for r in 0..2 * g {
            for c in 0..2 * g {
                prop_assert!(plan.runs.iter().any(|m| m.is_masked(r, c)));
            }
        }
    }

    #[test]
    fn weights_reverse_error_order(values in prop::collection::vec(0.0f64..10.0, 4..40)) {
        let n = values.len() - values.len() % 2;
        let e = error_map(values[..n].to_vec(), 2);
        for scaling in [WeightScaling::Raw, WeightScaling::Mean] {
            let w = asl_weight_map(&e, scaling);
            let (ev, wv) = (e.values().data(), w.values.data());
            let argmax = (0..n).max_by(|&a, &b| ev[a].total_cmp(&ev[b])).unwrap();
            prop_assert_eq!(wv[argmax], 0.0);
            for i in 0..n {
                prop_assert!(wv[i] >= 0.0);
                for j in 0..n {
                    if ev[i] < ev[j] {
                        prop_assert!(wv[i] > wv[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn higher_threshold_flags_a_subset(
        values in prop::collection::vec(0.0f64..1.0, 2..64), a in 0.0f64..1.0, b in 0.0f64..1.0,
    ) {
        let n = values.len() - values.len() % 2;
        let e = error_map(values[..n].to_vec(), 2);
        let (lo, hi) = (a.min(b), a.max(b));
        let ml = binarize(&e, lo).mask;
        let mh = binarize(&e, hi).mask;
        prop_assert!(ml.values.iter().zip(&mh.values).all(|(l, h)| l >= h));
    }

    #[test]
    fn knee_is_scale_equivariant(
        values in prop::collection::vec(0.0f64..1.0, 3..80), scale in 0.01f64..100.0,
    ) {
        let a = knee_threshold(&values);
        let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
        let b = knee_threshold(&scaled);
        prop_assert_eq!(a.knee_index, b.knee_index);
        prop_assert!((b.theta - a.theta * scale).abs() <= 1e-9 * scale.max(1.0));
    }

    #[test]
    fn auroc_matches_pair_counting_and_ignores_monotone_maps(
        (scores, labels) in (4usize..60).prop_flat_map(|n| (
            prop::collection::vec(0u8..20, n).prop_map(|v| v.into_iter().map(f64::from).collect::<Vec<_>>()),
            prop::collection::vec(0u8..=1, n),
        )),
    ) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let a = auroc(&scores, &labels).unwrap();
        prop_assert!((a - oracle_auroc(&scores, &labels)).abs() < 1e-12);
        let warped: Vec<f64> = scores.iter().map(|s| (0.3 * s).exp() - 7.0).collect();
        prop_assert_eq!(auroc(&warped, &labels).unwrap(), a);
    }

    #[test]
    fn iou_matches_counting((p, t) in masks(48)) {
        let pred = BinaryMask::new(6, 8, p).unwrap();
        let gt = BinaryMask::new(6, 8, t).unwrap();
        let v = iou(&pred, &gt).unwrap();
        prop_assert_eq!(v, oracle_iou(&pred, &gt));
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn miou_is_the_mean(v in prop::collection::vec(0.0f64..=1.0, 1..12)) {
        let m = miou(&v).unwrap();
        prop_assert_eq!(m, v.iter().sum::<f64>() / v.len() as f64);
    }

    #[test]
    fn rasters_roundtrip(
        dims in prop::collection::vec(1usize..5, 1..4), seed: u64, as_u8: bool,
    ) {
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = if as_u8 {
            Raster::U8 { dims, data: (0..n).map(|_| rand::Rng::gen(&mut rng)).collect() }
        } else {
            Raster::F64 { dims, data: (0..n).map(|_| f64::from_bits(rand::Rng::gen::<u64>(&mut rng) >> 2)).collect() }
        };
        let bytes = r.encode().unwrap();
        prop_assert_eq!(Raster::decode(&bytes, Path::new("mem")).unwrap(), r);
    }
}
