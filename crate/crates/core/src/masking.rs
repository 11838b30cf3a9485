//! Patch and window masks for training, and the K-run inference schedule.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Binary mask over the stage-1 patch grid, row-major; `true` = masked.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchMask {
    pub rows: usize,
    pub cols: usize,
    pub masked: Vec<bool>,
}

impl PatchMask {
    pub fn visible(rows: usize, cols: usize) -> Self {
        PatchMask {
            rows,
            cols,
            masked: vec![false; rows * cols],
        }
    }

    pub fn all_masked(rows: usize, cols: usize) -> Self {
        PatchMask {
            rows,
            cols,
            masked: vec![true; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.masked[row * self.cols + col]
    }

    /// Indices of visible patches in row-major order.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    /// Expands to a pixel-level H×W mask (1.0 where masked).
    pub fn to_pixels(&self, patch: usize) -> Tensor<f64> {
        let (h, w) = (self.rows * patch, self.cols * patch);
        Tensor::from_fn([h, w], |i| {
            let (y, x) = (i / w, i % w);
            if self.is_masked(y / patch, x / patch) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// u8 raster (0/1) for export in the tensor file format.
    pub fn to_u8(&self) -> Vec<u8> {
        self.masked.iter().map(|&m| m as u8).collect()
    }
}

/// Number of windows masked per run: ⌈ratio · windows⌉.
///
/// A tolerance of 1e-9 absorbs products like 0.7·10 = 7.000000000000001.
pub fn masked_window_count(ratio: f64, windows: usize) -> usize {
    let exact = ratio * windows as f64;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(windows)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(vec![format!(
            "mask ratio must lie in [0,1), got {ratio}"
        )]));
    }
    Ok(())
}

fn window_grid(rows: usize, cols: usize, mask_window: usize) -> Result<(usize, usize)> {
    if mask_window == 0 || !rows.is_multiple_of(mask_window) || !cols.is_multiple_of(mask_window) {
        return Err(Error::Shape(format!(
            "patch grid {rows}x{cols} is not divisible by mask window {mask_window}"
        )));
    }
    Ok((rows / mask_window, cols / mask_window))
}

fn expand_windows(rows: usize, cols: usize, mw: usize, chosen: &[usize]) -> PatchMask {
    let wcols = cols / mw;
    let mut mask = PatchMask::visible(rows, cols);
    for &w in chosen {
        let (wr, wc) = (w / wcols, w % wcols);
        for r in wr * mw..(wr + 1) * mw {
            for c in wc * mw..(wc + 1) * mw {
                mask.masked[r * cols + c] = true;
            }
        }
    }
    mask
}

/// Masks ⌈ratio · windows⌉ whole mask-windows chosen uniformly without replacement.
pub fn window_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    mask_window: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<PatchMask> {
    check_ratio(ratio)?;
    let (wr, wc) = window_grid(rows, cols, mask_window)?;
    let total = wr * wc;
    let count = masked_window_count(ratio, total);
    let chosen = rand::seq::index::sample(rng, total, count).into_vec();
    Ok(expand_windows(rows, cols, mask_window, &chosen))
}

/// Per-patch random masking; a window mask with one-patch windows.
pub fn patch_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<PatchMask> {
    window_mask(rows, cols, 1, ratio, rng)
}

/// K masks used for one image at inference time.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub rows: usize,
    pub cols: usize,
    pub mask_window: usize,
    pub ratio: f64,
    pub runs: Vec<PatchMask>,
}

impl MaskPlan {
    pub fn k(&self) -> usize {
        self.runs.len()
    }

    /// How many runs mask each mask-window, row-major over the window grid.
    pub fn window_coverage(&self) -> Vec<usize> {
        let mw = self.mask_window;
        let (wr, wc) = (self.rows / mw, self.cols / mw);
        (0..wr * wc)
            .map(|w| {
                let (r, c) = ((w / wc) * mw, (w % wc) * mw);
                self.runs.iter().filter(|m| m.is_masked(r, c)).count()
            })
            .collect()
    }
}

/// Builds the K-run schedule.
///
/// Stratified plans walk one shuffled cyclic order of the windows and hand
/// each run the next ⌈ratio·W⌉ windows, so every window is masked either
/// ⌊K·c/W⌋ or ⌈K·c/W⌉ times. Otherwise runs are independent window masks.
pub fn inference_schedule<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    mask_window: usize,
    ratio: f64,
    k: usize,
    rng: &mut R,
    stratified: bool,
) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    if k == 0 {
        return Err(Error::Config(vec!["K must be at least 1".into()]));
    }
    let (wr, wc) = window_grid(rows, cols, mask_window)?;
    let total = wr * wc;
    let per_run = masked_window_count(ratio, total);
    let runs = if stratified {
        if k * per_run < total {
            return Err(Error::Config(vec![format!(
                "stratified schedule infeasible: {k} runs x {per_run} windows cannot cover {total} windows"
            )]));
        }
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(rng);
        (0..k)
            .map(|run| {
                let chosen: Vec<usize> = (0..per_run)
                    .map(|t| order[(run * per_run + t) % total])
                    .collect();
                expand_windows(rows, cols, mask_window, &chosen)
            })
            .collect()
    } else {
        (0..k)
            .map(|_| window_mask(rows, cols, mask_window, ratio, rng))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(MaskPlan {
        rows,
        cols,
        mask_window,
        ratio,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn window_mask_examples() {
        let m = window_mask(8, 8, 2, 0.75, &mut rng(1)).unwrap();
        assert_eq!(m.masked_count(), 48);
        let m = window_mask(8, 8, 2, 0.0, &mut rng(1)).unwrap();
        assert_eq!(m.masked_count(), 0);
        let m = window_mask(4, 4, 4, 0.75, &mut rng(1)).unwrap();
        assert_eq!(m.masked_count(), 16);
        assert!(window_mask(8, 8, 3, 0.5, &mut rng(1)).is_err());
        assert!(window_mask(8, 8, 2, 1.0, &mut rng(1)).is_err());
    }

    #[test]
    fn window_mask_never_splits_windows() {
        let m = window_mask(8, 8, 2, 0.5, &mut rng(9)).unwrap();
        for wr in 0..4 {
            for wc in 0..4 {
                let first = m.is_masked(2 * wr, 2 * wc);
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    assert_eq!(m.is_masked(2 * wr + dr, 2 * wc + dc), first);
                }
            }
        }
    }

    #[test]
    fn patch_mask_is_deterministic_and_exact() {
        let a = patch_mask(8, 8, 0.75, &mut rng(5)).unwrap();
        let b = patch_mask(8, 8, 0.75, &mut rng(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.masked_count(), 48);
    }

    #[test]
    fn ceiling_tolerates_representation_error() {
        assert_eq!(masked_window_count(0.7, 10), 7);
        assert_eq!(masked_window_count(0.75, 16), 12);
        assert_eq!(masked_window_count(0.75, 1), 1);
        assert_eq!(masked_window_count(0.01, 16), 1);
    }

    #[test]
    fn stratified_covers_every_window() {
        let plan = inference_schedule(8, 8, 2, 0.75, 32, &mut rng(2), true).unwrap();
        assert_eq!(plan.k(), 32);
        let cov = plan.window_coverage();
        assert!(cov.iter().all(|&c| c == 24), "{cov:?}");
        for run in &plan.runs {
            assert_eq!(run.masked_count(), 48);
        }
    }

    #[test]
    fn stratified_infeasible_is_error() {
        assert!(inference_schedule(8, 8, 2, 0.1, 2, &mut rng(2), true).is_err());
        assert!(inference_schedule(8, 8, 2, 0.1, 2, &mut rng(2), false).is_ok());
    }

    #[test]
    fn single_run_matches_window_mask_draw() {
        let plan = inference_schedule(8, 8, 2, 0.75, 1, &mut rng(4), false).unwrap();
        let direct = window_mask(8, 8, 2, 0.75, &mut rng(4)).unwrap();
        assert_eq!(plan.runs[0], direct);
    }

    #[test]
    fn pixel_expansion() {
        let mut m = PatchMask::visible(2, 2);
        m.masked[1] = true;
        let px = m.to_pixels(2);
        assert_eq!(px.at(&[0, 2]), 1.0);
        assert_eq!(px.at(&[1, 3]), 1.0);
        assert_eq!(px.at(&[2, 2]), 0.0);
        assert_eq!(px.sum(), 4.0);
    }
}
