//! Segmentation metrics and the text report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::anomaly::BinaryMask;
use crate::error::{Error, Result};

/// Pixel confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let mut c = Counts::default();
        for (&p, &g) in pred.values.iter().zip(&gt.values) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// `TP / (TP + FP + FN)`; 1 when neither mask has a positive.
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Counts::of(pred, gt)?.iou())
}

pub fn miou(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Contract("mIoU needs at least one class".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Rank-based AUROC with midranks for ties; `labels` are 0/1.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("AUROC scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract(
            "AUROC needs at least one positive and one negative pixel".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] != 0 {
                rank_sum += midrank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn pixel_auroc(errors: &[f64], gt: &BinaryMask) -> Result<f64> {
    auroc(errors, &gt.values)
}

/// Hex SHA-256 prefix identifying a configuration text.
pub fn fingerprint(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Prediction and ground truth for one evaluated image.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    /// `None` for normal images.
    pub class_tag: Option<String>,
    pub pred: BinaryMask,
    pub gt: BinaryMask,
    /// Averaged error map, used for AUROC when present.
    pub scores: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IouMode {
    /// IoU over the pooled pixel counts of each class.
    #[default]
    Pooled,
    /// Mean of per-image IoUs within each class.
    PerImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub images: usize,
    pub counts: Counts,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Anomaly classes only; normal images are summarised separately.
    pub classes: BTreeMap<String, ClassMetrics>,
    pub miou: f64,
    /// Pooled over every image with scores; `None` when no scores or no positives.
    pub pixel_auroc: Option<f64>,
    /// Counts over images without anomalies.
    pub normal: Counts,
    pub normal_images: usize,
    pub iou_mode: IouMode,
    pub fingerprint: String,
    pub seed: u64,
}

impl MetricReport {
    /// `key = value` lines sorted by key, a blank line, then a per-class table.
    pub fn render(&self) -> String {
        let mut kv = BTreeMap::new();
        kv.insert("classes".to_string(), self.classes.keys().cloned().collect::<Vec<_>>().join(","));
        kv.insert("fingerprint".into(), self.fingerprint.clone());
        kv.insert(
            "images".into(),
            (self.classes.values().map(|c| c.images).sum::<usize>() + self.normal_images).to_string(),
        );
        kv.insert(
            "iou_mode".into(),
            match self.iou_mode {
                IouMode::Pooled => "pooled",
                IouMode::PerImage => "per-image",
            }
            .into(),
        );
        kv.insert("miou".into(), format!("{:.6}", self.miou));
        kv.insert("normal_fp_pixels".into(), self.normal.fp.to_string());
        kv.insert("normal_images".into(), self.normal_images.to_string());
        kv.insert(
            "pixel_auroc".into(),
            self.pixel_auroc.map_or("n/a".into(), |a| format!("{a:.6}")),
        );
        kv.insert("seed".into(), self.seed.to_string());
        for (tag, c) in &self.classes {
            kv.insert(format!("iou.{tag}"), format!("{:.6}", c.iou));
        }
        let mut out = String::new();
        for (k, v) in &kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out.push_str("\nclass\timages\ttp\tfp\tfn\ttn\tiou\n");
        let rows = self
            .classes
            .iter()
            .map(|(t, c)| (t.as_str(), c.images, c.counts, Some(c.iou)))
            .chain(std::iter::once(("none", self.normal_images, self.normal, None)));
        for (tag, images, c, iou) in rows {
            let _ = writeln!(
                out,
                "{tag}\t{images}\t{}\t{}\t{}\t{}\t{}",
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                iou.map_or("-".into(), |v| format!("{v:.6}"))
            );
        }
        out
    }
}

/// Groups items by class and computes IoU per class, mIoU and pooled AUROC.
pub fn evaluate(items: &[EvalItem], mode: IouMode, fingerprint: &str, seed: u64) -> Result<MetricReport> {
    let counts = items
        .par_iter()
        .map(|it| Counts::of(&it.pred, &it.gt))
        .collect::<Result<Vec<_>>>()?;
    let mut grouped: BTreeMap<String, Vec<Counts>> = BTreeMap::new();
    let mut normal = Counts::default();
    let mut normal_images = 0;
    for (it, c) in items.iter().zip(&counts) {
        match &it.class_tag {
            Some(tag) => grouped.entry(tag.clone()).or_default().push(*c),
            None => {
                normal += *c;
                normal_images += 1;
            }
        }
    }
    if grouped.is_empty() {
        return Err(Error::Contract("no anomalous images to evaluate".into()));
    }
    let classes: BTreeMap<String, ClassMetrics> = grouped
        .into_iter()
        .map(|(tag, cs)| {
            let mut pooled = Counts::default();
            for c in &cs {
                pooled += *c;
            }
            let iou = match mode {
                IouMode::Pooled => pooled.iou(),
                IouMode::PerImage => cs.iter().map(Counts::iou).sum::<f64>() / cs.len() as f64,
            };
            (
                tag,
                ClassMetrics {
                    images: cs.len(),
                    counts: pooled,
                    iou,
                },
            )
        })
        .collect();
    let ious: Vec<f64> = classes.values().map(|c| c.iou).collect();
    let miou = miou(&ious)?;

    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for it in items {
        if let Some(s) = &it.scores {
            if s.len() != it.gt.values.len() {
                return Err(Error::Shape(format!("{}: error map and label sizes differ", it.id)));
            }
            scores.extend_from_slice(s);
            labels.extend_from_slice(&it.gt.values);
        }
    }
    let pixel_auroc = auroc(&scores, &labels).ok();
    Ok(MetricReport {
        classes,
        miou,
        pixel_auroc,
        normal,
        normal_images,
        iou_mode: mode,
        fingerprint: fingerprint.to_string(),
        seed,
    })
}
