//! Procedural field imagery: crop-row stripes over smooth per-band noise,
//! with optional anomalous regions recorded exactly in a label mask.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::anomaly::BinaryMask;
use crate::data::raster::{quantize_unit, Raster};
use crate::data::{resize_bilinear, write_index, IndexEntry, Sample};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::seed::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AnomalyClass {
    /// Dark, wet-looking elliptical patch with fine texture.
    Blob,
    /// Rectangle where the crop rows are missing and dry soil shows.
    StripeBreak,
    /// Region brightened in every band, stripes still visible.
    BrightPatch,
}

impl AnomalyClass {
    pub const ALL: [AnomalyClass; 3] = [
        AnomalyClass::Blob,
        AnomalyClass::StripeBreak,
        AnomalyClass::BrightPatch,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AnomalyClass::Blob => "blob",
            AnomalyClass::StripeBreak => "stripe-break",
            AnomalyClass::BrightPatch => "bright-patch",
        }
    }
}

impl fmt::Display for AnomalyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AnomalyClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        AnomalyClass::ALL
            .into_iter()
            .find(|c| c.tag() == s)
            .ok_or_else(|| format!("unknown anomaly class `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub count: usize,
    pub size: usize,
    pub bands: usize,
    /// Fraction of images that contain an anomaly.
    pub anomaly_fraction: f64,
    /// Classes assigned to anomalous images in rotation.
    pub classes: Vec<AnomalyClass>,
    /// Radius range (pixels) for elliptical regions; rectangles scale with it.
    pub blob_radius: (f64, f64),
    /// Standard deviation of per-pixel white noise.
    pub noise: f64,
    /// Crop-row period range in pixels.
    pub period: (f64, f64),
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            count: 64,
            size: 32,
            bands: 4,
            anomaly_fraction: 0.0,
            classes: AnomalyClass::ALL.to_vec(),
            blob_radius: (3.0, 6.0),
            noise: 0.02,
            period: (6.0, 9.0),
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.count == 0 {
            p.push("count must be at least 1".to_string());
        }
        if self.size < 8 {
            p.push(format!("size must be at least 8, got {}", self.size));
        }
        if self.bands == 0 {
            p.push("bands must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            p.push(format!(
                "anomaly_fraction must lie in [0,1], got {}",
                self.anomaly_fraction
            ));
        }
        if self.anomaly_fraction > 0.0 && self.classes.is_empty() {
            p.push("at least one anomaly class is required".to_string());
        }
        let (lo, hi) = self.blob_radius;
        if !(lo >= 1.0 && hi >= lo && 2.0 * hi < self.size as f64) {
            p.push(format!(
                "blob_radius ({lo}, {hi}) must satisfy 1 <= min <= max < size/2"
            ));
        }
        let (plo, phi) = self.period;
        if !(plo >= 2.0 && phi >= plo && phi.is_finite()) {
            p.push(format!("period ({plo}, {phi}) must satisfy 2 <= min <= max"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            p.push(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Number of anomalous images.
    pub fn anomalous_count(&self) -> usize {
        (self.anomaly_fraction * self.count as f64).round() as usize
    }

    /// Class for each image index (`None` for normal images).
    pub fn assignments(&self) -> Vec<Option<AnomalyClass>> {
        let mut out = vec![None; self.count];
        let n = self.anomalous_count().min(self.count);
        if n == 0 {
            return out;
        }
        let mut chosen = sample(&mut stream(self.seed, &[11]), self.count, n).into_vec();
        chosen.sort_unstable();
        for (j, i) in chosen.into_iter().enumerate() {
            out[i] = Some(self.classes[j % self.classes.len()]);
        }
        out
    }
}

pub fn sample_id(index: usize) -> String {
    format!("img{index:05}")
}

/// Soil and vegetation reflectance for band `b` (R, G, B, NIR, then generic).
fn band_colors(b: usize) -> (f64, f64) {
    match b {
        0 => (0.45, 0.20),
        1 => (0.35, 0.45),
        2 => (0.25, 0.15),
        3 => (0.30, 0.75),
        _ => (0.35, 0.60),
    }
}

fn blob_color(b: usize) -> f64 {
    [0.12, 0.18, 0.35, 0.06].get(b).copied().unwrap_or(0.10)
}

fn dry_soil_color(b: usize) -> f64 {
    [0.62, 0.52, 0.40, 0.42].get(b).copied().unwrap_or(0.45)
}

fn smooth_field(size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let coarse = Tensor::from_fn([5, 5, 1], |_| rng.sample::<f64, _>(StandardNormal));
    resize_bilinear(&coarse, size, size)
        .expect("valid target size")
        .into_data()
}

/// One image with its label. Pixel values are already quantised to u8 levels.
pub fn synthesize(spec: &GenSpec, index: usize, class: Option<AnomalyClass>) -> Sample {
    let mut rng = stream(spec.seed, &[10, index as u64]);
    let n = spec.size;
    let period: f64 = rng.gen_range(spec.period.0..=spec.period.1);
    let phase: f64 = rng.gen_range(0.0..period);
    let fields: Vec<Vec<f64>> = (0..spec.bands).map(|_| smooth_field(n, &mut rng)).collect();
    let veg = |y: usize| 0.5 + 0.5 * (std::f64::consts::TAU * (y as f64 - phase) / period).cos();

    let mut region = vec![false; n * n];
    if let Some(c) = class {
        let (lo, hi) = spec.blob_radius;
        match c {
            AnomalyClass::Blob | AnomalyClass::BrightPatch => {
                let r: f64 = rng.gen_range(lo..=hi);
                let aspect: f64 = rng.gen_range(0.7..1.3);
                let (ry, rx) = (r * aspect.sqrt(), r / aspect.sqrt());
                let cy: f64 = rng.gen_range(ry..n as f64 - ry);
                let cx: f64 = rng.gen_range(rx..n as f64 - rx);
                for y in 0..n {
                    for x in 0..n {
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        let dx = (x as f64 + 0.5 - cx) / rx;
                        region[y * n + x] = dy * dy + dx * dx <= 1.0;
                    }
                }
                let (y0, x0) = (cy as usize, cx as usize);
                region[y0 * n + x0] = true;
            }
            AnomalyClass::StripeBreak => {
                let h = (rng.gen_range(lo..=hi) * 2.0).round().max(2.0) as usize;
                let w = (rng.gen_range(lo..=hi) * 3.0).round().clamp(2.0, n as f64) as usize;
                let y0 = rng.gen_range(0..=n - h.min(n));
                let x0 = rng.gen_range(0..=n - w);
                for y in y0..(y0 + h).min(n) {
                    for x in x0..x0 + w {
                        region[y * n + x] = true;
                    }
                }
            }
        }
    }

    let mut data = Vec::with_capacity(n * n * spec.bands);
    for y in 0..n {
        let v = veg(y);
        for x in 0..n {
            let inside = region[y * n + x];
            for b in 0..spec.bands {
                let (soil, plant) = band_colors(b);
                let smooth = 0.05 * fields[b][y * n + x];
                let white = spec.noise * rng.sample::<f64, _>(StandardNormal);
                let normal = soil * (1.0 - v) + plant * v + smooth + white;
                let value = match (inside, class) {
                    (true, Some(AnomalyClass::Blob)) => {
                        let grain = if (x + y) % 2 == 0 { 0.06 } else { -0.06 };
                        blob_color(b) + grain + smooth + white
                    }
                    (true, Some(AnomalyClass::StripeBreak)) => dry_soil_color(b) + smooth + white,
                    (true, Some(AnomalyClass::BrightPatch)) => normal + 0.35,
                    _ => normal,
                };
                data.push(f64::from(quantize_unit(value)) / 255.0);
            }
        }
    }
    let label = BinaryMask {
        height: n,
        width: n,
        values: region.iter().map(|&r| u8::from(r)).collect(),
    };
    Sample {
        id: sample_id(index),
        image: Tensor::new([n, n, spec.bands], data).expect("consistent shape"),
        label: Some(label),
        class_tag: class.map(|c| c.tag().to_string()),
    }
}

/// All samples of `spec`, in index order, without touching the filesystem.
pub fn generate_samples(spec: &GenSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let classes = spec.assignments();
    Ok((0..spec.count)
        .into_par_iter()
        .map(|i| synthesize(spec, i, classes[i]))
        .collect())
}

/// Writes `images/<id>.aten` (u8), `labels/<id>.aten` (u8) and `index.txt`.
pub fn generate(spec: &GenSpec, dir: &Path) -> Result<Vec<IndexEntry>> {
    let samples = generate_samples(spec)?;
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    samples.par_iter().try_for_each(|s| {
        let image = Raster::U8 {
            dims: s.image.shape().to_vec(),
            data: s.image.data().iter().map(|&v| quantize_unit(v)).collect(),
        };
        image.save(&images.join(format!("{}.aten", s.id)))?;
        let label = s.label.as_ref().expect("generated samples carry labels");
        Raster::U8 {
            dims: vec![label.height, label.width],
            data: label.values.clone(),
        }
        .save(&labels.join(format!("{}.aten", s.id)))
    })?;
    let entries: Vec<IndexEntry> = samples
        .iter()
        .map(|s| IndexEntry {
            id: s.id.clone(),
            has_anomaly: s.class_tag.is_some(),
            class_tag: s.class_tag.clone().unwrap_or_else(|| "none".into()),
        })
        .collect();
    write_index(&dir.join("index.txt"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignments_rotate_classes() {
        let spec = GenSpec {
            count: 10,
            anomaly_fraction: 0.6,
            ..GenSpec::default()
        };
        let a = spec.assignments();
        assert_eq!(a.iter().filter(|c| c.is_some()).count(), 6);
        let classes: Vec<_> = a.iter().flatten().copied().collect();
        assert_eq!(&classes[..3], &AnomalyClass::ALL);
    }

    #[test]
    fn invalid_spec_lists_problems() {
        let spec = GenSpec {
            count: 0,
            anomaly_fraction: 1.5,
            ..GenSpec::default()
        };
        let Err(Error::Config(p)) = spec.validate() else { panic!() };
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn values_in_unit_range() {
        for class in [None, Some(AnomalyClass::BrightPatch), Some(AnomalyClass::Blob)] {
            let s = synthesize(&GenSpec::default(), 3, class);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn class_tags_parse() {
        for c in AnomalyClass::ALL {
            assert_eq!(c.tag().parse::<AnomalyClass>().unwrap(), c);
        }
        assert!("crater".parse::<AnomalyClass>().is_err());
    }
}
