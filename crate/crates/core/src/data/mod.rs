//! Datasets on disk: raster files, the synthetic generator, resizing and loading.

pub mod raster;
pub mod synth;

use std::path::Path;

use crate::anomaly::BinaryMask;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::scalar::Scalar;

pub use raster::{quantize_unit, write_map_pgm, write_pgm, write_ppm, Raster};
pub use synth::{generate, generate_samples, sample_id, synthesize, AnomalyClass, GenSpec};

/// One image with its optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `H×W×B`, values in [0,1].
    pub image: Tensor<f64>,
    pub label: Option<BinaryMask>,
    pub class_tag: Option<String>,
}

impl Sample {
    pub fn has_anomaly(&self) -> bool {
        self.class_tag.is_some()
    }
}

/// One line of `index.txt`: `id<TAB>has_anomaly<TAB>class_tag`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: String,
    pub has_anomaly: bool,
    /// `none` for normal images.
    pub class_tag: String,
}

pub fn write_index(path: &Path, entries: &[IndexEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            e.id,
            u8::from(e.has_anomaly),
            e.class_tag
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_index(path: &Path) -> Result<Vec<IndexEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = || Error::format(path, format!("line {}: malformed record `{line}`", n + 1));
        let [id, flag, tag] = fields[..] else {
            return Err(bad());
        };
        let has_anomaly = match flag {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        out.push(IndexEntry {
            id: id.to_string(),
            has_anomaly,
            class_tag: tag.to_string(),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Drop samples flagged anomalous in the index.
    pub exclude_anomalous: bool,
}

/// Reads every sample listed in `dir/index.txt`, sorted by id.
///
/// Labels are optional; when `labels/<id>.aten` exists its dims must match the
/// image's spatial dims.
pub fn load_dataset(dir: &Path, opts: LoadOptions) -> Result<Vec<Sample>> {
    let mut entries = read_index(&dir.join("index.txt"))?;
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    entries
        .into_iter()
        .filter(|e| !(opts.exclude_anomalous && e.has_anomaly))
        .map(|e| {
            let image_path = dir.join("images").join(format!("{}.aten", e.id));
            let image = load_image(&image_path)?;
            let label_path = dir.join("labels").join(format!("{}.aten", e.id));
            let label = if label_path.exists() {
                let l = load_label(&label_path)?;
                if [l.height, l.width] != image.shape()[..2] {
                    return Err(Error::format(
                        &label_path,
                        format!(
                            "label is {}x{} but image is {}x{}",
                            l.height,
                            l.width,
                            image.shape()[0],
                            image.shape()[1]
                        ),
                    ));
                }
                Some(l)
            } else {
                None
            };
            Ok(Sample {
                id: e.id,
                image,
                label,
                class_tag: e.has_anomaly.then_some(e.class_tag),
            })
        })
        .collect()
}

/// `H×W×B` image scaled to [0,1]; 2-D rasters become single-band images.
pub fn load_image(path: &Path) -> Result<Tensor<f64>> {
    let raster = Raster::load(path)?;
    let t = raster.to_unit_tensor()?;
    let t = match t.ndim() {
        3 => t,
        2 => {
            let s = t.shape().to_vec();
            t.reshape([s[0], s[1], 1])?
        }
        d => return Err(Error::format(path, format!("expected an H×W×B image, got {d} dims"))),
    };
    if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::format(path, format!("pixel value {v} outside [0,1]")));
    }
    Ok(t)
}

pub fn load_label(path: &Path) -> Result<BinaryMask> {
    match Raster::load(path)? {
        Raster::U8 { dims, data } if dims.len() == 2 => BinaryMask::new(dims[0], dims[1], data)
            .map_err(|e| Error::format(path, e.to_string())),
        _ => Err(Error::format(path, "label must be a 2-D u8 raster")),
    }
}

/// Per-band bilinear resize with corner-aligned sampling.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let &[h, w, b] = image.shape() else {
        return Err(Error::Shape(format!(
            "resize expects H×W×B, got {:?}",
            image.shape()
        )));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target must be positive".into()));
    }
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, T) {
        if dst == 1 || src == 1 {
            return (0, 0, T::zero());
        }
        let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (pos.floor() as usize).min(src - 2);
        (lo, lo + 1, T::of(pos - lo as f64))
    };
    let src = image.data();
    let mut out = Vec::with_capacity(out_h * out_w * b);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            for c in 0..b {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * b + c];
                let top = at(y0, x0) * (T::one() - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (T::one() - fx) + at(y1, x1) * fx;
                out.push(top * (T::one() - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([out_h, out_w, b], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_center_is_half() {
        let t = Tensor::new([2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = resize_bilinear(&t, 3, 3).unwrap();
        assert_eq!(r.at(&[1, 1, 0]), 0.5);
        assert_eq!(r.at(&[0, 0, 0]), 0.0);
        assert_eq!(r.at(&[0, 2, 0]), 1.0);
    }

    #[test]
    fn identity_and_constant() {
        let t = Tensor::from_fn([4, 5, 2], |i| (i as f64 * 0.37).sin());
        assert_eq!(resize_bilinear(&t, 4, 5).unwrap(), t);
        let c = Tensor::full([3, 3, 1], 0.25f64);
        let r = resize_bilinear(&c, 7, 2).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(resize_bilinear(&c, 0, 2).is_err());
    }

    #[test]
    fn index_rejects_bad_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.txt");
        std::fs::write(&p, "a\t2\tnone\n").unwrap();
        assert!(read_index(&p).is_err());
        std::fs::write(&p, "a\t1\tblob\nb\t0\tnone\n").unwrap();
        assert_eq!(read_index(&p).unwrap().len(), 2);
    }
}
