//! `.aten` raster files.
//!
//! Layout: `ATEN`, u8 version (1), u8 dtype (0 = f64 LE, 1 = u8), u8 ndim,
//! ndim × u32 LE dims, then the row-major payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &[u8; 4] = b"ATEN";
const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Raster {
    F64 { dims: Vec<usize>, data: Vec<f64> },
    U8 { dims: Vec<usize>, data: Vec<u8> },
}

impl Raster {
    pub fn dims(&self) -> &[usize] {
        match self {
            Raster::F64 { dims, .. } | Raster::U8 { dims, .. } => dims,
        }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        Raster::F64 {
            dims: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    /// Values as floats: u8 payloads are scaled to [0,1], f64 pass through.
    pub fn to_unit_tensor(&self) -> Result<Tensor<f64>> {
        match self {
            Raster::F64 { dims, data } => Tensor::new(dims.clone(), data.clone()),
            Raster::U8 { dims, data } => Tensor::new(
                dims.clone(),
                data.iter().map(|&v| f64::from(v) / 255.0).collect(),
            ),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let dims = self.dims();
        if dims.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("{} dims do not fit a raster", dims.len())));
        }
        let mut out = Vec::with_capacity(8 + 4 * dims.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(match self {
            Raster::F64 { .. } => 0,
            Raster::U8 { .. } => 1,
        });
        out.push(dims.len() as u8);
        for &d in dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match self {
            Raster::F64 { data, .. } => {
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Raster::U8 { data, .. } => out.extend_from_slice(data),
        }
        Ok(out)
    }

    /// Parses `bytes`; `origin` names the source in error messages.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(origin, msg);
        if bytes.len() < 7 || &bytes[..4] != MAGIC {
            return Err(bad("not an ATEN raster"));
        }
        if bytes[4] != VERSION {
            return Err(bad(&format!("unsupported raster version {}", bytes[4])));
        }
        let dtype = bytes[5];
        let ndim = bytes[6] as usize;
        let header = 7 + 4 * ndim;
        if bytes.len() < header {
            return Err(bad("truncated raster header"));
        }
        let dims: Vec<usize> = bytes[7..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count: usize = dims.iter().product();
        let payload = &bytes[header..];
        match dtype {
            0 => {
                if payload.len() != count * 8 {
                    return Err(bad(&format!(
                        "payload has {} bytes, dims {:?} need {}",
                        payload.len(),
                        dims,
                        count * 8
                    )));
                }
                let data = payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(Raster::F64 { dims, data })
            }
            1 => {
                if payload.len() != count {
                    return Err(bad(&format!(
                        "payload has {} bytes, dims {:?} need {}",
                        payload.len(),
                        dims,
                        count
                    )));
                }
                Ok(Raster::U8 {
                    dims,
                    data: payload.to_vec(),
                })
            }
            other => Err(bad(&format!("unknown dtype {other}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// Quantises values in [0,1] to u8 (clamped, rounded).
pub fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::Shape(format!(
            "PGM {height}x{width} needs {} pixels, got {}",
            height * width,
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Binary PPM (P6) from the first three bands of an `H×W×B` image in [0,1].
pub fn write_ppm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let &[h, w, b] = image.shape() else {
        return Err(Error::Shape("PPM export needs an H×W×B image".into()));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for px in image.data().chunks(b) {
        for c in 0..3 {
            out.push(quantize_unit(px[c.min(b - 1)]));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Grey-scale PGM of a map, linearly stretched from 0 to its maximum.
pub fn write_map_pgm(path: &Path, map: &Tensor<f64>) -> Result<()> {
    let &[h, w] = map.shape() else {
        return Err(Error::Shape("PGM export needs an H×W map".into()));
    };
    let max = map.max();
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let px: Vec<u8> = map.data().iter().map(|&v| quantize_unit(v * scale)).collect();
    write_pgm(path, h, w, &px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let r = Raster::U8 {
            dims: vec![2, 3],
            data: vec![0, 1, 2, 3, 4, 5],
        };
        let b = r.encode().unwrap();
        assert_eq!(&b[..7], b"ATEN\x01\x01\x02");
        assert_eq!(&b[7..15], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b.len(), 15 + 6);
    }

    #[test]
    fn roundtrip_both_dtypes() {
        let p = Path::new("mem");
        let f = Raster::F64 {
            dims: vec![2, 2, 1],
            data: vec![0.1, -2.5e-300, f64::MAX, 3.0],
        };
        assert_eq!(Raster::decode(&f.encode().unwrap(), p).unwrap(), f);
        let u = Raster::U8 {
            dims: vec![3],
            data: vec![0, 128, 255],
        };
        assert_eq!(Raster::decode(&u.encode().unwrap(), p).unwrap(), u);
    }

    #[test]
    fn corrupt_input_names_file() {
        let p = Path::new("broken.aten");
        let mut b = Raster::U8 {
            dims: vec![4],
            data: vec![1, 2, 3, 4],
        }
        .encode()
        .unwrap();
        b.pop();
        let err = Raster::decode(&b, p).unwrap_err().to_string();
        assert!(err.contains("broken.aten"), "{err}");
        assert!(Raster::decode(b"ATEX\x01\x00\x00", p).is_err());
        assert!(Raster::decode(b"ATEN\x01\x07\x00", p).is_err());
    }

    #[test]
    fn u8_normalises_to_unit_range() {
        let t = Raster::U8 {
            dims: vec![2],
            data: vec![0, 255],
        }
        .to_unit_tensor()
        .unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }
}
