//! Demonstration episodes on disk and motion normalization.
//!
//! File layout: `HSEP`, u32 version, length-prefixed canonical JSON
//! metadata, then little-endian f32 arrays `images` (T x 64 x 64),
//! `motions_raw` (T x D) and `motions_norm` (T x D).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::netblocks::IMAGE_SIZE;
use crate::numkernel::Tensor;
use crate::wire::{self, Reader};

pub const EPISODE_MAGIC: &[u8; 4] = b"HSEP";
pub const EPISODE_VERSION: u32 = 1;
const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

/// Per-dimension min-max bounds for the `[min, max] -> [-1, 1]` map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormBounds {
    /// Bounds spanning every row.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut it = rows.into_iter();
        let first = it.next().ok_or_else(|| Error::Input("bounds need at least one row".into()))?;
        let mut b = Self { min: first.to_vec(), max: first.to_vec() };
        for row in it {
            if row.len() != b.dims() {
                return Err(Error::Input(format!("row width {} vs {}", row.len(), b.dims())));
            }
            b.include(row);
        }
        b.validate()?;
        Ok(b)
    }

    fn include(&mut self, row: &[f64]) {
        for (d, &v) in row.iter().enumerate() {
            self.min[d] = self.min[d].min(v);
            self.max[d] = self.max[d].max(v);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min.len() != self.max.len() || self.min.is_empty() {
            return Err(Error::Input("bounds need matching, non-empty min and max".into()));
        }
        if self.min.iter().chain(&self.max).any(|v| !v.is_finite()) {
            return Err(Error::Input("bounds must be finite".into()));
        }
        if self.min.iter().zip(&self.max).any(|(lo, hi)| lo > hi) {
            return Err(Error::Input("bounds have min > max".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    /// Dimensions whose range is empty; they normalize to 0.
    pub fn degenerate(&self) -> Vec<bool> {
        self.min.iter().zip(&self.max).map(|(lo, hi)| hi <= lo).collect()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(d, &v)| {
                let (lo, hi) = (self.min[d], self.max[d]);
                if hi <= lo {
                    0.0
                } else {
                    2.0 * (v - lo) / (hi - lo) - 1.0
                }
            })
            .collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(d, &v)| {
                let (lo, hi) = (self.min[d], self.max[d]);
                if hi <= lo {
                    lo
                } else {
                    lo + (v + 1.0) * 0.5 * (hi - lo)
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub position: String,
    pub hz: f64,
    pub seed: u64,
    pub sim_version: u32,
    pub steps: usize,
    pub dims: usize,
    pub bounds: NormBounds,
    pub degenerate: Vec<bool>,
}

/// One demonstration. Arrays are row-major f32, exactly as stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub images: Vec<f32>,
    pub motions_raw: Vec<f32>,
    pub motions_norm: Vec<f32>,
}

impl Episode {
    /// Normalizes `motions_raw` with `bounds` and checks every shape.
    pub fn new(
        position: &str,
        hz: f64,
        seed: u64,
        sim_version: u32,
        images: Vec<f32>,
        motions_raw: Vec<f32>,
        bounds: NormBounds,
    ) -> Result<Self> {
        bounds.validate()?;
        let dims = bounds.dims();
        if !motions_raw.len().is_multiple_of(dims) {
            return Err(Error::Input(format!("{} motion values for {dims} dims", motions_raw.len())));
        }
        let steps = motions_raw.len() / dims;
        let motions_norm = normalize_rows(&motions_raw, &bounds);
        let ep = Self {
            meta: EpisodeMeta {
                position: position.to_string(),
                hz,
                seed,
                sim_version,
                steps,
                dims,
                degenerate: bounds.degenerate(),
                bounds,
            },
            images,
            motions_raw,
            motions_norm,
        };
        ep.check().map_err(|e| Error::Input(e.to_string()))?;
        Ok(ep)
    }

    pub fn steps(&self) -> usize {
        self.meta.steps
    }

    pub fn dims(&self) -> usize {
        self.meta.dims
    }

    pub fn image(&self, t: usize) -> &[f32] {
        &self.images[t * PIXELS..(t + 1) * PIXELS]
    }

    pub fn image_tensor(&self, t: usize) -> Tensor<f32> {
        Tensor::new(&[1, IMAGE_SIZE, IMAGE_SIZE], self.image(t).to_vec()).expect("fixed image shape")
    }

    pub fn raw_row(&self, t: usize) -> &[f32] {
        &self.motions_raw[t * self.dims()..(t + 1) * self.dims()]
    }

    pub fn norm_row(&self, t: usize) -> &[f32] {
        &self.motions_norm[t * self.dims()..(t + 1) * self.dims()]
    }

    pub fn raw_rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.steps()).map(|t| self.raw_row(t).iter().map(|&v| v as f64).collect()).collect()
    }

    /// Same episode normalized with other bounds.
    pub fn renormalized(&self, bounds: &NormBounds) -> Result<Self> {
        Self::new(
            &self.meta.position,
            self.meta.hz,
            self.meta.seed,
            self.meta.sim_version,
            self.images.clone(),
            self.motions_raw.clone(),
            bounds.clone(),
        )
    }

    fn check(&self) -> Result<(), FormatError> {
        let m = &self.meta;
        let corrupt = |field: &str, detail: String| FormatError::Corrupt { field: field.into(), detail };
        if m.steps == 0 || m.dims == 0 {
            return Err(corrupt("steps", format!("steps {} and dims {} must be positive", m.steps, m.dims)));
        }
        if m.bounds.dims() != m.dims || m.bounds.validate().is_err() {
            return Err(corrupt("bounds", format!("bounds do not describe {} finite dims", m.dims)));
        }
        if m.degenerate != m.bounds.degenerate() {
            return Err(corrupt("degenerate", "flags disagree with bounds".into()));
        }
        if self.images.len() != m.steps * PIXELS {
            return Err(corrupt("images", format!("{} values for {} steps", self.images.len(), m.steps)));
        }
        if self.images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(corrupt("images", "pixel outside [0, 1]".into()));
        }
        for (field, arr) in [("motions_raw", &self.motions_raw), ("motions_norm", &self.motions_norm)] {
            if arr.len() != m.steps * m.dims {
                return Err(corrupt(field, format!("{} values for {}x{}", arr.len(), m.steps, m.dims)));
            }
        }
        if self.motions_norm.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(corrupt("motions_norm", "value outside [-1, 1]".into()));
        }
        let expect = normalize_rows(&self.motions_raw, &m.bounds);
        if let Some(i) = expect.iter().zip(&self.motions_norm).position(|(a, b)| (a - b).abs() > 1e-6) {
            return Err(corrupt("motions_norm", format!("entry {i} does not follow from motions_raw and bounds")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * (self.images.len() + 2 * self.motions_raw.len()));
        out.extend_from_slice(EPISODE_MAGIC);
        wire::put_u32(&mut out, EPISODE_VERSION);
        wire::put_block(&mut out, &wire::canonical_json(&self.meta));
        wire::put_f32s(&mut out, &self.images);
        wire::put_f32s(&mut out, &self.motions_raw);
        wire::put_f32s(&mut out, &self.motions_norm);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(EPISODE_MAGIC)?;
        r.version(EPISODE_VERSION)?;
        let meta: EpisodeMeta = wire::parse_json(r.block("metadata")?, "metadata")?;
        let n = meta.steps.checked_mul(meta.dims);
        let (Some(n), Some(px)) = (n, meta.steps.checked_mul(PIXELS)) else {
            return Err(FormatError::Corrupt { field: "steps".into(), detail: "array sizes overflow".into() });
        };
        let images = r.f32s(px, "images")?;
        let motions_raw = r.f32s(n, "motions_raw")?;
        let motions_norm = r.f32s(n, "motions_norm")?;
        r.finish()?;
        let ep = Self { meta, images, motions_raw, motions_norm };
        ep.check()?;
        Ok(ep)
    }
}

fn normalize_rows(raw: &[f32], bounds: &NormBounds) -> Vec<f32> {
    raw.chunks_exact(bounds.dims())
        .flat_map(|row| {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            bounds.normalize(&row).into_iter().map(|v| v as f32)
        })
        .collect()
}

pub fn episode_path(dir: &Path, position: &str, seed: u64) -> PathBuf {
    dir.join(format!("{position}_{seed}.hsep"))
}

pub fn write_episode(ep: &Episode, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, ep.to_bytes())?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    Ok(Episode::from_bytes(&fs::read(path)?)?)
}

/// Bounds over every raw motion row of `episodes`.
pub fn bounds_over(episodes: &[Episode]) -> Result<NormBounds> {
    let rows: Vec<Vec<f64>> = episodes.iter().flat_map(|e| e.raw_rows_f64()).collect();
    NormBounds::from_rows(rows.iter().map(|r| r.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Episode {
        let steps = 3;
        let images = (0..steps * PIXELS).map(|i| (i % 7) as f32 / 7.0).collect();
        let raw = vec![0.1, 0.2, 1.0, 0.3, 0.25, 0.0, 0.2, 0.05, 0.5];
        let bounds = NormBounds::from_rows(
            raw.chunks(3)
                .map(|r: &[f32]| r.iter().map(|&v| v as f64).collect::<Vec<_>>())
                .collect::<Vec<_>>()
                .iter()
                .map(|r| r.as_slice()),
        )
        .unwrap();
        Episode::new("C", 10.0, 7, 1, images, raw, bounds).unwrap()
    }

    #[test]
    fn normalize_endpoints() {
        let b = NormBounds { min: vec![2.0, -1.0], max: vec![4.0, 3.0] };
        assert_eq!(b.normalize(&[2.0, -1.0]), vec![-1.0, -1.0]);
        assert_eq!(b.normalize(&[3.0, 1.0]), vec![0.0, 0.0]);
        assert_eq!(b.normalize(&[4.0, 3.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn degenerate_dimension_maps_to_zero() {
        let b = NormBounds::from_rows([[1.0, 5.0].as_slice(), [2.0, 5.0].as_slice()]).unwrap();
        assert_eq!(b.degenerate(), vec![false, true]);
        assert_eq!(b.normalize(&[1.5, 5.0])[1], 0.0);
        assert_eq!(b.denormalize(&[0.3, 0.0])[1], 5.0);
    }

    #[test]
    fn byte_round_trip() {
        let ep = sample();
        let bytes = ep.to_bytes();
        let back = Episode::from_bytes(&bytes).unwrap();
        assert_eq!(back, ep);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_length_names_field() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        match Episode::from_bytes(&bytes) {
            Err(FormatError::Truncated { field }) => assert_eq!(field, "metadata"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn structural_errors() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Episode::from_bytes(&bad), Err(FormatError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Episode::from_bytes(&bad), Err(FormatError::Version { found: 2, .. })));
        assert!(matches!(
            Episode::from_bytes(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { field }) if field == "motions_norm"
        ));
        let mut bad = bytes.clone();
        bad.push(0);
        assert_eq!(Episode::from_bytes(&bad), Err(FormatError::TrailingBytes(1)));
        let mut bad = bytes;
        let last = bad.len() - 4;
        bad[last..].copy_from_slice(&0.75f32.to_le_bytes());
        assert!(
            matches!(Episode::from_bytes(&bad), Err(FormatError::Corrupt { field, .. }) if field == "motions_norm")
        );
    }
}
