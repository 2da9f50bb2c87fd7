//! Image decoding, canonical resizing and the divergence filter.
//!
//! Divergence is the mean squared difference over normalized RGB values of
//! two grids resized to a common square canonical size with plain bilinear
//! sampling (half-pixel centers, no antialias prefilter).

use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;
use crate::records::ImageRef;

pub const DEFAULT_CANONICAL_SIZE: u32 = 256;

/// How [`divergence`] is computed, as recorded in run metadata.
pub const DIVERGENCE_CONVENTION: &str =
    "mean squared error over RGB values in [0, 1] after bilinear resize (half-pixel centers, no antialiasing)";

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (u32, u32),
        right: (u32, u32),
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("zero-dimension image {0}")]
    ZeroDimension(String),
    #[error("invalid pixel grid: {0}")]
    InvalidGrid(String),
    #[error("invalid filter configuration: {0}")]
    InvalidFilter(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
}

/// RGB intensities in `[0, 1]`, row-major, three values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl PixelGrid {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidGrid(format!("{width}x{height}")));
        }
        let expected = width as usize * height as usize * 3;
        if values.len() != expected {
            return Err(ImagingError::InvalidGrid(format!(
                "expected {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImagingError::InvalidGrid(format!("value {v} outside [0, 1]")));
        }
        Ok(PixelGrid {
            width,
            height,
            values,
        })
    }

    pub fn constant(width: u32, height: u32, value: f64) -> Result<Self, ImagingError> {
        PixelGrid::new(width, height, vec![value; width as usize * height as usize * 3])
    }

    pub fn from_rgb(image: &RgbImage) -> Self {
        PixelGrid {
            width: image.width(),
            height: image.height(),
            values: image.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// Value of channel `c` at pixel `(x, y)`.
    pub fn at(&self, x: u32, y: u32, c: usize) -> f64 {
        self.values[(y as usize * self.width as usize + x as usize) * 3 + c]
    }
}

/// Mean squared difference over all value slots.
pub fn divergence(a: &PixelGrid, b: &PixelGrid) -> Result<f64, ImagingError> {
    if a.dims() != b.dims() {
        return Err(ImagingError::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let sum: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.values.len() as f64)
}

/// Bilinear resize of an RGB8 image to a `size`×`size` normalized grid.
pub fn resize_bilinear(image: &RgbImage, size: u32) -> PixelGrid {
    let (in_w, in_h) = image.dimensions();
    let raw = image.as_raw();
    let sample = |x: u32, y: u32, c: usize| raw[(y as usize * in_w as usize + x as usize) * 3 + c] as f64 / 255.0;

    // Source coordinate and blend weight along one axis.
    let taps = |out: u32, in_len: u32| -> Vec<(u32, u32, f64)> {
        let scale = in_len as f64 / size as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = s.floor() as u32;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(size, in_w);
    let ys = taps(size, in_h);

    let mut values = Vec::with_capacity(size as usize * size as usize * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = sample(x0, y0, c) * (1.0 - fx) + sample(x1, y0, c) * fx;
                let bottom = sample(x0, y1, c) * (1.0 - fx) + sample(x1, y1, c) * fx;
                values.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    PixelGrid {
        width: size,
        height: size,
        values,
    }
}

pub fn decode_rgb(path: &Path) -> Result<RgbImage, ImagingError> {
    let decoded = image::open(path).map_err(|e| ImagingError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(ImagingError::ZeroDimension(path.display().to_string()));
    }
    Ok(decoded.to_rgb8())
}

pub fn decode_rgb_bytes(bytes: &[u8]) -> Result<RgbImage, ImagingError> {
    let decoded = image::load_from_memory(bytes).map_err(|e| ImagingError::Decode {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(ImagingError::ZeroDimension("<memory>".into()));
    }
    Ok(decoded.to_rgb8())
}

/// Decodes `path` and resizes it to the canonical square grid.
pub fn load_canonical(path: &Path, canonical_size: u32) -> Result<PixelGrid, ImagingError> {
    if canonical_size == 0 {
        return Err(ImagingError::InvalidGrid("canonical size 0".into()));
    }
    Ok(resize_bilinear(&decode_rgb(path)?, canonical_size))
}

/// SHA-256 over `width`, `height` (little-endian u32) and the RGB8 bytes.
///
/// Independent of the container format, so re-encoding identical pixels
/// keeps the hash.
pub fn content_hash(image: &RgbImage) -> String {
    let mut bytes = Vec::with_capacity(8 + image.as_raw().len());
    bytes.extend_from_slice(&image.width().to_le_bytes());
    bytes.extend_from_slice(&image.height().to_le_bytes());
    bytes.extend_from_slice(image.as_raw());
    sha256_hex(&bytes)
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, ImagingError> {
    let mut out = Cursor::new(Vec::new());
    image
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decoded pixels together with their content hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Picture {
    pub rgb: RgbImage,
    pub hash: String,
}

impl Picture {
    pub fn new(rgb: RgbImage) -> Self {
        let hash = content_hash(&rgb);
        Picture { rgb, hash }
    }

    pub fn open(path: &Path) -> Result<Self, ImagingError> {
        Ok(Picture::new(decode_rgb(path)?))
    }

    pub fn load(reference: &ImageRef, root: &Path) -> Result<Self, ImagingError> {
        Picture::open(&reference.resolve(root))
    }

    pub fn width(&self) -> u32 {
        self.rgb.width()
    }

    pub fn height(&self) -> u32 {
        self.rgb.height()
    }

    pub fn dims(&self) -> (u32, u32) {
        self.rgb.dimensions()
    }

    /// Builds the reference for this picture stored at `path`.
    pub fn reference(&self, path: impl Into<String>) -> ImageRef {
        ImageRef {
            path: path.into(),
            width: self.width(),
            height: self.height(),
            content_hash: self.hash.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FilterMode {
    /// Abandon pairs with divergence strictly below `tau`.
    Absolute { tau: f64 },
    /// Abandon the `floor(fraction * N)` lowest-divergence pairs.
    RankFraction { fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub mode: FilterMode,
    pub canonical_size: u32,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            mode: FilterMode::RankFraction { fraction: 0.10 },
            canonical_size: DEFAULT_CANONICAL_SIZE,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), ImagingError> {
        match self.mode {
            FilterMode::Absolute { tau } if !(tau >= 0.0) => {
                return Err(ImagingError::InvalidFilter(format!("tau {tau} must be >= 0")))
            }
            FilterMode::RankFraction { fraction } if !(0.0..=1.0).contains(&fraction) => {
                return Err(ImagingError::InvalidFilter(format!(
                    "rank fraction {fraction} must lie in [0, 1]"
                )))
            }
            _ => {}
        }
        if self.canonical_size == 0 {
            return Err(ImagingError::InvalidFilter("canonical size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterOutcome {
    pub kept: BTreeSet<String>,
    pub abandoned: BTreeSet<String>,
}

/// Splits `pairs` into kept and abandoned ids.
///
/// Rank mode orders by ascending divergence and breaks ties by ascending id.
/// Non-finite divergences never satisfy `d < tau` and rank last.
pub fn apply_filter(pairs: &[(String, f64)], mode: FilterMode) -> FilterOutcome {
    let mut outcome = FilterOutcome::default();
    match mode {
        FilterMode::Absolute { tau } => {
            for (id, d) in pairs {
                if *d < tau {
                    outcome.abandoned.insert(id.clone());
                } else {
                    outcome.kept.insert(id.clone());
                }
            }
        }
        FilterMode::RankFraction { fraction } => {
            let mut order: Vec<&(String, f64)> = pairs.iter().collect();
            order.sort_by(|a, b| {
                let key = |d: f64| if d.is_finite() { d } else { f64::INFINITY };
                key(a.1).total_cmp(&key(b.1)).then_with(|| a.0.cmp(&b.0))
            });
            let cut = abandon_count(fraction, pairs.len());
            for (rank, (id, _)) in order.into_iter().enumerate() {
                if rank < cut {
                    outcome.abandoned.insert(id.clone());
                } else {
                    outcome.kept.insert(id.clone());
                }
            }
        }
    }
    outcome
}

/// `floor(fraction * n)`, clamped to `[0, n]`.
pub fn abandon_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).floor().max(0.0) as usize).min(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn ids(set: &BTreeSet<String>) -> Vec<&str> {
        set.iter().map(String::as_str).collect()
    }

    #[test]
    fn identical_grids_have_zero_divergence() {
        let g = PixelGrid::constant(3, 2, 0.4).unwrap();
        assert_eq!(divergence(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn zeros_vs_ones_is_one() {
        let a = PixelGrid::constant(2, 2, 0.0).unwrap();
        let b = PixelGrid::constant(2, 2, 1.0).unwrap();
        assert_eq!(divergence(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn mismatched_grids_error() {
        let a = PixelGrid::constant(2, 2, 0.0).unwrap();
        let b = PixelGrid::constant(2, 3, 0.0).unwrap();
        assert!(matches!(
            divergence(&a, &b),
            Err(ImagingError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn grid_rejects_out_of_range_values() {
        assert!(PixelGrid::new(1, 1, vec![0.0, 1.2, 0.0]).is_err());
        assert!(PixelGrid::new(1, 1, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn absolute_zero_abandons_nothing() {
        let pairs = vec![("a".to_string(), 0.0), ("b".to_string(), 0.3)];
        let out = apply_filter(&pairs, FilterMode::Absolute { tau: 0.0 });
        assert!(out.abandoned.is_empty());
        assert_eq!(out.kept.len(), 2);
    }

    #[test]
    fn rank_quarter_abandons_smallest() {
        let pairs: Vec<_> = [("a", 0.5), ("b", 0.1), ("c", 0.9), ("d", 0.3)]
            .iter()
            .map(|(i, d)| (i.to_string(), *d))
            .collect();
        let out = apply_filter(&pairs, FilterMode::RankFraction { fraction: 0.25 });
        assert_eq!(ids(&out.abandoned), vec!["b"]);
    }

    #[test]
    fn rank_ties_abandon_smaller_id_first() {
        let pairs: Vec<_> = [("z", 0.2), ("m", 0.2), ("a", 0.9)]
            .iter()
            .map(|(i, d)| (i.to_string(), *d))
            .collect();
        let out = apply_filter(&pairs, FilterMode::RankFraction { fraction: 0.34 });
        assert_eq!(ids(&out.abandoned), vec!["m"]);
    }

    #[test]
    fn empty_input_gives_empty_sets() {
        let out = apply_filter(&[], FilterMode::RankFraction { fraction: 0.5 });
        assert_eq!(out, FilterOutcome::default());
    }

    #[test]
    fn filter_config_validation() {
        let bad = FilterConfig {
            mode: FilterMode::Absolute { tau: -1.0 },
            canonical_size: 256,
        };
        assert!(bad.validate().is_err());
        let bad = FilterConfig {
            mode: FilterMode::RankFraction { fraction: 1.5 },
            canonical_size: 256,
        };
        assert!(bad.validate().is_err());
        assert!(FilterConfig::default().validate().is_ok());
    }

    #[test]
    fn solid_color_resizes_to_solid_grid() {
        let img = RgbImage::from_pixel(37, 19, Rgb([51, 102, 204]));
        let grid = resize_bilinear(&img, 8);
        assert_eq!(grid.dims(), (8, 8));
        for px in grid.values().chunks(3) {
            assert!((px[0] - 0.2).abs() < 1e-12);
            assert!((px[1] - 0.4).abs() < 1e-12);
            assert!((px[2] - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 13) as u8, (y * 7) as u8, ((x ^ y) * 9) as u8]));
        assert_eq!(resize_bilinear(&img, 16), PixelGrid::from_rgb(&img));
    }

    #[test]
    fn content_hash_survives_reencoding() {
        let img = RgbImage::from_fn(9, 5, |x, y| Rgb([x as u8, y as u8, 3]));
        let png = encode_png(&img).unwrap();
        let back = decode_rgb_bytes(&png).unwrap();
        assert_eq!(content_hash(&img), content_hash(&back));
        let other = RgbImage::from_fn(5, 9, |x, y| Rgb([y as u8, x as u8, 3]));
        assert_ne!(content_hash(&img), content_hash(&other));
    }

    #[test]
    fn undecodable_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        std::fs::write(&path, b"not an image").unwrap();
        assert!(matches!(load_canonical(&path, 8), Err(ImagingError::Decode { .. })));
    }

    fn grid_pair(len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(0.0f64..=1.0, len),
            proptest::collection::vec(0.0f64..=1.0, len),
        )
    }

    proptest! {
        #[test]
        fn divergence_is_symmetric_and_nonnegative((a, b) in grid_pair(4 * 3 * 3)) {
            let a = PixelGrid::new(4, 3, a).unwrap();
            let b = PixelGrid::new(4, 3, b).unwrap();
            let ab = divergence(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, divergence(&b, &a).unwrap());
            prop_assert_eq!(divergence(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn absolute_filter_is_monotone(
            ds in proptest::collection::vec(0.0f64..1.0, 0..40),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let pairs: Vec<_> = ds.iter().enumerate().map(|(i, d)| (format!("s{i:03}"), *d)).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let kept_lo = apply_filter(&pairs, FilterMode::Absolute { tau: lo }).kept;
            let kept_hi = apply_filter(&pairs, FilterMode::Absolute { tau: hi }).kept;
            prop_assert!(kept_hi.is_subset(&kept_lo));
        }

        #[test]
        fn rank_filter_partitions_and_counts(
            ds in proptest::collection::vec(0.0f64..1.0, 0..40),
            p in 0.0f64..=1.0,
        ) {
            let pairs: Vec<_> = ds.iter().enumerate().map(|(i, d)| (format!("s{i:03}"), *d)).collect();
            let out = apply_filter(&pairs, FilterMode::RankFraction { fraction: p });
            prop_assert_eq!(out.abandoned.len(), abandon_count(p, pairs.len()));
            prop_assert_eq!(out.kept.len() + out.abandoned.len(), pairs.len());
            prop_assert!(out.kept.is_disjoint(&out.abandoned));
        }
    }
}
