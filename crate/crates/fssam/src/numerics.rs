//! Dense numeric kernels shared by the whole pipeline.
//!
//! Everything downstream (prior masks, memory refinement, attention) is built
//! from the five kernels in this module: masked global average pooling,
//! per-pixel cosine similarity against a prototype, min-max normalization,
//! numerically stable row softmax, and plain matrix products.
//!
//! Storage is `f32`; every reduction (sums, dot products, norms) accumulates
//! in `f64` so results do not depend on how the compiler associates a chain
//! of single-precision adds.

use crate::error::{Error, Result};

/// Denominator guard for cosine similarity, added to the product of norms.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Dense `height x width x channels` feature grid, row-major with the
/// channels of one pixel stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    /// Build a feature map, checking the data length and that every value is finite.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidDimensions(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::InvalidDimensions(format!(
                "feature map {height}x{width}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// A map holding the same value everywhere.
    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of pixels (`height * width`).
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// The channel vector of pixel `p` (row-major pixel index).
    pub fn pixel(&self, p: usize) -> &[f32] {
        let start = p * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// True when both maps share height, width and channel count.
    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Unconstrained finite `height x width` grid of reals.
///
/// Used for intermediates that are not yet normalized into [0, 1], such as
/// raw cosine similarity maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::InvalidDimensions(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// `height x width` grid constrained to [0, 1].
///
/// Holds binary ground-truth masks and continuous prior masks alike.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl SoftMask {
    /// Build a mask, checking that every value lies in [0, 1].
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::InvalidDimensions(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        for (index, &value) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::MaskRangeViolation { index, value });
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// An all-zero mask.
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Sum of all mask values, accumulated in `f64`.
    pub fn weight_sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// True when every value is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Return the index of the first value that is neither 0 nor 1, if any.
    pub fn require_binary(&self) -> Result<()> {
        match self.data.iter().position(|&v| v != 0.0 && v != 1.0) {
            None => Ok(()),
            Some(index) => Err(Error::MaskNotBinary {
                index,
                value: self.data[index],
            }),
        }
    }

    /// Elementwise `1 - value`; exact for binary masks.
    pub fn complement(&self) -> SoftMask {
        SoftMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1.0 - v).collect(),
        }
    }

    pub fn same_shape(&self, other: &SoftMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// View the mask as an unconstrained grid.
    pub fn to_grid(&self) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.clone(),
        }
    }

    pub(crate) fn shape_string(&self) -> String {
        format!("{}x{}", self.height, self.width)
    }
}

/// Channel-space vector obtained by pooling a feature map region.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    data: Vec<f32>,
}

impl Prototype {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidDimensions(
                "prototype needs at least one channel".to_string(),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { data })
    }

    /// The zero vector; used as the background prototype fallback when the
    /// support background region is empty.
    pub fn zero(channels: usize) -> Self {
        Self {
            data: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Euclidean norm, accumulated in `f64`.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// Dense `rows x cols` score matrix, row-major.
///
/// Rows index query pixels, columns index memory positions. The degenerate
/// `1 x N` case holds a support-similarity row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl AttentionMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDimensions(format!(
                "attention matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidDimensions(format!(
                "attention matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Dot product of two equal-length `f32` slices, accumulated in `f64`.
///
/// Four independent accumulator lanes keep the summation order fixed (and
/// therefore the result deterministic) while breaking the add-latency chain.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let base = i * 4;
        acc[0] += a[base] as f64 * b[base] as f64;
        acc[1] += a[base + 1] as f64 * b[base + 1] as f64;
        acc[2] += a[base + 2] as f64 * b[base + 2] as f64;
        acc[3] += a[base + 3] as f64 * b[base + 3] as f64;
    }
    for i in chunks * 4..a.len() {
        acc[0] += a[i] as f64 * b[i] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Euclidean norm of a slice, accumulated in `f64`.
pub fn norm_f64(a: &[f32]) -> f64 {
    dot_f64(a, a).sqrt()
}

/// Mask-weighted global average pooling.
///
/// Returns `sum_p mask(p) * features(p) / sum_p mask(p)` as a prototype with
/// one entry per channel. An all-zero mask has no defined mean and is
/// reported as [`Error::DegenerateMask`]; the caller decides the fallback.
pub fn masked_gap(features: &FeatureMap, mask: &SoftMask) -> Result<Prototype> {
    check_feature_mask_shape(features, mask, "masked_gap")?;
    let weight = mask.weight_sum();
    if weight <= 0.0 {
        return Err(Error::DegenerateMask("masked_gap over an all-zero mask"));
    }
    let channels = features.channels();
    let mut sums = vec![0.0f64; channels];
    for (p, &w) in mask.data().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let w = w as f64;
        let pixel = features.pixel(p);
        for (s, &v) in sums.iter_mut().zip(pixel) {
            *s += w * v as f64;
        }
    }
    let data = sums.iter().map(|&s| (s / weight) as f32).collect();
    Prototype::new(data)
}

/// Per-pixel cosine similarity between a feature map and a prototype.
///
/// `epsilon` is added to the product of norms in the denominator, so a zero
/// pixel or zero prototype yields similarity 0 instead of NaN. Output values
/// lie in [-1, 1] up to the epsilon slack.
pub fn cosine_map(features: &FeatureMap, proto: &Prototype, epsilon: f64) -> Result<Grid> {
    if features.channels() != proto.channels() {
        return Err(Error::ShapeMismatch {
            context: "cosine_map channel count",
            expected: proto.channels().to_string(),
            actual: features.channels().to_string(),
        });
    }
    let proto_norm = proto.norm();
    let mut data = Vec::with_capacity(features.pixel_count());
    for p in 0..features.pixel_count() {
        let pixel = features.pixel(p);
        let dot = dot_f64(pixel, proto.data());
        let denom = norm_f64(pixel) * proto_norm + epsilon;
        data.push((dot / denom) as f32);
    }
    Grid::new(features.height(), features.width(), data)
}

/// Min-max normalize a slice in place: `(x - min) / (max - min)`.
///
/// A constant slice carries no ordering signal and maps to all zeros.
pub fn minmax_inplace(values: &mut [f32]) {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in values.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    if min >= max {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let min = min as f64;
    let range = max as f64 - min;
    for v in values.iter_mut() {
        *v = ((*v as f64 - min) / range) as f32;
    }
}

/// Min-max normalize a grid into a [0, 1] mask.
pub fn minmax_norm(grid: &Grid) -> SoftMask {
    let mut data = grid.data().to_vec();
    minmax_inplace(&mut data);
    SoftMask {
        height: grid.height(),
        width: grid.width(),
        data,
    }
}

/// Row-wise softmax with the per-row maximum subtracted before exponentiation.
///
/// The max subtraction keeps `exp` arguments non-positive, so rows with large
/// scores (e.g. 1000) normalize without overflow. Each output row sums to 1
/// within 1e-6.
pub fn row_softmax(scores: &AttentionMatrix) -> AttentionMatrix {
    let mut out = scores.clone();
    for r in 0..out.rows {
        row_softmax_inplace(out.row_mut(r));
    }
    out
}

pub(crate) fn row_softmax_inplace(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0.0f64;
    let mut exps = vec![0.0f64; row.len()];
    for (e, &v) in exps.iter_mut().zip(row.iter()) {
        *e = (v as f64 - max).exp();
        sum += *e;
    }
    for (v, e) in row.iter_mut().zip(exps) {
        *v = (e / sum) as f32;
    }
}

fn check_feature_mask_shape(
    features: &FeatureMap,
    mask: &SoftMask,
    context: &'static str,
) -> Result<()> {
    if features.height() != mask.height() || features.width() != mask.width() {
        return Err(Error::ShapeMismatch {
            context,
            expected: format!("{}x{}", features.height(), features.width()),
            actual: mask.shape_string(),
        });
    }
    Ok(())
}
