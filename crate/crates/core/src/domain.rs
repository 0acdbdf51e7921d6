//! Shared value types: images, deformation fields, sample pairs and dataset splits.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Smallest edge length accepted for network input.
pub const MIN_IMAGE_SIZE: usize = 8;

/// Intensity of empty space after normalization.
pub const BACKGROUND: f64 = -1.0;

/// Single-channel intensity grid with values in `[-1, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image, rejecting non-finite or out-of-range values.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid("image", format!("{} values for {height}x{width}", data.len())));
        }
        check_values(&data, "image")?;
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    /// Clamps values into `[-1, 1]` first; still rejects non-finite input.
    pub fn clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "image", index });
        }
        data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// `[1, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[1, self.height, self.width], self.data.iter().map(|&v| T::lit(v)).collect())
    }

    /// Reads a `[1, H, W]` tensor, clamping to the valid range.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.chw();
        if c != 1 {
            return Err(Error::invalid("image tensor", format!("expected 1 channel, got {c}")));
        }
        Self::clamped(h, w, t.data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        ensure_same_shape("mean_abs_diff", self.shape(), other.shape())?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64)
    }
}

fn check_values(data: &[f64], context: &'static str) -> Result<()> {
    for (index, &value) in data.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite { context, index });
        }
        if !(-1.0..=1.0).contains(&value) {
            return Err(Error::OutOfRange { context, index, value });
        }
    }
    Ok(())
}

pub(crate) fn ensure_same_shape(context: &'static str, left: (usize, usize), right: (usize, usize)) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { context, left, right })
    }
}

/// Per-pixel displacement `(dy, dx)` in pixel units, stored as two planes (`dy` then `dx`).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DeformationField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 2 * height * width] }
    }

    pub fn constant(height: usize, width: usize, dy: f64, dx: f64) -> Self {
        Self::from_fn(height, width, |_, _| (dy, dx))
    }

    /// Planar `[dy..., dx...]` data of length `2·H·W`.
    pub fn from_planes(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * height * width {
            return Err(Error::invalid("deformation field", format!("{} values for 2x{height}x{width}", data.len())));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "deformation field", index });
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let n = height * width;
        let mut data = vec![0.0; 2 * n];
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = f(y, x);
                data[y * width + x] = dy;
                data[n + y * width + x] = dx;
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dy(&self) -> &[f64] {
        &self.data[..self.height * self.width]
    }

    pub fn dx(&self) -> &[f64] {
        &self.data[self.height * self.width..]
    }

    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.data[i], self.data[self.height * self.width + i])
    }

    /// Largest displacement vector length.
    pub fn max_norm(&self) -> f64 {
        self.dy().iter().zip(self.dx()).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|v| v * k).collect() }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[2, self.height, self.width], self.data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.chw();
        if c != 2 {
            return Err(Error::invalid("field tensor", format!("expected 2 channels, got {c}")));
        }
        Self::from_planes(h, w, t.data().iter().map(|v| v.as_f64()).collect())
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub pair_id: String,
    /// Modality A.
    pub source: Image,
    /// Modality B, possibly misaligned with `source`.
    pub target: Image,
    /// Clean, aligned modality B when known.
    pub aligned_target: Option<Image>,
}

impl SamplePair {
    /// An aligned pair whose clean target is the target itself.
    pub fn aligned(pair_id: impl Into<String>, source: Image, target: Image) -> Self {
        let aligned_target = Some(target.clone());
        Self { pair_id: pair_id.into(), source, target, aligned_target }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.source.shape()
    }

    /// Ground truth for evaluation: the clean target when known.
    pub fn reference(&self) -> &Image {
        self.aligned_target.as_ref().unwrap_or(&self.target)
    }
}

/// Returns the pair iff every image invariant holds.
pub fn validate_pair(pair: SamplePair) -> Result<SamplePair> {
    let images = std::iter::once(("source", &pair.source))
        .chain(std::iter::once(("target", &pair.target)))
        .chain(pair.aligned_target.iter().map(|t| ("aligned_target", t)));
    for (context, img) in images {
        let (h, w) = img.shape();
        if h < MIN_IMAGE_SIZE || w < MIN_IMAGE_SIZE {
            return Err(Error::TooSmall { context, height: h, width: w, min: MIN_IMAGE_SIZE });
        }
        check_values(img.data(), context)?;
        ensure_same_shape(context, pair.source.shape(), img.shape())?;
    }
    Ok(pair)
}

/// Ordered, non-empty list of pairs with unique identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pairs: Vec<SamplePair>,
}

impl DatasetSplit {
    pub fn new(pairs: Vec<SamplePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Dataset("split must contain at least one pair".into()));
        }
        let mut seen = HashSet::new();
        for p in &pairs {
            if !seen.insert(p.pair_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate pair id {:?}", p.pair_id)));
            }
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[SamplePair] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<SamplePair> {
        self.pairs
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pairs[0].shape()
    }
}

/// Affine map of `[lo, hi]` onto `[-1, 1]`, clamped.
pub fn normalize_intensity(raw: &[f64], height: usize, width: usize, lo: f64, hi: f64) -> Result<Image> {
    if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
        return Err(Error::InvalidBounds { lo, hi });
    }
    if raw.len() != height * width {
        return Err(Error::invalid("raw grid", format!("{} values for {height}x{width}", raw.len())));
    }
    if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "raw grid", index });
    }
    let data = if lo == -1.0 && hi == 1.0 {
        raw.iter().map(|v| v.clamp(-1.0, 1.0)).collect()
    } else {
        let scale = 2.0 / (hi - lo);
        raw.iter().map(|&v| ((v - lo) * scale - 1.0).clamp(-1.0, 1.0)).collect()
    };
    Image::new(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let img = normalize_intensity(&[3.0; 4], 2, 2, 3.0, 9.0).unwrap();
        assert!(img.data().iter().all(|&v| v == -1.0));
        let img = normalize_intensity(&[6.0; 4], 2, 2, 3.0, 9.0).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        let img = normalize_intensity(&[0.0, 50.0, 100.0], 1, 3, 0.0, 100.0).unwrap();
        assert_eq!(img.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_rejects_bad_input() {
        assert!(matches!(normalize_intensity(&[0.0], 1, 1, 1.0, 1.0), Err(Error::InvalidBounds { .. })));
        assert!(matches!(normalize_intensity(&[0.0], 1, 1, 2.0, 1.0), Err(Error::InvalidBounds { .. })));
        assert!(matches!(normalize_intensity(&[f64::NAN], 1, 1, 0.0, 1.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn normalize_clamps_outside_bounds() {
        let img = normalize_intensity(&[-10.0, 200.0], 1, 2, 0.0, 100.0).unwrap();
        assert_eq!(img.data(), &[-1.0, 1.0]);
    }

    fn pair(h: usize, w: usize, th: usize, tw: usize) -> SamplePair {
        SamplePair::aligned("p", Image::filled(h, w, 0.0).unwrap(), Image::filled(th, tw, 0.0).unwrap())
    }

    #[test]
    fn validate_accepts_matched_pair() {
        assert!(validate_pair(pair(64, 64, 64, 64)).is_ok());
    }

    #[test]
    fn validate_reports_distinct_failures() {
        let mut p = pair(64, 64, 64, 63);
        p.aligned_target = None;
        assert!(matches!(validate_pair(p), Err(Error::ShapeMismatch { .. })));

        let mut p = pair(64, 64, 64, 64);
        // bypass the constructor to model externally produced data
        p.target.data[5] = 1.5;
        assert!(matches!(validate_pair(p), Err(Error::OutOfRange { index: 5, .. })));

        let mut p = pair(64, 64, 64, 64);
        p.source.data[0] = f64::INFINITY;
        assert!(matches!(validate_pair(p), Err(Error::NonFinite { .. })));

        assert!(matches!(validate_pair(pair(4, 4, 4, 4)), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn image_constructor_rejects_range_violation() {
        assert!(matches!(Image::new(1, 2, vec![0.0, 1.5]), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn split_requires_unique_ids() {
        let a = pair(8, 8, 8, 8);
        assert!(DatasetSplit::new(vec![a.clone(), a]).is_err());
        assert!(DatasetSplit::new(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn normalize_idempotent_on_unit_range(v in proptest::collection::vec(-1.0f64..=1.0, 16)) {
            let img = normalize_intensity(&v, 4, 4, -1.0, 1.0).unwrap();
            for (a, b) in img.data().iter().zip(&v) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn normalize_is_monotone(
            a in proptest::collection::vec(-50.0f64..150.0, 9),
            d in proptest::collection::vec(0.0f64..30.0, 9),
        ) {
            let b: Vec<f64> = a.iter().zip(&d).map(|(x, y)| x + y).collect();
            let na = normalize_intensity(&a, 3, 3, 0.0, 100.0).unwrap();
            let nb = normalize_intensity(&b, 3, 3, 0.0, 100.0).unwrap();
            for (x, y) in na.data().iter().zip(nb.data()) {
                prop_assert!(x <= y);
            }
        }
    }
}
