//! Geometric misalignment noise and pairing modes.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{DatasetSplit, DeformationField, SamplePair};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::warp::{self, AffineParams, InterpolationScheme};

/// Highest affine noise level.
pub const MAX_LEVEL: u8 = 5;

/// Bounds of the affine noise at one level: level `k` allows `±k°` rotation,
/// `±2k%` translation and `±2k%` rescaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineNoiseSpec {
    pub level: u8,
    /// Degrees.
    pub rotation_max: f64,
    /// Fraction of image size.
    pub translation_max: f64,
    /// Fractional deviation of each scale factor from 1.
    pub rescale_max: f64,
}

impl AffineNoiseSpec {
    pub fn level(level: u8) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(Error::invalid("noise level", format!("{level} not in 0..={MAX_LEVEL}")));
        }
        let k = level as f64;
        Ok(Self { level, rotation_max: k, translation_max: 0.02 * k, rescale_max: 0.02 * k })
    }
}

/// Elastic noise: random control-point displacements followed by Gaussian smoothing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticNoiseSpec {
    /// Control points per axis.
    pub grid: usize,
    /// Smoothing standard deviation in pixels.
    pub sigma: f64,
    /// Largest control displacement as a fraction of image size.
    pub magnitude: f64,
}

impl ElasticNoiseSpec {
    /// Defaults for a square image of edge `size`: 8 control points, `sigma = size/16`, 3% magnitude.
    pub fn for_size(size: usize) -> Self {
        Self { grid: 8, sigma: size as f64 / 16.0, magnitude: 0.03 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::invalid("elastic spec", format!("grid {} < 2", self.grid)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("elastic spec", format!("sigma {} must be positive", self.sigma)));
        }
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(Error::invalid("elastic spec", format!("magnitude {} must be >= 0", self.magnitude)));
        }
        Ok(())
    }
}

/// How training targets relate to their sources.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairingMode {
    Aligned,
    MisalignedAffine(u8),
    MisalignedElastic(ElasticNoiseSpec),
    Unpaired,
}

/// Command-line / config spelling of a pairing mode: `0`..`5`, `na`, `unpaired`, `aligned`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NoiseSetting {
    Aligned,
    Level(u8),
    NonAffine,
    Unpaired,
}

impl NoiseSetting {
    /// Resolves to a pairing mode; elastic defaults depend on the image size.
    pub fn pairing_mode(self, image_size: usize) -> PairingMode {
        match self {
            NoiseSetting::Aligned => PairingMode::Aligned,
            NoiseSetting::Level(k) => PairingMode::MisalignedAffine(k),
            NoiseSetting::NonAffine => PairingMode::MisalignedElastic(ElasticNoiseSpec::for_size(image_size)),
            NoiseSetting::Unpaired => PairingMode::Unpaired,
        }
    }
}

impl fmt::Display for NoiseSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseSetting::Aligned => write!(f, "aligned"),
            NoiseSetting::Level(k) => write!(f, "{k}"),
            NoiseSetting::NonAffine => write!(f, "na"),
            NoiseSetting::Unpaired => write!(f, "unpaired"),
        }
    }
}

impl FromStr for NoiseSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aligned" => Ok(NoiseSetting::Aligned),
            "na" => Ok(NoiseSetting::NonAffine),
            "unpaired" => Ok(NoiseSetting::Unpaired),
            other => match other.parse::<u8>() {
                Ok(k) if k <= MAX_LEVEL => Ok(NoiseSetting::Level(k)),
                _ => Err(Error::invalid(
                    "noise setting",
                    format!("{s:?}; expected one of 0, 1, 2, 3, 4, 5, na, unpaired"),
                )),
            },
        }
    }
}

impl TryFrom<String> for NoiseSetting {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NoiseSetting> for String {
    fn from(n: NoiseSetting) -> String {
        n.to_string()
    }
}

fn symmetric(rng: &mut impl Rng, max: f64) -> f64 {
    let u: f64 = rng.gen();
    if max == 0.0 {
        0.0
    } else {
        (2.0 * u - 1.0) * max
    }
}

/// Draws affine parameters uniformly within the spec bounds. Always consumes five draws.
pub fn sample_affine(spec: &AffineNoiseSpec, rng: &mut impl Rng) -> AffineParams {
    let rotation = symmetric(rng, spec.rotation_max);
    let ty = symmetric(rng, spec.translation_max);
    let tx = symmetric(rng, spec.translation_max);
    let sy = 1.0 + symmetric(rng, spec.rescale_max);
    let sx = 1.0 + symmetric(rng, spec.rescale_max);
    AffineParams { rotation, translation: (ty, tx), scale: (sy, sx) }
}

/// One logged transform; enough to rebuild the exact field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformRecord {
    Identity,
    Affine { params: AffineParams },
    Elastic { seed: u64, spec: ElasticNoiseSpec },
}

impl TransformRecord {
    pub fn field(&self, height: usize, width: usize) -> Result<DeformationField> {
        match self {
            TransformRecord::Identity => Ok(DeformationField::zeros(height, width)),
            TransformRecord::Affine { params } => warp::affine_to_field(params, height, width),
            TransformRecord::Elastic { seed, spec } => {
                warp::random_elastic_field(spec, height, width, &mut ChaCha8Rng::seed_from_u64(*seed))
            }
        }
    }
}

/// Corruption-log entry for one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub pair_id: String,
    pub source: TransformRecord,
    pub target: TransformRecord,
}

fn draw_transform(mode: &PairingMode, rng: &mut impl Rng) -> Result<TransformRecord> {
    Ok(match mode {
        PairingMode::Aligned => TransformRecord::Identity,
        PairingMode::MisalignedAffine(level) => {
            TransformRecord::Affine { params: sample_affine(&AffineNoiseSpec::level(*level)?, rng) }
        }
        PairingMode::MisalignedElastic(spec) => {
            spec.validate()?;
            TransformRecord::Elastic { seed: rng.gen(), spec: *spec }
        }
        PairingMode::Unpaired => {
            return Err(Error::invalid("pairing mode", "unpaired data is built with make_unpaired"));
        }
    })
}

/// Warps source and target by independently drawn transforms. The clean target is kept
/// as `aligned_target` (an existing one is never replaced).
pub fn corrupt_pair(pair: &SamplePair, mode: &PairingMode, rng: &mut impl Rng) -> Result<(SamplePair, CorruptionRecord)> {
    let source_t = draw_transform(mode, rng)?;
    let target_t = draw_transform(mode, rng)?;
    let record = CorruptionRecord { pair_id: pair.pair_id.clone(), source: source_t, target: target_t };
    if matches!(mode, PairingMode::Aligned) {
        return Ok((pair.clone(), record));
    }
    let (h, w) = pair.shape();
    let warp_with = |img, t: &TransformRecord| -> Result<_> {
        match t {
            TransformRecord::Identity => Ok(Clone::clone(img)),
            _ => warp::resample(img, &t.field(h, w)?, InterpolationScheme::Bilinear),
        }
    };
    let corrupted = SamplePair {
        pair_id: pair.pair_id.clone(),
        source: warp_with(&pair.source, &record.source)?,
        target: warp_with(&pair.target, &record.target)?,
        aligned_target: Some(pair.aligned_target.clone().unwrap_or_else(|| pair.target.clone())),
    };
    Ok((corrupted, record))
}

/// Corrupts every pair with a per-pair seed derived from `seed`, so the result does not
/// depend on processing order.
pub fn corrupt_split(split: &DatasetSplit, mode: &PairingMode, seed: u64) -> Result<(DatasetSplit, Vec<CorruptionRecord>)> {
    let mut pairs = Vec::with_capacity(split.len());
    let mut log = Vec::with_capacity(split.len());
    for (i, pair) in split.pairs().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6e_6f69_7365, i as u64));
        let (p, r) = corrupt_pair(pair, mode, &mut rng)?;
        pairs.push(p);
        log.push(r);
    }
    Ok((DatasetSplit::new(pairs)?, log))
}

/// Random cyclic permutation (Sattolo), which has no fixed points.
pub fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        perm.swap(i, j);
    }
    perm
}

/// Re-pairs each source with another pair's target; clears `aligned_target`.
pub fn make_unpaired(split: &DatasetSplit, rng: &mut impl Rng) -> Result<DatasetSplit> {
    let n = split.len();
    if n < 2 {
        return Err(Error::Dataset(format!("unpaired shuffling needs at least 2 pairs, got {n}")));
    }
    let perm = derangement(n, rng);
    let pairs = split.pairs();
    let shuffled = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| SamplePair {
            pair_id: pairs[i].pair_id.clone(),
            source: pairs[i].source.clone(),
            target: pairs[j].target.clone(),
            aligned_target: None,
        })
        .collect();
    DatasetSplit::new(shuffled)
}

/// Shuffled visiting order for one epoch.
pub fn epoch_order(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}
