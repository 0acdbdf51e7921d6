//! Procedural head-like phantoms rendered in two contrasts from shared geometry.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Manifest};
use crate::domain::{DatasetSplit, Image, SamplePair, BACKGROUND};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::warp::gaussian_smooth;

pub const MIN_RESOLUTION: usize = 32;
pub const TRAIN_STREAM: u64 = 0;
pub const TEST_STREAM: u64 = 1;

/// Intensity of each structure class in one modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIntensities {
    pub skull: f64,
    pub brain: f64,
    pub ventricle: f64,
    pub blob: f64,
    pub lesion: f64,
}

impl ClassIntensities {
    fn values(&self) -> [f64; 5] {
        [self.skull, self.brain, self.ventricle, self.blob, self.lesion]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub resolution: usize,
    /// Internal ellipses inside the brain region, alternating ventricle and blob classes.
    pub n_structures: usize,
    pub intensity_map_a: ClassIntensities,
    pub intensity_map_b: ClassIntensities,
    /// Gaussian std (px) of the shared smooth texture.
    pub texture_scale: f64,
    pub texture_amplitude: f64,
    pub lesion_probability: f64,
    /// Edge softness (px).
    pub edge_width: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            n_structures: 4,
            intensity_map_a: ClassIntensities { skull: 0.6, brain: 0.0, ventricle: -0.7, blob: 0.35, lesion: -0.3 },
            // contrast inverted, blob and lesion remapped
            intensity_map_b: ClassIntensities { skull: -0.6, brain: -0.1, ventricle: 0.7, blob: 0.45, lesion: 0.9 },
            texture_scale: 3.0,
            texture_amplitude: 0.06,
            lesion_probability: 0.6,
            edge_width: 0.6,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < MIN_RESOLUTION {
            return Err(Error::invalid("phantom spec", format!("resolution {} < {MIN_RESOLUTION}", self.resolution)));
        }
        let maps = self.intensity_map_a.values().into_iter().chain(self.intensity_map_b.values());
        if maps.into_iter().any(|v| !(-1.0..=1.0).contains(&v)) {
            return Err(Error::invalid("phantom spec", "class intensities must lie in [-1, 1]"));
        }
        if !(self.texture_scale > 0.0 && self.texture_amplitude >= 0.0 && self.edge_width > 0.0) {
            return Err(Error::invalid("phantom spec", "texture scale and edge width must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            return Err(Error::invalid("phantom spec", "lesion probability outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn scaled(&self, k: f64) -> Self {
        Self { ry: self.ry * k, rx: self.rx * k, ..*self }
    }

    /// Soft membership in `[0, 1]`.
    fn alpha(&self, y: f64, x: f64, edge: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dy * c + dx * s;
        let v = -dy * s + dx * c;
        let rho = ((u / self.ry).powi(2) + (v / self.rx).powi(2)).sqrt();
        let d = (1.0 - rho) * (self.ry * self.rx).sqrt();
        let a = 1.0 / (1.0 + (-d / edge).exp());
        if a < 1e-4 {
            0.0
        } else {
            a
        }
    }
}

/// Class index into [`ClassIntensities::values`].
#[derive(Clone, Copy)]
enum Class {
    Skull = 0,
    Brain = 1,
    Ventricle = 2,
    Blob = 3,
    Lesion = 4,
}

struct Geometry {
    layers: Vec<(Ellipse, Class)>,
    brain: Ellipse,
    texture: Vec<f64>,
}

fn draw_geometry(spec: &PhantomSpec, rng: &mut impl Rng) -> Geometry {
    let s = spec.resolution as f64;
    let c = (s - 1.0) / 2.0;
    let head = Ellipse {
        cy: c + rng.gen_range(-0.04..0.04) * s,
        cx: c + rng.gen_range(-0.04..0.04) * s,
        ry: rng.gen_range(0.36..0.43) * s,
        rx: rng.gen_range(0.29..0.36) * s,
        angle: rng.gen_range(-0.3..0.3),
    };
    let brain = head.scaled(rng.gen_range(0.82..0.88));
    let mut layers = vec![(head, Class::Skull), (brain, Class::Brain)];
    let inner = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| {
        let r = 0.55 * rng.gen::<f64>().sqrt();
        let phi = rng.gen_range(0.0..2.0 * PI);
        let (sb, cb) = brain.angle.sin_cos();
        let (u, v) = (r * phi.sin() * brain.ry, r * phi.cos() * brain.rx);
        Ellipse {
            cy: brain.cy + u * cb - v * sb,
            cx: brain.cx + u * sb + v * cb,
            ry: rng.gen_range(lo..hi) * s,
            rx: rng.gen_range(lo..hi) * s,
            angle: rng.gen_range(0.0..PI),
        }
    };
    for i in 0..spec.n_structures {
        let class = if i % 2 == 0 { Class::Ventricle } else { Class::Blob };
        layers.push((inner(rng, 0.05, 0.13), class));
    }
    if rng.gen::<f64>() < spec.lesion_probability {
        layers.push((inner(rng, 0.03, 0.08), Class::Lesion));
    }
    let n = spec.resolution * spec.resolution;
    let mut texture: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    gaussian_smooth(&mut texture, spec.resolution, spec.resolution, spec.texture_scale);
    let mean = texture.iter().sum::<f64>() / n as f64;
    let std = (texture.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    texture.iter_mut().for_each(|v| *v = (*v - mean) / std);
    Geometry { layers, brain, texture }
}

fn render(spec: &PhantomSpec, geo: &Geometry, map: &ClassIntensities) -> Result<Image> {
    let values = map.values();
    let n = spec.resolution;
    let data = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            let mut v = BACKGROUND;
            for (e, class) in &geo.layers {
                let a = e.alpha(y, x, spec.edge_width);
                v += a * (values[*class as usize] - v);
            }
            v += spec.texture_amplitude * geo.texture[i] * geo.brain.alpha(y, x, spec.edge_width);
            v
        })
        .collect();
    Image::clamped(n, n, data)
}

/// Renders both modalities of one phantom; the pair is aligned by construction.
pub fn generate_phantom_pair(spec: &PhantomSpec, pair_id: impl Into<String>, rng: &mut impl Rng) -> Result<SamplePair> {
    spec.validate()?;
    let geo = draw_geometry(spec, rng);
    let a = render(spec, &geo, &spec.intensity_map_a)?;
    let b = render(spec, &geo, &spec.intensity_map_b)?;
    Ok(SamplePair::aligned(pair_id, a, b))
}

/// `n` pairs drawn from per-pair seeds of the given stream.
pub fn generate_split(spec: &PhantomSpec, n: usize, stream: u64, prefix: &str) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(Error::invalid("pair count", format!("{prefix} split needs at least one pair")));
    }
    let pairs = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream, i as u64));
            generate_phantom_pair(spec, format!("{prefix}_{i:05}"), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetSplit::new(pairs)
}

/// Writes `train` and `test` splits plus a manifest under `out_dir`.
pub fn generate_dataset(spec: &PhantomSpec, n_train: usize, n_test: usize, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid("pair count", format!("need n_train >= 1 and n_test >= 1, got {n_train} and {n_test}")));
    }
    let train = generate_split(spec, n_train, TRAIN_STREAM, "train")?;
    let test = generate_split(spec, n_test, TEST_STREAM, "test")?;
    let mut manifest = Manifest::new(spec.resolution, spec.resolution);
    manifest.splits.insert("train".into(), n_train);
    manifest.splits.insert("test".into(), n_test);
    manifest.generator = Some(toml::Value::try_from(spec).map_err(|e| Error::Dataset(e.to_string()))?);
    dataset::write_split(out_dir, "train", &train)?;
    dataset::write_split(out_dir, "test", &test)?;
    dataset::write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}
