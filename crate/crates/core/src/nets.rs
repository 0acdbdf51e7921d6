//! Generator, patch discriminator and registration network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ensure_same_shape, DeformationField, Image};
use crate::error::{Error, Result};
use crate::nn::params::normal_tensor;
use crate::nn::{Bound, Graph, ParamId, ParamSet, Real, Tensor, Var};

const LEAKY_SLOPE: f64 = 0.2;
const GAN_INIT_STD: f64 = 0.02;
const FLOW_INIT_STD: f64 = 1e-5;

/// ResNet-style translator: stem, strided downsampling, residual blocks, transposed-conv upsampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    pub n_down: usize,
    pub n_up: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self { base_channels: 16, n_residual_blocks: 9, n_down: 2, n_up: 2 }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_down != self.n_up {
            return Err(Error::invalid("generator spec", format!("n_down {} != n_up {}", self.n_down, self.n_up)));
        }
        if self.n_residual_blocks == 0 || self.base_channels == 0 {
            return Err(Error::invalid("generator spec", "needs at least one residual block and one channel"));
        }
        Ok(())
    }
}

/// Patch discriminator with `n_layers` stride-2 stages and a final stride-1 score layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub base_channels: usize,
    pub n_layers: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self { base_channels: 16, n_layers: 4 }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.base_channels == 0 {
            return Err(Error::invalid("discriminator spec", "needs at least one layer and one channel"));
        }
        Ok(())
    }
}

/// U-Net over the channel concatenation of (translated, target), emitting a 2-channel field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationNetSpec {
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for RegistrationNetSpec {
    fn default() -> Self {
        Self { base_channels: 16, depth: 4 }
    }
}

impl RegistrationNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::invalid("registration spec", "needs depth >= 1 and one channel"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.push(format!("{name}.weight"), normal_tensor(&[cout, cin, k, k], std, rng));
        let b = ps.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvT {
    w: ParamId,
    b: ParamId,
}

fn he_std(cin: usize, k: usize) -> f64 {
    (2.0 / (cin * k * k) as f64).sqrt()
}

fn check_divisible(h: usize, w: usize, levels: usize, what: &'static str) -> Result<()> {
    let m = 1usize << levels;
    if !h.is_multiple_of(m) || !w.is_multiple_of(m) || h < m || w < m {
        return Err(Error::invalid(what, format!("input {h}x{w} is not divisible by {m}")));
    }
    Ok(())
}

/// Shared behaviour of the three networks.
pub trait Network<T: Real> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;

    fn parameter_count(&self) -> usize {
        self.params().count()
    }
}

#[derive(Clone, Debug)]
pub struct Generator<T: Real> {
    spec: GeneratorSpec,
    params: ParamSet<T>,
    stem: Conv,
    down: Vec<Conv>,
    blocks: Vec<(Conv, Conv)>,
    up: Vec<ConvT>,
    head: Conv,
}

pub fn build_generator<T: Real>(spec: GeneratorSpec, rng: &mut impl Rng) -> Result<Generator<T>> {
    spec.validate()?;
    let mut ps = ParamSet::new();
    let c = spec.base_channels;
    let stem = Conv::new(&mut ps, "stem", 1, c, 7, 1, 0, GAN_INIT_STD, rng);
    let mut ch = c;
    let down = (0..spec.n_down)
        .map(|i| {
            let conv = Conv::new(&mut ps, &format!("down{i}"), ch, ch * 2, 3, 2, 1, GAN_INIT_STD, rng);
            ch *= 2;
            conv
        })
        .collect();
    let blocks = (0..spec.n_residual_blocks)
        .map(|i| {
            (
                Conv::new(&mut ps, &format!("res{i}.a"), ch, ch, 3, 1, 0, GAN_INIT_STD, rng),
                Conv::new(&mut ps, &format!("res{i}.b"), ch, ch, 3, 1, 0, GAN_INIT_STD, rng),
            )
        })
        .collect();
    let up = (0..spec.n_up)
        .map(|i| {
            let w = ps.push(format!("up{i}.weight"), normal_tensor(&[ch, ch / 2, 3, 3], GAN_INIT_STD, rng));
            let b = ps.push(format!("up{i}.bias"), Tensor::zeros(&[ch / 2]));
            ch /= 2;
            ConvT { w, b }
        })
        .collect();
    let head = Conv::new(&mut ps, "head", ch, 1, 7, 1, 0, GAN_INIT_STD, rng);
    Ok(Generator { spec, params: ps, stem, down, blocks, up, head })
}

impl<T: Real> Network<T> for Generator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

impl<T: Real> Generator<T> {
    pub fn spec(&self) -> GeneratorSpec {
        self.spec
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        check_divisible(h, w, self.spec.n_down, "generator input")?;
        if h < 4 || w < 4 {
            return Err(Error::invalid("generator input", format!("{h}x{w} too small for the 7x7 stem")));
        }
        Ok(())
    }

    /// Maps a `[1, H, W]` image to a `[1, H, W]` image in `[-1, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let mut h = g.reflect_pad(x, 3);
        h = self.stem.apply(g, p, h);
        h = g.instance_norm(h);
        h = g.relu(h);
        for d in &self.down {
            h = d.apply(g, p, h);
            h = g.instance_norm(h);
            h = g.relu(h);
        }
        for (a, b) in &self.blocks {
            let mut r = g.reflect_pad(h, 1);
            r = a.apply(g, p, r);
            r = g.instance_norm(r);
            r = g.relu(r);
            r = g.reflect_pad(r, 1);
            r = b.apply(g, p, r);
            r = g.instance_norm(r);
            h = g.add(h, r);
        }
        for u in &self.up {
            h = g.conv_transpose2d(h, p[u.w], Some(p[u.b]), 2, 1, 1);
            h = g.instance_norm(h);
            h = g.relu(h);
        }
        h = g.reflect_pad(h, 3);
        h = self.head.apply(g, p, h);
        g.tanh(h)
    }

    /// Inference on a single image.
    pub fn translate(&self, image: &Image) -> Result<Image> {
        let (h, w) = image.shape();
        self.check_input(h, w)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.to_tensor());
        let y = self.forward(&mut g, &p, x);
        Image::from_tensor(g.value(y))
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Real> {
    spec: DiscriminatorSpec,
    params: ParamSet<T>,
    layers: Vec<Conv>,
    score: Conv,
}

pub fn build_discriminator<T: Real>(spec: DiscriminatorSpec, rng: &mut impl Rng) -> Result<Discriminator<T>> {
    spec.validate()?;
    let mut ps = ParamSet::new();
    let c = spec.base_channels;
    let mut cin = 1;
    let layers = (0..spec.n_layers)
        .map(|i| {
            let cout = c * (1 << i.min(3));
            let conv = Conv::new(&mut ps, &format!("layer{i}"), cin, cout, 4, 2, 1, GAN_INIT_STD, rng);
            cin = cout;
            conv
        })
        .collect();
    let score = Conv::new(&mut ps, "score", cin, 1, 4, 1, 1, GAN_INIT_STD, rng);
    Ok(Discriminator { spec, params: ps, layers, score })
}

impl<T: Real> Network<T> for Discriminator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

impl<T: Real> Discriminator<T> {
    pub fn spec(&self) -> DiscriminatorSpec {
        self.spec
    }

    /// Spatial extent of the score grid for an `h×w` input.
    pub fn output_shape(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let stage = |s: usize| if s + 2 >= 4 { Some((s + 2 - 4) / 2 + 1) } else { None };
        let (mut sh, mut sw) = (h, w);
        for _ in 0..self.spec.n_layers {
            match (stage(sh), stage(sw)) {
                (Some(a), Some(b)) => (sh, sw) = (a, b),
                _ => return Err(Error::invalid("discriminator input", format!("{h}x{w} too small"))),
            }
        }
        if sh < 3 || sw < 3 {
            return Err(Error::invalid("discriminator input", format!("{h}x{w} too small for the score layer")));
        }
        Ok((sh - 1, sw - 1))
    }

    /// Raw (pre-logistic) patch scores `[1, h', w']`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(g, p, h);
            if i > 0 {
                h = g.instance_norm(h);
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        self.score.apply(g, p, h)
    }

    pub fn score(&self, image: &Image) -> Result<Tensor<T>> {
        let (h, w) = image.shape();
        self.output_shape(h, w)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.to_tensor());
        let y = self.forward(&mut g, &p, x);
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct RegistrationNet<T: Real> {
    spec: RegistrationNetSpec,
    params: ParamSet<T>,
    enc: Vec<Conv>,
    dec: Vec<Conv>,
    refine: Conv,
    flow: Conv,
}

pub fn build_registration<T: Real>(spec: RegistrationNetSpec, rng: &mut impl Rng) -> Result<RegistrationNet<T>> {
    spec.validate()?;
    let mut ps = ParamSet::new();
    let c = spec.base_channels;
    let enc_ch = |i: usize| if i == 0 { c } else { 2 * c };
    let mut enc = Vec::with_capacity(spec.depth + 1);
    enc.push(Conv::new(&mut ps, "enc0", 2, c, 3, 1, 1, he_std(2, 3), rng));
    for i in 1..=spec.depth {
        let cin = enc_ch(i - 1);
        enc.push(Conv::new(&mut ps, &format!("enc{i}"), cin, enc_ch(i), 3, 2, 1, he_std(cin, 3), rng));
    }
    let mut dec = Vec::with_capacity(spec.depth);
    let mut cur = enc_ch(spec.depth);
    for i in (0..spec.depth).rev() {
        let cin = cur + enc_ch(i);
        let cout = enc_ch(i);
        dec.push(Conv::new(&mut ps, &format!("dec{i}"), cin, cout, 3, 1, 1, he_std(cin, 3), rng));
        cur = cout;
    }
    let refine = Conv::new(&mut ps, "refine", cur, c, 3, 1, 1, he_std(cur, 3), rng);
    let flow = Conv::new(&mut ps, "flow", c, 2, 3, 1, 1, FLOW_INIT_STD, rng);
    Ok(RegistrationNet { spec, params: ps, enc, dec, refine, flow })
}

impl<T: Real> Network<T> for RegistrationNet<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

impl<T: Real> RegistrationNet<T> {
    pub fn spec(&self) -> RegistrationNetSpec {
        self.spec
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        check_divisible(h, w, self.spec.depth, "registration input")
    }

    /// Field `[2, H, W]` (pixel units) aligning `moving` to `fixed`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, moving: Var, fixed: Var) -> Var {
        let x = g.concat(moving, fixed);
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for e in &self.enc {
            h = e.apply(g, p, h);
            h = g.leaky_relu(h, LEAKY_SLOPE);
            skips.push(h);
        }
        skips.pop();
        for d in &self.dec {
            h = g.upsample2(h);
            let s = skips.pop().expect("one skip per decoder level");
            h = g.concat(h, s);
            h = d.apply(g, p, h);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        h = self.refine.apply(g, p, h);
        h = g.leaky_relu(h, LEAKY_SLOPE);
        self.flow.apply(g, p, h)
    }

    pub fn register(&self, moving: &Image, fixed: &Image) -> Result<DeformationField> {
        ensure_same_shape("registration", moving.shape(), fixed.shape())?;
        let (h, w) = moving.shape();
        self.check_input(h, w)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let m = g.constant(moving.to_tensor());
        let f = g.constant(fixed.to_tensor());
        let y = self.forward(&mut g, &p, m, f);
        DeformationField::from_tensor(g.value(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> Image {
        let mut r = rng(seed);
        Image::from_fn(h, w, |_, _| r.gen_range(-1.0..1.0)).unwrap()
    }

    fn small_gen() -> GeneratorSpec {
        GeneratorSpec { base_channels: 4, n_residual_blocks: 2, n_down: 2, n_up: 2 }
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let g = build_generator::<f32>(small_gen(), &mut rng(0)).unwrap();
        let img = noise_image(64, 64, 1);
        let out = g.translate(&img).unwrap();
        assert_eq!(out.shape(), (64, 64));
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_rejects_indivisible_input() {
        let g = build_generator::<f32>(small_gen(), &mut rng(0)).unwrap();
        let img = Image::filled(63, 64, 0.0).unwrap();
        assert!(matches!(g.translate(&img), Err(Error::InvalidParam { .. })));
    }

    #[test]
    fn generator_param_count_scales_quadratically_with_width() {
        let count = |c: usize| {
            let spec = GeneratorSpec { base_channels: c, ..GeneratorSpec::default() };
            build_generator::<f32>(spec, &mut rng(0)).unwrap().parameter_count()
        };
        // analytic count for base c, 2 down/up stages and 9 blocks
        let analytic = |c: usize| {
            let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
            conv(1, c, 7) + conv(c, 2 * c, 3) + conv(2 * c, 4 * c, 3) + 18 * conv(4 * c, 4 * c, 3)
                + conv(4 * c, 2 * c, 3) + conv(2 * c, c, 3) + conv(c, 1, 7)
        };
        assert_eq!(count(8), analytic(8));
        assert_eq!(count(16), analytic(16));
        let ratio = count(16) as f64 / count(8) as f64;
        assert!((3.8..=4.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn generator_spec_validation() {
        assert!(GeneratorSpec { n_down: 2, n_up: 1, ..GeneratorSpec::default() }.validate().is_err());
        assert!(GeneratorSpec { n_residual_blocks: 0, ..GeneratorSpec::default() }.validate().is_err());
    }

    #[test]
    fn discriminator_patch_contract() {
        let d = build_discriminator::<f32>(DiscriminatorSpec { base_channels: 4, n_layers: 4 }, &mut rng(2)).unwrap();
        let s = d.score(&noise_image(64, 64, 3)).unwrap();
        let (c, h, w) = s.chw();
        assert_eq!(c, 1);
        assert!(h > 1 && h < 64 && w > 1 && w < 64);
        assert!(matches!(d.score(&noise_image(8, 8, 3)), Err(Error::InvalidParam { .. })));
        let t = d.score(&noise_image(64, 64, 4)).unwrap();
        assert_ne!(s, t);
    }

    #[test]
    fn registration_starts_near_identity() {
        let r = build_registration::<f32>(RegistrationNetSpec { base_channels: 4, depth: 4 }, &mut rng(5)).unwrap();
        let f = r.register(&noise_image(64, 64, 6), &noise_image(64, 64, 7)).unwrap();
        assert_eq!(f.shape(), (64, 64));
        assert!(f.max_norm() < 0.1);
    }

    #[test]
    fn registration_rejects_mismatched_inputs() {
        let r = build_registration::<f32>(RegistrationNetSpec { base_channels: 4, depth: 2 }, &mut rng(5)).unwrap();
        assert!(matches!(
            r.register(&noise_image(16, 16, 1), &noise_image(16, 12, 2)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn builders_are_deterministic_under_seed() {
        let a = build_generator::<f32>(small_gen(), &mut rng(11)).unwrap();
        let b = build_generator::<f32>(small_gen(), &mut rng(11)).unwrap();
        assert_eq!(a.params(), b.params());
        let spec = DiscriminatorSpec::default();
        assert_eq!(
            build_discriminator::<f32>(spec, &mut rng(3)).unwrap().params(),
            build_discriminator::<f32>(spec, &mut rng(3)).unwrap().params()
        );
        let spec = RegistrationNetSpec::default();
        assert_eq!(
            build_registration::<f32>(spec, &mut rng(4)).unwrap().params(),
            build_registration::<f32>(spec, &mut rng(4)).unwrap().params()
        );
    }
}
