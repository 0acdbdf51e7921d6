//! Deformation-field machinery: backward-warping resampler with analytic gradients,
//! field composition and inversion, the smoothness functional, and synthetic fields.
//!
//! Conventions: fields are in pixel units, `(dy, dx)` per pixel, and resampling is
//! backward warping, `out(p) = image(p + field(p))`. Samples outside the grid read
//! [`BACKGROUND`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ensure_same_shape, DeformationField, Image, BACKGROUND};
use crate::error::{Error, Result};
use crate::nn::{CustomOp, Graph, Real, Tensor, Var};
use crate::noise::ElasticNoiseSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationScheme {
    #[default]
    Bilinear,
    Nearest,
}

/// Rotation in degrees, translation as a fraction of image size, per-axis scale factors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation: f64,
    pub translation: (f64, f64),
    pub scale: (f64, f64),
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { rotation: 0.0, translation: (0.0, 0.0), scale: (1.0, 1.0) };

    pub fn validate(&self) -> Result<()> {
        let all = [self.rotation, self.translation.0, self.translation.1, self.scale.0, self.scale.1];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("affine params", "non-finite component"));
        }
        if self.scale.0 <= 0.0 || self.scale.1 <= 0.0 {
            return Err(Error::invalid("affine params", format!("scale {:?} must be positive", self.scale)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Kernels (generic, planar data)
// ---------------------------------------------------------------------------

#[inline]
fn pixel<T: Real>(img: &[T], h: usize, w: usize, y: isize, x: isize, bg: T) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        bg
    } else {
        img[y as usize * w + x as usize]
    }
}

/// Backward warp of one `h×w` plane by a planar `[dy, dx]` field.
pub fn resample_plane<T: Real>(img: &[T], field: &[T], h: usize, w: usize, scheme: InterpolationScheme) -> Vec<T> {
    let n = h * w;
    let bg = T::lit(BACKGROUND);
    let (fdy, fdx) = field.split_at(n);
    let mut out = vec![T::zero(); n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sy = T::lit(y as f64) + fdy[i];
            let sx = T::lit(x as f64) + fdx[i];
            out[i] = match scheme {
                InterpolationScheme::Nearest => {
                    let half = T::lit(0.5);
                    let yi = (sy + half).floor().to_isize().unwrap_or(isize::MIN);
                    let xi = (sx + half).floor().to_isize().unwrap_or(isize::MIN);
                    pixel(img, h, w, yi, xi, bg)
                }
                InterpolationScheme::Bilinear => {
                    let (y0f, x0f) = (sy.floor(), sx.floor());
                    let (fy, fx) = (sy - y0f, sx - x0f);
                    let y0 = y0f.to_isize().unwrap_or(isize::MIN / 2);
                    let x0 = x0f.to_isize().unwrap_or(isize::MIN / 2);
                    let v00 = pixel(img, h, w, y0, x0, bg);
                    let v01 = pixel(img, h, w, y0, x0 + 1, bg);
                    let v10 = pixel(img, h, w, y0 + 1, x0, bg);
                    let v11 = pixel(img, h, w, y0 + 1, x0 + 1, bg);
                    let one = T::one();
                    (one - fy) * ((one - fx) * v00 + fx * v01) + fy * ((one - fx) * v10 + fx * v11)
                }
            };
        }
    }
    out
}

/// Vector-Jacobian product of [`resample_plane`] w.r.t. the image and the field.
///
/// The field gradient is the one-sided derivative on grid lines and zero for nearest sampling.
#[allow(clippy::too_many_arguments)]
pub fn resample_plane_vjp<T: Real>(
    img: &[T],
    field: &[T],
    h: usize,
    w: usize,
    scheme: InterpolationScheme,
    grad: &[T],
    need_image: bool,
    need_field: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let n = h * w;
    let bg = T::lit(BACKGROUND);
    let (fdy, fdx) = field.split_at(n);
    let mut gimg = need_image.then(|| vec![T::zero(); n]);
    let mut gfield = need_field.then(|| vec![T::zero(); 2 * n]);
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = grad[i];
            let sy = T::lit(y as f64) + fdy[i];
            let sx = T::lit(x as f64) + fdx[i];
            match scheme {
                InterpolationScheme::Nearest => {
                    if let Some(gi) = gimg.as_mut() {
                        let half = T::lit(0.5);
                        let yi = (sy + half).floor().to_isize().unwrap_or(isize::MIN);
                        let xi = (sx + half).floor().to_isize().unwrap_or(isize::MIN);
                        if inside(yi, xi) {
                            gi[yi as usize * w + xi as usize] += g;
                        }
                    }
                }
                InterpolationScheme::Bilinear => {
                    let (y0f, x0f) = (sy.floor(), sx.floor());
                    let (fy, fx) = (sy - y0f, sx - x0f);
                    let y0 = y0f.to_isize().unwrap_or(isize::MIN / 2);
                    let x0 = x0f.to_isize().unwrap_or(isize::MIN / 2);
                    let one = T::one();
                    if let Some(gi) = gimg.as_mut() {
                        let corners = [
                            (y0, x0, (one - fy) * (one - fx)),
                            (y0, x0 + 1, (one - fy) * fx),
                            (y0 + 1, x0, fy * (one - fx)),
                            (y0 + 1, x0 + 1, fy * fx),
                        ];
                        for (cy, cx, wgt) in corners {
                            if inside(cy, cx) {
                                gi[cy as usize * w + cx as usize] += g * wgt;
                            }
                        }
                    }
                    if let Some(gf) = gfield.as_mut() {
                        let v00 = pixel(img, h, w, y0, x0, bg);
                        let v01 = pixel(img, h, w, y0, x0 + 1, bg);
                        let v10 = pixel(img, h, w, y0 + 1, x0, bg);
                        let v11 = pixel(img, h, w, y0 + 1, x0 + 1, bg);
                        gf[i] += g * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                        gf[n + i] += g * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                    }
                }
            }
        }
    }
    (gimg, gfield)
}

/// Mean over pixels of squared forward differences of both components in both directions;
/// differences across the trailing row/column are zero.
pub fn smoothness_value<T: Real>(field: &[T], h: usize, w: usize) -> T {
    let n = h * w;
    let mut total = T::zero();
    for plane in field.chunks(n).take(2) {
        for y in 0..h {
            for x in 0..w {
                let u = plane[y * w + x];
                if y + 1 < h {
                    let d = plane[(y + 1) * w + x] - u;
                    total += d * d;
                }
                if x + 1 < w {
                    let d = plane[y * w + x + 1] - u;
                    total += d * d;
                }
            }
        }
    }
    total / T::lit(n as f64)
}

pub fn smoothness_grad<T: Real>(field: &[T], h: usize, w: usize, upstream: T) -> Vec<T> {
    let n = h * w;
    let k = T::lit(2.0) * upstream / T::lit(n as f64);
    let mut g = vec![T::zero(); 2 * n];
    for (c, plane) in field.chunks(n).take(2).enumerate() {
        let gp = &mut g[c * n..(c + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let u = plane[i];
                if y + 1 < h {
                    let d = k * (plane[i + w] - u);
                    gp[i + w] += d;
                    gp[i] -= d;
                }
                if x + 1 < w {
                    let d = k * (plane[i + 1] - u);
                    gp[i + 1] += d;
                    gp[i] -= d;
                }
            }
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Graph operations
// ---------------------------------------------------------------------------

struct ResampleOp {
    scheme: InterpolationScheme,
}

impl<T: Real> CustomOp<T> for ResampleOp {
    fn name(&self) -> &'static str {
        "resample"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (img, field) = (inputs[0], inputs[1]);
        let (_, h, w) = img.chw();
        let (gi, gf) = resample_plane_vjp(img.data(), field.data(), h, w, self.scheme, grad.data(), needs[0], needs[1]);
        vec![gi.map(|d| Tensor::new(img.dims(), d)), gf.map(|d| Tensor::new(field.dims(), d))]
    }
}

/// Differentiable resampling of a `[1, H, W]` image by a `[2, H, W]` field.
pub fn resample_var<T: Real>(g: &mut Graph<T>, image: Var, field: Var, scheme: InterpolationScheme) -> Var {
    let (c, h, w) = g.value(image).chw();
    assert_eq!(c, 1, "resample expects a single-channel image");
    assert_eq!(g.value(field).dims(), &[2, h, w], "resample field shape");
    let out = resample_plane(g.value(image).data(), g.value(field).data(), h, w, scheme);
    g.custom(&[image, field], Tensor::new(&[1, h, w], out), Box::new(ResampleOp { scheme }))
}

struct SmoothnessOp;

impl<T: Real> CustomOp<T> for SmoothnessOp {
    fn name(&self) -> &'static str {
        "smoothness"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (_, h, w) = inputs[0].chw();
        vec![Some(Tensor::new(inputs[0].dims(), smoothness_grad(inputs[0].data(), h, w, grad.item())))]
    }
}

/// Differentiable smoothness penalty of a `[2, H, W]` field.
pub fn smoothness_var<T: Real>(g: &mut Graph<T>, field: Var) -> Var {
    let (c, h, w) = g.value(field).chw();
    assert_eq!(c, 2, "smoothness expects a 2-channel field");
    let v = smoothness_value(g.value(field).data(), h, w);
    g.custom(&[field], Tensor::scalar(v), Box::new(SmoothnessOp))
}

// ---------------------------------------------------------------------------
// Field-level operations
// ---------------------------------------------------------------------------

/// `out(p) = image(p + field(p))`.
pub fn resample(image: &Image, field: &DeformationField, scheme: InterpolationScheme) -> Result<Image> {
    ensure_same_shape("resample", image.shape(), field.shape())?;
    let (h, w) = image.shape();
    Image::clamped(h, w, resample_plane(image.data(), field.data(), h, w, scheme))
}

/// Bilinear lookup of a field at a real-valued location, clamped to the grid.
pub fn sample_field(field: &DeformationField, y: f64, x: f64) -> (f64, f64) {
    let (h, w) = field.shape();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let lerp = |plane: &[f64]| {
        let a = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
        let b = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
        a * (1.0 - fy) + b * fy
    };
    (lerp(field.dy()), lerp(field.dx()))
}

/// Single field equivalent to warping by `first` and then by `second`:
/// `u(p) = second(p) + first(p + second(p))`.
pub fn compose(first: &DeformationField, second: &DeformationField) -> Result<DeformationField> {
    ensure_same_shape("compose", first.shape(), second.shape())?;
    let (h, w) = first.shape();
    Ok(DeformationField::from_fn(h, w, |y, x| {
        let (sy, sx) = second.get(y, x);
        let (fy, fx) = sample_field(first, y as f64 + sy, x as f64 + sx);
        (sy + fy, sx + fx)
    }))
}

/// Largest displacement of `compose(field, inverse)`.
pub fn inverse_residual(field: &DeformationField, inverse: &DeformationField) -> Result<f64> {
    Ok(compose(field, inverse)?.max_norm())
}

/// Fixed-point inversion `v <- -field(p + v(p))`.
pub fn invert(field: &DeformationField, max_iters: usize, tol: f64) -> Result<DeformationField> {
    let (h, w) = field.shape();
    let mut v = field.scaled(-1.0);
    let mut residual = inverse_residual(field, &v)?;
    for _ in 0..max_iters {
        if residual <= tol {
            return Ok(v);
        }
        v = DeformationField::from_fn(h, w, |y, x| {
            let (vy, vx) = v.get(y, x);
            let (fy, fx) = sample_field(field, y as f64 + vy, x as f64 + vx);
            (-fy, -fx)
        });
        residual = inverse_residual(field, &v)?;
    }
    if residual <= tol {
        Ok(v)
    } else {
        Err(Error::NotConverged { iterations: max_iters, residual })
    }
}

/// Smoothness penalty of a field.
pub fn smoothness(field: &DeformationField) -> f64 {
    smoothness_value(field.data(), field.height(), field.width())
}

/// Displacement field of an affine map about the image centre:
/// `field(p) = A·(p − c) + t·size + c − p`, with `A = rotation · diag(scale)`.
pub fn affine_to_field(params: &AffineParams, height: usize, width: usize) -> Result<DeformationField> {
    params.validate()?;
    let theta = params.rotation.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (sy, sx) = params.scale;
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let (ty, tx) = (params.translation.0 * height as f64, params.translation.1 * width as f64);
    Ok(DeformationField::from_fn(height, width, |y, x| {
        let (py, px) = (y as f64 - cy, x as f64 - cx);
        let qy = cos * sy * py - sin * sx * px + cy + ty;
        let qx = sin * sy * py + cos * sx * px + cx + tx;
        (qy - y as f64, qx - x as f64)
    }))
}

/// Random control-point displacements (each within a disc of radius `magnitude · min(H, W)`),
/// bilinearly upsampled and Gaussian-smoothed. Both stages are convex averages, so no
/// displacement exceeds the control magnitude.
pub fn random_elastic_field(
    spec: &ElasticNoiseSpec,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Result<DeformationField> {
    spec.validate()?;
    let radius = spec.magnitude * height.min(width) as f64;
    let g = spec.grid;
    let mut ctrl = vec![(0.0, 0.0); g * g];
    for c in ctrl.iter_mut() {
        let r = radius * rng.gen::<f64>().sqrt();
        let phi = std::f64::consts::TAU * rng.gen::<f64>();
        *c = (r * phi.sin(), r * phi.cos());
    }
    if radius == 0.0 {
        return Ok(DeformationField::zeros(height, width));
    }
    let scale = |n: usize| if n > 1 { (g - 1) as f64 / (n - 1) as f64 } else { 0.0 };
    let (ky, kx) = (scale(height), scale(width));
    let dense = DeformationField::from_fn(height, width, |y, x| {
        let (gy, gx) = (y as f64 * ky, x as f64 * kx);
        let (y0, x0) = ((gy.floor() as usize).min(g - 1), (gx.floor() as usize).min(g - 1));
        let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let at = |yy: usize, xx: usize| ctrl[yy * g + xx];
        let mix = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 * (1.0 - t) + b.0 * t, a.1 * (1.0 - t) + b.1 * t);
        mix(mix(at(y0, x0), at(y0, x1), fx), mix(at(y1, x0), at(y1, x1), fx), fy)
    });
    let n = height * width;
    let mut planes = dense.data().to_vec();
    for plane in planes.chunks_mut(n) {
        gaussian_smooth(plane, height, width, spec.sigma);
    }
    DeformationField::from_planes(height, width, planes)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable normalized Gaussian blur with edge replication.
pub(crate) fn gaussian_smooth(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * plane[y * w + (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[(y as isize + j as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
        }
    }
}
