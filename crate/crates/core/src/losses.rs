//! Training objectives, as plain `f64` functions and as differentiable graph ops.

use serde::{Deserialize, Serialize};

use crate::domain::{ensure_same_shape, DeformationField, Image};
use crate::error::{Error, Result};
use crate::nn::{CustomOp, Graph, Real, Tensor, Var};
use crate::warp::{self, InterpolationScheme};

/// Stabilizer inside every logarithm.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLossKind {
    /// Logistic log-likelihood with the non-saturating generator term.
    #[default]
    Vanilla,
    LeastSquares,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-element value and derivative of the generator adversarial term on one fake score.
fn gen_elem(kind: GanLossKind, f: f64) -> (f64, f64) {
    match kind {
        GanLossKind::Vanilla => {
            let s = sigmoid(f);
            (-(s + LOG_EPS).ln(), -s * (1.0 - s) / (s + LOG_EPS))
        }
        GanLossKind::LeastSquares => ((f - 1.0) * (f - 1.0), 2.0 * (f - 1.0)),
    }
}

/// Discriminator term on a real score.
fn real_elem(kind: GanLossKind, r: f64) -> (f64, f64) {
    gen_elem(kind, r)
}

/// Discriminator term on a fake score.
fn fake_elem(kind: GanLossKind, f: f64) -> (f64, f64) {
    match kind {
        GanLossKind::Vanilla => {
            let s = sigmoid(f);
            (-(1.0 - s + LOG_EPS).ln(), s * (1.0 - s) / (1.0 - s + LOG_EPS))
        }
        GanLossKind::LeastSquares => (f * f, 2.0 * f),
    }
}

fn mean_of<T: Real>(xs: &[T], f: impl Fn(f64) -> (f64, f64)) -> f64 {
    xs.iter().map(|v| f(v.as_f64()).0).sum::<f64>() / xs.len() as f64
}

fn check_finite(context: &'static str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { context, index }),
        None => Ok(()),
    }
}

/// Returns `(gen_term, disc_term)` for patch score grids.
pub fn adversarial_loss(d_real: &[f64], d_fake: &[f64], kind: GanLossKind) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::invalid("score grid", "empty"));
    }
    check_finite("real scores", d_real)?;
    check_finite("fake scores", d_fake)?;
    let gen = mean_of(d_fake, |f| gen_elem(kind, f));
    let disc = mean_of(d_real, |r| real_elem(kind, r)) + mean_of(d_fake, |f| fake_elem(kind, f));
    Ok((gen, disc))
}

pub fn l1_loss(pred: &Image, target: &Image) -> Result<f64> {
    pred.mean_abs_diff(target)
}

/// `mean|F(G(x)) − x| + mean|G(F(y)) − y|`.
pub fn cycle_loss(
    x: &Image,
    y: &Image,
    g: impl Fn(&Image) -> Result<Image>,
    f: impl Fn(&Image) -> Result<Image>,
) -> Result<f64> {
    ensure_same_shape("cycle loss", x.shape(), y.shape())?;
    Ok(l1_loss(&f(&g(x)?)?, x)? + l1_loss(&g(&f(y)?)?, y)?)
}

/// Field from `r(gen_out, noisy_target)` and the L1 between the target and the warped output.
pub fn correction_loss(
    gen_out: &Image,
    noisy_target: &Image,
    r: impl Fn(&Image, &Image) -> Result<DeformationField>,
) -> Result<(f64, DeformationField)> {
    ensure_same_shape("correction loss", gen_out.shape(), noisy_target.shape())?;
    let field = r(gen_out, noisy_target)?;
    let loss = correction_with_field(gen_out, noisy_target, &field)?;
    Ok((loss, field))
}

/// Correction loss for a given field.
pub fn correction_with_field(gen_out: &Image, noisy_target: &Image, field: &DeformationField) -> Result<f64> {
    let warped = warp::resample(gen_out, field, InterpolationScheme::Bilinear)?;
    l1_loss(noisy_target, &warped)
}

pub fn smoothness_loss(field: &DeformationField) -> f64 {
    warp::smoothness(field)
}

// ---------------------------------------------------------------------------
// Weighting
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adv: f64,
    pub l1: f64,
    pub cyc: f64,
    pub corr: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adv: 1.0, l1: 100.0, cyc: 10.0, corr: 20.0, smooth: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid("loss weights", format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [("adv", self.adv), ("l1", self.l1), ("cyc", self.cyc), ("corr", self.corr), ("smooth", self.smooth)]
    }
}

/// Generator-side terms of one step; `None` marks an inactive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub adv: Option<f64>,
    pub l1: Option<f64>,
    pub cyc: Option<f64>,
    pub corr: Option<f64>,
    pub smooth: Option<f64>,
}

impl LossTerms {
    fn weighted(&self, w: &LossWeights) -> [(&'static str, Option<f64>, f64); 5] {
        [
            ("adv", self.adv, w.adv),
            ("l1", self.l1, w.l1),
            ("cyc", self.cyc, w.cyc),
            ("corr", self.corr, w.corr),
            ("smooth", self.smooth, w.smooth),
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: LossTerms,
    /// Discriminator objective of the same step (not part of `total`).
    pub disc: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "adv,l1,cyc,corr,smooth,disc,total";

    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
        let t = &self.terms;
        format!(
            "{},{},{},{},{},{},{:.6e}",
            cell(t.adv),
            cell(t.l1),
            cell(t.cyc),
            cell(t.corr),
            cell(t.smooth),
            cell(self.disc),
            self.total
        )
    }
}

pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let total = terms.weighted(weights).iter().filter_map(|(_, v, w)| v.map(|v| v * w)).sum();
    Ok(LossReport { terms: *terms, disc: None, total })
}

/// Index of the first non-finite term, for diagnostics.
pub fn first_non_finite(report: &LossReport) -> Option<(&'static str, f64)> {
    let mut all: Vec<(&'static str, Option<f64>)> =
        report.terms.weighted(&LossWeights::default()).iter().map(|(n, v, _)| (*n, *v)).collect();
    all.push(("disc", report.disc));
    all.push(("total", Some(report.total)));
    all.into_iter().find_map(|(n, v)| v.filter(|x| !x.is_finite()).map(|x| (n, x)))
}

// ---------------------------------------------------------------------------
// Graph ops
// ---------------------------------------------------------------------------

struct L1Op;

impl<T: Real> CustomOp<T> for L1Op {
    fn name(&self) -> &'static str {
        "l1"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let k = grad.item() / T::lit(a.len() as f64);
        let sign: Vec<T> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let d = x - y;
                if d > T::zero() {
                    k
                } else if d < T::zero() {
                    -k
                } else {
                    T::zero()
                }
            })
            .collect();
        let ga = needs[0].then(|| Tensor::new(a.dims(), sign.clone()));
        let gb = needs[1].then(|| Tensor::new(b.dims(), sign.iter().map(|&v| -v).collect()));
        vec![ga, gb]
    }
}

/// `mean|a − b|` as a scalar node.
pub fn l1_var<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let (va, vb) = (g.value(a), g.value(b));
    assert_eq!(va.dims(), vb.dims(), "l1 operand shapes");
    let sum: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).abs()).sum();
    let v = sum / T::lit(va.len() as f64);
    g.custom(&[a, b], Tensor::scalar(v), Box::new(L1Op))
}

#[derive(Clone, Copy)]
enum AdvRole {
    Gen,
    Real,
    Fake,
}

struct AdvOp {
    kind: GanLossKind,
    role: AdvRole,
}

impl AdvOp {
    fn elem(&self, x: f64) -> (f64, f64) {
        match self.role {
            AdvRole::Gen => gen_elem(self.kind, x),
            AdvRole::Real => real_elem(self.kind, x),
            AdvRole::Fake => fake_elem(self.kind, x),
        }
    }
}

impl<T: Real> CustomOp<T> for AdvOp {
    fn name(&self) -> &'static str {
        "adversarial"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = inputs[0];
        let k = grad.item().as_f64() / s.len() as f64;
        let d = s.data().iter().map(|v| T::lit(k * self.elem(v.as_f64()).1)).collect();
        vec![Some(Tensor::new(s.dims(), d))]
    }
}

fn adv_node<T: Real>(g: &mut Graph<T>, scores: Var, kind: GanLossKind, role: AdvRole) -> Var {
    let op = AdvOp { kind, role };
    let v = mean_of(g.value(scores).data(), |x| op.elem(x));
    g.custom(&[scores], Tensor::scalar(T::lit(v)), Box::new(op))
}

/// Generator adversarial term on fake scores.
pub fn adversarial_gen_var<T: Real>(g: &mut Graph<T>, d_fake: Var, kind: GanLossKind) -> Var {
    adv_node(g, d_fake, kind, AdvRole::Gen)
}

/// Discriminator objective on real and (detached) fake scores.
pub fn adversarial_disc_var<T: Real>(g: &mut Graph<T>, d_real: Var, d_fake: Var, kind: GanLossKind) -> Var {
    let r = adv_node(g, d_real, kind, AdvRole::Real);
    let f = adv_node(g, d_fake, kind, AdvRole::Fake);
    g.add(r, f)
}

/// `mean|noisy − resample(gen_out, field)|`.
pub fn correction_var<T: Real>(g: &mut Graph<T>, gen_out: Var, noisy: Var, field: Var) -> Var {
    let warped = warp::resample_var(g, gen_out, field, InterpolationScheme::Bilinear);
    l1_var(g, noisy, warped)
}

pub fn smoothness_var<T: Real>(g: &mut Graph<T>, field: Var) -> Var {
    warp::smoothness_var(g, field)
}

/// Graph handles of the active generator-side terms.
#[derive(Clone, Copy, Debug, Default)]
pub struct TermVars {
    pub adv: Option<Var>,
    pub l1: Option<Var>,
    pub cyc: Option<Var>,
    pub corr: Option<Var>,
    pub smooth: Option<Var>,
}

impl TermVars {
    /// Weighted sum node; `None` if no term is active.
    pub fn total<T: Real>(&self, g: &mut Graph<T>, w: &LossWeights) -> Option<Var> {
        let parts: Vec<(Var, f64)> = [
            (self.adv, w.adv),
            (self.l1, w.l1),
            (self.cyc, w.cyc),
            (self.corr, w.corr),
            (self.smooth, w.smooth),
        ]
        .into_iter()
        .filter_map(|(v, k)| v.map(|v| (v, k)))
        .collect();
        (!parts.is_empty()).then(|| g.linear(&parts))
    }

    pub fn read<T: Real>(&self, g: &Graph<T>) -> LossTerms {
        let get = |v: Option<Var>| v.map(|v| g.value(v).item().as_f64());
        LossTerms {
            adv: get(self.adv),
            l1: get(self.l1),
            cyc: get(self.cyc),
            corr: get(self.corr),
            smooth: get(self.smooth),
        }
    }
}
