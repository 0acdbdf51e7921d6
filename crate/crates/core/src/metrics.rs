//! Masked NMAE, PSNR and SSIM.

use serde::{Deserialize, Serialize};

use crate::domain::{ensure_same_shape, Image, BACKGROUND};
use crate::error::{Error, Result};

/// Intensity range of normalized images.
pub const DATA_RANGE: f64 = 2.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForegroundMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid("mask", format!("{} values for {height}x{width}", data.len())));
        }
        if !data.iter().any(|&b| b) {
            return Err(Error::EmptyMask);
        }
        Ok(Self { height, width, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Pixels brighter than `−1 + threshold`, dilated with a `(2r+1)²` square.
pub fn foreground_mask(target: &Image, threshold: f64, dilation: usize) -> Result<ForegroundMask> {
    let (h, w) = target.shape();
    let seed: Vec<bool> = target.data().iter().map(|&v| v > BACKGROUND + threshold).collect();
    // separable max filter: rows then columns
    let r = dilation;
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = seed[y * w + lo..=y * w + hi].iter().any(|&b| b);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    ForegroundMask::new(h, w, out)
}

fn check(pred: &Image, target: &Image, mask: &ForegroundMask) -> Result<()> {
    ensure_same_shape("metric", pred.shape(), target.shape())?;
    ensure_same_shape("metric mask", pred.shape(), mask.shape())?;
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

fn masked<'a>(pred: &'a Image, target: &'a Image, mask: &'a ForegroundMask) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.data()
        .iter()
        .zip(target.data())
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|((&p, &t), _)| (p, t))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmaeNorm {
    /// Divide by the intensity range 2.0.
    #[default]
    Range,
    /// Divide by the masked mean of `|target|`.
    MeanAbsTarget,
}

pub fn nmae(pred: &Image, target: &Image, mask: &ForegroundMask) -> Result<f64> {
    nmae_with(pred, target, mask, NmaeNorm::Range)
}

pub fn nmae_with(pred: &Image, target: &Image, mask: &ForegroundMask, norm: NmaeNorm) -> Result<f64> {
    check(pred, target, mask)?;
    let n = mask.count() as f64;
    let mae = masked(pred, target, mask).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let denom = match norm {
        NmaeNorm::Range => DATA_RANGE,
        NmaeNorm::MeanAbsTarget => masked(pred, target, mask).map(|(_, t)| t.abs()).sum::<f64>() / n,
    };
    if denom <= 0.0 {
        return Err(Error::invalid("nmae", "target has zero mean magnitude under the mask"));
    }
    Ok(mae / denom)
}

pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(pred: &Image, target: &Image, mask: &ForegroundMask) -> Result<f64> {
    psnr_capped(pred, target, mask, PSNR_CAP)
}

pub fn psnr_capped(pred: &Image, target: &Image, mask: &ForegroundMask, cap: f64) -> Result<f64> {
    check(pred, target, mask)?;
    let mse = masked(pred, target, mask).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / mask.count() as f64;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (DATA_RANGE * DATA_RANGE / mse).log10()).min(cap))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-mode separable filtering; output is `(h − 10) × (w − 10)`.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM over window centres that fall inside the mask. Only fully contained windows are used.
pub fn ssim(pred: &Image, target: &Image, mask: &ForegroundMask) -> Result<f64> {
    check(pred, target, mask)?;
    let (h, w) = pred.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall { context: "ssim input", height: h, width: w, min: SSIM_WINDOW });
    }
    let k = gaussian_window();
    let (x, y) = (pred.data(), target.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let mxx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &k);
    let myy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &k);
    let mxy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &k);
    let c1 = (0.01 * DATA_RANGE).powi(2);
    let c2 = (0.03 * DATA_RANGE).powi(2);
    let r = SSIM_WINDOW / 2;
    let wo = w - SSIM_WINDOW + 1;
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, ((((&ux, &uy), &sxx), &syy), &sxy)) in mx.iter().zip(&my).zip(&mxx).zip(&myy).zip(&mxy).enumerate() {
        let (cy, cx) = (i / wo + r, i % wo + r);
        if !mask.get(cy, cx) {
            continue;
        }
        let vx = sxx - ux * ux;
        let vy = syy - uy * uy;
        let cov = sxy - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / n as f64)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub mask_threshold: f64,
    pub mask_dilation: usize,
    pub nmae_norm: NmaeNorm,
    pub psnr_cap: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { mask_threshold: 0.02, mask_dilation: 2, nmae_norm: NmaeNorm::Range, psnr_cap: PSNR_CAP }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub nmae: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// All three metrics for one prediction against its clean reference.
pub fn evaluate_pair(pred: &Image, reference: &Image, cfg: &MetricsConfig) -> Result<PairMetrics> {
    let mask = foreground_mask(reference, cfg.mask_threshold, cfg.mask_dilation)?;
    Ok(PairMetrics {
        nmae: nmae_with(pred, reference, &mask, cfg.nmae_norm)?,
        psnr: psnr_capped(pred, reference, &mask, cfg.psnr_cap)?,
        ssim: ssim(pred, reference, &mask)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub per_pair: Vec<f64>,
}

impl MetricSummary {
    /// Mean and population standard deviation.
    pub fn from_values(per_pair: Vec<f64>) -> Self {
        let n = per_pair.len().max(1) as f64;
        let mean = per_pair.iter().sum::<f64>() / n;
        let var = per_pair.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), per_pair }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_pairs: usize,
    pub pair_ids: Vec<String>,
    pub nmae: MetricSummary,
    pub psnr: MetricSummary,
    pub ssim: MetricSummary,
}

impl MetricsReport {
    pub fn from_pairs(pair_ids: Vec<String>, metrics: &[PairMetrics]) -> Result<Self> {
        if metrics.is_empty() || pair_ids.len() != metrics.len() {
            return Err(Error::Report(format!("{} ids for {} metric rows", pair_ids.len(), metrics.len())));
        }
        Ok(Self {
            n_pairs: metrics.len(),
            pair_ids,
            nmae: MetricSummary::from_values(metrics.iter().map(|m| m.nmae).collect()),
            psnr: MetricSummary::from_values(metrics.iter().map(|m| m.psnr).collect()),
            ssim: MetricSummary::from_values(metrics.iter().map(|m| m.ssim).collect()),
        })
    }
}

/// One row of a comparison table.
#[derive(Clone, Debug)]
pub struct TableRow<'a> {
    pub label: String,
    pub noise: String,
    pub report: &'a MetricsReport,
}

/// Markdown table with mode rows and `mean ± std` metric columns.
pub fn render_table(rows: &[TableRow<'_>]) -> String {
    let mut s = String::from("| Mode | Noise | NMAE ↓ | PSNR ↑ | SSIM ↑ | n |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let m = r.report;
        s.push_str(&format!(
            "| {} | {} | {:.4} ± {:.4} | {:.2} ± {:.2} | {:.4} ± {:.4} | {} |\n",
            r.label, r.noise, m.nmae.mean, m.nmae.std, m.psnr.mean, m.psnr.std, m.ssim.mean, m.ssim.std, m.n_pairs
        ));
    }
    s
}
