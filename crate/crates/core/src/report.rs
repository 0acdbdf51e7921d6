//! Cross-run comparison: metric tables, curve plots, smoothness-vs-noise analysis,
//! error-map grids and noise previews. Plots are written as standalone SVG, images as PNG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{DeformationField, Image};
use crate::error::{Error, Result};
use crate::metrics::{render_table, TableRow};
use crate::noise::{self, NoiseSetting, PairingMode, TransformRecord};
use crate::rawfile;
use crate::train::{parse_curves_csv, EpochRecord, ModeKind, RunReport, CURVES_FILE, REPORT_FILE, SAMPLES_DIR};
use crate::warp::{self, InterpolationScheme};

/// A finished run read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub report: RunReport,
    pub curves: Vec<EpochRecord>,
}

impl LoadedRun {
    pub fn label(&self) -> String {
        format!("{} noise={} seed={}", self.report.mode.label(), self.report.noise, self.report.seed)
    }
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let report = RunReport::load(&dir.join(REPORT_FILE))?;
    let path = dir.join(CURVES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let curves = parse_curves_csv(&text)?;
    Ok(LoadedRun { dir: dir.to_path_buf(), report, curves })
}

/// Loads every run and refuses to mix runs evaluated on different test sets.
pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<LoadedRun>> {
    if dirs.is_empty() {
        return Err(Error::Report("no run directories given".into()));
    }
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let first = &runs[0];
    for r in &runs[1..] {
        if r.report.test_set != first.report.test_set {
            return Err(Error::Report(format!(
                "mismatched test sets: {} ({} pairs, {}) vs {} ({} pairs, {})",
                first.dir.display(),
                first.report.test_set.n_pairs,
                &first.report.test_set.sha256[..12],
                r.dir.display(),
                r.report.test_set.n_pairs,
                &r.report.test_set.sha256[..12]
            )));
        }
    }
    Ok(runs)
}

/// One markdown row per run.
pub fn comparison_table(runs: &[LoadedRun]) -> String {
    let rows: Vec<TableRow<'_>> = runs
        .iter()
        .map(|r| TableRow {
            label: format!("{} (seed {})", r.report.mode.label(), r.report.seed),
            noise: r.report.noise.to_string(),
            report: &r.report.metrics,
        })
        .collect();
    render_table(&rows)
}

// ---------------------------------------------------------------------------
// Smoothness vs noise
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessPoint {
    pub level: u8,
    pub mean: f64,
    pub n_runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessTrend {
    pub mode: ModeKind,
    pub points: Vec<SmoothnessPoint>,
    pub non_decreasing: bool,
}

/// Whether each value is at least the previous one.
pub fn is_non_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] >= w[0])
}

/// Final epoch-mean smoothness loss per noise level, averaged over seeds, for every
/// registration mode that has runs at two or more affine noise levels.
pub fn smoothness_trends(runs: &[LoadedRun]) -> Vec<SmoothnessTrend> {
    let mut by_mode: BTreeMap<&'static str, (ModeKind, BTreeMap<u8, Vec<f64>>)> = BTreeMap::new();
    for r in runs {
        let level = match r.report.noise {
            NoiseSetting::Level(k) => k,
            NoiseSetting::Aligned => 0,
            _ => continue,
        };
        let Some(s) = r.curves.last().and_then(|c| c.train.smooth) else { continue };
        let entry = by_mode.entry(r.report.mode.as_str()).or_insert_with(|| (r.report.mode, BTreeMap::new()));
        entry.1.entry(level).or_default().push(s);
    }
    by_mode
        .into_values()
        .filter(|(_, levels)| levels.len() >= 2)
        .map(|(mode, levels)| {
            let points: Vec<SmoothnessPoint> = levels
                .into_iter()
                .map(|(level, v)| SmoothnessPoint { level, mean: v.iter().sum::<f64>() / v.len() as f64, n_runs: v.len() })
                .collect();
            let means: Vec<f64> = points.iter().map(|p| p.mean).collect();
            SmoothnessTrend { mode, non_decreasing: is_non_decreasing(&means), points }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// SVG plots
// ---------------------------------------------------------------------------

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN: f64 = 56.0;

struct Series<'a> {
    name: &'a str,
    points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>], note: Option<&str>) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let (pw, ph) = (PLOT_W - 2.0 * MARGIN, PLOT_H - 2.0 * MARGIN);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| PLOT_H - MARGIN - (y - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, PLOT_W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#, px(xv), PLOT_H - MARGIN + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.4}</text>"#, MARGIN - 4.0, py(yv) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, PLOT_W / 2.0, PLOT_H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#,
        PLOT_H / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = MARGIN + 14.0 + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{}</text>"#, MARGIN + 8.0, escape(ser.name));
    }
    if let Some(n) = note {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-weight="bold">{}</text>"#,
            PLOT_W - MARGIN - 6.0,
            PLOT_H - MARGIN - 8.0,
            escape(n)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Per-epoch test metric curves, one series per run.
pub fn curves_svg(runs: &[LoadedRun], metric: &str) -> Result<String> {
    let pick = |c: &EpochRecord| match metric {
        "psnr" => Ok(c.test_psnr),
        "nmae" => Ok(c.test_nmae),
        "ssim" => Ok(c.test_ssim),
        other => Err(Error::Report(format!("unknown metric {other:?}"))),
    };
    let labels: Vec<String> = runs.iter().map(LoadedRun::label).collect();
    let series = runs
        .iter()
        .zip(&labels)
        .map(|(r, name)| {
            Ok(Series { name, points: r.curves.iter().map(|c| Ok((c.epoch as f64, pick(c)?))).collect::<Result<_>>()? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(line_plot(&format!("test {} per epoch", metric.to_uppercase()), "epoch", metric, &series, None))
}

pub fn monotonicity_note(trend: &SmoothnessTrend) -> String {
    if trend.non_decreasing {
        "non-decreasing with noise: yes".into()
    } else {
        "non-decreasing with noise: NO".into()
    }
}

pub fn smoothness_svg(trends: &[SmoothnessTrend]) -> String {
    let labels: Vec<String> = trends.iter().map(|t| t.mode.label().to_string()).collect();
    let series: Vec<Series<'_>> = trends
        .iter()
        .zip(&labels)
        .map(|(t, name)| Series { name, points: t.points.iter().map(|p| (p.level as f64, p.mean)).collect() })
        .collect();
    let note = trends.iter().map(|t| format!("{}: {}", t.mode.label(), monotonicity_note(t))).collect::<Vec<_>>().join("; ");
    line_plot("epoch-mean smoothness loss vs noise level", "noise level", "smoothness loss", &series, Some(&note))
}

// ---------------------------------------------------------------------------
// Raster output
// ---------------------------------------------------------------------------

fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Black-red-yellow-white ramp for `t ∈ [0, 1]`.
fn heat(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(t), c(t - 1.0), c(t - 2.0)]
}

/// RGB canvas assembled from equally sized tiles.
struct Canvas {
    tile_h: usize,
    tile_w: usize,
    cols: usize,
    buf: image::RgbImage,
}

const GAP: usize = 2;

impl Canvas {
    fn new(rows: usize, cols: usize, tile_h: usize, tile_w: usize) -> Self {
        let w = cols * tile_w + (cols + 1) * GAP;
        let h = rows * tile_h + (rows + 1) * GAP;
        Self { tile_h, tile_w, cols, buf: image::RgbImage::from_pixel(w as u32, h as u32, image::Rgb([255, 255, 255])) }
    }

    fn put(&mut self, row: usize, col: usize, pixel: impl Fn(usize, usize) -> [u8; 3]) {
        assert!(col < self.cols);
        let (oy, ox) = (GAP + row * (self.tile_h + GAP), GAP + col * (self.tile_w + GAP));
        for y in 0..self.tile_h {
            for x in 0..self.tile_w {
                self.buf.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb(pixel(y, x)));
            }
        }
    }

    fn gray(&mut self, row: usize, col: usize, img: &Image) {
        self.put(row, col, |y, x| [to_u8(img.get(y, x)); 3]);
    }

    fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.buf
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Codec { path: PathBuf::from("<memory>"), source: e })?;
        Ok(out.into_inner())
    }
}

/// Grid with one row per saved sample: source, prediction, reference, |prediction − reference|.
/// The error column uses a heat ramp saturating at `max_error`.
pub fn error_map_png(run: &LoadedRun, max_error: f64) -> Result<Vec<u8>> {
    if run.report.samples.is_empty() {
        return Err(Error::Report(format!("{} has no saved samples", run.dir.display())));
    }
    let read = |id: &str, suffix: &str| -> Result<Image> {
        let p = run.dir.join(SAMPLES_DIR).join(format!("{id}_{suffix}.{}", rawfile::EXTENSION));
        let raw = rawfile::read(&p)?;
        Image::clamped(raw.height, raw.width, raw.data)
    };
    let mut canvas: Option<Canvas> = None;
    for (row, id) in run.report.samples.iter().enumerate() {
        let (src, pred, reference) = (read(id, "source")?, read(id, "pred")?, read(id, "reference")?);
        let (h, w) = src.shape();
        let c = canvas.get_or_insert_with(|| Canvas::new(run.report.samples.len(), 4, h, w));
        if (c.tile_h, c.tile_w) != (h, w) {
            return Err(Error::Report(format!("sample {id} has a different size")));
        }
        c.gray(row, 0, &src);
        c.gray(row, 1, &pred);
        c.gray(row, 2, &reference);
        c.put(row, 3, |y, x| heat((pred.get(y, x) - reference.get(y, x)).abs() / max_error));
    }
    canvas.expect("at least one sample").png_bytes()
}

/// Everything `cmd_report` writes.
#[derive(Clone, Debug, Serialize)]
pub struct ReportSummary {
    pub table: String,
    pub smoothness: Vec<SmoothnessTrend>,
    pub files: Vec<PathBuf>,
}

/// Writes the comparison table, curve plots, smoothness plot and error maps into `out`.
pub fn write_report(runs: &[LoadedRun], out: &Path) -> Result<ReportSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();
    let mut write = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        files.push(p);
        Ok(())
    };
    let table = comparison_table(runs);
    write("table.md".into(), table.clone().into_bytes())?;
    for m in ["psnr", "nmae", "ssim"] {
        write(format!("curves_{m}.svg"), curves_svg(runs, m)?.into_bytes())?;
    }
    let smoothness = smoothness_trends(runs);
    if !smoothness.is_empty() {
        write("smoothness_vs_noise.svg".into(), smoothness_svg(&smoothness).into_bytes())?;
        write("smoothness_vs_noise.json".into(), serde_json::to_vec_pretty(&smoothness)?)?;
    }
    for (i, r) in runs.iter().enumerate() {
        if r.report.samples.is_empty() {
            continue;
        }
        let name = format!("error_map_{i:02}_{}_{}_s{}.png", r.report.mode.as_str().replace('+', ""), r.report.noise, r.report.seed);
        write(name, error_map_png(r, 0.5)?)?;
    }
    Ok(ReportSummary { table, smoothness, files })
}

// ---------------------------------------------------------------------------
// Noise preview
// ---------------------------------------------------------------------------

/// Regular grid lines, used to visualise a deformation by warping it.
pub fn grid_image(h: usize, w: usize, spacing: usize) -> Result<Image> {
    Image::from_fn(h, w, |y, x| if y % spacing == spacing / 2 || x % spacing == spacing / 2 { 1.0 } else { -1.0 })
}

/// The image and its deformation under one noise setting.
#[derive(Clone, Debug)]
pub struct PreviewTile {
    pub setting: NoiseSetting,
    pub transform: TransformRecord,
    pub warped: Image,
    pub field: DeformationField,
}

/// Draws one transform per setting from `seed` and warps `image` with it.
pub fn noise_preview(image: &Image, settings: &[NoiseSetting], seed: u64) -> Result<Vec<PreviewTile>> {
    let (h, w) = image.shape();
    settings
        .iter()
        .enumerate()
        .map(|(i, &setting)| {
            let mode = setting.pairing_mode(h.min(w));
            if matches!(mode, PairingMode::Unpaired) {
                return Err(Error::invalid("preview setting", "unpaired has no deformation to preview"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(seed, 0x7072_6576, i as u64));
            let pair = crate::domain::SamplePair::aligned("preview", image.clone(), image.clone());
            let (_, record) = noise::corrupt_pair(&pair, &mode, &mut rng)?;
            let transform = record.target;
            let field = transform.field(h, w)?;
            let warped = match transform {
                TransformRecord::Identity => image.clone(),
                _ => warp::resample(image, &field, InterpolationScheme::Bilinear)?,
            };
            Ok(PreviewTile { setting, transform, warped, field })
        })
        .collect()
}

/// Panel with one column per setting: warped image, warped grid, displacement magnitude.
pub fn preview_png(tiles: &[PreviewTile]) -> Result<Vec<u8>> {
    let Some(first) = tiles.first() else {
        return Err(Error::invalid("preview", "no settings"));
    };
    let (h, w) = first.warped.shape();
    let grid = grid_image(h, w, 8)?;
    let max_mag = tiles.iter().map(|t| t.field.max_norm()).fold(1e-9, f64::max);
    let mut c = Canvas::new(3, tiles.len(), h, w);
    for (i, t) in tiles.iter().enumerate() {
        c.gray(0, i, &t.warped);
        c.gray(1, i, &warp::resample(&grid, &t.field, InterpolationScheme::Bilinear)?);
        c.put(2, i, |y, x| {
            let (dy, dx) = t.field.get(y, x);
            heat((dy * dy + dx * dx).sqrt() / max_mag)
        });
    }
    c.png_bytes()
}
