//! Acceptance criteria, one result line each.
//!
//! `ACCEPTANCE_ONLY=1,3,9` selects criteria. `ACCEPTANCE_WORKDIR=<dir>` keeps the desk-scale runs
//! there and reuses any run whose config echo matches. The process fails on any failed check
//! except those listed in `KNOWN_UNMET`.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reggan::losses::{
    adversarial_disc_var, adversarial_gen_var, correction_var, l1_var, smoothness_var,
    GanLossKind,
};
use reggan::metrics::{foreground_mask, nmae, psnr, ssim, ForegroundMask, PSNR_CAP};
use reggan::nn::{Graph, Tensor, Var};
use reggan::noise::{corrupt_pair, corrupt_split, sample_affine, AffineNoiseSpec, NoiseSetting, PairingMode, MAX_LEVEL};
use reggan::synthdata::{generate_dataset, PhantomSpec};
use reggan::train::{
    checkpoint_name, run_experiment, EpochRecord, ExperimentConfig, ModeKind, NetSpecs, RunReport, CONFIG_ECHO, CURVES_FILE,
    REPORT_FILE,
};
use reggan::warp::{compose, invert, resample, resample_var, InterpolationScheme};
use reggan::{DatasetSplit, DeformationField, Image, SamplePair};

/// Checks that fail at desk scale for reasons recorded in the README.
const KNOWN_UNMET: &[&str] = &["6b"];

const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const DESK_TRAIN: usize = 500;
const DESK_TEST: usize = 100;
const DESK_BUDGET_SECS: f64 = 45.0 * 60.0;

struct Check {
    name: String,
    pass: bool,
    detail: String,
}

fn check(name: &str, pass: bool, detail: impl Into<String>) -> Check {
    Check { name: name.to_string(), pass, detail: detail.into() }
}

struct Outcome {
    id: u32,
    title: &'static str,
    checks: Vec<Check>,
    secs: f64,
}

fn timed(id: u32, title: &'static str, f: impl FnOnce() -> Vec<Check>) -> Outcome {
    let t = Instant::now();
    let checks = f();
    Outcome { id, title, checks, secs: t.elapsed().as_secs_f64() }
}

fn with_budget(mut o: Outcome, limit: f64) -> Outcome {
    let secs = o.secs;
    o.checks.push(check("runtime", secs < limit, format!("{secs:.2} s, limit {limit} s")));
    o
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(h: usize, w: usize, r: &mut impl Rng) -> Image {
    Image::from_fn(h, w, |_, _| r.gen_range(-1.0..1.0)).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Warp oracle
// ---------------------------------------------------------------------------

fn oracle_pixel(img: &Image, y: i64, x: i64) -> f64 {
    let (h, w) = img.shape();
    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
        -1.0
    } else {
        img.get(y as usize, x as usize)
    }
}

// Tent-weight sum over the four neighbours.
fn oracle_bilinear(img: &Image, sy: f64, sx: f64) -> f64 {
    let (y0, x0) = (sy.floor() as i64, sx.floor() as i64);
    let mut v = 0.0;
    for ny in [y0, y0 + 1] {
        for nx in [x0, x0 + 1] {
            let wgt = (1.0 - (sy - ny as f64).abs()).max(0.0) * (1.0 - (sx - nx as f64).abs()).max(0.0);
            v += wgt * oracle_pixel(img, ny, nx);
        }
    }
    v
}

fn criterion_1() -> Vec<Check> {
    let mut r = rng(1);
    let mut nearest_ok = true;
    let mut nearest_cases = 0;
    for _ in 0..200 {
        let (h, w) = (8 + r.gen_range(0..5), 8 + r.gen_range(0..5));
        let img = random_image(h, w, &mut r);
        let offsets: Vec<(i64, i64)> = (0..h * w).map(|_| (r.gen_range(-3..=3), r.gen_range(-3..=3))).collect();
        let field = DeformationField::from_fn(h, w, |y, x| {
            let (dy, dx) = offsets[y * w + x];
            (dy as f64, dx as f64)
        });
        let out = resample(&img, &field, InterpolationScheme::Nearest).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = offsets[y * w + x];
                nearest_ok &= out.get(y, x) == oracle_pixel(&img, y as i64 + dy, x as i64 + dx);
            }
        }
        nearest_cases += 1;
    }
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let img = random_image(8, 8, &mut r);
        let planes = (0..2 * 64).map(|_| r.gen_range(-2.5..2.5)).collect();
        let field = DeformationField::from_planes(8, 8, planes).unwrap();
        let out = resample(&img, &field, InterpolationScheme::Bilinear).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let (dy, dx) = field.get(y, x);
                worst = worst.max((out.get(y, x) - oracle_bilinear(&img, y as f64 + dy, x as f64 + dx)).abs());
            }
        }
    }
    vec![
        check("nearest = index permutation", nearest_ok, format!("{nearest_cases} random integer fields, exact")),
        check("bilinear vs oracle < 1e-9", worst < 1e-9, format!("max |diff| {worst:.2e} over 200 random 8x8 cases")),
    ]
}

// ---------------------------------------------------------------------------
// 2. Gradient checks
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-3;

fn tensor(dims: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| r.gen_range(lo..hi)).collect())
}

// Worst relative error between backprop and central differences.
fn grad_error(x0: &Tensor<f64>, build: &dyn Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let loss = build(&mut g, x);
    let analytic = g.backward(loss).get(x).cloned().unwrap();
    let eval = |i: usize, d: f64| {
        let mut t = x0.clone();
        t.data_mut()[i] += d;
        let mut g = Graph::new();
        let x = g.constant(t);
        let l = build(&mut g, x);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let fd = (eval(i, FD_STEP) - eval(i, -FD_STEP)) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
    }
    worst
}

// Field values whose sample points sit at least 0.1 px from grid lines.
fn off_grid_field(r: &mut impl Rng) -> Tensor<f64> {
    let data = (0..2 * 64).map(|_| r.gen_range(-2i32..2) as f64 + r.gen_range(0.1..0.9)).collect();
    Tensor::new(&[2, 8, 8], data)
}

fn criterion_2() -> Vec<Check> {
    let mut r = rng(2);
    let img = tensor(&[1, 8, 8], -1.0, 1.0, &mut r);
    let other = tensor(&[1, 8, 8], -1.0, 1.0, &mut r);
    let field = off_grid_field(&mut r);
    let logits = tensor(&[1, 6, 6], -3.0, 3.0, &mut r);
    let upstream = tensor(&[1, 8, 8], -1.0, 1.0, &mut r);

    let mut cases: Vec<(&str, f64)> = Vec::new();
    let (fc, uc) = (field.clone(), upstream.clone());
    cases.push((
        "resample wrt image",
        grad_error(&img, &|g, x| {
            let f = g.constant(fc.clone());
            let u = g.constant(uc.clone());
            let out = resample_var(g, x, f, InterpolationScheme::Bilinear);
            l1_var(g, out, u)
        }),
    ));
    let (ic, uc) = (img.clone(), upstream.clone());
    cases.push((
        "resample wrt field",
        grad_error(&field, &|g, f| {
            let i = g.constant(ic.clone());
            let u = g.constant(uc.clone());
            let out = resample_var(g, i, f, InterpolationScheme::Bilinear);
            l1_var(g, out, u)
        }),
    ));
    for (kind, name) in [(GanLossKind::Vanilla, "adversarial (vanilla)"), (GanLossKind::LeastSquares, "adversarial (least squares)")] {
        let lc = logits.clone();
        let gen = grad_error(&logits, &|g, x| adversarial_gen_var(g, x, kind));
        let real = grad_error(&logits, &|g, x| {
            let f = g.constant(lc.clone());
            adversarial_disc_var(g, x, f, kind)
        });
        let fake = grad_error(&logits, &|g, x| {
            let rl = g.constant(lc.clone());
            adversarial_disc_var(g, rl, x, kind)
        });
        cases.push((name, gen.max(real).max(fake)));
    }
    let oc = other.clone();
    cases.push((
        "L1",
        grad_error(&img, &|g, x| {
            let t = g.constant(oc.clone());
            l1_var(g, x, t)
        }),
    ));
    // Cycle term with stand-in translators G(v) = tanh(0.9 v), F(v) = tanh(1.1 v).
    let (xc, yc) = (img.clone(), other.clone());
    let cycle = |g: &mut Graph<f64>, x: Var, y: Var, x_ref: Var, y_ref: Var| {
        let gx = g.scale(x, 0.9);
        let gx = g.tanh(gx);
        let fgx = g.scale(gx, 1.1);
        let fgx = g.tanh(fgx);
        let fy = g.scale(y, 1.1);
        let fy = g.tanh(fy);
        let gfy = g.scale(fy, 0.9);
        let gfy = g.tanh(gfy);
        let a = l1_var(g, fgx, x_ref);
        let b = l1_var(g, gfy, y_ref);
        g.add(a, b)
    };
    cases.push((
        "cycle",
        grad_error(&img, &|g, x| {
            let (y, xr, yr) = (g.constant(yc.clone()), g.constant(xc.clone()), g.constant(yc.clone()));
            cycle(g, x, y, xr, yr)
        }),
    ));
    let (oc, fc) = (other.clone(), field.clone());
    cases.push((
        "correction wrt output",
        grad_error(&img, &|g, x| {
            let (t, f) = (g.constant(oc.clone()), g.constant(fc.clone()));
            correction_var(g, x, t, f)
        }),
    ));
    let (ic, oc) = (img.clone(), other.clone());
    cases.push((
        "correction wrt field",
        grad_error(&field, &|g, f| {
            let (x, t) = (g.constant(ic.clone()), g.constant(oc.clone()));
            correction_var(g, x, t, f)
        }),
    ));
    cases.push(("smoothness", grad_error(&tensor(&[2, 8, 8], -2.0, 2.0, &mut r), &|g, f| smoothness_var(g, f))));
    cases
        .into_iter()
        .map(|(name, err)| check(name, err < GRAD_TOL, format!("max rel err {err:.2e}")))
        .collect()
}

// ---------------------------------------------------------------------------
// 3. Loss correction under a shared warp
// ---------------------------------------------------------------------------

fn smooth_image(h: usize, w: usize, r: &mut impl Rng) -> Image {
    let waves: Vec<(f64, f64, f64, f64)> =
        (0..3).map(|_| (r.gen_range(0.1..0.2), r.gen_range(0.03..0.12), r.gen_range(0.03..0.12), r.gen_range(0.0..6.3))).collect();
    let offset = r.gen_range(-0.3..0.3);
    Image::from_fn(h, w, |y, x| {
        offset + waves.iter().map(|&(a, ky, kx, p)| a * (ky * y as f64 + kx * x as f64 + p).sin()).sum::<f64>()
    })
    .unwrap()
}

fn smooth_field(h: usize, w: usize, max_disp: f64, r: &mut impl Rng) -> DeformationField {
    let (ky, kx, p, q) = (r.gen_range(0.03..0.1), r.gen_range(0.03..0.1), r.gen_range(0.0..6.3), r.gen_range(0.0..6.3));
    let a = max_disp / std::f64::consts::SQRT_2;
    DeformationField::from_fn(h, w, |y, x| (a * (kx * x as f64 + p).sin(), a * (ky * y as f64 + q).cos()))
}

fn interior_l1(a: &Image, b: &Image, margin: usize) -> f64 {
    let (h, w) = a.shape();
    let mut s = 0.0;
    for y in margin..h - margin {
        for x in margin..w - margin {
            s += (a.get(y, x) - b.get(y, x)).abs();
        }
    }
    s / ((h - 2 * margin) * (w - 2 * margin)) as f64
}

fn criterion_3() -> Vec<Check> {
    let mut r = rng(3);
    let (h, w, margin) = (64, 64, 4);
    let mut worst_warp: f64 = 0.0;
    for _ in 0..50 {
        let a = smooth_image(h, w, &mut r);
        let b = smooth_image(h, w, &mut r);
        let t = smooth_field(h, w, 2.0, &mut r);
        assert!(t.max_norm() <= 2.0 + 1e-12);
        let at = resample(&a, &t, InterpolationScheme::Bilinear).unwrap();
        let bt = resample(&b, &t, InterpolationScheme::Bilinear).unwrap();
        let before = interior_l1(&a, &b, margin);
        worst_warp = worst_warp.max((interior_l1(&at, &bt, margin) - before).abs() / before);
    }
    let mut worst_inv: f64 = 0.0;
    for _ in 0..20 {
        let f = smooth_field(h, w, 2.0, &mut r);
        let inv = invert(&f, 200, 1e-4).unwrap();
        let residual = compose(&f, &inv).unwrap();
        let mut m: f64 = 0.0;
        for y in margin..h - margin {
            for x in margin..w - margin {
                let (dy, dx) = residual.get(y, x);
                m = m.max(dy.hypot(dx));
            }
        }
        worst_inv = worst_inv.max(m);
    }
    vec![
        check("shared warp keeps L1 (rel < 0.05)", worst_warp < 0.05, format!("worst {worst_warp:.4} over 50 pairs")),
        check("invert then compose < 0.05 px", worst_inv < 0.05, format!("worst {worst_inv:.2e} px over 20 fields")),
    ]
}

// ---------------------------------------------------------------------------
// 4. Noise protocol
// ---------------------------------------------------------------------------

// Noise.0 .. Noise.5 bounds: rotation in degrees, translation and rescaling in percent.
const PAPER_LEVELS: [(f64, f64, f64); 6] =
    [(0.0, 0.0, 0.0), (1.0, 2.0, 2.0), (2.0, 4.0, 4.0), (3.0, 6.0, 6.0), (4.0, 8.0, 8.0), (5.0, 10.0, 10.0)];

fn test_split(n: usize, size: usize) -> DatasetSplit {
    let spec = PhantomSpec { resolution: size, ..PhantomSpec::default() };
    reggan::synthdata::generate_split(&spec, n, 9, "q").unwrap()
}

fn criterion_4() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut table_ok = true;
    let mut within = true;
    let mut spread = true;
    let mut spread_detail = String::new();
    for level in 0..=MAX_LEVEL {
        let spec = AffineNoiseSpec::level(level).unwrap();
        let (rot, tr, rs) = PAPER_LEVELS[level as usize];
        table_ok &= spec.rotation_max == rot && (spec.translation_max * 100.0 - tr).abs() < 1e-9 && (spec.rescale_max * 100.0 - rs).abs() < 1e-9;
        let mut r = rng(40 + level as u64);
        let mut cols: [Vec<f64>; 5] = Default::default();
        for _ in 0..10_000 {
            let p = sample_affine(&spec, &mut r);
            let vals = [p.rotation, p.translation.0, p.translation.1, p.scale.0 - 1.0, p.scale.1 - 1.0];
            for (c, v) in cols.iter_mut().zip(vals) {
                c.push(v);
            }
        }
        let bounds = [spec.rotation_max, spec.translation_max, spec.translation_max, spec.rescale_max, spec.rescale_max];
        for (c, b) in cols.iter().zip(bounds) {
            let (lo, hi) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            within &= lo >= -b - 1e-15 && hi <= b + 1e-15;
            if b > 0.0 {
                let ok = (hi - b).abs() <= 0.02 * b && (lo + b).abs() <= 0.02 * b && mean.abs() <= 0.02 * b;
                if !ok {
                    spread_detail = format!("level {level}: min {lo:.4} max {hi:.4} mean {mean:.4} bound {b}");
                }
                spread &= ok;
            } else {
                within &= lo == 0.0 && hi == 0.0;
            }
        }
    }
    checks.push(check("levels match Noise.0-5 table", table_ok, "rotation k deg, translation 2k %, rescaling 2k %"));
    checks.push(check("10,000 draws per level within bounds", within, "levels 0-5"));
    checks.push(check("draws span the range uniformly", spread, if spread { "min/max/mean within 2% of bound".into() } else { spread_detail }));

    let split = test_split(6, 32);
    let (zero, log) = corrupt_split(&split, &PairingMode::MisalignedAffine(0), 5).unwrap();
    let identity = zero.pairs().iter().zip(split.pairs()).all(|(a, b)| a.source == b.source && a.target == b.target)
        && log.iter().all(|l| l.source.field(32, 32).unwrap().max_norm() == 0.0 && l.target.field(32, 32).unwrap().max_norm() == 0.0);
    checks.push(check("level 0 is exactly identity", identity, "6 phantom pairs, bitwise"));

    let mut same = true;
    for mode in [PairingMode::MisalignedAffine(5), NoiseSetting::NonAffine.pairing_mode(32)] {
        let a = corrupt_split(&split, &mode, 77).unwrap();
        let b = corrupt_split(&split, &mode, 77).unwrap();
        same &= a == b;
        let p: &SamplePair = &split.pairs()[0];
        same &= corrupt_pair(p, &mode, &mut rng(3)).unwrap() == corrupt_pair(p, &mode, &mut rng(3)).unwrap();
    }
    checks.push(check("fixed seeds reproduce bit-identically", same, "level 5 and non-affine"));
    checks
}

// ---------------------------------------------------------------------------
// 5. Metric oracles
// ---------------------------------------------------------------------------

fn criterion_5() -> Vec<Check> {
    let mut checks = Vec::new();
    let (h, w) = (8, 8);
    let target = Image::from_fn(h, w, |y, x| -0.9 + 0.05 * y as f64 + 0.03 * x as f64).unwrap();
    let full = ForegroundMask::new(h, w, vec![true; h * w]).unwrap();

    let plus_one = Image::from_fn(h, w, |y, x| target.get(y, x) + 1.0).unwrap();
    let v = nmae(&plus_one, &target, &full).unwrap();
    checks.push(check("NMAE constant offset 1.0 = 0.5", (v - 0.5).abs() < 1e-6, format!("{v}")));

    let offset = Image::from_fn(h, w, |y, x| target.get(y, x) + 0.2).unwrap();
    let v = psnr(&offset, &target, &full).unwrap();
    checks.push(check("PSNR at MSE 0.04 = 20 dB", (v - 20.0).abs() < 1e-6, format!("{v}")));

    // 2x2 foreground block with errors 0.1, -0.3, 0.2, 0.0.
    let errs = [0.1, -0.3, 0.2, 0.0];
    let block = |y: usize, x: usize| (2..4).contains(&y) && (3..5).contains(&x);
    let mask = ForegroundMask::new(h, w, (0..h * w).map(|i| block(i / w, i % w)).collect()).unwrap();
    let pred = Image::from_fn(h, w, |y, x| if block(y, x) { target.get(y, x) + errs[(y - 2) * 2 + (x - 3)] } else { 0.9 }).unwrap();
    let mae = (0.1 + 0.3 + 0.2 + 0.0) / 4.0;
    let mse: f64 = (0.01 + 0.09 + 0.04 + 0.0) / 4.0;
    let v = nmae(&pred, &target, &mask).unwrap();
    checks.push(check("NMAE on 2x2 block", (v - mae / 2.0).abs() < 1e-6, format!("{v} vs {}", mae / 2.0)));
    let v = psnr(&pred, &target, &mask).unwrap();
    let expect = 10.0 * (4.0 / mse).log10();
    checks.push(check("PSNR on 2x2 block", (v - expect).abs() < 1e-6, format!("{v} vs {expect}")));
    let v = psnr(&target, &target, &mask).unwrap();
    checks.push(check("PSNR of identical images = cap", v == PSNR_CAP, format!("{v}")));

    let c1 = (0.01f64 * 2.0).powi(2);
    let (a, b) = (0.2, 0.5);
    let ca = Image::filled(16, 16, a).unwrap();
    let cb = Image::filled(16, 16, b).unwrap();
    let full16 = ForegroundMask::new(16, 16, vec![true; 256]).unwrap();
    let v = ssim(&ca, &cb, &full16).unwrap();
    let expect = (2.0 * a * b + c1) / (a * a + b * b + c1);
    checks.push(check("SSIM of two constants", (v - expect).abs() < 1e-6, format!("{v} vs {expect}")));
    let v = ssim(&ca, &ca, &full16).unwrap();
    checks.push(check("SSIM of equal constants = 1", (v - 1.0).abs() < 1e-6, format!("{v}")));

    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = Image::from_fn(24, 24, |_, _| r.gen_range(-1.0..1.0)).unwrap();
        let m = foreground_mask(&x, 0.02, 2).unwrap();
        worst = worst.max((ssim(&x, &x, &m).unwrap() - 1.0).abs());
    }
    checks.push(check("SSIM(x, x) = 1", worst < 1e-6, format!("max |SSIM - 1| {worst:.1e} over 20 images")));
    checks
}

// ---------------------------------------------------------------------------
// 6-8. Desk-scale training
// ---------------------------------------------------------------------------

struct Desk {
    root: PathBuf,
    data: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    cache: BTreeMap<String, (RunReport, Vec<EpochRecord>)>,
}

impl Desk {
    fn new() -> Desk {
        let (root, tmp) = match std::env::var_os("ACCEPTANCE_WORKDIR") {
            Some(d) => (PathBuf::from(d), None),
            None => {
                let t = tempfile::tempdir().unwrap();
                (t.path().to_path_buf(), Some(t))
            }
        };
        let data = root.join("data");
        if !data.join(reggan::dataset::MANIFEST_FILE).exists() {
            generate_dataset(&PhantomSpec::default(), DESK_TRAIN, DESK_TEST, &data).unwrap();
        }
        Desk { root, data, _tmp: tmp, cache: BTreeMap::new() }
    }

    fn config(&self, mode: ModeKind, noise: NoiseSetting, seed: u64) -> ExperimentConfig {
        let dir = self.root.join("runs").join(format!("{}_noise{}_seed{seed}", mode.as_str().replace('+', ""), noise));
        let mut c = ExperimentConfig::new(&self.data, dir, mode);
        c.noise = noise;
        c.seed = seed;
        c.nets = NetSpecs::desk();
        c.n_samples = 0;
        c
    }

    fn run(&mut self, mode: ModeKind, noise: NoiseSetting, seed: u64) -> Result<(RunReport, Vec<EpochRecord>), String> {
        let cfg = self.config(mode, noise, seed);
        let key = cfg.output_dir.display().to_string();
        if let Some(hit) = self.cache.get(&key) {
            return Ok((hit.0.clone(), hit.1.clone()));
        }
        let mut echo = cfg.clone();
        echo.noise_seed = Some(cfg.effective_noise_seed());
        let previous = fs::read_to_string(cfg.output_dir.join(CONFIG_ECHO)).ok();
        let result = if previous == Some(echo.to_toml_string().unwrap()) && cfg.output_dir.join(REPORT_FILE).exists() {
            let report = RunReport::load(&cfg.output_dir.join(REPORT_FILE)).map_err(|e| e.to_string())?;
            let curves = fs::read_to_string(cfg.output_dir.join(CURVES_FILE)).map_err(|e| e.to_string())?;
            (report, reggan::train::parse_curves_csv(&curves).map_err(|e| e.to_string())?)
        } else {
            let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
            (out.report, out.curves)
        };
        eprintln!(
            "  run {:<8} noise {:<8} seed {seed}: PSNR {:6.2} dB  ({:.0} s)",
            mode.as_str(),
            noise.to_string(),
            result.0.metrics.psnr.mean,
            result.0.elapsed_seconds
        );
        self.cache.insert(key, (result.0.clone(), result.1.clone()));
        Ok(result)
    }

    // Mean final test PSNR over the desk seeds, and their summed training time.
    fn mean_psnr(&mut self, mode: ModeKind, noise: NoiseSetting) -> Result<(f64, f64), String> {
        let mut psnr = 0.0;
        let mut secs = 0.0;
        for seed in DESK_SEEDS {
            let (rep, _) = self.run(mode, noise, seed)?;
            psnr += rep.metrics.psnr.mean;
            secs += rep.elapsed_seconds;
        }
        Ok((psnr / DESK_SEEDS.len() as f64, secs))
    }
}

fn criterion_6(desk: &mut Desk) -> Vec<Check> {
    let l0 = NoiseSetting::Level(0);
    let l5 = NoiseSetting::Level(5);
    let res = (|| -> Result<_, String> {
        let p0 = desk.mean_psnr(ModeKind::Pix2Pix, l0)?;
        let p5 = desk.mean_psnr(ModeKind::Pix2Pix, l5)?;
        let r0 = desk.mean_psnr(ModeKind::NcR, l0)?;
        let r5 = desk.mean_psnr(ModeKind::NcR, l5)?;
        let n5 = desk.mean_psnr(ModeKind::Nc, l5)?;
        Ok((p0, p5, r0, r5, n5))
    })();
    let ((p0, t1), (p5, t2), (r0, t3), (r5, t4), (n5, t5)) = match res {
        Ok(v) => v,
        Err(e) => return vec![check("training", false, e)],
    };
    let total = t1 + t2 + t3 + t4 + t5;
    vec![
        check("6a", p0 - p5 >= 3.0, format!("Pix2Pix {p0:.2} -> {p5:.2} dB, drop {:.2} (need >= 3)", p0 - p5)),
        check("6b", (r5 - r0).abs() <= 1.5, format!("NC+R {r0:.2} -> {r5:.2} dB, gap {:.2} (need <= 1.5)", (r5 - r0).abs())),
        check("6c", r5 - n5 >= 1.0, format!("noise 5: NC+R {r5:.2} vs NC {n5:.2} dB, margin {:.2} (need >= 1)", r5 - n5)),
        check("6d", r0 >= p0 - 0.5, format!("noise 0: NC+R {r0:.2} vs Pix2Pix {p0:.2} dB (need >= Pix2Pix - 0.5)")),
        check("learnability floor", p0 > 20.0, format!("Pix2Pix noise 0 {p0:.2} dB (need > 20)")),
        check("training budget", total <= DESK_BUDGET_SECS, format!("{:.1} min of training, limit 45", total / 60.0)),
    ]
}

fn criterion_7(desk: &mut Desk) -> Vec<Check> {
    let mut means = Vec::new();
    for level in [0u8, 2, 4] {
        let mut s = 0.0;
        for seed in DESK_SEEDS {
            let curves = match desk.run(ModeKind::NcR, NoiseSetting::Level(level), seed) {
                Ok((_, c)) => c,
                Err(e) => return vec![check("training", false, e)],
            };
            s += curves.last().and_then(|c| c.train.smooth).unwrap_or(f64::NAN);
        }
        means.push((level, s / DESK_SEEDS.len() as f64));
    }
    let ordered = means.windows(2).all(|w| w[1].1 >= w[0].1);
    let detail = means.iter().map(|(l, m)| format!("noise {l}: {m:.5}")).collect::<Vec<_>>().join(", ");
    vec![check("non-decreasing over noise 0, 2, 4", ordered, detail)]
}

fn criterion_8(desk: &mut Desk) -> Vec<Check> {
    let ncr = desk.run(ModeKind::NcR, NoiseSetting::Unpaired, 0);
    let p2p = desk.run(ModeKind::Pix2Pix, NoiseSetting::Unpaired, 0);
    match (ncr, p2p) {
        (Ok((r, rc)), Ok((p, _))) => {
            let finite = rc.iter().all(|c| c.train_total.is_finite() && c.test_psnr.is_finite());
            let (a, b) = (r.metrics.psnr.mean, p.metrics.psnr.mean);
            vec![
                check("NC+R completes with finite losses", finite, format!("{} epochs", rc.len())),
                check("NC+R above Pix2Pix", a > b, format!("NC+R {a:.2} vs Pix2Pix {b:.2} dB")),
            ]
        }
        (a, b) => vec![check("training", false, format!("{:?} / {:?}", a.err(), b.err()))],
    }
}

// ---------------------------------------------------------------------------
// 9. Determinism and persistence
// ---------------------------------------------------------------------------

fn criterion_9() -> Vec<Check> {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_dataset(&PhantomSpec { resolution: 32, ..PhantomSpec::default() }, 12, 4, &data).unwrap();
    let cfg = |dir: &str| {
        let mut c = ExperimentConfig::new(&data, tmp.path().join(dir), ModeKind::NcR);
        c.noise = NoiseSetting::Level(3);
        c.seed = 4;
        c.nets = NetSpecs::desk();
        c.optimizer.epochs = 4;
        c.checkpoint_every = 2;
        c.n_samples = 1;
        c
    };
    let read = |dir: &str, f: &str| fs::read(tmp.path().join(dir).join(f)).unwrap();
    run_experiment(&cfg("a")).unwrap();
    run_experiment(&cfg("b")).unwrap();
    let mut resumed = cfg("c");
    resumed.resume = Some(tmp.path().join("a").join(checkpoint_name(2)));
    run_experiment(&resumed).unwrap();
    let last = checkpoint_name(4);
    vec![
        check("identical curves.csv twice", read("a", CURVES_FILE) == read("b", CURVES_FILE), "NC+R, noise 3, 4 epochs"),
        check("identical checkpoints twice", read("a", &last) == read("b", &last), "final checkpoint bytes"),
        check(
            "resume from epoch 2 is bit-identical",
            read("a", &last) == read("c", &last) && read("a", CURVES_FILE) == read("c", CURVES_FILE),
            "final checkpoint and curves",
        ),
    ]
}

// ---------------------------------------------------------------------------

fn print(o: &Outcome) -> bool {
    let pass = o.checks.iter().all(|c| c.pass);
    println!("[{}] {} {} ({:.1} s)", if pass { "PASS" } else { "FAIL" }, o.id, o.title, o.secs);
    let mut unexpected = false;
    for c in &o.checks {
        let known = !c.pass && KNOWN_UNMET.contains(&c.name.as_str());
        unexpected |= !c.pass && !known;
        let tag = match (c.pass, known) {
            (true, _) => "ok",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("      {tag:<12} {}: {}", c.name, c.detail);
    }
    unexpected
}

fn main() {
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut outcomes = Vec::new();
    let mut report = |o: Outcome| {
        let bad = print(&o);
        outcomes.push((o.id, o.checks.iter().all(|c| c.pass), bad));
    };
    if want(1) {
        report(with_budget(timed(1, "warp oracle equivalence", criterion_1), 1.0));
    }
    if want(2) {
        report(with_budget(timed(2, "gradient checks", criterion_2), 30.0));
    }
    if want(3) {
        report(with_budget(timed(3, "loss correction under a shared warp", criterion_3), 10.0));
    }
    if want(4) {
        report(with_budget(timed(4, "noise protocol conformance", criterion_4), 10.0));
    }
    if want(5) {
        report(with_budget(timed(5, "metric oracles", criterion_5), 1.0));
    }
    if want(9) {
        report(timed(9, "determinism and persistence", criterion_9));
    }
    if want(6) || want(7) || want(8) {
        let mut desk = Desk::new();
        eprintln!("desk-scale runs under {}", desk.root.display());
        if want(6) {
            report(timed(6, "desk-scale mode ordering", || criterion_6(&mut desk)));
        }
        if want(7) {
            report(timed(7, "smoothness grows with noise", || criterion_7(&mut desk)));
        }
        if want(8) {
            report(timed(8, "unpaired training", || criterion_8(&mut desk)));
        }
    }
    let passed = outcomes.iter().filter(|o| o.1).count();
    let unexpected = outcomes.iter().any(|o| o.2);
    println!("{passed}/{} criteria passed", outcomes.len());
    if unexpected {
        std::process::exit(1);
    }
}
