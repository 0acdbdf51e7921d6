//! Mode lattice, the alternating optimisation step and the experiment runner.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset;
use crate::domain::{DatasetSplit, SamplePair};
use crate::error::{Error, Result};
use crate::losses::{self, first_non_finite, GanLossKind, LossReport, LossTerms, LossWeights, TermVars};
use crate::metrics::{evaluate_pair, MetricsConfig, MetricsReport};
use crate::nets::{
    build_discriminator, build_generator, build_registration, Discriminator, DiscriminatorSpec, Generator,
    GeneratorSpec, Network, RegistrationNet, RegistrationNetSpec,
};
use crate::nn::{Adam, AdamConfig, Bound, Gradients, Graph, ParamSet, Var};
use crate::noise::{self, NoiseSetting, PairingMode};
use crate::rawfile;
use crate::seed::derive_seed;

pub const TRAIN_SPLIT: &str = "train";
pub const TEST_SPLIT: &str = "test";
pub const REPORT_VERSION: u32 = 1;

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const UNPAIRED_STREAM: u64 = 3;
const REDRAW_STREAM: u64 = 4;

// ---------------------------------------------------------------------------
// Modes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModeKind {
    Pix2Pix,
    C,
    CR,
    Nc,
    NcR,
}

impl ModeKind {
    pub const ALL: [ModeKind; 5] = [ModeKind::Pix2Pix, ModeKind::C, ModeKind::CR, ModeKind::Nc, ModeKind::NcR];

    pub fn as_str(self) -> &'static str {
        match self {
            ModeKind::Pix2Pix => "pix2pix",
            ModeKind::C => "c",
            ModeKind::CR => "c+r",
            ModeKind::Nc => "nc",
            ModeKind::NcR => "nc+r",
        }
    }

    /// Display label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            ModeKind::Pix2Pix => "Pix2Pix",
            ModeKind::C => "C",
            ModeKind::CR => "C+R",
            ModeKind::Nc => "NC",
            ModeKind::NcR => "NC+R",
        }
    }

    pub fn is_cycle(self) -> bool {
        matches!(self, ModeKind::C | ModeKind::CR)
    }

    pub fn uses_registration(self) -> bool {
        matches!(self, ModeKind::CR | ModeKind::NcR)
    }

    pub fn networks(self) -> &'static [NetRole] {
        use NetRole::*;
        match self {
            ModeKind::Pix2Pix | ModeKind::Nc => &[G, DY],
            ModeKind::C => &[G, DY, F, DX],
            ModeKind::CR => &[G, DY, F, DX, R],
            ModeKind::NcR => &[G, DY, R],
        }
    }

    pub fn terms(self) -> ActiveTerms {
        let r = self.uses_registration();
        ActiveTerms { adv: true, l1: self == ModeKind::Pix2Pix, cyc: self.is_cycle(), corr: r, smooth: r }
    }
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        ModeKind::ALL.into_iter().find(|m| m.as_str() == lower || m.as_str().replace('+', "_") == lower).ok_or_else(|| {
            let names: Vec<&str> = ModeKind::ALL.iter().map(|m| m.as_str()).collect();
            Error::invalid("mode", format!("{s:?}; expected one of {}", names.join(", ")))
        })
    }
}

impl TryFrom<String> for ModeKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModeKind> for String {
    fn from(m: ModeKind) -> String {
        m.as_str().to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NetRole {
    #[serde(rename = "G")]
    G,
    #[serde(rename = "D_Y")]
    DY,
    #[serde(rename = "F")]
    F,
    #[serde(rename = "D_X")]
    DX,
    #[serde(rename = "R")]
    R,
}

impl NetRole {
    pub fn as_str(self) -> &'static str {
        match self {
            NetRole::G => "G",
            NetRole::DY => "D_Y",
            NetRole::F => "F",
            NetRole::DX => "D_X",
            NetRole::R => "R",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveTerms {
    pub adv: bool,
    pub l1: bool,
    pub cyc: bool,
    pub corr: bool,
    pub smooth: bool,
}

/// A mode plus the objective settings shared by all modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeConfig {
    pub kind: ModeKind,
    pub weights: LossWeights,
    pub gan_loss: GanLossKind,
}

impl ModeConfig {
    pub fn new(kind: ModeKind) -> Self {
        Self { kind, weights: LossWeights::default(), gan_loss: GanLossKind::default() }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: u32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, weight_decay: a.weight_decay, batch_size: 1, epochs: 20 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("optimizer", format!("lr {} must be > 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid("optimizer", format!("{name} {b} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("optimizer", "eps must be > 0 and weight_decay >= 0"));
        }
        if self.batch_size != 1 {
            return Err(Error::invalid("optimizer", format!("batch_size {} unsupported; only 1", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("optimizer", "epochs must be >= 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSpecs {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub registration: RegistrationNetSpec,
}

impl NetSpecs {
    /// Sizes used for 64×64 desk-scale runs.
    pub fn desk() -> Self {
        Self {
            generator: GeneratorSpec { base_channels: 8, n_residual_blocks: 3, n_down: 2, n_up: 2 },
            discriminator: DiscriminatorSpec { base_channels: 8, n_layers: 3 },
            registration: RegistrationNetSpec { base_channels: 8, depth: 4 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.registration.validate()
    }
}

fn default_samples() -> usize {
    4
}

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset root holding `manifest.toml`, `train/` and `test/`.
    pub dataset: PathBuf,
    /// Run directory; created if missing.
    pub output_dir: PathBuf,
    pub mode: ModeKind,
    #[serde(default = "default_noise")]
    pub noise: NoiseSetting,
    /// Seeds network initialisation and the epoch order.
    #[serde(default)]
    pub seed: u64,
    /// Seeds the frozen corruption of the training split; defaults to `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
    /// Draw fresh misalignment for every epoch instead of corrupting the split once.
    #[serde(default)]
    pub redraw_noise: bool,
    #[serde(default)]
    pub gan_loss: GanLossKind,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub nets: NetSpecs,
    #[serde(default)]
    pub metrics: MetricsConfig,
    /// Checkpoint period in epochs; 0 keeps only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train_pairs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_test_pairs: Option<usize>,
    /// Number of test predictions stored for error maps.
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    /// Checkpoint to continue from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

fn default_noise() -> NoiseSetting {
    NoiseSetting::Aligned
}

impl ExperimentConfig {
    pub fn new(dataset: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, mode: ModeKind) -> Self {
        Self {
            dataset: dataset.into(),
            output_dir: output_dir.into(),
            mode,
            noise: default_noise(),
            seed: 0,
            noise_seed: None,
            redraw_noise: false,
            gan_loss: GanLossKind::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            nets: NetSpecs::default(),
            metrics: MetricsConfig::default(),
            checkpoint_every: 0,
            max_train_pairs: None,
            max_test_pairs: None,
            n_samples: default_samples(),
            resume: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn mode_config(&self) -> ModeConfig {
        ModeConfig { kind: self.mode, weights: self.weights, gan_loss: self.gan_loss }
    }

    pub fn effective_noise_seed(&self) -> u64 {
        self.noise_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.nets.validate()?;
        if matches!(self.max_train_pairs, Some(0)) || matches!(self.max_test_pairs, Some(0)) {
            return Err(Error::Config("max_train_pairs / max_test_pairs must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

/// A network with its optimizer moments.
#[derive(Clone, Debug)]
pub struct Trainable<N> {
    pub net: N,
    pub adam: Adam<f32>,
}

impl<N: Network<f32>> Trainable<N> {
    fn new(net: N, cfg: AdamConfig) -> Self {
        let adam = Adam::new(cfg, net.params());
        Self { net, adam }
    }

    fn apply(&mut self, bound: &Bound, grads: &mut Gradients<f32>) {
        let g = self.net.params().grads(bound, grads);
        self.adam.update(self.net.params_mut(), &g);
    }
}

/// The networks a mode trains. `d_y` judges the target modality, `d_x` the source one.
#[derive(Clone, Debug)]
pub struct ModeNetworks {
    pub g: Trainable<Generator<f32>>,
    pub d_y: Trainable<Discriminator<f32>>,
    pub f: Option<Trainable<Generator<f32>>>,
    pub d_x: Option<Trainable<Discriminator<f32>>>,
    pub r: Option<Trainable<RegistrationNet<f32>>>,
}

impl ModeNetworks {
    /// Each role draws its initial weights from its own seed, so shared roles start
    /// identically across modes.
    pub fn build(kind: ModeKind, specs: &NetSpecs, adam: AdamConfig, seed: u64) -> Result<Self> {
        specs.validate()?;
        let rng = |role: NetRole| ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM, role as u64));
        let roles = kind.networks();
        let has = |r: NetRole| roles.contains(&r);
        let gen = |role| -> Result<_> { Ok(Trainable::new(build_generator(specs.generator, &mut rng(role))?, adam)) };
        let disc = |role| -> Result<_> {
            Ok(Trainable::new(build_discriminator(specs.discriminator, &mut rng(role))?, adam))
        };
        Ok(Self {
            g: gen(NetRole::G)?,
            d_y: disc(NetRole::DY)?,
            f: has(NetRole::F).then(|| gen(NetRole::F)).transpose()?,
            d_x: has(NetRole::DX).then(|| disc(NetRole::DX)).transpose()?,
            r: has(NetRole::R)
                .then(|| -> Result<_> {
                    Ok(Trainable::new(build_registration(specs.registration, &mut rng(NetRole::R))?, adam))
                })
                .transpose()?,
        })
    }

    pub fn roles(&self) -> Vec<NetRole> {
        self.entries().into_iter().map(|(r, _, _)| r).collect()
    }

    pub fn entries(&self) -> Vec<(NetRole, &ParamSet<f32>, &Adam<f32>)> {
        let mut v = vec![(NetRole::G, self.g.net.params(), &self.g.adam), (NetRole::DY, self.d_y.net.params(), &self.d_y.adam)];
        if let Some(t) = &self.f {
            v.push((NetRole::F, t.net.params(), &t.adam));
        }
        if let Some(t) = &self.d_x {
            v.push((NetRole::DX, t.net.params(), &t.adam));
        }
        if let Some(t) = &self.r {
            v.push((NetRole::R, t.net.params(), &t.adam));
        }
        v
    }

    pub fn entries_mut(&mut self) -> Vec<(NetRole, &mut ParamSet<f32>, &mut Adam<f32>)> {
        let mut v = vec![
            (NetRole::G, self.g.net.params_mut(), &mut self.g.adam),
            (NetRole::DY, self.d_y.net.params_mut(), &mut self.d_y.adam),
        ];
        if let Some(t) = &mut self.f {
            v.push((NetRole::F, t.net.params_mut(), &mut t.adam));
        }
        if let Some(t) = &mut self.d_x {
            v.push((NetRole::DX, t.net.params_mut(), &mut t.adam));
        }
        if let Some(t) = &mut self.r {
            v.push((NetRole::R, t.net.params_mut(), &mut t.adam));
        }
        v
    }

    pub fn parameter_counts(&self) -> BTreeMap<String, usize> {
        self.entries().into_iter().map(|(r, p, _)| (r.as_str().to_string(), p.count())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.entries().iter().map(|(_, p, _)| p.count()).sum()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        self.g.net.check_input(h, w)?;
        self.d_y.net.output_shape(h, w)?;
        if let Some(r) = &self.r {
            r.net.check_input(h, w)?;
        }
        Ok(())
    }
}

/// Per-epoch means of the step losses and test metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub step: u64,
    pub train: LossTerms,
    pub train_disc: Option<f64>,
    pub train_total: f64,
    pub test_nmae: f64,
    pub test_psnr: f64,
    pub test_ssim: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,step,train_adv,train_l1,train_cyc,train_corr,train_smooth,train_disc,train_total,test_nmae,test_psnr,test_ssim";

    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let t = &self.train;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            cell(t.adv),
            cell(t.l1),
            cell(t.cyc),
            cell(t.corr),
            cell(t.smooth),
            cell(self.train_disc),
            self.train_total,
            self.test_nmae,
            self.test_psnr,
            self.test_ssim
        )
    }
}

pub fn curves_csv(curves: &[EpochRecord]) -> String {
    let mut s = String::from(EpochRecord::CSV_HEADER);
    s.push('\n');
    for r in curves {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Parses `curves.csv` back into records.
pub fn parse_curves_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let bad = |line: usize, why: &str| Error::Report(format!("curves.csv line {line}: {why}"));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(EpochRecord::CSV_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let n = i + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 12 {
            return Err(bad(n, "expected 12 columns"));
        }
        let opt = |c: &str| -> Result<Option<f64>> {
            if c.is_empty() {
                Ok(None)
            } else {
                c.parse().map(Some).map_err(|_| bad(n, "bad number"))
            }
        };
        let req = |c: &str| -> Result<f64> { c.parse().map_err(|_| bad(n, "bad number")) };
        out.push(EpochRecord {
            epoch: cells[0].parse().map_err(|_| bad(n, "bad epoch"))?,
            step: cells[1].parse().map_err(|_| bad(n, "bad step"))?,
            train: LossTerms {
                adv: opt(cells[2])?,
                l1: opt(cells[3])?,
                cyc: opt(cells[4])?,
                corr: opt(cells[5])?,
                smooth: opt(cells[6])?,
            },
            train_disc: opt(cells[7])?,
            train_total: req(cells[8])?,
            test_nmae: req(cells[9])?,
            test_psnr: req(cells[10])?,
            test_ssim: req(cells[11])?,
        });
    }
    Ok(out)
}

/// Complete training state; checkpoints serialize all of it.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub mode: ModeConfig,
    pub specs: NetSpecs,
    pub optimizer: OptimizerConfig,
    pub nets: ModeNetworks,
    pub step: u64,
    /// Completed epochs.
    pub epoch: u32,
    pub rng: ChaCha8Rng,
    pub curves: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(mode: ModeConfig, specs: NetSpecs, optimizer: OptimizerConfig, seed: u64) -> Result<Self> {
        mode.weights.validate()?;
        optimizer.validate()?;
        let nets = ModeNetworks::build(mode.kind, &specs, optimizer.adam(), seed)?;
        Ok(Self {
            mode,
            specs,
            optimizer,
            nets,
            step: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_STREAM, 0)),
            curves: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
// Step
// ---------------------------------------------------------------------------

fn non_finite(state: &TrainState, batch: &SamplePair, report: &LossReport, term: &str, value: f64) -> Error {
    Error::NonFiniteLoss {
        term: term.to_string(),
        step: state.step,
        detail: format!(
            "value {value} (mode {}, pair {}); terms {:?}, disc {:?}",
            state.mode.kind, batch.pair_id, report.terms, report.disc
        ),
    }
}

fn bind_opt<N: Network<f32>>(t: &Option<Trainable<N>>, g: &mut Graph<f32>, trainable: bool) -> Option<Bound> {
    t.as_ref().map(|t| t.net.params().bind(g, trainable))
}

/// One alternating update: the discriminator(s) on detached fakes, then a joint step of
/// every generator-side network on the weighted total.
pub fn train_step(state: &mut TrainState, batch: &SamplePair) -> Result<LossReport> {
    let (h, w) = batch.shape();
    state.nets.check_input(h, w)?;
    let ModeConfig { kind, weights, gan_loss } = state.mode;
    let active = kind.terms();

    let mut g = Graph::<f32>::new();
    let gp = state.nets.g.net.params().bind(&mut g, true);
    let fp = bind_opt(&state.nets.f, &mut g, true);
    let rp = bind_opt(&state.nets.r, &mut g, true);
    let x = g.constant(batch.source.to_tensor());
    let y = g.constant(batch.target.to_tensor());
    let fake_y = state.nets.g.net.forward(&mut g, &gp, x);
    let fake_x = match (&state.nets.f, &fp) {
        (Some(f), Some(p)) => Some(f.net.forward(&mut g, p, y)),
        _ => None,
    };

    let disc = discriminator_step(state, batch, &g, fake_y, fake_x, x, y)?;

    let nets = &state.nets;
    let mut terms = TermVars::default();
    let dyp = nets.d_y.net.params().bind(&mut g, false);
    let s = nets.d_y.net.forward(&mut g, &dyp, fake_y);
    let mut adv = losses::adversarial_gen_var(&mut g, s, gan_loss);
    if let (Some(dx), Some(fx)) = (&nets.d_x, fake_x) {
        let dxp = dx.net.params().bind(&mut g, false);
        let s = dx.net.forward(&mut g, &dxp, fx);
        let a = losses::adversarial_gen_var(&mut g, s, gan_loss);
        adv = g.add(adv, a);
    }
    terms.adv = Some(adv);
    if active.l1 {
        terms.l1 = Some(losses::l1_var(&mut g, fake_y, y));
    }
    if let (Some(f), Some(fp), Some(fx)) = (&nets.f, &fp, fake_x) {
        let rec_x = f.net.forward(&mut g, fp, fake_y);
        let rec_y = nets.g.net.forward(&mut g, &gp, fx);
        let a = losses::l1_var(&mut g, rec_x, x);
        let b = losses::l1_var(&mut g, rec_y, y);
        terms.cyc = Some(g.add(a, b));
    }
    if let (Some(r), Some(rp)) = (&nets.r, &rp) {
        let field = r.net.forward(&mut g, rp, fake_y, y);
        terms.corr = Some(losses::correction_var(&mut g, fake_y, y, field));
        terms.smooth = Some(losses::smoothness_var(&mut g, field));
    }
    let total = terms.total(&mut g, &weights).expect("adversarial term is always active");
    let report = LossReport { terms: terms.read(&g), disc: Some(disc), total: g.value(total).item() as f64 };
    if let Some((term, v)) = first_non_finite(&report) {
        return Err(non_finite(state, batch, &report, term, v));
    }

    let mut grads = g.backward(total);
    state.nets.g.apply(&gp, &mut grads);
    if let (Some(f), Some(p)) = (&mut state.nets.f, &fp) {
        f.apply(p, &mut grads);
    }
    if let (Some(r), Some(p)) = (&mut state.nets.r, &rp) {
        r.apply(p, &mut grads);
    }
    state.step += 1;
    Ok(report)
}

fn discriminator_step(
    state: &mut TrainState,
    batch: &SamplePair,
    gen_graph: &Graph<f32>,
    fake_y: Var,
    fake_x: Option<Var>,
    x: Var,
    y: Var,
) -> Result<f64> {
    let kind = state.mode.gan_loss;
    let mut g = Graph::<f32>::new();
    let yp = state.nets.d_y.net.params().bind(&mut g, true);
    let real = g.constant(gen_graph.value(y).clone());
    let fake = g.constant(gen_graph.value(fake_y).clone());
    let sr = state.nets.d_y.net.forward(&mut g, &yp, real);
    let sf = state.nets.d_y.net.forward(&mut g, &yp, fake);
    let mut loss = losses::adversarial_disc_var(&mut g, sr, sf, kind);
    let xp = bind_opt(&state.nets.d_x, &mut g, true);
    if let (Some(dx), Some(p), Some(fx)) = (&state.nets.d_x, &xp, fake_x) {
        let real = g.constant(gen_graph.value(x).clone());
        let fake = g.constant(gen_graph.value(fx).clone());
        let sr = dx.net.forward(&mut g, p, real);
        let sf = dx.net.forward(&mut g, p, fake);
        let l = losses::adversarial_disc_var(&mut g, sr, sf, kind);
        loss = g.add(loss, l);
    }
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        let report = LossReport { disc: Some(value), ..Default::default() };
        return Err(non_finite(state, batch, &report, "disc", value));
    }
    let mut grads = g.backward(loss);
    state.nets.d_y.apply(&yp, &mut grads);
    if let (Some(dx), Some(p)) = (&mut state.nets.d_x, &xp) {
        dx.apply(p, &mut grads);
    }
    Ok(value)
}

/// Translates every test source and scores it against the clean reference. `R` plays no part.
pub fn evaluate(gen: &Generator<f32>, test: &DatasetSplit, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let mut ids = Vec::with_capacity(test.len());
    let mut rows = Vec::with_capacity(test.len());
    for p in test.pairs() {
        let pred = gen.translate(&p.source)?;
        rows.push(evaluate_pair(&pred, p.reference(), cfg)?);
        ids.push(p.pair_id.clone());
    }
    MetricsReport::from_pairs(ids, &rows)
}

#[derive(Default)]
struct EpochAccumulator {
    n: usize,
    sums: [f64; 7],
    present: [bool; 6],
}

impl EpochAccumulator {
    fn add(&mut self, r: &LossReport) {
        let t = &r.terms;
        for (i, v) in [t.adv, t.l1, t.cyc, t.corr, t.smooth, r.disc].into_iter().enumerate() {
            if let Some(v) = v {
                self.sums[i] += v;
                self.present[i] = true;
            }
        }
        self.sums[6] += r.total;
        self.n += 1;
    }

    fn finish(&self) -> (LossTerms, Option<f64>, f64) {
        let n = self.n.max(1) as f64;
        let m = |i: usize| self.present[i].then(|| self.sums[i] / n);
        (LossTerms { adv: m(0), l1: m(1), cyc: m(2), corr: m(3), smooth: m(4) }, m(5), self.sums[6] / n)
    }
}

/// Runs one epoch in the order drawn from the state's generator.
pub fn train_epoch(state: &mut TrainState, train: &DatasetSplit, mut log: impl FnMut(u64, &LossReport)) -> Result<(LossTerms, Option<f64>, f64)> {
    let order = noise::epoch_order(train.len(), &mut state.rng);
    let mut acc = EpochAccumulator::default();
    for i in order {
        let report = train_step(state, &train.pairs()[i])?;
        log(state.step, &report);
        acc.add(&report);
    }
    state.epoch += 1;
    Ok(acc.finish())
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

/// Identifies a test split by content.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSetId {
    pub n_pairs: usize,
    pub sha256: String,
}

pub fn test_set_id(test: &DatasetSplit) -> TestSetId {
    let mut h = Sha256::new();
    for p in test.pairs() {
        h.update(p.pair_id.as_bytes());
        h.update([0]);
        for img in [&p.source, p.reference()] {
            for v in img.data() {
                h.update((*v as f32).to_le_bytes());
            }
        }
    }
    let sha256 = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    TestSetId { n_pairs: test.len(), sha256 }
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub mode: ModeKind,
    pub noise: NoiseSetting,
    pub seed: u64,
    pub noise_seed: u64,
    pub epochs: u32,
    pub steps: u64,
    pub parameter_counts: BTreeMap<String, usize>,
    pub test_set: TestSetId,
    pub metrics: MetricsReport,
    /// Epoch-mean smoothness loss of the last epoch (registration modes only).
    pub final_train_smoothness: Option<f64>,
    /// Test pairs whose predictions were saved under `samples/`.
    pub samples: Vec<String>,
    pub elapsed_seconds: f64,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: RunReport =
            serde_json::from_str(&text).map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
        if r.format_version != REPORT_VERSION {
            return Err(Error::Report(format!("{}: report version {} unsupported", path.display(), r.format_version)));
        }
        Ok(r)
    }
}

/// Result of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub report: RunReport,
    pub curves: Vec<EpochRecord>,
}

pub const CONFIG_ECHO: &str = "config.toml";
pub const CURVES_FILE: &str = "curves.csv";
pub const REPORT_FILE: &str = "report.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CORRUPTION_LOG: &str = "corruption.json";
pub const SAMPLES_DIR: &str = "samples";

pub fn checkpoint_name(epoch: u32) -> String {
    format!("ckpt_epoch{epoch:03}.bin")
}

/// Corruption log of one epoch when noise is redrawn.
pub fn epoch_corruption_name(epoch: u32) -> String {
    format!("corruption_epoch{epoch:03}.json")
}

/// Geometric noise for `epoch` (1-based) under `redraw_noise`; aligned and unpaired splits are returned as given.
pub fn redraw_training_split(
    clean: &DatasetSplit,
    frozen: &DatasetSplit,
    setting: NoiseSetting,
    noise_seed: u64,
    epoch: u32,
) -> Result<(DatasetSplit, Vec<noise::CorruptionRecord>)> {
    let (h, _) = clean.shape();
    match setting.pairing_mode(h) {
        PairingMode::Aligned | PairingMode::Unpaired => Ok((frozen.clone(), Vec::new())),
        mode => noise::corrupt_split(clean, &mode, derive_seed(noise_seed, REDRAW_STREAM, u64::from(epoch))),
    }
}

fn truncate(split: DatasetSplit, max: Option<usize>) -> Result<DatasetSplit> {
    match max {
        Some(m) if m < split.len() => DatasetSplit::new(split.into_pairs().into_iter().take(m).collect()),
        _ => Ok(split),
    }
}

/// Training split as seen by the model: corrupted once, then frozen for the run.
pub fn prepare_training_split(
    clean: &DatasetSplit,
    setting: NoiseSetting,
    noise_seed: u64,
) -> Result<(DatasetSplit, Vec<noise::CorruptionRecord>)> {
    let (h, _) = clean.shape();
    match setting.pairing_mode(h) {
        PairingMode::Unpaired => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, UNPAIRED_STREAM, 0));
            Ok((noise::make_unpaired(clean, &mut rng)?, Vec::new()))
        }
        PairingMode::Aligned => Ok((clean.clone(), Vec::new())),
        mode => noise::corrupt_split(clean, &mode, noise_seed),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains the configured mode, evaluating on the clean test split after every epoch.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    run_experiment_with(config, |_, _| {})
}

/// As [`run_experiment`], calling `progress` after each epoch.
pub fn run_experiment_with(config: &ExperimentConfig, mut progress: impl FnMut(&TrainState, &EpochRecord)) -> Result<RunOutcome> {
    let started = Instant::now();
    config.validate()?;
    let train_clean = truncate(dataset::load_split(&config.dataset, TRAIN_SPLIT)?, config.max_train_pairs)?;
    let test = truncate(dataset::load_split(&config.dataset, TEST_SPLIT)?, config.max_test_pairs)?;
    if train_clean.shape() != test.shape() {
        return Err(Error::Dataset(format!("train images {:?} vs test images {:?}", train_clean.shape(), test.shape())));
    }
    let noise_seed = config.effective_noise_seed();
    let (train, corruption) = prepare_training_split(&train_clean, config.noise, noise_seed)?;

    let mut state = match &config.resume {
        Some(path) => {
            let s = crate::checkpoint::load(path)?;
            if s.mode != config.mode_config() || s.specs != config.nets || s.optimizer.adam() != config.optimizer.adam() {
                return Err(Error::Config(format!("checkpoint {} was written by a different configuration", path.display())));
            }
            s
        }
        None => TrainState::new(config.mode_config(), config.nets, config.optimizer, config.seed)?,
    };
    let (h, w) = train.shape();
    state.nets.check_input(h, w)?;

    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut echo = config.clone();
    echo.noise_seed = Some(noise_seed);
    write_file(&dir.join(CONFIG_ECHO), echo.to_toml_string()?)?;
    write_file(&dir.join(CORRUPTION_LOG), serde_json::to_string_pretty(&corruption)?)?;
    let log_path = dir.join(TRAIN_LOG);
    let mut log = if config.resume.is_some() && log_path.exists() {
        fs::OpenOptions::new().append(true).open(&log_path)
    } else {
        fs::File::create(&log_path).and_then(|mut f| writeln!(f, "step,{}", LossReport::CSV_HEADER).map(|_| f))
    }
    .map(std::io::BufWriter::new)
    .map_err(|e| Error::io(&log_path, e))?;

    let epochs = config.optimizer.epochs;
    let mut last_metrics = None;
    while state.epoch < epochs {
        let redrawn;
        let epoch_train = if config.redraw_noise {
            let (split, records) = redraw_training_split(&train_clean, &train, config.noise, noise_seed, state.epoch + 1)?;
            if !records.is_empty() {
                write_file(&dir.join(epoch_corruption_name(state.epoch + 1)), serde_json::to_string_pretty(&records)?)?;
            }
            redrawn = split;
            &redrawn
        } else {
            &train
        };
        let mut io_err = None;
        let (terms, disc, total) = train_epoch(&mut state, epoch_train, |step, r| {
            if io_err.is_none() {
                io_err = writeln!(log, "{step},{}", r.csv_row()).err();
            }
        })?;
        if let Some(e) = io_err {
            return Err(Error::io(&log_path, e));
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let metrics = evaluate(&state.nets.g.net, &test, &config.metrics)?;
        let record = EpochRecord {
            epoch: state.epoch,
            step: state.step,
            train: terms,
            train_disc: disc,
            train_total: total,
            test_nmae: metrics.nmae.mean,
            test_psnr: metrics.psnr.mean,
            test_ssim: metrics.ssim.mean,
        };
        state.curves.push(record.clone());
        write_file(&dir.join(CURVES_FILE), curves_csv(&state.curves))?;
        let periodic = config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0;
        if periodic || state.epoch == epochs {
            crate::checkpoint::save(&state, &dir.join(checkpoint_name(state.epoch)))?;
        }
        progress(&state, &record);
        last_metrics = Some(metrics);
    }
    let metrics = match last_metrics {
        Some(m) => m,
        None => evaluate(&state.nets.g.net, &test, &config.metrics)?,
    };
    write_file(&dir.join(CURVES_FILE), curves_csv(&state.curves))?;

    let samples_dir = dir.join(SAMPLES_DIR);
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let mut samples = Vec::new();
    for p in test.pairs().iter().take(config.n_samples) {
        let pred = state.nets.g.net.translate(&p.source)?;
        for (suffix, img) in [("source", &p.source), ("pred", &pred), ("reference", p.reference())] {
            rawfile::write_image(&samples_dir.join(format!("{}_{suffix}.{}", p.pair_id, rawfile::EXTENSION)), img)?;
        }
        samples.push(p.pair_id.clone());
    }

    let report = RunReport {
        format_version: REPORT_VERSION,
        mode: config.mode,
        noise: config.noise,
        seed: config.seed,
        noise_seed,
        epochs: state.epoch,
        steps: state.step,
        parameter_counts: state.nets.parameter_counts(),
        test_set: test_set_id(&test),
        metrics,
        final_train_smoothness: state.curves.last().and_then(|c| c.train.smooth),
        samples,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    write_file(&dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(RunOutcome { run_dir: dir.clone(), report, curves: state.curves })
}
