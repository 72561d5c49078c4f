use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{mix_slices, mixup_rng, sample_mixup_coeff, MixupConfig};
use crate::dataio::{
    crop_grid, read_volume, truncate_normalize, write_volume, Kind, PairedCase, Phase, Volume, VolumeHeader,
};
use crate::error::{Error, Result};
use crate::hyperpair::{build_dual, build_topology, BranchTaps, DualNet};
use crate::losses::{record_objective, total_loss, LossBreakdown, DEFAULT_PAIR_WEIGHT};
use crate::netblocks::{build_single_path, PathConfig, PathNet};
use crate::tensor::{grad_eval, softmax_channels, Gradients, ParamStore, Sgd, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    SingleA,
    SingleB,
    Hyper,
    /// Hyper plus virtual-pair training and union ensemble, no pairing loss.
    HyperAug,
    /// Hyper plus pairing loss, virtual-pair training and union ensemble.
    Hpn,
}

impl Mode {
    pub const LADDER: [Mode; 5] = [Mode::SingleA, Mode::SingleB, Mode::Hyper, Mode::HyperAug, Mode::Hpn];

    pub fn is_dual(self) -> bool {
        matches!(self, Mode::Hyper | Mode::HyperAug | Mode::Hpn)
    }

    pub fn uses_pairing(self) -> bool {
        self == Mode::Hpn
    }

    /// Whether a second member is trained on virtual pairs.
    pub fn uses_virtual_member(self) -> bool {
        matches!(self, Mode::HyperAug | Mode::Hpn)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::SingleA => "single-a",
            Mode::SingleB => "single-b",
            Mode::Hyper => "hyper",
            Mode::HyperAug => "hyper-aug",
            Mode::Hpn => "hpn",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::LADDER
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub path: PathConfig,
    /// Edge of the cubic training crop.
    pub patch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    /// Crops per optimizer step; gradients are averaged.
    pub batch_size: usize,
    pub pair_weight: f64,
    pub mixup: MixupConfig,
    pub seed: u64,
    /// Probability that a crop is centered on a foreground voxel.
    pub foreground_crop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hpn,
            path: PathConfig::default(),
            patch: 32,
            lr: 0.01,
            momentum: 0.9,
            iterations: 1000,
            batch_size: 1,
            pair_weight: DEFAULT_PAIR_WEIGHT,
            mixup: MixupConfig::default(),
            seed: 0,
            foreground_crop: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.path.validate()?;
        if self.patch == 0 || self.patch % self.path.extent_divisor() != 0 {
            return Err(Error::config(format!(
                "patch {} must be a positive multiple of {}",
                self.patch,
                self.path.extent_divisor()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.foreground_crop) {
            return Err(Error::config("foreground crop probability must lie in [0, 1]"));
        }
        if !(self.pair_weight >= 0.0) {
            return Err(Error::config("pair weight must be >= 0"));
        }
        self.mixup.validate()?;
        Sgd::<f32>::new(self.lr, self.momentum).map(|_| ())
    }
}

/// Normalized phases and labels of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCase {
    pub case_id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub a: Vec<f32>,
    pub b: Vec<f32>,
    pub labels: Vec<u8>,
    foreground: Vec<usize>,
}

impl PreparedCase {
    pub fn new(case: &PairedCase) -> Result<Self> {
        let a = truncate_normalize(&case.arterial)?.voxels;
        let b = truncate_normalize(&case.venous)?.voxels;
        let labels = case.labels.labels.clone();
        let foreground = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 0)
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            case_id: case.case_id.clone(),
            dims: case.dims(),
            spacing: case.labels.header.spacing,
            a,
            b,
            labels,
            foreground,
        })
    }
}

pub fn prepare_all(cases: &[PairedCase]) -> Result<Vec<PreparedCase>> {
    cases.iter().map(PreparedCase::new).collect()
}

/// One trained network.
#[derive(Clone, Debug)]
pub enum Network {
    Single { phase: Phase, net: PathNet<f32> },
    Dual(DualNet<f32>),
}

impl Network {
    pub fn build(mode: Mode, cfg: PathConfig, seed: u64) -> Result<Self> {
        Ok(match mode {
            Mode::SingleA => Network::Single {
                phase: Phase::Arterial,
                net: build_single_path(cfg, seed)?,
            },
            Mode::SingleB => Network::Single {
                phase: Phase::Venous,
                net: build_single_path(cfg, seed)?,
            },
            _ => Network::Dual(build_dual(cfg, build_topology(cfg.depth)?, seed)?),
        })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        match self {
            Network::Single { net, .. } => &net.store,
            Network::Dual(net) => &net.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        match self {
            Network::Single { net, .. } => &mut net.store,
            Network::Dual(net) => &mut net.store,
        }
    }

    pub fn config(&self) -> PathConfig {
        match self {
            Network::Single { net, .. } => net.cfg,
            Network::Dual(net) => net.cfg,
        }
    }

    fn record(&self, tape: &mut Tape<f32>, xa: Tensor<f32>, xb: Tensor<f32>) -> Result<(Var, Option<BranchTaps>)> {
        match self {
            Network::Single { phase, net } => {
                let x = tape.input(if *phase == Phase::Venous { xb } else { xa });
                Ok((net.forward(tape, x)?.0, None))
            }
            Network::Dual(net) => {
                let a = tape.input(xa);
                let b = tape.input(xb);
                let f = net.forward(tape, a, b)?;
                Ok((f.logits, Some(f.taps)))
            }
        }
    }

    /// Softmax probabilities `[C, X, Y, Z]` for aligned inputs `[1, X, Y, Z]`.
    pub fn probabilities(&self, xa: &Tensor<f32>, xb: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let (logits, _) = self.record(&mut tape, xa.clone(), xb.clone())?;
        softmax_channels(tape.value(logits))
    }
}

/// Networks of one method; hpn and hyper-aug hold `[original, virtual]`.
#[derive(Clone, Debug)]
pub struct Model {
    pub mode: Mode,
    pub patch: usize,
    pub members: Vec<Network>,
}

impl Model {
    pub fn config(&self) -> PathConfig {
        self.members[0].config()
    }

    /// All parameters, member by member, in build order.
    pub fn flat_params(&self) -> Vec<f32> {
        self.members.iter().flat_map(|m| m.store().flatten()).collect()
    }
}

struct Member {
    net: Network,
    opt: Sgd<f32>,
    virtual_pairs: bool,
    rng: ChaCha8Rng,
    mix_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    lambdas: Vec<f64>,
    log: Vec<LossBreakdown>,
}

/// Incremental trainer; `run` may be called repeatedly.
pub struct Trainer {
    cfg: TrainConfig,
    cases: Arc<[PreparedCase]>,
    members: Vec<Member>,
    done: usize,
}

const VIRTUAL_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

impl Trainer {
    pub fn new(cfg: TrainConfig, cases: impl Into<Arc<[PreparedCase]>>) -> Result<Self> {
        cfg.validate()?;
        let cases: Arc<[PreparedCase]> = cases.into();
        if cases.is_empty() {
            return Err(Error::config("empty training set"));
        }
        for c in cases.iter() {
            if c.dims.iter().any(|&d| d < cfg.patch) {
                return Err(Error::config(format!(
                    "case {} with dims {:?} is smaller than patch {}",
                    c.case_id, c.dims, cfg.patch
                )));
            }
        }
        let count = if cfg.mode.uses_virtual_member() { 2 } else { 1 };
        let mut members = Vec::with_capacity(count);
        for k in 0..count {
            let init_seed = if k == 0 { cfg.seed } else { cfg.seed ^ VIRTUAL_SEED_MIX };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(2 + k as u64);
            let m = Member {
                net: Network::build(cfg.mode, cfg.path, init_seed)?,
                opt: Sgd::new(cfg.lr, cfg.momentum)?,
                virtual_pairs: k == 1 && cfg.mixup.enabled,
                rng,
                mix_rng: mixup_rng(cfg.seed, k as u64),
                order: Vec::new(),
                cursor: 0,
                lambdas: vec![1.0; cases.len()],
                log: Vec::new(),
            };
            members.push(m);
        }
        Ok(Self {
            cfg,
            cases,
            members,
            done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iterations_done(&self) -> usize {
        self.done
    }

    /// Advances every member by `iters` optimizer steps.
    pub fn run(&mut self, iters: usize) -> Result<()> {
        for m in &mut self.members {
            for _ in 0..iters {
                let entry = step(&self.cfg, &self.cases, m)?;
                m.log.push(entry);
            }
        }
        self.done += iters;
        Ok(())
    }

    /// Loss log per member.
    pub fn logs(&self) -> Vec<&[LossBreakdown]> {
        self.members.iter().map(|m| m.log.as_slice()).collect()
    }

    pub fn model(&self) -> Model {
        Model {
            mode: self.cfg.mode,
            patch: self.cfg.patch,
            members: self.members.iter().map(|m| m.net.clone()).collect(),
        }
    }
}

fn next_case(cfg: &TrainConfig, cases: &[PreparedCase], m: &mut Member) -> Result<usize> {
    if m.cursor >= m.order.len() {
        m.order = (0..cases.len()).collect();
        m.order.shuffle(&mut m.rng);
        m.cursor = 0;
        if m.virtual_pairs {
            for l in m.lambdas.iter_mut() {
                *l = sample_mixup_coeff(&cfg.mixup, &mut m.mix_rng)?;
            }
        }
    }
    m.cursor += 1;
    Ok(m.order[m.cursor - 1])
}

fn crop_corner(cfg: &TrainConfig, c: &PreparedCase, rng: &mut ChaCha8Rng) -> [usize; 3] {
    let p = cfg.patch;
    let mut corner = [0; 3];
    let centered = !c.foreground.is_empty() && rng.random::<f64>() < cfg.foreground_crop;
    let center = if centered {
        let i = c.foreground[rng.random_range(0..c.foreground.len())];
        Some([i % c.dims[0], (i / c.dims[0]) % c.dims[1], i / (c.dims[0] * c.dims[1])])
    } else {
        None
    };
    for a in 0..3 {
        let span = c.dims[a] - p;
        if span == 0 {
            continue;
        }
        corner[a] = match center {
            Some(q) => q[a].saturating_sub(p / 2).min(span),
            None => rng.random_range(0..=span),
        };
    }
    corner
}

fn accumulate(sum: &mut Option<Gradients<f32>>, g: Gradients<f32>) -> Result<()> {
    match sum {
        None => *sum = Some(g),
        Some(s) => {
            for (id, t) in g.iter() {
                let mut cur = s.get(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
                cur.add_assign(t)?;
                s.insert(id, cur);
            }
        }
    }
    Ok(())
}

fn step(cfg: &TrainConfig, cases: &[PreparedCase], m: &mut Member) -> Result<LossBreakdown> {
    let p = cfg.patch;
    let mut grads = None;
    let (mut ce_sum, mut corr_sum) = (0.0, 0.0);
    for _ in 0..cfg.batch_size {
        let ci = next_case(cfg, cases, m)?;
        let c = &cases[ci];
        let corner = crop_corner(cfg, c, &mut m.rng);
        let size = [p; 3];
        let mut xa = crop_grid(&c.a, c.dims, corner, size)?;
        let mut xb = crop_grid(&c.b, c.dims, corner, size)?;
        if m.virtual_pairs {
            (xa, xb) = mix_slices(&xa, &xb, m.lambdas[ci])?;
        }
        let labels: Arc<[u8]> = crop_grid(&c.labels, c.dims, corner, size)?.into();
        let shape = vec![1, p, p, p];
        let mut tape = Tape::new();
        let (logits, taps) = m.net.record(&mut tape, Tensor::new(shape.clone(), xa)?, Tensor::new(shape, xb)?)?;
        let weight = if cfg.mode.uses_pairing() { cfg.pair_weight } else { 0.0 };
        let obj = record_objective(&mut tape, logits, taps, labels, weight)?;
        ce_sum += tape.value(obj.ce).item() as f64;
        corr_sum += obj.corr.map_or(0.0, |c| tape.value(c).item() as f64);
        accumulate(&mut grads, grad_eval(&tape, obj.total)?)?;
    }
    let mut grads = grads.expect("batch size >= 1");
    let n = cfg.batch_size as f32;
    if cfg.batch_size > 1 {
        let ids: Vec<_> = grads.iter().map(|(id, _)| id).collect();
        for id in ids {
            let scaled = grads.get(id).expect("present").map(|v| v / n);
            grads.insert(id, scaled);
        }
    }
    m.opt.step(m.net.store_mut(), &grads)?;
    let weight = if cfg.mode.uses_pairing() { cfg.pair_weight } else { 0.0 };
    total_loss(ce_sum / n as f64, corr_sum / n as f64, Some(weight))
}

/// Trains one model from scratch.
pub fn train(cfg: &TrainConfig, cases: &[PreparedCase]) -> Result<(Model, Vec<Vec<LossBreakdown>>)> {
    let mut t = Trainer::new(cfg.clone(), cases.to_vec())?;
    t.run(cfg.iterations)?;
    let logs = t.logs().into_iter().map(|l| l.to_vec()).collect();
    Ok((t.model(), logs))
}

/// Trailing mean over the last `window` entries, per iteration.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window.max(1));
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

pub fn log_text(log: &[LossBreakdown]) -> String {
    let mut s = String::from("iter,ce,corr,total\n");
    for (i, e) in log.iter().enumerate() {
        s.push_str(&e.log_line(i + 1));
        s.push('\n');
    }
    s
}

pub const MODEL_CFG: &str = "model.cfg";

fn member_file(k: usize) -> String {
    format!("member{k}.mpv")
}

/// Writes `model.cfg` and one checkpoint MPV per member into `dir`.
pub fn save_model(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = model.config();
    let text = format!(
        "mode: {}\ndepth: {}\nbase: {}\nkernel: {}\nclasses: {}\npatch: {}\nmembers: {}\n",
        model.mode,
        c.depth,
        c.base_channels,
        c.kernel,
        c.classes,
        model.patch,
        model.members.len()
    );
    let path = dir.join(MODEL_CFG);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    for (k, m) in model.members.iter().enumerate() {
        let flat = m.store().flatten();
        let header = VolumeHeader {
            kind: Kind::Checkpoint,
            ..VolumeHeader::image([flat.len(), 1, 1], [1.0; 3], Phase::None)
        };
        write_volume(&Volume::new(header, flat)?.into(), dir.join(member_file(k)))?;
    }
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let path = dir.join(MODEL_CFG);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let get = |key: &str| -> Result<String> {
        text.lines()
            .find_map(|line| line.strip_prefix(key).and_then(|r| r.strip_prefix(": ")))
            .map(str::to_string)
            .ok_or_else(|| Error::format(0, format!("{MODEL_CFG}: missing key {key:?}")))
    };
    let num = |v: String| -> Result<usize> {
        v.parse()
            .map_err(|_| Error::format(0, format!("{MODEL_CFG}: bad number {v:?}")))
    };
    let mode: Mode = get("mode")?
        .parse()
        .map_err(|e: Error| Error::format(0, e.to_string()))?;
    let cfg = PathConfig {
        depth: num(get("depth")?)?,
        base_channels: num(get("base")?)?,
        kernel: num(get("kernel")?)?,
        classes: num(get("classes")?)?,
    };
    let patch = num(get("patch")?)?;
    let count = num(get("members")?)?;
    let mut members = Vec::with_capacity(count);
    for k in 0..count {
        let v = read_volume(dir.join(member_file(k)))?.into_volume()?;
        if v.header.kind != Kind::Checkpoint {
            return Err(Error::format(0, format!("{} is not a checkpoint", member_file(k))));
        }
        let mut net = Network::build(mode, cfg, 0).map_err(|e| Error::format(0, e.to_string()))?;
        net.store_mut()
            .load_flat(&v.voxels)
            .map_err(|e| Error::format(0, format!("{}: {e}", member_file(k))))?;
        members.push(net);
    }
    Ok(Model { mode, patch, members })
}
