//! One U-shaped encoder-decoder path.
//!
//! Level 1 runs at input resolution; every deeper encoder level is a
//! stride-2 3×3×3 convolution, and level `D` is the bottleneck. Each decoder
//! level upsamples the deeper map with a stride-2 transposed convolution,
//! concatenates the encoder map of the same level and applies conv + relu.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathConfig {
    /// Number of resolution levels, bottleneck included.
    pub depth: usize,
    /// Channels at level 1; level `d` has `base_channels · 2^(d−1)`.
    pub base_channels: usize,
    pub kernel: usize,
    /// Output classes including background.
    pub classes: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            kernel: 3,
            classes: 4,
        }
    }
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.classes < 2 {
            return Err(Error::config("need at least one channel and two classes"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel extent must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Required divisor of every input extent.
    pub fn extent_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Configuration-time check that a patch or volume fits the network.
    pub fn check_extent(&self, dims: [usize; 3]) -> Result<()> {
        let div = self.extent_divisor();
        if dims.iter().any(|&d| d == 0 || d % div != 0) {
            return Err(Error::config(format!(
                "extents {dims:?} not divisible by 2^(depth-1) = {div}"
            )));
        }
        Ok(())
    }

    pub(crate) fn check_input<T: Real>(&self, x: &Tensor<T>, channels: usize) -> Result<()> {
        x.require_4d("network input")?;
        if x.channels() != channels {
            return Err(Error::dim(format!(
                "network input needs {channels} channel(s), got {}",
                x.channels()
            )));
        }
        let div = self.extent_divisor();
        if x.spatial().iter().any(|&d| d % div != 0) {
            return Err(Error::dim(format!(
                "input extents {:?} not divisible by {div}",
                x.spatial()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Enc,
    Dec,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Enc => "enc",
            Side::Dec => "dec",
        })
    }
}

/// A feature-map position on one path: encoder level `d` or decoder level `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub side: Side,
    pub level: usize,
}

impl Slot {
    pub fn enc(level: usize) -> Self {
        Self {
            side: Side::Enc,
            level,
        }
    }

    pub fn dec(level: usize) -> Self {
        Self {
            side: Side::Dec,
            level,
        }
    }
}

/// Convolution + relu (or bare convolution for the head).
#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub activate: bool,
}

impl ConvBlock {
    pub(crate) fn apply<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.conv3d(x, w, b, self.stride, self.pad)?;
        if self.activate {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }
}

/// Stride-2 transposed convolution with kernel extent 2.
#[derive(Clone, Copy, Debug)]
pub struct UpBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl UpBlock {
    pub(crate) fn apply<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv3d_transposed(x, w, b, self.stride)
    }
}

/// Input channel count of every block of one path.
#[derive(Clone, Debug, Default)]
pub(crate) struct BlockWidths {
    /// Indexed by encoder level − 1.
    pub enc_in: Vec<usize>,
    /// Indexed by decoder level − 1; the upsampler producing that level.
    pub up_in: Vec<usize>,
    /// Indexed by decoder level − 1.
    pub dec_in: Vec<usize>,
}

impl BlockWidths {
    /// Plain U-shape: each decoder level sees its upsampled input and the encoder skip.
    pub fn single(cfg: &PathConfig, in_channels: usize) -> Self {
        let d_max = cfg.depth;
        Self {
            enc_in: (1..=d_max)
                .map(|d| if d == 1 { in_channels } else { cfg.channels(d - 1) })
                .collect(),
            up_in: (1..d_max).map(|d| cfg.channels(d + 1)).collect(),
            dec_in: (1..d_max).map(|d| 2 * cfg.channels(d)).collect(),
        }
    }
}

/// Encoder, upsampler and decoder blocks of one path.
#[derive(Clone, Debug)]
pub struct PathTrunk {
    /// `enc[d-1]` produces encoder level `d`.
    pub enc: Vec<ConvBlock>,
    /// `up[d-1]` upsamples into decoder level `d`.
    pub up: Vec<UpBlock>,
    /// `dec[d-1]` produces decoder level `d`.
    pub dec: Vec<ConvBlock>,
}

pub(crate) struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform weights, zero bias.
    fn uniform<T: Real>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.random_range(-limit..=limit)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("positive shape")
    }

    pub fn conv<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        activate: bool,
    ) -> ConvBlock {
        let k3 = k * k * k;
        let w = self.uniform(&[cout, cin, k, k, k], cin * k3, cout * k3);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        ConvBlock {
            weight,
            bias,
            stride,
            pad: k / 2,
            activate,
        }
    }

    pub fn up<T: Real>(&mut self, store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> UpBlock {
        let w = self.uniform(&[cin, cout, 2, 2, 2], cin * 8, cout * 8);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        UpBlock {
            weight,
            bias,
            stride: 2,
        }
    }
}

pub(crate) fn build_trunk<T: Real>(
    cfg: &PathConfig,
    prefix: &str,
    widths: &BlockWidths,
    store: &mut ParamStore<T>,
    init: &mut Initializer,
) -> PathTrunk {
    let d_max = cfg.depth;
    let k = cfg.kernel;
    let mut enc = Vec::with_capacity(d_max);
    for d in 1..=d_max {
        let stride = if d == 1 { 1 } else { 2 };
        enc.push(init.conv(
            store,
            &format!("{prefix}enc{d}"),
            widths.enc_in[d - 1],
            cfg.channels(d),
            k,
            stride,
            true,
        ));
    }
    let mut up = vec![None; d_max - 1];
    let mut dec = vec![None; d_max - 1];
    for d in (1..d_max).rev() {
        up[d - 1] = Some(init.up(
            store,
            &format!("{prefix}up{d}"),
            widths.up_in[d - 1],
            cfg.channels(d),
        ));
        dec[d - 1] = Some(init.conv(
            store,
            &format!("{prefix}dec{d}"),
            widths.dec_in[d - 1],
            cfg.channels(d),
            k,
            1,
            true,
        ));
    }
    PathTrunk {
        enc,
        up: up.into_iter().map(|b| b.expect("built")).collect(),
        dec: dec.into_iter().map(|b| b.expect("built")).collect(),
    }
}

/// Slot outputs `R₁..R_T` of one forward pass.
#[derive(Clone, Debug)]
pub struct SlotFeatures {
    /// Encoder levels `1..=D`.
    pub enc: Vec<Var>,
    /// Decoder levels `1..D`.
    pub dec: Vec<Var>,
}

impl SlotFeatures {
    pub fn get(&self, slot: Slot) -> Option<Var> {
        let list = match slot.side {
            Side::Enc => &self.enc,
            Side::Dec => &self.dec,
        };
        slot.level.checked_sub(1).and_then(|i| list.get(i)).copied()
    }
}

/// Single-phase network: one trunk plus a 1³ classification head.
#[derive(Clone, Debug)]
pub struct PathNet<T> {
    pub cfg: PathConfig,
    pub store: ParamStore<T>,
    pub trunk: PathTrunk,
    pub head: ConvBlock,
}

/// Builds a single path with deterministic initialization from `seed`.
pub fn build_single_path<T: Real>(cfg: PathConfig, seed: u64) -> Result<PathNet<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let trunk = build_trunk(&cfg, "", &BlockWidths::single(&cfg, 1), &mut store, &mut init);
    let head = init.conv(&mut store, "head", cfg.channels(1), cfg.classes, 1, 1, false);
    Ok(PathNet {
        cfg,
        store,
        trunk,
        head,
    })
}

impl<T: Real> PathNet<T> {
    /// Records one forward pass; returns logits and every slot feature map.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, SlotFeatures)> {
        self.cfg.check_input(tape.value(x), 1)?;
        let store = &self.store;
        let mut enc = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for block in &self.trunk.enc {
            h = block.apply(tape, store, h)?;
            enc.push(h);
        }
        let mut dec = vec![h; self.cfg.depth - 1];
        for d in (1..self.cfg.depth).rev() {
            let u = self.trunk.up[d - 1].apply(tape, store, h)?;
            let joined = tape.concat_channels(&[u, enc[d - 1]])?;
            h = self.trunk.dec[d - 1].apply(tape, store, joined)?;
            dec[d - 1] = h;
        }
        let logits = self.head.apply(tape, store, h)?;
        Ok((logits, SlotFeatures { enc, dec }))
    }

    /// Logits for one `[1, X, Y, Z]` input.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let (logits, _) = self.forward(&mut tape, xv)?;
        Ok(tape.value(logits).clone())
    }
}

/// Free-function form of [`PathNet::forward`] on a fresh tape.
pub fn forward_single<T: Real>(net: &PathNet<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let (logits, feats) = net.forward(&mut tape, xv)?;
    let enc = feats.enc.iter().map(|&v| tape.value(v).clone()).collect();
    let dec = feats.dec.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((tape.value(logits).clone(), enc, dec))
}
