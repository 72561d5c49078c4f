//! Dual-path network: two U-shaped paths (one per phase) joined by
//! hyper-connections, a shared 1³ classification head, and the branch taps
//! that feed the pairing loss.
//!
//! A topology edge `P:s -> Q:s'` appends the output of slot `s` on path `P`
//! to the input of the block that produces slot `s'` on path `Q`. When `s`
//! and `s'` are the same slot on the two paths, the edge is delivered to the
//! block that consumes `s` on path `Q` instead (the next stage), which keeps
//! the block graph acyclic while both directions still exchange features.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::netblocks::{build_trunk, BlockWidths, ConvBlock, Initializer, PathConfig, PathTrunk, Side, Slot};
use crate::tensor::conv::conv3d;
use crate::tensor::{concat_channels, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PathId {
    A,
    B,
}

impl PathId {
    pub fn other(self) -> Self {
        match self {
            PathId::A => PathId::B,
            PathId::B => PathId::A,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotRef {
    pub path: PathId,
    pub slot: Slot,
}

impl SlotRef {
    pub fn new(path: PathId, slot: Slot) -> Self {
        Self { path, slot }
    }
}

impl fmt::Display for SlotRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}:{}:{}", self.path, self.slot.side, self.slot.level)
    }
}

impl FromStr for SlotRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::config(format!("bad slot reference {s:?}, expected path:side:level"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let path = match parts[0] {
            "A" => PathId::A,
            "B" => PathId::B,
            _ => return Err(bad()),
        };
        let side = match parts[1] {
            "enc" => Side::Enc,
            "dec" => Side::Dec,
            _ => return Err(bad()),
        };
        let level: usize = parts[2].parse().map_err(|_| bad())?;
        Ok(SlotRef::new(path, Slot { side, level }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub from: SlotRef,
    pub to: SlotRef,
}

impl Edge {
    pub fn is_cross(&self) -> bool {
        self.from.path != self.to.path
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.from, self.to)
    }
}

/// Cross-path and intra-path connections between same-resolution slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HyperTopology {
    pub depth: usize,
    pub edges: Vec<Edge>,
}

/// The full arrow families for every mirrored level `d = 1..D−1`.
pub fn build_topology(depth: usize) -> Result<HyperTopology> {
    if depth < 2 {
        return Err(Error::config(format!("depth must be >= 2, got {depth}")));
    }
    let mut edges = Vec::with_capacity(8 * (depth - 1));
    let r = |p, s| SlotRef::new(p, s);
    for d in 1..depth {
        let (t, m) = (Slot::enc(d), Slot::dec(d));
        let (a, b) = (PathId::A, PathId::B);
        for (from, to) in [
            (r(a, t), r(b, t)),
            (r(b, t), r(a, t)),
            (r(a, t), r(b, m)),
            (r(b, t), r(a, m)),
            (r(a, m), r(b, m)),
            (r(b, m), r(a, m)),
            (r(a, t), r(a, m)),
            (r(b, t), r(b, m)),
        ] {
            edges.push(Edge { from, to });
        }
    }
    Ok(HyperTopology { depth, edges })
}

impl HyperTopology {
    pub fn cross_count(&self) -> usize {
        self.edges.iter().filter(|e| e.is_cross()).count()
    }

    pub fn intra_count(&self) -> usize {
        self.edges.len() - self.cross_count()
    }

    /// Same topology with every cross-path edge removed.
    pub fn without_cross(&self) -> Self {
        Self {
            depth: self.depth,
            edges: self.edges.iter().copied().filter(|e| !e.is_cross()).collect(),
        }
    }

    /// One edge per line, `A:enc:1 -> B:enc:1`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    /// Inverse of [`HyperTopology::dump`]; blank lines and `#` comments are skipped.
    pub fn parse(depth: usize, text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (l, r) = line
                .split_once("->")
                .ok_or_else(|| Error::config(format!("edge line without '->': {line:?}")))?;
            edges.push(Edge {
                from: l.parse()?,
                to: r.parse()?,
            });
        }
        let topo = Self { depth, edges };
        topo.validate()?;
        Ok(topo)
    }

    fn slot_exists(&self, s: Slot) -> bool {
        match s.side {
            Side::Enc => (1..=self.depth).contains(&s.level),
            Side::Dec => (1..self.depth).contains(&s.level),
        }
    }

    /// Every edge joins existing slots of equal resolution, and the realized
    /// block graph has a topological order.
    pub fn validate(&self) -> Result<()> {
        for e in &self.edges {
            if !self.slot_exists(e.from.slot) || !self.slot_exists(e.to.slot) {
                return Err(Error::config(format!("edge {e} references a missing slot")));
            }
            if e.from.slot.level != e.to.slot.level {
                return Err(Error::config(format!("edge {e} joins different resolutions")));
            }
            if e.from == e.to {
                return Err(Error::config(format!("edge {e} is a self loop")));
            }
        }
        self.schedule().map(|_| ())
    }

    /// Block that receives the producer's features for this edge.
    pub fn consumer_block(&self, e: &Edge) -> Block {
        if e.from.slot == e.to.slot {
            successor(self.depth, e.to.path, e.to.slot)
        } else {
            producer_block(e.to.path, e.to.slot)
        }
    }

    /// Ordered inputs of every block: own-path predecessor first, then
    /// own-path extra producers, then cross-path producers (each in edge order).
    pub fn block_inputs(&self) -> BTreeMap<Block, Vec<Source>> {
        let d_max = self.depth;
        let mut inputs: BTreeMap<Block, Vec<Source>> = BTreeMap::new();
        for p in [PathId::A, PathId::B] {
            for d in 1..=d_max {
                let own = if d == 1 {
                    Source::Input(p)
                } else {
                    Source::Block(Block::Enc(p, d - 1))
                };
                inputs.insert(Block::Enc(p, d), vec![own]);
            }
            for d in 1..d_max {
                let deeper = if d + 1 == d_max {
                    Block::Enc(p, d_max)
                } else {
                    Block::Dec(p, d + 1)
                };
                inputs.insert(Block::Up(p, d), vec![Source::Block(deeper)]);
                inputs.insert(Block::Dec(p, d), vec![Source::Block(Block::Up(p, d))]);
            }
        }
        inputs.insert(
            Block::Head,
            vec![
                Source::Block(Block::Dec(PathId::A, 1)),
                Source::Block(Block::Dec(PathId::B, 1)),
            ],
        );
        for pass_cross in [false, true] {
            for e in self.edges.iter().filter(|e| e.is_cross() == pass_cross) {
                let consumer = self.consumer_block(e);
                let src = Source::Block(producer_block(e.from.path, e.from.slot));
                let list = inputs.get_mut(&consumer).expect("every block listed");
                if !list.contains(&src) {
                    list.push(src);
                }
            }
        }
        inputs
    }

    /// Deterministic topological order of the realized block graph.
    pub fn schedule(&self) -> Result<Vec<Block>> {
        let inputs = self.block_inputs();
        let mut pending: BTreeMap<Block, usize> = BTreeMap::new();
        let mut users: BTreeMap<Block, Vec<Block>> = BTreeMap::new();
        for (&blk, srcs) in &inputs {
            let deps: BTreeSet<Block> = srcs
                .iter()
                .filter_map(|s| match s {
                    Source::Block(b) => Some(*b),
                    Source::Input(_) => None,
                })
                .collect();
            pending.insert(blk, deps.len());
            for d in deps {
                users.entry(d).or_default().push(blk);
            }
        }
        let mut ready: BTreeSet<Block> = pending
            .iter()
            .filter(|(_, &n)| n == 0)
            .map(|(&b, _)| b)
            .collect();
        let mut order = Vec::with_capacity(pending.len());
        while let Some(b) = ready.pop_first() {
            order.push(b);
            for u in users.get(&b).into_iter().flatten() {
                let n = pending.get_mut(u).expect("listed");
                *n -= 1;
                if *n == 0 {
                    ready.insert(*u);
                }
            }
        }
        if order.len() != pending.len() {
            return Err(Error::config("hyper-connection topology has a cycle"));
        }
        Ok(order)
    }
}

/// A computation stage of the dual network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    Enc(PathId, usize),
    Up(PathId, usize),
    Dec(PathId, usize),
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Input(PathId),
    Block(Block),
}

fn producer_block(path: PathId, slot: Slot) -> Block {
    match slot.side {
        Side::Enc => Block::Enc(path, slot.level),
        Side::Dec => Block::Dec(path, slot.level),
    }
}

fn successor(depth: usize, path: PathId, slot: Slot) -> Block {
    match slot.side {
        Side::Enc if slot.level < depth => Block::Enc(path, slot.level + 1),
        Side::Enc => Block::Up(path, depth - 1),
        Side::Dec if slot.level > 1 => Block::Up(path, slot.level - 1),
        Side::Dec => Block::Head,
    }
}

/// Two phase paths `Θ₁`, `Θ₂` and a head `Θ_head` in one parameter store.
#[derive(Clone, Debug)]
pub struct DualNet<T> {
    pub cfg: PathConfig,
    pub topology: HyperTopology,
    pub store: ParamStore<T>,
    pub paths: [PathTrunk; 2],
    pub head: ConvBlock,
    /// Slot that provides `f₁` (path A) and `f₂` (path B).
    pub tap: Slot,
    schedule: Vec<Block>,
    inputs: BTreeMap<Block, Vec<Source>>,
}

#[derive(Clone, Copy, Debug)]
pub struct BranchTaps {
    pub f1: Var,
    pub f2: Var,
}

/// Output of one recorded dual forward pass.
#[derive(Clone, Debug)]
pub struct DualForward {
    pub logits: Var,
    pub taps: BranchTaps,
    /// Output of every executed block.
    pub blocks: BTreeMap<Block, Var>,
}

/// Builds a dual network; path A, path B and the head draw from one seeded stream.
pub fn build_dual<T: Real>(cfg: PathConfig, topology: HyperTopology, seed: u64) -> Result<DualNet<T>> {
    cfg.validate()?;
    if topology.depth != cfg.depth {
        return Err(Error::config(format!(
            "topology depth {} differs from network depth {}",
            topology.depth, cfg.depth
        )));
    }
    topology.validate()?;
    let schedule = topology.schedule()?;
    let inputs = topology.block_inputs();
    let width = |src: &Source| -> usize {
        match src {
            Source::Input(_) => 1,
            Source::Block(Block::Enc(_, d) | Block::Dec(_, d) | Block::Up(_, d)) => cfg.channels(*d),
            Source::Block(Block::Head) => cfg.classes,
        }
    };
    let total = |b: Block| -> usize { inputs[&b].iter().map(width).sum() };

    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let mut trunks = Vec::with_capacity(2);
    for p in [PathId::A, PathId::B] {
        let widths = BlockWidths {
            enc_in: (1..=cfg.depth).map(|d| total(Block::Enc(p, d))).collect(),
            up_in: (1..cfg.depth).map(|d| total(Block::Up(p, d))).collect(),
            dec_in: (1..cfg.depth).map(|d| total(Block::Dec(p, d))).collect(),
        };
        trunks.push(build_trunk(&cfg, &format!("{p:?}."), &widths, &mut store, &mut init));
    }
    let head = init.conv(&mut store, "head", total(Block::Head), cfg.classes, 1, 1, false);
    let b = trunks.pop().expect("two trunks");
    let a = trunks.pop().expect("two trunks");
    Ok(DualNet {
        cfg,
        topology,
        store,
        paths: [a, b],
        head,
        tap: Slot::dec(1),
        schedule,
        inputs,
    })
}

impl<T: Real> DualNet<T> {
    pub fn with_tap(mut self, tap: Slot) -> Result<Self> {
        if !self.topology.slot_exists(tap) {
            return Err(Error::config(format!("tap slot {tap:?} does not exist")));
        }
        self.tap = tap;
        Ok(self)
    }

    /// Records one forward pass over aligned phase inputs `[1, X, Y, Z]`.
    pub fn forward(&self, tape: &mut Tape<T>, xa: Var, xb: Var) -> Result<DualForward> {
        self.cfg.check_input(tape.value(xa), 1)?;
        self.cfg.check_input(tape.value(xb), 1)?;
        if tape.value(xa).shape() != tape.value(xb).shape() {
            return Err(Error::dim(format!(
                "phase inputs differ: {:?} vs {:?}",
                tape.value(xa).shape(),
                tape.value(xb).shape()
            )));
        }
        let mut out: BTreeMap<Block, Var> = BTreeMap::new();
        for &blk in &self.schedule {
            let srcs: Vec<Var> = self.inputs[&blk]
                .iter()
                .map(|s| match s {
                    Source::Input(PathId::A) => xa,
                    Source::Input(PathId::B) => xb,
                    Source::Block(b) => out[b],
                })
                .collect();
            let x = tape.concat_channels(&srcs)?;
            let store = &self.store;
            let y = match blk {
                Block::Enc(p, d) => self.paths[p.index()].enc[d - 1].apply(tape, store, x)?,
                Block::Up(p, d) => self.paths[p.index()].up[d - 1].apply(tape, store, x)?,
                Block::Dec(p, d) => self.paths[p.index()].dec[d - 1].apply(tape, store, x)?,
                Block::Head => self.head.apply(tape, store, x)?,
            };
            out.insert(blk, y);
        }
        let taps = BranchTaps {
            f1: out[&producer_block(PathId::A, self.tap)],
            f2: out[&producer_block(PathId::B, self.tap)],
        };
        Ok(DualForward {
            logits: out[&Block::Head],
            taps,
            blocks: out,
        })
    }

    /// Logits and `(f₁, f₂)` values on a fresh tape.
    pub fn run(&self, xa: &Tensor<T>, xb: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let a = tape.input(xa.clone());
        let b = tape.input(xb.clone());
        let fwd = self.forward(&mut tape, a, b)?;
        Ok((
            tape.value(fwd.logits).clone(),
            tape.value(fwd.taps.f1).clone(),
            tape.value(fwd.taps.f2).clone(),
        ))
    }
}

/// `(logits, f₁, f₂)` for one aligned phase pair.
pub fn forward_dual<T: Real>(net: &DualNet<T>, xa: &Tensor<T>, xb: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    net.run(xa, xb)
}

/// 1³ convolution over `concat(f₁, f₂)` producing class logits.
pub fn classifier_head<T: Real>(f1: &Tensor<T>, f2: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if f1.shape() != f2.shape() {
        return Err(Error::dim(format!(
            "branch taps differ: {:?} vs {:?}",
            f1.shape(),
            f2.shape()
        )));
    }
    conv3d(&concat_channels(&[f1, f2])?, weight, bias, 1, 0)
}
