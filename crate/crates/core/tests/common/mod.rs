//! Finite-difference oracles shared by the gradient and acceptance suites.
#![allow(dead_code)]

use std::sync::Arc;

use phasenet::hyperpair::{build_dual, build_topology, DualNet};
use phasenet::losses::record_objective;
use phasenet::netblocks::{build_single_path, forward_single, PathConfig, PathNet};
use phasenet::tensor::{ParamStore, Tape, Tensor, Var};
use phasenet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;
/// Step small enough that no activation pattern changes.
pub const H_FINE: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: usize = 20;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; two zero vectors give 0.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn scalar_of(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Relative error between tape gradients and central differences over every
/// element of `inputs`.
pub fn check_inputs(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let adj = tape.backward(out).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        analytic.extend(adj.wrt(*v).to_f64_vec());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            numeric.push((scalar_of(&plus, f) - scalar_of(&minus, f)) / (2.0 * H));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Generic scalar read-out `−r(out, probe) + 0.37·Σ out` with a fixed probe.
fn readout(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = tape.input(random(&mut rng, &shape));
    let corr = tape.neg_pearson(out, probe, 1e-12)?;
    let total = tape.sum(out)?;
    let scaled = tape.scale(total, 0.37)?;
    tape.add(corr, scaled)
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = random(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

/// Worst relative error over [`INSTANCES`] random instances of each tape operation.
pub fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut worst = |name: &'static str, rng: &mut ChaCha8Rng, case: &dyn Fn(&mut ChaCha8Rng, u64) -> f64| {
        let e = (0..INSTANCES as u64).map(|i| case(rng, i)).fold(0.0, f64::max);
        out.push((name, e));
    };

    worst("conv3d", &mut rng, &|rng, i| {
        let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let stride = rng.random_range(1..=2);
        let pad = if rng.random_bool(0.5) { (k - 1) / 2 } else { 0 };
        let n = rng.random_range(5..=6);
        let inputs = [
            random(rng, &[cin, n, n, n]),
            random(rng, &[cout, cin, k, k, k]),
            random(rng, &[cout]),
        ];
        check_inputs(&inputs, &|t, v| {
            let y = t.conv3d(v[0], v[1], v[2], stride, pad)?;
            readout(t, y, i)
        })
    });
    worst("conv3d_transposed", &mut rng, &|rng, i| {
        let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let n = rng.random_range(2..=3);
        let inputs = [
            random(rng, &[cin, n, n, n]),
            random(rng, &[cin, cout, 2, 2, 2]),
            random(rng, &[cout]),
        ];
        check_inputs(&inputs, &|t, v| {
            let y = t.conv3d_transposed(v[0], v[1], v[2], 2)?;
            readout(t, y, i)
        })
    });
    worst("concat_channels", &mut rng, &|rng, i| {
        let n = rng.random_range(2..=3);
        let (c1, c2) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let inputs = [random(rng, &[c1, n, n, n]), random(rng, &[c2, n, n, n])];
        check_inputs(&inputs, &|t, v| {
            let y = t.concat_channels(v)?;
            readout(t, y, i)
        })
    });
    worst("slice_channels", &mut rng, &|rng, i| {
        let c = rng.random_range(2..=5);
        let start = rng.random_range(0..c - 1);
        let count = rng.random_range(1..=c - start);
        let inputs = [random(rng, &[c, 3, 3, 3])];
        check_inputs(&inputs, &|t, v| {
            let y = t.slice_channels(v[0], start, count)?;
            readout(t, y, i)
        })
    });
    worst("relu", &mut rng, &|rng, i| {
        let inputs = [away_from_zero(rng, &[2, 3, 3, 3])];
        check_inputs(&inputs, &|t, v| {
            let y = t.relu(v[0])?;
            readout(t, y, i)
        })
    });
    worst("softmax_channels", &mut rng, &|rng, i| {
        let c = rng.random_range(2..=4);
        let inputs = [random(rng, &[c, 3, 3, 3]).map(|x| 3.0 * x)];
        check_inputs(&inputs, &|t, v| {
            let y = t.softmax_channels(v[0])?;
            readout(t, y, i)
        })
    });
    worst("add", &mut rng, &|rng, i| {
        let inputs = [random(rng, &[2, 3, 3, 3]), random(rng, &[2, 3, 3, 3])];
        check_inputs(&inputs, &|t, v| {
            let y = t.add(v[0], v[1])?;
            readout(t, y, i)
        })
    });
    worst("scale", &mut rng, &|rng, i| {
        let factor = rng.random_range(-2.0..2.0);
        let inputs = [random(rng, &[2, 3, 3, 3])];
        check_inputs(&inputs, &|t, v| {
            let y = t.scale(v[0], factor)?;
            readout(t, y, i)
        })
    });
    worst("sum", &mut rng, &|rng, _| {
        let inputs = [random(rng, &[2, 3, 3, 3])];
        check_inputs(&inputs, &|t, v| t.sum(v[0]))
    });
    worst("cross_entropy", &mut rng, &|rng, _| {
        let c = rng.random_range(2..=4);
        let labels: Arc<[u8]> = (0..27).map(|_| rng.random_range(0..c as u8)).collect();
        let inputs = [random(rng, &[c, 3, 3, 3]).map(|x| 3.0 * x)];
        check_inputs(&inputs, &|t, v| t.cross_entropy(v[0], labels.clone()))
    });
    worst("neg_pearson", &mut rng, &|rng, _| {
        let inputs = [random(rng, &[2, 3, 3, 3]), random(rng, &[2, 3, 3, 3])];
        check_inputs(&inputs, &|t, v| t.neg_pearson(v[0], v[1], 1e-8))
    });
    out
}

pub fn micro_config() -> PathConfig {
    PathConfig {
        depth: 2,
        base_channels: 2,
        kernel: 3,
        classes: 4,
    }
}

/// Outcome of a whole-network check.
#[derive(Clone, Copy, Debug)]
pub struct NetCheck {
    pub params: usize,
    /// Parameters whose `±h` step flips some ReLU, where a central
    /// difference is not a valid oracle.
    pub kinked: usize,
    /// Over parameters with a smooth `±h` neighbourhood.
    pub rel_err: f64,
    /// Over every parameter with step [`H_FINE`].
    pub rel_err_fine: f64,
}

impl NetCheck {
    pub fn passes(&self) -> bool {
        self.rel_err < TOL && self.rel_err_fine < TOL && self.kinked * 2 < self.params
    }
}

/// Loss and the exact-zero pattern of every tape node; ReLU outputs are the
/// only nodes that hit zero exactly.
fn evaluate(tape: &Tape<f64>, loss: Var) -> (f64, Vec<bool>) {
    let pattern = tape
        .values()
        .flat_map(|t| t.data().iter().map(|&v| v == 0.0).collect::<Vec<_>>())
        .collect();
    (tape.value(loss).item(), pattern)
}

fn check_net(store: &ParamStore<f64>, record: &dyn Fn(&ParamStore<f64>, &mut Tape<f64>) -> Var) -> NetCheck {
    let mut tape = Tape::new();
    let loss = record(store, &mut tape);
    let (_, base) = evaluate(&tape, loss);
    let grads = phasenet::tensor::grad_eval(&tape, loss).unwrap();
    let analytic: Vec<f64> = store
        .ids()
        .flat_map(|id| match grads.get(id) {
            Some(g) => g.to_f64_vec(),
            None => vec![0.0; store.get(id).len()],
        })
        .collect();
    let flat = store.flatten();
    let mut probe = store.clone();
    let at = |probe: &mut ParamStore<f64>, v: &[f64]| {
        probe.load_flat(v).unwrap();
        let mut t = Tape::new();
        let l = record(probe, &mut t);
        evaluate(&t, l)
    };
    let (mut a, mut n) = (Vec::new(), Vec::new());
    let mut fine = Vec::with_capacity(flat.len());
    let mut kinked = 0;
    for j in 0..flat.len() {
        let mut v = flat.clone();
        v[j] += H_FINE;
        let (up, _) = at(&mut probe, &v);
        v[j] -= 2.0 * H_FINE;
        let (down, _) = at(&mut probe, &v);
        fine.push((up - down) / (2.0 * H_FINE));
        let mut v = flat.clone();
        v[j] += H;
        let (up, p_up) = at(&mut probe, &v);
        v[j] -= 2.0 * H;
        let (down, p_down) = at(&mut probe, &v);
        if p_up != base || p_down != base {
            kinked += 1;
            continue;
        }
        a.push(analytic[j]);
        n.push((up - down) / (2.0 * H));
    }
    NetCheck {
        params: flat.len(),
        kinked,
        rel_err: rel_err(&a, &n),
        rel_err_fine: rel_err(&analytic, &fine),
    }
}

/// Cross-entropy plus weighted pairing term through an 8³ dual network, over every parameter.
pub fn dual_objective_check(seed: u64, pair_weight: f64) -> NetCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = build_dual::<f64>(micro_config(), build_topology(2).unwrap(), seed).unwrap();
    let xa = random(&mut rng, &[1, 8, 8, 8]);
    let xb = random(&mut rng, &[1, 8, 8, 8]);
    let labels: Arc<[u8]> = (0..512).map(|_| rng.random_range(0..4u8)).collect();
    let record = |store: &ParamStore<f64>, tape: &mut Tape<f64>| -> Var {
        let mut n = net.clone();
        n.store = store.clone();
        let a = tape.input(xa.clone());
        let b = tape.input(xb.clone());
        let f = n.forward(tape, a, b).unwrap();
        record_objective(tape, f.logits, Some(f.taps), labels.clone(), pair_weight).unwrap().total
    };
    check_net(&net.store, &record)
}

/// Cross-entropy through an 8³ single path, over every parameter.
pub fn single_objective_check(seed: u64) -> NetCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = build_single_path::<f64>(micro_config(), seed).unwrap();
    let x = random(&mut rng, &[1, 8, 8, 8]);
    let labels: Arc<[u8]> = (0..512).map(|_| rng.random_range(0..4u8)).collect();
    let record = |store: &ParamStore<f64>, tape: &mut Tape<f64>| -> Var {
        let mut n = net.clone();
        n.store = store.clone();
        let xv = tape.input(x.clone());
        let (logits, _) = n.forward(tape, xv).unwrap();
        tape.cross_entropy(logits, labels.clone()).unwrap()
    };
    check_net(&net.store, &record)
}


/// Cross-free dual net whose path A and head reproduce `single`; path B
/// keeps its own weights but its head channels are zeroed.
pub fn degenerate_copy(single: &PathNet<f64>) -> DualNet<f64> {
    let topo = build_topology(single.cfg.depth).unwrap().without_cross();
    let mut dual = build_dual::<f64>(single.cfg, topo, 99).unwrap();
    for (_, name, t) in single.store.iter() {
        if name.starts_with("head.") {
            continue;
        }
        let id = dual.store.find(&format!("A.{name}")).unwrap();
        assert_eq!(dual.store.get(id).shape(), t.shape(), "{name}");
        *dual.store.get_mut(id) = t.clone();
    }
    let c = single.cfg.channels(1);
    let k = single.cfg.classes;
    let sw = single.store.get(single.head.weight).data().to_vec();
    let dw = dual.store.get_mut(dual.head.weight);
    assert_eq!(dw.shape(), &[k, 2 * c, 1, 1, 1]);
    for o in 0..k {
        for i in 0..2 * c {
            dw.data_mut()[o * 2 * c + i] = if i < c { sw[o * c + i] } else { 0.0 };
        }
    }
    let sb = single.store.get(single.head.bias).clone();
    *dual.store.get_mut(dual.head.bias) = sb;
    dual
}

/// Largest logit gap between a single path and its cross-free dual copy.
pub fn degenerate_deviation(depth: usize) -> f64 {
    let cfg = PathConfig {
        depth,
        base_channels: 3,
        kernel: 3,
        classes: 4,
    };
    let single = build_single_path::<f64>(cfg, 7).unwrap();
    let dual = degenerate_copy(&single);
    let mut rng = ChaCha8Rng::seed_from_u64(depth as u64);
    let xa = random(&mut rng, &[1, 8, 8, 8]);
    let xb = random(&mut rng, &[1, 8, 8, 8]);
    let (expect, _, _) = forward_single(&single, &xa).unwrap();
    let (got, _, _) = dual.run(&xa, &xb).unwrap();
    expect
        .data()
        .iter()
        .zip(got.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
