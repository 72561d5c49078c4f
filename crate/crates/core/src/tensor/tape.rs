//! Recorded-tape reverse-mode differentiation.
//!
//! Every primitive pushes one node holding its forward value and the op
//! that produced it. Nodes are appended in execution order, so the tape is
//! topologically sorted by construction and the backward sweep is a single
//! reverse pass.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::conv::{conv3d, conv3d_backward, conv3d_transposed, conv3d_transposed_backward};
use super::{concat_channels, relu, slice_channels, softmax_channels, Real, Tensor};
use crate::error::{Error, Result};
use crate::losses;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Identifier of a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    ConvTransposed3d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
        count: usize,
    },
    Relu(Var),
    Softmax(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Arc<[u8]>,
    },
    NegPearson {
        a: Var,
        b: Var,
        eps: f64,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Named trainable tensors in build order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters flattened in build order.
    pub fn flatten(&self) -> Vec<T> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Overwrites all parameters from a flat buffer in build order.
    pub fn load_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.scalar_count() {
            return Err(Error::dim(format!(
                "parameter buffer has {} values, model needs {}",
                values.len(),
                self.scalar_count()
            )));
        }
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// `∂loss/∂θ` keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    map: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.map.iter().map(|(&k, v)| (k, v))
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        self.map.insert(id, grad);
    }
}

/// Adjoint of every node after a backward sweep.
pub struct Adjoints<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Gradients<T>,
}

impl<T: Real> Adjoints<T> {
    /// Gradient with respect to any node; zero when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn params(&self) -> &Gradients<T> {
        &self.params
    }

    pub fn into_params(self) -> Gradients<T> {
        self.params
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Every recorded value, in recording order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().map(|n| &n.value)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, |v| &self.nodes[v.0].value)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable parameter; repeated calls for the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        self.push(Op::Conv3d {
            input,
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn conv3d_transposed(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        self.push(Op::ConvTransposed3d {
            input,
            weight,
            bias,
            stride,
        })
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, count: usize) -> Result<Var> {
        self.push(Op::Slice {
            input,
            start,
            count,
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softmax(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    /// Mean voxel-wise cross-entropy of `softmax(logits)` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<[u8]>) -> Result<Var> {
        self.push(Op::CrossEntropy { logits, labels })
    }

    /// Negative Pearson correlation between two equally shaped tensors.
    pub fn neg_pearson(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.push(Op::NegPearson { a, b, eps })
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Input | Op::Param => node.value.clone(),
                _ => eval(&node.op, |v| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Adjoints<T>> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![T::one()],
        )?);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Input | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv3d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let (di, dw, db) =
                        conv3d_backward(val(*input), val(*weight), val(*bias), *stride, *pad, &g)?;
                    accumulate(&mut grads, *input, di)?;
                    accumulate(&mut grads, *weight, dw)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::ConvTransposed3d {
                    input,
                    weight,
                    bias,
                    stride,
                } => {
                    let (di, dw, db) =
                        conv3d_transposed_backward(val(*input), val(*weight), val(*bias), *stride, &g)?;
                    accumulate(&mut grads, *input, di)?;
                    accumulate(&mut grads, *weight, dw)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = val(p).channels();
                        accumulate(&mut grads, p, slice_channels(&g, start, c)?)?;
                        start += c;
                    }
                }
                Op::Slice {
                    input,
                    start,
                    count,
                } => {
                    let src = val(*input);
                    let vox: usize = src.spatial().iter().product();
                    let mut full = Tensor::zeros(src.shape());
                    full.data_mut()[start * vox..(start + count) * vox].copy_from_slice(g.data());
                    accumulate(&mut grads, *input, full)?;
                }
                Op::Relu(x) => {
                    let xs = val(*x);
                    let mut d = g;
                    for (dv, &xv) in d.data_mut().iter_mut().zip(xs.data()) {
                        if xv <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                    accumulate(&mut grads, *x, d)?;
                }
                Op::Softmax(x) => {
                    let s = &node.value;
                    let k = s.channels();
                    let vox: usize = s.spatial().iter().product();
                    let mut d = vec![T::zero(); s.len()];
                    for j in 0..vox {
                        let mut dot = T::zero();
                        for c in 0..k {
                            dot += g.data()[c * vox + j] * s.data()[c * vox + j];
                        }
                        for c in 0..k {
                            let i = c * vox + j;
                            d[i] = s.data()[i] * (g.data()[i] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(s.shape().to_vec(), d)?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Scale(x, f) => {
                    let f = T::lit(*f);
                    accumulate(&mut grads, *x, g.map(|v| v * f))?;
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    accumulate(&mut grads, *x, Tensor::full(val(*x).shape(), gv))?;
                }
                Op::CrossEntropy { logits, labels } => {
                    let mut d = losses::cross_entropy_logits_grad(val(*logits), labels)?;
                    let gv = g.item();
                    d.data_mut().iter_mut().for_each(|v| *v *= gv);
                    accumulate(&mut grads, *logits, d)?;
                }
                Op::NegPearson { a, b, eps } => {
                    let (mut da, mut db) = losses::neg_pearson_grad(val(*a), val(*b), T::lit(*eps))?;
                    let gv = g.item();
                    da.data_mut().iter_mut().for_each(|v| *v *= gv);
                    db.data_mut().iter_mut().for_each(|v| *v *= gv);
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
            }
        }
        let mut params = Gradients::default();
        for (&id, &v) in &self.params {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            params.insert(id, g);
        }
        Ok(Adjoints {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }
}

/// `∂loss/∂θ` for every parameter recorded on the tape; unreachable ones are zero.
pub fn grad_eval<T: Real>(tape: &Tape<T>, loss: Var) -> Result<Gradients<T>> {
    Ok(tape.backward(loss)?.into_params())
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn eval<'a, T: Real>(op: &Op, val: impl Fn(Var) -> &'a Tensor<T>) -> Result<Tensor<T>> {
    match op {
        Op::Input | Op::Param => unreachable!("leaves carry their own values"),
        Op::Conv3d {
            input,
            weight,
            bias,
            stride,
            pad,
        } => conv3d(val(*input), val(*weight), val(*bias), *stride, *pad),
        Op::ConvTransposed3d {
            input,
            weight,
            bias,
            stride,
        } => conv3d_transposed(val(*input), val(*weight), val(*bias), *stride),
        Op::Concat(parts) => {
            let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| val(p)).collect();
            concat_channels(&refs)
        }
        Op::Slice {
            input,
            start,
            count,
        } => slice_channels(val(*input), *start, *count),
        Op::Relu(x) => Ok(relu(val(*x))),
        Op::Softmax(x) => softmax_channels(val(*x)),
        Op::Add(a, b) => {
            let mut out = val(*a).clone();
            out.add_assign(val(*b))?;
            Ok(out)
        }
        Op::Scale(x, f) => {
            let f = T::lit(*f);
            Ok(val(*x).map(|v| v * f))
        }
        Op::Sum(x) => Ok(Tensor::scalar(val(*x).sum())),
        Op::CrossEntropy { logits, labels } => {
            Ok(Tensor::scalar(losses::cross_entropy_logits(val(*logits), labels)?))
        }
        Op::NegPearson { a, b, eps } => {
            Ok(Tensor::scalar(losses::neg_pearson(val(*a), val(*b), T::lit(*eps))?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        let adj = tape.backward(s).unwrap();
        assert_eq!(adj.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_blocks_negative_preactivation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_vec(vec![-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let adj = tape.backward(s).unwrap();
        assert_eq!(adj.wrt(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut store = ParamStore::<f64>::new();
        let used = store.add("used", Tensor::from_vec(vec![2.0]));
        let unused = store.add("unused", Tensor::from_vec(vec![5.0, 6.0]));
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        tape.param(&store, unused);
        let s = tape.sum(u).unwrap();
        let g = grad_eval(&tape, s).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.get(used).unwrap().data(), &[1.0]);
    }

    #[test]
    fn replay_reproduces_forward_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64(&[2, 2, 2, 2], &(0..16).map(|i| i as f64 - 7.5).collect::<Vec<_>>()).unwrap());
        let r = tape.relu(x).unwrap();
        let c = tape.concat_channels(&[x, r]).unwrap();
        let s = tape.softmax_channels(c).unwrap();
        let t = tape.sum(s).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, &tape.nodes[i].value);
        }
        assert!((tape.value(t).item() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(vec![3.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let g = grad_eval(&tape, s).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[2.0]);
    }
}
