//! Training objective: voxel-wise cross-entropy plus a weighted negative
//! Pearson correlation between the two branch feature maps.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hyperpair::BranchTaps;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Weight of the pairing term when none is configured.
pub const DEFAULT_PAIR_WEIGHT: f64 = 0.5;

/// Floor of `sxx·syy` under the square root of the correlation denominator.
pub const PAIRING_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub corr: f64,
    pub pair_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `iter,ce,corr,total` log line.
    pub fn log_line(&self, iter: usize) -> String {
        format!("{iter},{:.8},{:.8},{:.8}", self.ce, self.corr, self.total)
    }
}

/// `total = ce + pair_weight · corr`; `None` selects [`DEFAULT_PAIR_WEIGHT`].
pub fn total_loss(ce: f64, corr: f64, pair_weight: Option<f64>) -> Result<LossBreakdown> {
    let pair_weight = pair_weight.unwrap_or(DEFAULT_PAIR_WEIGHT);
    if !(pair_weight >= 0.0) {
        return Err(Error::config(format!(
            "pair weight must be >= 0, got {pair_weight}"
        )));
    }
    Ok(LossBreakdown {
        ce,
        corr,
        pair_weight,
        total: ce + pair_weight * corr,
    })
}

/// Tape nodes of one recorded objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub ce: Var,
    /// `−r(f₁, f₂)`, recorded whenever taps are given.
    pub corr: Option<Var>,
    pub total: Var,
}

/// Records `ce + pair_weight · (−r(f₁, f₂))`. A zero weight leaves the
/// correlation out of the total.
pub fn record_objective<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    taps: Option<BranchTaps>,
    labels: Arc<[u8]>,
    pair_weight: f64,
) -> Result<ObjectiveVars> {
    if !(pair_weight >= 0.0) {
        return Err(Error::config(format!(
            "pair weight must be >= 0, got {pair_weight}"
        )));
    }
    let ce = tape.cross_entropy(logits, labels)?;
    let corr = match taps {
        Some(t) => Some(tape.neg_pearson(t.f1, t.f2, PAIRING_EPS)?),
        None => None,
    };
    let total = match corr {
        Some(c) if pair_weight > 0.0 => {
            let scaled = tape.scale(c, pair_weight)?;
            tape.add(ce, scaled)?
        }
        _ => ce,
    };
    Ok(ObjectiveVars { ce, corr, total })
}

struct PearsonStats {
    da: Vec<f64>,
    db: Vec<f64>,
    sxy: f64,
    sxx: f64,
    syy: f64,
    denom: f64,
    floored: bool,
}

fn pearson_stats<T: Real>(a: &[T], b: &[T], eps: f64) -> Result<PearsonStats> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "pairing loss needs equal sizes, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::contract(format!(
            "pairing loss needs at least 2 elements, got {n}"
        )));
    }
    let to = |v: &T| v.to_f64().unwrap_or(f64::NAN);
    let mean_a = a.iter().map(to).sum::<f64>() / n as f64;
    let mean_b = b.iter().map(to).sum::<f64>() / n as f64;
    let da: Vec<f64> = a.iter().map(|v| to(v) - mean_a).collect();
    let db: Vec<f64> = b.iter().map(|v| to(v) - mean_b).collect();
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in da.iter().zip(&db) {
        sxy += x * y;
        sxx += x * x;
        syy += y * y;
    }
    let floored = sxx * syy < eps;
    let denom = (sxx * syy).max(eps).sqrt();
    Ok(PearsonStats {
        da,
        db,
        sxy,
        sxx,
        syy,
        denom,
        floored,
    })
}

/// `−r(a, b)` over all elements, clamped to `[−1, 1]`. Constant inputs give 0.
pub fn neg_pearson<T: Real>(a: &Tensor<T>, b: &Tensor<T>, eps: T) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "pairing loss shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let s = pearson_stats(a.data(), b.data(), eps.to_f64().unwrap_or(PAIRING_EPS))?;
    let r = (s.sxy / s.denom).clamp(-1.0, 1.0);
    Ok(T::lit(-r))
}

/// Gradients of [`neg_pearson`] with respect to both arguments.
pub fn neg_pearson_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = pearson_stats(a.data(), b.data(), eps.to_f64().unwrap_or(PAIRING_EPS))?;
    // ∂r/∂a_j = db_j / D − sxy·syy·da_j / D³ (and symmetrically for b);
    // on the floor D is constant and the second term vanishes
    let d3 = if s.floored {
        f64::INFINITY
    } else {
        s.denom * s.denom * s.denom
    };
    let ga: Vec<T> = s
        .da
        .iter()
        .zip(&s.db)
        .map(|(&x, &y)| T::lit(-(y / s.denom - s.sxy * s.syy * x / d3)))
        .collect();
    let gb: Vec<T> = s
        .da
        .iter()
        .zip(&s.db)
        .map(|(&x, &y)| T::lit(-(x / s.denom - s.sxy * s.sxx * y / d3)))
        .collect();
    Ok((
        Tensor::new(a.shape().to_vec(), ga)?,
        Tensor::new(b.shape().to_vec(), gb)?,
    ))
}

/// Pairing loss on two feature maps, in `f64`.
pub fn pairing_loss<T: Real>(f1: &Tensor<T>, f2: &Tensor<T>, eps: f64) -> Result<f64> {
    Ok(neg_pearson(f1, f2, T::lit(eps))?.to_f64().unwrap_or(f64::NAN))
}

fn class_layout<T: Real>(scores: &Tensor<T>, labels: &[u8]) -> Result<(usize, usize)> {
    let classes = scores.shape()[0];
    let n = scores.len() / classes;
    if scores.shape().len() < 2 || n != labels.len() {
        return Err(Error::dim(format!(
            "{} labels for class scores of shape {:?}",
            labels.len(),
            scores.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok((classes, n))
}

/// `−(1/N) Σ_j log p[y_j, j]` for probabilities laid out `[K+1, ...]`.
pub fn cross_entropy_loss<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<f64> {
    let (_, n) = class_layout(probs, labels)?;
    let p = probs.data();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(j, &y)| -p[y as usize * n + j].to_f64().unwrap_or(f64::NAN).ln())
        .sum();
    Ok(total / n as f64)
}

/// Cross-entropy of `softmax(logits)` via log-sum-exp.
pub fn cross_entropy_logits<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<T> {
    let (k, n) = class_layout(logits, labels)?;
    let z = logits.data();
    let mut total = 0.0f64;
    for (j, &y) in labels.iter().enumerate() {
        let mut max = z[j];
        for c in 1..k {
            max = max.max(z[c * n + j]);
        }
        let mut s = T::zero();
        for c in 0..k {
            s += (z[c * n + j] - max).exp();
        }
        let lse = max + s.ln();
        total += (lse - z[y as usize * n + j]).to_f64().unwrap_or(f64::NAN);
    }
    Ok(T::lit(total / n as f64))
}

/// `(softmax(logits) − onehot(labels)) / N`.
pub fn cross_entropy_logits_grad<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<Tensor<T>> {
    let (k, n) = class_layout(logits, labels)?;
    let z = logits.data();
    let inv_n = T::lit(1.0 / n as f64);
    let mut g = vec![T::zero(); z.len()];
    for (j, &y) in labels.iter().enumerate() {
        let mut max = z[j];
        for c in 1..k {
            max = max.max(z[c * n + j]);
        }
        let mut s = T::zero();
        for c in 0..k {
            let e = (z[c * n + j] - max).exp();
            g[c * n + j] = e;
            s += e;
        }
        for c in 0..k {
            let mut p = g[c * n + j] / s;
            if c == y as usize {
                p -= T::one();
            }
            g[c * n + j] = p * inv_n;
        }
    }
    Tensor::new(logits.shape().to_vec(), g)
}
