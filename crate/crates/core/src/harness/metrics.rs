use std::fmt;

use crate::dataio::{LabelMap, DUCT, MASS, TISSUE};
use crate::error::{Error, Result};
use crate::tensor::{argmax_channels, Tensor};

/// Structures scored per case, in report column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Structure {
    AbnormalPancreas,
    Mass,
    Duct,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::AbnormalPancreas, Structure::Mass, Structure::Duct];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn contains(self, label: u8) -> bool {
        match self {
            Structure::AbnormalPancreas => label >= TISSUE,
            Structure::Mass => label == MASS,
            Structure::Duct => label == DUCT,
        }
    }

    pub fn mask(self, labels: &[u8]) -> Vec<bool> {
        labels.iter().map(|&l| self.contains(l)).collect()
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::AbnormalPancreas => "abnormal pancreas",
            Structure::Mass => "PDAC mass",
            Structure::Duct => "pancreatic duct",
        })
    }
}

/// `2|Y∩Z| / (|Y|+|Z|)`; 1 when both are empty.
pub fn dsc(truth: &[bool], pred: &[bool]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::dim(format!(
            "masks differ in size: {} vs {}",
            truth.len(),
            pred.len()
        )));
    }
    let (mut inter, mut nt, mut np) = (0usize, 0usize, 0usize);
    for (&t, &p) in truth.iter().zip(pred) {
        nt += t as usize;
        np += p as usize;
        inter += (t && p) as usize;
    }
    if nt + np == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (nt + np) as f64)
}

/// Voxels with any foreground label.
pub fn abnormal_union(labels: &LabelMap) -> Vec<bool> {
    Structure::AbnormalPancreas.mask(&labels.labels)
}

/// Per-structure DSC of one prediction.
pub fn case_dsc(truth: &[u8], pred: &[u8]) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for s in Structure::ALL {
        out[s.index()] = dsc(&s.mask(truth), &s.mask(pred))?;
    }
    Ok(out)
}

fn dims_of(prob: &Tensor<f32>) -> Result<[usize; 3]> {
    if prob.shape().len() != 4 {
        return Err(Error::dim(format!("expected [C, X, Y, Z], got {:?}", prob.shape())));
    }
    Ok(prob.spatial())
}

/// Argmax of the voxel-wise mean of two probability maps.
pub fn fuse_average(prob_a: &Tensor<f32>, prob_b: &Tensor<f32>) -> Result<LabelMap> {
    if prob_a.shape() != prob_b.shape() {
        return Err(Error::dim(format!(
            "probability maps differ: {:?} vs {:?}",
            prob_a.shape(),
            prob_b.shape()
        )));
    }
    let mut mean = prob_a.clone();
    for (m, &b) in mean.data_mut().iter_mut().zip(prob_b.data()) {
        *m = 0.5 * (*m + b);
    }
    let dims = dims_of(&mean)?;
    LabelMap::from_labels(dims, [1.0; 3], argmax_channels(&mean)?)
}

/// Rank used to settle voxels claimed by different classes.
fn priority(label: u8) -> u8 {
    match label {
        MASS => 3,
        DUCT => 2,
        TISSUE => 1,
        _ => 0,
    }
}

/// Per-class OR of two predictions; conflicts go to mass, then duct, then tissue.
pub fn union_ensemble(a: &LabelMap, b: &LabelMap) -> Result<LabelMap> {
    if a.dims() != b.dims() {
        return Err(Error::dim(format!(
            "label maps differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let labels = a
        .labels
        .iter()
        .zip(&b.labels)
        .map(|(&x, &y)| if priority(x) >= priority(y) { x } else { y })
        .collect();
    LabelMap::new(a.header.clone(), labels)
}

/// Per-case DSC for each structure.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub case_ids: Vec<String>,
    pub dsc: [Vec<f64>; 3],
}

impl MetricsReport {
    pub fn push(&mut self, case_id: impl Into<String>, scores: [f64; 3]) {
        self.case_ids.push(case_id.into());
        for (v, s) in self.dsc.iter_mut().zip(scores) {
            v.push(s);
        }
    }

    pub fn len(&self) -> usize {
        self.case_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.case_ids.is_empty()
    }

    pub fn values(&self, s: Structure) -> &[f64] {
        &self.dsc[s.index()]
    }

    pub fn mean(&self, s: Structure) -> f64 {
        let v = self.values(s);
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Population standard deviation.
    pub fn std(&self, s: Structure) -> f64 {
        let v = self.values(s);
        if v.is_empty() {
            return 0.0;
        }
        let m = self.mean(s);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    }

    pub fn median(&self, s: Structure) -> f64 {
        median(self.values(s))
    }

    /// Mean over cases of the per-case mean across the three structures.
    pub fn mean_foreground(&self) -> f64 {
        Structure::ALL.iter().map(|&s| self.mean(s)).sum::<f64>() / 3.0
    }

    /// Cases sorted by id, for order-independent comparison.
    pub fn sorted(&self) -> MetricsReport {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&i, &j| self.case_ids[i].cmp(&self.case_ids[j]));
        let mut out = MetricsReport::default();
        for i in idx {
            out.push(self.case_ids[i].clone(), [self.dsc[0][i], self.dsc[1][i], self.dsc[2][i]]);
        }
        out
    }

    /// `case_id,abnormal,mass,duct` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case_id,abnormal_pancreas,pdac_mass,pancreatic_duct\n");
        for i in 0..self.len() {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                self.case_ids[i], self.dsc[0][i], self.dsc[1][i], self.dsc[2][i]
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut out = MetricsReport::default();
        let mut offset = 0;
        for (n, line) in text.split_inclusive('\n').enumerate() {
            let body = line.trim_end();
            if n > 0 && !body.is_empty() {
                let f: Vec<&str> = body.split(',').collect();
                let bad = || Error::format(offset, format!("bad metrics line {body:?}"));
                if f.len() != 4 {
                    return Err(bad());
                }
                let mut v = [0.0; 3];
                for k in 0..3 {
                    v[k] = f[k + 1].parse().map_err(|_| bad())?;
                    if !(0.0..=1.0).contains(&v[k]) {
                        return Err(bad());
                    }
                }
                out.push(f[0], v);
            }
            offset += line.len();
        }
        Ok(out)
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_channels;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lm(labels: Vec<u8>) -> LabelMap {
        LabelMap::from_labels([labels.len(), 1, 1], [1.0; 3], labels).unwrap()
    }

    #[test]
    fn dsc_examples() {
        let t = [true, true, true, true, false, false, false];
        let p = [true, true, true, false, true, true, true];
        assert_eq!(dsc(&t, &p).unwrap(), 0.6);
        assert_eq!(dsc(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(dsc(&[false, true], &[false, false]).unwrap(), 0.0);
        assert_eq!(dsc(&[true, false], &[false, true]).unwrap(), 0.0);
        assert!(dsc(&[true], &[true, false]).is_err());
    }

    #[test]
    fn union_is_label_partition() {
        let l = lm(vec![0, 1, 2, 3, 0, 2, 1]);
        let u = abnormal_union(&l);
        assert_eq!(u.iter().filter(|&&b| b).count(), l.count(1) + l.count(2) + l.count(3));
        assert!(abnormal_union(&lm(vec![0; 5])).iter().all(|&b| !b));
    }

    #[test]
    fn fusion_example() {
        let pa = Tensor::new(vec![2, 1, 1, 1], vec![0.8f32, 0.2]).unwrap();
        let pb = Tensor::new(vec![2, 1, 1, 1], vec![0.4f32, 0.6]).unwrap();
        assert_eq!(fuse_average(&pa, &pb).unwrap().labels, vec![0]);
        let bad = Tensor::new(vec![1, 2, 1, 1], vec![0.4f32, 0.6]).unwrap();
        assert!(matches!(fuse_average(&pa, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn fusion_logit_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4 * 27;
        let la: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lb: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t = |v: Vec<f32>| Tensor::new(vec![4, 3, 3, 3], v).unwrap();
        let base = fuse_average(
            &softmax_channels(&t(la.clone())).unwrap(),
            &softmax_channels(&t(lb.clone())).unwrap(),
        )
        .unwrap();
        let shifted = fuse_average(
            &softmax_channels(&t(la.iter().map(|x| x + 2.5).collect())).unwrap(),
            &softmax_channels(&t(lb.iter().map(|x| x + 2.5).collect())).unwrap(),
        )
        .unwrap();
        assert_eq!(base.labels, shifted.labels);
    }

    #[test]
    fn union_examples() {
        let a = lm(vec![2, 0]);
        let b = lm(vec![0, 2]);
        assert_eq!(union_ensemble(&a, &b).unwrap().labels, vec![2, 2]);
        assert_eq!(union_ensemble(&lm(vec![0, 0]), &lm(vec![0, 0])).unwrap().labels, vec![0, 0]);
        assert_eq!(union_ensemble(&lm(vec![1]), &lm(vec![2])).unwrap().labels, vec![2]);
        assert_eq!(union_ensemble(&lm(vec![3]), &lm(vec![1])).unwrap().labels, vec![3]);
        assert!(union_ensemble(&lm(vec![1]), &lm(vec![1, 1])).is_err());
    }

    #[test]
    fn report_statistics() {
        let mut r = MetricsReport::default();
        r.push("a", [1.0, 0.5, 0.0]);
        r.push("b", [0.5, 0.5, 1.0]);
        assert_eq!(r.mean(Structure::AbnormalPancreas), 0.75);
        assert_eq!(r.std(Structure::AbnormalPancreas), 0.25);
        assert_eq!(r.std(Structure::Mass), 0.0);
        assert_eq!(r.median(Structure::Duct), 0.5);
        let back = MetricsReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    proptest! {
        #[test]
        fn union_idempotent(v in proptest::collection::vec(0u8..=3, 1..64)) {
            let m = lm(v);
            prop_assert_eq!(union_ensemble(&m, &m).unwrap(), m);
        }

        #[test]
        fn dsc_in_unit_interval(v in proptest::collection::vec((any::<bool>(), any::<bool>()), 0..64)) {
            let (t, p): (Vec<bool>, Vec<bool>) = v.into_iter().unzip();
            let d = dsc(&t, &p).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dsc(&p, &t).unwrap());
        }
    }
}
