use super::metrics::union_ensemble;
use super::train::{Model, Network, PreparedCase};
use crate::dataio::{crop_grid, patch_grid, LabelMap, PairedCase};
use crate::error::{Error, Result};
use crate::tensor::{argmax_channels, Tensor};

/// Whole-volume prediction of one model.
#[derive(Clone, Debug)]
pub struct Inference {
    /// Averaged window probabilities per member.
    pub member_probs: Vec<Tensor<f32>>,
    /// Mean of the member probabilities.
    pub prob: Tensor<f32>,
    /// Member argmax, union-ensembled when there are two members.
    pub pred: LabelMap,
}

/// Sliding-window softmax of one network, averaged uniformly over overlaps.
pub fn window_probabilities(net: &Network, case: &PreparedCase, patch: usize, stride: usize) -> Result<Tensor<f32>> {
    let dims = case.dims;
    let corners = patch_grid(dims, patch, stride)?;
    let classes = net.config().classes;
    let n = dims.iter().product::<usize>();
    let mut sum = vec![0.0f32; classes * n];
    let mut hits = vec![0u32; n];
    let size = [patch; 3];
    let shape = vec![1, patch, patch, patch];
    for corner in corners {
        let xa = Tensor::new(shape.clone(), crop_grid(&case.a, dims, corner, size)?)?;
        let xb = Tensor::new(shape.clone(), crop_grid(&case.b, dims, corner, size)?)?;
        let p = net.probabilities(&xa, &xb)?;
        let pd = p.data();
        let m = patch * patch * patch;
        for z in 0..patch {
            for y in 0..patch {
                let src = (z * patch + y) * patch;
                let dst = ((corner[2] + z) * dims[1] + corner[1] + y) * dims[0] + corner[0];
                for x in 0..patch {
                    hits[dst + x] += 1;
                }
                for c in 0..classes {
                    let s = &pd[c * m + src..c * m + src + patch];
                    let d = &mut sum[c * n + dst..c * n + dst + patch];
                    for (o, v) in d.iter_mut().zip(s) {
                        *o += v;
                    }
                }
            }
        }
    }
    for c in 0..classes {
        for (o, &h) in sum[c * n..(c + 1) * n].iter_mut().zip(&hits) {
            *o /= h as f32;
        }
    }
    Tensor::new(vec![classes, dims[0], dims[1], dims[2]], sum)
}

pub fn infer_prepared(model: &Model, case: &PreparedCase, patch: usize, stride: usize) -> Result<Inference> {
    if model.members.is_empty() {
        return Err(Error::contract("model has no members"));
    }
    let member_probs = model
        .members
        .iter()
        .map(|m| window_probabilities(m, case, patch, stride))
        .collect::<Result<Vec<_>>>()?;
    let mut preds = member_probs
        .iter()
        .map(|p| LabelMap::from_labels(case.dims, case.spacing, argmax_channels(p)?))
        .collect::<Result<Vec<_>>>()?;
    let mut pred = preds.remove(0);
    for other in &preds {
        pred = union_ensemble(&pred, other)?;
    }
    let mut prob = member_probs[0].clone();
    if member_probs.len() > 1 {
        for p in &member_probs[1..] {
            prob.add_assign(p)?;
        }
        let k = member_probs.len() as f32;
        prob = prob.map(|v| v / k);
    }
    Ok(Inference {
        member_probs,
        prob,
        pred,
    })
}

/// Normalizes the case, then runs sliding-window inference.
pub fn infer_whole(model: &Model, case: &PairedCase, patch: usize, stride: usize) -> Result<(Tensor<f32>, LabelMap)> {
    let prepared = PreparedCase::new(case)?;
    let out = infer_prepared(model, &prepared, patch, stride)?;
    Ok((out.prob, out.pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_phantom, PhantomConfig};
    use crate::harness::train::Mode;
    use crate::netblocks::PathConfig;

    fn setup(mode: Mode) -> (Model, PreparedCase) {
        let cfg = PathConfig {
            depth: 2,
            base_channels: 2,
            kernel: 3,
            classes: 4,
        };
        let model = Model {
            mode,
            patch: 8,
            members: vec![Network::build(mode, cfg, 5).unwrap()],
        };
        let case = PreparedCase::new(&gen_phantom(2, &PhantomConfig::with_dims([16; 3])).unwrap()).unwrap();
        (model, case)
    }

    #[test]
    fn output_dims_and_normalized() {
        let (model, case) = setup(Mode::Hyper);
        let out = infer_prepared(&model, &case, 8, 4).unwrap();
        assert_eq!(out.pred.dims(), case.dims);
        assert_eq!(out.prob.shape(), &[4, 16, 16, 16]);
        let n = 16 * 16 * 16;
        for i in 0..n {
            let s: f32 = (0..4).map(|c| out.prob.data()[c * n + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn no_overlap_equals_stitched_windows() {
        let (model, case) = setup(Mode::SingleA);
        let full = window_probabilities(&model.members[0], &case, 8, 8).unwrap();
        for corner in patch_grid(case.dims, 8, 8).unwrap() {
            let xa = Tensor::new(vec![1, 8, 8, 8], crop_grid(&case.a, case.dims, corner, [8; 3]).unwrap()).unwrap();
            let xb = Tensor::new(vec![1, 8, 8, 8], crop_grid(&case.b, case.dims, corner, [8; 3]).unwrap()).unwrap();
            let p = model.members[0].probabilities(&xa, &xb).unwrap();
            for c in 0..4 {
                let plane: Vec<f32> = full.data()[c * 4096..(c + 1) * 4096].to_vec();
                let got = crop_grid(&plane, case.dims, corner, [8; 3]).unwrap();
                assert_eq!(got, p.data()[c * 512..(c + 1) * 512].to_vec());
            }
        }
    }

    #[test]
    fn constant_logits_overlap_invariant() {
        let (mut model, case) = setup(Mode::SingleB);
        let store = model.members[0].store_mut();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = store.get_mut(id);
            let v = if name == "head.bias" { 0.3 } else { 0.0 };
            t.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = v * i as f32);
        }
        let a = window_probabilities(&model.members[0], &case, 8, 4).unwrap();
        let b = window_probabilities(&model.members[0], &case, 16, 16).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn patch_too_large() {
        let (model, case) = setup(Mode::Hyper);
        assert!(matches!(infer_prepared(&model, &case, 32, 16), Err(Error::Contract(_))));
    }
}
