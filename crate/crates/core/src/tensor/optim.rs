use super::{Gradients, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Heavy-ball SGD: `v ← momentum·v + g; θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    /// Applies one update. Parameters without a gradient entry are treated as
    /// having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.iter() {
            if id.0 >= params.len() || params.get(id).shape() != g.shape() {
                return Err(Error::dim(format!(
                    "gradient for parameter {} has shape {:?}",
                    id.0,
                    g.shape()
                )));
            }
        }
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let lr = T::lit(self.lr);
        let mu = T::lit(self.momentum);
        for id in params.ids() {
            let grad = grads.get(id);
            let shape = params.get(id).shape().to_vec();
            let v = self.velocity[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            match grad {
                Some(g) => {
                    for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                        *vv = mu * *vv + gv;
                    }
                }
                None => v.data_mut().iter_mut().for_each(|vv| *vv = mu * *vv),
            }
            for (p, &vv) in params.get_mut(id).data_mut().iter_mut().zip(v.data()) {
                *p -= lr * vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> (ParamStore<f64>, super::super::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::from_vec(vec![v]));
        (s, id)
    }

    fn grad(id: super::super::ParamId, g: f64) -> Gradients<f64> {
        let mut gs = Gradients::default();
        gs.insert(id, Tensor::from_vec(vec![g]));
        gs
    }

    #[test]
    fn plain_step() {
        let (mut s, id) = one_param(1.0);
        Sgd::new(0.1, 0.0).unwrap().step(&mut s, &grad(id, 0.5)).unwrap();
        assert!((s.get(id).item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let (mut s, id) = one_param(1.0);
        Sgd::new(0.0, 0.9).unwrap().step(&mut s, &grad(id, 0.5)).unwrap();
        assert_eq!(s.get(id).item(), 1.0);
    }

    #[test]
    fn momentum_two_steps() {
        // v1 = 1, v2 = 0.9 + 1 = 1.9; theta = -0.1 * (1 + 1.9)
        let (mut s, id) = one_param(0.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut s, &grad(id, 1.0)).unwrap();
        opt.step(&mut s, &grad(id, 1.0)).unwrap();
        assert!((s.get(id).item() + 0.29).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (mut s, id) = one_param(0.0);
        let mut g = Gradients::default();
        g.insert(id, Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(
            Sgd::new(0.1, 0.0).unwrap().step(&mut s, &g),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bad_hyperparameters() {
        assert!(Sgd::<f64>::new(-0.1, 0.0).is_err());
        assert!(Sgd::<f64>::new(0.1, 1.0).is_err());
    }
}
