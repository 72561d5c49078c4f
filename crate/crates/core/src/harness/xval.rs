use std::collections::BTreeMap;

use super::infer::infer_prepared;
use super::metrics::{case_dsc, fuse_average, MetricsReport};
use super::train::{train, Mode, PreparedCase, TrainConfig};
use crate::error::{Error, Result};

pub const DEFAULT_FOLDS: usize = 3;

/// Case index → fold, by `index mod folds`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: usize,
    pub assignment: Vec<usize>,
}

impl FoldSplit {
    pub fn by_index(cases: usize, folds: usize) -> Result<Self> {
        if folds < 2 {
            return Err(Error::config("need at least two folds"));
        }
        if cases < folds {
            return Err(Error::config(format!(
                "{cases} cases cannot fill {folds} folds"
            )));
        }
        Ok(Self {
            folds,
            assignment: (0..cases).map(|i| i % folds).collect(),
        })
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.folds).map(|f| self.test_indices(f).len()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct XvalConfig {
    /// Shared training settings; `mode` is overridden per method.
    pub train: TrainConfig,
    pub modes: Vec<Mode>,
    pub folds: usize,
    /// Inference window; defaults to the training patch.
    pub infer_patch: Option<usize>,
    /// Inference stride; defaults to half the window.
    pub infer_stride: Option<usize>,
}

impl XvalConfig {
    pub fn new(train: TrainConfig, modes: Vec<Mode>) -> Self {
        Self {
            train,
            modes,
            folds: DEFAULT_FOLDS,
            infer_patch: None,
            infer_stride: None,
        }
    }

    fn window(&self) -> (usize, usize) {
        let p = self.infer_patch.unwrap_or(self.train.patch);
        (p, self.infer_stride.unwrap_or((p / 2).max(1)))
    }
}

/// Training seed of one fold.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(fold as u64)
}

pub const FUSION: &str = "fusion";

/// Cross-validates every requested method on the same split. When both
/// single-phase methods run, a `fusion` row (mean of their probabilities)
/// follows the later of the two. Rows hold cases in manifest order.
pub fn crossval_ladder(cases: &[PreparedCase], cfg: &XvalConfig) -> Result<Vec<(String, MetricsReport)>> {
    if cases.len() < 3 {
        return Err(Error::config(format!(
            "cross-validation needs at least 3 cases, got {}",
            cases.len()
        )));
    }
    if cfg.modes.is_empty() {
        return Err(Error::config("no methods to cross-validate"));
    }
    let split = FoldSplit::by_index(cases.len(), cfg.folds)?;
    let (patch, stride) = cfg.window();
    let fusion = cfg.modes.contains(&Mode::SingleA) && cfg.modes.contains(&Mode::SingleB);
    let mut scores: BTreeMap<String, BTreeMap<usize, [f64; 3]>> = BTreeMap::new();

    for fold in 0..cfg.folds {
        let train_cases: Vec<PreparedCase> = split.train_indices(fold).iter().map(|&i| cases[i].clone()).collect();
        let test = split.test_indices(fold);
        let mut single_probs = BTreeMap::new();
        for &mode in &cfg.modes {
            let tc = TrainConfig {
                mode,
                seed: fold_seed(cfg.train.seed, fold),
                ..cfg.train.clone()
            };
            let (model, _) = train(&tc, &train_cases)?;
            for &i in &test {
                let out = infer_prepared(&model, &cases[i], patch, stride)?;
                let d = case_dsc(&cases[i].labels, &out.pred.labels)?;
                scores.entry(mode.to_string()).or_default().insert(i, d);
                if fusion && matches!(mode, Mode::SingleA | Mode::SingleB) {
                    single_probs.insert((mode, i), out.prob);
                }
            }
        }
        if fusion {
            for &i in &test {
                let fused = fuse_average(&single_probs[&(Mode::SingleA, i)], &single_probs[&(Mode::SingleB, i)])?;
                let d = case_dsc(&cases[i].labels, &fused.labels)?;
                scores.entry(FUSION.to_string()).or_default().insert(i, d);
            }
        }
    }

    let mut names: Vec<String> = Vec::new();
    let mut singles_seen = 0;
    for m in &cfg.modes {
        names.push(m.to_string());
        if matches!(m, Mode::SingleA | Mode::SingleB) {
            singles_seen += 1;
            if fusion && singles_seen == 2 {
                names.push(FUSION.to_string());
            }
        }
    }
    Ok(names
        .into_iter()
        .map(|name| {
            let mut r = MetricsReport::default();
            for (&i, &d) in &scores[&name] {
                r.push(cases[i].case_id.clone(), d);
            }
            (name, r)
        })
        .collect())
}

/// Cross-validated metrics of `cfg.mode`.
pub fn crossval(cases: &[PreparedCase], cfg: &TrainConfig) -> Result<MetricsReport> {
    let x = XvalConfig::new(cfg.clone(), vec![cfg.mode]);
    Ok(crossval_ladder(cases, &x)?.remove(0).1)
}
