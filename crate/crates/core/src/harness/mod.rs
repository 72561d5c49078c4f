//! Training, sliding-window inference, DSC evaluation, ensembling,
//! three-fold cross-validation, significance testing and reporting.

pub mod infer;
pub mod metrics;
pub mod stats;
pub mod train;
pub mod xval;

use std::fs;
use std::path::Path;

pub use infer::{infer_prepared, infer_whole, window_probabilities, Inference};
pub use metrics::{
    abnormal_union, case_dsc, dsc, fuse_average, median, union_ensemble, MetricsReport, Structure,
};
pub use stats::{format_cell, permutation_test, report_table};
pub use train::{
    load_model, log_text, prepare_all, save_model, smoothed, train, Mode, Model, Network, PreparedCase,
    TrainConfig, Trainer,
};
pub use xval::{crossval, crossval_ladder, fold_seed, FoldSplit, XvalConfig, FUSION};

use crate::dataio::{load_case, CaseManifest};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

/// Trains on every fold except `test_fold`.
pub fn train_fold(
    cfg: &TrainConfig,
    manifest: &CaseManifest,
    split: &FoldSplit,
    test_fold: usize,
) -> Result<(Model, Vec<Vec<LossBreakdown>>)> {
    if split.assignment.len() != manifest.len() {
        return Err(Error::config("fold split does not match the manifest"));
    }
    if test_fold >= split.folds {
        return Err(Error::config(format!(
            "test fold {test_fold} out of range for {} folds",
            split.folds
        )));
    }
    let cases = split
        .train_indices(test_fold)
        .into_iter()
        .map(|i| load_case(manifest, i).and_then(|c| PreparedCase::new(&c)))
        .collect::<Result<Vec<_>>>()?;
    train(cfg, &cases)
}

/// Writes checkpoints and `loss.csv` (plus `loss_member1.csv`) into `dir`.
pub fn write_run(dir: impl AsRef<Path>, model: &Model, logs: &[Vec<LossBreakdown>]) -> Result<()> {
    let dir = dir.as_ref();
    save_model(model, dir)?;
    for (k, log) in logs.iter().enumerate() {
        let name = if k == 0 {
            "loss.csv".to_string()
        } else {
            format!("loss_member{k}.csv")
        };
        let path = dir.join(name);
        fs::write(&path, log_text(log)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
