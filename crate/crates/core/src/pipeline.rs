//! Train, score and evaluate one genome on a prepared dataset.

use serde::{Deserialize, Serialize};

use crate::dataset::{make_windows, TimeSeriesDataset, WindowSet};
use crate::detect::{dimension_scores, InferenceConfig};
use crate::error::{Error, Result};
use crate::model::{AnomalyModel, Genome};
use crate::scoring::{evaluate, threshold_scores, EvalReport, ScoreSeries, ThresholdSettings};
use crate::training::{train, TrainConfig, TrainReport};

/// Which labeled timestamps judge a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// The whole test split.
    #[default]
    Test,
    /// The first half of the test split.
    Holdout,
}

/// Scores of a split together with its thresholded decisions.
pub fn detect(
    model: &AnomalyModel,
    train: &WindowSet,
    target: &WindowSet,
    settings: &ThresholdSettings,
    inference: &InferenceConfig,
) -> Result<ScoreSeries> {
    let train_scores = dimension_scores(model, train, inference)?;
    let target_scores = dimension_scores(model, target, inference)?;
    threshold_scores(&train_scores, &target_scores, settings)
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub model: AnomalyModel,
    pub report: TrainReport,
    pub scores: ScoreSeries,
    /// Point-adjusted metrics on the evaluation split.
    pub adjusted: EvalReport,
    /// Plain metrics on the evaluation split.
    pub plain: EvalReport,
}

/// Builds `genome` on `ds` (already normalized), trains it and evaluates
/// its detections against the labels of `split`.
pub fn train_and_evaluate(
    ds: &TimeSeriesDataset,
    genome: &Genome,
    model_seed: u64,
    train_cfg: &TrainConfig,
    settings: &ThresholdSettings,
    split: EvalSplit,
) -> Result<TrialOutcome> {
    let m = ds.feature_count();
    let mut model = AnomalyModel::build(genome, m, model_seed)?;
    let (train_w, test_w) = make_windows(ds, genome.window_size)?;
    let report = train(&mut model, &train_w, train_cfg)?;
    let (target, labels) = match split {
        EvalSplit::Test => (test_w, &ds.test_labels[..]),
        EvalSplit::Holdout => {
            let half = ds.test.rows() / 2;
            if half == 0 {
                return Err(Error::Contract("test split too short for a holdout half".into()));
            }
            let part = ds.test.slice_rows(0, half);
            (WindowSet::new(part, genome.window_size)?, &ds.test_labels[..half])
        }
    };
    let scores = detect(&model, &train_w, &target, settings, &train_cfg.inference())?;
    let adjusted = evaluate(&scores.decisions, labels, true)?;
    let plain = evaluate(&scores.decisions, labels, false)?;
    Ok(TrialOutcome {
        model,
        report,
        scores,
        adjusted,
        plain,
    })
}
