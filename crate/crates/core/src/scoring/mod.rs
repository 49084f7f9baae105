//! Anomaly scores, extreme-value thresholds and detection metrics.

mod metrics;
mod pot;
mod series;
mod stats;

pub use metrics::{eacs, eacs_cohort, evaluate, EacsInput, EacsRow, EacsWeights, EvalReport};
pub use pot::{pot_threshold, quantile, PotFit, MIN_EXCEEDANCES};
pub use series::{
    parse_score_csv, threshold_scores, ScoreRow, ScoreSeries, ThresholdMode, ThresholdSettings,
    Thresholds,
};
pub use stats::{
    anomaly_score, mat_threshold, median, median_absolute_deviation, mpot_threshold, rolling_stats,
};
