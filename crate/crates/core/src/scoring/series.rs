use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::pot::{pot_threshold, PotFit};
use super::stats::{mat_threshold, mpot_threshold};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Static POT threshold.
    Pot,
    /// POT plus a trailing median-absolute-deviation term.
    Mpot,
    /// Margin times the trailing moving average of scores.
    Mat,
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pot" => Ok(ThresholdMode::Pot),
            "mpot" => Ok(ThresholdMode::Mpot),
            "mat" => Ok(ThresholdMode::Mat),
            other => Err(Error::Config(format!("unknown threshold mode `{other}` (pot, mpot, mat)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdSettings {
    pub mode: ThresholdMode,
    /// Anchor quantile of the training scores.
    pub q: f64,
    /// Target risk of the extrapolated threshold.
    pub coeff: f64,
    pub alpha: f64,
    pub recent_window: usize,
    pub mat_window: usize,
    pub kappa: f64,
    /// Threshold every dimension separately and flag a timestamp when any
    /// dimension exceeds its own threshold.
    pub per_dimension: bool,
}

impl Default for ThresholdSettings {
    fn default() -> Self {
        ThresholdSettings {
            mode: ThresholdMode::Mpot,
            q: 0.98,
            coeff: 1e-4,
            alpha: 0.1,
            recent_window: 50,
            mat_window: 50,
            kappa: 3.0,
            per_dimension: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Thresholds {
    Scalar(Vec<f64>),
    /// `T' x m` thresholds for the per-dimension scores.
    PerDimension(Tensor),
}

/// Test scores with their thresholds and decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub scores: Vec<f64>,
    /// Per-dimension scores (`T' x m`); `scores` is their row sum.
    pub dimension_scores: Tensor,
    pub thresholds: Thresholds,
    pub decisions: Vec<u8>,
    /// One fit for the aggregate score, or one per dimension.
    pub pot: Vec<PotFit>,
}

fn trace(base: f64, scores: &[f64], s: &ThresholdSettings) -> Result<Vec<f64>> {
    match s.mode {
        ThresholdMode::Pot => Ok(vec![base; scores.len()]),
        ThresholdMode::Mpot => (0..scores.len())
            .map(|t| {
                let lo = (t + 1).saturating_sub(s.recent_window.max(1));
                mpot_threshold(base, &scores[lo..=t], s.alpha)
            })
            .collect(),
        ThresholdMode::Mat => Ok(mat_threshold(scores, s.mat_window)?
            .into_iter()
            .map(|v| s.kappa * v)
            .collect()),
    }
}

fn column(t: &Tensor, c: usize) -> Vec<f64> {
    (0..t.rows()).map(|r| t.get(r, c)).collect()
}

fn row_sums(t: &Tensor) -> Vec<f64> {
    (0..t.rows()).map(|r| t.row(r).iter().sum()).collect()
}

/// Thresholds test scores using the distribution of training scores. Both
/// inputs are per-dimension score matrices; the aggregate score of a
/// timestamp is the sum over its dimensions.
pub fn threshold_scores(train: &Tensor, test: &Tensor, s: &ThresholdSettings) -> Result<ScoreSeries> {
    if train.cols() != test.cols() {
        return Err(Error::dim("threshold_scores", &train.shape(), &test.shape()));
    }
    let scores = row_sums(test);
    if s.per_dimension {
        let m = test.cols();
        let mut thr = Tensor::zeros(test.rows(), m);
        let mut fits = Vec::with_capacity(m);
        for c in 0..m {
            let fit = pot_threshold(&column(train, c), s.q, s.coeff)?;
            let tr = trace(fit.threshold, &column(test, c), s)?;
            for (r, v) in tr.into_iter().enumerate() {
                thr.set(r, c, v);
            }
            fits.push(fit);
        }
        let decisions = (0..test.rows())
            .map(|r| u8::from(test.row(r).iter().zip(thr.row(r)).any(|(v, t)| v > t)))
            .collect();
        Ok(ScoreSeries {
            scores,
            dimension_scores: test.clone(),
            thresholds: Thresholds::PerDimension(thr),
            decisions,
            pot: fits,
        })
    } else {
        let fit = pot_threshold(&row_sums(train), s.q, s.coeff)?;
        let tr = trace(fit.threshold, &scores, s)?;
        let decisions = scores.iter().zip(&tr).map(|(v, t)| u8::from(v > t)).collect();
        Ok(ScoreSeries {
            scores,
            dimension_scores: test.clone(),
            thresholds: Thresholds::Scalar(tr),
            decisions,
            pot: vec![fit],
        })
    }
}

pub const SCORE_SCHEMA_VERSION: u32 = 1;

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `timestamp,score,threshold,decision,label`. The threshold cell is
    /// empty in per-dimension mode; `to_dimension_csv` carries those.
    pub fn to_csv(&self, labels: Option<&[u8]>) -> String {
        let mut out = format!("# schema_version: {SCORE_SCHEMA_VERSION}\ntimestamp,score,threshold,decision,label\n");
        for t in 0..self.scores.len() {
            let thr = match &self.thresholds {
                Thresholds::Scalar(v) => format!("{}", v[t]),
                Thresholds::PerDimension(_) => String::new(),
            };
            let label = labels.map_or(String::new(), |l| l[t].to_string());
            let _ = writeln!(out, "{t},{},{thr},{},{label}", self.scores[t], self.decisions[t]);
        }
        out
    }

    /// Per-dimension scores, their thresholds (when thresholded per
    /// dimension) and the decision.
    pub fn to_dimension_csv(&self) -> String {
        let m = self.dimension_scores.cols();
        let mut header: Vec<String> = vec!["timestamp".into()];
        header.extend((0..m).map(|c| format!("score_{c}")));
        if let Thresholds::PerDimension(_) = self.thresholds {
            header.extend((0..m).map(|c| format!("threshold_{c}")));
        }
        header.push("decision".into());
        let mut out = format!("# schema_version: {SCORE_SCHEMA_VERSION}\n{}\n", header.join(","));
        for t in 0..self.scores.len() {
            let mut cells = vec![t.to_string()];
            cells.extend(self.dimension_scores.row(t).iter().map(|v| format!("{v}")));
            if let Thresholds::PerDimension(thr) = &self.thresholds {
                cells.extend(thr.row(t).iter().map(|v| format!("{v}")));
            }
            cells.push(self.decisions[t].to_string());
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRow {
    pub timestamp: usize,
    pub score: f64,
    pub threshold: Option<f64>,
    pub decision: u8,
    pub label: Option<u8>,
}

/// Reads the file written by [`ScoreSeries::to_csv`].
pub fn parse_score_csv(text: &str, source_name: &str) -> Result<Vec<ScoreRow>> {
    let err = |line: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| cols.iter().position(|c| *c == name);
    let (Some(ts), Some(sc), Some(dc)) = (find("timestamp"), find("score"), find("decision")) else {
        return Err(err(hline, "header needs timestamp, score and decision columns".into()));
    };
    let (th, lc) = (find("threshold"), find("label"));
    let mut rows = Vec::new();
    for (line, l) in lines {
        let cells: Vec<&str> = l.split(',').map(str::trim).collect();
        if cells.len() != cols.len() {
            return Err(err(line, format!("expected {} cells, found {}", cols.len(), cells.len())));
        }
        let num = |i: usize| -> Result<f64> {
            cells[i]
                .parse::<f64>()
                .map_err(|e| err(line, format!("column {}: {e}", cols[i])))
        };
        let opt = |i: Option<usize>| -> Result<Option<f64>> {
            match i {
                Some(i) if !cells[i].is_empty() => num(i).map(Some),
                _ => Ok(None),
            }
        };
        let bit = |v: f64| -> Result<u8> {
            if v == 0.0 || v == 1.0 {
                Ok(v as u8)
            } else {
                Err(err(line, format!("expected 0 or 1, found {v}")))
            }
        };
        let timestamp = cells[ts]
            .parse::<usize>()
            .map_err(|e| err(line, format!("timestamp: {e}")))?;
        rows.push(ScoreRow {
            timestamp,
            score: num(sc)?,
            threshold: opt(th)?,
            decision: bit(num(dc)?)?,
            label: opt(lc)?.map(bit).transpose()?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn per_dim(rows: &[[f64; 2]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn decisions_follow_thresholds() {
        let train = Tensor::from_vec(200, 1, (0..200).map(|i| (i % 10) as f64 * 0.01).collect()).unwrap();
        let test = Tensor::from_vec(20, 1, (0..20).map(|i| if i == 10 { 5.0 } else { 0.01 }).collect()).unwrap();
        for mode in [ThresholdMode::Pot, ThresholdMode::Mpot, ThresholdMode::Mat] {
            let s = ThresholdSettings {
                mode,
                ..ThresholdSettings::default()
            };
            let out = threshold_scores(&train, &test, &s).unwrap();
            let Thresholds::Scalar(tr) = &out.thresholds else { panic!() };
            for t in 0..20 {
                assert_eq!(out.decisions[t] == 1, out.scores[t] > tr[t]);
            }
            assert_eq!(out.decisions[10], 1, "{mode:?}");
        }
    }

    #[test]
    fn per_dimension_any_rule() {
        let train = per_dim(&[[0.1, 1.0]; 100]);
        let test = per_dim(&[[0.1, 1.0], [0.5, 1.0], [0.1, 2.0]]);
        let s = ThresholdSettings {
            mode: ThresholdMode::Pot,
            per_dimension: true,
            ..ThresholdSettings::default()
        };
        let out = threshold_scores(&train, &test, &s).unwrap();
        assert_eq!(out.decisions, vec![0, 1, 1]);
        assert_eq!(out.pot.len(), 2);
        assert_eq!(out.scores[1], 1.5);
    }

    #[test]
    fn csv_roundtrip_of_decisions() {
        let train = Tensor::from_vec(50, 1, (0..50).map(|i| i as f64 * 0.001).collect()).unwrap();
        let test = Tensor::from_rows(&[vec![0.0], vec![9.0]]);
        let out = threshold_scores(&train, &test, &ThresholdSettings::default()).unwrap();
        let rows = parse_score_csv(&out.to_csv(Some(&[0, 1])), "scores.csv").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].decision, 1);
        assert_eq!(rows[1].label, Some(1));
        assert_eq!(rows[1].score, 9.0);
    }

    #[test]
    fn malformed_score_csv_reports_line() {
        let err = parse_score_csv("timestamp,score,decision\n0,1.0,2\n", "s").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(parse_score_csv("", "s").is_err());
    }
}
