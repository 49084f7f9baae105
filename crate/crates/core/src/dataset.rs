//! Loading, normalizing, windowing and augmenting time series, plus a
//! labeled synthetic generator.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::rolling_stats;
use crate::tensor::Tensor;

/// Train and test matrices (`T x m`, `T' x m`) plus per-timestamp test labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub train: Tensor,
    pub test: Tensor,
    pub test_labels: Vec<u8>,
    pub names: Option<Vec<String>>,
}

impl TimeSeriesDataset {
    pub fn new(train: Tensor, test: Tensor, test_labels: Vec<u8>) -> Result<Self> {
        let ds = TimeSeriesDataset {
            train,
            test,
            test_labels,
            names: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn feature_count(&self) -> usize {
        self.train.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.cols() != self.test.cols() {
            return Err(Error::Contract(format!(
                "train has {} features but test has {}",
                self.train.cols(),
                self.test.cols()
            )));
        }
        if self.test_labels.len() != self.test.rows() {
            return Err(Error::Contract(format!(
                "labels length {} differs from test length {}",
                self.test_labels.len(),
                self.test.rows()
            )));
        }
        if self.test_labels.iter().any(|&l| l > 1) {
            return Err(Error::Contract("labels must be 0 or 1".into()));
        }
        if let Some(names) = &self.names {
            if names.len() != self.train.cols() {
                return Err(Error::Contract("one name per feature expected".into()));
            }
        }
        Ok(())
    }

    pub fn anomaly_fraction(&self) -> f64 {
        if self.test_labels.is_empty() {
            return 0.0;
        }
        self.test_labels.iter().map(|&l| l as f64).sum::<f64>() / self.test_labels.len() as f64
    }

    /// Summary figures written next to prepared bundles.
    pub fn metadata(&self) -> DatasetMetadata {
        DatasetMetadata {
            schema_version: 1,
            train_len: self.train.rows(),
            test_len: self.test.rows(),
            features: self.feature_count(),
            anomaly_fraction: self.anomaly_fraction(),
            anomaly_points: self.test_labels.iter().filter(|&&l| l == 1).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub schema_version: u32,
    pub train_len: usize,
    pub test_len: usize,
    pub features: usize,
    pub anomaly_fraction: f64,
    pub anomaly_points: usize,
}

fn csv_records(text: &str) -> impl Iterator<Item = (usize, std::result::Result<csv::StringRecord, csv::Error>)> + '_ {
    let reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    reader.into_records().map(|r| {
        let line = match &r {
            Ok(rec) => rec.position().map_or(0, |p| p.line() as usize),
            Err(e) => e.position().map_or(0, |p| p.line() as usize),
        };
        (line, r)
    })
}

/// Parses a numeric CSV matrix: one row per timestamp, one column per
/// dimension, optional header row detected by a non-numeric first row.
pub fn parse_matrix(text: &str, source_name: &str) -> Result<(Tensor, Option<Vec<String>>)> {
    let parse_err = |line: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut names = None;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (idx, (line, rec)) in csv_records(text).enumerate() {
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let values: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if idx == 0 => {
                names = Some(rec.iter().map(str::to_string).collect::<Vec<_>>());
                cols = Some(rec.len());
                continue;
            }
            Err(e) => return Err(parse_err(line, format!("non-numeric cell: {e}"))),
        };
        match cols {
            None => cols = Some(values.len()),
            Some(c) if c != values.len() => {
                return Err(parse_err(line, format!("expected {c} columns, found {}", values.len())))
            }
            _ => {}
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(parse_err(line, format!("non-finite value {bad}")));
        }
        data.extend(values);
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    if rows == 0 {
        return Err(parse_err(1, "no data rows".into()));
    }
    Ok((Tensor::from_vec(rows, cols, data)?, names))
}

/// Parses a label file: one 0/1 per line, or several 0/1 columns reduced
/// by logical OR.
pub fn parse_labels(text: &str, source_name: &str) -> Result<Vec<u8>> {
    let (matrix, _) = parse_matrix(text, source_name)?;
    let mut labels = Vec::with_capacity(matrix.rows());
    for r in 0..matrix.rows() {
        let mut any = 0;
        for &v in matrix.row(r) {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Parse {
                    source_name: source_name.to_string(),
                    line: r + 1,
                    message: format!("label {v} is not 0 or 1"),
                });
            }
            any |= v as u8;
        }
        labels.push(any);
    }
    Ok(labels)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_csv(train_path: &Path, test_path: &Path, labels_path: &Path) -> Result<TimeSeriesDataset> {
    let (train, names) = parse_matrix(&read(train_path)?, &train_path.display().to_string())?;
    let (test, _) = parse_matrix(&read(test_path)?, &test_path.display().to_string())?;
    let labels = parse_labels(&read(labels_path)?, &labels_path.display().to_string())?;
    if labels.len() != test.rows() {
        return Err(Error::Contract(format!(
            "{} has {} labels but {} has {} rows",
            labels_path.display(),
            labels.len(),
            test_path.display(),
            test.rows()
        )));
    }
    let ds = TimeSeriesDataset {
        train,
        test,
        test_labels: labels,
        names,
    };
    ds.validate()?;
    Ok(ds)
}

/// Renders a matrix as CSV. `{}` formatting of `f64` is shortest-roundtrip,
/// so parsing the output reproduces every value exactly.
pub fn matrix_to_csv(t: &Tensor, names: Option<&[String]>) -> String {
    let mut out = String::new();
    if let Some(names) = names {
        out.push_str(&names.join(","));
        out.push('\n');
    }
    for r in 0..t.rows() {
        let line: Vec<String> = t.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn labels_to_csv(labels: &[u8]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `train.csv`, `test.csv` and `labels.csv` into `dir`.
pub fn save_csv(ds: &TimeSeriesDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = ds.names.as_deref();
    write(&dir.join("train.csv"), &matrix_to_csv(&ds.train, names))?;
    write(&dir.join("test.csv"), &matrix_to_csv(&ds.test, names))?;
    write(&dir.join("labels.csv"), &labels_to_csv(&ds.test_labels))
}

pub fn load_bundle(dir: &Path) -> Result<TimeSeriesDataset> {
    load_csv(&dir.join("train.csv"), &dir.join("test.csv"), &dir.join("labels.csv"))
}

/// Per-dimension min-max scaling fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub eps: f64,
}

impl MinMaxScaler {
    pub fn fit(train: &Tensor, eps: f64) -> Result<Self> {
        if train.rows() == 0 {
            return Err(Error::Contract("cannot normalize an empty training split".into()));
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("eps must be positive, got {eps}")));
        }
        let m = train.cols();
        let mut min = vec![f64::INFINITY; m];
        let mut max = vec![f64::NEG_INFINITY; m];
        for r in 0..train.rows() {
            for (c, &v) in train.row(r).iter().enumerate() {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        Ok(MinMaxScaler { min, max, eps })
    }

    pub fn transform(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        let m = self.min.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % m;
            *v = (*v - self.min[c]) / (self.max[c] - self.min[c] + self.eps);
        }
        out
    }
}

/// Min-max normalization with statistics from the training split only;
/// the same affine map is applied to the test split.
pub fn normalize(ds: &TimeSeriesDataset, eps: f64) -> Result<TimeSeriesDataset> {
    let scaler = MinMaxScaler::fit(&ds.train, eps)?;
    Ok(TimeSeriesDataset {
        train: scaler.transform(&ds.train),
        test: scaler.transform(&ds.test),
        test_labels: ds.test_labels.clone(),
        names: ds.names.clone(),
    })
}

/// Appends rolling mean and standard deviation channels (window `w`) for
/// every feature, tripling the feature count.
pub fn append_rolling_stats(ds: &TimeSeriesDataset, w: usize) -> Result<TimeSeriesDataset> {
    let extend = |t: &Tensor| -> Result<Tensor> {
        let m = t.cols();
        let mut cols: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(m);
        for c in 0..m {
            let series: Vec<f64> = (0..t.rows()).map(|r| t.get(r, c)).collect();
            cols.push(rolling_stats(&series, w)?);
        }
        let mut out = Tensor::zeros(t.rows(), 3 * m);
        for r in 0..t.rows() {
            for c in 0..m {
                out.set(r, c, t.get(r, c));
                out.set(r, m + c, cols[c].0[r]);
                out.set(r, 2 * m + c, cols[c].1[r]);
            }
        }
        Ok(out)
    };
    let names = ds.names.as_ref().map(|n| {
        let mut all = n.clone();
        all.extend(n.iter().map(|s| format!("{s}_mean")));
        all.extend(n.iter().map(|s| format!("{s}_std")));
        all
    });
    Ok(TimeSeriesDataset {
        train: extend(&ds.train)?,
        test: extend(&ds.test)?,
        test_labels: ds.test_labels.clone(),
        names,
    })
}

/// One `K x m` context window per timestamp of a series, each ending at its
/// timestamp and left-padded with the first observation.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    series: Tensor,
    window_size: usize,
}

impl WindowSet {
    pub fn new(series: Tensor, window_size: usize) -> Result<Self> {
        if window_size == 0 {
            return Err(Error::Contract("window size must be at least 1".into()));
        }
        if series.rows() == 0 {
            return Err(Error::Contract("cannot window an empty series".into()));
        }
        Ok(WindowSet { series, window_size })
    }

    pub fn len(&self) -> usize {
        self.series.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.series.rows() == 0
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn feature_count(&self) -> usize {
        self.series.cols()
    }

    pub fn series(&self) -> &Tensor {
        &self.series
    }

    /// Window ending at zero-based timestamp `t`.
    pub fn get(&self, t: usize) -> Tensor {
        let (k, m) = (self.window_size, self.series.cols());
        let mut out = Tensor::zeros(k, m);
        for i in 0..k {
            let src = (t + i + 1).saturating_sub(k);
            out.row_mut(i).copy_from_slice(self.series.row(src));
        }
        out
    }

    /// The windows at `indices`, stacked into `(indices.len() * K) x m`.
    pub fn stack(&self, indices: &[usize]) -> Tensor {
        let (k, m) = (self.window_size, self.series.cols());
        let mut data = Vec::with_capacity(indices.len() * k * m);
        for &t in indices {
            for i in 0..k {
                let src = (t + i + 1).saturating_sub(k);
                data.extend_from_slice(self.series.row(src));
            }
        }
        Tensor::from_vec(indices.len() * k, m, data).expect("consistent window shape")
    }
}

/// Windows both splits with window size `k`.
pub fn make_windows(ds: &TimeSeriesDataset, k: usize) -> Result<(WindowSet, WindowSet)> {
    if k == 0 || k > ds.train.rows() {
        return Err(Error::Contract(format!(
            "window size {k} must lie in [1, {}]",
            ds.train.rows()
        )));
    }
    if !(10..=30).contains(&k) {
        log::warn!("window size {k} is outside the search range [10, 30]");
    }
    Ok((
        WindowSet::new(ds.train.clone(), k)?,
        WindowSet::new(ds.test.clone(), k)?,
    ))
}

/// Training-time augmentation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub time_warping: bool,
    pub time_masking: bool,
    /// Maximum relative deviation of the local warp speed.
    pub warp_strength: f64,
    /// Masked span as a fraction of the window length (rounded up).
    pub mask_fraction: f64,
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            noise_std: 0.0,
            time_warping: false,
            time_masking: false,
            warp_strength: 0.2,
            mask_fraction: 0.1,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.noise_std <= 0.0 && !self.time_warping && !self.time_masking
    }
}

/// Applies Gaussian noise, then time warping, then time masking to every
/// `K`-row window of a stacked batch. Shape is preserved.
pub fn augment<R: Rng + ?Sized>(batch: &Tensor, k: usize, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    let mut out = batch.clone();
    if cfg.is_identity() || k == 0 {
        return out;
    }
    let m = batch.cols();
    let windows = batch.rows() / k;
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("positive std");
        for v in out.data_mut() {
            *v += normal.sample(rng);
        }
    }
    if cfg.time_warping && k > 1 {
        for w in 0..windows {
            let positions = warp_positions(k, cfg.warp_strength, rng);
            let src = out.slice_rows(w * k, k);
            for (i, &p) in positions.iter().enumerate() {
                let lo = p.floor() as usize;
                let hi = (lo + 1).min(k - 1);
                let frac = p - lo as f64;
                for c in 0..m {
                    let v = src.get(lo, c) * (1.0 - frac) + src.get(hi, c) * frac;
                    out.set(w * k + i, c, v);
                }
            }
        }
    }
    if cfg.time_masking {
        let span = ((cfg.mask_fraction * k as f64).ceil() as usize).clamp(1, k);
        for w in 0..windows {
            let start = rng.random_range(0..=k - span);
            for r in start..start + span {
                out.row_mut(w * k + r).fill(0.0);
            }
        }
    }
    out
}

/// Monotone sample positions in `[0, k - 1]` with fixed endpoints, built
/// from per-step speeds drawn in `1 ± strength`.
fn warp_positions<R: Rng + ?Sized>(k: usize, strength: f64, rng: &mut R) -> Vec<f64> {
    let speeds: Vec<f64> = (1..k)
        .map(|_| 1.0 + strength * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let total: f64 = speeds.iter().sum();
    let mut pos = Vec::with_capacity(k);
    let mut acc = 0.0;
    pos.push(0.0);
    for s in speeds {
        acc += s;
        pos.push((acc / total * (k - 1) as f64).min((k - 1) as f64));
    }
    pos
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Spike,
    LevelShift,
    Flatline,
    FrequencyShift,
}

/// Recipe for a synthetic labeled dataset: sinusoids plus noise with
/// anomalies injected into the test split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub train_len: usize,
    pub test_len: usize,
    pub features: usize,
    pub anomaly_types: Vec<AnomalyKind>,
    pub anomaly_rate: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train_len: 2000,
            test_len: 2000,
            features: 3,
            anomaly_types: vec![AnomalyKind::Spike, AnomalyKind::LevelShift],
            anomaly_rate: 0.05,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedAnomaly {
    pub kind: AnomalyKind,
    pub start: usize,
    pub len: usize,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub anomaly_fraction: f64,
    pub anomalies: Vec<InjectedAnomaly>,
}

struct Component {
    amplitude: f64,
    period: f64,
    phase: f64,
    harmonic_phase: f64,
}

impl Component {
    fn at(&self, t: f64, speed: f64) -> f64 {
        let w = std::f64::consts::TAU * speed / self.period;
        self.amplitude * ((w * t + self.phase).sin() + 0.3 * (2.0 * w * t + self.harmonic_phase).sin())
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<(TimeSeriesDataset, SynthReport)> {
    if !(spec.anomaly_rate > 0.0 && spec.anomaly_rate < 0.5) {
        return Err(Error::Contract(format!(
            "anomaly rate {} must lie in (0, 0.5)",
            spec.anomaly_rate
        )));
    }
    if spec.features == 0 || spec.train_len == 0 || spec.test_len == 0 {
        return Err(Error::Contract("synthetic lengths and feature count must be positive".into()));
    }
    if spec.anomaly_types.is_empty() {
        return Err(Error::Contract("at least one anomaly type is required".into()));
    }
    if spec.noise_std < 0.0 {
        return Err(Error::Contract("noise_std must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.features;
    let comps: Vec<Component> = (0..m)
        .map(|_| Component {
            amplitude: rng.random_range(0.5..1.5),
            period: rng.random_range(20.0..80.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            harmonic_phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).expect("positive std"))
    } else {
        None
    };
    let draw_noise = |rng: &mut ChaCha8Rng| noise.map_or(0.0, |n| n.sample(rng));

    let mut train = Tensor::zeros(spec.train_len, m);
    for t in 0..spec.train_len {
        for (c, comp) in comps.iter().enumerate() {
            train.set(t, c, comp.at(t as f64, 1.0) + draw_noise(&mut rng));
        }
    }
    let offset = spec.train_len as f64;
    let mut test = Tensor::zeros(spec.test_len, m);
    let mut test_noise = Tensor::zeros(spec.test_len, m);
    for t in 0..spec.test_len {
        for (c, comp) in comps.iter().enumerate() {
            let n = draw_noise(&mut rng);
            test_noise.set(t, c, n);
            test.set(t, c, comp.at(offset + t as f64, 1.0) + n);
        }
    }

    let target = (spec.anomaly_rate * spec.test_len as f64).round() as usize;
    let mut labels = vec![0u8; spec.test_len];
    let mut labeled = 0;
    let mut anomalies = Vec::new();
    let mut attempts = 0;
    while labeled < target && attempts < 100_000 {
        attempts += 1;
        let kind = spec.anomaly_types[rng.random_range(0..spec.anomaly_types.len())];
        let natural = match kind {
            AnomalyKind::Spike => 1,
            AnomalyKind::LevelShift | AnomalyKind::Flatline => rng.random_range(10..=40),
            AnomalyKind::FrequencyShift => rng.random_range(20..=60),
        };
        let len = natural.min(target - labeled).min(spec.test_len);
        let start = rng.random_range(0..=spec.test_len - len);
        // keep a two-point gap so segments never merge
        let lo = start.saturating_sub(2);
        let hi = (start + len + 2).min(spec.test_len);
        if labels[lo..hi].contains(&1) {
            continue;
        }
        let mut dims: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.5)).collect();
        if dims.is_empty() {
            dims.push(rng.random_range(0..m));
        }
        for &c in &dims {
            let amp = comps[c].amplitude;
            match kind {
                AnomalyKind::Spike => {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let v = test.get(start, c) + sign * amp * rng.random_range(3.0..5.0);
                    test.set(start, c, v);
                }
                AnomalyKind::LevelShift => {
                    let shift = if rng.random_bool(0.5) { 1.0 } else { -1.0 } * amp * rng.random_range(1.5..2.5);
                    for t in start..start + len {
                        let v = test.get(t, c) + shift;
                        test.set(t, c, v);
                    }
                }
                AnomalyKind::Flatline => {
                    let hold = test.get(start, c);
                    for t in start..start + len {
                        test.set(t, c, hold);
                    }
                }
                AnomalyKind::FrequencyShift => {
                    let speed = rng.random_range(2.5..4.0);
                    for t in start..start + len {
                        let v = comps[c].at(offset + t as f64, speed) + test_noise.get(t, c);
                        test.set(t, c, v);
                    }
                }
            }
        }
        labels[start..start + len].fill(1);
        labeled += len;
        anomalies.push(InjectedAnomaly { kind, start, len, dims });
    }
    anomalies.sort_by_key(|a| a.start);
    let names = Some((0..m).map(|c| format!("x{c}")).collect());
    let ds = TimeSeriesDataset {
        train,
        test,
        test_labels: labels,
        names,
    };
    ds.validate()?;
    let report = SynthReport {
        anomaly_fraction: ds.anomaly_fraction(),
        anomalies,
    };
    Ok((ds, report))
}
