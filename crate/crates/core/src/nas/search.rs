use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::evolve::{default_mutation_rate, evolve};
use super::sort::{crowded_cmp, rank_and_crowd, Direction};
use crate::dataset::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::model::{parameter_count_formula, Genome};
use crate::pipeline::{train_and_evaluate, EvalSplit};
use crate::scoring::ThresholdSettings;
use crate::training::TrainConfig;

pub const LEDGER_SCHEMA_VERSION: u32 = 1;

/// Objective directions: F1 up, parameter count down.
pub const OBJECTIVES: [Direction; 2] = [Direction::Maximize, Direction::Minimize];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub p_crossover: f64,
    /// Per-gene resampling probability; one over the gene count when unset.
    pub p_mutation: Option<f64>,
    pub per_trial_epochs: usize,
    /// Wall-clock budget per trial; an expired budget prunes the trial.
    pub per_trial_seconds: Option<f64>,
    pub early_stop_patience: usize,
    /// Training windows drawn per epoch in a trial.
    pub max_train_windows: Option<usize>,
    pub eval_split: EvalSplit,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population: 20,
            generations: 5,
            p_crossover: 0.9,
            p_mutation: None,
            per_trial_epochs: 5,
            per_trial_seconds: Some(600.0),
            early_stop_patience: 3,
            max_train_windows: Some(512),
            eval_split: EvalSplit::Test,
            jobs: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 || self.generations == 0 || self.per_trial_epochs == 0 {
            return Err(Error::Contract(
                "search needs population >= 2, generations >= 1 and per_trial_epochs >= 1".into(),
            ));
        }
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !unit(self.p_crossover) || !self.p_mutation.is_none_or(unit) {
            return Err(Error::Contract("crossover and mutation rates must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Pruned,
    Failed,
}

/// One evaluated genome, as stored in the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub schema_version: u32,
    pub trial_id: usize,
    pub generation: usize,
    pub slot: usize,
    pub seed: u64,
    pub genome: Genome,
    pub status: TrialStatus,
    /// Why a trial was pruned or failed.
    pub reason: Option<String>,
    /// Point-adjusted F1 on the evaluation split; the maximized objective.
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1_plain: Option<f64>,
    /// The minimized objective.
    pub parameter_count: usize,
    pub epochs_run: usize,
    pub training_time_seconds: f64,
    pub inference_time_seconds: f64,
}

impl TrialRecord {
    /// Objective vector of a completed trial.
    pub fn objectives(&self) -> Option<Vec<f64>> {
        match (self.status, self.f1) {
            (TrialStatus::Completed, Some(f1)) => Some(vec![f1, self.parameter_count as f64]),
            _ => None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub fn parse_ledger(text: &str, source_name: &str) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrialRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.schema_version != LEDGER_SCHEMA_VERSION {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                message: format!("unsupported schema_version {}", rec.schema_version),
            });
        }
        if rec.status == TrialStatus::Completed && !rec.f1.is_some_and(f64::is_finite) {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                message: "completed trial without a finite f1".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the trial in `slot` of `generation`, independent of the order
/// in which trials finish.
pub fn trial_seed(master: u64, generation: usize, slot: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ generation as u64) ^ slot as u64)
}

fn generation_rng(master: u64, generation: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(trial_seed(master, generation, usize::MAX))
}

/// Trains and scores one genome; errors become pruned or failed records.
pub fn evaluate_trial(
    ds: &TimeSeriesDataset,
    genome: &Genome,
    seed: u64,
    cfg: &SearchConfig,
    settings: &ThresholdSettings,
) -> TrialRecord {
    let train_cfg = TrainConfig {
        epochs: cfg.per_trial_epochs,
        seed,
        max_train_seconds: cfg.per_trial_seconds,
        early_stop_patience: cfg.early_stop_patience,
        max_train_windows: cfg.max_train_windows,
        ..TrainConfig::default()
    };
    let m = ds.feature_count();
    let mut rec = TrialRecord {
        schema_version: LEDGER_SCHEMA_VERSION,
        trial_id: 0,
        generation: 0,
        slot: 0,
        seed,
        genome: genome.clone(),
        status: TrialStatus::Failed,
        reason: None,
        f1: None,
        precision: None,
        recall: None,
        f1_plain: None,
        parameter_count: if genome.validate_for(m).is_ok() { parameter_count_formula(genome, m) } else { 0 },
        epochs_run: 0,
        training_time_seconds: 0.0,
        inference_time_seconds: 0.0,
    };
    let start = Instant::now();
    match train_and_evaluate(ds, genome, seed, &train_cfg, settings, cfg.eval_split) {
        Ok(out) => {
            rec.parameter_count = out.model.parameter_count();
            rec.epochs_run = out.report.epochs_run;
            rec.training_time_seconds = out.report.wall_clock_seconds;
            rec.inference_time_seconds = (start.elapsed().as_secs_f64() - out.report.wall_clock_seconds).max(0.0);
            if out.report.stop_reason.as_deref() == Some("time budget") {
                rec.status = TrialStatus::Pruned;
                rec.reason = Some("time budget expired".into());
            } else {
                rec.status = TrialStatus::Completed;
                rec.f1 = Some(out.adjusted.f1);
                rec.precision = Some(out.adjusted.precision);
                rec.recall = Some(out.adjusted.recall);
                rec.f1_plain = Some(out.plain.f1);
            }
        }
        Err(e @ Error::NonFinite { .. }) => {
            rec.status = TrialStatus::Pruned;
            rec.reason = Some(e.to_string());
            rec.training_time_seconds = start.elapsed().as_secs_f64();
        }
        Err(e) => {
            rec.status = TrialStatus::Failed;
            rec.reason = Some(e.to_string());
            rec.training_time_seconds = start.elapsed().as_secs_f64();
        }
    }
    rec
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    /// Every trial in generation and slot order.
    pub records: Vec<TrialRecord>,
    /// Indices into `records` of the rank-1 completed trials.
    pub front: Vec<usize>,
}

/// Rank and crowding distance of every completed record (`None` for the
/// others), over all completed records together.
pub fn rank_records(records: &[TrialRecord]) -> Result<Vec<Option<(usize, f64)>>> {
    let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].objectives().is_some()).collect();
    let pts: Vec<Vec<f64>> = idx.iter().map(|&i| records[i].objectives().expect("completed")).collect();
    let (r, c) = rank_and_crowd(&pts, &OBJECTIVES)?;
    let mut out = vec![None; records.len()];
    for (k, &i) in idx.iter().enumerate() {
        out[i] = Some((r[k], c[k]));
    }
    Ok(out)
}

/// Indices of the rank-1 completed records.
pub fn pareto_front(records: &[TrialRecord]) -> Result<Vec<usize>> {
    Ok(rank_records(records)?
        .iter()
        .enumerate()
        .filter_map(|(i, rc)| matches!(rc, Some((1, _))).then_some(i))
        .collect())
}

/// NSGA-II over genomes: a sampled first generation, then per generation
/// tournament-bred offspring merged with the parents and cut back to the
/// population size by rank and crowding. Trials of one generation run on
/// `jobs` threads; `on_record` sees every record in slot order.
pub fn run_search(
    ds: &TimeSeriesDataset,
    cfg: &SearchConfig,
    settings: &ThresholdSettings,
    master_seed: u64,
    on_record: &mut dyn FnMut(&TrialRecord) -> Result<()>,
) -> Result<SearchResult> {
    cfg.validate()?;
    let m = ds.feature_count();
    let p_mut = cfg.p_mutation.unwrap_or_else(default_mutation_rate);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::State(format!("thread pool: {e}")))?;
    let mut records: Vec<TrialRecord> = Vec::new();
    // indices into `records` of the current parent population
    let mut parents: Vec<usize> = Vec::new();
    for gen in 0..cfg.generations {
        let mut rng = generation_rng(master_seed, gen);
        let genomes: Vec<Genome> = if parents.len() >= 2 {
            let pts: Vec<Vec<f64>> = parents.iter().map(|&i| records[i].objectives().expect("completed")).collect();
            let (r, c) = rank_and_crowd(&pts, &OBJECTIVES)?;
            let pop: Vec<Genome> = parents.iter().map(|&i| records[i].genome.clone()).collect();
            evolve(&pop, &r, &c, cfg.population, cfg.p_crossover, p_mut, &mut rng)?
        } else {
            if gen > 0 {
                log::warn!("generation {gen}: fewer than 2 completed parents, sampling afresh");
            }
            (0..cfg.population).map(|_| Genome::sample(&mut rng, m)).collect()
        };
        let jobs: Vec<(usize, Genome)> = genomes.into_iter().enumerate().collect();
        let results: Vec<TrialRecord> = pool.install(|| {
            jobs.par_iter()
                .map(|(slot, g)| {
                    let mut rec = evaluate_trial(ds, g, trial_seed(master_seed, gen, *slot), cfg, settings);
                    rec.generation = gen;
                    rec.slot = *slot;
                    rec
                })
                .collect()
        });
        let first_new = records.len();
        for mut rec in results {
            rec.trial_id = records.len();
            log::info!(
                "trial {} gen {} slot {}: {:?} f1={:?} params={}",
                rec.trial_id,
                gen,
                rec.slot,
                rec.status,
                rec.f1,
                rec.parameter_count
            );
            on_record(&rec)?;
            records.push(rec);
        }
        // environmental selection over parents plus completed offspring
        let mut pool_idx: Vec<usize> = parents.clone();
        pool_idx.extend((first_new..records.len()).filter(|&i| records[i].objectives().is_some()));
        let pts: Vec<Vec<f64>> = pool_idx.iter().map(|&i| records[i].objectives().expect("completed")).collect();
        let (r, c) = rank_and_crowd(&pts, &OBJECTIVES)?;
        let mut order: Vec<usize> = (0..pool_idx.len()).collect();
        order.sort_by(|&a, &b| crowded_cmp(r[a], c[a], r[b], c[b]).then(a.cmp(&b)));
        parents = order.into_iter().take(cfg.population).map(|k| pool_idx[k]).collect();
    }
    let front = pareto_front(&records)?;
    if front.is_empty() {
        return Err(Error::NoCompletedTrials { trials: records.len() });
    }
    Ok(SearchResult { records, front })
}

/// `trial_id,f1,parameter_count,training_time,rank,crowding_distance` for
/// every completed trial.
pub fn pareto_csv(records: &[TrialRecord]) -> Result<String> {
    let mut out = String::from("# schema_version: 1\ntrial_id,f1,parameter_count,training_time,rank,crowding_distance\n");
    for (rec, rc) in records.iter().zip(rank_records(records)?) {
        if let (Some((rank, crowd)), Some(f1)) = (rc, rec.f1) {
            out.push_str(&format!(
                "{},{f1},{},{},{rank},{crowd}\n",
                rec.trial_id, rec.parameter_count, rec.training_time_seconds
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    BestF1,
    MinParams,
    Knee,
}

impl SelectionPolicy {
    pub const ALL: [SelectionPolicy; 3] = [SelectionPolicy::BestF1, SelectionPolicy::MinParams, SelectionPolicy::Knee];

    pub fn name(self) -> &'static str {
        match self {
            SelectionPolicy::BestF1 => "best_f1",
            SelectionPolicy::MinParams => "min_params",
            SelectionPolicy::Knee => "knee",
        }
    }
}

fn f1_of(r: &TrialRecord) -> f64 {
    r.f1.unwrap_or(f64::NEG_INFINITY)
}

/// Picks one record of a front. `best_f1` breaks ties by fewer parameters,
/// `min_params` by higher F1, and `knee` takes the member farthest from the
/// chord between the front's extremes after scaling both objectives to
/// `[0, 1]`.
pub fn select_from_front<'a>(front: &[&'a TrialRecord], policy: SelectionPolicy) -> Result<&'a TrialRecord> {
    if front.is_empty() {
        return Err(Error::Contract("cannot select from an empty front".into()));
    }
    let by_f1 = |a: &&&TrialRecord, b: &&&TrialRecord| {
        f1_of(a)
            .total_cmp(&f1_of(b))
            .then(b.parameter_count.cmp(&a.parameter_count))
            .then(b.trial_id.cmp(&a.trial_id))
    };
    let by_params = |a: &&&TrialRecord, b: &&&TrialRecord| {
        b.parameter_count
            .cmp(&a.parameter_count)
            .then(f1_of(a).total_cmp(&f1_of(b)))
            .then(b.trial_id.cmp(&a.trial_id))
    };
    let best = *front.iter().max_by(by_f1).expect("nonempty");
    let small = *front.iter().max_by(by_params).expect("nonempty");
    match policy {
        SelectionPolicy::BestF1 => Ok(best),
        SelectionPolicy::MinParams => Ok(small),
        SelectionPolicy::Knee => {
            let xs: Vec<f64> = front.iter().map(|r| r.parameter_count as f64).collect();
            let ys: Vec<f64> = front.iter().map(|r| f1_of(r)).collect();
            let span = |v: &[f64]| {
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, if hi > lo { hi - lo } else { 1.0 })
            };
            let ((xl, xr), (yl, yr)) = (span(&xs), span(&ys));
            let norm = |r: &TrialRecord| ((r.parameter_count as f64 - xl) / xr, (f1_of(r) - yl) / yr);
            let (a, b) = (norm(small), norm(best));
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len = (dx * dx + dy * dy).sqrt();
            if len == 0.0 {
                return Ok(best);
            }
            let dist = |r: &TrialRecord| {
                let (x, y) = norm(r);
                ((x - a.0) * dy - (y - a.1) * dx).abs() / len
            };
            let mut pick = best;
            let mut far = dist(best);
            for r in front {
                let d = dist(r);
                if d > far {
                    far = d;
                    pick = r;
                }
            }
            Ok(pick)
        }
    }
}
