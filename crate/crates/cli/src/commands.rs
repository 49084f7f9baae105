use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use transnas_core::config::RunConfig;
use transnas_core::dataset::{
    append_rolling_stats, load_bundle, load_csv, make_windows, normalize, parse_labels, save_csv, synth_generate,
    TimeSeriesDataset,
};
use transnas_core::model::checkpoint;
use transnas_core::model::{AnomalyModel, Genome};
use transnas_core::nas::{
    pareto_csv, pareto_front, parse_ledger, run_search, select_from_front, SelectionPolicy, TrialRecord,
    TrialStatus,
};
use transnas_core::pipeline;
use transnas_core::scoring::{eacs_cohort, evaluate as score_eval, parse_score_csv, EacsRow, EacsWeights, EvalReport, PotFit};
use transnas_core::training::train as train_model;
use transnas_core::Error;

use crate::Split;

const SCHEMA_VERSION: u32 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NoCompletedTrials { .. } => 4,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub struct Context {
    pub cfg: RunConfig,
    pub force: bool,
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    /// Refuses to run when any output exists and `--force` is absent, then
    /// creates the output directory and echoes the effective config.
    fn claim(&self, command: &str, names: &[String]) -> Result<()> {
        let config_name = format!("{command}_config.toml");
        if !self.force {
            for name in names.iter().chain(std::iter::once(&config_name)) {
                let p = self.out(name);
                if p.exists() {
                    return Err(CliError {
                        code: 3,
                        message: format!("{} exists; pass --force to replace it", p.display()),
                    });
                }
            }
        }
        fs::create_dir_all(&self.cfg.out).map_err(|e| Error::io(&self.cfg.out, e))?;
        let argv: Vec<String> = std::env::args().collect();
        let echo = format!("# command: {}\n{}", argv.join(" "), self.cfg.to_toml());
        write(&self.out(&config_name), echo.as_bytes())
    }

    fn bundle(&self, flag: Option<&Path>) -> Result<TimeSeriesDataset> {
        let dir = flag
            .map(Path::to_path_buf)
            .or_else(|| self.cfg.dataset.bundle.clone())
            .ok_or_else(|| CliError::input("no dataset bundle: set dataset.bundle or pass --data"))?;
        Ok(load_bundle(&dir)?)
    }
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write(path, format!("{text}\n").as_bytes())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e).into())
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

pub fn prepare(ctx: &Context) -> Result<()> {
    let d = &ctx.cfg.dataset;
    let raw = match (&d.train, &d.test, &d.labels) {
        (None, None, None) => None,
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => {
            return Err(CliError::input(
                "dataset.train, dataset.test and dataset.labels must be given together",
            ))
        }
    };
    let mut outputs = names(&["train.csv", "test.csv", "labels.csv", "metadata.json"]);
    if raw.is_none() {
        outputs.push("synthetic_report.json".into());
    }
    let (ds, report) = match raw {
        Some((a, b, c)) => (load_csv(a, b, c)?, None),
        None => {
            let (ds, rep) = synth_generate(&ctx.cfg.synthetic)?;
            (ds, Some(rep))
        }
    };
    ctx.claim("prepare", &outputs)?;
    let mut ds = normalize(&ds, d.normalize_eps)?;
    if d.rolling_stats_window > 0 {
        ds = append_rolling_stats(&ds, d.rolling_stats_window)?;
    }
    save_csv(&ds, &ctx.cfg.out)?;
    write_json(&ctx.out("metadata.json"), &ds.metadata())?;
    if let Some(rep) = report {
        write_json(&ctx.out("synthetic_report.json"), &rep)?;
    }
    log::info!("prepared {} features into {}", ds.feature_count(), ctx.cfg.out.display());
    Ok(())
}

fn load_genome(path: &Path, m: usize) -> Result<Genome> {
    let g = Genome::from_json(&read(path)?).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let mut problems: Vec<String> = g.violations().iter().map(ToString::to_string).collect();
    if g.n_heads != m {
        problems.push(format!("genome field `n_heads` = {} must equal the feature count {m}", g.n_heads));
    }
    if !problems.is_empty() {
        return Err(CliError::input(format!("{}: invalid genome\n  {}", path.display(), problems.join("\n  "))));
    }
    Ok(g)
}

pub fn train(ctx: &Context, genome_path: &Path, data: Option<&Path>) -> Result<()> {
    let ds = ctx.bundle(data)?;
    let genome = load_genome(genome_path, ds.feature_count())?;
    ctx.claim(
        "train",
        &names(&["checkpoint.bin", "train_report.json", "loss_curve.csv", "genome.json"]),
    )?;
    let mut model = AnomalyModel::build(&genome, ds.feature_count(), ctx.cfg.seed)?;
    let (train_w, _) = make_windows(&ds, genome.window_size)?;
    let report = train_model(&mut model, &train_w, &ctx.cfg.train_config())?;
    checkpoint::save(&model, &ctx.out("checkpoint.bin"))?;
    write_json(&ctx.out("train_report.json"), &report)?;
    write(&ctx.out("loss_curve.csv"), report.loss_curve_csv().as_bytes())?;
    write(&ctx.out("genome.json"), format!("{}\n", genome.to_json()).as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct DetectSummary {
    schema_version: u32,
    split: &'static str,
    timestamps: usize,
    flagged: usize,
    flagged_fraction: f64,
    pot: Vec<PotFit>,
}

pub fn detect(ctx: &Context, checkpoint_path: &Path, data: Option<&Path>, split: Split, per_dim: bool) -> Result<()> {
    let ds = ctx.bundle(data)?;
    let model = checkpoint::load(checkpoint_path)?;
    if model.feature_count() != ds.feature_count() {
        return Err(CliError::input(format!(
            "checkpoint expects {} features but the bundle has {}",
            model.feature_count(),
            ds.feature_count()
        )));
    }
    let mut outputs = names(&["scores.csv", "detect_summary.json"]);
    if per_dim {
        outputs.push("scores_per_dim.csv".into());
    }
    ctx.claim("detect", &outputs)?;
    let (train_w, test_w) = make_windows(&ds, model.window_size())?;
    let (target, labels, split_name) = match split {
        Split::Train => (&train_w, None, "train"),
        Split::Test => (&test_w, Some(&ds.test_labels[..]), "test"),
    };
    let scores = pipeline::detect(&model, &train_w, target, &ctx.cfg.scoring, &ctx.cfg.inference)?;
    write(&ctx.out("scores.csv"), scores.to_csv(labels).as_bytes())?;
    if per_dim {
        write(&ctx.out("scores_per_dim.csv"), scores.to_dimension_csv().as_bytes())?;
    }
    let flagged = scores.decisions.iter().filter(|&&d| d == 1).count();
    write_json(
        &ctx.out("detect_summary.json"),
        &DetectSummary {
            schema_version: SCHEMA_VERSION,
            split: split_name,
            timestamps: scores.len(),
            flagged,
            flagged_fraction: flagged as f64 / scores.len().max(1) as f64,
            pot: scores.pot.clone(),
        },
    )
}

#[derive(Serialize)]
struct EvalFile {
    schema_version: u32,
    timestamps: usize,
    plain: EvalReport,
    point_adjusted: EvalReport,
}

pub fn evaluate(ctx: &Context, scores_path: &Path, labels_path: Option<&Path>) -> Result<()> {
    let rows = parse_score_csv(&read(scores_path)?, &scores_path.display().to_string())?;
    let decisions: Vec<u8> = rows.iter().map(|r| r.decision).collect();
    let labels = match labels_path {
        Some(p) => parse_labels(&read(p)?, &p.display().to_string())?,
        None => rows
            .iter()
            .map(|r| r.label)
            .collect::<Option<Vec<u8>>>()
            .ok_or_else(|| CliError::input(format!("{} has no label column; pass a labels file", scores_path.display())))?,
    };
    if labels.len() != decisions.len() {
        return Err(CliError::input(format!(
            "{} scores but {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    ctx.claim("evaluate", &names(&["eval.json"]))?;
    let file = EvalFile {
        schema_version: SCHEMA_VERSION,
        timestamps: decisions.len(),
        plain: score_eval(&decisions, &labels, false)?,
        point_adjusted: score_eval(&decisions, &labels, true)?,
    };
    write_json(&ctx.out("eval.json"), &file)
}

fn front_outputs() -> Vec<String> {
    let mut v = names(&["pareto.csv"]);
    v.extend(SelectionPolicy::ALL.iter().map(|p| format!("best_{}.json", p.name())));
    v
}

fn export_front(ctx: &Context, records: &[TrialRecord]) -> Result<()> {
    write(&ctx.out("pareto.csv"), pareto_csv(records)?.as_bytes())?;
    let front: Vec<&TrialRecord> = pareto_front(records)?.into_iter().map(|i| &records[i]).collect();
    if front.is_empty() {
        return Err(Error::NoCompletedTrials { trials: records.len() }.into());
    }
    for policy in SelectionPolicy::ALL {
        let pick = select_from_front(&front, policy)?;
        log::info!("{}: trial {} f1 {:?} params {}", policy.name(), pick.trial_id, pick.f1, pick.parameter_count);
        write(
            &ctx.out(&format!("best_{}.json", policy.name())),
            format!("{}\n", pick.genome.to_json()).as_bytes(),
        )?;
    }
    Ok(())
}

pub fn search(ctx: &Context, data: Option<&Path>) -> Result<()> {
    let ds = ctx.bundle(data)?;
    let mut outputs = names(&["ledger.jsonl"]);
    outputs.extend(front_outputs());
    ctx.claim("search", &outputs)?;
    let ledger_path = ctx.out("ledger.jsonl");
    let mut ledger = String::new();
    write(&ledger_path, b"")?;
    let result = run_search(&ds, &ctx.cfg.nas, &ctx.cfg.scoring, ctx.cfg.seed, &mut |rec| {
        ledger.push_str(&rec.to_json_line());
        ledger.push('\n');
        fs::write(&ledger_path, &ledger).map_err(|e| Error::io(&ledger_path, e))
    })?;
    let completed = result.records.iter().filter(|r| r.status == TrialStatus::Completed).count();
    eprintln!(
        "{} trials, {completed} completed, front of {}",
        result.records.len(),
        result.front.len()
    );
    export_front(ctx, &result.records)
}

pub fn pareto(ctx: &Context, ledger_path: &Path) -> Result<()> {
    let records = parse_ledger(&read(ledger_path)?, &ledger_path.display().to_string())?;
    ctx.claim("pareto", &front_outputs())?;
    export_front(ctx, &records)
}

fn eacs_rows(text: &str, source: &str) -> Result<Vec<EacsRow>> {
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if first.trim_start().starts_with('{') {
        return Ok(parse_ledger(text, source)?
            .into_iter()
            .filter(|r| r.status == TrialStatus::Completed)
            .map(|r| EacsRow {
                name: format!("trial_{}", r.trial_id),
                f1: r.f1.unwrap_or(0.0),
                training_time_seconds: r.training_time_seconds,
                parameter_count: r.parameter_count as f64,
            })
            .collect());
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    reader
        .deserialize::<EacsRow>()
        .map(|r| {
            r.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                CliError::input(format!("{source}:{line}: {e}"))
            })
        })
        .collect()
}

pub fn eacs(ctx: &Context, input: &Path) -> Result<()> {
    let rows = eacs_rows(&read(input)?, &input.display().to_string())?;
    let values = eacs_cohort(&rows, &EacsWeights::default())?;
    ctx.claim("eacs", &names(&["eacs.csv"]))?;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut out = format!("# schema_version: {SCHEMA_VERSION}\nname,f1,training_time_seconds,parameter_count,eacs\n");
    for i in order {
        let r = &rows[i];
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name, r.f1, r.training_time_seconds, r.parameter_count, values[i]
        ));
    }
    write(&ctx.out("eacs.csv"), out.as_bytes())
}
