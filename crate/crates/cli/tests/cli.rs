use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;
use transnas_core::model::{Genome, PhaseType};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_transnas"))
}

fn genome_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../genomes").join(name)
}

struct Run {
    dir: TempDir,
}

impl Run {
    fn new() -> Self {
        Run {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn write(&self, rel: &str, text: &str) -> PathBuf {
        let p = self.path(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(&p, text).unwrap();
        p
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&self.read(rel)).unwrap()
    }

    /// Runs the binary with `--config <config> --out <out>` prepended.
    fn cmd(&self, config: &str, out: &str, args: &[&str]) -> Output {
        let cfg = self.write(&format!("{out}.toml"), config);
        bin()
            .arg("--config")
            .arg(cfg)
            .arg("--out")
            .arg(self.path(out))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, config: &str, out: &str, args: &[&str]) -> Output {
        let o = self.cmd(config, out, args);
        assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
        o
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited by signal")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synthetic(train: usize, test: usize, features: usize, seed: u64) -> String {
    format!("[synthetic]\ntrain_len = {train}\ntest_len = {test}\nfeatures = {features}\nseed = {seed}\n")
}

fn small_genome(run: &Run, m: usize, phase: PhaseType) -> PathBuf {
    let mut g = Genome::from_json(&fs::read_to_string(genome_file("smap.json")).unwrap()).unwrap();
    g.n_heads = m;
    g.window_size = 10;
    g.dim_feedforward = 16;
    g.encoder_layers = 1;
    g.decoder_layers = 1;
    g.batch_size = 32;
    g.phase_type = phase;
    run.write(&format!("genome_{m}.json"), &g.to_json())
}

/// Data rows of a CSV written by the tool, split into cells.
fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

fn column(text: &str, name: &str) -> Vec<String> {
    let (header, rows) = csv_rows(text);
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.into_iter().map(|r| r[i].clone()).collect()
}

fn prepared(run: &Run, out: &str, train: usize, test: usize, m: usize) -> String {
    run.ok(&synthetic(train, test, m, 3), out, &["prepare"]);
    format!("[dataset]\nbundle = {:?}\n", run.path(out))
}

#[test]
fn prepare_metadata_matches_generator_report() {
    let run = Run::new();
    run.ok(&synthetic(400, 600, 3, 21), "bundle", &["prepare"]);
    let meta = run.json("bundle/metadata.json");
    let report = run.json("bundle/synthetic_report.json");
    assert_eq!(meta["anomaly_fraction"], report["anomaly_fraction"]);
    let labels: Vec<u8> = run.read("bundle/labels.csv").lines().filter_map(|l| l.trim().parse().ok()).collect();
    assert_eq!(labels.len(), 600);
    let fraction = labels.iter().filter(|&&l| l == 1).count() as f64 / 600.0;
    assert!((meta["anomaly_fraction"].as_f64().unwrap() - fraction).abs() < 1e-12);
    assert_eq!(meta["features"], 3);
    assert_eq!(meta["schema_version"], 1);
    assert!(run.path("bundle/prepare_config.toml").exists());
}

#[test]
fn prepare_refuses_to_overwrite_without_force() {
    let run = Run::new();
    let cfg = synthetic(100, 100, 2, 1);
    run.ok(&cfg, "bundle", &["prepare"]);
    let again = run.cmd(&cfg, "bundle", &["prepare"]);
    assert_eq!(code(&again), 3, "{}", stderr(&again));
    assert!(stderr(&again).contains("--force"));
    run.ok(&cfg, "bundle", &["prepare", "--force"]);
}

#[test]
fn prepare_names_a_missing_labels_file() {
    let run = Run::new();
    let series = "0.1,0.2\n0.3,0.4\n0.5,0.6\n";
    let train = run.write("raw/train.csv", series);
    let test = run.write("raw/test.csv", series);
    let labels = run.path("raw/missing_labels.csv");
    let cfg = format!("[dataset]\ntrain = {train:?}\ntest = {test:?}\nlabels = {labels:?}\n");
    let o = run.cmd(&cfg, "bundle", &["prepare"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing_labels.csv"), "{}", stderr(&o));
}

#[test]
fn prepare_reports_parse_errors_with_line() {
    let run = Run::new();
    let train = run.write("raw/train.csv", "1,2\n3,4\n");
    let test = run.write("raw/test.csv", "1,2\n3,oops\n");
    let labels = run.write("raw/labels.csv", "0\n1\n");
    let cfg = format!("[dataset]\ntrain = {train:?}\ntest = {test:?}\nlabels = {labels:?}\n");
    let o = run.cmd(&cfg, "bundle", &["prepare"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("test.csv:2"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let run = Run::new();
    let o = run.cmd("[synthetic]\nfeaturez = 3\n", "bundle", &["prepare"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("featurez"), "{}", stderr(&o));
}

#[test]
fn smd_genome_trains_on_38_features_deterministically() {
    let run = Run::new();
    let mut cfg = prepared(&run, "bundle", 120, 60, 38);
    cfg.push_str("[train]\nepochs = 1\nmax_train_windows = 8\n");
    let smd = genome_file("smd.json");
    let smd = smd.to_str().unwrap();
    run.ok(&cfg, "a", &["train", smd]);
    run.ok(&cfg, "b", &["train", smd]);
    let (a, b) = (fs::read(run.path("a/checkpoint.bin")).unwrap(), fs::read(run.path("b/checkpoint.bin")).unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b, "same config and seed must give identical checkpoints");
    let report = run.json("a/train_report.json");
    assert_eq!(report["epochs_run"], 1);
    assert!(run.read("a/loss_curve.csv").lines().count() >= 2);

    let g = Genome::from_json(&run.read("a/genome.json")).unwrap();
    assert_eq!(g.phase_type, PhaseType::TwoPhase);
    assert_eq!((g.encoder_layers, g.decoder_layers, g.window_size), (3, 1, 12));

    run.ok(&cfg, "c", &["--seed", "99", "train", smd]);
    assert_ne!(fs::read(run.path("c/checkpoint.bin")).unwrap(), a);
}

#[test]
fn one_second_budget_stops_early() {
    let run = Run::new();
    let mut cfg = prepared(&run, "bundle", 300, 50, 2);
    cfg.push_str("[train]\nepochs = 100000\nmax_train_seconds = 1.0\nearly_stop_patience = 0\n");
    let genome = small_genome(&run, 2, PhaseType::TwoPhase);
    let start = Instant::now();
    run.ok(&cfg, "model", &["train", genome.to_str().unwrap()]);
    assert!(start.elapsed() < Duration::from_secs(60));
    let report = run.json("model/train_report.json");
    assert_eq!(report["stopped_early"], true);
    assert_eq!(report["stop_reason"], "time budget");
}

#[test]
fn invalid_genome_lists_every_offending_field() {
    let run = Run::new();
    let cfg = prepared(&run, "bundle", 100, 50, 2);
    let mut g: Value = serde_json::from_str(&fs::read_to_string(genome_file("smap.json")).unwrap()).unwrap();
    g["dropout"] = 1.5.into();
    g["window_size"] = 0.into();
    let path = run.write("bad.json", &g.to_string());
    let o = run.cmd(&cfg, "model", &["train", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    for field in ["dropout", "window_size", "n_heads"] {
        assert!(err.contains(field), "{field} missing from:\n{err}");
    }
    assert!(!run.path("model/checkpoint.bin").exists());
}

fn trained(run: &Run, m: usize) -> (String, PathBuf) {
    let mut cfg = prepared(run, &format!("bundle{m}"), 400, 300, m);
    cfg.push_str("[train]\nepochs = 3\n");
    let genome = small_genome(run, m, PhaseType::TwoPhase);
    let out = format!("model{m}");
    run.ok(&cfg, &out, &["train", genome.to_str().unwrap()]);
    (cfg, run.path(&format!("{out}/checkpoint.bin")))
}

#[test]
fn detect_rejects_a_feature_count_mismatch() {
    let run = Run::new();
    let (_, ckpt) = trained(&run, 2);
    let other = prepared(&run, "bundle3", 100, 100, 3);
    let o = run.cmd(&other, "det", &["detect", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("features"), "{}", stderr(&o));
}

#[test]
fn threshold_modes_share_scores_but_not_thresholds() {
    let run = Run::new();
    let (cfg, ckpt) = trained(&run, 2);
    let ckpt = ckpt.to_str().unwrap();
    run.ok(&format!("{cfg}[scoring]\nmode = \"mat\"\n"), "mat", &["detect", ckpt]);
    run.ok(&format!("{cfg}[scoring]\nmode = \"pot\"\n"), "pot", &["detect", ckpt]);
    let (mat, pot) = (run.read("mat/scores.csv"), run.read("pot/scores.csv"));
    assert_eq!(column(&mat, "score"), column(&pot, "score"));
    assert_ne!(column(&mat, "threshold"), column(&pot, "threshold"));
    assert_eq!(column(&pot, "label").len(), 300);
}

#[test]
fn per_dimension_decision_is_any_exceedance() {
    let run = Run::new();
    let (cfg, ckpt) = trained(&run, 2);
    let cfg = format!("{cfg}[scoring]\nmode = \"pot\"\nper_dimension = true\n");
    run.ok(&cfg, "det", &["detect", ckpt.to_str().unwrap(), "--per-dim"]);
    let text = run.read("det/scores_per_dim.csv");
    let (header, rows) = csv_rows(&text);
    let at = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut flagged = 0;
    for r in &rows {
        let f = |name: &str| r[at(name)].parse::<f64>().unwrap();
        let any = (0..2).any(|c| f(&format!("score_{c}")) > f(&format!("threshold_{c}")));
        assert_eq!(r[at("decision")] == "1", any, "row {r:?}");
        flagged += usize::from(any);
    }
    let summary = run.json("det/detect_summary.json");
    assert_eq!(summary["flagged"], flagged);
    assert_eq!(column(&run.read("det/scores.csv"), "decision").iter().filter(|d| *d == "1").count(), flagged);
}

#[test]
fn clean_training_split_is_rarely_flagged() {
    let run = Run::new();
    let (cfg, ckpt) = trained(&run, 2);
    for (i, coeff) in [1e-2, 1e-4].into_iter().enumerate() {
        let out = format!("det{i}");
        let cfg = format!("{cfg}[scoring]\nmode = \"pot\"\ncoeff = {coeff}\n");
        run.ok(&cfg, &out, &["detect", ckpt.to_str().unwrap(), "--split", "train"]);
        let summary = run.json(&format!("{out}/detect_summary.json"));
        assert_eq!(summary["split"], "train");
        let rate = summary["flagged_fraction"].as_f64().unwrap();
        assert!(rate < 2.0 * coeff, "flagged {rate} of the training split at risk {coeff}");
    }
}

fn scores_csv(decisions: &[u8], labels: &[u8]) -> String {
    let mut s = String::from("# schema_version: 1\ntimestamp,score,threshold,decision,label\n");
    for (t, (d, l)) in decisions.iter().zip(labels).enumerate() {
        s.push_str(&format!("{t},{d}.5,1,{d},{l}\n"));
    }
    s
}

fn evaluated(run: &Run, out: &str, decisions: &[u8], labels: &[u8]) -> Value {
    let scores = run.write(&format!("{out}.csv"), &scores_csv(decisions, labels));
    run.ok("", out, &["evaluate", scores.to_str().unwrap()]);
    run.json(&format!("{out}/eval.json"))
}

#[test]
fn evaluate_hand_cases() {
    let run = Run::new();
    let labels = [0, 1, 1, 0, 0, 1, 0, 0];

    let perfect = evaluated(&run, "perfect", &labels, &labels);
    assert_eq!(perfect["plain"]["f1"], 1.0);
    assert_eq!(perfect["point_adjusted"]["f1"], 1.0);

    let silent = evaluated(&run, "silent", &[0; 8], &labels);
    assert_eq!(silent["plain"]["f1"], 0.0);
    assert_eq!(silent["plain"]["false_negatives"], 3);

    // tp at 1 and 5, fp at 3, fn at 2; adjustment fills index 2
    let mixed = evaluated(&run, "mixed", &[0, 1, 0, 1, 0, 1, 0, 0], &labels);
    let plain = &mixed["plain"];
    assert_eq!((plain["true_positives"].as_u64(), plain["false_positives"].as_u64()), (Some(2), Some(1)));
    assert!((plain["f1"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    let adjusted = &mixed["point_adjusted"];
    assert_eq!(adjusted["true_positives"], 3);
    assert!((adjusted["f1"].as_f64().unwrap() - 6.0 / 7.0).abs() < 1e-12);
    assert_eq!(mixed["schema_version"], 1);
}

#[test]
fn evaluate_uses_a_separate_labels_file() {
    let run = Run::new();
    let scores = run.write("s.csv", "timestamp,score,threshold,decision\n0,1,0.5,1\n1,0,0.5,0\n");
    let labels = run.write("l.csv", "1\n1\n");
    run.ok("", "ev", &["evaluate", scores.to_str().unwrap(), labels.to_str().unwrap()]);
    let e = run.json("ev/eval.json");
    assert!((e["plain"]["recall"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(e["point_adjusted"]["recall"], 1.0);
}

#[test]
fn evaluate_rejects_misaligned_labels() {
    let run = Run::new();
    let scores = run.write("s.csv", &scores_csv(&[0, 1, 1], &[0, 1, 1]));
    let labels = run.write("l.csv", "0\n1\n");
    let o = run.cmd("", "ev", &["evaluate", scores.to_str().unwrap(), labels.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("3 scores but 2 labels"), "{}", stderr(&o));
}

const SMOKE_SEARCH: &str = "[nas]\npopulation = 4\ngenerations = 1\njobs = 2\n";

#[test]
fn smoke_search_finishes_and_exports_the_front() {
    let run = Run::new();
    let cfg = format!("{}{SMOKE_SEARCH}", prepared(&run, "bundle", 100, 100, 2));
    let start = Instant::now();
    run.ok(&cfg, "search", &["search"]);
    assert!(start.elapsed() < Duration::from_secs(300), "took {:?}", start.elapsed());

    let ledger = run.read("search/ledger.jsonl");
    let records: Vec<Value> = ledger.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4);
    let best = records
        .iter()
        .filter(|r| r["status"] == "completed")
        .max_by(|a, b| a["f1"].as_f64().unwrap().total_cmp(&b["f1"].as_f64().unwrap()))
        .unwrap();
    let picked = Genome::from_json(&run.read("search/best_best_f1.json")).unwrap();
    let best_genome = Genome::from_json(&best["genome"].to_string()).unwrap();
    let f1_of_picked = records
        .iter()
        .filter(|r| Genome::from_json(&r["genome"].to_string()).unwrap() == picked)
        .filter_map(|r| r["f1"].as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(f1_of_picked, best["f1"].as_f64().unwrap(), "best genome {best_genome:?}");

    for name in ["pareto.csv", "best_min_params.json", "best_knee.json", "search_config.toml"] {
        assert!(run.path(&format!("search/{name}")).exists(), "{name}");
    }
    let pareto = run.read("search/pareto.csv");
    assert!(pareto.starts_with("# schema_version: 1\n"));

    // the pareto subcommand rebuilds the same front from the ledger
    let ledger_path = run.path("search/ledger.jsonl");
    run.ok("", "again", &["pareto", ledger_path.to_str().unwrap()]);
    assert_eq!(run.read("again/pareto.csv"), pareto);
    assert_eq!(run.read("again/best_knee.json"), run.read("search/best_knee.json"));
}

#[test]
fn search_without_completed_trials_exits_4() {
    let run = Run::new();
    let cfg = format!(
        "{}{SMOKE_SEARCH}per_trial_seconds = 1e-9\n",
        prepared(&run, "bundle", 100, 100, 2)
    );
    let o = run.cmd(&cfg, "search", &["search"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let ledger = run.read("search/ledger.jsonl");
    assert_eq!(ledger.lines().count(), 4);
    assert!(ledger.lines().all(|l| l.contains("\"pruned\"")));
}

fn eacs_values(run: &Run, out: &str, table: &str) -> Vec<(String, f64)> {
    let input = run.write(&format!("{out}.csv"), table);
    run.ok("", out, &["eacs", input.to_str().unwrap()]);
    let text = run.read(&format!("{out}/eacs.csv"));
    let names = column(&text, "name");
    let values = column(&text, "eacs").iter().map(|v| v.parse().unwrap()).collect::<Vec<f64>>();
    names.into_iter().zip(values).collect()
}

const EACS_HEADER: &str = "name,f1,training_time_seconds,parameter_count\n";

#[test]
fn eacs_single_row_sits_at_the_cohort_boundary() {
    let run = Run::new();
    let v = eacs_values(&run, "one", &format!("{EACS_HEADER}solo,0.7,12.5,4000\n"));
    assert_eq!(v.len(), 1);
    assert!((v[0].1 - 0.4).abs() < 1e-12, "{v:?}");
}

#[test]
fn eacs_two_row_cohort_and_order() {
    let run = Run::new();
    let rows = ["A,0.9,10,100\n", "B,0.8,100,1000\n"];
    let forward = eacs_values(&run, "fwd", &format!("{EACS_HEADER}{}{}", rows[0], rows[1]));
    let backward = eacs_values(&run, "bwd", &format!("{EACS_HEADER}{}{}", rows[1], rows[0]));
    assert_eq!(forward, backward);
    assert_eq!(forward[0].0, "A");
    assert!((forward[0].1 - 0.94).abs() < 1e-12);
    assert!((forward[1].1 - 0.3556).abs() < 1e-4);
}

#[test]
fn eacs_rejects_empty_input() {
    let run = Run::new();
    let input = run.write("empty.csv", EACS_HEADER);
    let o = run.cmd("", "out", &["eacs", input.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
