use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::datagen::{self, Dataset, EnvSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, LeakageReport, MetricsReport, SplitLabel};
use crate::models::ModelParams;
use crate::rng;
use crate::training::{self, Mode, TrainData, TrainHistory};

pub const METRICS_CSV_HEADER: &str = "model,split,auroc,auprc,brier,ece,env_acc";

/// One point of an experiment plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    /// Row name in reports, e.g. `full` or `full_l0.1_g10`.
    pub label: String,
    pub mode: Mode,
    pub seed_index: usize,
    pub lambda: f64,
    pub gamma: f64,
}

/// Seed streams of one seed index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    pub data: u64,
    pub init: u64,
    pub train: u64,
    pub probe: u64,
}

impl SeedSet {
    pub fn new(master_seed: u64, seed_index: usize) -> Self {
        let base = rng::derive_seed(master_seed, seed_index as u64);
        SeedSet {
            data: rng::derive_seed(base, 11),
            init: rng::derive_seed(base, 12),
            train: rng::derive_seed(base, 13),
            probe: rng::derive_seed(base, 14),
        }
    }
}

/// Everything generated for one seed, shared by every mode run on it.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedData {
    pub suite: Vec<EnvSpec>,
    pub train: TrainData,
    pub holdout: Dataset,
}

pub fn prepare_data(config: &ExperimentConfig, seeds: SeedSet) -> Result<SeedData> {
    let suite = datagen::env_suite(&config.suite_profile(), config.num_envs, seeds.data)?;
    let (train, holdout) = datagen::loeo_split(&suite, config.holdout_env(), config.n_per_env)?;
    let train = TrainData::from_datasets(train, config.valid_frac, seeds.data)?;
    Ok(SeedData { suite, train, holdout })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub in_distribution: MetricsReport,
    pub held_out: MetricsReport,
    pub leakage: LeakageReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec: RunSpec,
    pub seeds: SeedSet,
    pub config: ExperimentConfig,
    pub metrics: Option<RunMetrics>,
    /// Set when the run aborted; metrics are then absent.
    pub failure: Option<String>,
    /// Paths relative to the run directory.
    pub history_file: String,
    pub checkpoint_file: String,
    pub started_unix: f64,
    pub finished_unix: f64,
}

impl RunRecord {
    pub fn relative_dir(&self) -> PathBuf {
        PathBuf::from(&self.spec.label).join(format!("seed{}", self.spec.seed_index))
    }

    /// Rows of the metrics CSV for this run, without header.
    pub fn metrics_rows(&self, model: &str) -> String {
        let mut s = String::new();
        if let Some(m) = &self.metrics {
            for r in [&m.in_distribution, &m.held_out] {
                let _ = writeln!(
                    s,
                    "{model},{},{},{},{},{},{}",
                    r.split, r.auroc, r.auprc, r.brier, r.ece, m.leakage.env_accuracy
                );
            }
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("record serializes");
        write_file(&dir.join("record.json"), &json)
    }

    pub fn load(path: &Path) -> Result<RunRecord> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// In-distribution metrics (mean over training environments' validation
/// rows), held-out metrics, and environment leakage of the validation-row
/// embeddings.
pub fn evaluate(params: &ModelParams, data: &SeedData, config: &ExperimentConfig, probe_seed: u64) -> Result<RunMetrics> {
    let per_env = data
        .train
        .envs
        .iter()
        .map(|e| {
            let probs = params.predict_proba(&e.valid.x)?;
            MetricsReport::evaluate(&probs, &e.valid.y, config.ece_bins, SplitLabel::InDistribution)
        })
        .collect::<Result<Vec<_>>>()?;
    let in_distribution = MetricsReport::mean(&per_env, SplitLabel::InDistribution)?;
    let probs = params.predict_proba(&data.holdout.x)?;
    let held_out = MetricsReport::evaluate(&probs, &data.holdout.y, config.ece_bins, SplitLabel::HeldOut)?;
    let (x, ids) = data.train.pooled_valid()?;
    let h = params.embed(&x)?;
    let leakage = metrics::leakage_probe(&h, &ids, config.probe_train_frac, probe_seed)?;
    Ok(RunMetrics {
        in_distribution,
        held_out,
        leakage,
    })
}

/// Train and evaluate one plan point. Returns the fitted parameters and
/// history on success.
pub fn execute(config: &ExperimentConfig, spec: &RunSpec, data: &SeedData) -> Result<(ModelParams, TrainHistory, RunMetrics)> {
    let seeds = SeedSet::new(config.master_seed, spec.seed_index);
    let arch = config.arch_config(seeds.init);
    let mut tc = config.train_config(spec.mode, seeds.train);
    tc.lambda = spec.lambda;
    tc.gamma = spec.gamma;
    let (params, history) = training::train(&arch, &data.train, &tc)?;
    let metrics = evaluate(&params, data, config, seeds.probe)?;
    Ok((params, history, metrics))
}

/// Every configured mode on every seed, at the configured λ and γ.
pub fn plan_modes(config: &ExperimentConfig, modes: &[Mode]) -> Vec<RunSpec> {
    (0..config.num_seeds)
        .flat_map(|s| {
            modes.iter().map(move |&mode| RunSpec {
                label: mode.to_string(),
                mode,
                seed_index: s,
                lambda: config.lambda,
                gamma: config.gamma,
            })
        })
        .collect()
}

/// Full-mode runs over the λ × γ grid.
pub fn plan_sweep(config: &ExperimentConfig) -> Vec<RunSpec> {
    let mut plan = Vec::new();
    for s in 0..config.num_seeds {
        for &lambda in &config.lambda_grid {
            for &gamma in &config.gamma_grid {
                plan.push(RunSpec {
                    label: format!("full_l{lambda}_g{gamma}"),
                    mode: Mode::Full,
                    seed_index: s,
                    lambda,
                    gamma,
                });
            }
        }
    }
    plan
}

/// Execute a plan and persist every run under `out_dir/<label>/seed<k>/`:
/// `config.toml`, `history.csv`, `checkpoint.txt`, `metrics.csv` and
/// `record.json`. Failed runs keep their directory with a `FAILED` marker.
/// Also writes `out_dir/metrics.csv` with every run's rows.
pub fn run_plan(config: &ExperimentConfig, plan: &[RunSpec], out_dir: &Path) -> Result<Vec<RunRecord>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(plan.len());
    let mut seed_indices: Vec<usize> = plan.iter().map(|s| s.seed_index).collect();
    seed_indices.sort_unstable();
    seed_indices.dedup();

    for seed_index in seed_indices {
        let seeds = SeedSet::new(config.master_seed, seed_index);
        let data = prepare_data(config, seeds)?;
        for spec in plan.iter().filter(|s| s.seed_index == seed_index) {
            let started = unix_now();
            let mut record = RunRecord {
                spec: spec.clone(),
                seeds,
                config: config.clone(),
                metrics: None,
                failure: None,
                history_file: "history.csv".into(),
                checkpoint_file: "checkpoint.txt".into(),
                started_unix: started,
                finished_unix: started,
            };
            let dir = out_dir.join(record.relative_dir());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_file(&dir.join("config.toml"), &config.to_toml())?;
            let _ = std::fs::remove_file(dir.join("FAILED"));
            match execute(config, spec, &data) {
                Ok((params, history, metrics)) => {
                    record.metrics = Some(metrics);
                    write_file(&dir.join(&record.history_file), &history.to_csv())?;
                    params.save(&dir.join(&record.checkpoint_file))?;
                    let csv = format!("{METRICS_CSV_HEADER}\n{}", record.metrics_rows(&spec.label));
                    write_file(&dir.join("metrics.csv"), &csv)?;
                }
                Err(e) => {
                    record.failure = Some(e.to_string());
                    write_file(&dir.join("FAILED"), &format!("{e}\n"))?;
                }
            }
            record.finished_unix = unix_now();
            record.save(&dir)?;
            records.push(record);
        }
    }

    let mut all = format!("{METRICS_CSV_HEADER}\n");
    for r in &records {
        all.push_str(&r.metrics_rows(&format!("{}/seed{}", r.spec.label, r.spec.seed_index)));
    }
    write_file(&out_dir.join("metrics.csv"), &all)?;
    Ok(records)
}

/// Run every configured mode on every seed into the configured output
/// directory.
pub fn run_experiment(config_path: &Path) -> Result<Vec<RunRecord>> {
    let config = ExperimentConfig::load(config_path)?;
    run_plan(&config, &plan_modes(&config, &config.modes), &config.output_dir)
}

/// ERM, adversarial-only, IRM-only and full on shared data and seeds.
pub fn ablation_suite(config_path: &Path) -> Result<Vec<RunRecord>> {
    let config = ExperimentConfig::load(config_path)?;
    run_plan(&config, &plan_modes(&config, &Mode::ALL), &config.output_dir)
}

/// Load every `record.json` below `run_dir`, sorted by label then seed.
pub fn load_records(run_dir: &Path) -> Result<Vec<RunRecord>> {
    let mut found = Vec::new();
    let mut stack = vec![run_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "record.json") {
                found.push(RunRecord::load(&path)?);
            }
        }
    }
    found.sort_by(|a, b| {
        a.spec
            .label
            .cmp(&b.spec.label)
            .then(a.spec.seed_index.cmp(&b.spec.seed_index))
    });
    Ok(found)
}
