use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::checkpoint_bytes;
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::stores::ImageStoreManifest;
use crate::task_stream::{build_incremental_splits, ClassId, TaskDataset};
use crate::trainer::{
    evaluate_after_task, learn_task, run_sequence_with, AblationFlags, TaskOutcome, TrainConfig, TrainState,
};

use super::config::{ExperimentConfig, ExperimentData};
use super::report::emit_report;

pub const RESULTS_FILE: &str = "results.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ERROR_FILE: &str = "error.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_index: usize,
    pub classes: Vec<ClassId>,
    pub report: EvalReport,
    pub report_before_finetune: Option<EvalReport>,
    /// SHA-256 of the trained model's checkpoint bytes.
    pub checkpoint_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub tasks: Vec<TaskResult>,
}

/// mAP over the first task's classes, the remaining classes and all classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMaps {
    pub t1: f64,
    pub t2: f64,
    pub all: f64,
}

impl SplitMaps {
    pub fn from_report(report: &EvalReport) -> Self {
        Self { t1: report.map_old.unwrap_or(0.0), t2: report.map_new.unwrap_or(0.0), all: report.map_all }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub per_seed: Vec<SplitMaps>,
    pub median: SplitMaps,
}

impl TableRow {
    pub fn new(label: impl Into<String>, per_seed: Vec<SplitMaps>) -> Self {
        let median = SplitMaps {
            t1: median(per_seed.iter().map(|m| m.t1)),
            t2: median(per_seed.iter().map(|m| m.t2)),
            all: median(per_seed.iter().map(|m| m.all)),
        };
        Self { label: label.into(), per_seed, median }
    }
}

/// Everything a run directory's report is regenerated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunResults {
    Sequence { seeds: Vec<SeedResult> },
    Ablation { rows: Vec<TableRow> },
    AlphaSweep { alphas: Vec<f64>, rows: Vec<TableRow> },
    GammaAlphaGrid { gammas: Vec<usize>, alphas: Vec<f64>, rows: Vec<TableRow> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
}

/// Median; the mean of the two middle values for even counts, 0 when empty.
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn write_task_artifacts(
    dir: &Path,
    state: &TrainState,
    outcome: &TaskOutcome,
    checkpoint: &[u8],
    save: bool,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut log = BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?);
    for r in &outcome.summary.records {
        serde_json::to_writer(&mut log, r)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    if let Some(before) = &outcome.report_before_finetune {
        write_json(&dir.join("report_before_finetune.json"), before)?;
    }
    write_json(&dir.join("image_store.json"), &ImageStoreManifest::from_store(&state.image_store))?;
    if save {
        fs::write(dir.join("checkpoint.bin"), checkpoint)?;
    }
    Ok(())
}

/// Creates `out` and writes the manifest; returns the directory if any.
fn prepare(config: &ExperimentConfig, command: &str, out: Option<&Path>) -> Result<Option<PathBuf>> {
    config.validate()?;
    let Some(dir) = out else { return Ok(None) };
    fs::create_dir_all(dir)?;
    let manifest = RunManifest {
        name: config.name.clone(),
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config.hash(),
        seeds: config.seeds.clone(),
        config: config.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(Some(dir.to_path_buf()))
}

/// Persists results and the regenerated report, or the error.
fn finish(out: Option<&Path>, result: Result<RunResults>) -> Result<RunResults> {
    let Some(dir) = out else { return result };
    match result {
        Ok(results) => {
            write_json(&dir.join(RESULTS_FILE), &results)?;
            emit_report(dir)?;
            Ok(results)
        }
        Err(e) => {
            write_json(&dir.join(ERROR_FILE), &serde_json::json!({ "error": e.to_string() }))?;
            Err(e)
        }
    }
}

fn splits(config: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<TaskDataset>> {
    build_incremental_splits(&data.train, &config.task_specs()?, &data.registry)
}

/// Runs the full task sequence once per seed.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<RunResults> {
    let dir = prepare(config, "train", out)?;
    let result = (|| {
        let data = config.load_data()?;
        let datasets = splits(config, &data)?;
        let mut seeds = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            info!("seed {seed}: {} tasks", datasets.len());
            let (detector, train) = config.for_seed(seed);
            let mut state = TrainState::new(detector, &train)?;
            let mut tasks = Vec::new();
            run_sequence_with(&mut state, &datasets, &data.test, &train, &config.eval, |st, outcome| {
                let bytes = checkpoint_bytes(&outcome.model, Some(&st.optimizer))?;
                let task_index = outcome.summary.task_index;
                if let Some(d) = &dir {
                    let task_dir = d.join(format!("seed_{seed}")).join(format!("task_{task_index}"));
                    write_task_artifacts(&task_dir, st, outcome, &bytes, config.save_checkpoints)?;
                }
                info!("seed {seed} task {task_index}: mAP {:.3}", outcome.report.map_all);
                tasks.push(TaskResult {
                    task_index,
                    classes: datasets[task_index - 1].spec.class_ids.clone(),
                    report: outcome.report.clone(),
                    report_before_finetune: outcome.report_before_finetune.clone(),
                    checkpoint_sha256: hex::encode(Sha256::digest(&bytes)),
                });
                Ok(())
            })?;
            seeds.push(SeedResult { seed, tasks });
        }
        Ok(RunResults::Sequence { seeds })
    })();
    finish(dir.as_deref(), result)
}

fn require_two_tasks(datasets: &[TaskDataset]) -> Result<()> {
    if datasets.len() != 2 {
        return Err(Error::config(format!("this command needs a two-task setting, got {} tasks", datasets.len())));
    }
    Ok(())
}

fn first_task(
    config: &ExperimentConfig,
    seed: u64,
    train: &TrainConfig,
    datasets: &[TaskDataset],
) -> Result<TrainState> {
    let (detector, _) = config.for_seed(seed);
    let mut state = TrainState::new(detector, train)?;
    learn_task(&mut state, &datasets[0], train)?;
    Ok(state)
}

/// Trains the second task from a copy of `first` and evaluates it, returning
/// the reports with and without fine-tuning.
fn second_task(
    first: &TrainState,
    train: &TrainConfig,
    datasets: &[TaskDataset],
    data: &ExperimentData,
    config: &ExperimentConfig,
) -> Result<(EvalReport, Option<EvalReport>)> {
    let mut state = first.clone();
    state.freeze_teacher();
    learn_task(&mut state, &datasets[1], train)?;
    let classes: BTreeSet<ClassId> = datasets[1].spec.class_ids.iter().copied().collect();
    let (_, report, before) = evaluate_after_task(&state, train, &data.test, &classes, &config.eval)?;
    Ok((report, before))
}

/// Ablation rows in table order.
pub const ABLATION_ROWS: [AblationFlags; 6] = [
    AblationFlags { distill: true, warp: false, finetune: false },
    AblationFlags { distill: true, warp: false, finetune: true },
    AblationFlags { distill: false, warp: true, finetune: false },
    AblationFlags { distill: false, warp: true, finetune: true },
    AblationFlags { distill: true, warp: true, finetune: false },
    AblationFlags { distill: true, warp: true, finetune: true },
];

/// All six distillation / warp / fine-tuning combinations on a two-task
/// setting. Rows that differ only in fine-tuning share one trained model, and
/// rows with the same warp flag share the first task.
pub fn run_ablation_matrix(config: &ExperimentConfig, out: Option<&Path>) -> Result<RunResults> {
    let dir = prepare(config, "ablate", out)?;
    let result = (|| {
        let data = config.load_data()?;
        let datasets = splits(config, &data)?;
        require_two_tasks(&datasets)?;
        let mut per_row: Vec<Vec<SplitMaps>> = vec![Vec::new(); ABLATION_ROWS.len()];
        for &seed in &config.seeds {
            for warp in [false, true] {
                let (_, base) = config.for_seed(seed);
                let t1 = TrainConfig { flags: AblationFlags { distill: false, warp, finetune: false }, ..base.clone() };
                let first = first_task(config, seed, &t1, &datasets)?;
                for distill in [true, false] {
                    // the (no D, no G) pair is not an ablation row
                    if !distill && !warp {
                        continue;
                    }
                    let t2 = TrainConfig { flags: AblationFlags { distill, warp, finetune: true }, ..base.clone() };
                    let (tuned, before) = second_task(&first, &t2, &datasets, &data, config)?;
                    let before = before.ok_or_else(|| Error::invalid("fine-tuning did not run"))?;
                    for (i, f) in ABLATION_ROWS.iter().enumerate() {
                        if f.distill == distill && f.warp == warp {
                            let r = if f.finetune { &tuned } else { &before };
                            per_row[i].push(SplitMaps::from_report(r));
                        }
                    }
                    info!("seed {seed} D={distill} G={warp}: {:.3} -> {:.3}", before.map_all, tuned.map_all);
                }
            }
        }
        let rows = ABLATION_ROWS.iter().zip(per_row).map(|(f, v)| TableRow::new(f.label(), v)).collect();
        Ok(RunResults::Ablation { rows })
    })();
    finish(dir.as_deref(), result)
}

/// Second-task runs for each α with the configured flags, sharing the first
/// task per seed.
pub fn run_alpha_sweep(config: &ExperimentConfig, alphas: &[f64], out: Option<&Path>) -> Result<RunResults> {
    let dir = prepare(config, "sweep-alpha", out)?;
    let result = (|| {
        validate_alphas(alphas)?;
        let data = config.load_data()?;
        let datasets = splits(config, &data)?;
        require_two_tasks(&datasets)?;
        let mut per_row: Vec<Vec<SplitMaps>> = vec![Vec::new(); alphas.len()];
        for &seed in &config.seeds {
            let (_, base) = config.for_seed(seed);
            let first = first_task(config, seed, &base, &datasets)?;
            for (i, &alpha) in alphas.iter().enumerate() {
                let t2 = TrainConfig { alpha, ..base.clone() };
                let (report, _) = second_task(&first, &t2, &datasets, &data, config)?;
                info!("seed {seed} alpha {alpha}: {:.3}", report.map_all);
                per_row[i].push(SplitMaps::from_report(&report));
            }
        }
        let rows = alphas.iter().zip(per_row).map(|(a, v)| TableRow::new(format!("alpha={a}"), v)).collect();
        Ok(RunResults::AlphaSweep { alphas: alphas.to_vec(), rows })
    })();
    finish(dir.as_deref(), result)
}

fn validate_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::config("no alpha values given"));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::config(format!("alpha {a} is outside [0, 1]")));
    }
    Ok(())
}

/// Cross product of warp intervals and distillation weights. Rows are
/// γ-major.
pub fn run_gamma_alpha_grid(
    config: &ExperimentConfig,
    gammas: &[usize],
    alphas: &[f64],
    out: Option<&Path>,
) -> Result<RunResults> {
    let dir = prepare(config, "grid-gamma-alpha", out)?;
    let result = (|| {
        validate_alphas(alphas)?;
        if gammas.is_empty() || gammas.contains(&0) {
            return Err(Error::config("warp intervals must be a non-empty list of positive integers"));
        }
        let data = config.load_data()?;
        let datasets = splits(config, &data)?;
        require_two_tasks(&datasets)?;
        let mut per_row: Vec<Vec<SplitMaps>> = vec![Vec::new(); gammas.len() * alphas.len()];
        for &seed in &config.seeds {
            let (_, base) = config.for_seed(seed);
            for (gi, &gamma) in gammas.iter().enumerate() {
                let tg = TrainConfig { warp_interval: gamma, ..base.clone() };
                let first = first_task(config, seed, &tg, &datasets)?;
                for (ai, &alpha) in alphas.iter().enumerate() {
                    let t2 = TrainConfig { alpha, ..tg.clone() };
                    let (report, _) = second_task(&first, &t2, &datasets, &data, config)?;
                    per_row[gi * alphas.len() + ai].push(SplitMaps::from_report(&report));
                }
            }
        }
        let labels = gammas.iter().flat_map(|g| alphas.iter().map(move |a| format!("gamma={g} alpha={a}")));
        let rows = labels.zip(per_row).map(|(l, v)| TableRow::new(l, v)).collect();
        Ok(RunResults::GammaAlphaGrid { gammas: gammas.to_vec(), alphas: alphas.to_vec(), rows })
    })();
    finish(dir.as_deref(), result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median([3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median([4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median([]), 0.0);
    }

    #[test]
    fn ablation_rows_are_in_table_order() {
        let labels: Vec<_> = ABLATION_ROWS.iter().map(|f| f.label()).collect();
        assert_eq!(labels, ["D", "D+F", "G", "G+F", "D+G", "D+G+F"]);
    }
}
