//! One experiment run end to end: build the task and model from a config,
//! train to `max_steps` with per-step logging, measure discrepancy before
//! training and at every epoch boundary, probe conditioning on a fixed
//! cadence, and leave behind four artifacts in the output directory:
//!
//! - `train.csv`, `tid.csv`, `conditioning.csv` — metric streams
//! - `summary.json` — the run summary
//! - `model.nbck` — final checkpoint (skipped if the run diverged)
//!
//! Everything is driven by seeded streams, so the same config produces
//! byte-identical CSVs on every run. A divergence (non-finite loss or
//! statistics) flushes the logs written so far, records the reason in the
//! summary, and surfaces as [`RunnerError::Diverged`].

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use normbench_core::conditioning::{CondError, ConditionReport};
use normbench_core::model::{ModelError, TransformerEncoder};
use normbench_core::norm::NormMode;
use normbench_core::params::Binder;
use normbench_core::task::{make_task, stream_rng, Dataset, EncodedBatch, TaskError};
use normbench_core::tensor::Graph;
use normbench_core::tid::{compute_tid, PopulationSnapshot, Provenance, TidReport};
use normbench_core::train::{
    evaluate, refresh_population, train_step, Adam, EvalMode, EvalReport, TrainError,
};

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::config::ExperimentConfig;
use crate::csvlog::{
    cond_row, tid_avg_row, tid_layer_row, CsvWriter, TrainRow, COND_HEADER, TID_HEADER,
    TRAIN_HEADER,
};

/// Dropout draws use this stream id; the task generator owns 1–3 and the
/// epoch shuffler owns its own range.
const DROPOUT_STREAM: u64 = 4;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("task: {0}")]
    Task(#[from] TaskError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("summary: {0}")]
    Json(#[from] serde_json::Error),
    #[error("training diverged at step {step}: {reason} (partial logs preserved)")]
    Diverged { step: u64, reason: String },
    #[error("{0}")]
    Invalid(String),
}

impl RunnerError {
    fn from_train(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { step, reason } => RunnerError::Diverged { step, reason },
            TrainError::Model(m) => RunnerError::Model(m),
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io { path: path.display().to_string(), source }
}

/// Per-layer slice of a TID measurement, as serialized in the summary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TidLayerSummary {
    pub layer_index: usize,
    pub mean_tid: f64,
    pub var_tid: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TidSummary {
    pub epoch: u64,
    pub provenance: String,
    pub per_layer: Vec<TidLayerSummary>,
    pub avg_mean_tid: f64,
    pub avg_var_tid: f64,
}

impl TidSummary {
    fn from_report(report: &TidReport, provenance: Provenance) -> Self {
        TidSummary {
            epoch: report.epoch,
            provenance: provenance.as_str().to_string(),
            per_layer: report
                .per_layer
                .iter()
                .map(|l| TidLayerSummary {
                    layer_index: l.layer_index,
                    mean_tid: l.mean_tid,
                    var_tid: l.var_tid,
                })
                .collect(),
            avg_mean_tid: report.avg_mean_tid,
            avg_var_tid: report.avg_var_tid,
        }
    }
}

/// What a run leaves behind besides its artifact files. Fields that a
/// truncated (diverged) run never reached stay `None`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    /// Optimizer steps completed.
    pub steps: u64,
    /// Epoch label of the last measurement point.
    pub epochs: u64,
    pub wall_clock_secs: f64,
    pub final_train_ce: Option<f64>,
    pub final_penalty: Option<f64>,
    pub final_total_loss: Option<f64>,
    pub final_valid_loss: Option<f64>,
    pub final_valid_accuracy: Option<f64>,
    pub best_valid_loss: Option<f64>,
    pub best_valid_accuracy: Option<f64>,
    /// Last discrepancy measurement; absent for models without
    /// batch-statistics layers.
    pub final_tid: Option<TidSummary>,
    pub diverged: Option<DivergenceInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DivergenceInfo {
    pub step: u64,
    pub reason: String,
}

/// The population snapshot implied by the model's current running statistics.
/// `None` when the model has no batch-statistics layers.
pub fn stored_snapshot<T: normbench_core::tensor::Scalar>(
    model: &TransformerEncoder<T>,
    provenance: Provenance,
) -> Option<PopulationSnapshot> {
    let layers: Vec<(Vec<f64>, Vec<f64>)> = model
        .stat_layers()
        .iter()
        .map(|l| {
            let st = l.state().expect("stat layer").borrow();
            (
                st.running_mean.iter().map(|&x| x.to_f64()).collect(),
                st.running_var.iter().map(|&x| x.to_f64()).collect(),
            )
        })
        .collect();
    if layers.is_empty() {
        return None;
    }
    Some(PopulationSnapshot::from_mean_var(layers, provenance))
}

/// The dataset in generation order, chunked at `batch_size` — the batch
/// population that discrepancy is measured over.
pub fn train_chunks(data: &Dataset, batch_size: usize) -> Vec<EncodedBatch> {
    let n = data.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let indices: Vec<usize> = (start..end).collect();
        out.push(data.encode(&indices));
        start = end;
    }
    out
}

/// Measures TID of the model's current running statistics against the batch
/// statistics of `data` chunked at `batch_size`.
pub fn measure_tid<T: normbench_core::tensor::Scalar>(
    model: &TransformerEncoder<T>,
    data: &Dataset,
    batch_size: usize,
    epoch: u64,
) -> Result<Option<TidReport>, RunnerError> {
    let Some(snapshot) = stored_snapshot(model, Provenance::Ema) else {
        return Ok(None);
    };
    let batches = train_chunks(data, batch_size);
    let report = compute_tid(model, &batches, &snapshot, epoch)
        .map_err(|e| RunnerError::Invalid(format!("discrepancy measurement: {e}")))?;
    Ok(Some(report))
}

struct RunLogs {
    train: CsvWriter,
    tid: CsvWriter,
    cond: CsvWriter,
}

impl RunLogs {
    fn create(dir: &Path) -> Result<Self, RunnerError> {
        let open = |name: &str, header: &str| {
            let path = dir.join(name);
            CsvWriter::create(&path, header).map_err(io_at(&path))
        };
        Ok(RunLogs {
            train: open("train.csv", TRAIN_HEADER)?,
            tid: open("tid.csv", TID_HEADER)?,
            cond: open("conditioning.csv", COND_HEADER)?,
        })
    }

    fn write_tid(&mut self, report: &TidReport) -> std::io::Result<()> {
        for l in &report.per_layer {
            self.tid.row(&tid_layer_row(report.epoch, l.layer_index, l.mean_tid, l.var_tid))?;
        }
        self.tid.row(&tid_avg_row(report.epoch, report.avg_mean_tid, report.avg_var_tid))
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.train.flush()?;
        self.tid.flush()?;
        self.cond.flush()
    }
}

/// Executes one configured run into `out_dir`, creating it if needed.
///
/// On divergence the partial CSVs and a summary naming the failing step are
/// still written before the error is returned.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary, RunnerError> {
    std::fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;
    let started = Instant::now();

    let task = make_task(&cfg.task_spec(), cfg.seed)?;
    let mut model = TransformerEncoder::<f32>::new(cfg.model_config(), cfg.seed)?;
    let mut opt = Adam::new(&model, cfg.optim_config());
    let reg = cfg.regularizer();
    let mut dropout_rng =
        (cfg.model.dropout > 0.0).then(|| stream_rng(cfg.seed, DROPOUT_STREAM));

    let mut logs = RunLogs::create(out_dir)?;
    let mut summary = RunSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        steps: 0,
        epochs: 0,
        wall_clock_secs: 0.0,
        final_train_ce: None,
        final_penalty: None,
        final_total_loss: None,
        final_valid_loss: None,
        final_valid_accuracy: None,
        best_valid_loss: None,
        best_valid_accuracy: None,
        final_tid: None,
        diverged: None,
    };

    // Baseline discrepancy against the untouched (or preloaded) running
    // statistics: the "before training" measurement, epoch label 0.
    if let Some(report) = measure_tid(&model, &task.train, cfg.optim.batch_size, 0)? {
        logs.write_tid(&report).map_err(io_at(out_dir))?;
        summary.final_tid = Some(TidSummary::from_report(&report, Provenance::Ema));
    }

    let n = task.train.len();
    let bs = cfg.optim.batch_size;
    let max_steps = cfg.optim.max_steps;
    let mut epoch: u64 = 0;
    let finish = |summary: &mut RunSummary, logs: &mut RunLogs, started: Instant| {
        summary.wall_clock_secs = started.elapsed().as_secs_f64();
        logs.flush()
    };

    'training: loop {
        let order = normbench_core::train::epoch_order(n, cfg.seed, epoch);
        let chunks: Vec<&[usize]> = order.chunks(bs).collect();
        let last_chunk = chunks.len() - 1;
        for (ci, chunk) in chunks.into_iter().enumerate() {
            let batch = task.train.encode(chunk);
            let losses =
                match train_step(&mut model, &mut opt, &reg, &batch, dropout_rng.as_mut()) {
                    Ok(l) => l,
                    Err(e) => {
                        let err = RunnerError::from_train(e);
                        if let RunnerError::Diverged { step, reason } = &err {
                            summary.steps = opt.t;
                            summary.diverged =
                                Some(DivergenceInfo { step: *step, reason: reason.clone() });
                            finish(&mut summary, &mut logs, started).map_err(io_at(out_dir))?;
                            write_summary(out_dir, &summary)?;
                        }
                        return Err(err);
                    }
                };
            let t = opt.t;
            summary.steps = t;
            summary.final_train_ce = Some(losses.ce);
            summary.final_penalty = Some(losses.penalty);
            summary.final_total_loss = Some(losses.total);

            if cfg.measure.cond_every > 0 && t % cfg.measure.cond_every == 0 {
                for report in probe_conditioning(&model, &batch, t)? {
                    logs.cond
                        .row(&cond_row(t, report.layer_index, report.c_50, report.c_80, report.c_max))
                        .map_err(io_at(out_dir))?;
                }
            }

            let done = t >= max_steps;
            let epoch_end = ci == last_chunk;
            let mut row = TrainRow {
                step: t,
                epoch,
                lr: losses.lr,
                ce: losses.ce,
                penalty: losses.penalty,
                total: losses.total,
                valid: None,
            };
            if done || epoch_end {
                let label = epoch + 1;
                let eval = evaluate(&model, &task.valid, EvalMode::Population, cfg.measure.eval_batch)
                    .map_err(RunnerError::from_train)?;
                row.valid = Some((eval.loss, eval.accuracy));
                note_eval(&mut summary, &eval, label);
                if let Some(report) = measure_tid(&model, &task.train, bs, label)? {
                    logs.write_tid(&report).map_err(io_at(out_dir))?;
                    summary.final_tid = Some(TidSummary::from_report(&report, Provenance::Ema));
                }
                eprintln!(
                    "epoch {label}: step {t}, train {:.4}, valid {:.4}, acc {:.3}",
                    losses.total, eval.loss, eval.accuracy
                );
            }
            logs.train.row(&row.fields()).map_err(io_at(out_dir))?;
            if done {
                break 'training;
            }
        }
        epoch += 1;
    }

    finish(&mut summary, &mut logs, started).map_err(io_at(out_dir))?;
    let ck = checkpoint::capture(&model, opt.t, Provenance::Ema);
    ck.save(&out_dir.join("model.nbck"))?;
    write_summary(out_dir, &summary)?;
    Ok(summary)
}

fn note_eval(summary: &mut RunSummary, eval: &EvalReport, epoch_label: u64) {
    summary.epochs = epoch_label;
    summary.final_valid_loss = Some(eval.loss);
    summary.final_valid_accuracy = Some(eval.accuracy);
    let better_loss = summary.best_valid_loss.map_or(true, |b| eval.loss < b);
    if better_loss {
        summary.best_valid_loss = Some(eval.loss);
    }
    let better_acc = summary.best_valid_accuracy.map_or(true, |b| eval.accuracy > b);
    if better_acc {
        summary.best_valid_accuracy = Some(eval.accuracy);
    }
}

/// Spectral conditioning of the features entering each block (plus the
/// stack output), measured in a side forward that leaves every running
/// statistic untouched. Probes that cannot be taken — too few valid tokens
/// in a trailing chunk, or a solver failure on an about-to-diverge model —
/// are skipped rather than fatal; divergence proper is caught by the next
/// train step.
fn probe_conditioning(
    model: &TransformerEncoder<f32>,
    batch: &EncodedBatch,
    step: u64,
) -> Result<Vec<ConditionReport>, RunnerError> {
    let g: Graph<f32> = Graph::new();
    let binder = Binder::new(&g);
    let pass = model.forward_opts(&binder, batch, NormMode::Measure, true, None)?;
    let mut out = Vec::with_capacity(pass.block_inputs.len());
    for (i, feats) in pass.block_inputs.iter().enumerate() {
        match ConditionReport::compute(feats, &batch.mask, i, step) {
            Ok(report) => out.push(report),
            Err(CondError::NotEnoughTokens { .. }) => {}
            Err(e) => eprintln!("conditioning probe skipped at step {step}, layer {i}: {e}"),
        }
    }
    Ok(out)
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<(), RunnerError> {
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(summary)?;
    std::fs::write(&path, text + "\n").map_err(io_at(&path))
}

pub fn read_summary(dir: &Path) -> Result<RunSummary, RunnerError> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(io_at(&path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Refreshes a checkpoint's population statistics by streaming the training
/// set through measure-mode forwards, with every parameter frozen.
///
/// `epochs = 0` copies the checkpoint through byte-for-byte. The output
/// checkpoint keeps the step it was trained to and is tagged `reestimated`.
pub fn reestimate(
    cfg: &ExperimentConfig,
    ckpt_path: &Path,
    epochs: usize,
    out_path: &Path,
) -> Result<(), RunnerError> {
    let ck = Checkpoint::load(ckpt_path)?;
    let mut model = TransformerEncoder::<f32>::new(cfg.model_config(), cfg.seed)?;
    let meta = checkpoint::restore(&mut model, &ck)?;
    if model.stat_layers().is_empty() {
        return Err(RunnerError::Invalid("no batch-statistics layers".into()));
    }
    if epochs == 0 {
        if let Some(parent) = out_path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(io_at(parent))?;
            }
        }
        std::fs::write(out_path, ck.to_bytes()).map_err(io_at(out_path))?;
        return Ok(());
    }
    let task = make_task(&cfg.task_spec(), cfg.seed)?;
    refresh_population(&model, &task.train, epochs, cfg.optim.batch_size)
        .map_err(RunnerError::from_train)?;
    let refreshed = checkpoint::capture(&model, meta.step, Provenance::Reestimated);
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_at(parent))?;
        }
    }
    refreshed.save(out_path)?;
    Ok(())
}

/// Re-derives a run summary from the CSV streams alone, for checking that
/// the logs carry the whole story. Identity fields (hash, seed, wall
/// clock, divergence) are taken from `summary.json` when present; every
/// metric field is recomputed from `train.csv` and `tid.csv`.
pub fn report(dir: &Path) -> Result<RunSummary, RunnerError> {
    let mut summary = read_summary(dir).unwrap_or(RunSummary {
        config_hash: String::new(),
        seed: 0,
        steps: 0,
        epochs: 0,
        wall_clock_secs: 0.0,
        final_train_ce: None,
        final_penalty: None,
        final_total_loss: None,
        final_valid_loss: None,
        final_valid_accuracy: None,
        best_valid_loss: None,
        best_valid_accuracy: None,
        final_tid: None,
        diverged: None,
    });
    summary.steps = 0;
    summary.epochs = 0;
    summary.final_train_ce = None;
    summary.final_penalty = None;
    summary.final_total_loss = None;
    summary.final_valid_loss = None;
    summary.final_valid_accuracy = None;
    summary.best_valid_loss = None;
    summary.best_valid_accuracy = None;
    summary.final_tid = None;

    let parse = |field: &str, line: usize, s: &str| -> Result<f64, RunnerError> {
        if s == "inf" {
            return Ok(f64::INFINITY);
        }
        s.parse::<f64>().map_err(|_| {
            RunnerError::Invalid(format!("train.csv line {line}: bad {field} `{s}`"))
        })
    };

    let train_path = dir.join("train.csv");
    let text = std::fs::read_to_string(&train_path).map_err(io_at(&train_path))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRAIN_HEADER) {
        return Err(RunnerError::Invalid("train.csv: unexpected header".into()));
    }
    let mut evals = 0u64;
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(RunnerError::Invalid(format!(
                "train.csv line {}: {} fields (expected 8)",
                i + 2,
                f.len()
            )));
        }
        summary.steps = f[0]
            .parse()
            .map_err(|_| RunnerError::Invalid(format!("train.csv line {}: bad step", i + 2)))?;
        summary.final_train_ce = Some(parse("ce_loss", i + 2, f[3])?);
        summary.final_penalty = Some(parse("penalty", i + 2, f[4])?);
        summary.final_total_loss = Some(parse("total_loss", i + 2, f[5])?);
        if !f[6].is_empty() {
            let vl = parse("valid_loss", i + 2, f[6])?;
            let va = parse("valid_metric", i + 2, f[7])?;
            evals += 1;
            summary.final_valid_loss = Some(vl);
            summary.final_valid_accuracy = Some(va);
            if summary.best_valid_loss.map_or(true, |b| vl < b) {
                summary.best_valid_loss = Some(vl);
            }
            if summary.best_valid_accuracy.map_or(true, |b| va > b) {
                summary.best_valid_accuracy = Some(va);
            }
        }
    }
    // One valid-bearing row closes each epoch, so the count is the label of
    // the last measurement point.
    summary.epochs = evals;

    let tid_path = dir.join("tid.csv");
    let text = std::fs::read_to_string(&tid_path).map_err(io_at(&tid_path))?;
    let mut lines = text.lines();
    if lines.next() != Some(TID_HEADER) {
        return Err(RunnerError::Invalid("tid.csv: unexpected header".into()));
    }
    let mut current: Option<TidSummary> = None;
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(RunnerError::Invalid(format!(
                "tid.csv line {}: {} fields (expected 5)",
                i + 2,
                f.len()
            )));
        }
        let epoch: u64 = f[0]
            .parse()
            .map_err(|_| RunnerError::Invalid(format!("tid.csv line {}: bad epoch", i + 2)))?;
        let mean = parse("mean_tid", i + 2, f[2])?;
        let var = parse("var_tid", i + 2, f[3])?;
        let entry = current.get_or_insert_with(|| TidSummary {
            epoch,
            provenance: Provenance::Ema.as_str().into(),
            per_layer: Vec::new(),
            avg_mean_tid: 0.0,
            avg_var_tid: 0.0,
        });
        if entry.epoch != epoch {
            entry.epoch = epoch;
            entry.per_layer.clear();
        }
        if f[4] == "1" {
            entry.avg_mean_tid = mean;
            entry.avg_var_tid = var;
        } else {
            let layer_index: usize = f[1].parse().map_err(|_| {
                RunnerError::Invalid(format!("tid.csv line {}: bad layer index", i + 2))
            })?;
            entry.per_layer.push(TidLayerSummary { layer_index, mean_tid: mean, var_tid: var });
        }
    }
    summary.final_tid = current.filter(|t| !t.per_layer.is_empty());
    Ok(summary)
}
