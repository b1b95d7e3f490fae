use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use nap_core::benchmarks::{
    load_cifar_bin, load_idx_dataset, make_synthetic_dataset, run_continual, run_twin, run_walk, ContinualConfig,
    ContinualStream, Dataset, LabelMode, TrainingSetup, TwinConfig,
};
use nap_core::gradcheck::{self, OpReport};
use nap_core::metrics::MetricRow;
use nap_core::network::Network;
use nap_core::{rng, NapError, Tensor};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::output::{self, RowWriter, WalkRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    /// Ordinary training on the dataset's own labels.
    Train,
    Continual,
    Twin,
    RandomWalk,
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Continual => "continual",
            Command::Twin => "twin",
            Command::RandomWalk => "randomwalk",
            Command::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    /// A NaN or infinity stopped the run; rows written before it remain.
    NumericFault,
    /// The gradient check ran but some op exceeded its tolerance.
    CheckFailed,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::NumericFault => "numeric_fault",
            RunStatus::CheckFailed => "check_failed",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Ok => 0,
            RunStatus::NumericFault => 3,
            RunStatus::CheckFailed => 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub status: RunStatus,
    pub summary: serde_json::Value,
}

/// Loads the configured dataset, shaped to match the architecture input.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let a = &cfg.architecture;
    let b = &cfg.benchmark;
    let data = match b.dataset {
        DatasetKind::Synthetic => {
            let d: usize = a.input_shape.iter().product();
            make_synthetic_dataset(b.samples, d, a.classes, rng::derive_seed(cfg.seed(), 0xda7a))?
        }
        DatasetKind::Idx => {
            let images = b.data_path.as_deref().expect("validated");
            let labels = b.labels_path.as_deref().expect("validated");
            load_idx_dataset(Path::new(images), Path::new(labels), a.classes)?
        }
        DatasetKind::Cifar => load_cifar_bin(Path::new(b.data_path.as_deref().expect("validated")))?,
    };
    if data.classes > a.classes {
        anyhow::bail!("dataset has {} classes, architecture.classes is {}", data.classes, a.classes);
    }
    let mut shape = vec![data.len()];
    shape.extend_from_slice(&a.input_shape);
    let inputs = data.inputs.reshape(&shape).with_context(|| {
        format!(
            "dataset samples of shape {:?} do not fit architecture.input_shape {:?} ({:?})",
            data.sample_shape(),
            a.input_shape,
            a.kind
        )
    })?;
    Ok(Dataset::new(inputs, data.labels, a.classes)?)
}

fn is_fault(e: &anyhow::Error) -> Option<&NapError> {
    e.downcast_ref::<NapError>().filter(|n| matches!(n, NapError::NumericFault { .. }))
}

/// Runs `command` and writes its artifacts under `dir` (after the output
/// root override).
pub fn execute(command: Command, cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome> {
    let errors = cfg.validation_errors();
    if !errors.is_empty() {
        return Err(crate::config::ConfigError { errors }.into());
    }
    let dir = output::resolve_output_dir(dir);
    output::prepare_dir(&dir)?;
    std::fs::write(dir.join("resolved_config.toml"), cfg.to_canonical())?;
    log::info!("{} run writing to {}", command.name(), dir.display());

    let result = match command {
        Command::Train | Command::Continual => continual(command, cfg, &dir),
        Command::Twin => twin(cfg, &dir),
        Command::RandomWalk => walk(cfg, &dir),
        Command::Gradcheck => grad(cfg, &dir),
    };
    let (status, mut summary, text) = match result {
        Ok(v) => v,
        Err(e) => match is_fault(&e) {
            Some(fault) => {
                log::error!("{fault}");
                let summary = json!({ "error": fault.to_string() });
                (RunStatus::NumericFault, summary, format!("numeric fault: {fault}\n"))
            }
            None => return Err(e),
        },
    };
    let obj = summary.as_object_mut().expect("summary is an object");
    obj.insert("command".into(), json!(command.name()));
    obj.insert("status".into(), json!(status.as_str()));
    obj.insert("seed".into(), json!(cfg.seed()));
    let text = format!("command: {}\nstatus: {}\n{text}", command.name(), status.as_str());
    output::write_summary(&dir, &summary, &text)?;
    Ok(RunOutcome { dir, status, summary })
}

type Section = (RunStatus, serde_json::Value, String);

fn continual(command: Command, cfg: &ExperimentConfig, dir: &Path) -> Result<Section> {
    let b = &cfg.benchmark;
    let seed = cfg.seed();
    let data = load_dataset(cfg)?;
    let mode = if command == Command::Train { LabelMode::Original } else { b.label_mode };
    let stream = ContinualStream::new(data, mode, rng::derive_seed(seed, 0x5e9));
    let mut net = Network::build(&cfg.architecture(), false, rng::derive_seed(seed, 0x4e7))?;
    let ccfg = ContinualConfig {
        num_tasks: b.num_tasks,
        steps_per_task: b.steps_per_task,
        batch_size: b.batch_size,
        probe_size: b.probe_size,
        metric_every: cfg.output.metric_every,
        reset_optimizer_per_task: cfg.optimizer.reset_per_task,
        rank_threshold: b.rank_threshold,
        seed: rng::derive_seed(seed, 0xc0),
    };
    let setup = TrainingSetup {
        optimizer: cfg.optimizer(),
        schedule: cfg.schedule(),
        projection: cfg.projection(),
        baseline: cfg.baseline(),
    };
    let mut writer = RowWriter::create::<MetricRow>(dir)?;
    let mut last: Option<MetricRow> = None;
    let mut io_error = None;
    let result = run_continual(&mut net, &stream, &ccfg, &setup, &mut |row| {
        last = Some(row.clone());
        writer.write(row).map_err(|e| {
            let msg = e.to_string();
            io_error = Some(e);
            NapError::Io(msg)
        })
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let s = result?;
    let last = last.expect("at least one row per task");
    let final_acc = s.task_accuracy.last().copied().unwrap_or(0.0);
    let summary = json!({
        "rows": writer.rows(),
        "steps": s.steps,
        "task_accuracy": s.task_accuracy,
        "task_end_param_norm": s.task_end_param_norm,
        "last_task_accuracy": final_acc,
        "final_dead_fraction": s.final_dead_fraction,
        "final_linearized_fraction": last.linearized_fraction,
        "final_feature_rank": s.final_feature_rank,
        "peak_param_norm": s.peak_param_norm,
        "final_param_norm": last.param_norm,
    });
    let mut text = String::new();
    writeln!(text, "steps: {}", s.steps)?;
    writeln!(text, "last task accuracy: {final_acc:.4}")?;
    writeln!(text, "final dead fraction: {:.4}", s.final_dead_fraction)?;
    writeln!(text, "final feature rank: {}", s.final_feature_rank)?;
    writeln!(text, "peak parameter norm: {:.4}", s.peak_param_norm)?;
    writeln!(text, "task  accuracy  end_norm")?;
    for (k, (acc, norm)) in s.task_accuracy.iter().zip(&s.task_end_param_norm).enumerate() {
        writeln!(text, "{k:>4}  {acc:>8.4}  {norm:>8.3}")?;
    }
    Ok((RunStatus::Ok, summary, text))
}

fn twin(cfg: &ExperimentConfig, dir: &Path) -> Result<Section> {
    let b = &cfg.benchmark;
    let data = load_dataset(cfg)?;
    let tcfg = TwinConfig {
        architecture: cfg.architecture(),
        optimizer: cfg.optimizer(),
        lr: b.twin_lr,
        rescale: b.twin_rescale,
        steps: b.twin_steps,
        batch_size: b.batch_size,
        eval_size: b.eval_size,
        seed: cfg.seed(),
    };
    let report = run_twin(&tcfg, &data)?;
    let mut writer = RowWriter::create::<nap_core::benchmarks::TwinRow>(dir)?;
    let every = cfg.output.metric_every as u64;
    let last_step = report.rows.last().map(|r| r.step).unwrap_or(0);
    for row in report.rows.iter().filter(|r| r.step % every == 0 || r.step == last_step) {
        writer.write(row)?;
    }
    let summary = json!({
        "rows": writer.rows(),
        "rescale": b.twin_rescale,
        "max_discrepancy": report.max_discrepancy,
        "final_discrepancy": report.final_discrepancy,
    });
    let text = format!(
        "rescale: {:?}\nmax discrepancy: {:.6e}\nfinal discrepancy: {:.6e}\n",
        b.twin_rescale, report.max_discrepancy, report.final_discrepancy
    );
    Ok((RunStatus::Ok, summary, text))
}

fn walk(cfg: &ExperimentConfig, dir: &Path) -> Result<Section> {
    let b = &cfg.benchmark;
    let stats = run_walk(b.walk_dim, b.walk_steps, b.walk_process, b.walk_trials, b.walk_init, cfg.seed())?;
    let mut writer = RowWriter::create::<WalkRow>(dir)?;
    let every = cfg.output.metric_every;
    for (t, &m) in stats.mean_dead.iter().enumerate() {
        if t % every == 0 || t == b.walk_steps {
            writer.write(&WalkRow {
                step: t as u64,
                mean_dead: m,
                dead_fraction: m / b.walk_dim as f64,
            })?;
        }
    }
    let decreases: Vec<usize> = (0..b.walk_trials).map(|k| stats.decreases(k)).collect();
    let summary = json!({
        "rows": writer.rows(),
        "process": b.walk_process,
        "final_dead_fraction": stats.final_dead_fraction(),
        "mean_decreases": stats.mean_decreases(),
        "decreases_per_trial": decreases,
    });
    let text = format!(
        "process: {:?}\nfinal dead fraction: {:.4}\nmean decreases per trial: {:.2}\n",
        b.walk_process,
        stats.final_dead_fraction(),
        stats.mean_decreases()
    );
    Ok((RunStatus::Ok, summary, text))
}

fn grad(cfg: &ExperimentConfig, dir: &Path) -> Result<Section> {
    let seed = cfg.seed();
    let mut report = gradcheck::run_suite(cfg.benchmark.gradcheck_instances, seed)?;

    let net = Network::build(&cfg.architecture(), false, rng::derive_seed(seed, 0x4e7))?;
    let mut r = rng::stream(seed, 0x9c);
    let mut shape = vec![4];
    shape.extend_from_slice(&cfg.architecture.input_shape);
    let x = Tensor::randn(&shape, 1.0, &mut r);
    let labels: Vec<usize> = (0..4).map(|i| i % cfg.architecture.classes).collect();
    let err = gradcheck::check_network(&net, &x, &labels)?;
    report.ops.push(OpReport {
        op: "configured_network".into(),
        instances: 1,
        max_rel_error: err,
        passed: err < gradcheck::REL_TOLERANCE,
    });

    let mut writer = RowWriter::create::<OpReport>(dir)?;
    let mut text = String::new();
    writeln!(text, "{:<24} {:>9} {:>14} {:>6}", "op", "instances", "max_rel_error", "pass")?;
    for op in &report.ops {
        writer.write(op)?;
        writeln!(text, "{:<24} {:>9} {:>14.3e} {:>6}", op.op, op.instances, op.max_rel_error, op.passed)?;
    }
    let passed = report.all_passed();
    let summary = json!({
        "rows": writer.rows(),
        "all_passed": passed,
        "tolerance": gradcheck::REL_TOLERANCE,
        "ops": report.ops,
    });
    let status = if passed { RunStatus::Ok } else { RunStatus::CheckFailed };
    Ok((status, summary, text))
}
