//! Continual classification: a fixed input set whose labels are
//! re-randomized at every task boundary.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::baselines::{Baseline, BaselineSpec};
use crate::error::{NapError, Result};
use crate::metrics::{self, MetricRow, RANK_THRESHOLD};
use crate::network::Network;
use crate::optim::{effective_lr, Optimizer, OptimizerConfig, Schedule, StepRates};
use crate::projection::{self, ProjectionPolicy};
use crate::rng::{self, NapRng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Fresh uniform labels for every sample, independent of the input.
    #[default]
    RandomAssignment,
    /// A random bijection applied to the original classes.
    ClassPermutation,
    /// The dataset's own labels, unchanged across tasks.
    Original,
}

/// A dataset plus the per-task relabeling rule.
#[derive(Clone, Debug)]
pub struct ContinualStream {
    pub data: Dataset,
    pub mode: LabelMode,
    pub seed: u64,
}

impl ContinualStream {
    pub fn new(data: Dataset, mode: LabelMode, seed: u64) -> Self {
        Self { data, mode, seed }
    }

    /// Labels in force during `task`; a pure function of `(seed, task)`.
    pub fn labels_for_task(&self, task: usize) -> Vec<usize> {
        let mut r = rng::stream(rng::derive_seed(self.seed, 0x7a5c), task as u64);
        let k = self.data.classes;
        match self.mode {
            LabelMode::Original => self.data.labels.clone(),
            LabelMode::RandomAssignment => (0..self.data.len()).map(|_| r.random_range(0..k)).collect(),
            LabelMode::ClassPermutation => {
                let mut perm: Vec<usize> = (0..k).collect();
                perm.shuffle(&mut r);
                self.data.labels.iter().map(|&y| perm[y]).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualConfig {
    pub num_tasks: usize,
    pub steps_per_task: usize,
    pub batch_size: usize,
    pub probe_size: usize,
    /// Rows are emitted every `metric_every` steps and at each task end.
    pub metric_every: usize,
    pub reset_optimizer_per_task: bool,
    pub rank_threshold: f64,
    pub seed: u64,
}

impl ContinualConfig {
    pub fn new(num_tasks: usize, steps_per_task: usize, seed: u64) -> Self {
        Self {
            num_tasks,
            steps_per_task,
            batch_size: 32,
            probe_size: 256,
            metric_every: 10,
            reset_optimizer_per_task: false,
            rank_threshold: RANK_THRESHOLD,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_tasks", self.num_tasks),
            ("steps_per_task", self.steps_per_task),
            ("batch_size", self.batch_size),
            ("probe_size", self.probe_size),
            ("metric_every", self.metric_every),
        ] {
            if v == 0 {
                return Err(NapError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Optimizer, schedule and interventions shared by the runners.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSetup {
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub projection: ProjectionPolicy,
    pub baseline: BaselineSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContinualSummary {
    /// Mean online accuracy over all steps of each task.
    pub task_accuracy: Vec<f64>,
    /// Global parameter norm at the end of each task.
    pub task_end_param_norm: Vec<f64>,
    pub final_dead_fraction: f64,
    pub final_feature_rank: usize,
    pub peak_param_norm: f64,
    pub steps: u64,
}

fn sample_indices(n: usize, k: usize, rng: &mut NapRng) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

fn rates(net: &Network, schedule: &Schedule, t: u64) -> StepRates {
    let base = schedule.value(t);
    let weight_overrides = match &schedule.layer_multipliers {
        None => Vec::new(),
        Some(_) => (0..net.num_layers()).map(|l| Some(schedule.layer_value(t, l))).collect(),
    };
    StepRates {
        base,
        weight_overrides,
    }
}

/// Trains `net` on the stream, calling `sink` for every metric row. On a
/// numeric fault the rows already emitted stand and the error is returned.
pub fn run_continual(
    net: &mut Network,
    stream: &ContinualStream,
    cfg: &ContinualConfig,
    setup: &TrainingSetup,
    sink: &mut dyn FnMut(&MetricRow) -> Result<()>,
) -> Result<ContinualSummary> {
    cfg.validate()?;
    setup.optimizer.validate()?;
    setup.schedule.validate()?;
    setup.projection.validate()?;
    setup.baseline.validate()?;
    if stream.data.sample_shape() != net.architecture().input_shape.as_slice() {
        return Err(NapError::shape(
            "run_continual",
            stream.data.sample_shape(),
            &net.architecture().input_shape,
        ));
    }

    let mut opt = Optimizer::new(setup.optimizer);
    let mut baseline = Baseline::new(setup.baseline, net, rng::derive_seed(cfg.seed, 1));
    let mut batch_rng = rng::stream(cfg.seed, 2);
    let mut probe_rng = rng::stream(cfg.seed, 3);
    let elr_mode = setup.optimizer.kind.elr_mode();
    let n = stream.data.len();
    let mut summary = ContinualSummary {
        peak_param_norm: net.global_norm(),
        ..Default::default()
    };

    let mut t: u64 = 0;
    for task in 0..cfg.num_tasks {
        let labels = stream.labels_for_task(task);
        let probe = stream.data.gather(&sample_indices(n, cfg.probe_size, &mut probe_rng));
        if task > 0 {
            baseline.on_task_boundary(net, setup.schedule.value(t), &probe)?;
            if cfg.reset_optimizer_per_task {
                opt.reset();
            }
        }
        let mut acc_sum = 0.0;
        for s in 0..cfg.steps_per_task {
            let idx = sample_indices(n, cfg.batch_size, &mut batch_rng);
            let x = stream.data.gather(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();

            let eval = net.evaluate(&x, &y)?;
            if !eval.loss.is_finite() {
                return Err(NapError::NumericFault {
                    what: format!("loss {} at step {t}", eval.loss),
                    layer: None,
                });
            }
            let accuracy = metrics::online_accuracy(&eval.logits, &y)?;
            acc_sum += accuracy;

            let step_rates = rates(net, &setup.schedule, t);
            baseline.on_step(net, step_rates.base, &probe)?;
            opt.step(net, &eval.grads, &step_rates)?;
            projection::maybe_project(net, &setup.projection, t + 1)?;
            t += 1;

            let param_norm = net.global_norm();
            summary.peak_param_norm = summary.peak_param_norm.max(param_norm);
            let task_end = s + 1 == cfg.steps_per_task;
            if t % cfg.metric_every as u64 == 0 || task_end {
                let stats = metrics::probe_stats(net, &probe, cfg.rank_threshold)?;
                let norms = net.param_norms();
                let row = MetricRow {
                    step: t,
                    task,
                    online_accuracy: accuracy,
                    loss: eval.loss,
                    param_norm,
                    grad_norm: metrics::grad_global_norm(&eval.grads),
                    layer_param_norms: norms.layers.iter().map(|l| l.weight).collect(),
                    feature_rank: stats.feature_rank,
                    dead_fraction: stats.dead_fraction,
                    linearized_fraction: stats.linearized_fraction,
                    layer_dead_fractions: stats.layers.iter().map(|(_, u)| u.dead).collect(),
                    effective_lr: effective_lr(step_rates.base, param_norm, elr_mode)?,
                    lr: step_rates.base,
                };
                sink(&row)?;
                if task_end {
                    summary.final_dead_fraction = stats.dead_fraction;
                    summary.final_feature_rank = stats.feature_rank;
                }
            }
        }
        summary.task_accuracy.push(acc_sum / cfg.steps_per_task as f64);
        summary.task_end_param_norm.push(net.global_norm());
    }
    summary.steps = t;
    Ok(summary)
}
