//! Experiment configuration: a TOML document with flat sections. Unknown
//! keys and invalid values are collected into one report instead of
//! failing on the first problem.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use nap_core::autodiff::NormScale;
use nap_core::baselines::{Application, BaselineKind, BaselineSpec};
use nap_core::benchmarks::{LabelMode, WalkInit, WalkProcess};
use nap_core::network::{Activation, Architecture, NormKind};
use nap_core::optim::{OptimizerConfig, OptimizerKind, RescaleMode, Schedule, ScheduleKind};
use nap_core::projection::{ProjectionPolicy, ProjectionScope, ScaleOffsetMode};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("invalid config:\n{}", .errors.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
pub struct ConfigError {
    pub errors: Vec<FieldError>,
}

impl ConfigError {
    fn single(field: &str, message: impl Into<String>) -> Self {
        Self {
            errors: vec![FieldError {
                field: field.into(),
                message: message.into(),
            }],
        }
    }

    pub fn mentions(&self, field: &str) -> bool {
        self.errors.iter().any(|e| e.field == field)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    Cnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Relu,
    LeakyRelu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormName {
    None,
    Rms,
    Layer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchitectureSection {
    pub kind: ArchKind,
    /// `[d]` for an MLP, `[c, h, w]` for a CNN.
    pub input_shape: Vec<usize>,
    pub hidden: Vec<usize>,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
    pub activation: ActivationName,
    pub leaky_slope: f64,
    /// Normalization before hidden nonlinearities when `nap` is off.
    pub norm: NormName,
    /// Insert layer norm everywhere and drop biases.
    pub nap: bool,
    pub norm_scale: NormScale,
    pub bias: bool,
}

impl Default for ArchitectureSection {
    fn default() -> Self {
        Self {
            kind: ArchKind::Mlp,
            input_shape: vec![32],
            hidden: vec![128, 128],
            conv_channels: vec![8],
            kernel: 3,
            classes: 10,
            activation: ActivationName::Relu,
            leaky_slope: 0.01,
            norm: NormName::None,
            nap: true,
            norm_scale: NormScale::UnitNorm,
            bias: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub rms_decay: f64,
    pub reset_per_task: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let c = OptimizerConfig::new(OptimizerKind::Adam);
        Self {
            kind: c.kind,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            momentum: c.momentum,
            rms_decay: c.rms_decay,
            reset_per_task: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePreset {
    Constant,
    Linear,
    LinearHalf,
    CosineWarmup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub kind: SchedulePreset,
    pub lr: f64,
    pub start: f64,
    pub end: f64,
    /// Defaults to half the total step count.
    pub end_step: Option<u64>,
    pub init: f64,
    pub peak: f64,
    pub warmup_steps: u64,
    /// Defaults to the total step count.
    pub horizon: Option<u64>,
    pub layer_multipliers: Option<Vec<f64>>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: SchedulePreset::Constant,
            lr: 1e-3,
            start: nap_core::optim::LINEAR_START_LR,
            end: nap_core::optim::END_LR,
            end_step: None,
            init: nap_core::optim::WARMUP_INIT_LR,
            peak: nap_core::optim::WARMUP_PEAK_LR,
            warmup_steps: nap_core::optim::WARMUP_STEPS,
            horizon: None,
            layer_multipliers: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleOffsetName {
    Project,
    Decay,
    Free,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionSection {
    pub enabled: bool,
    pub interval: u64,
    pub scale_offset: ScaleOffsetName,
    pub alpha: f64,
    pub scope: ProjectionScope,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        Self {
            enabled: true,
            interval: 1,
            scale_offset: ScaleOffsetName::Decay,
            alpha: 0.999,
            scope: ProjectionScope::All,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineName {
    None,
    L2,
    Regenerative,
    ShrinkPerturb,
    Redo,
    Langevin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSection {
    pub kind: BaselineName,
    pub lambda: f64,
    pub shrink: f64,
    pub noise: f64,
    pub tau: f64,
    pub sigma: f64,
    /// Defaults to per-task for shrink-and-perturb and ReDo, per-step
    /// otherwise.
    pub application: Option<Application>,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            kind: BaselineName::None,
            lambda: 1e-4,
            shrink: 0.8,
            noise: 0.01,
            tau: 0.1,
            sigma: 1e-4,
            application: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
    Cifar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSection {
    pub seed: Option<u64>,
    pub dataset: DatasetKind,
    pub samples: usize,
    pub data_path: Option<String>,
    pub labels_path: Option<String>,
    pub num_tasks: usize,
    pub steps_per_task: usize,
    pub batch_size: usize,
    pub probe_size: usize,
    pub label_mode: LabelMode,
    pub rank_threshold: f64,
    pub twin_steps: usize,
    pub twin_rescale: RescaleMode,
    pub twin_lr: f64,
    pub eval_size: usize,
    pub walk_dim: usize,
    pub walk_steps: usize,
    pub walk_trials: usize,
    pub walk_process: WalkProcess,
    pub walk_init: WalkInit,
    pub gradcheck_instances: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            seed: None,
            dataset: DatasetKind::Synthetic,
            samples: 2048,
            data_path: None,
            labels_path: None,
            num_tasks: 20,
            steps_per_task: 2000,
            batch_size: 32,
            probe_size: 256,
            label_mode: LabelMode::RandomAssignment,
            rank_threshold: nap_core::metrics::RANK_THRESHOLD,
            twin_steps: 500,
            twin_rescale: RescaleMode::PerLayer,
            twin_lr: 0.1,
            eval_size: 64,
            walk_dim: 512,
            walk_steps: 1000,
            walk_trials: 20,
            walk_process: WalkProcess::NormSign,
            walk_init: WalkInit::Gaussian,
            gradcheck_instances: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: String,
    pub metric_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: "runs/default".into(),
            metric_every: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub architecture: ArchitectureSection,
    pub optimizer: OptimizerSection,
    pub schedule: ScheduleSection,
    pub projection: ProjectionSection,
    pub baseline: BaselineSection,
    pub benchmark: BenchmarkSection,
    pub output: OutputSection,
}

/// A config with every optional key populated; its serialized form lists
/// all accepted keys.
fn schema() -> toml::Table {
    let mut full = ExperimentConfig::default();
    full.schedule.end_step = Some(1);
    full.schedule.horizon = Some(1);
    full.schedule.layer_multipliers = Some(vec![1.0]);
    full.baseline.application = Some(Application::PerStep);
    full.benchmark.seed = Some(0);
    full.benchmark.data_path = Some(String::new());
    full.benchmark.labels_path = Some(String::new());
    toml::Table::try_from(&full).expect("config serializes")
}

fn unknown_keys(doc: &toml::Table) -> Vec<FieldError> {
    let schema = schema();
    let mut errors = Vec::new();
    for (section, value) in doc {
        let Some(known) = schema.get(section).and_then(|v| v.as_table()) else {
            errors.push(FieldError {
                field: section.clone(),
                message: "unknown section".into(),
            });
            continue;
        };
        let Some(table) = value.as_table() else {
            errors.push(FieldError {
                field: section.clone(),
                message: "expected a section table".into(),
            });
            continue;
        };
        for key in table.keys() {
            if !known.contains_key(key) {
                errors.push(FieldError {
                    field: format!("{section}.{key}"),
                    message: "unknown key".into(),
                });
            }
        }
    }
    errors
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError::single("document", e.message()))?;
    let unknown = unknown_keys(&doc);
    if !unknown.is_empty() {
        return Err(ConfigError { errors: unknown });
    }
    let mut errors = Vec::new();
    let mut cfg = ExperimentConfig::default();
    macro_rules! section {
        ($name:ident) => {
            if let Some(v) = doc.get(stringify!($name)) {
                match v.clone().try_into() {
                    Ok(s) => cfg.$name = s,
                    Err(e) => errors.push(FieldError {
                        field: stringify!($name).into(),
                        message: toml::de::Error::message(&e).trim().to_string(),
                    }),
                }
            }
        };
    }
    section!(architecture);
    section!(optimizer);
    section!(schedule);
    section!(projection);
    section!(baseline);
    section!(benchmark);
    section!(output);
    if errors.is_empty() {
        errors = cfg.validation_errors();
    }
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError { errors })
    }
}

impl ExperimentConfig {
    /// Canonical TOML form; parsing it yields an equal config.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed(&self) -> u64 {
        self.benchmark.seed.expect("validated config has a seed")
    }

    pub fn total_steps(&self) -> u64 {
        (self.benchmark.num_tasks * self.benchmark.steps_per_task) as u64
    }

    pub fn validation_errors(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut err = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.into(),
                message,
            })
        };
        let a = &self.architecture;
        let b = &self.benchmark;
        let s = &self.schedule;
        if b.seed.is_none() {
            err("benchmark.seed", "missing; every run needs an explicit seed".into());
        }
        match a.kind {
            ArchKind::Mlp if a.input_shape.len() != 1 => {
                err("architecture.input_shape", format!("mlp needs [d], got {:?}", a.input_shape))
            }
            ArchKind::Cnn if a.input_shape.len() != 3 => {
                err("architecture.input_shape", format!("cnn needs [c, h, w], got {:?}", a.input_shape))
            }
            _ => {}
        }
        if a.input_shape.contains(&0) {
            err("architecture.input_shape", "zero extent".into());
        }
        if a.hidden.contains(&0) || a.conv_channels.contains(&0) {
            err("architecture.hidden", "zero width layer".into());
        }
        if a.classes == 0 {
            err("architecture.classes", "must be >= 1".into());
        }
        if a.kernel % 2 == 0 {
            err("architecture.kernel", format!("{} must be odd", a.kernel));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let check_pos = |field: &str, v: f64, errs: &mut Vec<FieldError>| {
            if !positive(v) {
                errs.push(FieldError {
                    field: field.into(),
                    message: format!("{v} must be positive"),
                });
            }
        };
        let mut more = Vec::new();
        match s.kind {
            SchedulePreset::Constant => check_pos("schedule.lr", s.lr, &mut more),
            SchedulePreset::Linear | SchedulePreset::LinearHalf => {
                check_pos("schedule.start", s.start, &mut more);
                check_pos("schedule.end", s.end, &mut more);
            }
            SchedulePreset::CosineWarmup => {
                check_pos("schedule.init", s.init, &mut more);
                check_pos("schedule.peak", s.peak, &mut more);
                check_pos("schedule.end", s.end, &mut more);
            }
        }
        if let Some(m) = &s.layer_multipliers {
            if m.iter().any(|&v| !positive(v)) {
                more.push(FieldError {
                    field: "schedule.layer_multipliers".into(),
                    message: "entries must be positive".into(),
                });
            }
        }
        check_pos("benchmark.twin_lr", b.twin_lr, &mut more);
        errs.extend(more);

        let o = &self.optimizer;
        for (field, v) in [
            ("optimizer.beta1", o.beta1),
            ("optimizer.beta2", o.beta2),
            ("optimizer.momentum", o.momentum),
            ("optimizer.rms_decay", o.rms_decay),
        ] {
            if !(0.0..1.0).contains(&v) {
                errs.push(FieldError {
                    field: field.into(),
                    message: format!("{v} not in [0, 1)"),
                });
            }
        }
        if !(o.eps >= 0.0) {
            errs.push(FieldError {
                field: "optimizer.eps".into(),
                message: format!("{} must be >= 0", o.eps),
            });
        }
        let p = &self.projection;
        if p.interval == 0 {
            errs.push(FieldError {
                field: "projection.interval".into(),
                message: "must be >= 1".into(),
            });
        }
        if !(p.alpha > 0.0 && p.alpha <= 1.0) {
            errs.push(FieldError {
                field: "projection.alpha".into(),
                message: format!("{} not in (0, 1]", p.alpha),
            });
        }
        let bl = &self.baseline;
        for (field, v) in [
            ("baseline.lambda", bl.lambda),
            ("baseline.noise", bl.noise),
            ("baseline.tau", bl.tau),
            ("baseline.sigma", bl.sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(FieldError {
                    field: field.into(),
                    message: format!("{v} must be >= 0"),
                });
            }
        }
        if !(bl.shrink > 0.0 && bl.shrink <= 1.0) {
            errs.push(FieldError {
                field: "baseline.shrink".into(),
                message: format!("{} not in (0, 1]", bl.shrink),
            });
        }
        for (field, v) in [
            ("benchmark.samples", b.samples),
            ("benchmark.num_tasks", b.num_tasks),
            ("benchmark.steps_per_task", b.steps_per_task),
            ("benchmark.batch_size", b.batch_size),
            ("benchmark.probe_size", b.probe_size),
            ("benchmark.twin_steps", b.twin_steps),
            ("benchmark.eval_size", b.eval_size),
            ("benchmark.walk_dim", b.walk_dim),
            ("benchmark.walk_steps", b.walk_steps),
            ("benchmark.walk_trials", b.walk_trials),
            ("benchmark.gradcheck_instances", b.gradcheck_instances),
            ("output.metric_every", self.output.metric_every),
        ] {
            if v == 0 {
                errs.push(FieldError {
                    field: field.into(),
                    message: "must be >= 1".into(),
                });
            }
        }
        if !(b.rank_threshold > 0.0 && b.rank_threshold < 1.0) {
            errs.push(FieldError {
                field: "benchmark.rank_threshold".into(),
                message: format!("{} not in (0, 1)", b.rank_threshold),
            });
        }
        if b.dataset != DatasetKind::Synthetic && b.data_path.is_none() {
            errs.push(FieldError {
                field: "benchmark.data_path".into(),
                message: "required for file datasets".into(),
            });
        }
        if b.dataset == DatasetKind::Idx && b.labels_path.is_none() {
            errs.push(FieldError {
                field: "benchmark.labels_path".into(),
                message: "required for idx datasets".into(),
            });
        }
        if s.kind == SchedulePreset::CosineWarmup {
            let horizon = s.horizon.unwrap_or(self.total_steps());
            if horizon <= s.warmup_steps {
                errs.push(FieldError {
                    field: "schedule.horizon".into(),
                    message: format!("{horizon} must exceed warmup_steps {}", s.warmup_steps),
                });
            }
        }
        errs
    }

    pub fn architecture(&self) -> Architecture {
        let a = &self.architecture;
        let act = match a.activation {
            ActivationName::Relu => Activation::Relu,
            ActivationName::LeakyRelu => Activation::LeakyRelu(a.leaky_slope),
            ActivationName::Tanh => Activation::Tanh,
        };
        let mut arch = match a.kind {
            ArchKind::Mlp => Architecture::mlp(a.input_shape[0], &a.hidden, a.classes, act),
            ArchKind::Cnn => Architecture::cnn(
                [a.input_shape[0], a.input_shape[1], a.input_shape[2]],
                &a.conv_channels,
                a.kernel,
                &a.hidden,
                a.classes,
                act,
            ),
        };
        arch.norm_scale = a.norm_scale;
        arch = match a.norm {
            NormName::None => arch,
            NormName::Rms => arch.with_norm(NormKind::Rms),
            NormName::Layer => arch.with_norm(NormKind::Layer),
        };
        if a.nap {
            arch = arch.with_nap();
        }
        if !a.bias {
            arch = arch.without_biases();
        }
        arch
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        let o = &self.optimizer;
        OptimizerConfig {
            kind: o.kind,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            momentum: o.momentum,
            rms_decay: o.rms_decay,
        }
    }

    pub fn schedule(&self) -> Schedule {
        let s = &self.schedule;
        let total = self.total_steps();
        let kind = match s.kind {
            SchedulePreset::Constant => ScheduleKind::Constant { lr: s.lr },
            SchedulePreset::LinearHalf => Schedule::linear_half(total).kind,
            SchedulePreset::Linear => ScheduleKind::Linear {
                start: s.start,
                end: s.end,
                end_step: s.end_step.unwrap_or((total / 2).max(1)),
            },
            SchedulePreset::CosineWarmup => ScheduleKind::CosineWarmup {
                init: s.init,
                peak: s.peak,
                warmup_steps: s.warmup_steps,
                end: s.end,
                horizon: s.horizon.unwrap_or(total),
            },
        };
        Schedule {
            kind,
            layer_multipliers: s.layer_multipliers.clone(),
        }
    }

    pub fn projection(&self) -> ProjectionPolicy {
        let p = &self.projection;
        ProjectionPolicy {
            enabled: p.enabled,
            interval: p.interval,
            scale_offset: match p.scale_offset {
                ScaleOffsetName::Project => ScaleOffsetMode::Project,
                ScaleOffsetName::Decay => ScaleOffsetMode::Decay { alpha: p.alpha },
                ScaleOffsetName::Free => ScaleOffsetMode::Free,
            },
            scope: p.scope,
        }
    }

    pub fn baseline(&self) -> BaselineSpec {
        let b = &self.baseline;
        let kind = match b.kind {
            BaselineName::None => BaselineKind::None,
            BaselineName::L2 => BaselineKind::L2 { lambda: b.lambda },
            BaselineName::Regenerative => BaselineKind::Regenerative { lambda: b.lambda },
            BaselineName::ShrinkPerturb => BaselineKind::ShrinkPerturb {
                shrink: b.shrink,
                noise: b.noise,
            },
            BaselineName::Redo => BaselineKind::Redo { tau: b.tau },
            BaselineName::Langevin => BaselineKind::Langevin { sigma: b.sigma },
        };
        let mut spec = BaselineSpec::new(kind);
        if let Some(app) = b.application {
            spec.application = app;
        }
        spec
    }
}
