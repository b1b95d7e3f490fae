//! Experiment runners and the datasets they consume.

pub mod continual;
pub mod data;
pub mod twin;
pub mod walk;

pub use continual::{run_continual, ContinualConfig, ContinualStream, ContinualSummary, LabelMode, TrainingSetup};
pub use data::{load_cifar_bin, load_idx, load_idx_dataset, make_synthetic_dataset, parse_cifar_bin, parse_idx, Dataset, IdxArray};
pub use twin::{run_twin, TwinConfig, TwinReport, TwinRow};
pub use walk::{run_walk, walk_step, WalkInit, WalkProcess, WalkState, WalkStats};
