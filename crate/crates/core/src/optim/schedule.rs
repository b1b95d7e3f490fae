//! Learning-rate schedules as pure functions of the step index.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{NapError, Result};

/// Start of the linear decay preset.
pub const LINEAR_START_LR: f64 = 6.25e-5;
/// Peak of the cosine-warmup preset.
pub const WARMUP_PEAK_LR: f64 = 0.000625;
/// Terminal learning rate of both decay schedules.
pub const END_LR: f64 = 1e-6;
pub const WARMUP_INIT_LR: f64 = 1e-8;
pub const WARMUP_STEPS: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScheduleKind {
    Constant {
        lr: f64,
    },
    /// Affine from `start` at t=0 to `end` at `end_step`, then flat.
    Linear {
        start: f64,
        end: f64,
        end_step: u64,
    },
    /// Linear warmup `init → peak` over `warmup_steps`, then cosine decay
    /// `peak → end` reaching `end` at `horizon`.
    CosineWarmup {
        init: f64,
        peak: f64,
        warmup_steps: u64,
        end: f64,
        horizon: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    /// Optional positive per-layer multipliers on top of the schedule.
    pub layer_multipliers: Option<Vec<f64>>,
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        ScheduleKind::Constant { lr }.into()
    }

    /// Linear decay from 6.25e-5 to 1e-6 that ends halfway through a run
    /// of `total_steps`.
    pub fn linear_half(total_steps: u64) -> Self {
        ScheduleKind::Linear {
            start: LINEAR_START_LR,
            end: END_LR,
            end_step: (total_steps / 2).max(1),
        }
        .into()
    }

    /// Warmup 1e-8 → 0.000625 over 1000 steps, cosine to 1e-6 at `horizon`.
    pub fn cosine_warmup(horizon: u64) -> Self {
        ScheduleKind::CosineWarmup {
            init: WARMUP_INIT_LR,
            peak: WARMUP_PEAK_LR,
            warmup_steps: WARMUP_STEPS,
            end: END_LR,
            horizon,
        }
        .into()
    }

    pub fn value(&self, t: u64) -> f64 {
        match self.kind {
            ScheduleKind::Constant { lr } => lr,
            ScheduleKind::Linear {
                start,
                end,
                end_step,
            } => {
                if t >= end_step {
                    end
                } else {
                    start + (end - start) * (t as f64 / end_step as f64)
                }
            }
            ScheduleKind::CosineWarmup {
                init,
                peak,
                warmup_steps,
                end,
                horizon,
            } => {
                if t < warmup_steps {
                    init + (peak - init) * (t as f64 / warmup_steps as f64)
                } else if t == warmup_steps {
                    peak
                } else if t >= horizon {
                    end
                } else {
                    let progress = (t - warmup_steps) as f64 / (horizon - warmup_steps) as f64;
                    end + (peak - end) * 0.5 * (1.0 + (PI * progress).cos())
                }
            }
        }
    }

    pub fn layer_value(&self, t: u64, layer: usize) -> f64 {
        let m = self
            .layer_multipliers
            .as_ref()
            .and_then(|m| m.get(layer).copied())
            .unwrap_or(1.0);
        self.value(t) * m
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(NapError::Config(format!("schedule {name} = {v} must be positive")))
            }
        };
        match self.kind {
            ScheduleKind::Constant { lr } => pos("lr", lr)?,
            ScheduleKind::Linear {
                start,
                end,
                end_step,
            } => {
                pos("start", start)?;
                pos("end", end)?;
                if end_step == 0 {
                    return Err(NapError::Config("schedule end_step must be >= 1".into()));
                }
            }
            ScheduleKind::CosineWarmup {
                init,
                peak,
                warmup_steps,
                end,
                horizon,
            } => {
                pos("init", init)?;
                pos("peak", peak)?;
                pos("end", end)?;
                if horizon <= warmup_steps {
                    return Err(NapError::Config(format!(
                        "schedule horizon {horizon} must exceed warmup_steps {warmup_steps}"
                    )));
                }
            }
        }
        if let Some(m) = &self.layer_multipliers {
            for (l, &v) in m.iter().enumerate() {
                pos(&format!("layer_multipliers[{l}]"), v)?;
            }
        }
        Ok(())
    }
}

impl From<ScheduleKind> for Schedule {
    fn from(kind: ScheduleKind) -> Self {
        Self {
            kind,
            layer_multipliers: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_half_endpoints() {
        let s = Schedule::linear_half(10_000);
        assert_eq!(s.value(0), 6.25e-5);
        assert_eq!(s.value(5_000), 1e-6);
        assert_eq!(s.value(9_999), 1e-6);
        let mid = s.value(2_500);
        assert!((mid - (6.25e-5 + 1e-6) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn cosine_warmup_endpoints() {
        let s = Schedule::cosine_warmup(20_000);
        assert_eq!(s.value(0), 1e-8);
        assert_eq!(s.value(1000), 0.000625);
        assert_eq!(s.value(20_000), 1e-6);
        assert_eq!(s.value(25_000), 1e-6);
    }

    #[test]
    fn non_increasing_after_warmup() {
        for s in [Schedule::cosine_warmup(5_000), Schedule::linear_half(5_000), Schedule::constant(0.1)] {
            let mut prev = s.value(1000);
            for t in 1001..6000 {
                let v = s.value(t);
                assert!(v <= prev && v > 0.0, "t={t}");
                prev = v;
            }
        }
    }

    #[test]
    fn layer_multipliers() {
        let s = Schedule {
            kind: ScheduleKind::Constant { lr: 0.5 },
            layer_multipliers: Some(vec![1.0, 0.5]),
        };
        assert_eq!(s.layer_value(0, 1), 0.25);
        assert_eq!(s.layer_value(0, 5), 0.5);
    }

    #[test]
    fn validation() {
        assert!(Schedule::constant(-1.0).validate().is_err());
        assert!(Schedule::cosine_warmup(10).validate().is_err());
        assert!(Schedule::linear_half(100).validate().is_ok());
    }
}
