//! Effective learning rate of scale-invariant parameters and the learning
//! rate rescaling used to couple a projected network to a free twin.

use serde::{Deserialize, Serialize};

use super::OptimizerKind;
use crate::error::{NapError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElrMode {
    /// Step proportional to the raw gradient (SGD): η̃ = η/‖θ‖².
    RawGradient,
    /// Step of fixed size per coordinate (normalized gradient, Adam,
    /// RMSProp): η̃ = η/‖θ‖.
    NormalizedGradient,
}

impl ElrMode {
    pub fn exponent(self) -> i32 {
        match self {
            ElrMode::RawGradient => 2,
            ElrMode::NormalizedGradient => 1,
        }
    }
}

/// Step size an update applies to the unit-norm copy θ/‖θ‖.
pub fn effective_lr(lr: f64, theta_norm: f64, mode: ElrMode) -> Result<f64> {
    if !(theta_norm > 0.0) {
        return Err(NapError::Degenerate(format!("parameter norm {theta_norm}")));
    }
    let rho = 1.0 / theta_norm;
    Ok(lr * rho.powi(mode.exponent()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    PerLayer,
    Global,
    None,
}

/// Per-layer learning rates for the projected twin so that its explicit
/// rate tracks the free twin's effective rate.
///
/// `twin_norms[l]` is ‖W^l‖ of the free network and `targets[l]` the
/// projected norm ρ_l.
pub fn twin_rescale(
    mode: RescaleMode,
    twin_norms: &[f64],
    targets: &[f64],
    base_lr: f64,
    kind: OptimizerKind,
) -> Vec<f64> {
    assert_eq!(twin_norms.len(), targets.len());
    let p = kind.elr_mode().exponent();
    match mode {
        RescaleMode::None => vec![base_lr; targets.len()],
        RescaleMode::PerLayer => targets
            .iter()
            .zip(twin_norms)
            .map(|(rho, n)| base_lr * (rho / n).powi(p))
            .collect(),
        RescaleMode::Global => {
            let rho = targets.iter().map(|v| v * v).sum::<f64>().sqrt();
            let twin = twin_norms.iter().map(|v| v * v).sum::<f64>().sqrt();
            vec![base_lr * (rho / twin).powi(p); targets.len()]
        }
    }
}
