//! Plasticity diagnostics: feature rank, dead and linearized units,
//! gradient norms and online accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{NapError, Result};
use crate::network::{Network, ParamGrads};
use crate::tensor::{self, Tensor};

pub const RANK_THRESHOLD: f64 = 0.01;
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric `n×n` matrix by cyclic Jacobi rotations,
/// sorted in descending order.
pub fn symmetric_eigenvalues(a: &Tensor) -> Result<Vec<f64>> {
    if a.ndim() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(NapError::contract(format!(
            "eigenvalues need a square matrix, got {:?}",
            a.shape()
        )));
    }
    let n = a.shape()[0];
    let mut m = a.data().to_vec();
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off(&m) <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

/// Singular values of a `b×d` matrix in descending order (length d).
pub fn singular_values(features: &Tensor) -> Result<Vec<f64>> {
    if features.ndim() != 2 {
        return Err(NapError::contract(format!(
            "features must be b×d, got {:?}",
            features.shape()
        )));
    }
    if !features.is_finite() {
        return Err(NapError::NumericFault {
            what: "non-finite features".into(),
            layer: None,
        });
    }
    let gram = tensor::matmul_tn(features, features)?;
    Ok(symmetric_eigenvalues(&gram)?
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect())
}

/// Number of singular values with σ_i/σ_1 above `threshold`.
pub fn feature_rank(features: &Tensor, threshold: f64) -> Result<usize> {
    let sv = singular_values(features)?;
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s / top > threshold).count())
}

/// Per-unit gate statistics of a `b×d` pre-activation matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitStats {
    pub dead: f64,
    pub always_on: f64,
    pub mixed: f64,
}

impl UnitStats {
    pub fn linearized(&self) -> f64 {
        self.dead + self.always_on
    }
}

pub fn unit_stats(preacts: &Tensor) -> UnitStats {
    let b = preacts.rows();
    let d = preacts.row_len();
    let data = preacts.data();
    let (mut dead, mut on) = (0usize, 0usize);
    for j in 0..d {
        let positives = (0..b).filter(|&i| data[i * d + j] > 0.0).count();
        if positives == 0 {
            dead += 1;
        } else if positives == b {
            on += 1;
        }
    }
    let frac = |k: usize| k as f64 / d as f64;
    UnitStats {
        dead: frac(dead),
        always_on: frac(on),
        mixed: frac(d - dead - on),
    }
}

/// Fraction of units whose pre-activation is ≤ 0 on every sample.
pub fn dead_fraction(preacts: &Tensor) -> f64 {
    unit_stats(preacts).dead
}

/// Fraction of units whose gate is the same on every sample.
pub fn linearized_fraction(preacts: &Tensor) -> f64 {
    unit_stats(preacts).linearized()
}

pub fn grad_global_norm(grads: &ParamGrads) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Fraction of rows whose argmax (first maximum on ties) equals the label.
pub fn online_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let b = logits.rows();
    if labels.len() != b {
        return Err(NapError::shape("online_accuracy", logits.shape(), &[labels.len()]));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    Ok(correct as f64 / b as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Probe-batch statistics. The canonical dead/linearized numbers come from
/// the last hidden layer; `layers` holds every hidden layer's stats.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeStats {
    pub feature_rank: usize,
    pub dead_fraction: f64,
    pub linearized_fraction: f64,
    pub layers: Vec<(usize, UnitStats)>,
}

pub fn probe_stats(net: &Network, x: &Tensor, threshold: f64) -> Result<ProbeStats> {
    let probe = net.probe(x)?;
    let layers: Vec<(usize, UnitStats)> = probe
        .pre_activations
        .iter()
        .map(|(l, t)| (*l, unit_stats(t)))
        .collect();
    let canonical = layers.last().map(|(_, s)| *s).unwrap_or_default();
    Ok(ProbeStats {
        feature_rank: feature_rank(&probe.features, threshold)?,
        dead_fraction: canonical.dead,
        linearized_fraction: canonical.linearized(),
        layers,
    })
}

/// One row of the metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub task: usize,
    pub online_accuracy: f64,
    pub loss: f64,
    pub param_norm: f64,
    pub grad_norm: f64,
    pub layer_param_norms: Vec<f64>,
    pub feature_rank: usize,
    pub dead_fraction: f64,
    pub linearized_fraction: f64,
    pub layer_dead_fractions: Vec<f64>,
    pub effective_lr: f64,
    pub lr: f64,
}
