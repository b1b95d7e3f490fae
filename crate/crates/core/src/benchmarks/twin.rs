//! Twin experiment: two identical scale-invariant networks trained in lock
//! step on the same batches. One is projected every step and gets its
//! per-layer learning rates rescaled to track the other's effective rate.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::error::{NapError, Result};
use crate::network::{Architecture, Network};
use crate::optim::{twin_rescale, Optimizer, OptimizerConfig, RescaleMode, StepRates};
use crate::projection::{self, ProjectionScope};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TwinConfig {
    pub architecture: Architecture,
    pub optimizer: OptimizerConfig,
    pub lr: f64,
    pub rescale: RescaleMode,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinRow {
    pub step: u64,
    /// `‖logits_projected − logits_free‖ / ‖logits_free‖` on the eval batch.
    pub discrepancy: f64,
    /// Losses on the eval batch after the step.
    pub loss_free: f64,
    pub loss_projected: f64,
    pub batch_hash: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinReport {
    pub rows: Vec<TwinRow>,
    pub max_discrepancy: f64,
    pub final_discrepancy: f64,
}

pub fn hash_tensor(t: &Tensor) -> u64 {
    let mut h = DefaultHasher::new();
    t.shape().hash(&mut h);
    for v in t.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Logit discrepancy and both losses on the fixed evaluation batch.
fn compare(free: &Network, projected: &Network, x: &Tensor, y: &[usize]) -> Result<(f64, f64, f64)> {
    let a = free.evaluate(x, y)?;
    let b = projected.evaluate(x, y)?;
    Ok((b.logits.rel_diff(&a.logits), a.loss, b.loss))
}

pub fn run_twin(cfg: &TwinConfig, data: &Dataset) -> Result<TwinReport> {
    cfg.optimizer.validate()?;
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.eval_size == 0 {
        return Err(NapError::Config("twin steps, batch_size, eval_size must be >= 1".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(NapError::Config(format!("twin lr {} must be positive", cfg.lr)));
    }
    let mut free = Network::build(&cfg.architecture, true, cfg.seed)?;
    let mut projected = Network::build(&cfg.architecture, true, cfg.seed)?;
    if free != projected {
        return Err(NapError::contract("twins differ at initialization"));
    }
    let layers = projected.scale_invariant_layers();
    let rho: Vec<f64> = layers
        .iter()
        .map(|&l| projected.target_norm(l).expect("parametric layer"))
        .collect();

    let mut opt_free = Optimizer::new(cfg.optimizer);
    let mut opt_proj = Optimizer::new(cfg.optimizer);
    let mut batch_rng = rng::stream(cfg.seed, 2);
    let mut eval_rng = rng::stream(cfg.seed, 3);
    let n = data.len();
    let eval_idx: Vec<usize> = (0..cfg.eval_size).map(|_| eval_rng.random_range(0..n)).collect();
    let eval_x = data.gather(&eval_idx);
    let eval_y: Vec<usize> = eval_idx.iter().map(|&i| data.labels[i]).collect();

    let mut rows = Vec::with_capacity(cfg.steps + 1);
    let (d0, lf0, lp0) = compare(&free, &projected, &eval_x, &eval_y)?;
    rows.push(TwinRow {
        step: 0,
        discrepancy: d0,
        loss_free: lf0,
        loss_projected: lp0,
        batch_hash: 0,
    });
    for t in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| batch_rng.random_range(0..n)).collect();
        let x = data.gather(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let (x_free, x_proj) = (x.clone(), x);
        let batch_hash = hash_tensor(&x_free);
        if hash_tensor(&x_proj) != batch_hash {
            return Err(NapError::contract(format!("twins saw different batches at step {t}")));
        }

        let twin_norms: Vec<f64> = layers
            .iter()
            .map(|&l| free.layer(l).weight.as_ref().expect("weight").norm())
            .collect();
        let scaled = twin_rescale(cfg.rescale, &twin_norms, &rho, cfg.lr, cfg.optimizer.kind);
        let mut overrides = vec![None; projected.num_layers()];
        for (&l, lr) in layers.iter().zip(scaled) {
            overrides[l] = Some(lr);
        }

        let ev_free = free.evaluate(&x_free, &y)?;
        let ev_proj = projected.evaluate(&x_proj, &y)?;
        opt_free.step(&mut free, &ev_free.grads, &StepRates::uniform(cfg.lr))?;
        opt_proj.step(
            &mut projected,
            &ev_proj.grads,
            &StepRates {
                base: cfg.lr,
                weight_overrides: overrides,
            },
        )?;
        projection::project_weights_in(&mut projected, ProjectionScope::ScaleInvariant)?;

        let (discrepancy, loss_free, loss_projected) = compare(&free, &projected, &eval_x, &eval_y)?;
        rows.push(TwinRow {
            step: t as u64 + 1,
            discrepancy,
            loss_free,
            loss_projected,
            batch_hash,
        });
    }
    let max_discrepancy = rows.iter().map(|r| r.discrepancy).fold(0.0, f64::max);
    let final_discrepancy = rows.last().map(|r| r.discrepancy).unwrap_or(0.0);
    Ok(TwinReport {
        rows,
        max_discrepancy,
        final_discrepancy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::data::make_synthetic_dataset;
    use crate::network::Activation;
    use crate::optim::OptimizerKind;

    fn config(kind: OptimizerKind, rescale: RescaleMode, steps: usize) -> TwinConfig {
        TwinConfig {
            architecture: Architecture::mlp(8, &[16, 16], 4, Activation::Relu),
            optimizer: OptimizerConfig::new(kind),
            lr: 0.05,
            rescale,
            steps,
            batch_size: 16,
            eval_size: 32,
            seed: 3,
        }
    }

    #[test]
    fn zero_discrepancy_at_start() {
        let data = make_synthetic_dataset(64, 8, 4, 0).unwrap();
        let r = run_twin(&config(OptimizerKind::Sgd, RescaleMode::None, 1), &data).unwrap();
        assert_eq!(r.rows[0].discrepancy, 0.0);
    }

    #[test]
    fn sgd_per_layer_tracks_twin() {
        let data = make_synthetic_dataset(64, 8, 4, 0).unwrap();
        let r = run_twin(&config(OptimizerKind::Sgd, RescaleMode::PerLayer, 100), &data).unwrap();
        assert!(r.max_discrepancy < 1e-6, "{}", r.max_discrepancy);
    }
}
