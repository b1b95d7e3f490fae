//! First-order optimizers over a [`Network`]'s parameters.

mod elr;
mod schedule;

pub use elr::{effective_lr, twin_rescale, ElrMode, RescaleMode};
pub use schedule::{Schedule, ScheduleKind, END_LR, LINEAR_START_LR, WARMUP_PEAK_LR, WARMUP_INIT_LR, WARMUP_STEPS};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{NapError, Result};
use crate::network::{Network, ParamGrads, ParamKey, ParamKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Rmsprop,
    Adam,
}

impl OptimizerKind {
    /// How the step size relates to the gradient norm.
    pub fn elr_mode(self) -> ElrMode {
        match self {
            OptimizerKind::Sgd | OptimizerKind::Momentum => ElrMode::RawGradient,
            OptimizerKind::Rmsprop | OptimizerKind::Adam => ElrMode::NormalizedGradient,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Heavy-ball coefficient for `Momentum`.
    pub momentum: f64,
    /// Second-moment decay for `Rmsprop`.
    pub rms_decay: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            rms_decay: 0.99,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(NapError::Config(format!("{name} = {v} not in [0, 1)")))
            }
        };
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        unit("momentum", self.momentum)?;
        unit("rms_decay", self.rms_decay)?;
        if !(self.eps >= 0.0) {
            return Err(NapError::Config(format!("eps = {} must be >= 0", self.eps)));
        }
        Ok(())
    }
}

/// Learning rates for one step: `base` for every parameter, optionally
/// overridden per layer for the weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRates {
    pub base: f64,
    pub weight_overrides: Vec<Option<f64>>,
}

impl StepRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            base: lr,
            weight_overrides: Vec::new(),
        }
    }

    pub fn for_key(&self, key: ParamKey) -> f64 {
        if key.kind == ParamKind::Weight {
            if let Some(Some(lr)) = self.weight_overrides.get(key.layer) {
                return *lr;
            }
        }
        self.base
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    first: Option<Tensor>,
    second: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    state: BTreeMap<ParamKey, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Drops all moment buffers and the step counter.
    pub fn reset(&mut self) {
        self.steps = 0;
        self.state.clear();
    }

    /// Applies one descent step to every parameter of `net`.
    pub fn step(&mut self, net: &mut Network, grads: &ParamGrads, rates: &StepRates) -> Result<()> {
        let keys = net.param_keys();
        for key in &keys {
            let g = grads.get(key).ok_or_else(|| {
                NapError::contract(format!("missing gradient for {key:?}"))
            })?;
            if !g.is_finite() {
                return Err(NapError::NumericFault {
                    what: format!("{:?} gradient", key.kind),
                    layer: Some(key.layer),
                });
            }
        }
        self.steps += 1;
        let t = self.steps;
        for key in keys {
            let g = &grads[&key];
            let lr = rates.for_key(key);
            let param = net.param_mut(key).expect("key from param_keys");
            if param.shape() != g.shape() {
                return Err(NapError::shape("Optimizer::step", param.shape(), g.shape()));
            }
            let moments = self.state.entry(key).or_default();
            update(&self.config, moments, t, param, g, lr);
        }
        Ok(())
    }
}

fn update(cfg: &OptimizerConfig, m: &mut Moments, t: u64, param: &mut Tensor, g: &Tensor, lr: f64) {
    let n = g.numel();
    let zeros = || Tensor::zeros(g.shape());
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (p, gv) in param.data_mut().iter_mut().zip(g.data()) {
                *p -= lr * gv;
            }
        }
        OptimizerKind::Momentum => {
            let buf = m.first.get_or_insert_with(zeros);
            let b = buf.data_mut();
            let p = param.data_mut();
            for i in 0..n {
                b[i] = cfg.momentum * b[i] + g.data()[i];
                p[i] -= lr * b[i];
            }
        }
        OptimizerKind::Rmsprop => {
            let sq = m.second.get_or_insert_with(zeros);
            let v = sq.data_mut();
            let p = param.data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                v[i] = cfg.rms_decay * v[i] + (1.0 - cfg.rms_decay) * gi * gi;
                p[i] -= lr * gi / (v[i] + cfg.eps).sqrt();
            }
        }
        OptimizerKind::Adam => {
            let first = m.first.get_or_insert_with(zeros);
            let mut second = m.second.take().unwrap_or_else(zeros);
            let c1 = 1.0 - cfg.beta1.powf(t as f64);
            let c2 = 1.0 - cfg.beta2.powf(t as f64);
            let (mu, v) = (first.data_mut(), second.data_mut());
            let p = param.data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                mu[i] = cfg.beta1 * mu[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = mu[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat + cfg.eps).sqrt();
            }
            m.second = Some(second);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, Architecture};
    use crate::rng;

    fn single_layer() -> Network {
        let arch = Architecture::mlp(2, &[], 1, Activation::Relu).without_biases();
        let mut net = Network::build(&arch, false, 0).unwrap();
        net.layer_mut(0).weight = Some(Tensor::zeros(&[2, 1]));
        net
    }

    fn grads_of(net: &Network, value: Tensor) -> ParamGrads {
        net.param_keys().into_iter().map(|k| (k, value.clone())).collect()
    }

    #[test]
    fn sgd_step() {
        let mut net = single_layer();
        let grads = grads_of(&net, Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Sgd));
        opt.step(&mut net, &grads, &StepRates::uniform(0.1)).unwrap();
        assert_eq!(net.layer(0).weight.as_ref().unwrap().data(), &[-0.1, -0.1]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for scale in [1e-3, 1.0, 1e3] {
            let mut net = single_layer();
            let grads = grads_of(&net, Tensor::new(vec![2, 1], vec![scale, -2.0 * scale]).unwrap());
            let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adam));
            opt.step(&mut net, &grads, &StepRates::uniform(0.01)).unwrap();
            let w = net.layer(0).weight.as_ref().unwrap().data().to_vec();
            assert!((w[0] + 0.01).abs() < 1e-4, "{w:?}");
            assert!((w[1] - 0.01).abs() < 1e-4, "{w:?}");
        }
    }

    #[test]
    fn nan_gradient_is_numeric_fault_with_layer() {
        let mut net = single_layer();
        let grads = grads_of(&net, Tensor::new(vec![2, 1], vec![f64::NAN, 0.0]).unwrap());
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adam));
        let err = opt.step(&mut net, &grads, &StepRates::uniform(0.1)).unwrap_err();
        assert_eq!(
            err,
            NapError::NumericFault {
                what: "Weight gradient".into(),
                layer: Some(0)
            }
        );
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut net = single_layer();
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Sgd));
        let err = opt.step(&mut net, &ParamGrads::new(), &StepRates::uniform(0.1));
        assert!(matches!(err, Err(NapError::Contract(_))));
    }

    #[test]
    fn trajectories_are_bit_identical() {
        let run = || {
            let arch = Architecture::mlp(4, &[6], 3, Activation::Relu);
            let mut net = Network::build(&arch, true, 8).unwrap();
            let mut r = rng::seeded(1);
            let x = Tensor::randn(&[5, 4], 1.0, &mut r);
            let labels = [0, 1, 2, 0, 1];
            for kind in [OptimizerKind::Momentum, OptimizerKind::Rmsprop, OptimizerKind::Adam] {
                let mut opt = Optimizer::new(OptimizerConfig::new(kind));
                for _ in 0..5 {
                    let ev = net.evaluate(&x, &labels).unwrap();
                    opt.step(&mut net, &ev.grads, &StepRates::uniform(0.01)).unwrap();
                }
            }
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn weight_overrides_only_touch_weights() {
        let rates = StepRates {
            base: 1.0,
            weight_overrides: vec![None, Some(0.5)],
        };
        let w1 = ParamKey { layer: 1, kind: ParamKind::Weight };
        let s1 = ParamKey { layer: 1, kind: ParamKind::Scale };
        let w0 = ParamKey { layer: 0, kind: ParamKind::Weight };
        assert_eq!(rates.for_key(w1), 0.5);
        assert_eq!(rates.for_key(s1), 1.0);
        assert_eq!(rates.for_key(w0), 1.0);
    }
}
