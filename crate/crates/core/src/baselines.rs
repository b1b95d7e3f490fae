//! Comparison interventions for plasticity loss, applied as parameter
//! transformations either every step or at task boundaries.

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NapError, Result};
use crate::network::{truncated_normal, Activation, LayerKind, Network, ParamKey};
use crate::rng::{self, NapRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaselineKind {
    None,
    L2 { lambda: f64 },
    Regenerative { lambda: f64 },
    ShrinkPerturb { shrink: f64, noise: f64 },
    Redo { tau: f64 },
    Langevin { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Application {
    PerStep,
    PerTask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub application: Application,
}

impl BaselineSpec {
    /// Shrink-and-perturb and ReDo default to task boundaries; the rest
    /// act every step.
    pub fn new(kind: BaselineKind) -> Self {
        let application = match kind {
            BaselineKind::ShrinkPerturb { .. } | BaselineKind::Redo { .. } => Application::PerTask,
            _ => Application::PerStep,
        };
        Self { kind, application }
    }

    pub fn none() -> Self {
        Self::new(BaselineKind::None)
    }

    pub fn validate(&self) -> Result<()> {
        let non_neg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(NapError::Config(format!("baseline {name} = {v} must be >= 0")))
            }
        };
        match self.kind {
            BaselineKind::None => Ok(()),
            BaselineKind::L2 { lambda } | BaselineKind::Regenerative { lambda } => non_neg("lambda", lambda),
            BaselineKind::ShrinkPerturb { shrink, noise } => {
                if !(shrink > 0.0 && shrink <= 1.0) {
                    return Err(NapError::Config(format!("baseline shrink = {shrink} not in (0, 1]")));
                }
                non_neg("noise", noise)
            }
            BaselineKind::Redo { tau } => non_neg("tau", tau),
            BaselineKind::Langevin { sigma } => non_neg("sigma", sigma),
        }
    }

    /// True when the hyperparameters make the baseline a no-op.
    pub fn is_neutral(&self) -> bool {
        match self.kind {
            BaselineKind::None => true,
            BaselineKind::L2 { lambda } | BaselineKind::Regenerative { lambda } => lambda == 0.0,
            BaselineKind::ShrinkPerturb { shrink, noise } => shrink == 1.0 && noise == 0.0,
            BaselineKind::Redo { tau } => tau == 0.0,
            BaselineKind::Langevin { sigma } => sigma == 0.0,
        }
    }
}

/// `θ ← θ − lr·λ·θ`
pub fn apply_l2(theta: &mut Tensor, lambda: f64, lr: f64) {
    if lambda == 0.0 {
        return;
    }
    let k = lr * lambda;
    for v in theta.data_mut() {
        *v -= k * *v;
    }
}

/// `θ ← θ − lr·λ·(θ − θ_init)`
pub fn apply_regenerative(theta: &mut Tensor, init: &Tensor, lambda: f64, lr: f64) -> Result<()> {
    theta.expect_same_shape("apply_regenerative", init)?;
    if lambda == 0.0 {
        return Ok(());
    }
    let k = lr * lambda;
    for (v, v0) in theta.data_mut().iter_mut().zip(init.data()) {
        *v -= k * (*v - v0);
    }
    Ok(())
}

/// `θ ← λ·θ + ε`, `ε ~ N(0, σ²)`
pub fn apply_shrink_perturb<R: Rng + ?Sized>(theta: &mut Tensor, shrink: f64, noise: f64, rng: &mut R) {
    if shrink != 1.0 {
        theta.scale_in_place(shrink);
    }
    if noise > 0.0 {
        for v in theta.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += noise * z;
        }
    }
}

/// Adds `N(0, σ²)` noise to every coordinate.
pub fn apply_langevin<R: Rng + ?Sized>(theta: &mut Tensor, sigma: f64, rng: &mut R) {
    apply_shrink_perturb(theta, 1.0, sigma, rng);
}

fn activate(act: Activation, v: f64) -> f64 {
    match act {
        Activation::Relu => v.max(0.0),
        Activation::LeakyRelu(a) => {
            if v > 0.0 {
                v
            } else {
                a * v
            }
        }
        Activation::Tanh => v.tanh(),
        Activation::None => v,
    }
}

/// Resets units whose layer-relative mean absolute activation on `probe`
/// falls strictly below `tau`: incoming weights are redrawn, bias/offset
/// zeroed, scale set to one, and outgoing weights zeroed. Only dense
/// hidden layers feeding a dense layer are considered. Returns the
/// `(layer, unit)` pairs that were reset.
pub fn apply_redo<R: Rng + ?Sized>(
    net: &mut Network,
    probe: &Tensor,
    tau: f64,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if tau == 0.0 {
        return Ok(Vec::new());
    }
    let stats = net.probe(probe)?;
    let mut resets = Vec::new();
    for (l, pre) in &stats.pre_activations {
        let l = *l;
        let spec = net.spec(l).clone();
        if !matches!(spec.kind, LayerKind::Dense { .. })
            || !matches!(net.spec(l + 1).kind, LayerKind::Dense { .. })
        {
            continue;
        }
        let (b, d) = (pre.rows(), pre.row_len());
        let mut score = vec![0.0; d];
        for i in 0..b {
            for (j, s) in score.iter_mut().enumerate() {
                *s += activate(spec.activation, pre.get2(i, j)).abs() / b as f64;
            }
        }
        let mean = score.iter().sum::<f64>() / d as f64;
        if mean == 0.0 {
            warn!("redo: layer {l} has zero mean activation, skipped");
            continue;
        }
        let dead: Vec<usize> = (0..d).filter(|&j| score[j] / mean < tau).collect();
        if dead.is_empty() {
            continue;
        }
        let fan_in = net.layer(l).weight.as_ref().expect("dense weight").rows();
        let fresh = truncated_normal(&[fan_in, d], 1.0 / (fan_in as f64).sqrt(), rng);
        let params = net.layer_mut(l);
        for &j in &dead {
            let w = params.weight.as_mut().expect("dense weight");
            for i in 0..fan_in {
                w.set2(i, j, fresh.get2(i, j));
            }
            if let Some(bias) = params.bias.as_mut() {
                bias.data_mut()[j] = 0.0;
            }
            if let Some(s) = params.scale.as_mut() {
                s.data_mut()[j] = 1.0;
            }
            if let Some(o) = params.offset.as_mut() {
                o.data_mut()[j] = 0.0;
            }
        }
        let next = net.layer_mut(l + 1).weight.as_mut().expect("dense weight");
        let width = next.row_len();
        for &j in &dead {
            for k in 0..width {
                next.set2(j, k, 0.0);
            }
            resets.push((l, j));
        }
    }
    Ok(resets)
}

/// Stateful driver that applies a [`BaselineSpec`] to a network.
#[derive(Clone, Debug)]
pub struct Baseline {
    spec: BaselineSpec,
    init: Vec<(ParamKey, Tensor)>,
    rng: NapRng,
}

impl Baseline {
    pub fn new(spec: BaselineSpec, net: &Network, seed: u64) -> Self {
        let init = match spec.kind {
            BaselineKind::Regenerative { .. } => net
                .params()
                .into_iter()
                .map(|(k, t)| (k, t.clone()))
                .collect(),
            _ => Vec::new(),
        };
        Self {
            spec,
            init,
            rng: rng::stream(seed, 0xba5e),
        }
    }

    pub fn spec(&self) -> &BaselineSpec {
        &self.spec
    }

    /// Hook run once per step before the optimizer update.
    pub fn on_step(&mut self, net: &mut Network, lr: f64, probe: &Tensor) -> Result<()> {
        if self.spec.application == Application::PerStep {
            self.apply(net, lr, probe)?;
        }
        Ok(())
    }

    /// Hook run when a new task begins.
    pub fn on_task_boundary(&mut self, net: &mut Network, lr: f64, probe: &Tensor) -> Result<()> {
        if self.spec.application == Application::PerTask {
            self.apply(net, lr, probe)?;
        }
        Ok(())
    }

    pub fn apply(&mut self, net: &mut Network, lr: f64, probe: &Tensor) -> Result<()> {
        if self.spec.is_neutral() {
            return Ok(());
        }
        match self.spec.kind {
            BaselineKind::None => {}
            BaselineKind::L2 { lambda } => {
                for key in net.param_keys() {
                    apply_l2(net.param_mut(key).expect("known key"), lambda, lr);
                }
            }
            BaselineKind::Regenerative { lambda } => {
                for (key, init) in &self.init {
                    let theta = net.param_mut(*key).ok_or_else(|| {
                        NapError::contract(format!("parameter {key:?} vanished"))
                    })?;
                    apply_regenerative(theta, init, lambda, lr)?;
                }
            }
            BaselineKind::ShrinkPerturb { shrink, noise } => {
                for key in net.param_keys() {
                    apply_shrink_perturb(net.param_mut(key).expect("known key"), shrink, noise, &mut self.rng);
                }
            }
            BaselineKind::Langevin { sigma } => {
                for key in net.param_keys() {
                    apply_langevin(net.param_mut(key).expect("known key"), sigma, &mut self.rng);
                }
            }
            BaselineKind::Redo { tau } => {
                let resets = apply_redo(net, probe, tau, &mut self.rng)?;
                if !resets.is_empty() {
                    log::debug!("redo reset {} units", resets.len());
                }
            }
        }
        Ok(())
    }
}
