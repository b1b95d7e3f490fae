//! Weight projection: `W ← ρ·W/‖W‖` per layer, plus the three ways of
//! handling the scale/offset pair (joint projection, decay toward (1, 0),
//! or leaving it free).

use serde::{Deserialize, Serialize};

use crate::error::{NapError, Result};
use crate::network::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ScaleOffsetMode {
    Project,
    Decay { alpha: f64 },
    Free,
}

/// Which weight matrices get projected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionScope {
    /// Every weight, including the logit layer.
    #[default]
    All,
    /// Only layers whose output is normalized.
    ScaleInvariant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPolicy {
    pub enabled: bool,
    pub interval: u64,
    pub scale_offset: ScaleOffsetMode,
    pub scope: ProjectionScope,
}

impl Default for ProjectionPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            interval: 1,
            scale_offset: ScaleOffsetMode::Decay { alpha: 0.999 },
            scope: ProjectionScope::All,
        }
    }
}

impl ProjectionPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(NapError::Config("projection interval must be >= 1".into()));
        }
        if let ScaleOffsetMode::Decay { alpha } = self.scale_offset {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(NapError::Config(format!("decay alpha {alpha} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Rescales one weight tensor to norm `rho`, keeping its direction.
pub fn project_tensor(w: &mut Tensor, rho: f64) -> Result<()> {
    let norm = w.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(NapError::Degenerate(format!(
            "cannot project weight with norm {norm}"
        )));
    }
    w.scale_in_place(rho / norm);
    Ok(())
}

/// Projects the selected layers' weights back onto their target norms.
pub fn project_weights_in(net: &mut Network, scope: ProjectionScope) -> Result<()> {
    for l in 0..net.num_layers() {
        let Some(rho) = net.target_norm(l) else { continue };
        if scope == ProjectionScope::ScaleInvariant && !net.is_normalized(l) {
            continue;
        }
        let w = net.layer_mut(l).weight.as_mut().expect("target norm implies weight");
        project_tensor(w, rho).map_err(|e| match e {
            NapError::Degenerate(msg) => NapError::Degenerate(format!("layer {l}: {msg}")),
            other => other,
        })?;
    }
    Ok(())
}

pub fn project_weights(net: &mut Network) -> Result<()> {
    project_weights_in(net, ProjectionScope::All)
}

/// Joint projection of (σ, μ) onto ‖σ‖² + ‖μ‖² = d with one common factor.
pub fn project_scale_offset(scale: &Tensor, offset: &Tensor) -> Result<(Tensor, Tensor)> {
    scale.expect_same_shape("project_scale_offset", offset)?;
    let joint = scale.sq_norm() + offset.sq_norm();
    if !(joint > 0.0) || !joint.is_finite() {
        return Err(NapError::Degenerate(format!(
            "scale/offset joint squared norm is {joint}"
        )));
    }
    let factor = (scale.numel() as f64 / joint).sqrt();
    Ok((scale.scaled(factor), offset.scaled(factor)))
}

/// `(ασ + (1−α)𝟙, αμ)`
pub fn decay_scale_offset(scale: &Tensor, offset: &Tensor, alpha: f64) -> (Tensor, Tensor) {
    (
        scale.map(|s| alpha * s + (1.0 - alpha)),
        offset.scaled(alpha),
    )
}

/// Applies the scale/offset handling of `mode` to every layer. Layers with
/// only a scale treat the offset as zero.
pub fn handle_scale_offset(net: &mut Network, mode: ScaleOffsetMode) -> Result<()> {
    if mode == ScaleOffsetMode::Free {
        return Ok(());
    }
    for l in 0..net.num_layers() {
        let p = net.layer_mut(l);
        let Some(scale) = p.scale.as_ref() else { continue };
        let offset = p.offset.clone().unwrap_or_else(|| Tensor::zeros(scale.shape()));
        let (s, o) = match mode {
            ScaleOffsetMode::Project => project_scale_offset(scale, &offset)
                .map_err(|e| NapError::Degenerate(format!("layer {l}: {e}")))?,
            ScaleOffsetMode::Decay { alpha } => decay_scale_offset(scale, &offset, alpha),
            ScaleOffsetMode::Free => unreachable!(),
        };
        p.scale = Some(s);
        if p.offset.is_some() {
            p.offset = Some(o);
        }
    }
    Ok(())
}

/// Runs the projection step if the policy is enabled and `step` falls on the
/// interval. Returns whether anything was applied.
pub fn maybe_project(net: &mut Network, policy: &ProjectionPolicy, step: u64) -> Result<bool> {
    if !policy.enabled || step % policy.interval != 0 {
        return Ok(false);
    }
    project_weights_in(net, policy.scope)?;
    handle_scale_offset(net, policy.scale_offset)?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, Architecture};

    #[test]
    fn halves_weight_at_twice_target() {
        let mut w = Tensor::vector(vec![3.0, 4.0]);
        project_tensor(&mut w, 2.5).unwrap();
        assert_eq!(w.data(), &[1.5, 2.0]);
    }

    #[test]
    fn zero_weight_is_degenerate() {
        let mut w = Tensor::zeros(&[2, 2]);
        assert!(matches!(project_tensor(&mut w, 1.0), Err(NapError::Degenerate(_))));

        let arch = Architecture::mlp(3, &[4], 2, Activation::Relu);
        let mut net = Network::build(&arch, true, 0).unwrap();
        net.layer_mut(0).weight.as_mut().unwrap().scale_in_place(0.0);
        let err = project_weights(&mut net).unwrap_err();
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn projection_idempotent() {
        let arch = Architecture::mlp(5, &[7, 7], 3, Activation::Relu);
        let mut net = Network::build(&arch, true, 2).unwrap();
        for l in 0..3 {
            net.layer_mut(l).weight.as_mut().unwrap().scale_in_place(1.7 + l as f64);
        }
        project_weights(&mut net).unwrap();
        let once = net.clone();
        project_weights(&mut net).unwrap();
        for l in 0..3 {
            let a = once.layer(l).weight.as_ref().unwrap();
            let b = net.layer(l).weight.as_ref().unwrap();
            assert!(a.max_abs_diff(b) <= 4.0 * f64::EPSILON * a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
            assert!((b.norm() - net.target_norm(l).unwrap()).abs() < 1e-13);
        }
    }

    #[test]
    fn joint_projection_examples() {
        let s = Tensor::vector(vec![1.0, 1.0]);
        let (a, b) = project_scale_offset(&s, &s).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((a.data()[0] - h).abs() < 1e-15 && (b.data()[1] - h).abs() < 1e-15);

        let ones = Tensor::ones(&[5]);
        let zeros = Tensor::zeros(&[5]);
        let (a, b) = project_scale_offset(&ones, &zeros).unwrap();
        assert_eq!(a, ones);
        assert_eq!(b, zeros);

        assert!(project_scale_offset(&zeros, &zeros).is_err());
    }

    #[test]
    fn decay_examples() {
        let s = Tensor::vector(vec![2.0]);
        let m = Tensor::vector(vec![1.0]);
        let (a, b) = decay_scale_offset(&s, &m, 1.0);
        assert_eq!((a, b), (s.clone(), m.clone()));
        let (a, b) = decay_scale_offset(&s, &m, 0.9);
        assert!((a.data()[0] - 1.9).abs() < 1e-15 && (b.data()[0] - 0.9).abs() < 1e-15);

        let (mut a, mut b) = (s, m);
        for k in 1..=200 {
            (a, b) = decay_scale_offset(&a, &b, 0.9);
            let expected = 0.9f64.powi(k);
            assert!(((a.data()[0] - 1.0) - expected).abs() < 1e-12);
            assert!((b.data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn maybe_project_gates() {
        let arch = Architecture::mlp(3, &[4], 2, Activation::Relu);
        let mut net = Network::build(&arch, true, 0).unwrap();
        net.layer_mut(0).weight.as_mut().unwrap().scale_in_place(3.0);
        let before = net.clone();

        assert!(!maybe_project(&mut net, &ProjectionPolicy::disabled(), 0).unwrap());
        assert_eq!(net, before);

        let every = ProjectionPolicy {
            interval: 1,
            ..ProjectionPolicy::default()
        };
        assert!(maybe_project(&mut net, &every, 7).unwrap());

        let sparse = ProjectionPolicy {
            interval: 10,
            ..ProjectionPolicy::default()
        };
        assert!(!maybe_project(&mut net, &sparse, 7).unwrap());
        assert!(maybe_project(&mut net, &sparse, 20).unwrap());
    }

    #[test]
    fn policy_validation() {
        let bad = ProjectionPolicy {
            interval: 0,
            ..ProjectionPolicy::default()
        };
        assert!(bad.validate().is_err());
        let bad = ProjectionPolicy {
            scale_offset: ScaleOffsetMode::Decay { alpha: 0.0 },
            ..ProjectionPolicy::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scale_only_layers_project_against_zero_offset() {
        let arch = Architecture::mlp(3, &[4], 2, Activation::Relu)
            .with_norm(crate::network::NormKind::Rms)
            .without_biases();
        let mut net = Network::build(&arch, false, 0).unwrap();
        net.layer_mut(0).scale = Some(Tensor::full(&[4], 3.0));
        handle_scale_offset(&mut net, ScaleOffsetMode::Project).unwrap();
        let s = net.layer(0).scale.as_ref().unwrap();
        assert!((s.sq_norm() - 4.0).abs() < 1e-12);
        assert!(net.layer(0).offset.is_none());
    }
}
