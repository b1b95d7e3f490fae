//! Central finite differences and a randomized suite that checks every
//! differentiable op of [`Graph`] (plus whole networks) against them.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, NormScale, NORM_EPS};
use crate::error::Result;
use crate::network::{Activation, Architecture, Network, ParamKey};
use crate::rng::{self, NapRng};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-5;
const TINY: f64 = 1e-10;

/// Gradient of `f` at `theta` by central differences.
pub fn finite_diff_gradient<F: FnMut(&Tensor) -> f64>(mut f: F, theta: &Tensor, step: f64) -> Tensor {
    assert!(step > 0.0, "finite difference step must be positive");
    let mut probe = theta.clone();
    let mut grad = Tensor::zeros(theta.shape());
    for i in 0..theta.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both
/// gradients are essentially zero.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic.sub(numeric).map(|d| d.norm()).unwrap_or(f64::INFINITY);
    let scale = analytic.norm().max(numeric.norm());
    if scale < TINY {
        diff
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.ops.iter().all(|r| r.passed)
    }
}

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

struct Instance {
    inputs: Vec<Tensor>,
    build: Build,
}

fn away_from_zero(shape: &[usize], rng: &mut NapRng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let v: f64 = rng.sample(rand_distr::StandardNormal);
            if v.abs() >= 1e-3 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Values on a shuffled grid with spacing 0.1, so pooling windows never tie.
fn distinct(shape: &[usize], rng: &mut NapRng) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..numel).map(|k| (k as f64 - numel as f64 / 2.0) * 0.1).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn unary(shape: &[usize], rng: &mut NapRng, f: fn(&mut Graph, NodeId) -> NodeId) -> Instance {
    Instance {
        inputs: vec![away_from_zero(shape, rng)],
        build: Box::new(move |g, ids| Ok(f(g, ids[0]))),
    }
}

fn op_instance(op: &str, rng: &mut NapRng) -> Instance {
    let r = |shape: &[usize], rng: &mut NapRng| Tensor::randn(shape, 1.0, rng);
    match op {
        "matmul" => Instance {
            inputs: vec![r(&[3, 4], rng), r(&[4, 2], rng)],
            build: Box::new(|g, ids| g.matmul(ids[0], ids[1])),
        },
        "add" => Instance {
            inputs: vec![r(&[3, 4], rng), r(&[3, 4], rng)],
            build: Box::new(|g, ids| g.add(ids[0], ids[1])),
        },
        "mul" => Instance {
            inputs: vec![r(&[3, 4], rng), r(&[3, 4], rng)],
            build: Box::new(|g, ids| g.mul(ids[0], ids[1])),
        },
        "scale" => {
            let c: f64 = rng.random_range(-2.0..2.0);
            Instance {
                inputs: vec![r(&[3, 4], rng)],
                build: Box::new(move |g, ids| Ok(g.scale(ids[0], c))),
            }
        }
        "channel_affine" => Instance {
            inputs: vec![r(&[4, 3], rng), r(&[3], rng), r(&[3], rng)],
            build: Box::new(|g, ids| g.channel_affine(ids[0], Some(ids[1]), Some(ids[2]))),
        },
        "channel_affine_conv" => Instance {
            inputs: vec![r(&[2, 3, 2, 2], rng), r(&[3], rng), r(&[3], rng)],
            build: Box::new(|g, ids| g.channel_affine(ids[0], Some(ids[1]), Some(ids[2]))),
        },
        "rms_normalize" => Instance {
            inputs: vec![r(&[3, 5], rng)],
            build: Box::new(|g, ids| Ok(g.rms_normalize(ids[0], NORM_EPS, NormScale::UnitNorm))),
        },
        "rms_normalize_unit_rms" => Instance {
            inputs: vec![r(&[3, 5], rng)],
            build: Box::new(|g, ids| Ok(g.rms_normalize(ids[0], NORM_EPS, NormScale::UnitRms))),
        },
        "layer_normalize" => Instance {
            inputs: vec![r(&[3, 5], rng)],
            build: Box::new(|g, ids| Ok(g.layer_normalize(ids[0], NORM_EPS, NormScale::UnitNorm))),
        },
        "relu" => unary(&[3, 5], rng, |g, x| g.relu(x)),
        "leaky_relu" => unary(&[3, 5], rng, |g, x| g.leaky_relu(x, 0.1)),
        "tanh" => unary(&[3, 5], rng, |g, x| g.tanh(x)),
        "conv2d" => Instance {
            inputs: vec![r(&[2, 2, 4, 4], rng), r(&[3, 2, 3, 3], rng)],
            build: Box::new(|g, ids| g.conv2d(ids[0], ids[1])),
        },
        "max_pool2" => Instance {
            inputs: vec![distinct(&[2, 2, 4, 4], rng)],
            build: Box::new(|g, ids| g.max_pool2(ids[0])),
        },
        "reshape" => Instance {
            inputs: vec![r(&[3, 4], rng)],
            build: Box::new(|g, ids| g.reshape(ids[0], &[2, 6])),
        },
        "softmax_cross_entropy" => {
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..10)).collect();
            Instance {
                inputs: vec![r(&[4, 10], rng)],
                build: Box::new(move |g, ids| g.softmax_cross_entropy(ids[0], &labels)),
            }
        }
        "sum" => unary(&[3, 4], rng, |g, x| g.sum(x)),
        "mean" => unary(&[3, 4], rng, |g, x| g.mean(x)),
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "mul",
    "scale",
    "channel_affine",
    "channel_affine_conv",
    "rms_normalize",
    "rms_normalize_unit_rms",
    "layer_normalize",
    "relu",
    "leaky_relu",
    "tanh",
    "conv2d",
    "max_pool2",
    "reshape",
    "softmax_cross_entropy",
    "sum",
    "mean",
];

/// Builds `Σ w ⊙ op(inputs)` so every output coordinate contributes.
fn weighted_scalar(inst: &Instance, weights: &Tensor, inputs: &[Tensor], params: bool) -> Result<(Graph, NodeId, Vec<NodeId>)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| if params { g.param(t.clone()) } else { g.input(t.clone()) })
        .collect();
    let out = (inst.build)(&mut g, &ids)?;
    let w = g.input(weights.clone());
    let prod = g.mul(out, w)?;
    let root = g.sum(prod);
    Ok((g, root, ids))
}

fn check_instance(inst: &Instance, rng: &mut NapRng) -> Result<f64> {
    let out_shape = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inst.inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = (inst.build)(&mut g, &ids)?;
        g.value(out).shape().to_vec()
    };
    let weights = Tensor::randn(&out_shape, 1.0, rng);
    let (g, root, ids) = weighted_scalar(inst, &weights, &inst.inputs, true)?;
    let grads = g.backward(root)?;
    let mut worst = 0.0f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("param gradient").clone();
        let numeric = finite_diff_gradient(
            |theta| {
                let mut inputs = inst.inputs.clone();
                inputs[k] = theta.clone();
                let (g, root, _) = weighted_scalar(inst, &weights, &inputs, false).expect("fixed shapes");
                g.value(root).data()[0]
            },
            &inst.inputs[k],
            FD_STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Checks every parameter gradient of `net`'s loss on `(x, labels)`.
pub fn check_network(net: &Network, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let eval = net.evaluate(x, labels)?;
    let mut worst = 0.0f64;
    for key in net.param_keys() {
        let numeric = finite_diff_gradient(
            |theta| {
                let mut copy = net.clone();
                *copy.param_mut(key).expect("key") = theta.clone();
                copy.evaluate(x, labels).expect("fixed shapes").loss
            },
            net.param(key).expect("key"),
            FD_STEP,
        );
        worst = worst.max(relative_error(&eval.grads[&key], &numeric));
    }
    Ok(worst)
}

fn min_abs_preactivation(net: &Network, x: &Tensor) -> Result<f64> {
    let probe = net.probe(x)?;
    Ok(probe
        .pre_activations
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min))
}

/// Draws a network and batch whose ReLU inputs stay clear of the kink.
fn network_instance(arch: &Architecture, nap: bool, x_shape: &[usize], rng: &mut NapRng) -> Result<(Network, Tensor, Vec<usize>)> {
    let classes = arch.classes();
    loop {
        let seed: u64 = rng.random();
        let mut net = Network::build(arch, nap, seed)?;
        for key in net.param_keys() {
            let t = net.param_mut(key).expect("key");
            if matches!(key.kind, crate::network::ParamKind::Scale) {
                for v in t.data_mut() {
                    *v = rng.random_range(0.5..1.5);
                }
            } else if t.data().iter().all(|&v| v == 0.0) {
                *t = Tensor::randn(t.shape(), 0.1, rng);
            }
        }
        let x = Tensor::randn(x_shape, 1.0, rng);
        let labels: Vec<usize> = (0..x_shape[0]).map(|_| rng.random_range(0..classes)).collect();
        if min_abs_preactivation(&net, &x)? > 1e-4 {
            return Ok((net, x, labels));
        }
    }
}

fn report(op: &str, errors: &[f64]) -> OpReport {
    let max = errors.iter().copied().fold(0.0, f64::max);
    OpReport {
        op: op.to_string(),
        instances: errors.len(),
        max_rel_error: max,
        passed: max < REL_TOLERANCE,
    }
}

/// Runs `instances` randomized checks for every op plus whole networks.
pub fn run_suite(instances: usize, seed: u64) -> Result<GradcheckReport> {
    let mut ops = Vec::new();
    for (k, op) in OPS.iter().enumerate() {
        let mut rng = rng::stream(seed, k as u64);
        let errors = (0..instances)
            .map(|_| check_instance(&op_instance(op, &mut rng), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        ops.push(report(op, &errors));
    }

    let nets: [(&str, Architecture, bool, Vec<usize>); 3] = [
        ("mlp", Architecture::mlp(6, &[8, 8], 4, Activation::Relu), false, vec![5, 6]),
        ("mlp_nap", Architecture::mlp(6, &[8, 8], 4, Activation::Relu), true, vec![5, 6]),
        (
            "cnn_nap",
            Architecture::cnn([2, 4, 4], &[3], 3, &[6], 3, Activation::Relu),
            true,
            vec![2, 2, 4, 4],
        ),
    ];
    for (k, (name, arch, nap, x_shape)) in nets.iter().enumerate() {
        let mut rng = rng::stream(seed, 1000 + k as u64);
        let n = if *name == "cnn_nap" { instances.div_ceil(5) } else { instances };
        let errors = (0..n)
            .map(|_| {
                let (net, x, labels) = network_instance(arch, *nap, x_shape, &mut rng)?;
                check_network(&net, &x, &labels)
            })
            .collect::<Result<Vec<_>>>()?;
        ops.push(report(name, &errors));
    }
    Ok(GradcheckReport { ops })
}

/// Check for a caller-supplied network, used by the `gradcheck` command.
pub fn check_param(net: &Network, x: &Tensor, labels: &[usize], key: ParamKey) -> Result<f64> {
    let eval = net.evaluate(x, labels)?;
    let numeric = finite_diff_gradient(
        |theta| {
            let mut copy = net.clone();
            *copy.param_mut(key).expect("key") = theta.clone();
            copy.evaluate(x, labels).expect("fixed shapes").loss
        },
        net.param(key).expect("key"),
        FD_STEP,
    );
    Ok(relative_error(&eval.grads[&key], &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_sum_is_ones() {
        let theta = Tensor::randn(&[3, 2], 1.0, &mut rng::seeded(0));
        let g = finite_diff_gradient(|t| t.sum(), &theta, FD_STEP);
        assert!(g.max_abs_diff(&Tensor::ones(&[3, 2])) < 1e-9);
    }

    #[test]
    fn fd_of_squared_norm() {
        let theta = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff_gradient(|t| t.sq_norm(), &theta, FD_STEP);
        assert!(g.max_abs_diff(&Tensor::vector(vec![2.0, 4.0])) < 1e-8);
    }

    #[test]
    fn relative_error_cases() {
        let a = Tensor::vector(vec![1.0, 0.0]);
        assert_eq!(relative_error(&a, &a), 0.0);
        let z = Tensor::zeros(&[2]);
        assert_eq!(relative_error(&z, &z), 0.0);
        assert_eq!(relative_error(&a, &z), 1.0);
    }

    #[test]
    fn small_suite_passes() {
        let report = run_suite(3, 11).unwrap();
        for r in &report.ops {
            assert!(r.passed, "{r:?}");
        }
    }
}
