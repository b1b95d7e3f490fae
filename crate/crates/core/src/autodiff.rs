//! Reverse-mode automatic differentiation over an append-only graph.
//!
//! Every op evaluates eagerly and caches its output on the node, so a
//! [`Graph`] doubles as the forward trace. Parent ids are always smaller
//! than the child id, which makes the node list a topological order and
//! lets [`Graph::backward`] sweep it once in reverse.

use serde::{Deserialize, Serialize};

use crate::error::{NapError, Result};
use crate::tensor::{self, Tensor};

/// Denominator guard used by the normalization ops.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Output scale of the normalization ops: unit ℓ2 norm (`h/‖h‖`) or unit
/// RMS (`√d·h/‖h‖`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScale {
    #[default]
    UnitNorm,
    UnitRms,
}

impl NormScale {
    pub fn gain(self, d: usize) -> f64 {
        match self {
            NormScale::UnitNorm => 1.0,
            NormScale::UnitRms => (d as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ChannelAffine {
        x: NodeId,
        scale: Option<NodeId>,
        shift: Option<NodeId>,
    },
    RmsNorm {
        x: NodeId,
        eps: f64,
        gain: f64,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: NodeId,
        eps: f64,
        gain: f64,
        centered: Tensor,
        norms: Vec<f64>,
    },
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Conv2d(NodeId, NodeId),
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients indexed by node id.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf; receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Param, value);
        self.params.push(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scaled(c);
        self.push(Op::Scale(a, c), v)
    }

    /// Per-channel affine map along axis 1: `y[n,c,…] = x[n,c,…]·scale[c] + shift[c]`.
    pub fn channel_affine(
        &mut self,
        x: NodeId,
        scale: Option<NodeId>,
        shift: Option<NodeId>,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.ndim() < 2 {
            return Err(NapError::shape("channel_affine", xv.shape(), &[2]));
        }
        let c = xv.shape()[1];
        for p in [scale, shift].into_iter().flatten() {
            if self.value(p).shape() != [c] {
                return Err(NapError::shape("channel_affine", xv.shape(), self.value(p).shape()));
            }
        }
        let inner: usize = xv.shape()[2..].iter().product();
        let mut out = xv.clone();
        let s = scale.map(|p| self.value(p).data().to_vec());
        let t = shift.map(|p| self.value(p).data().to_vec());
        for (idx, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (idx / inner) % c;
            if let Some(s) = &s {
                *v *= s[ch];
            }
            if let Some(t) = &t {
                *v += t[ch];
            }
        }
        Ok(self.push(Op::ChannelAffine { x, scale, shift }, out))
    }

    pub fn rms_normalize(&mut self, x: NodeId, eps: f64, scale: NormScale) -> NodeId {
        let xv = self.value(x);
        let gain = scale.gain(xv.last_dim());
        let (v, norms) = tensor::rms_rows(xv, eps, gain);
        self.push(Op::RmsNorm { x, eps, gain, norms }, v)
    }

    pub fn layer_normalize(&mut self, x: NodeId, eps: f64, scale: NormScale) -> NodeId {
        let xv = self.value(x);
        let gain = scale.gain(xv.last_dim());
        let centered = tensor::center_rows(xv);
        let (v, norms) = tensor::rms_rows(&centered, eps, gain);
        self.push(
            Op::LayerNorm {
                x,
                eps,
                gain,
                centered,
                norms,
            },
            v,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|h| if h > 0.0 { h } else { 0.0 });
        self.push(Op::Relu(x), v)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.value(x).map(|h| if h > 0.0 { h } else { slope * h });
        self.push(Op::LeakyRelu(x, slope), v)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), v)
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let v = tensor::conv2d(self.value(x), self.value(kernel))?;
        Ok(self.push(Op::Conv2d(x, kernel), v))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (v, argmax) = tensor::max_pool2(self.value(x))?;
        Ok(self.push(Op::MaxPool2 { x, argmax }, v))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    /// Mean softmax cross-entropy over the batch of `logits` [b×C].
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.rows() != labels.len() {
            return Err(NapError::shape("softmax_cross_entropy", lv.shape(), &[labels.len()]));
        }
        let classes = lv.last_dim();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NapError::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: classes,
            });
        }
        let probs = tensor::softmax_rows(lv);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / xv.numel() as f64);
        self.push(Op::Mean(x), v)
    }

    /// Accumulates ∂root/∂node for every node reachable from `root`.
    /// Every registered parameter is present in the result, zero-filled if
    /// `root` does not depend on it.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(NapError::contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(rv.shape()));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        for &p in &self.params {
            if grads[p.0].is_none() {
                grads[p.0] = Some(Tensor::zeros(self.value(p).shape()));
            }
        }
        Ok(GradientMap { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let ga = tensor::matmul_nt(g, self.value(*b))?;
                let gb = tensor::matmul_tn(self.value(*a), g)?;
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, gb)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, gb)?;
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scaled(*c))?,
            Op::ChannelAffine { x, scale, shift } => {
                let xv = self.value(*x);
                let c = xv.shape()[1];
                let inner: usize = xv.shape()[2..].iter().product();
                let s = scale.map(|p| self.value(p).data().to_vec());
                let mut gx = g.clone();
                let mut gs = vec![0.0; c];
                let mut gt = vec![0.0; c];
                for (idx, gv) in gx.data_mut().iter_mut().enumerate() {
                    let ch = (idx / inner) % c;
                    gt[ch] += *gv;
                    gs[ch] += *gv * xv.data()[idx];
                    if let Some(s) = &s {
                        *gv *= s[ch];
                    }
                }
                accumulate(grads, *x, gx)?;
                if let Some(p) = scale {
                    accumulate(grads, *p, Tensor::vector(gs))?;
                }
                if let Some(p) = shift {
                    accumulate(grads, *p, Tensor::vector(gt))?;
                }
            }
            Op::RmsNorm { x, eps, gain, norms } => {
                let gx = tensor::rms_rows_backward(self.value(*x), norms, g, *eps, *gain);
                accumulate(grads, *x, gx)?;
            }
            Op::LayerNorm {
                x,
                eps,
                gain,
                centered,
                norms,
            } => {
                let gc = tensor::rms_rows_backward(centered, norms, g, *eps, *gain);
                accumulate(grads, *x, tensor::center_rows(&gc))?;
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, h| if h > 0.0 { gv } else { 0.0 })?;
                accumulate(grads, *x, gx)?;
            }
            Op::LeakyRelu(x, slope) => {
                let gx = g.zip_map(self.value(*x), |gv, h| if h > 0.0 { gv } else { slope * gv })?;
                accumulate(grads, *x, gx)?;
            }
            Op::Tanh(x) => {
                let gx = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                accumulate(grads, *x, gx)?;
            }
            Op::Conv2d(x, k) => {
                let (gx, gk) = tensor::conv2d_backward(self.value(*x), self.value(*k), g)?;
                accumulate(grads, *x, gx)?;
                accumulate(grads, *k, gk)?;
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                accumulate(grads, *x, gx)?;
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.value(*x).shape())?;
                accumulate(grads, *x, gx)?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let upstream = g.data()[0];
                let classes = probs.last_dim();
                let inv_b = upstream / labels.len() as f64;
                let mut gl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    gl.data_mut()[r * classes + label] -= 1.0;
                }
                gl.scale_in_place(inv_b);
                accumulate(grads, *logits, gl)?;
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                accumulate(grads, *x, gx)?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gx = Tensor::full(xv.shape(), g.data()[0] / xv.numel() as f64);
                accumulate(grads, *x, gx)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let root = g.sum(sq);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_root_gives_zero_param_grads() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.input(Tensor::scalar(5.0));
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(NapError::Contract(_))));
    }

    #[test]
    fn parents_precede_children() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 2]));
        let b = g.relu(a);
        let c = g.matmul(a, b).unwrap();
        assert!(a < b && b < c);
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-2.0, 3.0]));
        let r = g.relu(x);
        let l = g.leaky_relu(x, 0.01);
        assert_eq!(g.value(r).data(), &[0.0, 3.0]);
        assert_eq!(g.value(l).data(), &[-0.02, 3.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 1.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn layer_normalize_examples() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_rows(&[&[1.0, 1.0], &[1.0, -1.0]]));
        let y = g.layer_normalize(a, NORM_EPS, NormScale::UnitNorm);
        let v = g.value(y).data();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] - h).abs() < 1e-15 && (v[3] + h).abs() < 1e-15);
    }

    #[test]
    fn layer_normalize_random_row_is_centered_unit() {
        let mut rng = crate::rng::seeded(11);
        let mut g = Graph::new();
        let a = g.input(Tensor::randn(&[1, 8], 1.0, &mut rng));
        let y = g.layer_normalize(a, NORM_EPS, NormScale::UnitNorm);
        let v = g.value(y);
        assert!((v.sum() / 8.0).abs() < 1e-12);
        assert!((v.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unit_rms_gain() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_rows(&[&[3.0, 4.0, 0.0, 0.0]]));
        let y = g.rms_normalize(a, NORM_EPS, NormScale::UnitRms);
        let v = g.value(y);
        assert!((v.norm() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(&[2, 10]));
        let ce = g.softmax_cross_entropy(l, &[3, 7]).unwrap();
        assert!((g.value(ce).data()[0] - 10f64.ln()).abs() < 1e-14);

        let mut big = Tensor::zeros(&[1, 4]);
        big.data_mut()[2] = 1e3;
        let l = g.input(big);
        let ce = g.softmax_cross_entropy(l, &[2]).unwrap();
        assert!(g.value(ce).data()[0] < 1e-12);

        let err = g.softmax_cross_entropy(l, &[4]).unwrap_err();
        assert!(matches!(err, NapError::Index { index: 4, bound: 4, .. }));
    }

    #[test]
    fn graph_is_deterministic() {
        let build = || {
            let mut rng = crate::rng::seeded(5);
            let mut g = Graph::new();
            let x = g.input(Tensor::randn(&[4, 3], 1.0, &mut rng));
            let w = g.param(Tensor::randn(&[3, 5], 1.0, &mut rng));
            let h = g.matmul(x, w).unwrap();
            let n = g.layer_normalize(h, NORM_EPS, NormScale::UnitNorm);
            let r = g.tanh(n);
            let s = g.sum(r);
            let grads = g.backward(s).unwrap();
            (g.value(s).clone(), grads.get(w).unwrap().clone())
        };
        let (a, ga) = build();
        let (b, gb) = build();
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        assert!(ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
