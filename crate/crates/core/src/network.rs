//! MLP / small-CNN construction with normalization insertion.
//!
//! A parametric layer computes `a = φ(σ ⊙ f_norm(h) + μ)` with `h = a_prev·W`
//! (dense) or `h = conv(a_prev, K)`. With NaP enabled every parametric layer
//! that feeds a nonlinearity gets a normalization, biases are dropped in favour
//! of offsets, and the logit layer stays a plain linear map.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, NodeId, NormScale, NORM_EPS};
use crate::error::{NapError, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    None,
    Rms,
    Layer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense { width: usize },
    Conv { channels: usize, kernel: usize },
    MaxPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
    pub normalize: NormKind,
    pub has_scale: bool,
    pub has_offset: bool,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn dense(width: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense { width },
            activation,
            normalize: NormKind::None,
            has_scale: false,
            has_offset: false,
            has_bias: true,
        }
    }

    pub fn conv(channels: usize, kernel: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Conv { channels, kernel },
            ..Self::dense(0, activation)
        }
    }

    pub fn max_pool() -> Self {
        Self {
            kind: LayerKind::MaxPool,
            has_bias: false,
            ..Self::dense(0, Activation::None)
        }
    }

    /// Adds a normalization with the default affine terms: scale always,
    /// offset only for layer norm.
    pub fn normalized(mut self, norm: NormKind) -> Self {
        self.normalize = norm;
        self.has_scale = norm != NormKind::None;
        self.has_offset = norm == NormKind::Layer;
        self.has_bias = false;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn is_parametric(&self) -> bool {
        !matches!(self.kind, LayerKind::MaxPool)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    /// Per-sample input shape: `[d]` for MLPs, `[c, h, w]` for CNNs.
    pub input_shape: Vec<usize>,
    /// The last layer is the logit layer.
    pub layers: Vec<LayerSpec>,
    pub norm_scale: NormScale,
}

impl Architecture {
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, activation: Activation) -> Self {
        let mut layers: Vec<_> = hidden
            .iter()
            .map(|&w| LayerSpec::dense(w, activation))
            .collect();
        layers.push(LayerSpec::dense(classes, Activation::None));
        Self {
            input_shape: vec![input_dim],
            layers,
            norm_scale: NormScale::UnitNorm,
        }
    }

    /// Conv blocks (each followed by a 2×2 max pool), then dense hidden
    /// layers, then logits.
    pub fn cnn(
        input_shape: [usize; 3],
        conv_channels: &[usize],
        kernel: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
    ) -> Self {
        let mut layers = Vec::new();
        for &c in conv_channels {
            layers.push(LayerSpec::conv(c, kernel, activation));
            layers.push(LayerSpec::max_pool());
        }
        layers.extend(hidden.iter().map(|&w| LayerSpec::dense(w, activation)));
        layers.push(LayerSpec::dense(classes, Activation::None));
        Self {
            input_shape: input_shape.to_vec(),
            layers,
            norm_scale: NormScale::UnitNorm,
        }
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        let last = self.layers.len() - 1;
        for spec in &mut self.layers[..last] {
            if spec.is_parametric() && spec.activation != Activation::None {
                *spec = spec.clone().normalized(norm);
            }
        }
        self
    }

    pub fn without_biases(mut self) -> Self {
        for spec in &mut self.layers {
            spec.has_bias = false;
        }
        self
    }

    /// NaP insertion: every parametric layer feeding a nonlinearity
    /// gets a layer norm unless already normalized; all biases are removed.
    pub fn with_nap(mut self) -> Self {
        for spec in &mut self.layers {
            if spec.is_parametric()
                && spec.activation != Activation::None
                && spec.normalize == NormKind::None
            {
                *spec = spec.clone().normalized(NormKind::Layer);
            }
            spec.has_bias = false;
        }
        self
    }

    pub fn classes(&self) -> usize {
        match self.layers.last().map(|l| l.kind) {
            Some(LayerKind::Dense { width }) => width,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Offset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: usize,
    pub kind: ParamKind,
}

pub type ParamGrads = BTreeMap<ParamKey, Tensor>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerParams {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub scale: Option<Tensor>,
    pub offset: Option<Tensor>,
}

impl LayerParams {
    pub fn get(&self, kind: ParamKind) -> Option<&Tensor> {
        match kind {
            ParamKind::Weight => self.weight.as_ref(),
            ParamKind::Bias => self.bias.as_ref(),
            ParamKind::Scale => self.scale.as_ref(),
            ParamKind::Offset => self.offset.as_ref(),
        }
    }

    pub fn get_mut(&mut self, kind: ParamKind) -> Option<&mut Tensor> {
        match kind {
            ParamKind::Weight => self.weight.as_mut(),
            ParamKind::Bias => self.bias.as_mut(),
            ParamKind::Scale => self.scale.as_mut(),
            ParamKind::Offset => self.offset.as_mut(),
        }
    }
}

const KINDS: [ParamKind; 4] = [
    ParamKind::Weight,
    ParamKind::Bias,
    ParamKind::Scale,
    ParamKind::Offset,
];

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    layers: Vec<LayerParams>,
    /// Per-sample output shape of each layer.
    shapes: Vec<Vec<usize>>,
    /// ρ_l: Frobenius norm of W^l at initialization (None for pooling).
    target_norms: Vec<Option<f64>>,
}

/// Node ids recorded by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: NodeId,
    pub params: Vec<(ParamKey, NodeId)>,
    /// Input to each layer's nonlinearity (None for pooling layers).
    pub pre_activations: Vec<Option<NodeId>>,
    pub outputs: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub logits: Tensor,
    pub grads: ParamGrads,
}

/// Activations captured on a probe batch.
#[derive(Clone, Debug)]
pub struct Probe {
    pub logits: Tensor,
    /// `[b × units]` pre-activations of each hidden parametric layer with
    /// a nonlinearity, keyed by layer index.
    pub pre_activations: Vec<(usize, Tensor)>,
    /// `[b × d]` output of the last hidden layer.
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorms {
    pub weight: f64,
    pub bias: f64,
    pub scale: f64,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamNorms {
    pub layers: Vec<LayerNorms>,
    pub global: f64,
}

pub(crate) fn truncated_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break std * z;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches by construction")
}

impl Network {
    /// Builds and initializes a network. `nap` applies [`Architecture::with_nap`]
    /// before construction.
    pub fn build(arch: &Architecture, nap: bool, seed: u64) -> Result<Self> {
        let arch = if nap {
            arch.clone().with_nap()
        } else {
            arch.clone()
        };
        validate(&arch)?;
        let mut rng = rng::stream(seed, 0x1417);
        let mut shape = arch.input_shape.clone();
        let mut layers = Vec::with_capacity(arch.layers.len());
        let mut shapes = Vec::with_capacity(arch.layers.len());
        let mut target_norms = Vec::with_capacity(arch.layers.len());

        for (l, spec) in arch.layers.iter().enumerate() {
            let mut params = LayerParams::default();
            let units = match spec.kind {
                LayerKind::Dense { width } => {
                    let fan_in: usize = shape.iter().product();
                    params.weight = Some(truncated_normal(
                        &[fan_in, width],
                        1.0 / (fan_in as f64).sqrt(),
                        &mut rng,
                    ));
                    shape = vec![width];
                    Some(width)
                }
                LayerKind::Conv { channels, kernel } => {
                    if shape.len() != 3 {
                        return Err(NapError::Config(format!(
                            "layer {l}: conv needs a [c,h,w] input, got {shape:?}"
                        )));
                    }
                    let fan_in = shape[0] * kernel * kernel;
                    params.weight = Some(truncated_normal(
                        &[channels, shape[0], kernel, kernel],
                        1.0 / (fan_in as f64).sqrt(),
                        &mut rng,
                    ));
                    shape = vec![channels, shape[1], shape[2]];
                    Some(channels)
                }
                LayerKind::MaxPool => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return Err(NapError::Config(format!(
                            "layer {l}: max pool needs a [c,h≥2,w≥2] input, got {shape:?}"
                        )));
                    }
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                    None
                }
            };
            if let Some(d) = units {
                if spec.has_bias {
                    params.bias = Some(Tensor::zeros(&[d]));
                }
                if spec.has_scale {
                    params.scale = Some(Tensor::ones(&[d]));
                }
                if spec.has_offset {
                    params.offset = Some(Tensor::zeros(&[d]));
                }
            }
            target_norms.push(params.weight.as_ref().map(Tensor::norm));
            layers.push(params);
            shapes.push(shape.clone());
        }
        Ok(Self {
            arch,
            layers,
            shapes,
            target_norms,
        })
    }

    /// Same weights, with `norm` inserted before every hidden nonlinearity,
    /// unit scales, zero offsets and no biases. Requires a bias-free network.
    pub fn to_normalized(&self, norm: NormKind) -> Result<Self> {
        if self.layers.iter().any(|p| p.bias.is_some()) {
            return Err(NapError::contract("to_normalized requires a bias-free network"));
        }
        let arch = self.arch.clone().with_norm(norm);
        let mut out = self.clone();
        for (l, spec) in arch.layers.iter().enumerate() {
            let d = self.units(l);
            let p = &mut out.layers[l];
            p.scale = (spec.has_scale && d > 0).then(|| Tensor::ones(&[d]));
            p.offset = (spec.has_offset && d > 0).then(|| Tensor::zeros(&[d]));
        }
        out.arch = arch;
        Ok(out)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerParams {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerParams {
        &mut self.layers[l]
    }

    pub fn spec(&self, l: usize) -> &LayerSpec {
        &self.arch.layers[l]
    }

    pub fn output_shape(&self, l: usize) -> &[usize] {
        &self.shapes[l]
    }

    /// Width (dense) or channel count (conv); 0 for pooling layers.
    pub fn units(&self, l: usize) -> usize {
        match self.arch.layers[l].kind {
            LayerKind::Dense { width } => width,
            LayerKind::Conv { channels, .. } => channels,
            LayerKind::MaxPool => 0,
        }
    }

    pub fn target_norm(&self, l: usize) -> Option<f64> {
        self.target_norms[l]
    }

    pub fn target_norms(&self) -> &[Option<f64>] {
        &self.target_norms
    }

    pub fn set_target_norm(&mut self, l: usize, rho: f64) {
        self.target_norms[l] = Some(rho);
    }

    pub fn is_output(&self, l: usize) -> bool {
        l + 1 == self.layers.len()
    }

    pub fn is_normalized(&self, l: usize) -> bool {
        self.arch.layers[l].normalize != NormKind::None
    }

    /// Layers whose weights the network output is invariant to rescaling.
    pub fn scale_invariant_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&l| self.layers[l].weight.is_some() && self.is_normalized(l))
            .collect()
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.layers.get(key.layer).and_then(|p| p.get(key.kind))
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        self.layers.get_mut(key.layer).and_then(|p| p.get_mut(key.kind))
    }

    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (layer, p) in self.layers.iter().enumerate() {
            for kind in KINDS {
                if p.get(kind).is_some() {
                    keys.push(ParamKey { layer, kind });
                }
            }
        }
        keys
    }

    pub fn params(&self) -> Vec<(ParamKey, &Tensor)> {
        self.param_keys()
            .into_iter()
            .map(|k| (k, self.param(k).expect("key from param_keys")))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// ℓ2 norm of the full flattened parameter vector.
    pub fn global_norm(&self) -> f64 {
        self.params()
            .iter()
            .map(|(_, t)| t.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    pub fn param_norms(&self) -> ParamNorms {
        let n = |t: &Option<Tensor>| t.as_ref().map_or(0.0, Tensor::norm);
        ParamNorms {
            layers: self
                .layers
                .iter()
                .map(|p| LayerNorms {
                    weight: n(&p.weight),
                    bias: n(&p.bias),
                    scale: n(&p.scale),
                    offset: n(&p.offset),
                })
                .collect(),
            global: self.global_norm(),
        }
    }

    /// Records the forward pass of `x` (`[b, ...input_shape]`) on `graph`.
    pub fn forward(&self, x: &Tensor, graph: &mut Graph) -> Result<ForwardTrace> {
        if x.ndim() < 2 || x.shape()[1..] != self.arch.input_shape[..] {
            return Err(NapError::shape("Network::forward", x.shape(), &self.arch.input_shape));
        }
        let batch = x.rows();
        let mut a = graph.input(x.clone());
        let mut params = Vec::new();
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut reg = |graph: &mut Graph, layer: usize, kind: ParamKind, t: &Option<Tensor>| {
            t.as_ref().map(|t| {
                let id = graph.param(t.clone());
                params.push((ParamKey { layer, kind }, id));
                id
            })
        };

        for (l, spec) in self.arch.layers.iter().enumerate() {
            let p = &self.layers[l];
            if spec.kind == LayerKind::MaxPool {
                a = graph.max_pool2(a)?;
                pre_activations.push(None);
                outputs.push(a);
                continue;
            }
            let w = reg(graph, l, ParamKind::Weight, &p.weight).expect("parametric layer");
            let mut h = match spec.kind {
                LayerKind::Dense { .. } => {
                    if graph.value(a).ndim() != 2 {
                        let flat = graph.value(a).row_len();
                        a = graph.reshape(a, &[batch, flat])?;
                    }
                    graph.matmul(a, w)?
                }
                _ => graph.conv2d(a, w)?,
            };
            let out_shape = graph.value(h).shape().to_vec();
            if spec.normalize != NormKind::None {
                let flat = graph.value(h).row_len();
                let rows = if out_shape.len() > 2 {
                    graph.reshape(h, &[batch, flat])?
                } else {
                    h
                };
                let normed = match spec.normalize {
                    NormKind::Rms => graph.rms_normalize(rows, NORM_EPS, self.arch.norm_scale),
                    _ => graph.layer_normalize(rows, NORM_EPS, self.arch.norm_scale),
                };
                h = if out_shape.len() > 2 {
                    graph.reshape(normed, &out_shape)?
                } else {
                    normed
                };
            }
            let bias = reg(graph, l, ParamKind::Bias, &p.bias);
            let scale = reg(graph, l, ParamKind::Scale, &p.scale);
            let offset = reg(graph, l, ParamKind::Offset, &p.offset);
            let shift = match (bias, offset) {
                (Some(b), None) => Some(b),
                (None, o) => o,
                (Some(_), Some(_)) => {
                    return Err(NapError::contract(format!("layer {l} has both bias and offset")))
                }
            };
            if scale.is_some() || shift.is_some() {
                h = graph.channel_affine(h, scale, shift)?;
            }
            pre_activations.push(Some(h));
            a = match spec.activation {
                Activation::Relu => graph.relu(h),
                Activation::LeakyRelu(s) => graph.leaky_relu(h, s),
                Activation::Tanh => graph.tanh(h),
                Activation::None => h,
            };
            outputs.push(a);
        }
        Ok(ForwardTrace {
            logits: a,
            params,
            pre_activations,
            outputs,
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let trace = self.forward(x, &mut g)?;
        Ok(g.value(trace.logits).clone())
    }

    /// Mean cross-entropy on (x, labels) with gradients for every parameter.
    pub fn evaluate(&self, x: &Tensor, labels: &[usize]) -> Result<Evaluation> {
        let mut g = Graph::new();
        let trace = self.forward(x, &mut g)?;
        let loss = g.softmax_cross_entropy(trace.logits, labels)?;
        let mut grads = g.backward(loss)?;
        let grads = trace
            .params
            .iter()
            .map(|&(k, id)| (k, grads.take(id).expect("params always present")))
            .collect();
        Ok(Evaluation {
            loss: g.value(loss).data()[0],
            logits: g.value(trace.logits).clone(),
            grads,
        })
    }

    pub fn probe(&self, x: &Tensor) -> Result<Probe> {
        let mut g = Graph::new();
        let trace = self.forward(x, &mut g)?;
        let batch = x.rows();
        let last = self.layers.len() - 1;
        let as_rows = |t: &Tensor| t.reshape(&[batch, t.row_len()]);
        let mut pre = Vec::new();
        for (l, id) in trace.pre_activations.iter().enumerate().take(last) {
            if let Some(id) = id {
                if self.arch.layers[l].activation != Activation::None {
                    pre.push((l, as_rows(g.value(*id))?));
                }
            }
        }
        let features = if last == 0 {
            x.reshape(&[batch, x.row_len()])?
        } else {
            as_rows(g.value(trace.outputs[last - 1]))?
        };
        Ok(Probe {
            logits: g.value(trace.logits).clone(),
            pre_activations: pre,
            features,
        })
    }

    /// One bit per (sample, unit) for every ReLU layer: pre-activation > 0.
    pub fn activation_pattern(&self, x: &Tensor) -> Result<Vec<Vec<bool>>> {
        let last = self.layers.len() - 1;
        for (l, spec) in self.arch.layers[..last].iter().enumerate() {
            if spec.is_parametric() && spec.activation != Activation::Relu {
                return Err(NapError::contract(format!(
                    "activation pattern needs relu activations, layer {l} has {:?}",
                    spec.activation
                )));
            }
        }
        let probe = self.probe(x)?;
        Ok(probe
            .pre_activations
            .iter()
            .map(|(_, t)| t.data().iter().map(|&v| v > 0.0).collect())
            .collect())
    }
}

fn validate(arch: &Architecture) -> Result<()> {
    if arch.input_shape.is_empty() || arch.input_shape.contains(&0) {
        return Err(NapError::Config(format!("bad input shape {:?}", arch.input_shape)));
    }
    let Some(last) = arch.layers.last() else {
        return Err(NapError::Config("architecture has no layers".into()));
    };
    if !matches!(last.kind, LayerKind::Dense { .. }) || last.activation != Activation::None {
        return Err(NapError::Config("last layer must be a linear dense logit layer".into()));
    }
    for (l, spec) in arch.layers.iter().enumerate() {
        match spec.kind {
            LayerKind::Dense { width: 0 } | LayerKind::Conv { channels: 0, .. } => {
                return Err(NapError::Config(format!("layer {l}: zero width")))
            }
            LayerKind::Conv { kernel, .. } if kernel % 2 == 0 => {
                return Err(NapError::Config(format!("layer {l}: kernel must be odd")))
            }
            _ => {}
        }
        if spec.has_offset && spec.normalize == NormKind::None {
            return Err(NapError::Config(format!(
                "layer {l}: offset without normalization"
            )));
        }
        if spec.has_offset && spec.has_bias {
            return Err(NapError::Config(format!("layer {l}: both offset and bias")));
        }
    }
    Ok(())
}
