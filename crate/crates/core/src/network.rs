//! Layered architectures, parameter initialisation and the tapped forward
//! pass.
//!
//! Activations travel between layers as row-flattened `[batch × dim]`
//! matrices; convolutional layers unflatten internally.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, z: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(z),
            Activation::Tanh => g.tanh(z),
            Activation::None => Ok(z),
        }
    }

    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::None => z,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// `dim(·)`: element count of the flattened pre-activation.
    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match &self.kind {
            LayerKind::Dense => vec![self.output_len(), self.input_len()],
            LayerKind::Conv2d {
                filters, kernel, ..
            } => {
                vec![*filters, self.input_shape[0], kernel[0], kernel[1]]
            }
        }
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        match &self.kind {
            LayerKind::Dense => vec![self.output_len()],
            LayerKind::Conv2d { filters, .. } => vec![*filters],
        }
    }

    fn fans(&self) -> (usize, usize) {
        match &self.kind {
            LayerKind::Dense => (self.input_len(), self.output_len()),
            LayerKind::Conv2d {
                filters, kernel, ..
            } => {
                let area = kernel[0] * kernel[1];
                (self.input_shape[0] * area, filters * area)
            }
        }
    }

    fn conv_geom(&self) -> Result<ConvGeom> {
        match (&self.kind, self.input_shape.as_slice()) {
            (
                &LayerKind::Conv2d {
                    filters,
                    kernel,
                    stride,
                },
                &[c, h, w],
            ) => ConvGeom::new([c, h, w], filters, kernel, stride),
            _ => dim_err(format!(
                "layer '{}' is not a conv layer over C×H×W",
                self.name
            )),
        }
    }

    fn expected_output(&self) -> Result<Vec<usize>> {
        match &self.kind {
            LayerKind::Dense => Ok(self.output_shape.clone()),
            LayerKind::Conv2d { filters, .. } => {
                let geom = self.conv_geom()?;
                Ok(vec![*filters, geom.out_h(), geom.out_w()])
            }
        }
    }

    /// Pre-activation `z` of this layer for row-flattened input `h`.
    pub fn pre_activation(&self, g: &mut Graph, params: &Bound, h: Var) -> Result<Var> {
        let w = params.var(&self.weight_name())?;
        let b = params.var(&self.bias_name())?;
        let cols = g.value(h).cols();
        if cols != self.input_len() {
            return dim_err(format!(
                "layer '{}': expected {} inputs per row, got {cols}",
                self.name,
                self.input_len()
            ));
        }
        match &self.kind {
            LayerKind::Dense => {
                let z = g.matmul_bt(h, w)?;
                g.add_bias(z, b)
            }
            LayerKind::Conv2d { .. } => {
                let geom = self.conv_geom()?;
                let z = g.conv2d_flat(h, w, geom)?;
                g.add_channel_bias(z, b, geom.out_h() * geom.out_w())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One `logits` head.
    Classifier,
    /// `policy` logits and a scalar `value`, sharing the trunk.
    ActorCritic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub head_kind: HeadKind,
    pub heads: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn builder(input_shape: &[usize]) -> NetworkBuilder {
        NetworkBuilder {
            input_shape: input_shape.to_vec(),
            layers: Vec::new(),
            error: None,
        }
    }

    /// Multi-layer perceptron with a classification head.
    pub fn mlp(
        input_shape: &[usize],
        hidden: &[usize],
        act: Activation,
        classes: usize,
    ) -> Result<Self> {
        let mut b = Self::builder(input_shape);
        for (i, &units) in hidden.iter().enumerate() {
            b = b.dense(&format!("fc{}", i + 1), units, act);
        }
        b.classifier(classes)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Trunk layers followed by heads, the order used for taps and `L₀`.
    pub fn all_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().chain(&self.heads)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.all_layers().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.all_layers().position(|l| l.name == name)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len() + self.heads.len()
    }

    /// Classes for a classifier, actions for an actor-critic.
    pub fn output_dim(&self) -> usize {
        self.heads[0].output_len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for l in self.all_layers() {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate layer name '{}'",
                    l.name
                )));
            }
            let out = l.expected_output()?;
            if out != l.output_shape || l.output_len() == 0 {
                return Err(Error::Validation(format!(
                    "layer '{}' declares output {:?}, expected {out:?}",
                    l.name, l.output_shape
                )));
            }
        }
        let mut prev = self.input_shape.clone();
        for l in &self.layers {
            let flat_ok = matches!(l.kind, LayerKind::Dense)
                && l.input_len() == prev.iter().product::<usize>();
            if l.input_shape != prev && !flat_ok {
                return Err(Error::Validation(format!(
                    "layer '{}' expects input {:?} but receives {prev:?}",
                    l.name, l.input_shape
                )));
            }
            prev = l.output_shape.clone();
        }
        let trunk_out: usize = prev.iter().product();
        for h in &self.heads {
            if h.input_len() != trunk_out || !matches!(h.kind, LayerKind::Dense) {
                return Err(Error::Validation(format!(
                    "head '{}' does not fit the trunk",
                    h.name
                )));
            }
        }
        let names: Vec<&str> = self.heads.iter().map(|h| h.name.as_str()).collect();
        let ok = match self.head_kind {
            HeadKind::Classifier => names == ["logits"],
            HeadKind::ActorCritic => {
                names == ["policy", "value"] && self.heads[1].output_len() == 1
            }
        };
        if !ok {
            return Err(Error::Validation(format!(
                "heads {names:?} do not match {:?}",
                self.head_kind
            )));
        }
        Ok(())
    }
}

pub struct NetworkBuilder {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    error: Option<Error>,
}

impl NetworkBuilder {
    fn current_shape(&self) -> Vec<usize> {
        self.layers
            .last()
            .map_or(self.input_shape.clone(), |l| l.output_shape.clone())
    }

    pub fn dense(mut self, name: &str, units: usize, activation: Activation) -> Self {
        let input_shape = self.current_shape();
        self.layers.push(LayerSpec {
            name: name.into(),
            kind: LayerKind::Dense,
            input_shape,
            output_shape: vec![units],
            activation,
        });
        self
    }

    pub fn conv2d(
        mut self,
        name: &str,
        filters: usize,
        kernel: [usize; 2],
        stride: usize,
        activation: Activation,
    ) -> Self {
        let input_shape = self.current_shape();
        let mut layer = LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv2d {
                filters,
                kernel,
                stride,
            },
            input_shape,
            output_shape: vec![],
            activation,
        };
        match layer.expected_output() {
            Ok(out) => layer.output_shape = out,
            Err(e) => {
                self.error.get_or_insert(e);
            }
        }
        self.layers.push(layer);
        self
    }

    fn head(&self, name: &str, units: usize) -> LayerSpec {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Dense,
            input_shape: vec![self.current_shape().iter().product()],
            output_shape: vec![units],
            activation: Activation::None,
        }
    }

    pub fn classifier(self, classes: usize) -> Result<NetworkSpec> {
        let heads = vec![self.head("logits", classes)];
        self.finish(HeadKind::Classifier, heads)
    }

    pub fn actor_critic(self, actions: usize) -> Result<NetworkSpec> {
        let heads = vec![self.head("policy", actions), self.head("value", 1)];
        self.finish(HeadKind::ActorCritic, heads)
    }

    fn finish(self, head_kind: HeadKind, heads: Vec<LayerSpec>) -> Result<NetworkSpec> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let spec = NetworkSpec {
            input_shape: self.input_shape,
            layers: self.layers,
            head_kind,
            heads,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Glorot-uniform weights in `±√(6/(fan_in+fan_out))`, zero biases.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for l in spec.all_layers() {
        let (fan_in, fan_out) = l.fans();
        let shape = l.weight_shape();
        let w = glorot_uniform(&mut rng, &shape, fan_in, fan_out);
        store.insert(l.weight_name(), w);
        store.insert(l.bias_name(), Tensor::zeros(&l.bias_shape()));
    }
    store
}

pub(crate) fn glorot_uniform(
    rng: &mut impl Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let bound = glorot_bound(fan_in, fan_out);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape")
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Pre- and post-activation of one layer.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub z: Var,
    pub h: Var,
}

pub type TapRecord = IndexMap<String, Tap>;

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[logits]` or `[policy logits, value]`, each `[batch × dim]`.
    pub heads: Vec<Var>,
    pub taps: TapRecord,
}

/// Reshapes `x` to `[batch × input_len]`, accepting either the flat form or
/// `[batch, input_shape..]`.
pub fn flatten_input(g: &mut Graph, spec: &NetworkSpec, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let d = spec.input_len();
    let ok = (shape.len() == 2 && shape[1] == d) || shape[1..] == spec.input_shape[..];
    if !ok {
        return dim_err(format!(
            "input of shape {shape:?} does not match network input {:?}",
            spec.input_shape
        ));
    }
    if shape.len() == 2 {
        Ok(x)
    } else {
        g.reshape(x, &[shape[0], d])
    }
}

/// Plain forward pass recording `z` and `h` of every layer, heads included.
pub fn forward_with_taps(
    g: &mut Graph,
    spec: &NetworkSpec,
    params: &Bound,
    x: Var,
) -> Result<ForwardOutput> {
    let mut h = flatten_input(g, spec, x)?;
    let mut taps = TapRecord::new();
    for l in &spec.layers {
        let z = l.pre_activation(g, params, h)?;
        h = l.activation.apply(g, z)?;
        taps.insert(l.name.clone(), Tap { z, h });
    }
    let mut heads = Vec::with_capacity(spec.heads.len());
    for l in &spec.heads {
        let z = l.pre_activation(g, params, h)?;
        let out = l.activation.apply(g, z)?;
        taps.insert(l.name.clone(), Tap { z, h: out });
        heads.push(out);
    }
    Ok(ForwardOutput { heads, taps })
}

/// Head outputs of a forward pass without gradient tracking.
pub fn predict(spec: &NetworkSpec, params: &ParamStore, input: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let bound = params.bind_const(&mut g);
    let x = g.constant(input.clone());
    let out = forward_with_taps(&mut g, spec, &bound, x)?;
    Ok(out.heads.iter().map(|&v| g.value(v).clone()).collect())
}
