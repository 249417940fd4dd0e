//! Ordered layer graphs for piecewise-linear CNNs.
//!
//! A [`ModelGraph`] is a flat list of layers executed in order. Residual
//! blocks are expressed with a `shortcut_begin` marker that saves the current
//! tensor and a `shortcut_add` that adds the (optionally pooled and
//! channel-padded) saved tensor back. Graphs come in two forms: `Raw` may hold
//! batch-norm and multiplier layers and carries its biases as parameters;
//! `Equivalent` holds only convolutions, FC weights, activations and pools,
//! and reads every bias from the extended input.

mod activation;
mod forward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extended::{BiasLayout, BiasSlot};
use crate::tensor::{Element, Padding, Tensor};

pub use activation::{ActivationDescriptor, DEFAULT_LEAK};
pub use forward::ActivationTrace;
pub(crate) use forward::shortcut_backward;

/// Default batch-norm stabilizer.
pub const DEFAULT_BN_EPSILON: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Raw,
    Equivalent,
}

impl std::fmt::Display for Form {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Form::Raw => "raw",
            Form::Equivalent => "equivalent",
        })
    }
}

/// How a saved shortcut tensor is brought to the shape of the main path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShortcutKind {
    Identity,
    /// Average pooling (SAME padding) followed by zero channels split evenly
    /// on both sides, the lower side getting the smaller half.
    AvgpoolPad { window: usize, stride: usize },
}

/// Inference-mode batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub mean: Tensor<T>,
    pub variance: Tensor<T>,
    pub epsilon: f64,
}

impl<T: Element> BatchNormParams<T> {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        for (name, t) in [
            ("beta", &self.beta),
            ("mean", &self.mean),
            ("variance", &self.variance),
        ] {
            if t.len() != c {
                return Err(Error::Dimension {
                    axis: format!("batch-norm {name} length"),
                    expected: c,
                    found: t.len(),
                });
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::invalid(format!(
                "batch-norm epsilon must be positive, found {}",
                self.epsilon
            )));
        }
        if self.variance.data().iter().any(|v| *v < T::zero()) {
            return Err(Error::invalid("batch-norm variance must be non-negative"));
        }
        Ok(())
    }

    fn cast<U: Element>(&self) -> BatchNormParams<U> {
        BatchNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            mean: self.mean.cast(),
            variance: self.variance.cast(),
            epsilon: self.epsilon,
        }
    }
}

/// Where a bias-add layer gets its values from.
#[derive(Clone, Debug, PartialEq)]
pub enum BiasSource<T> {
    /// Values stored with the layer (raw form).
    Param(Tensor<T>),
    /// Values read from the extended input's bias vector (equivalent form).
    Slot,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp<T> {
    Conv {
        kernel: Tensor<T>,
        stride: usize,
        padding: Padding,
    },
    BiasAdd {
        source: BiasSource<T>,
        /// A single scalar added to every element.
        broadcast: bool,
    },
    Activation(ActivationDescriptor),
    AvgPool {
        window: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool {
        window: usize,
        stride: usize,
        padding: Padding,
    },
    GlobalPool,
    /// Dense layer with weight `[c_in, c_out]`, no built-in bias.
    Fc { weight: Tensor<T> },
    ShortcutBegin,
    ShortcutAdd(ShortcutKind),
    BatchNorm(BatchNormParams<T>),
    Multiplier(T),
}

impl<T: Element> LayerOp<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerOp::Conv { .. } => "conv",
            LayerOp::BiasAdd { .. } => "bias_add",
            LayerOp::Activation(_) => "activation",
            LayerOp::AvgPool { .. } => "avg_pool",
            LayerOp::MaxPool { .. } => "max_pool",
            LayerOp::GlobalPool => "global_pool",
            LayerOp::Fc { .. } => "fc",
            LayerOp::ShortcutBegin => "shortcut_begin",
            LayerOp::ShortcutAdd(_) => "shortcut_add",
            LayerOp::BatchNorm(_) => "batch_norm",
            LayerOp::Multiplier(_) => "multiplier",
        }
    }

    fn cast<U: Element>(&self) -> LayerOp<U> {
        match self {
            LayerOp::Conv {
                kernel,
                stride,
                padding,
            } => LayerOp::Conv {
                kernel: kernel.cast(),
                stride: *stride,
                padding: *padding,
            },
            LayerOp::BiasAdd { source, broadcast } => LayerOp::BiasAdd {
                source: match source {
                    BiasSource::Param(t) => BiasSource::Param(t.cast()),
                    BiasSource::Slot => BiasSource::Slot,
                },
                broadcast: *broadcast,
            },
            LayerOp::Activation(a) => LayerOp::Activation(a.clone()),
            LayerOp::AvgPool {
                window,
                stride,
                padding,
            } => LayerOp::AvgPool {
                window: *window,
                stride: *stride,
                padding: *padding,
            },
            LayerOp::MaxPool {
                window,
                stride,
                padding,
            } => LayerOp::MaxPool {
                window: *window,
                stride: *stride,
                padding: *padding,
            },
            LayerOp::GlobalPool => LayerOp::GlobalPool,
            LayerOp::Fc { weight } => LayerOp::Fc {
                weight: weight.cast(),
            },
            LayerOp::ShortcutBegin => LayerOp::ShortcutBegin,
            LayerOp::ShortcutAdd(k) => LayerOp::ShortcutAdd(*k),
            LayerOp::BatchNorm(bn) => LayerOp::BatchNorm(bn.cast()),
            LayerOp::Multiplier(m) => LayerOp::Multiplier(U::from_f64(m.as_f64())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec<T> {
    pub id: String,
    pub op: LayerOp<T>,
}

impl<T: Element> LayerSpec<T> {
    pub fn new(id: impl Into<String>, op: LayerOp<T>) -> Self {
        Self { id: id.into(), op }
    }

    pub fn conv(id: impl Into<String>, kernel: Tensor<T>, stride: usize, padding: Padding) -> Self {
        Self::new(
            id,
            LayerOp::Conv {
                kernel,
                stride,
                padding,
            },
        )
    }

    pub fn bias(id: impl Into<String>, values: Tensor<T>) -> Self {
        Self::new(
            id,
            LayerOp::BiasAdd {
                source: BiasSource::Param(values),
                broadcast: false,
            },
        )
    }

    pub fn scalar_bias(id: impl Into<String>, value: T) -> Self {
        Self::new(
            id,
            LayerOp::BiasAdd {
                source: BiasSource::Param(Tensor::vector(vec![value])),
                broadcast: true,
            },
        )
    }

    pub fn bias_slot(id: impl Into<String>, broadcast: bool) -> Self {
        Self::new(
            id,
            LayerOp::BiasAdd {
                source: BiasSource::Slot,
                broadcast,
            },
        )
    }

    pub fn activation(id: impl Into<String>, a: ActivationDescriptor) -> Self {
        Self::new(id, LayerOp::Activation(a))
    }

    pub fn relu(id: impl Into<String>) -> Self {
        Self::activation(id, ActivationDescriptor::Relu)
    }

    pub fn avg_pool(id: impl Into<String>, window: usize, stride: usize, padding: Padding) -> Self {
        Self::new(
            id,
            LayerOp::AvgPool {
                window,
                stride,
                padding,
            },
        )
    }

    pub fn max_pool(id: impl Into<String>, window: usize, stride: usize, padding: Padding) -> Self {
        Self::new(
            id,
            LayerOp::MaxPool {
                window,
                stride,
                padding,
            },
        )
    }

    pub fn global_pool(id: impl Into<String>) -> Self {
        Self::new(id, LayerOp::GlobalPool)
    }

    pub fn fc(id: impl Into<String>, weight: Tensor<T>) -> Self {
        Self::new(id, LayerOp::Fc { weight })
    }

    pub fn shortcut_begin(id: impl Into<String>) -> Self {
        Self::new(id, LayerOp::ShortcutBegin)
    }

    pub fn shortcut_add(id: impl Into<String>, kind: ShortcutKind) -> Self {
        Self::new(id, LayerOp::ShortcutAdd(kind))
    }

    pub fn batch_norm(id: impl Into<String>, bn: BatchNormParams<T>) -> Self {
        Self::new(id, LayerOp::BatchNorm(bn))
    }

    pub fn multiplier(id: impl Into<String>, m: T) -> Self {
        Self::new(id, LayerOp::Multiplier(m))
    }
}

/// Address of one scalar unit whose linear activation can be reconstructed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnitCoord {
    /// Conv layer ordinal `layer` (0-based over conv layers), output pixel
    /// `stride_idx` in row-major order, out-channel `out_ch`.
    Conv {
        layer: usize,
        stride_idx: usize,
        out_ch: usize,
    },
    Fc { class: usize },
}

/// A shape-checked, immutable layer graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T> {
    name: String,
    input_shape: [usize; 3],
    form: Form,
    layers: Vec<LayerSpec<T>>,
    out_shapes: Vec<Vec<usize>>,
    conv_nodes: Vec<usize>,
    fc_node: Option<usize>,
    shortcut_partner: Vec<Option<usize>>,
    layout: BiasLayout,
}

impl<T: Element> ModelGraph<T> {
    pub fn new(
        name: impl Into<String>,
        input_shape: [usize; 3],
        form: Form,
        layers: Vec<LayerSpec<T>>,
    ) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(Error::shape(format!("input shape {input_shape:?} has an empty axis")));
        }
        let mut out_shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
        let mut conv_nodes = Vec::new();
        let mut fc_node = None;
        let mut shortcut_partner = vec![None; layers.len()];
        let mut open: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut seen = std::collections::HashSet::new();

        for (i, layer) in layers.iter().enumerate() {
            if layer.id.is_empty() {
                return Err(Error::invalid(format!("layer {i} has an empty id")));
            }
            if !seen.insert(layer.id.as_str()) {
                return Err(Error::invalid(format!("duplicate layer id `{}`", layer.id)));
            }
            let prev_id = if i == 0 { "input" } else { layers[i - 1].id.as_str() };
            let s: &[usize] = if i == 0 {
                &input_shape
            } else {
                &out_shapes[i - 1]
            };
            let mismatch = |what: String| {
                Error::shape(format!(
                    "layer `{prev_id}` output {s:?} does not fit layer `{}`: {what}",
                    layer.id
                ))
            };
            if fc_node.is_some() && matches!(layer.op, LayerOp::Conv { .. } | LayerOp::Fc { .. }) {
                return Err(Error::invalid(format!(
                    "layer `{}`: convolutions and a second FC cannot follow the FC layer",
                    layer.id
                )));
            }
            let out: Vec<usize> = match &layer.op {
                LayerOp::Conv {
                    kernel,
                    stride,
                    padding,
                } => {
                    let [h, w, c] = rank3(s).ok_or_else(|| mismatch("conv needs an h×w×c input".into()))?;
                    let [r1, r2, kci, co] = match kernel.shape()[..] {
                        [a, b, c, d] => [a, b, c, d],
                        _ => {
                            return Err(Error::shape(format!(
                                "conv `{}` kernel must be rank 4, found {:?}",
                                layer.id,
                                kernel.shape()
                            )))
                        }
                    };
                    if kci != c {
                        return Err(mismatch(format!("kernel expects {kci} in-channels, found {c}")));
                    }
                    let g = padding
                        .geometry(h, w, r1, r2, *stride)
                        .map_err(|e| mismatch(e.to_string()))?;
                    conv_nodes.push(i);
                    vec![g.out_h, g.out_w, co]
                }
                LayerOp::BiasAdd { source, broadcast } => {
                    if s.len() != 1 && s.len() != 3 {
                        return Err(mismatch("bias_add needs a rank-1 or rank-3 input".into()));
                    }
                    let channels = *s.last().expect("non-empty shape");
                    let want = if *broadcast { 1 } else { channels };
                    match (source, form) {
                        (BiasSource::Param(values), Form::Raw) => {
                            if values.rank() != 1 || values.len() != want {
                                return Err(mismatch(format!(
                                    "bias length {} (shape {:?}) but {} expected",
                                    values.len(),
                                    values.shape(),
                                    want
                                )));
                            }
                        }
                        (BiasSource::Slot, Form::Equivalent) => {
                            slots.push(BiasSlot {
                                layer_id: layer.id.clone(),
                                offset,
                                len: want,
                                broadcast: *broadcast,
                            });
                            offset += want;
                        }
                        (BiasSource::Param(_), Form::Equivalent) => {
                            return Err(Error::Form(format!(
                                "equivalent model holds a parameter bias at `{}`",
                                layer.id
                            )))
                        }
                        (BiasSource::Slot, Form::Raw) => {
                            return Err(Error::Form(format!(
                                "raw model references the bias vector at `{}`",
                                layer.id
                            )))
                        }
                    }
                    s.to_vec()
                }
                LayerOp::Activation(a) => {
                    a.validate()?;
                    s.to_vec()
                }
                LayerOp::AvgPool {
                    window,
                    stride,
                    padding,
                }
                | LayerOp::MaxPool {
                    window,
                    stride,
                    padding,
                } => {
                    let [h, w, c] = rank3(s).ok_or_else(|| mismatch("pooling needs an h×w×c input".into()))?;
                    if *padding == Padding::Same && (*window > h || *window > w) {
                        return Err(mismatch(format!("pool window {window} exceeds input")));
                    }
                    let g = padding
                        .geometry(h, w, *window, *window, *stride)
                        .map_err(|e| mismatch(e.to_string()))?;
                    vec![g.out_h, g.out_w, c]
                }
                LayerOp::GlobalPool => {
                    let [_, _, c] =
                        rank3(s).ok_or_else(|| mismatch("global pooling needs an h×w×c input".into()))?;
                    vec![c]
                }
                LayerOp::Fc { weight } => {
                    if s.len() != 1 {
                        return Err(mismatch("fc needs a rank-1 input".into()));
                    }
                    let (rows, cols) = match weight.shape()[..] {
                        [a, b] => (a, b),
                        _ => {
                            return Err(Error::shape(format!(
                                "fc `{}` weight must be rank 2, found {:?}",
                                layer.id,
                                weight.shape()
                            )))
                        }
                    };
                    if rows != s[0] {
                        return Err(mismatch(format!("fc weight has {rows} rows, input has {}", s[0])));
                    }
                    fc_node = Some(i);
                    vec![cols]
                }
                LayerOp::ShortcutBegin => {
                    open.push((i, s.to_vec()));
                    s.to_vec()
                }
                LayerOp::ShortcutAdd(kind) => {
                    let (begin, saved) = open.pop().ok_or_else(|| {
                        Error::shape(format!("shortcut_add `{}` has no open shortcut_begin", layer.id))
                    })?;
                    let begin_id = &layers[begin].id;
                    let adjusted = shortcut_shape(&saved, *kind).map_err(|e| {
                        Error::shape(format!(
                            "shortcut from `{begin_id}` cannot be adjusted at `{}`: {e}",
                            layer.id
                        ))
                    })?;
                    let ok = match kind {
                        ShortcutKind::Identity => adjusted == s,
                        ShortcutKind::AvgpoolPad { .. } => {
                            s.len() == 3 && adjusted[..2] == s[..2] && adjusted[2] <= s[2]
                        }
                    };
                    if !ok {
                        return Err(Error::shape(format!(
                            "shortcut from `{begin_id}` (shape {saved:?}, adjusted {adjusted:?}) \
                             does not match `{prev_id}` output {s:?} at `{}`",
                            layer.id
                        )));
                    }
                    shortcut_partner[begin] = Some(i);
                    shortcut_partner[i] = Some(begin);
                    s.to_vec()
                }
                LayerOp::BatchNorm(bn) => {
                    if form == Form::Equivalent {
                        return Err(Error::Form(format!(
                            "equivalent model contains batch-norm layer `{}`",
                            layer.id
                        )));
                    }
                    bn.validate()?;
                    if s.len() != 1 && s.len() != 3 {
                        return Err(mismatch("batch-norm needs a rank-1 or rank-3 input".into()));
                    }
                    let c = *s.last().expect("non-empty shape");
                    if bn.channels() != c {
                        return Err(mismatch(format!("batch-norm has {} channels, input has {c}", bn.channels())));
                    }
                    s.to_vec()
                }
                LayerOp::Multiplier(m) => {
                    if form == Form::Equivalent {
                        return Err(Error::Form(format!(
                            "equivalent model contains multiplier layer `{}`",
                            layer.id
                        )));
                    }
                    if !m.is_finite() {
                        return Err(Error::invalid(format!("multiplier `{}` is not finite", layer.id)));
                    }
                    s.to_vec()
                }
            };
            if let LayerOp::Conv { kernel, .. } | LayerOp::Fc { weight: kernel } = &layer.op {
                kernel.check_finite(&format!("parameters of `{}`", layer.id))?;
            }
            out_shapes.push(out);
        }
        if let Some((begin, _)) = open.pop() {
            return Err(Error::shape(format!(
                "shortcut_begin `{}` is never closed",
                layers[begin].id
            )));
        }
        let layout = BiasLayout::new(slots)?;
        Ok(Self {
            name: name.into(),
            input_shape,
            form,
            layers,
            out_shapes,
            conv_nodes,
            fc_node,
            shortcut_partner,
            layout,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn image_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn form(&self) -> Form {
        self.form
    }

    pub fn layers(&self) -> &[LayerSpec<T>] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<LayerSpec<T>> {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, node: usize) -> &LayerSpec<T> {
        &self.layers[node]
    }

    pub fn node_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Output shape of node `node`.
    pub fn output_shape(&self, node: usize) -> &[usize] {
        &self.out_shapes[node]
    }

    /// Input shape of node `node` (the model input for node 0).
    pub fn node_input_shape(&self, node: usize) -> &[usize] {
        if node == 0 {
            &self.input_shape
        } else {
            &self.out_shapes[node - 1]
        }
    }

    /// Node indices of the conv layers, in order; conv layer `l` is `conv_nodes()[l]`.
    pub fn conv_nodes(&self) -> &[usize] {
        &self.conv_nodes
    }

    pub fn conv_count(&self) -> usize {
        self.conv_nodes.len()
    }

    pub fn fc_node(&self) -> Option<usize> {
        self.fc_node
    }

    /// Matching `shortcut_add` for a `shortcut_begin` node and vice versa.
    pub fn shortcut_partner(&self, node: usize) -> Option<usize> {
        self.shortcut_partner[node]
    }

    /// Bias layout of an equivalent model (empty for raw models).
    pub fn bias_layout(&self) -> &BiasLayout {
        &self.layout
    }

    /// Length `M` of the bias vector an equivalent model reads.
    pub fn bias_len(&self) -> usize {
        self.layout.total_len()
    }

    /// Extended-input dimension `d_in = H·W·C + M`.
    pub fn d_in(&self) -> usize {
        self.image_len() + self.bias_len()
    }

    /// Node of conv layer `l`, rejecting layer 0 and out-of-range ordinals.
    pub fn reconstructable_conv(&self, l: usize) -> Result<usize> {
        if l == 0 {
            return Err(Error::FirstLayer);
        }
        self.conv_nodes.get(l).copied().ok_or_else(|| {
            Error::UnitOutOfRange(format!(
                "conv layer {l} requested but the model has {} conv layers",
                self.conv_nodes.len()
            ))
        })
    }

    /// Kernel, stride and padding of a conv node.
    pub fn conv_params(&self, node: usize) -> (&Tensor<T>, usize, Padding) {
        match &self.layers[node].op {
            LayerOp::Conv {
                kernel,
                stride,
                padding,
            } => (kernel, *stride, *padding),
            other => panic!("node {node} is {} rather than conv", other.kind()),
        }
    }

    pub fn fc_weight(&self) -> Option<&Tensor<T>> {
        self.fc_node.map(|n| match &self.layers[n].op {
            LayerOp::Fc { weight } => weight,
            _ => unreachable!("fc_node points at an fc layer"),
        })
    }

    /// Number of scalar units of conv layer `l` (`h_o·w_o·c_out`).
    pub fn conv_unit_count(&self, l: usize) -> Result<usize> {
        let node = *self.conv_nodes.get(l).ok_or_else(|| {
            Error::UnitOutOfRange(format!("conv layer {l} of {}", self.conv_nodes.len()))
        })?;
        Ok(self.out_shapes[node].iter().product())
    }

    /// Validates a unit address and returns `(node, flat offset in the node output)`.
    pub fn locate_unit(&self, unit: UnitCoord) -> Result<(usize, usize)> {
        match unit {
            UnitCoord::Conv {
                layer,
                stride_idx,
                out_ch,
            } => {
                let node = self.reconstructable_conv(layer)?;
                let s = &self.out_shapes[node];
                let (positions, co) = (s[0] * s[1], s[2]);
                if stride_idx >= positions {
                    return Err(Error::UnitOutOfRange(format!(
                        "stride index {stride_idx} of conv layer {layer} with {positions} positions"
                    )));
                }
                if out_ch >= co {
                    return Err(Error::UnitOutOfRange(format!(
                        "out-channel {out_ch} of conv layer {layer} with {co} channels"
                    )));
                }
                Ok((node, stride_idx * co + out_ch))
            }
            UnitCoord::Fc { class } => {
                let node = self
                    .fc_node
                    .ok_or_else(|| Error::UnitOutOfRange("model has no fc layer".into()))?;
                let n = self.out_shapes[node][0];
                if class >= n {
                    return Err(Error::UnitOutOfRange(format!("class {class} of {n}")));
                }
                Ok((node, class))
            }
        }
    }

    /// Total number of scalar values produced by conv, pool, FC and bias layers,
    /// the size measure used to guard dense-matrix work.
    pub fn total_units(&self) -> usize {
        self.layers
            .iter()
            .zip(&self.out_shapes)
            .filter(|(l, _)| {
                matches!(
                    l.op,
                    LayerOp::Conv { .. }
                        | LayerOp::Fc { .. }
                        | LayerOp::AvgPool { .. }
                        | LayerOp::MaxPool { .. }
                        | LayerOp::GlobalPool
                )
            })
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Whether every activation keeps its derivative constant along rays.
    pub fn is_positively_homogeneous(&self) -> bool {
        self.layers.iter().all(|l| match &l.op {
            LayerOp::Activation(a) => a.is_positively_homogeneous(),
            _ => true,
        })
    }

    pub fn has_max_pool(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.op, LayerOp::MaxPool { .. }))
    }

    pub fn cast<U: Element>(&self) -> ModelGraph<U> {
        ModelGraph {
            name: self.name.clone(),
            input_shape: self.input_shape,
            form: self.form,
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    id: l.id.clone(),
                    op: l.op.cast(),
                })
                .collect(),
            out_shapes: self.out_shapes.clone(),
            conv_nodes: self.conv_nodes.clone(),
            fc_node: self.fc_node,
            shortcut_partner: self.shortcut_partner.clone(),
            layout: self.layout.clone(),
        }
    }
}

fn rank3(s: &[usize]) -> Option<[usize; 3]> {
    match s {
        [h, w, c] => Some([*h, *w, *c]),
        _ => None,
    }
}

pub(crate) fn shortcut_shape(saved: &[usize], kind: ShortcutKind) -> Result<Vec<usize>> {
    match kind {
        ShortcutKind::Identity => Ok(saved.to_vec()),
        ShortcutKind::AvgpoolPad { window, stride } => {
            let [h, w, c] = rank3(saved).ok_or_else(|| Error::shape("avgpool_pad needs an h×w×c tensor"))?;
            let g = Padding::Same.geometry(h, w, window, window, stride)?;
            Ok(vec![g.out_h, g.out_w, c])
        }
    }
}
