use super::{shortcut_shape, BiasSource, Form, LayerOp, ModelGraph, ShortcutKind, UnitCoord};
use crate::error::{Error, Result};
use crate::extended::ExtendedInput;
use crate::tensor::{conv2d, global_avg_pool, pool, Element, Padding, PoolKind, Tensor};

/// Every intermediate tensor of one forward pass.
///
/// `output(i)` is the tensor produced by node `i`; the pre-activation of an
/// activation node is its input, `node_input(i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace<T> {
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    argmax: Vec<Option<Vec<usize>>>,
    kinks: usize,
    ties: usize,
}

impl<T: Element> ActivationTrace<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    pub fn output(&self, node: usize) -> &Tensor<T> {
        &self.outputs[node]
    }

    pub fn node_input(&self, node: usize) -> &Tensor<T> {
        if node == 0 {
            &self.input
        } else {
            &self.outputs[node - 1]
        }
    }

    /// Output of the last layer.
    pub fn final_output(&self) -> &Tensor<T> {
        self.outputs.last().unwrap_or(&self.input)
    }

    pub fn outputs(&self) -> &[Tensor<T>] {
        &self.outputs
    }

    /// Selected flat input offsets of a max-pool node.
    pub fn argmax(&self, node: usize) -> Option<&[usize]> {
        self.argmax[node].as_deref()
    }

    /// Pre-activation values that sat exactly on a kink.
    pub fn kinks(&self) -> usize {
        self.kinks
    }

    /// Max-pool windows whose maximum was attained more than once.
    pub fn ties(&self) -> usize {
        self.ties
    }
}

impl<T: Element> ModelGraph<T> {
    /// Forward pass of an equivalent model on an extended input.
    ///
    /// Each bias layer reads its slice of the input's bias vector.
    pub fn forward(&self, x: &ExtendedInput<T>) -> Result<ActivationTrace<T>> {
        if self.form != Form::Equivalent {
            return Err(Error::Form(
                "forward on an extended input needs an equivalent model; use forward_raw".into(),
            ));
        }
        if x.layout() != self.bias_layout() {
            return Err(Error::Layout(format!(
                "input layout ({} slots, M = {}) does not match the model's ({} slots, M = {})",
                x.layout().slots().len(),
                x.layout().total_len(),
                self.bias_layout().slots().len(),
                self.bias_len()
            )));
        }
        self.execute(x.image(), Some(x.bias().data()))
    }

    /// Forward pass of a raw model (biases, batch norm and multipliers taken
    /// from the layers).
    pub fn forward_raw(&self, image: &Tensor<T>) -> Result<ActivationTrace<T>> {
        if self.form != Form::Raw {
            return Err(Error::Form(
                "forward_raw needs a raw model; equivalent models read biases from the extended input"
                    .into(),
            ));
        }
        self.execute(image, None)
    }

    /// Linear activation of a unit: for conv units the convolution sum before
    /// the layer's bias; for FC units the FC output before any bias.
    pub fn unit_linear_activation(&self, trace: &ActivationTrace<T>, unit: UnitCoord) -> Result<T> {
        let (node, offset) = self.locate_unit(unit)?;
        Ok(trace.output(node).data()[offset])
    }

    /// FC output (pre-activation), if the model has an FC layer.
    pub fn logits<'a>(&self, trace: &'a ActivationTrace<T>) -> Option<&'a Tensor<T>> {
        self.fc_node().map(|n| trace.output(n))
    }

    /// `(layer id, pre-activation, post-activation)` for every activation layer.
    pub fn activation_pairs<'a>(
        &'a self,
        trace: &'a ActivationTrace<T>,
    ) -> Vec<(&'a str, &'a Tensor<T>, &'a Tensor<T>)> {
        self.layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.op, LayerOp::Activation(_)))
            .map(|(i, l)| (l.id.as_str(), trace.node_input(i), trace.output(i)))
            .collect()
    }

    fn execute(&self, image: &Tensor<T>, bias: Option<&[T]>) -> Result<ActivationTrace<T>> {
        let shape = self.input_shape();
        if image.shape() != shape {
            return Err(Error::shape(format!(
                "image shape {:?} does not match model input {:?}",
                image.shape(),
                shape
            )));
        }
        image.check_finite("input image")?;
        if let Some(b) = bias {
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("input bias vector".into()));
            }
        }
        let n = self.len();
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(n);
        let mut argmax = vec![None; n];
        let mut kinks = 0;
        let mut ties = 0;
        let mut saved: Vec<Tensor<T>> = Vec::new();

        for (i, layer) in self.layers().iter().enumerate() {
            let x = if i == 0 { image } else { &outputs[i - 1] };
            let out = match &layer.op {
                LayerOp::Conv {
                    kernel,
                    stride,
                    padding,
                } => conv2d(x, kernel, *stride, *padding)?,
                LayerOp::BiasAdd { source, broadcast } => {
                    let values: &[T] = match source {
                        BiasSource::Param(t) => t.data(),
                        BiasSource::Slot => {
                            let b = bias.ok_or_else(|| {
                                Error::Form(format!("`{}` needs the bias vector", layer.id))
                            })?;
                            self.bias_layout().restrict(&layer.id, b)?
                        }
                    };
                    add_bias(x, values, *broadcast)
                }
                LayerOp::Activation(a) => {
                    let mut out = x.clone();
                    for v in out.data_mut() {
                        kinks += usize::from(a.is_kink(*v));
                        *v = a.apply(*v);
                    }
                    out
                }
                LayerOp::AvgPool {
                    window,
                    stride,
                    padding,
                } => pool(x, PoolKind::Avg, (*window, *window), *stride, *padding)?.output,
                LayerOp::MaxPool {
                    window,
                    stride,
                    padding,
                } => {
                    let p = pool(x, PoolKind::Max, (*window, *window), *stride, *padding)?;
                    argmax[i] = p.argmax;
                    ties += p.ties;
                    p.output
                }
                LayerOp::GlobalPool => global_avg_pool(x)?,
                LayerOp::Fc { weight } => fc_forward(x, weight),
                LayerOp::ShortcutBegin => {
                    saved.push(x.clone());
                    x.clone()
                }
                LayerOp::ShortcutAdd(kind) => {
                    let s = saved.pop().expect("shortcuts are paired at construction");
                    let adjusted = shortcut_forward(&s, *kind, x.shape()[x.rank() - 1])?;
                    x.add(&adjusted)?
                }
                LayerOp::BatchNorm(bn) => {
                    let c = bn.channels();
                    let eps = T::from_f64(bn.epsilon);
                    let mut out = x.clone();
                    for px in out.data_mut().chunks_mut(c) {
                        for (o, v) in px.iter_mut().enumerate() {
                            let denom = (bn.variance.data()[o] + eps).sqrt();
                            *v = bn.gamma.data()[o] * (*v - bn.mean.data()[o]) / denom
                                + bn.beta.data()[o];
                        }
                    }
                    out
                }
                LayerOp::Multiplier(m) => x.scale(*m),
            };
            out.check_finite(&format!("layer `{}`", layer.id))?;
            outputs.push(out);
        }
        Ok(ActivationTrace {
            input: image.clone(),
            outputs,
            argmax,
            kinks,
            ties,
        })
    }
}

fn add_bias<T: Element>(x: &Tensor<T>, values: &[T], broadcast: bool) -> Tensor<T> {
    let mut out = x.clone();
    if broadcast {
        let b = values[0];
        for v in out.data_mut() {
            *v += b;
        }
    } else {
        let c = values.len();
        for px in out.data_mut().chunks_mut(c) {
            for (v, &b) in px.iter_mut().zip(values) {
                *v += b;
            }
        }
    }
    out
}

pub(crate) fn fc_forward<T: Element>(x: &Tensor<T>, weight: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
    let w = weight.data();
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        let xv = x.data()[r];
        for (o, &wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += xv * wv;
        }
    }
    Tensor::vector(out)
}

/// Pools a saved shortcut tensor and pads it with zero channels up to `channels`.
pub(crate) fn shortcut_forward<T: Element>(
    saved: &Tensor<T>,
    kind: ShortcutKind,
    channels: usize,
) -> Result<Tensor<T>> {
    match kind {
        ShortcutKind::Identity => Ok(saved.clone()),
        ShortcutKind::AvgpoolPad { window, stride } => {
            let pooled = pool(saved, PoolKind::Avg, (window, window), stride, Padding::Same)?.output;
            let (h, w, c) = pooled.hwc()?;
            let low = (channels - c) / 2;
            let mut out = Tensor::zeros(vec![h, w, channels]);
            for (dst, src) in out.data_mut().chunks_mut(channels).zip(pooled.data().chunks(c)) {
                dst[low..low + c].copy_from_slice(src);
            }
            Ok(out)
        }
    }
}

/// Adjoint of [`shortcut_forward`]: crops the padded channels, then undoes the pooling.
pub(crate) fn shortcut_backward<T: Element>(
    grad: &Tensor<T>,
    kind: ShortcutKind,
    saved_shape: &[usize],
) -> Result<Tensor<T>> {
    match kind {
        ShortcutKind::Identity => Ok(grad.clone()),
        ShortcutKind::AvgpoolPad { window, stride } => {
            let pooled_shape = shortcut_shape(saved_shape, kind)?;
            let (h, w, c) = (pooled_shape[0], pooled_shape[1], pooled_shape[2]);
            let channels = grad.shape()[2];
            let low = (channels - c) / 2;
            let mut cropped = Vec::with_capacity(h * w * c);
            for px in grad.data().chunks(channels) {
                cropped.extend_from_slice(&px[low..low + c]);
            }
            let cropped = Tensor::new(vec![h, w, c], cropped)?;
            crate::tensor::pool_backward(
                &cropped,
                (saved_shape[0], saved_shape[1], saved_shape[2]),
                PoolKind::Avg,
                (window, window),
                stride,
                Padding::Same,
                None,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extended::BiasLayout;
    use crate::graph::{ActivationDescriptor, LayerSpec};

    #[test]
    fn hand_computed_single_unit() {
        let layers = vec![
            LayerSpec::conv("c", Tensor::from_f64(vec![1, 1, 1, 1], &[3.0]).unwrap(), 1, Padding::Same),
            LayerSpec::bias_slot("b", false),
            LayerSpec::relu("r"),
        ];
        let m = ModelGraph::new("t", [1, 1, 1], Form::Equivalent, layers).unwrap();
        let x = ExtendedInput::new(
            Tensor::from_f64(vec![1, 1, 1], &[1.0]).unwrap(),
            Tensor::vector(vec![2.0]),
            m.bias_layout().clone(),
        )
        .unwrap();
        let t = m.forward(&x).unwrap();
        assert_eq!(t.output(0).data(), &[3.0]);
        assert_eq!(t.output(1).data(), &[5.0]);
        assert_eq!(t.output(2).data(), &[5.0]);
    }

    #[test]
    fn zero_input_gives_zero_everywhere() {
        let layers = vec![
            LayerSpec::conv("c0", Tensor::<f64>::filled(vec![3, 3, 2, 3], 0.7), 1, Padding::Same),
            LayerSpec::bias_slot("b0", false),
            LayerSpec::activation("a0", ActivationDescriptor::leaky(0.1)),
            LayerSpec::conv("c1", Tensor::filled(vec![3, 3, 3, 2], -0.3), 2, Padding::Same),
            LayerSpec::bias_slot("b1", false),
            LayerSpec::relu("a1"),
            LayerSpec::global_pool("gp"),
            LayerSpec::fc("fc", Tensor::filled(vec![2, 4], 0.5)),
        ];
        let m = ModelGraph::new("t", [4, 4, 2], Form::Equivalent, layers).unwrap();
        let x = ExtendedInput::new(
            Tensor::zeros(vec![4, 4, 2]),
            Tensor::zeros(vec![m.bias_len()]),
            m.bias_layout().clone(),
        )
        .unwrap();
        let t = m.forward(&x).unwrap();
        assert!(t.outputs().iter().all(|o| o.data().iter().all(|v| *v == 0.0)));
        assert_eq!(t.final_output().shape(), &[4]);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let layers = vec![
            LayerSpec::conv("c", Tensor::<f64>::filled(vec![1, 1, 1, 2], 1.0), 1, Padding::Same),
            LayerSpec::bias_slot("b", false),
        ];
        let m = ModelGraph::new("t", [2, 2, 1], Form::Equivalent, layers).unwrap();
        let wrong = BiasLayout::from_lengths([("b", 1, false)]);
        let x = ExtendedInput::new(Tensor::zeros(vec![2, 2, 1]), Tensor::zeros(vec![1]), wrong).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::Layout(_))));
    }

    #[test]
    fn non_finite_is_surfaced() {
        let layers = vec![LayerSpec::multiplier("m", f64::MAX)];
        let m = ModelGraph::new("t", [1, 1, 1], Form::Raw, layers).unwrap();
        let x = Tensor::filled(vec![1, 1, 1], 4.0);
        assert!(matches!(m.forward_raw(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn avgpool_pad_places_channels_in_the_middle() {
        let saved = Tensor::<f64>::from_fn(vec![2, 2, 2], |i| i as f64 + 1.0);
        let out = shortcut_forward(
            &saved,
            ShortcutKind::AvgpoolPad {
                window: 1,
                stride: 2,
            },
            5,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 1, 5]);
        assert_eq!(out.data(), &[0.0, 1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn shortcut_backward_is_adjoint() {
        let kind = ShortcutKind::AvgpoolPad {
            window: 3,
            stride: 2,
        };
        let saved = Tensor::<f64>::from_fn(vec![5, 5, 2], |i| ((i * 7) % 11) as f64 - 5.0);
        let fwd = shortcut_forward(&saved, kind, 4).unwrap();
        let g = Tensor::<f64>::from_fn(fwd.shape().to_vec(), |i| ((i * 3) % 5) as f64 - 2.0);
        let back = shortcut_backward(&g, kind, saved.shape()).unwrap();
        let lhs: f64 = fwd.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = saved.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }
}
