//! Rewriting raw models into the equivalent form.
//!
//! Batch norms and multipliers are folded into the preceding convolution (or
//! FC) weights, and every bias becomes a slice of one concatenated bias
//! vector that the equivalent model reads as extra input. Folding arithmetic
//! runs in `f64` and is cast back to the model's element type.

use crate::error::{Error, Result};
use crate::extended::{BiasLayout, ExtendedInput};
use crate::graph::{BatchNormParams, BiasSource, Form, LayerOp, LayerSpec, ModelGraph};
use crate::tensor::{Element, Tensor};

/// Folded weights `w′` and bias `b′` of a layer followed by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `w′ = γ·w/√(σ²+ε)` per output channel and `b′ = β + γ·(b − μ)/√(σ²+ε)`,
/// with `b = 0` when the layer had no bias of its own.
///
/// The weight's last axis is the output channel (conv kernels and FC weights).
pub fn fold_batch_norm<T: Element>(
    weight: &Tensor<T>,
    prior_bias: Option<&Tensor<T>>,
    bn: &BatchNormParams<T>,
) -> Result<FoldedLayer<T>> {
    bn.validate()?;
    let co = *weight
        .shape()
        .last()
        .ok_or_else(|| Error::shape("cannot fold a scalar weight"))?;
    if bn.channels() != co {
        return Err(Error::Dimension {
            axis: "batch-norm channels".into(),
            expected: co,
            found: bn.channels(),
        });
    }
    if let Some(b) = prior_bias {
        if b.len() != co {
            return Err(Error::Dimension {
                axis: "bias length before batch norm".into(),
                expected: co,
                found: b.len(),
            });
        }
    }
    let scale: Vec<f64> = (0..co)
        .map(|o| {
            let denom = bn.variance.data()[o].as_f64() + bn.epsilon;
            if denom > 0.0 {
                Ok(bn.gamma.data()[o].as_f64() / denom.sqrt())
            } else {
                Err(Error::invalid(format!("batch-norm channel {o}: σ² + ε = {denom} ≤ 0")))
            }
        })
        .collect::<Result<_>>()?;
    let w = Tensor::from_fn(weight.shape().to_vec(), |i| {
        T::from_f64(weight.data()[i].as_f64() * scale[i % co])
    });
    let b = Tensor::from_fn(vec![co], |o| {
        let prior = prior_bias.map_or(0.0, |b| b.data()[o].as_f64());
        T::from_f64(bn.beta.data()[o].as_f64() + (prior - bn.mean.data()[o].as_f64()) * scale[o])
    });
    w.check_finite("batch-norm fold")?;
    b.check_finite("batch-norm fold")?;
    Ok(FoldedLayer { weight: w, bias: b })
}

/// Scales every weight by the multiplier `m`.
pub fn merge_multiplier<T: Element>(weight: &Tensor<T>, m: T) -> Result<Tensor<T>> {
    if !m.is_finite() {
        return Err(Error::invalid("multiplier is not finite"));
    }
    let m = m.as_f64();
    Ok(weight.map(|v| T::from_f64(v.as_f64() * m)))
}

/// An equivalent model together with the bias vector it reads.
#[derive(Clone, Debug)]
pub struct Extraction<T> {
    pub model: ModelGraph<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Extraction<T> {
    pub fn layout(&self) -> &BiasLayout {
        self.model.bias_layout()
    }

    /// Pairs an image with the extracted bias vector.
    pub fn extend(&self, image: Tensor<T>) -> Result<ExtendedInput<T>> {
        ExtendedInput::new(image, self.bias.clone(), self.layout().clone())
    }
}

/// Converts a raw model to the equivalent form.
///
/// Rules, applied left to right:
/// * `conv|fc [bias] batch_norm` becomes the folded layer plus one bias slot
///   named after the batch-norm layer;
/// * `conv multiplier` becomes the scaled conv;
/// * any other parameter bias becomes a bias slot with the same id.
///
/// A batch norm or multiplier that does not directly follow a weight layer has
/// no rule and is an error, as is an already equivalent model.
pub fn extract_bias_vector<T: Element>(model: &ModelGraph<T>) -> Result<Extraction<T>> {
    if model.form() == Form::Equivalent {
        return Err(Error::Form(format!(
            "model `{}` is already in equivalent form; refusing to fold twice",
            model.name()
        )));
    }
    let layers = model.layers();
    let mut out: Vec<LayerSpec<T>> = Vec::with_capacity(layers.len());
    let mut bias: Vec<T> = Vec::new();
    let mut i = 0;
    while i < layers.len() {
        let layer = &layers[i];
        match &layer.op {
            LayerOp::Conv { .. } | LayerOp::Fc { .. } => {
                let mut weight = weight_of(&layer.op).clone();
                let mut j = i + 1;
                while let Some(LayerOp::Multiplier(m)) = layers.get(j).map(|l| &l.op) {
                    if !matches!(layer.op, LayerOp::Conv { .. }) {
                        break;
                    }
                    weight = merge_multiplier(&weight, *m)?;
                    j += 1;
                }
                let prior = match layers.get(j).map(|l| &l.op) {
                    Some(LayerOp::BiasAdd {
                        source: BiasSource::Param(b),
                        broadcast: false,
                    }) if matches!(layers.get(j + 1).map(|l| &l.op), Some(LayerOp::BatchNorm(_))) => {
                        Some(b)
                    }
                    _ => None,
                };
                let bn_at = if prior.is_some() { j + 1 } else { j };
                if let Some(LayerOp::BatchNorm(bn)) = layers.get(bn_at).map(|l| &l.op) {
                    let folded = fold_batch_norm(&weight, prior, bn)?;
                    out.push(LayerSpec::new(layer.id.clone(), with_weight(&layer.op, folded.weight)));
                    out.push(LayerSpec::bias_slot(layers[bn_at].id.clone(), false));
                    bias.extend_from_slice(folded.bias.data());
                    i = bn_at + 1;
                } else {
                    out.push(LayerSpec::new(layer.id.clone(), with_weight(&layer.op, weight)));
                    i = j;
                }
            }
            LayerOp::BiasAdd {
                source: BiasSource::Param(values),
                broadcast,
            } => {
                out.push(LayerSpec::bias_slot(layer.id.clone(), *broadcast));
                bias.extend_from_slice(values.data());
                i += 1;
            }
            LayerOp::BatchNorm(_) | LayerOp::Multiplier(_) | LayerOp::BiasAdd { .. } => {
                return Err(Error::NoFoldRule {
                    id: layer.id.clone(),
                    kind: layer.op.kind().to_string(),
                })
            }
            _ => {
                out.push(layer.clone());
                i += 1;
            }
        }
    }
    let model = ModelGraph::new(model.name(), model.input_shape(), Form::Equivalent, out)?;
    let bias = Tensor::vector(bias);
    debug_assert_eq!(bias.len(), model.bias_len());
    Ok(Extraction { model, bias })
}

fn weight_of<T: Element>(op: &LayerOp<T>) -> &Tensor<T> {
    match op {
        LayerOp::Conv { kernel, .. } => kernel,
        LayerOp::Fc { weight } => weight,
        _ => unreachable!("weight_of called on a weightless layer"),
    }
}

fn with_weight<T: Element>(op: &LayerOp<T>, weight: Tensor<T>) -> LayerOp<T> {
    match op {
        LayerOp::Conv { stride, padding, .. } => LayerOp::Conv {
            kernel: weight,
            stride: *stride,
            padding: *padding,
        },
        LayerOp::Fc { .. } => LayerOp::Fc { weight },
        _ => unreachable!("with_weight called on a weightless layer"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DEFAULT_BN_EPSILON;
    use crate::tensor::Padding;

    fn bn(gamma: f64, beta: f64, mean: f64, var: f64, c: usize) -> BatchNormParams<f64> {
        BatchNormParams {
            gamma: Tensor::filled(vec![c], gamma),
            beta: Tensor::filled(vec![c], beta),
            mean: Tensor::filled(vec![c], mean),
            variance: Tensor::filled(vec![c], var),
            epsilon: DEFAULT_BN_EPSILON,
        }
    }

    #[test]
    fn identity_normalization() {
        let w = Tensor::<f64>::from_fn(vec![3, 3, 2, 4], |i| i as f64 * 0.01);
        let f = fold_batch_norm(&w, None, &bn(1.0, 0.0, 0.0, 1.0 - DEFAULT_BN_EPSILON, 4)).unwrap();
        for (a, b) in f.weight.data().iter().zip(w.data()) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
        assert!(f.bias.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_denominator() {
        let w = Tensor::<f64>::filled(vec![1, 1, 1, 2], 0.5);
        let f = fold_batch_norm(&w, None, &bn(2.0, 3.0, 1.0, 0.999, 2)).unwrap();
        for v in f.weight.data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        for v in f.bias.data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn multiplier_edges() {
        let w = Tensor::<f64>::from_fn(vec![2, 2, 1, 1], |i| i as f64 - 1.5);
        assert_eq!(merge_multiplier(&w, 1.0).unwrap(), w);
        assert!(merge_multiplier(&w, 0.0).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(merge_multiplier(&w, f64::NAN).is_err());
    }

    #[test]
    fn concatenates_in_layer_order() {
        let layers = vec![
            LayerSpec::conv("c0", Tensor::<f64>::filled(vec![1, 1, 1, 2], 1.0), 1, Padding::Same),
            LayerSpec::bias("b0", Tensor::vector(vec![1.0, 2.0])),
            LayerSpec::relu("r0"),
            LayerSpec::conv("c1", Tensor::filled(vec![1, 1, 2, 1], 1.0), 1, Padding::Same),
            LayerSpec::bias("b1", Tensor::vector(vec![3.0])),
        ];
        let raw = ModelGraph::new("t", [2, 2, 1], Form::Raw, layers).unwrap();
        let ex = extract_bias_vector(&raw).unwrap();
        assert_eq!(ex.bias.data(), &[1.0, 2.0, 3.0]);
        let slots: Vec<_> = ex
            .layout()
            .slots()
            .iter()
            .map(|s| (s.layer_id.as_str(), s.offset, s.len))
            .collect();
        assert_eq!(slots, vec![("b0", 0, 2), ("b1", 2, 1)]);
        assert!(matches!(extract_bias_vector(&ex.model), Err(Error::Form(_))));
    }

    #[test]
    fn orphan_batch_norm_has_no_rule() {
        let layers = vec![
            LayerSpec::conv("c0", Tensor::<f64>::filled(vec![1, 1, 1, 2], 1.0), 1, Padding::Same),
            LayerSpec::relu("r0"),
            LayerSpec::batch_norm("bn", bn(1.0, 0.0, 0.0, 1.0, 2)),
        ];
        let raw = ModelGraph::new("t", [2, 2, 1], Form::Raw, layers).unwrap();
        assert!(matches!(
            extract_bias_vector(&raw),
            Err(Error::NoFoldRule { ref id, .. }) if id == "bn"
        ));
    }
}
