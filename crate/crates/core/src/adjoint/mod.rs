//! Exact Jacobians of forward sub-paths with respect to the extended input.
//!
//! A [`Linearization`] runs the forward pass once at the evaluation point
//! `z = k·[x; x_b]` and keeps the trace. Every later vector-Jacobian product
//! reuses the recorded activation slopes and max-pool selections, so the
//! forward and adjoint passes always agree on which linear piece is active.

mod reconstruct;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extended::{ExtendedInput, ExtendedVector};
use crate::graph::{ActivationTrace, BiasSource, Form, LayerOp, ModelGraph};
use crate::tensor::{conv2d_backward_input, pool_backward, Element, PoolKind, Tensor};

pub use reconstruct::{
    hypersurface_shape, mode_sum_check, reconstruct, reconstruct_with, Coords, HypersurfacePair,
    Mode, ModeSums, Strategy,
};

/// Evaluation scale used by default: `z = [x; x_b] / 8`.
pub const DEFAULT_K: f64 = 0.125;

/// The point `k·[x; x_b]` at which Jacobians are evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint<T> {
    base: ExtendedInput<T>,
    k: f64,
}

impl<T: Element> EvalPoint<T> {
    pub fn new(base: ExtendedInput<T>, k: f64) -> Result<Self> {
        if k.is_nan() || k <= 0.0 || !k.is_finite() {
            return Err(Error::invalid(format!("evaluation scale k must be positive and finite, found {k}")));
        }
        Ok(Self { base, k })
    }

    pub fn with_default_scale(base: ExtendedInput<T>) -> Self {
        Self { base, k: DEFAULT_K }
    }

    pub fn base(&self) -> &ExtendedInput<T> {
        &self.base
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// `k·[x; x_b]`.
    pub fn point(&self) -> ExtendedInput<T> {
        self.base.scaled(T::from_f64(self.k))
    }
}

/// The sub-path whose Jacobian is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    /// Everything before conv layer `layer`: its output is that layer's input maps.
    ConvInput { layer: usize },
    /// Everything before the FC layer: its output is the global-pool vector.
    GlobalPool,
}

impl Target {
    /// Node index where the sub-path stops (exclusive).
    pub fn end_node<T: Element>(&self, model: &ModelGraph<T>) -> Result<usize> {
        match *self {
            Target::ConvInput { layer } => model.reconstructable_conv(layer),
            Target::GlobalPool => model
                .fc_node()
                .ok_or_else(|| Error::ModeMismatch("model has no fc layer".into())),
        }
    }
}

/// Forward trace at an evaluation point, ready for vector-Jacobian products.
#[derive(Clone, Debug)]
pub struct Linearization<'m, T> {
    model: &'m ModelGraph<T>,
    trace: ActivationTrace<T>,
    k: f64,
}

impl<'m, T: Element> Linearization<'m, T> {
    pub fn new(model: &'m ModelGraph<T>, at: &EvalPoint<T>) -> Result<Self> {
        if model.form() != Form::Equivalent {
            return Err(Error::Form("Jacobians need an equivalent model; fold it first".into()));
        }
        let trace = model.forward(&at.point())?;
        Ok(Self {
            model,
            trace,
            k: at.k(),
        })
    }

    pub fn model(&self) -> &'m ModelGraph<T> {
        self.model
    }

    pub fn trace(&self) -> &ActivationTrace<T> {
        &self.trace
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// `Jᵀ·grad` for the sub-path made of nodes `0..end`.
    ///
    /// `grad` is shaped like the input of node `end` (the sub-path output).
    /// Returns the image and bias parts of the pulled-back vector.
    pub fn pullback(&self, end: usize, grad: Tensor<T>) -> Result<ExtendedVector<T>> {
        let model = self.model;
        if end > model.len() {
            return Err(Error::invalid(format!("sub-path end {end} beyond {} layers", model.len())));
        }
        let input_shape = model.input_shape();
        let want = if end == 0 {
            &input_shape[..]
        } else {
            model.output_shape(end - 1)
        };
        if grad.shape() != want {
            return Err(Error::shape(format!(
                "seed shape {:?} does not match sub-path output {:?}",
                grad.shape(),
                want
            )));
        }
        let mut bias = vec![T::zero(); model.bias_len()];
        let mut g = grad;
        let mut branches: Vec<Tensor<T>> = Vec::new();
        for i in (0..end).rev() {
            let layer = model.layer(i);
            let in_shape = model.node_input_shape(i);
            g = match &layer.op {
                LayerOp::Conv {
                    kernel,
                    stride,
                    padding,
                } => conv2d_backward_input(&g, kernel, hwc(in_shape), *stride, *padding)?,
                LayerOp::BiasAdd {
                    source: BiasSource::Slot,
                    broadcast,
                } => {
                    let slot = model
                        .bias_layout()
                        .slot(&layer.id)
                        .expect("equivalent models have a slot per bias layer");
                    let dst = &mut bias[slot.offset..slot.offset + slot.len];
                    if *broadcast {
                        dst[0] += g.data().iter().copied().sum::<T>();
                    } else {
                        for px in g.data().chunks(slot.len) {
                            for (d, &v) in dst.iter_mut().zip(px) {
                                *d += v;
                            }
                        }
                    }
                    g
                }
                LayerOp::Activation(a) => {
                    let pre = self.trace.node_input(i);
                    for (v, &c) in g.data_mut().iter_mut().zip(pre.data()) {
                        *v *= a.slope(c);
                    }
                    g
                }
                LayerOp::AvgPool {
                    window,
                    stride,
                    padding,
                } => pool_backward(
                    &g,
                    hwc(in_shape),
                    PoolKind::Avg,
                    (*window, *window),
                    *stride,
                    *padding,
                    None,
                )?,
                LayerOp::MaxPool {
                    window,
                    stride,
                    padding,
                } => pool_backward(
                    &g,
                    hwc(in_shape),
                    PoolKind::Max,
                    (*window, *window),
                    *stride,
                    *padding,
                    self.trace.argmax(i),
                )?,
                LayerOp::GlobalPool => {
                    pool_backward(&g, hwc(in_shape), PoolKind::GlobalAvg, (1, 1), 1, Default::default(), None)?
                }
                LayerOp::Fc { weight } => {
                    let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
                    let w = weight.data();
                    let out = (0..rows)
                        .map(|r| {
                            let mut acc = T::zero();
                            for (&wv, &gv) in w[r * cols..(r + 1) * cols].iter().zip(g.data()) {
                                acc += wv * gv;
                            }
                            acc
                        })
                        .collect();
                    Tensor::vector(out)
                }
                LayerOp::ShortcutAdd(kind) => {
                    let begin = model.shortcut_partner(i).expect("paired shortcut");
                    let saved_shape = model.node_input_shape(begin);
                    branches.push(crate::graph::shortcut_backward(&g, *kind, saved_shape)?);
                    g
                }
                LayerOp::ShortcutBegin => {
                    let add = model.shortcut_partner(i).expect("paired shortcut");
                    if add < end {
                        let branch = branches.pop().expect("branch pushed by its shortcut_add");
                        g.add_assign(&branch)?;
                    }
                    g
                }
                LayerOp::BiasAdd { .. } | LayerOp::BatchNorm(_) | LayerOp::Multiplier(_) => {
                    unreachable!("equivalent models hold no parameter biases, batch norms or multipliers")
                }
            };
        }
        let [h, w, c] = model.input_shape();
        Ok(ExtendedVector::new(
            g.reshape(vec![h, w, c])?,
            Tensor::vector(bias),
        ))
    }
}

fn hwc(s: &[usize]) -> (usize, usize, usize) {
    (s[0], s[1], s[2])
}

/// Jacobian of a sub-path split into image and bias columns.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianPair<T> {
    /// `[rows, H·W·C]`.
    pub image: Tensor<T>,
    /// `[rows, M]`.
    pub bias: Tensor<T>,
    pub target: Target,
    /// Shape of the sub-path output; `rows` is its element count.
    pub out_shape: Vec<usize>,
}

impl<T: Element> JacobianPair<T> {
    pub fn rows(&self) -> usize {
        self.image.shape()[0]
    }

    /// `J·[x; x_b]`, the sub-path output reproduced from the Jacobian.
    pub fn apply(&self, x: &ExtendedInput<T>) -> Result<Tensor<T>> {
        let img = x.image().data();
        let b = x.bias().data();
        let (ni, nb) = (self.image.shape()[1], self.bias.shape()[1]);
        if img.len() != ni || b.len() != nb {
            return Err(Error::shape(format!(
                "Jacobian columns ({ni} + {nb}) do not match input ({} + {})",
                img.len(),
                b.len()
            )));
        }
        let out = (0..self.rows())
            .map(|r| {
                let mut acc = T::zero();
                for (&j, &v) in self.image.data()[r * ni..(r + 1) * ni].iter().zip(img) {
                    acc += j * v;
                }
                for (&j, &v) in self.bias.data()[r * nb..(r + 1) * nb].iter().zip(b) {
                    acc += j * v;
                }
                acc
            })
            .collect();
        Tensor::new(self.out_shape.clone(), out)
    }
}

/// Full Jacobian of the sub-path `target` at the evaluation point, one
/// vector-Jacobian product per output scalar, computed in parallel.
pub fn jacobian_extended<T: Element>(
    model: &ModelGraph<T>,
    target: Target,
    at: &EvalPoint<T>,
) -> Result<JacobianPair<T>> {
    let lin = Linearization::new(model, at)?;
    jacobian_from(&lin, target)
}

pub(crate) fn jacobian_from<T: Element>(lin: &Linearization<'_, T>, target: Target) -> Result<JacobianPair<T>> {
    let model = lin.model();
    let end = target.end_node(model)?;
    let out_shape = model.node_input_shape(end).to_vec();
    let rows: usize = out_shape.iter().product();
    let cols: Vec<ExtendedVector<T>> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let mut seed = Tensor::zeros(out_shape.clone());
            seed.data_mut()[r] = T::one();
            lin.pullback(end, seed)
        })
        .collect::<Result<_>>()?;
    let (ni, nb) = (model.image_len(), model.bias_len());
    let mut image = Vec::with_capacity(rows * ni);
    let mut bias = Vec::with_capacity(rows * nb);
    for v in &cols {
        image.extend_from_slice(v.image.data());
        bias.extend_from_slice(v.bias.data());
    }
    Ok(JacobianPair {
        image: Tensor::new(vec![rows, ni], image)?,
        bias: Tensor::new(vec![rows, nb], bias)?,
        target,
        out_shape,
    })
}

#[cfg(test)]
mod tests;
