//! Dense-matrix oracle.
//!
//! Every layer is materialized as an explicit matrix acting on the flattened
//! activations and the Jacobian is built by direct multiplication:
//! `J ← A·J` for linear layers, `J ← Σ·J` for activations, `J += [0 | R]`
//! for bias slots. It shares no code with the adjoint engine beyond the
//! activation slope rule and is only meant for small models.

use serde::{Deserialize, Serialize};

use super::LayerTarget;
use crate::adjoint::{jacobian_extended, EvalPoint, Target};
use crate::error::{Error, Result};
use crate::extended::ExtendedInput;
use crate::graph::{BiasSource, Form, LayerOp, ModelGraph, ShortcutKind};
use crate::tensor::{Element, Padding, Tensor};

/// Largest model (in [`ModelGraph::total_units`]) the oracle accepts.
pub const DENSE_UNIT_LIMIT: usize = 100_000;

/// Outcome of [`oracle_dense_check`]; both deviations are `‖a − b‖∞ / ‖b‖∞`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseCheck {
    pub layer: LayerTarget,
    /// Dense `J_l·[x; x_b]` against the forward pass's unit values.
    pub reproduction: f64,
    /// Adjoint-engine Jacobian against the dense one, entrywise.
    pub jacobian: f64,
}

impl DenseCheck {
    pub fn max(&self) -> f64 {
        self.reproduction.max(self.jacobian)
    }
}

#[derive(Clone, Debug)]
struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn at(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    fn mul(&self, b: &Dense) -> Dense {
        assert_eq!(self.cols, b.rows);
        let mut out = Dense::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    for (o, &v) in row.iter_mut().zip(&b.data[k * b.cols..(k + 1) * b.cols]) {
                        *o += a * v;
                    }
                }
            }
        }
        out
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    fn add(&mut self, other: &Dense) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Top/left padding and output size of a sliding window, recomputed here.
fn window(n: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            (out, total / 2)
        }
        Padding::Valid => ((n - k) / stride + 1, 0),
    }
}

fn conv_matrix(kernel: &Tensor<f64>, in_shape: &[usize], stride: usize, padding: Padding) -> Dense {
    let (h, w, ci) = (in_shape[0], in_shape[1], in_shape[2]);
    let k = kernel.shape();
    let (r1, r2, co) = (k[0], k[1], k[3]);
    let (oh, pt) = window(h, r1, stride, padding);
    let (ow, pl) = window(w, r2, stride, padding);
    let mut m = Dense::zeros(oh * ow * co, h * w * ci);
    for oy in 0..oh {
        for ox in 0..ow {
            for a in 0..r1 {
                let Some(iy) = (oy * stride + a).checked_sub(pt).filter(|&y| y < h) else { continue };
                for b in 0..r2 {
                    let Some(ix) = (ox * stride + b).checked_sub(pl).filter(|&x| x < w) else { continue };
                    for c in 0..ci {
                        for o in 0..co {
                            *m.at((oy * ow + ox) * co + o, (iy * w + ix) * ci + c) +=
                                kernel.data()[((a * r2 + b) * ci + c) * co + o];
                        }
                    }
                }
            }
        }
    }
    m
}

/// Average pooling (in-bounds divisor) or max pooling picking from `v`.
fn pool_matrix(in_shape: &[usize], win: usize, stride: usize, padding: Padding, max_of: Option<&[f64]>) -> Dense {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, pt) = window(h, win, stride, padding);
    let (ow, pl) = window(w, win, stride, padding);
    let mut m = Dense::zeros(oh * ow * c, h * w * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let cells: Vec<(usize, usize)> = (0..win)
                .filter_map(|a| (oy * stride + a).checked_sub(pt).filter(|&y| y < h))
                .flat_map(|iy| {
                    (0..win)
                        .filter_map(move |b| (ox * stride + b).checked_sub(pl).filter(|&x| x < w))
                        .map(move |ix| (iy, ix))
                })
                .collect();
            for ch in 0..c {
                let row = (oy * ow + ox) * c + ch;
                match max_of {
                    None => {
                        for &(iy, ix) in &cells {
                            *m.at(row, (iy * w + ix) * c + ch) = 1.0 / cells.len() as f64;
                        }
                    }
                    Some(v) => {
                        let mut best = (iy_ix(cells[0], w, c, ch), f64::NEG_INFINITY);
                        for &cell in &cells {
                            let i = iy_ix(cell, w, c, ch);
                            if v[i] > best.1 || (v[i] == best.1 && i < best.0) {
                                best = (i, v[i]);
                            }
                        }
                        *m.at(row, best.0) = 1.0;
                    }
                }
            }
        }
    }
    m
}

fn iy_ix((iy, ix): (usize, usize), w: usize, c: usize, ch: usize) -> usize {
    (iy * w + ix) * c + ch
}

fn shortcut_matrix(saved: &[usize], out: &[usize], kind: ShortcutKind) -> Dense {
    let n_in: usize = saved.iter().product();
    match kind {
        ShortcutKind::Identity => {
            let mut m = Dense::zeros(n_in, n_in);
            for i in 0..n_in {
                *m.at(i, i) = 1.0;
            }
            m
        }
        ShortcutKind::AvgpoolPad { window: win, stride } => {
            let pooled = pool_matrix(saved, win, stride, Padding::Same, None);
            let (c_in, c_out) = (saved[2], out[2]);
            let low = (c_out - c_in) / 2;
            let pixels = out[0] * out[1];
            let mut pad = Dense::zeros(pixels * c_out, pixels * c_in);
            for p in 0..pixels {
                for c in 0..c_in {
                    *pad.at(p * c_out + low + c, p * c_in + c) = 1.0;
                }
            }
            pad.mul(&pooled)
        }
    }
}

struct State {
    /// Activations at the evaluation point.
    v: Vec<f64>,
    /// `∂v/∂[x; x_b]`.
    j: Dense,
}

/// Walks nodes `0..end` densely at `z`, returning the state entering node `end`.
fn dense_walk(model: &ModelGraph<f64>, z: &ExtendedInput<f64>, end: usize) -> State {
    let ni = model.image_len();
    let d = model.d_in();
    let mut j = Dense::zeros(ni, d);
    for i in 0..ni {
        *j.at(i, i) = 1.0;
    }
    let mut st = State {
        v: z.image().data().to_vec(),
        j,
    };
    let mut saved: Vec<State> = Vec::new();
    let xb = z.bias().data();
    for node in 0..end {
        let in_shape = model.node_input_shape(node).to_vec();
        let layer = model.layer(node);
        let linear = match &layer.op {
            LayerOp::Conv {
                kernel,
                stride,
                padding,
            } => Some(conv_matrix(kernel, &in_shape, *stride, *padding)),
            LayerOp::AvgPool {
                window: w,
                stride,
                padding,
            } => Some(pool_matrix(&in_shape, *w, *stride, *padding, None)),
            LayerOp::MaxPool {
                window: w,
                stride,
                padding,
            } => Some(pool_matrix(&in_shape, *w, *stride, *padding, Some(&st.v))),
            LayerOp::GlobalPool => {
                let (hw, c) = (in_shape[0] * in_shape[1], in_shape[2]);
                let mut m = Dense::zeros(c, hw * c);
                for p in 0..hw {
                    for ch in 0..c {
                        *m.at(ch, p * c + ch) = 1.0 / hw as f64;
                    }
                }
                Some(m)
            }
            LayerOp::Fc { weight } => {
                let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
                let mut m = Dense::zeros(cols, rows);
                for r in 0..rows {
                    for c in 0..cols {
                        *m.at(c, r) = weight.data()[r * cols + c];
                    }
                }
                Some(m)
            }
            LayerOp::BiasAdd {
                source: BiasSource::Slot,
                broadcast,
            } => {
                let slot = model.bias_layout().slot(&layer.id).expect("slot for bias layer");
                let c = *in_shape.last().expect("shape");
                let n = st.v.len();
                for r in 0..n {
                    let col = slot.offset + if *broadcast { 0 } else { r % c };
                    st.v[r] += xb[col];
                    *st.j.at(r, ni + col) += 1.0;
                }
                None
            }
            LayerOp::Activation(a) => {
                for r in 0..st.v.len() {
                    let s = a.slope(st.v[r]);
                    st.v[r] = a.apply(st.v[r]);
                    for e in &mut st.j.data[r * d..(r + 1) * d] {
                        *e *= s;
                    }
                }
                None
            }
            LayerOp::ShortcutBegin => {
                saved.push(State {
                    v: st.v.clone(),
                    j: st.j.clone(),
                });
                None
            }
            LayerOp::ShortcutAdd(kind) => {
                let begin = model.shortcut_partner(node).expect("paired shortcut");
                let s = saved.pop().expect("open shortcut");
                let m = shortcut_matrix(model.node_input_shape(begin), &in_shape, *kind);
                for (a, b) in st.v.iter_mut().zip(m.apply(&s.v)) {
                    *a += b;
                }
                st.j.add(&m.mul(&s.j));
                None
            }
            LayerOp::BiasAdd { .. } | LayerOp::BatchNorm(_) | LayerOp::Multiplier(_) => {
                unreachable!("equivalent form checked by the caller")
            }
        };
        if let Some(a) = linear {
            st.v = a.apply(&st.v);
            st.j = a.mul(&st.j);
        }
    }
    st
}

/// `‖a − b‖∞ / ‖b‖∞`, zero when the slices are equal.
pub fn normwise_deviation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

/// Builds `J_l` by the explicit dense recurrence at `k·[x; x_b]` and checks
/// `c_l = J_l·[x; x_b]` against the forward pass, and the adjoint engine's
/// Jacobian against the dense one.
pub fn oracle_dense_check<T: Element>(
    model: &ModelGraph<T>,
    x: &ExtendedInput<T>,
    layer: LayerTarget,
    k: f64,
) -> Result<DenseCheck> {
    if model.form() != Form::Equivalent {
        return Err(Error::Form("the dense oracle needs an equivalent model".into()));
    }
    let units = model.total_units();
    if units > DENSE_UNIT_LIMIT {
        return Err(Error::SizeGuard {
            units,
            limit: DENSE_UNIT_LIMIT,
        });
    }
    let m64 = model.cast::<f64>();
    let x64 = x.cast::<f64>();
    let at = EvalPoint::new(x64.clone(), k)?;
    let (target, unit_node) = match layer {
        LayerTarget::Conv(l) => (Target::ConvInput { layer: l }, m64.reconstructable_conv(l)?),
        LayerTarget::Fc => (
            Target::GlobalPool,
            m64.fc_node()
                .ok_or_else(|| Error::ModeMismatch("model has no fc layer".into()))?,
        ),
    };
    let st = dense_walk(&m64, &at.point(), unit_node);
    let unit_op = match &m64.layer(unit_node).op {
        LayerOp::Conv {
            kernel,
            stride,
            padding,
        } => conv_matrix(kernel, m64.node_input_shape(unit_node), *stride, *padding),
        LayerOp::Fc { weight } => {
            let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
            let mut m = Dense::zeros(cols, rows);
            for r in 0..rows {
                for c in 0..cols {
                    *m.at(c, r) = weight.data()[r * cols + c];
                }
            }
            m
        }
        _ => unreachable!("unit node is a conv or fc"),
    };
    let j_l = unit_op.mul(&st.j);
    let full: Vec<f64> = x64.image().data().iter().chain(x64.bias().data()).copied().collect();
    let c_dense = j_l.apply(&full);
    let trace = m64.forward(&x64)?;
    let reproduction = normwise_deviation(&c_dense, trace.output(unit_node).data());

    let engine = jacobian_extended(&m64, target, &at)?;
    let (ni, nb) = (m64.image_len(), m64.bias_len());
    let mut flat = Vec::with_capacity(engine.rows() * (ni + nb));
    for r in 0..engine.rows() {
        flat.extend_from_slice(&engine.image.data()[r * ni..(r + 1) * ni]);
        flat.extend_from_slice(&engine.bias.data()[r * nb..(r + 1) * nb]);
    }
    let jacobian = normwise_deviation(&flat, &st.j.data);
    Ok(DenseCheck {
        layer,
        reproduction,
        jacobian,
    })
}
