use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{jacobian_from, EvalPoint, Linearization, Target};
use crate::error::{Error, Result};
use crate::extended::{inner_product, inner_product_parts, ExtendedInput, ExtendedVector};
use crate::graph::ModelGraph;
use crate::tensor::{conv2d_batched, Element, Tensor};

/// Reconstruction mode: which kernel back-maps stay separate.
///
/// Output axes (after the leading extended-input axis):
/// `Rm4` `[h_o, w_o, c_in, c_out]`, `Rm3` `[c_in, c_out]`,
/// `Rm2` `[h_o, w_o, c_out]`, `Rm1` `[c_out]`, `Rm0` `[classes]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Rm0,
    Rm1,
    Rm2,
    Rm3,
    Rm4,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Rm0, Mode::Rm1, Mode::Rm2, Mode::Rm3, Mode::Rm4];

    fn keeps_stride(self) -> bool {
        matches!(self, Mode::Rm2 | Mode::Rm4)
    }

    fn keeps_in_ch(self) -> bool {
        matches!(self, Mode::Rm3 | Mode::Rm4)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Rm0 => "rm0",
            Mode::Rm1 => "rm1",
            Mode::Rm2 => "rm2",
            Mode::Rm3 => "rm3",
            Mode::Rm4 => "rm4",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rm0" => Ok(Mode::Rm0),
            "rm1" => Ok(Mode::Rm1),
            "rm2" => Ok(Mode::Rm2),
            "rm3" => Ok(Mode::Rm3),
            "rm4" => Ok(Mode::Rm4),
            other => Err(Error::invalid(format!("unknown mode `{other}` (expected rm0..rm4)"))),
        }
    }
}

/// Which hypersurfaces to build. `None` keeps the whole axis; a selected
/// coordinate leaves a size-1 axis (a selected stride index collapses both
/// spatial axes).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coords {
    pub layer: Option<usize>,
    pub out_ch: Option<usize>,
    pub stride_idx: Option<usize>,
    pub in_ch: Option<usize>,
    pub class: Option<usize>,
}

impl Coords {
    pub fn conv(layer: usize) -> Self {
        Self {
            layer: Some(layer),
            ..Self::default()
        }
    }

    pub fn fc() -> Self {
        Self::default()
    }

    pub fn out_ch(mut self, i: usize) -> Self {
        self.out_ch = Some(i);
        self
    }

    pub fn stride_idx(mut self, s: usize) -> Self {
        self.stride_idx = Some(s);
        self
    }

    pub fn in_ch(mut self, j: usize) -> Self {
        self.in_ch = Some(j);
        self
    }

    pub fn class(mut self, k: usize) -> Self {
        self.class = Some(k);
        self
    }
}

/// How hypersurfaces are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Pick whichever needs fewer vector-Jacobian products.
    #[default]
    Auto,
    /// Materialize the sub-path Jacobian, then convolve it with the layer's
    /// kernels treating the extended-input axis as a batch axis.
    Batched,
    /// One vector-Jacobian product per requested hypersurface.
    Seeded,
}

/// An effective hypersurface (or a block of them) split into image and bias parts.
#[derive(Clone, Debug, PartialEq)]
pub struct HypersurfacePair<T> {
    /// `[H, W, C, axes..]`.
    pub image: Tensor<T>,
    /// `[M, axes..]`.
    pub bias: Tensor<T>,
    pub mode: Mode,
    pub coords: Coords,
    pub k: f64,
}

impl<T: Element> HypersurfacePair<T> {
    pub fn axes(&self) -> &[usize] {
        &self.image.shape()[3..]
    }

    /// Number of hypersurfaces held.
    pub fn count(&self) -> usize {
        self.axes().iter().product()
    }

    pub fn d_in(&self) -> usize {
        self.image.len() / self.count().max(1) + self.bias.shape()[0]
    }

    /// `[d_in, axes..]` with image rows first, then bias rows.
    pub fn stacked(&self) -> Tensor<T> {
        let mut shape = vec![self.d_in()];
        shape.extend_from_slice(self.axes());
        let mut data = self.image.data().to_vec();
        data.extend_from_slice(self.bias.data());
        Tensor::new(shape, data).expect("image and bias rows share the axes")
    }

    /// Hypersurface `idx` (row-major over the axes) as an extended vector.
    pub fn hypersurface(&self, idx: usize) -> ExtendedVector<T> {
        let n = self.count();
        let s = self.image.shape();
        let image = self.image.data().iter().skip(idx).step_by(n).copied().collect();
        let bias = self.bias.data().iter().skip(idx).step_by(n).copied().collect();
        ExtendedVector::new(
            Tensor::new(vec![s[0], s[1], s[2]], image).expect("image rows"),
            Tensor::vector(bias),
        )
    }

    /// `⟨[x; x_b] | H⟩` for every hypersurface, shaped like the axes.
    pub fn evaluate(&self, x: &ExtendedInput<T>) -> Result<Tensor<T>> {
        let vals = (0..self.count())
            .map(|i| inner_product(x.as_vector(), &self.hypersurface(i)))
            .collect::<Result<_>>()?;
        Tensor::new(self.axes().to_vec(), vals)
    }

    /// Image and bias terms of [`evaluate`](Self::evaluate), separately.
    pub fn evaluate_parts(&self, x: &ExtendedInput<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (mut img, mut b) = (Vec::new(), Vec::new());
        for i in 0..self.count() {
            let (p, q) = inner_product_parts(x.as_vector(), &self.hypersurface(i))?;
            img.push(p);
            b.push(q);
        }
        Ok((
            Tensor::new(self.axes().to_vec(), img)?,
            Tensor::new(self.axes().to_vec(), b)?,
        ))
    }
}

/// One requested hypersurface: stride index, in-channel, out-channel (or class).
#[derive(Clone, Copy, Debug)]
struct Item {
    s: Option<usize>,
    j: Option<usize>,
    i: usize,
}

struct Plan {
    target: Target,
    /// Conv node for RM1–RM4.
    conv: Option<usize>,
    axes: Vec<usize>,
    items: Vec<Item>,
    strides: Vec<usize>,
    ins: Vec<usize>,
    outs: Vec<usize>,
}

fn pick(sel: Option<usize>, n: usize, what: &str) -> Result<Vec<usize>> {
    match sel {
        Some(v) if v >= n => Err(Error::UnitOutOfRange(format!("{what} {v} of {n}"))),
        Some(v) => Ok(vec![v]),
        None => Ok((0..n).collect()),
    }
}

fn plan<T: Element>(model: &ModelGraph<T>, mode: Mode, c: &Coords) -> Result<Plan> {
    let forbid = |present: bool, what: &str| {
        if present {
            Err(Error::ModeMismatch(format!("{mode} does not take {what}")))
        } else {
            Ok(())
        }
    };
    if mode == Mode::Rm0 {
        forbid(c.layer.is_some(), "a conv layer (rm0 addresses FC classes)")?;
        forbid(c.out_ch.is_some(), "an out-channel")?;
        forbid(c.stride_idx.is_some(), "a stride index")?;
        forbid(c.in_ch.is_some(), "an in-channel")?;
        let fc = model
            .fc_node()
            .ok_or_else(|| Error::ModeMismatch("rm0 needs a model with an fc layer".into()))?;
        let classes = model.output_shape(fc)[0];
        let outs = pick(c.class, classes, "class")?;
        return Ok(Plan {
            target: Target::GlobalPool,
            conv: None,
            axes: vec![outs.len()],
            items: outs.iter().map(|&i| Item { s: None, j: None, i }).collect(),
            strides: Vec::new(),
            ins: Vec::new(),
            outs,
        });
    }
    let layer = c
        .layer
        .ok_or_else(|| Error::ModeMismatch(format!("{mode} needs a conv layer")))?;
    forbid(c.class.is_some(), "a class (use rm0)")?;
    if !mode.keeps_stride() {
        forbid(c.stride_idx.is_some(), "a stride index")?;
    }
    if !mode.keeps_in_ch() {
        forbid(c.in_ch.is_some(), "an in-channel")?;
    }
    let node = model.reconstructable_conv(layer)?;
    let (kernel, _, _) = model.conv_params(node);
    let cin = kernel.shape()[2];
    let out = model.output_shape(node);
    let (ho, wo, co) = (out[0], out[1], out[2]);
    let strides = pick(c.stride_idx, ho * wo, "stride index")?;
    let ins = pick(c.in_ch, cin, "in-channel")?;
    let outs = pick(c.out_ch, co, "out-channel")?;
    let (sh, sw) = if c.stride_idx.is_some() { (1, 1) } else { (ho, wo) };
    let mut items = Vec::new();
    let axes = match mode {
        Mode::Rm4 => {
            for &s in &strides {
                for &j in &ins {
                    for &i in &outs {
                        items.push(Item { s: Some(s), j: Some(j), i });
                    }
                }
            }
            vec![sh, sw, ins.len(), outs.len()]
        }
        Mode::Rm3 => {
            for &j in &ins {
                for &i in &outs {
                    items.push(Item { s: None, j: Some(j), i });
                }
            }
            vec![ins.len(), outs.len()]
        }
        Mode::Rm2 => {
            for &s in &strides {
                for &i in &outs {
                    items.push(Item { s: Some(s), j: None, i });
                }
            }
            vec![sh, sw, outs.len()]
        }
        Mode::Rm1 => {
            for &i in &outs {
                items.push(Item { s: None, j: None, i });
            }
            vec![outs.len()]
        }
        Mode::Rm0 => unreachable!(),
    };
    Ok(Plan {
        target: Target::ConvInput { layer },
        conv: Some(node),
        axes,
        items,
        strides,
        ins,
        outs,
    })
}

/// Shape `[d_in, axes..]` of a reconstruction, without computing it.
pub fn hypersurface_shape<T: Element>(model: &ModelGraph<T>, mode: Mode, coords: &Coords) -> Result<Vec<usize>> {
    let p = plan(model, mode, coords)?;
    let mut shape = vec![model.d_in()];
    shape.extend(p.axes);
    Ok(shape)
}

/// Reconstructs effective hypersurfaces with the automatically chosen strategy.
pub fn reconstruct<T: Element>(
    model: &ModelGraph<T>,
    at: &EvalPoint<T>,
    mode: Mode,
    coords: &Coords,
) -> Result<HypersurfacePair<T>> {
    reconstruct_with(model, at, mode, coords, Strategy::Auto)
}

pub fn reconstruct_with<T: Element>(
    model: &ModelGraph<T>,
    at: &EvalPoint<T>,
    mode: Mode,
    coords: &Coords,
    strategy: Strategy,
) -> Result<HypersurfacePair<T>> {
    let lin = Linearization::new(model, at)?;
    lin.reconstruct(mode, coords, strategy)
}

impl<T: Element> Linearization<'_, T> {
    pub fn reconstruct(&self, mode: Mode, coords: &Coords, strategy: Strategy) -> Result<HypersurfacePair<T>> {
        let model = self.model();
        let p = plan(model, mode, coords)?;
        let end = p.target.end_node(model)?;
        let rows: usize = model.node_input_shape(end).iter().product();
        let batched = match strategy {
            Strategy::Batched => true,
            Strategy::Seeded => false,
            Strategy::Auto => p.items.len() > rows,
        };
        let stacked = if batched {
            self.batched(mode, &p)?
        } else {
            self.seeded(mode, &p, end)?
        };
        let (ni, n) = (model.image_len(), p.items.len());
        let [h, w, c] = model.input_shape();
        let mut data = stacked;
        let bias = data.split_off(ni * n);
        let mut ishape = vec![h, w, c];
        ishape.extend_from_slice(&p.axes);
        let mut bshape = vec![model.bias_len()];
        bshape.extend_from_slice(&p.axes);
        Ok(HypersurfacePair {
            image: Tensor::new(ishape, data)?,
            bias: Tensor::new(bshape, bias)?,
            mode,
            coords: *coords,
            k: self.k(),
        })
    }

    /// Seed at the sub-path output for one hypersurface.
    fn seed(&self, mode: Mode, p: &Plan, item: Item) -> Result<Tensor<T>> {
        let model = self.model();
        let Some(node) = p.conv else {
            let w = model.fc_weight().expect("rm0 plan has an fc layer");
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            return Ok(Tensor::vector((0..rows).map(|r| w.data()[r * cols + item.i]).collect()));
        };
        let (kernel, stride, padding) = model.conv_params(node);
        let out = model.output_shape(node);
        let co = out[2];
        let mut grad = Tensor::zeros(out.to_vec());
        match item.s {
            Some(s) => grad.data_mut()[s * co + item.i] = T::one(),
            None => {
                for px in grad.data_mut().chunks_mut(co) {
                    px[item.i] = T::one();
                }
            }
        }
        let ins = model.node_input_shape(node);
        let mut seed = crate::tensor::conv2d_backward_input(&grad, kernel, (ins[0], ins[1], ins[2]), stride, padding)?;
        if let Some(j) = item.j {
            // Channel j of Wᵀg depends only on the in-channel-j kernel slice.
            let cin = ins[2];
            for (q, v) in seed.data_mut().iter_mut().enumerate() {
                if q % cin != j {
                    *v = T::zero();
                }
            }
        }
        debug_assert!(mode != Mode::Rm0);
        Ok(seed)
    }

    fn seeded(&self, mode: Mode, p: &Plan, end: usize) -> Result<Vec<T>> {
        let cols: Vec<ExtendedVector<T>> = p
            .items
            .par_iter()
            .map(|&item| self.pullback(end, self.seed(mode, p, item)?))
            .collect::<Result<_>>()?;
        let n = cols.len();
        let d_in = self.model().d_in();
        let mut out = vec![T::zero(); d_in * n];
        for (idx, v) in cols.iter().enumerate() {
            for (d, &x) in v.image.data().iter().chain(v.bias.data()).enumerate() {
                out[d * n + idx] = x;
            }
        }
        Ok(out)
    }

    fn batched(&self, mode: Mode, p: &Plan) -> Result<Vec<T>> {
        let model = self.model();
        let jac = jacobian_from(self, p.target)?;
        let rows = jac.rows();
        let (ni, nb) = (model.image_len(), model.bias_len());
        let d_in = ni + nb;
        // Extended-input axis leading: t[d][q] = J[q][d].
        let mut t = vec![T::zero(); d_in * rows];
        for q in 0..rows {
            for d in 0..ni {
                t[d * rows + q] = jac.image.data()[q * ni + d];
            }
            for d in 0..nb {
                t[(ni + d) * rows + q] = jac.bias.data()[q * nb + d];
            }
        }
        let n = p.items.len();
        let mut out = vec![T::zero(); d_in * n];
        let Some(node) = p.conv else {
            let w = model.fc_weight().expect("rm0 plan has an fc layer");
            let cols = w.shape()[1];
            for d in 0..d_in {
                for (idx, &k) in p.outs.iter().enumerate() {
                    let mut acc = T::zero();
                    for q in 0..rows {
                        acc += t[d * rows + q] * w.data()[q * cols + k];
                    }
                    out[d * n + idx] = acc;
                }
            }
            return Ok(out);
        };
        let (kernel, stride, padding) = model.conv_params(node);
        let ins = model.node_input_shape(node);
        let (h, w, cin) = (ins[0], ins[1], ins[2]);
        let o = model.output_shape(node);
        let (positions, co) = (o[0] * o[1], o[2]);
        match mode {
            Mode::Rm2 | Mode::Rm1 => {
                let batch = Tensor::new(vec![d_in, h, w, cin], t)?;
                let r = conv2d_batched(&batch, kernel, stride, padding)?;
                let r = r.data();
                for d in 0..d_in {
                    let base = d * positions * co;
                    let mut idx = 0;
                    if mode == Mode::Rm2 {
                        for &s in &p.strides {
                            for &i in &p.outs {
                                out[d * n + idx] = r[base + s * co + i];
                                idx += 1;
                            }
                        }
                    } else {
                        for &i in &p.outs {
                            let mut acc = T::zero();
                            for s in 0..positions {
                                acc += r[base + s * co + i];
                            }
                            out[d * n + idx] = acc;
                            idx += 1;
                        }
                    }
                }
            }
            Mode::Rm4 | Mode::Rm3 => {
                let per_in: Vec<Tensor<T>> = p
                    .ins
                    .iter()
                    .map(|&j| {
                        let slice: Vec<T> = t.iter().skip(j).step_by(cin).copied().collect();
                        let batch = Tensor::new(vec![d_in, h, w, 1], slice)?;
                        let ks = kernel.shape();
                        let kj = Tensor::from_fn(vec![ks[0], ks[1], 1, co], |q| {
                            let (tap, oc) = (q / co, q % co);
                            kernel.data()[(tap * cin + j) * co + oc]
                        });
                        conv2d_batched(&batch, &kj, stride, padding)
                    })
                    .collect::<Result<_>>()?;
                for d in 0..d_in {
                    let base = d * positions * co;
                    let mut idx = 0;
                    if mode == Mode::Rm4 {
                        for &s in &p.strides {
                            for r in &per_in {
                                for &i in &p.outs {
                                    out[d * n + idx] = r.data()[base + s * co + i];
                                    idx += 1;
                                }
                            }
                        }
                    } else {
                        for r in &per_in {
                            for &i in &p.outs {
                                let mut acc = T::zero();
                                for s in 0..positions {
                                    acc += r.data()[base + s * co + i];
                                }
                                out[d * n + idx] = acc;
                                idx += 1;
                            }
                        }
                    }
                }
            }
            Mode::Rm0 => unreachable!(),
        }
        Ok(out)
    }
}

/// RM3, RM2 and RM1 obtained by summing a complete RM4 set.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSums<T> {
    /// `Σ_s RM4`.
    pub rm3: HypersurfacePair<T>,
    /// `Σ_j RM4`.
    pub rm2: HypersurfacePair<T>,
    /// `Σ_j RM3`.
    pub rm1_from_rm3: HypersurfacePair<T>,
    /// `Σ_s RM2`.
    pub rm1_from_rm2: HypersurfacePair<T>,
}

pub fn mode_sum_check<T: Element>(h4: &HypersurfacePair<T>) -> Result<ModeSums<T>> {
    if h4.mode != Mode::Rm4 {
        return Err(Error::ModeMismatch(format!("expected an rm4 set, found {}", h4.mode)));
    }
    if h4.coords.stride_idx.is_some() || h4.coords.in_ch.is_some() {
        return Err(Error::IncompleteSet(
            "summation needs every stride index and every in-channel".into(),
        ));
    }
    let rm3 = sum_axes(h4, &[false, false, true, true], Mode::Rm3);
    let rm2 = sum_axes(h4, &[true, true, false, true], Mode::Rm2);
    let rm1_from_rm3 = sum_axes(&rm3, &[false, true], Mode::Rm1);
    let rm1_from_rm2 = sum_axes(&rm2, &[false, false, true], Mode::Rm1);
    Ok(ModeSums {
        rm3,
        rm2,
        rm1_from_rm3,
        rm1_from_rm2,
    })
}

fn sum_axes<T: Element>(h: &HypersurfacePair<T>, keep: &[bool], mode: Mode) -> HypersurfacePair<T> {
    let axes = h.axes().to_vec();
    debug_assert_eq!(axes.len(), keep.len());
    let kept: Vec<usize> = axes.iter().zip(keep).filter(|(_, k)| **k).map(|(a, _)| *a).collect();
    let n_in: usize = axes.iter().product();
    let n_out: usize = kept.iter().product();
    let map: Vec<usize> = (0..n_in)
        .map(|flat| {
            let mut rem = flat;
            let mut idx = vec![0; axes.len()];
            for a in (0..axes.len()).rev() {
                idx[a] = rem % axes[a];
                rem /= axes[a];
            }
            idx.iter()
                .zip(&axes)
                .zip(keep)
                .filter(|(_, k)| **k)
                .fold(0, |acc, ((&i, &n), _)| acc * n + i)
        })
        .collect();
    let reduce = |t: &Tensor<T>, lead: &[usize]| {
        let rows: usize = lead.iter().product();
        let mut out = vec![T::zero(); rows * n_out];
        for r in 0..rows {
            for (flat, &dst) in map.iter().enumerate() {
                out[r * n_out + dst] += t.data()[r * n_in + flat];
            }
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(&kept);
        Tensor::new(shape, out).expect("reduced shape")
    };
    HypersurfacePair {
        image: reduce(&h.image, &h.image.shape()[..3]),
        bias: reduce(&h.bias, &h.bias.shape()[..1]),
        mode,
        coords: Coords {
            stride_idx: None,
            in_ch: None,
            ..h.coords
        },
        k: h.k,
    }
}
