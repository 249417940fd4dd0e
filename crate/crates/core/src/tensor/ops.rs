use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Spatial padding rule.
///
/// `Same` produces `ceil(n / stride)` outputs per axis. When the total pad is
/// odd the extra row/column goes to the bottom/right.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

impl std::str::FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(Error::invalid(format!("unknown padding `{other}`"))),
        }
    }
}

/// Resolved sliding-window geometry for one spatial operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Padding {
    pub fn geometry(
        self,
        in_h: usize,
        in_w: usize,
        rows: usize,
        cols: usize,
        stride: usize,
    ) -> Result<Geometry> {
        if stride < 1 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        if rows < 1 || cols < 1 {
            return Err(Error::invalid("window must be at least 1×1"));
        }
        let (out_h, out_w, pad_top, pad_left) = match self {
            Padding::Same => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let total_h = ((out_h - 1) * stride + rows).saturating_sub(in_h);
                let total_w = ((out_w - 1) * stride + cols).saturating_sub(in_w);
                (out_h, out_w, total_h / 2, total_w / 2)
            }
            Padding::Valid => {
                if rows > in_h || cols > in_w {
                    return Err(Error::shape(format!(
                        "window {rows}×{cols} larger than {in_h}×{in_w} input under VALID padding"
                    )));
                }
                ((in_h - rows) / stride + 1, (in_w - cols) / stride + 1, 0, 0)
            }
        };
        Ok(Geometry {
            in_h,
            in_w,
            out_h,
            out_w,
            rows,
            cols,
            stride,
            pad_top,
            pad_left,
        })
    }
}

impl Geometry {
    /// Input row for output row `oy` and window row `a`, if it is not padding.
    #[inline]
    pub fn in_row(&self, oy: usize, a: usize) -> Option<usize> {
        (oy * self.stride + a)
            .checked_sub(self.pad_top)
            .filter(|&y| y < self.in_h)
    }

    #[inline]
    pub fn in_col(&self, ox: usize, b: usize) -> Option<usize> {
        (ox * self.stride + b)
            .checked_sub(self.pad_left)
            .filter(|&x| x < self.in_w)
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn kernel_dims<T: Element>(kernel: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match kernel.shape()[..] {
        [r1, r2, ci, co] => Ok((r1, r2, ci, co)),
        _ => Err(Error::shape(format!(
            "kernel must be rank 4 (r1×r2×c_in×c_out), found {:?}",
            kernel.shape()
        ))),
    }
}

/// 2-D cross-correlation of an `h×w×c_in` map with an `r1×r2×c_in×c_out` kernel.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (h, w, ci) = input.hwc()?;
    let (r1, r2, kci, co) = kernel_dims(kernel)?;
    if ci != kci {
        return Err(Error::Dimension {
            axis: "c_in".into(),
            expected: kci,
            found: ci,
        });
    }
    let g = padding.geometry(h, w, r1, r2, stride)?;
    let mut out = vec![T::zero(); g.out_h * g.out_w * co];
    conv_into(input.data(), kernel.data(), &g, ci, co, &mut out);
    Tensor::new(vec![g.out_h, g.out_w, co], out)
}

fn conv_into<T: Element>(
    input: &[T],
    kernel: &[T],
    g: &Geometry,
    ci: usize,
    co: usize,
    out: &mut [T],
) {
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let o = &mut out[(oy * g.out_w + ox) * co..][..co];
            for a in 0..g.rows {
                let Some(iy) = g.in_row(oy, a) else { continue };
                for b in 0..g.cols {
                    let Some(ix) = g.in_col(ox, b) else { continue };
                    let px = &input[(iy * g.in_w + ix) * ci..][..ci];
                    let taps = &kernel[(a * g.cols + b) * ci * co..][..ci * co];
                    for (j, &x) in px.iter().enumerate() {
                        let wrow = &taps[j * co..][..co];
                        for (acc, &wv) in o.iter_mut().zip(wrow) {
                            *acc += x * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Applies [`conv2d`] independently to every slice of an `n×h×w×c_in` batch.
pub fn conv2d_batched<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (n, h, w, ci) = match input.shape()[..] {
        [n, h, w, c] => (n, h, w, c),
        _ => {
            return Err(Error::shape(format!(
                "batched conv expects n×h×w×c, found {:?}",
                input.shape()
            )))
        }
    };
    let (r1, r2, kci, co) = kernel_dims(kernel)?;
    if ci != kci {
        return Err(Error::Dimension {
            axis: "c_in".into(),
            expected: kci,
            found: ci,
        });
    }
    let g = padding.geometry(h, w, r1, r2, stride)?;
    let out_len = g.out_h * g.out_w * co;
    let in_len = h * w * ci;
    let mut out = vec![T::zero(); n * out_len];
    if out_len > 0 {
        out.par_chunks_mut(out_len)
            .zip(input.data().par_chunks(in_len.max(1)))
            .for_each(|(o, x)| conv_into(x, kernel.data(), &g, ci, co, o));
    }
    Tensor::new(vec![n, g.out_h, g.out_w, co], out)
}

/// Adjoint of [`conv2d`] with respect to its input.
///
/// Given `grad_out` shaped like the convolution output, returns the
/// `h×w×c_in` tensor `Wᵀ·grad_out` where `W` is the convolution's matrix.
pub fn conv2d_backward_input<T: Element>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    in_shape: (usize, usize, usize),
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (h, w, ci) = in_shape;
    let (r1, r2, kci, co) = kernel_dims(kernel)?;
    if ci != kci {
        return Err(Error::Dimension {
            axis: "c_in".into(),
            expected: kci,
            found: ci,
        });
    }
    let g = padding.geometry(h, w, r1, r2, stride)?;
    if grad_out.shape() != [g.out_h, g.out_w, co] {
        return Err(Error::shape(format!(
            "gradient shape {:?} does not match convolution output {:?}",
            grad_out.shape(),
            [g.out_h, g.out_w, co]
        )));
    }
    let go = grad_out.data();
    let k = kernel.data();
    let mut gi = vec![T::zero(); h * w * ci];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let gpix = &go[(oy * g.out_w + ox) * co..][..co];
            if gpix.iter().all(|v| v.is_zero()) {
                continue;
            }
            for a in 0..g.rows {
                let Some(iy) = g.in_row(oy, a) else { continue };
                for b in 0..g.cols {
                    let Some(ix) = g.in_col(ox, b) else { continue };
                    let dst = &mut gi[(iy * w + ix) * ci..][..ci];
                    let taps = &k[(a * g.cols + b) * ci * co..][..ci * co];
                    for (j, d) in dst.iter_mut().enumerate() {
                        let wrow = &taps[j * co..][..co];
                        let mut acc = T::zero();
                        for (&gv, &wv) in gpix.iter().zip(wrow) {
                            acc += gv * wv;
                        }
                        *d += acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, ci], gi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
    /// Per-channel mean over all spatial positions; window/stride ignored.
    GlobalAvg,
}

#[derive(Clone, Debug)]
pub struct PoolOutput<T> {
    pub output: Tensor<T>,
    /// Flat input offset selected by each max-pool output element.
    pub argmax: Option<Vec<usize>>,
    /// Number of max-pool windows whose maximum was attained more than once.
    pub ties: usize,
}

/// Average, max, or global-average pooling of an `h×w×c` map.
///
/// Average pooling under `Same` padding divides by the number of in-bounds
/// elements. Max pooling breaks ties toward the lowest flat input offset.
/// Global pooling returns a rank-1 tensor of length `c`.
pub fn pool<T: Element>(
    input: &Tensor<T>,
    kind: PoolKind,
    window: (usize, usize),
    stride: usize,
    padding: Padding,
) -> Result<PoolOutput<T>> {
    if kind == PoolKind::GlobalAvg {
        return Ok(PoolOutput {
            output: global_avg_pool(input)?,
            argmax: None,
            ties: 0,
        });
    }
    let (h, w, c) = input.hwc()?;
    let g = padding.geometry(h, w, window.0, window.1, stride)?;
    let x = input.data();
    let mut out = vec![T::zero(); g.out_h * g.out_w * c];
    let mut argmax = (kind == PoolKind::Max).then(|| vec![0usize; out.len()]);
    let mut ties = 0;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for ch in 0..c {
                let o = (oy * g.out_w + ox) * c + ch;
                let mut count = 0usize;
                let mut sum = T::zero();
                let mut best: Option<(T, usize)> = None;
                let mut tied = false;
                for a in 0..g.rows {
                    let Some(iy) = g.in_row(oy, a) else { continue };
                    for b in 0..g.cols {
                        let Some(ix) = g.in_col(ox, b) else { continue };
                        let idx = (iy * w + ix) * c + ch;
                        let v = x[idx];
                        count += 1;
                        sum += v;
                        match best {
                            None => best = Some((v, idx)),
                            Some((bv, _)) if v > bv => {
                                best = Some((v, idx));
                                tied = false;
                            }
                            Some((bv, _)) if v == bv => tied = true,
                            _ => {}
                        }
                    }
                }
                match kind {
                    PoolKind::Avg => out[o] = sum / T::from_f64(count as f64),
                    PoolKind::Max => {
                        let (bv, bi) = best.expect("window covers at least one element");
                        out[o] = bv;
                        argmax.as_mut().expect("max pool")[o] = bi;
                        ties += usize::from(tied);
                    }
                    PoolKind::GlobalAvg => unreachable!(),
                }
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::new(vec![g.out_h, g.out_w, c], out)?,
        argmax,
        ties,
    })
}

pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = input.hwc()?;
    let mut out = vec![T::zero(); c];
    for px in input.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let n = T::from_f64((h * w) as f64);
    for o in &mut out {
        *o = *o / n;
    }
    Ok(Tensor::vector(out))
}

/// Adjoint of [`pool`] with respect to its input.
///
/// Max pooling routes each gradient to the recorded `argmax` element.
pub fn pool_backward<T: Element>(
    grad_out: &Tensor<T>,
    in_shape: (usize, usize, usize),
    kind: PoolKind,
    window: (usize, usize),
    stride: usize,
    padding: Padding,
    argmax: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let (h, w, c) = in_shape;
    let mut gi = vec![T::zero(); h * w * c];
    if kind == PoolKind::GlobalAvg {
        if grad_out.shape() != [c] {
            return Err(Error::shape(format!(
                "global pool gradient {:?} does not match {c} channels",
                grad_out.shape()
            )));
        }
        let n = T::from_f64((h * w) as f64);
        for px in gi.chunks_mut(c) {
            for (d, &g) in px.iter_mut().zip(grad_out.data()) {
                *d = g / n;
            }
        }
        return Tensor::new(vec![h, w, c], gi);
    }
    let g = padding.geometry(h, w, window.0, window.1, stride)?;
    if grad_out.shape() != [g.out_h, g.out_w, c] {
        return Err(Error::shape(format!(
            "pool gradient {:?} does not match output {:?}",
            grad_out.shape(),
            [g.out_h, g.out_w, c]
        )));
    }
    let go = grad_out.data();
    match kind {
        PoolKind::Max => {
            let argmax = argmax.ok_or_else(|| Error::invalid("max-pool adjoint needs argmax"))?;
            for (o, &gv) in go.iter().enumerate() {
                gi[argmax[o]] += gv;
            }
        }
        PoolKind::Avg => {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let rows: Vec<usize> = (0..g.rows).filter_map(|a| g.in_row(oy, a)).collect();
                    let cols: Vec<usize> = (0..g.cols).filter_map(|b| g.in_col(ox, b)).collect();
                    let n = T::from_f64((rows.len() * cols.len()) as f64);
                    for ch in 0..c {
                        let share = go[(oy * g.out_w + ox) * c + ch] / n;
                        for &iy in &rows {
                            for &ix in &cols {
                                gi[(iy * w + ix) * c + ch] += share;
                            }
                        }
                    }
                }
            }
        }
        PoolKind::GlobalAvg => unreachable!(),
    }
    Tensor::new(vec![h, w, c], gi)
}

/// Accumulator precision for [`dot`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Accumulation {
    /// Accumulate in the element type.
    #[default]
    Native,
    /// Accumulate in `f64` regardless of element type (oracle runs).
    Wide,
}

/// Sequential dot product of two equally long slices.
pub fn dot<T: Element>(a: &[T], b: &[T], acc: Accumulation) -> T {
    debug_assert_eq!(a.len(), b.len());
    match acc {
        Accumulation::Native => {
            let mut s = T::zero();
            for (&x, &y) in a.iter().zip(b) {
                s += x * y;
            }
            s
        }
        Accumulation::Wide => {
            let mut s = 0.0f64;
            for (&x, &y) in a.iter().zip(b) {
                s += x.as_f64() * y.as_f64();
            }
            T::from_f64(s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let x = t(vec![2, 2, 1], &[1.0, 3.0, 5.0, 7.0]);
        let k = t(vec![1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &k, 1, Padding::Same).unwrap();
        assert_eq!(y.data(), &[2.0, 6.0, 10.0, 14.0]);
    }

    #[test]
    fn identity_kernel_same_padding() {
        let x = Tensor::<f64>::from_fn(vec![4, 5, 1], |i| i as f64 * 0.5 - 3.0);
        let mut k = Tensor::<f64>::zeros(vec![3, 3, 1, 1]);
        k.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &k, 1, Padding::Same).unwrap(), x);
    }

    #[test]
    fn same_padding_puts_extra_pad_after() {
        // 4 wide, window 2, stride 1: total pad 1, all of it on the right.
        let g = Padding::Same.geometry(4, 4, 2, 2, 1).unwrap();
        assert_eq!((g.out_h, g.pad_top, g.pad_left), (4, 0, 0));
        // 5 wide, window 4, stride 2: out 3, total pad 3 -> 1 before, 2 after.
        let g = Padding::Same.geometry(5, 5, 4, 4, 2).unwrap();
        assert_eq!((g.out_h, g.pad_top), (3, 1));
    }

    #[test]
    fn valid_rejects_oversized_kernel() {
        let x = Tensor::<f64>::zeros(vec![2, 2, 1]);
        let k = Tensor::<f64>::zeros(vec![3, 3, 1, 1]);
        assert!(conv2d(&x, &k, 1, Padding::Valid).is_err());
        assert!(conv2d(&x, &k, 0, Padding::Same).is_err());
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::<f64>::zeros(vec![2, 2, 2]);
        let k = Tensor::<f64>::zeros(vec![1, 1, 3, 1]);
        match conv2d(&x, &k, 1, Padding::Same).unwrap_err() {
            Error::Dimension { axis, .. } => assert_eq!(axis, "c_in"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn pools_on_constant_maps() {
        let x = Tensor::<f64>::filled(vec![4, 4, 2], 7.0);
        let g = global_avg_pool(&x).unwrap();
        assert_eq!(g.data(), &[7.0, 7.0]);
        let a = pool(&x, PoolKind::Avg, (3, 3), 2, Padding::Same).unwrap();
        assert_eq!(a.output.shape(), &[2, 2, 2]);
        assert!(a.output.data().iter().all(|&v| v == 7.0));
        let v = pool(&x, PoolKind::Avg, (3, 3), 2, Padding::Valid).unwrap();
        assert!(v.output.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn max_pool_forced_maximum_and_ties() {
        let x = t(vec![2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let m = pool(&x, PoolKind::Max, (2, 2), 2, Padding::Valid).unwrap();
        assert_eq!(m.output.data(), &[4.0]);
        assert_eq!(m.argmax.unwrap(), vec![3]);
        assert_eq!(m.ties, 0);

        let x = t(vec![2, 2, 1], &[5.0, 2.0, 5.0, 4.0]);
        let m = pool(&x, PoolKind::Max, (2, 2), 2, Padding::Valid).unwrap();
        assert_eq!(m.argmax.unwrap(), vec![0]);
        assert_eq!(m.ties, 1);
    }

    #[test]
    fn pool_window_exceeding_input_is_an_error() {
        let x = Tensor::<f64>::zeros(vec![2, 2, 1]);
        assert!(pool(&x, PoolKind::Max, (3, 3), 1, Padding::Valid).is_err());
    }

    #[test]
    fn wide_accumulation_matches_f64() {
        let a: Vec<f32> = (0..100).map(|i| 0.1 * i as f32).collect();
        let b: Vec<f32> = (0..100).map(|i| 1.0 - 0.01 * i as f32).collect();
        let wide = dot(&a, &b, Accumulation::Wide);
        let exact: f64 = a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
        assert_eq!(wide, exact as f32);
    }
}
