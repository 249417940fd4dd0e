//! The extended input space: an image concatenated with every network bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Accumulation, Element, Tensor};

/// Location of one layer's biases inside the concatenated bias vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasSlot {
    pub layer_id: String,
    pub offset: usize,
    pub len: usize,
    /// A length-1 slot whose single value is added to every element.
    #[serde(default)]
    pub broadcast: bool,
}

/// Ordered, contiguous slots; the restriction map from `x_b` to each layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BiasLayout {
    slots: Vec<BiasSlot>,
}

impl BiasLayout {
    pub fn new(slots: Vec<BiasSlot>) -> Result<Self> {
        let mut next = 0;
        for s in &slots {
            if s.offset != next {
                return Err(Error::Layout(format!(
                    "slot `{}` starts at {} but the previous slot ends at {next}",
                    s.layer_id, s.offset
                )));
            }
            if s.broadcast && s.len != 1 {
                return Err(Error::Layout(format!(
                    "broadcast slot `{}` must have length 1, found {}",
                    s.layer_id, s.len
                )));
            }
            next += s.len;
        }
        Ok(Self { slots })
    }

    /// Builds a contiguous layout from `(layer_id, len, broadcast)` triples.
    pub fn from_lengths<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, usize, bool)>,
        S: Into<String>,
    {
        let mut offset = 0;
        let slots = entries
            .into_iter()
            .map(|(id, len, broadcast)| {
                let s = BiasSlot {
                    layer_id: id.into(),
                    offset,
                    len,
                    broadcast,
                };
                offset += len;
                s
            })
            .collect();
        Self { slots }
    }

    pub fn slots(&self) -> &[BiasSlot] {
        &self.slots
    }

    /// `M`, the length of the concatenated bias vector.
    pub fn total_len(&self) -> usize {
        self.slots.last().map_or(0, |s| s.offset + s.len)
    }

    pub fn slot(&self, layer_id: &str) -> Option<&BiasSlot> {
        self.slots.iter().find(|s| s.layer_id == layer_id)
    }

    /// The restriction operator: the part of `bias` owned by `layer_id`.
    pub fn restrict<'a, T>(&self, layer_id: &str, bias: &'a [T]) -> Result<&'a [T]> {
        let s = self
            .slot(layer_id)
            .ok_or_else(|| Error::Layout(format!("no slot for layer `{layer_id}`")))?;
        bias.get(s.offset..s.offset + s.len).ok_or_else(|| {
            Error::Layout(format!(
                "slot `{layer_id}` [{}..{}) exceeds bias length {}",
                s.offset,
                s.offset + s.len,
                bias.len()
            ))
        })
    }
}

/// A point (or covector) of the extended space: image part and bias part.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedVector<T> {
    pub image: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> ExtendedVector<T> {
    pub fn new(image: Tensor<T>, bias: Tensor<T>) -> Self {
        Self { image, bias }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            image: Tensor::zeros(self.image.shape().to_vec()),
            bias: Tensor::zeros(self.bias.shape().to_vec()),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        Self {
            image: self.image.scale(k),
            bias: self.bias.scale(k),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            image: self.image.add(&other.image)?,
            bias: self.bias.add(&other.bias)?,
        })
    }

    /// Length of the flattened concatenation, `d_in`.
    pub fn len(&self) -> usize {
        self.image.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The flattened concatenation `[image; bias]`.
    pub fn concat(&self) -> Vec<T> {
        let mut v = self.image.data().to_vec();
        v.extend_from_slice(self.bias.data());
        v
    }
}

/// The inner product on the extended space.
///
/// Image and bias parts are paired separately. A single running accumulator
/// sweeps the image products and then the bias products.
pub fn inner_product<T: Element>(a: &ExtendedVector<T>, b: &ExtendedVector<T>) -> Result<T> {
    inner_product_with(a, b, Accumulation::Native)
}

pub fn inner_product_with<T: Element>(
    a: &ExtendedVector<T>,
    b: &ExtendedVector<T>,
    acc: Accumulation,
) -> Result<T> {
    check_pair(a, b)?;
    Ok(match acc {
        Accumulation::Native => {
            let mut s = T::zero();
            for (&x, &y) in a.image.data().iter().zip(b.image.data()) {
                s += x * y;
            }
            for (&x, &y) in a.bias.data().iter().zip(b.bias.data()) {
                s += x * y;
            }
            s
        }
        Accumulation::Wide => {
            let mut s = 0.0f64;
            for (&x, &y) in a.image.data().iter().zip(b.image.data()) {
                s += x.as_f64() * y.as_f64();
            }
            for (&x, &y) in a.bias.data().iter().zip(b.bias.data()) {
                s += x.as_f64() * y.as_f64();
            }
            T::from_f64(s)
        }
    })
}

/// The two terms `⟨image|image⟩` and `⟨bias|bias⟩` separately.
pub fn inner_product_parts<T: Element>(
    a: &ExtendedVector<T>,
    b: &ExtendedVector<T>,
) -> Result<(T, T)> {
    check_pair(a, b)?;
    Ok((
        dot(a.image.data(), b.image.data(), Accumulation::Native),
        dot(a.bias.data(), b.bias.data(), Accumulation::Native),
    ))
}

fn check_pair<T: Element>(a: &ExtendedVector<T>, b: &ExtendedVector<T>) -> Result<()> {
    a.image.same_shape(&b.image).map_err(|e| tag_axis(e, "image"))?;
    a.bias.same_shape(&b.bias).map_err(|e| tag_axis(e, "bias"))
}

fn tag_axis(e: Error, part: &str) -> Error {
    match e {
        Error::Dimension {
            axis,
            expected,
            found,
        } => Error::Dimension {
            axis: format!("{part} {axis}"),
            expected,
            found,
        },
        other => other,
    }
}

/// A concrete network input `[x_n; x_b]` together with its bias layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedInput<T> {
    point: ExtendedVector<T>,
    layout: BiasLayout,
}

impl<T: Element> ExtendedInput<T> {
    pub fn new(image: Tensor<T>, bias: Tensor<T>, layout: BiasLayout) -> Result<Self> {
        if bias.rank() != 1 {
            return Err(Error::shape(format!(
                "bias vector must be flat, found shape {:?}",
                bias.shape()
            )));
        }
        if bias.len() != layout.total_len() {
            return Err(Error::Dimension {
                axis: "bias length".into(),
                expected: layout.total_len(),
                found: bias.len(),
            });
        }
        image.hwc()?;
        Ok(Self {
            point: ExtendedVector::new(image, bias),
            layout,
        })
    }

    pub fn image(&self) -> &Tensor<T> {
        &self.point.image
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.point.bias
    }

    pub fn layout(&self) -> &BiasLayout {
        &self.layout
    }

    pub fn as_vector(&self) -> &ExtendedVector<T> {
        &self.point
    }

    /// `d_in = H·W·C + M`.
    pub fn dim(&self) -> usize {
        self.point.len()
    }

    pub fn restrict(&self, layer_id: &str) -> Result<&[T]> {
        self.layout.restrict(layer_id, self.point.bias.data())
    }

    /// `k·[x_n; x_b]`.
    pub fn scaled(&self, k: T) -> Self {
        Self {
            point: self.point.scale(k),
            layout: self.layout.clone(),
        }
    }

    pub fn with_image(&self, image: Tensor<T>) -> Result<Self> {
        Self::new(image, self.point.bias.clone(), self.layout.clone())
    }

    pub fn with_zero_bias(&self) -> Self {
        Self {
            point: ExtendedVector::new(
                self.point.image.clone(),
                Tensor::zeros(self.point.bias.shape().to_vec()),
            ),
            layout: self.layout.clone(),
        }
    }

    pub fn cast<U: Element>(&self) -> ExtendedInput<U> {
        ExtendedInput {
            point: ExtendedVector::new(self.point.image.cast(), self.point.bias.cast()),
            layout: self.layout.clone(),
        }
    }
}
