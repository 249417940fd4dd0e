use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Element;

/// Leakiness used when a model file asks for `leaky_relu` without a value.
pub const DEFAULT_LEAK: f64 = 0.1;

fn default_leak() -> f64 {
    DEFAULT_LEAK
}

/// Pixel-wise activation with a piecewise-constant derivative.
///
/// `PiecewiseLinear` applies `slopes[p] · c` where `p` counts the breakpoints
/// `≤ c`; every piece is a ray through the origin, so the activation equals
/// its argument times its own derivative. A value sitting exactly on a
/// breakpoint takes the upper piece (for ReLU-like shapes: `sgn(0) = +1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationDescriptor {
    Relu,
    LeakyRelu {
        #[serde(default = "default_leak")]
        gamma: f64,
    },
    PiecewiseLinear {
        breakpoints: Vec<f64>,
        slopes: Vec<f64>,
    },
}

impl ActivationDescriptor {
    pub fn leaky(gamma: f64) -> Self {
        ActivationDescriptor::LeakyRelu { gamma }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ActivationDescriptor::Relu => Ok(()),
            ActivationDescriptor::LeakyRelu { gamma } => {
                if *gamma > 0.0 && *gamma < 1.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "leaky_relu needs 0 < γ < 1, found {gamma} (use relu for γ = 0)"
                    )))
                }
            }
            ActivationDescriptor::PiecewiseLinear {
                breakpoints,
                slopes,
            } => {
                if slopes.len() != breakpoints.len() + 1 {
                    return Err(Error::invalid(format!(
                        "piecewise_linear needs {} slopes for {} breakpoints, found {}",
                        breakpoints.len() + 1,
                        breakpoints.len(),
                        slopes.len()
                    )));
                }
                if slopes.iter().chain(breakpoints).any(|v| !v.is_finite()) {
                    return Err(Error::invalid("piecewise_linear values must be finite"));
                }
                if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::invalid(
                        "piecewise_linear breakpoints must be strictly increasing",
                    ));
                }
                Ok(())
            }
        }
    }

    /// True when the derivative is constant along rays `k·c`, `k > 0`.
    pub fn is_positively_homogeneous(&self) -> bool {
        match self {
            ActivationDescriptor::Relu | ActivationDescriptor::LeakyRelu { .. } => true,
            ActivationDescriptor::PiecewiseLinear { breakpoints, .. } => {
                breakpoints.iter().all(|&b| b == 0.0)
            }
        }
    }

    /// Local slope at `c`; the diagonal entry of the activation Jacobian.
    #[inline]
    pub fn slope<T: Element>(&self, c: T) -> T {
        match self {
            ActivationDescriptor::Relu => {
                if c >= T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationDescriptor::LeakyRelu { gamma } => {
                if c >= T::zero() {
                    T::one()
                } else {
                    T::from_f64(*gamma)
                }
            }
            ActivationDescriptor::PiecewiseLinear {
                breakpoints,
                slopes,
            } => {
                let piece = breakpoints
                    .iter()
                    .take_while(|&&b| c >= T::from_f64(b))
                    .count();
                T::from_f64(slopes[piece])
            }
        }
    }

    #[inline]
    pub fn apply<T: Element>(&self, c: T) -> T {
        match self {
            ActivationDescriptor::Relu => c.max(T::zero()),
            ActivationDescriptor::LeakyRelu { gamma } => {
                c.max(T::zero()) + T::from_f64(*gamma) * c.min(T::zero())
            }
            ActivationDescriptor::PiecewiseLinear { .. } => self.slope(c) * c,
        }
    }

    /// Whether `c` sits exactly on a kink of the activation.
    #[inline]
    pub fn is_kink<T: Element>(&self, c: T) -> bool {
        match self {
            ActivationDescriptor::Relu | ActivationDescriptor::LeakyRelu { .. } => c == T::zero(),
            ActivationDescriptor::PiecewiseLinear { breakpoints, .. } => {
                breakpoints.iter().any(|&b| c == T::from_f64(b))
            }
        }
    }
}
