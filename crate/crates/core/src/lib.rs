//! Exact effective-hypersurface reconstruction for piecewise-linear CNNs.

pub mod adjoint;
pub mod arch;
pub mod error;
pub mod extended;
pub mod fold;
pub mod graph;
pub mod io;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use extended::{BiasLayout, BiasSlot, ExtendedInput, ExtendedVector};
pub use adjoint::{
    hypersurface_shape, jacobian_extended, mode_sum_check, reconstruct, reconstruct_with, Coords, EvalPoint,
    HypersurfacePair, JacobianPair, Linearization, Mode, Strategy, Target,
};
pub use graph::{ActivationDescriptor, ActivationTrace, Form, LayerOp, LayerSpec, ModelGraph, UnitCoord};
pub use tensor::{DType, Element, Padding, Tensor};
