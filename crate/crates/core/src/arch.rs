//! Architecture templates and seeded random models.
//!
//! An [`ArchSpec`] describes layer kinds and sizes without any parameters.
//! [`gen_random_model`] fills one with seeded uniform draws, which is all the
//! reconstruction identity needs: it holds for arbitrary weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    ActivationDescriptor, BatchNormParams, Form, LayerSpec, ModelGraph, ShortcutKind, DEFAULT_BN_EPSILON,
};
use crate::tensor::{Padding, Tensor};

/// Built-in template names, in the order they are listed by the CLI.
pub const TEMPLATES: [&str; 6] = ["toy4", "vgg-mini", "res-mini", "vgg7", "resnet20", "resnet20-fixup"];

/// Weights are drawn from `U[-WEIGHT_RANGE, WEIGHT_RANGE]`.
pub const WEIGHT_RANGE: f64 = 0.5;
/// Biases (and batch-norm shifts and means) from `U[-BIAS_RANGE, BIAS_RANGE]`.
pub const BIAS_RANGE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<ArchLayer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchLayer {
    Conv {
        id: String,
        /// `[r1, r2]`; the in-channel count comes from the previous layer.
        kernel: [usize; 2],
        filters: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: Padding,
    },
    BiasAdd {
        id: String,
        /// One scalar shared by every channel.
        #[serde(default)]
        broadcast: bool,
    },
    BatchNorm {
        id: String,
        #[serde(default = "default_eps")]
        epsilon: f64,
    },
    Multiplier {
        id: String,
    },
    Activation {
        id: String,
        activation: ActivationDescriptor,
    },
    AvgPool {
        id: String,
        window: usize,
        stride: usize,
        #[serde(default)]
        padding: Padding,
    },
    MaxPool {
        id: String,
        window: usize,
        stride: usize,
        #[serde(default)]
        padding: Padding,
    },
    GlobalPool {
        id: String,
    },
    Fc {
        id: String,
        units: usize,
    },
    ShortcutBegin {
        id: String,
    },
    ShortcutAdd {
        id: String,
        shortcut: ShortcutKind,
    },
}

fn one() -> usize {
    1
}

fn default_eps() -> f64 {
    DEFAULT_BN_EPSILON
}

impl ArchSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        serde_path_error(value)
    }

    /// A built-in template by name.
    pub fn template(name: &str) -> Result<Self> {
        let text = match name {
            "toy4" => include_str!("../archs/toy4.json"),
            "vgg-mini" => include_str!("../archs/vgg-mini.json"),
            "res-mini" => include_str!("../archs/res-mini.json"),
            "vgg7" => include_str!("../archs/vgg7.json"),
            "resnet20" => include_str!("../archs/resnet20.json"),
            "resnet20-fixup" => include_str!("../archs/resnet20-fixup.json"),
            other => return Err(Error::UnknownTemplate(other.to_string())),
        };
        Self::from_json(text)
    }

    /// Same layers with every activation replaced by `a`.
    pub fn with_activation(mut self, a: ActivationDescriptor) -> Self {
        for layer in &mut self.layers {
            if let ArchLayer::Activation { activation, .. } = layer {
                *activation = a.clone();
            }
        }
        self
    }
}

/// Deserializes with a JSON-pointer to the first offending value on failure.
fn serde_path_error(value: serde_json::Value) -> Result<ArchSpec> {
    let probe = value.clone();
    serde_json::from_value(value).map_err(|e| {
        let pointer = locate(&probe);
        Error::Schema {
            pointer,
            message: e.to_string(),
        }
    })
}

/// Narrows a failed architecture down to the first layer that does not parse.
fn locate(v: &serde_json::Value) -> String {
    if let Some(layers) = v.get("layers").and_then(|l| l.as_array()) {
        for (i, l) in layers.iter().enumerate() {
            if serde_json::from_value::<ArchLayer>(l.clone()).is_err() {
                return format!("/layers/{i}");
            }
        }
    }
    String::new()
}

/// A raw model with every parameter drawn from the seeded generator.
///
/// Draw order follows the layer order, so the same `(arch, seed)` always
/// produces bit-identical parameters.
pub fn gen_random_model(arch: &ArchSpec, seed: u64) -> Result<ModelGraph<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape: Vec<usize> = arch.input_shape.to_vec();
    let mut open: Vec<Vec<usize>> = Vec::new();
    let mut layers = Vec::with_capacity(arch.layers.len());
    let uniform = |rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
    };
    for layer in &arch.layers {
        let channels = *shape.last().unwrap_or(&0);
        let spec = match layer {
            ArchLayer::Conv {
                id,
                kernel,
                filters,
                stride,
                padding,
            } => {
                if shape.len() != 3 {
                    return Err(Error::shape(format!("conv `{id}` needs an h×w×c input, found {shape:?}")));
                }
                let n = kernel[0] * kernel[1] * channels * filters;
                let w = Tensor::new(
                    vec![kernel[0], kernel[1], channels, *filters],
                    uniform(&mut rng, n, -WEIGHT_RANGE, WEIGHT_RANGE),
                )?;
                let g = padding.geometry(shape[0], shape[1], kernel[0], kernel[1], *stride)?;
                shape = vec![g.out_h, g.out_w, *filters];
                LayerSpec::conv(id.clone(), w, *stride, *padding)
            }
            ArchLayer::BiasAdd { id, broadcast } => {
                if *broadcast {
                    LayerSpec::scalar_bias(id.clone(), uniform(&mut rng, 1, -BIAS_RANGE, BIAS_RANGE)[0])
                } else {
                    LayerSpec::bias(
                        id.clone(),
                        Tensor::vector(uniform(&mut rng, channels, -BIAS_RANGE, BIAS_RANGE)),
                    )
                }
            }
            ArchLayer::BatchNorm { id, epsilon } => LayerSpec::batch_norm(
                id.clone(),
                BatchNormParams {
                    gamma: Tensor::vector(uniform(&mut rng, channels, 0.5, 1.5)),
                    beta: Tensor::vector(uniform(&mut rng, channels, -BIAS_RANGE, BIAS_RANGE)),
                    mean: Tensor::vector(uniform(&mut rng, channels, -BIAS_RANGE, BIAS_RANGE)),
                    variance: Tensor::vector(uniform(&mut rng, channels, 0.5, 1.5)),
                    epsilon: *epsilon,
                },
            ),
            ArchLayer::Multiplier { id } => LayerSpec::multiplier(id.clone(), uniform(&mut rng, 1, 0.5, 1.5)[0]),
            ArchLayer::Activation { id, activation } => LayerSpec::activation(id.clone(), activation.clone()),
            ArchLayer::AvgPool {
                id,
                window,
                stride,
                padding,
            }
            | ArchLayer::MaxPool {
                id,
                window,
                stride,
                padding,
            } => {
                if shape.len() != 3 {
                    return Err(Error::shape(format!("pool `{id}` needs an h×w×c input, found {shape:?}")));
                }
                let g = padding.geometry(shape[0], shape[1], *window, *window, *stride)?;
                shape = vec![g.out_h, g.out_w, channels];
                if matches!(layer, ArchLayer::AvgPool { .. }) {
                    LayerSpec::avg_pool(id.clone(), *window, *stride, *padding)
                } else {
                    LayerSpec::max_pool(id.clone(), *window, *stride, *padding)
                }
            }
            ArchLayer::GlobalPool { id } => {
                shape = vec![channels];
                LayerSpec::global_pool(id.clone())
            }
            ArchLayer::Fc { id, units } => {
                let w = Tensor::new(
                    vec![channels, *units],
                    uniform(&mut rng, channels * units, -WEIGHT_RANGE, WEIGHT_RANGE),
                )?;
                shape = vec![*units];
                LayerSpec::fc(id.clone(), w)
            }
            ArchLayer::ShortcutBegin { id } => {
                open.push(shape.clone());
                LayerSpec::shortcut_begin(id.clone())
            }
            ArchLayer::ShortcutAdd { id, shortcut } => {
                open.pop();
                LayerSpec::shortcut_add(id.clone(), *shortcut)
            }
        };
        layers.push(spec);
    }
    ModelGraph::new(arch.name.clone(), arch.input_shape, Form::Raw, layers)
}

/// An image with pixels drawn from `U[0, 1]`.
pub fn random_image(shape: [usize; 3], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.0..1.0))
}

/// `count` images from one seeded stream.
pub fn random_images(shape: [usize; 3], count: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_image(shape, &mut rng)).collect()
}
