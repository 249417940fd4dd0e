//! Model manifests, tensor files and images.
//!
//! A manifest is a JSON document with sorted keys describing the layer list.
//! Parameter tensors live in a sibling blob file made of back-to-back tensor
//! records; the manifest points at each one by byte offset and shape.
//! Equivalent-form manifests also name the bias-vector file `x_b`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::extended::{BiasLayout, BiasSlot, ExtendedInput};
use crate::graph::{
    ActivationDescriptor, BatchNormParams, BiasSource, Form, LayerOp, LayerSpec, ModelGraph, ShortcutKind,
};
use crate::tensor::{read_tensor, read_tensor_at, write_tensor, AnyTensor, DType, Element, Padding, Tensor};

pub const SCHEMA_VERSION: u64 = 1;

/// Location of one tensor record inside the blob.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRef {
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ManifestLayer {
    Conv {
        id: String,
        kernel: BlobRef,
        stride: usize,
        padding: Padding,
    },
    BiasAdd {
        id: String,
        #[serde(default)]
        broadcast: bool,
        /// Present in raw form; absent when the layer reads the bias vector.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        values: Option<BlobRef>,
    },
    Activation {
        id: String,
        activation: ActivationDescriptor,
    },
    AvgPool {
        id: String,
        window: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool {
        id: String,
        window: usize,
        stride: usize,
        padding: Padding,
    },
    GlobalPool {
        id: String,
    },
    Fc {
        id: String,
        weight: BlobRef,
    },
    ShortcutBegin {
        id: String,
    },
    ShortcutAdd {
        id: String,
        shortcut: ShortcutKind,
    },
    BatchNorm {
        id: String,
        gamma: BlobRef,
        beta: BlobRef,
        mean: BlobRef,
        variance: BlobRef,
        epsilon: f64,
    },
    Multiplier {
        id: String,
        value: f64,
    },
}

/// A loaded model and, for equivalent manifests, its bias vector.
#[derive(Clone, Debug)]
pub struct LoadedModel<T> {
    pub model: ModelGraph<T>,
    pub bias: Option<Tensor<T>>,
    /// Element type recorded in the manifest (the model may have been cast).
    pub stored_dtype: DType,
}

impl<T: Element> LoadedModel<T> {
    /// `[image; x_b]` for an equivalent model.
    pub fn extend(&self, image: Tensor<T>) -> Result<ExtendedInput<T>> {
        let bias = self.bias.clone().ok_or_else(|| {
            Error::Form(format!(
                "model `{}` is {}; fold it to obtain a bias vector",
                self.model.name(),
                self.model.form()
            ))
        })?;
        ExtendedInput::new(image, bias, self.model.bias_layout().clone())
    }
}

/// Files written by [`save_model`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SavedPaths {
    pub manifest: PathBuf,
    pub blob: PathBuf,
    pub bias: Option<PathBuf>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads one tensor file, converting to `T` when needed.
pub fn load_tensor<T: Element>(path: &Path) -> Result<Tensor<T>> {
    Ok(load_any_tensor(path)?.to())
}

pub fn load_any_tensor(path: &Path) -> Result<AnyTensor> {
    read_tensor(&mut read_file(path)?.as_slice())
}

pub fn save_tensor<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut bytes = Vec::new();
    write_tensor(&mut bytes, t).map_err(|e| Error::Format(e.to_string()))?;
    write_file(path, &bytes)
}

/// Appends tensor records and hands out their references.
struct BlobWriter<T> {
    bytes: Vec<u8>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Element> BlobWriter<T> {
    fn push(&mut self, t: &Tensor<T>) -> Result<BlobRef> {
        let offset = self.bytes.len() as u64;
        write_tensor(&mut self.bytes, t).map_err(|e| Error::Format(e.to_string()))?;
        Ok(BlobRef {
            offset,
            shape: t.shape().to_vec(),
        })
    }
}

fn to_manifest_layer<T: Element>(layer: &LayerSpec<T>, blob: &mut BlobWriter<T>) -> Result<ManifestLayer> {
    let id = layer.id.clone();
    Ok(match &layer.op {
        LayerOp::Conv {
            kernel,
            stride,
            padding,
        } => ManifestLayer::Conv {
            id,
            kernel: blob.push(kernel)?,
            stride: *stride,
            padding: *padding,
        },
        LayerOp::BiasAdd { source, broadcast } => ManifestLayer::BiasAdd {
            id,
            broadcast: *broadcast,
            values: match source {
                BiasSource::Param(v) => Some(blob.push(v)?),
                BiasSource::Slot => None,
            },
        },
        LayerOp::Activation(a) => ManifestLayer::Activation {
            id,
            activation: a.clone(),
        },
        LayerOp::AvgPool {
            window,
            stride,
            padding,
        } => ManifestLayer::AvgPool {
            id,
            window: *window,
            stride: *stride,
            padding: *padding,
        },
        LayerOp::MaxPool {
            window,
            stride,
            padding,
        } => ManifestLayer::MaxPool {
            id,
            window: *window,
            stride: *stride,
            padding: *padding,
        },
        LayerOp::GlobalPool => ManifestLayer::GlobalPool { id },
        LayerOp::Fc { weight } => ManifestLayer::Fc {
            id,
            weight: blob.push(weight)?,
        },
        LayerOp::ShortcutBegin => ManifestLayer::ShortcutBegin { id },
        LayerOp::ShortcutAdd(kind) => ManifestLayer::ShortcutAdd { id, shortcut: *kind },
        LayerOp::BatchNorm(bn) => ManifestLayer::BatchNorm {
            id,
            gamma: blob.push(&bn.gamma)?,
            beta: blob.push(&bn.beta)?,
            mean: blob.push(&bn.mean)?,
            variance: blob.push(&bn.variance)?,
            epsilon: bn.epsilon,
        },
        LayerOp::Multiplier(m) => ManifestLayer::Multiplier { id, value: m.as_f64() },
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

/// Serializes a model as a manifest plus blob, and the bias vector of an
/// equivalent model as `<stem>.xb.abm`. Equal models produce equal files.
pub fn save_model<T: Element>(model: &ModelGraph<T>, manifest: &Path, bias: Option<&Tensor<T>>) -> Result<SavedPaths> {
    if model.form() == Form::Equivalent && bias.is_none() {
        return Err(Error::Form("an equivalent model needs its bias vector to be saved".into()));
    }
    if model.form() == Form::Raw && bias.is_some() {
        return Err(Error::Form("a raw model has no bias vector".into()));
    }
    if let Some(b) = bias {
        if b.rank() != 1 || b.len() != model.bias_len() {
            return Err(Error::Dimension {
                axis: "bias vector".into(),
                expected: model.bias_len(),
                found: b.len(),
            });
        }
    }
    let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = stem(manifest);
    let blob_name = format!("{stem}.abm");
    let mut blob = BlobWriter::<T> {
        bytes: Vec::new(),
        _t: std::marker::PhantomData,
    };
    let layers = model
        .layers()
        .iter()
        .map(|l| to_manifest_layer(l, &mut blob))
        .collect::<Result<Vec<_>>>()?;
    let mut doc = json!({
        "schema_version": SCHEMA_VERSION,
        "name": model.name(),
        "dtype": T::DTYPE,
        "form": model.form(),
        "input_shape": model.input_shape(),
        "blob": blob_name,
        "layers": layers,
    });
    let mut bias_path = None;
    if let Some(b) = bias {
        let name = format!("{stem}.xb.abm");
        doc["bias_vector"] = json!(name);
        doc["bias_layout"] = serde_json::to_value(model.bias_layout().slots())?;
        let p = dir.join(&name);
        save_tensor(&p, b)?;
        bias_path = Some(p);
    }
    // serde_json's map is ordered by key, so the output is canonical.
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    write_file(manifest, text.as_bytes())?;
    let blob_path = dir.join(&blob_name);
    write_file(&blob_path, &blob.bytes)?;
    Ok(SavedPaths {
        manifest: manifest.to_path_buf(),
        blob: blob_path,
        bias: bias_path,
    })
}

fn schema(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn field<D: DeserializeOwned>(obj: &serde_json::Map<String, Value>, key: &str) -> Result<D> {
    let v = obj.get(key).ok_or_else(|| schema(format!("/{key}"), "missing field"))?;
    serde_json::from_value(v.clone()).map_err(|e| schema(format!("/{key}"), e.to_string()))
}

/// Points at the first field of a layer object that fails to parse.
fn layer_pointer(i: usize, v: &Value, err: &serde_json::Error) -> String {
    let base = format!("/layers/{i}");
    let msg = err.to_string();
    if msg.starts_with("unknown variant") || msg.starts_with("missing field `kind`") {
        return format!("{base}/kind");
    }
    if msg.starts_with("missing field") {
        return base;
    }
    // "unknown field `x`" or a type error; name the first field quoted.
    let quoted = msg.split('`').nth(1).unwrap_or("");
    match v.as_object() {
        Some(obj) if obj.contains_key(quoted) => format!("{base}/{quoted}"),
        _ => base,
    }
}

/// Parsed manifest before any blob access.
struct Parsed {
    name: String,
    dtype: DType,
    form: Form,
    input_shape: [usize; 3],
    blob: String,
    layers: Vec<ManifestLayer>,
    bias_vector: Option<String>,
    bias_layout: Option<Vec<BiasSlot>>,
}

fn parse_manifest(text: &str) -> Result<Parsed> {
    let doc: Value = serde_json::from_str(text).map_err(|e| schema("", e.to_string()))?;
    let obj = doc.as_object().ok_or_else(|| schema("", "manifest must be a JSON object"))?;
    const KNOWN: [&str; 9] = [
        "schema_version",
        "name",
        "dtype",
        "form",
        "input_shape",
        "blob",
        "layers",
        "bias_vector",
        "bias_layout",
    ];
    if let Some(k) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(schema(format!("/{k}"), "unknown field"));
    }
    let version: u64 = field(obj, "schema_version")?;
    if version != SCHEMA_VERSION {
        return Err(schema(
            "/schema_version",
            format!("unsupported version {version} (expected {SCHEMA_VERSION})"),
        ));
    }
    let raw_layers: Vec<Value> = field(obj, "layers")?;
    let layers = raw_layers
        .iter()
        .enumerate()
        .map(|(i, v)| serde_json::from_value(v.clone()).map_err(|e| schema(layer_pointer(i, v, &e), e.to_string())))
        .collect::<Result<Vec<ManifestLayer>>>()?;
    let form: Form = field(obj, "form")?;
    let opt = |key: &str| obj.get(key).filter(|v| !v.is_null()).is_some();
    let (bias_vector, bias_layout) = match form {
        Form::Equivalent => (Some(field(obj, "bias_vector")?), Some(field(obj, "bias_layout")?)),
        Form::Raw => {
            if opt("bias_vector") {
                return Err(schema("/bias_vector", "raw manifests carry no bias vector"));
            }
            if opt("bias_layout") {
                return Err(schema("/bias_layout", "raw manifests carry no bias layout"));
            }
            (None, None)
        }
    };
    Ok(Parsed {
        name: field(obj, "name")?,
        dtype: field(obj, "dtype")?,
        form,
        input_shape: field(obj, "input_shape")?,
        blob: field(obj, "blob")?,
        layers,
        bias_vector,
        bias_layout,
    })
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    dtype: DType,
    /// Cache keyed by offset so shared references decode once.
    seen: BTreeMap<u64, AnyTensor>,
}

impl BlobReader<'_> {
    fn get<T: Element>(&mut self, r: &BlobRef, pointer: &str) -> Result<Tensor<T>> {
        let any = match self.seen.get(&r.offset) {
            Some(t) => t.clone(),
            None => {
                let (t, _) = read_tensor_at(self.bytes, r.offset)?;
                self.seen.insert(r.offset, t.clone());
                t
            }
        };
        if any.dtype() != self.dtype {
            return Err(schema(
                pointer,
                format!("blob record is {} but the manifest declares {}", any.dtype(), self.dtype),
            ));
        }
        if any.shape() != r.shape.as_slice() {
            return Err(schema(
                pointer,
                format!("blob record has shape {:?}, manifest says {:?}", any.shape(), r.shape),
            ));
        }
        Ok(any.to())
    }
}

fn to_layer<T: Element>(i: usize, l: ManifestLayer, blob: &mut BlobReader<'_>) -> Result<LayerSpec<T>> {
    let p = |f: &str| format!("/layers/{i}/{f}");
    Ok(match l {
        ManifestLayer::Conv {
            id,
            kernel,
            stride,
            padding,
        } => LayerSpec::conv(id, blob.get(&kernel, &p("kernel"))?, stride, padding),
        ManifestLayer::BiasAdd { id, broadcast, values } => match values {
            Some(v) => LayerSpec::new(
                id,
                LayerOp::BiasAdd {
                    source: BiasSource::Param(blob.get(&v, &p("values"))?),
                    broadcast,
                },
            ),
            None => LayerSpec::bias_slot(id, broadcast),
        },
        ManifestLayer::Activation { id, activation } => LayerSpec::activation(id, activation),
        ManifestLayer::AvgPool {
            id,
            window,
            stride,
            padding,
        } => LayerSpec::avg_pool(id, window, stride, padding),
        ManifestLayer::MaxPool {
            id,
            window,
            stride,
            padding,
        } => LayerSpec::max_pool(id, window, stride, padding),
        ManifestLayer::GlobalPool { id } => LayerSpec::global_pool(id),
        ManifestLayer::Fc { id, weight } => LayerSpec::fc(id, blob.get(&weight, &p("weight"))?),
        ManifestLayer::ShortcutBegin { id } => LayerSpec::shortcut_begin(id),
        ManifestLayer::ShortcutAdd { id, shortcut } => LayerSpec::shortcut_add(id, shortcut),
        ManifestLayer::BatchNorm {
            id,
            gamma,
            beta,
            mean,
            variance,
            epsilon,
        } => LayerSpec::batch_norm(
            id,
            BatchNormParams {
                gamma: blob.get(&gamma, &p("gamma"))?,
                beta: blob.get(&beta, &p("beta"))?,
                mean: blob.get(&mean, &p("mean"))?,
                variance: blob.get(&variance, &p("variance"))?,
                epsilon,
            },
        ),
        ManifestLayer::Multiplier { id, value } => LayerSpec::multiplier(id, T::from_f64(value)),
    })
}

/// The element type a manifest declares, without loading its tensors.
pub fn manifest_dtype(path: &Path) -> Result<DType> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| schema("", e.to_string()))?;
    Ok(parse_manifest(&text)?.dtype)
}

/// Loads and shape-checks a manifest, casting parameters to `T`.
pub fn load_model<T: Element>(path: &Path) -> Result<LoadedModel<T>> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| schema("", e.to_string()))?;
    let parsed = parse_manifest(&text)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let blob_bytes = read_file(&dir.join(&parsed.blob))?;
    let mut blob = BlobReader {
        bytes: &blob_bytes,
        dtype: parsed.dtype,
        seen: BTreeMap::new(),
    };
    let layers = parsed
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| to_layer::<T>(i, l, &mut blob))
        .collect::<Result<Vec<_>>>()?;
    let model = ModelGraph::new(parsed.name, parsed.input_shape, parsed.form, layers)?;
    let bias = match (parsed.bias_vector, parsed.bias_layout) {
        (Some(file), Some(slots)) => {
            let declared = BiasLayout::new(slots).map_err(|e| schema("/bias_layout", e.to_string()))?;
            if &declared != model.bias_layout() {
                return Err(schema("/bias_layout", "does not match the model's bias layers"));
            }
            let b: Tensor<T> = load_tensor(&dir.join(file))?;
            if b.rank() != 1 || b.len() != model.bias_len() {
                return Err(schema(
                    "/bias_vector",
                    format!("bias vector has shape {:?}, expected [{}]", b.shape(), model.bias_len()),
                ));
            }
            Some(b)
        }
        _ => None,
    };
    Ok(LoadedModel {
        model,
        bias,
        stored_dtype: parsed.dtype,
    })
}

/// Reads a binary (P6) PPM with 8-bit channels as an `h×w×3` image in `[0, 1]`.
pub fn load_ppm<T: Element>(path: &Path) -> Result<Tensor<T>> {
    parse_ppm(&read_file(path)?)
}

pub fn parse_ppm<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |m: &str| Error::Format(format!("PPM: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(bad("only binary P6 files are supported"));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(bad("only 8-bit (maxval 255) files are supported"));
    }
    // Exactly one whitespace byte separates the header from the pixels.
    let start = pos + 1;
    let n = w * h * 3;
    if bytes.len() < start + n {
        return Err(bad("pixel data truncated"));
    }
    Tensor::new(
        vec![h, w, 3],
        bytes[start..start + n].iter().map(|&b| T::from_f64(b as f64 / 255.0)).collect(),
    )
}

/// Loads input images: a PPM, a single `h×w×c` tensor, or an `n×h×w×c` batch.
pub fn load_images<T: Element>(path: &Path) -> Result<Vec<Tensor<T>>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
        return Ok(vec![load_ppm(path)?]);
    }
    let t: Tensor<T> = load_tensor(path)?;
    match t.rank() {
        3 => Ok(vec![t]),
        4 => Ok((0..t.shape()[0]).map(|i| t.outer(i)).collect()),
        r => Err(Error::shape(format!("input tensor must be rank 3 or 4, found rank {r}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{gen_random_model, ArchSpec};
    use crate::fold::extract_bias_vector;

    fn toy() -> ModelGraph<f64> {
        gen_random_model(&ArchSpec::template("vgg-mini").unwrap(), 4).unwrap()
    }

    #[test]
    fn raw_round_trip_is_field_equal_and_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy();
        let a = save_model(&m, &dir.path().join("a.json"), None).unwrap();
        let back = load_model::<f64>(&a.manifest).unwrap();
        assert_eq!(back.model.layers(), m.layers());
        assert_eq!(back.model.input_shape(), m.input_shape());
        assert_eq!(back.model.form(), Form::Raw);
        let b = save_model(&back.model, &dir.path().join("b.json"), None).unwrap();
        assert_eq!(fs::read(&a.blob).unwrap(), fs::read(&b.blob).unwrap());
        let ta = fs::read_to_string(&a.manifest).unwrap().replace("a.abm", "X");
        let tb = fs::read_to_string(&b.manifest).unwrap().replace("b.abm", "X");
        assert_eq!(ta, tb);
    }

    #[test]
    fn equivalent_round_trip_keeps_bias_vector() {
        let dir = tempfile::tempdir().unwrap();
        let ex = extract_bias_vector(&toy()).unwrap();
        let p = save_model(&ex.model, &dir.path().join("eq.json"), Some(&ex.bias)).unwrap();
        assert!(p.bias.is_some());
        let back = load_model::<f64>(&p.manifest).unwrap();
        assert_eq!(back.bias.as_ref(), Some(&ex.bias));
        assert_eq!(back.model.bias_layout(), ex.model.bias_layout());
        let single = load_model::<f32>(&p.manifest).unwrap();
        assert_eq!(single.stored_dtype, DType::F64);
        assert_eq!(manifest_dtype(&p.manifest).unwrap(), DType::F64);
    }

    #[test]
    fn truncated_blob_is_out_of_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let p = save_model(&toy(), &dir.path().join("m.json"), None).unwrap();
        let bytes = fs::read(&p.blob).unwrap();
        fs::write(&p.blob, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_model::<f64>(&p.manifest), Err(Error::BlobBounds { .. })));
    }

    #[test]
    fn schema_errors_carry_pointers() {
        let dir = tempfile::tempdir().unwrap();
        let p = save_model(&toy(), &dir.path().join("m.json"), None).unwrap();
        let text = fs::read_to_string(&p.manifest).unwrap();
        let mut doc: Value = serde_json::from_str(&text).unwrap();
        let pointer_of = |doc: &Value| {
            fs::write(&p.manifest, serde_json::to_string(doc).unwrap()).unwrap();
            match load_model::<f64>(&p.manifest) {
                Err(Error::Schema { pointer, .. }) => pointer,
                other => panic!("expected a schema error, got {other:?}"),
            }
        };
        let mut d = doc.clone();
        d["layers"][2]["kind"] = json!("softmax");
        assert_eq!(pointer_of(&d), "/layers/2/kind");
        let mut d = doc.clone();
        d["layers"][0].as_object_mut().unwrap().remove("stride");
        assert_eq!(pointer_of(&d), "/layers/0");
        let mut d = doc.clone();
        d["layers"][0]["kernel"]["shape"] = json!([3, 3, 3, 9]);
        assert_eq!(pointer_of(&d), "/layers/0/kernel");
        let mut d = doc.clone();
        d["dtype"] = json!("f16");
        assert_eq!(pointer_of(&d), "/dtype");
        doc["extra"] = json!(1);
        assert_eq!(pointer_of(&doc), "/extra");
    }

    #[test]
    fn shape_errors_name_both_layers() {
        let dir = tempfile::tempdir().unwrap();
        let p = save_model(&toy(), &dir.path().join("m.json"), None).unwrap();
        let mut doc: Value = serde_json::from_str(&fs::read_to_string(&p.manifest).unwrap()).unwrap();
        // Drop the pool so conv2 sees an 8×8 map; then remove conv1 so conv2's
        // in-channels no longer match what bn0 → relu0 produce.
        let layers = doc["layers"].as_array_mut().unwrap();
        layers.retain(|l| l["id"] != "conv1" && l["id"] != "bn1" && l["id"] != "relu1");
        let first_conv2 = layers.iter().position(|l| l["id"] == "pool1").unwrap();
        layers.insert(first_conv2, json!({"kind": "global_pool", "id": "gp_early"}));
        fs::write(&p.manifest, serde_json::to_string(&doc).unwrap()).unwrap();
        let err = load_model::<f64>(&p.manifest).unwrap_err().to_string();
        assert!(err.contains("gp_early") && err.contains("pool1"), "{err}");
    }

    #[test]
    fn ppm_decoding() {
        let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 51, 255, 0, 102]);
        let t: Tensor<f64> = parse_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.2, 1.0, 0.0, 0.4]);
        assert!(parse_ppm::<f64>(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(parse_ppm::<f64>(b"P6\n4 4\n255\n\x00").is_err());
    }

    #[test]
    fn batch_files_split_into_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.abm");
        save_tensor(&p, &Tensor::<f32>::from_fn(vec![3, 2, 2, 1], |i| i as f32)).unwrap();
        let xs = load_images::<f64>(&p).unwrap();
        assert_eq!(xs.len(), 3);
        assert_eq!(xs[2].data(), &[8.0, 9.0, 10.0, 11.0]);
    }
}
