use std::fmt;
use std::path::{Path, PathBuf};

use hypersurf::arch::{gen_random_model, random_images, ArchSpec};
use hypersurf::fold::extract_bias_vector;
use hypersurf::io::{load_images, load_model, manifest_dtype, save_model, save_tensor};
use hypersurf::verify::{verify_model, LayerTarget, VerificationReport};
use hypersurf::{reconstruct, Coords, DType, Element, Error, EvalPoint, ExtendedInput, Form, ModelGraph, Tensor};

use crate::{
    selftest, Cli, Command, FoldArgs, ForwardArgs, GenInputArgs, GenModelArgs, ReconstructArgs, ReportArgs,
    SelftestArgs, VerifyArgs,
};

#[derive(Debug)]
pub enum CliError {
    Domain(Error),
    Selftest(usize),
    Threads(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Domain(e) => e.code(),
            CliError::Selftest(_) => "selftest",
            CliError::Threads(_) => "threads",
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Domain(e) => e.to_string(),
            CliError::Selftest(n) => format!("{n} check(s) failed"),
            CliError::Threads(m) => m.clone(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code(), self.message())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Domain(e)
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Threads("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Threads(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Fold(a) => fold(a),
        Command::Forward(a) => by_dtype(a.dtype, &a.model, |d| match d {
            DType::F32 => forward::<f32>(&a),
            DType::F64 => forward::<f64>(&a),
        }),
        Command::Reconstruct(a) => by_dtype(a.dtype, &a.model, |d| match d {
            DType::F32 => reconstruct_cmd::<f32>(&a),
            DType::F64 => reconstruct_cmd::<f64>(&a),
        }),
        Command::Verify(a) => by_dtype(a.dtype, &a.model, |d| match d {
            DType::F32 => verify::<f32>(&a),
            DType::F64 => verify::<f64>(&a),
        }),
        Command::Report(a) => report(a),
        Command::GenModel(a) => gen_model(a),
        Command::GenInput(a) => gen_input(a),
        Command::Selftest(SelftestArgs { seed }) => match selftest::run(seed) {
            0 => Ok(()),
            n => Err(CliError::Selftest(n)),
        },
    })
}

/// Runs `f` in the requested dtype, defaulting to the manifest's.
fn by_dtype(requested: Option<DType>, model: &Path, f: impl FnOnce(DType) -> Result<()>) -> Result<()> {
    let d = match requested {
        Some(d) => d,
        None => manifest_dtype(model)?,
    };
    f(d)
}

/// An equivalent model and its bias vector in `T`. Raw manifests are folded
/// first (in double precision, then cast).
fn equivalent<T: Element>(path: &Path) -> Result<(ModelGraph<T>, Tensor<T>)> {
    let loaded = load_model::<f64>(path)?;
    match loaded.bias {
        Some(b) => Ok((loaded.model.cast(), b.cast())),
        None => {
            let ex = extract_bias_vector(&loaded.model)?;
            Ok((ex.model.cast(), ex.bias.cast()))
        }
    }
}

fn extended_inputs<T: Element>(model: &ModelGraph<T>, bias: &Tensor<T>, images: Vec<Tensor<T>>) -> Result<Vec<ExtendedInput<T>>> {
    images
        .into_iter()
        .map(|img| Ok(ExtendedInput::new(img, bias.clone(), model.bias_layout().clone())?))
        .collect()
}

fn fold(a: FoldArgs) -> Result<()> {
    let path = a.model.or(a.positional).expect("clap requires one of them");
    let loaded = load_model::<f64>(&path)?;
    let ex = extract_bias_vector(&loaded.model)?;
    let out = a.out.unwrap_or_else(|| {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        path.with_file_name(format!("{stem}.eq.json"))
    });
    let saved = match loaded.stored_dtype {
        DType::F32 => save_model(&ex.model.cast::<f32>(), &out, Some(&ex.bias.cast())),
        DType::F64 => save_model(&ex.model, &out, Some(&ex.bias)),
    }?;
    outln!("model: {}", saved.manifest.display());
    if let Some(b) = &saved.bias {
        outln!("bias_vector: {}", b.display());
    }
    outln!("bias_len: {}", ex.model.bias_len());
    outln!("d_in: {}", ex.model.d_in());
    Ok(())
}

fn argmax<T: Element>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn forward<T: Element>(a: &ForwardArgs) -> Result<()> {
    let loaded = load_model::<T>(&a.model)?;
    let images = load_images::<T>(&a.input)?;
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        let trace = match loaded.model.form() {
            Form::Raw => loaded.model.forward_raw(&img)?,
            Form::Equivalent => loaded.model.forward(&loaded.extend(img)?)?,
        };
        rows.push(trace.final_output().clone());
    }
    outln!("sample,argmax");
    for (i, r) in rows.iter().enumerate() {
        outln!("{i},{}", argmax(r.data()));
    }
    if let Some(out) = &a.out {
        let flat = rows
            .into_iter()
            .map(|r| {
                let n = r.len();
                r.reshape(vec![n])
            })
            .collect::<hypersurf::Result<Vec<_>>>()?;
        save_tensor(out, &Tensor::stack(&flat)?)?;
    }
    Ok(())
}

fn coords(a: &ReconstructArgs) -> Coords {
    let mut c = match a.layer {
        LayerTarget::Conv(l) => Coords::conv(l),
        LayerTarget::Fc => Coords::fc(),
    };
    c.out_ch = a.out_ch;
    c.stride_idx = a.stride_idx;
    c.in_ch = a.in_ch;
    c.class = a.class;
    c
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}.abm"))
}

fn reconstruct_cmd<T: Element>(a: &ReconstructArgs) -> Result<()> {
    let (model, bias) = equivalent::<T>(&a.model)?;
    let mut images = load_images::<T>(&a.input)?;
    if a.sample >= images.len() {
        return Err(Error::InvalidArgument(format!(
            "--sample {} but the input holds {} image(s)",
            a.sample,
            images.len()
        ))
        .into());
    }
    let x = ExtendedInput::new(images.swap_remove(a.sample), bias, model.bias_layout().clone())?;
    let h = reconstruct(&model, &EvalPoint::new(x, a.k)?, a.mode, &coords(a))?;
    let stacked = h.stacked();
    save_tensor(&a.out, &stacked)?;
    save_tensor(&sibling(&a.out, "image"), &h.image)?;
    save_tensor(&sibling(&a.out, "bias"), &h.bias)?;
    let [hh, ww, cc] = model.input_shape();
    outln!("mode: {}", a.mode);
    outln!("shape: {:?}", stacked.shape());
    outln!("d_in: {} = {}x{}x{} + {}", model.d_in(), hh, ww, cc, model.bias_len());
    outln!("out: {}", a.out.display());
    Ok(())
}

fn verify<T: Element>(a: &VerifyArgs) -> Result<()> {
    let (model, bias) = equivalent::<T>(&a.model)?;
    let images: Vec<Tensor<T>> = match &a.input {
        Some(p) => load_images(p)?,
        None => random_images(model.input_shape(), a.samples, a.seed).iter().map(|t| t.cast()).collect(),
    };
    let xs = extended_inputs(&model, &bias, images)?;
    let layers = (!a.layer.is_empty()).then_some(a.layer.as_slice());
    let report = verify_model(&model, &xs, a.k, layers)?;
    report.write(&a.out, a.hist_dir.as_deref())?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &VerificationReport) {
    {
        use std::io::Write as _;
        let _ = write!(std::io::stdout().lock(), "{}", r.table_csv());
    }
    outln!(
        "# model={} dtype={} k={} samples={} max_abs={:e} min_percent_within_1pct={:.4} kinks={} ties={}",
        r.model,
        r.dtype,
        r.k,
        r.samples,
        r.max_abs(),
        r.min_percent_within(),
        r.kinks,
        r.ties
    );
}

fn report(a: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).map_err(|e| Error::Io {
        path: a.input.clone(),
        source: e,
    })?;
    let r: VerificationReport = serde_json::from_str(&text).map_err(Error::from)?;
    if let Some(dir) = &a.out {
        r.write(dir, a.hist_dir.as_deref())?;
    } else if let Some(h) = &a.hist_dir {
        write_histograms(&r, h)?;
    }
    print_report(&r);
    Ok(())
}

fn write_histograms(r: &VerificationReport, hist_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(hist_dir).map_err(|e| Error::Io {
        path: hist_dir.to_path_buf(),
        source: e,
    })?;
    for s in &r.layers {
        let p = hist_dir.join(format!("hist_{}.csv", s.layer));
        std::fs::write(&p, VerificationReport::histogram_csv(s)).map_err(|e| Error::Io { path: p, source: e })?;
    }
    Ok(())
}

fn arch(template: &str) -> Result<ArchSpec> {
    let p = Path::new(template);
    if p.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
        return Ok(ArchSpec::from_json(&text)?);
    }
    Ok(ArchSpec::template(template)?)
}

fn gen_model(a: GenModelArgs) -> Result<()> {
    let raw = gen_random_model(&arch(&a.template)?, a.seed)?;
    let saved = if a.fold {
        let ex = extract_bias_vector(&raw)?;
        match a.dtype {
            DType::F32 => save_model(&ex.model.cast::<f32>(), &a.out, Some(&ex.bias.cast())),
            DType::F64 => save_model(&ex.model, &a.out, Some(&ex.bias)),
        }?
    } else {
        match a.dtype {
            DType::F32 => save_model(&raw.cast::<f32>(), &a.out, None),
            DType::F64 => save_model(&raw, &a.out, None),
        }?
    };
    outln!("model: {}", saved.manifest.display());
    outln!("blob: {}", saved.blob.display());
    if let Some(b) = &saved.bias {
        outln!("bias_vector: {}", b.display());
    }
    Ok(())
}

fn gen_input(a: GenInputArgs) -> Result<()> {
    let shape = match (a.shape, &a.model) {
        (Some(s), _) => s,
        (None, Some(m)) => load_model::<f64>(m)?.model.input_shape(),
        (None, None) => unreachable!("clap requires --model or --shape"),
    };
    let batch = Tensor::stack(&random_images(shape, a.samples, a.seed))?;
    match a.dtype {
        DType::F32 => save_tensor(&a.out, &batch.cast::<f32>())?,
        DType::F64 => save_tensor(&a.out, &batch)?,
    }
    outln!("shape: {:?}", batch.shape());
    outln!("out: {}", a.out.display());
    Ok(())
}
