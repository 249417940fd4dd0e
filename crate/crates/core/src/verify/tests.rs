use super::*;
use crate::arch::{gen_random_model, random_images, ArchSpec};
use crate::fold::{extract_bias_vector, Extraction};
use crate::graph::{Form, LayerSpec};
use crate::tensor::{Padding, Tensor};

fn fixture(name: &str, seed: u64, n: usize) -> (Extraction<f64>, Vec<ExtendedInput<f64>>) {
    let raw = gen_random_model(&ArchSpec::template(name).unwrap(), seed).unwrap();
    let ex = extract_bias_vector(&raw).unwrap();
    let xs = random_images(raw.input_shape(), n, seed ^ 0xabc)
        .into_iter()
        .map(|img| ex.extend(img).unwrap())
        .collect();
    (ex, xs)
}

#[test]
fn dyadic_linear_model_is_exact() {
    let model = ModelGraph::new(
        "lin",
        [1, 1, 1],
        Form::Equivalent,
        vec![
            LayerSpec::conv("c0", Tensor::filled(vec![1, 1, 1, 1], 0.5), 1, Padding::Same),
            LayerSpec::bias_slot("b0", false),
            LayerSpec::conv("c1", Tensor::filled(vec![1, 1, 1, 1], -2.0), 1, Padding::Same),
            LayerSpec::bias_slot("b1", false),
            LayerSpec::global_pool("gp"),
            LayerSpec::fc("fc", Tensor::filled(vec![1, 2], 0.25)),
        ],
    )
    .unwrap();
    let x = ExtendedInput::new(
        Tensor::filled(vec![1, 1, 1], 0.75),
        Tensor::vector(vec![0.25, -0.125]),
        model.bias_layout().clone(),
    )
    .unwrap();
    let r = verify_model(&model, &[x], 0.125, None).unwrap();
    for s in &r.layers {
        assert_eq!(s.histogram[50], s.count_total, "{}", s.layer);
    }
}

#[test]
fn double_precision_errors_are_rounding_level() {
    for name in ["toy4", "res-mini", "vgg-mini"] {
        let (ex, xs) = fixture(name, 31, 4);
        let r = verify_model(&ex.model, &xs, 0.125, None).unwrap();
        assert_eq!(r.layers.len(), ex.model.conv_count());
        assert!(r.max_abs() <= 1e-9, "{name}: {}", r.max_abs());
        let units: u64 = r.layers.iter().map(|s| s.count_total).sum();
        let per_input: usize = layer_targets(&ex.model)
            .iter()
            .map(|t| match t {
                LayerTarget::Conv(l) => ex.model.conv_unit_count(*l).unwrap(),
                LayerTarget::Fc => ex.model.output_shape(ex.model.fc_node().unwrap())[0],
            })
            .sum();
        assert_eq!(units as usize, per_input * xs.len());
    }
}

#[test]
fn single_precision_stays_within_one_percent() {
    let (ex, xs) = fixture("toy4", 2, 20);
    let m32 = ex.model.cast::<f32>();
    let xs32: Vec<_> = xs.iter().map(|x| x.cast::<f32>()).collect();
    let r = verify_model(&m32, &xs32, 0.125, None).unwrap();
    assert_eq!(r.dtype, DType::F32);
    assert!(r.min_percent_within() >= 99.9, "{}", r.table_csv());
}

#[test]
fn layer_zero_is_rejected() {
    let (ex, xs) = fixture("toy4", 1, 1);
    assert!(matches!(
        verify_layer(&ex.model, &xs[0], LayerTarget::Conv(0), 0.125),
        Err(Error::FirstLayer)
    ));
    assert!(matches!(
        oracle_dense_check(&ex.model, &xs[0], LayerTarget::Conv(0), 0.125),
        Err(Error::FirstLayer)
    ));
}

#[test]
fn dense_oracle_agrees_with_engine() {
    for name in ["toy4", "res-mini", "vgg-mini"] {
        let (ex, xs) = fixture(name, 6, 2);
        for x in &xs {
            for t in layer_targets(&ex.model) {
                let d = oracle_dense_check(&ex.model, x, t, 0.125).unwrap();
                assert!(d.max() <= 1e-12, "{name} {t}: {d:?}");
            }
        }
    }
}

#[test]
fn dense_oracle_at_zero_input() {
    let (ex, _) = fixture("toy4", 6, 0);
    let [h, w, c] = ex.model.input_shape();
    let zero = ExtendedInput::new(
        Tensor::zeros(vec![h, w, c]),
        Tensor::zeros(vec![ex.model.bias_len()]),
        ex.layout().clone(),
    )
    .unwrap();
    for t in layer_targets(&ex.model) {
        assert_eq!(oracle_dense_check(&ex.model, &zero, t, 0.125).unwrap().reproduction, 0.0);
    }
}

#[test]
fn kinked_unit_shares_the_sign_rule() {
    let (ex, xs) = fixture("toy4", 12, 1);
    let model = &ex.model;
    let x = &xs[0];
    let node = model.conv_nodes()[0];
    let co = model.output_shape(node)[2];
    let (s, i) = (5, 1);
    let c = model.forward(x).unwrap().output(node).data()[s * co + i];
    // Solve c + b = 0 for the channel's bias.
    let slot = model.bias_layout().slot("b0").unwrap().clone();
    let mut bias = x.bias().clone();
    bias.data_mut()[slot.offset + i] = -c;
    let kinked = ExtendedInput::new(x.image().clone(), bias, x.layout().clone()).unwrap();
    let at = EvalPoint::new(kinked.clone(), 0.125).unwrap();
    let lin = Linearization::new(model, &at).unwrap();
    assert!(lin.trace().kinks() >= 1);
    for t in layer_targets(model) {
        let d = oracle_dense_check(model, &kinked, t, 0.125).unwrap();
        assert!(d.max() <= 1e-12, "{t}: {d:?}");
    }
    let r = verify_model(model, &[kinked], 0.125, None).unwrap();
    assert!(r.kinks >= 1);
    assert!(r.max_abs() <= 1e-9);
}

#[test]
fn dense_oracle_size_guard() {
    let raw = gen_random_model(&ArchSpec::template("vgg7").unwrap(), 0).unwrap();
    let ex = extract_bias_vector(&raw).unwrap();
    let x = ex.extend(random_images(raw.input_shape(), 1, 0).remove(0)).unwrap();
    assert!(matches!(
        oracle_dense_check(&ex.model, &x, LayerTarget::Fc, 0.125),
        Err(Error::SizeGuard { .. })
    ));
}

#[test]
fn aggregation_is_additive() {
    let mut a = RelativeErrorStats::new(LayerTarget::Conv(1));
    let mut b = RelativeErrorStats::new(LayerTarget::Conv(1));
    let mut f = RelativeErrorStats::new(LayerTarget::Fc);
    a.push(0.5);
    b.push(1e-5);
    b.push(-0.02);
    f.push(0.0);
    let meta = ReportMeta {
        model: "m".into(),
        dtype: DType::F64,
        k: 0.125,
        samples: 2,
        kinks: 0,
        ties: 0,
        runtime_secs: 0.0,
    };
    let r = aggregate_report(meta.clone(), vec![a, f, b]).unwrap();
    assert_eq!(r.layers.len(), 2);
    let conv = r.layer(LayerTarget::Conv(1)).unwrap();
    assert_eq!(conv.count_total, 3);
    assert_eq!(conv.count_within_1pct, 1);
    assert_eq!(r.layer(LayerTarget::Fc).unwrap().percent_within(), 100.0);
    assert!(aggregate_report(meta, vec![]).is_err());
    let csv = r.table_csv();
    assert!(csv.lines().nth(1).unwrap().starts_with("conv1,3,1,"));
    let back: VerificationReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn report_is_independent_of_thread_count() {
    let (ex, xs) = fixture("res-mini", 3, 6);
    let run = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| verify_model(&ex.model, &xs, 0.125, None).unwrap())
            .without_runtime()
    };
    assert_eq!(run(1).to_json().unwrap(), run(4).to_json().unwrap());
}

#[test]
fn writes_report_files() {
    let (ex, xs) = fixture("toy4", 3, 1);
    let r = verify_model(&ex.model, &xs, 0.125, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write(dir.path(), Some(&dir.path().join("hist"))).unwrap();
    assert!(dir.path().join("report.json").exists());
    let hist = std::fs::read_to_string(dir.path().join("hist").join("hist_fc.csv")).unwrap();
    assert_eq!(hist.lines().count(), HIST_BINS + 1);
}
