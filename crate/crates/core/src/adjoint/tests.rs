use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::arch::{gen_random_model, random_images, ArchSpec};
use crate::fold::extract_bias_vector;
use crate::graph::{LayerSpec, ModelGraph};
use crate::tensor::{conv2d, Padding};

fn fixture(name: &str, seed: u64) -> (ModelGraph<f64>, Vec<ExtendedInput<f64>>) {
    let raw = gen_random_model(&ArchSpec::template(name).unwrap(), seed).unwrap();
    let ex = extract_bias_vector(&raw).unwrap();
    let xs = random_images(raw.input_shape(), 3, seed + 100)
        .into_iter()
        .map(|img| ex.extend(img).unwrap())
        .collect();
    (ex.model, xs)
}

/// max |a − b| / max |b|.
fn rel_dev(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn at(x: &ExtendedInput<f64>) -> EvalPoint<f64> {
    EvalPoint::with_default_scale(x.clone())
}

#[test]
fn jacobian_reproduces_subpath_outputs() {
    for name in ["toy4", "res-mini", "vgg-mini"] {
        let (model, xs) = fixture(name, 3);
        let x = &xs[0];
        let trace = model.forward(x).unwrap();
        let mut targets: Vec<Target> = (1..model.conv_count()).map(|layer| Target::ConvInput { layer }).collect();
        targets.push(Target::GlobalPool);
        for t in targets {
            let j = jacobian_extended(&model, t, &at(x)).unwrap();
            let end = t.end_node(&model).unwrap();
            let got = j.apply(x).unwrap();
            let want = trace.node_input(end);
            assert_eq!(got.shape(), want.shape());
            let d = rel_dev(got.data(), want.data());
            assert!(d < 1e-12, "{name} {t:?}: {d}");
        }
    }
}

#[test]
fn jacobian_matches_central_differences() {
    let (model, xs) = fixture("res-mini", 5);
    let x = &xs[0];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let j = jacobian_extended(&model, Target::GlobalPool, &at(x)).unwrap();
    let end = Target::GlobalPool.end_node(&model).unwrap();
    let h = 1e-6;
    for _ in 0..4 {
        let v_img = Tensor::from_fn(x.image().shape().to_vec(), |_| rng.gen_range(-1.0..1.0));
        let v_b = Tensor::from_fn(vec![x.bias().len()], |_| rng.gen_range(-1.0..1.0));
        let shift = |sign: f64| {
            let img = x.image().add(&v_img.scale(sign * h)).unwrap();
            let b = x.bias().add(&v_b.scale(sign * h)).unwrap();
            let p = ExtendedInput::new(img, b, x.layout().clone()).unwrap();
            model.forward(&p).unwrap().node_input(end).clone()
        };
        let (fp, fm) = (shift(1.0), shift(-1.0));
        let fd: Vec<f64> = fp.data().iter().zip(fm.data()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let v = ExtendedInput::new(v_img, v_b, x.layout().clone()).unwrap();
        let jv = j.apply(&v).unwrap();
        let d = rel_dev(jv.data(), &fd);
        assert!(d < 1e-6, "{d}");
    }
}

#[test]
fn seeded_and_batched_agree() {
    let (model, xs) = fixture("res-mini", 11);
    let x = &xs[1];
    let lin = Linearization::new(&model, &at(x)).unwrap();
    let mut cases = vec![(Mode::Rm0, Coords::fc()), (Mode::Rm0, Coords::fc().class(2))];
    for layer in 1..model.conv_count() {
        for mode in [Mode::Rm1, Mode::Rm2, Mode::Rm3, Mode::Rm4] {
            cases.push((mode, Coords::conv(layer)));
            cases.push((mode, Coords::conv(layer).out_ch(1)));
        }
        cases.push((Mode::Rm2, Coords::conv(layer).stride_idx(3).out_ch(0)));
        cases.push((Mode::Rm4, Coords::conv(layer).stride_idx(5).in_ch(2)));
        cases.push((Mode::Rm3, Coords::conv(layer).in_ch(1)));
    }
    for (mode, c) in cases {
        let a = lin.reconstruct(mode, &c, Strategy::Seeded).unwrap();
        let b = lin.reconstruct(mode, &c, Strategy::Batched).unwrap();
        assert_eq!(a.image.shape(), b.image.shape());
        assert_eq!(a.bias.shape(), b.bias.shape());
        let d = rel_dev(a.stacked().data(), b.stacked().data());
        assert!(d < 1e-12, "{mode} {c:?}: {d}");
    }
}

#[test]
fn rm2_and_rm0_reproduce_unit_values() {
    for name in ["toy4", "res-mini"] {
        let (model, xs) = fixture(name, 21);
        for x in &xs {
            let trace = model.forward(x).unwrap();
            let lin = Linearization::new(&model, &at(x)).unwrap();
            for layer in 1..model.conv_count() {
                let h = lin.reconstruct(Mode::Rm2, &Coords::conv(layer), Strategy::Auto).unwrap();
                let got = h.evaluate(x).unwrap();
                let want = trace.output(model.conv_nodes()[layer]);
                let d = rel_dev(got.data(), want.data());
                assert!(d < 1e-12, "{name} layer {layer}: {d}");
            }
            let h = lin.reconstruct(Mode::Rm0, &Coords::fc(), Strategy::Auto).unwrap();
            let got = h.evaluate(x).unwrap();
            let want = trace.output(model.fc_node().unwrap());
            assert!(rel_dev(got.data(), want.data()) < 1e-12);
        }
    }
}

#[test]
fn rm4_matches_single_contribution_oracle() {
    let (model, xs) = fixture("toy4", 2);
    let x = &xs[0];
    let trace = model.forward(x).unwrap();
    let layer = 2;
    let node = model.conv_nodes()[layer];
    let (kernel, stride, padding) = model.conv_params(node);
    let p = trace.node_input(node);
    let cin = p.shape()[2];
    let co = kernel.shape()[3];
    for (s, j, i) in [(0, 0, 0), (3, 1, 2), (8, 5, 7), (15, 3, 1)] {
        let masked = Tensor::from_fn(p.shape().to_vec(), |q| if q % cin == j { p.data()[q] } else { 0.0 });
        let want = conv2d(&masked, kernel, stride, padding).unwrap().data()[s * co + i];
        let c = Coords::conv(layer).stride_idx(s).in_ch(j).out_ch(i);
        let h = reconstruct(&model, &at(x), Mode::Rm4, &c).unwrap();
        assert_eq!(h.axes(), &[1, 1, 1, 1]);
        let got = h.evaluate(x).unwrap().data()[0];
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300), "{got} vs {want}");
    }
}

#[test]
fn mode_sums_match_direct_reconstructions() {
    let (model, xs) = fixture("res-mini", 4);
    let lin = Linearization::new(&model, &at(&xs[0])).unwrap();
    for layer in [1, 3] {
        let c = Coords::conv(layer);
        let h4 = lin.reconstruct(Mode::Rm4, &c, Strategy::Seeded).unwrap();
        let sums = mode_sum_check(&h4).unwrap();
        let direct = |m| lin.reconstruct(m, &c, Strategy::Seeded).unwrap().stacked();
        assert!(rel_dev(sums.rm3.stacked().data(), direct(Mode::Rm3).data()) < 1e-12);
        assert!(rel_dev(sums.rm2.stacked().data(), direct(Mode::Rm2).data()) < 1e-12);
        let rm1 = direct(Mode::Rm1);
        assert!(rel_dev(sums.rm1_from_rm3.stacked().data(), rm1.data()) < 1e-12);
        assert!(rel_dev(sums.rm1_from_rm2.stacked().data(), rm1.data()) < 1e-12);
        assert!(rel_dev(sums.rm1_from_rm3.stacked().data(), sums.rm1_from_rm2.stacked().data()) < 1e-12);
    }
    let partial = lin
        .reconstruct(Mode::Rm4, &Coords::conv(1).in_ch(0), Strategy::Seeded)
        .unwrap();
    assert!(matches!(mode_sum_check(&partial), Err(Error::IncompleteSet(_))));
}

fn tiny_equivalent(layers: Vec<LayerSpec<f64>>, input: [usize; 3]) -> ModelGraph<f64> {
    ModelGraph::new("tiny", input, Form::Equivalent, layers).unwrap()
}

#[test]
fn degenerate_layer_has_equal_modes() {
    let model = tiny_equivalent(
        vec![
            LayerSpec::conv("c0", Tensor::filled(vec![1, 1, 1, 1], 0.7), 1, Padding::Same),
            LayerSpec::bias_slot("b0", false),
            LayerSpec::relu("r0"),
            LayerSpec::conv("c1", Tensor::vector(vec![1.5, -2.0]).reshape(vec![1, 1, 1, 2]).unwrap(), 1, Padding::Same),
        ],
        [1, 1, 1],
    );
    let x = ExtendedInput::new(
        Tensor::filled(vec![1, 1, 1], 0.4),
        Tensor::vector(vec![0.2]),
        model.bias_layout().clone(),
    )
    .unwrap();
    let lin = Linearization::new(&model, &at(&x)).unwrap();
    let get = |m| lin.reconstruct(m, &Coords::conv(1), Strategy::Auto).unwrap().stacked().into_data();
    let rm4 = get(Mode::Rm4);
    for m in [Mode::Rm3, Mode::Rm2, Mode::Rm1] {
        assert_eq!(get(m), rm4, "{m}");
    }
}

#[test]
fn zeroed_in_channel_gives_zero_rm4_slices() {
    let raw = gen_random_model(&ArchSpec::template("toy4").unwrap(), 8).unwrap();
    let ex = extract_bias_vector(&raw).unwrap();
    let mut layers = ex.model.layers().to_vec();
    let node = ex.model.conv_nodes()[1];
    let jstar = 2;
    if let LayerOp::Conv { kernel, .. } = &mut layers[node].op {
        let cin = kernel.shape()[2];
        let co = kernel.shape()[3];
        for (q, v) in kernel.data_mut().iter_mut().enumerate() {
            if (q / co) % cin == jstar {
                *v = 0.0;
            }
        }
    }
    let model = ModelGraph::new("z", raw.input_shape(), Form::Equivalent, layers).unwrap();
    let x = ex.extend(random_images(raw.input_shape(), 1, 1).remove(0)).unwrap();
    let h = reconstruct(&model, &at(&x), Mode::Rm4, &Coords::conv(1).in_ch(jstar)).unwrap();
    assert!(h.image.data().iter().chain(h.bias.data()).all(|v| *v == 0.0));
    let other = reconstruct(&model, &at(&x), Mode::Rm4, &Coords::conv(1).in_ch(0)).unwrap();
    assert!(other.image.data().iter().any(|v| *v != 0.0));
}

#[test]
fn rm0_on_identity_path_is_fc_column() {
    let w = Tensor::vector(vec![0.3, -1.2, 2.5]).reshape(vec![1, 3]).unwrap();
    let model = tiny_equivalent(
        vec![LayerSpec::global_pool("gp"), LayerSpec::fc("fc", w.clone())],
        [1, 1, 1],
    );
    let x = ExtendedInput::new(Tensor::filled(vec![1, 1, 1], 0.9), Tensor::vector(vec![]), model.bias_layout().clone())
        .unwrap();
    for k in 0..3 {
        let h = reconstruct(&model, &at(&x), Mode::Rm0, &Coords::fc().class(k)).unwrap();
        assert_eq!(h.image.shape(), &[1, 1, 1, 1]);
        assert_eq!(h.image.data(), &[w.data()[k]]);
    }
}

#[test]
fn hypersurfaces_are_scale_invariant() {
    let (model, xs) = fixture("res-mini", 13);
    let x = &xs[2];
    let base = reconstruct(&model, &at(x), Mode::Rm2, &Coords::conv(2)).unwrap();
    for k in [0.5, 1.0, 3.0] {
        let h = reconstruct(&model, &EvalPoint::new(x.clone(), k).unwrap(), Mode::Rm2, &Coords::conv(2)).unwrap();
        assert!(rel_dev(h.stacked().data(), base.stacked().data()) < 1e-12, "k = {k}");
    }
}

#[test]
fn jacobian_map_is_not_linear_in_the_input() {
    let (model, xs) = fixture("toy4", 17);
    let (x1, x2) = (&xs[0], &xs[1]);
    let sum = ExtendedInput::new(
        x1.image().add(x2.image()).unwrap(),
        x1.bias().add(x2.bias()).unwrap(),
        x1.layout().clone(),
    )
    .unwrap();
    let j = |x: &ExtendedInput<f64>| jacobian_extended(&model, Target::GlobalPool, &at(x)).unwrap().image;
    let (a, b, c) = (j(&sum), j(x1), j(x2));
    let gap = a
        .data()
        .iter()
        .zip(b.data().iter().zip(c.data()))
        .fold(0.0f64, |m, (s, (p, q))| m.max((s - p - q).abs()));
    assert!(gap > 1e-3, "{gap}");
}

#[test]
fn rejects_inconsistent_requests() {
    let (model, xs) = fixture("toy4", 1);
    let p = at(&xs[0]);
    let err = |m, c: Coords| reconstruct(&model, &p, m, &c).unwrap_err();
    assert!(matches!(err(Mode::Rm2, Coords::conv(0)), Error::FirstLayer));
    assert!(matches!(err(Mode::Rm0, Coords::conv(1)), Error::ModeMismatch(_)));
    assert!(matches!(err(Mode::Rm2, Coords::fc()), Error::ModeMismatch(_)));
    assert!(matches!(err(Mode::Rm3, Coords::conv(1).stride_idx(0)), Error::ModeMismatch(_)));
    assert!(matches!(err(Mode::Rm2, Coords::conv(1).in_ch(0)), Error::ModeMismatch(_)));
    assert!(matches!(err(Mode::Rm1, Coords::conv(1).out_ch(99)), Error::UnitOutOfRange(_)));
    assert!(matches!(err(Mode::Rm0, Coords::fc().class(10)), Error::UnitOutOfRange(_)));
    assert!(matches!(err(Mode::Rm2, Coords::conv(3)), Error::UnitOutOfRange(_)));
    assert!(EvalPoint::new(xs[0].clone(), 0.0).is_err());
    assert!(EvalPoint::new(xs[0].clone(), -1.0).is_err());
    let raw = gen_random_model(&ArchSpec::template("toy4").unwrap(), 1).unwrap();
    assert!(matches!(Linearization::new(&raw, &p), Err(Error::Form(_))));
}

#[test]
fn shapes_follow_mode_axes() {
    let (model, _) = fixture("toy4", 1);
    let d = model.d_in();
    let shape = |m, c: Coords| hypersurface_shape(&model, m, &c).unwrap();
    // conv1: 8×8 input, stride 2 → 4×4×6 output from 4 in-channels.
    assert_eq!(shape(Mode::Rm4, Coords::conv(1)), vec![d, 4, 4, 4, 6]);
    assert_eq!(shape(Mode::Rm3, Coords::conv(1)), vec![d, 4, 6]);
    assert_eq!(shape(Mode::Rm2, Coords::conv(1)), vec![d, 4, 4, 6]);
    assert_eq!(shape(Mode::Rm1, Coords::conv(1)), vec![d, 6]);
    assert_eq!(shape(Mode::Rm0, Coords::fc()), vec![d, 10]);
    assert_eq!(shape(Mode::Rm0, Coords::fc().class(3)), vec![d, 1]);
    assert_eq!(shape(Mode::Rm4, Coords::conv(2).stride_idx(1).out_ch(0)), vec![d, 1, 1, 6, 1]);
    assert_eq!("RM3".parse::<Mode>().unwrap(), Mode::Rm3);
    assert!("rm5".parse::<Mode>().is_err());
}
