//! Structural invariants over randomly generated models, inputs and shapes.

use hypersurf::arch::{gen_random_model, random_images, ArchSpec};
use hypersurf::fold::extract_bias_vector;
use hypersurf::io::{load_model, save_model};
use hypersurf::tensor::{conv2d, conv2d_backward_input};
use hypersurf::verify::normwise_deviation;
use hypersurf::{mode_sum_check, Coords, EvalPoint, Linearization, Mode, Padding, Strategy, Tensor};
use proptest::prelude::*;

const TEMPLATES: [&str; 3] = ["toy4", "vgg-mini", "res-mini"];

fn template() -> impl proptest::strategy::Strategy<Value = &'static str> {
    prop::sample::select(TEMPLATES.to_vec())
}

fn unit_values(seed: u64, n: usize) -> Vec<f64> {
    random_images([n, 1, 1], 1, seed).remove(0).data().iter().map(|v| 2.0 * v - 1.0).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn conv_backward_is_the_adjoint(
        h in 1usize..7, w in 1usize..7, ci in 1usize..4, co in 1usize..4,
        r in 1usize..4, stride in 1usize..3, valid in any::<bool>(), seed in any::<u64>(),
    ) {
        let padding = if valid { Padding::Valid } else { Padding::Same };
        prop_assume!(!valid || (r <= h && r <= w));
        let x = Tensor::new(vec![h, w, ci], unit_values(seed, h * w * ci)).unwrap();
        let k = Tensor::new(vec![r, r, ci, co], unit_values(seed ^ 1, r * r * ci * co)).unwrap();
        let y = conv2d(&x, &k, stride, padding).unwrap();
        let g = Tensor::new(y.shape().to_vec(), unit_values(seed ^ 2, y.len())).unwrap();
        let back = conv2d_backward_input(&g, &k, (h, w, ci), stride, padding).unwrap();
        let lhs = dot(y.data(), g.data());
        let rhs = dot(x.data(), back.data());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn folding_preserves_logits(name in template(), seed in 0u64..1000, input in any::<u64>()) {
        let raw = gen_random_model(&ArchSpec::template(name).unwrap(), seed).unwrap();
        let ex = extract_bias_vector(&raw).unwrap();
        let img = random_images(raw.input_shape(), 1, input).remove(0);
        let a = raw.forward_raw(&img).unwrap();
        let b = ex.model.forward(&ex.extend(img).unwrap()).unwrap();
        prop_assert!(normwise_deviation(a.final_output().data(), b.final_output().data()) <= 1e-12);
    }

    #[test]
    fn rm2_reproduces_units(name in template(), seed in 0u64..1000, input in any::<u64>()) {
        let ex = extract_bias_vector(&gen_random_model(&ArchSpec::template(name).unwrap(), seed).unwrap()).unwrap();
        let x = ex.extend(random_images(ex.model.input_shape(), 1, input).remove(0)).unwrap();
        let lin = Linearization::new(&ex.model, &EvalPoint::new(x.clone(), 0.125).unwrap()).unwrap();
        let trace = ex.model.forward(&x).unwrap();
        let convs = ex.model.conv_nodes();
        for (layer, &node) in convs.iter().enumerate().skip(1) {
            let h = lin.reconstruct(Mode::Rm2, &Coords::conv(layer), Strategy::Auto).unwrap();
            let c_hat = h.evaluate(&x).unwrap();
            let dev = normwise_deviation(c_hat.data(), trace.output(node).data());
            prop_assert!(dev <= 1e-12, "{name} conv{layer}: {dev:e}");
        }
    }

    #[test]
    fn relu_hypersurfaces_ignore_k(name in template(), seed in 0u64..1000, k in 0.01f64..10.0) {
        let ex = extract_bias_vector(&gen_random_model(&ArchSpec::template(name).unwrap(), seed).unwrap()).unwrap();
        let x = ex.extend(random_images(ex.model.input_shape(), 1, seed).remove(0)).unwrap();
        let at = |k| Linearization::new(&ex.model, &EvalPoint::new(x.clone(), k).unwrap()).unwrap();
        let a = at(0.125).reconstruct(Mode::Rm0, &Coords::fc(), Strategy::Auto).unwrap().stacked();
        let b = at(k).reconstruct(Mode::Rm0, &Coords::fc(), Strategy::Auto).unwrap().stacked();
        prop_assert!(normwise_deviation(a.data(), b.data()) <= 1e-12);
    }

    #[test]
    fn seeded_and_batched_agree(name in template(), seed in 0u64..1000, rm1 in any::<bool>()) {
        let ex = extract_bias_vector(&gen_random_model(&ArchSpec::template(name).unwrap(), seed).unwrap()).unwrap();
        let x = ex.extend(random_images(ex.model.input_shape(), 1, seed).remove(0)).unwrap();
        let lin = Linearization::new(&ex.model, &EvalPoint::new(x, 0.125).unwrap()).unwrap();
        let mode = if rm1 { Mode::Rm1 } else { Mode::Rm2 };
        let c = Coords::conv(ex.model.conv_nodes().len() - 1);
        let a = lin.reconstruct(mode, &c, Strategy::Seeded).unwrap().stacked();
        let b = lin.reconstruct(mode, &c, Strategy::Batched).unwrap().stacked();
        prop_assert!(normwise_deviation(a.data(), b.data()) <= 1e-12);
    }

    #[test]
    fn modes_sum_consistently(seed in 0u64..1000) {
        let ex = extract_bias_vector(&gen_random_model(&ArchSpec::template("toy4").unwrap(), seed).unwrap()).unwrap();
        let x = ex.extend(random_images(ex.model.input_shape(), 1, seed).remove(0)).unwrap();
        let lin = Linearization::new(&ex.model, &EvalPoint::new(x, 0.125).unwrap()).unwrap();
        let c = Coords::conv(1);
        let get = |m| lin.reconstruct(m, &c, Strategy::Auto).unwrap().stacked();
        let sums = mode_sum_check(&lin.reconstruct(Mode::Rm4, &c, Strategy::Auto).unwrap()).unwrap();
        let pairs = [
            (sums.rm3.stacked(), get(Mode::Rm3)),
            (sums.rm2.stacked(), get(Mode::Rm2)),
            (sums.rm1_from_rm3.stacked(), get(Mode::Rm1)),
            (sums.rm1_from_rm2.stacked(), get(Mode::Rm1)),
        ];
        for (summed, direct) in &pairs {
            prop_assert_eq!(summed.shape(), direct.shape());
            prop_assert!(normwise_deviation(summed.data(), direct.data()) <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn manifest_round_trip_preserves_model(name in template(), seed in 0u64..1000, fold in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let raw = gen_random_model(&ArchSpec::template(name).unwrap(), seed).unwrap();
        let path = dir.path().join("m.json");
        let (model, bias) = if fold {
            let ex = extract_bias_vector(&raw).unwrap();
            (ex.model, Some(ex.bias))
        } else {
            (raw, None)
        };
        save_model(&model, &path, bias.as_ref()).unwrap();
        let loaded = load_model::<f64>(&path).unwrap();
        prop_assert_eq!(loaded.model.layers(), model.layers());
        prop_assert_eq!(loaded.bias, bias);
    }
}
