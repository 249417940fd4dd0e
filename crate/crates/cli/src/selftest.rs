//! Oracle checks on the small built-in templates.

use hypersurf::arch::{gen_random_model, random_images, ArchSpec};
use hypersurf::fold::extract_bias_vector;
use hypersurf::verify::{layer_targets, normwise_deviation, oracle_dense_check, verify_model};
use hypersurf::{mode_sum_check, Coords, EvalPoint, Linearization, Mode, Result, Strategy};

const TEMPLATES: [&str; 3] = ["toy4", "vgg-mini", "res-mini"];
const TOL: f64 = 1e-12;
const EPS_TOL: f64 = 1e-9;

fn check(name: &str, template: &str, outcome: Result<(f64, f64)>) -> bool {
    match outcome {
        Ok((value, tol)) if value <= tol => {
            outln!("PASS {template} {name} ({value:.3e} <= {tol:e})");
            true
        }
        Ok((value, tol)) => {
            outln!("FAIL {template} {name} ({value:.3e} > {tol:e})");
            false
        }
        Err(e) => {
            outln!("FAIL {template} {name} ({e})");
            false
        }
    }
}

/// Runs every check and returns the number of failures.
pub fn run(seed: u64) -> usize {
    let mut failures = 0;
    for template in TEMPLATES {
        let raw = match ArchSpec::template(template).and_then(|a| gen_random_model(&a, seed)) {
            Ok(m) => m,
            Err(e) => {
                outln!("FAIL {template} build ({e})");
                failures += 1;
                continue;
            }
        };
        let ex = match extract_bias_vector(&raw) {
            Ok(ex) => ex,
            Err(e) => {
                outln!("FAIL {template} fold ({e})");
                failures += 1;
                continue;
            }
        };
        let images = random_images(raw.input_shape(), 3, seed.wrapping_add(1));
        let xs: Vec<_> = match images.iter().map(|i| ex.extend(i.clone())).collect::<Result<_>>() {
            Ok(xs) => xs,
            Err(e) => {
                outln!("FAIL {template} inputs ({e})");
                failures += 1;
                continue;
            }
        };

        let fold = || -> Result<(f64, f64)> {
            let mut worst: f64 = 0.0;
            for (img, x) in images.iter().zip(&xs) {
                let a = raw.forward_raw(img)?;
                let b = ex.model.forward(x)?;
                worst = worst.max(normwise_deviation(b.final_output().data(), a.final_output().data()));
            }
            Ok((worst, TOL))
        };
        let dense = || -> Result<(f64, f64)> {
            let mut worst: f64 = 0.0;
            for x in &xs {
                for t in layer_targets(&ex.model) {
                    worst = worst.max(oracle_dense_check(&ex.model, x, t, 0.125)?.max());
                }
            }
            Ok((worst, TOL))
        };
        let identity = || -> Result<(f64, f64)> { Ok((verify_model(&ex.model, &xs, 0.125, None)?.max_abs(), EPS_TOL)) };
        let routes = || -> Result<(f64, f64)> {
            let lin = Linearization::new(&ex.model, &EvalPoint::new(xs[0].clone(), 0.125)?)?;
            let c = Coords::conv(1);
            let a = lin.reconstruct(Mode::Rm2, &c, Strategy::Seeded)?.stacked();
            let b = lin.reconstruct(Mode::Rm2, &c, Strategy::Batched)?.stacked();
            Ok((normwise_deviation(a.data(), b.data()), TOL))
        };
        let sums = || -> Result<(f64, f64)> {
            let lin = Linearization::new(&ex.model, &EvalPoint::new(xs[0].clone(), 0.125)?)?;
            let c = Coords::conv(1).out_ch(0);
            let s = mode_sum_check(&lin.reconstruct(Mode::Rm4, &c, Strategy::Auto)?)?;
            let direct = |m| lin.reconstruct(m, &c, Strategy::Auto).map(|h| h.stacked());
            let (rm3, rm2, rm1) = (direct(Mode::Rm3)?, direct(Mode::Rm2)?, direct(Mode::Rm1)?);
            let devs = [
                normwise_deviation(s.rm3.stacked().data(), rm3.data()),
                normwise_deviation(s.rm2.stacked().data(), rm2.data()),
                normwise_deviation(s.rm1_from_rm3.stacked().data(), rm1.data()),
                normwise_deviation(s.rm1_from_rm2.stacked().data(), rm1.data()),
            ];
            Ok((devs.into_iter().fold(0.0, f64::max), TOL))
        };
        let homogeneity = || -> Result<(f64, f64)> {
            let h = |k| -> Result<_> {
                let lin = Linearization::new(&ex.model, &EvalPoint::new(xs[0].clone(), k)?)?;
                Ok(lin.reconstruct(Mode::Rm0, &Coords::fc(), Strategy::Auto)?.stacked())
            };
            let (a, b) = (h(0.125)?, h(1.0)?);
            Ok((normwise_deviation(a.data(), b.data()), TOL))
        };

        let results = [
            check("fold-equivalence", template, fold()),
            check("dense-oracle", template, dense()),
            check("identity-f64", template, identity()),
            check("seeded-vs-batched", template, routes()),
            check("mode-sums", template, sums()),
            check("homogeneity", template, homogeneity()),
        ];
        failures += results.iter().filter(|ok| !**ok).count();
    }
    if failures == 0 {
        outln!("selftest: all checks passed");
    } else {
        outln!("selftest: {failures} check(s) failed");
    }
    failures
}
