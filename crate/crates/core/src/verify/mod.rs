//! Checking reconstructed unit values against the forward pass.
//!
//! For every unit the relative error `ε = (ĉ − c) / c` compares
//! `ĉ = ⟨[x; x_b] | H⟩` (RM2 for conv units, RM0 for FC units, evaluated at
//! `k·[x; x_b]`) with the true linear activation `c`. Zero denominators are
//! replaced by the smallest positive normal value of the working dtype.

mod dense;
mod stats;

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{Coords, EvalPoint, Linearization, Mode, Strategy};
use crate::error::{Error, Result};
use crate::extended::ExtendedInput;
use crate::graph::{ActivationTrace, ModelGraph};
use crate::tensor::{DType, Element};

pub use dense::{normwise_deviation, oracle_dense_check, DenseCheck, DENSE_UNIT_LIMIT};
pub use stats::{bin_edges, bin_of, merge_tree, LayerTarget, RelativeErrorStats, HIST_BINS, THRESHOLD};

/// Every verifiable layer of a model: conv layers `1..` followed by the FC layer.
pub fn layer_targets<T: Element>(model: &ModelGraph<T>) -> Vec<LayerTarget> {
    let mut t: Vec<LayerTarget> = (1..model.conv_count()).map(LayerTarget::Conv).collect();
    if model.fc_node().is_some() {
        t.push(LayerTarget::Fc);
    }
    t
}

/// `(ĉ − c) / c` with a zero `c` replaced by `min_positive`.
pub fn relative_error(c_hat: f64, c: f64, min_positive: f64) -> f64 {
    let denom = if c == 0.0 { min_positive } else { c };
    (c_hat - c) / denom
}

/// Relative errors of every unit of one layer for one input.
pub fn verify_layer<T: Element>(
    model: &ModelGraph<T>,
    x: &ExtendedInput<T>,
    layer: LayerTarget,
    k: f64,
) -> Result<RelativeErrorStats> {
    let lin = Linearization::new(model, &EvalPoint::new(x.clone(), k)?)?;
    let trace = model.forward(x)?;
    verify_with(&lin, &trace, x, layer)
}

fn verify_with<T: Element>(
    lin: &Linearization<'_, T>,
    trace: &ActivationTrace<T>,
    x: &ExtendedInput<T>,
    layer: LayerTarget,
) -> Result<RelativeErrorStats> {
    let model = lin.model();
    let tiny = T::DTYPE.min_positive();
    let mut stats = RelativeErrorStats::new(layer);
    match layer {
        LayerTarget::Conv(l) => {
            let node = model.reconstructable_conv(l)?;
            let c = trace.output(node);
            let co = c.shape()[2];
            // One out-channel at a time keeps memory at O(d_in × h_o × w_o).
            for i in 0..co {
                let h = lin.reconstruct(Mode::Rm2, &Coords::conv(l).out_ch(i), Strategy::Seeded)?;
                let c_hat = h.evaluate(x)?;
                for (s, &v) in c_hat.data().iter().enumerate() {
                    stats.push(relative_error(v.as_f64(), c.data()[s * co + i].as_f64(), tiny));
                }
            }
        }
        LayerTarget::Fc => {
            let node = model
                .fc_node()
                .ok_or_else(|| Error::ModeMismatch("model has no fc layer".into()))?;
            let h = lin.reconstruct(Mode::Rm0, &Coords::fc(), Strategy::Seeded)?;
            let c_hat = h.evaluate(x)?;
            for (v, c) in c_hat.data().iter().zip(trace.output(node).data()) {
                stats.push(relative_error(v.as_f64(), c.as_f64(), tiny));
            }
        }
    }
    Ok(stats)
}

/// Per-layer error statistics over a set of inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub model: String,
    pub dtype: DType,
    pub k: f64,
    pub samples: usize,
    pub layers: Vec<RelativeErrorStats>,
    /// Pre-activations exactly at a kink, summed over the evaluation traces.
    pub kinks: u64,
    /// Max-pool windows with a tied maximum.
    pub ties: u64,
    pub runtime_secs: f64,
}

impl VerificationReport {
    pub fn layer(&self, t: LayerTarget) -> Option<&RelativeErrorStats> {
        self.layers.iter().find(|s| s.layer == t)
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().fold(0.0, |m, s| if s.max_abs.is_nan() { f64::NAN } else { m.max(s.max_abs) })
    }

    pub fn min_percent_within(&self) -> f64 {
        self.layers.iter().map(|s| s.percent_within()).fold(100.0, f64::min)
    }

    /// The report without its wall-clock runtime, for reproducibility checks.
    pub fn without_runtime(&self) -> Self {
        Self {
            runtime_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per layer: percentage within 1 % plus |ε| extremes.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("layer,units,within_1pct,percent_within_1pct,min_abs,max_abs,mean_abs\n");
        for s in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:e},{:e},{:e}",
                s.layer,
                s.count_total,
                s.count_within_1pct,
                s.percent_within(),
                if s.count_total == 0 { 0.0 } else { s.min_abs },
                s.max_abs,
                s.mean_abs()
            );
        }
        out
    }

    /// Signed histogram of one layer: `bin,lower,upper,count`.
    pub fn histogram_csv(stats: &RelativeErrorStats) -> String {
        let mut out = String::from("bin,lower,upper,count\n");
        for (b, &n) in stats.histogram.iter().enumerate() {
            let (lo, hi) = bin_edges(b);
            let _ = writeln!(out, "{b},{lo:e},{hi:e},{n}");
        }
        out
    }

    /// Writes `report.json`, `report.csv` and, with `hist_dir`, one
    /// `hist_<layer>.csv` per layer.
    pub fn write(&self, out_dir: &std::path::Path, hist_dir: Option<&std::path::Path>) -> Result<()> {
        let io = |p: &std::path::Path, e| Error::io(p, e);
        std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
        let json = out_dir.join("report.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| io(&json, e))?;
        let csv = out_dir.join("report.csv");
        std::fs::write(&csv, self.table_csv()).map_err(|e| io(&csv, e))?;
        if let Some(dir) = hist_dir {
            std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            for s in &self.layers {
                let p = dir.join(format!("hist_{}.csv", s.layer));
                std::fs::write(&p, Self::histogram_csv(s)).map_err(|e| io(&p, e))?;
            }
        }
        Ok(())
    }
}

/// Run-level facts that go into a report next to the statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportMeta {
    pub model: String,
    pub dtype: DType,
    pub k: f64,
    pub samples: usize,
    pub kinks: u64,
    pub ties: u64,
    pub runtime_secs: f64,
}

/// Groups partial stats by layer (first-seen order) and merges each group in
/// a fixed binary tree, so the result depends only on the input order.
pub fn aggregate_report(meta: ReportMeta, stats: Vec<RelativeErrorStats>) -> Result<VerificationReport> {
    if stats.is_empty() {
        return Err(Error::invalid("no statistics to aggregate"));
    }
    let mut order: Vec<LayerTarget> = Vec::new();
    let mut groups: Vec<Vec<RelativeErrorStats>> = Vec::new();
    for s in stats {
        match order.iter().position(|t| *t == s.layer) {
            Some(i) => groups[i].push(s),
            None => {
                order.push(s.layer);
                groups.push(vec![s]);
            }
        }
    }
    let layers = groups
        .into_iter()
        .map(|g| Ok(merge_tree(g)?.expect("groups are non-empty")))
        .collect::<Result<_>>()?;
    Ok(VerificationReport {
        model: meta.model,
        dtype: meta.dtype,
        k: meta.k,
        samples: meta.samples,
        layers,
        kinks: meta.kinks,
        ties: meta.ties,
        runtime_secs: meta.runtime_secs,
    })
}

/// Verifies `layers` (all verifiable layers when `None`) over every input.
///
/// Inputs are processed in parallel; results are collected in input order
/// and merged deterministically, so the report does not depend on the
/// number of threads.
pub fn verify_model<T: Element>(
    model: &ModelGraph<T>,
    inputs: &[ExtendedInput<T>],
    k: f64,
    layers: Option<&[LayerTarget]>,
) -> Result<VerificationReport> {
    let start = Instant::now();
    let targets = match layers {
        Some(t) => t.to_vec(),
        None => layer_targets(model),
    };
    if targets.is_empty() {
        return Err(Error::invalid("model has no verifiable layer (needs conv layer ≥ 1 or fc)"));
    }
    let per_input: Vec<(Vec<RelativeErrorStats>, u64, u64)> = inputs
        .par_iter()
        .map(|x| {
            let lin = Linearization::new(model, &EvalPoint::new(x.clone(), k)?)?;
            let trace = model.forward(x)?;
            let stats = targets
                .iter()
                .map(|&t| verify_with(&lin, &trace, x, t))
                .collect::<Result<Vec<_>>>()?;
            Ok((stats, lin.trace().kinks() as u64, lin.trace().ties() as u64))
        })
        .collect::<Result<_>>()?;
    let kinks = per_input.iter().map(|p| p.1).sum();
    let ties = per_input.iter().map(|p| p.2).sum();
    // Layer-major so every layer's tree has the same shape.
    let mut all = Vec::with_capacity(targets.len() * inputs.len());
    for li in 0..targets.len() {
        for p in &per_input {
            all.push(p.0[li].clone());
        }
    }
    aggregate_report(
        ReportMeta {
            model: model.name().to_string(),
            dtype: T::DTYPE,
            k,
            samples: inputs.len(),
            kinks,
            ties,
            runtime_secs: start.elapsed().as_secs_f64(),
        },
        all,
    )
}

#[cfg(test)]
mod tests;
