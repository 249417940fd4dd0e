use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of histogram bins: 50 negative, one exact-zero, 50 positive.
pub const HIST_BINS: usize = 101;
/// Bins per sign.
const SIDE: usize = 50;
const ZERO_BIN: usize = SIDE;
/// `log10 |ε|` range covered by each side.
pub const LOG_MIN: f64 = -12.0;
pub const LOG_MAX: f64 = 1.0;
/// `|ε| ≤ THRESHOLD` counts as within 1 %.
pub const THRESHOLD: f64 = 0.01;

/// A verified layer: conv layer `l ≥ 1` or the FC layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum LayerTarget {
    Conv(usize),
    Fc,
}

impl fmt::Display for LayerTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerTarget::Conv(l) => write!(f, "conv{l}"),
            LayerTarget::Fc => f.write_str("fc"),
        }
    }
}

impl FromStr for LayerTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "fc" {
            return Ok(LayerTarget::Fc);
        }
        s.strip_prefix("conv")
            .and_then(|n| n.parse().ok())
            .map(LayerTarget::Conv)
            .ok_or_else(|| Error::invalid(format!("layer target `{s}` (expected convN or fc)")))
    }
}

impl From<LayerTarget> for String {
    fn from(t: LayerTarget) -> Self {
        t.to_string()
    }
}

impl TryFrom<String> for LayerTarget {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Streaming summary of signed relative errors for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeErrorStats {
    pub layer: LayerTarget,
    pub histogram: Vec<u64>,
    pub count_total: u64,
    pub count_within_1pct: u64,
    pub min_abs: f64,
    pub max_abs: f64,
    pub sum_abs: f64,
}

impl RelativeErrorStats {
    pub fn new(layer: LayerTarget) -> Self {
        Self {
            layer,
            histogram: vec![0; HIST_BINS],
            count_total: 0,
            count_within_1pct: 0,
            min_abs: f64::INFINITY,
            max_abs: 0.0,
            sum_abs: 0.0,
        }
    }

    pub fn push(&mut self, eps: f64) {
        let a = eps.abs();
        self.histogram[bin_of(eps)] += 1;
        self.count_total += 1;
        self.count_within_1pct += u64::from(a <= THRESHOLD);
        self.min_abs = self.min_abs.min(a);
        // NaN compares false everywhere; keep it visible in the maximum.
        self.max_abs = if a.is_nan() { f64::NAN } else { self.max_abs.max(a) };
        self.sum_abs += a;
    }

    /// Folds `other` into `self`. Counts are exact; `sum_abs` depends on merge order.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.layer != other.layer {
            return Err(Error::invalid(format!("cannot merge {} stats into {}", other.layer, self.layer)));
        }
        for (a, b) in self.histogram.iter_mut().zip(&other.histogram) {
            *a += b;
        }
        self.count_total += other.count_total;
        self.count_within_1pct += other.count_within_1pct;
        self.min_abs = self.min_abs.min(other.min_abs);
        self.max_abs = if self.max_abs.is_nan() || other.max_abs.is_nan() {
            f64::NAN
        } else {
            self.max_abs.max(other.max_abs)
        };
        self.sum_abs += other.sum_abs;
        Ok(())
    }

    pub fn mean_abs(&self) -> f64 {
        if self.count_total == 0 {
            0.0
        } else {
            self.sum_abs / self.count_total as f64
        }
    }

    /// Percentage of units with `|ε| ≤ 1 %`.
    pub fn percent_within(&self) -> f64 {
        if self.count_total == 0 {
            100.0
        } else {
            100.0 * self.count_within_1pct as f64 / self.count_total as f64
        }
    }
}

/// Merges partial stats pairwise in a fixed binary tree.
pub fn merge_tree(mut parts: Vec<RelativeErrorStats>) -> Result<Option<RelativeErrorStats>> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.merge(&b)?;
            }
            next.push(a);
        }
        parts = next;
    }
    Ok(parts.pop())
}

fn side_bin(a: f64) -> usize {
    let t = (a.log10() - LOG_MIN) / (LOG_MAX - LOG_MIN) * SIDE as f64;
    if t.is_nan() || t >= SIDE as f64 {
        SIDE - 1
    } else if t < 0.0 {
        0
    } else {
        t as usize
    }
}

/// Histogram bin of a signed relative error.
pub fn bin_of(eps: f64) -> usize {
    if eps == 0.0 {
        ZERO_BIN
    } else if eps > 0.0 || eps.is_nan() {
        ZERO_BIN + 1 + side_bin(eps.abs())
    } else {
        ZERO_BIN - 1 - side_bin(eps.abs())
    }
}

/// Signed `[lower, upper)` edges of bin `b`. The outermost bins also absorb
/// everything beyond `10^LOG_MAX`, and the innermost everything below `10^LOG_MIN`.
pub fn bin_edges(b: usize) -> (f64, f64) {
    let edge = |i: usize| 10f64.powf(LOG_MIN + (LOG_MAX - LOG_MIN) * i as f64 / SIDE as f64);
    match b.cmp(&ZERO_BIN) {
        std::cmp::Ordering::Equal => (0.0, 0.0),
        std::cmp::Ordering::Greater => {
            let i = b - ZERO_BIN - 1;
            (edge(i), edge(i + 1))
        }
        std::cmp::Ordering::Less => {
            let i = ZERO_BIN - 1 - b;
            (-edge(i + 1), -edge(i))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_and_symmetric_bins() {
        assert_eq!(bin_of(0.0), 50);
        assert_eq!(bin_of(-0.0), 50);
        for e in [1e-15, 1e-12, 3e-7, 0.01, 0.5, 9.99, 1e3] {
            assert_eq!(bin_of(e) - 50, 50 - bin_of(-e), "{e}");
        }
        assert_eq!(bin_of(1e-20), 51);
        assert_eq!(bin_of(1e5), 100);
        assert_eq!(bin_of(-1e5), 0);
    }

    #[test]
    fn edges_contain_their_values() {
        for e in [2e-12, 4.2e-9, 1e-3, 0.7, 5.0] {
            for v in [e, -e] {
                let (lo, hi) = bin_edges(bin_of(v));
                assert!(lo <= v && v < hi, "{v} not in [{lo}, {hi})");
            }
        }
    }

    #[test]
    fn all_zero_layer_is_fully_within() {
        let mut s = RelativeErrorStats::new(LayerTarget::Conv(1));
        for _ in 0..10 {
            s.push(0.0);
        }
        assert_eq!(s.percent_within(), 100.0);
        assert_eq!(s.histogram[50], 10);
    }

    #[test]
    fn layer_names_round_trip() {
        for t in [LayerTarget::Conv(7), LayerTarget::Fc] {
            assert_eq!(t.to_string().parse::<LayerTarget>().unwrap(), t);
        }
        assert!("pool".parse::<LayerTarget>().is_err());
    }

    proptest! {
        #[test]
        fn merge_is_additive_and_order_free_in_counts(
            a in proptest::collection::vec(-20.0f64..20.0, 0..50),
            b in proptest::collection::vec(-1e-6f64..1e-6, 0..50),
        ) {
            let fill = |v: &[f64]| {
                let mut s = RelativeErrorStats::new(LayerTarget::Fc);
                v.iter().for_each(|&e| s.push(e));
                s
            };
            let (sa, sb) = (fill(&a), fill(&b));
            let mut ab = sa.clone();
            ab.merge(&sb).unwrap();
            let mut ba = sb.clone();
            ba.merge(&sa).unwrap();
            prop_assert_eq!(ab.count_total, (a.len() + b.len()) as u64);
            prop_assert_eq!(&ab.histogram, &ba.histogram);
            prop_assert_eq!(ab.count_within_1pct, ba.count_within_1pct);
            prop_assert_eq!(ab.histogram.iter().sum::<u64>(), ab.count_total);
            prop_assert!(ab.count_within_1pct <= ab.count_total);
            prop_assert_eq!(ab.max_abs, ba.max_abs);
            let mut all = a.clone();
            all.extend(&b);
            prop_assert_eq!(&fill(&all).histogram, &ab.histogram);
        }
    }
}
