//! Balance and quality metrics.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-expert loads observed at one training step of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadRecord {
    pub loads: Vec<f64>,
    pub step: u64,
    pub layer: usize,
}

fn mean_load<T: Scalar>(loads: &[T]) -> Result<T> {
    if loads.is_empty() {
        return Err(Error::InvalidParameter("empty load vector".into()));
    }
    if let Some((index, &value)) = loads.iter().enumerate().find(|(_, &x)| !(x >= T::zero())) {
        return Err(Error::Domain {
            what: "expert load",
            index,
            value: value.to_f64_lossy(),
        });
    }
    let total: T = loads.iter().copied().sum();
    if !(total > T::zero()) {
        return Err(Error::InvalidParameter("all expert loads are zero".into()));
    }
    Ok(total / T::lit(loads.len() as f64))
}

/// `(max_e load_e − mean) / mean`. Zero iff perfectly balanced, `E − 1` when
/// a single expert takes every token.
pub fn max_vio<T: Scalar>(loads: &[T]) -> Result<T> {
    let mean = mean_load(loads)?;
    let max = loads.iter().copied().fold(T::neg_infinity(), T::max);
    Ok((max - mean) / mean)
}

/// Unadjusted pairwise Gini coefficient `Σ_i Σ_j |x_i − x_j| / (2 E² μ)`.
pub fn gini<T: Scalar>(loads: &[T]) -> Result<T> {
    let mean = mean_load(loads)?;
    let mut total = T::zero();
    for &a in loads {
        for &b in loads {
            total = total + (a - b).abs();
        }
    }
    let e = T::lit(loads.len() as f64);
    Ok(total / (T::lit(2.0) * e * e * mean))
}

/// Smallest and largest load as fractions of the total.
pub fn load_extremes<T: Scalar>(loads: &[T]) -> Result<(T, T)> {
    let mean = mean_load(loads)?;
    let total = mean * T::lit(loads.len() as f64);
    let min = loads.iter().copied().fold(T::infinity(), T::min);
    let max = loads.iter().copied().fold(T::neg_infinity(), T::max);
    Ok((min / total, max / total))
}

/// Per-domain routed-token ratio `R[d][e]`: the fraction of domain-`d`
/// selections that went to expert `e`. With `k` selections per token each
/// counts once and the row is normalised by `k·|T_d|`. Domains without
/// tokens yield `None`.
pub fn routed_token_ratio(
    selections: &[Vec<usize>],
    domain_ids: &[usize],
    experts: usize,
    domains: usize,
) -> Result<Vec<Option<Vec<f64>>>> {
    if selections.len() != domain_ids.len() {
        return Err(Error::Length {
            expected: selections.len(),
            got: domain_ids.len(),
        });
    }
    let mut counts = vec![vec![0.0; experts]; domains];
    let mut totals = vec![0usize; domains];
    for (sel, &d) in selections.iter().zip(domain_ids) {
        if sel.is_empty() {
            return Err(Error::InvalidParameter("token without any selected expert".into()));
        }
        if d >= domains {
            return Err(Error::InvalidParameter(format!("domain id {d} out of range")));
        }
        for &e in sel {
            if e >= experts {
                return Err(Error::InvalidParameter(format!("expert id {e} out of range")));
            }
            counts[d][e] += 1.0;
        }
        totals[d] += sel.len();
    }
    Ok(counts
        .into_iter()
        .zip(totals)
        .map(|(row, n)| (n > 0).then(|| row.into_iter().map(|c| c / n as f64).collect()))
        .collect())
}

/// Fraction of positions where `predictions` equals `labels`.
pub fn accuracy<L: PartialEq>(predictions: &[L], labels: &[L]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Length {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::InvalidParameter("accuracy of an empty set".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Sliding window of per-step load vectors; MaxVio and Gini are taken over
/// the window's accumulated loads rather than per batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadWindow {
    capacity: usize,
    entries: VecDeque<Vec<f64>>,
}

impl LoadWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
        }
    }

    pub fn push(&mut self, loads: Vec<f64>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(loads);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entrywise sum of the loads currently in the window.
    pub fn totals(&self) -> Option<Vec<f64>> {
        let first = self.entries.front()?;
        let mut out = vec![0.0; first.len()];
        for row in &self.entries {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct evaluation of the pairwise definition for a small vector.
    fn gini_oracle(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let mut s = 0.0;
        for i in 0..x.len() {
            for j in 0..x.len() {
                s += (x[i] - x[j]).abs();
            }
        }
        s / (2.0 * n * n * mu)
    }

    #[test]
    fn max_vio_examples() {
        assert_eq!(max_vio(&[3.0, 1.0]).unwrap(), 0.5);
        assert_eq!(max_vio(&[2.0; 5]).unwrap(), 0.0);
        assert_eq!(max_vio(&[12.0, 0.0, 0.0, 0.0]).unwrap(), 3.0);
        assert!(max_vio(&[0.0, 0.0]).is_err());
        assert!(max_vio::<f64>(&[]).is_err());
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(gini(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.75);
        let g = gini(&[2.0, 1.0, 1.0]).unwrap();
        assert!((g - gini_oracle(&[2.0, 1.0, 1.0])).abs() < 1e-15);
        assert!((g - 1.0 / 6.0).abs() < 1e-15);
        assert!(gini(&[0.0f32; 3]).is_err());
        assert_eq!(gini(&[1.0f32, 0.0, 0.0, 0.0]).unwrap(), 0.75f32);
    }

    #[test]
    fn extremes() {
        assert_eq!(load_extremes(&[1.0, 3.0]).unwrap(), (0.25, 0.75));
    }

    #[test]
    fn routed_token_ratio_examples() {
        let sel: Vec<Vec<usize>> = (0..16).map(|i| vec![i % 8]).collect();
        let dom = vec![0; 16];
        let r = routed_token_ratio(&sel, &dom, 8, 2).unwrap();
        assert!(r[0].as_ref().unwrap().iter().all(|&x| x == 0.125));
        assert!(r[1].is_none());

        let sel = vec![vec![3]; 5];
        let r = routed_token_ratio(&sel, &[0; 5], 4, 1).unwrap();
        assert_eq!(r[0].as_ref().unwrap(), &vec![0.0, 0.0, 0.0, 1.0]);

        let sel = vec![vec![0, 1], vec![1, 2], vec![2, 3]];
        let r = routed_token_ratio(&sel, &[1, 1, 0], 4, 2).unwrap();
        assert_eq!(r[1].as_ref().unwrap(), &vec![0.25, 0.5, 0.25, 0.0]);
        assert!(routed_token_ratio(&[vec![]], &[0], 2, 1).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy::<usize>(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn window_keeps_last_entries() {
        let mut w = LoadWindow::new(2);
        w.push(vec![1.0, 0.0]);
        w.push(vec![0.0, 1.0]);
        w.push(vec![0.0, 3.0]);
        assert_eq!(w.totals().unwrap(), vec![0.0, 4.0]);
    }

    fn loads() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..100.0, 2..10).prop_filter("some load", |v| v.iter().sum::<f64>() > 1e-3)
    }

    proptest! {
        #[test]
        fn scale_and_permutation_invariance(x in loads(), c in 0.01f64..100.0, rot in 0usize..10) {
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            let mut perm = x.clone();
            let len = perm.len();
            perm.rotate_left(rot % len);
            perm.reverse();
            let (mv, g) = (max_vio(&x).unwrap(), gini(&x).unwrap());
            prop_assert!((max_vio(&scaled).unwrap() - mv).abs() < 1e-12 * mv.max(1.0));
            prop_assert!((gini(&scaled).unwrap() - g).abs() < 1e-12);
            prop_assert!((max_vio(&perm).unwrap() - mv).abs() < 1e-12 * mv.max(1.0));
            prop_assert!((gini(&perm).unwrap() - g).abs() < 1e-12);
            prop_assert!((g - gini_oracle(&x)).abs() < 1e-12);
            prop_assert!((0.0..1.0).contains(&g));
        }

        #[test]
        fn gini_positive_off_uniform(x in loads()) {
            let uniform = x.iter().all(|&v| v == x[0]);
            prop_assert_eq!(gini(&x).unwrap() > 0.0, !uniform);
        }
    }
}
