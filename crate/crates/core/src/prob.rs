use std::ops::Deref;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Nonnegative length-`E` vector, optionally certified to lie on the
/// probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector<T> {
    entries: Vec<T>,
    simplex: bool,
}

fn simplex_tolerance<T: Scalar>(len: usize) -> T {
    T::lit(1e-9).max(T::epsilon() * T::lit(16.0 * len.max(1) as f64))
}

impl<T: Scalar> ProbVector<T> {
    /// Entries must be nonnegative and sum to one within `1e-9` (or a few
    /// ulps for narrower scalar types).
    pub fn simplex(entries: Vec<T>) -> Result<Self> {
        let mut v = Self::nonnegative(entries)?;
        let total: T = v.entries.iter().copied().sum();
        if (total - T::one()).abs() > simplex_tolerance::<T>(v.entries.len()) {
            return Err(Error::InvalidParameter(format!(
                "simplex vector sums to {total}, expected 1"
            )));
        }
        v.simplex = true;
        Ok(v)
    }

    /// Any finite nonnegative vector, e.g. an EMA accumulator during warm-up.
    pub fn nonnegative(entries: Vec<T>) -> Result<Self> {
        if let Some((index, &value)) = entries
            .iter()
            .enumerate()
            .find(|(_, &x)| !(x >= T::zero()) || !x.is_finite())
        {
            return Err(Error::Domain {
                what: "probability vector",
                index,
                value: value.to_f64_lossy(),
            });
        }
        Ok(Self {
            entries,
            simplex: false,
        })
    }

    pub fn uniform(len: usize) -> Self {
        Self {
            entries: vec![T::one() / T::lit(len as f64); len],
            simplex: true,
        }
    }

    pub fn is_simplex(&self) -> bool {
        self.simplex
    }

    pub fn as_slice(&self) -> &[T] {
        &self.entries
    }

    pub fn into_vec(self) -> Vec<T> {
        self.entries
    }
}

impl<T> Deref for ProbVector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_validation() {
        assert!(ProbVector::simplex(vec![0.3, 0.7]).unwrap().is_simplex());
        assert!(ProbVector::simplex(vec![0.3, 0.6]).is_err());
        assert!(ProbVector::<f64>::simplex(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::simplex(vec![0.1f32, 0.2, 0.7]).is_ok());
        let warm = ProbVector::nonnegative(vec![0.0, 0.0]).unwrap();
        assert!(!warm.is_simplex());
        assert!(ProbVector::nonnegative(vec![f64::NAN]).is_err());
        assert_eq!(ProbVector::<f64>::uniform(4).as_slice(), &[0.25; 4]);
    }
}
