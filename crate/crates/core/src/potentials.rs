//! Catalog of strictly convex, symmetric balancing potentials.
//!
//! Every family provides its value `φ(m)`, the link map `q = ∇φ(m)` (the
//! per-expert price), the convex conjugate `φ*(q)` and the inverse link
//! `∇φ*(q)`. The Tsallis conjugate is evaluated numerically by monotone
//! bisection; the Rényi conjugate reduces to a scalar normalisation equation.
//!
//! Potentials serialize to a compact token grammar, e.g. `neg_shannon`,
//! `lp:p=3`, `lp:p=inf`, `soft_l1:delta=0.1`, `tsallis:alpha=1.1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::{xlogx, Scalar};

/// Floor applied to EMA entries before evaluating an entropic link during
/// training.
pub const ENTROPIC_FLOOR: f64 = 1e-12;

const BISECTION_LO: f64 = 1e-12;
const BISECTION_HI: f64 = 1e3;
const BISECTION_ITERS: usize = 200;

/// Family tag, without parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Euclidean,
    LpNorm,
    SoftL1,
    NegShannon,
    NegTsallis,
    NegRenyi,
    PseudoHuber,
    LogCosh,
    Softplus,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Euclidean,
        Family::LpNorm,
        Family::SoftL1,
        Family::NegShannon,
        Family::NegTsallis,
        Family::NegRenyi,
        Family::PseudoHuber,
        Family::LogCosh,
        Family::Softplus,
    ];

    /// Families whose domain is the nonnegative orthant and whose link
    /// diverges (or is undefined) at zero.
    pub fn is_entropic(self) -> bool {
        matches!(self, Family::NegShannon | Family::NegTsallis | Family::NegRenyi)
    }

    /// Families of the form `Σ ψ(m_e)`.
    pub fn is_separable(self) -> bool {
        !matches!(self, Family::NegRenyi)
    }

    pub fn token(self) -> &'static str {
        match self {
            Family::Euclidean => "euclidean",
            Family::LpNorm => "lp",
            Family::SoftL1 => "soft_l1",
            Family::NegShannon => "neg_shannon",
            Family::NegTsallis => "tsallis",
            Family::NegRenyi => "renyi",
            Family::PseudoHuber => "pseudo_huber",
            Family::LogCosh => "log_cosh",
            Family::Softplus => "softplus",
        }
    }
}

/// Exponent of the `ℓp` potential.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LpExponent<T> {
    Finite(T),
    /// Max-norm; the link is the subgradient selecting the first maximal
    /// coordinate.
    Infinity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind<T> {
    Euclidean,
    Lp(LpExponent<T>),
    SoftL1 { delta: T },
    NegShannon,
    NegTsallis { alpha: T },
    NegRenyi { alpha: T },
    PseudoHuber { delta: T },
    LogCosh { beta: T },
    Softplus,
}

/// A validated potential family together with its parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PotentialSpec<T> {
    kind: Kind<T>,
}

fn positive<T: Scalar>(name: &str, v: T) -> Result<T> {
    if v > T::zero() && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn domain_error<T: Scalar>(what: &'static str, index: usize, value: T) -> Error {
    Error::Domain {
        what,
        index,
        value: value.to_f64_lossy(),
    }
}

impl<T: Scalar> PotentialSpec<T> {
    pub fn euclidean() -> Self {
        Self { kind: Kind::Euclidean }
    }

    /// `(1/p) Σ |m_e|^p`, `p > 1`.
    pub fn lp(p: T) -> Result<Self> {
        if !(p > T::one()) || !p.is_finite() {
            return Err(Error::InvalidParameter(format!("lp exponent must satisfy p > 1, got {p}")));
        }
        Ok(Self {
            kind: Kind::Lp(LpExponent::Finite(p)),
        })
    }

    pub fn lp_infinity() -> Self {
        Self {
            kind: Kind::Lp(LpExponent::Infinity),
        }
    }

    pub fn soft_l1(delta: T) -> Result<Self> {
        Ok(Self {
            kind: Kind::SoftL1 {
                delta: positive("soft_l1 delta", delta)?,
            },
        })
    }

    pub fn neg_shannon() -> Self {
        Self { kind: Kind::NegShannon }
    }

    /// `α > 0`, `α ≠ 1`.
    pub fn tsallis(alpha: T) -> Result<Self> {
        let alpha = positive("tsallis alpha", alpha)?;
        if alpha == T::one() {
            return Err(Error::InvalidParameter("tsallis alpha must differ from 1".into()));
        }
        Ok(Self {
            kind: Kind::NegTsallis { alpha },
        })
    }

    /// `α ∈ (0, 1)`.
    pub fn renyi(alpha: T) -> Result<Self> {
        if !(alpha > T::zero() && alpha < T::one()) {
            return Err(Error::InvalidParameter(format!("renyi alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(Self {
            kind: Kind::NegRenyi { alpha },
        })
    }

    pub fn pseudo_huber(delta: T) -> Result<Self> {
        Ok(Self {
            kind: Kind::PseudoHuber {
                delta: positive("pseudo_huber delta", delta)?,
            },
        })
    }

    pub fn log_cosh(beta: T) -> Result<Self> {
        Ok(Self {
            kind: Kind::LogCosh {
                beta: positive("log_cosh beta", beta)?,
            },
        })
    }

    pub fn softplus() -> Self {
        Self { kind: Kind::Softplus }
    }

    /// One representative of each family, with the parameters used by the
    /// ablation defaults.
    pub fn catalog() -> Vec<Self> {
        vec![
            Self::euclidean(),
            Self::lp(T::lit(3.0)).expect("valid"),
            Self::soft_l1(T::lit(0.1)).expect("valid"),
            Self::neg_shannon(),
            Self::tsallis(T::lit(1.1)).expect("valid"),
            Self::renyi(T::lit(0.95)).expect("valid"),
            Self::pseudo_huber(T::one()).expect("valid"),
            Self::log_cosh(T::one()).expect("valid"),
            Self::softplus(),
        ]
    }

    pub fn family(&self) -> Family {
        match self.kind {
            Kind::Euclidean => Family::Euclidean,
            Kind::Lp(_) => Family::LpNorm,
            Kind::SoftL1 { .. } => Family::SoftL1,
            Kind::NegShannon => Family::NegShannon,
            Kind::NegTsallis { .. } => Family::NegTsallis,
            Kind::NegRenyi { .. } => Family::NegRenyi,
            Kind::PseudoHuber { .. } => Family::PseudoHuber,
            Kind::LogCosh { .. } => Family::LogCosh,
            Kind::Softplus => Family::Softplus,
        }
    }

    pub fn lp_exponent(&self) -> Option<LpExponent<T>> {
        match self.kind {
            Kind::Lp(p) => Some(p),
            _ => None,
        }
    }

    /// True when the link map is a bijection onto the conjugate domain
    /// (everything except the max-norm).
    pub fn is_legendre(&self) -> bool {
        !matches!(self.kind, Kind::Lp(LpExponent::Infinity))
    }

    /// True when the conjugate is computed by a numeric solver.
    pub fn has_numeric_conjugate(&self) -> bool {
        matches!(self.kind, Kind::NegTsallis { .. } | Kind::NegRenyi { .. })
    }

    fn check_nonnegative(&self, m: &[T]) -> Result<()> {
        if self.family().is_entropic() {
            if let Some((i, &v)) = m.iter().enumerate().find(|(_, &v)| !(v >= T::zero())) {
                return Err(domain_error(self.family().token(), i, v));
            }
        }
        Ok(())
    }

    fn check_positive(&self, m: &[T]) -> Result<()> {
        if self.family().is_entropic() {
            if let Some((i, &v)) = m.iter().enumerate().find(|(_, &v)| !(v > T::zero())) {
                return Err(domain_error(self.family().token(), i, v));
            }
        }
        Ok(())
    }

    /// `φ(m)`.
    pub fn value(&self, m: &[T]) -> Result<T> {
        self.check_nonnegative(m)?;
        let sum = |f: &dyn Fn(T) -> T| m.iter().map(|&x| f(x)).sum::<T>();
        let half = T::lit(0.5);
        Ok(match self.kind {
            Kind::Euclidean => half * sum(&|x| x * x),
            Kind::Lp(LpExponent::Finite(p)) => sum(&|x| x.abs().powf(p)) / p,
            Kind::Lp(LpExponent::Infinity) => m.iter().fold(T::zero(), |acc, &x| acc.max(x.abs())),
            Kind::SoftL1 { delta } => sum(&|x| x.abs() - delta * (x.abs() / delta).ln_1p()),
            Kind::NegShannon => sum(&|x| xlogx(x)),
            Kind::NegTsallis { alpha } => sum(&|x| (x.powf(alpha) - x) / (alpha - T::one())),
            Kind::NegRenyi { alpha } => {
                let s = sum(&|x| x.powf(alpha));
                if !(s > T::zero()) {
                    return Err(domain_error("renyi", 0, s));
                }
                s.ln() / (alpha - T::one())
            }
            Kind::PseudoHuber { delta } => sum(&|x| (x * x + delta * delta).sqrt() - delta),
            Kind::LogCosh { beta } => sum(&|x| {
                let z = (beta * x).abs();
                (z + (-(z + z)).exp().ln_1p() - T::lit(2.0).ln()) / beta
            }),
            Kind::Softplus => sum(&|x| x.max(T::zero()) + (-x.abs()).exp().ln_1p()),
        })
    }

    /// Link map `q = ∇φ(m)`.
    pub fn link(&self, m: &[T]) -> Result<Vec<T>> {
        self.check_positive(m)?;
        let map = |f: &dyn Fn(T) -> T| m.iter().map(|&x| f(x)).collect::<Vec<T>>();
        Ok(match self.kind {
            Kind::Euclidean => m.to_vec(),
            Kind::Lp(LpExponent::Finite(p)) => map(&|x| sign(x) * x.abs().powf(p - T::one())),
            Kind::Lp(LpExponent::Infinity) => {
                let mut q = vec![T::zero(); m.len()];
                let mut best: Option<(usize, T)> = None;
                for (i, &x) in m.iter().enumerate() {
                    if best.is_none_or(|(_, b)| x.abs() > b) {
                        best = Some((i, x.abs()));
                    }
                }
                if let Some((i, _)) = best {
                    q[i] = sign(m[i]);
                }
                q
            }
            Kind::SoftL1 { delta } => map(&|x| x / (x.abs() + delta)),
            Kind::NegShannon => map(&|x| x.ln() + T::one()),
            Kind::NegTsallis { alpha } => map(&|x| tsallis_derivative(alpha, x)),
            Kind::NegRenyi { alpha } => {
                let s: T = m.iter().map(|&x| x.powf(alpha)).sum();
                let denom = (alpha - T::one()) * s;
                map(&|x| alpha * x.powf(alpha - T::one()) / denom)
            }
            Kind::PseudoHuber { delta } => map(&|x| x / (x * x + delta * delta).sqrt()),
            Kind::LogCosh { beta } => map(&|x| (beta * x).tanh()),
            Kind::Softplus => map(&|x| T::one() / ((-x).exp() + T::one())),
        })
    }

    /// Per-expert weight multiplying `p_e` in the auxiliary loss. Identical to
    /// [`PotentialSpec::link`]; kept separate so the loss column can be pinned
    /// on its own.
    pub fn aux_weight(&self, m: &[T]) -> Result<Vec<T>> {
        match self.kind {
            Kind::Euclidean => Ok(m.to_vec()),
            Kind::SoftL1 { delta } => Ok(m.iter().map(|&x| x * (x.abs() + delta).recip()).collect()),
            Kind::PseudoHuber { delta } => Ok(m
                .iter()
                .map(|&x| x * (x * x + delta * delta).powf(T::lit(-0.5)))
                .collect()),
            Kind::NegRenyi { alpha } => {
                self.check_positive(m)?;
                let s: T = m.iter().map(|&x| x.powf(alpha)).sum();
                Ok(m.iter()
                    .map(|&x| alpha * x.powf(alpha - T::one()) * ((alpha - T::one()) * s).recip())
                    .collect())
            }
            _ => self.link(m),
        }
    }

    /// Training-path weight: entropic families see `max(m_e, 1e-12)` so the
    /// all-zero initial EMA state is usable.
    pub fn aux_weight_clamped(&self, m: &[T]) -> Result<Vec<T>> {
        if self.family().is_entropic() {
            let floor = T::lit(ENTROPIC_FLOOR);
            let clamped: Vec<T> = m.iter().map(|&x| x.max(floor)).collect();
            self.aux_weight(&clamped)
        } else {
            self.aux_weight(m)
        }
    }

    /// `φ*(q) = sup_m ⟨m, q⟩ − φ(m)`; `+∞` outside the effective domain.
    pub fn conjugate_value(&self, q: &[T]) -> T {
        let inf = T::infinity();
        let one = T::one();
        let sum_or_inf = |f: &dyn Fn(T) -> Option<T>| {
            let mut acc = T::zero();
            for &x in q {
                match f(x) {
                    Some(v) => acc = acc + v,
                    None => return inf,
                }
            }
            acc
        };
        match self.kind {
            Kind::Euclidean => T::lit(0.5) * q.iter().map(|&x| x * x).sum::<T>(),
            Kind::Lp(LpExponent::Finite(p)) => {
                let conj = p / (p - one);
                q.iter().map(|&x| x.abs().powf(conj)).sum::<T>() / conj
            }
            Kind::Lp(LpExponent::Infinity) => {
                if q.iter().map(|x| x.abs()).sum::<T>() <= one {
                    T::zero()
                } else {
                    inf
                }
            }
            Kind::SoftL1 { delta } => sum_or_inf(&|x| {
                (x.abs() < one).then(|| -delta * (x.abs() + (-x.abs()).ln_1p()))
            }),
            Kind::NegShannon => q.iter().map(|&x| (x - one).exp()).sum(),
            Kind::NegTsallis { alpha } => sum_or_inf(&|x| {
                tsallis_argmax(alpha, x).map(|m| m * x - (m.powf(alpha) - m) / (alpha - one))
            }),
            Kind::NegRenyi { .. } => match self.inverse_link(q) {
                Ok(m) => {
                    let inner: T = m.iter().zip(q).map(|(&a, &b)| a * b).sum();
                    match self.value(&m) {
                        Ok(v) => inner - v,
                        Err(_) => inf,
                    }
                }
                Err(_) => inf,
            },
            Kind::PseudoHuber { delta } => {
                sum_or_inf(&|x| (x.abs() <= one).then(|| delta - delta * (one - x * x).sqrt()))
            }
            Kind::LogCosh { beta } => sum_or_inf(&|x| {
                (x.abs() <= one).then(|| (xlogx(one + x) + xlogx(one - x)) / (beta + beta))
            }),
            Kind::Softplus => {
                sum_or_inf(&|x| (x >= T::zero() && x <= one).then(|| xlogx(x) + xlogx(one - x)))
            }
        }
    }

    /// `∇φ*(q)`, the inverse of [`PotentialSpec::link`].
    pub fn inverse_link(&self, q: &[T]) -> Result<Vec<T>> {
        let one = T::one();
        let token = self.family().token();
        let map = |f: &dyn Fn(T) -> Option<T>| -> Result<Vec<T>> {
            q.iter()
                .enumerate()
                .map(|(i, &x)| f(x).ok_or_else(|| domain_error(token, i, x)))
                .collect()
        };
        match self.kind {
            Kind::Euclidean => Ok(q.to_vec()),
            Kind::Lp(LpExponent::Finite(p)) => map(&|x| Some(sign(x) * x.abs().powf(one / (p - one)))),
            Kind::Lp(LpExponent::Infinity) => Err(Error::InvalidParameter(
                "the max-norm link is not invertible".into(),
            )),
            Kind::SoftL1 { delta } => map(&|x| (x.abs() < one).then(|| delta * x / (one - x.abs()))),
            Kind::NegShannon => map(&|x| Some((x - one).exp())),
            Kind::NegTsallis { alpha } => map(&|x| tsallis_argmax(alpha, x)),
            Kind::NegRenyi { alpha } => renyi_inverse_link(alpha, q),
            Kind::PseudoHuber { delta } => map(&|x| (x.abs() < one).then(|| delta * x / (one - x * x).sqrt())),
            Kind::LogCosh { beta } => map(&|x| (x.abs() < one).then(|| x.atanh() / beta)),
            Kind::Softplus => map(&|x| (x > T::zero() && x < one).then(|| (x / (one - x)).ln())),
        }
    }
}

fn tsallis_derivative<T: Scalar>(alpha: T, x: T) -> T {
    (alpha * x.powf(alpha - T::one()) - T::one()) / (alpha - T::one())
}

/// Maximiser of `m q − ψ(m)` over `m ≥ 0` for the Tsallis summand, found by
/// bisection on the increasing derivative. `None` when the supremum is
/// infinite.
fn tsallis_argmax<T: Scalar>(alpha: T, q: T) -> Option<T> {
    let one = T::one();
    if alpha < one && q >= one / (one - alpha) {
        return None;
    }
    let mut lo = T::lit(BISECTION_LO);
    let mut hi = T::lit(BISECTION_HI);
    if q <= tsallis_derivative(alpha, lo) {
        // supremum sits at the boundary (exactly 0 when α > 1)
        return Some(if alpha > one { T::zero() } else { lo });
    }
    let mut grow = 0;
    while tsallis_derivative(alpha, hi) < q {
        hi = hi + hi;
        grow += 1;
        if grow > 200 || !hi.is_finite() {
            return None;
        }
    }
    for _ in 0..BISECTION_ITERS {
        let mid = (lo + hi) * T::lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if tsallis_derivative(alpha, mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some((lo + hi) * T::lit(0.5))
}

/// Inverse of the Rényi link. `∇φ` is homogeneous of degree −1, so the
/// preimage is fixed up to the normaliser `S = Σ m^α`, which solves a scalar
/// equation with an explicit root.
fn renyi_inverse_link<T: Scalar>(alpha: T, q: &[T]) -> Result<Vec<T>> {
    let one = T::one();
    if let Some((i, &x)) = q.iter().enumerate().find(|(_, &x)| !(x < T::zero())) {
        return Err(domain_error("renyi", i, x));
    }
    let r = alpha / (alpha - one);
    let k: T = q.iter().map(|&x| (-x).powf(r)).sum();
    let ratio = (one - alpha) / alpha;
    let log_s = (k.ln() + r * ratio.ln()) / (one - r);
    let c = ratio * log_s.exp();
    Ok(q.iter().map(|&x| (c * -x).powf(one / (alpha - one))).collect())
}

impl<T: Scalar> fmt::Display for PotentialSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let token = self.family().token();
        match self.kind {
            Kind::Lp(LpExponent::Finite(p)) => write!(f, "{token}:p={p}"),
            Kind::Lp(LpExponent::Infinity) => write!(f, "{token}:p=inf"),
            Kind::SoftL1 { delta } | Kind::PseudoHuber { delta } => write!(f, "{token}:delta={delta}"),
            Kind::NegTsallis { alpha } | Kind::NegRenyi { alpha } => write!(f, "{token}:alpha={alpha}"),
            Kind::LogCosh { beta } => write!(f, "{token}:beta={beta}"),
            Kind::Euclidean | Kind::NegShannon | Kind::Softplus => f.write_str(token),
        }
    }
}

impl<T: Scalar> FromStr for PotentialSpec<T> {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = |msg: String| Error::Config(format!("potential `{s}`: {msg}"));
        let param = |key: &str| -> Result<String> {
            let args = args.ok_or_else(|| bad(format!("missing parameter `{key}`")))?;
            let (k, v) = args
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `{key}=<value>`")))?;
            if k.trim() != key {
                return Err(bad(format!("unknown parameter `{}`", k.trim())));
            }
            Ok(v.trim().to_string())
        };
        let number = |key: &str| -> Result<T> {
            let raw = param(key)?;
            let v: f64 = raw.parse().map_err(|_| bad(format!("`{raw}` is not a number")))?;
            Ok(T::lit(v))
        };
        let no_args = |spec: Self| -> Result<Self> {
            match args {
                None => Ok(spec),
                Some(a) => Err(bad(format!("unexpected parameters `{a}`"))),
            }
        };
        let spec = match name {
            "euclidean" => no_args(Self::euclidean())?,
            "neg_shannon" => no_args(Self::neg_shannon())?,
            "softplus" => no_args(Self::softplus())?,
            "lp" => {
                let raw = param("p")?;
                if raw == "inf" {
                    Self::lp_infinity()
                } else {
                    Self::lp(number("p")?)?
                }
            }
            "soft_l1" => Self::soft_l1(number("delta")?)?,
            "tsallis" => Self::tsallis(number("alpha")?)?,
            "renyi" => Self::renyi(number("alpha")?)?,
            "pseudo_huber" => Self::pseudo_huber(number("delta")?)?,
            "log_cosh" => Self::log_cosh(number("beta")?)?,
            other => return Err(bad(format!("unknown family `{other}`"))),
        };
        Ok(spec)
    }
}

impl<T: Scalar> Serialize for PotentialSpec<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for PotentialSpec<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}
