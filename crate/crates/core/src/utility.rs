//! Session utilities and Werner/fidelity conversions.
//!
//! All three utilities have the form `ln R + (something of w)`, so the rate
//! derivative is always `1/R` and the rate update inverts to `1/price`.
//! Utilities use the natural logarithm; binary entropy uses base 2.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityKind {
    /// Log secret-key rate of entanglement-based BB84 on Werner states.
    Skr,
    /// Log of rate times negativity-based factor `3W - 1`.
    Neg,
    /// Concave separable test utility `ln R + sum_l a_l ln w_l`.
    LogProd,
}

impl UtilityKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Skr => "skr",
            Self::Neg => "neg",
            Self::LogProd => "logprod",
        }
    }
}

impl fmt::Display for UtilityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for UtilityKind {
    type Err = UtilityError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "skr" => Ok(Self::Skr),
            "neg" => Ok(Self::Neg),
            "logprod" => Ok(Self::LogProd),
            other => Err(UtilityError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UtilityError {
    #[error("{what} = {value} is outside its valid range")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("price sum must be positive, got {0}")]
    NonPositivePrice(f64),
    #[error("fidelity below {kind} utility domain (W = {werner})")]
    BelowDomain { kind: UtilityKind, werner: f64 },
    #[error("empty Werner vector")]
    EmptyVector,
    #[error("link Werner parameter is zero")]
    ZeroWerner,
    #[error("F_min = {0} must exceed 1/4")]
    FidelityThreshold(f64),
    #[error("unknown utility kind {0:?} (expected skr | neg | logprod)")]
    UnknownKind(String),
    #[error("logprod utility needs one positive weight per path link")]
    BadWeights,
}

pub type Result<T, E = UtilityError> = std::result::Result<T, E>;

fn check_unit<T: Real>(what: &'static str, x: T) -> Result<()> {
    if x >= T::zero() && x <= T::one() {
        Ok(())
    } else {
        Err(UtilityError::OutOfRange { what, value: x.to_f64_lossy() })
    }
}

/// `-p log2 p - (1-p) log2 (1-p)` with `0 log 0 = 0`.
pub fn binary_entropy<T: Real>(p: T) -> Result<T> {
    check_unit("p", p)?;
    Ok(binary_entropy_unchecked(p))
}

fn binary_entropy_unchecked<T: Real>(p: T) -> T {
    let term = |x: T| if x > T::zero() { -x * x.log2() } else { T::zero() };
    term(p) + term(T::one() - p)
}

/// End-to-end Werner parameter: product of per-link values.
pub fn e2e_werner<T: Real>(wv: &[T]) -> Result<T> {
    if wv.is_empty() {
        return Err(UtilityError::EmptyVector);
    }
    for &w in wv {
        check_unit("w", w)?;
    }
    Ok(wv.iter().fold(T::one(), |acc, &w| acc * w))
}

/// `F = (3W + 1) / 4`.
pub fn fidelity_from_werner<T: Real>(werner: T) -> Result<T> {
    check_unit("W", werner)?;
    Ok((T::lit(3.0) * werner + T::one()) / T::lit(4.0))
}

/// Inverse of [`fidelity_from_werner`]: `W = (4F - 1) / 3`.
pub fn werner_from_fidelity<T: Real>(fidelity: T) -> T {
    (T::lit(4.0) * fidelity - T::one()) / T::lit(3.0)
}

/// `K_r = ln((4 F_min - 1) / 3)`, the lower bound on `sum_l ln w_l`.
pub fn k_threshold<T: Real>(f_min: T) -> Result<T> {
    if !(f_min > T::lit(0.25)) || f_min > T::one() {
        return Err(UtilityError::FidelityThreshold(f_min.to_f64_lossy()));
    }
    Ok(werner_from_fidelity(f_min).ln())
}

/// Per-pair secret-key fraction `1 - 2 h((1 - W)/2)`; negative below the
/// SKR domain.
pub fn skr_factor<T: Real>(werner: T) -> T {
    let p = (T::one() - werner) / T::lit(2.0);
    T::one() - T::lit(2.0) * binary_entropy_unchecked(p.max(T::zero()).min(T::one()))
}

/// Per-pair negativity factor `3W - 1`.
pub fn neg_factor<T: Real>(werner: T) -> T {
    T::lit(3.0) * werner - T::one()
}

/// Smallest end-to-end Werner parameter with a positive secret-key fraction,
/// found by bisection on [`skr_factor`].
pub fn skr_min_werner() -> f64 {
    static ROOT: OnceLock<f64> = OnceLock::new();
    *ROOT.get_or_init(|| {
        let (mut lo, mut hi) = (0.5f64, 1.0f64);
        debug_assert!(skr_factor(lo) < 0.0 && skr_factor(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if skr_factor(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        hi
    })
}

/// Lower end (exclusive) of the end-to-end Werner domain of `kind`. LogProd
/// only requires every link value to be positive.
pub fn domain_min_werner(kind: UtilityKind) -> f64 {
    match kind {
        UtilityKind::Skr => skr_min_werner(),
        UtilityKind::Neg => 1.0 / 3.0,
        UtilityKind::LogProd => 0.0,
    }
}

/// Absolute per-pair value with the `max{0, .}` clamp (bits per pair for
/// SKR, negativity factor for NEG).
pub fn absolute_factor<T: Real>(kind: UtilityKind, werner: T) -> T {
    match kind {
        UtilityKind::Skr => skr_factor(werner).max(T::zero()),
        UtilityKind::Neg => neg_factor(werner).max(T::zero()),
        // The test utility has no physical per-pair value; report the
        // end-to-end Werner parameter itself.
        UtilityKind::LogProd => werner.max(T::zero()),
    }
}

fn factor<T: Real>(kind: UtilityKind, werner: T) -> Result<T> {
    let g = match kind {
        UtilityKind::Skr => skr_factor(werner),
        UtilityKind::Neg => neg_factor(werner),
        UtilityKind::LogProd => werner,
    };
    if g > T::zero() {
        Ok(g)
    } else {
        Err(UtilityError::BelowDomain { kind, werner: werner.to_f64_lossy() })
    }
}

/// `f_r(R) = dU/dR = 1/R` for every utility kind.
pub fn rate_derivative<T: Real>(rate: T) -> Result<T> {
    if rate > T::zero() {
        Ok(rate.recip())
    } else {
        Err(UtilityError::NonPositiveRate(rate.to_f64_lossy()))
    }
}

/// Inverse of [`rate_derivative`]: the rate whose marginal utility equals the
/// path price `s`.
pub fn rate_inverse<T: Real>(price: T) -> Result<T> {
    if price > T::zero() {
        Ok(price.recip())
    } else {
        Err(UtilityError::NonPositivePrice(price.to_f64_lossy()))
    }
}

/// `U'_W = dU/dW` for the end-to-end utilities (SKR, NEG).
pub fn werner_derivative<T: Real>(kind: UtilityKind, werner: T) -> Result<T> {
    let g = factor(kind, werner)?;
    match kind {
        UtilityKind::Skr => {
            if werner >= T::one() {
                return Err(UtilityError::OutOfRange { what: "W", value: werner.to_f64_lossy() });
            }
            let g_prime = ((T::one() + werner) / (T::one() - werner)).log2();
            Ok(g_prime / g)
        }
        UtilityKind::Neg => Ok(T::lit(3.0) / g),
        UtilityKind::LogProd => Ok(werner.recip()),
    }
}

/// `U''_W = d^2U/dW^2` for the end-to-end utilities.
pub fn werner_second_derivative<T: Real>(kind: UtilityKind, werner: T) -> Result<T> {
    let g = factor(kind, werner)?;
    match kind {
        UtilityKind::Skr => {
            if werner >= T::one() {
                return Err(UtilityError::OutOfRange { what: "W", value: werner.to_f64_lossy() });
            }
            let g1 = ((T::one() + werner) / (T::one() - werner)).log2();
            let g2 = T::lit(2.0) / (T::LN_2() * (T::one() - werner * werner));
            Ok(g2 / g - (g1 / g).powi(2))
        }
        UtilityKind::Neg => Ok(-T::lit(9.0) / (g * g)),
        UtilityKind::LogProd => Ok(-(werner * werner).recip()),
    }
}

/// `W U'_W`, the quantity carried in the q-datagram header.
pub fn wu_prime<T: Real>(kind: UtilityKind, werner: T) -> Result<T> {
    Ok(werner * werner_derivative(kind, werner)?)
}

/// Per-link marginal utility `f_l = W U'_W / w_l`.
pub fn f_l<T: Real>(kind: UtilityKind, werner: T, w_link: T) -> Result<T> {
    if w_link <= T::zero() {
        return Err(UtilityError::ZeroWerner);
    }
    Ok(wu_prime(kind, werner)? / w_link)
}

/// A session utility bound to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Utility<T> {
    Skr,
    Neg,
    /// One weight `a_l > 0` per path link, in path order.
    LogProd(Vec<T>),
}

impl<T: Real> Utility<T> {
    pub fn from_kind(kind: UtilityKind, path_len: usize, weights: Option<&[f64]>) -> Result<Self> {
        Ok(match kind {
            UtilityKind::Skr => Self::Skr,
            UtilityKind::Neg => Self::Neg,
            UtilityKind::LogProd => {
                let a: Vec<T> = match weights {
                    Some(w) => w.iter().map(|&x| T::lit(x)).collect(),
                    None => vec![T::one(); path_len],
                };
                if a.len() != path_len || a.iter().any(|&x| !(x > T::zero())) {
                    return Err(UtilityError::BadWeights);
                }
                Self::LogProd(a)
            }
        })
    }

    pub fn kind(&self) -> UtilityKind {
        match self {
            Self::Skr => UtilityKind::Skr,
            Self::Neg => UtilityKind::Neg,
            Self::LogProd(_) => UtilityKind::LogProd,
        }
    }

    /// `U(R, w_r)`; `wv` lists the Werner parameters along the path.
    pub fn value(&self, rate: T, wv: &[T]) -> Result<T> {
        if !(rate > T::zero()) {
            return Err(UtilityError::NonPositiveRate(rate.to_f64_lossy()));
        }
        let werner = e2e_werner(wv)?;
        match self {
            Self::LogProd(a) => {
                if a.len() != wv.len() {
                    return Err(UtilityError::BadWeights);
                }
                let mut u = rate.ln();
                for (&al, &wl) in a.iter().zip(wv) {
                    if wl <= T::zero() {
                        return Err(UtilityError::ZeroWerner);
                    }
                    u = u + al * wl.ln();
                }
                Ok(u)
            }
            _ => Ok((rate * factor(self.kind(), werner)?).ln()),
        }
    }

    /// `dU/dw_l` for every link on the path.
    pub fn grad_w(&self, wv: &[T]) -> Result<Vec<T>> {
        if wv.iter().any(|&w| w <= T::zero()) {
            return Err(UtilityError::ZeroWerner);
        }
        match self {
            Self::LogProd(a) => Ok(a.iter().zip(wv).map(|(&al, &wl)| al / wl).collect()),
            _ => {
                let werner = e2e_werner(wv)?;
                let wu = wu_prime(self.kind(), werner)?;
                Ok(wv.iter().map(|&wl| wu / wl).collect())
            }
        }
    }

    /// `d^2U/dw_l^2` for every link on the path (diagonal of the Hessian).
    pub fn hess_diag_w(&self, wv: &[T]) -> Result<Vec<T>> {
        if wv.iter().any(|&w| w <= T::zero()) {
            return Err(UtilityError::ZeroWerner);
        }
        match self {
            Self::LogProd(a) => Ok(a.iter().zip(wv).map(|(&al, &wl)| -al / (wl * wl)).collect()),
            _ => {
                let werner = e2e_werner(wv)?;
                let u2 = werner_second_derivative(self.kind(), werner)?;
                Ok(wv
                    .iter()
                    .map(|&wl| {
                        let others = werner / wl;
                        others * others * u2
                    })
                    .collect())
            }
        }
    }

    /// Whether `(rate, wv)` lies inside the utility's domain.
    pub fn in_domain(&self, rate: T, wv: &[T]) -> bool {
        self.value(rate, wv).is_ok()
    }
}
