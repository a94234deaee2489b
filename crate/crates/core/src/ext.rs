//! Extended reals in `[-inf, inf)` and log-space helpers.
//!
//! `-inf` stands for the logarithm of a zero probability and is a regular
//! value everywhere in the crate. `+inf` and NaN are rejected.

use crate::error::{Error, Result};

/// Rejects `+inf` and NaN.
pub fn check(value: f64, context: impl FnOnce() -> String) -> Result<f64> {
    if value.is_nan() || value == f64::INFINITY {
        Err(Error::NotExtendedReal { context: context() })
    } else {
        Ok(value)
    }
}

/// `true` when `value` lies in `[-inf, inf)`.
pub fn is_extended_real(value: f64) -> bool {
    !value.is_nan() && value != f64::INFINITY
}

/// `ln(exp(a) + exp(b))`, exact at `-inf`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Max-shifted `ln(sum(exp(x)))`. Empty input gives `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Natural log with `ln 0 = -inf`.
pub fn ln0(p: f64) -> f64 {
    if p == 0.0 {
        f64::NEG_INFINITY
    } else {
        p.ln()
    }
}

/// `x ln(x / y)` with `0 ln(0 / y) = 0` and `x ln(x / 0) = +inf` for `x > 0`.
pub fn xlogxy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if y == 0.0 {
        f64::INFINITY
    } else {
        x * (x / y).ln()
    }
}

/// Difference of two extended reals, `NaN`-free: `-inf - -inf = 0`.
pub fn gap(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_handles_neg_infinity() {
        assert_eq!(log_add_exp(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert_eq!(log_add_exp(f64::NEG_INFINITY, -1.5), -1.5);
        let v = log_add_exp(0.5f64.ln(), 0.25f64.ln());
        assert!((v - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_is_shift_stable() {
        let v = log_sum_exp(&[-1000.0, -1000.0]);
        assert!((v - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn rejects_positive_infinity() {
        assert!(check(f64::INFINITY, || "x".into()).is_err());
        assert!(check(f64::NAN, || "x".into()).is_err());
        assert_eq!(check(f64::NEG_INFINITY, || "x".into()).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn kl_term_conventions() {
        assert_eq!(xlogxy(0.0, 0.0), 0.0);
        assert_eq!(xlogxy(0.3, 0.0), f64::INFINITY);
    }
}

/// Serde adapter for extended-real fields: finite values as JSON numbers,
/// infinities as the strings `"-inf"` / `"inf"`.
pub mod extended {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            serializer.serialize_f64(*value)
        } else if value.is_nan() {
            serializer.serialize_str("nan")
        } else if *value > 0.0 {
            serializer.serialize_str("inf")
        } else {
            serializer.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
        match Raw::deserialize(deserializer)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => parse(&s).map_err(de::Error::custom),
        }
    }

    pub fn parse(s: &str) -> Result<f64, String> {
        match s.trim() {
            "-inf" | "-infinity" | "-Infinity" => Ok(f64::NEG_INFINITY),
            "inf" | "infinity" | "Infinity" => Ok(f64::INFINITY),
            other => other
                .parse::<f64>()
                .map_err(|_| format!("expected a number or \"-inf\", got {other:?}")),
        }
    }
}

/// Same as [`extended`] for `Vec<f64>`.
pub mod extended_vec {
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrapped(#[serde(with = "super::extended")] f64);

    pub fn serialize<S: Serializer>(values: &[f64], serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(values.len()))?;
        for v in values {
            seq.serialize_element(&Wrapped(*v))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<f64>, D::Error> {
        let raw: Vec<Wrapped> = Vec::deserialize(deserializer)?;
        Ok(raw.into_iter().map(|w| w.0).collect())
    }
}
